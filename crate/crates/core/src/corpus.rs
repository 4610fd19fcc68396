//! Evaluation-framework corpora: `corpus > text > sentence > (wf | instance)`
//! XML plus a gold-key file with lines `instance_id key1 [key2 ...]`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::{Pos, SenseKey};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("XML structure error in {} at line {line}: {message}", path.display())]
    XmlStructure {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("instance {0} has no gold key")]
    MissingGold(String),
    #[error("malformed gold line {line_no} in {}", path.display())]
    MalformedGoldLine { path: PathBuf, line_no: usize },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The named corpora of the standard English all-words setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CorpusName {
    SemCor,
    SE07,
    SE2,
    SE3,
    SE13,
    SE15,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Dev,
    Test,
}

impl CorpusName {
    pub const EVAL: [CorpusName; 5] = [
        CorpusName::SE07,
        CorpusName::SE2,
        CorpusName::SE3,
        CorpusName::SE13,
        CorpusName::SE15,
    ];

    pub fn role(self) -> SplitRole {
        match self {
            CorpusName::SemCor => SplitRole::Train,
            CorpusName::SE07 => SplitRole::Dev,
            _ => SplitRole::Test,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CorpusName::SemCor => "SemCor",
            CorpusName::SE07 => "SE07",
            CorpusName::SE2 => "SE2",
            CorpusName::SE3 => "SE3",
            CorpusName::SE13 => "SE13",
            CorpusName::SE15 => "SE15",
        }
    }
}

impl fmt::Display for CorpusName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CorpusName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "semcor" | "train" => Ok(CorpusName::SemCor),
            "se07" | "semeval2007" | "dev" => Ok(CorpusName::SE07),
            "se2" | "senseval2" => Ok(CorpusName::SE2),
            "se3" | "senseval3" => Ok(CorpusName::SE3),
            "se13" | "semeval2013" => Ok(CorpusName::SE13),
            "se15" | "semeval2015" => Ok(CorpusName::SE15),
            _ => Err(format!("unknown corpus name {s:?}")),
        }
    }
}

/// POS of a corpus token; `Other` covers determiners, punctuation and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenPos {
    Content(Pos),
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusToken {
    pub surface: String,
    pub lemma: String,
    pub pos: TokenPos,
    pub instance_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSentence {
    pub sentence_id: String,
    pub tokens: Vec<CorpusToken>,
}

pub type GoldKeyMap = BTreeMap<String, Vec<SenseKey>>;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: CorpusName,
    pub sentences: Vec<CorpusSentence>,
    pub gold: GoldKeyMap,
}

/// One annotated target occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetInstance<'a> {
    pub instance_id: &'a str,
    pub sentence: &'a CorpusSentence,
    pub token_index: usize,
    pub lemma: &'a str,
    pub pos: Pos,
    pub gold: &'a [SenseKey],
}

impl TargetInstance<'_> {
    pub fn surface(&self) -> &str {
        &self.sentence.tokens[self.token_index].surface
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_gold(path: &Path) -> Result<GoldKeyMap, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_gold(&text, path)
}

fn parse_gold(text: &str, path: &Path) -> Result<GoldKeyMap, CorpusError> {
    let mut gold = GoldKeyMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CorpusError::MalformedGoldLine {
            path: path.to_path_buf(),
            line_no: i + 1,
        };
        let mut fields = line.split_whitespace();
        let id = fields.next().ok_or_else(bad)?;
        let mut keys: Vec<SenseKey> = Vec::new();
        for f in fields {
            let k = SenseKey::parse(f).map_err(|_| bad())?;
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        if keys.is_empty() {
            return Err(bad());
        }
        gold.entry(id.to_string()).or_default().extend(keys);
        let list = gold.get_mut(id).unwrap();
        let mut seen = HashSet::new();
        list.retain(|k| seen.insert(k.clone()));
    }
    Ok(gold)
}

struct XmlCursor<'a> {
    path: &'a Path,
    text: &'a str,
}

impl XmlCursor<'_> {
    fn error(&self, pos: u64, message: impl Into<String>) -> CorpusError {
        let upto = (pos as usize).min(self.text.len());
        let line = self.text.as_bytes()[..upto].iter().filter(|&&b| b == b'\n').count() + 1;
        CorpusError::XmlStructure {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn attr(&self, e: &BytesStart<'_>, name: &str, pos: u64) -> Result<Option<String>, CorpusError> {
        for attr in e.attributes() {
            let attr = attr.map_err(|err| self.error(pos, err.to_string()))?;
            if attr.key.as_ref() == name {
                let v = attr
                    .normalized_value(XmlVersion::Implicit1_0)
                    .map_err(|err| self.error(pos, err.to_string()))?;
                return Ok(Some(v.into_owned()));
            }
        }
        Ok(None)
    }
}

struct OpenToken {
    lemma: String,
    pos: TokenPos,
    instance_id: Option<String>,
    surface: String,
}

pub fn parse_corpus_xml(text: &str, path: &Path) -> Result<Vec<CorpusSentence>, CorpusError> {
    let cur = XmlCursor { path, text };
    let mut reader = Reader::from_str(text);
    let mut stack: Vec<String> = Vec::new();
    let mut sentences = Vec::new();
    let mut sentence: Option<CorpusSentence> = None;
    let mut token: Option<OpenToken> = None;
    let mut seen_ids = HashSet::new();
    loop {
        let pos = reader.buffer_position();
        let event = reader
            .read_event()
            .map_err(|e| cur.error(reader.error_position(), e.to_string()))?;
        match event {
            Event::Start(e) => {
                let name = e.name().as_ref().to_string();
                let parent = stack.last().map(String::as_str);
                match (name.as_str(), parent) {
                    ("corpus", None) | ("text", Some("corpus")) => {}
                    ("sentence", Some("text")) => {
                        let id = cur
                            .attr(&e, "id", pos)?
                            .ok_or_else(|| cur.error(pos, "sentence without id"))?;
                        if !seen_ids.insert(id.clone()) {
                            return Err(cur.error(pos, format!("duplicate sentence id {id}")));
                        }
                        sentence = Some(CorpusSentence {
                            sentence_id: id,
                            tokens: Vec::new(),
                        });
                    }
                    ("wf" | "instance", Some("sentence")) => {
                        let lemma = cur.attr(&e, "lemma", pos)?.unwrap_or_default();
                        let tag = cur.attr(&e, "pos", pos)?.unwrap_or_default();
                        let instance_id = if name == "instance" {
                            Some(
                                cur.attr(&e, "id", pos)?
                                    .filter(|id| !id.is_empty())
                                    .ok_or_else(|| cur.error(pos, "instance without id"))?,
                            )
                        } else {
                            None
                        };
                        token = Some(OpenToken {
                            lemma,
                            pos: Pos::from_tag(&tag).map_or(TokenPos::Other, TokenPos::Content),
                            instance_id,
                            surface: String::new(),
                        });
                    }
                    (other, parent) => {
                        return Err(cur.error(
                            pos,
                            format!("unexpected element <{other}> inside {:?}", parent.unwrap_or("document")),
                        ))
                    }
                }
                stack.push(name);
            }
            Event::Empty(e) => {
                let name = e.name().as_ref().to_string();
                return Err(cur.error(pos, format!("unexpected empty element <{name}/>")));
            }
            Event::End(_) => {
                let name = stack.pop().unwrap_or_default();
                match name.as_str() {
                    "wf" | "instance" => {
                        let t = token.take().expect("open token");
                        let surface = t.surface.trim().to_string();
                        if surface.is_empty() {
                            return Err(cur.error(pos, "token without surface text"));
                        }
                        sentence.as_mut().expect("open sentence").tokens.push(CorpusToken {
                            surface,
                            lemma: t.lemma,
                            pos: t.pos,
                            instance_id: t.instance_id,
                        });
                    }
                    "sentence" => {
                        let s = sentence.take().expect("open sentence");
                        if s.tokens.is_empty() {
                            return Err(cur.error(pos, format!("sentence {} has no tokens", s.sentence_id)));
                        }
                        sentences.push(s);
                    }
                    _ => {}
                }
            }
            Event::Text(t) => {
                if let Some(tok) = token.as_mut() {
                    tok.surface.push_str(&t);
                } else if !t.trim().is_empty() {
                    return Err(cur.error(pos, "stray text outside a token"));
                }
            }
            Event::GeneralRef(r) => {
                let resolved = match r.resolve_char_ref() {
                    Ok(Some(c)) => c.to_string(),
                    _ => quick_xml::escape::resolve_predefined_entity(&r)
                        .ok_or_else(|| cur.error(pos, format!("unknown entity &{};", &*r)))?
                        .to_string(),
                };
                match token.as_mut() {
                    Some(tok) => tok.surface.push_str(&resolved),
                    None => return Err(cur.error(pos, "stray entity outside a token")),
                }
            }
            Event::CData(c) => {
                if let Some(tok) = token.as_mut() {
                    tok.surface.push_str(&c);
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !stack.is_empty() {
        return Err(cur.error(text.len() as u64, format!("unclosed element <{}>", stack.last().unwrap())));
    }
    Ok(sentences)
}

impl DatasetSplit {
    pub fn load(xml_path: &Path, gold_path: &Path, name: CorpusName) -> Result<DatasetSplit, CorpusError> {
        let text = fs::read_to_string(xml_path).map_err(io_err(xml_path))?;
        let sentences = parse_corpus_xml(&text, xml_path)?;
        let gold = load_gold(gold_path)?;
        let split = DatasetSplit { name, sentences, gold };
        for s in &split.sentences {
            for t in &s.tokens {
                if let Some(id) = &t.instance_id {
                    if !split.gold.contains_key(id) {
                        return Err(CorpusError::MissingGold(id.clone()));
                    }
                }
            }
        }
        log::info!(
            "loaded {}: {} sentences, {} annotated instances",
            name,
            split.sentences.len(),
            split.instance_count()
        );
        Ok(split)
    }

    /// Count of `instance` tokens, including ones skipped for lack of a POS.
    pub fn instance_count(&self) -> usize {
        self.sentences
            .iter()
            .flat_map(|s| &s.tokens)
            .filter(|t| t.instance_id.is_some())
            .count()
    }

    /// Annotated targets in document order. Instances with an unmappable POS
    /// are skipped with a warning.
    pub fn instances(&self) -> impl Iterator<Item = TargetInstance<'_>> + '_ {
        self.sentences.iter().flat_map(move |s| {
            s.tokens.iter().enumerate().filter_map(move |(i, t)| {
                let id = t.instance_id.as_deref()?;
                let TokenPos::Content(pos) = t.pos else {
                    log::warn!("skipping instance {id}: POS not mappable to the inventory");
                    return None;
                };
                Some(TargetInstance {
                    instance_id: id,
                    sentence: s,
                    token_index: i,
                    lemma: &t.lemma,
                    pos,
                    gold: self.gold.get(id).map(Vec::as_slice).unwrap_or(&[]),
                })
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const XML: &str = r#"<?xml version="1.0" encoding="UTF-8" ?>
<corpus lang="en" source="fixture">
<text id="d000">
<sentence id="d000.s000">
<wf lemma="the" pos="DET">The</wf>
<instance id="d000.s000.t000" lemma="objective" pos="NOUN">objectives</instance>
<wf lemma="be" pos="VERB">are</wf>
<instance id="d000.s000.t001" lemma="clear" pos="ADJ">clear</instance>
<wf lemma="." pos=".">.</wf>
</sentence>
<sentence id="d000.s001">
<wf lemma="we" pos="PRON">We</wf>
<instance id="d000.s001.t000" lemma="see" pos="verb">see</instance>
<wf lemma="&amp;" pos="CONJ">&amp;</wf>
<instance id="d000.s001.t001" lemma="see" pos="VERB">see</instance>
</sentence>
</text>
</corpus>
"#;
    const GOLD: &str = "d000.s000.t000 objective%1:09:00::\nd000.s000.t001 clear%3:00:00:: clear%5:00:00:open:00\nd000.s001.t000 see%2:39:00::\nd000.s001.t001 see%2:31:00::\n";

    fn load(xml: &str, gold: &str) -> Result<DatasetSplit, CorpusError> {
        let dir = tempfile::tempdir().unwrap();
        let x = dir.path().join("c.xml");
        let g = dir.path().join("c.gold.key.txt");
        fs::write(&x, xml).unwrap();
        fs::write(&g, gold).unwrap();
        DatasetSplit::load(&x, &g, CorpusName::SE07)
    }

    #[test]
    fn parses_fixture() {
        let split = load(XML, GOLD).unwrap();
        assert_eq!(split.sentences.len(), 2);
        assert_eq!(split.gold.len(), 4);
        assert_eq!(split.gold["d000.s000.t001"].len(), 2);
        let insts: Vec<_> = split.instances().collect();
        assert_eq!(insts.len(), 4);
        assert_eq!(insts[0].instance_id, "d000.s000.t000");
        assert_eq!(insts[0].surface(), "objectives");
        assert_eq!(insts[0].pos, Pos::Noun);
        assert_eq!(insts[1].pos, Pos::Adj);
        // same lemma twice in one sentence
        assert_eq!(insts[2].lemma, "see");
        assert_eq!(insts[3].lemma, "see");
        assert_ne!(insts[2].token_index, insts[3].token_index);
        assert_eq!(split.sentences[1].tokens[2].surface, "&");
    }

    #[test]
    fn one_sentence_one_instance() {
        let xml = r#"<corpus lang="en">
<text id="d000">
<sentence id="d000.s000">
<wf lemma="a" pos="DET">A</wf>
<instance id="d000.s000.t000" lemma="cat" pos="NOUN">cat</instance>
</sentence>
</text>
</corpus>"#;
        let split = load(xml, "d000.s000.t000 cat%1:05:00::\n").unwrap();
        assert_eq!(split.sentences.len(), 1);
        assert_eq!(split.gold.len(), 1);
        assert_eq!(split.instances().count(), 1);
    }

    #[test]
    fn zero_instances() {
        let xml = r#"<corpus><text id="d"><sentence id="d.s0"><wf lemma="hi" pos="X">hi</wf></sentence></text></corpus>"#;
        let split = load(xml, "").unwrap();
        assert_eq!(split.instances().count(), 0);
    }

    #[test]
    fn missing_gold_names_instance() {
        let gold: String = GOLD.lines().skip(1).map(|l| format!("{l}\n")).collect();
        match load(XML, &gold) {
            Err(CorpusError::MissingGold(id)) => assert_eq!(id, "d000.s000.t000"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_gold_line() {
        match load(XML, "d000.s000.t000\n") {
            Err(CorpusError::MalformedGoldLine { line_no, .. }) => assert_eq!(line_no, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structure_errors() {
        let bad = "<corpus><text id=\"d\"><wf lemma=\"x\" pos=\"X\">x</wf></text></corpus>";
        assert!(matches!(load(bad, ""), Err(CorpusError::XmlStructure { .. })));
        let unclosed = "<corpus><text id=\"d\"><sentence id=\"s\"><wf lemma=\"x\" pos=\"X\">x</wf>";
        assert!(matches!(load(unclosed, ""), Err(CorpusError::XmlStructure { .. })));
        let mismatched = "<corpus>\n<text id=\"d\">\n</corpus>";
        match load(mismatched, "") {
            Err(CorpusError::XmlStructure { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn other_pos_instances_are_skipped() {
        let xml = r#"<corpus><text id="d"><sentence id="d.s0"><instance id="d.s0.t0" lemma="x" pos="PRT">x</instance></sentence></text></corpus>"#;
        let split = load(xml, "d.s0.t0 x%1:01:00::\n").unwrap();
        assert_eq!(split.instance_count(), 1);
        assert_eq!(split.instances().count(), 0);
    }
}
