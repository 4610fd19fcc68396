//! Context-gloss pairs with weak-supervision markers.
//!
//! The target occurrence in the context is wrapped in standalone `"` marker
//! tokens and each gloss is prefixed with `lemma : `. Surface `"` characters
//! already present in a sentence are rewritten to `''` so the markers stay
//! unique.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusSentence, TargetInstance};
use crate::inventory::{Pos, SenseInventory, SenseKey};

pub const MARKER: &str = "\"";
pub const GLOSS_SEPARATOR: &str = " : ";

#[derive(Debug, Error)]
pub enum PairError {
    #[error("no candidate senses for {lemma} ({pos})")]
    NoCandidates { lemma: String, pos: Pos },
    #[error("token index {index} out of range for sentence of {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("pair file {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("pair file {} line {line_no}: {source}", path.display())]
    Parse {
        path: PathBuf,
        line_no: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossPair {
    pub instance_id: String,
    pub sense_key: SenseKey,
    pub sense_number: u32,
    #[serde(rename = "context")]
    pub context_text: String,
    #[serde(rename = "gloss")]
    pub gloss_text: String,
    pub label: u8,
}

impl GlossPair {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOptions {
    /// Also wrap whole-token occurrences of the lemma inside the definition.
    pub mark_gloss_target: bool,
}

fn clean_surface(s: &str) -> String {
    s.replace('"', "''")
}

/// Join the sentence with the token at `token_index` wrapped in markers.
pub fn render_context(sentence: &CorpusSentence, token_index: usize) -> Result<String, PairError> {
    let len = sentence.tokens.len();
    if token_index >= len {
        return Err(PairError::IndexOutOfRange {
            index: token_index,
            len,
        });
    }
    let mut parts: Vec<String> = Vec::with_capacity(len + 2);
    for (i, tok) in sentence.tokens.iter().enumerate() {
        if i == token_index {
            parts.push(MARKER.to_string());
            parts.push(clean_surface(&tok.surface));
            parts.push(MARKER.to_string());
        } else {
            parts.push(clean_surface(&tok.surface));
        }
    }
    Ok(parts.join(" "))
}

/// The sentence text without markers, as sent to back-translation.
pub fn plain_context(sentence: &CorpusSentence) -> String {
    sentence
        .tokens
        .iter()
        .map(|t| clean_surface(&t.surface))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Split a marked context back into `(plain text, target surface)`.
pub fn unmark_context(context: &str) -> Option<(String, String)> {
    let tokens: Vec<&str> = context.split(' ').collect();
    let open = tokens.iter().position(|t| *t == MARKER)?;
    let close = open + 1 + tokens[open + 1..].iter().position(|t| *t == MARKER)?;
    if close == open + 1 || tokens[close + 1..].contains(&MARKER) {
        return None;
    }
    let target = tokens[open + 1..close].join(" ");
    let plain: Vec<&str> = tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != open && *i != close)
        .map(|(_, t)| *t)
        .collect();
    Some((plain.join(" "), target))
}

/// Wrap the byte span `start..end` of `text` in markers.
pub fn mark_span(text: &str, start: usize, end: usize) -> String {
    let left = text[..start].trim_end();
    let target = text[start..end].trim();
    let right = text[end..].trim_start();
    [left, MARKER, target, MARKER, right]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

fn lower_char(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte spans of case-insensitive whole-token occurrences of `target` in
/// `text`. A match must not be preceded or followed by a word character.
pub fn find_whole_token(text: &str, target: &str) -> Vec<(usize, usize)> {
    let target: Vec<char> = target.chars().map(lower_char).collect();
    if target.is_empty() {
        return Vec::new();
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let lower: Vec<char> = chars.iter().map(|&(_, c)| lower_char(c)).collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i + target.len() <= chars.len() {
        let end = i + target.len();
        let matches = lower[i..end] == target[..]
            && (i == 0 || !is_word_char(chars[i - 1].1))
            && (end == chars.len() || !is_word_char(chars[end].1));
        if matches {
            let byte_end = chars.get(end).map_or(text.len(), |&(b, _)| b);
            spans.push((chars[i].0, byte_end));
            i = end;
        } else {
            i += 1;
        }
    }
    spans
}

fn render_gloss(lemma: &str, gloss: &str, opts: PairOptions) -> String {
    let body = if opts.mark_gloss_target {
        let display = lemma.replace('_', " ");
        let mut out = String::new();
        let mut last = 0;
        for (s, e) in find_whole_token(gloss, &display) {
            out.push_str(&gloss[last..s]);
            out.push_str(&format!("{MARKER} {} {MARKER}", &gloss[s..e]));
            last = e;
        }
        out.push_str(&gloss[last..]);
        out
    } else {
        gloss.to_string()
    };
    format!("{lemma}{GLOSS_SEPARATOR}{body}")
}

/// One pair per candidate sense, ordered by sense number.
pub fn generate_pairs(
    inst: &TargetInstance<'_>,
    inv: &SenseInventory,
    opts: PairOptions,
) -> Result<Vec<GlossPair>, PairError> {
    let candidates = inv.candidates(inst.lemma, inst.pos);
    if candidates.is_empty() {
        return Err(PairError::NoCandidates {
            lemma: inst.lemma.to_string(),
            pos: inst.pos,
        });
    }
    let context = render_context(inst.sentence, inst.token_index)?;
    let pairs: Vec<GlossPair> = candidates
        .iter()
        .map(|c| GlossPair {
            instance_id: inst.instance_id.to_string(),
            sense_key: c.key.clone(),
            sense_number: c.sense_number,
            context_text: context.clone(),
            gloss_text: render_gloss(inst.lemma, &c.synset.gloss, opts),
            label: u8::from(inst.gold.contains(c.key)),
        })
        .collect();
    if !inst.gold.is_empty() && pairs.iter().all(|p| p.label == 0) {
        log::warn!(
            "GoldNotInInventory: no gold key of {} among candidates of {} ({})",
            inst.instance_id,
            inst.lemma,
            inst.pos
        );
    }
    Ok(pairs)
}

pub fn write_pairs<'a>(
    pairs: impl IntoIterator<Item = &'a GlossPair>,
    out_path: &Path,
) -> Result<usize, PairError> {
    let io_err = |source| PairError::Io {
        path: out_path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(out_path).map_err(io_err)?);
    let mut n = 0;
    for p in pairs {
        serde_json::to_writer(&mut w, p).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
        n += 1;
    }
    w.flush().map_err(io_err)?;
    Ok(n)
}

pub fn read_pairs(path: &Path) -> Result<Vec<GlossPair>, PairError> {
    let io_err = |source| PairError::Io {
        path: path.to_path_buf(),
        source,
    };
    let r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut pairs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line).map_err(|source| PairError::Parse {
            path: path.to_path_buf(),
            line_no: i + 1,
            source,
        })?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusToken, TokenPos};
    use crate::inventory::SenseInventory;
    use std::fs;

    fn sentence(words: &[&str]) -> CorpusSentence {
        CorpusSentence {
            sentence_id: "s".into(),
            tokens: words
                .iter()
                .map(|w| CorpusToken {
                    surface: w.to_string(),
                    lemma: w.to_lowercase(),
                    pos: TokenPos::Other,
                    instance_id: None,
                })
                .collect(),
        }
    }

    fn objective_inventory(dir: &Path) -> SenseInventory {
        fs::write(
            dir.join("data.noun"),
            "05981230 09 n 02 aim 0 objective 0 000 | the goal intended to be attained (and which is believed to be attainable); \"the sole object of her trip was to see her children\"\n\
             06784639 10 n 01 objective 0 000 | the lens or system of lenses in a telescope or microscope that is nearest the object being viewed\n\
             00001000 03 n 01 zebra 0 000 | African equine with black and white stripes\n",
        )
        .unwrap();
        fs::write(
            dir.join("index.sense"),
            "objective%1:09:00:: 05981230 1 6\nobjective%1:06:00:: 06784639 2 0\nzebra%1:05:00:: 00001000 1 3\n",
        )
        .unwrap();
        SenseInventory::load_dir(dir, Default::default()).unwrap()
    }

    fn instance<'a>(
        s: &'a CorpusSentence,
        idx: usize,
        lemma: &'a str,
        gold: &'a [SenseKey],
    ) -> TargetInstance<'a> {
        TargetInstance {
            instance_id: "d0.s0.t0",
            sentence: s,
            token_index: idx,
            lemma,
            pos: Pos::Noun,
            gold,
        }
    }

    #[test]
    fn render_examples() {
        assert_eq!(render_context(&sentence(&["a", "b", "c"]), 1).unwrap(), "a \" b \" c");
        assert_eq!(render_context(&sentence(&["a", "b"]), 0).unwrap(), "\" a \" b");
        assert_eq!(render_context(&sentence(&["tok"]), 0).unwrap(), "\" tok \"");
        assert!(matches!(
            render_context(&sentence(&["tok"]), 1),
            Err(PairError::IndexOutOfRange { index: 1, len: 1 })
        ));
        assert_eq!(render_context(&sentence(&["\"", "x"]), 1).unwrap(), "'' \" x \"");
    }

    #[test]
    fn objectives_two_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let inv = objective_inventory(dir.path());
        let s = sentence(&["The", "objectives", "were", "clear"]);
        let gold = [SenseKey::parse("objective%1:09:00::").unwrap()];
        let pairs = generate_pairs(&instance(&s, 1, "objective", &gold), &inv, PairOptions::default()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs.iter().map(|p| p.label).collect::<Vec<_>>(), vec![1, 0]);
        assert_eq!(pairs[0].context_text, "The \" objectives \" were clear");
        assert_eq!(
            pairs[0].gloss_text,
            "objective : the goal intended to be attained (and which is believed to be attainable)"
        );
        assert!(pairs.iter().all(|p| p.gloss_text.starts_with("objective : ")));
        assert_eq!(pairs[1].sense_number, 2);
    }

    #[test]
    fn monosemous_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let inv = objective_inventory(dir.path());
        let s = sentence(&["a", "zebra"]);
        let gold = [SenseKey::parse("zebra%1:05:00::").unwrap()];
        let pairs = generate_pairs(&instance(&s, 1, "zebra", &gold), &inv, PairOptions::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].label, 1);
        assert!(matches!(
            generate_pairs(&instance(&s, 1, "okapi", &gold), &inv, PairOptions::default()),
            Err(PairError::NoCandidates { .. })
        ));
        // gold outside the candidate list: all negatives
        let skew = [SenseKey::parse("zebra%1:05:01::").unwrap()];
        let pairs = generate_pairs(&instance(&s, 1, "zebra", &skew), &inv, PairOptions::default()).unwrap();
        assert_eq!(pairs[0].label, 0);
    }

    #[test]
    fn only_the_instance_occurrence_is_marked() {
        let dir = tempfile::tempdir().unwrap();
        let inv = objective_inventory(dir.path());
        let words = ["our", "zebra", "met", "a", "big", "old", "grey", "zebra", "today"];
        let s = sentence(&words);
        let gold = [SenseKey::parse("zebra%1:05:00::").unwrap()];
        let pairs = generate_pairs(&instance(&s, 7, "zebra", &gold), &inv, PairOptions::default()).unwrap();
        let toks: Vec<&str> = pairs[0].context_text.split(' ').collect();
        let markers: Vec<usize> = toks.iter().enumerate().filter(|(_, t)| **t == MARKER).map(|(i, _)| i).collect();
        assert_eq!(markers, vec![7, 9]);
        assert_eq!(toks[1], "zebra");
        assert_eq!(toks[8], "zebra");
    }

    #[test]
    fn gloss_target_marking_toggle() {
        let opts = PairOptions { mark_gloss_target: true };
        assert_eq!(
            render_gloss("bank", "the bank of a river; not a banker", opts),
            "bank : the \" bank \" of a river; not a banker"
        );
    }

    #[test]
    fn unmark_roundtrip() {
        let s = sentence(&["The", "New York", "office"]);
        let marked = render_context(&s, 1).unwrap();
        let (plain, target) = unmark_context(&marked).unwrap();
        assert_eq!(plain, plain_context(&s));
        assert_eq!(target, "New York");
        assert_eq!(unmark_context("no markers"), None);
    }

    #[test]
    fn whole_token_search() {
        assert_eq!(find_whole_token("Cat, cat's catalog CAT", "cat").len(), 3);
        assert_eq!(find_whole_token("concatenate", "cat"), vec![]);
        let t = "the cat, sat";
        let spans = find_whole_token(t, "cat");
        assert_eq!(mark_span(t, spans[0].0, spans[0].1), "the \" cat \" , sat");
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let mk = |i: u32, gloss: &str| GlossPair {
            instance_id: format!("d0.s0.t{i}"),
            sense_key: SenseKey::parse("café%1:06:00::").unwrap(),
            sense_number: i + 1,
            context_text: "a \" café \" b".into(),
            gloss_text: format!("café : {gloss}"),
            label: (i % 2) as u8,
        };
        let pairs: Vec<GlossPair> = (0..5).map(|i| mk(i, "établissement où l’on sert — ☕")).collect();
        assert_eq!(write_pairs(&pairs, &path).unwrap(), 5);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 5);
        assert_eq!(read_pairs(&path).unwrap(), pairs);
        let first: serde_json::Value =
            serde_json::from_str(fs::read_to_string(&path).unwrap().lines().next().unwrap()).unwrap();
        let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["context", "gloss", "instance_id", "label", "sense_key", "sense_number"]);

        assert_eq!(write_pairs(&[], &path).unwrap(), 0);
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
    }
}
