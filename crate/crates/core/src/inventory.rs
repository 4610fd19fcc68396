//! WordNet 3.0 sense inventory read from the plain-text database files
//! (`index.sense` plus `data.noun`, `data.verb`, `data.adj`, `data.adv`).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InventoryError {
    #[error("malformed line {line_no} in {}: {reason}", file.display())]
    MalformedLine {
        file: PathBuf,
        line_no: usize,
        reason: String,
    },
    #[error("sense key {0} references a synset absent from the data files")]
    DanglingKey(String),
    #[error("invalid sense key {0:?}")]
    InvalidSenseKey(String),
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse part of speech. Adjective satellites are folded into `Adj`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Adv,
}

impl Pos {
    pub const ALL: [Pos; 4] = [Pos::Noun, Pos::Verb, Pos::Adj, Pos::Adv];

    /// WordNet `ss_type` character (`n`, `v`, `a`, `s`, `r`).
    pub fn from_ss_type(c: &str) -> Option<Pos> {
        match c {
            "n" => Some(Pos::Noun),
            "v" => Some(Pos::Verb),
            "a" | "s" => Some(Pos::Adj),
            "r" => Some(Pos::Adv),
            _ => None,
        }
    }

    /// The numeric synset type that follows `%` in a sense key.
    pub fn from_key_digit(c: char) -> Option<Pos> {
        match c {
            '1' => Some(Pos::Noun),
            '2' => Some(Pos::Verb),
            '3' | '5' => Some(Pos::Adj),
            '4' => Some(Pos::Adv),
            _ => None,
        }
    }

    /// Case-insensitive tag mapping for corpus annotations.
    pub fn from_tag(tag: &str) -> Option<Pos> {
        match tag.to_ascii_uppercase().as_str() {
            "NOUN" | "N" => Some(Pos::Noun),
            "VERB" | "V" => Some(Pos::Verb),
            "ADJ" | "A" | "S" => Some(Pos::Adj),
            "ADV" | "R" => Some(Pos::Adv),
            _ => None,
        }
    }

    fn from_data_file(path: &Path) -> Option<Pos> {
        match path.extension()?.to_str()? {
            "noun" => Some(Pos::Noun),
            "verb" => Some(Pos::Verb),
            "adj" => Some(Pos::Adj),
            "adv" => Some(Pos::Adv),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Pos::Noun => "Noun",
            Pos::Verb => "Verb",
            Pos::Adj => "Adj",
            Pos::Adv => "Adv",
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Lowercase with spaces mapped to underscores, as in WordNet sense keys.
pub fn normalize_lemma(lemma: &str) -> String {
    lemma.trim().to_lowercase().replace(' ', "_")
}

/// A WordNet sense key such as `cat%1:05:00::`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SenseKey {
    raw: String,
    split: usize,
}

impl SenseKey {
    pub fn parse(raw: &str) -> Result<SenseKey, InventoryError> {
        let raw = raw.trim();
        let mut parts = raw.split('%');
        let (Some(lemma), Some(_), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(InventoryError::InvalidSenseKey(raw.to_string()));
        };
        if lemma.is_empty() {
            return Err(InventoryError::InvalidSenseKey(raw.to_string()));
        }
        let lemma = lemma.to_lowercase();
        let split = lemma.len();
        let lex_sense = &raw[raw.find('%').unwrap() + 1..];
        Ok(SenseKey {
            raw: format!("{lemma}%{lex_sense}"),
            split,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn lemma(&self) -> &str {
        &self.raw[..self.split]
    }

    pub fn lex_sense(&self) -> &str {
        &self.raw[self.split + 1..]
    }

    /// POS encoded by the synset-type digit; `None` for malformed keys.
    pub fn pos(&self) -> Option<Pos> {
        self.lex_sense().chars().next().and_then(Pos::from_key_digit)
    }
}

impl TryFrom<String> for SenseKey {
    type Error = InventoryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        SenseKey::parse(&s)
    }
}

impl From<SenseKey> for String {
    fn from(k: SenseKey) -> String {
        k.raw
    }
}

impl fmt::Display for SenseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynsetEntry {
    pub offset: u64,
    pub pos: Pos,
    pub gloss: String,
    pub lemmas: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct SenseSlot {
    key: SenseKey,
    sense_number: u32,
    synset: usize,
}

/// One candidate sense for a (lemma, POS) query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<'a> {
    pub key: &'a SenseKey,
    pub synset: &'a SynsetEntry,
    pub sense_number: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InventoryOptions {
    /// Keep quoted usage examples in the gloss text.
    pub gloss_include_examples: bool,
}

/// Immutable after load.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SenseInventory {
    synsets: Vec<SynsetEntry>,
    entries: BTreeMap<(String, Pos), Vec<SenseSlot>>,
}

/// Extract the definition part of a data-file gloss field.
pub fn extract_gloss(field: &str, include_examples: bool) -> String {
    let body = if include_examples {
        field
    } else {
        field.split('"').next().unwrap_or("")
    };
    body.trim().trim_end_matches(|c: char| c == ';' || c.is_whitespace()).to_string()
}

fn malformed(file: &Path, line_no: usize, reason: impl Into<String>) -> InventoryError {
    InventoryError::MalformedLine {
        file: file.to_path_buf(),
        line_no,
        reason: reason.into(),
    }
}

fn read(path: &Path) -> Result<String, InventoryError> {
    fs::read_to_string(path).map_err(|source| InventoryError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Strip the adjective syntactic marker, e.g. `galore(ip)` -> `galore`.
fn strip_marker(word: &str) -> &str {
    match word.find('(') {
        Some(i) if word.ends_with(')') => &word[..i],
        _ => word,
    }
}

fn parse_data_line(
    file: &Path,
    line_no: usize,
    line: &str,
    file_pos: Option<Pos>,
    opts: InventoryOptions,
) -> Result<SynsetEntry, InventoryError> {
    let (head, gloss_field) = match line.find(" | ") {
        Some(i) => (&line[..i], &line[i + 3..]),
        None => match line.find('|') {
            Some(i) => (&line[..i], &line[i + 1..]),
            None => return Err(malformed(file, line_no, "missing '|' gloss separator")),
        },
    };
    let fields: Vec<&str> = head.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(malformed(file, line_no, "too few fields"));
    }
    let offset: u64 = fields[0]
        .parse()
        .map_err(|_| malformed(file, line_no, "bad synset offset"))?;
    let pos = Pos::from_ss_type(fields[2])
        .ok_or_else(|| malformed(file, line_no, format!("bad ss_type {:?}", fields[2])))?;
    if let Some(expected) = file_pos {
        if expected != pos {
            return Err(malformed(file, line_no, "ss_type does not match data file"));
        }
    }
    let w_cnt = usize::from_str_radix(fields[3], 16)
        .map_err(|_| malformed(file, line_no, "bad word count"))?;
    if fields.len() < 4 + 2 * w_cnt {
        return Err(malformed(file, line_no, "word list shorter than w_cnt"));
    }
    let lemmas = (0..w_cnt)
        .map(|i| normalize_lemma(strip_marker(fields[4 + 2 * i])))
        .collect();
    let gloss = extract_gloss(gloss_field, opts.gloss_include_examples);
    if gloss.is_empty() {
        return Err(malformed(file, line_no, "empty gloss"));
    }
    Ok(SynsetEntry {
        offset,
        pos,
        gloss,
        lemmas,
    })
}

impl SenseInventory {
    pub fn load<P: AsRef<Path>>(
        index_sense_path: impl AsRef<Path>,
        data_file_paths: &[P],
    ) -> Result<SenseInventory, InventoryError> {
        Self::load_with(index_sense_path, data_file_paths, InventoryOptions::default())
    }

    /// Load from a WordNet `dict/` directory holding the standard file names.
    pub fn load_dir(dir: impl AsRef<Path>, opts: InventoryOptions) -> Result<SenseInventory, InventoryError> {
        let dir = dir.as_ref();
        let data: Vec<PathBuf> = ["data.noun", "data.verb", "data.adj", "data.adv"]
            .iter()
            .map(|f| dir.join(f))
            .filter(|p| p.exists())
            .collect();
        Self::load_with(dir.join("index.sense"), &data, opts)
    }

    pub fn load_with<P: AsRef<Path>>(
        index_sense_path: impl AsRef<Path>,
        data_file_paths: &[P],
        opts: InventoryOptions,
    ) -> Result<SenseInventory, InventoryError> {
        let mut synsets = Vec::new();
        let mut by_offset: HashMap<(Pos, u64), usize> = HashMap::new();
        for path in data_file_paths {
            let path = path.as_ref();
            let file_pos = Pos::from_data_file(path);
            let text = read(path)?;
            for (i, line) in text.lines().enumerate() {
                // license header lines start with two spaces
                if line.starts_with("  ") || line.trim().is_empty() {
                    continue;
                }
                let entry = parse_data_line(path, i + 1, line, file_pos, opts)?;
                by_offset.insert((entry.pos, entry.offset), synsets.len());
                synsets.push(entry);
            }
        }

        let index_path = index_sense_path.as_ref();
        let text = read(index_path)?;
        let mut entries: BTreeMap<(String, Pos), Vec<SenseSlot>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(malformed(index_path, i + 1, "expected 4 fields"));
            }
            let key = SenseKey::parse(fields[0])
                .map_err(|_| malformed(index_path, i + 1, "bad sense key"))?;
            let pos = key
                .pos()
                .ok_or_else(|| malformed(index_path, i + 1, "bad synset type in key"))?;
            let offset: u64 = fields[1]
                .parse()
                .map_err(|_| malformed(index_path, i + 1, "bad synset offset"))?;
            let sense_number: u32 = fields[2]
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| malformed(index_path, i + 1, "bad sense number"))?;
            fields[3]
                .parse::<u32>()
                .map_err(|_| malformed(index_path, i + 1, "bad tag count"))?;
            let synset = *by_offset
                .get(&(pos, offset))
                .ok_or_else(|| InventoryError::DanglingKey(key.as_str().to_string()))?;
            let slots = entries.entry((key.lemma().to_string(), pos)).or_default();
            if slots.iter().any(|s| s.sense_number == sense_number || s.key == key) {
                return Err(malformed(index_path, i + 1, "duplicate sense"));
            }
            slots.push(SenseSlot {
                key,
                sense_number,
                synset,
            });
        }
        for slots in entries.values_mut() {
            slots.sort_by_key(|s| s.sense_number);
        }
        let inv = SenseInventory { synsets, entries };
        log::info!(
            "loaded sense inventory: {} senses over {} (lemma, pos) entries",
            inv.sense_count(),
            inv.entries.len()
        );
        Ok(inv)
    }

    pub fn candidates(&self, lemma: &str, pos: Pos) -> Vec<Candidate<'_>> {
        self.entries
            .get(&(normalize_lemma(lemma), pos))
            .map(|slots| {
                slots
                    .iter()
                    .map(|s| Candidate {
                        key: &s.key,
                        synset: &self.synsets[s.synset],
                        sense_number: s.sense_number,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn first_sense(&self, lemma: &str, pos: Pos) -> Option<&SenseKey> {
        self.entries
            .get(&(normalize_lemma(lemma), pos))
            .and_then(|slots| slots.first())
            .map(|s| &s.key)
    }

    pub fn lookup(&self, key: &SenseKey) -> Option<Candidate<'_>> {
        let pos = key.pos()?;
        self.entries
            .get(&(key.lemma().to_string(), pos))?
            .iter()
            .find(|s| &s.key == key)
            .map(|s| Candidate {
                key: &s.key,
                synset: &self.synsets[s.synset],
                sense_number: s.sense_number,
            })
    }

    pub fn sense_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every sense key, grouped by (lemma, pos) in sorted order.
    pub fn keys(&self) -> impl Iterator<Item = &SenseKey> {
        self.entries.values().flat_map(|v| v.iter().map(|s| &s.key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const HEADER: &str = "  1 This software and database is being provided to you, the LICENSEE, by  \n  2 Princeton University under the following license.  \n";

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn bank_fixture(dir: &Path, index: &str) -> SenseInventory {
        let data = format!(
            "{HEADER}09213565 17 n 02 bank 0 bank_side 0 000 | sloping land (especially the slope beside a body of water); \"they pulled the canoe up on the bank\"  \n08420278 14 n 01 bank 1 000 | a financial institution that accepts deposits; \"he cashed a check at the bank\"  \n"
        );
        let d = write(dir, "data.noun", &data);
        let i = write(dir, "index.sense", index);
        SenseInventory::load(&i, &[d]).unwrap()
    }

    #[test]
    fn two_senses_for_bank() {
        let dir = tempfile::tempdir().unwrap();
        let inv = bank_fixture(
            dir.path(),
            "bank%1:14:00:: 08420278 2 20\nbank%1:17:01:: 09213565 1 25\nbank_side%1:17:00:: 09213565 1 0\n",
        );
        let c = inv.candidates("bank", Pos::Noun);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].sense_number, 1);
        assert_eq!(c[0].key.as_str(), "bank%1:17:01::");
        assert_eq!(
            c[0].synset.gloss,
            "sloping land (especially the slope beside a body of water)"
        );
        assert_eq!(c[1].synset.gloss, "a financial institution that accepts deposits");
        assert_eq!(c[0].synset.lemmas, vec!["bank", "bank_side"]);
        // sense 2 listed first on disk, first_sense still picks sense 1
        assert_eq!(inv.first_sense("bank", Pos::Noun).unwrap().as_str(), "bank%1:17:01::");
        assert_eq!(inv.candidates("Bank", Pos::Noun), c);
        assert!(inv.candidates("zzqx", Pos::Noun).is_empty());
        assert!(inv.first_sense("zzqx", Pos::Noun).is_none());
        assert!(inv.candidates("bank", Pos::Verb).is_empty());
        assert_eq!(inv.sense_count(), 3);
    }

    #[test]
    fn verbatim_cat_line() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(
            dir.path(),
            "data.noun",
            &format!("{HEADER}02121620 05 n 03 cat 0 true_cat 0 Felis_catus 0 000 | feline mammal usually having thick soft fur and no ability to roar: domestic cats; wildcats  \n"),
        );
        let i = write(dir.path(), "index.sense", "cat%1:05:00:: 02121620 1 10\n");
        let inv = SenseInventory::load(&i, &[d]).unwrap();
        let c = inv.candidates("cat", Pos::Noun);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].key.lemma(), "cat");
        assert_eq!(c[0].key.lex_sense(), "1:05:00::");
        assert_eq!(c[0].sense_number, 1);
        assert_eq!(c[0].synset.offset, 2121620);
        assert_eq!(
            c[0].synset.gloss,
            "feline mammal usually having thick soft fur and no ability to roar: domestic cats; wildcats"
        );
        assert_eq!(c[0].synset.lemmas[2], "felis_catus");
    }

    #[test]
    fn empty_index_gives_empty_inventory() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(dir.path(), "data.noun", HEADER);
        let i = write(dir.path(), "index.sense", "");
        let inv = SenseInventory::load(&i, &[d]).unwrap();
        assert!(inv.is_empty());
        assert_eq!(inv.sense_count(), 0);
    }

    #[test]
    fn dangling_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(dir.path(), "data.noun", &format!("{HEADER}00000001 03 n 01 x 0 000 | a thing\n"));
        let i = write(dir.path(), "index.sense", "y%1:03:00:: 00000002 1 0\n");
        match SenseInventory::load(&i, &[&d]) {
            Err(InventoryError::DanglingKey(k)) => assert_eq!(k, "y%1:03:00::"),
            other => panic!("{other:?}"),
        }
        let i = write(dir.path(), "index.sense", "x%1:03:00:: 00000001 1 0\nbroken line\n");
        match SenseInventory::load(&i, &[&d]) {
            Err(InventoryError::MalformedLine { line_no, .. }) => assert_eq!(line_no, 2),
            other => panic!("{other:?}"),
        }
        let bad = write(dir.path(), "data.verb", "00000001 03 n 01 x 0 000 | noun in verb file\n");
        assert!(matches!(
            SenseInventory::load(&i, &[&bad]),
            Err(InventoryError::MalformedLine { line_no: 1, .. })
        ));
    }

    #[test]
    fn satellite_folds_into_adj() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(
            dir.path(),
            "data.adj",
            "00001740 00 a 01 able 0 000 | having the necessary means or skill; \"able to swim\"\n00002000 00 s 01 able 0 000 | capable of performing\n",
        );
        let i = write(
            dir.path(),
            "index.sense",
            "able%3:00:00:: 00001740 1 10\nable%5:00:00:capable:00 00002000 2 0\n",
        );
        let inv = SenseInventory::load(&i, &[d]).unwrap();
        let c = inv.candidates("able", Pos::Adj);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|c| c.synset.pos == Pos::Adj));
        assert_eq!(c[0].synset.gloss, "having the necessary means or skill");
    }

    #[test]
    fn gloss_variants() {
        let f = " a financial institution; \"he cashed a check at the bank\"; \"that bank holds the mortgage\"  ";
        assert_eq!(extract_gloss(f, false), "a financial institution");
        assert_eq!(
            extract_gloss(f, true),
            "a financial institution; \"he cashed a check at the bank\"; \"that bank holds the mortgage\""
        );
    }

    #[test]
    fn sense_key_shape() {
        let k = SenseKey::parse("Cat%1:05:00::").unwrap();
        assert_eq!(k.as_str(), "cat%1:05:00::");
        assert_eq!(k.pos(), Some(Pos::Noun));
        assert!(SenseKey::parse("nopercent").is_err());
        assert!(SenseKey::parse("a%b%c").is_err());
        assert!(SenseKey::parse("%1:05:00::").is_err());
        assert_eq!(normalize_lemma("New York"), "new_york");
    }
}
