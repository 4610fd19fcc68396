use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::Path;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

/// Lowercased whitespace vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Vocab {
        let mut all: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens: all, index }
    }

    /// Tokens seen at least `min_freq` times, most frequent first, ties
    /// broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)
    }

    pub fn load(path: &Path) -> io::Result<Vocab> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 4 || tokens[..4] != [PAD, UNK, CLS, SEP] {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "vocabulary lacks reserved tokens"));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, index })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    /// Position of the first second-segment token (sequence length if none).
    pub boundary: usize,
}

/// `[CLS] a.. [SEP]` or `[CLS] a.. [SEP] b.. [SEP]`, truncated longest-first
/// so that both separators survive.
pub fn tokenize(text_a: &str, text_b: Option<&str>, vocab: &Vocab, max_len: usize) -> Encoded {
    let mut a: Vec<usize> = words(text_a).map(|w| vocab.id(&w)).collect();
    let mut b: Option<Vec<usize>> = text_b.map(|t| words(t).map(|w| vocab.id(&w)).collect());
    match &mut b {
        Some(b) => {
            while a.len() + b.len() + 3 > max_len && (!a.is_empty() || !b.is_empty()) {
                if a.len() > b.len() {
                    a.pop();
                } else {
                    b.pop();
                }
            }
        }
        None => a.truncate(max_len.saturating_sub(2)),
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(&a);
    ids.push(SEP_ID);
    let boundary = ids.len();
    let mut segments = vec![0; ids.len()];
    if let Some(b) = b {
        ids.extend(&b);
        ids.push(SEP_ID);
        segments.resize(ids.len(), 1);
    }
    Encoded { ids, segments, boundary }
}
