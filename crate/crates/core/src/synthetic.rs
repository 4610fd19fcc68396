//! Small generated datasets: a WordNet-format inventory, annotated corpora in
//! the evaluation-framework XML layout, and task-tagged stand-in datasets for
//! multi-task pre-training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use quick_xml::escape::escape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::CorpusName;
use crate::heads::{TaskExample, TaskType};
use crate::inventory::Pos;
use crate::training::TaskDataset;

fn ss_type(pos: Pos) -> char {
    match pos {
        Pos::Noun => 'n',
        Pos::Verb => 'v',
        Pos::Adj => 'a',
        Pos::Adv => 'r',
    }
}

fn key_digit(pos: Pos) -> u8 {
    match pos {
        Pos::Noun => 1,
        Pos::Verb => 2,
        Pos::Adj => 3,
        Pos::Adv => 4,
    }
}

#[derive(Debug, Clone)]
struct SenseRow {
    lemma: String,
    pos: Pos,
    sense_number: u32,
    lex_filenum: u8,
    gloss: String,
}

impl SenseRow {
    fn key(&self) -> String {
        format!(
            "{}%{}:{:02}:{:02}::",
            self.lemma,
            key_digit(self.pos),
            self.lex_filenum,
            self.sense_number - 1
        )
    }
}

/// One synset per sense, written as `index.sense` plus `data.*` files.
#[derive(Debug, Clone, Default)]
pub struct WordNetBuilder {
    senses: Vec<SenseRow>,
}

impl WordNetBuilder {
    pub fn new() -> WordNetBuilder {
        WordNetBuilder::default()
    }

    /// Register a sense and return its sense key.
    pub fn sense(&mut self, lemma: &str, pos: Pos, sense_number: u32, lex_filenum: u8, gloss: &str) -> String {
        let row = SenseRow {
            lemma: lemma.to_string(),
            pos,
            sense_number,
            lex_filenum,
            gloss: gloss.to_string(),
        };
        let key = row.key();
        self.senses.push(row);
        key
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut offsets: BTreeMap<String, usize> = BTreeMap::new();
        for (pos, file) in [(Pos::Noun, "data.noun"), (Pos::Verb, "data.verb"), (Pos::Adj, "data.adj"), (Pos::Adv, "data.adv")] {
            let mut text = String::from("  1 generated sense inventory\n  2 \n");
            for s in self.senses.iter().filter(|s| s.pos == pos) {
                offsets.insert(s.key(), text.len());
                let _ = writeln!(
                    text,
                    "{:08} {:02} {} 01 {} {:x} 000 | {}",
                    text.len(),
                    s.lex_filenum,
                    ss_type(pos),
                    s.lemma,
                    s.sense_number - 1,
                    s.gloss
                );
            }
            fs::write(dir.join(file), text)?;
        }
        let mut rows: Vec<&SenseRow> = self.senses.iter().collect();
        rows.sort_by_key(|s| s.key());
        let mut index = String::new();
        for s in rows {
            let _ = writeln!(index, "{} {:08} {} 0", s.key(), offsets[&s.key()], s.sense_number);
        }
        fs::write(dir.join("index.sense"), index)
    }
}

/// A corpus token; `instance` carries the gold keys of an annotated target.
#[derive(Debug, Clone)]
pub struct SynthToken {
    pub surface: String,
    pub lemma: String,
    pub pos: String,
    pub instance: Option<Vec<String>>,
}

impl SynthToken {
    pub fn word(surface: &str, lemma: &str, pos: &str) -> SynthToken {
        SynthToken {
            surface: surface.to_string(),
            lemma: lemma.to_string(),
            pos: pos.to_string(),
            instance: None,
        }
    }

    pub fn target(surface: &str, lemma: &str, pos: &str, gold: &[&str]) -> SynthToken {
        SynthToken {
            instance: Some(gold.iter().map(|g| g.to_string()).collect()),
            ..SynthToken::word(surface, lemma, pos)
        }
    }
}

/// Write one document per entry of `docs` and the matching gold key file.
/// Instance ids follow `d000.s000.t000`.
pub fn write_corpus(xml_path: &Path, gold_path: &Path, source: &str, docs: &[Vec<Vec<SynthToken>>]) -> io::Result<()> {
    let mut xml = format!("<?xml version=\"1.0\" encoding=\"UTF-8\" ?>\n<corpus lang=\"en\" source=\"{}\">\n", escape(source));
    let mut gold = String::new();
    for (d, doc) in docs.iter().enumerate() {
        let _ = writeln!(xml, "<text id=\"d{d:03}\">");
        for (s, sent) in doc.iter().enumerate() {
            let _ = writeln!(xml, "<sentence id=\"d{d:03}.s{s:03}\">");
            let mut t = 0;
            for tok in sent {
                let attrs = format!("lemma=\"{}\" pos=\"{}\"", escape(&tok.lemma), escape(&tok.pos));
                match &tok.instance {
                    Some(keys) => {
                        let id = format!("d{d:03}.s{s:03}.t{t:03}");
                        t += 1;
                        let _ = writeln!(xml, "<instance id=\"{id}\" {attrs}>{}</instance>", escape(&tok.surface));
                        let _ = writeln!(gold, "{id} {}", keys.join(" "));
                    }
                    None => {
                        let _ = writeln!(xml, "<wf {attrs}>{}</wf>", escape(&tok.surface));
                    }
                }
            }
            xml.push_str("</sentence>\n");
        }
        xml.push_str("</text>\n");
    }
    xml.push_str("</corpus>\n");
    if let Some(p) = xml_path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(xml_path, xml)?;
    fs::write(gold_path, gold)
}

/// Shared inventory of the fixture corpora: `plant` (4 noun senses), `run`
/// (5 verb senses), `bright` (2 adjective senses), `quickly` (1 adverb sense).
pub fn fixture_inventory() -> (WordNetBuilder, BTreeMap<&'static str, Vec<String>>) {
    let mut wn = WordNetBuilder::new();
    let mut keys = BTreeMap::new();
    let spec: [(&str, Pos, u8, &[&str]); 4] = [
        (
            "plant",
            Pos::Noun,
            6,
            &[
                "buildings for carrying on industrial labor; \"they built a large plant to manufacture automobiles\"",
                "(botany) a living organism lacking the power of locomotion",
                "an actor situated in the audience whose acting is rehearsed but seems spontaneous",
                "something planted secretly for discovery by another",
            ],
        ),
        (
            "run",
            Pos::Verb,
            38,
            &[
                "move fast by using one's feet; \"Don't run--you'll be late\"",
                "flee; take to one's heels; cut and run",
                "stretch out over a distance, space, time, or scope",
                "direct or control; projects, businesses, etc.",
                "have a particular form",
            ],
        ),
        ("bright", Pos::Adj, 0, &["emitting or reflecting light readily", "characterized by quickness and ease in learning"]),
        ("quickly", Pos::Adv, 2, &["with rapid movements; \"he works quickly\""]),
    ];
    for (lemma, pos, lex, glosses) in spec {
        let ks: Vec<String> = glosses
            .iter()
            .enumerate()
            .map(|(i, g)| wn.sense(lemma, pos, i as u32 + 1, lex, g))
            .collect();
        keys.insert(lemma, ks);
    }
    (wn, keys)
}

/// Paths of a written corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFiles {
    pub name: CorpusName,
    pub xml: PathBuf,
    pub gold: PathBuf,
}

/// Two instances over 4 + 5 candidate senses, one gold each: 2 positive and
/// 7 negative pairs.
pub fn write_imbalance_fixture(dir: &Path) -> io::Result<(PathBuf, CorpusFiles)> {
    let (wn, keys) = fixture_inventory();
    let wn_dir = dir.join("wordnet");
    wn.write(&wn_dir)?;
    let sent = vec![
        SynthToken::word("The", "the", "DET"),
        SynthToken::target("plant", "plant", "NOUN", &[&keys["plant"][1]]),
        SynthToken::word("will", "will", "VERB"),
        SynthToken::target("run", "run", "VERB", &[&keys["run"][0]]),
        SynthToken::word("all", "all", "DET"),
        SynthToken::word("night", "night", "NOUN"),
        SynthToken::word(".", ".", "."),
    ];
    let files = CorpusFiles {
        name: CorpusName::SemCor,
        xml: dir.join("imbalance.data.xml"),
        gold: dir.join("imbalance.gold.key.txt"),
    };
    write_corpus(&files.xml, &files.gold, "imbalance-fixture", &[vec![sent]])?;
    Ok((wn_dir, files))
}

/// Four instances of which three have the first sense as gold.
pub fn write_mfs_fixture(dir: &Path) -> io::Result<(PathBuf, CorpusFiles)> {
    let (wn, keys) = fixture_inventory();
    let wn_dir = dir.join("wordnet");
    wn.write(&wn_dir)?;
    let s1 = vec![
        SynthToken::word("Workers", "worker", "NOUN"),
        SynthToken::target("ran", "run", "VERB", &[&keys["run"][0]]),
        SynthToken::word("to", "to", "PRT"),
        SynthToken::word("the", "the", "DET"),
        SynthToken::target("plant", "plant", "NOUN", &[&keys["plant"][1], &keys["plant"][3]]),
        SynthToken::word(".", ".", "."),
    ];
    let s2 = vec![
        SynthToken::word("A", "a", "DET"),
        SynthToken::target("bright", "bright", "ADJ", &[&keys["bright"][0]]),
        SynthToken::word("lamp", "lamp", "NOUN"),
        SynthToken::word("flickered", "flicker", "VERB"),
        SynthToken::target("quickly", "quickly", "ADV", &[&keys["quickly"][0]]),
        SynthToken::word(".", ".", "."),
    ];
    let files = CorpusFiles {
        name: CorpusName::SE07,
        xml: dir.join("mfs.data.xml"),
        gold: dir.join("mfs.gold.key.txt"),
    };
    write_corpus(&files.xml, &files.gold, "mfs-fixture", &[vec![s1], vec![s2]])?;
    Ok((wn_dir, files))
}

struct SenseSpec {
    gloss: &'static str,
    cues: [&'static str; 6],
}

struct LemmaSpec {
    lemma: &'static str,
    lex: [u8; 2],
    senses: [SenseSpec; 2],
}

const SEPARABLE: [LemmaSpec; 5] = [
    LemmaSpec {
        lemma: "bank",
        lex: [14, 17],
        senses: [
            SenseSpec {
                gloss: "a financial institution that accepts money deposits and makes loans",
                cues: ["money", "deposit", "loan", "cash", "account", "teller"],
            },
            SenseSpec {
                gloss: "sloping land beside a river or other body of water",
                cues: ["river", "water", "shore", "grass", "mud", "flood"],
            },
        ],
    },
    LemmaSpec {
        lemma: "bass",
        lex: [10, 13],
        senses: [
            SenseSpec {
                gloss: "the lowest part of the musical range played in a song",
                cues: ["music", "guitar", "song", "band", "melody", "concert"],
            },
            SenseSpec {
                gloss: "an edible freshwater fish caught in a lake",
                cues: ["fish", "lake", "hook", "boat", "caught", "dinner"],
            },
        ],
    },
    LemmaSpec {
        lemma: "crane",
        lex: [5, 6],
        senses: [
            SenseSpec {
                gloss: "a large long-necked bird with wings that wades in a marsh",
                cues: ["bird", "wings", "flew", "nest", "feathers", "marsh"],
            },
            SenseSpec {
                gloss: "a tall machine for lifting heavy loads at a construction site",
                cues: ["construction", "lifted", "tower", "heavy", "site", "beams"],
            },
        ],
    },
    LemmaSpec {
        lemma: "spring",
        lex: [28, 6],
        senses: [
            SenseSpec {
                gloss: "the season of growth when flowers bloom in warm weather",
                cues: ["season", "flowers", "april", "warm", "bloom", "weather"],
            },
            SenseSpec {
                gloss: "a metal coil that returns to its shape under tension",
                cues: ["coil", "metal", "mattress", "compressed", "bounce", "tension"],
            },
        ],
    },
    LemmaSpec {
        lemma: "pitcher",
        lex: [6, 18],
        senses: [
            SenseSpec {
                gloss: "a jug with a handle and spout for pouring lemonade or water",
                cues: ["pour", "lemonade", "jug", "table", "glass", "kitchen"],
            },
            SenseSpec {
                gloss: "the baseball player who throws the ball to the batter",
                cues: ["baseball", "batter", "mound", "threw", "strike", "inning"],
            },
        ],
    },
];

const FILLERS: [&str; 10] = ["the", "a", "near", "with", "and", "was", "saw", "by", "that", "then"];

/// Write the separable five-lemma WSD task: inventory plus one corpus per
/// name in `splits`, with `per_sense` sentences for every sense.
pub fn write_separable_wsd(dir: &Path, splits: &[(CorpusName, usize)], seed: u64) -> io::Result<(PathBuf, Vec<CorpusFiles>)> {
    let mut wn = WordNetBuilder::new();
    let mut keys = Vec::new();
    for l in &SEPARABLE {
        let k: Vec<String> = l
            .senses
            .iter()
            .enumerate()
            .map(|(i, s)| wn.sense(l.lemma, Pos::Noun, i as u32 + 1, l.lex[i], s.gloss))
            .collect();
        keys.push(k);
    }
    let wn_dir = dir.join("wordnet");
    wn.write(&wn_dir)?;

    let mut out = Vec::new();
    for (split_no, (name, per_sense)) in splits.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * split_no as u64 + 1));
        let mut sentences = Vec::new();
        for (li, l) in SEPARABLE.iter().enumerate() {
            for (si, s) in l.senses.iter().enumerate() {
                for _ in 0..*per_sense {
                    sentences.push(separable_sentence(l.lemma, s, &keys[li][si], &mut rng));
                }
            }
        }
        sentences.shuffle(&mut rng);
        let docs: Vec<Vec<Vec<SynthToken>>> = sentences.chunks(10).map(|c| c.to_vec()).collect();
        let stem = name.label().to_lowercase();
        let files = CorpusFiles {
            name: *name,
            xml: dir.join(format!("{stem}.data.xml")),
            gold: dir.join(format!("{stem}.gold.key.txt")),
        };
        write_corpus(&files.xml, &files.gold, &stem, &docs)?;
        out.push(files);
    }
    Ok((wn_dir, out))
}

fn separable_sentence(lemma: &str, sense: &SenseSpec, key: &str, rng: &mut impl Rng) -> Vec<SynthToken> {
    let mut cues: Vec<&str> = sense.cues.to_vec();
    cues.shuffle(rng);
    let n_cues = rng.gen_range(2..=3);
    let mut words: Vec<&str> = cues[..n_cues].to_vec();
    for _ in 0..rng.gen_range(2..=4) {
        words.push(FILLERS[rng.gen_range(0..FILLERS.len())]);
    }
    words.shuffle(rng);
    let at = rng.gen_range(0..=words.len());
    let mut toks: Vec<SynthToken> = words.iter().map(|w| SynthToken::word(w, w, "X")).collect();
    toks.insert(at, SynthToken::target(lemma, lemma, "NOUN", &[key]));
    toks.push(SynthToken::word(".", ".", "."));
    toks
}

const POSITIVE: [&str; 6] = ["good", "great", "excellent", "pleasant", "happy", "wonderful"];
const NEGATIVE: [&str; 6] = ["bad", "awful", "poor", "terrible", "sad", "boring"];
const TOPICS: [&str; 8] = ["movie", "food", "service", "trip", "book", "song", "room", "game"];
const WORDS: [&str; 24] = [
    "red", "blue", "green", "stone", "paper", "river", "cloud", "train", "apple", "chair", "horse", "light", "piano", "storm",
    "glass", "tiger", "bread", "window", "road", "coin", "lamp", "shirt", "field", "door",
];

fn pick<'a>(rng: &mut impl Rng, items: &[&'a str], n: usize) -> Vec<&'a str> {
    items.choose_multiple(rng, n).copied().collect()
}

/// One stand-in dataset per task type: sentiment (single sentence),
/// word overlap (similarity, Jaccard target in [0, 1]), containment (pairwise
/// classification) and retrieval (ranking).
pub fn task_datasets(n_train: usize, n_dev: usize, seed: u64) -> Vec<TaskDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = |task: TaskType, rng: &mut ChaCha8Rng| -> TaskExample {
        match task {
            TaskType::SingleSentenceClassification => {
                let label = rng.gen_range(0..2);
                let adj = if label == 1 { POSITIVE } else { NEGATIVE }[rng.gen_range(0..6)];
                let topic = TOPICS[rng.gen_range(0..TOPICS.len())];
                TaskExample::single(&format!("the {topic} was {adj}"), label)
            }
            TaskType::PairwiseSimilarity => {
                let a = pick(rng, &WORDS, 4);
                let keep = rng.gen_range(0..=4);
                let mut b: Vec<&str> = a[..keep].to_vec();
                for w in pick(rng, &WORDS, 8) {
                    if b.len() < 4 && !a.contains(&w) {
                        b.push(w);
                    }
                }
                b.shuffle(rng);
                let inter = keep as f64;
                let union = (a.len() + b.len()) as f64 - inter;
                TaskExample {
                    target: Some(inter / union),
                    ..TaskExample::pair(task, &a.join(" "), &b.join(" "))
                }
            }
            TaskType::PairwiseClassification => {
                let a = pick(rng, &WORDS, 5);
                let label = rng.gen_range(0..2);
                let b: Vec<&str> = if label == 1 {
                    let mut s = a[..2].to_vec();
                    s.shuffle(rng);
                    s
                } else {
                    WORDS.iter().filter(|w| !a.contains(w)).copied().collect::<Vec<_>>().choose_multiple(rng, 2).copied().collect()
                };
                TaskExample {
                    label: Some(label),
                    ..TaskExample::pair(task, &a.join(" "), &b.join(" "))
                }
            }
            TaskType::PairwiseRanking => {
                let q = pick(rng, &WORDS, 3);
                let others: Vec<&str> = WORDS.iter().filter(|w| !q.contains(w)).copied().collect();
                let pos = rng.gen_range(0..4);
                let cands: Vec<String> = (0..4)
                    .map(|i| {
                        let mut c = pick(rng, &others, 3);
                        if i == pos {
                            c[0] = q[0];
                            c[1] = q[1];
                        }
                        c.shuffle(rng);
                        c.join(" ")
                    })
                    .collect();
                TaskExample {
                    task,
                    text_a: q.join(" "),
                    text_b: None,
                    label: None,
                    target: None,
                    candidates: Some(cands),
                    positive_index: Some(pos),
                }
            }
        }
    };
    let names = ["sentiment", "overlap", "containment", "retrieval"];
    TaskType::ALL
        .iter()
        .zip(names)
        .map(|(&task, name)| TaskDataset {
            name: name.to_string(),
            task,
            train: (0..n_train).map(|_| gen(task, &mut rng)).collect(),
            dev: (0..n_dev).map(|_| gen(task, &mut rng)).collect(),
        })
        .collect()
}

/// Write each dataset as `<name>.train.jsonl` and `<name>.dev.jsonl`.
pub fn write_task_datasets(dir: &Path, sets: &[TaskDataset]) -> io::Result<Vec<(String, TaskType, PathBuf, PathBuf)>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for s in sets {
        let train = dir.join(format!("{}.train.jsonl", s.name));
        let dev = dir.join(format!("{}.dev.jsonl", s.name));
        for (path, rows) in [(&train, &s.train), (&dev, &s.dev)] {
            let mut text = String::new();
            for r in rows {
                text.push_str(&serde_json::to_string(r).map_err(io::Error::other)?);
                text.push('\n');
            }
            fs::write(path, text)?;
        }
        out.push((s.name.clone(), s.task, train, dev));
    }
    Ok(out)
}

/// Write a complete runnable demo: inventory, corpora, task datasets and a
/// `demo.toml` pipeline config using relative paths.
pub fn write_demo(dir: &Path) -> io::Result<PathBuf> {
    let splits = [
        (CorpusName::SemCor, 6),
        (CorpusName::SE07, 2),
        (CorpusName::SE2, 2),
        (CorpusName::SE3, 2),
        (CorpusName::SE13, 2),
        (CorpusName::SE15, 2),
    ];
    let (_, corpora) = write_separable_wsd(dir, &splits, 42)?;
    let tasks = write_task_datasets(&dir.join("tasks"), &task_datasets(48, 16, 42))?;
    let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();
    let mut cfg = String::from(
        "# Demo pipeline on generated data. Paths are relative to this file.\n\n\
         [paths]\nwordnet = \"wordnet\"\noutput = \"run\"\n\n\
         [encoder]\nd_model = 32\nn_layers = 1\nn_heads = 4\nmax_len = 48\ndropout_rate = 0.0\nvocab_min_freq = 1\n\n\
         [san]\nk_steps = 3\nstate_dim = 32\n\n\
         [train]\npretrain_epochs = 2\nfinetune_epochs = 20\nbatch_size = 8\nlr = 0.003\nn_augment = 3\n",
    );
    for c in &corpora {
        let _ = write!(cfg, "\n[[corpora]]\nname = \"{}\"\nxml = \"{}\"\ngold = \"{}\"\n", c.name.label(), rel(&c.xml), rel(&c.gold));
    }
    for (name, task, train, dev) in &tasks {
        let _ = write!(
            cfg,
            "\n[[tasks]]\nname = \"{name}\"\ntask = \"{}\"\ntrain = \"{}\"\ndev = \"{}\"\n",
            task.name(),
            rel(train),
            rel(dev)
        );
    }
    let path = dir.join("demo.toml");
    fs::write(&path, cfg)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DatasetSplit;
    use crate::inventory::{InventoryOptions, SenseInventory};

    #[test]
    fn fixture_inventory_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (wn_dir, files) = write_mfs_fixture(dir.path()).unwrap();
        let inv = SenseInventory::load_dir(&wn_dir, InventoryOptions::default()).unwrap();
        assert_eq!(inv.sense_count(), 12);
        assert_eq!(inv.candidates("run", Pos::Verb).len(), 5);
        assert_eq!(inv.first_sense("plant", Pos::Noun).unwrap().as_str(), "plant%1:06:00::");
        let cand = inv.candidates("plant", Pos::Noun);
        assert_eq!(cand[0].synset.gloss, "buildings for carrying on industrial labor");
        let split = DatasetSplit::load(&files.xml, &files.gold, files.name).unwrap();
        assert_eq!(split.instance_count(), 4);
        assert_eq!(split.gold["d000.s000.t001"].len(), 2);
    }

    #[test]
    fn separable_corpus_is_balanced() {
        let dir = tempfile::tempdir().unwrap();
        let (wn_dir, files) = write_separable_wsd(dir.path(), &[(CorpusName::SemCor, 3), (CorpusName::SE07, 1)], 7).unwrap();
        let inv = SenseInventory::load_dir(&wn_dir, InventoryOptions::default()).unwrap();
        assert_eq!(inv.sense_count(), 10);
        let train = DatasetSplit::load(&files[0].xml, &files[0].gold, CorpusName::SemCor).unwrap();
        assert_eq!(train.instance_count(), 30);
        let firsts = train
            .instances()
            .filter(|i| inv.first_sense(i.lemma, i.pos) == Some(&i.gold[0]))
            .count();
        assert_eq!(firsts, 15);
    }

    #[test]
    fn task_datasets_are_deterministic_and_valid() {
        let a = task_datasets(10, 4, 3);
        assert_eq!(a, task_datasets(10, 4, 3));
        for d in &a {
            assert_eq!(d.train.len(), 10);
            for ex in d.train.iter().chain(&d.dev) {
                assert_eq!(ex.task, d.task);
                ex.validate(crate::heads::Mode::Train).unwrap();
                if let Some(t) = ex.target {
                    assert!((0.0..=1.0).contains(&t));
                }
            }
        }
    }
}
