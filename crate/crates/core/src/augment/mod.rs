//! Back-translation augmentation of positive pairs.
//!
//! Paraphrases of each positive context are produced through an external MT
//! service, kept only when the target surface form occurs exactly once in
//! both the original and the paraphrase, and sampled `n` at a time during
//! fine-tuning.

mod mt;

pub use mt::{
    back_translate, back_translate_with_retry, HttpTranslator, MtError, RetryPolicy, TranslationRoute, Translator,
};

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairgen::{find_whole_token, mark_span, unmark_context, GlossPair};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{} line {line_no}: {source}", path.display())]
    Parse {
        path: PathBuf,
        line_no: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TargetAbsent,
    TargetMultiple,
    /// The original context does not hold exactly one occurrence.
    OriginalMultiple,
    Identical,
    /// Same text as a paraphrase already accepted for this instance.
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(RejectReason),
}

impl FilterDecision {
    pub fn is_accept(self) -> bool {
        self == FilterDecision::Accept
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Counts case-insensitive whole-token occurrences of `target`.
pub fn count_occurrences(text: &str, target: &str) -> usize {
    find_whole_token(text, target).len()
}

pub fn occurrence_filter(original: &str, paraphrase: &str, target: &str) -> FilterDecision {
    if count_occurrences(original, target) != 1 {
        return FilterDecision::Reject(RejectReason::OriginalMultiple);
    }
    if normalize_whitespace(original) == normalize_whitespace(paraphrase) {
        return FilterDecision::Reject(RejectReason::Identical);
    }
    match count_occurrences(paraphrase, target) {
        0 => FilterDecision::Reject(RejectReason::TargetAbsent),
        1 => FilterDecision::Accept,
        _ => FilterDecision::Reject(RejectReason::TargetMultiple),
    }
}

/// Re-insert weak-supervision markers around the single target occurrence.
pub fn mark_paraphrase(paraphrase: &str, target: &str) -> Option<String> {
    match find_whole_token(paraphrase, target)[..] {
        [(s, e)] => Some(mark_span(paraphrase, s, e)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub source_instance_id: String,
    pub route: TranslationRoute,
    pub paraphrase: String,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEntry {
    Translation(AugmentationRecord),
    RouteSkipped {
        source_instance_id: String,
        route: TranslationRoute,
        cause: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub instance_id: String,
    /// Target surface form from the original context.
    pub target: String,
    pub original: String,
    pub paraphrases: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AugmentationPool {
    entries: BTreeMap<String, PoolEntry>,
}

impl AugmentationPool {
    pub fn get(&self, instance_id: &str) -> Option<&PoolEntry> {
        self.entries.get(instance_id)
    }

    pub fn paraphrases(&self, instance_id: &str) -> &[String] {
        self.entries
            .get(instance_id)
            .map(|e| e.paraphrases.as_slice())
            .unwrap_or(&[])
    }

    pub fn insert(&mut self, entry: PoolEntry) {
        self.entries.insert(entry.instance_id.clone(), entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &PoolEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_paraphrases(&self) -> usize {
        self.entries.values().map(|e| e.paraphrases.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), AugmentError> {
        write_jsonl(path, self.entries.values())
    }

    pub fn load(path: &Path) -> Result<AugmentationPool, AugmentError> {
        let mut pool = AugmentationPool::default();
        for entry in read_jsonl::<PoolEntry>(path)? {
            pool.insert(entry);
        }
        Ok(pool)
    }
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<(), AugmentError> {
    let io_err = |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AugmentError> {
    let io_err = |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| AugmentError::Parse {
            path: path.to_path_buf(),
            line_no: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolOptions {
    pub retry: RetryPolicy,
    pub workers: usize,
}

impl Default for PoolOptions {
    fn default() -> Self {
        PoolOptions {
            retry: RetryPolicy::default(),
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolBuild {
    pub pool: AugmentationPool,
    pub audit: Vec<AuditEntry>,
}

/// Back-translate every distinct positive context along every route. A route
/// that keeps failing after the retry policy is skipped and noted in the audit.
pub fn build_pool<'a>(
    positives: impl IntoIterator<Item = &'a GlossPair>,
    routes: &[TranslationRoute],
    client: &dyn Translator,
    opts: PoolOptions,
) -> PoolBuild {
    let mut sources: Vec<(String, String, String)> = Vec::new();
    let mut seen = HashSet::new();
    for pair in positives {
        if !pair.is_positive() {
            log::warn!("build_pool: ignoring negative pair for {}", pair.instance_id);
            continue;
        }
        if !seen.insert(pair.instance_id.clone()) {
            continue;
        }
        match unmark_context(&pair.context_text) {
            Some((plain, target)) => sources.push((pair.instance_id.clone(), plain, target)),
            None => log::warn!("build_pool: context of {} lacks markers", pair.instance_id),
        }
    }

    let jobs: Vec<(usize, usize)> = (0..sources.len())
        .flat_map(|s| (0..routes.len()).map(move |r| (s, r)))
        .collect();
    let results: Mutex<Vec<Option<Result<String, MtError>>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = opts.workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(s, r)) = jobs.get(j) else { break };
                let out = back_translate_with_retry(&sources[s].1, &routes[r], client, opts.retry);
                results.lock().unwrap()[j] = Some(out);
            });
        }
    });
    let results = results.into_inner().unwrap();

    let mut build = PoolBuild::default();
    for (s, (id, plain, target)) in sources.iter().enumerate() {
        let mut entry = PoolEntry {
            instance_id: id.clone(),
            target: target.clone(),
            original: plain.clone(),
            paraphrases: Vec::new(),
        };
        let mut kept = HashSet::new();
        for (r, route) in routes.iter().enumerate() {
            match results[s * routes.len() + r].clone().expect("job completed") {
                Err(e) => build.audit.push(AuditEntry::RouteSkipped {
                    source_instance_id: id.clone(),
                    route: route.clone(),
                    cause: e.to_string(),
                }),
                Ok(paraphrase) => {
                    let mut decision = occurrence_filter(plain, &paraphrase, target);
                    if decision.is_accept() && !kept.insert(normalize_whitespace(&paraphrase)) {
                        decision = FilterDecision::Reject(RejectReason::Duplicate);
                    }
                    let reject_reason = match decision {
                        FilterDecision::Accept => {
                            entry.paraphrases.push(paraphrase.clone());
                            None
                        }
                        FilterDecision::Reject(reason) => Some(reason),
                    };
                    build.audit.push(AuditEntry::Translation(AugmentationRecord {
                        source_instance_id: id.clone(),
                        route: route.clone(),
                        paraphrase,
                        accepted: reject_reason.is_none(),
                        reject_reason,
                    }));
                }
            }
        }
        build.pool.insert(entry);
    }
    log::info!(
        "augmentation pool: {} instances, {} accepted paraphrases",
        build.pool.len(),
        build.pool.total_paraphrases()
    );
    build
}

/// Draw `min(n, pool size)` paraphrases without replacement.
pub fn sample_augmented(pool: &AugmentationPool, instance_id: &str, n: usize, seed: u64) -> Vec<String> {
    let items = pool.paraphrases(instance_id);
    let k = n.min(items.len());
    if k == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, items.len(), k)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    pub positives: usize,
    pub negatives: usize,
    /// `None` when there are no positives (ratio would be infinite).
    pub ratio: Option<f64>,
}

impl ImbalanceStats {
    pub fn no_positives(&self) -> bool {
        self.positives == 0
    }
}

pub fn imbalance_stats<'a>(pairs: impl IntoIterator<Item = &'a GlossPair>) -> ImbalanceStats {
    let (mut positives, mut negatives) = (0, 0);
    for p in pairs {
        if p.is_positive() {
            positives += 1;
        } else {
            negatives += 1;
        }
    }
    let ratio = (positives > 0).then(|| negatives as f64 / positives as f64);
    if ratio.is_none() {
        log::warn!("imbalance ratio undefined: no positive pairs ({negatives} negatives)");
    }
    ImbalanceStats {
        positives,
        negatives,
        ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inventory::SenseKey;
    use std::collections::HashMap;
    use std::time::Duration;

    fn pair(id: &str, context: &str, label: u8) -> GlossPair {
        GlossPair {
            instance_id: id.into(),
            sense_key: SenseKey::parse("cat%1:05:00::").unwrap(),
            sense_number: 1,
            context_text: context.into(),
            gloss_text: "cat : feline mammal".into(),
            label,
        }
    }

    struct Table(HashMap<(String, String), String>);
    impl Translator for Table {
        fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String, MtError> {
            if tgt == "de" {
                return Err(MtError::MtUnavailable {
                    hop: format!("{src}->{tgt}"),
                    cause: "down".into(),
                });
            }
            Ok(self
                .0
                .get(&(text.to_string(), tgt.to_string()))
                .cloned()
                .unwrap_or_else(|| text.to_string()))
        }
    }

    fn fast() -> PoolOptions {
        PoolOptions {
            retry: RetryPolicy {
                attempts: 3,
                initial_backoff: Duration::from_millis(1),
            },
            workers: 2,
        }
    }

    #[test]
    fn filter_cases() {
        let o = "the cat sat on the mat";
        assert_eq!(occurrence_filter(o, "a cat was sitting on the mat", "cat"), FilterDecision::Accept);
        assert_eq!(
            occurrence_filter(o, "the cat saw another cat", "cat"),
            FilterDecision::Reject(RejectReason::TargetMultiple)
        );
        assert_eq!(
            occurrence_filter(o, "the feline sat on the mat", "cat"),
            FilterDecision::Reject(RejectReason::TargetAbsent)
        );
        assert_eq!(
            occurrence_filter(o, " the  cat sat on the mat ", "cat"),
            FilterDecision::Reject(RejectReason::Identical)
        );
        assert_eq!(
            occurrence_filter("cat and cat", "a cat", "cat"),
            FilterDecision::Reject(RejectReason::OriginalMultiple)
        );
        assert_eq!(occurrence_filter(o, "The CAT, it sat.", "cat"), FilterDecision::Accept);
        assert_eq!(
            occurrence_filter(o, "the catalogue sat", "cat"),
            FilterDecision::Reject(RejectReason::TargetAbsent)
        );
    }

    #[test]
    fn marking_paraphrases() {
        assert_eq!(mark_paraphrase("A cat, sitting.", "cat").unwrap(), "A \" cat \" , sitting.");
        assert_eq!(mark_paraphrase("cat cat", "cat"), None);
    }

    #[test]
    fn pool_three_routes() {
        let routes: Vec<TranslationRoute> = ["en-fr-en", "en-es-en", "en-it-en"].iter().map(|r| r.parse().unwrap()).collect();
        // each route produces a distinct paraphrase
        struct PerRoute;
        impl Translator for PerRoute {
            fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String, MtError> {
                Ok(if tgt == "en" { format!("{text} ({src})") } else { text.to_string() })
            }
        }
        let pairs = [pair("i1", "the \" cat \" sat on the mat", 1)];
        let build = build_pool(&pairs, &routes, &PerRoute, fast());
        assert_eq!(build.pool.paraphrases("i1").len(), 3);
        assert_eq!(build.pool.paraphrases("i1")[0], "the cat sat on the mat (fr)");
        assert_eq!(build.audit.len(), 3);
        assert_eq!(build.pool.get("i1").unwrap().target, "cat");

        // identical outputs are all rejected
        let identity = Table(HashMap::new());
        let ok_routes: Vec<TranslationRoute> = ["en-fr-en", "en-es-en"].iter().map(|r| r.parse().unwrap()).collect();
        let build = build_pool(&pairs, &ok_routes, &identity, fast());
        assert!(build.pool.paraphrases("i1").is_empty());
        assert!(build.audit.iter().all(|a| matches!(
            a,
            AuditEntry::Translation(AugmentationRecord { reject_reason: Some(RejectReason::Identical), .. })
        )));
    }

    #[test]
    fn failing_route_is_skipped() {
        let mut t = HashMap::new();
        t.insert(("the cat sat".to_string(), "en".to_string()), "a cat sat".to_string());
        let routes: Vec<TranslationRoute> = ["en-de-en", "en-fr-en"].iter().map(|r| r.parse().unwrap()).collect();
        let pairs = [pair("i1", "the \" cat \" sat", 1), pair("i1", "the \" cat \" sat", 1)];
        let build = build_pool(&pairs, &routes, &Table(t), fast());
        assert_eq!(build.pool.paraphrases("i1"), ["a cat sat"]);
        assert!(matches!(&build.audit[0], AuditEntry::RouteSkipped { route, .. } if route.to_string() == "en-de-en"));
        assert_eq!(build.audit.len(), 2);
    }

    fn pool_of(n: usize) -> AugmentationPool {
        let mut pool = AugmentationPool::default();
        pool.insert(PoolEntry {
            instance_id: "i".into(),
            target: "cat".into(),
            original: "cat".into(),
            paraphrases: (0..n).map(|i| format!("p{i} cat")).collect(),
        });
        pool
    }

    #[test]
    fn sampling() {
        let pool = pool_of(5);
        let a = sample_augmented(&pool, "i", 3, 7);
        assert_eq!(a.len(), 3);
        assert_eq!(a, sample_augmented(&pool, "i", 3, 7));
        let unique: HashSet<_> = a.iter().collect();
        assert_eq!(unique.len(), 3);
        let mut both = sample_augmented(&pool_of(2), "i", 3, 7);
        both.sort();
        assert_eq!(both, ["p0 cat", "p1 cat"]);
        assert!(sample_augmented(&pool, "i", 0, 7).is_empty());
        assert!(sample_augmented(&pool, "missing", 3, 7).is_empty());
    }

    #[test]
    fn pool_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let pool = pool_of(3);
        pool.save(&path).unwrap();
        assert_eq!(AugmentationPool::load(&path).unwrap(), pool);
    }

    #[test]
    fn imbalance() {
        let mk = |pos: usize, neg: usize| -> Vec<GlossPair> {
            (0..pos).map(|_| pair("i", "\" cat \"", 1)).chain((0..neg).map(|_| pair("i", "\" cat \"", 0))).collect()
        };
        assert_eq!(imbalance_stats(&mk(1, 8)).ratio, Some(8.0));
        assert_eq!(imbalance_stats(&mk(3, 0)).ratio, Some(0.0));
        let s = imbalance_stats(&mk(2, 7));
        assert_eq!((s.positives, s.negatives, s.ratio), (2, 7, Some(3.5)));
        let s = imbalance_stats(&mk(0, 4));
        assert!(s.no_positives());
        assert_eq!(s.ratio, None);
    }
}
