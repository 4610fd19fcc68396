//! Sense prediction, F1 scoring and table rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusName, GoldKeyMap, TargetInstance};
use crate::heads::{HeadError, MultiTaskModel};
use crate::inventory::{Pos, SenseInventory, SenseKey};
use crate::pairgen::{generate_pairs, GlossPair, PairError, PairOptions};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no candidate sense for {instance_id} ({lemma}) under any part of speech")]
    NoPredictionPossible { instance_id: String, lemma: String },
    #[error("prediction for unknown instance {0}")]
    UnknownInstance(String),
    #[error("malformed predictions file {path} line {line_no}")]
    MalformedPredictionLine { path: String, line_no: usize },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub predicted: SenseKey,
    pub scores: BTreeMap<SenseKey, f64>,
    pub backoff_used: bool,
    pub pos: Pos,
}

fn backoff(inst: &TargetInstance<'_>, inv: &SenseInventory) -> Result<Prediction, EvalError> {
    for pos in Pos::ALL {
        if let Some(key) = inv.first_sense(inst.lemma, pos) {
            log::debug!("backoff for {}: {} first sense under {}", inst.instance_id, inst.lemma, pos);
            return Ok(Prediction {
                instance_id: inst.instance_id.to_string(),
                predicted: key.clone(),
                scores: BTreeMap::new(),
                backoff_used: true,
                pos: inst.pos,
            });
        }
    }
    Err(EvalError::NoPredictionPossible {
        instance_id: inst.instance_id.to_string(),
        lemma: inst.lemma.to_string(),
    })
}

/// Argmax over candidate pairs, ties going to the lowest sense number.
pub fn argmax_pair<'a>(pairs: &'a [GlossPair], scores: &[f64]) -> Option<&'a GlossPair> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (p, &s)) in pairs.iter().zip(scores).enumerate() {
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && p.sense_number < pairs[b].sense_number),
        };
        if better {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| &pairs[i])
}

/// Predict with an arbitrary pair scorer.
pub fn predict_with(
    inst: &TargetInstance<'_>,
    inv: &SenseInventory,
    opts: PairOptions,
    mut score: impl FnMut(&GlossPair) -> Result<f64, EvalError>,
) -> Result<Prediction, EvalError> {
    let pairs = match generate_pairs(inst, inv, opts) {
        Ok(p) => p,
        Err(PairError::NoCandidates { .. }) => return backoff(inst, inv),
        Err(e) => return Err(e.into()),
    };
    let values = pairs.iter().map(&mut score).collect::<Result<Vec<f64>, _>>()?;
    let best = argmax_pair(&pairs, &values).expect("non-empty candidates");
    Ok(Prediction {
        instance_id: inst.instance_id.to_string(),
        predicted: best.sense_key.clone(),
        scores: pairs.iter().zip(&values).map(|(p, &v)| (p.sense_key.clone(), v)).collect(),
        backoff_used: false,
        pos: inst.pos,
    })
}

/// Score every candidate with the pairwise head's positive-class probability.
pub fn predict_instance(
    inst: &TargetInstance<'_>,
    inv: &SenseInventory,
    model: &MultiTaskModel,
    opts: PairOptions,
) -> Result<Prediction, EvalError> {
    predict_with(inst, inv, opts, |p| Ok(model.positive_probability(&p.context_text, &p.gloss_text)?))
}

/// Most-frequent-sense baseline.
pub fn mfs_predict(inst: &TargetInstance<'_>, inv: &SenseInventory) -> Result<Prediction, EvalError> {
    match inv.first_sense(inst.lemma, inst.pos) {
        Some(key) => Ok(Prediction {
            instance_id: inst.instance_id.to_string(),
            predicted: key.clone(),
            scores: BTreeMap::from([(key.clone(), 1.0)]),
            backoff_used: false,
            pos: inst.pos,
        }),
        None => backoff(inst, inv),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub answered: usize,
    pub total: usize,
}

impl Tally {
    fn add(&mut self, other: Tally) {
        self.correct += other.correct;
        self.answered += other.answered;
        self.total += other.total;
    }

    /// F1 on the 0-100 scale; `None` when there is nothing to score.
    pub fn f1(&self) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        if self.correct == 0 {
            return Some(0.0);
        }
        let p = self.correct as f64 / self.answered as f64;
        let r = self.correct as f64 / self.total as f64;
        Some(100.0 * 2.0 * p * r / (p + r))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub per_dataset: BTreeMap<String, Tally>,
    pub per_pos: BTreeMap<Pos, Tally>,
    pub overall: Tally,
    pub backoff_count: usize,
}

/// Tally one prediction set against its gold map. Gold instances without a
/// prediction count towards `total` only.
pub fn score_predictions(preds: &[Prediction], gold: &GoldKeyMap) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport::default();
    for p in preds {
        let keys = gold
            .get(&p.instance_id)
            .ok_or_else(|| EvalError::UnknownInstance(p.instance_id.clone()))?;
        let hit = usize::from(keys.contains(&p.predicted));
        let t = Tally {
            correct: hit,
            answered: 1,
            total: 1,
        };
        report.overall.add(Tally { total: 0, ..t });
        report.per_pos.entry(p.pos).or_default().add(t);
        report.backoff_count += usize::from(p.backoff_used);
    }
    report.overall.total = gold.len();
    Ok(report)
}

/// Score several datasets. Only those accepted by `in_aggregate` contribute
/// to the per-POS and overall figures.
pub fn score_splits(
    system: &str,
    splits: &[(CorpusName, &[Prediction], &GoldKeyMap)],
    in_aggregate: impl Fn(CorpusName) -> bool,
) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport {
        system: system.to_string(),
        ..EvalReport::default()
    };
    for (name, preds, gold) in splits {
        let r = score_predictions(preds, gold)?;
        report.per_dataset.insert(name.label().to_string(), r.overall);
        if in_aggregate(*name) {
            report.overall.add(r.overall);
            for (pos, t) in r.per_pos {
                report.per_pos.entry(pos).or_default().add(t);
            }
            report.backoff_count += r.backoff_count;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Markdown,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(ReportFormat::Text),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

pub const COLUMNS: [&str; 10] = ["SE07", "SE2", "SE3", "SE13", "SE15", "Noun", "Verb", "Adj", "Adv", "All"];

fn cell(t: Option<&Tally>) -> String {
    match t.and_then(Tally::f1) {
        Some(v) => format!("{v:.1}"),
        None => "-".to_string(),
    }
}

/// The ten table cells of one system, one decimal, `-` when absent.
pub fn row_cells(report: &EvalReport) -> Vec<String> {
    let mut cells: Vec<String> = COLUMNS[..5].iter().map(|c| cell(report.per_dataset.get(*c))).collect();
    cells.extend(Pos::ALL.iter().map(|p| cell(report.per_pos.get(p))));
    cells.push(cell(Some(&report.overall)));
    cells
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    render_reports(std::slice::from_ref(report), format)
}

/// One row per system. JSON output is an array of reports.
pub fn render_reports(reports: &[EvalReport], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            out = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])
            } else {
                serde_json::to_string_pretty(reports)
            }
            .expect("report serializes");
            out.push('\n');
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| System | {} |", COLUMNS.join(" | "));
            let _ = writeln!(out, "|---|{}", "---:|".repeat(COLUMNS.len()));
            for r in reports {
                let _ = writeln!(out, "| {} | {} |", r.system, row_cells(r).join(" | "));
            }
        }
        ReportFormat::Text => {
            let width = reports.iter().map(|r| r.system.len()).chain([6]).max().unwrap_or(6);
            let _ = write!(out, "{:<width$}", "System");
            for c in COLUMNS {
                let _ = write!(out, " {c:>6}");
            }
            out.push('\n');
            for r in reports {
                let _ = write!(out, "{:<width$}", r.system);
                for c in row_cells(r) {
                    let _ = write!(out, " {c:>6}");
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Lines of `instance_id sense_key`, in the given order.
pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<(), EvalError> {
    let mut s = String::new();
    for p in preds {
        let _ = writeln!(s, "{} {}", p.instance_id, p.predicted);
    }
    fs::write(path, s).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, SenseKey)>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || EvalError::MalformedPredictionLine {
            path: path.display().to_string(),
            line_no: i + 1,
        };
        let mut parts = line.split_whitespace();
        let (Some(id), Some(key), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        out.push((id.to_string(), SenseKey::parse(key).map_err(|_| bad())?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> SenseKey {
        SenseKey::parse(s).unwrap()
    }

    fn pred(id: &str, k: &str, pos: Pos) -> Prediction {
        Prediction {
            instance_id: id.into(),
            predicted: key(k),
            scores: BTreeMap::new(),
            backoff_used: false,
            pos,
        }
    }

    fn gold(items: &[(&str, &[&str])]) -> GoldKeyMap {
        items
            .iter()
            .map(|(id, ks)| (id.to_string(), ks.iter().map(|k| key(k)).collect()))
            .collect()
    }

    #[test]
    fn three_of_four() {
        let g = gold(&[
            ("a", &["x%1:00:00::"]),
            ("b", &["x%1:00:00::"]),
            ("c", &["x%1:00:00::"]),
            ("d", &["x%1:00:01::"]),
        ]);
        let preds: Vec<_> = ["a", "b", "c", "d"].iter().map(|id| pred(id, "x%1:00:00::", Pos::Noun)).collect();
        let r = score_predictions(&preds, &g).unwrap();
        assert_eq!(r.overall.f1(), Some(75.0));
    }

    #[test]
    fn multi_gold_and_unknown() {
        let g = gold(&[("a", &["x%1:00:00::", "x%1:00:01::"])]);
        let r = score_predictions(&[pred("a", "x%1:00:01::", Pos::Noun)], &g).unwrap();
        assert_eq!(r.overall.f1(), Some(100.0));
        assert!(matches!(
            score_predictions(&[pred("zz", "x%1:00:01::", Pos::Noun)], &g),
            Err(EvalError::UnknownInstance(_))
        ));
    }

    #[test]
    fn argmax_ties_prefer_lower_sense_number() {
        let mk = |n: u32, k: &str| GlossPair {
            instance_id: "i".into(),
            sense_key: key(k),
            sense_number: n,
            context_text: String::new(),
            gloss_text: String::new(),
            label: 0,
        };
        let pairs = vec![mk(1, "x%1:00:00::"), mk(2, "x%1:00:01::")];
        assert_eq!(argmax_pair(&pairs, &[0.9, 0.1]).unwrap().sense_number, 1);
        assert_eq!(argmax_pair(&pairs, &[0.1, 0.9]).unwrap().sense_number, 2);
        assert_eq!(argmax_pair(&pairs, &[0.5, 0.5]).unwrap().sense_number, 1);
        let rev = vec![mk(2, "x%1:00:01::"), mk(1, "x%1:00:00::")];
        assert_eq!(argmax_pair(&rev, &[0.5, 0.5]).unwrap().sense_number, 1);
    }

    #[test]
    fn rendering() {
        let mut r = EvalReport {
            system: "Sys".into(),
            ..Default::default()
        };
        r.overall = Tally {
            correct: 79,
            answered: 100,
            total: 100,
        };
        let text = render_report(&r, ReportFormat::Text);
        let row: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(row, ["Sys", "-", "-", "-", "-", "-", "-", "-", "-", "-", "79.0"]);
        let md = render_report(&r, ReportFormat::Markdown);
        assert!(md.lines().nth(2).unwrap().ends_with("| - | 79.0 |"));
        let back: EvalReport = serde_json::from_str(&render_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn predictions_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.key");
        write_predictions(&[pred("d0.s0.t0", "x%1:00:00::", Pos::Noun)], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "d0.s0.t0 x%1:00:00::\n");
        assert_eq!(read_predictions(&p).unwrap(), vec![("d0.s0.t0".to_string(), key("x%1:00:00::"))]);
    }
}
