use std::collections::BTreeMap;

use proptest::prelude::*;

use wsd_core::augment::{count_occurrences, mark_paraphrase};
use wsd_core::corpus::{CorpusName, DatasetSplit};
use wsd_core::eval::{predict_with, score_predictions, Prediction};
use wsd_core::heads::ranking_loss;
use wsd_core::inventory::{InventoryOptions, Pos, SenseInventory, SenseKey};
use wsd_core::pairgen::PairOptions;
use wsd_core::synthetic;

fn fixture() -> (tempfile::TempDir, SenseInventory, DatasetSplit) {
    let dir = tempfile::tempdir().unwrap();
    let (wn, f) = synthetic::write_mfs_fixture(dir.path()).unwrap();
    let inv = SenseInventory::load_dir(&wn, InventoryOptions::default()).unwrap();
    let split = DatasetSplit::load(&f.xml, &f.gold, f.name).unwrap();
    (dir, inv, split)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn argmax_survives_increasing_transforms(scores in prop::collection::vec(-5.0f64..5.0, 5), a in 0.1f64..4.0, b in -3.0f64..3.0) {
        let (_dir, inv, split) = fixture();
        let run = split.instances().find(|i| i.lemma == "run").unwrap();
        let pick = |f: &dyn Fn(f64) -> f64| {
            let mut i = 0;
            predict_with(&run, &inv, PairOptions::default(), |_| { i += 1; Ok(f(scores[i - 1])) }).unwrap().predicted
        };
        let base = pick(&|x| x);
        prop_assert_eq!(&base, &pick(&|x| a * x + b));
        prop_assert_eq!(&base, &pick(&|x| x.exp()));
        prop_assert_eq!(&base, &pick(&|x| (a * x).tanh() + x.powi(3)));
    }

    #[test]
    fn ranking_loss_is_shift_invariant(scores in prop::collection::vec(-10.0f64..10.0, 1..8), shift in -50.0f64..50.0, pick in 0usize..8) {
        let p = pick % scores.len();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let a = ranking_loss(&scores, p).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - ranking_loss(&shifted, p).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn all_correct_scores_100(n in 1usize..30) {
        let key = SenseKey::parse("w%1:00:00::").unwrap();
        let gold = (0..n).map(|i| (format!("i{i}"), vec![key.clone()])).collect();
        let preds: Vec<Prediction> = (0..n)
            .map(|i| Prediction {
                instance_id: format!("i{i}"),
                predicted: key.clone(),
                scores: BTreeMap::new(),
                backoff_used: false,
                pos: Pos::Noun,
            })
            .collect();
        prop_assert_eq!(score_predictions(&preds, &gold).unwrap().overall.f1(), Some(100.0));
    }

    #[test]
    fn marked_paraphrase_keeps_one_target(words in prop::collection::vec("[a-z]{1,6}", 0..8), at in 0usize..9) {
        let mut words: Vec<String> = words.into_iter().filter(|w| w != "bank").collect();
        let at = at.min(words.len());
        words.insert(at, "bank".into());
        let text = words.join(" ");
        let marked = mark_paraphrase(&text, "bank").unwrap();
        prop_assert_eq!(count_occurrences(&marked, "bank"), 1);
        prop_assert!(marked.contains("\" bank \""));
        prop_assert_eq!(marked.replace("\" ", "").replace(" \"", ""), text);
    }
}

#[test]
fn backoff_uses_another_pos() {
    let (_dir, inv, _) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let xml = dir.path().join("c.xml");
    let gold = dir.path().join("c.key");
    let tok = synthetic::SynthToken::target("plant", "plant", "VERB", &["plant%1:06:00::"]);
    synthetic::write_corpus(&xml, &gold, "backoff", &[vec![vec![tok]]]).unwrap();
    let split = DatasetSplit::load(&xml, &gold, CorpusName::SE2).unwrap();
    let inst = split.instances().next().unwrap();
    let p = predict_with(&inst, &inv, PairOptions::default(), |_| unreachable!()).unwrap();
    assert!(p.backoff_used);
    assert_eq!(p.predicted.as_str(), "plant%1:06:00::");
    assert_eq!(p.pos, Pos::Verb);
}
