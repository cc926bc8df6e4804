//! Micro-F1 scoring over accumulated test sets and report assembly.
//!
//! Counting rule per candidate: a non-NA gold predicted exactly is a TP; a
//! non-NA prediction that differs from the gold is an FP; a non-NA gold that
//! was not recovered is an FN. NA agreeing with NA touches no count, so the
//! score measures event detection rather than negative-class accuracy.

use crate::corpus::{Benchmark, Candidate, NA_LABEL};
use crate::detector::{predict_index, LabelRegistry};
use crate::encoder::{encode_eval, trigger_rep, Vocab};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::par;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub micro_f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub test_size: usize,
    pub per_label: Vec<LabelMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub benchmark_checksum: String,
    pub manifest_id: String,
    pub stages: Vec<StageReport>,
    /// Arithmetic mean of the stage micro-F1 values.
    pub overall: f64,
}

/// Pooled counts over aligned prediction/gold label vectors.
pub fn micro_f1(stage: usize, predictions: &[String], golds: &[String]) -> Result<StageReport> {
    if predictions.len() != golds.len() {
        return Err(Error::InvalidArgument(format!(
            "micro_f1: {} predictions vs {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut labels: std::collections::BTreeMap<&str, (usize, usize, usize)> =
        std::collections::BTreeMap::new();
    for (pred, gold) in predictions.iter().zip(golds) {
        let hit = pred == gold;
        if gold != NA_LABEL {
            let e = labels.entry(gold.as_str()).or_default();
            if hit {
                tp += 1;
                e.0 += 1;
            } else {
                fn_ += 1;
                e.2 += 1;
            }
        }
        if pred != NA_LABEL && !hit {
            fp += 1;
            labels.entry(pred.as_str()).or_default().1 += 1;
        }
    }
    let denom = 2 * tp + fp + fn_;
    let micro = if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    };
    let per_label = labels
        .into_iter()
        .map(|(label, (tp, fp, fn_))| LabelMetrics {
            label: label.to_string(),
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        })
        .collect();
    Ok(StageReport {
        stage,
        micro_f1: micro,
        tp,
        fp,
        fn_,
        test_size: golds.len(),
        per_label,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Argmax predictions for a candidate list, in input order. Forward passes
/// are eval-mode and independent, so this is where the parallel feature
/// pays; the count reduction afterwards is sequential either way.
pub fn predict_candidates(
    params: &ModelParams,
    registry: &LabelRegistry,
    vocab: &Vocab,
    bench: &Benchmark,
    candidates: &[Candidate],
) -> Result<Vec<String>> {
    let results: Vec<Result<String>> = par::map_slice(candidates, |c| {
        let inst = bench.instance(&c.instance_id)?;
        let ids = vocab.encode_tokens(&inst.tokens);
        let enc = encode_eval(&params.encoder, &ids)?;
        let rep = trigger_rep(&enc, c.start, c.end)?;
        let idx = predict_index(&params.head, &rep)?;
        Ok(registry.labels()[idx].clone())
    });
    results.into_iter().collect()
}

/// Score the accumulated test set through stage t. NA candidates are
/// dropped when the registry was built without the NA class.
pub fn evaluate_stage(
    params: &ModelParams,
    registry: &LabelRegistry,
    vocab: &Vocab,
    bench: &Benchmark,
    t: usize,
) -> Result<StageReport> {
    for label in bench.labels_through(t) {
        if registry.index_of(&label).is_none() {
            return Err(Error::State(format!(
                "registry missing observed label {label}"
            )));
        }
    }
    let mut candidates = bench.accumulate_test(t)?;
    if !registry.na_enabled() {
        candidates.retain(|c| !c.is_na());
    }
    let preds = predict_candidates(params, registry, vocab, bench, &candidates)?;
    let golds: Vec<String> = candidates.iter().map(|c| c.gold.clone()).collect();
    micro_f1(t, &preds, &golds)
}

/// Mean of stage scores plus identification linking the report to its run.
pub fn assemble_report(
    mode: &str,
    seed: u64,
    benchmark_checksum: &str,
    manifest_id: &str,
    stages: Vec<StageReport>,
) -> Result<RunReport> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument(
            "assemble_report: no stage reports".to_string(),
        ));
    }
    let overall = stages.iter().map(|s| s.micro_f1).sum::<f64>() / stages.len() as f64;
    Ok(RunReport {
        mode: mode.to_string(),
        seed,
        benchmark_checksum: benchmark_checksum.to_string(),
        manifest_id: manifest_id.to_string(),
        stages,
        overall,
    })
}

/// Aligned text table mirroring the per-stage column layout: one row per
/// entry, stage columns 1..n then the overall mean, scores in percent.
pub fn render_table(rows: &[(String, Vec<f64>, f64)]) -> String {
    let n_stages = rows.iter().map(|(_, s, _)| s.len()).max().unwrap_or(0);
    let name_w = rows
        .iter()
        .map(|(n, _, _)| n.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = String::new();
    out.push_str(&format!("{:<name_w$}", "method"));
    for t in 1..=n_stages {
        out.push_str(&format!(" {t:>7}"));
    }
    out.push_str(&format!(" {:>8}\n", "overall"));
    for (name, stages, overall) in rows {
        out.push_str(&format!("{name:<name_w$}"));
        for s in stages {
            out.push_str(&format!(" {:>7.2}", s * 100.0));
        }
        for _ in stages.len()..n_stages {
            out.push_str(&format!(" {:>7}", "-"));
        }
        out.push_str(&format!(" {:>8.2}\n", overall * 100.0));
    }
    out
}

impl RunReport {
    pub fn stage_scores(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.micro_f1).collect()
    }

    pub fn table_row(&self) -> (String, Vec<f64>, f64) {
        (
            format!("{}(seed {})", self.mode, self.seed),
            self.stage_scores(),
            self.overall,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn counting_rule_worked_example() {
        // golds [A,A,B,NA], preds [A,B,B,B] -> TP=2, FP=2, FN=1, F1 = 4/7
        let rep = micro_f1(1, &s(&["A", "B", "B", "B"]), &s(&["A", "A", "B", "NA"])).unwrap();
        assert_eq!((rep.tp, rep.fp, rep.fn_), (2, 2, 1));
        assert!((rep.micro_f1 - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let rep = micro_f1(1, &s(&["A", "B"]), &s(&["A", "B"])).unwrap();
        assert_eq!(rep.micro_f1, 1.0);
    }

    #[test]
    fn all_na_predictions_score_zero() {
        let rep = micro_f1(1, &s(&["NA", "NA"]), &s(&["A", "B"])).unwrap();
        assert_eq!(rep.tp, 0);
        assert_eq!(rep.micro_f1, 0.0);
    }

    #[test]
    fn na_agreeing_with_na_counts_nothing() {
        let rep = micro_f1(1, &s(&["NA"]), &s(&["NA"])).unwrap();
        assert_eq!((rep.tp, rep.fp, rep.fn_), (0, 0, 0));
        assert_eq!(rep.micro_f1, 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(micro_f1(1, &s(&["A"]), &s(&["A", "B"])).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let preds = s(&["A", "B", "NA", "C", "B"]);
        let golds = s(&["A", "C", "B", "C", "NA"]);
        let a = micro_f1(1, &preds, &golds).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let preds2: Vec<String> = perm.iter().map(|&i| preds[i].clone()).collect();
        let golds2: Vec<String> = perm.iter().map(|&i| golds[i].clone()).collect();
        let b = micro_f1(1, &preds2, &golds2).unwrap();
        assert_eq!(
            (a.tp, a.fp, a.fn_, a.micro_f1),
            (b.tp, b.fp, b.fn_, b.micro_f1)
        );
    }

    #[test]
    fn adding_a_correct_candidate_never_hurts() {
        let mut preds = s(&["A", "B", "NA"]);
        let mut golds = s(&["A", "C", "B"]);
        let before = micro_f1(1, &preds, &golds).unwrap().micro_f1;
        preds.push("D".to_string());
        golds.push("D".to_string());
        let after = micro_f1(1, &preds, &golds).unwrap().micro_f1;
        assert!(after >= before);
    }

    #[test]
    fn overall_is_the_mean() {
        let mk = |stage: usize, f1: f64| StageReport {
            stage,
            micro_f1: f1,
            tp: 0,
            fp: 0,
            fn_: 0,
            test_size: 0,
            per_label: Vec::new(),
        };
        let rep = assemble_report("x", 1, "c", "m", vec![mk(1, 0.6), mk(2, 0.4)]).unwrap();
        assert!((rep.overall - 0.5).abs() < 1e-12);
        let rep3 =
            assemble_report("x", 1, "c", "m", vec![mk(1, 0.5), mk(2, 0.5), mk(3, 0.5)]).unwrap();
        assert!((rep3.overall - 0.5).abs() < 1e-12);
        assert!(assemble_report("x", 1, "c", "m", vec![]).is_err());
    }

    #[test]
    fn table_renders_percentages() {
        let table = render_table(&[("hanet".to_string(), vec![0.5, 0.25], 0.375)]);
        assert!(table.contains("50.00"));
        assert!(table.contains("25.00"));
        assert!(table.contains("37.50"));
        assert!(table.starts_with("method"));
    }
}
