//! Detection scoring. Everything is computed against an explicit universe of
//! keys (or edges): true negatives are as real as true positives here, and a
//! rate whose denominator is empty is reported as absent, never as zero.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::llm::TokenUsage;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("keys outside the scoring universe: {0:?}")]
    OutOfUniverse(Vec<String>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsResult {
    pub confusion: Confusion,
    /// tp / (tp + fn); absent when there are no positives to find.
    pub tpr: Option<f64>,
    /// fp / (fp + tn); absent when there are no negatives to spare.
    pub fpr: Option<f64>,
    /// (tpr + (1 - fpr)) / 2; needs both rates.
    pub balanced_accuracy: Option<f64>,
    pub token_usage: TokenUsage,
}

fn with_rates(confusion: Confusion, token_usage: TokenUsage) -> MetricsResult {
    let p = confusion.tp + confusion.fn_;
    let n = confusion.fp + confusion.tn;
    let tpr = (p > 0).then(|| confusion.tp as f64 / p as f64);
    let fpr = (n > 0).then(|| confusion.fp as f64 / n as f64);
    let balanced_accuracy = match (tpr, fpr) {
        (Some(t), Some(f)) => Some((t + (1.0 - f)) / 2.0),
        _ => None,
    };
    MetricsResult { confusion, tpr, fpr, balanced_accuracy, token_usage }
}

fn check_universe(
    detected: &BTreeSet<String>,
    ground_truth: &BTreeSet<String>,
    universe: &BTreeSet<&str>,
) -> Result<(), EvalError> {
    let stray: Vec<String> = detected
        .iter()
        .chain(ground_truth.iter())
        .filter(|k| !universe.contains(k.as_str()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if stray.is_empty() {
        Ok(())
    } else {
        Err(EvalError::OutOfUniverse(stray))
    }
}

/// Entity-level scoring: every universe key is classified malicious or benign
/// by membership in `detected`, judged against `ground_truth`.
pub fn score(
    detected: &BTreeSet<String>,
    ground_truth: &BTreeSet<String>,
    universe: &BTreeSet<String>,
) -> Result<MetricsResult, EvalError> {
    let uni: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
    check_universe(detected, ground_truth, &uni)?;
    let mut c = Confusion::default();
    for key in universe {
        match (ground_truth.contains(key), detected.contains(key)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(with_rates(c, TokenUsage::default()))
}

/// Event-level scoring over the frozen graph: an edge is attack activity when
/// either endpoint is in the ground truth, and flagged when either endpoint
/// was detected. `edges` holds (subject, object) indices into `nodes`.
pub fn score_event_level(
    detected: &BTreeSet<String>,
    ground_truth: &BTreeSet<String>,
    nodes: &[String],
    edges: &[(u32, u32)],
) -> Result<MetricsResult, EvalError> {
    let uni: BTreeSet<&str> = nodes.iter().map(String::as_str).collect();
    check_universe(detected, ground_truth, &uni)?;
    let mut c = Confusion::default();
    for &(s, o) in edges {
        let (s, o) = (&nodes[s as usize], &nodes[o as usize]);
        let is_attack = ground_truth.contains(s) || ground_truth.contains(o);
        let is_flagged = detected.contains(s) || detected.contains(o);
        match (is_attack, is_flagged) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(with_rates(c, TokenUsage::default()))
}

/// Cross-scenario aggregate: confusion counts and tokens are summed; each
/// rate is the unweighted mean over the scenarios where it is defined, and
/// stays absent if it is defined nowhere.
pub fn aggregate(results: &[MetricsResult]) -> MetricsResult {
    let mut confusion = Confusion::default();
    let mut token_usage = TokenUsage::default();
    for r in results {
        confusion.tp += r.confusion.tp;
        confusion.fp += r.confusion.fp;
        confusion.tn += r.confusion.tn;
        confusion.fn_ += r.confusion.fn_;
        token_usage += r.token_usage;
    }
    let mean = |pick: fn(&MetricsResult) -> Option<f64>| {
        let vals: Vec<f64> = results.iter().filter_map(pick).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    MetricsResult {
        confusion,
        tpr: mean(|r| r.tpr),
        fpr: mean(|r| r.fpr),
        balanced_accuracy: mean(|r| r.balanced_accuracy),
        token_usage,
    }
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "--".into())
}

/// Fixed-width text table, one row per labeled result.
pub fn render_table(rows: &[(String, MetricsResult)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).chain([8]).max().unwrap();
    let mut out = format!(
        "{:name_w$}  {:>6} {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}  {:>10} {:>10} {:>10}\n",
        "scenario", "tp", "fp", "tn", "fn", "tpr", "fpr", "ba", "prompt", "reasoning", "answer"
    );
    for (name, m) in rows {
        out.push_str(&format!(
            "{:name_w$}  {:>6} {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}  {:>10} {:>10} {:>10}\n",
            name,
            m.confusion.tp,
            m.confusion.fp,
            m.confusion.tn,
            m.confusion.fn_,
            fmt_rate(m.tpr),
            fmt_rate(m.fpr),
            fmt_rate(m.balanced_accuracy),
            m.token_usage.prompt_tokens,
            m.token_usage.reasoning_tokens,
            m.token_usage.answer_tokens,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn bulk_universe(gt_hit: usize, gt_miss: usize, benign_hit: usize, benign_clear: usize) -> (BTreeSet<String>, BTreeSet<String>, BTreeSet<String>) {
        let mut detected = BTreeSet::new();
        let mut gt = BTreeSet::new();
        let mut universe = BTreeSet::new();
        let mut add = |prefix: &str, n: usize, in_gt: bool, in_det: bool| {
            for i in 0..n {
                let k = format!("{prefix}{i}");
                universe.insert(k.clone());
                if in_gt {
                    gt.insert(k.clone());
                }
                if in_det {
                    detected.insert(k);
                }
            }
        };
        add("hit", gt_hit, true, true);
        add("miss", gt_miss, true, false);
        add("fp", benign_hit, false, true);
        add("clear", benign_clear, false, false);
        (detected, gt, universe)
    }

    #[test]
    fn rates_match_hand_computation() {
        let (detected, gt, universe) = bulk_universe(97, 3, 1, 499);
        let m = score(&detected, &gt, &universe).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 97, fp: 1, tn: 499, fn_: 3 });
        assert!((m.tpr.unwrap() - 0.970).abs() < 1e-12);
        assert!((m.fpr.unwrap() - 0.002).abs() < 1e-12);
        assert!((m.balanced_accuracy.unwrap() - 0.984).abs() < 1e-12);
    }

    #[test]
    fn empty_denominators_are_absent_not_zero() {
        // no ground truth at all: tpr undefined, fpr fine
        let (detected, gt, universe) = bulk_universe(0, 0, 2, 8);
        let m = score(&detected, &gt, &universe).unwrap();
        assert_eq!(m.tpr, None);
        assert!((m.fpr.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(m.balanced_accuracy, None);

        // everything is malicious: fpr undefined
        let (detected, gt, universe) = bulk_universe(4, 1, 0, 0);
        let m = score(&detected, &gt, &universe).unwrap();
        assert!((m.tpr.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(m.fpr, None);
        assert_eq!(m.balanced_accuracy, None);
    }

    #[test]
    fn stray_keys_are_rejected() {
        let universe = keys(&["a", "b"]);
        let err = score(&keys(&["a", "ghost"]), &keys(&["b"]), &universe).unwrap_err();
        match err {
            EvalError::OutOfUniverse(stray) => assert_eq!(stray, ["ghost"]),
        }
        let err = score(&keys(&["a"]), &keys(&["zz"]), &universe).unwrap_err();
        assert!(matches!(err, EvalError::OutOfUniverse(s) if s == ["zz"]));
    }

    #[test]
    fn event_level_classifies_by_endpoints() {
        let nodes: Vec<String> = ["file:/tmp/x", "process:a", "process:b"].iter().map(|s| s.to_string()).collect();
        // a->x, b->x, a->b
        let edges = vec![(1, 0), (2, 0), (1, 2)];
        let gt = keys(&["process:a"]);
        let m = score_event_level(&gt, &gt, &nodes, &edges).unwrap();
        // edges touching a: (1,0) and (1,2); edge (2,0) touches neither gt key
        assert_eq!(m.confusion, Confusion { tp: 2, fp: 0, tn: 1, fn_: 0 });
        assert_eq!(m.tpr, Some(1.0));
        assert_eq!(m.fpr, Some(0.0));
        assert_eq!(m.balanced_accuracy, Some(1.0));

        // detecting only b: (1,2) tp via b, (2,0) fp via b, (1,0) fn
        let m = score_event_level(&keys(&["process:b"]), &gt, &nodes, &edges).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 1, fp: 1, tn: 0, fn_: 1 });
    }

    #[test]
    fn aggregate_means_skip_undefined_rates() {
        let a = with_rates(Confusion { tp: 1, fp: 0, tn: 9, fn_: 0 }, TokenUsage { prompt_tokens: 10, reasoning_tokens: 1, answer_tokens: 2 });
        let b = with_rates(Confusion { tp: 0, fp: 5, tn: 5, fn_: 0 }, TokenUsage { prompt_tokens: 20, reasoning_tokens: 2, answer_tokens: 3 });
        assert_eq!(a.tpr, Some(1.0));
        assert_eq!(b.tpr, None);
        let agg = aggregate(&[a, b]);
        assert_eq!(agg.confusion, Confusion { tp: 1, fp: 5, tn: 14, fn_: 0 });
        // only `a` defines tpr, so the mean is just a's value
        assert_eq!(agg.tpr, Some(1.0));
        // fpr: (0.0 + 0.5) / 2
        assert!((agg.fpr.unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(agg.balanced_accuracy, Some(1.0));
        assert_eq!(agg.token_usage, TokenUsage { prompt_tokens: 30, reasoning_tokens: 3, answer_tokens: 5 });
        assert_eq!(aggregate(&[]).tpr, None);
    }

    #[test]
    fn table_shows_dashes_for_absent_rates() {
        let (detected, gt, universe) = bulk_universe(2, 0, 0, 0);
        let m = score(&detected, &gt, &universe).unwrap();
        let table = render_table(&[("scn-x".into(), m)]);
        assert!(table.contains("scn-x"));
        assert!(table.contains("1.000"));
        assert!(table.contains("--"));
        assert!(table.lines().count() == 2);
    }

    #[test]
    fn confusion_serializes_fn_without_the_underscore() {
        let c = Confusion { tp: 1, fp: 2, tn: 3, fn_: 4 };
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"fn\":4"));
        let back: Confusion = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
