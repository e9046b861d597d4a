//! Confidence-threshold exit policy and the metrics derived from it.
//!
//! Evaluation records cache both heads' softmax vectors per sample, so a
//! whole threshold sweep replays cached probabilities instead of re-running
//! the network. All counting uses exact integer counters; probabilities are
//! stored as `f32` and threshold comparisons happen in `f32` (the records'
//! native precision).

use crate::error::{Error, Result};
use crate::flops::FlopsBreakdown;
use crate::util::fmt_sig9;

/// Cached per-sample evaluation state: true label and both heads' softmax
/// vectors. The FLOPS breakdown is shared by all records of a run and
/// passed alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: u64,
    pub label: u32,
    pub ee: Vec<f32>,
    pub ef: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Early,
    Final,
}

/// Outcome of applying the exit rule to one record at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitDecision {
    pub exit: Exit,
    pub label: u32,
    /// Max softmax at the head that produced the prediction.
    pub confidence: f32,
    /// FLOPs charged for the sample: the early path or the full path.
    pub cost: u64,
}

impl EvalRecord {
    pub fn new(id: u64, label: u32, ee: Vec<f32>, ef: Vec<f32>) -> Result<Self> {
        let r = EvalRecord { id, label, ee, ef };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.ee.len();
        if k < 2 || self.ef.len() != k {
            return Err(Error::Data {
                msg: format!(
                    "record {}: head vector lengths {} and {} invalid",
                    self.id,
                    k,
                    self.ef.len()
                ),
            });
        }
        if self.label as usize >= k {
            return Err(Error::Data {
                msg: format!("record {}: label {} out of range for {k} classes", self.id, self.label),
            });
        }
        for (name, v) in [("early", &self.ee), ("final", &self.ef)] {
            let sum: f64 = v.iter().map(|&p| p as f64).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Data {
                    msg: format!("record {}: {name} probabilities sum to {sum}", self.id),
                });
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.ee.len()
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax(probs: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best as u32
}

/// Apply the exit rule: take the early exit iff the early head's max
/// softmax is `>= rho` (boundary inclusive). `rho > 1` is a supported
/// sentinel that forces the final exit for every sample.
pub fn decide(record: &EvalRecord, flops: &FlopsBreakdown, rho: f64) -> ExitDecision {
    let max_ee = record.ee.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max_ee >= rho as f32 {
        ExitDecision {
            exit: Exit::Early,
            label: argmax(&record.ee),
            confidence: max_ee,
            cost: flops.early_path(),
        }
    } else {
        let max_ef = record.ef.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        ExitDecision {
            exit: Exit::Final,
            label: argmax(&record.ef),
            confidence: max_ef,
            cost: flops.final_path(),
        }
    }
}

fn split_counts(records: &[EvalRecord], rho: f64) -> (u64, u64, u64) {
    // (n_early, n_final, n_correct) — integer counters only.
    let mut n_early = 0u64;
    let mut n_final = 0u64;
    let mut correct = 0u64;
    for r in records {
        let max_ee = r.ee.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let (early, label) = if max_ee >= rho as f32 {
            (true, argmax(&r.ee))
        } else {
            (false, argmax(&r.ef))
        };
        if early {
            n_early += 1;
        } else {
            n_final += 1;
        }
        if label == r.label {
            correct += 1;
        }
    }
    (n_early, n_final, correct)
}

/// Fraction of correctly classified samples under the exit rule at `rho`.
pub fn total_accuracy(records: &[EvalRecord], rho: f64) -> f64 {
    assert!(!records.is_empty(), "no records");
    let (_, _, correct) = split_counts(records, rho);
    correct as f64 / records.len() as f64
}

/// Fraction of samples taking the early exit at `rho`.
pub fn ee_rate(records: &[EvalRecord], rho: f64) -> f64 {
    assert!(!records.is_empty(), "no records");
    let (n_early, _, _) = split_counts(records, rho);
    n_early as f64 / records.len() as f64
}

/// Mean per-sample cost at `rho`, defined as
/// `ee_rate · c_early + (1 − ee_rate) · c_final` so the cost identity holds
/// exactly.
pub fn mean_flops(records: &[EvalRecord], flops: &FlopsBreakdown, rho: f64) -> f64 {
    let rate = ee_rate(records, rho);
    rate * flops.early_path() as f64 + (1.0 - rate) * flops.final_path() as f64
}

/// Accuracy of one head with every sample forced through it.
pub fn standalone_accuracy(records: &[EvalRecord], exit: Exit) -> f64 {
    assert!(!records.is_empty(), "no records");
    let correct = records
        .iter()
        .filter(|r| {
            let probs = match exit {
                Exit::Early => &r.ee,
                Exit::Final => &r.ef,
            };
            argmax(probs) == r.label
        })
        .count();
    correct as f64 / records.len() as f64
}

/// Partition of records by per-head correctness (threshold-independent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverthinkingReport {
    /// The early head is right but further computation misclassifies.
    pub early_correct_final_wrong: u64,
    pub early_wrong_final_correct: u64,
    pub both_correct: u64,
    pub both_wrong: u64,
}

impl OverthinkingReport {
    pub fn total(&self) -> u64 {
        self.early_correct_final_wrong + self.early_wrong_final_correct + self.both_correct + self.both_wrong
    }
}

pub fn overthinking_report(records: &[EvalRecord]) -> OverthinkingReport {
    let mut out = OverthinkingReport::default();
    for r in records {
        let early_ok = argmax(&r.ee) == r.label;
        let final_ok = argmax(&r.ef) == r.label;
        match (early_ok, final_ok) {
            (true, false) => out.early_correct_final_wrong += 1,
            (false, true) => out.early_wrong_final_correct += 1,
            (true, true) => out.both_correct += 1,
            (false, false) => out.both_wrong += 1,
        }
    }
    out
}

/// Summary statistics of a confidence band (quantiles by linear
/// interpolation at rank `q·(n−1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSummary {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Max-softmax values of `exit`'s head restricted to the half-open band
/// `[lo, hi)`, in record order, plus summary stats (None when empty).
pub fn confidence_distribution(
    records: &[EvalRecord],
    exit: Exit,
    band: (f64, f64),
) -> (Vec<f32>, Option<ConfidenceSummary>) {
    let (lo, hi) = (band.0 as f32, band.1 as f32);
    let values: Vec<f32> = records
        .iter()
        .map(|r| {
            let probs = match exit {
                Exit::Early => &r.ee,
                Exit::Final => &r.ef,
            };
            probs.iter().copied().fold(f32::NEG_INFINITY, f32::max)
        })
        .filter(|&v| v >= lo && v < hi)
        .collect();
    let summary = (!values.is_empty()).then(|| {
        let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ConfidenceSummary {
            count: sorted.len(),
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
        }
    });
    (values, summary)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

// ───────────────────────────── CSV surface ─────────────────────────────

/// Serialize records: `id,label,k,ee_p0..ee_pk-1,ef_p0..ef_pk-1`, floats
/// with 9 significant digits.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let k = records.first().map(|r| r.classes()).unwrap_or(0);
    let mut out = String::from("id,label,k");
    for i in 0..k {
        out.push_str(&format!(",ee_p{i}"));
    }
    for i in 0..k {
        out.push_str(&format!(",ef_p{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{}", r.id, r.label, r.classes()));
        for &p in r.ee.iter().chain(r.ef.iter()) {
            out.push(',');
            out.push_str(&fmt_sig9(p as f64));
        }
        out.push('\n');
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data { msg: "empty records CSV".into() })?;
    if !header.starts_with("id,label,k") {
        return Err(Error::Data { msg: format!("unexpected records header {header:?}") });
    }
    let mut records = Vec::new();
    let mut k_seen: Option<usize> = None;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Data { msg: format!("line {}: too few fields", lineno + 2) });
        }
        let parse_err = |what: &str| Error::Data { msg: format!("line {}: bad {what}", lineno + 2) };
        let id: u64 = fields[0].parse().map_err(|_| parse_err("id"))?;
        let label: u32 = fields[1].parse().map_err(|_| parse_err("label"))?;
        let k: usize = fields[2].parse().map_err(|_| parse_err("k"))?;
        if fields.len() != 3 + 2 * k {
            return Err(Error::Data {
                msg: format!("line {}: expected {} fields for k={k}, got {}", lineno + 2, 3 + 2 * k, fields.len()),
            });
        }
        if let Some(prev) = k_seen {
            if prev != k {
                return Err(Error::Data { msg: format!("line {}: k changed from {prev} to {k}", lineno + 2) });
            }
        }
        k_seen = Some(k);
        let parse_f = |s: &str| -> Result<f32> {
            s.parse::<f32>().map_err(|_| parse_err("probability"))
        };
        let ee = fields[3..3 + k].iter().map(|s| parse_f(s)).collect::<Result<Vec<_>>>()?;
        let ef = fields[3 + k..].iter().map(|s| parse_f(s)).collect::<Result<Vec<_>>>()?;
        records.push(EvalRecord::new(id, label, ee, ef)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flops() -> FlopsBreakdown {
        FlopsBreakdown { common: 100, ee: 20, final_block: 200 }
    }

    fn rec(id: u64, label: u32, ee: Vec<f32>, ef: Vec<f32>) -> EvalRecord {
        EvalRecord::new(id, label, ee, ef).unwrap()
    }

    #[test]
    fn boundary_is_inclusive() {
        let r = rec(0, 0, vec![0.95, 0.05], vec![0.5, 0.5]);
        let d = decide(&r, &flops(), 0.95);
        assert_eq!(d.exit, Exit::Early);
        assert_eq!(d.label, 0);
        assert_eq!(d.cost, 120);
    }

    #[test]
    fn rho_zero_everyone_exits_early() {
        let recs = vec![
            rec(0, 0, vec![0.4, 0.6], vec![0.9, 0.1]),
            rec(1, 1, vec![0.5, 0.5], vec![0.1, 0.9]),
        ];
        assert_eq!(ee_rate(&recs, 0.0), 1.0);
    }

    #[test]
    fn sentinel_forces_final_exit() {
        let recs = vec![rec(0, 0, vec![1.0, 0.0], vec![0.9, 0.1])];
        assert_eq!(ee_rate(&recs, 1.01), 0.0);
        // rho = 1.0 still lets certainty-1 records exit early.
        assert_eq!(ee_rate(&recs, 1.0), 1.0);
    }

    #[test]
    fn four_record_enumeration() {
        // 2 exit early (1 correct), 2 take the final exit (both correct).
        let recs = vec![
            rec(0, 0, vec![0.9, 0.1], vec![0.1, 0.9]),  // early, correct
            rec(1, 1, vec![0.8, 0.2], vec![0.9, 0.1]),  // early, wrong
            rec(2, 1, vec![0.6, 0.4], vec![0.1, 0.9]),  // final, correct
            rec(3, 0, vec![0.5, 0.5], vec![0.7, 0.3]),  // final, correct
        ];
        let rho = 0.75;
        assert_eq!(total_accuracy(&recs, rho), 0.75);
        assert_eq!(ee_rate(&recs, rho), 0.5);
        let mf = mean_flops(&recs, &flops(), rho);
        assert_eq!(mf, 0.5 * 120.0 + 0.5 * 320.0);
    }

    #[test]
    fn sentinel_matches_standalone_final() {
        let recs = vec![
            rec(0, 0, vec![0.9, 0.1], vec![0.1, 0.9]),
            rec(1, 1, vec![0.3, 0.7], vec![0.2, 0.8]),
        ];
        assert_eq!(total_accuracy(&recs, 1.01), standalone_accuracy(&recs, Exit::Final));
        assert_eq!(mean_flops(&recs, &flops(), 1.01), flops().final_path() as f64);
        assert_eq!(total_accuracy(&recs, 0.0), standalone_accuracy(&recs, Exit::Early));
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn overthinking_partition_sums() {
        let recs = vec![
            rec(0, 0, vec![0.9, 0.1], vec![0.2, 0.8]), // early right, final wrong
            rec(1, 0, vec![0.9, 0.1], vec![0.8, 0.2]), // both right
            rec(2, 1, vec![0.9, 0.1], vec![0.2, 0.8]), // early wrong, final right
        ];
        let rep = overthinking_report(&recs);
        assert_eq!(rep.early_correct_final_wrong, 1);
        assert_eq!(rep.early_wrong_final_correct, 1);
        assert_eq!(rep.both_correct, 1);
        assert_eq!(rep.both_wrong, 0);
        assert_eq!(rep.total(), 3);
    }

    #[test]
    fn agreement_zeroes_off_diagonals() {
        let recs = vec![
            rec(0, 0, vec![0.9, 0.1], vec![0.8, 0.2]),
            rec(1, 1, vec![0.9, 0.1], vec![0.8, 0.2]),
        ];
        let rep = overthinking_report(&recs);
        assert_eq!(rep.early_correct_final_wrong, 0);
        assert_eq!(rep.early_wrong_final_correct, 0);
    }

    #[test]
    fn band_edges_half_open() {
        let mk = |p: f32| rec(0, 0, vec![p, 1.0 - p], vec![0.5, 0.5]);
        let recs = vec![mk(0.5), mk(0.65), mk(0.89), mk(0.9)];
        let (vals, summary) = confidence_distribution(&recs, Exit::Early, (0.65, 0.9));
        assert_eq!(vals, vec![0.65, 0.89]);
        assert_eq!(summary.unwrap().count, 2);
    }

    #[test]
    fn high_confidence_set_empty_in_band() {
        let recs = vec![rec(0, 0, vec![0.95, 0.05], vec![0.5, 0.5])];
        let (vals, summary) = confidence_distribution(&recs, Exit::Early, (0.65, 0.9));
        assert!(vals.is_empty());
        assert!(summary.is_none());
    }

    #[test]
    fn records_csv_round_trip() {
        let recs = vec![
            rec(0, 1, vec![0.25, 0.75], vec![0.6, 0.4]),
            rec(1, 0, vec![1.0 / 3.0, 2.0 / 3.0], vec![0.9, 0.1]),
        ];
        let csv = records_to_csv(&recs);
        let back = records_from_csv(&csv).unwrap();
        assert_eq!(recs, back);
    }

    #[test]
    fn invalid_probability_sum_rejected() {
        assert!(EvalRecord::new(0, 0, vec![0.5, 0.6], vec![0.5, 0.5]).is_err());
    }
}
