//! Quality extraction, the Omega-all ratio, aggregation across SLT variants
//! and CF classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ModelKind;
use crate::slt::SltType;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QualityMode {
    Best,
    Last,
}

/// `best` is the curve maximum, `last` its final entry.
pub fn quality_from_curve(curve: &[f64], mode: QualityMode) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::data("quality of an empty curve is undefined"));
    }
    Ok(match mode {
        QualityMode::Best => curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        QualityMode::Last => *curve.last().unwrap(),
    })
}

/// Best quality divided by baseline accuracy. May exceed 1 when the baseline
/// sits at chance level.
pub fn omega_all(q_best: f64, baseline: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::data(format!("omega_all needs a positive baseline, got {baseline}")));
    }
    Ok(q_best / baseline)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CfFlag {
    #[serde(rename = "CF")]
    Cf,
    #[serde(rename = "no-CF")]
    NoCf,
}

impl CfFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            CfFlag::Cf => "CF",
            CfFlag::NoCf => "no-CF",
        }
    }
}

/// Quality threshold below which retraining counts as catastrophic
/// forgetting: 0.9 for D9-1 tasks, 0.5 otherwise.
pub fn cf_threshold(slt_type: SltType) -> f64 {
    match slt_type {
        SltType::D91 => 0.9,
        SltType::D55 | SltType::Dp1010 => 0.5,
    }
}

/// CF iff the quality is strictly below the type's threshold; the boundary
/// itself counts as successful retraining.
pub fn classify_cf(q: f64, slt_type: SltType) -> CfFlag {
    if q < cf_threshold(slt_type) {
        CfFlag::Cf
    } else {
        CfFlag::NoCf
    }
}

/// One summary row: the qualities, baseline and derived measures of a single
/// experiment (or an aggregate over SLT variants, where `slt_variant` is
/// `None`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub model: ModelKind,
    pub slt_type: SltType,
    pub slt_variant: Option<String>,
    pub q_best: f64,
    pub q_last: f64,
    pub baseline: f64,
    pub omega_all: f64,
    /// Classified on the "best" quality, matching the published coloring.
    pub cf_flag: CfFlag,
}

impl MetricRecord {
    pub fn new(
        dataset: impl Into<String>,
        model: ModelKind,
        slt_type: SltType,
        slt_variant: Option<String>,
        q_best: f64,
        q_last: f64,
        baseline: f64,
    ) -> Result<MetricRecord> {
        Ok(MetricRecord {
            dataset: dataset.into(),
            model,
            slt_type,
            slt_variant,
            q_best,
            q_last,
            baseline,
            omega_all: omega_all(q_best, baseline)?,
            cf_flag: classify_cf(q_best, slt_type),
        })
    }
}

/// Folds the records of all variants of one SLT type into one row by taking
/// the minimum of each quality (a single CF occurrence anywhere flags the
/// whole type). All inputs must share dataset, model and type.
pub fn aggregate_over_slts(records: &[MetricRecord]) -> Result<MetricRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::data("cannot aggregate zero metric records"))?;
    for r in records {
        if r.dataset != first.dataset || r.model != first.model || r.slt_type != first.slt_type {
            return Err(Error::data(format!(
                "cannot aggregate mixed records: ({}, {}, {}) vs ({}, {}, {})",
                first.dataset, first.model, first.slt_type, r.dataset, r.model, r.slt_type
            )));
        }
    }
    let min = |f: fn(&MetricRecord) -> f64| records.iter().map(f).fold(f64::INFINITY, f64::min);
    let q_best = min(|r| r.q_best);
    let q_last = min(|r| r.q_last);
    let baseline = min(|r| r.baseline);
    MetricRecord::new(
        first.dataset.clone(),
        first.model,
        first.slt_type,
        None,
        q_best,
        q_last,
        baseline,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_and_last_of_a_curve() {
        let curve = [0.2, 0.9, 0.4];
        assert_eq!(quality_from_curve(&curve, QualityMode::Best).unwrap(), 0.9);
        assert_eq!(quality_from_curve(&curve, QualityMode::Last).unwrap(), 0.4);
        let flat = [0.7, 0.7];
        assert_eq!(
            quality_from_curve(&flat, QualityMode::Best).unwrap(),
            quality_from_curve(&flat, QualityMode::Last).unwrap()
        );
    }

    #[test]
    fn empty_curve_is_an_error() {
        assert!(quality_from_curve(&[], QualityMode::Best).is_err());
    }

    #[test]
    fn omega_matches_published_cells() {
        // MNIST FC D9-1: best .88, baseline .98 -> 0.90 (published rounding)
        assert!((omega_all(0.88, 0.98).unwrap() - 0.90).abs() <= 0.01);
        // CIFAR10 FC D9-1: best .45, baseline .51 -> .88
        assert!((omega_all(0.45, 0.51).unwrap() - 0.88).abs() <= 0.01);
        assert_eq!(omega_all(0.7, 0.7).unwrap(), 1.0);
    }

    #[test]
    fn omega_requires_positive_baseline() {
        assert!(omega_all(0.5, 0.0).is_err());
        assert!(omega_all(0.5, -0.1).is_err());
    }

    #[test]
    fn omega_is_scale_consistent() {
        let a = omega_all(0.4, 0.8).unwrap();
        let b = omega_all(0.2, 0.4).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cf_thresholds_per_type() {
        assert_eq!(classify_cf(0.49, SltType::D55), CfFlag::Cf);
        assert_eq!(classify_cf(0.50, SltType::D55), CfFlag::NoCf);
        assert_eq!(classify_cf(0.92, SltType::D91), CfFlag::NoCf);
        assert_eq!(classify_cf(0.89, SltType::D91), CfFlag::Cf);
        // Boundary is non-strict: exactly the threshold is not CF.
        assert_eq!(classify_cf(0.90, SltType::D91), CfFlag::NoCf);
        assert_eq!(classify_cf(0.49, SltType::Dp1010), CfFlag::Cf);
    }

    #[test]
    fn classify_is_monotone_in_q() {
        let mut last_was_cf = true;
        for k in 0..=100 {
            let q = k as f64 / 100.0;
            let flag = classify_cf(q, SltType::D91);
            if flag == CfFlag::Cf {
                assert!(last_was_cf, "CF must not reappear above the threshold");
            }
            last_was_cf = flag == CfFlag::Cf;
        }
    }

    fn record(variant: &str, q_best: f64, q_last: f64, baseline: f64) -> MetricRecord {
        MetricRecord::new(
            "blobs",
            ModelKind::Fc,
            SltType::D55,
            Some(variant.to_string()),
            q_best,
            q_last,
            baseline,
        )
        .unwrap()
    }

    #[test]
    fn aggregate_takes_elementwise_minima() {
        let records = vec![
            record("D5-5a", 0.49, 0.40, 0.98),
            record("D5-5b", 0.52, 0.35, 0.97),
            record("D5-5c", 0.61, 0.45, 0.99),
        ];
        let agg = aggregate_over_slts(&records).unwrap();
        assert_eq!(agg.q_best, 0.49);
        assert_eq!(agg.q_last, 0.35);
        assert_eq!(agg.baseline, 0.97);
        assert_eq!(agg.slt_variant, None);
        assert_eq!(agg.cf_flag, CfFlag::Cf);
    }

    #[test]
    fn aggregate_of_single_record_is_itself() {
        let r = record("D5-5a", 0.6, 0.5, 0.9);
        let agg = aggregate_over_slts(std::slice::from_ref(&r)).unwrap();
        assert_eq!(agg.q_best, r.q_best);
        assert_eq!(agg.q_last, r.q_last);
        assert_eq!(agg.baseline, r.baseline);
    }

    #[test]
    fn aggregate_is_idempotent_and_order_invariant() {
        let mut records = vec![
            record("D5-5a", 0.49, 0.40, 0.98),
            record("D5-5b", 0.52, 0.35, 0.97),
        ];
        let forward = aggregate_over_slts(&records).unwrap();
        records.reverse();
        let backward = aggregate_over_slts(&records).unwrap();
        assert_eq!(forward.q_best, backward.q_best);
        assert_eq!(forward.q_last, backward.q_last);
        let again = aggregate_over_slts(&[forward.clone()]).unwrap();
        assert_eq!(again.q_best, forward.q_best);
        assert_eq!(again.q_last, forward.q_last);
    }

    #[test]
    fn aggregate_rejects_mixed_types() {
        let a = record("D5-5a", 0.5, 0.4, 0.9);
        let mut b = record("D9-1a", 0.9, 0.8, 0.95);
        b.slt_type = SltType::D91;
        assert!(aggregate_over_slts(&[a, b]).is_err());
    }
}
