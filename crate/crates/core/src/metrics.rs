//! Segmentation metrics (precision, recall, DICE with explicit
//! undefined-metric flags) and the scheme-comparison report.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{relative_difference, GridField, SegmentationMask};
use crate::kernels::FlowParams;
use crate::pipeline::finalize_mask;
use crate::yosida::{run_yosida_observed, YosidaOptions};

/// Confusion counts and derived metrics. A metric whose denominator is zero
/// is `None`, never silently 0 or 1.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fneg: usize,
    pub tn: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub dice: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fneg: usize, tn: usize) -> Self {
        MetricsReport {
            tp,
            fp,
            fneg,
            tn,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fneg),
            dice: ratio(2 * tp, 2 * tp + fp + fneg),
        }
    }
}

/// Standard confusion counts of a predicted mask against ground truth.
pub fn confusion(pred: &SegmentationMask, truth: &SegmentationMask) -> Result<MetricsReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch {
            left: pred.dims().to_string(),
            right: truth.dims().to_string(),
        });
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fneg, tn))
}

/// Pool counts across images, then derive metrics.
pub fn micro_average(reports: &[MetricsReport]) -> MetricsReport {
    let mut acc = [0usize; 4];
    for r in reports {
        acc[0] += r.tp;
        acc[1] += r.fp;
        acc[2] += r.fneg;
        acc[3] += r.tn;
    }
    MetricsReport::from_counts(acc[0], acc[1], acc[2], acc[3])
}

/// Mean of per-image metrics; undefined per-image values are skipped and
/// counted.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct MacroAverage {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub dice: Option<f64>,
    pub skipped_precision: usize,
    pub skipped_recall: usize,
    pub skipped_dice: usize,
}

pub fn macro_average(reports: &[MetricsReport]) -> MacroAverage {
    fn mean(values: Vec<f64>) -> Option<f64> {
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
    let pick = |get: fn(&MetricsReport) -> Option<f64>| -> (Option<f64>, usize) {
        let defined: Vec<f64> = reports.iter().filter_map(get).collect();
        let skipped = reports.len() - defined.len();
        (mean(defined), skipped)
    };
    let (precision, skipped_precision) = pick(|r| r.precision);
    let (recall, skipped_recall) = pick(|r| r.recall);
    let (dice, skipped_dice) = pick(|r| r.dice);
    MacroAverage {
        precision,
        recall,
        dice,
        skipped_precision,
        skipped_recall,
        skipped_dice,
    }
}

/// Relative difference of one inner iterate against the truncated solution.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IterateDiff {
    pub step: usize,
    pub inner: usize,
    pub rel_diff: f64,
}

/// Comparison of the penalty solver against the explicit truncated solver.
#[derive(Clone, Debug, Serialize)]
pub struct SchemeComparison {
    /// ||u_j - u_T||_2 / ||u_T||_2 for every inner iterate, in run order.
    pub per_iterate: Vec<IterateDiff>,
    pub final_rel_diff: f64,
    /// Pixels where the two final masks disagree.
    pub mask_disagreement: usize,
    /// Foreground size of the truncated solution's mask (the denominator
    /// for the disagreement fraction).
    pub foreground: usize,
    pub disagreement_fraction: f64,
}

/// Run both solvers on `f` and report per-iterate relative differences of
/// the penalty scheme against the truncated final output.
pub fn compare_schemes(
    f: &GridField,
    params: &FlowParams,
    yosida_opts: &YosidaOptions,
) -> Result<SchemeComparison> {
    let (u_truncated, _) = crate::explicit::run_explicit_traced(f, params, &yosida_opts.run)?;
    let mut per_iterate = Vec::new();
    let (u_penalty, _) = run_yosida_observed(f, params, yosida_opts, |step, inner, u| {
        if let Ok(rel) = relative_difference(u, &u_truncated) {
            per_iterate.push(IterateDiff {
                step,
                inner,
                rel_diff: rel,
            });
        }
    })?;
    let final_rel_diff = relative_difference(&u_penalty, &u_truncated)?;
    let mask_t = finalize_mask(&u_truncated);
    let mask_y = finalize_mask(&u_penalty);
    let mask_disagreement = mask_t
        .labels()
        .iter()
        .zip(mask_y.labels())
        .filter(|(a, b)| a != b)
        .count();
    let foreground = mask_t.foreground_count();
    let disagreement_fraction = if foreground > 0 {
        mask_disagreement as f64 / foreground as f64
    } else {
        f64::NAN
    };
    Ok(SchemeComparison {
        per_iterate,
        final_rel_diff,
        mask_disagreement,
        foreground,
        disagreement_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;

    fn mask(labels: &[u8]) -> SegmentationMask {
        SegmentationMask::new(Dims::d2(1, labels.len()), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let t = mask(&[1, 0, 1, 0]);
        let r = confusion(&t, &t).unwrap();
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.recall, Some(1.0));
        assert_eq!(r.dice, Some(1.0));
    }

    #[test]
    fn disjoint_masks_have_zero_dice() {
        let p = mask(&[1, 1, 0, 0]);
        let t = mask(&[0, 0, 1, 1]);
        let r = confusion(&p, &t).unwrap();
        assert_eq!(r.dice, Some(0.0));
    }

    #[test]
    fn hand_counted_case() {
        // truth has 4 foreground pixels, prediction covers 2 plus 1 false positive.
        let t = mask(&[1, 1, 1, 1, 0, 0]);
        let p = mask(&[1, 1, 0, 0, 1, 0]);
        let r = confusion(&p, &t).unwrap();
        assert_eq!((r.tp, r.fp, r.fneg, r.tn), (2, 1, 2, 1));
        assert!((r.precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall.unwrap() - 0.5).abs() < 1e-15);
        assert!((r.dice.unwrap() - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn empty_masks_leave_metrics_undefined() {
        let e = mask(&[0, 0, 0]);
        let r = confusion(&e, &e).unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, None);
        assert_eq!(r.dice, None);
        assert_eq!(r.tn, 3);
    }

    #[test]
    fn swap_exchanges_precision_and_recall() {
        let p = mask(&[1, 1, 0, 0, 1]);
        let t = mask(&[1, 0, 1, 0, 0]);
        let a = confusion(&p, &t).unwrap();
        let b = confusion(&t, &p).unwrap();
        assert_eq!(a.precision, b.recall);
        assert_eq!(a.recall, b.precision);
        assert_eq!(a.dice, b.dice);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = mask(&[1, 0]);
        let t = mask(&[1, 0, 0]);
        assert!(confusion(&p, &t).is_err());
    }

    #[test]
    fn averages_pool_and_mean() {
        let r1 = MetricsReport::from_counts(2, 1, 2, 1);
        let r2 = MetricsReport::from_counts(0, 0, 0, 6); // all undefined
        let micro = micro_average(&[r1, r2]);
        assert_eq!((micro.tp, micro.tn), (2, 7));
        let mac = macro_average(&[r1, r2]);
        assert_eq!(mac.skipped_dice, 1);
        assert_eq!(mac.dice, r1.dice);
    }
}
