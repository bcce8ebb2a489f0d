//! Detection metrics: equal error rate and normalized detection cost
//! (minimum over thresholds, and actual at the Bayes threshold of
//! calibrated log-likelihood-ratio scores).
//!
//! Decisions accept a trial iff `score >= threshold`. The ROC is built by
//! sweeping thresholds over the distinct scores (ties flip together), with
//! exact integer miss/false-alarm counts.

use crate::data::ScoreSet;
use crate::error::{Error, Result};

/// Detection cost parameters. The reported cost is the mean over
/// `p_targets` of the per-operating-point normalized costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_targets: Vec<f64>,
}

impl CostParams {
    pub fn new(c_miss: f64, c_fa: f64, p_targets: Vec<f64>) -> Result<Self> {
        if !(c_miss > 0.0) || !(c_fa > 0.0) {
            return Err(Error::InvalidArgument(
                "detection costs must be positive".into(),
            ));
        }
        if p_targets.is_empty() || p_targets.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::InvalidArgument(
                "p_targets must be a nonempty list of probabilities in (0, 1)".into(),
            ));
        }
        Ok(CostParams {
            c_miss,
            c_fa,
            p_targets,
        })
    }

    /// CMN2-style profile: unit costs averaged over target priors 0.01 and
    /// 0.005. These parameter values are evaluation-plan conventions, not
    /// part of this crate's math.
    pub fn cmn2() -> Self {
        CostParams {
            c_miss: 1.0,
            c_fa: 1.0,
            p_targets: vec![0.01, 0.005],
        }
    }

    /// VAST-style profile: unit costs at target prior 0.05.
    pub fn vast() -> Self {
        CostParams {
            c_miss: 1.0,
            c_fa: 1.0,
            p_targets: vec![0.05],
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "cmn2" => Ok(Self::cmn2()),
            "vast" => Ok(Self::vast()),
            other => Err(Error::InvalidArgument(format!(
                "unknown cost profile '{other}' (expected 'cmn2' or 'vast')"
            ))),
        }
    }
}

/// One ROC operating point: integer counts at a given threshold.
#[derive(Debug, Clone, Copy)]
struct RocPoint {
    /// Targets with score < threshold.
    miss: usize,
    /// Nontargets with score >= threshold.
    fa: usize,
}

/// Operating points for thresholds from "above every score" (reject all)
/// down through each distinct score (accept all at the last).
fn roc_points(targets: &[f64], nontargets: &[f64]) -> Vec<RocPoint> {
    let mut scored: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut points = Vec::with_capacity(scored.len() + 1);
    points.push(RocPoint {
        miss: targets.len(),
        fa: 0,
    });
    let mut accepted_targets = 0usize;
    let mut accepted_nontargets = 0usize;
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        // ties flip together
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                accepted_targets += 1;
            } else {
                accepted_nontargets += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            miss: targets.len() - accepted_targets,
            fa: accepted_nontargets,
        });
    }
    points
}

/// Equal error rate: where the miss rate equals the false-alarm rate on the
/// ROC, with linear interpolation between the two bracketing points.
pub fn compute_eer(scores: &ScoreSet) -> Result<f64> {
    let (targets, nontargets) = scores.partition_labeled()?;
    let points = roc_points(&targets, &nontargets);
    let t = targets.len() as f64;
    let n = nontargets.len() as f64;

    let mut prev_miss = 1.0f64;
    let mut prev_fa = 0.0f64;
    for p in points.iter().skip(1) {
        let miss = p.miss as f64 / t;
        let fa = p.fa as f64 / n;
        let d_prev = prev_miss - prev_fa;
        let d_cur = miss - fa;
        if d_cur <= 0.0 {
            // crossing inside [prev, cur]
            if d_prev == d_cur {
                return Ok(0.5 * (prev_miss + prev_fa));
            }
            let frac = d_prev / (d_prev - d_cur);
            return Ok(prev_miss + frac * (miss - prev_miss));
        }
        prev_miss = miss;
        prev_fa = fa;
    }
    // miss > fa everywhere except the trailing accept-all point, which the
    // loop always visits; unreachable for valid inputs
    Ok(0.5 * (prev_miss + prev_fa))
}

fn normalized_cost(
    point: RocPoint,
    n_targets: usize,
    n_nontargets: usize,
    params: &CostParams,
    p: f64,
) -> f64 {
    let p_miss = point.miss as f64 / n_targets as f64;
    let p_fa = point.fa as f64 / n_nontargets as f64;
    let raw = params.c_miss * p * p_miss + params.c_fa * (1.0 - p) * p_fa;
    raw / (params.c_miss * p).min(params.c_fa * (1.0 - p))
}

/// Minimum normalized detection cost: per operating point, the minimum over
/// all thresholds; the result is the mean over `p_targets`.
pub fn compute_min_cost(scores: &ScoreSet, params: &CostParams) -> Result<f64> {
    let (targets, nontargets) = scores.partition_labeled()?;
    let points = roc_points(&targets, &nontargets);
    let mut total = 0.0;
    for &p in &params.p_targets {
        let min = points
            .iter()
            .map(|&pt| normalized_cost(pt, targets.len(), nontargets.len(), params, p))
            .fold(f64::INFINITY, f64::min);
        total += min;
    }
    Ok(total / params.p_targets.len() as f64)
}

/// Actual normalized detection cost at the Bayes threshold
/// `ln(c_fa (1-p) / (c_miss p))`. Scores must be calibrated
/// log-likelihood ratios for this to be meaningful.
pub fn compute_act_cost(scores: &ScoreSet, params: &CostParams) -> Result<f64> {
    let (targets, nontargets) = scores.partition_labeled()?;
    let mut total = 0.0;
    for &p in &params.p_targets {
        let threshold = ((params.c_fa * (1.0 - p)) / (params.c_miss * p)).ln();
        let miss = targets.iter().filter(|&&s| s < threshold).count();
        let fa = nontargets.iter().filter(|&&s| s >= threshold).count();
        total += normalized_cost(
            RocPoint { miss, fa },
            targets.len(),
            nontargets.len(),
            params,
            p,
        );
    }
    Ok(total / params.p_targets.len() as f64)
}

/// Convenience bundle for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub eer: f64,
    pub min_cost: f64,
    pub act_cost: f64,
}

pub fn evaluate(scores: &ScoreSet, params: &CostParams) -> Result<Report> {
    Ok(Report {
        eer: compute_eer(scores)?,
        min_cost: compute_min_cost(scores, params)?,
        act_cost: compute_act_cost(scores, params)?,
    })
}

impl Report {
    /// The table line `EER[%] / minC / actC`.
    pub fn table_line(&self) -> String {
        format!(
            "{:.2} / {:.3} / {:.3}",
            self.eer * 100.0,
            self.min_cost,
            self.act_cost
        )
    }

    /// Machine-readable TSV: full-precision `eer<TAB>min_cost<TAB>act_cost`.
    pub fn tsv_line(&self) -> String {
        format!("{}\t{}\t{}", self.eer, self.min_cost, self.act_cost)
    }
}
