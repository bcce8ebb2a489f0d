//! Trial scoring (cosine similarity or PLDA log-likelihood ratio) and
//! adaptive symmetric score normalization.
//!
//! AS-Norm z-normalizes each trial score against statistics of an adaptive
//! top-k subset of cohort scores from both trial sides. Variant 1 selects
//! each side's subset by that side's own cohort scores; variant 2
//! cross-selects: the enroll-side statistics are computed over the cohort
//! members that score highest against the *test* segment, and vice versa.

use std::collections::HashMap;

use ndarray::ArrayView1;
use rayon::prelude::*;

use crate::data::{EmbeddingSet, ScoreSet, TrialList};
use crate::error::{Error, Result};
use crate::plda::PldaScorer;

/// A symmetric pair scorer over embedding vectors.
pub trait PairScorer: Sync {
    fn score(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64>;
}

/// Cosine similarity of the two vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct CosineScorer;

impl PairScorer for CosineScorer {
    fn score(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "cosine of dim {} vs {}",
                a.len(),
                b.len()
            )));
        }
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate(
                "cosine similarity undefined for a zero vector".into(),
            ));
        }
        Ok(a.dot(&b) / (na * nb))
    }
}

impl PairScorer for PldaScorer {
    fn score(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
        self.llr(a, b)
    }
}

fn resolve<'a>(
    set: &'a EmbeddingSet,
    id: &str,
    side: &str,
) -> Result<ArrayView1<'a, f64>> {
    match set.get(id) {
        Some(rec) => Ok(ArrayView1::from(rec.vector.as_slice())),
        None => Err(Error::UnknownId(format!(
            "{side} id '{id}' not found in {side} embeddings"
        ))),
    }
}

/// Score every trial. Embeddings must already be in the scoring space (all
/// transforms applied). Output is aligned with trial order.
pub fn score_trials(
    trials: &TrialList,
    enroll: &EmbeddingSet,
    test: &EmbeddingSet,
    scorer: &dyn PairScorer,
) -> Result<ScoreSet> {
    let scores: Result<Vec<f64>> = trials
        .trials()
        .par_iter()
        .map(|t| {
            let e = resolve(enroll, &t.enroll_id, "enroll")?;
            let s = resolve(test, &t.test_id, "test")?;
            scorer.score(e, s)
        })
        .collect();
    ScoreSet::new(trials.clone(), scores?)
}

/// Impostor cohort for score normalization; must live in the same embedding
/// space as the trial sides.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub embeddings: EmbeddingSet,
    pub label: String,
}

impl Cohort {
    pub fn new(embeddings: EmbeddingSet, label: impl Into<String>) -> Result<Self> {
        if embeddings.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "cohort needs at least 2 embeddings, got {}",
                embeddings.len()
            )));
        }
        Ok(Cohort {
            embeddings,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsNormVariant {
    /// Each side's statistics over its own top-k cohort scores.
    AsNorm1,
    /// Cross-selection: each side's statistics over the cohort members
    /// ranked top-k by the other side.
    AsNorm2,
}

impl AsNormVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "asnorm1" | "as-norm1" | "1" => Ok(AsNormVariant::AsNorm1),
            "asnorm2" | "as-norm2" | "2" => Ok(AsNormVariant::AsNorm2),
            other => Err(Error::InvalidArgument(format!(
                "unknown AS-Norm variant '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AsNormConfig {
    pub variant: AsNormVariant,
    pub top_k: usize,
}

impl AsNormConfig {
    /// Tuned defaults: top-100 for variant 1, top-200 for variant 2.
    pub fn with_default_top_k(variant: AsNormVariant) -> Self {
        let top_k = match variant {
            AsNormVariant::AsNorm1 => 100,
            AsNormVariant::AsNorm2 => 200,
        };
        AsNormConfig { variant, top_k }
    }
}

/// Cohort score vector for one segment, aligned with cohort set order.
fn cohort_scores(
    seg: ArrayView1<f64>,
    cohort: &EmbeddingSet,
    scorer: &dyn PairScorer,
) -> Result<Vec<f64>> {
    cohort
        .records()
        .par_iter()
        .map(|c| scorer.score(seg, ArrayView1::from(c.vector.as_slice())))
        .collect()
}

/// Indices of the top-k cohort entries by score descending, ties broken by
/// cohort utt_id ascending.
fn top_k_indices(scores: &[f64], ids: &[&str], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| ids[a].cmp(ids[b]))
    });
    idx.truncate(k);
    idx
}

/// Biased mean/std over the selected subset.
fn subset_stats(scores: &[f64], subset: &[usize]) -> (f64, f64) {
    let k = subset.len() as f64;
    let mean = subset.iter().map(|&i| scores[i]).sum::<f64>() / k;
    let var = subset
        .iter()
        .map(|&i| {
            let d = scores[i] - mean;
            d * d
        })
        .sum::<f64>()
        / k;
    (mean, var.sqrt())
}

/// Adaptive symmetric score normalization of `raw`. `scorer` must be the
/// same scorer that produced the raw scores.
pub fn asnorm(
    raw: &ScoreSet,
    enroll: &EmbeddingSet,
    test: &EmbeddingSet,
    cohort: &Cohort,
    cfg: AsNormConfig,
    scorer: &dyn PairScorer,
) -> Result<ScoreSet> {
    let c = cohort.len();
    if cfg.top_k < 2 || cfg.top_k > c {
        return Err(Error::InvalidArgument(format!(
            "top_k must be in 2..={c}, got {}",
            cfg.top_k
        )));
    }
    let cohort_ids: Vec<&str> = cohort
        .embeddings
        .iter()
        .map(|r| r.utt_id.as_str())
        .collect();

    // Unique segment ids per side, in first-appearance order.
    let mut enroll_ids: Vec<&str> = Vec::new();
    let mut test_ids: Vec<&str> = Vec::new();
    {
        let mut seen_e: HashMap<&str, ()> = HashMap::new();
        let mut seen_t: HashMap<&str, ()> = HashMap::new();
        for t in raw.trials().iter() {
            if seen_e.insert(t.enroll_id.as_str(), ()).is_none() {
                enroll_ids.push(&t.enroll_id);
            }
            if seen_t.insert(t.test_id.as_str(), ()).is_none() {
                test_ids.push(&t.test_id);
            }
        }
    }

    // Cohort score matrix rows, cached per segment id and side.
    let compute_side = |ids: &[&str], set: &EmbeddingSet, side: &str| -> Result<HashMap<String, Vec<f64>>> {
        let rows: Result<Vec<(String, Vec<f64>)>> = ids
            .par_iter()
            .map(|&id| {
                let seg = resolve(set, id, side)?;
                Ok((id.to_string(), cohort_scores(seg, &cohort.embeddings, scorer)?))
            })
            .collect();
        Ok(rows?.into_iter().collect())
    };
    let e_rows = compute_side(&enroll_ids, enroll, "enroll")?;
    let t_rows = compute_side(&test_ids, test, "test")?;

    // Per-segment top-k selections (used directly by variant 1, and as the
    // cross-side selections by variant 2).
    let select = |rows: &HashMap<String, Vec<f64>>| -> HashMap<String, Vec<usize>> {
        rows.iter()
            .map(|(id, scores)| (id.clone(), top_k_indices(scores, &cohort_ids, cfg.top_k)))
            .collect()
    };
    let e_sel = select(&e_rows);
    let t_sel = select(&t_rows);

    let normalized: Result<Vec<f64>> = raw
        .trials()
        .trials()
        .par_iter()
        .zip(raw.scores().par_iter())
        .map(|(t, &s)| {
            let es = &e_rows[t.enroll_id.as_str()];
            let ts = &t_rows[t.test_id.as_str()];
            let (e_subset, t_subset): (&[usize], &[usize]) = match cfg.variant {
                AsNormVariant::AsNorm1 => (&e_sel[t.enroll_id.as_str()], &t_sel[t.test_id.as_str()]),
                // Cross-selection: enroll stats over members top-ranked by
                // the test side, and vice versa.
                AsNormVariant::AsNorm2 => (&t_sel[t.test_id.as_str()], &e_sel[t.enroll_id.as_str()]),
            };
            let (mu_e, sd_e) = subset_stats(es, e_subset);
            let (mu_t, sd_t) = subset_stats(ts, t_subset);
            if sd_e == 0.0 {
                return Err(Error::Degenerate(format!(
                    "zero cohort-score variance on enroll side of trial ({}, {})",
                    t.enroll_id, t.test_id
                )));
            }
            if sd_t == 0.0 {
                return Err(Error::Degenerate(format!(
                    "zero cohort-score variance on test side of trial ({}, {})",
                    t.enroll_id, t.test_id
                )));
            }
            Ok(0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t))
        })
        .collect();

    raw.with_scores(normalized?)
}
