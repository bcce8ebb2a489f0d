//! Domain types shared by every stage of the pipeline: embeddings, trials
//! and score sets, plus their file formats (see [`io`]).
//!
//! Vectors are stored as `f64` in memory; the binary file format stores
//! components as `f32`. All types are immutable once constructed and safe to
//! share across threads.

pub mod io;

use std::collections::HashMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Speaker id marking unlabeled records (adaptation/cohort material).
/// Fits that need labels reject sets containing this sentinel.
pub const UNKNOWN_SPEAKER: &str = "unknown";

/// One utterance-level speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub utt_id: String,
    pub speaker_id: String,
    pub dataset_id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(
        utt_id: impl Into<String>,
        speaker_id: impl Into<String>,
        dataset_id: impl Into<String>,
        vector: Vec<f64>,
    ) -> Self {
        Embedding {
            utt_id: utt_id.into(),
            speaker_id: speaker_id.into(),
            dataset_id: dataset_id.into(),
            vector,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_unlabeled(&self) -> bool {
        self.speaker_id == UNKNOWN_SPEAKER
    }
}

/// An ordered collection of embeddings with a common dimension and unique
/// utterance ids. Iteration order is insertion (= file) order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<Embedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be >= 1".into()));
        }
        Ok(EmbeddingSet {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn from_records(dim: usize, records: Vec<Embedding>) -> Result<Self> {
        let mut set = EmbeddingSet::new(dim)?;
        for rec in records {
            set.push(rec)?;
        }
        Ok(set)
    }

    /// Append a record, enforcing the set invariants.
    pub fn push(&mut self, rec: Embedding) -> Result<()> {
        if rec.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "record '{}' has dim {}, set has dim {}",
                rec.utt_id,
                rec.dim(),
                self.dim
            )));
        }
        if rec.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "record '{}' contains a non-finite value",
                rec.utt_id
            )));
        }
        if self.index.contains_key(&rec.utt_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate utt_id '{}'",
                rec.utt_id
            )));
        }
        self.index.insert(rec.utt_id.clone(), self.records.len());
        self.records.push(rec);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Embedding] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Embedding> {
        self.records.iter()
    }

    pub fn get(&self, utt_id: &str) -> Option<&Embedding> {
        self.index.get(utt_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, utt_id: &str) -> bool {
        self.index.contains_key(utt_id)
    }

    /// Records stacked as an `n x dim` matrix in set order.
    pub fn matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.records.len(), self.dim));
        for (i, rec) in self.records.iter().enumerate() {
            for (j, &v) in rec.vector.iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    }

    /// New set with vectors replaced row-by-row (metadata kept). The new
    /// dimension is taken from the replacement rows.
    pub fn with_vectors(&self, rows: Array2<f64>) -> Result<EmbeddingSet> {
        if rows.nrows() != self.records.len() {
            return Err(Error::DimensionMismatch(format!(
                "replacement has {} rows, set has {} records",
                rows.nrows(),
                self.records.len()
            )));
        }
        let dim = rows.ncols();
        let mut set = EmbeddingSet::new(dim)?;
        for (rec, row) in self.records.iter().zip(rows.rows()) {
            set.push(Embedding::new(
                rec.utt_id.clone(),
                rec.speaker_id.clone(),
                rec.dataset_id.clone(),
                row.to_vec(),
            ))?;
        }
        Ok(set)
    }

    /// True if any record carries the `unknown` speaker sentinel.
    pub fn has_unlabeled(&self) -> bool {
        self.records.iter().any(|r| r.is_unlabeled())
    }

    /// Record indices grouped by speaker, in order of first appearance.
    pub fn by_speaker(&self) -> Vec<(&str, Vec<usize>)> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            let e = groups.entry(rec.speaker_id.as_str()).or_insert_with(|| {
                order.push(rec.speaker_id.as_str());
                Vec::new()
            });
            e.push(i);
        }
        order
            .into_iter()
            .map(|s| (s, groups.remove(s).unwrap()))
            .collect()
    }

    /// Require every record to carry a real speaker label.
    pub fn require_labels(&self, what: &str) -> Result<()> {
        if let Some(rec) = self.records.iter().find(|r| r.is_unlabeled()) {
            return Err(Error::InvalidArgument(format!(
                "{what} needs speaker labels but record '{}' is '{}'",
                rec.utt_id, UNKNOWN_SPEAKER
            )));
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a EmbeddingSet {
    type Item = &'a Embedding;
    type IntoIter = std::slice::Iter<'a, Embedding>;
    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// Ground-truth label of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl TrialLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target" | "tgt" => Ok(TrialLabel::Target),
            "nontarget" | "imp" | "non" => Ok(TrialLabel::Nontarget),
            "unknown" => Ok(TrialLabel::Unknown),
            other => Err(Error::InvalidArgument(format!(
                "unknown trial label '{other}'"
            ))),
        }
    }
}

/// An (enrollment, test) utterance pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

/// Ordered list of trials with unique (enroll, test) pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialList {
    trials: Vec<Trial>,
    pairs: HashMap<(String, String), usize>,
}

impl TrialList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trial: Trial) -> Result<()> {
        let key = (trial.enroll_id.clone(), trial.test_id.clone());
        if self.pairs.contains_key(&key) {
            return Err(Error::InvalidArgument(format!(
                "duplicate trial pair ({}, {})",
                trial.enroll_id, trial.test_id
            )));
        }
        self.pairs.insert(key, self.trials.len());
        self.trials.push(trial);
        Ok(())
    }

    pub fn from_trials(trials: Vec<Trial>) -> Result<Self> {
        let mut list = TrialList::new();
        for t in trials {
            list.push(t)?;
        }
        Ok(list)
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trial> {
        self.trials.iter()
    }

    pub fn index_of(&self, enroll_id: &str, test_id: &str) -> Option<usize> {
        self.pairs
            .get(&(enroll_id.to_string(), test_id.to_string()))
            .copied()
    }
}

impl<'a> IntoIterator for &'a TrialList {
    type Item = &'a Trial;
    type IntoIter = std::slice::Iter<'a, Trial>;
    fn into_iter(self) -> Self::IntoIter {
        self.trials.iter()
    }
}

/// Trials plus index-aligned scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    trials: TrialList,
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(trials: TrialList, scores: Vec<f64>) -> Result<Self> {
        if trials.len() != scores.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} trials but {} scores",
                trials.len(),
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            let t = &trials.trials()[i];
            return Err(Error::Degenerate(format!(
                "non-finite score for trial ({}, {})",
                t.enroll_id, t.test_id
            )));
        }
        Ok(ScoreSet { trials, scores })
    }

    pub fn trials(&self) -> &TrialList {
        &self.trials
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Iterate `(trial, score)` pairs in list order.
    pub fn iter(&self) -> impl Iterator<Item = (&Trial, f64)> {
        self.trials.iter().zip(self.scores.iter().copied())
    }

    /// Same trials, new scores.
    pub fn with_scores(&self, scores: Vec<f64>) -> Result<ScoreSet> {
        ScoreSet::new(self.trials.clone(), scores)
    }

    /// Copy labels from a key trial list, matching by (enroll, test) pair.
    /// Every scored trial must be present in the key.
    pub fn with_labels_from(&self, key: &TrialList) -> Result<ScoreSet> {
        let mut trials = TrialList::new();
        for t in self.trials.iter() {
            let label = match key.index_of(&t.enroll_id, &t.test_id) {
                Some(i) => key.trials()[i].label,
                None => {
                    return Err(Error::UnknownId(format!(
                        "trial ({}, {}) not present in key",
                        t.enroll_id, t.test_id
                    )))
                }
            };
            trials.push(Trial {
                enroll_id: t.enroll_id.clone(),
                test_id: t.test_id.clone(),
                label,
            })?;
        }
        ScoreSet::new(trials, self.scores.clone())
    }

    /// Split into (target, nontarget) score vectors. Errors if any trial is
    /// unlabeled or if either class is empty.
    pub fn partition_labeled(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut targets = Vec::new();
        let mut nontargets = Vec::new();
        for (t, s) in self.iter() {
            match t.label {
                TrialLabel::Target => targets.push(s),
                TrialLabel::Nontarget => nontargets.push(s),
                TrialLabel::Unknown => {
                    return Err(Error::InvalidArgument(format!(
                        "trial ({}, {}) has no label",
                        t.enroll_id, t.test_id
                    )))
                }
            }
        }
        if targets.is_empty() || nontargets.is_empty() {
            return Err(Error::Degenerate(format!(
                "need at least one target and one nontarget trial (got {} / {})",
                targets.len(),
                nontargets.len()
            )));
        }
        Ok((targets, nontargets))
    }
}

/// Helper for building an `Array1` from a slice-of-f64 view.
pub(crate) fn to_array1(v: &[f64]) -> Array1<f64> {
    Array1::from_vec(v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_rejects_dim_mismatch() {
        let mut set = EmbeddingSet::new(3).unwrap();
        set.push(Embedding::new("a", "s1", "d", vec![1.0, 2.0, 3.0]))
            .unwrap();
        let err = set
            .push(Embedding::new("b", "s1", "d", vec![1.0, 2.0]))
            .unwrap_err();
        assert!(err.to_string().contains("dim"));
    }

    #[test]
    fn push_rejects_duplicate_and_nonfinite() {
        let mut set = EmbeddingSet::new(2).unwrap();
        set.push(Embedding::new("a", "s1", "d", vec![1.0, 2.0]))
            .unwrap();
        assert!(set
            .push(Embedding::new("a", "s2", "d", vec![0.0, 0.0]))
            .is_err());
        assert!(set
            .push(Embedding::new("b", "s2", "d", vec![f64::NAN, 0.0]))
            .is_err());
    }

    #[test]
    fn by_speaker_keeps_first_appearance_order() {
        let mut set = EmbeddingSet::new(1).unwrap();
        for (u, s) in [("u1", "b"), ("u2", "a"), ("u3", "b")] {
            set.push(Embedding::new(u, s, "d", vec![0.0])).unwrap();
        }
        let groups = set.by_speaker();
        assert_eq!(groups[0].0, "b");
        assert_eq!(groups[0].1, vec![0, 2]);
        assert_eq!(groups[1].0, "a");
    }

    #[test]
    fn trial_list_rejects_duplicates() {
        let mut list = TrialList::new();
        list.push(Trial {
            enroll_id: "e".into(),
            test_id: "t".into(),
            label: TrialLabel::Target,
        })
        .unwrap();
        assert!(list
            .push(Trial {
                enroll_id: "e".into(),
                test_id: "t".into(),
                label: TrialLabel::Nontarget,
            })
            .is_err());
    }

    #[test]
    fn score_set_checks_alignment() {
        let mut list = TrialList::new();
        list.push(Trial {
            enroll_id: "e".into(),
            test_id: "t".into(),
            label: TrialLabel::Unknown,
        })
        .unwrap();
        assert!(ScoreSet::new(list.clone(), vec![]).is_err());
        assert!(ScoreSet::new(list.clone(), vec![f64::INFINITY]).is_err());
        assert!(ScoreSet::new(list, vec![0.5]).is_ok());
    }
}
