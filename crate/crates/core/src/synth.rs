//! Deterministic synthetic embedding generator.
//!
//! Draws speakers and utterances from the same two-covariance generative
//! model the PLDA back-end assumes: per speaker `y ~ N(0, between_cov)`,
//! per utterance `x = global_mean + y + eps`, `eps ~ N(0, within_cov)`,
//! optionally followed by an affine domain shift. Randomness comes from
//! ChaCha12 streams keyed by `(seed, speaker index)`, so generation is
//! reproducible across platforms and independent of how work is scheduled.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::data::{Embedding, EmbeddingSet, Trial, TrialLabel, TrialList};
use crate::error::{Error, Result};
use crate::linalg;

/// Covariance specification: a full matrix or an isotropic shorthand.
#[derive(Debug, Clone, PartialEq)]
pub enum CovSpec {
    Isotropic(f64),
    Full(Array2<f64>),
}

impl CovSpec {
    /// Materialize as a `dim x dim` matrix.
    pub fn to_matrix(&self, dim: usize) -> Result<Array2<f64>> {
        match self {
            CovSpec::Isotropic(v) => {
                if *v < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "isotropic covariance must be >= 0, got {v}"
                    )));
                }
                Ok(Array2::eye(dim) * *v)
            }
            CovSpec::Full(m) => {
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "covariance is {}x{}, expected {dim}x{dim}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                Ok(m.clone())
            }
        }
    }

    /// Parse `isotropic:<v>` or a `;`-separated list of `,`-separated rows.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(v) = s.strip_prefix("isotropic:") {
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad isotropic value '{v}'")))?;
            return Ok(CovSpec::Isotropic(v));
        }
        let m = parse_matrix(s)?;
        Ok(CovSpec::Full(m))
    }
}

/// Parse a matrix literal: `;`-separated rows of `,`-separated entries.
pub fn parse_matrix(s: &str) -> Result<Array2<f64>> {
    let rows: Vec<&str> = s.split(';').collect();
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for row in &rows {
        let vals: Result<Vec<f64>> = row
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad matrix entry '{}'", t.trim())))
            })
            .collect();
        data.push(vals?);
    }
    let ncols = data[0].len();
    if data.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument("ragged matrix literal".into()));
    }
    let mut m = Array2::zeros((data.len(), ncols));
    for (i, row) in data.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

/// Parse a vector literal: `,`-separated entries.
pub fn parse_vector(s: &str) -> Result<Array1<f64>> {
    let vals: Result<Vec<f64>> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad vector entry '{}'", t.trim())))
        })
        .collect();
    Ok(Array1::from_vec(vals?))
}

/// Affine domain shift `x -> matrix * x + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Shift {
    pub matrix: Array2<f64>,
    pub offset: Array1<f64>,
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub between_cov: CovSpec,
    pub within_cov: CovSpec,
    pub global_mean: Option<Array1<f64>>,
    pub shift: Option<Shift>,
    pub seed: u64,
    /// Dataset id stamped on unshifted records. Shifted records are always
    /// stamped `shifted`.
    pub dataset_id: String,
}

impl SynthConfig {
    pub fn isotropic(
        dim: usize,
        n_speakers: usize,
        utts_per_speaker: usize,
        between_var: f64,
        within_var: f64,
        seed: u64,
    ) -> Self {
        SynthConfig {
            dim,
            n_speakers,
            utts_per_speaker,
            between_cov: CovSpec::Isotropic(between_var),
            within_cov: CovSpec::Isotropic(within_var),
            global_mean: None,
            shift: None,
            seed,
            dataset_id: "synth".into(),
        }
    }

    /// Load from a flat `key = value` text file. Recognized keys:
    /// `dim`, `speakers`, `utts_per_speaker`, `seed`, `between_cov`,
    /// `within_cov`, `global_mean`, `shift_matrix`, `shift_offset`,
    /// `dataset_id`. Covariances accept `isotropic:<v>` or a matrix literal
    /// with `;`-separated rows of `,`-separated entries.
    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut dim = None;
        let mut speakers = None;
        let mut utts = None;
        let mut seed = 0u64;
        let mut between = CovSpec::Isotropic(1.0);
        let mut within = CovSpec::Isotropic(1.0);
        let mut mean = None;
        let mut shift_matrix = None;
        let mut shift_offset = None;
        let mut dataset_id = "synth".to_string();

        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    format!("{}: line {}", path.display(), line_no + 1),
                    "expected 'key = value'",
                )
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::parse(
                    format!("{}: line {}", path.display(), line_no + 1),
                    format!("bad {what} '{value}'"),
                )
            };
            match key {
                "dim" => dim = Some(value.parse::<usize>().map_err(|_| bad("dim"))?),
                "speakers" => speakers = Some(value.parse::<usize>().map_err(|_| bad("speakers"))?),
                "utts_per_speaker" => utts = Some(value.parse::<usize>().map_err(|_| bad("utts_per_speaker"))?),
                "seed" => seed = value.parse::<u64>().map_err(|_| bad("seed"))?,
                "between_cov" => between = CovSpec::parse(value)?,
                "within_cov" => within = CovSpec::parse(value)?,
                "global_mean" => mean = Some(parse_vector(value)?),
                "shift_matrix" => shift_matrix = Some(parse_matrix(value)?),
                "shift_offset" => shift_offset = Some(parse_vector(value)?),
                "dataset_id" => dataset_id = value.to_string(),
                other => {
                    return Err(Error::parse(
                        format!("{}: line {}", path.display(), line_no + 1),
                        format!("unknown key '{other}'"),
                    ))
                }
            }
        }

        let dim = dim.ok_or_else(|| Error::InvalidArgument("config missing 'dim'".into()))?;
        let n_speakers =
            speakers.ok_or_else(|| Error::InvalidArgument("config missing 'speakers'".into()))?;
        let utts_per_speaker =
            utts.ok_or_else(|| Error::InvalidArgument("config missing 'utts_per_speaker'".into()))?;
        let shift = match (shift_matrix, shift_offset) {
            (None, None) => None,
            (m, o) => {
                let matrix = m.unwrap_or_else(|| Array2::eye(dim));
                let offset = o.unwrap_or_else(|| Array1::zeros(dim));
                Some(Shift { matrix, offset })
            }
        };
        Ok(SynthConfig {
            dim,
            n_speakers,
            utts_per_speaker,
            between_cov: between,
            within_cov: within,
            global_mean: mean,
            shift,
            seed,
            dataset_id,
        })
    }
}

fn stream_rng(seed: u64, speaker: u64, purpose: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&speaker.to_le_bytes());
    key[16..24].copy_from_slice(&purpose.to_le_bytes());
    key[24..32].copy_from_slice(b"embedspc");
    ChaCha12Rng::from_seed(key)
}

fn sample_standard(rng: &mut ChaCha12Rng, dim: usize) -> Array1<f64> {
    let mut z = Array1::zeros(dim);
    for v in z.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    z
}

/// Generate an embedding set from the two-covariance model.
pub fn generate(cfg: &SynthConfig) -> Result<EmbeddingSet> {
    if cfg.dim == 0 || cfg.n_speakers == 0 || cfg.utts_per_speaker == 0 {
        return Err(Error::InvalidArgument(
            "dim, speakers and utts_per_speaker must all be >= 1".into(),
        ));
    }
    let sigma_b = cfg.between_cov.to_matrix(cfg.dim)?;
    let sigma_w = cfg.within_cov.to_matrix(cfg.dim)?;

    // PSD check on the between covariance; positive definiteness on within.
    let eig_b = linalg::sym_eigen(sigma_b.view())?;
    let max_b = eig_b.values.iter().cloned().fold(0.0f64, f64::max);
    if eig_b.values.iter().any(|&l| l < -1e-10 * max_b.max(1.0)) {
        return Err(Error::Degenerate(
            "between_cov is not positive semi-definite".into(),
        ));
    }
    let factor_b = linalg::spd_sqrt(sigma_b.view())?;
    let factor_w = linalg::cholesky(sigma_w.view())
        .map_err(|_| Error::Degenerate("within_cov is not positive definite".into()))?;

    let mean = match &cfg.global_mean {
        Some(m) => {
            if m.len() != cfg.dim {
                return Err(Error::DimensionMismatch(format!(
                    "global_mean has dim {}, expected {}",
                    m.len(),
                    cfg.dim
                )));
            }
            m.clone()
        }
        None => Array1::zeros(cfg.dim),
    };
    if let Some(shift) = &cfg.shift {
        if shift.matrix.nrows() != cfg.dim
            || shift.matrix.ncols() != cfg.dim
            || shift.offset.len() != cfg.dim
        {
            return Err(Error::DimensionMismatch(
                "shift matrix/offset dims do not match dim".into(),
            ));
        }
    }

    let dataset_id = if cfg.shift.is_some() {
        "shifted".to_string()
    } else {
        cfg.dataset_id.clone()
    };

    let width = (cfg.n_speakers as f64).log10().ceil().max(1.0) as usize + 1;
    let uwidth = (cfg.utts_per_speaker as f64).log10().ceil().max(1.0) as usize + 1;

    let mut set = EmbeddingSet::new(cfg.dim)?;
    for s in 0..cfg.n_speakers {
        let mut lat_rng = stream_rng(cfg.seed, s as u64, 0);
        let latent = factor_b.dot(&sample_standard(&mut lat_rng, cfg.dim));
        let mut noise_rng = stream_rng(cfg.seed, s as u64, 1);
        for u in 0..cfg.utts_per_speaker {
            let eps = factor_w.dot(&sample_standard(&mut noise_rng, cfg.dim));
            let mut x = &mean + &latent + eps;
            if let Some(shift) = &cfg.shift {
                x = shift.matrix.dot(&x) + &shift.offset;
            }
            let speaker_id = format!("spk{s:0width$}");
            let utt_id = format!("{speaker_id}-u{u:0uwidth$}");
            set.push(Embedding::new(utt_id, speaker_id, dataset_id.clone(), x.to_vec()))?;
        }
    }
    Ok(set)
}

/// Draw `k` distinct indices from `0..n` without replacement (partial
/// Fisher-Yates), deterministically for a given rng state.
fn sample_indices(n: usize, k: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Build a labeled trial list over a labeled embedding set.
///
/// Pairs are unordered (i < j in set order); target pairs share a speaker.
pub fn make_trials(
    set: &EmbeddingSet,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    set.require_labels("make_trials")?;
    let n = set.len();

    // All same-speaker pairs, in deterministic set order.
    let mut target_pairs: Vec<(usize, usize)> = Vec::new();
    for (_, idxs) in set.by_speaker() {
        for a in 0..idxs.len() {
            for b in (a + 1)..idxs.len() {
                let (i, j) = (idxs[a], idxs[b]);
                target_pairs.push((i.min(j), i.max(j)));
            }
        }
    }
    target_pairs.sort_unstable();
    let total_pairs = n * (n - 1) / 2;
    let available_nontarget = total_pairs - target_pairs.len();
    if n_target > target_pairs.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_target} target trials but only {} same-speaker pairs exist",
            target_pairs.len()
        )));
    }
    if n_nontarget > available_nontarget {
        return Err(Error::InvalidArgument(format!(
            "requested {n_nontarget} nontarget trials but only {available_nontarget} cross-speaker pairs exist"
        )));
    }

    let mut rng = stream_rng(seed, 0, 2);
    let chosen_t = sample_indices(target_pairs.len(), n_target, &mut rng);

    let mut list = TrialList::new();
    let recs = set.records();
    for &pi in &chosen_t {
        let (i, j) = target_pairs[pi];
        list.push(Trial {
            enroll_id: recs[i].utt_id.clone(),
            test_id: recs[j].utt_id.clone(),
            label: TrialLabel::Target,
        })?;
    }

    // Nontargets by rejection against a seen-set; falls back to full
    // enumeration when the request is a large fraction of the pool.
    let dense = n_nontarget * 2 >= available_nontarget;
    if dense {
        let mut nontarget_pairs: Vec<(usize, usize)> = Vec::with_capacity(available_nontarget);
        let tset: HashSet<(usize, usize)> = target_pairs.iter().copied().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                if !tset.contains(&(i, j)) {
                    nontarget_pairs.push((i, j));
                }
            }
        }
        let chosen = sample_indices(nontarget_pairs.len(), n_nontarget, &mut rng);
        for &pi in &chosen {
            let (i, j) = nontarget_pairs[pi];
            list.push(Trial {
                enroll_id: recs[i].utt_id.clone(),
                test_id: recs[j].utt_id.clone(),
                label: TrialLabel::Nontarget,
            })?;
        }
    } else {
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        let mut drawn = 0usize;
        while drawn < n_nontarget {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if recs[key.0].speaker_id == recs[key.1].speaker_id || seen.contains(&key) {
                continue;
            }
            seen.insert(key);
            list.push(Trial {
                enroll_id: recs[key.0].utt_id.clone(),
                test_id: recs[key.1].utt_id.clone(),
                label: TrialLabel::Nontarget,
            })?;
            drawn += 1;
        }
    }
    Ok(list)
}
