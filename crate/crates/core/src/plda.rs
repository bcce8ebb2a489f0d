//! Two-covariance Gaussian PLDA: `x = mean + y + eps` with speaker factor
//! `y ~ N(0, between_cov)` and residual `eps ~ N(0, within_cov)`.
//!
//! Training is EM on speaker-labeled embeddings (callers are expected to
//! length-normalize first); scoring evaluates the same/different-speaker
//! log-likelihood ratio through quadratic forms precomputed once per model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::{to_array1, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg;

const PLDA_MAGIC: &[u8; 4] = b"PLDA";

/// Relative floor applied to within-covariance eigenvalues each M-step.
const WITHIN_EIG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mean: Array1<f64>,
    pub between_cov: Array2<f64>,
    pub within_cov: Array2<f64>,
}

impl PldaModel {
    pub fn new(mean: Array1<f64>, between_cov: Array2<f64>, within_cov: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if between_cov.nrows() != d || between_cov.ncols() != d || within_cov.nrows() != d || within_cov.ncols() != d {
            return Err(Error::DimensionMismatch(
                "PLDA mean and covariances must share one dimension".into(),
            ));
        }
        if mean.iter().chain(between_cov.iter()).chain(within_cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("PLDA model contains non-finite values".into()));
        }
        Ok(PldaModel {
            mean,
            between_cov,
            within_cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Multi-segment enrollment: arithmetic mean, re-length-normalized.
    /// This approximates proper multi-session scoring and matches common
    /// practice for averaged enrollment embeddings.
    pub fn enroll_average(&self, vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
        if vectors.is_empty() {
            return Err(Error::InvalidArgument("enroll_average of empty list".into()));
        }
        let d = self.dim();
        let mut mean = vec![0.0f64; d];
        for v in vectors {
            if v.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "enrollment vector has dim {}, model has {}",
                    v.len(),
                    d
                )));
            }
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt() / vectors.len() as f64;
        if norm == 0.0 {
            return Err(Error::Degenerate(
                "enrollment vectors average to the zero vector".into(),
            ));
        }
        let scale = 1.0 / (norm * vectors.len() as f64);
        Ok(mean.into_iter().map(|v| v * scale).collect())
    }
}

/// Trained model plus the marginal training log-likelihood trace. The first
/// entry is the likelihood of the moment-matched initialization; entry `k`
/// is the likelihood after `k` EM iterations.
#[derive(Debug, Clone)]
pub struct PldaTraining {
    pub model: PldaModel,
    pub log_likelihoods: Vec<f64>,
}

struct SpeakerStats {
    count: usize,
    mean: Array1<f64>,
}

/// Eigenvalue flooring. Negative between-covariance eigenvalues clamp to
/// zero; within-covariance eigenvalues clamp to a relative floor so the
/// matrix stays invertible even for degenerate data (e.g. singleton
/// speakers, where the within term is not separately identifiable).
fn floor_psd(cov: &Array2<f64>, rel_floor: f64, scale_hint: f64) -> Result<Array2<f64>> {
    let eig = linalg::sym_eigen(cov.view())?;
    let max = eig.values[0].max(scale_hint);
    if !(max > 0.0) {
        return Err(Error::Degenerate(
            "training data has zero variance; PLDA is undefined".into(),
        ));
    }
    let floor = rel_floor * max;
    let n = eig.values.len();
    let mut out = Array2::zeros((n, n));
    for j in 0..n {
        let l = eig.values[j].max(floor);
        for a in 0..n {
            for b in 0..n {
                out[[a, b]] += l * eig.vectors[[a, j]] * eig.vectors[[b, j]];
            }
        }
    }
    Ok(linalg::symmetrize(&out))
}

/// EM training. `n_iters >= 1`. Initialization is moment-matched (global
/// mean, within/between scatters) and therefore deterministic; `init_seed`
/// is accepted for interface stability and currently unused.
pub fn train_plda(train: &EmbeddingSet, n_iters: usize, _init_seed: u64) -> Result<PldaTraining> {
    train.require_labels("train_plda")?;
    if n_iters < 1 {
        return Err(Error::InvalidArgument("n_iters must be >= 1".into()));
    }
    let groups = train.by_speaker();
    let n_speakers = groups.len();
    if n_speakers < 2 {
        return Err(Error::Degenerate(format!(
            "train_plda needs at least 2 speakers, got {n_speakers}"
        )));
    }
    let d = train.dim();
    let x = train.matrix();
    let n_total = x.nrows();

    // Sufficient statistics: per-speaker counts/means, pooled within-speaker
    // scatter (about each speaker's own mean), global mean.
    let mut speakers: Vec<SpeakerStats> = Vec::with_capacity(n_speakers);
    let mut s_within_total: Array2<f64> = Array2::zeros((d, d));
    let mut global_mean: Array1<f64> = Array1::zeros(d);
    for (_, idxs) in &groups {
        let mut mean = Array1::<f64>::zeros(d);
        for &i in idxs {
            mean += &x.row(i);
        }
        mean /= idxs.len() as f64;
        for &i in idxs {
            let r = &x.row(i) - &mean;
            for a in 0..d {
                for b in 0..d {
                    s_within_total[[a, b]] += r[a] * r[b];
                }
            }
        }
        global_mean += &(&mean * idxs.len() as f64);
        speakers.push(SpeakerStats {
            count: idxs.len(),
            mean,
        });
    }
    global_mean /= n_total as f64;
    s_within_total = linalg::symmetrize(&s_within_total);

    // Moment-matched initialization.
    let mut mu = global_mean.clone();
    let mut sigma_w = &s_within_total / n_total as f64;
    let mut sigma_b: Array2<f64> = Array2::zeros((d, d));
    for sp in &speakers {
        let g = &sp.mean - &mu;
        for a in 0..d {
            for b in 0..d {
                sigma_b[[a, b]] += g[a] * g[b];
            }
        }
    }
    sigma_b /= n_speakers as f64;
    sigma_b = floor_psd(&linalg::symmetrize(&sigma_b), 0.0, 0.0)?;
    let scale_hint = linalg::sym_eigen(sigma_b.view())?.values[0].max(0.0);
    sigma_w = floor_psd(&sigma_w, WITHIN_EIG_FLOOR, scale_hint)?;

    let mut lls = Vec::with_capacity(n_iters + 1);
    lls.push(marginal_log_likelihood(&mu, &sigma_b, &sigma_w, &speakers, &s_within_total)?);

    for _ in 0..n_iters {
        // E-step: posterior mean/cov of each speaker factor, shared across
        // speakers with the same utterance count.
        let counts: std::collections::BTreeSet<usize> =
            speakers.iter().map(|s| s.count).collect();
        let mut post: std::collections::BTreeMap<usize, (Array2<f64>, Array2<f64>)> =
            Default::default();
        for &n in &counts {
            let g = linalg::symmetrize(&(&sigma_b + &(&sigma_w / n as f64)));
            let g_inv = linalg::spd_inverse(g.view())?;
            let gain = sigma_b.dot(&g_inv); // m_i = gain (xbar_i - mu)
            let p = linalg::symmetrize(&(&sigma_b - &gain.dot(&sigma_b)));
            post.insert(n, (gain, p));
        }

        let mut sum_nm: Array1<f64> = Array1::zeros(d);
        let mut latents: Vec<Array1<f64>> = Vec::with_capacity(n_speakers);
        for sp in &speakers {
            let (gain, _) = &post[&sp.count];
            let m = gain.dot(&(&sp.mean - &mu));
            sum_nm += &(&m * sp.count as f64);
            latents.push(m);
        }

        // M-step: joint update of mean and both covariances.
        let new_mu = &global_mean - &(&sum_nm / n_total as f64);

        let mut new_b: Array2<f64> = Array2::zeros((d, d));
        let mut new_w = s_within_total.clone();
        for (sp, m) in speakers.iter().zip(&latents) {
            let (_, p) = &post[&sp.count];
            for a in 0..d {
                for b in 0..d {
                    new_b[[a, b]] += m[a] * m[b] + p[[a, b]];
                }
            }
            let r = &sp.mean - &new_mu - m;
            let w = sp.count as f64;
            for a in 0..d {
                for b in 0..d {
                    new_w[[a, b]] += w * (r[a] * r[b] + p[[a, b]]);
                }
            }
        }
        new_b /= n_speakers as f64;
        new_w /= n_total as f64;

        mu = new_mu;
        sigma_b = floor_psd(&linalg::symmetrize(&new_b), 0.0, 0.0)?;
        let hint = linalg::sym_eigen(sigma_b.view())?.values[0].max(0.0);
        sigma_w = floor_psd(&linalg::symmetrize(&new_w), WITHIN_EIG_FLOOR, hint)?;

        lls.push(marginal_log_likelihood(&mu, &sigma_b, &sigma_w, &speakers, &s_within_total)?);
    }

    Ok(PldaTraining {
        model: PldaModel::new(mu, sigma_b, sigma_w)?,
        log_likelihoods: lls,
    })
}

/// Exact marginal log-likelihood of the training set under the model. Each
/// speaker's utterances are jointly Gaussian; the Woodbury structure of the
/// per-speaker covariance gives
/// `ln|K| = D ln n + ln|Sigma_b + Sigma_w/n| + (n-1) ln|Sigma_w|` and splits
/// the quadratic form into a speaker-mean term plus a pooled scatter term.
fn marginal_log_likelihood(
    mu: &Array1<f64>,
    sigma_b: &Array2<f64>,
    sigma_w: &Array2<f64>,
    speakers: &[SpeakerStats],
    s_within_total: &Array2<f64>,
) -> Result<f64> {
    let d = mu.len();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    let lw = linalg::cholesky(sigma_w.view())?;
    let ln_det_w = 2.0 * (0..d).map(|i| lw[[i, i]].ln()).sum::<f64>();

    // tr(Sigma_w^{-1} S_total)
    let mut tr = 0.0;
    let mut e = Array1::zeros(d);
    for j in 0..d {
        e.fill(0.0);
        for i in 0..d {
            e[i] = s_within_total[[i, j]];
        }
        let col = linalg::cholesky_solve(&lw, e.view());
        tr += col[j];
    }

    let counts: std::collections::BTreeSet<usize> = speakers.iter().map(|s| s.count).collect();
    let mut per_count: std::collections::BTreeMap<usize, (Array2<f64>, f64)> = Default::default();
    for &n in &counts {
        let g = linalg::symmetrize(&(sigma_b + &(sigma_w / n as f64)));
        let lg = linalg::cholesky(g.view())?;
        let ln_det_g = 2.0 * (0..d).map(|i| lg[[i, i]].ln()).sum::<f64>();
        per_count.insert(n, (lg, ln_det_g));
    }

    let mut ll = -0.5 * tr;
    for sp in speakers {
        let n = sp.count;
        let (lg, ln_det_g) = &per_count[&n];
        let xbar = &sp.mean - mu;
        let sol = linalg::cholesky_solve(lg, xbar.view());
        let quad = xbar.dot(&sol);
        ll += -0.5
            * (n as f64 * d as f64 * ln2pi
                + d as f64 * (n as f64).ln()
                + ln_det_g
                + (n as f64 - 1.0) * ln_det_w
                + quad);
    }
    Ok(ll)
}

/// Scoring engine with the quadratic forms precomputed from the model.
///
/// For centered enroll/test vectors `e`, `t`:
/// `llr = (e'Qe + t'Qt)/2 + e'Pt + const`, algebraically identical to the
/// difference of the joint same/different-speaker log-densities.
#[derive(Debug, Clone)]
pub struct PldaScorer {
    mean: Array1<f64>,
    q: Array2<f64>,
    p: Array2<f64>,
    constant: f64,
}

impl PldaScorer {
    pub fn new(model: &PldaModel) -> Result<Self> {
        let total = linalg::symmetrize(&(&model.between_cov + &model.within_cov));
        let tot_inv = linalg::spd_inverse(total.view())?;
        let two_b = linalg::symmetrize(&(&total + &model.between_cov)); // Sigma_w + 2 Sigma_b
        let two_b_inv = linalg::spd_inverse(two_b.view())?;
        let w_inv = linalg::spd_inverse(model.within_cov.view())?;

        // Block inverse of [[T, B],[B, T]] via the half-sum/half-difference
        // identity: diag block A = (inv(T+B) + inv(T-B))/2, off block
        // B = (inv(T+B) - inv(T-B))/2, with T - B = Sigma_w.
        let a = linalg::symmetrize(&(&(&two_b_inv + &w_inv) * 0.5));
        let b = linalg::symmetrize(&(&(&two_b_inv - &w_inv) * 0.5));
        let q = linalg::symmetrize(&(&tot_inv - &a));
        let p = linalg::symmetrize(&(-&b));

        let constant = linalg::spd_log_det(total.view())?
            - 0.5 * linalg::spd_log_det(two_b.view())?
            - 0.5 * linalg::spd_log_det(model.within_cov.view())?;

        Ok(PldaScorer {
            mean: model.mean.clone(),
            q,
            p,
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn quad(m: &Array2<f64>, v: &Array1<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..v.len() {
            let mut row = 0.0;
            for j in 0..v.len() {
                row += m[[i, j]] * v[j];
            }
            s += v[i] * row;
        }
        s
    }

    /// Same/different-speaker log-likelihood ratio. Exactly symmetric in
    /// its arguments: the cross term is evaluated through sum/difference
    /// quadratic forms.
    pub fn llr(&self, enroll: ArrayView1<f64>, test: ArrayView1<f64>) -> Result<f64> {
        let d = self.dim();
        if enroll.len() != d || test.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "scorer expects dim {d}, got {} and {}",
                enroll.len(),
                test.len()
            )));
        }
        if enroll.iter().chain(test.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite input to plda_llr".into()));
        }
        let e = &enroll - &self.mean;
        let t = &test - &self.mean;
        let sum = &e + &t;
        let diff = &e - &t;
        // e'Pt = (sum'P sum - diff'P diff) / 4
        let cross = 0.25 * (Self::quad(&self.p, &sum) - Self::quad(&self.p, &diff));
        Ok(0.5 * Self::quad(&self.q, &e) + 0.5 * Self::quad(&self.q, &t) + cross + self.constant)
    }
}

/// One-call LLR; builds the precomputation each time. Prefer [`PldaScorer`]
/// for batch scoring.
pub fn plda_llr(model: &PldaModel, enroll: &[f64], test: &[f64]) -> Result<f64> {
    let scorer = PldaScorer::new(model)?;
    scorer.llr(to_array1(enroll).view(), to_array1(test).view())
}

pub fn write_plda(model: &PldaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(PLDA_MAGIC).map_err(io_err)?;
    w.write_all(&(model.dim() as u32).to_le_bytes()).map_err(io_err)?;
    for v in model.mean.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    for m in [&model.between_cov, &model.within_cov] {
        for v in m.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_plda(path: impl AsRef<Path>) -> Result<PldaModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::parse(format!("{}", path.display()), msg.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != PLDA_MAGIC {
        return Err(bad("bad magic, expected PLDA"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
    let d = u32::from_le_bytes(b4) as usize;
    let mut read_block = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mean = Array1::from_vec(read_block(d)?);
    let between = Array2::from_shape_vec((d, d), read_block(d * d)?).map_err(|e| bad(&e.to_string()))?;
    let within = Array2::from_shape_vec((d, d), read_block(d * d)?).map_err(|e| bad(&e.to_string()))?;
    PldaModel::new(mean, between, within)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use ndarray::array;

    /// Straight-from-definition LLR: evaluate the two joint Gaussian
    /// densities over the stacked [e; t] vector.
    fn direct_llr(model: &PldaModel, e: &[f64], t: &[f64]) -> f64 {
        let d = model.dim();
        let mut stacked = Array1::zeros(2 * d);
        for i in 0..d {
            stacked[i] = e[i] - model.mean[i];
            stacked[d + i] = t[i] - model.mean[i];
        }
        let total = &model.between_cov + &model.within_cov;
        let mut k_same = Array2::zeros((2 * d, 2 * d));
        let mut k_diff = Array2::zeros((2 * d, 2 * d));
        for i in 0..d {
            for j in 0..d {
                k_same[[i, j]] = total[[i, j]];
                k_same[[d + i, d + j]] = total[[i, j]];
                k_same[[i, d + j]] = model.between_cov[[i, j]];
                k_same[[d + i, j]] = model.between_cov[[i, j]];
                k_diff[[i, j]] = total[[i, j]];
                k_diff[[d + i, d + j]] = total[[i, j]];
            }
        }
        let log_dens = |k: &Array2<f64>| -> f64 {
            let l = linalg::cholesky(k.view()).unwrap();
            let ln_det = 2.0 * (0..2 * d).map(|i| l[[i, i]].ln()).sum::<f64>();
            let sol = linalg::cholesky_solve(&l, stacked.view());
            -0.5 * (2.0 * d as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det + stacked.dot(&sol))
        };
        log_dens(&k_same) - log_dens(&k_diff)
    }

    fn hand_model_1d() -> PldaModel {
        PldaModel::new(array![0.0], array![[1.0]], array![[1.0]]).unwrap()
    }

    #[test]
    fn llr_hand_case_1d() {
        let model = hand_model_1d();
        let llr = plda_llr(&model, &[0.0], &[0.0]).unwrap();
        let want = 0.5 * (4.0f64 / 3.0).ln();
        assert!((llr - want).abs() < 1e-10, "llr {llr} vs {want}");
        let direct = direct_llr(&model, &[0.0], &[0.0]);
        assert!((llr - direct).abs() < 1e-10);
    }

    #[test]
    fn llr_matches_direct_density_evaluation() {
        let model = PldaModel::new(
            array![0.5, -1.0, 2.0],
            array![[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]],
            array![[1.0, 0.1, 0.0], [0.1, 1.5, 0.2], [0.0, 0.2, 0.8]],
        )
        .unwrap();
        let scorer = PldaScorer::new(&model).unwrap();
        let pairs = [
            (vec![0.0, 0.0, 0.0], vec![1.0, -1.0, 0.5]),
            (vec![2.0, 1.0, -3.0], vec![-1.0, 0.0, 4.0]),
            (vec![0.5, -1.0, 2.0], vec![0.5, -1.0, 2.0]),
        ];
        for (e, t) in &pairs {
            let got = scorer
                .llr(to_array1(e).view(), to_array1(t).view())
                .unwrap();
            let want = direct_llr(&model, e, t);
            assert!((got - want).abs() < 1e-8, "got {got}, want {want}");
        }
    }

    #[test]
    fn llr_zero_between_cov_is_zero() {
        let model = PldaModel::new(
            array![1.0, -2.0],
            Array2::zeros((2, 2)),
            array![[2.0, 0.5], [0.5, 1.0]],
        )
        .unwrap();
        let scorer = PldaScorer::new(&model).unwrap();
        for (e, t) in [([0.0, 0.0], [5.0, -3.0]), ([1.0, 1.0], [1.0, 1.0])] {
            let llr = scorer.llr(to_array1(&e).view(), to_array1(&t).view()).unwrap();
            assert!(llr.abs() < 1e-10, "llr {llr}");
        }
    }

    #[test]
    fn llr_exactly_symmetric() {
        let model = PldaModel::new(
            array![0.1, 0.2],
            array![[1.0, 0.4], [0.4, 0.9]],
            array![[0.7, -0.1], [-0.1, 1.2]],
        )
        .unwrap();
        let scorer = PldaScorer::new(&model).unwrap();
        let e = array![0.3, -2.5];
        let t = array![1.7, 0.01];
        let ab = scorer.llr(e.view(), t.view()).unwrap();
        let ba = scorer.llr(t.view(), e.view()).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn llr_translation_invariant() {
        let mut model = PldaModel::new(
            array![0.0, 0.0],
            array![[1.0, 0.2], [0.2, 0.8]],
            array![[0.9, 0.0], [0.0, 1.1]],
        )
        .unwrap();
        let e = [0.4, -0.6];
        let t = [1.0, 0.25];
        let base = plda_llr(&model, &e, &t).unwrap();
        let c = [10.0, -5.0];
        model.mean = array![10.0, -5.0];
        let shifted = plda_llr(&model, &[e[0] + c[0], e[1] + c[1]], &[t[0] + c[0], t[1] + c[1]]).unwrap();
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn em_increases_likelihood_and_recovers_covariances() {
        let cfg = SynthConfig::isotropic(4, 200, 8, 1.0, 1.0, 99);
        let set = generate(&cfg).unwrap();
        let out = train_plda(&set, 10, 0).unwrap();
        for w in out.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "log-likelihood decreased: {w:?}");
        }
        let eye = Array2::eye(4);
        let err_b = linalg::frobenius((&out.model.between_cov - &eye).view())
            / linalg::frobenius(eye.view());
        let err_w = linalg::frobenius((&out.model.within_cov - &eye).view())
            / linalg::frobenius(eye.view());
        assert!(err_b < 0.25, "between-cov error {err_b}");
        assert!(err_w < 0.25, "within-cov error {err_w}");
    }

    #[test]
    fn em_more_iterations_never_worse() {
        let cfg = SynthConfig::isotropic(3, 30, 4, 0.5, 1.5, 5);
        let set = generate(&cfg).unwrap();
        let one = train_plda(&set, 1, 0).unwrap();
        let two = train_plda(&set, 2, 0).unwrap();
        assert!(
            *two.log_likelihoods.last().unwrap() >= one.log_likelihoods.last().unwrap() - 1e-8
        );
    }

    #[test]
    fn em_singleton_speakers_still_converge() {
        // One utterance per speaker: the covariance split is not
        // identifiable, but EM must still run with a monotone likelihood.
        let cfg = SynthConfig::isotropic(3, 40, 1, 1.0, 0.5, 8);
        let set = generate(&cfg).unwrap();
        let out = train_plda(&set, 8, 0).unwrap();
        for w in out.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "decrease with singleton speakers: {w:?}");
        }
    }

    #[test]
    fn em_input_validation() {
        let cfg = SynthConfig::isotropic(2, 1, 5, 1.0, 1.0, 0);
        let single = generate(&cfg).unwrap();
        assert!(train_plda(&single, 5, 0).is_err());

        let cfg = SynthConfig::isotropic(2, 3, 2, 1.0, 1.0, 0);
        let ok = generate(&cfg).unwrap();
        assert!(train_plda(&ok, 0, 0).is_err());

        let mut unlabeled = EmbeddingSet::new(2).unwrap();
        unlabeled
            .push(crate::data::Embedding::new("u", "unknown", "d", vec![0.0, 1.0]))
            .unwrap();
        assert!(train_plda(&unlabeled, 1, 0).is_err());
    }

    #[test]
    fn enroll_average_cases() {
        let model = PldaModel::new(array![0.0, 0.0], Array2::eye(2), Array2::eye(2)).unwrap();
        let avg = model.enroll_average(&[vec![3.0, 4.0]]).unwrap();
        assert!((avg[0] - 0.6).abs() < 1e-12 && (avg[1] - 0.8).abs() < 1e-12);

        let k = model
            .enroll_average(&[vec![3.0, 4.0], vec![3.0, 4.0], vec![3.0, 4.0]])
            .unwrap();
        assert!((k[0] - 0.6).abs() < 1e-12 && (k[1] - 0.8).abs() < 1e-12);

        assert!(model
            .enroll_average(&[vec![1.0, 0.0], vec![-1.0, 0.0]])
            .is_err());
        assert!(model.enroll_average(&[]).is_err());
    }

    #[test]
    fn plda_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.plda");
        let model = PldaModel::new(
            array![0.25, -1.5],
            array![[1.0, 0.1], [0.1, 2.0]],
            array![[0.5, 0.0], [0.0, 0.75]],
        )
        .unwrap();
        write_plda(&model, &p).unwrap();
        let back = read_plda(&p).unwrap();
        assert_eq!(model, back);
    }
}
