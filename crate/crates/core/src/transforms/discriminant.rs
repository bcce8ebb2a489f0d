//! Discriminant projections: LDA and its locality-sensitive variant.
//!
//! Both solve a generalized symmetric eigenproblem and return rows ordered
//! by descending eigenvalue, scaled so the projected constraint matrix
//! (within-class scatter for LDA, within-graph degree scatter for LSDA) is
//! the identity.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg;
use crate::transforms::{LinearTransform, TransformKind};

/// Ridge factor applied to a singular constraint matrix before the solve.
const SCATTER_RIDGE: f64 = 1e-6;

fn ridge_if_singular(c: &mut Array2<f64>) -> Result<()> {
    let d = c.nrows();
    let eig = linalg::sym_eigen(c.view())?;
    let max = eig.values[0];
    if !(max > 0.0) {
        return Err(Error::Degenerate(
            "constraint scatter matrix has no positive eigenvalues".into(),
        ));
    }
    let min = eig.values[d - 1];
    if min <= 1e-10 * max {
        let trace: f64 = (0..d).map(|i| c[[i, i]]).sum();
        let r = SCATTER_RIDGE * trace / d as f64;
        for i in 0..d {
            c[[i, i]] += r;
        }
    }
    Ok(())
}

fn global_mean(x: &Array2<f64>) -> Array1<f64> {
    let n = x.nrows() as f64;
    let mut mean = Array1::zeros(x.ncols());
    for row in x.rows() {
        mean += &row;
    }
    mean / n
}

/// Fit Linear Discriminant Analysis with the sphering convention: the
/// projected within-class covariance of the training data is the identity.
///
/// `out_dim` must satisfy `1 <= out_dim <= min(dim, n_speakers - 1)`. The
/// returned transform also centers: `offset = -matrix * global_mean`.
pub fn fit_lda(train: &EmbeddingSet, out_dim: usize) -> Result<LinearTransform> {
    train.require_labels("fit_lda")?;
    let groups = train.by_speaker();
    let n_speakers = groups.len();
    if n_speakers < 2 {
        return Err(Error::Degenerate(format!(
            "fit_lda needs at least 2 speakers, got {n_speakers}"
        )));
    }
    let d = train.dim();
    let max_dim = d.min(n_speakers - 1);
    if out_dim == 0 || out_dim > max_dim {
        return Err(Error::InvalidArgument(format!(
            "out_dim {out_dim} outside 1..={max_dim} (dim {d}, {n_speakers} speakers)"
        )));
    }

    let x = train.matrix();
    let n = x.nrows() as f64;
    let mean = global_mean(&x);

    let mut s_w: Array2<f64> = Array2::zeros((d, d));
    let mut s_b: Array2<f64> = Array2::zeros((d, d));
    for (_, idxs) in &groups {
        let mut class_mean = Array1::<f64>::zeros(d);
        for &i in idxs {
            class_mean += &x.row(i);
        }
        class_mean /= idxs.len() as f64;
        for &i in idxs {
            let r = &x.row(i) - &class_mean;
            for a in 0..d {
                for b in 0..d {
                    s_w[[a, b]] += r[a] * r[b];
                }
            }
        }
        let g = &class_mean - &mean;
        let w = idxs.len() as f64;
        for a in 0..d {
            for b in 0..d {
                s_b[[a, b]] += w * g[a] * g[b];
            }
        }
    }
    s_w /= n;
    s_b /= n;
    let mut s_w = linalg::symmetrize(&s_w);
    let s_b = linalg::symmetrize(&s_b);

    ridge_if_singular(&mut s_w)?;
    let (_vals, rows) = linalg::generalized_sym_eigen(s_b.view(), s_w.view())?;
    let matrix = rows.slice(ndarray::s![0..out_dim, ..]).to_owned();
    let offset = -matrix.dot(&mean);
    LinearTransform::new(matrix, offset, TransformKind::Lda)
}

/// Fit Locality Sensitive Discriminant Analysis.
///
/// A k-NN graph (Euclidean distance on length-normalized centered vectors,
/// binary edge weights, symmetrized) is split into a within-class adjacency
/// `W_w` and a between-class adjacency `W_b`. The projection maximizes
/// `a' X (alpha L_b + (1-alpha) W_w) X' a` subject to `a' X D_w X' a = 1`,
/// where `L_b` is the Laplacian of `W_b` and `D_w` the degree matrix of
/// `W_w`. Nodes with no same-class neighbor contribute only through the
/// between-graph.
pub fn fit_lsda(
    train: &EmbeddingSet,
    out_dim: usize,
    k_neighbors: usize,
    alpha: f64,
) -> Result<LinearTransform> {
    train.require_labels("fit_lsda")?;
    let n = train.len();
    if k_neighbors == 0 || k_neighbors >= n {
        return Err(Error::InvalidArgument(format!(
            "k_neighbors must be in 1..{n}, got {k_neighbors}"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let d = train.dim();
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidArgument(format!(
            "out_dim {out_dim} outside 1..={d}"
        )));
    }

    let x = train.matrix();
    let mean = global_mean(&x);

    // Unit-norm copies of the raw vectors for the neighbor search only.
    let mut unit = x.clone();
    for mut row in unit.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }

    let mut xc = x;
    for mut row in xc.rows_mut() {
        row -= &mean;
    }

    // k nearest neighbors per node; ties in distance resolved by index.
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut dist: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..d {
                        let diff = unit[[i, c]] - unit[[j, c]];
                        s += diff * diff;
                    }
                    (s, j)
                })
                .collect();
            dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            dist.truncate(k_neighbors);
            dist.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    let labels: Vec<&str> = train.iter().map(|r| r.speaker_id.as_str()).collect();
    let mut within_edges: std::collections::BTreeSet<(usize, usize)> = Default::default();
    let mut between_edges: std::collections::BTreeSet<(usize, usize)> = Default::default();
    for (i, nbrs) in neighbors.iter().enumerate() {
        for &j in nbrs {
            let e = (i.min(j), i.max(j));
            if labels[i] == labels[j] {
                within_edges.insert(e);
            } else {
                between_edges.insert(e);
            }
        }
    }
    if within_edges.is_empty() {
        return Err(Error::Degenerate(
            "within-class graph is empty; no node has a same-class neighbor".into(),
        ));
    }

    let mut deg_w = vec![0.0f64; n];
    let mut deg_b = vec![0.0f64; n];
    for &(i, j) in &within_edges {
        deg_w[i] += 1.0;
        deg_w[j] += 1.0;
    }
    for &(i, j) in &between_edges {
        deg_b[i] += 1.0;
        deg_b[j] += 1.0;
    }

    // X W X' over an edge list: sum of symmetric outer products.
    let outer_sum = |edges: &std::collections::BTreeSet<(usize, usize)>| -> Array2<f64> {
        let mut m = Array2::zeros((d, d));
        for &(i, j) in edges {
            for a in 0..d {
                for b in 0..d {
                    m[[a, b]] += xc[[i, a]] * xc[[j, b]] + xc[[j, a]] * xc[[i, b]];
                }
            }
        }
        m
    };
    let degree_sum = |deg: &[f64]| -> Array2<f64> {
        let mut m = Array2::zeros((d, d));
        for (i, &w) in deg.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for a in 0..d {
                for b in 0..d {
                    m[[a, b]] += w * xc[[i, a]] * xc[[i, b]];
                }
            }
        }
        m
    };

    let xww = outer_sum(&within_edges);
    let xwb = outer_sum(&between_edges);
    let xdb = degree_sum(&deg_b);
    let xdw = degree_sum(&deg_w);

    // alpha * L_b + (1 - alpha) * W_w, Laplacian L_b = D_b - W_b.
    let objective = linalg::symmetrize(&(&(&xdb - &xwb) * alpha + &xww * (1.0 - alpha)));
    let mut constraint = linalg::symmetrize(&xdw);
    ridge_if_singular(&mut constraint)?;

    let (_vals, rows) = linalg::generalized_sym_eigen(objective.view(), constraint.view())?;
    let matrix = rows.slice(ndarray::s![0..out_dim, ..]).to_owned();
    let offset = -matrix.dot(&mean);
    LinearTransform::new(matrix, offset, TransformKind::Lsda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Embedding;
    use crate::data::{ScoreSet, Trial, TrialLabel, TrialList};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn labeled_set(points: &[(usize, Vec<f64>)]) -> EmbeddingSet {
        let dim = points[0].1.len();
        EmbeddingSet::from_records(
            dim,
            points
                .iter()
                .enumerate()
                .map(|(i, (cls, v))| {
                    Embedding::new(format!("u{i}"), format!("s{cls}"), "d", v.clone())
                })
                .collect(),
        )
        .unwrap()
    }

    /// Largest generalized eigenvalue of the 2x2 pencil (M, C), closed form.
    fn pencil_max_eig_2x2(m: &Array2<f64>, c: &Array2<f64>) -> f64 {
        let a = c[[0, 0]] * c[[1, 1]] - c[[0, 1]] * c[[0, 1]];
        let b = -(m[[0, 0]] * c[[1, 1]] + m[[1, 1]] * c[[0, 0]] - 2.0 * m[[0, 1]] * c[[0, 1]]);
        let cc = m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[0, 1]];
        (-b + (b * b - 4.0 * a * cc).sqrt()) / (2.0 * a)
    }

    fn axis_separated_fixture(seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for i in 0..60 {
            let cls = i % 2;
            let center = if cls == 0 { -4.0 } else { 4.0 };
            pts.push((
                cls,
                vec![
                    center + rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ],
            ));
        }
        labeled_set(&pts)
    }

    #[test]
    fn lda_finds_separating_axis() {
        let set = axis_separated_fixture(2);
        let t = fit_lda(&set, 1).unwrap();
        let row = t.matrix.row(0);
        let cos = row[0].abs() / (row[0] * row[0] + row[1] * row[1]).sqrt();
        assert!(cos > 0.99, "cosine with axis 0 was {cos}");
    }

    #[test]
    fn lda_rank_bound_enforced() {
        let set = axis_separated_fixture(3);
        // 2 speakers: out_dim must be <= 1
        assert!(fit_lda(&set, 2).is_err());
        assert!(fit_lda(&set, 0).is_err());
    }

    #[test]
    fn lda_spheres_within_class_covariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut pts = Vec::new();
        for i in 0..200 {
            let cls = i % 5;
            let mut v: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            v[0] += cls as f64 * 3.0;
            v[1] -= cls as f64 * 1.5;
            pts.push((cls, v));
        }
        let set = labeled_set(&pts);
        let t = fit_lda(&set, 3).unwrap();
        let proj = t.apply_set(&set).unwrap();
        // pooled within-class covariance of the projected data
        let x = proj.matrix();
        let mut s_w = Array2::<f64>::zeros((3, 3));
        for (_, idxs) in proj.by_speaker() {
            let mut cm = Array1::<f64>::zeros(3);
            for &i in &idxs {
                cm += &x.row(i);
            }
            cm /= idxs.len() as f64;
            for &i in &idxs {
                let r = &x.row(i) - &cm;
                for a in 0..3 {
                    for b in 0..3 {
                        s_w[[a, b]] += r[a] * r[b];
                    }
                }
            }
        }
        s_w /= x.nrows() as f64;
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (s_w[[a, b]] - want).abs() < 1e-6,
                    "projected S_w[{a},{b}] = {}",
                    s_w[[a, b]]
                );
            }
        }
    }

    #[test]
    fn lda_directions_invariant_to_translation() {
        let set = axis_separated_fixture(9);
        let t0 = fit_lda(&set, 1).unwrap();
        let shifted = set
            .with_vectors({
                let mut m = set.matrix();
                for mut row in m.rows_mut() {
                    row[0] += 13.0;
                    row[1] -= 7.0;
                }
                m
            })
            .unwrap();
        let t1 = fit_lda(&shifted, 1).unwrap();
        for (a, b) in t0.matrix.iter().zip(t1.matrix.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn lsda_rejects_bad_k() {
        let set = axis_separated_fixture(5);
        assert!(fit_lsda(&set, 1, set.len(), 0.5).is_err());
        assert!(fit_lsda(&set, 1, 0, 0.5).is_err());
        assert!(fit_lsda(&set, 1, 5, 1.5).is_err());
    }

    #[test]
    fn lsda_objective_matches_brute_force() {
        // alpha = 0 with k large enough that every same-class pair is
        // connected. The leading direction's Rayleigh quotient must match
        // the closed-form largest eigenvalue of the literally-constructed
        // 2x2 pencil.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut pts = Vec::new();
        for i in 0..24 {
            let cls = i % 2;
            let c = if cls == 0 { -1.0 } else { 1.0 };
            pts.push((
                cls,
                vec![
                    c + 0.4 * rng.sample::<f64, _>(StandardNormal),
                    2.0 * rng.sample::<f64, _>(StandardNormal),
                ],
            ));
        }
        let set = labeled_set(&pts);
        let n = set.len();
        let k = n - 1;
        let alpha = 0.0;
        let t = fit_lsda(&set, 1, k, alpha).unwrap();

        // Rebuild the graph matrices literally (dense n x n) from the
        // definitions and evaluate the objective of the fitted direction.
        let x = set.matrix();
        let mean = global_mean(&x);
        let mut unit = x.clone();
        for mut row in unit.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        let mut xc = x;
        for mut row in xc.rows_mut() {
            row -= &mean;
        }
        let labels: Vec<&str> = set.iter().map(|r| r.speaker_id.as_str()).collect();
        let mut w_w = Array2::<f64>::zeros((n, n));
        let mut w_b = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let mut dist: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let diff = &unit.row(i) - &unit.row(j);
                    (diff.iter().map(|v| v * v).sum::<f64>(), j)
                })
                .collect();
            dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, j) in dist.iter().take(k) {
                if labels[i] == labels[j] {
                    w_w[[i, j]] = 1.0;
                    w_w[[j, i]] = 1.0;
                } else {
                    w_b[[i, j]] = 1.0;
                    w_b[[j, i]] = 1.0;
                }
            }
        }
        let d_w = Array2::from_diag(&w_w.sum_axis(ndarray::Axis(1)));
        let d_b = Array2::from_diag(&w_b.sum_axis(ndarray::Axis(1)));
        let l_b = &d_b - &w_b;
        let graph = &l_b * alpha + &w_w * (1.0 - alpha);
        let m = xc.t().dot(&graph).dot(&xc);
        let c = xc.t().dot(&d_w).dot(&xc);

        let a_vec = t.matrix.row(0).to_owned();
        let num = a_vec.dot(&m.dot(&a_vec));
        let den = a_vec.dot(&c.dot(&a_vec));
        let objective = num / den;
        let want = pencil_max_eig_2x2(&m, &c);
        assert!(
            (objective - want).abs() <= 1e-8 * want.abs().max(1.0),
            "objective {objective} vs closed form {want}"
        );
    }

    fn projection_eer(scores: &[f64], classes: &[usize]) -> f64 {
        let build = |vals: &[f64]| {
            let mut trials = TrialList::new();
            for (i, &cls) in classes.iter().enumerate() {
                trials
                    .push(Trial {
                        enroll_id: format!("e{i}"),
                        test_id: format!("t{i}"),
                        label: if cls == 0 {
                            TrialLabel::Target
                        } else {
                            TrialLabel::Nontarget
                        },
                    })
                    .unwrap();
            }
            let set = ScoreSet::new(trials, vals.to_vec()).unwrap();
            crate::metrics::compute_eer(&set).unwrap()
        };
        let neg: Vec<f64> = scores.iter().map(|v| -v).collect();
        build(scores).min(build(&neg))
    }

    #[test]
    fn lsda_beats_lda_on_interleaved_moons() {
        // Two deeply interleaved moons: the lower moon is pushed up into
        // the upper one (offset 1.3, x compressed) so the class means no
        // longer dominate, while local neighborhoods stay pure.
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let n_per = 120;
        let (offset, noise, xs) = (1.3, 0.08, 0.7);
        let mut pts = Vec::new();
        for i in 0..n_per {
            let t = std::f64::consts::PI * (i as f64 + 0.5) / n_per as f64;
            let e = noise * rng.sample::<f64, _>(StandardNormal);
            pts.push((0, vec![xs * t.cos() + e, t.sin() + e]));
            let e2 = noise * rng.sample::<f64, _>(StandardNormal);
            pts.push((1, vec![xs * (1.0 - t.cos()) + e2, offset - t.sin() + e2]));
        }
        let set = labeled_set(&pts);
        let classes: Vec<usize> = (0..set.len()).map(|i| i % 2).collect();

        let lda = fit_lda(&set, 1).unwrap();
        let lsda = fit_lsda(&set, 1, 10, 0.1).unwrap();
        let proj = |t: &LinearTransform| -> Vec<f64> {
            set.iter().map(|r| t.apply_vec(&r.vector).unwrap()[0]).collect()
        };
        let eer_lda = projection_eer(&proj(&lda), &classes);
        let eer_lsda = projection_eer(&proj(&lsda), &classes);
        assert!(
            eer_lsda < eer_lda,
            "LSDA EER {eer_lsda} not below LDA EER {eer_lda}"
        );
    }
}
