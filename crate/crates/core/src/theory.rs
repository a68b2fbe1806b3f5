//! Numerical oracles for the condensation theory of linear convolution
//! models: achievability and validity of gradient matching, its transfer
//! across 1D-CNN kernel sizes and across graph filters, adjacency
//! overfitting, and the alignment/calibration equivalence.
//!
//! All least-squares fits here use ridge 0 and the row weights of
//! [`crate::model`] (1/m on T, 1/c on S), so moment conditions are stated
//! on weighted Gram and cross matrices.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GraphDataset;
use crate::derivatives::HyperMode;
use crate::error::{HcdcError, Result};
use crate::filters::cyclic_shift;
use crate::hcdc::{align_loss, TIE_TOL};
use crate::hypergrad::{hypergradient, optimized_loss, Solver};
use crate::linalg::{gaussian, numerical_rank, seeded_rng, vec_dot, vec_norm, Mat};
use crate::model::{ConvProblem, LossSpec, RowProblem, RowWeights};
use crate::sdc::solve_matching_conditions;

/// Relative singular-value threshold for span and rank checks.
pub const RANK_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Trajectories and achievability
// ---------------------------------------------------------------------------

/// `rows * cols` i.i.d. Gaussian parameter matrices whose vectorizations
/// span the parameter space; re-drawn if the stack is rank deficient.
pub fn random_spanning_trajectory(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Mat> {
    let dim = rows * cols;
    loop {
        let traj: Vec<Mat> = (0..dim).map(|_| gaussian(rng, rows, cols, 1.0)).collect();
        if span_rank(&traj) == dim {
            return traj;
        }
    }
}

/// Rank of the stacked, vectorized trajectory.
pub fn span_rank(trajectory: &[Mat]) -> usize {
    let Some(first) = trajectory.first() else {
        return 0;
    };
    let dim = first.len();
    let stacked = Mat::from_fn(trajectory.len(), dim, |t, j| trajectory[t].as_slice()[j]);
    numerical_rank(&stacked, RANK_TOL)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AchievabilityReport {
    pub trajectory: Vec<Vec<f64>>,
    pub span_rank: usize,
    pub dim: usize,
    /// `max_t ||grad L_T(theta_t) - grad L_S(theta_t)||`.
    pub residual: f64,
    pub achieved: bool,
}

/// Gradient-matching residual of `s` against `t` at filter weights `lambda`
/// along `trajectory` (l2 distance, train splits, ridge 0).
pub fn check_achievability(
    t: &ConvProblem,
    s: &ConvProblem,
    lambda: &[f64],
    trajectory: &[Mat],
    tol: f64,
) -> Result<AchievabilityReport> {
    if trajectory.is_empty() {
        return Err(HcdcError::InvalidArgument("trajectory is empty".into()));
    }
    let spec = LossSpec::train(0.0);
    let rt = t.rows(lambda, &spec)?;
    let rs = s.rows(lambda, &spec)?;
    let mut residual: f64 = 0.0;
    for w in trajectory {
        t.check_w(w)?;
        residual = residual.max((rt.grad(w) - rs.grad(w)).norm());
    }
    let dim = trajectory[0].len();
    let span_rank = span_rank(trajectory);
    Ok(AchievabilityReport {
        trajectory: trajectory.iter().map(|w| w.as_slice().to_vec()).collect(),
        span_rank,
        dim,
        residual,
        achieved: span_rank == dim && residual < tol,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdcValidity {
    pub w_t: Vec<f64>,
    pub w_s: Vec<f64>,
    pub rel_error: f64,
}

/// Least-squares optima of both datasets at `lambda` and their relative gap
/// `||W_S - W_T|| / ||W_T||`.
pub fn verify_sdc_validity(t: &ConvProblem, s: &ConvProblem, lambda: &[f64]) -> Result<SdcValidity> {
    let spec = LossSpec::train(0.0);
    let w_t = t.train_closed_form(lambda, &spec)?;
    let w_s = s.train_closed_form(lambda, &spec)?;
    let rel_error = (&w_s - &w_t).norm() / w_t.norm();
    Ok(SdcValidity {
        w_t: w_t.as_slice().to_vec(),
        w_s: w_s.as_slice().to_vec(),
        rel_error,
    })
}

// ---------------------------------------------------------------------------
// 1D-CNN kernel transfer
// ---------------------------------------------------------------------------

/// `[P^{-k} X | ... | P^{k} X]`, the design of a width-`2k+1` 1D convolution.
pub fn shift_design(x: &Mat, k: usize) -> Result<Mat> {
    let (n, d) = x.shape();
    let width = 2 * k + 1;
    let mut z = Mat::zeros(n, width * d);
    for (slot, shift) in (-(k as i64)..=k as i64).enumerate() {
        let block = cyclic_shift(n, shift)? * x;
        z.view_mut((0, slot * d), (n, d)).copy_from(&block);
    }
    Ok(z)
}

/// Uniformly weighted least squares on all rows of a signal dataset.
fn signal_rows(x: &Mat, y: &Mat, k: usize) -> Result<RowProblem> {
    let n = x.nrows();
    let z = shift_design(x, k)?;
    let weights = RowWeights {
        rows: (0..n).collect(),
        weights: vec![1.0 / n as f64; n],
    };
    Ok(RowProblem::new(&z, y, weights, 0.0))
}

/// Symmetric circulant basis `I, P^j + P^-j, ..., P^{n/2}`.
fn circulant_basis(n: usize) -> Result<Vec<Mat>> {
    let mut basis = vec![Mat::identity(n, n)];
    for j in 1..=n / 2 {
        let p = cyclic_shift(n, j as i64)?;
        if 2 * j == n {
            basis.push(p);
        } else {
            basis.push(&p + p.transpose());
        }
    }
    Ok(basis)
}

/// A signal dataset `S = (G X, G y)` on the same cycle, where `G` is a
/// symmetric circulant with `G^2 = I + E` and `E` chosen so that every Gram
/// lag `|k| <= 2K` and cross lag `|k| <= K` of `T` is preserved. Width
/// `2K'+1` models with `K' <= K` then see identical gradients on S and T.
/// Uses all positions of `t` (splits are ignored).
pub fn construct_1dcnn_condensed(t: &GraphDataset, k: usize, seed: u64) -> Result<GraphDataset> {
    let n = t.n();
    let x = &t.features;
    let y = &t.targets;
    if 4 * k + 1 > n {
        return Err(HcdcError::InvalidArgument(format!(
            "kernel half-width {k} too large for n = {n}"
        )));
    }
    let basis = circulant_basis(n)?;
    let mut shifts = Vec::new();
    for lag in 0..=2 * k as i64 {
        shifts.push(cyclic_shift(n, lag)?);
    }
    // One column per basis element: its contribution to every constraint.
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(basis.len());
    for b in &basis {
        let bx = b * x;
        let by = b * y;
        let mut col = Vec::new();
        for p in &shifts {
            col.extend((x.transpose() * p * &bx).iter());
        }
        for lag in -(k as i64)..=k as i64 {
            let p = cyclic_shift(n, lag)?;
            col.extend((x.transpose() * p * &by).iter());
        }
        columns.push(col);
    }
    let rows = columns[0].len().max(columns.len());
    let m = Mat::from_fn(rows, columns.len(), |r, c| columns[c].get(r).copied().unwrap_or(0.0));
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let top = svd.singular_values.max();
    let null: Vec<usize> = (0..columns.len())
        .filter(|&i| svd.singular_values[i] <= 1e-10 * top)
        .collect();
    if null.is_empty() {
        return Err(HcdcError::RankDeficient(
            "no circulant perturbation preserves the required lags".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let mix = gaussian(&mut rng, null.len(), 1, 1.0);
    let mut e = Mat::zeros(n, n);
    for (w, &i) in mix.iter().zip(&null) {
        for (coef, b) in v_t.row(i).iter().zip(&basis) {
            e += b * (w * coef);
        }
    }
    let eig = e.symmetric_eigen();
    let radius = eig.eigenvalues.amax();
    if radius == 0.0 {
        return Err(HcdcError::RankDeficient("perturbation vanished".into()));
    }
    // ||E|| = 1/2 keeps I + E positive definite.
    let roots = eig.eigenvalues.map(|mu| (1.0 + 0.5 * mu / radius).sqrt());
    let g = &eig.eigenvectors * Mat::from_diagonal(&roots) * eig.eigenvectors.transpose();
    Ok(GraphDataset {
        features: &g * x,
        targets: &g * y,
        ..t.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnResidual {
    pub k_prime: usize,
    pub residual: f64,
}

/// Max gradient-match residual of width-`2K'+1` models between `t` and `s`
/// on a random spanning trajectory, for each `K'` in `k_primes`.
pub fn verify_1dcnn_generalization(t: &GraphDataset, s: &GraphDataset, k_primes: &[usize], seed: u64) -> Result<Vec<CnnResidual>> {
    if t.n() != s.n() || t.d() != s.d() || t.outputs() != s.outputs() {
        return Err(HcdcError::InvalidDataset(
            "signal datasets must share length and widths".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    k_primes
        .iter()
        .map(|&kp| {
            let rt = signal_rows(&t.features, &t.targets, kp)?;
            let rs = signal_rows(&s.features, &s.targets, kp)?;
            let traj = random_spanning_trajectory(&mut rng, (2 * kp + 1) * t.d(), t.outputs());
            let residual = traj
                .iter()
                .map(|w| (rt.grad(w) - rs.grad(w)).norm())
                .fold(0.0, f64::max);
            Ok(CnnResidual { k_prime: kp, residual })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Adjacency overfitting and cross-filter transfer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    /// Synthetic convolution `C'` (c x c).
    pub conv: Vec<f64>,
    pub c: usize,
    pub gram_residual: f64,
    pub cross_residual: f64,
}

/// Synthetic convolution `C' = Z' pinv(X')` that makes the fixed features
/// `x_s` satisfy both moment conditions of `conv` on `t`, with targets from
/// the least-norm matching solution.
pub fn construct_overfit_adjacency(x_s: &Mat, t: &GraphDataset, conv: &Mat) -> Result<(Mat, Mat, OverfitReport)> {
    let (c, d) = x_s.shape();
    if d != t.d() {
        return Err(HcdcError::shape("synthetic features", t.d(), d));
    }
    if c < d || numerical_rank(x_s, RANK_TOL) < d {
        return Err(HcdcError::RankDeficient(
            "synthetic features must have full column rank".into(),
        ));
    }
    let target = solve_matching_conditions(t, conv, c)?;
    let z_s = &target.data.features;
    let pinv = x_s
        .clone()
        .pseudo_inverse(0.0)
        .map_err(|e| HcdcError::RankDeficient(e.to_string()))?;
    let c_conv = z_s * pinv;
    let y_s = target.data.targets.clone();

    let spec = LossSpec::train(0.0);
    let rt = RowProblem::new(&(conv * &t.features), &t.targets, RowWeights::new(t, &spec)?, 0.0);
    let weights = RowWeights {
        rows: (0..c).collect(),
        weights: vec![1.0 / c as f64; c],
    };
    let rs = RowProblem::new(&(&c_conv * x_s), &y_s, weights, 0.0);
    let gram_residual = (rt.half_hessian() - rs.half_hessian()).norm();
    let cross_residual = (rt.z.transpose() * rt.weights.scale_rows(&rt.y) - rs.z.transpose() * rs.weights.scale_rows(&rs.y)).norm();
    let report = OverfitReport {
        conv: c_conv.as_slice().to_vec(),
        c,
        gram_residual,
        cross_residual,
    };
    Ok((c_conv, y_s, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QBound {
    pub q: Vec<f64>,
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `max{sigma_max(Q) - 1, 1 - sigma_min(Q)}`.
    pub bound: f64,
    /// Measured `||W_S - W_T|| / ||W_T||` for the alternative filter.
    pub actual: f64,
    /// `||(Q - I) X^T C^T y|| / ||X^T C^T y||`, the intermediate quantity of
    /// the argument that the measured error is compared against.
    pub proof_expression: f64,
    pub sigma_max_q_minus_i: f64,
    pub holds: bool,
}

/// Transfer of a matching-conditions condensation with identity synthetic
/// adjacency from filter `conv` to `conv_alt`. On `A' = I` every filter of
/// the families here acts as the identity, so the transferred optimum is the
/// optimum for `conv`, compared against the optimum for `conv_alt` on T.
pub fn q_matrix_bound(t: &GraphDataset, conv: &Mat, conv_alt: &Mat) -> Result<QBound> {
    let spec = LossSpec::train(0.0);
    let weights = RowWeights::new(t, &spec)?;
    let r = RowProblem::new(&(conv * &t.features), &t.targets, weights.clone(), 0.0);
    let r_alt = RowProblem::new(&(conv_alt * &t.features), &t.targets, weights, 0.0);
    let gram = r.half_hessian();
    let gram_alt = r_alt.half_hessian();
    let d = gram.nrows();
    let inv_alt = gram_alt
        .clone()
        .try_inverse()
        .ok_or_else(|| HcdcError::RankDeficient("alternative Gram matrix is singular".into()))?;
    let q = &gram * inv_alt;
    let sv = q.clone().svd(false, false).singular_values;
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    let bound = (sigma_max - 1.0).max(1.0 - sigma_min);

    let s = solve_matching_conditions(t, conv, 2 * d)?;
    let s_problem = ConvProblem::from_convs(s.data.clone(), vec![Mat::identity(2 * d, 2 * d)])?;
    let w_s = s_problem.train_closed_form(&[1.0], &spec)?;
    let w_t = r_alt.solve()?;
    let actual = (&w_s - &w_t).norm() / w_t.norm();

    let b = r.z.transpose() * r.weights.scale_rows(&r.y);
    let q_minus_i = &q - Mat::identity(d, d);
    let proof_expression = (&q_minus_i * &b).norm() / b.norm();
    let sigma_max_q_minus_i = q_minus_i.svd(false, false).singular_values.max();
    Ok(QBound {
        q: q.as_slice().to_vec(),
        sigma_max,
        sigma_min,
        bound,
        actual,
        proof_expression,
        sigma_max_q_minus_i,
        holds: actual >= bound - 1e-8,
    })
}

// ---------------------------------------------------------------------------
// Alignment and calibration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    /// Alignment below this at every point triggers the sufficiency check.
    pub eps_align: f64,
    /// Points with alignment loss above this are probed for sign conflicts.
    pub eps_misalign: f64,
    /// Loss differences below this count as ties.
    pub tie_tol: f64,
    /// Optional box the path must stay in.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub ridge: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            eps_align: 0.1,
            eps_misalign: 1e-6,
            tie_tol: TIE_TOL,
            bounds: None,
            ridge: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub point: usize,
    pub align_loss: f64,
    /// A direction with `<hg_T, delta> <hg_S, delta> < 0`, if one was found.
    pub delta: Option<Vec<f64>>,
    pub change_t: f64,
    pub change_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub align_losses: Vec<f64>,
    pub all_aligned: bool,
    pub delta_t: f64,
    pub delta_s: f64,
    /// `None` when alignment is not below `eps_align` everywhere.
    pub sufficiency: Option<bool>,
    pub probes: Vec<ProbeResult>,
}

/// A first-order sign conflict between two hypergradients. Tries
/// `hg_T/|hg_T| - hg_S/|hg_S|` (which works whenever the cosine is below 1),
/// then signed coordinate directions.
pub fn necessity_probe(hg_t: &[f64], hg_s: &[f64]) -> Option<Vec<f64>> {
    let conflict = |d: &[f64]| vec_dot(hg_t, d) * vec_dot(hg_s, d) < 0.0;
    let nt = vec_norm(hg_t);
    let ns = vec_norm(hg_s);
    if nt > 0.0 && ns > 0.0 {
        let d: Vec<f64> = hg_t.iter().zip(hg_s).map(|(a, b)| a / nt - b / ns).collect();
        if conflict(&d) {
            return Some(d);
        }
    }
    for i in 0..hg_t.len() {
        for sign in [1.0, -1.0] {
            let mut d = vec![0.0; hg_t.len()];
            d[i] = sign;
            if conflict(&d) {
                return Some(d);
            }
        }
    }
    None
}

/// Sufficiency and necessity checks of alignment versus calibration along a
/// hyperparameter `path`.
pub fn verify_equivalence(
    t: &ConvProblem,
    s: &ConvProblem,
    mode: &HyperMode,
    path: &[Vec<f64>],
    cfg: &EquivalenceConfig,
) -> Result<EquivalenceReport> {
    if path.len() < 2 {
        return Err(HcdcError::InvalidArgument("path needs at least two points".into()));
    }
    if let Some(bounds) = &cfg.bounds {
        for (i, p) in path.iter().enumerate() {
            let inside = p.len() == bounds.len() && p.iter().zip(bounds).all(|(v, (lo, hi))| v >= lo && v <= hi);
            if !inside {
                return Err(HcdcError::InvalidArgument(format!("path point {i} leaves the box")));
            }
        }
    }
    let mut align_losses = Vec::with_capacity(path.len());
    let mut probes = Vec::new();
    for (i, p) in path.iter().enumerate() {
        let hg_t = hypergradient(t, mode, p, cfg.ridge, Solver::Direct)?.total;
        let hg_s = hypergradient(s, mode, p, cfg.ridge, Solver::Direct)?.total;
        let loss = align_loss(&hg_t, &hg_s)?;
        align_losses.push(loss);
        if loss > cfg.eps_misalign {
            let delta = necessity_probe(&hg_t, &hg_s);
            let (change_t, change_s) = delta
                .as_ref()
                .map_or((0.0, 0.0), |d| (vec_dot(&hg_t, d), vec_dot(&hg_s, d)));
            probes.push(ProbeResult {
                point: i,
                align_loss: loss,
                delta,
                change_t,
                change_s,
            });
        }
    }
    let first = &path[0];
    let last = &path[path.len() - 1];
    let delta_t = optimized_loss(t, mode, last, cfg.ridge)?.0 - optimized_loss(t, mode, first, cfg.ridge)?.0;
    let delta_s = optimized_loss(s, mode, last, cfg.ridge)?.0 - optimized_loss(s, mode, first, cfg.ridge)?.0;
    let all_aligned = align_losses.iter().all(|&l| l < cfg.eps_align);
    let sufficiency = all_aligned.then(|| {
        let tied = delta_t.abs() < cfg.tie_tol && delta_s.abs() < cfg.tie_tol;
        tied || delta_t * delta_s > 0.0
    });
    Ok(EquivalenceReport {
        align_losses,
        all_aligned,
        delta_t,
        delta_s,
        sufficiency,
        probes,
    })
}

/// `count` evenly spaced points on the segment from `a` to `b`.
pub fn segment_path(a: &[f64], b: &[f64], count: usize) -> Vec<Vec<f64>> {
    let steps = count.max(2) - 1;
    (0..=steps)
        .map(|i| {
            let s = i as f64 / steps as f64;
            a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_cyclic_signal, gen_sbm, SbmConfig};
    use crate::filters::{gcn_norm, FilterFamily};
    use approx::assert_relative_eq;

    fn sbm(n: usize, d: usize, seed: u64) -> GraphDataset {
        gen_sbm(&SbmConfig {
            n,
            blocks: 2,
            p_in: 0.3,
            p_out: 0.05,
            d,
            noise: 1.0,
            seed,
        })
        .unwrap()
    }

    fn gcn_problem(ds: GraphDataset) -> ConvProblem {
        let conv = gcn_norm(&ds.adjacency);
        ConvProblem::from_convs(ds, vec![conv]).unwrap()
    }

    fn matched(ds: &GraphDataset, c: usize) -> ConvProblem {
        let conv = gcn_norm(&ds.adjacency);
        let s = solve_matching_conditions(ds, &conv, c).unwrap();
        ConvProblem::from_convs(s.data, vec![Mat::identity(c, c)]).unwrap()
    }

    #[test]
    fn matching_conditions_are_achievable() {
        let ds = sbm(48, 4, 1);
        let t = gcn_problem(ds.clone());
        let s = matched(&ds, 8);
        let traj = random_spanning_trajectory(&mut seeded_rng(2), 4, 2);
        let report = check_achievability(&t, &s, &[1.0], &traj, 1e-9).unwrap();
        assert_eq!(report.span_rank, 8);
        assert!(report.achieved, "residual {}", report.residual);
    }

    #[test]
    fn noise_is_not_achievable() {
        let ds = sbm(48, 4, 1);
        let t = gcn_problem(ds.clone());
        let mut rng = seeded_rng(3);
        let mut noise = matched(&ds, 8);
        noise.set_data(gaussian(&mut rng, 8, 4, 1.0), gaussian(&mut rng, 8, 2, 1.0));
        let traj = random_spanning_trajectory(&mut rng, 4, 2);
        let report = check_achievability(&t, &noise, &[1.0], &traj, 1e-9).unwrap();
        assert!(!report.achieved);
        assert!(report.residual > 1e-3);
    }

    #[test]
    fn repeated_point_is_degenerate() {
        let ds = sbm(32, 3, 4);
        let t = gcn_problem(ds.clone());
        let w = gaussian(&mut seeded_rng(5), 3, 2, 1.0);
        let report = check_achievability(&t, &t, &[1.0], &[w.clone(), w.clone(), w], 1e-9).unwrap();
        assert_eq!(report.span_rank, 1);
        assert_eq!(report.residual, 0.0);
        assert!(!report.achieved);
        assert!(check_achievability(&t, &t, &[1.0], &[], 1e-9).is_err());
    }

    #[test]
    fn sdc_validity_examples() {
        let ds = sbm(48, 4, 6);
        let t = gcn_problem(ds.clone());
        assert!(verify_sdc_validity(&t, &matched(&ds, 8), &[1.0]).unwrap().rel_error < 1e-8);
        assert_eq!(verify_sdc_validity(&t, &t, &[1.0]).unwrap().rel_error, 0.0);
        let mut neg = t.clone();
        neg.set_data(ds.features.clone(), -&ds.targets);
        assert_relative_eq!(verify_sdc_validity(&t, &neg, &[1.0]).unwrap().rel_error, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn cnn_transfer_within_kernel_width() {
        let t = gen_cyclic_signal(64, 2, &[0.5, -0.25, 1.0, 0.25, -0.5], 0.1, 7).unwrap();
        let s = construct_1dcnn_condensed(&t, 2, 7).unwrap();
        assert!((&s.features - &t.features).norm() > 1e-2, "construction must not return T");
        let res = verify_1dcnn_generalization(&t, &s, &[0, 1, 2, 3], 8).unwrap();
        for r in &res[..3] {
            assert!(r.residual < 1e-8, "K' = {}: {}", r.k_prime, r.residual);
        }
        assert!(res[3].residual > 1e-3, "contrast residual {}", res[3].residual);
    }

    #[test]
    fn cnn_transfer_trivial_and_contrast() {
        let t = gen_cyclic_signal(64, 2, &[0.3, 1.0, 0.3], 0.1, 9).unwrap();
        let same = verify_1dcnn_generalization(&t, &t, &[1], 1).unwrap();
        assert_eq!(same[0].residual, 0.0);
        let s = construct_1dcnn_condensed(&t, 1, 9).unwrap();
        let res = verify_1dcnn_generalization(&t, &s, &[1, 2], 2).unwrap();
        assert!(res[0].residual < 1e-8);
        assert!(res[1].residual > 1e-3, "contrast residual {}", res[1].residual);
        assert!(construct_1dcnn_condensed(&t, 16, 0).is_err());
    }

    #[test]
    fn shift_design_blocks() {
        let x = Mat::from_fn(5, 2, |i, j| (i * 2 + j) as f64);
        let z = shift_design(&x, 1).unwrap();
        assert_eq!(z.shape(), (5, 6));
        assert_eq!(z.view((0, 2), (5, 2)), x);
        // P^{-1} X pulls row 1 into row 0.
        assert_eq!(z[(0, 0)], x[(1, 0)]);
        assert_eq!(z[(1, 4)], x[(0, 0)]);
    }

    #[test]
    fn overfit_adjacency_examples() {
        let ds = sbm(40, 3, 10);
        let conv = gcn_norm(&ds.adjacency);
        let mut rng = seeded_rng(11);
        for c in [3, 6] {
            let x_s = gaussian(&mut rng, c, 3, 1.0);
            let (c_conv, _, report) = construct_overfit_adjacency(&x_s, &ds, &conv).unwrap();
            assert_eq!(c_conv.shape(), (c, c));
            let tol = if c == 3 { 1e-10 } else { 1e-8 };
            assert!(report.gram_residual < tol && report.cross_residual < tol, "{report:?}");
        }
        let mut dup = gaussian(&mut rng, 6, 3, 1.0);
        let first = dup.column(0).into_owned();
        dup.set_column(1, &first);
        assert!(matches!(
            construct_overfit_adjacency(&dup, &ds, &conv),
            Err(HcdcError::RankDeficient(_))
        ));
    }

    #[test]
    fn q_bound_identity_and_scaling() {
        let ds = sbm(48, 4, 12);
        let conv = gcn_norm(&ds.adjacency);
        let same = q_matrix_bound(&ds, &conv, &conv).unwrap();
        assert!(same.bound < 1e-10 && same.actual < 1e-10, "{same:?}");
        let twice = q_matrix_bound(&ds, &conv, &(&conv * 2.0)).unwrap();
        assert_relative_eq!(twice.bound, 0.75, epsilon = 1e-10);
        assert_relative_eq!(twice.proof_expression, 0.75, epsilon = 1e-10);
        // The transferred optimum keeps W while the alternative halves it.
        assert_relative_eq!(twice.actual, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn q_bound_gin_to_gcn_is_large() {
        let ds = sbm(48, 4, 13);
        let gin = &ds.adjacency + Mat::identity(48, 48);
        let r = q_matrix_bound(&ds, &gin, &gcn_norm(&ds.adjacency)).unwrap();
        let mean_degree = ds.adjacency.sum() / 48.0;
        assert!(r.sigma_max > mean_degree + 1.0, "{} vs {}", r.sigma_max, mean_degree);
    }

    #[test]
    fn probe_finds_conflicts() {
        assert!(necessity_probe(&[1.0, 0.0], &[2.0, 0.0]).is_none());
        let d = necessity_probe(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(vec_dot(&[1.0, 0.0], &d) * vec_dot(&[0.0, 1.0], &d) < 0.0);
        let d = necessity_probe(&[0.7], &[-0.2]).unwrap();
        assert!(0.7 * d[0] * -0.2 * d[0] < 0.0);
        assert!(necessity_probe(&[0.0, 0.0], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn equivalence_with_self_is_sufficient() {
        let ds = sbm(48, 4, 14);
        let family = FilterFamily::parse(&["identity", "gcn", "lap:1"]).unwrap();
        let t = ConvProblem::new(ds, &family).unwrap();
        let path = segment_path(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 20);
        let report = verify_equivalence(&t, &t, &HyperMode::Filter, &path, &EquivalenceConfig::default()).unwrap();
        assert!(report.all_aligned);
        assert_eq!(report.sufficiency, Some(true));
        assert!(report.probes.is_empty());
        assert_eq!(report.delta_t, report.delta_s);
    }

    #[test]
    fn equivalence_rejects_paths_outside_box() {
        let ds = sbm(32, 3, 15);
        let family = FilterFamily::parse(&["identity", "gcn"]).unwrap();
        let t = ConvProblem::new(ds, &family).unwrap();
        let cfg = EquivalenceConfig {
            bounds: Some(vec![(0.0, 1.0), (0.0, 1.0)]),
            ..EquivalenceConfig::default()
        };
        let path = segment_path(&[0.0, 1.0], &[1.5, 0.0], 5);
        assert!(verify_equivalence(&t, &t, &HyperMode::Filter, &path, &cfg).is_err());
    }

    #[test]
    fn segment_path_endpoints() {
        let p = segment_path(&[0.0, 1.0], &[1.0, 0.0], 5);
        assert_eq!(p.len(), 5);
        assert_eq!(p[0], vec![0.0, 1.0]);
        assert_eq!(p[4], vec![1.0, 0.0]);
        assert_eq!(p[2], vec![0.5, 0.5]);
    }
}
