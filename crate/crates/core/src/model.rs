//! Linear convolution regression `f(A, X) = C(A; lambda) X W` with mean squared
//! loss per split, closed-form and gradient-descent trainers.

use serde::{Deserialize, Serialize};

use crate::data::{GraphDataset, Split};
use crate::error::{HcdcError, Result};
use crate::filters::{combine, FilterFamily};
use crate::linalg::{all_finite, power_iteration_steps, select_rows, solve_spd, Mat};

pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub split: Split,
    #[serde(default)]
    pub fold_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub ridge: f64,
}

impl LossSpec {
    pub fn train(ridge: f64) -> Self {
        LossSpec {
            split: Split::Train,
            fold_weights: None,
            ridge,
        }
    }

    pub fn val() -> Self {
        LossSpec {
            split: Split::Val,
            fold_weights: None,
            ridge: 0.0,
        }
    }

    pub fn folds(weights: Vec<f64>) -> Self {
        LossSpec {
            split: Split::Val,
            fold_weights: Some(weights),
            ridge: 0.0,
        }
    }
}

/// Contiguous partition of `split` into `m` folds; the last fold absorbs the
/// remainder.
pub fn fold_partition(split: &[usize], m: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 || split.len() < m {
        return Err(HcdcError::InvalidArgument(format!(
            "cannot partition {} indices into {m} nonempty folds",
            split.len()
        )));
    }
    let size = split.len() / m;
    Ok((0..m)
        .map(|j| {
            let end = if j + 1 == m { split.len() } else { (j + 1) * size };
            split[j * size..end].to_vec()
        })
        .collect())
}

/// Per-row loss weights `omega_r`, sorted by row index so that every
/// reduction runs in index-ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct RowWeights {
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RowWeights {
    pub fn new(ds: &GraphDataset, spec: &LossSpec) -> Result<Self> {
        let split = ds.split(spec.split);
        if split.is_empty() {
            return Err(HcdcError::EmptySplit(spec.split.name()));
        }
        if !(spec.ridge >= 0.0) {
            return Err(HcdcError::InvalidArgument("ridge must be nonnegative".into()));
        }
        let mut pairs: Vec<(usize, f64)> = match &spec.fold_weights {
            None => {
                let w = 1.0 / split.len() as f64;
                split.iter().map(|&i| (i, w)).collect()
            }
            Some(phi) => {
                if phi.iter().any(|v| !(*v >= 0.0)) {
                    return Err(HcdcError::InvalidArgument(
                        "fold weights must be nonnegative".into(),
                    ));
                }
                let total: f64 = phi.iter().sum();
                if !(total > 0.0) {
                    return Err(HcdcError::InvalidArgument(
                        "fold weights must have a positive sum".into(),
                    ));
                }
                let folds = fold_partition(split, phi.len())?;
                folds
                    .iter()
                    .zip(phi)
                    .flat_map(|(fold, p)| {
                        let w = p / total / fold.len() as f64;
                        fold.iter().map(move |&i| (i, w))
                    })
                    .collect()
            }
        };
        pairs.sort_by_key(|(i, _)| *i);
        Ok(RowWeights {
            rows: pairs.iter().map(|(i, _)| *i).collect(),
            weights: pairs.iter().map(|(_, w)| *w).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `diag(omega) M` for a matrix whose rows follow `self.rows`.
    pub fn scale_rows(&self, m: &Mat) -> Mat {
        let mut out = m.clone();
        for (r, w) in self.weights.iter().enumerate() {
            out.row_mut(r).scale_mut(*w);
        }
        out
    }
}

/// Exactly `C X W`.
pub fn forward(c: &Mat, x: &Mat, w: &Mat) -> Result<Mat> {
    if c.ncols() != x.nrows() {
        return Err(HcdcError::shape(
            "forward",
            format!("C with {} columns", x.nrows()),
            format!("{}x{}", c.nrows(), c.ncols()),
        ));
    }
    if x.ncols() != w.nrows() {
        return Err(HcdcError::shape(
            "forward",
            format!("W with {} rows", x.ncols()),
            format!("{}x{}", w.nrows(), w.ncols()),
        ));
    }
    Ok(c * (x * w))
}

/// Loss pieces evaluated on the weighted rows of a precomputed design `Z = C X`.
#[derive(Clone, Debug)]
pub struct RowProblem {
    pub weights: RowWeights,
    /// Selected rows of `Z`.
    pub z: Mat,
    /// Selected rows of the targets.
    pub y: Mat,
    pub ridge: f64,
}

impl RowProblem {
    pub fn new(z_full: &Mat, y_full: &Mat, weights: RowWeights, ridge: f64) -> Self {
        RowProblem {
            z: select_rows(z_full, &weights.rows),
            y: select_rows(y_full, &weights.rows),
            weights,
            ridge,
        }
    }

    pub fn residual(&self, w: &Mat) -> Mat {
        &self.z * w - &self.y
    }

    pub fn loss(&self, w: &Mat) -> f64 {
        let e = self.residual(w);
        let mut total = 0.0;
        for (r, om) in self.weights.weights.iter().enumerate() {
            total += om * e.row(r).norm_squared();
        }
        total + self.ridge * w.norm_squared()
    }

    /// `2 Z^T Omega (Z W - Y) + 2 ridge W`.
    pub fn grad(&self, w: &Mat) -> Mat {
        let e = self.weights.scale_rows(&self.residual(w));
        (self.z.transpose() * e) * 2.0 + w * (2.0 * self.ridge)
    }

    /// `Z^T Omega Z + ridge I`, half the Hessian.
    pub fn half_hessian(&self) -> Mat {
        let d = self.z.ncols();
        self.z.transpose() * self.weights.scale_rows(&self.z) + Mat::identity(d, d) * self.ridge
    }

    /// `H v = 2 Z^T Omega Z v + 2 ridge v`.
    pub fn hvp(&self, v: &Mat) -> Mat {
        let zv = self.weights.scale_rows(&(&self.z * v));
        (self.z.transpose() * zv) * 2.0 + v * (2.0 * self.ridge)
    }

    pub fn solve(&self) -> Result<Mat> {
        let rhs = self.z.transpose() * self.weights.scale_rows(&self.y);
        solve_spd(&self.half_hessian(), &rhs)
    }
}

/// A dataset paired with its member convolutions and cached `Z_i = C_i X`.
#[derive(Clone, Debug)]
pub struct ConvProblem {
    pub ds: GraphDataset,
    pub convs: Vec<Mat>,
    pub zs: Vec<Mat>,
}

impl ConvProblem {
    pub fn new(ds: GraphDataset, family: &FilterFamily) -> Result<Self> {
        let convs = family.build(&ds.adjacency)?;
        Self::from_convs(ds, convs)
    }

    pub fn from_convs(ds: GraphDataset, convs: Vec<Mat>) -> Result<Self> {
        if convs.is_empty() {
            return Err(HcdcError::InvalidArgument("no convolution members".into()));
        }
        for c in &convs {
            if c.shape() != (ds.n(), ds.n()) {
                return Err(HcdcError::shape(
                    "convolution member",
                    format!("{0}x{0}", ds.n()),
                    format!("{}x{}", c.nrows(), c.ncols()),
                ));
            }
        }
        let zs = convs.iter().map(|c| c * &ds.features).collect();
        Ok(ConvProblem { ds, convs, zs })
    }

    pub fn p(&self) -> usize {
        self.convs.len()
    }

    /// Replace features and targets, keeping the convolutions.
    pub fn set_data(&mut self, features: Mat, targets: Mat) {
        self.zs = self.convs.iter().map(|c| c * &features).collect();
        self.ds.features = features;
        self.ds.targets = targets;
    }

    pub fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.p() {
            return Err(HcdcError::shape(
                "lambda",
                format!("{} weights", self.p()),
                format!("{} weights", lambda.len()),
            ));
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(HcdcError::NonFinite("lambda".into()));
        }
        Ok(())
    }

    pub fn check_w(&self, w: &Mat) -> Result<()> {
        if w.shape() != (self.ds.d(), self.ds.outputs()) {
            return Err(HcdcError::shape(
                "parameters W",
                format!("{}x{}", self.ds.d(), self.ds.outputs()),
                format!("{}x{}", w.nrows(), w.ncols()),
            ));
        }
        Ok(())
    }

    pub fn conv(&self, lambda: &[f64]) -> Result<Mat> {
        self.check_lambda(lambda)?;
        combine(&self.convs, lambda)
    }

    /// `Z(lambda) = sum_i lambda_i Z_i`.
    pub fn z(&self, lambda: &[f64]) -> Result<Mat> {
        self.check_lambda(lambda)?;
        combine(&self.zs, lambda)
    }

    pub fn rows(&self, lambda: &[f64], spec: &LossSpec) -> Result<RowProblem> {
        let weights = RowWeights::new(&self.ds, spec)?;
        Ok(RowProblem::new(&self.z(lambda)?, &self.ds.targets, weights, spec.ridge))
    }

    pub fn predict(&self, lambda: &[f64], w: &Mat) -> Result<Mat> {
        self.check_w(w)?;
        Ok(self.z(lambda)? * w)
    }

    pub fn loss(&self, lambda: &[f64], w: &Mat, spec: &LossSpec) -> Result<f64> {
        self.check_w(w)?;
        Ok(self.rows(lambda, spec)?.loss(w))
    }

    pub fn grad_w(&self, lambda: &[f64], w: &Mat, spec: &LossSpec) -> Result<Mat> {
        self.check_w(w)?;
        Ok(self.rows(lambda, spec)?.grad(w))
    }

    /// Minimizer of the (ridge-regularized) mean loss on `spec.split`.
    pub fn train_closed_form(&self, lambda: &[f64], spec: &LossSpec) -> Result<Mat> {
        self.rows(lambda, spec)?.solve()
    }

    /// Full-batch gradient descent; returns every iterate `theta_0 .. theta_T`.
    pub fn train_gd(&self, lambda: &[f64], theta0: &Mat, steps: usize, lr: f64, spec: &LossSpec) -> Result<Vec<Mat>> {
        if !(lr > 0.0) {
            return Err(HcdcError::InvalidArgument("learning rate must be positive".into()));
        }
        self.check_w(theta0)?;
        let rows = self.rows(lambda, spec)?;
        let smooth = 2.0
            * power_iteration_steps(|v| rows.half_hessian() * v, theta0.nrows(), 1, 100);
        if lr >= 2.0 / smooth {
            log::warn!("learning rate {lr} exceeds 2/L = {:.4e}; descent may not be monotone", 2.0 / smooth);
        }
        let mut traj = Vec::with_capacity(steps + 1);
        traj.push(theta0.clone());
        let mut w = theta0.clone();
        let mut prev = rows.loss(&w);
        for step in 1..=steps {
            w -= rows.grad(&w) * lr;
            let cur = rows.loss(&w);
            if !cur.is_finite() || !all_finite(&w) {
                return Err(HcdcError::Divergence {
                    step,
                    what: format!("loss became {cur}"),
                });
            }
            if cur > prev * (1.0 + 1e-12) + 1e-300 && lr < 2.0 / smooth {
                log::warn!("loss increased at step {step} ({prev:.6e} -> {cur:.6e})");
            }
            prev = cur;
            traj.push(w.clone());
        }
        Ok(traj)
    }
}

/// Class prediction as the row argmax.
pub fn argmax_rows(pred: &Mat) -> Vec<usize> {
    (0..pred.nrows())
        .map(|r| {
            let row = pred.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetKind;
    use crate::linalg::{gaussian, seeded_rng};
    use approx::assert_abs_diff_eq;

    pub(crate) fn dataset(x: Mat, y: Mat, train: Vec<usize>, val: Vec<usize>) -> GraphDataset {
        let n = x.nrows();
        GraphDataset {
            adjacency: Mat::zeros(n, n),
            features: x,
            targets: y,
            split_train: train,
            split_val: val,
            split_test: vec![],
            kind: DatasetKind::Iid,
        }
    }

    fn random_problem(seed: u64, n: usize, d: usize, k: usize) -> ConvProblem {
        let mut rng = seeded_rng(seed);
        let x = gaussian(&mut rng, n, d, 1.0);
        let y = gaussian(&mut rng, n, k, 1.0);
        let c1 = gaussian(&mut rng, n, n, 0.3);
        let c2 = gaussian(&mut rng, n, n, 0.3);
        let split = n * 2 / 3;
        let ds = dataset(x, y, (0..split).collect(), (split..n).collect());
        ConvProblem::from_convs(ds, vec![Mat::identity(n, n), c1, c2]).unwrap()
    }

    #[test]
    fn forward_examples() {
        let w = Mat::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        let i = Mat::identity(3, 3);
        assert_eq!(forward(&i, &i, &w).unwrap(), w);
        assert_eq!(forward(&Mat::zeros(3, 3), &i, &w).unwrap(), Mat::zeros(3, 1));
        let mut rng = seeded_rng(2);
        let c = gaussian(&mut rng, 8, 8, 1.0);
        let x = gaussian(&mut rng, 8, 8, 1.0);
        let w = gaussian(&mut rng, 8, 8, 1.0);
        assert_abs_diff_eq!(forward(&c, &x, &w).unwrap(), (&c * &x) * &w, epsilon = 1e-12);
        assert!(forward(&c, &x, &Mat::zeros(3, 1)).is_err());
    }

    #[test]
    fn closed_form_is_stationary() {
        let prob = random_problem(0, 12, 3, 2);
        let lam = [1.0, 0.4, -0.2];
        let spec = LossSpec::train(0.0);
        let w = prob.train_closed_form(&lam, &spec).unwrap();
        let g = prob.grad_w(&lam, &w, &spec).unwrap();
        assert!(g.amax() < 1e-9);
        let rows = prob.rows(&lam, &spec).unwrap();
        let sse = rows.residual(&w).norm_squared();
        assert_abs_diff_eq!(prob.loss(&lam, &w, &spec).unwrap(), sse / 8.0, epsilon = 1e-14);
    }

    #[test]
    fn exact_targets_have_zero_loss() {
        let mut prob = random_problem(1, 10, 2, 1);
        let lam = [0.5, 0.5, 0.0];
        let w = Mat::from_row_slice(2, 1, &[0.3, -1.0]);
        let y = prob.predict(&lam, &w).unwrap();
        let x = prob.ds.features.clone();
        prob.set_data(x, y);
        assert_eq!(prob.loss(&lam, &w, &LossSpec::train(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn one_hot_fold_weight_is_fold_loss() {
        let prob = random_problem(2, 16, 2, 1);
        let lam = [1.0, 0.0, 0.3];
        let w = Mat::from_row_slice(2, 1, &[0.7, 0.1]);
        let folds = fold_partition(&prob.ds.split_val, 2).unwrap();
        let mut only = prob.ds.clone();
        only.split_val = folds[1].clone();
        let restricted = ConvProblem::from_convs(only, prob.convs.clone()).unwrap();
        let a = prob.loss(&lam, &w, &LossSpec::folds(vec![0.0, 1.0])).unwrap();
        let b = restricted.loss(&lam, &w, &LossSpec::val()).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
    }

    #[test]
    fn bowl_gradient() {
        let n = 4;
        let ds = dataset(Mat::identity(n, n), Mat::zeros(n, 1), (0..n).collect(), vec![0]);
        let prob = ConvProblem::from_convs(ds, vec![Mat::identity(n, n)]).unwrap();
        let w = Mat::from_row_slice(n, 1, &[1.0, -1.0, 2.0, 0.5]);
        let g = prob.grad_w(&[1.0], &w, &LossSpec::train(0.0)).unwrap();
        assert_abs_diff_eq!(g, &w * (2.0 / n as f64), epsilon = 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let ds = dataset(
            Mat::from_row_slice(2, 1, &[1.0, 2.0]),
            Mat::from_row_slice(2, 1, &[1.0, 2.0]),
            vec![0, 1],
            vec![0],
        );
        let prob = ConvProblem::from_convs(ds, vec![Mat::identity(2, 2)]).unwrap();
        let w = prob.train_closed_form(&[1.0], &LossSpec::train(0.0)).unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-15);

        let x = Mat::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let ds = dataset(x, Mat::from_element(3, 1, 1.0), vec![0, 1, 2], vec![0]);
        let prob = ConvProblem::from_convs(ds, vec![Mat::identity(3, 3)]).unwrap();
        let err = prob.train_closed_form(&[1.0], &LossSpec::train(0.0)).unwrap_err();
        assert!(matches!(err, HcdcError::Singular { .. }));
        assert!(err.to_string().contains("condition number"));
    }

    #[test]
    fn orthogonal_targets_leave_residual() {
        let x = Mat::from_row_slice(3, 1, &[1.0, 1.0, 0.0]);
        let y = Mat::from_row_slice(3, 1, &[1.0, -1.0, 2.0]);
        let ds = dataset(x.clone(), y.clone(), vec![0, 1, 2], vec![0]);
        let prob = ConvProblem::from_convs(ds, vec![Mat::identity(3, 3)]).unwrap();
        let w = prob.train_closed_form(&[1.0], &LossSpec::train(0.0)).unwrap();
        // Independent normal-equation solve via QR of the design.
        let qr = x.clone().qr();
        let oracle = qr.r().try_inverse().unwrap() * qr.q().transpose() * &y;
        assert_abs_diff_eq!(w, oracle, epsilon = 1e-14);
        assert!((&x * &w - &y).norm() > 1.0);
    }

    #[test]
    fn gd_trajectories() {
        let prob = random_problem(3, 12, 3, 1);
        let lam = [1.0, 0.0, 0.0];
        let spec = LossSpec::train(0.0);
        let theta0 = Mat::zeros(3, 1);
        assert_eq!(prob.train_gd(&lam, &theta0, 0, 0.1, &spec).unwrap(), vec![theta0.clone()]);

        let rows = prob.rows(&lam, &spec).unwrap();
        let (_, top) = crate::linalg::sym_eig_range(&(rows.half_hessian() * 2.0));
        let traj = prob.train_gd(&lam, &theta0, 500, 0.9 / top, &spec).unwrap();
        let exact = prob.train_closed_form(&lam, &spec).unwrap();
        assert!((traj.last().unwrap() - &exact).amax() < 1e-6);
        for pair in traj.windows(2) {
            assert!(rows.loss(&pair[1]) <= rows.loss(&pair[0]) + 1e-15);
        }

        let err = prob.train_gd(&lam, &theta0, 2000, 1e6, &spec).unwrap_err();
        assert!(matches!(err, HcdcError::Divergence { .. }));
    }

    #[test]
    fn closed_form_ignores_train_order() {
        let prob = random_problem(4, 20, 4, 2);
        let lam = [0.2, 1.0, 0.5];
        let spec = LossSpec::train(1e-3);
        let w = prob.train_closed_form(&lam, &spec).unwrap();
        let mut shuffled = prob.clone();
        shuffled.ds.split_train.reverse();
        shuffled.ds.split_train.rotate_left(3);
        let w2 = shuffled.train_closed_form(&lam, &spec).unwrap();
        assert!(w.iter().zip(w2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn empty_split_is_rejected() {
        let mut prob = random_problem(5, 6, 2, 1);
        prob.ds.split_val.clear();
        assert!(matches!(
            prob.loss(&[1.0, 0.0, 0.0], &Mat::zeros(2, 1), &LossSpec::val()),
            Err(HcdcError::EmptySplit("val"))
        ));
    }
}
