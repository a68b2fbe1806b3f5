//! Second-order quantities for implicit differentiation: Hessian-vector
//! products, mixed partials, validation gradients, and a finite-difference
//! harness. All are closed forms for the quadratic loss.

use serde::{Deserialize, Serialize};

use crate::error::{HcdcError, Result};
use crate::linalg::{frob_dot, select_rows, Mat};
use crate::model::{fold_partition, ConvProblem, LossSpec, RowProblem};

/// What the hyperparameter vector parameterizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HyperMode {
    /// `lambda` interpolates the filter family.
    Filter,
    /// `lambda` holds the validation fold weights; the filter is fixed.
    FoldWeights { conv: Vec<f64> },
}

impl HyperMode {
    pub fn conv_weights<'a>(&'a self, hyper: &'a [f64]) -> &'a [f64] {
        match self {
            HyperMode::Filter => hyper,
            HyperMode::FoldWeights { conv } => conv,
        }
    }

    pub fn train_spec(&self, ridge: f64) -> LossSpec {
        LossSpec::train(ridge)
    }

    pub fn val_spec(&self, hyper: &[f64]) -> LossSpec {
        match self {
            HyperMode::Filter => LossSpec::val(),
            HyperMode::FoldWeights { .. } => LossSpec::folds(hyper.to_vec()),
        }
    }
}

/// Immutable snapshot at `(lambda, theta)` with cached designs.
#[derive(Clone, Debug)]
pub struct SecondOrderContext<'a> {
    pub problem: &'a ConvProblem,
    pub mode: HyperMode,
    pub hyper: Vec<f64>,
    pub theta: Mat,
    pub train: RowProblem,
    pub val: RowProblem,
    /// Train rows of each `Z_i`.
    pub train_members: Vec<Mat>,
    /// Val rows of each `Z_i`.
    pub val_members: Vec<Mat>,
}

impl<'a> SecondOrderContext<'a> {
    pub fn new(problem: &'a ConvProblem, mode: HyperMode, hyper: &[f64], theta: Mat, ridge: f64) -> Result<Self> {
        let conv = mode.conv_weights(hyper).to_vec();
        problem.check_lambda(&conv)?;
        problem.check_w(&theta)?;
        if hyper.iter().any(|h| !h.is_finite()) {
            return Err(HcdcError::NonFinite("hyperparameters".into()));
        }
        let train = problem.rows(&conv, &mode.train_spec(ridge))?;
        let val = problem.rows(&conv, &mode.val_spec(hyper))?;
        let train_members = problem
            .zs
            .iter()
            .map(|z| select_rows(z, &train.weights.rows))
            .collect();
        let val_members = problem
            .zs
            .iter()
            .map(|z| select_rows(z, &val.weights.rows))
            .collect();
        Ok(SecondOrderContext {
            problem,
            mode,
            hyper: hyper.to_vec(),
            theta,
            train,
            val,
            train_members,
            val_members,
        })
    }

    pub fn hyper_dim(&self) -> usize {
        self.hyper.len()
    }

    fn check_param(&self, v: &Mat) -> Result<()> {
        if v.shape() != self.theta.shape() {
            return Err(HcdcError::shape(
                "parameter-shaped argument",
                format!("{}x{}", self.theta.nrows(), self.theta.ncols()),
                format!("{}x{}", v.nrows(), v.ncols()),
            ));
        }
        Ok(())
    }

    /// Training-loss Hessian applied to `v`.
    pub fn hvp(&self, v: &Mat) -> Result<Mat> {
        self.check_param(v)?;
        Ok(self.train.hvp(v))
    }

    /// `d/dtheta` of the training loss differentiated along each `lambda_i`,
    /// contracted with `v`.
    pub fn mixed_jvp(&self, v: &Mat) -> Result<Vec<f64>> {
        self.check_param(v)?;
        match self.mode {
            HyperMode::FoldWeights { .. } => Ok(vec![0.0; self.hyper_dim()]),
            HyperMode::Filter => {
                let e = self.train.weights.scale_rows(&self.train.residual(&self.theta));
                let zv = self.train.weights.scale_rows(&(&self.train.z * v));
                Ok(self
                    .train_members
                    .iter()
                    .map(|zi| {
                        2.0 * (frob_dot(&(zi * v), &e) + frob_dot(&zv, &(zi * &self.theta)))
                    })
                    .collect())
            }
        }
    }

    /// The matrices `M_i` with `mixed_jvp(v)_i = <M_i, v>`.
    pub fn mixed_matrices(&self) -> Vec<Mat> {
        match self.mode {
            HyperMode::FoldWeights { .. } => {
                vec![Mat::zeros(self.theta.nrows(), self.theta.ncols()); self.hyper_dim()]
            }
            HyperMode::Filter => {
                let e = self.train.weights.scale_rows(&self.train.residual(&self.theta));
                let z_t = self.train.z.transpose();
                self.train_members
                    .iter()
                    .map(|zi| {
                        let zi_w = self.train.weights.scale_rows(&(zi * &self.theta));
                        (zi.transpose() * &e + &z_t * zi_w) * 2.0
                    })
                    .collect()
            }
        }
    }

    pub fn val_loss(&self) -> f64 {
        self.val.loss(&self.theta)
    }

    pub fn grad_val_theta(&self) -> Mat {
        self.val.grad(&self.theta)
    }

    /// Partial derivative of the validation loss in `lambda` at fixed `theta`.
    pub fn grad_val_lambda_direct(&self) -> Vec<f64> {
        match &self.mode {
            HyperMode::Filter => {
                let e = self.val.weights.scale_rows(&self.val.residual(&self.theta));
                self.val_members
                    .iter()
                    .map(|zi| 2.0 * frob_dot(&(zi * &self.theta), &e))
                    .collect()
            }
            HyperMode::FoldWeights { .. } => {
                let means = self.fold_means();
                fold_direct(&self.hyper, &means)
            }
        }
    }

    /// Per-fold mean validation losses at `theta` (fold-weight mode).
    pub fn fold_means(&self) -> Vec<f64> {
        fold_means(self.problem, &self.mode, self.hyper.len(), &self.theta).unwrap_or_default()
    }
}

/// Mean squared residual of each validation fold.
pub fn fold_means(problem: &ConvProblem, mode: &HyperMode, folds: usize, theta: &Mat) -> Result<Vec<f64>> {
    let conv = match mode {
        HyperMode::FoldWeights { conv } => conv.clone(),
        HyperMode::Filter => {
            return Err(HcdcError::InvalidArgument(
                "fold means require fold-weight mode".into(),
            ))
        }
    };
    let z = problem.z(&conv)?;
    let pred = z * theta;
    fold_partition(&problem.ds.split_val, folds)?
        .iter()
        .map(|fold| {
            let mut idx = fold.clone();
            idx.sort_unstable();
            let mut total = 0.0;
            for &i in &idx {
                total += (pred.row(i) - problem.ds.targets.row(i)).norm_squared();
            }
            Ok(total / idx.len() as f64)
        })
        .collect()
}

/// Gradient of `sum_j phi_j m_j / sum_j phi_j` in the unnormalized weights.
pub fn fold_direct(phi: &[f64], means: &[f64]) -> Vec<f64> {
    let total: f64 = phi.iter().sum();
    let mean: f64 = phi.iter().zip(means).map(|(p, m)| p * m).sum::<f64>() / total;
    means.iter().map(|m| (m - mean) / total).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst: usize,
}

/// Central differences of `f` at `point`, compared per coordinate against
/// `analytic` with denominator `max(1, |analytic_i|)`.
pub fn fd_check<F>(f: F, point: &[f64], h: f64, analytic: &[f64]) -> Result<FdReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(HcdcError::InvalidArgument("FD step must be positive".into()));
    }
    if analytic.len() != point.len() {
        return Err(HcdcError::shape(
            "fd_check",
            format!("{} analytic entries", point.len()),
            analytic.len(),
        ));
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut max_rel_error = 0.0;
    let mut worst = 0;
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let up = f(&x);
        x[i] = point[i] - h;
        let down = f(&x);
        x[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(HcdcError::NonFinite(format!("FD evaluation at coordinate {i}")));
        }
        let g = (up - down) / (2.0 * h);
        let rel = (g - analytic[i]).abs() / analytic[i].abs().max(1.0);
        if rel > max_rel_error || i == 0 {
            max_rel_error = rel;
            worst = i;
        }
        numeric.push(g);
    }
    Ok(FdReport {
        numeric,
        max_rel_error,
        worst,
    })
}
