//! Implicit-function hypergradients with Neumann or dense inverse-Hessian
//! solves, continuous HPO descent, and the exhaustive HPO oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derivatives::{HyperMode, SecondOrderContext};
use crate::error::{HcdcError, Result};
use crate::hcdc::HyperSearchSpace;
use crate::linalg::{all_finite, power_iteration_steps, solve_spd, vec_norm, Mat};
use crate::model::ConvProblem;

pub const NEUMANN_ORDER: usize = 20;
pub const NEUMANN_SAFETY: f64 = 0.9;
pub const NEUMANN_POWER_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solver {
    /// `scale = None` picks `0.9 / lambda_max` from a short power iteration.
    Neumann { order: usize, scale: Option<f64> },
    #[default]
    Direct,
}

impl Solver {
    pub fn neumann_default() -> Self {
        Solver::Neumann {
            order: NEUMANN_ORDER,
            scale: None,
        }
    }
}

/// The solver as actually run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverUsed {
    Neumann { order: usize, scale: f64 },
    Direct { ridge: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypergradientReport {
    pub total: Vec<f64>,
    pub direct: Vec<f64>,
    pub indirect: Vec<f64>,
    pub solver: SolverUsed,
    /// `||H x - g||` of the inverse-Hessian solve.
    pub residual: f64,
    /// `L*(lambda)` at which the gradient was taken.
    pub loss: f64,
}

/// Estimate of the top Hessian eigenvalue by fixed-step power iteration.
pub fn lambda_max_estimate<F: Fn(&Mat) -> Mat>(hvp: F, rows: usize, cols: usize) -> f64 {
    power_iteration_steps(hvp, rows, cols, NEUMANN_POWER_STEPS)
}

/// `alpha * sum_{j=0}^{m} (I - alpha H)^j g` using two running buffers.
pub fn inverse_hvp_neumann<F: Fn(&Mat) -> Mat>(hvp: F, g: &Mat, alpha: f64, order: usize) -> Result<(Mat, f64)> {
    if !(alpha > 0.0) {
        return Err(HcdcError::InvalidArgument("Neumann scale must be positive".into()));
    }
    let alpha_lambda = alpha * lambda_max_estimate(&hvp, g.nrows(), g.ncols());
    if alpha_lambda >= 2.0 {
        log::warn!("Neumann series may diverge: alpha * lambda_max = {alpha_lambda:.4}");
    }
    let mut term = g.clone();
    let mut acc = g.clone();
    for _ in 0..order {
        term -= hvp(&term) * alpha;
        acc += &term;
        if !all_finite(&acc) {
            return Err(HcdcError::NeumannDivergence { alpha_lambda });
        }
    }
    let x = acc * alpha;
    let residual = (hvp(&x) - g).norm();
    if !residual.is_finite() {
        return Err(HcdcError::NeumannDivergence { alpha_lambda });
    }
    Ok((x, residual))
}

/// Exact dense solve of the training-Hessian system.
pub fn inverse_hvp_direct(ctx: &SecondOrderContext<'_>, g: &Mat) -> Result<Mat> {
    solve_spd(&(ctx.train.half_hessian() * 2.0), g)
}

/// `theta*(lambda)` and the optimized validation loss `L*(lambda)`.
pub fn optimized_loss(problem: &ConvProblem, mode: &HyperMode, hyper: &[f64], ridge: f64) -> Result<(f64, Mat)> {
    let conv = mode.conv_weights(hyper);
    let theta = problem.train_closed_form(conv, &mode.train_spec(ridge))?;
    let loss = problem.loss(conv, &theta, &mode.val_spec(hyper))?;
    Ok((loss, theta))
}

/// `grad_lambda L*(lambda) = direct - mixed . H^{-1} grad_theta L^val`.
pub fn hypergradient(problem: &ConvProblem, mode: &HyperMode, hyper: &[f64], ridge: f64, solver: Solver) -> Result<HypergradientReport> {
    let (loss, theta) = optimized_loss(problem, mode, hyper, ridge)?;
    let ctx = SecondOrderContext::new(problem, mode.clone(), hyper, theta, ridge)?;
    let g = ctx.grad_val_theta();
    let hvp = |v: &Mat| ctx.train.hvp(v);
    let (x, residual, used) = match solver {
        Solver::Direct => {
            let x = inverse_hvp_direct(&ctx, &g)?;
            let residual = (hvp(&x) - &g).norm();
            (x, residual, SolverUsed::Direct { ridge })
        }
        Solver::Neumann { order, scale } => {
            let alpha = match scale {
                Some(a) => a,
                None => NEUMANN_SAFETY / lambda_max_estimate(hvp, g.nrows(), g.ncols()),
            };
            let (x, residual) = inverse_hvp_neumann(hvp, &g, alpha, order)?;
            (x, residual, SolverUsed::Neumann { order, scale: alpha })
        }
    };
    let direct = ctx.grad_val_lambda_direct();
    let indirect: Vec<f64> = ctx.mixed_jvp(&x)?.into_iter().map(|v| -v).collect();
    let total = direct.iter().zip(&indirect).map(|(a, b)| a + b).collect();
    Ok(HypergradientReport {
        total,
        direct,
        indirect,
        solver: used,
        residual,
        loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub lambda: Vec<f64>,
    pub loss: f64,
    pub hypergradient: Vec<f64>,
    pub hg_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpoTrajectory {
    pub origin: usize,
    pub eta: f64,
    pub points: Vec<TrajectoryPoint>,
    /// Step size used for each transition (halved whenever a step would
    /// increase the loss).
    pub step_sizes: Vec<f64>,
}

impl HpoTrajectory {
    pub fn endpoint(&self) -> &TrajectoryPoint {
        self.points.last().expect("trajectory has a start point")
    }
}

pub const MAX_HALVINGS: usize = 30;

fn point(problem: &ConvProblem, mode: &HyperMode, lambda: Vec<f64>, ridge: f64, solver: Solver) -> Result<TrajectoryPoint> {
    let report = hypergradient(problem, mode, &lambda, ridge, solver)?;
    Ok(TrajectoryPoint {
        hg_norm: vec_norm(&report.total),
        lambda,
        loss: report.loss,
        hypergradient: report.total,
    })
}

/// Projected descent `lambda <- clip(lambda - eta grad L*)`, halving `eta`
/// while a step would increase `L*`.
#[allow(clippy::too_many_arguments)]
pub fn hpo_descent(
    problem: &ConvProblem,
    mode: &HyperMode,
    lambda0: &[f64],
    space: &HyperSearchSpace,
    steps: usize,
    eta: f64,
    solver: Solver,
    ridge: f64,
    origin: usize,
) -> Result<HpoTrajectory> {
    if !(eta > 0.0) {
        return Err(HcdcError::InvalidArgument("eta_lambda must be positive".into()));
    }
    let bounds = space.bounds();
    if bounds.len() != lambda0.len() {
        return Err(HcdcError::shape("lambda0", bounds.len(), lambda0.len()));
    }
    if lambda0
        .iter()
        .zip(&bounds)
        .any(|(l, (lo, hi))| *l < *lo - 1e-12 || *l > *hi + 1e-12)
    {
        return Err(HcdcError::InvalidArgument("lambda0 lies outside the search box".into()));
    }
    let at = |lambda: Vec<f64>, step: usize| {
        point(problem, mode, lambda, ridge, solver).map_err(|e| match e {
            HcdcError::Singular { .. } | HcdcError::NeumannDivergence { .. } => HcdcError::Divergence {
                step,
                what: e.to_string(),
            },
            other => other,
        })
    };
    let mut points = vec![at(lambda0.to_vec(), 0)?];
    let mut step_sizes = Vec::with_capacity(steps);
    let mut eta_now = eta;
    for step in 1..=steps {
        let cur = points.last().unwrap().clone();
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let next: Vec<f64> = cur
                .lambda
                .iter()
                .zip(&cur.hypergradient)
                .zip(&bounds)
                .map(|((l, g), (lo, hi))| (l - eta_now * g).clamp(*lo, *hi))
                .collect();
            let cand = at(next, step)?;
            if cand.loss <= cur.loss {
                accepted = Some(cand);
                break;
            }
            eta_now *= 0.5;
        }
        // No descent step found: stay put (a stationary point of the box).
        let next = accepted.unwrap_or_else(|| cur.clone());
        step_sizes.push(eta_now);
        points.push(next);
    }
    Ok(HpoTrajectory {
        origin,
        eta,
        points,
        step_sizes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub index: usize,
    pub lambda: Vec<f64>,
    pub loss: Option<f64>,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Evaluate every member and sort by `L*` ascending; ties keep index order and
/// failed members go last.
pub fn hpo_exhaustive(problem: &ConvProblem, mode: &HyperMode, members: &[Vec<f64>], ridge: f64) -> Result<Vec<RankEntry>> {
    if members.is_empty() {
        return Err(HcdcError::InvalidArgument("empty search space".into()));
    }
    let results: Vec<Result<f64>> = members
        .par_iter()
        .map(|m| optimized_loss(problem, mode, m, ridge).map(|(l, _)| l))
        .collect();
    let mut entries: Vec<RankEntry> = members
        .iter()
        .zip(results)
        .enumerate()
        .map(|(index, (lambda, r))| {
            let (loss, error) = match r {
                Ok(l) if l.is_finite() => (Some(l), None),
                Ok(l) => (None, Some(format!("non-finite loss {l}"))),
                Err(e) => (None, Some(e.to_string())),
            };
            RankEntry {
                index,
                lambda: lambda.clone(),
                loss,
                rank: 0,
                error,
            }
        })
        .collect();
    entries.sort_by(|a, b| match (a.loss, b.loss) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (r, e) in entries.iter_mut().enumerate() {
        e.rank = r + 1;
    }
    Ok(entries)
}

/// One-hot vectors `e_1 .. e_p`.
pub fn one_hot_members(p: usize) -> Vec<Vec<f64>> {
    (0..p)
        .map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}
