//! Hypergradient-alignment condensation of the synthetic validation split.
//!
//! `S^train` stays fixed; `X'_val` (and optionally `Y'_val`) descend on the
//! mean cosine distance between hypergradients computed on `T` and on `S`
//! along HPO trajectories in the extended search space.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_balanced, GraphDataset, Learnable, Provenance, SyntheticDataset};
use crate::derivatives::{HyperMode, SecondOrderContext};
use crate::error::{HcdcError, Result};
use crate::filters::FilterFamily;
use crate::hypergrad::{hpo_descent, hypergradient, inverse_hvp_direct, inverse_hvp_neumann, lambda_max_estimate, optimized_loss, HpoTrajectory, Solver, NEUMANN_SAFETY};
use crate::linalg::{gaussian, seeded_rng, select_square, vec_dot, vec_norm, Mat};
use crate::model::{fold_partition, ConvProblem, DEFAULT_RIDGE};
use crate::sdc::{ADJ_FD_STEP, LOGIT_INIT};

/// Lower bound of fold weights in the search box; keeps `sum phi > 0`.
pub const FOLD_WEIGHT_FLOOR: f64 = 0.01;
/// Losses closer than this are treated as tied.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceMode {
    Discrete { members: Vec<Vec<f64>> },
    Continuous { bounds: Vec<(f64, f64)> },
    FoldWeights { folds: usize },
}

/// How the search space is extended by HPO trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extension {
    #[serde(default = "default_traj_steps")]
    pub steps: usize,
    #[serde(default = "default_traj_eta")]
    pub eta: f64,
    /// Number of sampled starts for continuous and fold-weight spaces.
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_traj_steps() -> usize {
    10
}
fn default_traj_eta() -> f64 {
    0.5
}
fn default_starts() -> usize {
    8
}

impl Default for Extension {
    fn default() -> Self {
        Extension {
            steps: default_traj_steps(),
            eta: default_traj_eta(),
            starts: default_starts(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSearchSpace {
    pub mode: SpaceMode,
    #[serde(default)]
    pub extension: Extension,
}

impl HyperSearchSpace {
    pub fn discrete(members: Vec<Vec<f64>>) -> Result<Self> {
        let s = HyperSearchSpace {
            mode: SpaceMode::Discrete { members },
            extension: Extension::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn continuous(bounds: Vec<(f64, f64)>) -> Result<Self> {
        let s = HyperSearchSpace {
            mode: SpaceMode::Continuous { bounds },
            extension: Extension::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn fold_weights(folds: usize) -> Result<Self> {
        let s = HyperSearchSpace {
            mode: SpaceMode::FoldWeights { folds },
            extension: Extension::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_extension(mut self, extension: Extension) -> Self {
        self.extension = extension;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            SpaceMode::Discrete { members } => {
                let Some(first) = members.first() else {
                    return Err(HcdcError::InvalidArgument("discrete space is empty".into()));
                };
                for (i, m) in members.iter().enumerate() {
                    if m.len() != first.len() {
                        return Err(HcdcError::InvalidArgument(
                            "discrete members differ in length".into(),
                        ));
                    }
                    if members[..i].contains(m) {
                        return Err(HcdcError::InvalidArgument(format!(
                            "discrete member {i} duplicates an earlier member"
                        )));
                    }
                }
            }
            SpaceMode::Continuous { bounds } => {
                if bounds.is_empty() || bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
                    return Err(HcdcError::InvalidArgument("search box is empty".into()));
                }
            }
            SpaceMode::FoldWeights { folds } => {
                if *folds < 2 {
                    return Err(HcdcError::InvalidArgument("need at least 2 folds".into()));
                }
            }
        }
        if !(self.extension.eta > 0.0) {
            return Err(HcdcError::InvalidArgument("trajectory eta must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bounds().len()
    }

    /// Per-coordinate box: the hull of discrete members, the configured box,
    /// or `[FOLD_WEIGHT_FLOOR, 1]` per fold.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match &self.mode {
            SpaceMode::Discrete { members } => (0..members[0].len())
                .map(|j| {
                    let lo = members.iter().map(|m| m[j]).fold(f64::INFINITY, f64::min);
                    let hi = members.iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi)
                })
                .collect(),
            SpaceMode::Continuous { bounds } => bounds.clone(),
            SpaceMode::FoldWeights { folds } => vec![(FOLD_WEIGHT_FLOOR, 1.0); *folds],
        }
    }

    /// Trajectory origins: the discrete members, or uniform samples of the box.
    pub fn starts(&self) -> Vec<Vec<f64>> {
        match &self.mode {
            SpaceMode::Discrete { members } => members.clone(),
            _ => {
                let mut rng = seeded_rng(self.extension.seed);
                let bounds = self.bounds();
                (0..self.extension.starts)
                    .map(|_| {
                        bounds
                            .iter()
                            .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                            .collect()
                    })
                    .collect()
            }
        }
    }

    /// The hyperparameter role matching this space.
    pub fn hyper_mode(&self, fold_conv: &[f64]) -> HyperMode {
        match self.mode {
            SpaceMode::FoldWeights { .. } => HyperMode::FoldWeights {
                conv: fold_conv.to_vec(),
            },
            _ => HyperMode::Filter,
        }
    }
}

/// `1 - cos(hg_T, hg_S)`; 0 when both vanish, 1 when exactly one does.
pub fn align_loss(hg_t: &[f64], hg_s: &[f64]) -> Result<f64> {
    Ok(align_loss_grad(hg_t, hg_s)?.0)
}

/// Alignment loss and its gradient in `hg_S`.
pub fn align_loss_grad(hg_t: &[f64], hg_s: &[f64]) -> Result<(f64, Vec<f64>)> {
    if hg_t.len() != hg_s.len() {
        return Err(HcdcError::shape("align_loss", hg_t.len(), hg_s.len()));
    }
    let nt = vec_norm(hg_t);
    let ns = vec_norm(hg_s);
    match (nt > 0.0, ns > 0.0) {
        (false, false) => Ok((0.0, vec![0.0; hg_s.len()])),
        (false, true) => Ok((1.0, vec![0.0; hg_s.len()])),
        // Subgradient pointing hg_S toward hg_T.
        (true, false) => Ok((1.0, hg_t.iter().map(|t| -t / nt).collect())),
        (true, true) => {
            let cos = vec_dot(hg_t, hg_s) / (nt * ns);
            let grad = hg_t
                .iter()
                .zip(hg_s)
                .map(|(t, s)| -(t / (nt * ns) - cos * s / (ns * ns)))
                .collect();
            Ok((1.0 - cos, grad))
        }
    }
}

fn scatter_rows(rows: &[usize], m: &Mat, n: usize) -> Mat {
    let mut out = Mat::zeros(n, m.ncols());
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(i).copy_from(&m.row(r));
    }
    out
}

/// Gradient of `<u, grad_lambda L*_S>` with respect to the features and
/// targets of every node of `problem` (rows outside the val split are zero
/// in the target gradient). Requires that training does not depend on the
/// val rows, i.e. block-diagonal convolutions.
pub fn hypergradient_data_grad(problem: &ConvProblem, mode: &HyperMode, hyper: &[f64], u: &[f64], ridge: f64, solver: Solver) -> Result<(Mat, Mat)> {
    let (_, theta) = optimized_loss(problem, mode, hyper, ridge)?;
    let ctx = SecondOrderContext::new(problem, mode.clone(), hyper, theta.clone(), ridge)?;
    if u.len() != ctx.hyper_dim() {
        return Err(HcdcError::shape("hypergradient cotangent", ctx.hyper_dim(), u.len()));
    }
    let n = problem.ds.n();
    let val = &ctx.val;
    let omega = |m: &Mat| val.weights.scale_rows(m);

    // r = -H^{-1} sum_i u_i M_i, so that <u, indirect> = <r, grad_theta L^val>.
    let mut combo = Mat::zeros(theta.nrows(), theta.ncols());
    for (m, ui) in ctx.mixed_matrices().iter().zip(u) {
        combo += m * *ui;
    }
    let r = if combo.iter().all(|v| *v == 0.0) {
        combo
    } else {
        let hvp = |v: &Mat| ctx.train.hvp(v);
        let x = match solver {
            Solver::Direct => inverse_hvp_direct(&ctx, &combo)?,
            Solver::Neumann { order, scale } => {
                let alpha = scale.unwrap_or_else(|| {
                    NEUMANN_SAFETY / lambda_max_estimate(hvp, combo.nrows(), combo.ncols())
                });
                inverse_hvp_neumann(hvp, &combo, alpha, order)?.0
            }
        };
        -x
    };

    let e = val.residual(&theta);
    let wt = theta.transpose();
    let zr = &val.z * &r;
    let mut dz = omega(&(&e * r.transpose() + &zr * &wt)) * 2.0;
    let mut dy = omega(&zr) * -2.0;
    let mut dzu = None;
    match mode {
        HyperMode::Filter => {
            let mut zu = Mat::zeros(val.z.nrows(), val.z.ncols());
            for (zi, ui) in ctx.val_members.iter().zip(u) {
                zu += zi * *ui;
            }
            let zuw = omega(&(&zu * &theta));
            dz += &zuw * &wt * 2.0;
            dy -= &zuw * 2.0;
            dzu = Some(omega(&(&e * &wt)) * 2.0);
        }
        HyperMode::FoldWeights { .. } => {
            let phi = &ctx.hyper;
            let total: f64 = phi.iter().sum();
            let usum: f64 = u.iter().sum();
            let folds = fold_partition(&problem.ds.split_val, phi.len())?;
            let mut de = Mat::zeros(e.nrows(), e.ncols());
            for (j, fold) in folds.iter().enumerate() {
                let a = (u[j] - phi[j] / total * usum) / total;
                for &node in fold {
                    let r = val.weights.rows.binary_search(&node).expect("fold node in val rows");
                    de.row_mut(r).copy_from(&(e.row(r) * (2.0 * a / fold.len() as f64)));
                }
            }
            dz += &de * &wt;
            dy -= &de;
        }
    }
    let rows = &val.weights.rows;
    let conv = problem.conv(mode.conv_weights(hyper))?;
    let mut dx = conv.transpose() * scatter_rows(rows, &dz, n);
    if let Some(dzu) = dzu {
        let mut cu = Mat::zeros(n, n);
        for (c, ui) in problem.convs.iter().zip(u) {
            cu += c * *ui;
        }
        dx += cu.transpose() * scatter_rows(rows, &dzu, n);
    }
    Ok((dx, scatter_rows(rows, &dy, n)))
}

/// Alignment loss at one hyperparameter point with its data gradient.
pub fn alignment_grad(problem: &ConvProblem, mode: &HyperMode, hyper: &[f64], hg_t: &[f64], ridge: f64, solver: Solver) -> Result<(f64, Mat, Mat)> {
    let hg_s = hypergradient(problem, mode, hyper, ridge, solver)?.total;
    let (loss, u) = align_loss_grad(hg_t, &hg_s)?;
    let (dx, dy) = hypergradient_data_grad(problem, mode, hyper, &u, ridge, solver)?;
    Ok((loss, dx, dy))
}

/// HPO descent trajectories on `problem` from every start of `space`.
pub fn build_extended_space(problem: &ConvProblem, mode: &HyperMode, space: &HyperSearchSpace, solver: Solver, ridge: f64) -> Result<Vec<HpoTrajectory>> {
    space.validate()?;
    let ext = &space.extension;
    space
        .starts()
        .par_iter()
        .enumerate()
        .map(|(i, start)| hpo_descent(problem, mode, start, space, ext.steps, ext.eta, solver, ridge, i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValInit {
    /// Rows of a class-balanced sample of the original val split.
    Subsample,
    /// Gaussian features around zero; targets from the sample.
    Gaussian { std: f64 },
}

/// Which trajectory points drive each update of `S^val`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// One point per iteration, cycling through all points.
    RoundRobin,
    /// The mean over all points.
    #[default]
    FullBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HcdcConfig {
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_outer")]
    pub outer_iters: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Trajectories are rebuilt every this many outer iterations.
    #[serde(default = "default_rebuild")]
    pub rebuild_every: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default = "default_init")]
    pub init: ValInit,
    #[serde(default = "default_true")]
    pub learn_targets: bool,
    /// Learn the val block's own adjacency through sigmoid logits (finite
    /// differences); the train block and the coupling stay fixed.
    #[serde(default)]
    pub learn_val_adjacency: bool,
    /// Starting logit for every off-diagonal val pair; `None` starts from
    /// the induced val subgraph (edges at +4, non-edges at -4).
    #[serde(default)]
    pub val_adjacency_logit: Option<f64>,
    /// Overrides the split-ratio rule for the validation size.
    #[serde(default)]
    pub val_size: Option<usize>,
    /// Filter weights used in fold-weight mode.
    #[serde(default)]
    pub fold_conv: Option<Vec<f64>>,
    /// Trajectory points whose hypergradient norm on S falls below this
    /// fraction of the norm at the trajectory origin are skipped.
    #[serde(default = "default_stationary")]
    pub stationary_tol: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_stationary() -> f64 {
    1e-2
}
fn default_outer() -> usize {
    200
}
fn default_lr() -> f64 {
    0.1
}
fn default_rebuild() -> usize {
    10
}
fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}
fn default_init() -> ValInit {
    ValInit::Subsample
}
fn default_true() -> bool {
    true
}

impl Default for HcdcConfig {
    fn default() -> Self {
        HcdcConfig {
            schedule: Schedule::default(),
            outer_iters: default_outer(),
            lr: default_lr(),
            rebuild_every: default_rebuild(),
            ridge: default_ridge(),
            solver: Solver::Direct,
            init: default_init(),
            learn_targets: true,
            learn_val_adjacency: false,
            val_adjacency_logit: None,
            val_size: None,
            fold_conv: None,
            stationary_tol: default_stationary(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterStats {
    pub iter: usize,
    pub mean: f64,
    pub max: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub val_size: usize,
    pub initial_mean: f64,
    pub final_mean: f64,
    pub curve: Vec<IterStats>,
    pub endpoints: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct AlignmentState {
    pub synthetic: SyntheticDataset,
    pub report: AlignmentReport,
    pub trajectories: Vec<HpoTrajectory>,
}

/// `round(c_train |T^val| / |T^train|)`, at least 2 per class.
pub fn val_size_rule(ds: &GraphDataset, c_train: usize) -> usize {
    let ratio = ds.split_val.len() as f64 / ds.split_train.len() as f64;
    let classes = ds.class_labels().map_or(1, |l| l.iter().max().map_or(1, |m| m + 1));
    ((c_train as f64 * ratio).round() as usize).max(2 * classes)
}

/// Block-diagonal union of a train-only dataset and a val block.
pub fn stack_blocks(train: &GraphDataset, val_adj: &Mat, val_x: &Mat, val_y: &Mat) -> GraphDataset {
    let ct = train.n();
    let cv = val_x.nrows();
    let c = ct + cv;
    let mut adjacency = Mat::zeros(c, c);
    adjacency.view_mut((0, 0), (ct, ct)).copy_from(&train.adjacency);
    adjacency.view_mut((ct, ct), (cv, cv)).copy_from(val_adj);
    let mut features = Mat::zeros(c, train.d());
    features.view_mut((0, 0), (ct, train.d())).copy_from(&train.features);
    features.view_mut((ct, 0), (cv, train.d())).copy_from(val_x);
    let mut targets = Mat::zeros(c, train.outputs());
    targets.view_mut((0, 0), (ct, train.outputs())).copy_from(&train.targets);
    targets.view_mut((ct, 0), (cv, train.outputs())).copy_from(val_y);
    GraphDataset {
        adjacency,
        features,
        targets,
        split_train: (0..ct).collect(),
        split_val: (ct..c).collect(),
        split_test: Vec::new(),
        kind: train.kind,
    }
}

/// Initial synthetic dataset: `S^train` plus a val block sampled from `T^val`.
pub fn init_synthetic(ds: &GraphDataset, s_train: &SyntheticDataset, cfg: &HcdcConfig) -> Result<GraphDataset> {
    let train = &s_train.data;
    if !train.split_val.is_empty() || train.split_train.len() != train.n() {
        return Err(HcdcError::InvalidDataset(
            "S^train must consist of train nodes only".into(),
        ));
    }
    let c_val = cfg.val_size.unwrap_or_else(|| val_size_rule(ds, train.n()));
    let mut rng = seeded_rng(cfg.seed);
    let labels = ds.class_labels();
    let picks = sample_balanced(&ds.split_val, labels.as_deref(), c_val, &mut rng)?;
    let adj = select_square(&ds.adjacency, &picks);
    let y = Mat::from_fn(c_val, ds.outputs(), |i, j| ds.targets[(picks[i], j)]);
    let x = match cfg.init {
        ValInit::Subsample => Mat::from_fn(c_val, ds.d(), |i, j| ds.features[(picks[i], j)]),
        ValInit::Gaussian { std } => gaussian(&mut rng, c_val, ds.d(), std),
    };
    Ok(stack_blocks(train, &adj, &x, &y))
}

fn check_block_diagonal(problem: &ConvProblem) -> Result<()> {
    let train = &problem.ds.split_train;
    let val = &problem.ds.split_val;
    for c in &problem.convs {
        for &i in train {
            for &j in val {
                if c[(i, j)] != 0.0 || c[(j, i)] != 0.0 {
                    return Err(HcdcError::InvalidDataset(
                        "synthetic train and val blocks are coupled by the convolution".into(),
                    ));
                }
            }
        }
    }
    Ok(())
}

struct Targets {
    points: Vec<Vec<f64>>,
    hg_t: Vec<Vec<f64>>,
}

/// Mean alignment loss over the `batch` points.
fn batch_loss(problem: &ConvProblem, mode: &HyperMode, targets: &Targets, batch: &[usize], cfg: &HcdcConfig) -> Result<f64> {
    let losses = batch
        .par_iter()
        .map(|&k| {
            let hg = hypergradient(problem, mode, &targets.points[k], cfg.ridge, cfg.solver)?.total;
            align_loss(&targets.hg_t[k], &hg)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Mean alignment loss over the `batch` points and its data gradient.
fn batch_gradient(problem: &ConvProblem, mode: &HyperMode, targets: &Targets, batch: &[usize], cfg: &HcdcConfig) -> Result<(f64, Mat, Mat)> {
    let parts = batch
        .par_iter()
        .map(|&k| alignment_grad(problem, mode, &targets.points[k], &targets.hg_t[k], cfg.ridge, cfg.solver))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut dx = Mat::zeros(problem.ds.n(), problem.ds.d());
    let mut dy = Mat::zeros(problem.ds.n(), problem.ds.outputs());
    for (l, gx, gy) in parts {
        loss += l * scale;
        dx += gx * scale;
        dy += gy * scale;
    }
    Ok((loss, dx, dy))
}

fn alignment_stats(problem: &ConvProblem, mode: &HyperMode, targets: &Targets, ridge: f64, solver: Solver) -> Result<(f64, f64)> {
    let losses: Vec<f64> = targets
        .points
        .par_iter()
        .zip(&targets.hg_t)
        .map(|(p, t)| {
            let hg = hypergradient(problem, mode, p, ridge, solver)?.total;
            align_loss(t, &hg)
        })
        .collect::<Result<_>>()?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let max = losses.iter().cloned().fold(0.0, f64::max);
    Ok((mean, max))
}

fn rebuild(original: &ConvProblem, synth: &ConvProblem, mode: &HyperMode, space: &HyperSearchSpace, cfg: &HcdcConfig) -> Result<(Vec<HpoTrajectory>, Targets)> {
    let trajectories = build_extended_space(synth, mode, space, cfg.solver, cfg.ridge)?;
    let mut points: Vec<Vec<f64>> = Vec::new();
    for t in &trajectories {
        let origin_norm = t.points[0].hg_norm;
        for (k, p) in t.points.iter().enumerate() {
            // Stalled steps repeat a point; near-stationary points have no
            // usable direction.
            let repeated = k > 0 && p.lambda == t.points[k - 1].lambda;
            if !repeated && p.hg_norm > cfg.stationary_tol * origin_norm {
                points.push(p.lambda.clone());
            }
        }
    }
    if points.is_empty() {
        return Err(HcdcError::InvalidArgument(
            "every trajectory point is stationary on S".into(),
        ));
    }
    let hg_t = points
        .par_iter()
        .map(|p| hypergradient(original, mode, p, cfg.ridge, cfg.solver).map(|r| r.total))
        .collect::<Result<Vec<_>>>()?;
    Ok((trajectories, Targets { points, hg_t }))
}

/// Copy of `problem` whose val block adjacency is `sigmoid(logits)` off the
/// diagonal; the diagonal keeps its current values.
fn with_val_adjacency(problem: &ConvProblem, family: &FilterFamily, val_rows: &[usize], logits: &Mat) -> Result<ConvProblem> {
    let mut ds = problem.ds.clone();
    for (a, &i) in val_rows.iter().enumerate() {
        for (b, &j) in val_rows.iter().enumerate() {
            if a != b {
                ds.adjacency[(i, j)] = 1.0 / (1.0 + (-logits[(a, b)]).exp());
            }
        }
    }
    ConvProblem::new(ds, family)
}

/// Central-difference gradient of the batch loss in the val adjacency logits.
#[allow(clippy::too_many_arguments)]
fn val_logit_grad(
    problem: &ConvProblem,
    family: &FilterFamily,
    mode: &HyperMode,
    targets: &Targets,
    batch: &[usize],
    cfg: &HcdcConfig,
    val_rows: &[usize],
    logits: &Mat,
) -> Result<Mat> {
    let cv = val_rows.len();
    let mut grad = Mat::zeros(cv, cv);
    for a in 0..cv {
        for b in (a + 1)..cv {
            let eval = |delta: f64| -> Result<f64> {
                let mut l = logits.clone();
                l[(a, b)] += delta;
                l[(b, a)] += delta;
                batch_loss(&with_val_adjacency(problem, family, val_rows, &l)?, mode, targets, batch, cfg)
            };
            let g = (eval(ADJ_FD_STEP)? - eval(-ADJ_FD_STEP)?) / (2.0 * ADJ_FD_STEP);
            grad[(a, b)] = g;
            grad[(b, a)] = g;
        }
    }
    Ok(grad)
}

/// Learn `S^val` of `synthetic` (train and val splits already laid out as
/// disconnected blocks) by hypergradient alignment against `original`.
pub fn align_validation(
    original: &ConvProblem,
    synthetic: GraphDataset,
    family: &FilterFamily,
    space: &HyperSearchSpace,
    cfg: &HcdcConfig,
) -> Result<AlignmentState> {
    space.validate()?;
    if !(cfg.lr > 0.0) || cfg.rebuild_every == 0 {
        return Err(HcdcError::InvalidArgument(
            "lr must be positive and rebuild_every at least 1".into(),
        ));
    }
    let fold_conv = match (&space.mode, &cfg.fold_conv) {
        (SpaceMode::FoldWeights { .. }, Some(c)) => c.clone(),
        (SpaceMode::FoldWeights { .. }, None) => {
            return Err(HcdcError::InvalidArgument(
                "fold-weight spaces need fold_conv filter weights".into(),
            ))
        }
        _ => Vec::new(),
    };
    let mode = space.hyper_mode(&fold_conv);
    let mut synth = ConvProblem::new(synthetic, family)?;
    synth.ds.validate_allow_empty_val()?;
    check_block_diagonal(&synth)?;
    let val_rows = synth.ds.split_val.clone();
    let mut val_logits = cfg.learn_val_adjacency.then(|| {
        let block = select_square(&synth.ds.adjacency, &val_rows);
        Mat::from_fn(val_rows.len(), val_rows.len(), |i, j| {
            if i == j {
                0.0
            } else if let Some(v) = cfg.val_adjacency_logit {
                v
            } else if block[(i, j)] > 0.0 {
                LOGIT_INIT
            } else {
                -LOGIT_INIT
            }
        })
    });
    if let Some(logits) = &val_logits {
        synth = with_val_adjacency(&synth, family, &val_rows, logits)?;
    }

    let (mut trajectories, mut targets) = rebuild(original, &synth, &mode, space, cfg)?;
    let (initial_mean, initial_max) = alignment_stats(&synth, &mode, &targets, cfg.ridge, cfg.solver)?;
    let mut curve = vec![IterStats {
        iter: 0,
        mean: initial_mean,
        max: initial_max,
        lr: cfg.lr,
    }];
    let mut lr = cfg.lr;
    for iter in 1..=cfg.outer_iters {
        if iter > 1 && (iter - 1) % cfg.rebuild_every == 0 {
            (trajectories, targets) = rebuild(original, &synth, &mode, space, cfg)?;
            lr = cfg.lr;
        }
        let batch: Vec<usize> = match cfg.schedule {
            Schedule::RoundRobin => vec![(iter - 1) % targets.points.len()],
            Schedule::FullBatch => (0..targets.points.len()).collect(),
        };
        let diverged = |e: HcdcError| HcdcError::Divergence {
            step: iter,
            what: e.to_string(),
        };
        let (loss, dx, dy) = batch_gradient(&synth, &mode, &targets, &batch, cfg).map_err(diverged)?;
        if !loss.is_finite() {
            return Err(HcdcError::Divergence {
                step: iter,
                what: "alignment loss is not finite".into(),
            });
        }
        let d_logits = match &val_logits {
            Some(l) => Some(val_logit_grad(&synth, family, &mode, &targets, &batch, cfg, &val_rows, l).map_err(diverged)?),
            None => None,
        };
        for _ in 0..=crate::hypergrad::MAX_HALVINGS {
            let mut x = synth.ds.features.clone();
            let mut y = synth.ds.targets.clone();
            for &r in &val_rows {
                for j in 0..x.ncols() {
                    x[(r, j)] -= lr * dx[(r, j)];
                }
                if cfg.learn_targets {
                    for j in 0..y.ncols() {
                        y[(r, j)] -= lr * dy[(r, j)];
                    }
                }
            }
            let mut cand = synth.clone();
            cand.set_data(x, y);
            let cand_logits = match (&val_logits, &d_logits) {
                (Some(l), Some(g)) => {
                    let next = l - g * lr;
                    cand = with_val_adjacency(&cand, family, &val_rows, &next)?;
                    Some(next)
                }
                _ => None,
            };
            match batch_loss(&cand, &mode, &targets, &batch, cfg) {
                Ok(l) if l <= loss => {
                    synth = cand;
                    val_logits = cand_logits;
                    break;
                }
                _ => lr *= 0.5,
            }
        }
        let (mean, max) = alignment_stats(&synth, &mode, &targets, cfg.ridge, cfg.solver)?;
        curve.push(IterStats { iter, mean, max, lr });
    }
    let final_mean = curve.last().unwrap().mean;
    let endpoints = trajectories.iter().map(|t| t.endpoint().lambda.clone()).collect();
    let n_val = val_rows.len();
    Ok(AlignmentState {
        synthetic: SyntheticDataset {
            data: synth.ds,
            identity_adjacency: false,
            learnable: Learnable {
                adjacency: cfg.learn_val_adjacency,
                features: true,
                targets: cfg.learn_targets,
            },
            provenance: Some(Provenance {
                method: "hcdc".into(),
                config_hash: String::new(),
            }),
        },
        report: AlignmentReport {
            val_size: n_val,
            initial_mean,
            final_mean,
            curve,
            endpoints,
        },
        trajectories,
    })
}

/// Build `S = S^train + S^val` from `original` and learn `S^val`.
pub fn condense_val(
    original: &GraphDataset,
    family: &FilterFamily,
    s_train: &SyntheticDataset,
    space: &HyperSearchSpace,
    cfg: &HcdcConfig,
) -> Result<AlignmentState> {
    let before = s_train.data.clone();
    let synthetic = init_synthetic(original, s_train, cfg)?;
    let problem = ConvProblem::new(original.clone(), family)?;
    let state = align_validation(&problem, synthetic, family, space, cfg)?;
    let ct = before.n();
    let data = &state.synthetic.data;
    debug_assert_eq!(data.features.rows(0, ct), before.features.rows(0, ct));
    debug_assert_eq!(data.targets.rows(0, ct), before.targets.rows(0, ct));
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HcCheck {
    pub product: f64,
    /// `None` when either loss difference is within the tie tolerance.
    pub calibrated: Option<bool>,
}

/// Sign agreement of `L*_T(l1) - L*_T(l2)` and `L*_S(l1) - L*_S(l2)`.
pub fn check_hc_pair(t: &ConvProblem, s: &ConvProblem, mode: &HyperMode, l1: &[f64], l2: &[f64], ridge: f64) -> Result<HcCheck> {
    let dt = optimized_loss(t, mode, l1, ridge)?.0 - optimized_loss(t, mode, l2, ridge)?.0;
    let ds = optimized_loss(s, mode, l1, ridge)?.0 - optimized_loss(s, mode, l2, ridge)?.0;
    let product = dt * ds;
    let calibrated = if dt.abs() < TIE_TOL || ds.abs() < TIE_TOL {
        None
    } else {
        Some(product > 0.0)
    };
    Ok(HcCheck { product, calibrated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_sbm, induced_subset, DatasetKind, SbmConfig};
    use crate::derivatives::fd_check;
    use crate::hypergrad::one_hot_members;
    use approx::assert_abs_diff_eq;

    #[test]
    fn align_loss_examples() {
        let t = [1.0, -2.0, 0.5];
        assert_abs_diff_eq!(align_loss(&t, &t).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(align_loss(&t, &[3.0, -6.0, 1.5]).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(align_loss(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(align_loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(align_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(align_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn align_grad_matches_fd() {
        let t = [0.3, -1.2, 0.8];
        let s = [1.0, 0.4, -0.2];
        let (_, g) = align_loss_grad(&t, &s).unwrap();
        let r = fd_check(|x| align_loss(&t, x).unwrap(), &s, 1e-6, &g).unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    fn sbm(n: usize, seed: u64) -> GraphDataset {
        gen_sbm(&SbmConfig {
            n,
            blocks: 2,
            p_in: 0.5,
            p_out: 0.05,
            d: 3,
            noise: 0.5,
            seed,
        })
        .unwrap()
    }

    fn synthetic_from(ds: &GraphDataset, train: &[usize], val: &[usize], seed: u64) -> GraphDataset {
        let t = induced_subset(ds, train, &[]);
        let v = induced_subset(ds, val, &[]);
        let mut x = v.features.clone();
        let mut rng = seeded_rng(seed);
        x += gaussian(&mut rng, x.nrows(), x.ncols(), 0.3);
        stack_blocks(&t, &v.adjacency, &x, &v.targets)
    }

    fn fd_data_grad(mode: HyperMode, hyper: Vec<f64>, family: &[&str]) {
        let ds = sbm(24, 1);
        let train: Vec<usize> = ds.split_train[..8].to_vec();
        let val: Vec<usize> = ds.split_val[..4].to_vec();
        let s = synthetic_from(&ds, &train, &val, 5);
        let fam = FilterFamily::parse(family).unwrap();
        let prob = ConvProblem::new(s, &fam).unwrap();
        check_block_diagonal(&prob).unwrap();
        let u: Vec<f64> = (0..hyper.len()).map(|i| 0.7 - 0.4 * i as f64).collect();
        let ridge = 1e-3;
        let (dx, dy) = hypergradient_data_grad(&prob, &mode, &hyper, &u, ridge, Solver::Direct).unwrap();
        let objective = |x: &Mat, y: &Mat| {
            let mut p = prob.clone();
            p.set_data(x.clone(), y.clone());
            let hg = hypergradient(&p, &mode, &hyper, ridge, Solver::Direct).unwrap().total;
            vec_dot(&u, &hg)
        };
        let rows = prob.ds.split_val.clone();
        let mut point = Vec::new();
        let mut analytic = Vec::new();
        for &r in &rows {
            for j in 0..prob.ds.d() {
                point.push(prob.ds.features[(r, j)]);
                analytic.push(dx[(r, j)]);
            }
            for j in 0..prob.ds.outputs() {
                point.push(prob.ds.targets[(r, j)]);
                analytic.push(dy[(r, j)]);
            }
        }
        let (d, k) = (prob.ds.d(), prob.ds.outputs());
        let rebuild = |v: &[f64]| {
            let mut x = prob.ds.features.clone();
            let mut y = prob.ds.targets.clone();
            for (q, &r) in rows.iter().enumerate() {
                for j in 0..d {
                    x[(r, j)] = v[q * (d + k) + j];
                }
                for j in 0..k {
                    y[(r, j)] = v[q * (d + k) + d + j];
                }
            }
            (x, y)
        };
        let rep = fd_check(
            |v| {
                let (x, y) = rebuild(v);
                objective(&x, &y)
            },
            &point,
            1e-5,
            &analytic,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        // Train rows carry no target gradient.
        for &r in &prob.ds.split_train {
            assert!(dy.row(r).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn filter_mode_data_grad_matches_fd() {
        fd_data_grad(HyperMode::Filter, vec![0.8, 0.5, 0.2], &["identity", "gcn", "lap:1"]);
    }

    #[test]
    fn fold_mode_data_grad_matches_fd() {
        fd_data_grad(
            HyperMode::FoldWeights { conv: vec![0.4, 1.0] },
            vec![0.9, 0.3],
            &["identity", "gcn"],
        );
    }

    #[test]
    fn extended_space_examples() {
        let ds = sbm(24, 2);
        let fam = FilterFamily::parse(&["identity", "gcn", "lap:1", "adj"]).unwrap();
        let prob = ConvProblem::new(ds, &fam).unwrap();
        let ext = Extension {
            steps: 0,
            ..Extension::default()
        };
        let space = HyperSearchSpace::discrete(one_hot_members(4)).unwrap().with_extension(ext);
        let trajs = build_extended_space(&prob, &HyperMode::Filter, &space, Solver::Direct, 1e-8).unwrap();
        assert_eq!(trajs.len(), 4);
        for (i, t) in trajs.iter().enumerate() {
            assert_eq!(t.origin, i);
            assert_eq!(t.points.len(), 1);
            assert_eq!(t.points[0].lambda, one_hot_members(4)[i]);
        }
    }

    #[test]
    fn hc_pair_examples() {
        let ds = sbm(24, 3);
        let fam = FilterFamily::parse(&["identity", "gcn"]).unwrap();
        let prob = ConvProblem::new(ds, &fam).unwrap();
        let l1 = [1.0, 0.0];
        let l2 = [0.0, 1.0];
        let r = check_hc_pair(&prob, &prob, &HyperMode::Filter, &l1, &l2, 1e-8).unwrap();
        let dt = optimized_loss(&prob, &HyperMode::Filter, &l1, 1e-8).unwrap().0
            - optimized_loss(&prob, &HyperMode::Filter, &l2, 1e-8).unwrap().0;
        assert_abs_diff_eq!(r.product, dt * dt, epsilon = 1e-15);
        assert_eq!(r.calibrated, Some(true));
        let same = check_hc_pair(&prob, &prob, &HyperMode::Filter, &l1, &l1, 1e-8).unwrap();
        assert_eq!(same.product, 0.0);
        assert_eq!(same.calibrated, None);
    }

    #[test]
    fn val_size_rule_keeps_ratio_and_minimum() {
        let ds = sbm(40, 4);
        // 24 train, 8 val, 2 classes.
        assert_eq!(val_size_rule(&ds, 12), 4);
        assert_eq!(val_size_rule(&ds, 3), 4);
        assert_eq!(val_size_rule(&ds, 30), 10);
    }

    #[test]
    fn coupled_blocks_are_rejected() {
        let ds = sbm(16, 5);
        let mut s = ds.clone();
        s.split_test.clear();
        s.kind = DatasetKind::Graph;
        let fam = FilterFamily::parse(&["identity", "adj"]).unwrap();
        let prob = ConvProblem::new(ds.clone(), &fam).unwrap();
        let space = HyperSearchSpace::discrete(one_hot_members(2)).unwrap();
        let cfg = HcdcConfig {
            outer_iters: 1,
            ..HcdcConfig::default()
        };
        let mut a = s.adjacency.clone();
        let (i, j) = (s.split_train[0], s.split_val[0]);
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
        s.adjacency = a;
        let err = align_validation(&prob, s, &fam, &space, &cfg).unwrap_err();
        assert!(matches!(err, HcdcError::InvalidDataset(_)));
    }
}
