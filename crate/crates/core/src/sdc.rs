//! Condensation of the training split by gradient matching.
//!
//! For the linear model the parameter gradient on `S` is
//! `2 Z'^T Omega (Z' W - Y') + 2 ridge W` with `Z' = C(A') X'`, so the
//! matching loss has a closed-form gradient in `X'`. The adjacency, when
//! learned, goes through a sigmoid and central finite differences.

use serde::{Deserialize, Serialize};

use crate::data::{sample_balanced, GraphDataset, Learnable, Provenance, SyntheticDataset};
use crate::error::{HcdcError, Result};
use crate::filters::{combine, FilterFamily};
use crate::linalg::{all_finite, frob_dot, gaussian, seeded_rng, select_rows, select_square, Mat};
use crate::model::{LossSpec, RowProblem, RowWeights, DEFAULT_RIDGE};
use crate::report::config_hash;

/// Central-difference step for adjacency logits.
pub const ADJ_FD_STEP: f64 = 1e-4;
/// Initial logit magnitude when the adjacency is learned (sigmoid(4) ~ 0.982).
pub const LOGIT_INIT: f64 = 4.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Cosine,
    L2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyInit {
    /// Induced subgraph of the sampled nodes.
    #[default]
    Induced,
    /// `A' = I_c`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub distance: Distance,
    /// Number of sampled `theta_0` trajectories (`K`).
    pub outer_iters: usize,
    /// Steps along each trajectory (`T`).
    pub inner_steps: usize,
    pub lr_theta: f64,
    pub lr_data: f64,
    /// Seeds for independent condensation runs driven from the CLI.
    pub seeds: Vec<u64>,
    pub learn_adjacency: bool,
    pub adjacency_init: AdjacencyInit,
    /// Entry std of the Gaussian `theta_0` distribution.
    pub theta_std: f64,
    /// Fixed `theta` draws at which the reported matching curve is measured.
    pub probes: usize,
    pub ridge: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            distance: Distance::Cosine,
            outer_iters: 100,
            inner_steps: 10,
            lr_theta: 0.05,
            lr_data: 0.1,
            seeds: vec![0],
            learn_adjacency: false,
            adjacency_init: AdjacencyInit::Induced,
            theta_std: 0.1,
            probes: 4,
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_steps == 0 || self.probes == 0 {
            return Err(HcdcError::InvalidArgument(
                "outer_iters, inner_steps and probes must be positive".into(),
            ));
        }
        for (name, v) in [("lr_theta", self.lr_theta), ("lr_data", self.lr_data), ("theta_std", self.theta_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HcdcError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.ridge >= 0.0) {
            return Err(HcdcError::InvalidArgument("ridge must be non-negative".into()));
        }
        Ok(())
    }
}

/// Matching distance between two parameter gradients.
pub fn gm_loss(g_s: &Mat, g_t: &Mat, distance: Distance) -> Result<f64> {
    Ok(gm_loss_grad(g_s, g_t, distance)?.0)
}

/// Matching distance and its gradient in `g_S`. Zero gradients follow the
/// alignment guard: both zero gives 0, one zero gives 1.
pub fn gm_loss_grad(g_s: &Mat, g_t: &Mat, distance: Distance) -> Result<(f64, Mat)> {
    if g_s.shape() != g_t.shape() {
        return Err(HcdcError::shape(
            "gm_loss",
            format!("{}x{}", g_t.nrows(), g_t.ncols()),
            format!("{}x{}", g_s.nrows(), g_s.ncols()),
        ));
    }
    match distance {
        Distance::L2 => {
            let diff = g_s - g_t;
            Ok((diff.norm_squared(), diff * 2.0))
        }
        Distance::Cosine => {
            let ns = g_s.norm();
            let nt = g_t.norm();
            let zero = Mat::zeros(g_s.nrows(), g_s.ncols());
            match (ns > 0.0, nt > 0.0) {
                (false, false) => Ok((0.0, zero)),
                (false, true) | (true, false) => Ok((1.0, zero)),
                (true, true) => {
                    let cos = frob_dot(g_s, g_t) / (ns * nt);
                    let grad = -(g_t / (ns * nt) - g_s * (cos / (ns * ns)));
                    Ok((1.0 - cos, grad))
                }
            }
        }
    }
}

/// Result of a training-split condensation run.
#[derive(Clone, Debug)]
pub struct TrainCondensation {
    pub synthetic: SyntheticDataset,
    /// Mean matching loss on the fixed probes, before and after each outer iteration.
    pub curve: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adjacency state: either fixed, or sigmoid logits with a fixed diagonal.
struct Adjacency {
    logits: Option<Mat>,
    diagonal: Vec<f64>,
    fixed: Mat,
}

impl Adjacency {
    fn new(init: &Mat, learn: bool, identity_init: bool) -> Self {
        let c = init.nrows();
        let logits = learn.then(|| {
            Mat::from_fn(c, c, |i, j| {
                if i == j {
                    0.0
                } else if identity_init || init[(i, j)] <= 0.0 {
                    -LOGIT_INIT
                } else {
                    LOGIT_INIT
                }
            })
        });
        Adjacency {
            logits,
            diagonal: (0..c).map(|i| init[(i, i)]).collect(),
            fixed: init.clone(),
        }
    }

    fn matrix(&self) -> Mat {
        match &self.logits {
            None => self.fixed.clone(),
            Some(l) => Self::from_logits(l, &self.diagonal),
        }
    }

    fn from_logits(l: &Mat, diagonal: &[f64]) -> Mat {
        let c = l.nrows();
        Mat::from_fn(c, c, |i, j| if i == j { diagonal[i] } else { sigmoid(l[(i, j)]) })
    }
}

/// Gradient-matching objective against fixed full-data statistics.
struct Matcher<'a> {
    family: &'a FilterFamily,
    lambda: &'a [f64],
    /// Train rows of `C X` on `T`.
    z_t: RowProblem,
    y_s: Mat,
    weights_s: RowWeights,
    cfg: &'a MatchConfig,
}

impl Matcher<'_> {
    fn s_rows(&self, conv: &Mat, x: &Mat) -> RowProblem {
        RowProblem::new(&(conv * x), &self.y_s, self.weights_s.clone(), self.cfg.ridge)
    }

    fn conv(&self, adjacency: &Mat) -> Result<Mat> {
        combine(&self.family.build(adjacency)?, self.lambda)
    }

    /// Mean matching loss over `thetas`.
    fn loss(&self, conv: &Mat, x: &Mat, thetas: &[Mat]) -> Result<f64> {
        let s = self.s_rows(conv, x);
        let mut total = 0.0;
        for w in thetas {
            total += gm_loss(&s.grad(w), &self.z_t.grad(w), self.cfg.distance)?;
        }
        Ok(total / thetas.len() as f64)
    }

    /// Mean matching loss over `thetas` and its gradient in `X'`.
    fn loss_grad_x(&self, conv: &Mat, x: &Mat, thetas: &[Mat]) -> Result<(f64, Mat)> {
        let s = self.s_rows(conv, x);
        let mut total = 0.0;
        let mut dz = Mat::zeros(s.z.nrows(), s.z.ncols());
        for w in thetas {
            let (l, g) = gm_loss_grad(&s.grad(w), &self.z_t.grad(w), self.cfg.distance)?;
            total += l;
            // d<G, 2 Z^T Omega (Z W - Y)> = <2 Omega (E G^T + Z G W^T), dZ>
            let e = s.residual(w);
            dz += s.weights.scale_rows(&(e * g.transpose() + &s.z * &g * w.transpose())) * 2.0;
        }
        let scale = 1.0 / thetas.len() as f64;
        // All synthetic nodes are train rows, in index order.
        Ok((total * scale, conv.transpose() * dz * scale))
    }
}

/// Gradient-matching condensation from a class-balanced subsample of the
/// train split.
pub fn condense_train(
    ds: &GraphDataset,
    family: &FilterFamily,
    lambda: &[f64],
    c: usize,
    cfg: &MatchConfig,
    seed: u64,
) -> Result<TrainCondensation> {
    ds.validate()?;
    if c == 0 || c >= ds.n() {
        return Err(HcdcError::InvalidArgument(format!(
            "condensed size {c} must be in 1..{}",
            ds.n()
        )));
    }
    let mut rng = seeded_rng(seed);
    let labels = ds.class_labels();
    let picks = sample_balanced(&ds.split_train, labels.as_deref(), c, &mut rng)?;
    let identity = cfg.adjacency_init == AdjacencyInit::Identity;
    let adjacency = if identity {
        Mat::identity(c, c)
    } else {
        select_square(&ds.adjacency, &picks)
    };
    let init = SyntheticDataset {
        data: GraphDataset {
            adjacency,
            features: select_rows(&ds.features, &picks),
            targets: select_rows(&ds.targets, &picks),
            split_train: (0..c).collect(),
            split_val: Vec::new(),
            split_test: Vec::new(),
            kind: ds.kind,
        },
        identity_adjacency: identity,
        learnable: Learnable::default(),
        provenance: None,
    };
    condense_train_from(ds, family, lambda, init, cfg, seed)
}

/// Gradient matching starting from a given synthetic training set.
pub fn condense_train_from(
    ds: &GraphDataset,
    family: &FilterFamily,
    lambda: &[f64],
    init: SyntheticDataset,
    cfg: &MatchConfig,
    seed: u64,
) -> Result<TrainCondensation> {
    cfg.validate()?;
    init.validate()?;
    if !init.data.split_val.is_empty() {
        return Err(HcdcError::InvalidDataset("S^train must consist of train nodes only".into()));
    }
    if init.data.d() != ds.d() || init.data.outputs() != ds.outputs() {
        return Err(HcdcError::InvalidDataset(
            "feature or target width differs from the original".into(),
        ));
    }
    if lambda.len() != family.p() {
        return Err(HcdcError::shape("lambda", family.p(), lambda.len()));
    }
    let c = init.c();
    let conv_t = combine(&family.build(&ds.adjacency)?, lambda)?;
    let z_t = RowProblem::new(
        &(conv_t * &ds.features),
        &ds.targets,
        RowWeights::new(ds, &LossSpec::train(cfg.ridge))?,
        cfg.ridge,
    );
    let weights_s = RowWeights::new(&init.data, &LossSpec::train(cfg.ridge))?;
    let matcher = Matcher {
        family,
        lambda,
        z_t,
        y_s: init.data.targets.clone(),
        weights_s,
        cfg,
    };

    let (d, k) = (ds.d(), ds.outputs());
    let mut rng = seeded_rng(seed ^ 0x5dc0_5dc0);
    let probes: Vec<Mat> = (0..cfg.probes).map(|_| gaussian(&mut rng, d, k, cfg.theta_std)).collect();
    let mut adjacency = Adjacency::new(&init.data.adjacency, cfg.learn_adjacency, init.identity_adjacency);
    let mut x = init.data.features.clone();
    let mut conv = matcher.conv(&adjacency.matrix())?;
    let mut curve = vec![matcher.loss(&conv, &x, &probes)?];

    for iter in 1..=cfg.outer_iters {
        // theta trajectory trained on the current S.
        let mut thetas = Vec::with_capacity(cfg.inner_steps);
        let mut w = gaussian(&mut rng, d, k, cfg.theta_std);
        let s_rows = matcher.s_rows(&conv, &x);
        for _ in 0..cfg.inner_steps {
            thetas.push(w.clone());
            w -= s_rows.grad(&w) * cfg.lr_theta;
        }
        if !all_finite(&w) {
            return Err(HcdcError::Divergence {
                step: iter,
                what: "theta trajectory on S became non-finite".into(),
            });
        }
        let (_, dx) = matcher.loss_grad_x(&conv, &x, &thetas)?;
        x -= dx * cfg.lr_data;

        if let Some(logits) = &adjacency.logits {
            let mut grad = Mat::zeros(c, c);
            for i in 0..c {
                for j in (i + 1)..c {
                    let eval = |delta: f64| -> Result<f64> {
                        let mut l = logits.clone();
                        l[(i, j)] += delta;
                        l[(j, i)] += delta;
                        let a = Adjacency::from_logits(&l, &adjacency.diagonal);
                        matcher.loss(&matcher.conv(&a)?, &x, &thetas)
                    };
                    let g = (eval(ADJ_FD_STEP)? - eval(-ADJ_FD_STEP)?) / (2.0 * ADJ_FD_STEP);
                    grad[(i, j)] = g;
                    grad[(j, i)] = g;
                }
            }
            let updated = logits - grad * cfg.lr_data;
            adjacency.logits = Some(updated);
        }
        conv = matcher.conv(&adjacency.matrix())?;

        let loss = matcher.loss(&conv, &x, &probes)?;
        if !loss.is_finite() || !all_finite(&x) {
            return Err(HcdcError::Divergence {
                step: iter,
                what: format!("matching loss became {loss}"),
            });
        }
        curve.push(loss);
    }

    let identity_adjacency = init.identity_adjacency && !cfg.learn_adjacency;
    let synthetic = SyntheticDataset {
        data: GraphDataset {
            adjacency: adjacency.matrix(),
            features: x,
            ..init.data
        },
        identity_adjacency,
        learnable: Learnable {
            adjacency: cfg.learn_adjacency,
            features: true,
            targets: false,
        },
        provenance: Some(Provenance {
            method: "sdc".into(),
            config_hash: config_hash(cfg)?,
        }),
    };
    synthetic.validate()?;
    Ok(TrainCondensation { synthetic, curve })
}

/// Closed-form synthetic training set whose weighted Gram and cross moments
/// equal those of `Z = C X` on the train rows of `ds`, so that ridge training
/// on `S` (with identity convolution) reproduces training on `T`.
pub fn solve_matching_conditions(ds: &GraphDataset, conv: &Mat, c: usize) -> Result<SyntheticDataset> {
    let d = ds.d();
    if c < d {
        return Err(HcdcError::InvalidArgument(format!(
            "need at least d = {d} synthetic nodes, got {c}"
        )));
    }
    if conv.shape() != (ds.n(), ds.n()) {
        return Err(HcdcError::shape(
            "convolution",
            format!("{0}x{0}", ds.n()),
            format!("{}x{}", conv.nrows(), conv.ncols()),
        ));
    }
    let rows = RowWeights::new(ds, &LossSpec::train(0.0))?;
    let prob = RowProblem::new(&(conv * &ds.features), &ds.targets, rows, 0.0);
    // Weighted moments Z^T Omega Z = V S^2 V^T and Z^T Omega Y.
    let gram = prob.half_hessian();
    let cross = prob.z.transpose() * prob.weights.scale_rows(&prob.y);
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.max().max(0.0);
    let cutoff = top * 1e-14;

    // Z' = sqrt(c) U S V^T with U the first d columns of I_c; synthetic rows
    // carry weight 1/c.
    let scale = (c as f64).sqrt();
    let mut z_s = Mat::zeros(c, d);
    let mut y_s = Mat::zeros(c, ds.outputs());
    for (col, &ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        let v = eig.eigenvectors.column(col);
        for j in 0..d {
            z_s[(col, j)] = scale * s * v[j];
        }
        // Least-norm y': row `col` is sqrt(c) s^-1 v^T (Z^T Omega Y).
        if ev > cutoff {
            let proj = v.transpose() * &cross;
            for k in 0..ds.outputs() {
                y_s[(col, k)] = scale * proj[k] / s;
            }
        }
    }
    let synthetic = SyntheticDataset {
        data: GraphDataset {
            adjacency: Mat::identity(c, c),
            features: z_s,
            targets: y_s,
            split_train: (0..c).collect(),
            split_val: Vec::new(),
            split_test: Vec::new(),
            kind: ds.kind,
        },
        identity_adjacency: true,
        learnable: Learnable::default(),
        provenance: Some(Provenance {
            method: "matching-conditions".into(),
            config_hash: String::new(),
        }),
    };
    synthetic.validate()?;
    Ok(synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_sbm, SbmConfig};
    use crate::model::ConvProblem;
    use approx::assert_relative_eq;

    fn sbm(n: usize, seed: u64) -> GraphDataset {
        gen_sbm(&SbmConfig {
            n,
            blocks: 2,
            p_in: 0.3,
            p_out: 0.05,
            d: 4,
            noise: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn gm_loss_examples() {
        let g = Mat::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        assert_relative_eq!(gm_loss(&g, &g, Distance::Cosine).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(gm_loss(&(-&g), &g, Distance::Cosine).unwrap(), 2.0, epsilon = 1e-15);
        let twice = &g * 2.0;
        assert_relative_eq!(gm_loss(&twice, &g, Distance::Cosine).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(gm_loss(&twice, &g, Distance::L2).unwrap(), g.norm_squared(), epsilon = 1e-12);
        assert!(gm_loss(&g, &Mat::zeros(2, 3), Distance::L2).is_err());
    }

    #[test]
    fn gm_loss_grad_matches_fd() {
        let mut rng = seeded_rng(3);
        let s = gaussian(&mut rng, 3, 2, 1.0);
        let t = gaussian(&mut rng, 3, 2, 1.0);
        for dist in [Distance::Cosine, Distance::L2] {
            let (_, g) = gm_loss_grad(&s, &t, dist).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                for j in 0..2 {
                    let mut p = s.clone();
                    p[(i, j)] += h;
                    let mut m = s.clone();
                    m[(i, j)] -= h;
                    let fd = (gm_loss(&p, &t, dist).unwrap() - gm_loss(&m, &t, dist).unwrap()) / (2.0 * h);
                    assert_relative_eq!(g[(i, j)], fd, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn data_gradient_matches_fd() {
        let ds = sbm(32, 1);
        let family = FilterFamily::parse(&["gcn", "lap:1"]).unwrap();
        let lambda = [0.7, 0.3];
        let cfg = MatchConfig::default();
        let init = condense_train(&ds, &family, &lambda, 6, &MatchConfig { outer_iters: 1, ..cfg.clone() }, 0)
            .unwrap()
            .synthetic;
        let conv_t = combine(&family.build(&ds.adjacency).unwrap(), &lambda).unwrap();
        let matcher = Matcher {
            family: &family,
            lambda: &lambda,
            z_t: RowProblem::new(
                &(conv_t * &ds.features),
                &ds.targets,
                RowWeights::new(&ds, &LossSpec::train(cfg.ridge)).unwrap(),
                cfg.ridge,
            ),
            y_s: init.data.targets.clone(),
            weights_s: RowWeights::new(&init.data, &LossSpec::train(cfg.ridge)).unwrap(),
            cfg: &cfg,
        };
        let conv = matcher.conv(&init.data.adjacency).unwrap();
        let mut rng = seeded_rng(9);
        let thetas: Vec<Mat> = (0..3).map(|_| gaussian(&mut rng, 4, 2, 0.3)).collect();
        for dist in [Distance::Cosine, Distance::L2] {
            let m = Matcher {
                cfg: &MatchConfig { distance: dist, ..cfg.clone() },
                ..matcher_clone(&matcher)
            };
            let x = &init.data.features;
            let (_, g) = m.loss_grad_x(&conv, x, &thetas).unwrap();
            let h = 1e-6;
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    let mut p = x.clone();
                    p[(i, j)] += h;
                    let mut q = x.clone();
                    q[(i, j)] -= h;
                    let fd = (m.loss(&conv, &p, &thetas).unwrap() - m.loss(&conv, &q, &thetas).unwrap()) / (2.0 * h);
                    assert!((g[(i, j)] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{dist:?} ({i},{j}): {} vs {fd}", g[(i, j)]);
                }
            }
        }
    }

    fn matcher_clone<'a>(m: &Matcher<'a>) -> Matcher<'a> {
        Matcher {
            family: m.family,
            lambda: m.lambda,
            z_t: m.z_t.clone(),
            y_s: m.y_s.clone(),
            weights_s: m.weights_s.clone(),
            cfg: m.cfg,
        }
    }

    #[test]
    fn matching_loss_decreases_on_small_sbm() {
        let ds = sbm(32, 4);
        let family = FilterFamily::parse(&["gcn"]).unwrap();
        let cfg = MatchConfig {
            outer_iters: 10,
            ..MatchConfig::default()
        };
        let zero = condense_train(&ds, &family, &[1.0], 6, &MatchConfig { outer_iters: 1, ..cfg.clone() }, 2).unwrap();
        let run = condense_train(&ds, &family, &[1.0], 6, &cfg, 2).unwrap();
        // Same seed, same initial subset and probes.
        assert_eq!(zero.curve[0].to_bits(), run.curve[0].to_bits());
        assert!(run.curve[10] < run.curve[0], "{:?}", run.curve);
        assert_eq!(run.synthetic.data.targets, zero.synthetic.data.targets);
    }

    #[test]
    fn full_copy_is_a_fixed_point() {
        let mut ds = sbm(24, 5);
        ds.split_train = (0..24).collect();
        ds.split_val.clear();
        ds.split_test.clear();
        let family = FilterFamily::parse(&["gcn", "adj"]).unwrap();
        let init = SyntheticDataset {
            data: ds.clone(),
            identity_adjacency: false,
            learnable: Learnable::default(),
            provenance: None,
        };
        let cfg = MatchConfig {
            outer_iters: 5,
            ..MatchConfig::default()
        };
        let run = condense_train_from(&ds, &family, &[0.5, 0.5], init, &cfg, 1).unwrap();
        assert!(run.curve.iter().all(|&l| l.abs() < 1e-12), "{:?}", run.curve);
        assert!((&run.synthetic.data.features - &ds.features).amax() < 1e-12);
    }

    #[test]
    fn identity_adjacency_kept_when_not_learned() {
        let ds = sbm(32, 6);
        let family = FilterFamily::parse(&["gcn"]).unwrap();
        let cfg = MatchConfig {
            outer_iters: 3,
            adjacency_init: AdjacencyInit::Identity,
            ..MatchConfig::default()
        };
        let run = condense_train(&ds, &family, &[1.0], 6, &cfg, 0).unwrap();
        assert_eq!(run.synthetic.data.adjacency, Mat::identity(6, 6));
        assert!(run.synthetic.identity_adjacency);

        let learned = condense_train(&ds, &family, &[1.0], 6, &MatchConfig { learn_adjacency: true, ..cfg }, 0).unwrap();
        assert!(!learned.synthetic.identity_adjacency);
        learned.synthetic.validate().unwrap();
    }

    #[test]
    fn condense_train_is_deterministic() {
        let ds = sbm(32, 7);
        let family = FilterFamily::parse(&["gcn", "lap:1"]).unwrap();
        let cfg = MatchConfig {
            outer_iters: 4,
            learn_adjacency: true,
            ..MatchConfig::default()
        };
        let a = condense_train(&ds, &family, &[0.5, 0.5], 6, &cfg, 11).unwrap();
        let b = condense_train(&ds, &family, &[0.5, 0.5], 6, &cfg, 11).unwrap();
        assert_eq!(a.synthetic.data.features, b.synthetic.data.features);
        assert_eq!(a.synthetic.data.adjacency, b.synthetic.data.adjacency);
        assert_eq!(a.curve, b.curve);
    }

    fn moment_residuals(ds: &GraphDataset, conv: &Mat, s: &SyntheticDataset) -> (f64, f64) {
        let t = RowProblem::new(&(conv * &ds.features), &ds.targets, RowWeights::new(ds, &LossSpec::train(0.0)).unwrap(), 0.0);
        let sp = RowProblem::new(
            &s.data.features,
            &s.data.targets,
            RowWeights::new(&s.data, &LossSpec::train(0.0)).unwrap(),
            0.0,
        );
        let gram = (t.half_hessian() - sp.half_hessian()).norm();
        let cross = (t.z.transpose() * t.weights.scale_rows(&t.y) - sp.z.transpose() * sp.weights.scale_rows(&sp.y)).norm();
        (gram, cross)
    }

    #[test]
    fn matching_conditions_hold_on_random_design() {
        let mut rng = seeded_rng(21);
        let n = 64;
        let ds = GraphDataset {
            adjacency: Mat::zeros(n, n),
            features: gaussian(&mut rng, n, 4, 1.0),
            targets: gaussian(&mut rng, n, 2, 1.0),
            split_train: (0..n).collect(),
            split_val: Vec::new(),
            split_test: Vec::new(),
            kind: crate::data::DatasetKind::Iid,
        };
        let conv = Mat::identity(n, n);
        let s = solve_matching_conditions(&ds, &conv, 8).unwrap();
        let (g, c) = moment_residuals(&ds, &conv, &s);
        assert!(g < 1e-9 && c < 1e-9, "{g} {c}");
        assert!(solve_matching_conditions(&ds, &conv, 2).is_err());
    }

    #[test]
    fn matching_conditions_scalar_feature() {
        let ds = GraphDataset {
            adjacency: Mat::zeros(3, 3),
            features: Mat::from_column_slice(3, 1, &[1.0, 2.0, -1.0]),
            targets: Mat::from_column_slice(3, 1, &[0.5, 1.0, 0.0]),
            split_train: vec![0, 1, 2],
            split_val: Vec::new(),
            split_test: Vec::new(),
            kind: crate::data::DatasetKind::Iid,
        };
        let s = solve_matching_conditions(&ds, &Mat::identity(3, 3), 1).unwrap();
        // Gram 6/3 = 2, cross 2.5/3; one synthetic row with weight 1.
        assert_relative_eq!(s.data.features[(0, 0)].powi(2), 2.0, epsilon = 1e-14);
        assert_relative_eq!(s.data.features[(0, 0)] * s.data.targets[(0, 0)], 2.5 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn matching_conditions_reproduce_training() {
        let ds = sbm(48, 8);
        let family = FilterFamily::parse(&["gcn"]).unwrap();
        let conv = family.build(&ds.adjacency).unwrap().remove(0);
        let s = solve_matching_conditions(&ds, &conv, 6).unwrap();
        let t = ConvProblem::from_convs(ds.clone(), vec![conv]).unwrap();
        let sp = ConvProblem::from_convs(s.data.clone(), vec![Mat::identity(6, 6)]).unwrap();
        let spec = LossSpec::train(DEFAULT_RIDGE);
        let wt = t.train_closed_form(&[1.0], &spec).unwrap();
        let ws = sp.train_closed_form(&[1.0], &spec).unwrap();
        assert!((&wt - &ws).norm() / wt.norm() < 1e-8);
    }
}
