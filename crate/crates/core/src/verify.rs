//! Seeded oracle suite: every oracle builds its own random instance from a
//! seed and reports named residuals and a pass flag. Reports carry no
//! timings so identical inputs give byte-identical JSON.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_cyclic_signal, gen_sbm, GraphDataset, SbmConfig};
use crate::derivatives::{fd_check, HyperMode};
use crate::error::{HcdcError, Result};
use crate::filters::{gcn_norm, FilterFamily};
use crate::hypergrad::{hypergradient, lambda_max_estimate, inverse_hvp_neumann, optimized_loss, Solver};
use crate::linalg::{gaussian, seeded_rng, solve_spd, spd_condition, Mat};
use crate::model::{ConvProblem, DEFAULT_RIDGE};
use crate::sdc::solve_matching_conditions;
use crate::theory::{
    check_achievability, construct_1dcnn_condensed, construct_overfit_adjacency, q_matrix_bound,
    random_spanning_trajectory, segment_path, verify_1dcnn_generalization, verify_equivalence,
    verify_sdc_validity, EquivalenceConfig,
};

/// FD step for hypergradient checks.
pub const FD_STEP: f64 = 1e-4;
pub const DIRECT_TOL: f64 = 1e-4;
pub const NEUMANN_TOL: f64 = 1e-2;
/// Relative slack on the Neumann error bound.
pub const NEUMANN_BOUND_SLACK: f64 = 1e-6;
/// Largest Neumann order swept by the convergence oracle.
pub const NEUMANN_SWEEP: usize = 30;
pub const VALIDITY_TOL: f64 = 1e-8;
pub const ACHIEVABILITY_TOL: f64 = 1e-9;
pub const CNN_TOL: f64 = 1e-8;
pub const CNN_KERNEL_HALF_WIDTH: usize = 2;
pub const OVERFIT_TOL: f64 = 1e-8;
pub const Q_BOUND_SLACK: f64 = 1e-8;
pub const PATH_POINTS: usize = 20;

/// Catalog the random hypergradient instances draw their members from.
const CATALOG: [&str; 8] = ["identity", "adj", "gcn", "lap:1", "lap:2", "lap:3", "cheb:2", "cheb:3"];
/// Transfer targets of the Q-bound oracle; condensation always uses `gcn`.
const Q_ALTERNATIVES: [&str; 5] = ["identity", "adj", "lap:1", "lap:2", "cheb:3"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    Hypergradient,
    Neumann,
    SdcValidity,
    CnnTransfer,
    OverfitAdjacency,
    QBound,
    Equivalence,
}

impl Oracle {
    pub const ALL: [Oracle; 7] = [
        Oracle::Hypergradient,
        Oracle::Neumann,
        Oracle::SdcValidity,
        Oracle::CnnTransfer,
        Oracle::OverfitAdjacency,
        Oracle::QBound,
        Oracle::Equivalence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Oracle::Hypergradient => "hypergradient",
            Oracle::Neumann => "neumann",
            Oracle::SdcValidity => "sdc-validity",
            Oracle::CnnTransfer => "cnn-transfer",
            Oracle::OverfitAdjacency => "overfit-adjacency",
            Oracle::QBound => "q-bound",
            Oracle::Equivalence => "equivalence",
        }
    }

    pub fn run(self, seed: u64) -> OracleResult {
        let outcome = match self {
            Oracle::Hypergradient => hypergradient_oracle(seed),
            Oracle::Neumann => neumann_oracle(seed),
            Oracle::SdcValidity => sdc_validity_oracle(seed),
            Oracle::CnnTransfer => cnn_transfer_oracle(seed),
            Oracle::OverfitAdjacency => overfit_oracle(seed),
            Oracle::QBound => q_bound_oracle(seed),
            Oracle::Equivalence => equivalence_oracle(seed),
        };
        match outcome {
            Ok((pass, residuals)) => OracleResult {
                oracle: self,
                seed,
                pass,
                residuals,
                error: None,
            },
            Err(e) => OracleResult {
                oracle: self,
                seed,
                pass: false,
                residuals: BTreeMap::new(),
                error: Some(e.to_string()),
            },
        }
    }
}

impl fmt::Display for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Oracle {
    type Err = HcdcError;

    fn from_str(s: &str) -> Result<Self> {
        Oracle::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| HcdcError::InvalidArgument(format!("unknown oracle `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub oracle: Oracle,
    pub seed: u64,
    pub pass: bool,
    pub residuals: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub oracles: Vec<Oracle>,
    pub seeds: Vec<u64>,
    pub passed: usize,
    pub failed: usize,
    pub results: Vec<OracleResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

/// Runs every `(oracle, seed)` pair on the current rayon pool; results keep
/// oracle-major, seed-minor order regardless of scheduling.
pub fn run_suite(oracles: &[Oracle], seeds: &[u64]) -> SuiteReport {
    let pairs: Vec<(Oracle, u64)> = oracles
        .iter()
        .flat_map(|&o| seeds.iter().map(move |&s| (o, s)))
        .collect();
    let results: Vec<OracleResult> = pairs.par_iter().map(|&(o, s)| o.run(s)).collect();
    let passed = results.iter().filter(|r| r.pass).count();
    SuiteReport {
        oracles: oracles.to_vec(),
        seeds: seeds.to_vec(),
        passed,
        failed: results.len() - passed,
        results,
    }
}

/// Parses an inclusive range `a..b` (also written `a..=b`), a single seed,
/// or a comma list.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || HcdcError::InvalidArgument(format!("bad seed list `{spec}`"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let seeds: Vec<u64> = if let Some((a, b)) = spec.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = spec.split_once("..") {
        (num(a)?..=num(b)?).collect()
    } else {
        spec.split(',').map(num).collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

type Outcome = Result<(bool, BTreeMap<String, f64>)>;

fn residuals<const N: usize>(entries: [(&str, f64); N]) -> BTreeMap<String, f64> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn sbm(n: usize, d: usize, seed: u64) -> Result<GraphDataset> {
    gen_sbm(&SbmConfig {
        n,
        blocks: 2,
        p_in: 0.3,
        p_out: 0.05,
        d,
        noise: 1.0,
        seed,
    })
}

/// Random instance with `n <= 64`, `d <= 8`, `p <= 4` catalog members.
fn random_instance(seed: u64) -> Result<(ConvProblem, Vec<f64>)> {
    let mut rng = seeded_rng(seed);
    let n = 2 * rng.random_range(12..=32);
    let d = rng.random_range(2..=8);
    let p = rng.random_range(1..=4);
    let mut names = CATALOG.to_vec();
    names.shuffle(&mut rng);
    let family = FilterFamily::parse(&names[..p])?;
    let lambda: Vec<f64> = (0..p).map(|_| rng.random_range(0.2..1.0)).collect();
    let ds = sbm(n, d, seed)?;
    Ok((ConvProblem::new(ds, &family)?, lambda))
}

fn hypergradient_oracle(seed: u64) -> Outcome {
    let (problem, lambda) = random_instance(seed)?;
    let mode = HyperMode::Filter;
    let ridge = DEFAULT_RIDGE;
    let loss = |l: &[f64]| optimized_loss(&problem, &mode, l, ridge).map_or(f64::NAN, |r| r.0);
    let direct = hypergradient(&problem, &mode, &lambda, ridge, Solver::Direct)?;
    let neumann = hypergradient(&problem, &mode, &lambda, ridge, Solver::neumann_default())?;
    let fd_direct = fd_check(loss, &lambda, FD_STEP, &direct.total)?;
    let fd_neumann = fd_check(loss, &lambda, FD_STEP, &neumann.total)?;
    let kappa = spd_condition(&problem.rows(&lambda, &mode.train_spec(ridge))?.half_hessian());
    let pass = fd_direct.max_rel_error < DIRECT_TOL && fd_neumann.max_rel_error < NEUMANN_TOL;
    Ok((
        pass,
        residuals([
            ("direct_rel_error", fd_direct.max_rel_error),
            ("neumann_rel_error", fd_neumann.max_rel_error),
            ("hessian_condition", kappa),
        ]),
    ))
}

/// Errors `||x_m - H^-1 g||` for `m = 0..=NEUMANN_SWEEP` against the bound
/// `||I - alpha H||^{m+1} ||H^-1 g||`.
fn neumann_oracle(seed: u64) -> Outcome {
    let mut rng = seeded_rng(seed);
    let k = rng.random_range(2..=12);
    let shift = rng.random_range(0.1..1.0);
    let b = gaussian(&mut rng, k, k, 1.0);
    let h = &b * b.transpose() / k as f64 + Mat::identity(k, k) * shift;
    let g = gaussian(&mut rng, k, 1, 1.0);
    let exact = solve_spd(&h, &g)?;
    let alpha = 0.9 / lambda_max_estimate(|v| &h * v, k, 1);
    let contraction = (Mat::identity(k, k) - &h * alpha).symmetric_eigen().eigenvalues.amax();
    let scale = exact.norm();
    let mut monotone = true;
    let mut bounded = true;
    let mut worst_ratio: f64 = 0.0;
    let mut last = f64::INFINITY;
    for m in 0..=NEUMANN_SWEEP {
        let (x, _) = inverse_hvp_neumann(|v| &h * v, &g, alpha, m)?;
        let err = (&x - &exact).norm();
        // Rounding floor: errors at machine precision may jitter.
        let floor = 1e-13 * scale;
        monotone &= err <= last + floor;
        let bound = contraction.powi(m as i32 + 1) * scale;
        bounded &= err <= bound * (1.0 + NEUMANN_BOUND_SLACK) + floor;
        if bound > floor {
            worst_ratio = worst_ratio.max(err / bound);
        }
        last = err;
    }
    Ok((
        monotone && bounded,
        residuals([
            ("contraction", contraction),
            ("final_error", last),
            ("worst_error_over_bound", worst_ratio),
            ("monotone", f64::from(u8::from(monotone))),
        ]),
    ))
}

fn sdc_validity_oracle(seed: u64) -> Outcome {
    let (t, lambda) = random_instance(seed)?;
    let d = t.ds.d();
    let c = 2 * d;
    let s = solve_matching_conditions(&t.ds, &t.conv(&lambda)?, c)?;
    let s = ConvProblem::from_convs(s.data, vec![Mat::identity(c, c)])?;
    // Both models take a single convolution: C(lambda) on T, I on S.
    let t_fixed = ConvProblem::from_convs(t.ds.clone(), vec![t.conv(&lambda)?])?;
    let validity = verify_sdc_validity(&t_fixed, &s, &[1.0])?;
    let traj = random_spanning_trajectory(&mut seeded_rng(seed ^ 0xa11), d, t.ds.outputs());
    let ach = check_achievability(&t_fixed, &s, &[1.0], &traj, ACHIEVABILITY_TOL)?;
    let pass = validity.rel_error < VALIDITY_TOL && ach.achieved;
    Ok((
        pass,
        residuals([
            ("rel_error", validity.rel_error),
            ("achievability_residual", ach.residual),
            ("span_rank", ach.span_rank as f64),
        ]),
    ))
}

fn cnn_transfer_oracle(seed: u64) -> Outcome {
    let mut rng = seeded_rng(seed);
    let kernel: Vec<f64> = (0..2 * CNN_KERNEL_HALF_WIDTH + 1).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = gen_cyclic_signal(64, 2, &kernel, 0.1, seed)?;
    let s = construct_1dcnn_condensed(&t, CNN_KERNEL_HALF_WIDTH, seed)?;
    let res = verify_1dcnn_generalization(&t, &s, &[0, 1, 2, 3], seed)?;
    let pass = res
        .iter()
        .filter(|r| r.k_prime <= CNN_KERNEL_HALF_WIDTH)
        .all(|r| r.residual < CNN_TOL);
    let names = ["k0", "k1", "k2", "k3"];
    Ok((pass, res.iter().zip(names).map(|(r, k)| (k.to_string(), r.residual)).collect()))
}

fn overfit_oracle(seed: u64) -> Outcome {
    let ds = sbm(40, 4, seed)?;
    let conv = gcn_norm(&ds.adjacency);
    let x_s = gaussian(&mut seeded_rng(seed ^ 0x0f17), 8, 4, 1.0);
    let (_, _, report) = construct_overfit_adjacency(&x_s, &ds, &conv)?;
    let pass = report.gram_residual < OVERFIT_TOL && report.cross_residual < OVERFIT_TOL;
    Ok((
        pass,
        residuals([
            ("gram_residual", report.gram_residual),
            ("cross_residual", report.cross_residual),
        ]),
    ))
}

/// Condense with GCN, transfer to `Q_ALTERNATIVES[seed % 5]`.
fn q_bound_oracle(seed: u64) -> Outcome {
    let ds = sbm(64, 4, seed)?;
    let alt_name = Q_ALTERNATIVES[(seed % Q_ALTERNATIVES.len() as u64) as usize];
    let family = FilterFamily::parse(&["gcn", alt_name])?;
    let convs = family.build(&ds.adjacency)?;
    let q = q_matrix_bound(&ds, &convs[0], &convs[1])?;
    let pass = q.actual >= q.bound - Q_BOUND_SLACK;
    Ok((
        pass,
        residuals([
            ("bound", q.bound),
            ("actual", q.actual),
            ("proof_expression", q.proof_expression),
            ("sigma_max", q.sigma_max),
            ("sigma_min", q.sigma_min),
        ]),
    ))
}

/// Sufficiency with `S = T` on a random path, and the necessity probe on a
/// noise dataset of the same shape along the same path.
fn equivalence_oracle(seed: u64) -> Outcome {
    let ds = sbm(48, 4, seed)?;
    let family = FilterFamily::parse(&["identity", "gcn", "lap:1"])?;
    let t = ConvProblem::new(ds.clone(), &family)?;
    let mut rng = seeded_rng(seed ^ 0xe9);
    let a: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
    let path = segment_path(&a, &b, PATH_POINTS);
    let cfg = EquivalenceConfig {
        bounds: Some(vec![(0.0, 1.0); 3]),
        ..EquivalenceConfig::default()
    };
    let same = verify_equivalence(&t, &t, &HyperMode::Filter, &path, &cfg)?;
    let sufficient = same.sufficiency == Some(true);

    let mut noise = t.clone();
    let features = gaussian(&mut rng, ds.n(), ds.d(), 1.0);
    let targets = gaussian(&mut rng, ds.n(), ds.outputs(), 1.0);
    noise.set_data(features, targets);
    let mis = verify_equivalence(&t, &noise, &HyperMode::Filter, &path, &cfg)?;
    let found = mis.probes.iter().filter(|p| p.delta.is_some()).count();
    let necessary = !mis.probes.is_empty() && found == mis.probes.len();
    let max_align = mis.align_losses.iter().cloned().fold(0.0, f64::max);
    Ok((
        sufficient && necessary,
        residuals([
            ("self_max_align_loss", same.align_losses.iter().cloned().fold(0.0, f64::max)),
            ("misaligned_max_align_loss", max_align),
            ("probes", mis.probes.len() as f64),
            ("probes_found", found as f64),
            ("sufficiency_holds", f64::from(u8::from(sufficient))),
            ("necessity_found", f64::from(u8::from(necessary))),
        ]),
    ))
}
