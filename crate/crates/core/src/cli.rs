//! Command-line front end. Every command writes its artifacts under
//! `--output-dir` together with a run manifest holding the config hash and
//! the tool version.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{gen_cyclic_signal, gen_sbm, load_dataset, load_synthetic, save_dataset, save_synthetic, SbmConfig};
use crate::error::{HcdcError, Result};
use crate::eval::{compare_rankings, cv_experiment, desk, filter_experiment, write_json, ExperimentConfig, ExperimentReport};
use crate::filters::{FilterFamily, LambdaMax};
use crate::hcdc::{build_extended_space, condense_val, HcdcConfig, HyperSearchSpace, SpaceMode};
use crate::hypergrad::{hpo_exhaustive, one_hot_members, Solver};
use crate::model::{ConvProblem, DEFAULT_RIDGE};
use crate::report::{config_hash, to_json};
use crate::sdc::{condense_train, MatchConfig};
use crate::verify::{parse_seeds, run_suite, Oracle, SuiteReport};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hcdc", version, about = "Hyperparameter-calibrated dataset condensation")]
pub struct Cli {
    /// Worker threads for seed and member parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Directory receiving every artifact of the run.
    #[arg(long, global = true, default_value = "out")]
    pub output_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset bundle.
    Gen(GenArgs),
    /// Condense the train split by gradient matching, or the val split by
    /// hypergradient alignment.
    Condense {
        #[arg(value_enum)]
        stage: Stage,
        #[command(flatten)]
        args: CondenseArgs,
    },
    /// Hyperparameter search on a bundle.
    Hpo {
        #[arg(value_enum)]
        method: HpoMethod,
        #[command(flatten)]
        args: HpoArgs,
    },
    /// Run the numerical oracle suite.
    Verify(VerifyArgs),
    /// Compare the member rankings of an original and a synthetic bundle.
    Rank(RankArgs),
    /// Paired random/SDC/HCDC ranking experiment on the desk SBM preset.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HpoMethod {
    Descent,
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Sbm,
    Cyclic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    Filters,
    Cv,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(value_enum)]
    pub kind: GenKind,
    #[arg(long, default_value_t = 128)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0.3)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.02)]
    pub p_out: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Comma-separated cyclic kernel of odd length.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,0.5")]
    pub kernel: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CondenseArgs {
    /// Original dataset bundle.
    #[arg(long)]
    pub data: PathBuf,
    /// Synthetic train bundle (val stage only).
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HpoArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Oracle name, or `all`.
    #[arg(long, default_value = "all")]
    pub oracle: String,
    /// Inclusive range `a..b`, or a comma list.
    #[arg(long, default_value = "0..9")]
    pub seeds: String,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub synthetic: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub kind: ExperimentKind,
    #[arg(long, default_value = "0..9")]
    pub seeds: String,
}

/// Settings shared by the condense, hpo and rank commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_filters")]
    pub filters: Vec<String>,
    #[serde(default)]
    pub lambda_max: LambdaMax,
    /// Defaults to the one-hot members of `filters`.
    #[serde(default)]
    pub space: Option<HyperSearchSpace>,
    /// Filter weights for gradient matching; defaults to uniform.
    #[serde(default)]
    pub lambda_condense: Option<Vec<f64>>,
    #[serde(default = "default_c_train")]
    pub c_train: usize,
    #[serde(default)]
    pub matching: MatchConfig,
    #[serde(default)]
    pub hcdc: HcdcConfig,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_filters() -> Vec<String> {
    desk::FILTERS.iter().map(|s| s.to_string()).collect()
}
fn default_c_train() -> usize {
    12
}
fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            filters: default_filters(),
            lambda_max: LambdaMax::default(),
            space: None,
            lambda_condense: None,
            c_train: default_c_train(),
            matching: MatchConfig::default(),
            hcdc: HcdcConfig::default(),
            solver: Solver::default(),
            ridge: default_ridge(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses `text`, reporting the offending key path on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| HcdcError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| HcdcError::io(p, e))?;
                RunConfig::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let config = |path: &str, message: String| HcdcError::Config {
            path: path.into(),
            message,
        };
        self.family().map_err(|e| config("filters", e.to_string()))?;
        self.search_space().map_err(|e| config("space", e.to_string()))?;
        self.matching.validate().map_err(|e| config("matching", e.to_string()))?;
        if let Some(l) = &self.lambda_condense {
            if l.len() != self.filters.len() {
                return Err(config(
                    "lambda_condense",
                    format!("expected {} weights, got {}", self.filters.len(), l.len()),
                ));
            }
        }
        if self.c_train == 0 {
            return Err(config("c_train", "must be positive".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(config("ridge", "must be non-negative".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> Result<FilterFamily> {
        let names: Vec<&str> = self.filters.iter().map(String::as_str).collect();
        let mut family = FilterFamily::parse(&names)?;
        family.lambda_max = self.lambda_max;
        Ok(family)
    }

    pub fn search_space(&self) -> Result<HyperSearchSpace> {
        let space = match &self.space {
            Some(s) => s.clone(),
            None => HyperSearchSpace::discrete(one_hot_members(self.filters.len()))?,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn lambda_condense(&self) -> Vec<f64> {
        let p = self.filters.len();
        self.lambda_condense.clone().unwrap_or_else(|| vec![1.0 / p as f64; p])
    }

    fn fold_conv(&self) -> Vec<f64> {
        self.hcdc.fold_conv.clone().unwrap_or_else(|| self.lambda_condense())
    }

    /// Members and labels ranked by `rank` and `hpo grid`.
    fn members(&self) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
        match self.search_space()?.mode {
            SpaceMode::Discrete { members } => {
                let labels = members
                    .iter()
                    .map(|m| member_label(&self.filters, m))
                    .collect();
                Ok((members, labels))
            }
            SpaceMode::FoldWeights { folds } => Ok((
                one_hot_members(folds),
                (0..folds).map(|j| format!("fold{j}")).collect(),
            )),
            SpaceMode::Continuous { .. } => Err(HcdcError::Config {
                path: "space".into(),
                message: "ranking needs a discrete or fold-weight space".into(),
            }),
        }
    }
}

/// The filter name for one-hot members, the weight vector otherwise.
fn member_label(filters: &[String], m: &[f64]) -> String {
    let ones: Vec<usize> = (0..m.len()).filter(|&i| m[i] == 1.0).collect();
    let zeros = m.iter().filter(|&&v| v == 0.0).count();
    if ones.len() == 1 && zeros + 1 == m.len() {
        filters[ones[0]].clone()
    } else {
        format!("{m:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub artifacts: Vec<String>,
}

fn write_manifest<T: Serialize + ?Sized>(dir: &Path, command: &str, config: &T, artifacts: &[&str]) -> Result<()> {
    let manifest = RunManifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: command.into(),
        config_hash: config_hash(config)?,
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&manifest, &dir.join(RUN_MANIFEST))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HcdcError::io(dir, e))
}

pub fn cmd_gen(args: &GenArgs, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ds = match args.kind {
        GenKind::Sbm => gen_sbm(&SbmConfig {
            n: args.n,
            blocks: args.blocks,
            p_in: args.p_in,
            p_out: args.p_out,
            d: args.d,
            noise: args.noise,
            seed: args.seed,
        })?,
        GenKind::Cyclic => gen_cyclic_signal(args.n, args.d, &args.kernel, args.noise, args.seed)?,
    };
    save_dataset(&ds, out)?;
    let config = serde_json::json!({
        "kind": format!("{:?}", args.kind),
        "n": args.n, "d": args.d, "blocks": args.blocks,
        "p_in": args.p_in, "p_out": args.p_out, "noise": args.noise,
        "kernel": args.kernel, "seed": args.seed,
    });
    write_manifest(out, "gen", &config, &[crate::data::MANIFEST])
}

pub fn cmd_condense(stage: Stage, args: &CondenseArgs, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let ds = load_dataset(&args.data)?;
    let family = cfg.family()?;
    ensure_dir(out)?;
    let syn_dir = out.join("synthetic");
    match stage {
        Stage::Train => {
            let result = condense_train(&ds, &family, &cfg.lambda_condense(), cfg.c_train, &cfg.matching, cfg.seed)?;
            save_synthetic(&result.synthetic, &syn_dir)?;
            write_json(&result.curve, &out.join("curve.json"))?;
            write_manifest(out, "condense train", &cfg, &["synthetic", "curve.json"])
        }
        Stage::Val => {
            let train_dir = args.train.as_ref().ok_or_else(|| HcdcError::Config {
                path: "--train".into(),
                message: "the val stage needs a synthetic train bundle".into(),
            })?;
            let s_train = load_synthetic(train_dir)?;
            let mut hcfg = cfg.hcdc.clone();
            if hcfg.fold_conv.is_none() {
                hcfg.fold_conv = Some(cfg.lambda_condense());
            }
            let state = condense_val(&ds, &family, &s_train, &cfg.search_space()?, &hcfg)?;
            save_synthetic(&state.synthetic, &syn_dir)?;
            write_json(&state.report, &out.join("alignment.json"))?;
            write_manifest(out, "condense val", &cfg, &["synthetic", "alignment.json"])
        }
    }
}

pub fn cmd_hpo(method: HpoMethod, args: &HpoArgs, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let ds = load_dataset(&args.data)?;
    let problem = ConvProblem::new(ds, &cfg.family()?)?;
    let space = cfg.search_space()?;
    let mode = space.hyper_mode(&cfg.fold_conv());
    ensure_dir(out)?;
    match method {
        HpoMethod::Descent => {
            let trajectories = build_extended_space(&problem, &mode, &space, cfg.solver, cfg.ridge)?;
            write_json(&trajectories, &out.join("trajectories.json"))?;
            write_manifest(out, "hpo descent", &cfg, &["trajectories.json"])
        }
        HpoMethod::Grid => {
            let (members, _) = cfg.members()?;
            let ranking = hpo_exhaustive(&problem, &mode, &members, cfg.ridge)?;
            write_json(&ranking, &out.join("ranking.json"))?;
            write_manifest(out, "hpo grid", &cfg, &["ranking.json"])
        }
    }
}

pub fn cmd_verify(args: &VerifyArgs, out: &Path) -> Result<SuiteReport> {
    let oracles: Vec<Oracle> = if args.oracle == "all" {
        Oracle::ALL.to_vec()
    } else {
        args.oracle
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_>>()
            .map_err(|e| HcdcError::Config {
                path: "--oracle".into(),
                message: e.to_string(),
            })?
    };
    let seeds = parse_seeds(&args.seeds).map_err(|e| HcdcError::Config {
        path: "--seeds".into(),
        message: e.to_string(),
    })?;
    let report = run_suite(&oracles, &seeds);
    ensure_dir(out)?;
    write_json(&report, &out.join("verify.json"))?;
    let config = serde_json::json!({ "oracles": oracles, "seeds": seeds });
    write_manifest(out, "verify", &config, &["verify.json"])?;
    Ok(report)
}

/// A synthetic bundle's data, or a plain dataset bundle used as S.
fn load_condensed_or_plain(dir: &Path) -> Result<crate::data::GraphDataset> {
    match load_synthetic(dir) {
        Ok(s) => Ok(s.data),
        Err(HcdcError::BadManifest { .. }) => load_dataset(dir),
        Err(e) => Err(e),
    }
}

pub fn cmd_rank(args: &RankArgs, out: &Path) -> Result<f64> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let family = cfg.family()?;
    let t = ConvProblem::new(load_dataset(&args.original)?, &family)?;
    let s = ConvProblem::new(load_condensed_or_plain(&args.synthetic)?, &family)?;
    let mode = cfg.search_space()?.hyper_mode(&cfg.fold_conv());
    let (members, labels) = cfg.members()?;
    let report = compare_rankings(&t, &s, &mode, &members, &labels, cfg.ridge)?;
    ensure_dir(out)?;
    write_json(&report, &out.join("ranking.json"))?;
    report.write_csv(&out.join("ranking.csv"))?;
    write_manifest(out, "rank", &cfg, &["ranking.json", "ranking.csv"])?;
    Ok(report.spearman)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSuite {
    pub kind: String,
    pub config: ExperimentConfig,
    pub reports: Vec<ExperimentReport>,
}

pub fn cmd_experiment(args: &ExperimentArgs, out: &Path) -> Result<ExperimentSuite> {
    use rayon::prelude::*;
    let seeds = parse_seeds(&args.seeds).map_err(|e| HcdcError::Config {
        path: "--seeds".into(),
        message: e.to_string(),
    })?;
    let (kind, config) = match args.kind {
        ExperimentKind::Filters => ("filters", desk::filter_config()),
        ExperimentKind::Cv => ("cv", desk::cv_config()),
    };
    let reports = seeds
        .par_iter()
        .map(|&seed| {
            let ds = desk::dataset(seed)?;
            match args.kind {
                ExperimentKind::Filters => filter_experiment(
                    &ds,
                    &desk::family(),
                    &one_hot_members(desk::FILTERS.len()),
                    &desk::labels(),
                    &config,
                    seed,
                ),
                ExperimentKind::Cv => cv_experiment(&ds, &desk::family(), desk::CV_FOLDS, &config, seed),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let suite = ExperimentSuite {
        kind: kind.into(),
        config,
        reports,
    };
    ensure_dir(out)?;
    write_json(&suite, &out.join("experiment.json"))?;
    write_manifest(out, "experiment", &suite.config, &["experiment.json"])?;
    Ok(suite)
}

/// Exit code for an error: 2 config, 4 I/O, 3 numerical, 1 otherwise.
pub fn exit_code(err: &HcdcError) -> i32 {
    match err {
        HcdcError::Config { .. } => EXIT_CONFIG,
        e if e.is_io() => EXIT_IO,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_FAILURE;
        }
    };
    let out = cli.output_dir.clone();
    let result: Result<i32> = pool.install(|| match &cli.command {
        Command::Gen(args) => cmd_gen(args, &out).map(|_| 0),
        Command::Condense { stage, args } => cmd_condense(*stage, args, &out).map(|_| 0),
        Command::Hpo { method, args } => cmd_hpo(*method, args, &out).map(|_| 0),
        Command::Verify(args) => cmd_verify(args, &out).map(|r| {
            println!("{} passed, {} failed", r.passed, r.failed);
            for f in r.results.iter().filter(|r| !r.pass) {
                println!("FAIL {} seed {}", f.oracle, f.seed);
            }
            if r.all_passed() {
                0
            } else {
                EXIT_FAILURE
            }
        }),
        Command::Rank(args) => cmd_rank(args, &out).map(|s| {
            println!("spearman {s}");
            0
        }),
        Command::Experiment(args) => cmd_experiment(args, &out).map(|suite| {
            for r in &suite.reports {
                let cells: Vec<String> = r
                    .outcomes
                    .iter()
                    .map(|o| format!("{} {}", o.method.name(), o.spearman.map_or("n/a".into(), |s| format!("{s:.3}"))))
                    .collect();
                println!("seed {}: {}", r.seed, cells.join(", "));
            }
            0
        }),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Renders a config as the JSON the `--config` flag accepts.
pub fn config_template() -> Result<String> {
    to_json(&RunConfig::default())
}
