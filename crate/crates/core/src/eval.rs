//! Rank comparison between original and condensed data.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{induced_subset, sample_balanced, GraphDataset, Learnable, Provenance, Split, SyntheticDataset};
use crate::derivatives::HyperMode;
use crate::error::{HcdcError, Result};
use crate::filters::FilterFamily;
use crate::hcdc::{align_validation, init_synthetic, val_size_rule, Extension, HcdcConfig, HyperSearchSpace, TIE_TOL};
use crate::hypergrad::{one_hot_members, optimized_loss};
use crate::linalg::seeded_rng;
use crate::model::{ConvProblem, LossSpec};
use crate::sdc::{condense_train, MatchConfig};

/// Average ranks (1-based); values within `TIE_TOL` of their neighbour in
/// sorted order share a rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && (values[order[end]] - values[order[end - 1]]).abs() < TIE_TOL {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HcdcError::shape("spearman", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(HcdcError::InvalidArgument(
            "rank correlation needs at least two members".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(HcdcError::Indeterminate(
            "all members tied in one ranking".into(),
        ));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub member: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub members: Vec<String>,
    pub loss_t: Vec<f64>,
    pub loss_s: Vec<f64>,
    pub rank_t: Vec<f64>,
    pub rank_s: Vec<f64>,
    pub spearman: f64,
    /// Member ranked first on S.
    pub selected: String,
    /// Test-split loss on T of the member selected on S.
    pub selected_perf: f64,
    /// Best test-split loss on T over all members.
    pub best_perf: f64,
    pub excluded: Vec<Excluded>,
}

impl RankingReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| HcdcError::Csv {
            path: path.into(),
            message: e.to_string(),
        })?;
        let csv_err = |e: csv::Error| HcdcError::Csv {
            path: path.into(),
            message: e.to_string(),
        };
        w.write_record(["label", "loss_T", "loss_S", "rank_T", "rank_S"])
            .map_err(csv_err)?;
        for i in 0..self.members.len() {
            w.write_record([
                self.members[i].clone(),
                format!("{:.16e}", self.loss_t[i]),
                format!("{:.16e}", self.loss_s[i]),
                format!("{}", self.rank_t[i]),
                format!("{}", self.rank_s[i]),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| HcdcError::io(path, e))
    }
}

/// Loss on an arbitrary split of `problem` at `theta*(hyper)`.
fn split_loss(problem: &ConvProblem, mode: &HyperMode, hyper: &[f64], split: Split, ridge: f64) -> Result<f64> {
    let (_, theta) = optimized_loss(problem, mode, hyper, ridge)?;
    let spec = match split {
        Split::Val => mode.val_spec(hyper),
        other => LossSpec {
            split: other,
            fold_weights: None,
            ridge: 0.0,
        },
    };
    problem.loss(mode.conv_weights(hyper), &theta, &spec)
}

/// Rank `members` by `L*` on T and on S and correlate the rankings.
pub fn compare_rankings(
    t: &ConvProblem,
    s: &ConvProblem,
    mode: &HyperMode,
    members: &[Vec<f64>],
    labels: &[String],
    ridge: f64,
) -> Result<RankingReport> {
    if labels.len() != members.len() {
        return Err(HcdcError::shape("member labels", members.len(), labels.len()));
    }
    if members.len() < 2 {
        return Err(HcdcError::Indeterminate(
            "a single member has no ranking to compare".into(),
        ));
    }
    let evaluated: Vec<(usize, Result<(f64, f64)>)> = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let r = optimized_loss(t, mode, m, ridge)
                .and_then(|(lt, _)| optimized_loss(s, mode, m, ridge).map(|(ls, _)| (lt, ls)));
            (i, r)
        })
        .collect();
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (i, r) in evaluated {
        match r {
            Ok((lt, ls)) if lt.is_finite() && ls.is_finite() => kept.push((i, lt, ls)),
            Ok(_) => excluded.push(Excluded {
                member: labels[i].clone(),
                error: "non-finite loss".into(),
            }),
            Err(e) => excluded.push(Excluded {
                member: labels[i].clone(),
                error: e.to_string(),
            }),
        }
    }
    let loss_t: Vec<f64> = kept.iter().map(|k| k.1).collect();
    let loss_s: Vec<f64> = kept.iter().map(|k| k.2).collect();
    let spearman = spearman(&loss_t, &loss_s)?;
    let rank_t = average_ranks(&loss_t);
    let rank_s = average_ranks(&loss_s);
    let winner = (0..kept.len())
        .min_by(|&a, &b| loss_s[a].total_cmp(&loss_s[b]).then(a.cmp(&b)))
        .unwrap();
    let perf_split = if t.ds.split_test.is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let perfs = kept
        .iter()
        .map(|k| split_loss(t, mode, &members[k.0], perf_split, ridge))
        .collect::<Result<Vec<f64>>>()?;
    Ok(RankingReport {
        members: kept.iter().map(|k| labels[k.0].clone()).collect(),
        loss_t,
        loss_s,
        rank_t,
        rank_s,
        spearman,
        selected: labels[kept[winner].0].clone(),
        selected_perf: perfs[winner],
        best_perf: perfs.iter().cloned().fold(f64::INFINITY, f64::min),
        excluded,
    })
}

/// Serialize any report as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| HcdcError::io(path, e))?;
    let text = crate::report::to_json(value)?;
    f.write_all(text.as_bytes()).map_err(|e| HcdcError::io(path, e))
}

// ---------------------------------------------------------------------------
// Paired experiments
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Class-balanced subsample for both splits, induced adjacency.
    Random,
    /// Gradient-matched `S^train`, subsampled `S^val`.
    Sdc,
    /// Gradient-matched `S^train`, hypergradient-aligned `S^val`.
    Hcdc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Sdc => "sdc",
            Method::Hcdc => "hcdc",
        }
    }
}

/// Shared settings of the paired condensation experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic training size; the val size follows the split-ratio rule
    /// unless `hcdc.val_size` is set.
    pub c_train: usize,
    /// Filter weights used by gradient matching.
    pub lambda_condense: Vec<f64>,
    #[serde(default)]
    pub matching: MatchConfig,
    #[serde(default)]
    pub hcdc: HcdcConfig,
    #[serde(default)]
    pub extension: Extension,
    pub methods: Vec<Method>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// `None` when the ranking is indeterminate or the method failed.
    pub spearman: Option<f64>,
    pub report: Option<RankingReport>,
    /// Mean alignment loss before and after, for HCDC.
    pub alignment: Option<(f64, f64)>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub c_train: usize,
    pub c_val: usize,
    pub outcomes: Vec<MethodOutcome>,
}

impl ExperimentReport {
    pub fn spearman_of(&self, method: Method) -> Option<f64> {
        self.outcomes.iter().find(|o| o.method == method).and_then(|o| o.spearman)
    }
}

fn random_train(ds: &GraphDataset, c: usize, seed: u64) -> Result<SyntheticDataset> {
    // Same draw as the gradient-matching initialization for this seed.
    let mut rng = seeded_rng(seed);
    let labels = ds.class_labels();
    let picks = sample_balanced(&ds.split_train, labels.as_deref(), c, &mut rng)?;
    Ok(SyntheticDataset {
        data: induced_subset(ds, &picks, &[]),
        identity_adjacency: false,
        learnable: Learnable::default(),
        provenance: Some(Provenance {
            method: "random".into(),
            config_hash: String::new(),
        }),
    })
}

/// Run every configured method on `ds` and rank `members` under `mode`.
fn run_methods(
    ds: &GraphDataset,
    family: &FilterFamily,
    space: &HyperSearchSpace,
    members: &[Vec<f64>],
    labels: &[String],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    let hcfg = HcdcConfig {
        seed,
        ..cfg.hcdc.clone()
    };
    let fold_conv = hcfg.fold_conv.clone().unwrap_or_default();
    let mode = space.hyper_mode(&fold_conv);
    let t = ConvProblem::new(ds.clone(), family)?;
    let random = random_train(ds, cfg.c_train, seed)?;
    let matched = if cfg.methods.iter().any(|m| *m != Method::Random) {
        Some(condense_train(ds, family, &cfg.lambda_condense, cfg.c_train, &cfg.matching, seed)?.synthetic)
    } else {
        None
    };
    let mut c_val = 0;
    let mut outcomes = Vec::new();
    for &method in &cfg.methods {
        let built: Result<(GraphDataset, Option<(f64, f64)>)> = (|| {
            let s_train = match method {
                Method::Random => &random,
                _ => matched.as_ref().expect("built above"),
            };
            let init = init_synthetic(ds, s_train, &hcfg)?;
            if method != Method::Hcdc {
                return Ok((init, None));
            }
            let state = align_validation(&t, init, family, space, &hcfg)?;
            let report = &state.report;
            Ok((state.synthetic.data, Some((report.initial_mean, report.final_mean))))
        })();
        let outcome = match built {
            Ok((s, alignment)) => {
                c_val = s.split_val.len();
                let ranked = ConvProblem::new(s, family)
                    .and_then(|sp| compare_rankings(&t, &sp, &mode, members, labels, hcfg.ridge));
                match ranked {
                    Ok(r) => MethodOutcome {
                        method,
                        spearman: Some(r.spearman),
                        report: Some(r),
                        alignment,
                        error: None,
                    },
                    Err(e) => MethodOutcome {
                        method,
                        spearman: None,
                        report: None,
                        alignment,
                        error: Some(e.to_string()),
                    },
                }
            }
            Err(e) => MethodOutcome {
                method,
                spearman: None,
                report: None,
                alignment: None,
                error: Some(e.to_string()),
            },
        };
        outcomes.push(outcome);
    }
    Ok(ExperimentReport {
        seed,
        c_train: cfg.c_train,
        c_val,
        outcomes,
    })
}

/// Rank the discrete filter `members` on T and on each method's condensed S.
pub fn filter_experiment(
    ds: &GraphDataset,
    family: &FilterFamily,
    members: &[Vec<f64>],
    labels: &[String],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    let space = HyperSearchSpace::discrete(members.to_vec())?.with_extension(cfg.extension.clone());
    run_methods(ds, family, &space, members, labels, cfg, seed)
}

/// Rank the `folds` validation folds (one-hot fold weights) on T and on each
/// method's condensed S. The filter is fixed by `cfg.hcdc.fold_conv`.
pub fn cv_experiment(
    ds: &GraphDataset,
    family: &FilterFamily,
    folds: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    if folds < 2 {
        return Err(HcdcError::InvalidArgument("need at least 2 folds".into()));
    }
    let c_val = cfg
        .hcdc
        .val_size
        .unwrap_or_else(|| val_size_rule(ds, cfg.c_train));
    for (what, len) in [("original", ds.split_val.len()), ("condensed", c_val)] {
        if len / folds < 2 {
            return Err(HcdcError::InvalidArgument(format!(
                "{what} val split of {len} nodes gives folds below 2 samples for M = {folds}"
            )));
        }
    }
    if cfg.hcdc.fold_conv.is_none() {
        return Err(HcdcError::InvalidArgument(
            "fold experiments need hcdc.fold_conv filter weights".into(),
        ));
    }
    let space = HyperSearchSpace::fold_weights(folds)?.with_extension(cfg.extension.clone());
    let members = one_hot_members(folds);
    let labels: Vec<String> = (0..folds).map(|j| format!("fold{j}")).collect();
    run_methods(ds, family, &space, &members, &labels, cfg, seed)
}

/// Desk-scale setups shared by the acceptance suite, the CLI and the pilot
/// example. The pilot runs behind these values are recorded in PILOT.md.
pub mod desk {
    use super::*;
    use crate::data::{gen_sbm, SbmConfig};
    use crate::filters::LambdaMax;

    pub const FILTERS: [&str; 6] = ["identity", "adj", "gcn", "lap:1", "lap:2", "cheb:3"];
    /// Index of `gcn` in [`FILTERS`].
    pub const GCN: usize = 2;
    pub const CV_FOLDS: usize = 5;

    pub fn sbm(seed: u64) -> SbmConfig {
        SbmConfig {
            n: 128,
            blocks: 2,
            p_in: 0.3,
            p_out: 0.02,
            d: 8,
            noise: 1.0,
            seed,
        }
    }

    pub fn dataset(seed: u64) -> Result<GraphDataset> {
        gen_sbm(&sbm(seed))
    }

    /// The six-filter family with `lambda_max = 2` so that Chebyshev members
    /// stay smooth in learned adjacencies.
    pub fn family() -> FilterFamily {
        let mut f = FilterFamily::parse(&FILTERS).expect("static descriptors");
        f.lambda_max = LambdaMax::Two;
        f
    }

    pub fn labels() -> Vec<String> {
        FILTERS.iter().map(|s| s.to_string()).collect()
    }

    fn hcdc_base() -> HcdcConfig {
        HcdcConfig {
            outer_iters: 200,
            lr: 1.0,
            rebuild_every: 1,
            learn_val_adjacency: true,
            val_adjacency_logit: Some(0.0),
            ..HcdcConfig::default()
        }
    }

    /// Filter ranking at `c/n = 16/128`: 12 train and 4 val synthetic nodes.
    pub fn filter_config() -> ExperimentConfig {
        ExperimentConfig {
            c_train: 12,
            lambda_condense: vec![1.0 / FILTERS.len() as f64; FILTERS.len()],
            matching: MatchConfig::default(),
            hcdc: hcdc_base(),
            extension: Extension {
                steps: 2,
                ..Extension::default()
            },
            methods: vec![Method::Random, Method::Sdc, Method::Hcdc],
        }
    }

    /// Five-fold ranking with the GCN filter; 30 train and 10 val nodes so
    /// every synthetic fold holds 2 nodes.
    pub fn cv_config() -> ExperimentConfig {
        let gcn: Vec<f64> = (0..FILTERS.len()).map(|i| if i == GCN { 1.0 } else { 0.0 }).collect();
        ExperimentConfig {
            c_train: 30,
            lambda_condense: gcn.clone(),
            matching: MatchConfig::default(),
            hcdc: HcdcConfig {
                fold_conv: Some(gcn),
                ..hcdc_base()
            },
            extension: Extension {
                steps: 2,
                ..Extension::default()
            },
            methods: vec![Method::Random, Method::Sdc, Method::Hcdc],
        }
    }

    pub fn run_filter(seed: u64) -> Result<ExperimentReport> {
        let ds = dataset(seed)?;
        filter_experiment(&ds, &family(), &one_hot_members(FILTERS.len()), &labels(), &filter_config(), seed)
    }

    pub fn run_cv(seed: u64) -> Result<ExperimentReport> {
        let ds = dataset(seed)?;
        cv_experiment(&ds, &family(), CV_FOLDS, &cv_config(), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_abs_diff_eq!(spearman(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        let rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_abs_diff_eq!(spearman(&a, &rev).unwrap(), -1.0, epsilon = 1e-15);
        // 1 - 6 * 4 / (4 * 15) = 0.6
        let hand = 1.0 - 6.0 * 4.0 / (4.0 * 15.0);
        let got = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert_abs_diff_eq!(got, hand, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 0.6, epsilon = 1e-15);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(matches!(
            spearman(&[1.0, 1.0], &[1.0, 2.0]),
            Err(HcdcError::Indeterminate(_))
        ));
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(average_ranks(&[1.0, 1.0 + 1e-14]), vec![1.5, 1.5]);
    }

    fn permutation(seed: u64, n: usize) -> Vec<f64> {
        use rand::seq::SliceRandom;
        let mut v: Vec<f64> = (0..n).map(|i| i as f64).collect();
        v.shuffle(&mut crate::linalg::seeded_rng(seed));
        v
    }

    proptest! {
        #[test]
        fn spearman_extremes(seed in 0u64..10_000, n in 2usize..30) {
            let a = permutation(seed, n);
            let rev: Vec<f64> = a.iter().map(|x| -x).collect();
            prop_assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
        }

        #[test]
        fn spearman_is_monotone_invariant(seed in 0u64..10_000, n in 2usize..20) {
            let a = permutation(seed, n);
            let b = permutation(seed + 1, n);
            let squashed: Vec<f64> = a.iter().map(|x| (x * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(spearman(&a, &b).unwrap(), spearman(&squashed, &b).unwrap());
        }
    }
}
