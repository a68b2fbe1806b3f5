//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//! Runs without the libtest harness so every line is printed.

use std::time::{Duration, Instant};

use hcdc::cli::{cmd_verify, VerifyArgs};
use hcdc::data::gen_sbm;
use hcdc::eval::{desk, ExperimentReport, Method};
use hcdc::filters::gcn_norm;
use hcdc::theory::q_matrix_bound;
use hcdc::verify::{run_suite, Oracle, OracleResult, CNN_TOL, DIRECT_TOL, NEUMANN_TOL, OVERFIT_TOL, VALIDITY_TOL};
use hcdc::verify::ACHIEVABILITY_TOL;
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

fn results(oracle: Oracle, n: u64) -> Vec<OracleResult> {
    run_suite(&[oracle], &seeds(n)).results
}

fn residual(r: &OracleResult, key: &str) -> f64 {
    r.residuals.get(key).copied().unwrap_or(f64::NAN)
}

fn count(rs: &[OracleResult], ok: impl Fn(&OracleResult) -> bool) -> usize {
    rs.iter().filter(|r| r.error.is_none() && ok(r)).count()
}

fn max_of(rs: &[OracleResult], key: &str) -> f64 {
    rs.iter().map(|r| residual(r, key)).fold(0.0, f64::max)
}

fn hypergradient() -> Verdict {
    let rs = results(Oracle::Hypergradient, 50);
    let direct = count(&rs, |r| residual(r, "direct_rel_error") < DIRECT_TOL);
    let neumann = count(&rs, |r| residual(r, "neumann_rel_error") < NEUMANN_TOL);
    Verdict {
        pass: direct == 50 && neumann == 50,
        detail: format!(
            "direct {direct}/50 below {DIRECT_TOL:e} (max {:.2e}), Neumann m=20 {neumann}/50 below {NEUMANN_TOL:e} (max {:.2e})",
            max_of(&rs, "direct_rel_error"),
            max_of(&rs, "neumann_rel_error"),
        ),
    }
}

fn neumann() -> Verdict {
    let rs = results(Oracle::Neumann, 100);
    let ok = count(&rs, |r| r.pass);
    Verdict {
        pass: ok == 100,
        detail: format!(
            "{ok}/100 monotone and within the contraction bound (worst error/bound {:.3})",
            max_of(&rs, "worst_error_over_bound")
        ),
    }
}

fn sdc_validity() -> Verdict {
    let rs = results(Oracle::SdcValidity, 100);
    let valid = count(&rs, |r| residual(r, "rel_error") < VALIDITY_TOL);
    let achieved = count(&rs, |r| residual(r, "achievability_residual") < ACHIEVABILITY_TOL);
    Verdict {
        pass: valid == 100 && achieved == 100,
        detail: format!(
            "rel error {valid}/100 below {VALIDITY_TOL:e} (max {:.2e}), matching residual {achieved}/100 below {ACHIEVABILITY_TOL:e} (max {:.2e})",
            max_of(&rs, "rel_error"),
            max_of(&rs, "achievability_residual")
        ),
    }
}

fn cnn_transfer() -> Verdict {
    let rs = results(Oracle::CnnTransfer, 20);
    let ok = count(&rs, |r| ["k0", "k1", "k2"].iter().all(|k| residual(r, k) < CNN_TOL));
    let mut k3: Vec<f64> = rs.iter().map(|r| residual(r, "k3")).collect();
    k3.sort_by(f64::total_cmp);
    let median = (k3[9] + k3[10]) / 2.0;
    Verdict {
        pass: ok == 20,
        detail: format!(
            "K'<=2 residual below {CNN_TOL:e} on {ok}/20 (max {:.2e}); contrast K'=3 median {median:.3e} (reported)",
            ["k0", "k1", "k2"].iter().map(|k| max_of(&rs, k)).fold(0.0, f64::max)
        ),
    }
}

fn overfit() -> Verdict {
    let rs = results(Oracle::OverfitAdjacency, 100);
    let ok = count(&rs, |r| {
        residual(r, "gram_residual") < OVERFIT_TOL && residual(r, "cross_residual") < OVERFIT_TOL
    });
    Verdict {
        pass: ok == 100,
        detail: format!(
            "{ok}/100 below {OVERFIT_TOL:e} (max gram {:.2e}, cross {:.2e})",
            max_of(&rs, "gram_residual"),
            max_of(&rs, "cross_residual")
        ),
    }
}

fn q_bound() -> Verdict {
    let rs = results(Oracle::QBound, 100);
    let ok = count(&rs, |r| r.pass);
    let ds = gen_sbm(&desk::sbm(0)).expect("desk dataset");
    let conv = gcn_norm(&ds.adjacency);
    let twice = q_matrix_bound(&ds, &conv, &(&conv * 2.0)).expect("scaled filter");
    let exact = |v: f64| (v - 0.75).abs() < 1e-12;
    Verdict {
        pass: ok == 100 && exact(twice.bound) && exact(twice.actual),
        detail: format!(
            "inequality holds on {ok}/100; C_alt = 2C gives bound {:.6} and actual {:.6} (target 0.75 for both)",
            twice.bound, twice.actual
        ),
    }
}

fn equivalence() -> Verdict {
    let rs = results(Oracle::Equivalence, 20);
    let sufficient = count(&rs, |r| residual(r, "sufficiency_holds") == 1.0);
    let necessary = count(&rs, |r| residual(r, "necessity_found") == 1.0);
    Verdict {
        pass: sufficient == 20 && necessary == 20,
        detail: format!("sufficiency with S=T {sufficient}/20, necessity probe {necessary}/20"),
    }
}

fn paired(run: fn(u64) -> hcdc::Result<ExperimentReport>) -> Vec<Option<ExperimentReport>> {
    seeds(10).into_par_iter().map(|s| run(s).ok()).collect()
}

fn spearmans(reports: &[Option<ExperimentReport>], method: Method) -> Vec<Option<f64>> {
    reports
        .iter()
        .map(|r| r.as_ref().and_then(|r| r.spearman_of(method)))
        .collect()
}

fn beats(a: &[Option<f64>], b: &[Option<f64>]) -> usize {
    a.iter()
        .zip(b)
        .filter(|(x, y)| matches!((x, y), (Some(x), Some(y)) if x > y))
        .count()
}

fn fmt_row(v: &[Option<f64>]) -> String {
    v.iter()
        .map(|x| x.map_or("n/a".into(), |x| format!("{x:.2}")))
        .collect::<Vec<_>>()
        .join(" ")
}

fn mean(v: &[Option<f64>]) -> f64 {
    // Undefined correlations count as 0.
    v.iter().map(|x| x.unwrap_or(0.0)).sum::<f64>() / v.len() as f64
}

fn filter_ranking() -> Verdict {
    let reports = paired(desk::run_filter);
    let hcdc = spearmans(&reports, Method::Hcdc);
    let random = spearmans(&reports, Method::Random);
    let wins = beats(&hcdc, &random);
    let m = mean(&hcdc);
    Verdict {
        pass: wins >= 8 && m >= 0.6,
        detail: format!(
            "hcdc beats random on {wins}/10 (need 8), mean hcdc {m:.3} (need 0.6), mean random {:.3}; hcdc [{}] random [{}]",
            mean(&random),
            fmt_row(&hcdc),
            fmt_row(&random)
        ),
    }
}

fn cv_ranking() -> Verdict {
    let reports = paired(desk::run_cv);
    let hcdc = spearmans(&reports, Method::Hcdc);
    let random = spearmans(&reports, Method::Random);
    let wins = beats(&hcdc, &random);
    Verdict {
        pass: wins >= 7,
        detail: format!(
            "hcdc beats random on {wins}/10 (need 7), mean hcdc {:.3}, mean random {:.3}; hcdc [{}] random [{}]",
            mean(&hcdc),
            mean(&random),
            fmt_row(&hcdc),
            fmt_row(&random)
        ),
    }
}

fn determinism() -> Verdict {
    let args = VerifyArgs {
        oracle: "all".into(),
        seeds: "0..9".into(),
    };
    let run = || {
        let dir = tempfile::tempdir().expect("tempdir");
        cmd_verify(&args, dir.path()).expect("verify run");
        std::fs::read(dir.path().join("verify.json")).expect("report")
    };
    let (a, b) = (run(), run());
    Verdict {
        pass: a == b,
        detail: format!("two full verify runs, {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    }
}

type Criterion = (u32, &'static str, Duration, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "hypergradient vs finite differences", Duration::from_secs(60), hypergradient),
        (2, "Neumann convergence", Duration::from_secs(10), neumann),
        (3, "matching conditions validity", Duration::from_secs(30), sdc_validity),
        (4, "1D-CNN kernel transfer", Duration::from_secs(30), cnn_transfer),
        (5, "adjacency overfit construction", Duration::from_secs(10), overfit),
        (6, "cross-filter error bound", Duration::from_secs(30), q_bound),
        (7, "alignment and calibration", Duration::from_secs(60), equivalence),
        (8, "filter rank preservation", Duration::from_secs(600), filter_ranking),
        (9, "fold rank preservation", Duration::from_secs(600), cv_ranking),
        (10, "verify determinism", Duration::from_secs(600), determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let verdict = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = verdict.pass && in_time;
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            verdict.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
