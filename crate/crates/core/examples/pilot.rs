//! Desk-scale ranking experiments over a block of seeds.
//!
//! Usage: pilot <filters|cv> [first_seed] [count]

use std::time::Instant;

use hcdc::eval::{desk, ExperimentReport, Method};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("filters");
    let first: u64 = args.get(2).map_or(0, |s| s.parse().expect("first_seed"));
    let count: u64 = args.get(3).map_or(10, |s| s.parse().expect("count"));
    let run: fn(u64) -> hcdc::Result<ExperimentReport> = match which {
        "filters" => desk::run_filter,
        "cv" => desk::run_cv,
        other => panic!("unknown experiment `{other}`"),
    };
    let methods = [Method::Random, Method::Sdc, Method::Hcdc];
    let mut sums = [0.0; 3];
    let mut beats_random = 0;
    let mut beats_all = 0;
    println!("seed  random    sdc   hcdc  align(before -> after)");
    for seed in first..first + count {
        let t0 = Instant::now();
        let r = run(seed).expect("experiment");
        let sp: Vec<f64> = methods.iter().map(|m| r.spearman_of(*m).unwrap_or(f64::NAN)).collect();
        for (acc, v) in sums.iter_mut().zip(&sp) {
            if v.is_finite() {
                *acc += v;
            }
        }
        beats_random += usize::from(sp[2] > sp[0]);
        beats_all += usize::from(sp[2] >= sp[0] && sp[2] >= sp[1]);
        let align = r
            .outcomes
            .iter()
            .find_map(|o| o.alignment)
            .map_or(String::from("-"), |(a, b)| format!("{a:.3} -> {b:.3}"));
        println!(
            "{seed:>4}  {:>6.3} {:>6.3} {:>6.3}  {align}  ({:.1}s)",
            sp[0],
            sp[1],
            sp[2],
            t0.elapsed().as_secs_f64()
        );
    }
    let n = count as f64;
    println!(
        "hcdc > random on {beats_random}/{count}; hcdc >= random and sdc on {beats_all}/{count}; mean spearman random {:.3} sdc {:.3} hcdc {:.3}",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n
    );
}
