//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! Built with `harness = false` so the per-criterion lines are always shown.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use fedfair::attack::{malicious_norm_bound, solve_malicious_update, TargetUpdate};
use fedfair::config::{parse_config, ExperimentConfig};
use fedfair::experiment::{run_experiment, simulate, ROUNDS_CSV};
use fedfair::federation::{fedavg_aggregate, ClientUpdate};
use fedfair::metrics::{read_round_csv, RoundRecord};
use fedfair::model::{gradient, init_parameters, loss, ModelSpec};
use fedfair::{seed, ParameterVector};

const CLIENT_COUNTS: [usize; 3] = [3, 10, 30];
const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(limit: Duration, elapsed: Duration, failures: &mut Vec<String>) {
    if elapsed >= limit {
        failures.push(format!("runtime {elapsed:.1?} exceeds {limit:?}"));
    }
}

fn scenario(clients: usize, seed: u64, sections: &str) -> ExperimentConfig {
    let text = format!("seed = {seed}\n[partition]\nnum_clients = {clients}\n{sections}");
    parse_config(&text, Path::new("."), "acceptance").expect("scenario config")
}

const FULL: &str = "[attack]\nstart_round = 0\n";
const LATE: &str = "[attack]\nstart_round = 20\n";
const CLIPPED: &str =
    "[attack]\nstart_round = 0\n[defense]\nkind = \"clip\"\nbound = \"adaptive_median\"\n";

/// Runs every (clients, seed) pair of a scenario in parallel.
fn grid(sections: &str) -> Vec<(usize, u64, Vec<RoundRecord>)> {
    let cells: Vec<(usize, u64)> = CLIENT_COUNTS
        .iter()
        .flat_map(|&c| SEEDS.iter().map(move |&s| (c, s)))
        .collect();
    cells
        .into_par_iter()
        .map(|(c, s)| {
            let records = simulate(&scenario(c, s, sections), |_| Ok(())).expect("simulation");
            (c, s, records)
        })
        .collect()
}

fn random_vector(rng: &mut impl Rng, d: usize) -> ParameterVector {
    ParameterVector::new((0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
}

fn exact_recovery() -> Verdict {
    let start = Instant::now();
    let mut rng = seed::rng(0xACCE);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=1000);
        let target = TargetUpdate {
            delta: random_vector(&mut rng, d),
            source_round: 0,
        };
        let honest: Vec<ClientUpdate> = (0..rng.random_range(1..=30))
            .map(|_| {
                let n = rng.random_range(1..=500);
                ClientUpdate::new(random_vector(&mut rng, d), n).unwrap()
            })
            .collect();
        let n0 = rng.random_range(1..=500);
        let v = solve_malicious_update(&target, &honest, n0).unwrap();
        let mut all = vec![v];
        all.extend(honest);
        let aggregate = fedavg_aggregate(&all).unwrap();
        let err = (0..d)
            .map(|i| (aggregate[i] - target.delta[i]).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    let mut failures = Vec::new();
    if worst > 1e-9 {
        failures.push(format!("max error {worst:e} > 1e-9"));
    }
    within(Duration::from_secs(5), elapsed, &mut failures);
    Verdict::new(
        failures.is_empty(),
        format!(
            "100 trials, max error {worst:.2e}, {elapsed:.1?} {}",
            failures.join("; ")
        ),
    )
}

fn central_difference(
    params: &ParameterVector,
    spec: &ModelSpec,
    x: &ndarray::Array2<f64>,
    y: &[usize],
) -> Vec<f64> {
    let h = 1e-6;
    (0..params.len())
        .map(|i| {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let lp = loss(&plus, spec, x.view(), y).unwrap();
            let lm = loss(&minus, spec, x.view(), y).unwrap();
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut rng = seed::rng(0x6EAD);
    let mut worst = [0.0f64; 2];
    for trial in 0..20u64 {
        let specs = [
            ModelSpec::softmax_regression(6, 4),
            ModelSpec::mlp(5, vec![7, 4], 3),
        ];
        for (k, spec) in specs.iter().enumerate() {
            let batch = rng.random_range(1..=8);
            let x = ndarray::Array2::from_shape_fn((batch, spec.input_dim), |_| {
                rng.random_range(-2.0..2.0)
            });
            let y: Vec<usize> = (0..batch)
                .map(|_| rng.random_range(0..spec.num_classes))
                .collect();
            let mut params = init_parameters(spec, trial);
            for p in params.as_mut_slice() {
                *p += rng.random_range(-0.5..0.5);
            }
            let analytic = gradient(&params, spec, x.view(), &y).unwrap();
            let numeric = central_difference(&params, spec, &x, &y);
            for (a, n) in analytic.iter().zip(&numeric) {
                worst[k] = worst[k].max((a - n).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let mut failures = Vec::new();
    if worst.iter().any(|&w| w > 1e-5) {
        failures.push("difference above 1e-5".to_string());
    }
    within(Duration::from_secs(10), elapsed, &mut failures);
    Verdict::new(
        failures.is_empty(),
        format!(
            "softmax {:.2e}, mlp {:.2e}, {elapsed:.1?} {}",
            worst[0],
            worst[1],
            failures.join("; ")
        ),
    )
}

fn spread(record: &RoundRecord) -> f64 {
    let max = record
        .per_class_accuracy
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max);
    let min = record
        .per_class_accuracy
        .iter()
        .cloned()
        .fold(f64::MAX, f64::min);
    max - min
}

fn baseline_fairness() -> Verdict {
    let start = Instant::now();
    let runs = grid("");
    let elapsed = start.elapsed();
    let mut failures = Vec::new();
    let (mut min_overall, mut max_gap, mut max_spread) = (f64::MAX, 0.0f64, 0.0f64);
    for (c, s, records) in &runs {
        let last = records.last().unwrap();
        min_overall = min_overall.min(last.overall_accuracy);
        max_gap = max_gap.max(last.fairness_gap.abs());
        max_spread = max_spread.max(spread(last));
        if last.overall_accuracy < 85.0 || last.fairness_gap.abs() >= 10.0 {
            failures.push(format!(
                "{c} clients seed {s}: overall {:.2} gap {:.2}",
                last.overall_accuracy, last.fairness_gap
            ));
        }
    }
    within(Duration::from_secs(300), elapsed, &mut failures);
    Verdict::new(
        failures.is_empty(),
        format!(
            "9 runs, min overall {min_overall:.2}, max |gap| {max_gap:.2}, max class spread {max_spread:.1}, {elapsed:.1?} {}",
            failures.join("; ")
        ),
    )
}

fn full_attack(runs: &[(usize, u64, Vec<RoundRecord>)], elapsed: Duration) -> Verdict {
    let mut failures = Vec::new();
    let (mut min_target, mut max_other) = (f64::MAX, 0.0f64);
    for (c, s, records) in runs {
        let last = records.last().unwrap();
        min_target = min_target.min(last.target_mean);
        max_other = max_other.max(last.other_mean);
        if last.target_mean < 70.0 || last.other_mean > 15.0 {
            failures.push(format!(
                "{c} clients seed {s}: target {:.2} other {:.2}",
                last.target_mean, last.other_mean
            ));
        }
    }
    // the whole grid must fit in the budget of a single setting
    within(Duration::from_secs(300), elapsed, &mut failures);
    Verdict::new(
        failures.is_empty(),
        format!(
            "9 runs, min target {min_target:.2}, max other {max_other:.2}, {elapsed:.1?} {}",
            failures.join("; ")
        ),
    )
}

fn late_start() -> (Verdict, Vec<(usize, u64, Vec<RoundRecord>)>) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cells: Vec<(usize, u64)> = CLIENT_COUNTS
        .iter()
        .flat_map(|&c| SEEDS.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<(usize, u64, Vec<RoundRecord>)> = cells
        .into_par_iter()
        .map(|(c, s)| {
            let mut cfg = scenario(c, s, LATE);
            cfg.output_dir = dir.path().join(format!("c{c}-s{s}"));
            let outcome = run_experiment(&cfg).expect("late-start run");
            (c, s, outcome.records)
        })
        .collect();
    let elapsed = start.elapsed();

    let mut failures = Vec::new();
    let (mut min_drop, mut max_shift) = (f64::MAX, 0.0f64);
    for (c, s, _) in &runs {
        // the regime change must be visible in the written CSV itself
        let rows = read_round_csv(dir.path().join(format!("c{c}-s{s}")).join(ROUNDS_CSV)).unwrap();
        let onset = rows
            .iter()
            .position(|r| r.attack_active)
            .unwrap_or(rows.len());
        if rows.len() != 100 || onset != 20 {
            failures.push(format!(
                "{c} clients seed {s}: onset at {onset} of {}",
                rows.len()
            ));
            continue;
        }
        let pre = &rows[onset - 1];
        let window = &rows[onset..onset + 20];
        let lowest_other = window.iter().map(|r| r.other_mean).fold(f64::MAX, f64::min);
        let drop = pre.other_mean - lowest_other;
        let shift = window
            .iter()
            .map(|r| (r.target_mean - pre.target_mean).abs())
            .fold(0.0, f64::max);
        min_drop = min_drop.min(drop);
        max_shift = max_shift.max(shift);
        if drop < 40.0 || shift > 15.0 {
            failures.push(format!(
                "{c} clients seed {s}: other drop {drop:.2}, target shift {shift:.2}"
            ));
        }
    }
    within(Duration::from_secs(300), elapsed, &mut failures);
    let verdict = Verdict::new(
        failures.is_empty(),
        format!(
            "9 runs, min other drop {min_drop:.2}, max target shift {max_shift:.2}, {elapsed:.1?} {}",
            failures.join("; ")
        ),
    );
    (verdict, runs)
}

fn aggregate_identity(runs: &[&[(usize, u64, Vec<RoundRecord>)]]) -> Verdict {
    let mut attacked = 0usize;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (c, s, records) in runs.iter().flat_map(|r| r.iter()) {
        for record in records.iter().filter(|r| r.attack_active) {
            attacked += 1;
            match record
                .diagnostics
                .as_ref()
                .and_then(|d| d.identity_residual)
            {
                Some(residual) => {
                    worst = worst.max(residual);
                    if residual > 1e-9 {
                        failures.push(format!(
                            "{c} clients seed {s} round {}: {residual:e}",
                            record.round
                        ));
                    }
                }
                None => failures.push(format!(
                    "{c} clients seed {s} round {}: no residual",
                    record.round
                )),
            }
        }
    }
    if attacked == 0 {
        failures.push("no attacked rounds".into());
    }
    failures.truncate(5);
    Verdict::new(
        failures.is_empty(),
        format!(
            "{attacked} attacked rounds, max residual {worst:.2e} {}",
            failures.join("; ")
        ),
    )
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

fn norm_behaviour(runs: &[(usize, u64, Vec<RoundRecord>)]) -> Verdict {
    let mut failures = Vec::new();
    let mut rng = seed::rng(0x4E0B);
    for _ in 0..1000 {
        let x = rng.random_range(0.0..100.0);
        let n0 = rng.random_range(1..=1000);
        let counts: Vec<usize> = (0..rng.random_range(1..=30))
            .map(|_| rng.random_range(1..=1000))
            .collect();
        let total = n0 + counts.iter().sum::<usize>();
        let bound = malicious_norm_bound(x, total, n0, &counts);
        if bound != x {
            failures.push(format!("bound {bound} != x {x}"));
            break;
        }
    }

    // aligned case: target and every honest update are the same vector
    let mut aligned_worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=500);
        let u = random_vector(&mut rng, d);
        let counts: Vec<usize> = (0..rng.random_range(1..=30))
            .map(|_| rng.random_range(1..=500))
            .collect();
        let honest: Vec<ClientUpdate> = counts
            .iter()
            .map(|&n| ClientUpdate::new(u.clone(), n).unwrap())
            .collect();
        let n0 = rng.random_range(1..=500);
        let target = TargetUpdate {
            delta: u.clone(),
            source_round: 0,
        };
        let v = solve_malicious_update(&target, &honest, n0).unwrap();
        aligned_worst = aligned_worst.max((v.delta.norm() - u.norm()).abs());
    }
    if aligned_worst > 1e-9 {
        failures.push(format!("aligned |‖v‖ - x| = {aligned_worst:e}"));
    }

    // reported only
    let mut malicious = Vec::new();
    let mut honest = Vec::new();
    for (_, _, records) in runs {
        for d in records.iter().filter_map(|r| r.diagnostics.as_ref()) {
            malicious.push(d.malicious_norm);
            honest.extend(d.honest_norms.iter().copied());
        }
    }
    let observed = if malicious.is_empty() || honest.is_empty() {
        "no attacked rounds to report".to_string()
    } else {
        format!(
            "median ‖v‖ {:.4} vs median honest {:.4} (reported)",
            median(malicious),
            median(honest)
        )
    };
    Verdict::new(
        failures.is_empty(),
        format!(
            "bound exact over 1000 draws, aligned max |‖v‖ - x| {aligned_worst:.2e}, {observed} {}",
            failures.join("; ")
        ),
    )
}

fn defense_interaction(undefended: &[(usize, u64, Vec<RoundRecord>)]) -> Verdict {
    let start = Instant::now();
    let clipped: Vec<(u64, f64)> = SEEDS
        .par_iter()
        .map(|&s| {
            let records = simulate(&scenario(10, s, CLIPPED), |_| Ok(())).expect("clipped run");
            (s, records.last().unwrap().fairness_gap)
        })
        .collect();
    let elapsed = start.elapsed();
    let mut failures = Vec::new();
    let mut pairs = Vec::new();
    for (s, with_clip) in clipped {
        let without = undefended
            .iter()
            .find(|(c, seed, _)| *c == 10 && *seed == s)
            .map(|(_, _, r)| r.last().unwrap().fairness_gap)
            .expect("undefended pair");
        pairs.push(format!("seed {s}: {without:.2} -> {with_clip:.2}"));
        if with_clip.abs() >= without.abs() {
            failures.push(format!("seed {s} not reduced"));
        }
    }
    within(Duration::from_secs(600), elapsed, &mut failures);
    Verdict::new(
        failures.is_empty(),
        format!(
            "10 clients, gap {}, {elapsed:.1?} {}",
            pairs.join(", "),
            failures.join("; ")
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        ("baseline", scenario(10, 7, "")),
        ("late", scenario(10, 7, LATE)),
        (
            "flagged",
            scenario(
                3,
                7,
                "[attack]\nstart_round = 5\n[defense]\nkind = \"flag_outliers\"\n",
            ),
        ),
    ];
    let mut failures = Vec::new();
    for (name, cfg) in configs {
        let mut bytes = Vec::new();
        for attempt in 0..2 {
            let mut cfg = cfg.clone();
            cfg.output_dir = dir.path().join(format!("{name}-{attempt}"));
            let outcome = run_experiment(&cfg).expect("determinism run");
            bytes.push(fs::read(outcome.rounds_csv).unwrap());
        }
        if bytes[0] != bytes[1] {
            failures.push(format!("{name} differs"));
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!("3 configs run twice each {}", failures.join("; ")),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Verdict::new(false, format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut verdicts: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |n: u32, name: &'static str, v: Verdict| {
        println!(
            "criterion {n} [{}] {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail.trim_end()
        );
        verdicts.push((n, name, v));
    };

    record(1, "exact recovery", guarded(exact_recovery));
    record(2, "gradient check", guarded(gradient_check));
    record(3, "baseline fairness", guarded(baseline_fairness));

    let start = Instant::now();
    let full = catch_unwind(|| grid(FULL)).unwrap_or_default();
    let full_elapsed = start.elapsed();
    record(
        4,
        "full attack",
        guarded(|| full_attack(&full, full_elapsed)),
    );

    let mut late = Vec::new();
    record(
        5,
        "late start",
        guarded(|| {
            let (verdict, runs) = late_start();
            late = runs;
            verdict
        }),
    );
    record(
        6,
        "aggregate-error identity",
        guarded(|| aggregate_identity(&[&full, &late])),
    );
    record(7, "norm bound", guarded(|| norm_behaviour(&full)));
    record(
        8,
        "defense interaction",
        guarded(|| defense_interaction(&full)),
    );
    record(9, "determinism", guarded(determinism));

    let failed = verdicts.iter().filter(|(_, _, v)| !v.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        verdicts.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
