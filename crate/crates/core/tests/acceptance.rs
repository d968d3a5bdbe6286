//! Acceptance suite. Run with `cargo test --test acceptance`; prints one
//! PASS/FAIL line per criterion and exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use priorboost::adaptive::Algorithm;
use priorboost::bagging::{brute_force_kmeans, solve_constrained_kmeans, sort_order};
use priorboost::data::{generate_dataset, DataGenConfig, Task};
use priorboost::experiment::{cells, run_cells, run_experiment, CellOutcome, ExperimentSpec};
use priorboost::glm::{event_level_gradient, event_level_loss, GlmFamily};
use priorboost::oracle::{laplace_scale, sample_laplace};
use priorboost::risk::{bias_separation_experiment, linear_risk_decomposition};
use priorboost::rng::{substream, Purpose};
use priorboost::{random_bagging, Partition};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    substream(seed, Purpose::Trial, 0)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn objective_from_scratch(values: &[f64], p: &Partition) -> f64 {
    p.bags()
        .iter()
        .map(|b| {
            let m = b.iter().map(|&i| values[i]).sum::<f64>() / b.len() as f64;
            b.iter().map(|&i| (values[i] - m).powi(2)).sum::<f64>()
        })
        .sum()
}

fn dp_matches_brute_force() -> Verdict {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for k in 1..=3usize {
        for n in k..=12usize {
            for _ in 0..200 {
                let values: Vec<f64> = if r.random_bool(0.3) {
                    (0..n).map(|_| r.random_range(0..4) as f64).collect()
                } else {
                    normals(&mut r, n)
                };
                let dp = solve_constrained_kmeans(&values, k).unwrap();
                let bf = brute_force_kmeans(&values, k).unwrap();
                worst = worst.max((dp.objective - bf.objective).abs());
                instances += 1;
            }
        }
    }
    verdict(worst <= 1e-9, format!("{instances} instances, max |dp - brute| = {worst:.2e}"))
}

fn dp_structure() -> Verdict {
    let mut r = rng(12);
    let mut bad = 0;
    for &k in &[2usize, 8, 32] {
        for _ in 0..100 {
            let values = normals(&mut r, 1000);
            let sol = solve_constrained_kmeans(&values, k).unwrap();
            let order = sort_order(&values);
            let mut rank = vec![0; values.len()];
            for (pos, &i) in order.iter().enumerate() {
                rank[i] = pos;
            }
            for bag in sol.original_partition().bags() {
                let mut ranks: Vec<usize> = bag.iter().map(|&i| rank[i]).collect();
                ranks.sort_unstable();
                let contiguous = ranks.windows(2).all(|w| w[1] == w[0] + 1);
                if !contiguous || bag.len() < k || bag.len() >= 2 * k {
                    bad += 1;
                }
            }
            let recomputed = objective_from_scratch(&values, &sol.original_partition());
            if (recomputed - sol.objective).abs() > 1e-9 * recomputed.max(1.0) {
                bad += 1;
            }
        }
    }
    verdict(bad == 0, format!("300 instances, {bad} violations"))
}

/// Least squares on bag means, solved by LU on the normal equations.
fn bagged_ols(x: &DMatrix<f64>, bags: &[Vec<usize>], y: &[f64]) -> DVector<f64> {
    let mut targets = vec![0.0; y.len()];
    for bag in bags {
        let m = bag.iter().map(|&i| y[i]).sum::<f64>() / bag.len() as f64;
        for &i in bag {
            targets[i] = m;
        }
    }
    let g = x.transpose() * x;
    let rhs = x.transpose() * DVector::from_vec(targets);
    g.lu().solve(&rhs).expect("full rank design")
}

fn risk_identity() -> Verdict {
    let fixtures = [
        (100, 2, 2),
        (150, 3, 4),
        (200, 4, 8),
        (250, 5, 3),
        (300, 6, 5),
        (350, 8, 8),
        (400, 8, 4),
        (450, 7, 6),
        (500, 8, 8),
        (500, 4, 2),
    ];
    let sigma = 0.5;
    let draws = 2000;
    let mut worst_z: f64 = 0.0;
    for (f, &(n, d, k)) in fixtures.iter().enumerate() {
        let ds = generate_dataset(&DataGenConfig::new(n, d, 0.0, Task::Linear, 100 + f as u64)).unwrap();
        let theta = ds.truth.clone().unwrap();
        let signal: Vec<f64> = (&ds.features * DVector::from_column_slice(&theta)).iter().copied().collect();
        let partition = if f % 2 == 0 {
            random_bagging(n, k, f as u64).unwrap()
        } else {
            priorboost::bagging::sorted_consecutive_bags(&signal, k).unwrap()
        };
        let analytic = linear_risk_decomposition(&ds.features, &partition, &theta, sigma).unwrap().total;
        let truth = DVector::from_column_slice(&theta);
        let mut r = rng(200 + f as u64);
        let errs: Vec<f64> = (0..draws)
            .map(|_| {
                let y: Vec<f64> = signal.iter().map(|s| { let e: f64 = StandardNormal.sample(&mut r); s + sigma * e }).collect();
                (bagged_ols(&ds.features, partition.bags(), &y) - &truth).norm_squared()
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / draws as f64;
        let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
        let z = (analytic - mean).abs() / (sd / (draws as f64).sqrt());
        worst_z = worst_z.max(z);
    }
    verdict(worst_z <= 3.0, format!("10 fixtures, worst |analytic - MC| = {worst_z:.2} standard errors"))
}

fn finals(spec: &ExperimentSpec) -> BTreeMap<(Algorithm, usize, u64, usize), f64> {
    let cells = cells(spec);
    let outcomes = run_cells(spec, &cells).expect("sweep runs");
    let mut out = BTreeMap::new();
    for (c, o) in cells.iter().zip(outcomes) {
        let loss = match o {
            CellOutcome::Finished(t) => t.final_loss(),
            _ => f64::NAN,
        };
        out.insert((c.algorithm, c.k, c.epsilon.map_or(0, f64::to_bits), c.repeat), loss);
    }
    out
}

fn mean_over(f: &BTreeMap<(Algorithm, usize, u64, usize), f64>, alg: Algorithm, k: usize, eps: u64, repeats: usize) -> f64 {
    (0..repeats).map(|r| f[&(alg, k, eps, r)]).sum::<f64>() / repeats as f64
}

fn fmt_row(label: &str, values: &[f64]) -> String {
    let v: Vec<String> = values.iter().map(|x| format!("{x:.4}")).collect();
    format!("{label} [{}]", v.join(", "))
}

const SWEEP_K: [usize; 4] = [1, 4, 16, 32];

fn scaled_sweep(task: Task, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        name: "acceptance".into(),
        task,
        n: 1 << 17,
        d: 8,
        steps: 64,
        sigma: 0.1,
        k_list: SWEEP_K.to_vec(),
        algorithms: vec![Algorithm::PriorBoost, Algorithm::OneShot, Algorithm::PbPrefix],
        l2_lambda: if task == Task::Logistic { 10.0 } else { 0.0 },
        repeats: 3,
        seed,
        ..ExperimentSpec::default()
    }
}

fn linear_reproduction() -> Verdict {
    let spec = scaled_sweep(Task::Linear, 4);
    let f = finals(&spec);
    let m = |a, k| mean_over(&f, a, k, 0, spec.repeats);
    let base = m(Algorithm::PriorBoost, 1);
    let pb: Vec<f64> = SWEEP_K.iter().map(|&k| m(Algorithm::PriorBoost, k)).collect();
    let os: Vec<f64> = SWEEP_K.iter().map(|&k| m(Algorithm::OneShot, k)).collect();
    let pbp: Vec<f64> = SWEEP_K.iter().map(|&k| m(Algorithm::PbPrefix, k)).collect();
    let pb_ok = pb.iter().all(|&l| l <= 1.5 * base);
    let os_ok = os[3] >= 10.0 * os[0];
    let prefix_ok = (0..spec.repeats).all(|r| f[&(Algorithm::PbPrefix, 32, 0, r)] >= f[&(Algorithm::PriorBoost, 32, 0, r)]);
    verdict(
        pb_ok && os_ok && prefix_ok,
        format!(
            "{}; {}; {}",
            fmt_row("priorboost", &pb),
            fmt_row("oneshot", &os),
            fmt_row("pbprefix", &pbp)
        ),
    )
}

fn logistic_reproduction() -> Verdict {
    let mut spec = scaled_sweep(Task::Logistic, 5);
    spec.algorithms = vec![Algorithm::PriorBoost, Algorithm::OneShot];
    let f = finals(&spec);
    let m = |a, k| mean_over(&f, a, k, 0, spec.repeats);
    let pb: Vec<f64> = SWEEP_K.iter().map(|&k| m(Algorithm::PriorBoost, k)).collect();
    let os: Vec<f64> = SWEEP_K.iter().map(|&k| m(Algorithm::OneShot, k)).collect();
    let pb_ok = pb.iter().all(|&l| (l - pb[0]).abs() <= 0.05);
    let os_ok = os.windows(2).all(|w| w[1] > w[0]);
    verdict(pb_ok && os_ok, format!("{}; {}", fmt_row("priorboost", &pb), fmt_row("oneshot", &os)))
}

fn dp_sweep() -> Verdict {
    let eps = [0.1, 0.3, 1.0, 10.0];
    let ks = [1usize, 4, 16, 64];
    let spec = ExperimentSpec {
        name: "acceptance-dp".into(),
        task: Task::Logistic,
        n: 1 << 16,
        d: 8,
        steps: 16,
        sigma: 0.1,
        k_list: ks.to_vec(),
        epsilon_list: Some(eps.to_vec()),
        algorithms: vec![Algorithm::PriorBoost, Algorithm::OneShot],
        l2_lambda: 10.0,
        repeats: 5,
        seed: 6,
        ..ExperimentSpec::default()
    };
    let f = finals(&spec);
    let m = |a, k, e: f64| mean_over(&f, a, k, e.to_bits(), spec.repeats);
    let mut notes = Vec::new();
    let mut ok = true;
    for &k in &ks {
        let row: Vec<f64> = eps.iter().map(|&e| m(Algorithm::PriorBoost, k, e)).collect();
        if !row.windows(2).all(|w| w[1] <= w[0]) {
            ok = false;
        }
        notes.push(fmt_row(&format!("priorboost k={k} by eps"), &row));
    }
    let (lo, hi) = (m(Algorithm::PriorBoost, 64, 0.3), m(Algorithm::PriorBoost, 1, 0.3));
    ok &= lo < hi;
    for &e in &eps {
        let (a, b) = (m(Algorithm::OneShot, 64, e), m(Algorithm::OneShot, 1, e));
        ok &= a > b;
        notes.push(format!("oneshot eps={e} k=1 {b:.4} k=64 {a:.4}"));
    }
    let identical = eps.iter().all(|&e| {
        (0..spec.repeats).all(|r| {
            f[&(Algorithm::PriorBoost, 1, e.to_bits(), r)].to_bits() == f[&(Algorithm::OneShot, 1, e.to_bits(), r)].to_bits()
        })
    });
    ok &= identical;
    notes.push(format!("k=1 priorboost == oneshot per seed: {identical}"));
    verdict(ok, notes.join("; "))
}

fn bias_separation() -> Verdict {
    let cfg = DataGenConfig::new(1 << 14, 8, 0.0, Task::Linear, 7);
    let r = bias_separation_experiment(&cfg, 4, 20).unwrap();
    let target = (1.0 - 1.0 / 4.0f64).powi(2);
    let in_band = r.random_bias_sq >= 0.8 * target && r.random_bias_sq <= target;
    let separated = r.curated_bias_sq <= 0.05 * r.random_bias_sq;
    verdict(
        in_band && separated,
        format!(
            "random {:.5} (band [{:.4}, {:.4}]), curated {:.3e}",
            r.random_bias_sq,
            0.8 * target,
            target,
            r.curated_bias_sq
        ),
    )
}

fn gradient_check() -> Verdict {
    let mut r = rng(8);
    let (n, d) = (64, 5);
    let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut r));
    let mut worst: f64 = 0.0;
    for family in [GlmFamily::gaussian(), GlmFamily::bernoulli_logit(), GlmFamily::poisson_log()] {
        let targets: Vec<f64> = (0..n)
            .map(|_| match family.kind {
                priorboost::FamilyKind::Gaussian => StandardNormal.sample(&mut r),
                priorboost::FamilyKind::BernoulliLogit => r.random::<f64>(),
                priorboost::FamilyKind::PoissonLog => r.random_range(0..5) as f64,
            })
            .collect();
        for _ in 0..20 {
            let theta = DVector::from_vec(normals(&mut r, d)) * 0.5;
            let lambda = 0.1;
            let g = event_level_gradient(&x, &targets, &family, lambda, &theta);
            let h = 1e-5;
            let fd: Vec<f64> = (0..d)
                .map(|j| {
                    let mut p = theta.clone();
                    let mut m = theta.clone();
                    p[j] += h;
                    m[j] -= h;
                    let lp = event_level_loss(&x, &targets, &family, lambda, &p);
                    let lm = event_level_loss(&x, &targets, &family, lambda, &m);
                    (lp - lm) / (2.0 * h)
                })
                .collect();
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
            worst = worst.max(diff / scale);
        }
    }
    verdict(worst < 1e-5, format!("60 parameter draws, worst relative error {worst:.2e}"))
}

fn laplace_calibration() -> Verdict {
    let scale = laplace_scale(1.0, 1.0, 4);
    let mut r = substream(9, Purpose::DpNoise, 0);
    let mut draws: Vec<f64> = (0..100_000).map(|_| sample_laplace(&mut r, scale)).collect();
    draws.sort_by(f64::total_cmp);
    let cdf = |x: f64| {
        if x < 0.0 {
            0.5 * (x / 0.25).exp()
        } else {
            1.0 - 0.5 * (-x / 0.25).exp()
        }
    };
    let n = draws.len() as f64;
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max);
    verdict(scale == 0.25 && ks < 0.01, format!("scale {scale}, KS statistic {ks:.5}"))
}

fn determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for dir in &dirs {
        let spec = ExperimentSpec {
            name: "twice".into(),
            task: Task::Logistic,
            n: 4096,
            d: 4,
            steps: 8,
            k_list: vec![1, 4, 16],
            epsilon_list: Some(vec![0.5, 2.0]),
            l2_lambda: 10.0,
            repeats: 2,
            seed: 10,
            output_dir: dir.path().to_path_buf(),
            ..ExperimentSpec::default()
        };
        let out = run_experiment(&spec).unwrap();
        files.push((
            std::fs::read(&out.curves_path).unwrap(),
            std::fs::read(&out.final_path).unwrap(),
        ));
    }
    let same = files[0] == files[1];
    verdict(same, format!("curves {} bytes, final {} bytes, identical: {same}", files[0].0.len(), files[0].1.len()))
}

type Criterion = (&'static str, fn() -> Verdict, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 dp matches brute force", dp_matches_brute_force, Duration::from_secs(5)),
        ("2 dp bag structure", dp_structure, Duration::from_secs(60)),
        ("3 analytic risk vs monte carlo", risk_identity, Duration::from_secs(120)),
        ("4 linear scaled reproduction", linear_reproduction, Duration::from_secs(600)),
        ("5 logistic scaled reproduction", logistic_reproduction, Duration::from_secs(900)),
        ("6 label-dp sweep", dp_sweep, Duration::from_secs(1200)),
        ("7 bias separation", bias_separation, Duration::from_secs(120)),
        ("8 gradient check", gradient_check, Duration::from_secs(60)),
        ("9 laplace calibration", laplace_calibration, Duration::from_secs(60)),
        ("10 determinism", determinism, Duration::from_secs(300)),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check, limit) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.split(' ').next() == Some(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= limit;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {name}: {} ({:.1}s, limit {}s) {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            v.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
