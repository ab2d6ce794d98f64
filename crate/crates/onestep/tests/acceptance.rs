//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion, nonzero exit
//! if any fails. Seeds are fixed up front.

use std::process::ExitCode;
use std::time::Instant;

use onestep::cluster::{
    run_protocol, DeliverySchedule, FailurePolicy, ProtocolConfig, Transport,
};
use onestep::data::{generate, read_samples_for, shard_split, write_samples_csv, GeneratorSpec};
use onestep::experiment::{run_experiment, EstimatorKind, ExperimentConfig, ExperimentReport, SizePoint};
use onestep::presets::Preset;
use onestep_core::estimators::{
    average, average_grad_hess, newton_update, one_step_update, sandwich_covariance,
    simple_average, AggregationInput, GradHess, MachineReport,
};
use onestep_core::linalg::{symmetric_eigenvalues, Matrix, Vector};
use onestep_core::model::{
    shard_criterion, BetaModel, Criterion, Gaussian, GaussianMean, Logistic, ModelSpec, Sample,
    Scaled,
};
use onestep_core::solver::{m_estimate, SolveConfig};
use onestep_core::wire::{decode_frame, encode_frame, Message, Payload, ResampleRequest, Round};
use onestep_core::MachineId;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use EstimatorKind::*;

const SEED: u64 = 2017;

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: &'static str, title: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, title, passed, detail }
}

fn rng(label: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SEED ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn rel_close(analytic: f64, numeric: f64, tol: f64) -> bool {
    (analytic - numeric).abs() <= tol * analytic.abs().max(1.0)
}

fn derivative_errors<C: Criterion>(model: &C, sample: &Sample, theta: &[f64]) -> Option<String> {
    let e = model.evaluate(sample, theta).ok()?;
    for j in 0..theta.len() {
        let h = 1e-5 * (1.0 + theta[j].abs());
        let (mut up, mut dn) = (theta.to_vec(), theta.to_vec());
        up[j] += h;
        dn[j] -= h;
        let eu = model.evaluate(sample, &up).ok()?;
        let ed = model.evaluate(sample, &dn).ok()?;
        let fd = (eu.value - ed.value) / (2.0 * h);
        if !rel_close(e.gradient[j], fd, 1e-5) {
            return Some(format!("gradient[{j}] {} vs {fd}", e.gradient[j]));
        }
        for i in 0..theta.len() {
            let fd = (eu.gradient[i] - ed.gradient[i]) / (2.0 * h);
            if !rel_close(e.hessian[(i, j)], fd, 1e-4) {
                return Some(format!("hessian[{i},{j}] {} vs {fd}", e.hessian[(i, j)]));
            }
        }
    }
    None
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut failures = Vec::new();
    for _ in 0..200 {
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let theta: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let s = Sample::labeled(x, if r.random::<bool>() { 1.0 } else { 0.0 });
        failures.extend(derivative_errors(&Logistic { dim: 5 }, &s, &theta).map(|e| format!("logistic: {e}")));

        let s = Sample::scalar(r.random_range(0.02..0.98));
        let theta = [r.random_range(0.3..6.0), r.random_range(0.3..6.0)];
        failures.extend(derivative_errors(&BetaModel, &s, &theta).map(|e| format!("beta: {e}")));

        let s = Sample::scalar(r.random_range(-6.0..6.0));
        let theta = [r.random_range(-3.0..3.0), r.random_range(0.25..9.0)];
        failures.extend(derivative_errors(&Gaussian, &s, &theta).map(|e| format!("gaussian: {e}")));
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = failures.is_empty() && secs < 5.0;
    let detail = match failures.first() {
        Some(f) => format!("{} mismatches, first: {f}", failures.len()),
        None => format!("600 pairs agree, {secs:.2}s"),
    };
    outcome("1", "derivative correctness", passed, detail)
}

fn criterion_2() -> Outcome {
    let model = ModelSpec::Logistic { dim: 2 };
    let (_, samples) = generate(&GeneratorSpec::new(model, 512, SEED)).unwrap();
    let shards = shard_split(&samples, 4, SEED).unwrap();
    let cfg = ProtocolConfig { model, resample: None };
    let out = run_protocol(&cfg, shards, &SolveConfig::default(), &DeliverySchedule::all_delivered(4), Transport::InProcess).unwrap();
    let (t0, t1) = out.estimates().unwrap();

    // monolithic pooled Newton step: plain sums, explicit 2×2 inverse
    let (mut g, mut h) = ([0.0; 2], [[0.0; 2]; 2]);
    for s in &samples {
        let z = s.x[0] * t0[0] + s.x[1] * t0[1];
        let p = 1.0 / (1.0 + (-z).exp());
        let y = s.y.unwrap();
        for i in 0..2 {
            g[i] += (y - p) * s.x[i];
            for j in 0..2 {
                h[i][j] -= p * (1.0 - p) * s.x[i] * s.x[j];
            }
        }
    }
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    let step = [
        (h[1][1] * g[0] - h[0][1] * g[1]) / det,
        (-h[1][0] * g[0] + h[0][0] * g[1]) / det,
    ];
    let oracle = [t0[0] - step[0], t0[1] - step[1]];
    let gap = (0..2).map(|j| (t1[j] - oracle[j]).abs()).fold(0.0, f64::max);
    outcome("2", "one-step equals pooled Newton step", gap <= 1e-12, format!("max gap {gap:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for trial in 0..40 {
        let variance = r.random_range(0.1..10.0);
        let model = ModelSpec::GaussianMean { variance };
        let k = [1, 2, 3, 4, 5, 8, 16][trial % 7];
        let (_, samples) = generate(&GeneratorSpec::new(model, 24 * k, SEED + trial as u64)).unwrap();
        let mean = samples.iter().map(|s| s.x[0]).sum::<f64>() / samples.len() as f64;
        let shards = shard_split(&samples, k, trial as u64).unwrap();
        // through the protocol, starting at θ⁽⁰⁾
        let out = run_protocol(&ProtocolConfig { model, resample: None }, shards.clone(), &SolveConfig::default(), &DeliverySchedule::all_delivered(k), Transport::InProcess).unwrap();
        let scale = 1.0 + mean.abs();
        worst = worst.max((out.theta1.unwrap()[0] - mean).abs() / scale);
        // and from an arbitrary start
        let start = [r.random_range(-100.0..100.0)];
        let parts = shards
            .iter()
            .map(|s| {
                let e = shard_criterion(&model, &s.samples, &start).unwrap();
                GradHess { gradient: e.gradient, hessian: e.hessian }
            })
            .collect();
        let t1 = one_step_update(&start, &AggregationInput::all_delivered(parts).unwrap()).unwrap();
        worst = worst.max((t1[0] - mean).abs() / (scale + start[0].abs()));
    }
    outcome("3", "quadratic exactness", worst <= 1e-12, format!("max relative gap {worst:.2e}"))
}

fn ratio(r: &ExperimentReport, a: EstimatorKind, b: EstimatorKind, n: usize, k: usize) -> f64 {
    r.mse(a, n, k).unwrap_or(f64::NAN) / r.mse(b, n, k).unwrap_or(f64::NAN)
}

fn criterion_4() -> Vec<Outcome> {
    let start = Instant::now();
    let cfg = Preset::Table3.config(SEED);
    let n = 1 << 13;
    let report = run_experiment(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ks: Vec<usize> = (1..=6).map(|p| 1 << p).collect();
    let ratios: Vec<f64> = ks.iter().map(|&k| ratio(&report, OneStep, Centralized, n, k)).collect();
    let worst = ratios.iter().copied().fold(f64::NAN, f64::max);
    let a = outcome(
        "4a",
        "Beta: one_step/centralized <= 1.15 for k <= 64",
        ratios.iter().all(|v| *v <= 1.15),
        format!("max ratio {worst:.4} ({secs:.1}s)"),
    );
    let r256 = ratio(&report, SimpleAvg, OneStep, n, 256);
    let b = outcome("4b", "Beta: simple_avg/one_step >= 10 at k = 256", r256 >= 10.0, format!("ratio {r256:.2}"));
    let mut bad = Vec::new();
    for k in [64, 128, 256] {
        let [lo, mid, hi] = [OneStep, ResampledAvg, SimpleAvg].map(|e| report.mse(e, n, k).unwrap_or(f64::NAN));
        if !(lo <= mid && mid <= hi) {
            bad.push(format!("k={k}: {lo:.3e}/{mid:.3e}/{hi:.3e}"));
        }
    }
    let c = outcome(
        "4c",
        "Beta: resampled_avg between one_step and simple_avg for k >= 64",
        bad.is_empty(),
        if bad.is_empty() { "k = 64, 128, 256 ordered".into() } else { bad.join("; ") },
    );
    let runtime = outcome("4t", "Beta table runtime < 3 min", secs < 180.0, format!("{secs:.1}s"));
    vec![a, b, c, runtime]
}

fn criterion_5() -> Vec<Outcome> {
    let start = Instant::now();
    let mut cfg = Preset::Table5.config(SEED);
    cfg.sizes.retain(|p| p.n <= 1 << 14);
    let report = run_experiment(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for p in 5..=7 {
        let (n, k) = (1usize << (2 * p), 1usize << p);
        let v = ratio(&report, OneStep, Centralized, n, k);
        worst = worst.max((v - 1.0).abs());
        detail.push(format!("N=4^{p}: {v:.4}"));
    }
    let a = outcome(
        "5a",
        "Gaussian: one_step within 10% of centralized for N >= 4^5",
        worst <= 0.10,
        format!("{} ({secs:.1}s)", detail.join(", ")),
    );
    let v = ratio(&report, SimpleAvg, OneStep, 1 << 14, 1 << 7);
    let b = outcome("5b", "Gaussian: simple_avg/one_step >= 1.8 at N = 4^7", v >= 1.8, format!("ratio {v:.3}"));
    let runtime = outcome("5t", "Gaussian table runtime < 2 min", secs < 120.0, format!("{secs:.1}s"));
    vec![a, b, runtime]
}

fn criterion_6() -> Vec<Outcome> {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        name: "beta-failures".into(),
        model: ModelSpec::Beta,
        sizes: vec![SizePoint { n: 51_200, ks: vec![8, 16, 32, 64, 128] }],
        repeats: 50,
        estimators: vec![SimpleAvg, OneStep, Centralized, CentralizedPartial],
        failure_rate: 0.05,
        per_round_failures: false,
        resample_ratio: 0.1,
        seed: SEED,
        transport: Transport::InProcess,
        solve: SolveConfig::default(),
    };
    let report = run_experiment(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let v = ratio(&report, OneStep, CentralizedPartial, 51_200, 128);
    let a = outcome(
        "6a",
        "failures: one_step within 25% of centralized_partial at k = 128",
        (v - 1.0).abs() <= 0.25,
        format!("ratio {v:.4} ({secs:.1}s)"),
    );
    let rate = report.delivery.machine_failure_rate();
    let b = outcome(
        "6b",
        "failures: machine failure rate within 0.01 of 0.05",
        (rate - 0.05).abs() <= 0.01,
        format!("{} of {} dropped ({rate:.4})", report.delivery.round1_drops, report.delivery.round1_slots),
    );
    let runtime = outcome("6t", "failure table runtime < 3 min", secs < 180.0, format!("{secs:.1}s"));
    vec![a, b, runtime]
}

fn criterion_7() -> Outcome {
    let model = ModelSpec::Beta;
    let (_, samples) = generate(&GeneratorSpec::new(model, 1024, SEED)).unwrap();
    let shards = shard_split(&samples, 8, SEED).unwrap();
    let schedule = FailurePolicy::new(0.1, SEED).schedule(8);
    let cfg = ProtocolConfig { model, resample: Some(ResampleRequest { ratio: 0.1, seed: SEED }) };
    let a = run_protocol(&cfg, shards.clone(), &SolveConfig::default(), &schedule, Transport::InProcess).unwrap();
    let b = run_protocol(&cfg, shards, &SolveConfig::default(), &schedule, Transport::localhost_tcp()).unwrap();
    let bits = |v: &Result<Vector, _>| v.as_ref().map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).ok();
    let same = bits(&a.theta0) == bits(&b.theta0)
        && bits(&a.theta1) == bits(&b.theta1)
        && a.theta0.is_ok()
        && a.mask_round1 == b.mask_round1
        && a.mask_round2 == b.mask_round2;
    let mask: String = a.mask_round1.iter().map(|d| if *d { '1' } else { '0' }).collect();
    outcome("7", "TCP and in-process transports agree bitwise", same, format!("mask {mask}"))
}

fn random_vector(r: &mut ChaCha8Rng, d: usize) -> Vector {
    Vector::new(
        (0..d)
            .map(|_| match r.random_range(0..4) {
                0 => r.random_range(-1.0..1.0),
                1 => f64::from_bits(r.random::<u64>() & !(0x7FF << 52) | (r.random_range(1u64..2046) << 52)),
                2 => r.random_range(-1e-300..1e-300),
                _ => r.random::<f64>() * 1e12,
            })
            .collect(),
    )
}

fn random_message(r: &mut ChaCha8Rng) -> Message {
    let d = r.random_range(1..6);
    let payload = match r.random_range(0..9) {
        0 => Payload::Register,
        1 => Payload::AssignShard {
            model: [ModelSpec::Beta, ModelSpec::Gaussian, ModelSpec::Logistic { dim: d }, ModelSpec::GaussianMean { variance: r.random_range(0.01..100.0) }][r.random_range(0..4)],
        },
        2 => Payload::RequestLocalEstimate {
            resample: r.random::<bool>().then(|| ResampleRequest { ratio: r.random_range(0.001..0.999), seed: r.random() }),
        },
        3 => Payload::LocalEstimate {
            theta: random_vector(r, d),
            theta_sub: r.random::<bool>().then(|| random_vector(r, d)),
        },
        4 => Payload::BroadcastTheta0 { theta: random_vector(r, d) },
        5 => Payload::RequestGradHess,
        6 => {
            let mut h = Matrix::from_row_major(d, random_vector(r, d * d).into_inner()).unwrap();
            h.symmetrize_from_upper();
            Payload::GradHess { gradient: random_vector(r, d), hessian: h }
        }
        7 => Payload::Failure {
            reason: (0..r.random_range(0..40)).map(|_| char::from_u32(r.random_range(1..0x2FF)).unwrap_or('?')).collect(),
        },
        _ => Payload::Done,
    };
    let round = if r.random::<bool>() { Round::One } else { Round::Two };
    Message::new(MachineId(r.random()), round, payload)
}

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    let mut bad_messages = 0;
    for _ in 0..10_000 {
        let m = random_message(&mut r);
        let frame = encode_frame(&m).unwrap();
        match decode_frame(&frame) {
            Ok((back, used)) if back == m && used == frame.len() && format!("{back:?}") == format!("{m:?}") => {}
            _ => bad_messages += 1,
        }
    }
    let mut nan = Message::new(MachineId(1), Round::One, Payload::BroadcastTheta0 { theta: Vector::new(vec![f64::NAN]) });
    let nan_refused = encode_frame(&nan).is_err();
    nan.payload = Payload::BroadcastTheta0 { theta: Vector::new(vec![f64::INFINITY]) };
    let inf_refused = encode_frame(&nan).is_err();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let model = ModelSpec::Logistic { dim: 3 };
    let rows: Vec<Sample> = (0..1000)
        .map(|_| Sample::labeled(random_vector(&mut r, 3).into_inner(), if r.random::<bool>() { 1.0 } else { 0.0 }))
        .collect();
    write_samples_csv(&path, &rows, Some(&model)).unwrap();
    let back = read_samples_for(&path, &model).unwrap();
    let bits = |s: &[Sample]| s.iter().map(|s| (s.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), s.y.map(f64::to_bits))).collect::<Vec<_>>();
    let csv_ok = bits(&back) == bits(&rows);
    outcome(
        "8",
        "message and CSV round trips",
        bad_messages == 0 && nan_refused && inf_refused && csv_ok,
        format!("{bad_messages} of 10000 messages differ; NaN refused: {nan_refused}; inf refused: {inf_refused}; 1000 CSV rows exact: {csv_ok}"),
    )
}

fn criterion_9() -> Outcome {
    let mut r = rng(9);
    let mut problems = Vec::new();

    // permutation invariance of simple averaging, with failures
    for _ in 0..200 {
        let k = r.random_range(1..16);
        let mut reports: Vec<MachineReport<Vector>> = (1..=k)
            .map(|i| {
                if i > 1 && r.random::<f64>() < 0.2 {
                    MachineReport::failed(MachineId(i))
                } else {
                    MachineReport::delivered(MachineId(i), random_vector(&mut r, 3))
                }
            })
            .collect();
        let a = simple_average(&AggregationInput::new(reports.clone()).unwrap()).unwrap();
        reports.shuffle(&mut r);
        let b = simple_average(&AggregationInput::new(reports).unwrap()).unwrap();
        if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            problems.push("permutation changed simple_average".to_string());
            break;
        }
    }

    // one-step invariance to rescaling the criterion
    let model = Logistic { dim: 3 };
    let (_, samples) = generate(&GeneratorSpec::new(ModelSpec::Logistic { dim: 3 }, 800, SEED)).unwrap();
    let shards = shard_split(&samples, 8, SEED).unwrap();
    let start = [0.2, -0.3, 0.5];
    let step = |c: f64| {
        let parts = shards
            .iter()
            .map(|s| {
                let e = shard_criterion(&Scaled { inner: model, factor: c }, &s.samples, &start).unwrap();
                GradHess { gradient: e.gradient, hessian: e.hessian }
            })
            .collect();
        one_step_update(&start, &AggregationInput::all_delivered(parts).unwrap()).unwrap()
    };
    let base = step(1.0);
    let mut drift: f64 = 0.0;
    for c in [1e-3, 0.37, 2.0, 55.0, 1e4] {
        drift = drift.max(step(c).iter().zip(base.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    if drift > 1e-10 {
        problems.push(format!("rescaling drift {drift:.2e}"));
    }

    // all-delivered failure forms equal the plain forms bitwise
    let thetas: Vec<Vector> = (0..7).map(|_| random_vector(&mut r, 2)).collect();
    let failure_form = simple_average(&AggregationInput::new(
        thetas.iter().enumerate().map(|(i, t)| MachineReport::delivered(MachineId(i as u32 + 1), t.clone())).collect(),
    ).unwrap()).unwrap();
    let plain = average(&thetas.iter().collect::<Vec<_>>()).unwrap();
    if failure_form != plain {
        problems.push("simple_average with full mask differs from plain average".into());
    }
    let parts: Vec<GradHess> = shards
        .iter()
        .map(|s| {
            let e = shard_criterion(&model, &s.samples, &start).unwrap();
            GradHess { gradient: e.gradient, hessian: e.hessian }
        })
        .collect();
    let masked = one_step_update(&start, &AggregationInput::new(
        parts.iter().enumerate().map(|(i, p)| MachineReport::delivered(MachineId(i as u32 + 1), p.clone())).collect(),
    ).unwrap()).unwrap();
    let plain = newton_update(&start, &average_grad_hess(&parts.iter().collect::<Vec<_>>()).unwrap()).unwrap();
    if masked != plain {
        problems.push("one_step_update with full mask differs from plain Newton update".into());
    }

    // zero aggregated gradient is a fixed point
    let fixed = [0.7, -1.3];
    let zero_grad: Vec<GradHess> = (0..5)
        .map(|_| {
            let a = r.random_range(0.5..3.0);
            let b = r.random_range(-0.2..0.2);
            GradHess {
                gradient: Vector::zeros(2),
                hessian: Matrix::from_rows(&[&[-a, b], &[b, -a]]).unwrap(),
            }
        })
        .collect();
    let t = one_step_update(&fixed, &AggregationInput::all_delivered(zero_grad).unwrap()).unwrap();
    if t.as_slice() != fixed {
        problems.push(format!("zero gradient moved the start to {:?}", t.as_slice()));
    }

    outcome(
        "9",
        "invariance suite",
        problems.is_empty(),
        if problems.is_empty() { format!("rescaling drift {drift:.1e}") } else { problems.join("; ") },
    )
}

fn is_psd(m: &Matrix) -> bool {
    let eig = symmetric_eigenvalues(m).unwrap();
    eig[0] >= -1e-12 * m.trace().abs().max(1e-300)
}

fn criterion_10() -> Outcome {
    let variance = 2.5;
    let model = GaussianMean { variance };
    let spec = GeneratorSpec::new(ModelSpec::GaussianMean { variance }, 100_000, SEED);
    let (_, samples) = generate(&spec).unwrap();
    let fit = m_estimate(&model, &samples, &[0.0], &SolveConfig::default()).unwrap();
    let sw = sandwich_covariance(&model, &samples, &fit.theta_hat).unwrap();
    let sigma = sw.sigma[(0, 0)];
    let rel = (sigma / variance - 1.0).abs();

    // PSD for fits of every model
    let mut psd = is_psd(&sw.sigma);
    for model in [ModelSpec::Beta, ModelSpec::Gaussian, ModelSpec::Logistic { dim: 4 }] {
        let (_, s) = generate(&GeneratorSpec::new(model, 5000, SEED)).unwrap();
        let init = model.initial_estimate(&s);
        let fit = m_estimate(&model, &s, &init, &SolveConfig::default()).unwrap();
        psd &= is_psd(&sandwich_covariance(&model, &s, &fit.theta_hat).unwrap().sigma);
    }
    outcome(
        "10",
        "sandwich covariance sanity",
        rel <= 0.05 && psd,
        format!("sigma {sigma:.5} vs {variance} (rel {rel:.4}); all PSD: {psd}"),
    )
}

fn main() -> ExitCode {
    let mut all = vec![criterion_1(), criterion_2(), criterion_3()];
    all.extend(criterion_4());
    all.extend(criterion_5());
    all.extend(criterion_6());
    all.extend([criterion_7(), criterion_8(), criterion_9(), criterion_10()]);
    for o in &all {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:<3} {} :: {}", o.id, o.title, o.detail);
    }
    let failed = all.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", all.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
