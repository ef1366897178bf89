//! Runs the ten acceptance criteria and prints one PASS/FAIL line for each.
//! Exits non-zero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use c3de::causal::{CausalEstimator, PerturbationKind, PerturbationStrategy, SurrogateConfig, SurrogatePredictor};
use c3de::cdesolve::{integrate, GradientMode, Method, SolverConfig};
use c3de::data::{ha_baseline, synth_generate, window, Split, SynthConfig};
use c3de::dynamics::{Correction, EncoderConfig};
use c3de::eval::{horizon_report, metrics, HorizonMode, Metrics};
use c3de::model::{forward_loss, C3de, huber_loss, ModelConfig, Pooling, PreparedWindow};
use c3de::numcore::{AdamConfig, ParamStore, Tensor};
use c3de::spline::fit_natural_cubic;
use c3de::train::{causal_report, init_model, run_experiment, test_report, ExperimentConfig, PreparedData, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: f64, b: f64, guard: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(guard)
}

// ---------------------------------------------------------------- tiny model

fn tiny_config() -> ModelConfig {
    let solver = SolverConfig::rk4(0.25);
    ModelConfig {
        encoder: EncoderConfig {
            n: 3,
            c: 1,
            k: 2,
            hidden: 4,
            t: 3,
            m: 3,
            l: 2,
            flow_solver: solver.clone(),
            poi_solver: solver,
            causal: true,
            rescale_weights: false,
        },
        s: 2,
        delta: 1.0,
        pooling: Pooling::Mean,
    }
}

struct Tiny {
    cfg: ModelConfig,
    params: ParamStore,
    windows: Vec<PreparedWindow>,
    estimator: CausalEstimator,
}

fn tiny() -> Tiny {
    let raw = synth_generate(&SynthConfig {
        n: 3,
        c: 1,
        k: 2,
        days: 150,
        planted_category: 1,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = PreparedData::new(raw).unwrap();
    let cfg = tiny_config();
    let model = init_model(&cfg, 5).unwrap();
    let mut windows = data.prepared(&cfg, Split::Train).unwrap();
    windows.truncate(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = SurrogatePredictor::new(&data.raw.adjacency, 2, 4, 6, &mut rng).unwrap();
    s.freeze();
    let estimator = CausalEstimator::new(s, PerturbationStrategy::zero()).unwrap();
    Tiny {
        cfg,
        params: model.params,
        windows,
        estimator,
    }
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let t = tiny();
    let batch: Vec<&PreparedWindow> = t.windows.iter().collect();
    let run = |p: &ParamStore, c: Correction<'_>| {
        forward_loss(p, &batch, c, &t.cfg, GradientMode::BackpropThroughSolver, None).unwrap()
    };
    let base = run(&t.params, Correction::Estimator(&t.estimator));
    // The correction is a stop-gradient quantity; replaying it holds it fixed
    // under the finite-difference perturbations.
    let schedule = base.state.causal_schedule.clone();
    let replay = run(&t.params, Correction::Fixed(&schedule));
    if replay.loss != base.loss {
        return outcome(false, format!("replayed loss {} != {}", replay.loss, base.loss));
    }
    // Fourth-order central stencil; the two-point stencil at 1e-5 is limited
    // by round-off on entries near 1e-8.
    let eps = 1e-3;
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for (pi, name) in t.params.names().iter().enumerate() {
        let len = t.params.get(name).unwrap().len();
        for i in 0..len {
            let at = |d: f64| {
                let mut p = t.params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += d;
                run(&p, Correction::Fixed(&schedule)).loss
            };
            let fd = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
            let g = base.grads[pi].data()[i];
            let r = rel_err(g, fd, 1e-8);
            if r > worst.0 {
                worst = (r, format!("{name}[{i}] analytic {g:.3e} vs fd {fd:.3e}"));
            }
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && secs < 60.0,
        format!("{count} gradients, max rel err {:.2e} ({}) in {secs:.1}s", worst.0, worst.1),
    )
}

fn criterion_adjoint() -> Outcome {
    let start = Instant::now();
    let t = tiny();
    let batch: Vec<&PreparedWindow> = t.windows.iter().collect();
    let run = |mode| forward_loss(&t.params, &batch, Correction::Estimator(&t.estimator), &t.cfg, mode, None).unwrap();
    let bp = run(GradientMode::BackpropThroughSolver);
    let adj = run(GradientMode::Adjoint);
    // Per parameter tensor: |adjoint - backprop| / |backprop| in the 2-norm.
    let mut worst = (0.0f64, String::new());
    let mut elementwise = 0.0f64;
    for (name, (a, b)) in t.params.names().iter().zip(adj.grads.iter().zip(&bp.grads)) {
        let diff = a.zip_with(b, |x, y| x - y).unwrap();
        let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = norm(&diff) / norm(b).max(1e-300);
        if r > worst.0 {
            worst = (r, name.clone());
        }
        for (x, y) in a.data().iter().zip(b.data()) {
            elementwise = elementwise.max(rel_err(*x, *y, 1e-8));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-3 && secs < 60.0,
        format!(
            "max per-tensor rel err {:.2e} ({}), element-wise max {elementwise:.2e}, in {secs:.2}s",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- solvers

fn slope(steps: &[f64], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = steps.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

fn growth_error(cfg: &SolverConfig) -> (f64, usize) {
    let tr = integrate(|h: &Tensor, _| Ok(h.clone()), &Tensor::scalar(1.0), (0.0, 1.0), &[], cfg).unwrap();
    ((tr.last().data()[0] - std::f64::consts::E).abs(), tr.nfe)
}

fn criterion_solvers() -> Outcome {
    let start = Instant::now();
    let order = |method: Method, steps: &[f64]| {
        let errs: Vec<f64> = steps
            .iter()
            .map(|&s| {
                let cfg = SolverConfig {
                    method,
                    step_size: s,
                    ..SolverConfig::default()
                };
                growth_error(&cfg).0
            })
            .collect();
        slope(steps, &errs)
    };
    let euler = order(Method::Euler, &[1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0, 1.0 / 512.0, 1.0 / 1024.0]);
    let rk4 = order(Method::Rk4, &[1.0 / 4.0, 1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0]);
    let (tight_err, tight_nfe) = growth_error(&SolverConfig::adaptive(1e-6, 1e-12));
    let (_, loose_nfe) = growth_error(&SolverConfig::adaptive(1e-3, 1e-12));
    let adaptive_rel = tight_err / std::f64::consts::E;
    let secs = start.elapsed().as_secs_f64();
    let pass = (0.9..=1.1).contains(&euler)
        && (3.8..=4.2).contains(&rk4)
        && adaptive_rel <= 1e-6
        && tight_nfe > loose_nfe
        && secs < 5.0;
    outcome(
        pass,
        format!(
            "Euler order {euler:.3}, RK4 order {rk4:.3}, adaptive rel err {adaptive_rel:.2e} (nfe {tight_nfe} vs {loose_nfe} at rtol 1e-3) in {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------- spline

fn criterion_spline() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut times = vec![0.0];
    for _ in 0..12 {
        let last = *times.last().unwrap();
        times.push(last + rng.random_range(0.2..1.5));
    }
    let channels = 3;
    let obs: Vec<f64> = (0..times.len() * channels).map(|_| rng.random_range(-5.0..5.0)).collect();
    let path = fit_natural_cubic(&times, &obs, channels).unwrap();

    let mut knot = 0.0f64;
    for (i, &t) in times.iter().enumerate() {
        for (c, v) in path.eval(t).unwrap().iter().enumerate() {
            knot = knot.max(rel_err(*v, obs[i * channels + c], 1e-300));
        }
    }
    let ends = [times[0], *times.last().unwrap()];
    let boundary = ends
        .iter()
        .flat_map(|&t| path.second_derivative(t).unwrap())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    // One-sided limits at interior knots from the per-interval polynomials.
    let mut c2 = 0.0f64;
    for i in 1..times.len() - 1 {
        let w = times[i] - times[i - 1];
        for c in 0..channels {
            let [a, b, cc, d] = path.coefficients(i - 1, c);
            let left = [
                a + b * w + cc * w * w + d * w * w * w,
                b + 2.0 * cc * w + 3.0 * d * w * w,
                2.0 * cc + 6.0 * d * w,
            ];
            let [ra, rb, rc, _] = path.coefficients(i, c);
            let right = [ra, rb, 2.0 * rc];
            for (l, r) in left.iter().zip(&right) {
                c2 = c2.max((l - r).abs());
            }
        }
    }
    let cubic = |t: f64| 1.0 + 2.0 * t - 3.0 * t * t + 0.5 * t * t * t;
    let ct: Vec<f64> = (0..9).map(|i| i as f64 * 0.5).collect();
    let cv: Vec<f64> = ct.iter().map(|&t| cubic(t)).collect();
    let cp = fit_natural_cubic(&ct, &cv, 1).unwrap();
    let reproduction = (0..=400)
        .map(|j| {
            let t = 4.0 * j as f64 / 400.0;
            (cp.eval(t).unwrap()[0] - cubic(t)).abs()
        })
        .fold(0.0f64, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = knot <= 1e-12 && boundary <= 1e-9 && c2 <= 1e-9 && reproduction <= 1e-9 && secs < 5.0;
    outcome(
        pass,
        format!(
            "knot rel err {knot:.1e}, end curvature {boundary:.1e}, C2 jump {c2:.1e}, cubic reproduction err {reproduction:.2e} in {secs:.3}s"
        ),
    )
}

// ---------------------------------------------------------------- synthetic experiments

const SEEDS: [u64; 3] = [0, 1, 2];
const HIDDEN: usize = 16;
const EPOCHS: usize = 12;
const LR: f64 = 3e-3;
const BATCH: usize = 16;

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    NoCa,
    Strategy(PerturbationKind),
}

struct Run {
    mae: f64,
    /// Share of nodes ranking the planted category first, against the encoder the surrogate was fit on.
    planted_share: Option<f64>,
    /// The same share after main-model training.
    trained_share: Option<f64>,
    elapsed: Duration,
}

fn experiment(data: &PreparedData, variant: Variant, seed: u64) -> Run {
    let start = Instant::now();
    let solver = SolverConfig::rk4(0.125);
    let (causal, kind) = match variant {
        Variant::NoCa => (false, PerturbationKind::Zero),
        Variant::Strategy(k) => (true, k),
    };
    let cfg = ExperimentConfig {
        model: ModelConfig {
            encoder: EncoderConfig {
                n: data.raw.n(),
                c: data.raw.c(),
                k: data.raw.k(),
                hidden: HIDDEN,
                t: 14,
                m: 4,
                l: 8,
                flow_solver: solver.clone(),
                poi_solver: solver,
                causal,
                rescale_weights: false,
            },
            s: 14,
            delta: 1.0,
            pooling: Pooling::Mean,
        },
        train: TrainConfig {
            epochs: EPOCHS,
            patience: 10,
            batch: BATCH,
            // coupled L2 at the default 5e-4 pins this small model to the mean predictor
            adam: AdamConfig {
                lr: LR,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            gradient_mode: GradientMode::BackpropThroughSolver,
            seed,
        },
        surrogate: SurrogateConfig::default(),
        strategy: PerturbationStrategy {
            kind,
            random_scale: 1.0,
            seed: c3de::seed::derive(seed, "perturbation"),
        },
    };
    let exp = run_experiment(data, &cfg, seed, None).unwrap();
    let report = test_report(&exp.model, exp.estimator.as_ref(), data, Split::Test, 64, "", HorizonMode::Step).unwrap();
    let share = |model: &C3de| {
        exp.estimator
            .as_ref()
            .map(|e| causal_report(model, e, data, Split::Test, 64).unwrap().top_share(1))
    };
    let initial = init_model(&cfg.model, seed).unwrap();
    let planted_share = share(&initial);
    let trained_share = share(&exp.model);
    Run {
        mae: report.average.mae,
        planted_share,
        trained_share,
        elapsed: start.elapsed(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Synthetic {
    noca: Vec<Run>,
    zero: Vec<Run>,
    random: Vec<Run>,
    mean: Vec<Run>,
}

fn synthetic_runs() -> Synthetic {
    let mut s = Synthetic {
        noca: vec![],
        zero: vec![],
        random: vec![],
        mean: vec![],
    };
    for seed in SEEDS {
        let raw = synth_generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!((raw.n(), raw.k(), raw.days()), (20, 4, 720));
        let data = PreparedData::new(raw).unwrap();
        s.noca.push(experiment(&data, Variant::NoCa, seed));
        s.zero.push(experiment(&data, Variant::Strategy(PerturbationKind::Zero), seed));
        s.random.push(experiment(&data, Variant::Strategy(PerturbationKind::Random), seed));
        s.mean.push(experiment(&data, Variant::Strategy(PerturbationKind::Mean), seed));
    }
    s
}

fn total(runs: &[&[Run]]) -> f64 {
    runs.iter().flat_map(|r| r.iter()).map(|r| r.elapsed.as_secs_f64()).sum()
}

fn maes(runs: &[Run]) -> Vec<f64> {
    runs.iter().map(|r| r.mae).collect()
}

fn criterion_recovery(s: &Synthetic) -> Outcome {
    let shares: Vec<f64> = s.zero.iter().map(|r| r.planted_share.unwrap()).collect();
    let m = median(shares.clone());
    let trained: Vec<f64> = s.zero.iter().map(|r| r.trained_share.unwrap()).collect();
    let secs = total(&[&s.zero]);
    outcome(
        m >= 0.9 && secs < 600.0,
        format!(
            "planted category ranked first for {shares:?} of nodes, median {m:.2} in {secs:.0}s \
             (after main training: {trained:?})"
        ),
    )
}

fn criterion_ablation(s: &Synthetic) -> Outcome {
    let full = median(maes(&s.zero));
    let noca = median(maes(&s.noca));
    let gain = 1.0 - full / noca;
    let secs = total(&[&s.zero, &s.noca]);
    outcome(
        gain >= 0.05 && secs < 1800.0,
        format!("median test MAE {full:.4} vs w/o CA {noca:.4} ({:.2}% lower) in {secs:.0}s", 100.0 * gain),
    )
}

fn criterion_strategies(s: &Synthetic) -> Outcome {
    let noca = median(maes(&s.noca));
    let zero = median(maes(&s.zero));
    let random = median(maes(&s.random));
    let mean = median(maes(&s.mean));
    let secs = total(&[&s.zero, &s.noca, &s.random, &s.mean]);
    outcome(
        zero <= noca && random <= noca && mean <= noca && secs < 2700.0,
        format!("median test MAE zero {zero:.4}, random {random:.4}, mean {mean:.4}, w/o CA {noca:.4} in {secs:.0}s"),
    )
}

// ---------------------------------------------------------------- units

fn criterion_units() -> Outcome {
    let h = |r: f64| huber_loss(&Tensor::scalar(0.0), &Tensor::scalar(r), 1.0).unwrap();
    let hand = [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)];
    let huber_ok = hand.iter().all(|&(r, want)| (h(r) - want).abs() <= 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ordered = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let a = Tensor::from_fn(&[1, n, 1], |_| scale * rng.random_range(-1.0..1.0));
        let f = Tensor::from_fn(&[1, n, 1], |_| scale * rng.random_range(-1.0..1.0));
        let m = metrics(&a, &f, &[1]).unwrap();
        if m.mae <= m.rmse * (1.0 + 1e-12) {
            ordered += 1;
        }
    }
    let masked = metrics(
        &Tensor::new(&[1, 3, 1], vec![0.0, 2.0, 5e-4]).unwrap(),
        &Tensor::new(&[1, 3, 1], vec![7.0, 3.0, 1.0]).unwrap(),
        &[1],
    )
    .unwrap();
    let all_masked = metrics(&Tensor::zeros(&[1, 2, 1]), &Tensor::ones(&[1, 2, 1]), &[1]).unwrap();
    let mask_ok = masked.mape == Some(50.0)
        && masked.mape_masked == 2
        && all_masked.mape.is_none()
        && all_masked.mape_masked == 2;
    outcome(
        huber_ok && ordered == 1000 && mask_ok,
        format!(
            "Huber {:?}, MAE<=RMSE on {ordered}/1000, masking {}",
            hand.map(|(r, _)| h(r)),
            if mask_ok { "ok" } else { "wrong" }
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_c3de"))
        .args(args)
        .output()
        .expect("spawn c3de");
    assert!(
        out.status.success(),
        "c3de {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_and_evaluate(root: &Path, data: &str, tag: &str) -> Vec<u8> {
    let run = root.join(format!("run{tag}"));
    let eval = root.join(format!("eval{tag}"));
    let (run, eval) = (run.to_str().unwrap(), eval.to_str().unwrap());
    cli(&[
        "--seed", "9", "--out", run, "--log-level", "warn", "train", "--data", data, "--hidden", "6", "-T", "7", "-M", "2",
        "-S", "7", "-L", "4", "--solver", "rk4", "--step", "0.5", "--epochs", "2", "--batch", "16",
        "--surrogate-epochs", "2", "--strategy", "random",
    ]);
    cli(&["--out", eval, "--log-level", "warn", "evaluate", "--data", data, "--checkpoint", run]);
    std::fs::read(Path::new(eval).join("report.json")).unwrap()
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    cli(&[
        "--out",
        data_dir.to_str().unwrap(),
        "--log-level",
        "warn",
        "synth",
        "--nodes",
        "5",
        "--days",
        "240",
    ]);
    let manifest = data_dir.join("manifest.json");
    let manifest = manifest.to_str().unwrap();
    let a = train_and_evaluate(dir.path(), manifest, "a");
    let b = train_and_evaluate(dir.path(), manifest, "b");
    outcome(a == b, format!("report.json {} bytes, identical: {}", a.len(), a == b))
}

// ---------------------------------------------------------------- HA

fn criterion_ha() -> Outcome {
    let raw = synth_generate(&SynthConfig {
        noise_std: 0.0,
        walk_std: 0.0,
        weekly_amplitude: 1.5,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap();
    let periodic = (7..raw.days()).all(|d| {
        let per = raw.n() * raw.c();
        raw.flow.data()[d * per..(d + 1) * per] == raw.flow.data()[(d - 7) * per..(d - 6) * per]
    });
    let windows = window(&raw, 14, 4, 14, Split::Test).unwrap();
    let forecasts = ha_baseline(&raw, Split::Test, &windows).unwrap();
    let actual: Vec<Tensor> = windows.into_iter().map(|w| w.target).collect();
    let r = horizon_report(&actual, &forecasts, "HA", &raw.name, HorizonMode::Step).unwrap();
    let v = |m: &Metrics| (m.mae, m.rmse, m.mape);
    let same = r.horizons.len() == 2
        && v(&r.horizons[0].metrics) == v(&r.horizons[1].metrics)
        && v(&r.horizons[0].metrics) == v(&r.average);
    let mae = r.average.mae;
    outcome(
        periodic && mae == 0.0 && same,
        format!(
            "weekly-periodic truth: {periodic}, MAE H7 {} / H14 {} / avg {mae}, rows identical: {same}",
            r.horizons[0].metrics.mae,
            r.horizons.get(1).map_or(f64::NAN, |h| h.metrics.mae)
        ),
    )
}

fn main() {
    // `cargo test --test verify_acceptance -- 2 4` runs a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |i: usize| only.is_empty() || only.contains(&i);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let fast: [(usize, &str, fn() -> Outcome); 7] = [
        (1, "gradient integrity", criterion_gradients),
        (2, "solver orders", criterion_solvers),
        (3, "adjoint equivalence", criterion_adjoint),
        (4, "spline correctness", criterion_spline),
        (8, "loss and metric units", criterion_units),
        (9, "determinism", criterion_determinism),
        (10, "HA baseline", criterion_ha),
    ];
    for (i, name, f) in fast {
        if wanted(i) {
            results.push((i, name, f()));
        }
    }
    if [5, 6, 7].into_iter().any(wanted) {
        let synthetic = synthetic_runs();
        let slow: [(usize, &str, fn(&Synthetic) -> Outcome); 3] = [
            (5, "causal recovery", criterion_recovery),
            (6, "ablation direction", criterion_ablation),
            (7, "strategy sanity", criterion_strategies),
        ];
        for (i, name, f) in slow {
            if wanted(i) {
                results.push((i, name, f(&synthetic)));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    println!();
    for (i, name, o) in &results {
        println!("criterion {i:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
