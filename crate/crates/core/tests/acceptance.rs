//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test -p pucl-core --test acceptance -- <substring>` runs only the
//! criteria whose name contains the substring. Set `PUCL_ACCEPTANCE_STRICT=1`
//! to exit nonzero when any criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use pucl_core::config::SnapshotMode;
use pucl_core::constraint::{constraint_loss, train_constraint, ConstraintModel, ConstraintTrainConfig, LossWeighting};
use pucl_core::envs::{reward_circle, reward_obstacle, Bounds, EnvSpec, PointAction, PointState};
use pucl_core::experiment::{metrics_path, train_run, train_run_with};
use pucl_core::io::load_metrics;
use pucl_core::nn::{Activation, Matrix, MlpParams};
use pucl_core::pipeline::{
    boundary_probe, filter_threshold, forgetting_scenario, generate_expert, iou_from_masks, linspace, metric_violation,
    DemoSet, RunConfig,
};
use pucl_core::policy::{ppo_loss, sample_action, PolicyModel, PpoBatch, PpoConfig, OBS_DIM};
use pucl_core::synthetic::ScarDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EXPERT_SEED: u64 = 1000;

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

/// Largest relative error between analytic and central-difference derivatives.
fn max_rel_error(analytic: &[f64], eval: impl Fn(usize, f64) -> f64, h: f64, floor: f64) -> f64 {
    analytic
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let fd = (eval(i, h) - eval(i, -h)) / (2.0 * h);
            (fd - a).abs() / fd.abs().max(a.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

fn mlp_gradient_error() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, sizes, out) in [
        (1u64, vec![2, 16, 1], Activation::Sigmoid),
        (2, vec![4, 16, 16, 2], Activation::Tanh),
        (3, vec![3, 8, 8, 1], Activation::Identity),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Activation::LeakyRelu { slope: 0.01 };
        let p = MlpParams::new(&sizes, hidden, out, &mut rng).unwrap();
        let n = 6;
        let x = Matrix::from_vec(n, sizes[0], (0..n * sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let targets: Vec<f64> = (0..n * sizes[sizes.len() - 1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        // loss = Σ target·output / n
        let loss = |q: &MlpParams| -> f64 {
            let o = q.predict(&x).unwrap();
            o.data().iter().zip(&targets).map(|(a, b)| a * b).sum::<f64>() / n as f64
        };
        let (out_m, cache) = p.forward(&x).unwrap();
        let grad_out = Matrix::from_vec(out_m.rows(), out_m.cols(), targets.iter().map(|t| t / n as f64).collect()).unwrap();
        let (g, _) = p.backward(&cache, &grad_out).unwrap();
        let base = p.flat();
        let err = max_rel_error(
            &g.flat(),
            |i, d| {
                let mut q = p.clone();
                let mut v = base.clone();
                v[i] += d;
                q.set_flat(&v).unwrap();
                loss(&q)
            },
            1e-5,
            1e-6,
        );
        worst = worst.max(err);
    }
    worst
}

fn ppo_gradient_error() -> f64 {
    let cfg = PpoConfig::point_circle();
    let mut worst: f64 = 0.0;
    for seed in [21u64, 22, 23] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyModel::new(&cfg, &mut rng).unwrap();
        p.log_std = vec![-0.7, -1.1];
        let n = 5;
        let mut obs = Vec::new();
        let mut raw = Vec::new();
        let mut old = Vec::new();
        for _ in 0..n {
            let s = PointState::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-3.0..3.0));
            obs.extend_from_slice(&p.observe(&s));
            let a = sample_action(&p, &s, &mut rng);
            raw.push(a.raw);
            old.push(a.log_prob + rng.random_range(-0.4..0.4));
        }
        let batch = PpoBatch {
            observations: Matrix::from_vec(n, OBS_DIM, obs).unwrap(),
            raw_actions: raw,
            old_log_probs: old,
            advantages: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            returns: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
        };
        let loss = ppo_loss(&p, &batch, &cfg).unwrap();
        let total = |q: &PolicyModel| ppo_loss(q, &batch, &cfg).unwrap().total;
        let h = 1e-6;
        let actor = p.actor.flat();
        worst = worst.max(max_rel_error(
            &loss.actor_grads.flat(),
            |i, d| {
                let mut q = p.clone();
                let mut v = actor.clone();
                v[i] += d;
                q.actor.set_flat(&v).unwrap();
                total(&q)
            },
            h,
            1e-5,
        ));
        worst = worst.max(max_rel_error(
            &loss.log_std_grads,
            |i, d| {
                let mut q = p.clone();
                q.log_std[i] += d;
                total(&q)
            },
            h,
            1e-5,
        ));
        let value = p.value_net.flat();
        worst = worst.max(max_rel_error(
            &loss.value_grads.flat(),
            |i, d| {
                let mut q = p.clone();
                let mut v = value.clone();
                v[i] += d;
                q.value_net.set_flat(&v).unwrap();
                total(&q)
            },
            h,
            1e-5,
        ));
    }
    worst
}

fn constraint_gradient_error() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, cfg) in [
        (31u64, ConstraintTrainConfig::point_circle()),
        (32, ConstraintTrainConfig::point_obstacle()),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ConstraintModel::network(&cfg, &mut rng).unwrap();
        // Probes stay off the output clamp, where the loss is not differentiable.
        let mut pts = |n: usize| -> Vec<PointState> {
            (0..n)
                .map(|_| PointState::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0))
                .collect()
        };
        let (d, u, s) = (pts(7), pts(11), pts(13));
        let zetas = m.zeta_batch(&[d.clone(), u.clone()].concat());
        assert!(zetas.iter().all(|z| (1e-5..1.0 - 1e-5).contains(z)), "probe state on the clamp");
        let (_, grads) = constraint_loss(&m, &d, &u, &s, cfg.reg_weight, cfg.weighting).unwrap();
        let base = m.net().unwrap().flat();
        worst = worst.max(max_rel_error(
            &grads.flat(),
            |i, delta| {
                let mut q = m.clone();
                let mut v = base.clone();
                v[i] += delta;
                q.net_mut().unwrap().set_flat(&v).unwrap();
                constraint_loss(&q, &d, &u, &s, cfg.reg_weight, cfg.weighting).unwrap().0
            },
            1e-6,
            1e-6,
        ));
    }
    worst
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let mlp = mlp_gradient_error();
    let ppo = ppo_gradient_error();
    let cons = constraint_gradient_error();
    let secs = t.elapsed().as_secs_f64();
    Verdict::new(
        mlp < 1e-4 && ppo < 1e-3 && cons < 1e-3 && secs < 60.0,
        format!("max rel err mlp {mlp:.2e} (< 1e-4), ppo {ppo:.2e} (< 1e-3), constraint {cons:.2e} (< 1e-3), {secs:.1}s"),
    )
}

fn rewards() -> Verdict {
    let spec = EnvSpec::point_obstacle();
    let a = PointAction { speed: 0.25, omega: 0.3 };
    let cases = [
        ("circle (0,10,0)", reward_circle(&PointState::new(0.0, 10.0, 0.0), &a, 10.0), 0.25),
        (
            "circle (10,0,pi/2)",
            reward_circle(&PointState::new(10.0, 0.0, std::f64::consts::FRAC_PI_2), &a, 10.0),
            -0.25,
        ),
        (
            "circle speed 0",
            reward_circle(&PointState::new(3.0, -4.0, 1.0), &PointAction { speed: 0.0, omega: 0.1 }, 10.0),
            0.0,
        ),
        ("obstacle (0,10)", reward_obstacle(&PointState::new(0.0, 10.0, 0.0), &spec), 0.1),
        ("obstacle (0,-8)", reward_obstacle(&PointState::new(0.0, -8.0, 0.0), &spec), -0.9),
    ];
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let detail = cases.iter().map(|(n, got, _)| format!("{n} = {got}")).collect::<Vec<_>>().join(", ");
    Verdict::new(worst <= 1e-9, format!("max abs err {worst:.1e}; {detail}"))
}

fn synthetic_data(seed: u64) -> ScarDataset {
    ScarDataset::generate(
        20_000,
        0.4,
        Bounds { x_min: -4.0, x_max: 6.0, y_min: -3.0, y_max: 5.0 },
        Bounds::square(12.0),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn probe_grid(bounds: &Bounds, n: usize) -> Vec<PointState> {
    let xs = linspace(bounds.x_min, bounds.x_max, n);
    let ys = linspace(bounds.y_min, bounds.y_max, n);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| PointState::new(x, y, 0.0)))
        .collect()
}

fn synthetic_config(weighting: LossWeighting) -> ConstraintTrainConfig {
    ConstraintTrainConfig {
        hidden_layers: vec![16, 16],
        learning_rate: 0.01,
        backward_iterations: 600,
        reg_weight: 0.0,
        input_scale: 1.0 / 12.0,
        weighting,
        ..ConstraintTrainConfig::point_circle()
    }
}

fn synthetic_recovery() -> Verdict {
    let t = Instant::now();
    let data = synthetic_data(41);
    let cfg = synthetic_config(LossWeighting::PerSet);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut model = ConstraintModel::network(&cfg, &mut rng).unwrap();
    train_constraint(&mut model, &data.labeled, &data.unlabeled, &cfg, &mut rng).unwrap();
    let grid = probe_grid(&data.bounds, 100);
    let predicted: Vec<bool> = grid.iter().map(|s| model.classify(s).is_infeasible()).collect();
    let truth: Vec<bool> = grid.iter().map(|s| data.region.contains(s.x, s.y)).collect();
    let iou = iou_from_masks(&predicted, &truth);
    let secs = t.elapsed().as_secs_f64();
    Verdict::new(
        iou >= 0.9 && secs < 60.0,
        format!("IoU {iou:.4} (>= 0.9) on 100x100 grid, d = {}, {secs:.1}s", model.decision_threshold),
    )
}

fn pu_identity() -> Verdict {
    let data = synthetic_data(43);
    let cfg = synthetic_config(LossWeighting::PerSample);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut model = ConstraintModel::network(&cfg, &mut rng).unwrap();
    train_constraint(&mut model, &data.labeled, &data.unlabeled, &cfg, &mut rng).unwrap();
    let grid = probe_grid(&data.bounds, 100);
    let zetas = model.zeta_batch(&grid);
    let mae = grid
        .iter()
        .zip(&zetas)
        .map(|(s, z)| (z - data.label_probability(s.x, s.y)).abs())
        .sum::<f64>()
        / grid.len() as f64;
    Verdict::new(mae <= 0.1, format!("mean |zeta - f Pr(c=1|s)| = {mae:.4} (<= 0.1) over 100x100 grid"))
}

fn expert(cfg: &RunConfig, name: &str) -> DemoSet {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(EXPERT_SEED);
    let (demos, policy) = generate_expert(cfg, &mut rng).unwrap();
    let mut eval = ChaCha8Rng::seed_from_u64(EXPERT_SEED + 1);
    let viol = metric_violation(&policy, &cfg.env, 20, &mut eval);
    println!(
        "info  {name} expert: r_D {:.3}, sigma_D {:.3}, per-step violation of the expert policy {viol:.4}, {:.0}s",
        demos.return_mean(),
        demos.return_std(),
        t.elapsed().as_secs_f64()
    );
    demos
}

struct SeedResult {
    iou: f64,
    violation: f64,
    x_hat: Option<f64>,
    filter_breaches: usize,
    filtered_total: usize,
}

/// Trains one seed through the artifact-writing driver and audits the filter on the way.
fn run_seed(cfg: &RunConfig, demos: &DemoSet, seed: u64, dir: &Path) -> SeedResult {
    let threshold = filter_threshold(demos, cfg.alpha);
    let mut breaches = 0;
    let mut total = 0;
    let outcome = train_run_with(cfg, demos, seed, dir, SnapshotMode::FinalOnly, |view| {
        total += view.filtered.len();
        breaches += view.filtered.iter().filter(|t| t.total_return() < threshold).count();
        Ok(())
    })
    .unwrap();
    let last = outcome.reports.last().unwrap();
    SeedResult {
        iou: last.iou,
        violation: last.violation_rate,
        x_hat: boundary_probe(&outcome.constraint, &cfg.env, 0.0, 0.0, 1201),
        filter_breaches: breaches,
        filtered_total: total,
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct Suite {
    filter: Option<String>,
    results: Vec<(String, bool)>,
}

impl Suite {
    fn wants(&self, name: &str) -> bool {
        self.filter.as_deref().is_none_or(|f| name.contains(f))
    }

    fn record(&mut self, name: &str, v: Verdict) {
        println!("{}  {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        self.results.push((name.to_string(), v.pass));
    }

    fn check(&mut self, name: &str, f: impl FnOnce() -> Verdict) {
        if self.wants(name) {
            let v = f();
            self.record(name, v);
        }
    }
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut suite = Suite {
        filter,
        results: Vec::new(),
    };
    suite.check("gradient suite", gradient_suite);
    suite.check("reward values", rewards);
    suite.check("synthetic PU recovery", synthetic_recovery);
    suite.check("PU identity", pu_identity);

    let circle_names = ["point-circle end-to-end", "filter soundness", "determinism"];
    if circle_names.iter().any(|n| suite.wants(n)) {
        let cfg = RunConfig::point_circle();
        let demos = expert(&cfg, "point-circle");
        let tmp = TempDir::new().unwrap();
        let mut per_seed = Vec::new();
        for seed in SEEDS {
            let t = Instant::now();
            let r = run_seed(&cfg, &demos, seed, &tmp.path().join(format!("seed_{seed}")));
            println!(
                "info  point-circle seed {seed}: IoU {:.4}, violation {:.4}, x_hat {:?}, {:.0}s",
                r.iou,
                r.violation,
                r.x_hat,
                t.elapsed().as_secs_f64()
            );
            per_seed.push(r);
        }
        // A missing crossing means the boundary lies beyond the probe's end.
        let x_max = cfg.env.bounds.x_max;
        let iou = mean(per_seed.iter().map(|r| r.iou));
        let viol = mean(per_seed.iter().map(|r| r.violation));
        let x_hat = mean(per_seed.iter().map(|r| r.x_hat.unwrap_or(x_max)));
        suite.check("point-circle end-to-end", || {
            Verdict::new(
                iou >= 0.5 && (x_hat - 6.0).abs() <= 1.0 && viol <= 0.05,
                format!(
                    "5-seed mean IoU {iou:.4} (>= 0.5), x_hat {x_hat:.3} (|x_hat - 6| <= 1), per-step violation {viol:.4} (<= 0.05)"
                ),
            )
        });
        suite.check("filter soundness", || {
            let breaches: usize = per_seed.iter().map(|r| r.filter_breaches).sum();
            let total: usize = per_seed.iter().map(|r| r.filtered_total).sum();
            Verdict::new(
                breaches == 0,
                format!("{breaches} of {total} filtered trajectories below r_D - alpha sigma_D (alpha = {})", cfg.alpha),
            )
        });
        suite.check("determinism", || {
            let first = tmp.path().join("seed_0");
            let second = tmp.path().join("rerun");
            train_run(&cfg, &demos, 0, &second, SnapshotMode::FinalOnly).unwrap();
            let a = fs::read(metrics_path(&first)).unwrap();
            let b = fs::read(metrics_path(&second)).unwrap();
            let rows = load_metrics(&metrics_path(&first)).unwrap().len();
            Verdict::new(a == b, format!("seed 0 rerun metrics files identical: {} ({rows} rows)", a == b))
        });
    }

    if suite.wants("CMR ablation") {
        let cfg = RunConfig::point_obstacle();
        let demos = expert(&cfg, "point-obstacle");
        let no_cmr = RunConfig {
            cmr_enabled: false,
            ..cfg.clone()
        };
        let tmp = TempDir::new().unwrap();
        let mut with = Vec::new();
        let mut without = Vec::new();
        for seed in SEEDS {
            let t = Instant::now();
            let a = run_seed(&cfg, &demos, seed, &tmp.path().join(format!("cmr_{seed}")));
            let b = run_seed(&no_cmr, &demos, seed, &tmp.path().join(format!("nocmr_{seed}")));
            println!(
                "info  point-obstacle seed {seed}: IoU with CMR {:.4}, without {:.4}, {:.0}s",
                a.iou,
                b.iou,
                t.elapsed().as_secs_f64()
            );
            with.push(a.iou);
            without.push(b.iou);
        }
        let (m_with, m_without) = (mean(with), mean(without));
        let forgetting = forgetting_scenario(true, 10, 0);
        suite.check("CMR ablation", || {
            Verdict::new(
                m_with >= m_without && forgetting.still_infeasible == forgetting.region_size,
                format!(
                    "5-seed mean IoU with CMR {m_with:.4} >= without {m_without:.4}; forgetting scenario keeps {}/{} buffered states infeasible after 10 updates",
                    forgetting.still_infeasible, forgetting.region_size
                ),
            )
        });
    }

    let failed: Vec<&str> = suite.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        suite.results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() && std::env::var("PUCL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
