//! Acceptance suite: each criterion prints one PASS/FAIL line. Runs without the
//! libtest harness so the lines always reach the console; the process exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safeplan_core::diffusion::{
    clean_estimate, ddpm_sample, reestimate_noise, DenoiseSchedule, Denoiser, DiffusionError, HookError, Sample,
};
use safeplan_core::geometry::{distance_gradient, segment_distance};
use safeplan_core::safety::{safe_speed, speed_objective, BarrierEval};
use safeplan_core::sim::{cycle_seed, generate_battery, run_battery, summarize, SlackProfile, World};
use safeplan_core::{
    run_scenario, BarrierParams, EgoState, Planner, PlannerConfig, PlannerMode, SceneContext, Segment, SimSummary,
    Trajectory, VehicleShape,
};

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_segment(rng: &mut ChaCha8Rng) -> Segment {
    let mut c = || rng.random_range(-10.0..10.0);
    Segment::from_coords(c(), c(), c(), c())
}

fn grid_distance(a: &Segment, b: &Segment, n: usize) -> f64 {
    let (d1, d2) = (a.q - a.p, b.q - b.p);
    let w = a.p - b.p;
    let h = 1.0 / (n - 1) as f64;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let base = w + d1 * (i as f64 * h);
        for j in 0..n {
            best = best.min((base - d2 * (j as f64 * h)).norm_squared());
        }
    }
    best.sqrt()
}

fn geometry_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(101);
    let n = 2001;
    let h = 1.0 / (n - 1) as f64;
    let mut worst = 0.0f64;
    for i in 0..500 {
        let (a, b) = (random_segment(&mut rng), random_segment(&mut rng));
        let exact = segment_distance(&a, &b).distance;
        let grid = grid_distance(&a, &b, n);
        let bound = h * (a.length() + b.length());
        if exact > grid + 1e-12 || grid - exact > bound {
            return Err(format!("pair {i}: exact {exact} grid {grid} bound {bound}"));
        }
        worst = worst.max((grid - exact) / bound.max(f64::MIN_POSITIVE));
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, format!("500 pairs, worst gap {worst:.3} of bound, {secs:.1} s"))
}

fn gradient_check() -> Outcome {
    let mut rng = rng(102);
    let shape = VehicleShape::default();
    let step = 1e-5;
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 200 {
        let ego = EgoState::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-3.1..3.1),
            0.0,
            0.0,
        );
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let range = rng.random_range(7.0..20.0);
        let other = shape.capsule(range * angle.cos(), range * angle.sin(), rng.random_range(-3.1..3.1));
        let Ok(grad) = distance_gradient(&ego, &shape, &other) else {
            continue;
        };
        let dist = |s: &EgoState| segment_distance(&shape.axis(s.x, s.y, s.theta), &other.axis).distance;
        let fd = |bump: fn(&mut EgoState, f64)| {
            let (mut plus, mut minus) = (ego, ego);
            bump(&mut plus, step);
            bump(&mut minus, -step);
            (dist(&plus) - dist(&minus)) / (2.0 * step)
        };
        let numeric = [fd(|s, e| s.x += e), fd(|s, e| s.y += e), fd(|s, e| s.theta += e)];
        let analytic = [grad.x, grad.y, grad.theta];
        let norm = analytic.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0);
        for (a, n) in analytic.iter().zip(numeric) {
            worst = worst.max((a - n).abs() / norm);
        }
        checked += 1;
    }
    check(worst <= 1e-4, format!("200 configurations, worst relative error {worst:.2e}"))
}

fn qp_optimality() -> Outcome {
    let mut rng = rng(103);
    let params = BarrierParams::default();
    let step = 1e-4;
    let n = (params.v_max / step).round() as usize;
    let (mut worst, mut slack_violations) = (f64::NEG_INFINITY, 0);
    for _ in 0..1000 {
        let v_nom = rng.random_range(0.0..params.v_max + 5.0);
        let count = rng.random_range(1..=5);
        let evals: Vec<BarrierEval> = (0..count)
            .map(|j| BarrierEval {
                agent: j,
                h: rng.random_range(-2.0..10.0),
                dh_dv: rng.random_range(-2.0..2.0),
                fallback: None,
            })
            .collect();
        let sol = safe_speed(v_nom, &evals, &params);
        let f = speed_objective(sol.v, v_nom, &evals, &params);
        let best =
            (0..=n).map(|i| speed_objective(i as f64 * step, v_nom, &evals, &params)).fold(f64::INFINITY, f64::min);
        worst = worst.max(f - best);
        if evals.iter().all(|e| e.h >= 0.0) && sol.slack.iter().any(|&s| s != 0.0) {
            slack_violations += 1;
        }
    }
    check(
        worst <= 1e-6 && slack_violations == 0,
        format!("1000 sets, max excess over line search {worst:.2e}, slack with all h >= 0: {slack_violations}"),
    )
}

const MODES: [PlannerMode; 4] =
    [PlannerMode::Full, PlannerMode::PostHocOnly, PlannerMode::ArcReparam, PlannerMode::Unfiltered];

/// The five-situation battery, 30 seeds each, under every mode.
fn full_battery() -> Vec<SimSummary> {
    let scenarios = generate_battery("all", 30).expect("battery");
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    run_battery(&scenarios, &MODES, &PlannerConfig::default(), jobs).expect("battery run")
}

fn of_mode(runs: &[SimSummary], mode: PlannerMode) -> Vec<SimSummary> {
    runs.iter().filter(|s| s.mode == mode).cloned().collect()
}

fn forward_invariance(runs: &[SimSummary]) -> Outcome {
    let full = of_mode(runs, PlannerMode::Full);
    let clean: Vec<&SimSummary> = full.iter().filter(|s| !s.final_step_slack).collect();
    let collisions = clean.iter().filter(|s| s.collided).count();
    let min_h = clean.iter().filter_map(|s| s.min_h_critical).fold(f64::INFINITY, f64::min);
    check(
        full.len() >= 150 && collisions == 0 && min_h >= -0.05,
        format!(
            "{} full runs, {} without final slack: collisions {collisions}, min critical h {min_h:.3}",
            full.len(),
            clean.len()
        ),
    )
}

fn rate(runs: &[&SimSummary]) -> f64 {
    runs.iter().filter(|s| s.collided).count() as f64 / runs.len().max(1) as f64
}

fn mean_composite(runs: &[&SimSummary]) -> f64 {
    runs.iter().map(|s| s.composite).sum::<f64>() / runs.len().max(1) as f64
}

fn conflict_battery(runs: &[SimSummary]) -> Outcome {
    let pick = |mode: PlannerMode| -> Vec<&SimSummary> {
        runs.iter()
            .filter(|s| s.mode == mode && (s.scenario.starts_with("headon-") || s.scenario.starts_with("crossing-")))
            .collect()
    };
    let (full, raw) = (pick(PlannerMode::Full), pick(PlannerMode::Unfiltered));
    let (rf, ru) = (rate(&full), rate(&raw));
    let (cf, cu) = (mean_composite(&full), mean_composite(&raw));
    check(
        full.len() == 60 && ru >= 0.9 && rf <= 0.1 && cf > cu,
        format!(
            "head-on + crossing: collisions unfiltered {ru:.3} full {rf:.3}; composite unfiltered {cu:.3} full {cf:.3}"
        ),
    )
}

fn ablation(runs: &[SimSummary]) -> Outcome {
    let rows = summarize(runs, &MODES);
    let r: Vec<f64> = rows.iter().map(|row| row.collision_rate).collect();
    check(
        r[0] <= r[1] && r[2] < r[3],
        format!(
            "collision % full {:.2} post_hoc_only {:.2} arc_reparam {:.2} unfiltered {:.2}",
            r[0], r[1], r[2], r[3]
        ),
    )
}

fn slack_profile(runs: &[SimSummary]) -> Outcome {
    let full = of_mode(runs, PlannerMode::Full);
    let post = of_mode(runs, PlannerMode::PostHocOnly);
    let profile = SlackProfile::from_runs(PlannerMode::Full, &full, Some(&post));
    let (first, last) = (profile.rates[0], *profile.rates.last().unwrap());
    let post_hoc = profile.post_hoc_rate.unwrap();
    check(
        last <= first && post_hoc >= last,
        format!("full first step {first:.4}, final step {last:.4}; post_hoc_only {post_hoc:.4}"),
    )
}

/// Noise that maps a fixed target into the current iterate.
struct Oracle {
    target: Sample,
}

impl Denoiser for Oracle {
    fn predict_noise(&self, tau_t: &[[f64; 4]], t: usize, sched: &DenoiseSchedule) -> Result<Sample, DiffusionError> {
        reestimate_noise(tau_t, &self.target, t, sched)
    }
}

fn uniform_sample(rng: &mut ChaCha8Rng, rows: usize) -> Sample {
    (0..rows).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect()
}

fn max_abs_diff(a: &[[f64; 4]], b: &[[f64; 4]]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn diffusion_algebra() -> Outcome {
    let mut rng = rng(108);
    let sched = DenoiseSchedule::cosine(20, false);
    let mut inversion = 0.0f64;
    for t in 1..=20 {
        let (c, eps) = (uniform_sample(&mut rng, 40), uniform_sample(&mut rng, 40));
        let abar = sched.alpha_bar(t);
        let tau: Sample = c
            .iter()
            .zip(&eps)
            .map(|(x, e)| std::array::from_fn(|i| abar.sqrt() * x[i] + (1.0 - abar).sqrt() * e[i]))
            .collect();
        inversion = inversion.max(max_abs_diff(&clean_estimate(&tau, &eps, t, &sched).unwrap(), &c));
    }

    let target = uniform_sample(&mut rng, 80);
    let oracle = Oracle { target: target.clone() };
    let mut identity = |_t: usize, est: &[[f64; 4]]| -> Result<Option<Sample>, HookError> { Ok(Some(est.to_vec())) };
    let plain = ddpm_sample(&oracle, 80, 7, &sched, None).unwrap();
    let hooked = ddpm_sample(&oracle, 80, 7, &sched, Some(&mut identity)).unwrap();
    let recovery = max_abs_diff(&plain, &target);
    check(
        inversion <= 1e-10 && plain == hooked && recovery <= 1e-6,
        format!(
            "inversion error {inversion:.1e}, identity hook bit-exact {}, oracle recovery error {recovery:.1e}",
            plain == hooked
        ),
    )
}

/// Replays every planning cycle of a closed-loop run and re-rolls each
/// emitted control sequence through the vehicle model.
fn replay_cycles(scenario: &safeplan_core::Scenario, config: &PlannerConfig) -> Result<usize, String> {
    let result = run_scenario(scenario, config).map_err(|e| e.to_string())?;
    let planner = Planner::new(config.clone()).map_err(|e| e.to_string())?;
    let mut world = World::from_scenario(scenario, config.ego_shape, *planner.model());
    for (step, trace) in result.traces.iter().enumerate() {
        if world.ego != trace.ego {
            return Err(format!("{} step {step}: replayed world diverged from the run", scenario.name));
        }
        let context = SceneContext {
            ego0: world.ego,
            route: scenario.route.clone(),
            neighbors: world.predictions(config.horizon, config.dt),
            rng_seed: cycle_seed(scenario.seed, step),
            horizon: config.horizon,
            dt: config.dt,
            target_speed: scenario.target_speed,
        };
        let (control, record) = planner.replan_cycle(&context).map_err(|e| e.to_string())?;
        let states = planner.model().rollout(&world.ego, &record.controls, config.dt);
        if Trajectory::from_states(&states, config.dt) != record.final_plan {
            return Err(format!(
                "{} {} step {step}: emitted plan differs from its re-rolled controls",
                scenario.name, config.mode
            ));
        }
        world.step(&control, config.dt);
    }
    Ok(result.traces.len())
}

fn feasibility_round_trip() -> Outcome {
    let scenarios = generate_battery("all", 3).expect("battery");
    let mut cycles = 0;
    for mode in [PlannerMode::Full, PlannerMode::PostHocOnly] {
        let config = PlannerConfig { mode, ..PlannerConfig::default() };
        for scenario in &scenarios {
            cycles += replay_cycles(scenario, &config)?;
        }
    }
    Ok(format!("{cycles} emitted plans across {} runs re-rolled bit-identically", 2 * scenarios.len()))
}

fn safeplan(out: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_safeplan"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&output.stderr)));
    }
    Ok(output.stdout)
}

/// Output files in name order with their contents.
fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let scenario = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/merge.toml");
    let scenario = scenario.to_str().unwrap();
    let invocations: [&[&str]; 3] = [
        &["run", "--scenario", scenario, "--seed", "9", "--set", "barrier.d_safe=0.4"],
        &["battery", "--name", "crossing", "--seeds", "2", "--jobs", "2"],
        &["slack-profile", "--name", "headon", "--seeds", "2"],
    ];
    for args in invocations {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (out_a, out_b) = (safeplan(a.path(), args)?, safeplan(b.path(), args)?);
        let (files_a, files_b) = (read_dir(a.path()), read_dir(b.path()));
        if out_a != out_b || files_a != files_b || files_a.is_empty() {
            return Err(format!("{} differs between identical invocations", args[0]));
        }
    }
    Ok("run, battery and slack-profile outputs byte-identical across repeats".into())
}

fn main() {
    let runs = full_battery();
    let criteria: [(&str, Check); 10] = [
        ("geometry oracle equivalence", Box::new(geometry_oracle)),
        ("distance gradient correctness", Box::new(gradient_check)),
        ("velocity QP optimality", Box::new(qp_optimality)),
        ("forward invariance", Box::new(|| forward_invariance(&runs))),
        ("conflict battery collision reduction", Box::new(|| conflict_battery(&runs))),
        ("ablation directions", Box::new(|| ablation(&runs))),
        ("slack activation profile", Box::new(|| slack_profile(&runs))),
        ("diffusion algebra", Box::new(diffusion_algebra)),
        ("dynamic feasibility round trip", Box::new(feasibility_round_trip)),
        ("CLI determinism", Box::new(determinism)),
    ];
    let mut failures = 0;
    for (i, (name, criterion)) in criteria.iter().enumerate() {
        match criterion() {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
