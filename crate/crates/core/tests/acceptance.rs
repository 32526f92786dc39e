//! Acceptance criteria 1–9.
//!
//! One `#[test]` runs every criterion in order, writes a `PASS`/`FAIL` line
//! for each straight to stdout (so the lines survive output capture), then
//! fails if any criterion failed. Criteria 6–8 train the full pipeline from
//! the configs in `configs/` and take well over an hour on one core; set
//! `ACCEPTANCE_CRITERIA=1,2,3` to run a subset.

use demo_shaping::agents::{bc_train, train_agent, Learner, Td3Agent, Td3Config, Transition};
use demo_shaping::demos::{generate_demos, DemoDataset, DemoKind, DemoPair};
use demo_shaping::env::{EnvConfig, Policy};
use demo_shaping::flow::{batch_objective, batch_objective_value, fit_flow, grid_mass, FlowModel, FlowTrainConfig};
use demo_shaping::gan::{critic_objective, generator_objective, interpolate, wgan_losses, GanModel, GanTrainConfig, GanTrainer};
use demo_shaping::harness::{run_method_seed, ExperimentConfig, MethodSpec};
use demo_shaping::nn::{finite_difference_grad, loss_grad, max_relative_error, Activation, Mlp, OutputActivation, Standardizer};
use demo_shaping::shaping::{argmax, q_shaped, q_star, shaped_reward, Potential, TabularMdp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

// tolerances
const TABULAR_TOL: f64 = 1e-8;
const FD_TOL: f64 = 1e-4;
const FD_MAX_PARAMS: usize = 1000;
const IDENTITY_FLOW_TOL: f64 = 1e-12;
const QUADRATURE_TOL: f64 = 0.05;
const MEAN_LOGPROB_TOL: f64 = 0.1;
/// Expected log-density of a sample from N(0, I₂): −ln(2π) − 1.
const GAUSS2_MEAN_LOGPROB: f64 = -2.8378770664093453;
const LINEAR_PENALTY_TOL: f64 = 1e-12;
const W1_RANGE: (f64, f64) = (2.0, 4.0);
const GRAD_NORM_RANGE: (f64, f64) = (0.8, 1.2);
const TELESCOPE_TOL: f64 = 1e-9;
const SHAPED_SUCCESS: f64 = 0.8;
const TD3_MAX_SUCCESS: f64 = 0.2;
const BC_MAX_SUCCESS: f64 = 0.5;
const WEAK_BC_MAX_SUCCESS: f64 = 0.5;
/// Returns within one step's penalty count as "at par".
const PAR_RETURN: f64 = 1.0;
const ORDERING_SEEDS: usize = 4;
const MODE_MEAN_TOL: f64 = 0.1;
const EQUIVALENCE_UPDATES: usize = 1000;

// runtime budgets
const TABULAR_BUDGET: Duration = Duration::from_secs(5);
const FD_BUDGET: Duration = Duration::from_secs(60);
const FLOW_BUDGET: Duration = Duration::from_secs(300);
const GAN_BUDGET: Duration = Duration::from_secs(300);
const NEAR_OPTIMAL_METHOD_BUDGET: Duration = Duration::from_secs(30 * 60);
const LIFT_BUDGET: Duration = Duration::from_secs(45 * 60);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Criteria selected by `ACCEPTANCE_CRITERIA` (comma-separated numbers); all when unset.
fn selected(n: usize) -> bool {
    match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(list) => list.split(',').any(|t| t.trim().parse() == Ok(n)),
        Err(_) => true,
    }
}

fn criterion(n: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    if !selected(n) {
        emit(&format!("criterion {n} [SKIP] {name}"));
        return true;
    }
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Verdict::new(false, format!("panicked: {msg}"))
    });
    let tag = if v.pass { "PASS" } else { "FAIL" };
    emit(&format!("criterion {n} [{tag}] {name}: {} ({:.1}s)", v.detail, start.elapsed().as_secs_f64()));
    v.pass
}

fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect();
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn gauss(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect()).collect()
}

fn randomize(params: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    params.iter().map(|&p| if p == 0.0 { rng.gen_range(-scale..scale) } else { p }).collect()
}

// 1 -----------------------------------------------------------------------

fn tabular_identity() -> Verdict {
    let start = Instant::now();
    let mdp = TabularMdp::gridworld(5, 24, 0.9).unwrap();
    let qs = q_star(&mdp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut mismatches) = (0.0f64, 0);
    for _ in 0..20 {
        let phi: Vec<Vec<f64>> =
            (0..mdp.n_states()).map(|_| (0..mdp.n_actions()).map(|_| rng.gen_range(-1.0..=1.0)).collect()).collect();
        let qt = q_shaped(&mdp, &phi).unwrap();
        for s in 0..mdp.n_states() {
            let advised: Vec<f64> = qt[s].iter().zip(&phi[s]).map(|(q, p)| q + p).collect();
            for (a, v) in advised.iter().enumerate() {
                worst = worst.max((v - qs[s][a]).abs());
            }
            mismatches += (argmax(&advised) != argmax(&qs[s])) as usize;
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        worst <= TABULAR_TOL && mismatches == 0 && elapsed < TABULAR_BUDGET,
        format!("max |Q~+Phi-Q*| = {worst:.2e}, argmax mismatches {mismatches}"),
    )
}

// 2 -----------------------------------------------------------------------

fn fd_check(name: &str, analytic: &[f64], numeric: &[f64], report: &mut Vec<String>) -> bool {
    assert!(analytic.len() <= FD_MAX_PARAMS, "{name} has {} parameters", analytic.len());
    let e = max_relative_error(analytic, numeric);
    report.push(format!("{name} {e:.1e}"));
    e < FD_TOL
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut report = Vec::new();
    let mut ok = true;

    // squared-error loss through both hidden activations
    for (act, out) in [
        (Activation::Tanh, OutputActivation::Identity),
        (Activation::Relu, OutputActivation::TanhScaled { bound: 0.05 }),
    ] {
        let m = Mlp::new(&[3, 16, 16, 2], act, out, &mut rng);
        let xs = gauss(6, 3, &mut rng);
        let ys: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)]).collect();
        let sq = |o: &[f64], y: &[f64]| o.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let (_, g) = loss_grad(&m, &xs, |i, o| {
            (sq(o, &ys[i]), o.iter().zip(&ys[i]).map(|(a, b)| 2.0 * (a - b)).collect())
        })
        .unwrap();
        let fd = finite_difference_grad(
            |p| {
                let mut mm = m.clone();
                mm.set_params(p).unwrap();
                xs.iter().zip(&ys).map(|(x, y)| sq(&mm.forward(x).unwrap(), y)).sum()
            },
            m.params(),
            1e-6,
        );
        ok &= fd_check(&format!("mlp-{act:?}"), &g, &fd, &mut report);
    }

    // flow likelihood with and without the Jacobian regularizer
    let mut flow = FlowModel::new(2, 2, 8, 3);
    let p = randomize(&flow.flat_params(), 0.3, &mut rng);
    flow.set_flat_params(&p).unwrap();
    let p = flow.flat_params().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect::<Vec<_>>();
    flow.set_flat_params(&p).unwrap();
    let rows = gauss(5, 2, &mut rng);
    for eta in [0.0, 0.5] {
        let (_, g) = batch_objective(&flow, &rows, eta).unwrap();
        let fd = finite_difference_grad(
            |p| {
                let mut m = flow.clone();
                m.set_flat_params(p).unwrap();
                batch_objective_value(&m, &rows, eta).unwrap()
            },
            &flow.flat_params(),
            1e-6,
        );
        ok &= fd_check(&format!("flow-eta{eta}"), &g, &fd, &mut report);
    }

    // WGAN-GP critic (including the interpolate-gradient penalty) and generator
    let gan = GanModel::new(2, 8, 4);
    let real = gauss(6, 2, &mut rng);
    let fake = gauss(6, 2, &mut rng);
    let eps: Vec<f64> = (0..6).map(|_| rng.gen()).collect();
    let (_, _, g) = critic_objective(&gan.critic, &real, &fake, &eps, 10.0).unwrap();
    let fd = finite_difference_grad(
        |p| {
            let mut c = gan.critic.clone();
            c.set_params(p).unwrap();
            let (l1, l2) = wgan_losses(&c, &real, &fake, &eps).unwrap();
            -l1 + 10.0 * l2
        },
        gan.critic.params(),
        1e-6,
    );
    ok &= fd_check("wgan-critic", &g, &fd, &mut report);
    let z = gauss(5, 2, &mut rng);
    let (_, g) = generator_objective(&gan, &z).unwrap();
    let fd = finite_difference_grad(
        |p| {
            let mut m = gan.clone();
            m.generator.set_params(p).unwrap();
            generator_objective(&m, &z).unwrap().0
        },
        gan.generator.params(),
        1e-6,
    );
    ok &= fd_check("wgan-generator", &g, &fd, &mut report);

    // TD3 actor objective through dQ/da and dPhi/da for both potential kinds
    let cfg = Td3Config { hidden: 8, ..Default::default() };
    let mut agent = Td3Agent::new(2, 2, 0.05, &cfg, 5);
    for v in agent.actor.params_mut() {
        *v *= 0.5;
    }
    let states: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.gen(), rng.gen()]).collect();
    let refs: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
    let norm = Standardizer { mean: vec![0.5, 0.5, 0.0, 0.0], std: vec![0.3, 0.3, 0.01, 0.01] };
    let mut pflow = FlowModel::new(4, 2, 6, 6);
    let p = randomize(&pflow.flat_params(), 0.2, &mut rng);
    pflow.set_flat_params(&p).unwrap();
    pflow.set_normalization(norm.clone());
    let mut pgan = GanModel::new(4, 8, 7);
    pgan.set_normalization(norm);
    let potentials = [
        ("flow", Potential::Flow { model: Arc::new(pflow), scale: 0.3, floor: 1e-3 }),
        ("gan", Potential::Gan { model: Arc::new(pgan), scale: 0.7 }),
    ];
    for (name, phi) in &potentials {
        let (_, g) = agent.actor_objective(&refs, phi).unwrap();
        let fd = finite_difference_grad(
            |p| {
                let mut a = agent.clone();
                a.actor.set_params(p).unwrap();
                -a.actor_objective(&refs, phi).unwrap().0
            },
            agent.actor.params(),
            1e-5,
        );
        ok &= fd_check(&format!("td3-actor-{name}"), &g, &fd, &mut report);
    }
    let pairs: Vec<DemoPair> =
        (0..4).map(|_| DemoPair { state: vec![rng.gen(), rng.gen()], action: vec![0.03, -0.04] }).collect();
    let demo_refs: Vec<&DemoPair> = pairs.iter().collect();
    let (_, g) = agent.td3_bc_actor_loss(&refs, &demo_refs, 0.01).unwrap();
    let fd = finite_difference_grad(
        |p| {
            let mut a = agent.clone();
            a.actor.set_params(p).unwrap();
            a.td3_bc_actor_loss(&refs, &demo_refs, 0.01).unwrap().0
        },
        agent.actor.params(),
        1e-7,
    );
    ok &= fd_check("td3-bc-actor", &g, &fd, &mut report);

    let elapsed = start.elapsed();
    Verdict::new(ok && elapsed < FD_BUDGET, format!("max relative errors: {}", report.join(", ")))
}

// 3 -----------------------------------------------------------------------

fn flow_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (dim, layers) in [(1, 1), (2, 5), (4, 3)] {
        let mut m = FlowModel::new(dim, layers, 8, 0);
        m.set_flat_params(&vec![0.0; m.param_count()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(dim as u64);
        for x in gauss(20, dim, &mut rng) {
            let exact: f64 = x.iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
            worst = worst.max((m.log_prob(&x).unwrap() - exact).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let train = gauss(5000, 2, &mut rng);
    let fit = fit_flow(&train, &FlowTrainConfig::default(), 3).unwrap();
    let mass = grid_mass(&fit.model, 4.0, 200);
    let test = gauss(5000, 2, &mut rng);
    let mean_lp = test.iter().map(|x| fit.model.log_prob(x).unwrap()).sum::<f64>() / test.len() as f64;
    let elapsed = start.elapsed();
    let pass = worst <= IDENTITY_FLOW_TOL
        && (mass - 1.0).abs() <= QUADRATURE_TOL
        && (mean_lp - GAUSS2_MEAN_LOGPROB).abs() <= MEAN_LOGPROB_TOL
        && elapsed < FLOW_BUDGET;
    Verdict::new(
        pass,
        format!(
            "identity error {worst:.1e}, grid mass {mass:.4}, mean logprob {mean_lp:.4} vs {GAUSS2_MEAN_LOGPROB:.4}"
        ),
    )
}

// 4 -----------------------------------------------------------------------

fn gan_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut penalty_err = 0.0f64;
    for w in [vec![3.0, 0.0], vec![0.6, -0.8], vec![0.1, 0.2], vec![-2.0, 5.0]] {
        let mut c = Mlp::zeros(&[2, 1], Activation::Relu, OutputActivation::Identity);
        c.weights_mut(0).copy_from_slice(&w);
        let real = gauss(16, 2, &mut rng);
        let fake = gauss(16, 2, &mut rng);
        let eps: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let (_, l2) = wgan_losses(&c, &real, &fake, &eps).unwrap();
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        penalty_err = penalty_err.max((l2 - (norm - 1.0).powi(2)).abs());
    }

    let cfg = GanTrainConfig { hidden: 32, lr: 2e-3, batch_size: 64, ..Default::default() };
    let mut tr = GanTrainer::new(GanModel::new(1, 32, 0), cfg, 9).unwrap();
    let shifted = |n: usize, mu: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        gauss(n, 1, rng).into_iter().map(|v| vec![v[0] + mu]).collect()
    };
    let real = shifted(2000, 0.0, &mut rng);
    let fake = shifted(2000, 3.0, &mut rng);
    for step in 0..600 {
        let a = (step * 64) % 1936;
        tr.critic_step(&real[a..a + 64], &fake[a..a + 64]).unwrap();
    }
    let eval_real = shifted(4000, 0.0, &mut rng);
    let eval_fake = shifted(4000, 3.0, &mut rng);
    let (l1, _) = wgan_losses(&tr.model.critic, &eval_real, &eval_fake, &vec![0.5; 4000]).unwrap();
    let mean_norm = eval_real
        .iter()
        .zip(&eval_fake)
        .map(|(x, f)| tr.model.critic.input_grad(&interpolate(x, f, rng.gen()), &[1.0]).unwrap().1[0].abs())
        .sum::<f64>()
        / eval_real.len() as f64;
    let elapsed = start.elapsed();
    let pass = penalty_err <= LINEAR_PENALTY_TOL
        && (W1_RANGE.0..=W1_RANGE.1).contains(&l1)
        && (GRAD_NORM_RANGE.0..=GRAD_NORM_RANGE.1).contains(&mean_norm)
        && elapsed < GAN_BUDGET;
    Verdict::new(
        pass,
        format!("linear penalty error {penalty_err:.1e}, L1 {l1:.3} (W1 = 3), mean interpolate grad norm {mean_norm:.3}"),
    )
}

// 5 -----------------------------------------------------------------------

fn telescoping() -> Verdict {
    let env = EnvConfig::default();
    let demos = generate_demos(&env, DemoKind::Optimal, 5, 0.005, 5).unwrap();
    let rows = demos.joint_rows();
    let flow = fit_flow(&rows, &FlowTrainConfig { epochs: 10, ..Default::default() }, 5).unwrap().model;
    let gan = demo_shaping::gan::fit_gan(&rows, &GanTrainConfig { iterations: 20, ..Default::default() }, 5).unwrap().model;
    let gamma = 0.99;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for phi in [
        Potential::Flow { model: Arc::new(flow), scale: 1.0, floor: 1e-6 },
        Potential::Gan { model: Arc::new(gan), scale: 1.0 },
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..10 {
            let mut s = env.reset(rng.gen());
            let mut obs = env.observe(&s);
            let mut a: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.05..0.05)).collect();
            let (mut phi0, mut sum, mut discount) = (None, 0.0, 1.0);
            for _ in 0..env.horizon {
                let out = env.step(&s, &a).unwrap();
                let obs2 = env.observe(&out.state);
                let a2: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.05..0.05)).collect();
                let shaped = shaped_reward(&phi, &obs, &a, out.reward, &obs2, &a2, gamma).unwrap();
                sum += discount * (shaped - out.reward);
                phi0.get_or_insert(phi.value(&obs, &a).unwrap());
                discount *= gamma;
                s = out.state;
                obs = obs2;
                a = a2;
            }
            let expect = discount * phi.value(&obs, &a).unwrap() - phi0.unwrap();
            worst = worst.max((sum - expect).abs());
            checked += 1;
        }
    }
    Verdict::new(worst <= TELESCOPE_TOL, format!("{checked} rollouts of 40 steps, max error {worst:.1e}"))
}

// 6-8 helpers --------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Final {
    success: f64,
    ret: f64,
}

/// Final evaluation point of every seed for every method, with the time each
/// method took.
fn run_all(cfg: &ExperimentConfig) -> (BTreeMap<String, Vec<Final>>, BTreeMap<String, Duration>) {
    let mut finals = BTreeMap::new();
    let mut times = BTreeMap::new();
    for m in &cfg.methods {
        let start = Instant::now();
        let mut per_seed = Vec::new();
        for &seed in &cfg.seeds {
            let curve = run_method_seed(cfg, m, seed, |_| {}).unwrap_or_else(|e| panic!("{} seed {seed}: {e}", m.name));
            let last = curve.last().expect("non-empty curve");
            per_seed.push(Final { success: last.success_rate, ret: last.mean_return });
        }
        let elapsed = start.elapsed();
        emit(&format!(
            "    {:<12} success {:?} return {:?} ({:.0}s)",
            m.name,
            per_seed.iter().map(|f| f.success).collect::<Vec<_>>(),
            per_seed.iter().map(|f| f.ret).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ));
        finals.insert(m.name.clone(), per_seed);
        times.insert(m.name.clone(), elapsed);
    }
    (finals, times)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn method<'a>(finals: &'a BTreeMap<String, Vec<Final>>, name: &str) -> &'a [Final] {
    finals.get(name).unwrap_or_else(|| panic!("config has no method {name:?}"))
}

// 6 -----------------------------------------------------------------------

fn near_optimal_demos() -> Verdict {
    let cfg = config("near-optimal.toml");
    let (finals, times) = run_all(&cfg);
    let flow = mean(method(&finals, "td3-flow").iter().map(|f| f.success));
    let mut gan: Vec<f64> = method(&finals, "td3-gan").iter().map(|f| f.success).collect();
    gan.sort_by(f64::total_cmp);
    // one GAN seed may fail: judge the best four
    let gan_best = mean(gan.iter().skip(gan.len().saturating_sub(ORDERING_SEEDS)).copied());
    let td3 = mean(method(&finals, "td3").iter().map(|f| f.success));
    let bc = mean(method(&finals, "bc").iter().map(|f| f.success));
    let slowest = times.values().max().copied().unwrap_or_default();
    let pass = flow >= SHAPED_SUCCESS
        && gan_best >= SHAPED_SUCCESS
        && td3 <= TD3_MAX_SUCCESS
        && bc <= BC_MAX_SUCCESS
        && slowest <= NEAR_OPTIMAL_METHOD_BUDGET;
    Verdict::new(
        pass,
        format!(
            "mean final success td3-flow {flow:.2}, td3-gan (best {ORDERING_SEEDS}) {gan_best:.2}, td3 {td3:.2}, bc {bc:.2}; slowest method {:.0}s",
            slowest.as_secs_f64()
        ),
    )
}

// 7 -----------------------------------------------------------------------

fn lift_demos() -> Verdict {
    let start = Instant::now();
    let cfg = config("lift-demos.toml");
    let (finals, _) = run_all(&cfg);
    let gan = method(&finals, "td3-gan");
    let weak = method(&finals, "td3-bc-1e-4");
    let strong = method(&finals, "td3-bc-1e-2");
    let holds = (0..gan.len())
        .filter(|&i| {
            let (g, w, s) = (gan[i], weak[i], strong[i]);
            g.success >= SHAPED_SUCCESS
                && w.ret < g.ret
                && w.success < WEAK_BC_MAX_SUCCESS
                && s.ret >= w.ret
                && s.ret <= g.ret + PAR_RETURN
        })
        .count();
    let elapsed = start.elapsed();
    Verdict::new(
        holds >= ORDERING_SEEDS && elapsed <= LIFT_BUDGET,
        format!(
            "ordering holds on {holds}/{} seeds; mean return td3-gan {:.1}, td3-bc 1e-2 {:.1}, td3-bc 1e-4 {:.1}",
            gan.len(),
            mean(gan.iter().map(|f| f.ret)),
            mean(strong.iter().map(|f| f.ret)),
            mean(weak.iter().map(|f| f.ret))
        ),
    )
}

// 8 -----------------------------------------------------------------------

/// A probe on the vertical line through the hole where the mirrored left and
/// right demonstrations cross it with decisive actions `(±a_x, a_z)`. Returns
/// the probe, the mode mean `(0, a_z)` and one mode.
fn dual_mode_probe(ds: &DemoDataset, cfg: &EnvConfig) -> Option<([f64; 2], [f64; 2], [f64; 2])> {
    let b = cfg.action_bound;
    let left = ds.pairs.chunks(cfg.horizon).step_by(2).flatten();
    let p = left
        .filter(|p| p.action[0].abs() >= 0.5 * b && p.action[1] <= -0.5 * b)
        .min_by(|x, y| (x.state[0] - cfg.hole_x).abs().total_cmp(&(y.state[0] - cfg.hole_x).abs()))?;
    Some(([cfg.hole_x, p.state[1]], [0.0, p.action[1]], [p.action[0], p.action[1]]))
}

fn multimodality() -> Verdict {
    let cfg = config("multimodal.toml");
    let bound = cfg.env.action_bound;
    let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() / bound;
    let (mut to_mean, mut to_mode) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let ds = generate_demos(&cfg.env, DemoKind::Multimodal, cfg.demos.episodes, cfg.demos.noise, seed).unwrap();
        let (probe, mode_mean, mode) = dual_mode_probe(&ds, &cfg.env).expect("dataset crosses the hole axis");
        let mut bc = bc_train(&ds, bound, &cfg.bc, seed).unwrap().policy;
        bc.reset();
        let a = bc.act(&probe);
        let mirror = [-mode[0], mode[1]];
        to_mean.push(dist(&a, &mode_mean));
        to_mode.push(dist(&a, &mode).min(dist(&a, &mirror)));
    }
    emit(&format!("    bc distance to mode mean per seed {to_mean:.3?}, to nearer mode {to_mode:.3?} (units of bound)"));
    let shaped_cfg = ExperimentConfig {
        methods: cfg.methods.iter().filter(|m| m.name == "td3-flow").cloned().collect::<Vec<MethodSpec>>(),
        ..cfg.clone()
    };
    let (finals, _) = run_all(&shaped_cfg);
    let flow = mean(method(&finals, "td3-flow").iter().map(|f| f.success));
    let gap = mean(to_mean.iter().copied());
    Verdict::new(
        gap <= MODE_MEAN_TOL && flow >= SHAPED_SUCCESS,
        format!(
            "bc mean distance to mode mean {gap:.3}·bound (to nearer mode {:.3}·bound), td3-flow mean final success {flow:.2}",
            mean(to_mode.iter().copied())
        ),
    )
}

// 9 -----------------------------------------------------------------------

fn reduction_equivalence() -> Verdict {
    let cfg = Td3Config::default();
    let env = EnvConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<Transition> = (0..2000)
        .map(|_| {
            let s = env.reset(rng.gen());
            let a = vec![rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
            let out = env.step(&s, &a).unwrap();
            Transition { s: env.observe(&s), a, r: out.reward, s2: env.observe(&out.state), done: false }
        })
        .collect();
    let mut shaped = Td3Agent::new(2, 2, env.action_bound, &cfg, 17);
    let mut plain = shaped.clone();
    let mut diverged_at = None;
    for u in 0..EQUIVALENCE_UPDATES {
        let batch: Vec<&Transition> = (0..cfg.batch_size).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let a = shaped.td3_update(&batch, &[], &Potential::Zero, &cfg).unwrap();
        let b = plain.plain_td3_update(&batch, &cfg).unwrap();
        if a != b || shaped != plain {
            diverged_at = Some(u);
            break;
        }
    }
    // the same through the training loop
    let loop_cfg = Td3Config { total_episodes: 30, ..cfg };
    let run = |learner| {
        train_agent(&env, &Potential::Zero, None, learner, &loop_cfg, 4, |_| {}).unwrap()
    };
    let (x, y) = (run(Learner::Td3Shaped), run(Learner::Td3));
    let loops_match = x.curve == y.curve && x.policy.net == y.policy.net;
    let n_loop = (loop_cfg.total_episodes / loop_cfg.episodes_per_iter) * loop_cfg.updates_per_iter;
    Verdict::new(
        diverged_at.is_none() && loops_match,
        match diverged_at {
            None => format!("{EQUIVALENCE_UPDATES} direct updates bit-identical; training loops identical over {n_loop} updates: {loops_match}"),
            Some(u) => format!("paths differ at update {u}"),
        },
    )
}

#[test]
fn acceptance_criteria() {
    let results = [
        criterion(1, "tabular shaping identity", tabular_identity),
        criterion(2, "gradient integrity", gradient_integrity),
        criterion(3, "flow correctness", flow_correctness),
        criterion(4, "WGAN-GP correctness", gan_correctness),
        criterion(5, "telescoping", telescoping),
        criterion(6, "peg-2d with near-optimal demos", near_optimal_demos),
        criterion(7, "fixed-start peg with suboptimal-lift demos", lift_demos),
        criterion(8, "multimodal demos", multimodality),
        criterion(9, "zero-potential reduction", reduction_equivalence),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
