//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. The full-scale table run takes several minutes.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpl_core::config::RunConfig;
use mpl_core::data::{
    self, filter_assisted_state, normalize, smooth, Dataset, Episode, EpisodeMeta, Norm, Outcome, Source,
    StepVector, STEP_DIM,
};
use mpl_core::env::{self, EnvConfig, Status};
use mpl_core::executor::{self, ordinal_checks, MetricsTable, Terminal};
use mpl_core::model::{self, episode_gradients, evaluate_loss, LossWeights, ModelConfig, TrainedModel};
use mpl_core::nn::{self, LstmParams, RecurrentState};
use mpl_core::optimizer::{
    input_gradient, optimize_input, window_loss, Betas, Condition, OptConfig, PredictionWindow, References,
};
use mpl_core::teacher;
use mpl_core::Error;

type Outcome_ = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_step(rng: &mut ChaCha8Rng) -> StepVector {
    StepVector {
        s: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        u: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        p: if rng.random_bool(0.5) { 1.0 } else { 0.0 },
    }
}

fn random_state(hidden: usize, rng: &mut ChaCha8Rng) -> RecurrentState {
    RecurrentState {
        h: (0..hidden).map(|_| rng.random_range(-0.5..0.5)).collect(),
        c: (0..hidden).map(|_| rng.random_range(-0.5..0.5)).collect(),
    }
}

fn norm() -> Norm {
    Norm::from_env(&EnvConfig::default())
}

fn small_model(hidden: usize, seed: u64) -> TrainedModel {
    let cfg = ModelConfig {
        hidden_dim: hidden,
        seed,
        ..ModelConfig::default()
    };
    TrainedModel::init(&cfg, norm())
}

// 1. Analytic gradients against central differences.
fn gradient_fidelity() -> Outcome_ {
    const H: f64 = 1e-4;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_w: f64 = 0.0;
    let mut worst_u: f64 = 0.0;
    for trial in 0..100 {
        let hidden = rng.random_range(1..=16);
        let model = small_model(hidden, trial);
        let w = LossWeights {
            s: rng.random_range(0.1..2.0),
            u: rng.random_range(0.1..2.0),
            p: rng.random_range(0.1..2.0),
        };

        // Parameters, through a teacher-forced sequence loss.
        let len = rng.random_range(2..8);
        let episode = Episode {
            meta: EpisodeMeta {
                episode_id: trial,
                seed: trial,
                source: Source::Scripted,
                outcome: Outcome::ReachedGoal,
            },
            steps: (0..len).map(|_| random_step(&mut rng)).collect(),
        };
        let eps = std::slice::from_ref(&episode);
        let (_, grads) = episode_gradients(&model.params, &episode, w).map_err(|e| e.to_string())?;
        for _ in 0..8 {
            let k = rng.random_range(0..model.params.len());
            let mut plus = model.params.clone();
            plus.as_mut_slice()[k] += H;
            let mut minus = model.params.clone();
            minus.as_mut_slice()[k] -= H;
            let fd = (evaluate_loss(&plus, eps, w).unwrap() - evaluate_loss(&minus, eps, w).unwrap()) / (2.0 * H);
            worst_w = worst_w.max(rel_err(grads.as_slice()[k], fd));
        }

        // Control input, through the optimization window loss.
        let state = random_state(hidden, &mut rng);
        let mut window = PredictionWindow::new(3);
        for _ in 0..rng.random_range(0..4) {
            window.push((0..STEP_DIM).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        let refs = References {
            s_ref: Some(std::array::from_fn(|_| rng.random_range(0.0..1.0))),
            u_ref: Some(std::array::from_fn(|_| rng.random_range(-1.0..1.0))),
            p_ref: 0.0,
        };
        let betas = Betas {
            s: rng.random_range(0.0..1.0),
            u: rng.random_range(0.0..1.0),
            p: rng.random_range(0.0..1.0),
        };
        let x = random_step(&mut rng);
        let (_, _, g) = input_gradient(&model, &state, &x, &window, &refs, betas).map_err(|e| e.to_string())?;
        for k in 0..2 {
            let loss_at = |d: f64| {
                let mut xd = x;
                xd.u[k] += d;
                input_gradient(&model, &state, &xd, &window, &refs, betas).unwrap().1.total
            };
            let fd = (loss_at(H) - loss_at(-H)) / (2.0 * H);
            worst_u = worst_u.max(rel_err(g[k], fd));
        }
    }
    let elapsed = started.elapsed();
    ensure(worst_w < 1e-4 && worst_u < 1e-4, || {
        format!("max relative error dL/dW {worst_w:.2e}, dL/du {worst_u:.2e}")
    })?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("max relative error dL/dW {worst_w:.2e}, dL/du {worst_u:.2e}"))
}

// 2. Loss units.
fn loss_units() -> Outcome_ {
    let b = nn::bce(0.5, 1.0);
    ensure((b - std::f64::consts::LN_2).abs() <= 1e-12, || format!("bce(0.5, 1) = {b}"))?;
    let x = [0.3, -1.2, 7.5];
    let m = nn::mse(&x, &x).map_err(|e| e.to_string())?;
    ensure(m == 0.0, || format!("mse(x, x) = {m}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut window = PredictionWindow::new(3);
    for _ in 0..3 {
        window.push((0..STEP_DIM).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    let refs = References {
        s_ref: Some([0.2, 0.4, 0.6, 0.8]),
        u_ref: Some([0.6, 0.8]),
        p_ref: 0.0,
    };
    let loss = |betas| window_loss(&window, &refs, betas).unwrap();
    let basis = [
        loss(Betas { s: 1.0, u: 0.0, p: 0.0 }).total,
        loss(Betas { s: 0.0, u: 1.0, p: 0.0 }).total,
        loss(Betas { s: 0.0, u: 0.0, p: 1.0 }).total,
    ];
    for _ in 0..50 {
        let betas = Betas {
            s: rng.random_range(0.0..4.0),
            u: rng.random_range(0.0..4.0),
            p: rng.random_range(0.0..4.0),
        };
        let l = loss(betas);
        let expected = betas.s * basis[0] + betas.u * basis[1] + betas.p * basis[2];
        ensure(l.total == expected, || format!("L({betas:?}) = {} != {expected}", l.total))?;
        let doubled = loss(Betas {
            s: 2.0 * betas.s,
            u: 2.0 * betas.u,
            p: 2.0 * betas.p,
        });
        ensure(doubled.total == 2.0 * l.total, || "doubling beta does not double L".into())?;
    }
    Ok(format!("bce(0.5, 1) = {b:.15}"))
}

// 3. Preprocessing operators and dataset persistence.
fn pipeline_exactness() -> Outcome_ {
    let filt = |s: &[f64], p, m: &[bool]| filter_assisted_state(s, p, m).unwrap();
    ensure(filt(&[5.0, 3.0], 1.0, &[true, true]) == vec![0.0, 0.0], || "filter p=1".into())?;
    ensure(filt(&[4.0], 0.5, &[true]) == vec![2.0], || "filter p=0.5".into())?;
    ensure(filt(&[4.0], 0.5, &[false]) == vec![4.0], || "filter mask".into())?;

    let series = vec![vec![0.0], vec![3.0], vec![6.0]];
    let sm = smooth(&series, 3).unwrap();
    ensure(sm == vec![vec![0.0], vec![1.5], vec![3.0]], || format!("smooth {sm:?}"))?;
    ensure(smooth(&series, 1).unwrap() == series, || "smooth window 1".into())?;
    let constant = vec![vec![2.5, -1.0]; 10];
    ensure(smooth(&constant, 3).unwrap() == constant, || "smooth constant".into())?;
    ensure(smooth(&[], 3).is_err(), || "smooth empty".into())?;

    let n = norm();
    let x = n.step(&StepVector {
        s: [128.0, 128.0, 0.0, 0.0],
        u: [3.5, 0.0],
        p: 1.0,
    });
    ensure(x.s[..2] == [1.0, 1.0] && x.u == [1.0, 0.0], || format!("normalize {x:?}"))?;

    let dataset = teacher::collect_episodes(&EnvConfig::default(), &Default::default(), 150, 3)
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for ep in &dataset.episodes {
        let back = data::denormalize(&normalize(ep, &n), &n);
        for (a, b) in ep.steps.iter().zip(&back.steps) {
            for (p, q) in a.to_array().iter().zip(b.to_array()) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    ensure(worst < 1e-12, || format!("normalize round trip error {worst:e}"))?;

    let text = data::to_string(&dataset);
    let parsed: Dataset = data::from_str(&text).map_err(|e| e.to_string())?;
    ensure(parsed == dataset, || "dataset round trip changed values".into())?;
    ensure(data::to_string(&parsed) == text, || "dataset re-serialization differs".into())?;
    let wrong = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
    ensure(matches!(data::from_str(&wrong), Err(Error::Version { found: 2, .. })), || {
        "wrong format_version accepted".into()
    })?;
    ensure(matches!(data::from_str(""), Err(Error::EmptyDataset)), || "empty file accepted".into())?;
    Ok(format!("{} episodes round-tripped", dataset.episodes.len()))
}

struct SmallRun {
    dataset: String,
    params: Vec<u8>,
    table: String,
}

fn small_run(seed: u64) -> Result<SmallRun, Error> {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.model.hidden_dim = 8;
    cfg.model.epochs = 3;
    let cfg = cfg.effective()?;
    let dataset = teacher::collect_episodes(&cfg.env, &cfg.teacher, 8, cfg.seed)?;
    let episodes = data::prepare_training_episodes(&dataset, &cfg.pipeline, cfg.seed)?;
    let trained = model::train(&episodes, dataset.header.norm(), &cfg.model)?;
    let (table, _) = executor::evaluate(&trained, &cfg.env, &cfg.opt, &Condition::ALL, 3, cfg.seed)?;
    Ok(SmallRun {
        dataset: data::to_string(&dataset),
        params: model::model_to_bytes(&trained),
        table: serde_json::to_string(&table).expect("table serializes"),
    })
}

// 4. Same seed, same bytes.
fn determinism() -> Outcome_ {
    let a = small_run(11).map_err(|e| e.to_string())?;
    let b = small_run(11).map_err(|e| e.to_string())?;
    ensure(a.dataset == b.dataset, || "datasets differ".into())?;
    ensure(a.params == b.params, || "model bytes differ".into())?;
    ensure(a.table == b.table, || "metrics tables differ".into())?;
    Ok("dataset, model and metrics identical across two runs".into())
}

// 5. Ordinal table pattern at full scale. Returns the dataset and model
// for the later criteria even when the checks fail.
fn table_reproduction(cfg: &RunConfig) -> Result<(Outcome_, Dataset, TrainedModel), Error> {
    let started = Instant::now();
    let dataset = teacher::collect_episodes(&cfg.env, &cfg.teacher, cfg.collect.episodes, cfg.seed)?;
    let episodes = data::prepare_training_episodes(&dataset, &cfg.pipeline, cfg.seed)?;
    let trained = model::train(&episodes, dataset.header.norm(), &cfg.model)?;
    let (table, _): (MetricsTable, _) =
        executor::evaluate(&trained, &cfg.env, &cfg.opt, &Condition::ALL, cfg.eval.episodes, cfg.seed)?;
    let elapsed = started.elapsed();

    print!("{}", table.to_csv());
    let checks = ordinal_checks(&table);
    let mut failed = Vec::new();
    for c in &checks {
        println!("    {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    if elapsed > Duration::from_secs(30 * 60) {
        failed.push(format!("runtime {elapsed:?}"));
    }
    let detail = format!("{} ordinal checks, {:.0}s", checks.len(), elapsed.as_secs_f64());
    let outcome = if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failed: {}", failed.join(", ")))
    };
    Ok((outcome, dataset, trained))
}

/// Network whose output is a constant: zero `s` and `u`, and `p = σ(p_logit)`.
fn constant_p_model(p_logit: f64) -> TrainedModel {
    let mut m = small_model(4, 0);
    m.params = LstmParams::zeros(STEP_DIM, 4, STEP_DIM);
    m.params.blocks_mut()[4][STEP_DIM - 1] = p_logit;
    m
}

// 6. Abort on high predicted assistance.
fn abort_rule() -> Outcome_ {
    let env_cfg = EnvConfig::default();
    for c in Condition::ALL {
        let opt = OptConfig {
            abort_enabled: true,
            abort_threshold: 0.8,
            ..OptConfig::default().with_condition(c)
        };
        let rec = executor::run_episode(&constant_p_model(2.0), &env_cfg, &opt, 5).map_err(|e| e.to_string())?;
        ensure(rec.terminal == Terminal::Aborted && rec.steps.is_empty() && rec.env_t == 0, || {
            format!("{c}: {:?} after {} steps", rec.terminal, rec.steps.len())
        })?;
        let never = OptConfig {
            abort_threshold: 1.01,
            ..opt
        };
        for seed in 0..3 {
            let rec = executor::run_episode(&constant_p_model(40.0), &env_cfg, &never, seed).map_err(|e| e.to_string())?;
            ensure(rec.terminal != Terminal::Aborted, || format!("{c}: aborted with threshold 1.01"))?;
        }
    }
    Ok("aborts before the first step at p >= 0.8; never at 1.01".into())
}

// 7. The input loop does not increase the u-only loss.
fn descent_property(model: &TrainedModel, dataset: &Dataset) -> Outcome_ {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let env_cfg = &dataset.header.env_config;
    let n = model.norm;
    let opt = OptConfig {
        betas: Betas { s: 0.0, u: 1.0, p: 0.0 },
        ..OptConfig::default().with_condition(Condition::BPu)
    };
    let mut held = 0;
    for _ in 0..200 {
        let ep = normalize(&dataset.episodes[rng.random_range(0..dataset.episodes.len())], &n);
        let t = rng.random_range(ep.len() / 4..3 * ep.len() / 4);
        let mut state = model.initial_state();
        for x in &ep.steps[..t] {
            state = model.predict_next(&state, x).map_err(|e| e.to_string())?.1;
        }
        let x = ep.steps[t];
        let agent = [x.s[0] * n.world_size, x.s[1] * n.world_size];
        let to_goal = [env_cfg.goal[0] - agent[0], env_cfg.goal[1] - agent[1]];
        let d = to_goal[0].hypot(to_goal[1]);
        let refs = References {
            s_ref: None,
            u_ref: Some([to_goal[0] / d, to_goal[1] / d]),
            p_ref: 0.0,
        };
        let u_init = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let out = optimize_input(model, &state, x.s, u_init, x.p, &refs, &opt).map_err(|e| e.to_string())?;
        if out.final_loss <= out.first_loss {
            held += 1;
        }
    }
    ensure(held >= 180, || format!("descent held in {held}/200"))?;
    Ok(format!("descent held in {held}/200"))
}

// 8. Scripted demonstrations.
fn teacher_dataset(dataset: &Dataset) -> Outcome_ {
    let env_cfg = &dataset.header.env_config;
    ensure(dataset.episodes.len() == 150, || format!("{} episodes", dataset.episodes.len()))?;
    for ep in &dataset.episodes {
        let id = ep.meta.episode_id;
        ensure(ep.meta.outcome == Outcome::ReachedGoal, || format!("episode {id}: {:?}", ep.meta.outcome))?;
        let mut state = env::reset(&EnvConfig {
            seed: ep.meta.seed,
            ..env_cfg.clone()
        });
        for x in &ep.steps[..ep.len() - 1] {
            ensure(state.observation() == x.s, || format!("episode {id}: replay diverged"))?;
            state = env::step(&state, x.u, env_cfg).map_err(|e| e.to_string())?;
        }
        ensure(state.status == Status::ReachedGoal && !state.collided_ever, || {
            format!("episode {id}: replay ended {:?}, collided {}", state.status, state.collided_ever)
        })?;
        ensure(ep.steps.iter().all(|x| x.p == 0.0 || x.p == 1.0), || format!("episode {id}: soft p"))?;
        ensure(ep.steps[ep.len() - 1].p == 0.0, || format!("episode {id}: assisted terminal record"))?;
        let mut run = 0;
        for x in &ep.steps {
            if x.p == 1.0 {
                run += 1;
            } else {
                ensure(run != 1, || format!("episode {id}: single-step assistance run"))?;
                run = 0;
            }
        }
    }
    let frac = dataset.intervention_fraction();
    ensure(frac > 0.0 && frac < 0.5, || format!("intervention fraction {frac:.3}"))?;
    Ok(format!("150 episodes replay to the goal, intervention fraction {frac:.3}"))
}

#[test]
fn acceptance() {
    let full = RunConfig::default().effective().expect("default config is valid");
    let mut results: Vec<(&str, Outcome_)> = vec![
        ("1 gradient fidelity", gradient_fidelity()),
        ("2 loss units", loss_units()),
        ("3 pipeline exactness", pipeline_exactness()),
        ("4 determinism", determinism()),
    ];
    let (table, dataset, trained) = table_reproduction(&full).expect("full-scale run");
    results.push(("5 table reproduction", table));
    results.push(("6 abort rule", abort_rule()));
    results.push(("7 descent property", descent_property(&trained, &dataset)));
    results.push(("8 teacher dataset", teacher_dataset(&dataset)));

    let mut all = true;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                all = false;
                println!("FAIL {name}: {d}");
            }
        }
    }
    assert!(all, "acceptance criteria failed");
}
