mod common;

use common::{build, episodes, jitter, small_env, small_model};
use linda_core::config::RunConfig;
use linda_core::diffcore::{GradientTape, RmsProp, RmsPropConfig};
use linda_core::env::{EnvConfig, LbfEnv, MultiAgentEnv};
use linda_core::mixer::MixerKind;
use linda_core::trainer::{
    compute_loss, evaluate, update_target, BatchNoise, EpisodeRecord, LossBreakdown, LossConfig, ReplayBuffer,
    RunObserver, SortedBatch, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(tag: f64, len: usize) -> EpisodeRecord {
    EpisodeRecord {
        obs: (0..=len).map(|t| vec![vec![tag, t as f64]; 2]).collect(),
        states: (0..=len).map(|t| vec![tag, -(t as f64)]).collect(),
        avail: vec![vec![vec![true; 3]; 2]; len + 1],
        actions: (0..len).map(|t| vec![t % 3, (t + 1) % 3]).collect(),
        rewards: (0..len).map(|t| tag * 0.1 + t as f64 * 1e-3).collect(),
        terminated: (0..len).map(|t| t + 1 == len).collect(),
        all_collected: vec![false; len],
    }
}

fn same_bits(a: &EpisodeRecord, b: &EpisodeRecord) -> bool {
    let flat = |r: &EpisodeRecord| -> Vec<u64> {
        r.obs
            .iter()
            .flatten()
            .flatten()
            .chain(r.states.iter().flatten())
            .chain(&r.rewards)
            .map(|v| v.to_bits())
            .collect()
    };
    flat(a) == flat(b) && a.actions == b.actions && a.avail == b.avail && a.terminated == b.terminated
}

#[test]
fn buffer_is_fifo_and_bounded() {
    let mut buf = ReplayBuffer::new(3).unwrap();
    for k in 0..4 {
        buf.store(record(k as f64, 2 + k)).unwrap();
        assert!(buf.len() <= 3);
    }
    assert_eq!(buf.len(), 3);
    assert!(same_bits(buf.get(0).unwrap(), &record(1.0, 3)));
    assert!(same_bits(buf.get(2).unwrap(), &record(3.0, 5)));
}

#[test]
fn stored_records_round_trip_bit_exactly() {
    let mut buf = ReplayBuffer::new(4).unwrap();
    let mut r = record(std::f64::consts::PI, 4);
    r.rewards[1] = f64::MIN_POSITIVE;
    r.obs[2][1][0] = -0.0;
    buf.store(r.clone()).unwrap();
    assert!(same_bits(buf.get(0).unwrap(), &r));
}

#[test]
fn malformed_records_are_rejected() {
    let mut buf = ReplayBuffer::new(4).unwrap();
    let mut r = record(1.0, 3);
    r.rewards[0] = f64::NAN;
    assert!(buf.store(r).is_err());
    let mut r = record(1.0, 3);
    r.terminated[0] = true;
    assert!(buf.store(r).is_err());
    let mut r = record(1.0, 3);
    r.actions.pop();
    assert!(buf.store(r).is_err());
    assert!(buf.is_empty());
}

#[test]
fn sampling_needs_a_full_batch_and_is_without_replacement() {
    let mut buf = ReplayBuffer::new(10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..5 {
        buf.store(record(k as f64, 2)).unwrap();
        assert!(buf.sample_batch(6, &mut rng).is_none());
    }
    buf.store(record(5.0, 2)).unwrap();
    let batch = buf.sample_batch(6, &mut rng).unwrap();
    let mut tags: Vec<u64> = batch.iter().map(|e| e.obs[0][0][0] as u64).collect();
    tags.sort();
    assert_eq!(tags, vec![0, 1, 2, 3, 4, 5]);

    let pick = |seed: u64| -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        buf.sample_batch(3, &mut rng)
            .unwrap()
            .iter()
            .map(|e| e.obs[0][0][0] as u64)
            .collect()
    };
    assert_eq!(pick(9), pick(9));
}

#[test]
fn single_draw_frequencies_are_uniform() {
    let mut buf = ReplayBuffer::new(10).unwrap();
    for k in 0..10 {
        buf.store(record(k as f64, 1)).unwrap();
    }
    let draws = 100_000;
    let mut counts = [0usize; 10];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..draws {
        let b = buf.sample_batch(1, &mut rng).unwrap();
        counts[b[0].obs[0][0][0] as usize] += 1;
    }
    let p = 0.1;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() <= 4.0 * sd, "{counts:?}");
    }
}

/// A one-step episode on the small grid with all per-agent values pinned by
/// the utility output bias.
fn pinned_setup(online_q: f64, target_q: f64) -> (linda_core::trainer::Model, linda_core::diffcore::ParameterSet, linda_core::diffcore::ParameterSet) {
    let env = small_env(5);
    let (model, mut params) = build(&env, &small_model(false), MixerKind::Vdn, 1);
    for id in params.ids().collect::<Vec<_>>() {
        params.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let mut target = params.clone();
    let bias = params.id("agent.utility.out.bias").unwrap();
    params.values_mut(bias).iter_mut().for_each(|v| *v = online_q);
    target.values_mut(bias).iter_mut().for_each(|v| *v = target_q);
    (model, params, target)
}

fn one_step_episode(reward: f64, all_collected: bool) -> EpisodeRecord {
    let env = small_env(5);
    let mut lbf = LbfEnv::new(env.clone()).unwrap();
    let obs = lbf.reset();
    EpisodeRecord {
        obs: vec![obs.clone(), obs],
        states: vec![lbf.global_state(), lbf.global_state()],
        avail: vec![vec![vec![true; 6]; 2]; 2],
        actions: vec![vec![0, 0]],
        rewards: vec![reward],
        terminated: vec![true],
        all_collected: vec![all_collected],
    }
}

#[test]
fn terminal_step_with_unit_reward_and_half_value() {
    let (model, params, target) = pinned_setup(0.25, 7.0);
    let ep = one_step_episode(1.0, true);
    let batch = SortedBatch::new(&[&ep]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = BatchNoise::sample(&model, &batch, false, &mut rng);
    let cfg = LossConfig {
        gamma: 0.99,
        lambda: 0.0,
        double_q: false,
        bootstrap_timeouts: false,
    };
    let b = compute_loss(&model, &params, &target, &batch, &noise, &cfg, None).unwrap();
    assert_eq!(b.td_loss, 0.25);
}

#[test]
fn exact_bootstrap_match_gives_zero() {
    let (model, params, target) = pinned_setup(0.9, 1.0);
    let ep = one_step_episode(0.0, false);
    let batch = SortedBatch::new(&[&ep]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = BatchNoise::sample(&model, &batch, false, &mut rng);
    let cfg = LossConfig {
        gamma: 0.9,
        lambda: 0.0,
        double_q: false,
        bootstrap_timeouts: true,
    };
    let b = compute_loss(&model, &params, &target, &batch, &noise, &cfg, None).unwrap();
    assert_eq!(b.td_loss, 0.0);

    let cut = LossConfig {
        bootstrap_timeouts: false,
        ..cfg
    };
    let b = compute_loss(&model, &params, &target, &batch, &noise, &cut, None).unwrap();
    assert!((b.td_loss - 1.8 * 1.8).abs() < 1e-12, "{}", b.td_loss);
}

#[test]
fn breakdown_is_additive() {
    let b = LossBreakdown::from_terms(0.25, vec![vec![0.1, 0.05], vec![0.05, 0.1]], 1.0);
    assert!((b.kl_sum - 0.3).abs() < 1e-15);
    assert!((b.total - 0.55).abs() < 1e-15);
    assert_eq!(b.total, b.td_loss + b.lambda * b.kl_sum);
}

#[test]
fn small_step_decreases_loss_on_the_same_batch() {
    let env = small_env(6);
    for init in 0..20 {
        let mixer = [MixerKind::Vdn, MixerKind::Qmix, MixerKind::Qplex][init % 3];
        let (model, params) = build(&env, &small_model(true), mixer, 100 + init as u64);
        let params = jitter(&params, 0.05, 200 + init as u64);
        let target = jitter(&params, 0.05, 300 + init as u64);
        let data = episodes(&model, &params, &env, 4, 400 + init as u64);
        let refs: Vec<&EpisodeRecord> = data.iter().collect();
        let batch = SortedBatch::new(&refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(init as u64);
        let noise = BatchNoise::sample(&model, &batch, false, &mut rng);
        let cfg = LossConfig {
            gamma: 0.99,
            lambda: 0.1,
            double_q: false,
            bootstrap_timeouts: false,
        };
        let mut tape = GradientTape::zeros_like(&params);
        let before = compute_loss(&model, &params, &target, &batch, &noise, &cfg, Some(&mut tape)).unwrap();
        let mut opt = RmsProp::new(
            &params,
            RmsPropConfig {
                lr: 1e-6,
                alpha: 0.99,
                eps: 1e-5,
                clip_norm: Some(10.0),
            },
        );
        let mut next = params.clone();
        opt.step(&mut next, &tape).unwrap();
        let after = compute_loss(&model, &next, &target, &batch, &noise, &cfg, None).unwrap();
        assert!(after.total < before.total, "init {init}: {} -> {}", before.total, after.total);
    }
}

#[test]
fn zero_lambda_is_the_ablation() {
    let env = small_env(6);
    let (model, params) = build(&env, &small_model(true), MixerKind::Vdn, 5);
    let params = jitter(&params, 0.05, 6);
    let data = episodes(&model, &params, &env, 3, 7);
    let refs: Vec<&EpisodeRecord> = data.iter().collect();
    let batch = SortedBatch::new(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = BatchNoise::sample(&model, &batch, false, &mut rng);
    let cfg = LossConfig {
        gamma: 0.99,
        lambda: 0.0,
        double_q: false,
        bootstrap_timeouts: false,
    };
    let mut tape = GradientTape::zeros_like(&params);
    let b = compute_loss(&model, &params, &params, &batch, &noise, &cfg, Some(&mut tape)).unwrap();
    assert_eq!(b.total.to_bits(), b.td_loss.to_bits());
    assert!(b.kl_sum > 0.0);

    let mut encoder_norm = 0.0;
    for id in params.ids() {
        let name = &params.tensor(id).name;
        let g = tape.grad(id);
        if name.starts_with("estimator") {
            assert!(g.iter().all(|&v| v == 0.0), "{name} received gradient at lambda 0");
        }
        if name.contains(".awareness") {
            encoder_norm += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    assert!(encoder_norm > 0.0, "encoder must still learn through the Q path");

    // Control: a positive lambda does reach the estimator.
    let with_kl = LossConfig { lambda: 0.5, ..cfg };
    let mut tape_kl = GradientTape::zeros_like(&params);
    compute_loss(&model, &params, &params, &batch, &noise, &with_kl, Some(&mut tape_kl)).unwrap();
    let est = params.ids().find(|&id| params.tensor(id).name.starts_with("estimator")).unwrap();
    assert!(tape_kl.grad(est).iter().any(|&v| v != 0.0));
}

#[test]
fn target_copies_only_on_interval_and_includes_the_encoder() {
    let env = small_env(6);
    let (_, online) = build(&env, &small_model(true), MixerKind::Qmix, 9);
    let mut online = online;
    let mut target = jitter(&online, 0.5, 10);
    let frozen = target.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for episode in 1..=12 {
        for id in online.ids().collect::<Vec<_>>() {
            for v in online.values_mut(id) {
                *v += rng.random_range(-0.01..0.01);
            }
        }
        let copied = update_target(&online, &mut target, episode, 5).unwrap();
        assert_eq!(copied, episode % 5 == 0);
        if copied {
            assert_eq!(target.max_abs_diff(&online), 0.0);
            let enc = online.id("agent.awareness.hidden.weight").unwrap();
            assert_eq!(target.values(enc), online.values(enc));
        } else if episode < 5 {
            assert_eq!(target, frozen);
        } else {
            assert!(target.max_abs_diff(&online) > 0.0);
        }
    }
}

struct Collect(Vec<LossBreakdown>);

impl RunObserver for Collect {
    fn on_train_step(&mut self, _: usize, _: usize, loss: &LossBreakdown) -> linda_core::Result<()> {
        self.0.push(loss.clone());
        Ok(())
    }
}

fn tiny_run(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.mixer = MixerKind::Qmix;
    cfg.env = small_env(12);
    cfg.model = small_model(true);
    cfg.train.batch_size = 4;
    cfg.train.buffer_capacity = 20;
    cfg.train.target_update_interval = 5;
    cfg.train.total_env_steps = 400;
    cfg.train.eval_interval = 200;
    cfg.train.eval_episodes = 3;
    cfg.train.lambda = 0.5;
    cfg
}

#[test]
fn identical_seeds_give_bitwise_identical_loss_sequences() {
    let run = |seed| {
        let mut t = Trainer::new(tiny_run(seed)).unwrap();
        let mut obs = Collect(Vec::new());
        let summary = t.run(&mut obs).unwrap();
        (obs.0, summary, t.learner.params)
    };
    let (a, sa, pa) = run(3);
    let (b, sb, pb) = run(3);
    assert!(a.len() > 10);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x.td_loss.to_bits(), y.td_loss.to_bits());
        assert_eq!(x.kl_sum.to_bits(), y.kl_sum.to_bits());
    }
    assert_eq!(sa, sb);
    assert_eq!(pa.max_abs_diff(&pb), 0.0);
    let (c, _, _) = run(4);
    assert_ne!(a, c);
    for l in a.iter().chain(&c) {
        assert_eq!(l.total, l.td_loss + l.lambda * l.kl_sum);
    }
}

#[test]
fn evaluation_ignores_training_only_networks() {
    let env = EnvConfig {
        seed: 21,
        ..small_env(15)
    };
    let (model, params) = build(&env, &small_model(true), MixerKind::Qplex, 22);
    let params = jitter(&params, 0.1, 23);
    let mut poisoned = params.clone();
    for id in poisoned.ids().collect::<Vec<_>>() {
        let name = poisoned.tensor(id).name.clone();
        if name.starts_with("estimator") || name.starts_with("mixer") {
            poisoned.values_mut(id).iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
    let clean = evaluate(&model.agent, &params, &env, 12, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let dirty = evaluate(&model.agent, &poisoned, &env, 12, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(clean, dirty);
    assert!(clean.returns.iter().all(|r| (0.0..=1.0).contains(r)));
    let again = evaluate(&model.agent, &params, &env, 12, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(clean, again);
}

#[test]
fn untrained_policy_on_a_large_grid_scores_near_zero() {
    let env = EnvConfig {
        grid_height: 16,
        grid_width: 16,
        ..EnvConfig::default()
    };
    let mut cfg = RunConfig::default();
    cfg.env = env.clone();
    let (model, params) = linda_core::trainer::Model::for_run(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let greedy = evaluate(&model.agent, &params, &env, 64, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();

    // Uniform random policy rollouts as the reference level.
    let mut lbf = LbfEnv::new(EnvConfig { seed: 3, ..env.clone() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut returns = Vec::new();
    for _ in 0..400 {
        lbf.reset();
        let mut ret = 0.0;
        loop {
            let joint: Vec<usize> = (0..2).map(|_| rng.random_range(0..6)).collect();
            let out = lbf.step(&joint).unwrap();
            ret += out.reward;
            if out.terminated {
                break;
            }
        }
        returns.push(ret);
    }
    let k = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / k;
    let se = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
    assert!(mean < 0.1, "random policy mean {mean}");
    assert!(greedy.mean <= (mean + 3.0 * se).max(0.1), "greedy {} vs random {mean}", greedy.mean);
}
