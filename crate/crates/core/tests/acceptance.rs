//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The exit status is zero
//! unless `GPN_ACCEPTANCE_STRICT=1` is set, in which case any FAIL makes
//! it non-zero.

mod common;

use std::time::Instant;

use gpn_core::agent::{state_utility, ActorCritic, AgentConfig, AgentModel};
use gpn_core::dungeon::{
    compile_level, curated_levels, Action, DungeonConfig, EndCause, LevelMap, RewardMode, NUM_TILES,
};
use gpn_core::generator::{
    diversity_update, generator_update, reconstruction_accuracy, reconstruction_update, sample_latents,
    GeneratorConfig, GeneratorModel, LevelCritic, WallCritic,
};
use gpn_core::tensor::{AdamState, Tape, Tensor};
use gpn_core::trainer::{
    elite_count, rank_and_keep_elites, run_agent_phase, stream_rng, Checkpoint, EnvPoolEntry, EnvRef, EnvSet,
    MetricsRow, RolloutWorker, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn c1_autodiff() -> Verdict {
    let cases = common::grad_cases::all();
    let mut worst = (String::new(), 0, 0.0);
    for (name, case) in &cases {
        let (seed, err) = common::grad_cases::worst(case);
        if err >= worst.2 {
            worst = (name.to_string(), seed, err);
        }
    }
    let tol = common::grad_cases::TOL;
    verdict(
        worst.2 < tol,
        format!(
            "{} op cases x {} seeds, worst rel err {:.2e} ({} seed {}) vs tol {tol:e}",
            cases.len(),
            common::grad_cases::SEEDS,
            worst.2,
            worst.0,
            worst.1
        ),
    )
}

fn c2_utility() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = rng.random_range(2..9);
        let logits: Vec<f64> = (0..a).map(|_| rng.random_range(-5.0..5.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let q: Vec<f64> = (0..a).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::<f64>::inference();
        let pv = tape.constant(Tensor::new(vec![1, a], p.clone()).unwrap());
        let qv = tape.constant(Tensor::new(vec![1, a], q.clone()).unwrap());
        let u = state_utility(&mut tape, pv, qv).unwrap();
        let dot: f64 = p.iter().zip(&q).map(|(x, y)| x * y).sum();
        worst = worst.max((tape.value(u).item() - dot).abs());
    }
    verdict(worst < 1e-6, format!("1000 random heads, max |U - p.Q| = {worst:.2e} vs tol 1e-6"))
}

fn play(text: &str, cfg: &DungeonConfig, actions: &[Action]) -> Vec<(f64, bool, Option<EndCause>)> {
    let mut s = compile_level(&LevelMap::parse(text).unwrap(), cfg).reset(0);
    actions
        .iter()
        .map(|&a| {
            let o = s.step::<f64>(a).unwrap();
            (o.reward, o.terminal, o.cause)
        })
        .collect()
}

fn c3_rewards() -> Verdict {
    let pure = DungeonConfig {
        monster_move_prob: 0.0,
        ..DungeonConfig::default()
    };
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: Vec<(f64, bool, Option<EndCause>)>, want: Vec<(f64, bool, Option<EndCause>)>| {
        if got != want {
            failures.push(format!("{name}: got {got:?}"));
        }
    };
    expect(
        "win",
        play("A+g", &pure, &[Action::Right, Action::Right]),
        vec![(0.0, false, None), (1.0, true, Some(EndCause::Win))],
    );
    expect(
        "monster",
        play("Ae+g", &pure, &[Action::Right]),
        vec![(-1.0, true, Some(EndCause::Monster))],
    );
    let short = DungeonConfig {
        step_limit: 3,
        ..pure.clone()
    };
    expect(
        "timeout",
        play("A.+g", &short, &[Action::Left, Action::Left, Action::Left]),
        vec![(0.0, false, None), (0.0, false, None), (-1.0, true, Some(EndCause::Timeout))],
    );
    expect(
        "invalid",
        play("A.g", &pure, &[Action::Right]),
        vec![(-1.0, true, Some(EndCause::Invalid))],
    );
    let shaped = DungeonConfig {
        reward_mode: RewardMode::Shaped,
        ..pure.clone()
    };
    let level = compile_level(&LevelMap::parse("A+ge").unwrap(), &shaped);
    let n = level.reset(0).events_available() as f64;
    expect(
        "shaped key",
        play("A+ge", &shaped, &[Action::Right]),
        vec![(1.0 / n, false, None)],
    );
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("win +1, monster -1, timeout -1, invalid -1 after 1 frame, shaped key 1/{n} all exact")
        } else {
            failures.join("; ")
        },
    )
}

/// 1x5 corridor, 16 workers, 50k steps. The critic rate is raised from
/// its default so the value estimate can keep up at this scale.
fn c4_corridor() -> Verdict {
    let level = LevelMap::parse("A.+.g").unwrap();
    let curated = [compile_level(&level, &DungeonConfig::default())];
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = AgentModel::<f32>::new(AgentConfig::default(), NUM_TILES + 1, 1, 5, &mut rng);
        let mut learner = ActorCritic::new(model, 2.5e-4, 1e-3, 0.01);
        let mut workers: Vec<RolloutWorker<f32>> =
            (0..16).map(|w| RolloutWorker::new(stream_rng(seed, 0, w))).collect();
        let envs = EnvSet {
            pool: &[],
            curated: &curated,
        };
        let stats =
            run_agent_phase(&mut learner, None, &mut workers, envs, 50_000, 5, |_| Some(EnvRef::Curated(0))).unwrap();
        let last = &stats.episodes[stats.episodes.len().saturating_sub(500)..];
        let win = last.iter().filter(|e| e.won()).count() as f64 / last.len() as f64;
        let mean = last.iter().map(|e| e.reward).sum::<f64>() / last.len() as f64;
        let u0 = learner.model.evaluate_one(&curated[0].initial_observation()).unwrap().utility;
        let gap = (u0 - mean).abs();
        passed += (win >= 0.9 && gap <= 0.15) as usize;
        lines.push(format!("s{seed} win {win:.3} gap {gap:.3}"));
    }
    verdict(passed >= 4, format!("{passed}/5 seeds (need 4) with win >= 0.9 and gap <= 0.15: {}", lines.join(", ")))
}

fn desk_generator() -> GeneratorConfig {
    GeneratorConfig {
        filters: 16,
        ..GeneratorConfig::default()
    }
}

fn mean_abs_u(gen: &GeneratorModel<f32>, z: &Tensor<f32>, rng: &mut ChaCha8Rng) -> f64 {
    let probs = gen.generate(z, false, rng).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(probs);
    let u = WallCritic.level_utility(&mut tape, x).unwrap();
    let v = tape.value(u);
    v.data().iter().map(|x| x.abs() as f64).sum::<f64>() / v.len() as f64
}

/// 500 updates of batch 32 at the default generator rate; mean |U| on 128
/// held-out latents, averaged over 5 seeds.
fn c5_targeting() -> Verdict {
    let mut before = Vec::new();
    let mut after = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = GeneratorModel::<f32>::new(desk_generator(), &mut rng);
        let mut opt = AdamState::new(&gen.store, gen.ids(), 1e-4);
        let held_out = sample_latents(128, 64, &mut ChaCha8Rng::seed_from_u64(1000 + seed));
        before.push(mean_abs_u(&gen, &held_out, &mut rng));
        for _ in 0..500 {
            generator_update(&mut gen, &mut opt, &WallCritic, 32, &mut rng).unwrap();
        }
        after.push(mean_abs_u(&gen, &held_out, &mut rng));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (b, a) = (mean(&before), mean(&after));
    let per: Vec<String> = after.iter().map(|x| format!("{x:.3}")).collect();
    verdict(a <= 0.1, format!("mean |U| {b:.3} -> {a:.3} (tol 0.1), per seed [{}]", per.join(", ")))
}

fn pairwise_spread(gen: &GeneratorModel<f32>, agent: &AgentModel<f32>, z: &Tensor<f32>, rng: &mut ChaCha8Rng) -> f64 {
    let probs = gen.generate(z, false, rng).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(probs);
    let h = agent.level_encoding(&mut tape, x).unwrap();
    let h = tape.value(h);
    let (m, d) = (h.shape()[0], h.shape()[1]);
    let row = |i: usize| &h.data()[i * d..(i + 1) * d];
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            total += row(i).iter().zip(row(j)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        }
    }
    total / (m * (m - 1) / 2) as f64
}

fn c6_diversity() -> Verdict {
    let mut passed = 0;
    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = GeneratorModel::<f32>::new(desk_generator(), &mut rng);
        let agent = AgentModel::<f32>::new(AgentConfig::default(), NUM_TILES + 1, 12, 16, &mut rng);
        let mut opt = AdamState::new(&gen.store, gen.ids(), 1e-4);
        let probe = sample_latents(32, 64, &mut ChaCha8Rng::seed_from_u64(2000 + seed));
        let start = pairwise_spread(&gen, &agent, &probe, &mut rng);
        for _ in 0..50 {
            diversity_update(&mut gen, &mut opt, &agent, 32, &mut rng).unwrap();
        }
        let end = pairwise_spread(&gen, &agent, &probe, &mut rng);
        let r = end / start;
        passed += (r >= 1.5) as usize;
        ratios.push(format!("{r:.2}"));
    }
    verdict(passed >= 4, format!("{passed}/5 seeds (need 4) reach 1.5x spread, ratios [{}]", ratios.join(", ")))
}

fn c7_elites() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dungeon = DungeonConfig::default();
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..24);
        let pool: Vec<EnvPoolEntry> = (0..m)
            .map(|_| {
                let mut e = EnvPoolEntry::new(LevelMap::parse("A+g").unwrap(), &dungeon);
                for _ in 0..rng.random_range(0..4) {
                    e.record([-1.0, 1.0, 0.0, 0.5, -0.5][rng.random_range(0..5)]);
                }
                e
            })
            .collect();
        let fraction = rng.random_range(0.0..1.0);
        // Brute force: full sort on (|avg|, more episodes, lower index).
        let mut played: Vec<(f64, i64, usize)> = pool
            .iter()
            .enumerate()
            .filter(|(_, e)| e.episodes > 0)
            .map(|(i, e)| (e.average_reward().unwrap().abs(), -(e.episodes as i64), i))
            .collect();
        played.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ties += played.windows(2).filter(|w| w[0].0 == w[1].0).count();
        let want: Vec<usize> = played.iter().take(elite_count(fraction, m)).map(|p| p.2).collect();
        mismatches += (rank_and_keep_elites(&pool, fraction) != want) as usize;
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches on 1000 random pools ({ties} tied neighbours exercised)"))
}

/// 2000 joint updates at the default reconstruction rate, generator
/// width 32, three seeds.
fn c8_reconstruction() -> Verdict {
    let dungeon = DungeonConfig::default();
    let obs: Vec<Tensor<f32>> = curated_levels()
        .iter()
        .map(|l| compile_level(l, &dungeon).initial_observation())
        .collect();
    let refs: Vec<&Tensor<f32>> = obs.iter().collect();
    let lr = TrainConfig::default().lr_recon;
    let mut accs = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = GeneratorModel::<f32>::new(GeneratorConfig { filters: 32, ..Default::default() }, &mut rng);
        let mut agent = AgentModel::<f32>::new(AgentConfig::default(), NUM_TILES + 1, 12, 16, &mut rng);
        let mut gopt = AdamState::new(&gen.store, gen.ids(), lr);
        let mut eopt = AdamState::new(&agent.store, agent.encoder_ids(), lr);
        for _ in 0..2000 {
            reconstruction_update(&mut gen, &mut agent, &mut gopt, &mut eopt, &refs, &mut rng).unwrap();
        }
        accs.push(reconstruction_accuracy(&gen, &agent, &refs, &mut rng).unwrap());
    }
    let worst = accs.iter().cloned().fold(1.0, f64::min);
    let per: Vec<String> = accs.iter().map(|a| format!("{a:.4}")).collect();
    verdict(worst >= 0.95, format!("per-cell accuracy [{}], worst {worst:.4} vs 0.95", per.join(", ")))
}

fn desk_run(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        frames: 200_000,
        steps_per_iteration: 10_000,
        batch_size: 32,
        gen_filters: 16,
        ..TrainConfig::default()
    }
}

fn c9_trend() -> Verdict {
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let cfg = desk_run(seed);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.pretrain().unwrap();
        let mut rows: Vec<MetricsRow> = Vec::new();
        while t.frames < cfg.frames {
            rows.push(t.iteration().unwrap().metrics);
        }
        let third = (rows.len() / 3).max(1);
        let mean_abs = |rs: &[MetricsRow]| rs.iter().map(|r| r.mean_real_reward.abs()).sum::<f64>() / rs.len() as f64;
        let (f0, f1) = (rows[0].failure_rate, rows[rows.len() - 1].failure_rate);
        let (r0, r1) = (mean_abs(&rows[..third]), mean_abs(&rows[rows.len() - third..]));
        let ok = f1 < f0 && r1 < r0;
        passed += ok as usize;
        lines.push(format!(
            "s{seed} {} it fail {f0:.3}->{f1:.3} |R| {r0:.3}->{r1:.3}",
            rows.len()
        ));
    }
    verdict(passed >= 3, format!("{passed}/5 seeds (need 3): {}", lines.join(", ")))
}

fn tiny_run() -> TrainConfig {
    TrainConfig {
        workers: 1,
        steps_per_iteration: 500,
        batch_size: 8,
        generator_updates: 2,
        diversity_updates: 4,
        gen_filters: 8,
        encoding_dim: 16,
        latent_dim: 16,
        ..TrainConfig::default()
    }
}

fn c10_determinism() -> Verdict {
    let cfg = tiny_run();
    let first = |cfg: &TrainConfig| Trainer::new(cfg.clone()).unwrap().iteration().unwrap().metrics;
    let (a, b) = (first(&cfg), first(&cfg));
    let repeat = a.same_run_as(&b);

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    straight.iteration().unwrap();
    let want = straight.iteration().unwrap().metrics;
    let mut half = Trainer::new(cfg).unwrap();
    half.iteration().unwrap();
    let bytes = half.to_checkpoint().to_bytes();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let got = resumed.iteration().unwrap().metrics;
    let resume = got.same_run_as(&want);
    let params = (0..straight.generator.store.len())
        .all(|id| straight.generator.store.value(id) == resumed.generator.store.value(id))
        && (0..straight.learner.model.store.len())
            .all(|id| straight.learner.model.store.value(id) == resumed.learner.model.store.value(id));
    verdict(
        repeat && resume && params,
        format!("repeat run identical: {repeat}; resumed metrics identical: {resume}; resumed params identical: {params}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("autodiff oracle", c1_autodiff),
        ("utility inner product", c2_utility),
        ("reward contract", c3_rewards),
        ("undiscounted value propagation", c4_corridor),
        ("generator targeting", c5_targeting),
        ("diversity", c6_diversity),
        ("elitism", c7_elites),
        ("reconstruction", c8_reconstruction),
        ("end-to-end trend", c9_trend),
        ("determinism and resume", c10_determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("GPN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let v = run();
        failed += !v.pass as usize;
        println!(
            "criterion {n:>2} {:<32} {} ({:.1}s) {}",
            name,
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed > 0 && std::env::var("GPN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
