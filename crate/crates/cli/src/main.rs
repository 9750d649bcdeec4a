use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gpn_core::agent::ActMode;
use gpn_core::dungeon::{compile_level, LevelMap};
use gpn_core::trainer::{
    evaluate_level, read_metrics, run_training, stream_rng, Checkpoint, Mode, RunOptions, TrainConfig, Trainer,
};

mod plot;

static STOP: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "gpn", version, about = "Train a level generator against a game-playing agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop.
    Train(TrainArgs),
    /// Write generated levels from a checkpoint.
    Sample(SampleArgs),
    /// Print levels as text.
    Render(RenderArgs),
    /// Play levels with a checkpoint's agent.
    Eval(EvalArgs),
    /// Draw SVG charts from a metrics CSV.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-size preset instead of the desk defaults.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Frame budget.
    #[arg(long)]
    frames: Option<u64>,
    /// Output directory; `GPN_OUT` takes precedence.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Directory of curated `.lvl` files.
    #[arg(long)]
    curated: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Stop after this many iterations.
    #[arg(long)]
    max_iterations: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 9)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    /// A `.lvl` file or a directory of them.
    path: PathBuf,
    /// For a directory, also write the grid montage here.
    #[arg(long)]
    montage: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    levels: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Always take the most likely action.
    #[arg(long)]
    greedy: bool,
    /// Report CSV path; printed to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let base = if a.paper_scale {
        TrainConfig::paper_scale()
    } else {
        TrainConfig::default()
    };
    let mut cfg = match &a.config {
        Some(p) => base.load_over(p)?,
        None => base,
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(f) = a.frames {
        cfg.frames = f;
    }
    if let Some(c) = a.curated {
        cfg.curated = Some(c);
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let out = std::env::var_os("GPN_OUT").map(PathBuf::from).unwrap_or(a.out);
    ctrlc::set_handler(|| {
        eprintln!("interrupt: finishing the current iteration");
        STOP.store(true, Ordering::SeqCst);
    })
    .context("installing interrupt handler")?;
    let summary = run_training(
        cfg,
        RunOptions {
            out_dir: out.clone(),
            resume: a.resume,
            stop: Some(&STOP),
            max_iterations: a.max_iterations,
        },
    )?;
    println!(
        "{} iterations, {} frames{}; output in {}",
        summary.iterations,
        summary.frames,
        if summary.stopped_early { " (stopped)" } else { "" },
        out.display()
    );
    Ok(())
}

fn load_trainer(path: &Path) -> Result<Trainer> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Trainer::from_checkpoint(&ck)?)
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let t = load_trainer(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = String::from("file,valid,estimated_u\n");
    let mut valid = 0;
    if a.count > 0 {
        let mut rng = stream_rng(a.seed, 0, 0);
        let (levels, _) = t.generate_levels(a.count, &mut rng)?;
        let dungeon = t.config.dungeon();
        let compiled: Vec<_> = levels.iter().map(|l| compile_level(l, &dungeon)).collect();
        let obs: Vec<_> = compiled.iter().map(|c| c.initial_observation::<f32>()).collect();
        let evals = t.learner.model.evaluate(&obs.iter().collect::<Vec<_>>())?;
        for (i, (c, e)) in compiled.iter().zip(&evals).enumerate() {
            let name = format!("level_{i:03}.lvl");
            let p = a.out.join(&name);
            std::fs::write(&p, c.level().render()).with_context(|| format!("writing {}", p.display()))?;
            valid += c.is_valid() as usize;
            manifest.push_str(&format!("{name},{},{}\n", c.is_valid(), e.utility));
        }
    }
    let p = a.out.join("manifest.csv");
    std::fs::write(&p, manifest).with_context(|| format!("writing {}", p.display()))?;
    let n = a.count.max(1) as f64;
    println!(
        "{} levels: {:.1}% valid, {:.1}% invalid",
        a.count,
        if a.count == 0 { 0.0 } else { 100.0 * valid as f64 / n },
        if a.count == 0 { 0.0 } else { 100.0 * (a.count - valid) as f64 / n },
    );
    Ok(())
}

fn level_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lvl"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Lays levels out on a square-ish grid, one blank column and row
/// between neighbours.
fn montage(levels: &[LevelMap]) -> String {
    if levels.is_empty() {
        return String::new();
    }
    let cols = (levels.len() as f64).sqrt().ceil() as usize;
    let h = levels.iter().map(|l| l.height()).max().unwrap_or(0);
    let w = levels.iter().map(|l| l.width()).max().unwrap_or(0);
    let mut out = String::new();
    for (r, row) in levels.chunks(cols).enumerate() {
        if r > 0 {
            out.push('\n');
        }
        let rendered: Vec<Vec<String>> = row
            .iter()
            .map(|l| l.render().lines().map(str::to_string).collect())
            .collect();
        for y in 0..h {
            let line: Vec<String> = rendered
                .iter()
                .map(|lines| format!("{:<w$}", lines.get(y).map(String::as_str).unwrap_or("")))
                .collect();
            out.push_str(line.join(" ").trim_end());
            out.push('\n');
        }
    }
    out
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    if a.path.is_dir() {
        let paths = level_files(&a.path)?;
        let levels = paths
            .iter()
            .map(|p| LevelMap::load(p).map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?;
        for (p, l) in paths.iter().zip(&levels) {
            println!("{}", p.file_name().unwrap_or_default().to_string_lossy());
            print!("{}", l.render());
            println!();
        }
        if let Some(m) = a.montage {
            std::fs::write(&m, montage(&levels)).with_context(|| format!("writing {}", m.display()))?;
        }
    } else {
        if a.montage.is_some() {
            bail!("--montage needs a directory of levels");
        }
        print!("{}", LevelMap::load(&a.path)?.render());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let t = load_trainer(&a.checkpoint)?;
    let paths = if a.levels.is_dir() { level_files(&a.levels)? } else { vec![a.levels.clone()] };
    let dungeon = t.config.dungeon();
    let mode = if a.greedy { ActMode::Greedy } else { ActMode::Sample };
    let [_, h, w] = t.learner.model.observation_shape();
    let mut csv = String::from("level,valid,episodes,win_rate,mean_reward,mean_frames,estimated_u0,gap\n");
    let (mut wins, mut reward, mut u0, mut gap) = (0.0, 0.0, 0.0, 0.0);
    for (i, p) in paths.iter().enumerate() {
        let level = LevelMap::load(p)?;
        if (level.height(), level.width()) != (h, w) {
            bail!(
                "{}: level is {}x{}, the agent plays {h}x{w}",
                p.display(),
                level.height(),
                level.width()
            );
        }
        let r = evaluate_level(&t.learner.model, &compile_level(&level, &dungeon), a.episodes, a.seed + i as u64, mode)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.file_name().unwrap_or_default().to_string_lossy(),
            r.valid,
            r.episodes,
            r.win_rate,
            r.mean_reward,
            r.mean_frames,
            r.estimated_u0,
            r.gap
        ));
        wins += r.win_rate;
        reward += r.mean_reward;
        u0 += r.estimated_u0;
        gap += r.gap;
    }
    let n = paths.len().max(1) as f64;
    csv.push_str(&format!(
        "ALL,,{},{},{},,{},{}\n",
        a.episodes * paths.len(),
        wins / n,
        reward / n,
        u0 / n,
        gap / n
    ));
    match a.out {
        Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let rows = read_metrics(&a.metrics).with_context(|| format!("reading {}", a.metrics.display()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, svg) in plot::charts(&rows) {
        let p = a.out.join(name);
        std::fs::write(&p, svg).with_context(|| format!("writing {}", p.display()))?;
        println!("{}", p.display());
    }
    Ok(())
}
