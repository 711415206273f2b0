use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfe3d::alloc::CountingAlloc;
use rfe3d::config::Config;
use rfe3d::harness::{self, bench::CSV_HEADER, GRADCHECK_TOL};
use rfe3d::model::Model;
use rfe3d::tensor::checkpoint::Checkpoint;
use rfe3d::tensor::gradcheck::GradcheckOptions;
use rfe3d::tensor::nn::ParamStore;
use rfe3d::{Error, Result};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Debug, Parser)]
#[command(name = "rfe3d", version, about = "Desk-scale ROI refinement experiments")]
struct Cli {
    /// Flat `key = value` overrides on top of the desk preset (the tiny
    /// gradient-check instance for `gradcheck`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes `scene_NNNNN.json` files.
    GenScenes {
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Trains on a scene directory; writes `trace.csv`, `checkpoint.json`
    /// and the resolved `config.txt`.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scores a checkpoint; writes `eval.json`.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Times ROI feature computation; writes `bench.csv`.
    Bench,
    /// Finite-difference check of every parameter group; writes
    /// `gradcheck.json` and fails when any group exceeds the tolerance.
    Gradcheck,
    /// Paired vector-versus-multihead study; writes `ablation.json`.
    Ablate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

/// `base` with the config file's assignments and `--seed` applied.
fn load_config(cli: &Cli, mut cfg: Config) -> Result<Config> {
    if let Some(path) = &cli.config {
        cfg.apply(&fs::read_to_string(path)?)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// `Ok(false)` marks a completed run whose check failed.
fn run(cli: &Cli) -> Result<bool> {
    let base = match cli.command {
        Command::Gradcheck => harness::gradcheck_config(),
        _ => Config::desk(),
    };
    let cfg = load_config(cli, base)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::GenScenes { count } => {
            let scenes = harness::gen_scenes(&cfg.scene, cfg.seed, *count)?;
            let paths = harness::write_scenes(out, &scenes)?;
            println!("wrote {} scenes to {}", paths.len(), out.display());
        }
        Command::Train { scenes, resume } => {
            let scenes = harness::load_scenes(scenes)?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let outcome = harness::train(&cfg, &scenes, Some(out), resume.as_ref())?;
            match outcome.trace.last() {
                Some(last) => {
                    println!("step {} total {:.6} refine {:.6} aux {:.6}", last.step, last.total, last.refine, last.aux)
                }
                None => println!("nothing to do: already at step {}", outcome.trainer.step),
            }
        }
        Command::Eval { scenes, checkpoint } => {
            let scenes = harness::load_scenes(scenes)?;
            let mut store = ParamStore::new();
            let model = Model::new(&mut store, cfg.model.clone(), cfg.seed)?;
            Checkpoint::load(checkpoint)?.load_into(&mut store)?;
            let report = harness::evaluate(&model, &store, &scenes, &cfg)?;
            write_json(&out.join("eval.json"), &report)?;
            for (class, ap) in &report.ap {
                match ap {
                    Some(ap) => println!("AP40 {class}: {ap:.2}"),
                    None => println!("AP40 {class}: absent"),
                }
            }
            println!(
                "mean IoU refined {:.4} proposal {:.4} gain {:+.4} over {} boxes",
                report.mean_iou_refined,
                report.mean_iou_proposal,
                report.iou_gain(),
                report.matched
            );
        }
        Command::Bench => {
            let rows = harness::bench(&cfg.bench, cfg.seed)?;
            let mut csv = format!("{CSV_HEADER}\n");
            for row in &rows {
                csv.push_str(&row.csv());
                csv.push('\n');
            }
            fs::write(out.join("bench.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Gradcheck => {
            let start = std::time::Instant::now();
            let report = harness::run_gradcheck(&cfg, &GradcheckOptions { seed: cfg.seed, ..Default::default() })?;
            write_json(&out.join("gradcheck.json"), &report)?;
            for (group, g) in &report.groups {
                let verdict = if g.max_rel_err < GRADCHECK_TOL { "ok" } else { "FAIL" };
                println!(
                    "{group:<10} max rel err {:.3e} over {} coords ({} skipped at kinks) {verdict}",
                    g.max_rel_err, g.checked, g.skipped
                );
            }
            println!("{:.1?}", start.elapsed());
            return Ok(report.passes(GRADCHECK_TOL));
        }
        Command::Ablate { scenes, seeds } => {
            let scenes = harness::load_scenes(scenes)?;
            let report = harness::ablate(&cfg, &scenes, seeds)?;
            write_json(&out.join("ablation.json"), &report)?;
            for r in &report.rows {
                println!("seed {} vector {:.4} multihead {:.4} proposal {:.4}", r.seed, r.vector, r.multihead, r.proposal);
            }
            println!("mean vector - multihead {:+.4}", report.mean_diff);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
