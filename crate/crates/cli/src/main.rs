use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mais_core::alloc::{HeapProbe, TrackingAllocator};
use mais_core::archive::write_atomic;
use mais_core::bench::{
    ablate_prompt_types, corpus, cost_csv, cost_harness, count_params, curves_csv, evaluate_curve,
    reference_param_csv, sweep_memory_size, table_grid, Case, ExperimentConfig, Method, ModelZoo, ABLATION_BUDGETS,
    COST_CONFIGS, COST_INTERACTIONS, MEMORY_SIZES, TABLE_BUDGETS,
};
use mais_core::engine::init_params;
use mais_core::memory::MemoryMode;
use mais_core::params::ParamStore;
use mais_core::training::train;
use mais_core::volcore::{gen_synthetic_with, read_vvol, write_vvol, SynthOptions};
use serde::Serialize;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "mais", version, about = "Memory-attention interactive 3D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Serialize)]
struct Common {
    /// Experiment configuration (JSON); missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct Data {
    /// Directory of labelled `.vvol` files used for evaluation (default: synthetic corpus).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of labelled `.vvol` files used for training (default: synthetic pool).
    #[arg(long)]
    train_data: Option<PathBuf>,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Train one model; writes loss.csv, checkpoints and the run config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Dice-vs-clicks curve of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50")]
        budgets: Vec<usize>,
    },
    /// Curves for a range of memory-bank sizes.
    SweepMemory {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        budgets: Vec<usize>,
        /// Volumes to train on (default: the whole pool).
        #[arg(long)]
        train_size: Option<usize>,
        /// Train one model per size instead of sharing weights across sizes.
        #[arg(long)]
        per_size: bool,
    },
    /// Curves per memory mode and train size.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<MemoryMode>>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        train_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
    /// Dice grid over click budgets and train fractions.
    Table {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1.0")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
    /// Parameter breakdown per component.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Training and inference cost per memory configuration.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Labelled `.vvol` workload (default: first corpus volume).
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long, default_value_t = COST_INTERACTIONS)]
        interactions: usize,
    },
    /// Write labelled synthetic volumes as `.vvol` files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cube edge length.
        #[arg(long, default_value_t = 32)]
        edge: usize,
        #[arg(long, default_value_t = 0)]
        distractors: usize,
    },
    /// Serve the session API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained parameters; untrained weights when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "MAIS_DATA_DIR", default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vvol"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .vvol files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let (v, m) = read_vvol(p).with_context(|| format!("reading {}", p.display()))?;
            let m = m.with_context(|| format!("{} has no label", p.display()))?;
            Ok((v, m))
        })
        .collect()
}

fn eval_cases(data: Option<&Path>, cfg: &ExperimentConfig) -> Result<Vec<Case>> {
    match data {
        Some(d) => load_cases(d),
        None => Ok(corpus(cfg.distractors)?),
    }
}

fn zoo(cfg: &ExperimentConfig, train_data: Option<&Path>) -> Result<ModelZoo> {
    let z = match train_data {
        Some(d) => ModelZoo::with_pool(cfg.clone(), load_cases(d)?)?,
        None => ModelZoo::new(cfg.clone())?,
    };
    Ok(z.with_observer(|line| eprintln!("{line}")))
}

#[derive(Serialize)]
struct Snapshot<'a> {
    version: &'static str,
    command: &'a Command,
    config: Option<&'a ExperimentConfig>,
}

fn prepare_out(out: &Path, command: &Command, config: Option<&ExperimentConfig>) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let snap = Snapshot { version: env!("CARGO_PKG_VERSION"), command, config };
    write_atomic(&out.join("run_config.json"), &serde_json::to_vec_pretty(&snap)?)?;
    Ok(())
}

fn write_output(out: &Path, name: &str, contents: &str) -> Result<()> {
    let path = out.join(name);
    write_atomic(&path, contents.as_bytes())?;
    print!("{contents}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    TrackingAllocator::activate();
    let cli = Cli::parse();
    let command = &cli.command;
    match command {
        Command::Train { common, train_data } => {
            let cfg = load_config(common.config.as_deref())?;
            prepare_out(&common.out, command, Some(&cfg))?;
            let data = match train_data {
                Some(d) => load_cases(d)?,
                None => mais_core::bench::training_pool(cfg.pool, cfg.distractors)?,
            };
            let tc = mais_core::training::TrainConfig { seed: common.seed, ..cfg.train.clone() };
            let init = init_params(&cfg.engine, common.seed)?;
            let start = Instant::now();
            let out = train(&data, &tc, &cfg.engine, init, Some(&common.out), |e| {
                eprintln!("epoch {:>4} loss {:.5} lr {:.2e}/{:.2e} [{:.0}s]", e.epoch, e.loss, e.lr_main, e.lr_mem, start.elapsed().as_secs_f64())
            })?;
            eprintln!("trained {} steps; final checkpoint in {}", out.params.trained_steps, common.out.display());
        }
        Command::Eval { common, checkpoint, data, budgets } => {
            let cfg = load_config(common.config.as_deref())?;
            prepare_out(&common.out, command, Some(&cfg))?;
            let params = ParamStore::load(checkpoint)?;
            let cases = eval_cases(data.as_deref(), &cfg)?;
            let curve = evaluate_curve(cfg.engine.memory.mode.as_str(), &cases, &cfg.engine, &params, budgets, common.seed)?;
            write_output(&common.out, "eval.csv", &curves_csv(&[curve]))?;
        }
        Command::SweepMemory { common, data, sizes, budgets, train_size, per_size } => {
            let mut cfg = load_config(common.config.as_deref())?;
            cfg.shared_size_weights = !per_size;
            prepare_out(&common.out, command, Some(&cfg))?;
            let cases = eval_cases(data.data.as_deref(), &cfg)?;
            let mut zoo = zoo(&cfg, data.train_data.as_deref())?;
            let n = train_size.unwrap_or(zoo.pool().len());
            let sizes = sizes.clone().unwrap_or(MEMORY_SIZES.to_vec());
            let curves = sweep_memory_size(&sizes, &cases, &mut zoo, n, budgets, common.seed)?;
            write_output(&common.out, "sweep_memory.csv", &curves_csv(&curves))?;
        }
        Command::Ablate { common, data, modes, train_sizes, budgets } => {
            let cfg = load_config(common.config.as_deref())?;
            prepare_out(&common.out, command, Some(&cfg))?;
            let cases = eval_cases(data.data.as_deref(), &cfg)?;
            let mut zoo = zoo(&cfg, data.train_data.as_deref())?;
            let modes = modes.clone().unwrap_or(MemoryMode::ALL.to_vec());
            let budgets = budgets.clone().unwrap_or(ABLATION_BUDGETS.to_vec());
            let grid = ablate_prompt_types(&modes, train_sizes, &budgets, &cases, &mut zoo, common.seed)?;
            let curves: Vec<_> = grid.into_iter().map(|c| c.curve).collect();
            write_output(&common.out, "ablation.csv", &curves_csv(&curves))?;
        }
        Command::Table { common, data, fractions, budgets } => {
            let cfg = load_config(common.config.as_deref())?;
            prepare_out(&common.out, command, Some(&cfg))?;
            let cases = eval_cases(data.data.as_deref(), &cfg)?;
            let mut zoo = zoo(&cfg, data.train_data.as_deref())?;
            let budgets = budgets.clone().unwrap_or(TABLE_BUDGETS.to_vec());
            let grid = table_grid(fractions, &budgets, &Method::ALL, &cases, &mut zoo, common.seed)?;
            write_output(&common.out, "table.csv", &grid.to_csv())?;
        }
        Command::Params { common, checkpoint } => {
            let cfg = load_config(common.config.as_deref())?;
            prepare_out(&common.out, command, Some(&cfg))?;
            let params = match checkpoint {
                Some(p) => ParamStore::load(p)?,
                None => init_params(&cfg.engine, common.seed)?,
            };
            write_output(&common.out, "params.csv", &count_params(&params).to_csv())?;
            write_atomic(&common.out.join("params_reference.csv"), reference_param_csv().as_bytes())?;
        }
        Command::Cost { common, volume, interactions } => {
            let cfg = load_config(common.config.as_deref())?;
            prepare_out(&common.out, command, Some(&cfg))?;
            let case = match volume {
                Some(p) => {
                    let (v, m) = read_vvol(p)?;
                    (v, m.context("workload volume has no label")?)
                }
                None => corpus(cfg.distractors)?.swap_remove(0),
            };
            let rows =
                cost_harness(&COST_CONFIGS, &case, &cfg.engine, &cfg.train, *interactions, common.seed, &HeapProbe)?;
            write_output(&common.out, "cost.csv", &cost_csv(&rows))?;
        }
        Command::GenData { out, count, seed, edge, distractors } => {
            std::fs::create_dir_all(out)?;
            for s in *seed..seed + count {
                let opts = SynthOptions { distractors: *distractors, ..SynthOptions::blobs(1 + (s % 3) as usize) };
                let (v, m) = gen_synthetic_with(s, [*edge; 3], opts)?;
                write_vvol(&v, Some(&m), &out.join(format!("synth_{s:04}.vvol")))?;
            }
            eprintln!("wrote {count} volumes to {}", out.display());
        }
        Command::Serve { config, checkpoint, port, host, data_dir, seed } => {
            let cfg = load_config(config.as_deref())?;
            let params = match checkpoint {
                Some(p) => ParamStore::load(p)?,
                None => init_params(&cfg.engine, *seed)?,
            };
            std::fs::create_dir_all(data_dir)?;
            let state = mais_service::AppState::new(cfg.engine, params, data_dir.clone())?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host/port")?;
            eprintln!("listening on http://{addr}, data dir {}", data_dir.display());
            tokio::runtime::Runtime::new()?.block_on(mais_service::serve(state, addr))?;
        }
    }
    Ok(())
}
