//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{load_dataset, save_dataset, DatasetMeta, LabeledImage, SemiDataset};
use crate::error::{Error, Result};
use crate::eval::{interpolate, sample_joint, write_pgm_strip, Emit};
use crate::nn::ModelParams;
use crate::train::{append_ledger, metrics_row, write_ledger, Checkpoint, Mode, Trainer};
use crate::verify::{run_all, Budget};

#[derive(Parser, Debug)]
#[command(name = "hvae", version, about = "Hybrid VAE: generative models of images and continuous labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (HVDS); --seed sets the scene seed.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, writing model.hvck and ledger.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// HVDS dataset; synthesized from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint, appending to the existing ledger.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step (the budget itself is unchanged).
        #[arg(long)]
        until: Option<u64>,
    },
    /// Evaluate a checkpoint and append a row to eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw (d, h) pairs from the model, writing samples.hvds and samples.pgm.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Emit decoder draws instead of decoder means.
        #[arg(long)]
        draw: bool,
    },
    /// Decode a latent path between two test records.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        src: usize,
        #[arg(long, default_value_t = 1)]
        dst: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Run the quadrature, gradient and invariant suites.
    Verify {
        /// Random model draws per bound-validity check.
        #[arg(long, default_value_t = 10)]
        draws: usize,
    },
    /// Train one model per (n, m) cell and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Cells as "n1:m1,n2:m2,..."; m = 0 trains a labeled-only model.
        #[arg(long)]
        pairs: String,
        /// Train cells concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

/// Runs the CLI and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(dir: &Path) -> Result<&Path> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn dataset(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> Result<SemiDataset> {
    match data {
        Some(p) => load_dataset(p),
        None => cfg.dataset(),
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::GenData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.scene.seed = s;
            }
            let dir = out_dir(&cfg.output_dir)?;
            let ds = cfg.dataset()?;
            let path = dir.join("dataset.hvds");
            save_dataset(&ds, &path)?;
            println!("wrote {} ({} labeled, {} unlabeled, {} test)", path.display(), ds.labeled.len(), ds.unlabeled.len(), ds.test.len());
        }
        Command::Train { common, mode, data, resume, until } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            let ds = dataset(&cfg, &data)?;
            let dir = out_dir(&cfg.output_dir)?;
            let ledger = dir.join("ledger.csv");
            let mut trainer = match &resume {
                Some(p) => Trainer::resume(&ds, cfg.train.clone(), Checkpoint::load_expecting(p, cfg.dims())?)?,
                None => Trainer::new(&ds, cfg.train.clone(), cfg.init_params()?)?,
            };
            let rows = trainer.run_until(until.unwrap_or(u64::MAX))?;
            if resume.is_some() {
                append_ledger(&ledger, &rows)?;
            } else {
                write_ledger(&ledger, &rows)?;
            }
            let ckpt = dir.join("model.hvck");
            trainer.checkpoint().save(&ckpt)?;
            if let Some(last) = rows.last() {
                println!("step {}/{}: test NLL {:.4}", last.step, trainer.total_steps(), last.test_nll);
            }
            println!("wrote {} and {}", ckpt.display(), ledger.display());
        }
        Command::Eval { common, checkpoint, mode, data } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            let ckpt = Checkpoint::load_expecting(&checkpoint, cfg.dims())?;
            let ds = dataset(&cfg, &data)?;
            let row = metrics_row(&ds, &ckpt.params, &cfg.train, ckpt.step, None)?;
            let path = out_dir(&cfg.output_dir)?.join("eval.csv");
            append_ledger(&path, std::slice::from_ref(&row))?;
            println!("{}", row.to_csv());
        }
        Command::Sample { checkpoint, count, seed, out, draw } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let emit = if draw { Emit::Samples } else { Emit::Means };
            let records = sample_joint(&ckpt.params, count, seed, emit)?;
            export(&ckpt.params, records, out_dir(&out)?, "samples")?;
        }
        Command::Interpolate { common, checkpoint, data, src, dst, steps } => {
            let cfg = load_config(&common)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = dataset(&cfg, &data)?;
            let pick = |i: usize| {
                ds.test.get(i).ok_or_else(|| Error::Invalid(format!("test record {i} does not exist ({} available)", ds.test.len())))
            };
            let records = interpolate(&ckpt.params, pick(src)?, pick(dst)?, steps)?;
            export(&ckpt.params, records, out_dir(&cfg.output_dir)?, "interp")?;
        }
        Command::Verify { draws } => {
            let checks = run_all(Budget { bound_draws: draws, ..Budget::default() });
            for c in &checks {
                println!("{}", c.line());
            }
            let passed = checks.iter().filter(|c| c.passed).count();
            println!("{passed}/{} checks passed", checks.len());
            return Ok(passed == checks.len());
        }
        Command::Sweep { common, pairs, parallel } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let cells = parse_pairs(&pairs)?;
            let dir = out_dir(&cfg.output_dir)?.to_path_buf();
            let results = run_sweep(&cfg, &cells, parallel, &dir)?;
            let mut csv = String::from("n,m,E_task,NLL\n");
            for r in &results {
                csv.push_str(&format!("{},{},{},{}\n", r.n, r.m, r.task_loss.map(|v| v.to_string()).unwrap_or_default(), r.test_nll));
            }
            let path = dir.join("sweep.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            print!("{csv}");
        }
    }
    Ok(true)
}

fn export(params: &ModelParams, records: Vec<LabeledImage>, dir: &Path, stem: &str) -> Result<()> {
    let dims = params.dims();
    let side = (dims.d_dim as f64).sqrt().round() as usize;
    if side * side != dims.d_dim || !dims.h_dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!("cannot export d={} h={} as square images with 2-D landmarks", dims.d_dim, dims.h_dim)));
    }
    let images: Vec<Vec<f64>> = records.iter().map(|r| r.image.clone()).collect();
    let meta = DatasetMeta { image_side: side, num_landmarks: dims.h_dim / 2, masked: params.specs().has_mask() };
    let ds = SemiDataset { meta, labeled: records, unlabeled: Vec::new(), test: Vec::new() };
    let hvds = dir.join(format!("{stem}.hvds"));
    let pgm = dir.join(format!("{stem}.pgm"));
    save_dataset(&ds, &hvds)?;
    write_pgm_strip(&pgm, &images, side)?;
    println!("wrote {} and {}", hvds.display(), pgm.display());
    Ok(())
}

/// Parses `"n1:m1,n2:m2"`.
pub fn parse_pairs(s: &str) -> Result<Vec<(usize, usize)>> {
    let cells: Vec<(usize, usize)> = s
        .split(',')
        .map(|cell| {
            let (n, m) = cell.trim().split_once(':').ok_or_else(|| Error::Config(format!("cell {cell:?} is not n:m")))?;
            let num = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad count {v:?} in cell {cell:?}")));
            Ok((num(n)?, num(m)?))
        })
        .collect::<Result<_>>()?;
    if cells.is_empty() {
        return Err(Error::Config("no sweep cells given".into()));
    }
    Ok(cells)
}

/// Final ledger row of each cell, in the order given.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    cells: &[(usize, usize)],
    parallel: bool,
    dir: &Path,
) -> Result<Vec<crate::train::MetricsRow>> {
    let cell = |&(n, m): &(usize, usize)| -> Result<crate::train::MetricsRow> {
        let mut c = cfg.clone();
        c.split.n = n;
        c.split.m = m;
        c.train.mode = if m == 0 { Mode::Full } else { Mode::Hybrid };
        let ds = c.dataset()?;
        let rows = Trainer::new(&ds, c.train.clone(), c.init_params()?)?.run()?;
        write_ledger(dir.join(format!("ledger_n{n}_m{m}.csv")), &rows)?;
        rows.last().cloned().ok_or(Error::Empty("ledger"))
    };
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cells.iter().map(|c| s.spawn(move || cell(c))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep cell panicked")).collect()
        })
    } else {
        cells.iter().map(cell).collect()
    }
}
