use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::warn;

use consreid_core::ablation::{run_ablation, SUITES};
use consreid_core::checkpoint::Checkpoint;
use consreid_core::config::TrainConfig;
use consreid_core::data::{generate_synthetic, load_dataset_dir, Split, SynthConfig, MANIFEST_FILE};
use consreid_core::eval::evaluate_model;
use consreid_core::reporting::{render, Formats, ReportSpec};
use consreid_core::trainer::{load_training_data, train};

#[derive(Parser)]
#[command(name = "consreid", version, about = "Unsupervised re-identification with clustering and consistency learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key-value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Warm-start from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the query/gallery split of a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
        /// Embed with the student instead of the teacher.
        #[arg(long)]
        student: bool,
        /// Resize height for folders without a manifest.
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
    },
    /// Write a synthetic dataset (PNG images plus manifest).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training identities.
        #[arg(long, default_value_t = 16)]
        identities: usize,
        #[arg(long, default_value_t = 3)]
        cameras: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Held-out identities for query/gallery.
        #[arg(long)]
        test_identities: Option<usize>,
        #[arg(long)]
        images_per_identity: Option<usize>,
    },
    /// Run a named ablation suite and write `<suite>.csv` and `<suite>.txt`.
    Ablate {
        #[arg(long)]
        suite: String,
        /// Base configuration; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Worker threads running independent configurations.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "ablation_out")]
        out: PathBuf,
    },
    /// Render tables and plots from run directories and ablation CSVs.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_train(config: &Path, init: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if init.is_some() {
        cfg.init_checkpoint = init;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    let out_dir = cfg.output_dir.get_or_insert_with(|| PathBuf::from("train_out")).clone();
    create_dir(&out_dir)?;
    let data = load_training_data(&cfg)?;
    let result = train(&cfg, &data)?;
    match &result.log.final_metrics {
        Some(m) => println!(
            "mAP {:.4}  top-1 {:.4}  top-5 {:.4}  top-10 {:.4}",
            m.map, m.cmc1, m.cmc5, m.cmc10
        ),
        None => warn!("dataset has no query/gallery split; skipped evaluation"),
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, student: bool, shape: [usize; 3]) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let shape = [ck.model.config.in_channels, shape[1], shape[2]];
    let loaded = load_dataset_dir(data, shape)?;
    for r in &loaded.rejected {
        warn!("skipped {}: {}", r.path.display(), r.reason);
    }
    let dataset = loaded.dataset;
    let result = evaluate_model(&ck.model, &dataset, !student)?;
    if !result.excluded.is_empty() {
        warn!("{} queries had no valid gallery match and were excluded", result.excluded.len());
    }
    create_dir(out)?;
    let metrics = result.metrics();
    let path = out.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&metrics)?).with_context(|| format!("writing {}", path.display()))?;
    let names = dataset.names(&dataset.indices(Split::Query));
    result.write_per_query_csv(&out.join("per_query.csv"), Some(&names))?;
    println!(
        "mAP {:.4}  top-1 {:.4}  top-5 {:.4}  top-10 {:.4}  ({} queries)",
        metrics.map, metrics.cmc1, metrics.cmc5, metrics.cmc10, result.num_queries
    );
    Ok(())
}

fn cmd_gen_data(out: &Path, identities: usize, cameras: usize, seed: u64, test_identities: Option<usize>, per_id: Option<usize>) -> Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        num_identities: identities,
        num_test_identities: test_identities.unwrap_or(defaults.num_test_identities),
        images_per_identity: per_id.unwrap_or(defaults.images_per_identity),
        num_cameras: cameras,
        seed,
        ..defaults
    };
    let data = generate_synthetic(&cfg)?;
    create_dir(out)?;
    data.save(out)?;
    println!("wrote {} images and {}", data.len(), out.join(MANIFEST_FILE).display());
    Ok(())
}

fn cmd_ablate(suite: &str, config: Option<PathBuf>, seeds: u64, jobs: usize, out: &Path) -> Result<()> {
    if !SUITES.contains(&suite) {
        bail!("unknown suite `{suite}`; available: {}", SUITES.join(", "));
    }
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base = match config {
        Some(p) => TrainConfig::load(&p)?,
        None => TrainConfig::default(),
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = run_ablation(suite, &base, &seeds, jobs)?;
    create_dir(out)?;
    report.write_csv(&out.join(format!("{suite}.csv")))?;
    report.write_table(&out.join(format!("{suite}.txt")))?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_report(inputs: Vec<PathBuf>, out: PathBuf) -> Result<()> {
    let spec = ReportSpec {
        inputs,
        output_dir: out,
        formats: Formats::default(),
    };
    for path in render(&spec)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, init, out } => cmd_train(&config, init, out),
        Command::Eval {
            ckpt,
            data,
            out,
            student,
            height,
            width,
        } => cmd_eval(&ckpt, &data, &out, student, [0, height, width]),
        Command::GenData {
            out,
            identities,
            cameras,
            seed,
            test_identities,
            images_per_identity,
        } => cmd_gen_data(&out, identities, cameras, seed, test_identities, images_per_identity),
        Command::Ablate {
            suite,
            config,
            seeds,
            jobs,
            out,
        } => cmd_ablate(&suite, config, seeds, jobs, &out),
        Command::Report { inputs, out } => cmd_report(inputs, out),
    }
}
