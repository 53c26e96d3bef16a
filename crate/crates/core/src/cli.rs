//! Command-line entry point.
//!
//! Every stage reads and writes under `--out`:
//!
//! ```text
//! sites.csv, site_params.csv            synth
//! members/seed_<s>/pretrained.ckpt      pretrain (stage-one decoder)
//! members/seed_<s>/ctlstm.ckpt          pretrain (static-feature baseline)
//! members/seed_<s>/pretrain_log.tsv     pretrain
//! members/seed_<s>/tamrl.ckpt           train
//! members/seed_<s>/joint_log.tsv        train
//! predictions_<model>.csv               infer
//! metrics_by_site.csv                   eval
//! metrics_by_{igbp,koppen}.csv, relative_rmse.csv, scatter_sites.csv   report
//! ```

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::checkpoint::Archive;
use crate::config::PipelineConfig;
use crate::data::{load_site_csv, save_site_csv, site_infos, SiteRecord};
use crate::error::{Error, Result};
use crate::eval::{aggregate, read_site_metrics, save_site_metrics, site_metrics, write_report, Grouping, REPORT_FILES};
use crate::infer::{load_predictions, predict_sites, save_predictions};
use crate::model::{FluxModel, ModelKind};
use crate::pipeline::{prepare, Prepared};
use crate::synth::{save_params_csv, synth_generate_with};
use crate::train::{format_metrics_log, for_each_seed, joint_train, run_baseline, run_pretrain, stream_rng, Stream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "flux-upscale", version, about = "Zero-shot carbon flux upscaling")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Working directory for data, checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Score only steps with qc == 1.
    #[arg(long, global = true)]
    pub strict_qc: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        sites: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
    },
    /// Train the stage-one decoder and the static-feature baseline.
    Pretrain,
    /// Joint episodic training from the stage-one checkpoints.
    Train,
    /// Zero-shot predictions on held-out sites.
    Infer,
    /// Per-site metrics from the prediction files.
    Eval,
    /// Grouped tables and plot-ready files from the per-site metrics.
    Report,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if matches!(e, Error::Config(_)) {
        EXIT_USAGE
    } else if e.is_validation() {
        EXIT_DATA
    } else {
        EXIT_RUNTIME
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if cli.strict_qc {
        cfg.eval.strict_qc = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match &cli.command {
        Command::Synth { sites, days } => synth(&cfg, out, sites.unwrap_or(cfg.synth.sites), days.unwrap_or(cfg.synth.days)),
        Command::Pretrain => pretrain(&cfg, out),
        Command::Train => train(&cfg, out),
        Command::Infer => infer(&cfg, out),
        Command::Eval => evaluate(&cfg, out),
        Command::Report => report(&cfg, out),
    }
}

fn data_path(cfg: &PipelineConfig, out: &Path) -> PathBuf {
    cfg.data.path.clone().unwrap_or_else(|| out.join("sites.csv"))
}

fn load_records(cfg: &PipelineConfig, out: &Path) -> Result<Vec<SiteRecord>> {
    let path = data_path(cfg, out);
    if !path.exists() {
        return Err(Error::Config(format!(
            "data file {} not found; run `synth` or set data.path",
            path.display()
        )));
    }
    load_site_csv(&path)
}

fn load_prepared(cfg: &PipelineConfig, out: &Path) -> Result<Prepared> {
    prepare(&load_records(cfg, out)?, cfg, cfg.train.seed)
}

pub fn member_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("members").join(format!("seed_{seed}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path, stage: &str) -> Result<FluxModel> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "{} is missing; run `{stage}` first",
            path.display()
        )));
    }
    FluxModel::from_archive(&Archive::load(path)?)
}

fn synth(cfg: &PipelineConfig, out: &Path, sites: usize, days: usize) -> Result<()> {
    let generated = synth_generate_with(sites, days, &cfg.synth.generator_config(), &mut stream_rng(cfg.train.seed, Stream::Synth))?;
    let records: Vec<SiteRecord> = generated.iter().flat_map(|s| s.records.iter().cloned()).collect();
    let driver_dim = records.first().map_or(0, |r| r.drivers.len());
    let path = data_path(cfg, out);
    save_site_csv(&records, driver_dim, &path)?;
    save_params_csv(&generated, &out.join("site_params.csv"))?;
    info!("wrote {} sites x {} days to {}", sites, days, path.display());
    Ok(())
}

fn pretrain(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let prep = load_prepared(cfg, out)?;
    info!("{} training sites, {} held out", prep.train.len(), prep.held_out.len());
    let seeds = cfg.train.member_seeds()?;
    let runs = for_each_seed(&seeds, cfg.train.threads, |seed| {
        let stage1 = run_pretrain(seed, &prep.model, &prep.train, &prep.loss, &cfg.train)?;
        let baseline = run_baseline(seed, &prep.model, &prep.vocab, &prep.train, &prep.loss, &cfg.train)?;
        Ok((seed, stage1, baseline))
    })?;
    for (seed, stage1, baseline) in runs {
        let dir = member_dir(out, seed);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        stage1.model.to_archive().save(&dir.join("pretrained.ckpt"))?;
        baseline.model.to_archive().save(&dir.join("ctlstm.ckpt"))?;
        let mut log = stage1.log;
        log.extend(baseline.log);
        write_text(&dir.join("pretrain_log.tsv"), &format_metrics_log(&log))?;
    }
    Ok(())
}

fn train(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let prep = load_prepared(cfg, out)?;
    let seeds = cfg.train.member_seeds()?;
    let pretrained = seeds
        .iter()
        .map(|&s| load_checkpoint(&member_dir(out, s).join("pretrained.ckpt"), "pretrain"))
        .collect::<Result<Vec<_>>>()?;
    let runs = for_each_seed(&seeds, cfg.train.threads, |seed| {
        let i = seeds.iter().position(|&s| s == seed).expect("known seed");
        joint_train(pretrained[i].clone(), &prep.train, &prep.loss, &cfg.train, &mut stream_rng(seed, Stream::Joint))
    })?;
    for (seed, run) in seeds.iter().zip(runs) {
        let dir = member_dir(out, *seed);
        run.model.to_archive().save(&dir.join("tamrl.ckpt"))?;
        write_text(&dir.join("joint_log.tsv"), &format_metrics_log(&run.log))?;
    }
    Ok(())
}

/// Loads every member of `kind` from `out`.
pub fn load_members(out: &Path, seeds: &[u64], kind: ModelKind) -> Result<Vec<FluxModel>> {
    let (file, stage) = match kind {
        ModelKind::TamRl => ("tamrl.ckpt", "train"),
        ModelKind::TamLstm => ("pretrained.ckpt", "pretrain"),
        ModelKind::CtLstm => ("ctlstm.ckpt", "pretrain"),
    };
    seeds
        .iter()
        .map(|&s| {
            let model = load_checkpoint(&member_dir(out, s).join(file), stage)?;
            Ok(match kind {
                ModelKind::TamLstm => model.decoder_only(),
                _ => model,
            })
        })
        .collect()
}

pub fn predictions_path(out: &Path, kind: ModelKind) -> PathBuf {
    out.join(format!("predictions_{}.csv", kind.name()))
}

fn infer(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let prep = load_prepared(cfg, out)?;
    let seeds = cfg.train.member_seeds()?;
    let members = ModelKind::ALL
        .iter()
        .map(|&k| Ok((k, load_members(out, &seeds, k)?)))
        .collect::<Result<Vec<_>>>()?;
    for (kind, models) in members {
        let rows = predict_sites(&models, &prep.held_out, cfg.train.support_size)?;
        save_predictions(&rows, &predictions_path(out, kind))?;
    }
    Ok(())
}

fn evaluate(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let records = load_records(cfg, out)?;
    let labels = site_infos(&records)
        .into_iter()
        .map(|s| (s.site_id, (s.igbp, s.koppen)))
        .collect();
    let mut metrics = Vec::new();
    for kind in ModelKind::ALL {
        let path = predictions_path(out, kind);
        if path.exists() {
            metrics.extend(site_metrics(kind.name(), &load_predictions(&path)?, &labels, cfg.eval.strict_qc)?);
        }
    }
    if metrics.is_empty() {
        return Err(Error::Config(format!("no predictions_<model>.csv in {}; run `infer` first", out.display())));
    }
    save_site_metrics(&metrics, out)?;
    for g in aggregate(&metrics, Grouping::All)? {
        let r2 = g.r2.map_or("NA".to_string(), |s| format!("{:.4}", s.mean));
        println!("{}\t{}\trmse {:.4}\tr2 {}\tsites {}", g.model, g.target.name(), g.rmse.mean, r2, g.rmse.count);
    }
    Ok(())
}

fn report(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let path = out.join(REPORT_FILES[0]);
    if !path.exists() {
        return Err(Error::Config(format!("{} is missing; run `eval` first", path.display())));
    }
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let metrics = read_site_metrics(std::io::BufReader::new(file))?;
    write_report(&metrics, cfg.eval.reference.name(), out)
}
