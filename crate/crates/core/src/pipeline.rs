//! Data preparation and the end-to-end experiment shared by the CLI.

use std::collections::BTreeMap;

use crate::config::PipelineConfig;
use crate::data::{apply_normalize, build_tasks, fit_normalize, site_infos, split_sites, NormStats, SiteRecord, SiteSplit, SiteTask};
use crate::error::{Error, Result};
use crate::eval::{site_metrics, SiteLabels, SiteMetrics};
use crate::infer::{predict_sites, PredictionRow};
use crate::loss::LossConfig;
use crate::model::{FluxModel, ModelKind, StaticVocab, TamRlConfig};
use crate::train::{stream_rng, train_ensemble, MemberRun, Stream};

/// Split, normalized and windowed data ready for training and inference.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SiteSplit,
    pub norm: NormStats,
    pub train: Vec<SiteTask>,
    pub held_out: Vec<SiteTask>,
    pub loss: LossConfig,
    /// Labels of every site, training and held out.
    pub vocab: StaticVocab,
    pub labels: SiteLabels,
    pub model: TamRlConfig,
}

/// Splits sites with the `seed`'s split stream, fits driver statistics on the
/// training sites only, and fits class weights on the training windows.
pub fn prepare(records: &[SiteRecord], cfg: &PipelineConfig, seed: u64) -> Result<Prepared> {
    let infos = site_infos(records);
    let split = split_sites(&infos, cfg.data.holdout_fraction, cfg.data.stratify, &mut stream_rng(seed, Stream::Split))?;
    let in_train = |r: &&SiteRecord| split.train.contains(&r.site_id);
    let train_records: Vec<SiteRecord> = records.iter().filter(in_train).cloned().collect();
    let held_records: Vec<SiteRecord> = records.iter().filter(|r| !in_train(r)).cloned().collect();
    let norm = fit_normalize(&train_records)?;
    let train = build_tasks(&apply_normalize(&norm, &train_records)?, cfg.data.window, cfg.data.stride)?;
    let held_out = build_tasks(&apply_normalize(&norm, &held_records)?, cfg.data.window, cfg.data.stride)?;
    if train.is_empty() {
        return Err(Error::Validation("no training site has a complete window".into()));
    }
    let windows: Vec<_> = train.iter().flat_map(|t| &t.windows).collect();
    let loss = LossConfig::fit(&windows, cfg.loss.alpha, cfg.loss.class_weights, cfg.loss.sign)?;
    let vocab = StaticVocab::new(
        infos.iter().map(|s| s.igbp.clone()).collect(),
        infos.iter().map(|s| s.koppen.clone()).collect(),
    )?;
    let labels = infos
        .iter()
        .map(|s| (s.site_id.clone(), (s.igbp.clone(), s.koppen.clone())))
        .collect();
    let model = TamRlConfig {
        driver_dim: norm.mean.len(),
        ..cfg.model.clone()
    };
    Ok(Prepared {
        split,
        norm,
        train,
        held_out,
        loss,
        vocab,
        labels,
        model,
    })
}

/// Ensemble members of one kind, in seed order.
pub fn members_of(runs: &[MemberRun], kind: ModelKind) -> Result<Vec<FluxModel>> {
    runs.iter()
        .map(|r| r.model(kind).ok_or_else(|| Error::Config(format!("no {kind} model was trained"))))
        .collect()
}

/// Everything produced by one full run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub runs: Vec<MemberRun>,
    pub predictions: BTreeMap<ModelKind, Vec<PredictionRow>>,
    pub metrics: Vec<SiteMetrics>,
}

/// Trains the ensemble, predicts every held-out site with all three models
/// and scores them.
pub fn run_experiment(prepared: &Prepared, cfg: &PipelineConfig) -> Result<Experiment> {
    let runs = train_ensemble(&prepared.model, Some(&prepared.vocab), &prepared.train, &prepared.loss, &cfg.train)?;
    let mut predictions = BTreeMap::new();
    let mut metrics = Vec::new();
    for kind in ModelKind::ALL {
        let rows = predict_sites(&members_of(&runs, kind)?, &prepared.held_out, cfg.train.support_size)?;
        metrics.extend(site_metrics(kind.name(), &rows, &prepared.labels, cfg.eval.strict_qc)?);
        predictions.insert(kind, rows);
    }
    Ok(Experiment {
        runs,
        predictions,
        metrics,
    })
}
