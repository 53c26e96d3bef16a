//! Optimizer, episode sampling, the two training stages and ensembles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Archive;
use crate::data::{SiteTask, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::loss::{composite_loss, LossConfig};
use crate::model::{DecoderOnly, FluxModel, ModelKind, StaticVocab, TamRlConfig};
use crate::nn::{zero_grads, Parameters};

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update from the gradients stored on `params`. Tensors without a
    /// gradient are left alone. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P) -> Result<()> {
        let mut bad = None;
        params.visit("", &mut |name, t| {
            if bad.is_none() {
                if let Some(i) = t.grad().and_then(|g| g.iter().position(|v| !v.is_finite())) {
                    bad = Some((name, i));
                }
            }
        });
        if let Some((name, index)) = bad {
            return Err(Error::NonFiniteGradient { name, index });
        }

        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut shape_error = None;
        params.visit_mut("", &mut |name, t| {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { return };
            let n = g.len();
            let m = first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                shape_error = Some(name);
                return;
            }
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        });
        match shape_error {
            Some(name) => Err(Error::Tensor(format!("optimizer moments for `{name}` do not match its shape"))),
            None => Ok(()),
        }
    }
}

pub fn grad_norm<P: Parameters + ?Sized>(params: &P) -> f64 {
    let mut sq = 0.0;
    params.visit("", &mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameters + ?Sized>(params: &mut P, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        params.visit_mut("", &mut |_, t| t.scale_grad(c));
    }
    norm
}

/// Support and query windows drawn from one site.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<'a> {
    pub site_id: String,
    pub support: Vec<&'a TimeSeriesWindow>,
    pub query: Vec<&'a TimeSeriesWindow>,
}

/// Draws `support_size` windows uniformly without replacement, then up to
/// `query_size` query windows from the rest. Windows whose dates do not
/// overlap the support are preferred for the query when there are any.
pub fn sample_episode<'a>(
    site: &'a SiteTask,
    support_size: usize,
    query_size: usize,
    rng: &mut impl Rng,
) -> Result<Episode<'a>> {
    let n = site.windows.len();
    if support_size == 0 || query_size == 0 || n <= support_size {
        return Err(Error::TooFewWindows {
            site: site.site_id.clone(),
            available: n,
            needed: support_size + 1,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (support_idx, rest) = order.split_at(support_size);
    let support: Vec<&TimeSeriesWindow> = support_idx.iter().map(|&i| &site.windows[i]).collect();
    let clear: Vec<usize> = rest
        .iter()
        .copied()
        .filter(|&i| support.iter().all(|s| !s.overlaps(&site.windows[i])))
        .collect();
    let pool = if clear.is_empty() { rest } else { &clear[..] };
    let query = pool.iter().take(query_size).map(|&i| &site.windows[i]).collect();
    Ok(Episode {
        site_id: site.site_id.clone(),
        support,
        query,
    })
}

/// Optimization settings shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    /// Epochs for the one-hot baseline (trained like the first stage).
    pub baseline_epochs: usize,
    /// Windows per minibatch in the first stage and the baseline.
    pub batch_size: usize,
    /// Episodes per training site per epoch in the joint stage.
    pub episodes_per_site: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub lr_pretrain: f64,
    pub lr_joint: f64,
    pub clip_norm: f64,
    pub ensemble_size: usize,
    /// Explicit member seeds; defaults to `seed, seed + 1, …`.
    pub seeds: Option<Vec<u64>>,
    /// Keep a snapshot every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Worker threads for ensemble members (0 picks the machine's parallelism).
    pub threads: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            seed: 0,
            pretrain_epochs: 30,
            joint_epochs: 60,
            baseline_epochs: 30,
            batch_size: 8,
            episodes_per_site: 1,
            support_size: 3,
            query_size: 6,
            lr_pretrain: 1e-3,
            lr_joint: 5e-4,
            clip_norm: 5.0,
            ensemble_size: 10,
            seeds: None,
            checkpoint_every: 0,
            threads: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        if self.batch_size == 0 || self.support_size == 0 || self.query_size == 0 || self.episodes_per_site == 0 {
            return Err(Error::Config("batch, support, query and episode counts must be positive".into()));
        }
        for (name, v) in [("lr_pretrain", self.lr_pretrain), ("lr_joint", self.lr_joint), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.member_seeds().map(|_| ())
    }

    /// Distinct seeds, one per ensemble member.
    pub fn member_seeds(&self) -> Result<Vec<u64>> {
        let seeds = match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.ensemble_size as u64).map(|k| self.seed.wrapping_add(k)).collect(),
        };
        if seeds.len() != self.ensemble_size {
            return Err(Error::Config(format!(
                "{} seeds given for an ensemble of {}",
                seeds.len(),
                self.ensemble_size
            )));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Validation(format!("duplicate ensemble seed {dup}")));
        }
        Ok(seeds)
    }
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Pretrain = 1,
    Joint = 2,
    BaselineInit = 3,
    Baseline = 4,
    Split = 5,
    Synth = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: &'static str,
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

/// One line per epoch: `stage epoch mean_loss wall_secs`.
pub fn format_metrics_log(records: &[EpochRecord]) -> String {
    let mut s = String::from("stage\tepoch\tmean_loss\twall_secs\n");
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{:.8}\t{:.3}", r.stage, r.epoch, r.mean_loss, r.wall_secs);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FluxModel,
    pub log: Vec<EpochRecord>,
    /// `(epoch, archive)` at every `checkpoint_every` epochs.
    pub snapshots: Vec<(usize, Archive)>,
}

fn training_windows(tasks: &[SiteTask]) -> Result<Vec<&TimeSeriesWindow>> {
    let windows: Vec<&TimeSeriesWindow> = tasks.iter().flat_map(|t| &t.windows).collect();
    if windows.is_empty() {
        return Err(Error::Empty("training windows"));
    }
    Ok(windows)
}

fn check_dims(model: &FluxModel, tasks: &[SiteTask]) -> Result<()> {
    let d = model.config.driver_dim;
    match tasks.iter().flat_map(|t| &t.windows).find(|w| w.driver_dim() != d) {
        Some(w) => Err(Error::Shape {
            op: "training data driver width",
            lhs: vec![d],
            rhs: vec![w.driver_dim()],
        }),
        None => Ok(()),
    }
}

fn mean_window_loss<'t>(
    model: &FluxModel,
    bound: &crate::model::BoundModel<'t>,
    modulation: Option<&crate::model::ModulationParams<'t>>,
    windows: &[&TimeSeriesWindow],
    loss: &LossConfig,
) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for w in windows {
        let preds = model.decode(bound, modulation, w)?;
        let l = composite_loss(preds, &w.supervision(), loss)?.total;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    Ok(total.ok_or(Error::Empty("loss windows"))?.scale(1.0 / windows.len() as f64))
}

/// Unmodulated, gradient-free mean composite loss over `windows`.
pub fn evaluate_decoder_loss(model: &FluxModel, windows: &[&TimeSeriesWindow], loss: &LossConfig) -> Result<f64> {
    let mut sum = 0.0;
    for w in windows {
        let tape = Tape::inference();
        let bound = model.bind_decoder(&tape);
        sum += mean_window_loss(model, &bound, None, &[w], loss)?.item();
    }
    Ok(sum / windows.len().max(1) as f64)
}

/// First stage: trains the decoder and heads on all training windows with
/// identity modulation. Encoder and generator (if any) are not touched.
/// Also used for the one-hot baseline.
pub fn pretrain_decoder(
    mut model: FluxModel,
    tasks: &[SiteTask],
    loss: &LossConfig,
    cfg: &TrainRunConfig,
    epochs: usize,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    let mut windows = training_windows(tasks)?;
    check_dims(&model, tasks)?;
    let stage = if model.kind == ModelKind::CtLstm { "baseline" } else { "pretrain" };
    let mut adam = AdamState::new(cfg.lr_pretrain);
    let mut log = Vec::with_capacity(epochs);
    let mut snapshots = Vec::new();
    for epoch in 1..=epochs {
        let started = Instant::now();
        windows.shuffle(rng);
        let mut losses = Vec::new();
        for batch in windows.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let bound = model.bind_decoder(&tape);
            let l = mean_window_loss(&model, &bound, None, batch, loss)?;
            losses.push(l.item());
            let grads = tape.backward(l)?;
            let mut view = DecoderOnly(&mut model);
            zero_grads(&mut view);
            view.0.decoder.absorb(&bound.decoder, &grads)?;
            view.0.heads.absorb(&bound.heads, &grads)?;
            clip_grad_norm(&mut view, cfg.clip_norm);
            adam.step(&mut view)?;
            zero_grads(&mut view);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("{stage} epoch {epoch}: loss {mean_loss:.6}");
        log.push(EpochRecord {
            stage,
            epoch,
            mean_loss,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            snapshots.push((epoch, model.to_archive()));
        }
    }
    Ok(TrainOutcome { model, log, snapshots })
}

/// Second stage: episodic training of encoder, generator, decoder and heads.
/// Each epoch visits every site with enough windows `episodes_per_site`
/// times in shuffled order; sites too short for an episode are skipped.
pub fn joint_train(
    mut model: FluxModel,
    tasks: &[SiteTask],
    loss: &LossConfig,
    cfg: &TrainRunConfig,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    if model.kind != ModelKind::TamRl || model.encoder.is_none() || model.generator.is_none() {
        return Err(Error::Config(format!("joint training needs a tamrl model, got {}", model.kind)));
    }
    check_dims(&model, tasks)?;
    let eligible: Vec<&SiteTask> = tasks.iter().filter(|t| t.windows.len() > cfg.support_size).collect();
    if eligible.is_empty() {
        return Err(Error::Empty("sites with enough windows for an episode"));
    }
    let mut adam = AdamState::new(cfg.lr_joint);
    let mut log = Vec::with_capacity(cfg.joint_epochs);
    let mut snapshots = Vec::new();
    for epoch in 1..=cfg.joint_epochs {
        let started = Instant::now();
        let mut schedule: Vec<&SiteTask> = eligible
            .iter()
            .flat_map(|t| std::iter::repeat_n(*t, cfg.episodes_per_site))
            .collect();
        schedule.shuffle(rng);
        let mut losses = Vec::with_capacity(schedule.len());
        for site in schedule {
            let episode = sample_episode(site, cfg.support_size, cfg.query_size, rng)?;
            losses.push(episode_step(&mut model, &episode, loss, cfg.clip_norm, &mut adam)?);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("joint epoch {epoch}: loss {mean_loss:.6}");
        log.push(EpochRecord {
            stage: "joint",
            epoch,
            mean_loss,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            snapshots.push((epoch, model.to_archive()));
        }
    }
    Ok(TrainOutcome { model, log, snapshots })
}

/// Mean query loss of one episode on a fresh tape.
pub fn episode_loss<'t>(
    model: &FluxModel,
    bound: &crate::model::BoundModel<'t>,
    episode: &Episode<'_>,
    loss: &LossConfig,
) -> Result<Var<'t>> {
    let modulation = model.modulation(bound, &episode.support)?;
    mean_window_loss(model, bound, Some(&modulation), &episode.query, loss)
}

/// Forward, backward, clip and one Adam update. Returns the loss before the update.
pub fn episode_step(
    model: &mut FluxModel,
    episode: &Episode<'_>,
    loss: &LossConfig,
    clip_norm: f64,
    adam: &mut AdamState,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let l = episode_loss(model, &bound, episode, loss)?;
    let value = l.item();
    let grads = tape.backward(l)?;
    zero_grads(model);
    model.absorb(&bound, &grads)?;
    clip_grad_norm(model, clip_norm);
    adam.step(model)?;
    zero_grads(model);
    Ok(value)
}

/// All models produced by one seed.
#[derive(Debug, Clone)]
pub struct MemberRun {
    pub seed: u64,
    /// Stage-one model; its decoder is the unmodulated baseline.
    pub pretrained: FluxModel,
    pub tamrl: FluxModel,
    pub ctlstm: Option<FluxModel>,
    pub log: Vec<EpochRecord>,
}

impl MemberRun {
    pub fn model(&self, kind: ModelKind) -> Option<FluxModel> {
        match kind {
            ModelKind::TamRl => Some(self.tamrl.clone()),
            ModelKind::TamLstm => Some(self.pretrained.decoder_only()),
            ModelKind::CtLstm => self.ctlstm.clone(),
        }
    }
}

/// First stage for one seed.
pub fn run_pretrain(
    seed: u64,
    model_cfg: &TamRlConfig,
    tasks: &[SiteTask],
    loss: &LossConfig,
    cfg: &TrainRunConfig,
) -> Result<TrainOutcome> {
    let model = FluxModel::new(ModelKind::TamRl, model_cfg.clone(), None, &mut stream_rng(seed, Stream::Init))?;
    pretrain_decoder(model, tasks, loss, cfg, cfg.pretrain_epochs, &mut stream_rng(seed, Stream::Pretrain))
}

/// The one-hot baseline for one seed.
pub fn run_baseline(
    seed: u64,
    model_cfg: &TamRlConfig,
    vocab: &StaticVocab,
    tasks: &[SiteTask],
    loss: &LossConfig,
    cfg: &TrainRunConfig,
) -> Result<TrainOutcome> {
    let model = FluxModel::new(
        ModelKind::CtLstm,
        model_cfg.clone(),
        Some(vocab.clone()),
        &mut stream_rng(seed, Stream::BaselineInit),
    )?;
    pretrain_decoder(model, tasks, loss, cfg, cfg.baseline_epochs, &mut stream_rng(seed, Stream::Baseline))
}

/// Both stages (and the baseline when `vocab` is given) for one seed.
pub fn train_member(
    seed: u64,
    model_cfg: &TamRlConfig,
    vocab: Option<&StaticVocab>,
    tasks: &[SiteTask],
    loss: &LossConfig,
    cfg: &TrainRunConfig,
) -> Result<MemberRun> {
    let stage1 = run_pretrain(seed, model_cfg, tasks, loss, cfg)?;
    let stage2 = joint_train(stage1.model.clone(), tasks, loss, cfg, &mut stream_rng(seed, Stream::Joint))?;
    let mut log = stage1.log;
    log.extend(stage2.log);
    let ctlstm = match vocab {
        Some(v) => {
            let run = run_baseline(seed, model_cfg, v, tasks, loss, cfg)?;
            log.extend(run.log);
            Some(run.model)
        }
        None => None,
    };
    Ok(MemberRun {
        seed,
        pretrained: stage1.model,
        tamrl: stage2.model,
        ctlstm,
        log,
    })
}

/// Runs `job` once per seed on up to `threads` worker threads. Results are
/// returned in seed order regardless of scheduling.
pub fn for_each_seed<T, F>(seeds: &[u64], threads: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let threads = match threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(seeds.len())
    .max(1);
    if threads == 1 {
        return seeds.iter().map(|&s| job(s)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..seeds.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let r = job(seeds[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every seed ran")).collect()
}

/// Independent runs for every member seed.
pub fn train_ensemble(
    model_cfg: &TamRlConfig,
    vocab: Option<&StaticVocab>,
    tasks: &[SiteTask],
    loss: &LossConfig,
    cfg: &TrainRunConfig,
) -> Result<Vec<MemberRun>> {
    cfg.validate()?;
    let seeds = cfg.member_seeds()?;
    for_each_seed(&seeds, cfg.threads, |seed| train_member(seed, model_cfg, vocab, tasks, loss, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::loss::{ClassWeightMode, FluxSign};
    use crate::model::predict_tamlstm;
    use crate::nn::{checksum, Linear};
    use chrono::NaiveDate;

    fn tiny_config() -> TamRlConfig {
        TamRlConfig {
            driver_dim: 2,
            hidden: 6,
            encoder_hidden: 4,
            embedding_dim: 3,
            generator_hidden: vec![5],
            generator_identity_init: true,
            flux_scale: 1.0,
        }
    }

    fn toy_site(id: &str, windows: usize, len: usize, scale: f64, rng: &mut impl Rng) -> SiteTask {
        let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        let windows = (0..windows)
            .map(|k| {
                let drivers: Vec<Vec<f64>> = (0..len).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
                let targets = drivers.iter().map(|d| [scale * (1.0 + d[0]), -scale * d[0]]).collect();
                TimeSeriesWindow {
                    site_id: id.into(),
                    start: start + chrono::Days::new((k * len) as u64),
                    drivers,
                    targets,
                    qc: vec![1.0; len],
                    mask: vec![true; len],
                    igbp: "GRA".into(),
                    koppen: "Cfa".into(),
                }
            })
            .collect();
        SiteTask {
            site_id: id.into(),
            igbp: "GRA".into(),
            koppen: "Cfa".into(),
            windows,
        }
    }

    fn loss_for(tasks: &[SiteTask]) -> LossConfig {
        let ws: Vec<&TimeSeriesWindow> = tasks.iter().flat_map(|t| &t.windows).collect();
        LossConfig::fit(&ws, 0.1, ClassWeightMode::InverseFrequency, FluxSign::RecoMinusGpp).unwrap()
    }

    fn quick_cfg() -> TrainRunConfig {
        TrainRunConfig {
            pretrain_epochs: 3,
            joint_epochs: 2,
            baseline_epochs: 2,
            batch_size: 4,
            query_size: 2,
            lr_pretrain: 1e-2,
            lr_joint: 1e-2,
            ensemble_size: 2,
            threads: 1,
            ..TrainRunConfig::default()
        }
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut layer = Linear::zeros(1, 1);
        layer.weight.accumulate_grad(&[1.0]).unwrap();
        layer.bias.accumulate_grad(&[0.0]).unwrap();
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut layer).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((layer.weight.data()[0] - expected).abs() < 1e-15);
        assert!((layer.weight.data()[0] + 0.001).abs() < 1e-10);
        assert_eq!(layer.bias.data()[0], 0.0);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut layer = Linear::zeros(2, 1);
        layer.weight.accumulate_grad(&[0.0, f64::NAN]).unwrap();
        let before = layer.clone();
        let err = AdamState::new(1e-3).step(&mut layer).unwrap_err();
        match err {
            Error::NonFiniteGradient { name, index } => {
                assert_eq!(name, "weight");
                assert_eq!(index, 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(layer.weight.data(), before.weight.data());
    }

    #[test]
    fn adam_replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut layer = Linear::init(3, 2, &mut rng);
            let mut adam = AdamState::new(1e-2);
            for _ in 0..20 {
                zero_grads(&mut layer);
                let g: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                layer.weight.accumulate_grad(&g).unwrap();
                adam.step(&mut layer).unwrap();
            }
            layer
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut layer = Linear::zeros(2, 2);
        layer.weight.accumulate_grad(&[3.0, 4.0, 0.0, 0.0]).unwrap();
        layer.bias.accumulate_grad(&[12.0, 0.0]).unwrap();
        let before = clip_grad_norm(&mut layer, 5.0);
        assert!((before - 13.0).abs() < 1e-12);
        assert!((grad_norm(&layer) - 5.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut layer, 10.0), grad_norm(&layer));
    }

    #[test]
    fn episode_sampling_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let site = toy_site("S", 4, 5, 1.0, &mut rng);
        for _ in 0..50 {
            let e = sample_episode(&site, 3, 4, &mut rng).unwrap();
            assert_eq!(e.support.len(), 3);
            assert!(!e.query.is_empty());
            for q in &e.query {
                assert!(e.support.iter().all(|s| !std::ptr::eq(*s, *q)));
                assert_eq!(q.site_id, "S");
            }
        }
        let a = sample_episode(&site, 2, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_episode(&site, 2, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let short = toy_site("T", 3, 5, 1.0, &mut rng);
        assert!(matches!(
            sample_episode(&short, 3, 1, &mut rng),
            Err(Error::TooFewWindows { available: 3, needed: 4, .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tasks = vec![toy_site("A", 4, 6, 1.0, &mut rng)];
        let model = FluxModel::new(ModelKind::TamRl, tiny_config(), None, &mut rng).unwrap();
        let out = pretrain_decoder(model.clone(), &tasks, &loss_for(&tasks), &quick_cfg(), 0, &mut rng).unwrap();
        assert_eq!(out.model, model);
        assert!(out.log.is_empty());
    }

    #[test]
    fn pretraining_reduces_loss_and_leaves_encoder_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tasks: Vec<SiteTask> = (0..2).map(|i| toy_site(&format!("S{i}"), 6, 8, 1.0, &mut rng)).collect();
        let loss = loss_for(&tasks);
        let model = FluxModel::new(ModelKind::TamRl, tiny_config(), None, &mut rng).unwrap();
        let windows: Vec<&TimeSeriesWindow> = tasks.iter().flat_map(|t| &t.windows).collect();
        let before = evaluate_decoder_loss(&model, &windows, &loss).unwrap();
        let enc = checksum(model.encoder.as_ref().unwrap());
        let gen = checksum(model.generator.as_ref().unwrap());
        let cfg = TrainRunConfig { checkpoint_every: 10, ..quick_cfg() };
        let out = pretrain_decoder(model, &tasks, &loss, &cfg, 40, &mut rng).unwrap();
        let after = evaluate_decoder_loss(&out.model, &windows, &loss).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(checksum(out.model.encoder.as_ref().unwrap()), enc);
        assert_eq!(checksum(out.model.generator.as_ref().unwrap()), gen);
        assert_eq!(out.log.len(), 40);
        assert_eq!(out.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![10, 20, 30, 40]);

        // Running-minimum smoothing of the loss curve never rises.
        let mut best = f64::INFINITY;
        let smoothed: Vec<f64> = out.log.iter().map(|r| {
            best = best.min(r.mean_loss);
            best
        }).collect();
        assert!(smoothed.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.log.last().unwrap().mean_loss < out.log[0].mean_loss);
    }

    #[test]
    fn first_episode_matches_pretrained_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tasks = vec![toy_site("A", 5, 6, 1.0, &mut rng)];
        let model = FluxModel::new(ModelKind::TamRl, tiny_config(), None, &mut rng).unwrap();
        let e = sample_episode(&tasks[0], 3, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let m = model.modulation(&bound, &e.support).unwrap();
        for q in &e.query {
            let modulated = crate::model::to_predictions(model.decode(&bound, Some(&m), q).unwrap());
            let plain = predict_tamlstm(&model, q).unwrap();
            let clipped: Vec<_> = modulated.iter().map(|p| p.clipped()).collect();
            assert_eq!(clipped, plain);
        }
    }

    #[test]
    fn one_step_updates_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tasks = vec![toy_site("A", 5, 6, 2.0, &mut rng)];
        let cfg = TamRlConfig { generator_identity_init: false, ..tiny_config() };
        let mut model = FluxModel::new(ModelKind::TamRl, cfg, None, &mut rng).unwrap();
        let e = sample_episode(&tasks[0], 3, 2, &mut rng).unwrap();
        let enc = checksum(model.encoder.as_ref().unwrap());
        let dec = checksum(&model.decoder);
        let l = episode_step(&mut model, &e, &loss_for(&tasks), 5.0, &mut AdamState::new(1e-3)).unwrap();
        assert!(l > 0.0);
        assert_ne!(checksum(model.encoder.as_ref().unwrap()), enc);
        assert_ne!(checksum(&model.decoder), dec);
    }

    #[test]
    fn joint_training_requires_modulated_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tasks = vec![toy_site("A", 5, 6, 1.0, &mut rng)];
        let model = FluxModel::new(ModelKind::TamLstm, tiny_config(), None, &mut rng).unwrap();
        assert!(joint_train(model, &tasks, &loss_for(&tasks), &quick_cfg(), &mut rng).is_err());
        let wide = FluxModel::new(ModelKind::TamRl, TamRlConfig { driver_dim: 3, ..tiny_config() }, None, &mut rng).unwrap();
        assert!(joint_train(wide, &tasks, &loss_for(&tasks), &quick_cfg(), &mut rng).is_err());
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let cfg = TrainRunConfig { seeds: Some(vec![3, 4, 3]), ensemble_size: 3, ..quick_cfg() };
        assert!(matches!(cfg.member_seeds(), Err(Error::Validation(_))));
        assert_eq!(TrainRunConfig { seed: 7, ensemble_size: 3, ..quick_cfg() }.member_seeds().unwrap(), vec![7, 8, 9]);
        assert!(TrainRunConfig { ensemble_size: 0, ..quick_cfg() }.validate().is_err());
    }

    #[test]
    fn ensemble_members_are_deterministic_and_thread_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tasks: Vec<SiteTask> = (0..2).map(|i| toy_site(&format!("S{i}"), 5, 6, 1.0 + i as f64, &mut rng)).collect();
        let loss = loss_for(&tasks);
        let vocab = StaticVocab::new(vec!["GRA".into()], vec!["Cfa".into()]).unwrap();
        let cfg = quick_cfg();
        let serial = train_ensemble(&tiny_config(), Some(&vocab), &tasks, &loss, &cfg).unwrap();
        let parallel = train_ensemble(&tiny_config(), Some(&vocab), &tasks, &loss, &TrainRunConfig { threads: 2, ..cfg.clone() }).unwrap();
        assert_eq!(serial.len(), 2);
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.tamrl.to_archive().to_bytes(), b.tamrl.to_archive().to_bytes());
            assert_eq!(a.ctlstm, b.ctlstm);
        }
        assert_ne!(serial[0].tamrl, serial[1].tamrl);

        let single = train_member(cfg.seed, &tiny_config(), Some(&vocab), &tasks, &loss, &cfg).unwrap();
        assert_eq!(single.tamrl, serial[0].tamrl);
        let log = format_metrics_log(&single.log);
        assert_eq!(log.lines().count(), 1 + 3 + 2 + 2);
        assert!(log.lines().nth(1).unwrap().starts_with("pretrain\t1\t"));
    }

    #[test]
    fn nan_free_parameters_after_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tasks = vec![toy_site("A", 5, 6, 50.0, &mut rng)];
        let loss = loss_for(&tasks);
        let run = train_member(1, &tiny_config(), None, &tasks, &loss, &quick_cfg()).unwrap();
        let mut finite = true;
        run.tamrl.visit("", &mut |_, t: &Tensor| finite &= t.data().iter().all(|v| v.is_finite()));
        assert!(finite);
        assert!(run.ctlstm.is_none());
    }
}
