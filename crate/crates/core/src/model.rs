//! Modulated flux model and its two unmodulated baselines.
//!
//! A [`FluxModel`] always has an LSTM decoder and a three-row affine head
//! (GPP, RECO, NEE). Its [`ModelKind`] selects what else it carries:
//!
//! * `TamRl`: a bidirectional task encoder and an MLP generator. The
//!   encoder summarizes a support set of windows into an embedding `z`; the
//!   generator maps `z` to FiLM parameters `(γ₁, β₁, γ₂, β₂)` applied to the
//!   decoder inputs and to every hidden state before the heads.
//! * `TamLstm`: the decoder and heads alone.
//! * `CtLstm`: the decoder with one-hot IGBP and Köppen labels appended to
//!   every input step.
//!
//! Generator output layout is `[γ₁ raw (D) | β₁ (D) | γ₂ raw (H) | β₂ (H)]`
//! with `γ = 1 + raw`, so an all-zero generator output is the identity
//! modulation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::checkpoint::Archive;
use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::nn::{
    bilstm_encode, lstm_forward, mlp_forward, BoundLinear, BoundLstm, BoundMlp, Linear, LstmParams, MlpParams,
    Parameters,
};

pub const GPP: usize = 0;
pub const RECO: usize = 1;
pub const NEE: usize = 2;
pub const N_HEADS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    TamRl,
    TamLstm,
    CtLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::TamRl, ModelKind::TamLstm, ModelKind::CtLstm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TamRl => "tamrl",
            ModelKind::TamLstm => "tamlstm",
            ModelKind::CtLstm => "ctlstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TamRlConfig {
    pub driver_dim: usize,
    pub hidden: usize,
    /// Hidden width of each encoder direction.
    pub encoder_hidden: usize,
    pub embedding_dim: usize,
    /// Hidden layer widths of the generator MLP.
    pub generator_hidden: Vec<usize>,
    /// Zero the generator's last layer so training starts at identity FiLM.
    pub generator_identity_init: bool,
    /// Head outputs are multiplied by this, and targets fed to the encoder
    /// divided by it, so the networks work on unit-order values.
    pub flux_scale: f64,
}

impl Default for TamRlConfig {
    fn default() -> Self {
        TamRlConfig {
            driver_dim: 4,
            hidden: 64,
            encoder_hidden: 32,
            embedding_dim: 32,
            generator_hidden: vec![64],
            generator_identity_init: true,
            flux_scale: 5.0,
        }
    }
}

impl TamRlConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.driver_dim, self.hidden, self.encoder_hidden, self.embedding_dim];
        if dims.contains(&0) || self.generator_hidden.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.flux_scale > 0.0 && self.flux_scale.is_finite()) {
            return Err(Error::Config(format!("flux_scale must be positive, got {}", self.flux_scale)));
        }
        Ok(())
    }

    /// `2D + 2H`.
    pub fn modulation_width(&self) -> usize {
        2 * self.driver_dim + 2 * self.hidden
    }

    /// Encoder input: drivers plus the two (masked) targets.
    pub fn encoder_input_dim(&self) -> usize {
        self.driver_dim + 2
    }
}

/// Label vocabularies for the one-hot static block (IGBP first, then Köppen).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticVocab {
    pub igbp: Vec<String>,
    pub koppen: Vec<String>,
}

impl StaticVocab {
    pub fn new(mut igbp: Vec<String>, mut koppen: Vec<String>) -> Result<Self> {
        igbp.sort();
        igbp.dedup();
        koppen.sort();
        koppen.dedup();
        if igbp.is_empty() || koppen.is_empty() {
            return Err(Error::Empty("static label vocabulary"));
        }
        Ok(StaticVocab { igbp, koppen })
    }

    pub fn width(&self) -> usize {
        self.igbp.len() + self.koppen.len()
    }

    pub fn encode(&self, igbp: &str, koppen: &str) -> Result<Vec<f64>> {
        let i = self
            .igbp
            .iter()
            .position(|l| l == igbp)
            .ok_or_else(|| Error::Validation(format!("unknown IGBP label `{igbp}`")))?;
        let k = self
            .koppen
            .iter()
            .position(|l| l == koppen)
            .ok_or_else(|| Error::Validation(format!("unknown Köppen label `{koppen}`")))?;
        let mut v = vec![0.0; self.width()];
        v[i] = 1.0;
        v[self.igbp.len() + k] = 1.0;
        Ok(v)
    }
}

/// Bidirectional LSTM encoder with an affine projection to the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEncoder {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub projection: Linear,
}

#[derive(Debug, Clone)]
pub struct BoundEncoder<'t> {
    pub forward: BoundLstm<'t>,
    pub backward: BoundLstm<'t>,
    pub projection: BoundLinear<'t>,
    /// Divisor applied to the targets in the encoder input.
    pub target_scale: f64,
}

impl TaskEncoder {
    pub fn init(input: usize, hidden: usize, embedding: usize, rng: &mut impl Rng) -> Self {
        TaskEncoder {
            forward: LstmParams::init(input, hidden, rng),
            backward: LstmParams::init(input, hidden, rng),
            projection: Linear::init(2 * hidden, embedding, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            forward: self.forward.bind(tape),
            backward: self.backward.bind(tape),
            projection: self.projection.bind(tape),
            target_scale: 1.0,
        }
    }

    pub fn absorb(&mut self, b: &BoundEncoder<'_>, grads: &Gradients) -> Result<()> {
        self.forward.absorb(&b.forward, grads)?;
        self.backward.absorb(&b.backward, grads)?;
        self.projection.absorb(&b.projection, grads)
    }
}

impl Parameters for TaskEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.forward.visit(&format!("{prefix}/fwd"), f);
        self.backward.visit(&format!("{prefix}/bwd"), f);
        self.projection.visit(&format!("{prefix}/proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.forward.visit_mut(&format!("{prefix}/fwd"), f);
        self.backward.visit_mut(&format!("{prefix}/bwd"), f);
        self.projection.visit_mut(&format!("{prefix}/proj"), f);
    }
}

/// Latent site representation computed from a support set.
#[derive(Debug, Clone)]
pub struct TaskEmbedding<'t> {
    pub z: Var<'t>,
    pub source_site: String,
    pub support_count: usize,
}

/// FiLM parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ModulationParams<'t> {
    pub gamma1: Var<'t>,
    pub beta1: Var<'t>,
    pub gamma2: Var<'t>,
    pub beta2: Var<'t>,
}

impl<'t> ModulationParams<'t> {
    /// `γ = 1`, `β = 0`.
    pub fn identity(tape: &'t Tape, driver_dim: usize, hidden: usize) -> Result<Self> {
        Ok(ModulationParams {
            gamma1: tape.vector(vec![1.0; driver_dim])?,
            beta1: tape.vector(vec![0.0; driver_dim])?,
            gamma2: tape.vector(vec![1.0; hidden])?,
            beta2: tape.vector(vec![0.0; hidden])?,
        })
    }
}

/// Per-timestep flux triple in gC m⁻² d⁻¹.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxPrediction {
    pub gpp: f64,
    pub reco: f64,
    pub nee: f64,
    pub clipped_gpp: bool,
    pub clipped_reco: bool,
}

impl FluxPrediction {
    pub fn raw(gpp: f64, reco: f64, nee: f64) -> Self {
        FluxPrediction {
            gpp,
            reco,
            nee,
            clipped_gpp: false,
            clipped_reco: false,
        }
    }

    /// Inference post-processing: GPP and RECO floored at zero, NEE untouched.
    pub fn clipped(self) -> Self {
        let mut out = self;
        if out.gpp < 0.0 {
            out.gpp = 0.0;
            out.clipped_gpp = true;
        }
        if out.reco < 0.0 {
            out.reco = 0.0;
            out.clipped_reco = true;
        }
        out
    }

    pub fn as_array(&self) -> [f64; 3] {
        let mut a = [0.0; 3];
        a[GPP] = self.gpp;
        a[RECO] = self.reco;
        a[NEE] = self.nee;
        a
    }
}

pub fn clip_predictions(preds: &[FluxPrediction]) -> Vec<FluxPrediction> {
    preds.iter().map(|p| p.clipped()).collect()
}

/// Reads a `[T, 3]` head output into unclipped predictions.
pub fn to_predictions(out: Var<'_>) -> Vec<FluxPrediction> {
    out.value()
        .chunks_exact(N_HEADS)
        .map(|r| FluxPrediction::raw(r[GPP], r[RECO], r[NEE]))
        .collect()
}

/// `γ ⊙ x + β`.
pub fn apply_film<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if gamma.shape() != shape || beta.shape() != shape {
        return Err(Error::Shape {
            op: "apply_film",
            lhs: shape,
            rhs: if gamma.shape() != x.shape() { gamma.shape() } else { beta.shape() },
        });
    }
    gamma.mul(x)?.add(beta)
}

/// Per-step encoder input: normalized drivers followed by `(gpp, nee) / target_scale`,
/// zeroed where masked.
pub fn encoder_inputs<'t>(tape: &'t Tape, window: &TimeSeriesWindow, target_scale: f64) -> Result<Vec<Var<'t>>> {
    (0..window.len())
        .map(|t| {
            let mut x = window.drivers[t].clone();
            if window.mask[t] {
                x.extend(window.targets[t].iter().map(|v| v / target_scale));
            } else {
                x.extend_from_slice(&[0.0, 0.0]);
            }
            tape.vector(x)
        })
        .collect()
}

/// Per-step decoder input: drivers, optionally followed by a static block.
pub fn decoder_inputs<'t>(tape: &'t Tape, window: &TimeSeriesWindow, static_block: Option<&[f64]>) -> Result<Vec<Var<'t>>> {
    (0..window.len())
        .map(|t| match static_block {
            Some(s) => tape.vector([window.drivers[t].as_slice(), s].concat()),
            None => tape.vector(window.drivers[t].clone()),
        })
        .collect()
}

/// Mean of per-window BiLSTM summaries, projected to the embedding width.
pub fn encode_task<'t>(encoder: &BoundEncoder<'t>, support: &[&TimeSeriesWindow]) -> Result<TaskEmbedding<'t>> {
    let first = support.first().ok_or(Error::Empty("support set"))?;
    if let Some(other) = support.iter().find(|w| w.site_id != first.site_id) {
        return Err(Error::Validation(format!(
            "support set mixes sites `{}` and `{}`",
            first.site_id, other.site_id
        )));
    }
    let tape = encoder.projection.bias.tape();
    let mut sum: Option<Var<'t>> = None;
    for w in support {
        let xs = encoder_inputs(tape, w, encoder.target_scale)?;
        let e = bilstm_encode(&encoder.forward, &encoder.backward, &xs)?;
        sum = Some(match sum {
            Some(s) => s.add(e)?,
            None => e,
        });
    }
    let mean = sum.expect("nonempty support").scale(1.0 / support.len() as f64);
    Ok(TaskEmbedding {
        z: encoder.projection.forward(mean)?,
        source_site: first.site_id.clone(),
        support_count: support.len(),
    })
}

/// Splits the generator output into FiLM parameters.
pub fn generate_modulation<'t>(
    generator: &BoundMlp<'t>,
    z: &TaskEmbedding<'t>,
    driver_dim: usize,
    hidden: usize,
) -> Result<ModulationParams<'t>> {
    let out = mlp_forward(generator, z.z)?;
    let width = 2 * driver_dim + 2 * hidden;
    if out.shape() != [width] {
        return Err(Error::Shape {
            op: "generate_modulation",
            lhs: out.shape(),
            rhs: vec![width],
        });
    }
    let d = driver_dim;
    Ok(ModulationParams {
        gamma1: out.slice(0, d)?.add_const(1.0),
        beta1: out.slice(d, d)?,
        gamma2: out.slice(2 * d, hidden)?.add_const(1.0),
        beta2: out.slice(2 * d + hidden, hidden)?,
    })
}

/// Modulated (or plain, when `modulation` is `None`) decode to a `[T, 3]` output.
///
/// Inputs are FiLM-modulated with `(γ₁, β₁)` before each LSTM step and every
/// hidden state with `(γ₂, β₂)` before the heads; head outputs are
/// multiplied by `output_scale`. No clipping.
pub fn forward_decode<'t>(
    decoder: &BoundLstm<'t>,
    heads: &BoundLinear<'t>,
    modulation: Option<&ModulationParams<'t>>,
    inputs: &[Var<'t>],
    output_scale: f64,
) -> Result<Var<'t>> {
    if inputs.is_empty() {
        return Err(Error::Empty("decode window"));
    }
    let xs: Vec<Var<'t>> = match modulation {
        Some(m) => inputs
            .iter()
            .map(|&x| apply_film(x, m.gamma1, m.beta1))
            .collect::<Result<_>>()?,
        None => inputs.to_vec(),
    };
    let (h0, c0) = decoder.zero_state();
    let out = lstm_forward(decoder, &xs, h0, c0)?;
    let rows = out
        .hidden
        .iter()
        .map(|&h| {
            let h = match modulation {
                Some(m) => apply_film(h, m.gamma2, m.beta2)?,
                None => h,
            };
            heads.forward(h)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(inputs[0].tape().stack(&rows)?.scale(output_scale))
}

/// All trainable pieces of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxModel {
    pub kind: ModelKind,
    pub config: TamRlConfig,
    pub decoder: LstmParams,
    pub heads: Linear,
    pub encoder: Option<TaskEncoder>,
    pub generator: Option<MlpParams>,
    pub vocab: Option<StaticVocab>,
}

/// A model's parameters bound to a tape. Absent parts were not bound.
#[derive(Debug, Clone)]
pub struct BoundModel<'t> {
    pub decoder: BoundLstm<'t>,
    pub heads: BoundLinear<'t>,
    pub encoder: Option<BoundEncoder<'t>>,
    pub generator: Option<BoundMlp<'t>>,
}

impl FluxModel {
    pub fn new(kind: ModelKind, config: TamRlConfig, vocab: Option<StaticVocab>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let static_width = match (kind, &vocab) {
            (ModelKind::CtLstm, Some(v)) => v.width(),
            (ModelKind::CtLstm, None) => {
                return Err(Error::Config("the one-hot baseline needs a label vocabulary".into()))
            }
            _ => 0,
        };
        let decoder = LstmParams::init(config.driver_dim + static_width, config.hidden, rng);
        let heads = Linear::init(config.hidden, N_HEADS, rng);
        let (encoder, generator) = if kind == ModelKind::TamRl {
            let encoder = TaskEncoder::init(config.encoder_input_dim(), config.encoder_hidden, config.embedding_dim, rng);
            let mut widths = vec![config.embedding_dim];
            widths.extend(&config.generator_hidden);
            widths.push(config.modulation_width());
            let mut generator = MlpParams::init(&widths, rng)?;
            if config.generator_identity_init {
                let last = generator.layers.last_mut().expect("at least one layer");
                *last = Linear::zeros(last.input_dim(), last.output_dim());
            }
            (Some(encoder), Some(generator))
        } else {
            (None, None)
        };
        Ok(FluxModel {
            kind,
            vocab: if kind == ModelKind::CtLstm { vocab } else { None },
            config,
            decoder,
            heads,
            encoder,
            generator,
        })
    }

    /// The decoder and heads as a standalone unmodulated model.
    pub fn decoder_only(&self) -> FluxModel {
        FluxModel {
            kind: ModelKind::TamLstm,
            config: self.config.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads.clone(),
            encoder: None,
            generator: None,
            vocab: None,
        }
    }

    /// Decoder and heads only.
    pub fn bind_decoder<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            decoder: self.decoder.bind(tape),
            heads: self.heads.bind(tape),
            encoder: None,
            generator: None,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            decoder: self.decoder.bind(tape),
            heads: self.heads.bind(tape),
            encoder: self.encoder.as_ref().map(|e| BoundEncoder {
                target_scale: self.config.flux_scale,
                ..e.bind(tape)
            }),
            generator: self.generator.as_ref().map(|g| g.bind(tape)),
        }
    }

    pub fn absorb(&mut self, b: &BoundModel<'_>, grads: &Gradients) -> Result<()> {
        self.decoder.absorb(&b.decoder, grads)?;
        self.heads.absorb(&b.heads, grads)?;
        if let (Some(e), Some(be)) = (self.encoder.as_mut(), b.encoder.as_ref()) {
            e.absorb(be, grads)?;
        }
        if let (Some(g), Some(bg)) = (self.generator.as_mut(), b.generator.as_ref()) {
            g.absorb(bg, grads)?;
        }
        Ok(())
    }

    /// The one-hot block for a window, for the static-label baseline.
    pub fn static_block(&self, window: &TimeSeriesWindow) -> Result<Option<Vec<f64>>> {
        match (&self.kind, &self.vocab) {
            (ModelKind::CtLstm, Some(v)) => Ok(Some(v.encode(&window.igbp, &window.koppen)?)),
            _ => Ok(None),
        }
    }

    /// Builds the FiLM parameters for a support set on the tape of `bound`.
    pub fn modulation<'t>(&self, bound: &BoundModel<'t>, support: &[&TimeSeriesWindow]) -> Result<ModulationParams<'t>> {
        let (Some(enc), Some(gen)) = (bound.encoder.as_ref(), bound.generator.as_ref()) else {
            return Err(Error::Config(format!("{} model has no modulation network bound", self.kind)));
        };
        let z = encode_task(enc, support)?;
        generate_modulation(gen, &z, self.config.driver_dim, self.config.hidden)
    }

    /// Unclipped `[T, 3]` output on the tape of `bound`.
    pub fn decode<'t>(
        &self,
        bound: &BoundModel<'t>,
        modulation: Option<&ModulationParams<'t>>,
        window: &TimeSeriesWindow,
    ) -> Result<Var<'t>> {
        let tape = bound.heads.bias.tape();
        let block = self.static_block(window)?;
        let inputs = decoder_inputs(tape, window, block.as_deref())?;
        forward_decode(&bound.decoder, &bound.heads, modulation, &inputs, self.config.flux_scale)
    }

    /// Unclipped predictions. `support` is used only by the modulated model.
    pub fn predict_raw(&self, window: &TimeSeriesWindow, support: &[&TimeSeriesWindow]) -> Result<Vec<FluxPrediction>> {
        let tape = Tape::inference();
        let bound = self.bind(&tape);
        let modulation = match self.kind {
            ModelKind::TamRl => {
                if let Some(s) = support.iter().find(|s| s.site_id != window.site_id) {
                    return Err(Error::Validation(format!(
                        "support window from `{}` used for site `{}`",
                        s.site_id, window.site_id
                    )));
                }
                Some(self.modulation(&bound, support)?)
            }
            _ => None,
        };
        let out = self.decode(&bound, modulation.as_ref(), window)?;
        Ok(to_predictions(out))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.insert_params(self, "");
        let c = &self.config;
        let meta = [
            ("kind", self.kind.name().to_string()),
            ("driver_dim", c.driver_dim.to_string()),
            ("hidden", c.hidden.to_string()),
            ("encoder_hidden", c.encoder_hidden.to_string()),
            ("embedding_dim", c.embedding_dim.to_string()),
            (
                "generator_hidden",
                c.generator_hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("generator_identity_init", c.generator_identity_init.to_string()),
            ("flux_scale", c.flux_scale.to_string()),
        ];
        for (k, v) in meta {
            a.meta.insert(k.to_string(), v);
        }
        if let Some(v) = &self.vocab {
            a.meta.insert("vocab_igbp".into(), v.igbp.join(","));
            a.meta.insert("vocab_koppen".into(), v.koppen.join(","));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let get = |k: &str| {
            a.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata `{k}`")))
        };
        let kind = ModelKind::parse(get("kind")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let generator_hidden = get("generator_hidden")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Checkpoint("bad generator_hidden".into())))
            .collect::<Result<Vec<usize>>>()?;
        let config = TamRlConfig {
            driver_dim: num("driver_dim")?,
            hidden: num("hidden")?,
            encoder_hidden: num("encoder_hidden")?,
            embedding_dim: num("embedding_dim")?,
            generator_hidden,
            generator_identity_init: get("generator_identity_init")? == "true",
            flux_scale: get("flux_scale")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad metadata `flux_scale`".into()))?,
        };
        let vocab = match (a.meta.get("vocab_igbp"), a.meta.get("vocab_koppen")) {
            (Some(i), Some(k)) => Some(StaticVocab::new(
                i.split(',').map(String::from).collect(),
                k.split(',').map(String::from).collect(),
            )?),
            _ => None,
        };
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = FluxModel::new(kind, config, vocab, &mut rng)?;
        a.load_params(&mut model, "")?;
        Ok(model)
    }
}

impl Parameters for FluxModel {
    fn visit<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.decoder.visit("decoder", f);
        self.heads.visit("heads", f);
        if let Some(e) = &self.encoder {
            e.visit("encoder", f);
        }
        if let Some(g) = &self.generator {
            g.visit("generator", f);
        }
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.decoder.visit_mut("decoder", f);
        self.heads.visit_mut("heads", f);
        if let Some(e) = &mut self.encoder {
            e.visit_mut("encoder", f);
        }
        if let Some(g) = &mut self.generator {
            g.visit_mut("generator", f);
        }
    }
}

/// Parameter view restricted to the decoder and heads.
pub struct DecoderOnly<'m>(pub &'m mut FluxModel);

impl Parameters for DecoderOnly<'_> {
    fn visit<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.0.decoder.visit("decoder", f);
        self.0.heads.visit("heads", f);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.0.decoder.visit_mut("decoder", f);
        self.0.heads.visit_mut("heads", f);
    }
}

/// Zero-shot prediction for a site from its support set: encode, modulate,
/// decode, clip. Parameters are only read.
pub fn predict_zero_shot(model: &FluxModel, support: &[&TimeSeriesWindow], window: &TimeSeriesWindow) -> Result<Vec<FluxPrediction>> {
    if model.kind != ModelKind::TamRl {
        return Err(Error::Config(format!("zero-shot prediction needs a tamrl model, got {}", model.kind)));
    }
    Ok(clip_predictions(&model.predict_raw(window, support)?))
}

/// Decoder-only prediction (identity modulation), clipped.
pub fn predict_tamlstm(model: &FluxModel, window: &TimeSeriesWindow) -> Result<Vec<FluxPrediction>> {
    let tape = Tape::inference();
    let bound = model.bind_decoder(&tape);
    let inputs = decoder_inputs(&tape, window, None)?;
    let out = forward_decode(&bound.decoder, &bound.heads, None, &inputs, model.config.flux_scale)?;
    Ok(clip_predictions(&to_predictions(out)))
}

/// Plain LSTM on drivers with the given one-hot block appended to every step, clipped.
pub fn predict_ct_lstm(model: &FluxModel, window: &TimeSeriesWindow, static_onehot: &[f64]) -> Result<Vec<FluxPrediction>> {
    let expected = model.vocab.as_ref().map_or(0, StaticVocab::width);
    if model.kind != ModelKind::CtLstm || static_onehot.len() != expected {
        return Err(Error::Shape {
            op: "predict_ct_lstm static block",
            lhs: vec![expected],
            rhs: vec![static_onehot.len()],
        });
    }
    let tape = Tape::inference();
    let bound = model.bind_decoder(&tape);
    let inputs = decoder_inputs(&tape, window, Some(static_onehot))?;
    let out = forward_decode(&bound.decoder, &bound.heads, None, &inputs, model.config.flux_scale)?;
    Ok(clip_predictions(&to_predictions(out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::nn::{checksum, named_tensors};
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> TamRlConfig {
        TamRlConfig {
            driver_dim: 3,
            hidden: 5,
            encoder_hidden: 4,
            embedding_dim: 3,
            generator_hidden: vec![6],
            generator_identity_init: true,
            flux_scale: 1.0,
        }
    }

    pub(crate) fn random_window(site: &str, len: usize, d: usize, rng: &mut impl Rng) -> TimeSeriesWindow {
        TimeSeriesWindow {
            site_id: site.into(),
            start: NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(),
            drivers: (0..len).map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect(),
            targets: (0..len).map(|_| [rng.gen_range(0.0..5.0), rng.gen_range(-3.0..2.0)]).collect(),
            qc: vec![1.0; len],
            mask: vec![true; len],
            igbp: "ENF".into(),
            koppen: "Dfb".into(),
        }
    }

    fn randomize_generator(model: &mut FluxModel, rng: &mut impl Rng) {
        let g = model.generator.as_mut().unwrap();
        for layer in &mut g.layers {
            let n = layer.weight.len();
            layer.weight.set_data((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
            let n = layer.bias.len();
            layer.bias.set_data((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        }
    }

    #[test]
    fn film_examples() {
        let tape = Tape::new();
        let x = tape.vector(vec![2.0, -1.0]).unwrap();
        let one = tape.vector(vec![1.0, 1.0]).unwrap();
        let zero = tape.vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(apply_film(x, one, zero).unwrap().value(), vec![2.0, -1.0]);
        let g = tape.vector(vec![0.5, 2.0]).unwrap();
        let b = tape.vector(vec![1.0, -1.0]).unwrap();
        assert_eq!(apply_film(x, g, b).unwrap().value(), vec![2.0, -3.0]);
        let short = tape.vector(vec![1.0]).unwrap();
        assert!(apply_film(x, short, b).is_err());

        let at = [
            Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap(),
            Tensor::vector(vec![1.5, 0.2, -0.7]).unwrap(),
            Tensor::vector(vec![0.1, 0.0, 4.0]).unwrap(),
        ];
        let err = grad_check_many(|_, v| Ok(apply_film(v[0], v[1], v[2])?.sum()), &at, 1e-5);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_generator_gives_identity_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_config();
        let model = FluxModel::new(ModelKind::TamRl, cfg.clone(), None, &mut rng).unwrap();
        let w = random_window("A", 6, 3, &mut rng);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let m = model.modulation(&bound, &[&w]).unwrap();
        assert_eq!(m.gamma1.value(), vec![1.0; 3]);
        assert_eq!(m.beta1.value().iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        assert_eq!(m.gamma2.value(), vec![1.0; 5]);
        assert_eq!(m.beta2.value().iter().map(|v| v.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn generator_split_layout() {
        let tape = Tape::new();
        let (d, h) = (2, 3);
        let width = 2 * d + 2 * h;
        let mut layer = Linear::zeros(1, width);
        layer.bias.set_data((0..width).map(|i| i as f64).collect()).unwrap();
        let mlp = MlpParams::from_layers(vec![layer]).unwrap();
        let z = TaskEmbedding {
            z: tape.vector(vec![0.0]).unwrap(),
            source_site: "A".into(),
            support_count: 1,
        };
        let m = generate_modulation(&mlp.bind(&tape), &z, d, h).unwrap();
        assert_eq!(m.gamma1.value(), vec![1.0, 2.0]);
        assert_eq!(m.beta1.value(), vec![2.0, 3.0]);
        assert_eq!(m.gamma2.value(), vec![5.0, 6.0, 7.0]);
        assert_eq!(m.beta2.value(), vec![7.0, 8.0, 9.0]);
        assert!(generate_modulation(&mlp.bind(&tape), &z, d, h + 1).is_err());
    }

    #[test]
    fn encode_task_mean_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = FluxModel::new(ModelKind::TamRl, small_config(), None, &mut rng).unwrap();
        let a = random_window("A", 7, 3, &mut rng);
        let b = random_window("A", 7, 3, &mut rng);
        let tape = Tape::new();
        let enc = model.bind(&tape).encoder.unwrap();

        let single = encode_task(&enc, &[&a]).unwrap();
        let xs = encoder_inputs(&tape, &a, 1.0).unwrap();
        let raw_a = bilstm_encode(&enc.forward, &enc.backward, &xs).unwrap();
        assert_eq!(single.z.value(), enc.projection.forward(raw_a).unwrap().value());
        assert_eq!(single.support_count, 1);
        assert_eq!(single.source_site, "A");

        let triple = encode_task(&enc, &[&a, &a, &a]).unwrap();
        for (x, y) in triple.z.value().iter().zip(single.z.value()) {
            assert!((x - y).abs() < 1e-14);
        }

        let xs = encoder_inputs(&tape, &b, 1.0).unwrap();
        let raw_b = bilstm_encode(&enc.forward, &enc.backward, &xs).unwrap();
        let mid: Vec<f64> = raw_a.value().iter().zip(raw_b.value()).map(|(x, y)| (x + y) / 2.0).collect();
        let expected = enc.projection.forward(tape.vector(mid).unwrap()).unwrap().value();
        let pair = encode_task(&enc, &[&a, &b]).unwrap().z.value();
        for (x, y) in pair.iter().zip(expected) {
            assert!((x - y).abs() < 1e-14);
        }

        assert!(matches!(encode_task(&enc, &[]), Err(Error::Empty(_))));
        let c = random_window("B", 7, 3, &mut rng);
        assert!(encode_task(&enc, &[&a, &c]).is_err());
    }

    #[test]
    fn identity_modulation_matches_plain_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = FluxModel::new(ModelKind::TamRl, small_config(), None, &mut rng).unwrap();
        for _ in 0..10 {
            let w = random_window("A", 9, 3, &mut rng);
            let tape = Tape::new();
            let bound = model.bind_decoder(&tape);
            let id = ModulationParams::identity(&tape, 3, 5).unwrap();
            let a = model.decode(&bound, Some(&id), &w).unwrap().value();
            let b = model.decode(&bound, None, &w).unwrap().value();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn flux_scale_multiplies_heads_and_divides_encoder_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let unit = FluxModel::new(ModelKind::TamRl, small_config(), None, &mut rng).unwrap();
        let mut scaled = unit.clone();
        scaled.config.flux_scale = 4.0;
        let w = random_window("A", 9, 3, &mut rng);
        let a = unit.decoder_only().predict_raw(&w, &[]).unwrap();
        let b = scaled.decoder_only().predict_raw(&w, &[]).unwrap();
        for (p, q) in a.iter().zip(&b) {
            for (x, y) in p.as_array().iter().zip(q.as_array()) {
                assert!((4.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        let mut masked = w.clone();
        masked.mask[2] = false;
        let tape = Tape::new();
        let xs = encoder_inputs(&tape, &masked, 4.0).unwrap();
        assert_eq!(xs[0].value()[3..], [masked.targets[0][0] / 4.0, masked.targets[0][1] / 4.0]);
        assert_eq!(xs[2].value()[3..], [0.0, 0.0]);
        assert_eq!(xs[0].value()[..3], masked.drivers[0][..]);
    }

    #[test]
    fn zero_decoder_on_zero_drivers_emits_head_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = FluxModel::new(ModelKind::TamLstm, small_config(), None, &mut rng).unwrap();
        model.decoder = LstmParams::zeros(3, 5);
        model.heads.bias.set_data(vec![1.5, 0.5, -1.0]).unwrap();
        let mut w = random_window("A", 4, 3, &mut rng);
        w.drivers = vec![vec![0.0; 3]; 4];
        let raw = model.predict_raw(&w, &[]).unwrap();
        assert!(raw.iter().all(|p| p.as_array() == [1.5, 0.5, -1.0]));
    }

    #[test]
    fn forward_decode_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = FluxModel::new(ModelKind::TamRl, small_config(), None, &mut rng).unwrap();
        randomize_generator(&mut model, &mut rng);
        let w = random_window("A", 6, 3, &mut rng);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let m = model.modulation(&bound, &[&w]).unwrap();
        let out = model.decode(&bound, Some(&m), &w).unwrap().value();

        let xs = decoder_inputs(&tape, &w, None).unwrap();
        let xs: Vec<_> = xs.iter().map(|&x| apply_film(x, m.gamma1, m.beta1).unwrap()).collect();
        let (h0, c0) = bound.decoder.zero_state();
        let seq = lstm_forward(&bound.decoder, &xs, h0, c0).unwrap();
        let mut manual = Vec::new();
        for h in seq.hidden {
            let h = apply_film(h, m.gamma2, m.beta2).unwrap();
            manual.extend(bound.heads.forward(h).unwrap().value());
        }
        assert_eq!(out, manual);

        let plain = model.decode(&bound, None, &w).unwrap().value();
        assert_ne!(out, plain);

        let bad = ModulationParams::identity(&tape, 2, 5).unwrap();
        assert!(model.decode(&bound, Some(&bad), &w).is_err());
    }

    #[test]
    fn clipping_semantics_and_idempotence() {
        let p = FluxPrediction::raw(-0.3, 1.0, 0.5).clipped();
        assert_eq!((p.gpp, p.reco, p.nee), (0.0, 1.0, 0.5));
        assert!(p.clipped_gpp && !p.clipped_reco);
        assert_eq!(p.clipped(), p);
        let q = FluxPrediction::raw(1.0, -2.0, -4.0).clipped();
        assert_eq!(q.nee, -4.0);
        assert!(q.clipped_reco);
    }

    #[test]
    fn zero_shot_is_deterministic_and_support_invariant_under_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = FluxModel::new(ModelKind::TamRl, small_config(), None, &mut rng).unwrap();
        let w = random_window("A", 8, 3, &mut rng);
        let s1 = random_window("A", 8, 3, &mut rng);
        let s2 = random_window("A", 8, 3, &mut rng);
        let before = checksum(&model);
        let a = predict_zero_shot(&model, &[&s1], &w).unwrap();
        let b = predict_zero_shot(&model, &[&s1], &w).unwrap();
        assert_eq!(a, b);
        let c = predict_zero_shot(&model, &[&s1, &s2], &w).unwrap();
        assert_eq!(a, c);
        assert_eq!(a, predict_tamlstm(&model, &w).unwrap());
        assert_eq!(checksum(&model), before);
        assert!(predict_zero_shot(&model, &[], &w).is_err());
        let other = random_window("B", 8, 3, &mut rng);
        assert!(predict_zero_shot(&model, &[&other], &w).is_err());
    }

    #[test]
    fn static_onehot_layout() {
        let vocab = StaticVocab::new(
            (0..17).map(|i| format!("I{i:02}")).collect(),
            (0..5).map(|i| format!("K{i}")).collect(),
        )
        .unwrap();
        assert_eq!(vocab.width(), 22);
        let v = vocab.encode("I03", "K1").unwrap();
        assert_eq!(v.iter().sum::<f64>(), 2.0);
        assert_eq!(v[3], 1.0);
        assert_eq!(v[17 + 1], 1.0);
        assert_eq!(v[..17].iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(v[17..].iter().filter(|&&x| x == 1.0).count(), 1);
        assert!(vocab.encode("XXX", "K1").is_err());
        assert!(vocab.encode("I03", "K9").is_err());
    }

    #[test]
    fn ct_lstm_labels_change_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vocab = StaticVocab::new(vec!["ENF".into(), "GRA".into()], vec!["Dfb".into(), "Cfa".into()]).unwrap();
        let model = FluxModel::new(ModelKind::CtLstm, small_config(), Some(vocab.clone()), &mut rng).unwrap();
        assert_eq!(model.decoder.input_dim(), 3 + 4);
        let w = random_window("A", 5, 3, &mut rng);
        let a = predict_ct_lstm(&model, &w, &vocab.encode("ENF", "Dfb").unwrap()).unwrap();
        let b = predict_ct_lstm(&model, &w, &vocab.encode("GRA", "Cfa").unwrap()).unwrap();
        assert_ne!(a, b);
        assert!(predict_ct_lstm(&model, &w, &[1.0]).is_err());
        let mut unknown = w.clone();
        unknown.igbp = "WAT".into();
        assert!(model.predict_raw(&unknown, &[]).is_err());
        assert!(FluxModel::new(ModelKind::CtLstm, small_config(), None, &mut rng).is_err());
    }

    #[test]
    fn archive_roundtrip_restores_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = FluxModel::new(ModelKind::TamRl, small_config(), None, &mut rng).unwrap();
        let back = FluxModel::from_archive(&Archive::from_bytes(&model.to_archive().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, model);
        let names: Vec<String> = named_tensors(&model, "").into_iter().map(|(n, _)| n).collect();
        for prefix in ["decoder/", "heads/", "encoder/", "generator/"] {
            assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
        }
        let vocab = StaticVocab::new(vec!["A".into()], vec!["B".into(), "C".into()]).unwrap();
        let ct = FluxModel::new(ModelKind::CtLstm, small_config(), Some(vocab), &mut rng).unwrap();
        assert_eq!(FluxModel::from_archive(&ct.to_archive()).unwrap(), ct);
    }
}
