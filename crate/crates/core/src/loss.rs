//! Knowledge-guided training loss.
//!
//! ```text
//! L = MSE · w_qc · w_igbp · w_koppen + α · L_flux
//! ```
//!
//! The data term is the squared error on GPP and NEE averaged over the two
//! heads, scaled per step by the quality flag (and validity mask) and per
//! window by the two class weights, then averaged over timesteps. RECO has no
//! data term; it is tied to the other heads only through the carbon-balance
//! penalty `L_flux = mean_t (NEE - (RECO - GPP))²`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::model::{FluxPrediction, GPP, NEE, RECO};

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Which carbon-balance identity the penalty enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxSign {
    /// `NEE = RECO - GPP` (uptake is negative).
    #[default]
    RecoMinusGpp,
    /// `NEE = GPP - RECO`.
    GppMinusReco,
}

impl FluxSign {
    /// Coefficients `c` with `residual = c · (gpp, reco, nee)`.
    fn coefficients(self) -> [f64; 3] {
        let mut c = [0.0; 3];
        c[NEE] = 1.0;
        match self {
            FluxSign::RecoMinusGpp => {
                c[GPP] = 1.0;
                c[RECO] = -1.0;
            }
            FluxSign::GppMinusReco => {
                c[GPP] = -1.0;
                c[RECO] = 1.0;
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    /// `w_c = N / (K · n_c)`.
    #[default]
    InverseFrequency,
    /// Every class weighs 1.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub igbp_weights: BTreeMap<String, f64>,
    pub koppen_weights: BTreeMap<String, f64>,
    pub mode: ClassWeightMode,
    pub sign: FluxSign,
}

impl LossConfig {
    /// Class weights fitted on the given training windows.
    pub fn fit(windows: &[&TimeSeriesWindow], alpha: f64, mode: ClassWeightMode, sign: FluxSign) -> Result<Self> {
        let cfg = LossConfig {
            alpha,
            igbp_weights: compute_class_weights(windows.iter().map(|w| w.igbp.as_str()), mode)?,
            koppen_weights: compute_class_weights(windows.iter().map(|w| w.koppen.as_str()), mode)?,
            mode,
            sign,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        for (label, w) in self.igbp_weights.iter().chain(&self.koppen_weights) {
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("class weight for `{label}` must be > 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn class_weight(&self, igbp: &str, koppen: &str) -> Result<f64> {
        let wi = self
            .igbp_weights
            .get(igbp)
            .ok_or_else(|| Error::Validation(format!("unknown IGBP label `{igbp}`")))?;
        let wk = self
            .koppen_weights
            .get(koppen)
            .ok_or_else(|| Error::Validation(format!("unknown Köppen label `{koppen}`")))?;
        Ok(wi * wk)
    }

    /// Plain-text `key=value` form: `alpha=…`, `igbp.<label>=…`, `koppen.<label>=…`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "alpha={}", self.alpha).unwrap();
        let mode = match self.mode {
            ClassWeightMode::InverseFrequency => "inverse_frequency",
            ClassWeightMode::Uniform => "uniform",
        };
        writeln!(s, "mode={mode}").unwrap();
        let sign = match self.sign {
            FluxSign::RecoMinusGpp => "reco_minus_gpp",
            FluxSign::GppMinusReco => "gpp_minus_reco",
        };
        writeln!(s, "sign={sign}").unwrap();
        for (k, v) in &self.igbp_weights {
            writeln!(s, "igbp.{k}={v}").unwrap();
        }
        for (k, v) in &self.koppen_weights {
            writeln!(s, "koppen.{k}={v}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = LossConfig {
            alpha: DEFAULT_ALPHA,
            igbp_weights: BTreeMap::new(),
            koppen_weights: BTreeMap::new(),
            mode: ClassWeightMode::default(),
            sign: FluxSign::default(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let num = || -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::Config(format!("line {}: bad number `{v}`", n + 1)))
            };
            match k {
                "alpha" => cfg.alpha = num()?,
                "mode" => {
                    cfg.mode = match v {
                        "inverse_frequency" => ClassWeightMode::InverseFrequency,
                        "uniform" => ClassWeightMode::Uniform,
                        _ => return Err(Error::Config(format!("unknown mode `{v}`"))),
                    }
                }
                "sign" => {
                    cfg.sign = match v {
                        "reco_minus_gpp" => FluxSign::RecoMinusGpp,
                        "gpp_minus_reco" => FluxSign::GppMinusReco,
                        _ => return Err(Error::Config(format!("unknown sign `{v}`"))),
                    }
                }
                _ => {
                    if let Some(label) = k.strip_prefix("igbp.") {
                        cfg.igbp_weights.insert(label.to_string(), num()?);
                    } else if let Some(label) = k.strip_prefix("koppen.") {
                        cfg.koppen_weights.insert(label.to_string(), num()?);
                    } else {
                        return Err(Error::Config(format!("unknown key `{k}`")));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LossConfig::from_text(&text)
    }
}

/// Per-sample weight factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleWeight {
    pub w_qc: f64,
    pub w_igbp: f64,
    pub w_koppen: f64,
    pub product: f64,
}

impl SampleWeight {
    pub fn new(qc: f64, w_igbp: f64, w_koppen: f64) -> Result<Self> {
        let w_qc = qc_weight(qc)?;
        Ok(SampleWeight {
            w_qc,
            w_igbp,
            w_koppen,
            product: w_qc * w_igbp * w_koppen,
        })
    }
}

/// Quality weight for a continuous QC flag; the identity on `[0, 1]`.
pub fn qc_weight(qc: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&qc) {
        Ok(qc)
    } else {
        Err(Error::Validation(format!("qc flag {qc} outside [0, 1]")))
    }
}

/// Class weights over a list of labels (one entry per sample).
pub fn compute_class_weights<'a, I>(labels: I, mode: ClassWeightMode) -> Result<BTreeMap<String, f64>>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.to_string()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Empty("class weight labels"));
    }
    let n: usize = counts.values().sum();
    let k = counts.len();
    Ok(counts
        .into_iter()
        .map(|(label, c)| {
            let w = match mode {
                ClassWeightMode::InverseFrequency => n as f64 / (k as f64 * c as f64),
                ClassWeightMode::Uniform => 1.0,
            };
            (label, w)
        })
        .collect())
}

/// Targets and weights for one window of predictions.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    /// `(gpp, nee)` per step.
    pub targets: &'a [[f64; 2]],
    pub qc: &'a [f64],
    /// Steps with `false` contribute nothing to the data term.
    pub mask: Option<&'a [bool]>,
    pub igbp: &'a str,
    pub koppen: &'a str,
}

impl TimeSeriesWindow {
    pub fn supervision(&self) -> Supervision<'_> {
        Supervision {
            targets: &self.targets,
            qc: &self.qc,
            mask: Some(&self.mask),
            igbp: &self.igbp,
            koppen: &self.koppen,
        }
    }
}

/// Loss components on the tape; `total = weighted_mse + alpha · flux_penalty`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub weighted_mse: Var<'t>,
    pub flux_penalty: Var<'t>,
    pub total: Var<'t>,
}

fn head_column<'t>(preds: Var<'t>, coef: [f64; 3]) -> Result<Var<'t>> {
    let c = preds.tape().vector(coef.to_vec())?;
    preds.matmul(c)
}

fn unit(head: usize) -> [f64; 3] {
    let mut c = [0.0; 3];
    c[head] = 1.0;
    c
}

fn check_preds(preds: Var<'_>) -> Result<usize> {
    match preds.shape().as_slice() {
        [t, 3] if *t > 0 => Ok(*t),
        [0, 3] => Err(Error::Empty("prediction sequence")),
        other => Err(Error::Shape {
            op: "loss predictions (expected [T, 3])",
            lhs: other.to_vec(),
            rhs: vec![0, 3],
        }),
    }
}

/// `mean_t (residual_t)²` over a `[T, 3]` prediction matrix.
pub fn flux_penalty<'t>(preds: Var<'t>, sign: FluxSign) -> Result<Var<'t>> {
    check_preds(preds)?;
    let r = head_column(preds, sign.coefficients())?;
    Ok(r.mul(r)?.mean())
}

/// Quality- and class-weighted squared error on GPP and NEE.
pub fn weighted_mse_term<'t>(preds: Var<'t>, sup: &Supervision<'_>, cfg: &LossConfig) -> Result<Var<'t>> {
    let t = check_preds(preds)?;
    let aligned = sup.targets.len() == t && sup.qc.len() == t && sup.mask.is_none_or(|m| m.len() == t);
    if !aligned {
        return Err(Error::Shape {
            op: "composite_loss alignment (preds, targets)",
            lhs: vec![t],
            rhs: vec![sup.targets.len(), sup.qc.len()],
        });
    }
    let class_w = cfg.class_weight(sup.igbp, sup.koppen)?;
    let mut step_w = Vec::with_capacity(t);
    for (i, &q) in sup.qc.iter().enumerate() {
        let w = qc_weight(q)?;
        step_w.push(if sup.mask.is_none_or(|m| m[i]) { w } else { 0.0 });
    }
    let tape = preds.tape();
    let gpp = head_column(preds, unit(GPP))?;
    let nee = head_column(preds, unit(NEE))?;
    let tg = tape.vector(sup.targets.iter().map(|x| x[0]).collect())?;
    let tn = tape.vector(sup.targets.iter().map(|x| x[1]).collect())?;
    let eg = gpp.sub(tg)?;
    let en = nee.sub(tn)?;
    let sq = eg.mul(eg)?.add(en.mul(en)?)?;
    let weighted = sq.mul(tape.vector(step_w)?)?.sum();
    Ok(weighted.scale(0.5 * class_w / t as f64))
}

pub fn composite_loss<'t>(preds: Var<'t>, sup: &Supervision<'_>, cfg: &LossConfig) -> Result<LossTerms<'t>> {
    let weighted_mse = weighted_mse_term(preds, sup, cfg)?;
    let flux = flux_penalty(preds, cfg.sign)?;
    let total = weighted_mse.add(flux.scale(cfg.alpha))?;
    Ok(LossTerms {
        weighted_mse,
        flux_penalty: flux,
        total,
    })
}

fn preds_constant<'t>(tape: &'t Tape, preds: &[FluxPrediction]) -> Result<Var<'t>> {
    if preds.is_empty() {
        return Err(Error::Empty("prediction sequence"));
    }
    let data = preds.iter().flat_map(|p| p.as_array()).collect();
    tape.constant(vec![preds.len(), 3], data)
}

/// [`flux_penalty`] on plain predictions.
pub fn flux_penalty_value(preds: &[FluxPrediction], sign: FluxSign) -> Result<f64> {
    let tape = Tape::inference();
    Ok(flux_penalty(preds_constant(&tape, preds)?, sign)?.item())
}

/// [`composite_loss`] on plain predictions: `(weighted_mse, flux_penalty, total)`.
pub fn composite_loss_value(preds: &[FluxPrediction], sup: &Supervision<'_>, cfg: &LossConfig) -> Result<(f64, f64, f64)> {
    let tape = Tape::inference();
    let terms = composite_loss(preds_constant(&tape, preds)?, sup, cfg)?;
    Ok((terms.weighted_mse.item(), terms.flux_penalty.item(), terms.total.item()))
}
