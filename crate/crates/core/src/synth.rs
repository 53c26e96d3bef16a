//! Synthetic flux towers with known latent ecophysiology.
//!
//! Each site draws its own light-use efficiency, respiration base rate, Q10
//! and temperature optimum. These never appear among the drivers, so only the
//! observed fluxes of a site reveal them. Daily fluxes follow
//!
//! ```text
//! GPP  = lue · PAR · exp(-((T - t_opt) / 12)²)
//! RECO = rb · q10^((T - 15) / 10)
//! NEE  = RECO - GPP + ε,   ε ~ N(0, noise_sd²)
//! ```
//!
//! Drivers are `[PAR, T, ar1_noise, white_noise]`. Labels are coarse bins of
//! `lue` (IGBP analog) and `t_opt` (Köppen analog).
//!
//! Site parameter distributions (uniform):
//! `lue ∈ [0.3, 1.0]`, `rb ∈ [0.5, 3.0]`, `q10 ∈ [1.4, 2.6]`,
//! `t_opt ∈ [12, 28]`, `noise_sd ∈ [0.1, 0.4]`. All sites share one
//! climate (mean temperature 14 °C, seasonal amplitude 11 °C, mean PAR 11)
//! and differ only in daily weather noise, so the drivers do not identify a
//! site.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::SiteRecord;
use crate::error::{Error, Result};

pub const SYNTH_DRIVER_DIM: usize = 4;

const LUE_RANGE: (f64, f64) = (0.3, 1.0);
const T_OPT_RANGE: (f64, f64) = (12.0, 28.0);
const T_MEAN: f64 = 14.0;
const T_AMP: f64 = 11.0;
const PAR_MEAN: f64 = 11.0;
const IGBP_BINS: [&str; 3] = ["GRA", "DBF", "ENF"];
const KOPPEN_BINS: [&str; 3] = ["Dfb", "Cfa", "BSh"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSiteParams {
    pub lue: f64,
    pub rb: f64,
    pub q10: f64,
    pub t_opt: f64,
    pub noise_sd: f64,
}

impl SynthSiteParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lue > 0.0 && self.rb > 0.0 && self.q10 > 1.0 && self.noise_sd >= 0.0 && self.t_opt.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid synthetic site parameters {self:?}")))
        }
    }

    pub fn gpp(&self, par: f64, temp: f64) -> f64 {
        gpp_model(self.lue, par, temp, self.t_opt)
    }

    pub fn reco(&self, temp: f64) -> f64 {
        reco_model(self.rb, self.q10, temp)
    }
}

pub fn gpp_model(lue: f64, par: f64, temp: f64, t_opt: f64) -> f64 {
    let z = (temp - t_opt) / 12.0;
    lue * par * (-(z * z)).exp()
}

pub fn reco_model(rb: f64, q10: f64, temp: f64) -> f64 {
    rb * q10.powf((temp - 15.0) / 10.0)
}

/// Generator knobs. Defaults give the desk-scale benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub start: NaiveDate,
    /// Replaces every site's drawn `noise_sd` when set.
    pub noise_sd_override: Option<f64>,
    /// Probability that a day's qc is below 1.
    pub low_qc_prob: f64,
    /// Probability that a day's gpp or nee observation is missing.
    pub missing_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            start: NaiveDate::from_ymd_opt(2001, 1, 1).expect("valid date"),
            noise_sd_override: None,
            low_qc_prob: 0.15,
            missing_prob: 0.01,
        }
    }
}

/// One generated site: observations plus noise-free truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSite {
    pub site_id: String,
    pub params: SynthSiteParams,
    pub igbp: String,
    pub koppen: String,
    /// Raw (unnormalized) daily records as written to CSV.
    pub records: Vec<SiteRecord>,
    pub true_gpp: Vec<f64>,
    pub true_reco: Vec<f64>,
    /// `true_reco - true_gpp + ε`, before any observation gaps.
    pub true_nee: Vec<f64>,
}

fn bin(value: f64, range: (f64, f64), labels: &[&'static str; 3]) -> &'static str {
    let frac = ((value - range.0) / (range.1 - range.0)).clamp(0.0, 0.999_999);
    labels[(frac * 3.0) as usize]
}

pub fn synth_generate(n_sites: usize, days: usize, rng: &mut impl Rng) -> Result<Vec<SynthSite>> {
    synth_generate_with(n_sites, days, &SynthConfig::default(), rng)
}

pub fn synth_generate_with(n_sites: usize, days: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Vec<SynthSite>> {
    if n_sites == 0 {
        return Err(Error::Validation("n_sites must be at least 1".into()));
    }
    if days < crate::data::DEFAULT_WINDOW {
        return Err(Error::Validation(format!("days must be at least {}", crate::data::DEFAULT_WINDOW)));
    }
    if let Some(sd) = cfg.noise_sd_override {
        if !(sd >= 0.0 && sd.is_finite()) {
            return Err(Error::Validation(format!("noise_sd {sd} must be a finite value >= 0")));
        }
    }
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut sites = Vec::with_capacity(n_sites);
    for s in 0..n_sites {
        let params = SynthSiteParams {
            lue: rng.gen_range(LUE_RANGE.0..LUE_RANGE.1),
            rb: rng.gen_range(0.5..3.0),
            q10: rng.gen_range(1.4..2.6),
            t_opt: rng.gen_range(T_OPT_RANGE.0..T_OPT_RANGE.1),
            noise_sd: rng.gen_range(0.1..0.4),
        };
        let params = SynthSiteParams {
            noise_sd: cfg.noise_sd_override.unwrap_or(params.noise_sd),
            ..params
        };
        params.validate()?;
        let site_id = format!("SYN-{:03}", s + 1);
        let igbp = bin(params.lue, LUE_RANGE, &IGBP_BINS).to_string();
        let koppen = bin(params.t_opt, T_OPT_RANGE, &KOPPEN_BINS).to_string();

        let mut ar = 0.0;
        let mut site = SynthSite {
            site_id: site_id.clone(),
            params,
            igbp: igbp.clone(),
            koppen: koppen.clone(),
            records: Vec::with_capacity(days),
            true_gpp: Vec::with_capacity(days),
            true_reco: Vec::with_capacity(days),
            true_nee: Vec::with_capacity(days),
        };
        for d in 0..days {
            let phase = 2.0 * std::f64::consts::PI * d as f64 / 365.0;
            let par = (PAR_MEAN * (1.0 + 0.6 * (phase - 1.4).sin()) + 1.5 * std_normal.sample(rng)).max(0.0);
            let temp = T_MEAN + T_AMP * (phase - 1.8).sin() + 1.5 * std_normal.sample(rng);
            ar = 0.8 * ar + 0.6 * std_normal.sample(rng);
            let white: f64 = std_normal.sample(rng);

            let gpp = params.gpp(par, temp);
            let reco = params.reco(temp);
            let eps = params.noise_sd * std_normal.sample(rng);
            let nee = reco - gpp + eps;

            let qc = if rng.gen_bool(cfg.low_qc_prob) {
                rng.gen_range(0.2..0.95)
            } else {
                1.0
            };
            let gpp_obs = (!rng.gen_bool(cfg.missing_prob)).then_some(gpp);
            let nee_obs = (!rng.gen_bool(cfg.missing_prob)).then_some(nee);

            site.records.push(SiteRecord {
                site_id: site_id.clone(),
                date: cfg.start + chrono::Days::new(d as u64),
                drivers: vec![par, temp, ar, white],
                gpp: gpp_obs,
                nee: nee_obs,
                qc,
                igbp: igbp.clone(),
                koppen: koppen.clone(),
            });
            site.true_gpp.push(gpp);
            site.true_reco.push(reco);
            site.true_nee.push(nee);
        }
        sites.push(site);
    }
    Ok(sites)
}

/// Writes the per-site parameter sidecar:
/// `site_id,lue,rb,q10,t_opt,noise_sd,igbp,koppen`.
pub fn write_params_csv<W: Write>(sites: &[SynthSite], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site_id", "lue", "rb", "q10", "t_opt", "noise_sd", "igbp", "koppen"])?;
    for s in sites {
        let p = &s.params;
        w.write_record([
            s.site_id.clone(),
            p.lue.to_string(),
            p.rb.to_string(),
            p.q10.to_string(),
            p.t_opt.to_string(),
            p.noise_sd.to_string(),
            s.igbp.clone(),
            s.koppen.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_params_csv(sites: &[SynthSite], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_params_csv(sites, std::io::BufWriter::new(file))
}
