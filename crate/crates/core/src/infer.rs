//! Zero-shot inference on held-out sites and the predictions file.
//!
//! For each held-out site `k` pairwise non-overlapping windows spread over
//! the record form the support set. Predictions are emitted only for windows that share no
//! date with the support, so no evaluated step was visible to the encoder.
//! Where evaluation windows overlap, each date takes the prediction from the
//! window in which it sits furthest from the start.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::data::{SiteTask, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::model::{FluxModel, FluxPrediction, ModelKind, N_HEADS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Gpp,
    Reco,
    Nee,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Gpp, Target::Reco, Target::Nee];

    pub fn name(self) -> &'static str {
        match self {
            Target::Gpp => "gpp",
            Target::Reco => "reco",
            Target::Nee => "nee",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown target `{s}`")))
    }
}

/// One predicted value with its observation, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub site_id: String,
    pub date: NaiveDate,
    pub target: Target,
    pub pred: f64,
    pub truth: Option<f64>,
    pub qc: f64,
}

/// Indices of `k` pairwise non-overlapping windows spread evenly over the
/// record (first, last and evenly between). Falls back to the earliest
/// non-overlapping windows when the even spread overlaps.
pub fn support_indices(windows: &[TimeSeriesWindow], k: usize) -> Result<Vec<usize>> {
    let n = windows.len();
    let disjoint = |idx: &[usize]| {
        idx.iter()
            .enumerate()
            .all(|(a, &i)| idx[..a].iter().all(|&j| j != i && !windows[j].overlaps(&windows[i])))
    };
    if k >= 1 && n >= k {
        let spread: Vec<usize> = match k {
            1 => vec![0],
            _ => (0..k).map(|j| (j * (n - 1) + (k - 1) / 2) / (k - 1)).collect(),
        };
        if disjoint(&spread) {
            return Ok(spread);
        }
    }
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for i in 0..n {
        if picked.len() == k {
            break;
        }
        if picked.iter().all(|&j| !windows[j].overlaps(&windows[i])) {
            picked.push(i);
        }
    }
    if picked.len() < k || k == 0 {
        return Err(Error::TooFewWindows {
            site: windows.first().map_or_else(String::new, |w| w.site_id.clone()),
            available: picked.len(),
            needed: k.max(1),
        });
    }
    Ok(picked)
}

/// Indices of windows sharing no date with any window in `support`.
pub fn evaluation_indices(windows: &[TimeSeriesWindow], support: &[usize]) -> Vec<usize> {
    (0..windows.len())
        .filter(|&i| support.iter().all(|&s| !windows[s].overlaps(&windows[i])))
        .collect()
}

/// Member predictions averaged elementwise, then clipped.
pub fn ensemble_predict(
    members: &[FluxModel],
    support: &[&TimeSeriesWindow],
    window: &TimeSeriesWindow,
) -> Result<Vec<FluxPrediction>> {
    let first = members.first().ok_or(Error::Empty("ensemble"))?;
    if let Some(m) = members.iter().find(|m| m.kind != first.kind) {
        return Err(Error::Config(format!("ensemble mixes {} and {} models", first.kind, m.kind)));
    }
    let mut sum = vec![[0.0; N_HEADS]; window.len()];
    for m in members {
        for (acc, p) in sum.iter_mut().zip(m.predict_raw(window, support)?) {
            acc.iter_mut().zip(p.as_array()).for_each(|(a, v)| *a += v);
        }
    }
    let n = members.len() as f64;
    Ok(sum
        .into_iter()
        .map(|a| FluxPrediction::raw(a[0] / n, a[1] / n, a[2] / n).clipped())
        .collect())
}

/// Predictions for one held-out site, ordered by date then target.
pub fn predict_site(members: &[FluxModel], task: &SiteTask, support_size: usize) -> Result<Vec<PredictionRow>> {
    let support_idx = support_indices(&task.windows, support_size)?;
    let eval_idx = evaluation_indices(&task.windows, &support_idx);
    if eval_idx.is_empty() {
        return Err(Error::TooFewWindows {
            site: task.site_id.clone(),
            available: task.windows.len(),
            needed: support_idx.last().map_or(0, |&i| i + 2),
        });
    }
    let support: Vec<&TimeSeriesWindow> = support_idx.iter().map(|&i| &task.windows[i]).collect();
    let uses_support = members.first().is_some_and(|m| m.kind == ModelKind::TamRl);
    let support = if uses_support { support } else { Vec::new() };

    let mut by_date: BTreeMap<NaiveDate, (usize, FluxPrediction, &TimeSeriesWindow)> = BTreeMap::new();
    for &i in &eval_idx {
        let w = &task.windows[i];
        let preds = ensemble_predict(members, &support, w)?;
        for (pos, p) in preds.into_iter().enumerate() {
            let date = w.date(pos);
            if by_date.get(&date).is_none_or(|(best, _, _)| pos > *best) {
                by_date.insert(date, (pos, p, w));
            }
        }
    }
    let mut rows = Vec::with_capacity(by_date.len() * 3);
    for (date, (pos, p, w)) in by_date {
        let observed = w.mask[pos];
        for (target, pred, truth) in [
            (Target::Gpp, p.gpp, observed.then_some(w.targets[pos][0])),
            (Target::Reco, p.reco, None),
            (Target::Nee, p.nee, observed.then_some(w.targets[pos][1])),
        ] {
            rows.push(PredictionRow {
                site_id: task.site_id.clone(),
                date,
                target,
                pred,
                truth,
                qc: w.qc[pos],
            });
        }
    }
    Ok(rows)
}

/// [`predict_site`] over several sites, concatenated in the given order.
pub fn predict_sites(members: &[FluxModel], tasks: &[SiteTask], support_size: usize) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::new();
    for t in tasks {
        rows.extend(predict_site(members, t, support_size)?);
    }
    Ok(rows)
}

pub const PREDICTION_HEADER: [&str; 6] = ["site_id", "date", "target", "pred", "truth", "qc"];

pub fn write_predictions<W: Write>(rows: &[PredictionRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PREDICTION_HEADER)?;
    for r in rows {
        w.write_record([
            r.site_id.clone(),
            r.date.format("%Y-%m-%d").to_string(),
            r.target.name().to_string(),
            r.pred.to_string(),
            r.truth.map_or_else(String::new, |t| t.to_string()),
            r.qc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("predictions", e))
}

pub fn save_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_predictions(rows, std::io::BufWriter::new(file))
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != PREDICTION_HEADER {
        return Err(Error::Validation(format!(
            "predictions header must be {}; got {}",
            PREDICTION_HEADER.join(","),
            header.join(",")
        )));
    }
    let num = |s: &str, what: &str, row: usize| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Validation(format!("row {row}: bad {what} `{s}`")))
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|_| Error::Validation(format!("row {row}: bad date `{}`", &rec[1])))?;
        let truth = match rec[4].trim() {
            "" => None,
            s => Some(num(s, "truth", row)?),
        };
        let qc = num(&rec[5], "qc", row)?;
        if !(0.0..=1.0).contains(&qc) {
            return Err(Error::Validation(format!("row {row}: qc {qc} outside [0, 1]")));
        }
        rows.push(PredictionRow {
            site_id: rec[0].to_string(),
            date,
            target: Target::parse(&rec[2]).map_err(|e| Error::Validation(format!("row {row}: {e}")))?,
            pred: num(&rec[3], "pred", row)?,
            truth,
            qc,
        });
    }
    Ok(rows)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(std::io::BufReader::new(file))
}
