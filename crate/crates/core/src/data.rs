//! Site CSV ingestion, driver normalization, windowing and site splits.
//!
//! CSV schema (exact header, `D` inferred from the number of driver columns):
//!
//! ```text
//! site_id,date,driver_1,...,driver_D,gpp,nee,qc,igbp,koppen
//! ```
//!
//! Dates are `YYYY-MM-DD`; missing `gpp`/`nee` are empty fields.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 45;
pub const DEFAULT_STRIDE: usize = 15;

/// One day of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteRecord {
    pub site_id: String,
    pub date: NaiveDate,
    pub drivers: Vec<f64>,
    pub gpp: Option<f64>,
    pub nee: Option<f64>,
    pub qc: f64,
    pub igbp: String,
    pub koppen: String,
}

/// A contiguous fixed-length slice of one site's series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesWindow {
    pub site_id: String,
    pub start: NaiveDate,
    /// `len × D`, normalized.
    pub drivers: Vec<Vec<f64>>,
    /// `(gpp, nee)` per step; zero where `mask` is false.
    pub targets: Vec<[f64; 2]>,
    pub qc: Vec<f64>,
    /// False where either target is missing.
    pub mask: Vec<bool>,
    pub igbp: String,
    pub koppen: String,
}

impl TimeSeriesWindow {
    pub fn len(&self) -> usize {
        self.drivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drivers.is_empty()
    }

    pub fn driver_dim(&self) -> usize {
        self.drivers.first().map_or(0, Vec::len)
    }

    pub fn date(&self, step: usize) -> NaiveDate {
        self.start + chrono::Days::new(step as u64)
    }

    pub fn end(&self) -> NaiveDate {
        self.date(self.len().saturating_sub(1))
    }

    pub fn overlaps(&self, other: &TimeSeriesWindow) -> bool {
        self.start <= other.end() && other.start <= self.end()
    }
}

/// All windows of one site plus its static labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteTask {
    pub site_id: String,
    pub igbp: String,
    pub koppen: String,
    pub windows: Vec<TimeSeriesWindow>,
}

/// Per-driver z-score statistics, fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Sites the statistics were fitted on.
    pub fitted_on: Vec<String>,
}

fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn parse_header(headers: &csv::StringRecord) -> Result<usize> {
    let cols: Vec<&str> = headers.iter().collect();
    let n = cols.len();
    let expected_tail = ["gpp", "nee", "qc", "igbp", "koppen"];
    if n < 8 || cols[0] != "site_id" || cols[1] != "date" || cols[n - 5..] != expected_tail {
        return Err(validation(format!(
            "header must be site_id,date,driver_1..driver_D,gpp,nee,qc,igbp,koppen; got {}",
            cols.join(",")
        )));
    }
    let d = n - 7;
    for (i, c) in cols[2..2 + d].iter().enumerate() {
        if *c != format!("driver_{}", i + 1) {
            return Err(validation(format!("expected column driver_{} but found `{c}`", i + 1)));
        }
    }
    Ok(d)
}

fn parse_opt(field: &str, name: &str, row: usize) -> Result<Option<f64>> {
    if field.trim().is_empty() {
        return Ok(None);
    }
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| validation(format!("row {row}: cannot parse {name} `{field}`")))?;
    if !v.is_finite() {
        return Err(validation(format!("row {row}: non-finite {name}")));
    }
    Ok(Some(v))
}

/// Reads site records; `row` numbers in errors count data rows from 1.
pub fn read_site_csv<R: Read>(reader: R) -> Result<Vec<SiteRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let d = parse_header(rdr.headers()?)?;
    let mut records = Vec::new();
    let mut last: HashMap<String, (NaiveDate, String, String)> = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let site_id = row[0].to_string();
        let date = NaiveDate::parse_from_str(&row[1], "%Y-%m-%d")
            .map_err(|_| validation(format!("row {row_no}: unparseable date `{}`", &row[1])))?;
        let mut drivers = Vec::with_capacity(d);
        for j in 0..d {
            let v = parse_opt(&row[2 + j], &format!("driver_{}", j + 1), row_no)?
                .ok_or_else(|| validation(format!("row {row_no}: missing driver_{}", j + 1)))?;
            drivers.push(v);
        }
        let gpp = parse_opt(&row[2 + d], "gpp", row_no)?;
        let nee = parse_opt(&row[3 + d], "nee", row_no)?;
        let qc = parse_opt(&row[4 + d], "qc", row_no)?
            .ok_or_else(|| validation(format!("row {row_no}: missing qc")))?;
        if !(0.0..=1.0).contains(&qc) {
            return Err(validation(format!("row {row_no}: qc {qc} outside [0, 1]")));
        }
        let igbp = row[5 + d].to_string();
        let koppen = row[6 + d].to_string();
        if let Some((prev, pi, pk)) = last.get(&site_id) {
            if date <= *prev {
                return Err(validation(format!(
                    "row {row_no}: date {date} for site {site_id} does not follow {prev}"
                )));
            }
            if *pi != igbp || *pk != koppen {
                return Err(validation(format!("row {row_no}: labels change within site {site_id}")));
            }
        }
        last.insert(site_id.clone(), (date, igbp.clone(), koppen.clone()));
        records.push(SiteRecord {
            site_id,
            date,
            drivers,
            gpp,
            nee,
            qc,
            igbp,
            koppen,
        });
    }
    Ok(records)
}

pub fn load_site_csv(path: &Path) -> Result<Vec<SiteRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_site_csv(std::io::BufReader::new(file))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_site_csv<W: Write>(records: &[SiteRecord], driver_dim: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["site_id".to_string(), "date".to_string()];
    header.extend((1..=driver_dim).map(|i| format!("driver_{i}")));
    header.extend(["gpp", "nee", "qc", "igbp", "koppen"].map(String::from));
    w.write_record(&header)?;
    for r in records {
        if r.drivers.len() != driver_dim {
            return Err(validation(format!(
                "record for {} on {} has {} drivers, expected {driver_dim}",
                r.site_id,
                r.date,
                r.drivers.len()
            )));
        }
        let mut row = vec![r.site_id.clone(), r.date.format("%Y-%m-%d").to_string()];
        row.extend(r.drivers.iter().map(f64::to_string));
        row.push(fmt_opt(r.gpp));
        row.push(fmt_opt(r.nee));
        row.push(r.qc.to_string());
        row.push(r.igbp.clone());
        row.push(r.koppen.clone());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_site_csv(records: &[SiteRecord], driver_dim: usize, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_site_csv(records, driver_dim, std::io::BufWriter::new(file))
}

/// Fits per-driver mean and population standard deviation.
pub fn fit_normalize(train: &[SiteRecord]) -> Result<NormStats> {
    let first = train.first().ok_or(Error::Empty("normalization fit set"))?;
    let d = first.drivers.len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for r in train {
        if r.drivers.len() != d {
            return Err(validation("inconsistent driver width in fit set"));
        }
        mean.iter_mut().zip(&r.drivers).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in train {
        for ((v, x), m) in var.iter_mut().zip(&r.drivers).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                log::warn!("driver_{} has zero variance; using std = 1", j + 1);
                1.0
            }
        })
        .collect();
    let mut fitted_on: Vec<String> = train.iter().map(|r| r.site_id.clone()).collect();
    fitted_on.sort();
    fitted_on.dedup();
    Ok(NormStats { mean, std, fitted_on })
}

pub fn apply_normalize(stats: &NormStats, records: &[SiteRecord]) -> Result<Vec<SiteRecord>> {
    records
        .iter()
        .map(|r| {
            if r.drivers.len() != stats.mean.len() {
                return Err(validation(format!(
                    "record for {} has {} drivers, stats have {}",
                    r.site_id,
                    r.drivers.len(),
                    stats.mean.len()
                )));
            }
            let mut out = r.clone();
            for ((x, m), s) in out.drivers.iter_mut().zip(&stats.mean).zip(&stats.std) {
                *x = (*x - m) / s;
            }
            Ok(out)
        })
        .collect()
}

/// Groups records by site in first-appearance order.
pub fn group_by_site(records: &[SiteRecord]) -> Vec<(String, Vec<&SiteRecord>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, Vec<&SiteRecord>> = HashMap::new();
    for r in records {
        groups
            .entry(r.site_id.as_str())
            .or_insert_with(|| {
                order.push(r.site_id.clone());
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let g = groups.remove(id.as_str()).expect("grouped");
            (id, g)
        })
        .collect()
}

/// Splits one site's date-sorted records wherever consecutive dates are not one day apart.
pub fn contiguous_segments<'a>(records: &[&'a SiteRecord]) -> Vec<Vec<&'a SiteRecord>> {
    let mut segments: Vec<Vec<&SiteRecord>> = Vec::new();
    for &r in records {
        match segments.last_mut() {
            Some(seg) if seg.last().map(|p| (r.date - p.date).num_days()) == Some(1) => seg.push(r),
            _ => segments.push(vec![r]),
        }
    }
    segments
}

/// Number of windows over a contiguous series of length `len`.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / stride + 1
    }
}

fn make_window(segment: &[&SiteRecord]) -> TimeSeriesWindow {
    let first = segment[0];
    let mut targets = Vec::with_capacity(segment.len());
    let mut mask = Vec::with_capacity(segment.len());
    for r in segment {
        match (r.gpp, r.nee) {
            (Some(g), Some(n)) => {
                targets.push([g, n]);
                mask.push(true);
            }
            _ => {
                targets.push([0.0, 0.0]);
                mask.push(false);
            }
        }
    }
    TimeSeriesWindow {
        site_id: first.site_id.clone(),
        start: first.date,
        drivers: segment.iter().map(|r| r.drivers.clone()).collect(),
        targets,
        qc: segment.iter().map(|r| r.qc).collect(),
        mask,
        igbp: first.igbp.clone(),
        koppen: first.koppen.clone(),
    }
}

/// Cuts every contiguous segment of every site into windows at offsets 0, stride, 2·stride, …
pub fn window_sequences(records: &[SiteRecord], window: usize, stride: usize) -> Result<Vec<TimeSeriesWindow>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (_, site) in group_by_site(records) {
        for seg in contiguous_segments(&site) {
            for k in 0..window_count(seg.len(), window, stride) {
                out.push(make_window(&seg[k * stride..k * stride + window]));
            }
        }
    }
    if out.is_empty() && !records.is_empty() {
        log::warn!("no contiguous segment reaches the window length {window}");
    }
    Ok(out)
}

/// Windows grouped into per-site tasks. Sites without windows are dropped.
pub fn build_tasks(records: &[SiteRecord], window: usize, stride: usize) -> Result<Vec<SiteTask>> {
    let windows = window_sequences(records, window, stride)?;
    let mut tasks: Vec<SiteTask> = Vec::new();
    for w in windows {
        match tasks.last_mut() {
            Some(t) if t.site_id == w.site_id => t.windows.push(w),
            _ => tasks.push(SiteTask {
                site_id: w.site_id.clone(),
                igbp: w.igbp.clone(),
                koppen: w.koppen.clone(),
                windows: vec![w],
            }),
        }
    }
    let with_windows: Vec<&str> = tasks.iter().map(|t| t.site_id.as_str()).collect();
    for (id, _) in group_by_site(records) {
        if !with_windows.contains(&id.as_str()) {
            log::warn!("site {id} has no complete window and is skipped");
        }
    }
    Ok(tasks)
}

/// Static description of a site used for splitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteInfo {
    pub site_id: String,
    pub igbp: String,
    pub koppen: String,
}

pub fn site_infos(records: &[SiteRecord]) -> Vec<SiteInfo> {
    group_by_site(records)
        .into_iter()
        .map(|(site_id, rs)| SiteInfo {
            site_id,
            igbp: rs[0].igbp.clone(),
            koppen: rs[0].koppen.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSplit {
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

/// Site-level partition holding out `round(n · fraction)` sites (at least one
/// on each side).
///
/// With `stratify`, sites are ordered by `(igbp, koppen)` with random ties and
/// every `n / n_held`-th site from a random offset is held out, which spreads
/// the held-out set proportionally over the label strata. If that sample
/// would leave a label with two or more sites absent from training, sites are
/// instead drawn one at a time, skipping any whose removal would do so.
pub fn split_sites(sites: &[SiteInfo], holdout_fraction: f64, stratify: bool, rng: &mut impl Rng) -> Result<SiteSplit> {
    if sites.len() < 2 {
        return Err(validation("splitting needs at least two sites"));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(validation(format!("holdout fraction {holdout_fraction} outside (0, 1)")));
    }
    let n = sites.len();
    let n_held = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut train_count: BTreeMap<(u8, &str), usize> = BTreeMap::new();
    for s in sites {
        *train_count.entry((0, &s.igbp)).or_default() += 1;
        *train_count.entry((1, &s.koppen)).or_default() += 1;
    }
    let total = train_count.clone();
    let keeps_labels = |held: &[usize]| {
        let mut left = total.clone();
        for &i in held {
            *left.get_mut(&(0, sites[i].igbp.as_str())).expect("counted") -= 1;
            *left.get_mut(&(1, sites[i].koppen.as_str())).expect("counted") -= 1;
        }
        left.iter().all(|(k, &c)| total[k] == 1 || c > 0)
    };
    if stratify {
        let mut strata = order.clone();
        strata.sort_by(|&a, &b| (&sites[a].igbp, &sites[a].koppen).cmp(&(&sites[b].igbp, &sites[b].koppen)));
        let step = n as f64 / n_held as f64;
        let offset = rng.gen_range(0.0..step);
        let mut held: Vec<usize> = (0..n_held)
            .map(|j| strata[((offset + j as f64 * step) as usize).min(n - 1)])
            .collect();
        if keeps_labels(&held) {
            held.sort_unstable();
            return Ok(partition(sites, &held));
        }
    }
    let mut held = Vec::new();
    let mut deferred = Vec::new();
    for &i in &order {
        if held.len() == n_held {
            break;
        }
        let s = &sites[i];
        let keys = [(0u8, s.igbp.as_str()), (1u8, s.koppen.as_str())];
        let allowed = !stratify || keys.iter().all(|k| total[k] == 1 || train_count[k] > 1);
        if allowed {
            for k in keys {
                *train_count.get_mut(&k).expect("counted") -= 1;
            }
            held.push(i);
        } else {
            deferred.push(i);
        }
    }
    if held.len() < n_held {
        log::warn!("stratified split could not keep every label in training");
        held.extend(deferred.into_iter().take(n_held - held.len()));
    }
    held.sort_unstable();
    Ok(partition(sites, &held))
}

fn partition(sites: &[SiteInfo], held: &[usize]) -> SiteSplit {
    let held_out = held.iter().map(|&i| sites[i].site_id.clone()).collect();
    let train = sites
        .iter()
        .enumerate()
        .filter(|(i, _)| !held.contains(i))
        .map(|(_, s)| s.site_id.clone())
        .collect();
    SiteSplit { train, held_out }
}
