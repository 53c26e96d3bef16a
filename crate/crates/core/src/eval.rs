//! Site metrics, group aggregation and report tables.
//!
//! Group summaries are unweighted: each site counts once however many steps
//! it contributes. R² is computed per site and then averaged.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::infer::{PredictionRow, Target};

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred, truth, 1)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// `1 − SS_res / SS_tot`, or `None` when the truth is constant.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    check_pairs(pred, truth, 2)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

fn check_pairs(pred: &[f64], truth: &[f64], min: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "metric inputs",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if pred.len() < min {
        return Err(Error::Validation(format!("metric needs at least {min} pairs, got {}", pred.len())));
    }
    Ok(())
}

/// `(reference − candidate) / reference`; positive when the candidate is better.
pub fn relative_rmse(reference: f64, candidate: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(Error::Validation(format!("reference RMSE must be positive, got {reference}")));
    }
    Ok((reference - candidate) / reference)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteMetrics {
    pub site_id: String,
    pub model: String,
    pub target: Target,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub n: usize,
    pub igbp: String,
    pub koppen: String,
}

/// Site labels `(igbp, koppen)` by site id.
pub type SiteLabels = BTreeMap<String, (String, String)>;

/// Scored targets. RECO has no observations.
pub const SCORED: [Target; 2] = [Target::Gpp, Target::Nee];

/// Per-site GPP and NEE metrics over observed steps (only `qc == 1` when
/// `strict_qc`). Site-target pairs with no usable step are skipped.
pub fn site_metrics(model: &str, rows: &[PredictionRow], labels: &SiteLabels, strict_qc: bool) -> Result<Vec<SiteMetrics>> {
    let mut pairs: BTreeMap<(&str, Target), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        if !SCORED.contains(&r.target) {
            continue;
        }
        let entry = pairs.entry((r.site_id.as_str(), r.target)).or_default();
        if let Some(t) = r.truth {
            if !strict_qc || r.qc == 1.0 {
                entry.0.push(r.pred);
                entry.1.push(t);
            }
        }
    }
    let mut out = Vec::new();
    for ((site, target), (pred, truth)) in pairs {
        if pred.is_empty() {
            log::warn!("{model}: no scored {} steps at {site}", target.name());
            continue;
        }
        let (igbp, koppen) = labels
            .get(site)
            .ok_or_else(|| Error::Validation(format!("no labels for site `{site}`")))?;
        out.push(SiteMetrics {
            site_id: site.to_string(),
            model: model.to_string(),
            target,
            rmse: rmse(&pred, &truth)?,
            r2: if pred.len() >= 2 { r2(&pred, &truth)? } else { None },
            n: pred.len(),
            igbp: igbp.clone(),
            koppen: koppen.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Igbp,
    Koppen,
    All,
}

impl Grouping {
    pub fn name(self) -> &'static str {
        match self {
            Grouping::Igbp => "igbp",
            Grouping::Koppen => "koppen",
            Grouping::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "igbp" => Ok(Grouping::Igbp),
            "koppen" => Ok(Grouping::Koppen),
            "all" => Ok(Grouping::All),
            other => Err(Error::Config(format!("unknown grouping key `{other}`"))),
        }
    }

    fn key(self, m: &SiteMetrics) -> &str {
        match self {
            Grouping::Igbp => &m.igbp,
            Grouping::Koppen => &m.koppen,
            Grouping::All => "all",
        }
    }
}

/// Mean and sample standard deviation; `sd` is `None` for a single value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: Option<f64>,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("values to summarize"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt());
    Ok(Summary { mean, sd, count: n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub grouping: Grouping,
    pub group: String,
    pub model: String,
    pub target: Target,
    pub rmse: Summary,
    /// Over sites with a defined R².
    pub r2: Option<Summary>,
}

/// Unweighted across-site summaries per (group, model, target).
pub fn aggregate(metrics: &[SiteMetrics], by: Grouping) -> Result<Vec<GroupMetrics>> {
    if metrics.is_empty() {
        return Err(Error::Empty("site metrics"));
    }
    let mut groups: BTreeMap<(&str, &str, Target), Vec<&SiteMetrics>> = BTreeMap::new();
    for m in metrics {
        groups.entry((by.key(m), &m.model, m.target)).or_default().push(m);
    }
    groups
        .into_iter()
        .map(|((group, model, target), ms)| {
            let rmses: Vec<f64> = ms.iter().map(|m| m.rmse).collect();
            let r2s: Vec<f64> = ms.iter().filter_map(|m| m.r2).collect();
            Ok(GroupMetrics {
                grouping: by,
                group: group.to_string(),
                model: model.to_string(),
                target,
                rmse: summarize(&rmses)?,
                r2: if r2s.is_empty() { None } else { Some(summarize(&r2s)?) },
            })
        })
        .collect()
}

/// One cell of a relative-RMSE table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonCell {
    pub grouping: Grouping,
    pub group: String,
    pub model: String,
    pub target: Target,
    pub mean_rmse: f64,
    pub sites: usize,
    pub reference: String,
    pub relative: f64,
}

/// Relative RMSE of every model against `reference` within each group.
pub fn compare(groups: &[GroupMetrics], reference: &str) -> Result<Vec<ComparisonCell>> {
    let refs: BTreeMap<(&str, Target), f64> = groups
        .iter()
        .filter(|g| g.model == reference)
        .map(|g| ((g.group.as_str(), g.target), g.rmse.mean))
        .collect();
    if refs.is_empty() {
        return Err(Error::Validation(format!("no metrics for reference model `{reference}`")));
    }
    groups
        .iter()
        .filter_map(|g| refs.get(&(g.group.as_str(), g.target)).map(|&r| (g, r)))
        .map(|(g, r)| {
            Ok(ComparisonCell {
                grouping: g.grouping,
                group: g.group.clone(),
                model: g.model.clone(),
                target: g.target,
                mean_rmse: g.rmse.mean,
                sites: g.rmse.count,
                reference: reference.to_string(),
                relative: relative_rmse(r, g.rmse.mean)?,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_err(path: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub const SITE_METRICS_HEADER: [&str; 8] = ["site_id", "igbp", "koppen", "model", "target", "n", "rmse", "r2"];

pub fn write_site_metrics<W: Write>(metrics: &[SiteMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SITE_METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.site_id.clone(),
            m.igbp.clone(),
            m.koppen.clone(),
            m.model.clone(),
            m.target.name().to_string(),
            m.n.to_string(),
            m.rmse.to_string(),
            opt(m.r2),
        ])?;
    }
    w.flush().map_err(csv_err("metrics_by_site"))
}

pub fn read_site_metrics<R: Read>(reader: R) -> Result<Vec<SiteMetrics>> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().ne(SITE_METRICS_HEADER) {
        return Err(Error::Validation(format!("site metrics header must be {}", SITE_METRICS_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Validation(format!("row {}: bad {what}", i + 1));
        out.push(SiteMetrics {
            site_id: rec[0].to_string(),
            igbp: rec[1].to_string(),
            koppen: rec[2].to_string(),
            model: rec[3].to_string(),
            target: Target::parse(&rec[4])?,
            n: rec[5].parse().map_err(|_| bad("n"))?,
            rmse: rec[6].parse().map_err(|_| bad("rmse"))?,
            r2: match &rec[7] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("r2"))?),
            },
        });
    }
    Ok(out)
}

pub const GROUP_HEADER: [&str; 10] = [
    "grouping", "group", "model", "target", "sites", "rmse_mean", "rmse_sd", "r2_sites", "r2_mean", "r2_sd",
];

pub fn write_group_metrics<W: Write>(groups: &[GroupMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(GROUP_HEADER)?;
    for g in groups {
        w.write_record([
            g.grouping.name().to_string(),
            g.group.clone(),
            g.model.clone(),
            g.target.name().to_string(),
            g.rmse.count.to_string(),
            g.rmse.mean.to_string(),
            opt(g.rmse.sd),
            g.r2.map_or(0, |s| s.count).to_string(),
            opt(g.r2.map(|s| s.mean)),
            opt(g.r2.and_then(|s| s.sd)),
        ])?;
    }
    w.flush().map_err(csv_err("group metrics"))
}

pub const COMPARISON_HEADER: [&str; 8] =
    ["grouping", "group", "target", "model", "reference", "sites", "rmse_mean", "relative_rmse"];

pub fn write_comparison<W: Write>(cells: &[ComparisonCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COMPARISON_HEADER)?;
    for c in cells {
        w.write_record([
            c.grouping.name().to_string(),
            c.group.clone(),
            c.target.name().to_string(),
            c.model.clone(),
            c.reference.clone(),
            c.sites.to_string(),
            c.mean_rmse.to_string(),
            c.relative.to_string(),
        ])?;
    }
    w.flush().map_err(csv_err("relative_rmse"))
}

pub const SCATTER_HEADER: [&str; 10] = [
    "site_id", "igbp", "koppen", "target", "reference", "reference_rmse", "reference_r2", "model", "rmse", "r2",
];

/// Per-site pairs of each model against the reference, for scatter plots.
pub fn write_scatter<W: Write>(metrics: &[SiteMetrics], reference: &str, writer: W) -> Result<()> {
    let refs: BTreeMap<(&str, Target), &SiteMetrics> = metrics
        .iter()
        .filter(|m| m.model == reference)
        .map(|m| ((m.site_id.as_str(), m.target), m))
        .collect();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SCATTER_HEADER)?;
    for m in metrics.iter().filter(|m| m.model != reference) {
        let Some(r) = refs.get(&(m.site_id.as_str(), m.target)) else { continue };
        w.write_record([
            m.site_id.clone(),
            m.igbp.clone(),
            m.koppen.clone(),
            m.target.name().to_string(),
            reference.to_string(),
            r.rmse.to_string(),
            opt(r.r2),
            m.model.clone(),
            m.rmse.to_string(),
            opt(m.r2),
        ])?;
    }
    w.flush().map_err(csv_err("scatter_sites"))
}

/// Names of the report files written by [`write_report`].
pub const REPORT_FILES: [&str; 5] = [
    "metrics_by_site.csv",
    "metrics_by_igbp.csv",
    "metrics_by_koppen.csv",
    "relative_rmse.csv",
    "scatter_sites.csv",
];

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    let path = dir.join(name);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(std::io::BufWriter::new(f))
}

pub fn save_site_metrics(metrics: &[SiteMetrics], dir: &Path) -> Result<()> {
    write_site_metrics(metrics, create(dir, REPORT_FILES[0])?)
}

/// Writes all report tables into `dir`. Relative RMSE covers the IGBP,
/// Köppen and all-site groupings.
pub fn write_report(metrics: &[SiteMetrics], reference: &str, dir: &Path) -> Result<()> {
    save_site_metrics(metrics, dir)?;
    let igbp = aggregate(metrics, Grouping::Igbp)?;
    let koppen = aggregate(metrics, Grouping::Koppen)?;
    let all = aggregate(metrics, Grouping::All)?;
    write_group_metrics(&igbp, create(dir, REPORT_FILES[1])?)?;
    write_group_metrics(&koppen, create(dir, REPORT_FILES[2])?)?;
    let mut cells = compare(&igbp, reference)?;
    cells.extend(compare(&koppen, reference)?);
    cells.extend(compare(&all, reference)?);
    write_comparison(&cells, create(dir, REPORT_FILES[3])?)?;
    write_scatter(metrics, reference, create(dir, REPORT_FILES[4])?)
}
