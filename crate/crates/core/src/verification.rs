//! Brier score, its reliability/resolution/uncertainty decomposition, skill
//! scores, sharpness and reliability tables, block-bootstrap intervals and
//! score cards.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_RESAMPLES: usize = 500;

fn check_inputs(forecasts: &[f64], outcomes: &[f64]) -> Result<()> {
    if forecasts.len() != outcomes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} forecasts but {} outcomes",
            forecasts.len(),
            outcomes.len()
        )));
    }
    if forecasts.is_empty() {
        return Err(Error::InvalidArgument("no forecasts to verify".into()));
    }
    if let Some(f) = forecasts.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("probability {f} outside [0, 1]")));
    }
    if let Some(o) = outcomes.iter().find(|o| **o != 0.0 && **o != 1.0) {
        return Err(Error::InvalidArgument(format!("outcome {o} is not 0 or 1")));
    }
    Ok(())
}

pub fn brier_score(forecasts: &[f64], outcomes: &[f64]) -> Result<f64> {
    check_inputs(forecasts, outcomes)?;
    Ok(forecasts
        .iter()
        .zip(outcomes)
        .map(|(f, o)| (f - o).powi(2))
        .sum::<f64>()
        / forecasts.len() as f64)
}

/// Equal-width probability bins. Bins are closed on the left; the last one is
/// closed on both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityBins {
    pub edges: Vec<f64>,
}

impl ProbabilityBins {
    pub fn equal(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("bin count must be at least 1".into()));
        }
        Ok(ProbabilityBins {
            edges: (0..=count).map(|i| i as f64 / count as f64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, f: f64) -> usize {
        let k = self.len();
        let i = self.edges[1..].partition_point(|&e| e <= f);
        i.min(k - 1)
    }
}

impl Default for ProbabilityBins {
    fn default() -> Self {
        ProbabilityBins::equal(DEFAULT_BINS).expect("nonzero bin count")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedReliability {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// `None` for empty bins.
    pub mean_forecast: Vec<Option<f64>>,
    pub observed_frequency: Vec<Option<f64>>,
}

impl BinnedReliability {
    pub fn new(forecasts: &[f64], outcomes: &[f64], bins: &ProbabilityBins) -> Result<Self> {
        check_inputs(forecasts, outcomes)?;
        let k = bins.len();
        let mut counts = vec![0usize; k];
        let mut fs = vec![0.0; k];
        let mut os = vec![0.0; k];
        for (f, o) in forecasts.iter().zip(outcomes) {
            let b = bins.index(*f);
            counts[b] += 1;
            fs[b] += f;
            os[b] += o;
        }
        let avg = |s: &[f64]| -> Vec<Option<f64>> {
            s.iter()
                .zip(&counts)
                .map(|(v, &n)| (n > 0).then(|| v / n as f64))
                .collect()
        };
        Ok(BinnedReliability {
            edges: bins.edges.clone(),
            counts: counts.clone(),
            mean_forecast: avg(&fs),
            observed_frequency: avg(&os),
        })
    }

    /// A bin is skillful when its point lies closer to the diagonal than the
    /// line halfway between the diagonal and the climatology `base_rate`.
    pub fn skillful(&self, base_rate: f64) -> Vec<Option<bool>> {
        self.mean_forecast
            .iter()
            .zip(&self.observed_frequency)
            .map(|(f, o)| match (f, o) {
                (Some(f), Some(o)) => Some((o - base_rate).abs() > (f - o).abs()),
                _ => None,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lower,bin_upper,count,mean_forecast,observed_frequency\n");
        for b in 0..self.counts.len() {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.counts[b],
                opt(self.mean_forecast[b]),
                opt(self.observed_frequency[b])
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrierReport {
    pub n: usize,
    pub bs: f64,
    pub rel: f64,
    pub res: f64,
    pub unc: f64,
    pub base_rate: f64,
    /// Brier score after replacing each forecast by its bin mean; equals
    /// rel - res + unc.
    pub binned_bs: f64,
    /// bs - binned_bs, the within-bin contribution left out of the 3-term form.
    pub within_bin_residual: f64,
    /// All outcomes were identical.
    pub low_information: bool,
    pub reliability: BinnedReliability,
}

pub fn brier_decomposition(forecasts: &[f64], outcomes: &[f64], bins: &ProbabilityBins) -> Result<BrierReport> {
    let table = BinnedReliability::new(forecasts, outcomes, bins)?;
    let n = forecasts.len();
    let nf = n as f64;
    let base_rate = outcomes.iter().sum::<f64>() / nf;
    let mut rel = 0.0;
    let mut res = 0.0;
    for b in 0..table.counts.len() {
        if let (Some(f), Some(o)) = (table.mean_forecast[b], table.observed_frequency[b]) {
            let w = table.counts[b] as f64;
            rel += w * (f - o).powi(2);
            res += w * (o - base_rate).powi(2);
        }
    }
    rel /= nf;
    res /= nf;
    let unc = base_rate * (1.0 - base_rate);
    let bs = brier_score(forecasts, outcomes)?;
    let binned_bs = forecasts
        .iter()
        .zip(outcomes)
        .map(|(f, o)| {
            let m = table.mean_forecast[bins.index(*f)].unwrap_or(*f);
            (m - o).powi(2)
        })
        .sum::<f64>()
        / nf;
    let low_information = base_rate == 0.0 || base_rate == 1.0;
    Ok(BrierReport {
        n,
        bs,
        rel,
        res: if low_information { 0.0 } else { res },
        unc,
        base_rate,
        binned_bs,
        within_bin_residual: bs - binned_bs,
        low_information,
        reliability: table,
    })
}

/// (bs_ref - bs) / bs_ref.
pub fn brier_skill(bs: f64, bs_ref: f64) -> Result<f64> {
    if bs_ref > 0.0 {
        Ok((bs_ref - bs) / bs_ref)
    } else if bs == bs_ref {
        Ok(0.0)
    } else {
        Err(Error::Undefined(format!(
            "Brier skill with zero reference score and score {bs}"
        )))
    }
}

/// (res_ref - res) / (res_ref - unc): skill of the score unc - res.
pub fn resolution_skill(res: f64, res_ref: f64, unc: f64) -> Result<f64> {
    if res_ref == unc {
        if res == res_ref {
            return Ok(0.0);
        }
        return Err(Error::Undefined(
            "resolution skill with reference resolution equal to uncertainty".into(),
        ));
    }
    Ok((res_ref - res) / (res_ref - unc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SharpnessHistogram {
    pub fn relative(&self) -> Vec<f64> {
        let n: usize = self.counts.iter().sum();
        self.counts
            .iter()
            .map(|&c| if n > 0 { c as f64 / n as f64 } else { 0.0 })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lower,bin_upper,count,relative_frequency\n");
        for (b, r) in self.relative().iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", self.edges[b], self.edges[b + 1], self.counts[b], r);
        }
        s
    }

    /// Bar chart of relative frequencies, optionally on a log10 axis.
    pub fn to_svg(&self, log_scale: bool) -> String {
        let (w, h, pad) = (400.0, 240.0, 30.0);
        let rel = self.relative();
        let k = rel.len() as f64;
        let lo = -5.0f64;
        let height = |r: f64| {
            if log_scale {
                if r <= 0.0 {
                    0.0
                } else {
                    ((r.log10().max(lo) - lo) / -lo) * (h - 2.0 * pad)
                }
            } else {
                r * (h - 2.0 * pad)
            }
        };
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" data-log-scale=\"{log_scale}\">\n"
        );
        let bw = (w - 2.0 * pad) / k;
        for (b, r) in rel.iter().enumerate() {
            let bh = height(*r);
            let _ = writeln!(
                s,
                "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4a78a8\" data-bin=\"{b}\" data-count=\"{}\" data-frequency=\"{r}\"/>",
                pad + b as f64 * bw,
                h - pad - bh,
                bw * 0.9,
                bh,
                self.counts[b]
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

pub fn sharpness_histogram(forecasts: &[f64], bins: &ProbabilityBins) -> Result<SharpnessHistogram> {
    if let Some(f) = forecasts.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("probability {f} outside [0, 1]")));
    }
    let mut counts = vec![0usize; bins.len()];
    for f in forecasts {
        counts[bins.index(*f)] += 1;
    }
    Ok(SharpnessHistogram {
        edges: bins.edges.clone(),
        counts,
    })
}

/// Reliability diagram with the diagonal, climatology lines and the no-skill
/// line; point markers carry their skill classification.
pub fn reliability_svg(table: &BinnedReliability, base_rate: f64) -> String {
    let (size, pad) = (320.0, 30.0);
    let span = size - 2.0 * pad;
    let px = |v: f64| pad + v * span;
    let py = |v: f64| size - pad - v * span;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n");
    let _ = writeln!(
        s,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888\" data-role=\"diagonal\"/>",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#bbb\" stroke-dasharray=\"4\" data-role=\"climatology\"/>",
        px(0.0),
        py(base_rate),
        px(1.0),
        py(base_rate)
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#bbb\" data-role=\"no-skill\"/>",
        px(0.0),
        py(base_rate / 2.0),
        px(1.0),
        py((1.0 + base_rate) / 2.0)
    );
    for ((f, o), skill) in table
        .mean_forecast
        .iter()
        .zip(&table.observed_frequency)
        .zip(table.skillful(base_rate))
    {
        if let (Some(f), Some(o), Some(k)) = (f, o, skill) {
            let _ = writeln!(
                s,
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#222\" data-forecast=\"{f}\" data-observed=\"{o}\" data-skillful=\"{k}\"/>",
                px(*f),
                py(*o)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

// ---- bootstrap -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Percentile interval for mean(a) - mean(b) of paired per-case scores,
/// resampling whole days with replacement.
pub fn block_bootstrap_difference(
    days: &[i64],
    a: &[f64],
    b: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<ConfidenceInterval> {
    if days.len() != a.len() || a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument("bootstrap needs equal nonempty inputs".into()));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(
            "bootstrap needs resamples and a level in (0, 1)".into(),
        ));
    }
    let mut blocks: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for i in 0..a.len() {
        let e = blocks.entry(days[i]).or_insert((0.0, 0));
        e.0 += a[i] - b[i];
        e.1 += 1;
    }
    let blocks: Vec<(f64, usize)> = blocks.into_values().collect();
    let total: f64 = blocks.iter().map(|b| b.0).sum();
    let estimate = total / a.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let (mut s, mut n) = (0.0, 0usize);
            for _ in 0..blocks.len() {
                let blk = blocks[rng.random_range(0..blocks.len())];
                s += blk.0;
                n += blk.1;
            }
            s / n as f64
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (stats.len() - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 < stats.len() {
            stats[i] * (1.0 - frac) + stats[i + 1] * frac
        } else {
            stats[i]
        }
    };
    let alpha = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        estimate,
        lower: q(alpha),
        upper: q(1.0 - alpha),
    })
}

// ---- score cards -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bs,
    Res,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Bs => "bs",
            Metric::Res => "res",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCardCell {
    pub method: String,
    pub lead: u32,
    pub metric: Metric,
    /// Reference score minus method score, for the negatively oriented score
    /// (bs, or unc - res); positive is an improvement.
    pub difference: f64,
    pub skill: Option<f64>,
    pub improvement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodLeadReport {
    pub method: String,
    pub lead: u32,
    pub report: BrierReport,
}

pub fn score_card(reports: &[MethodLeadReport], reference: &str) -> Result<Vec<ScoreCardCell>> {
    let refs: BTreeMap<u32, &BrierReport> = reports
        .iter()
        .filter(|r| r.method == reference)
        .map(|r| (r.lead, &r.report))
        .collect();
    let mut cells = Vec::new();
    for r in reports.iter().filter(|r| r.method != reference) {
        let base = refs
            .get(&r.lead)
            .ok_or_else(|| Error::InvalidArgument(format!("no reference '{reference}' cell for lead {}", r.lead)))?;
        for metric in [Metric::Bs, Metric::Res] {
            let (difference, skill) = match metric {
                Metric::Bs => (base.bs - r.report.bs, brier_skill(r.report.bs, base.bs).ok()),
                Metric::Res => (
                    r.report.res - base.res,
                    resolution_skill(r.report.res, base.res, base.unc).ok(),
                ),
            };
            cells.push(ScoreCardCell {
                method: r.method.clone(),
                lead: r.lead,
                metric,
                difference,
                skill,
                improvement: skill.is_some_and(|s| s > 0.0),
            });
        }
    }
    if cells.is_empty() {
        // a card of the reference against itself
        for (&lead, _) in &refs {
            for metric in [Metric::Bs, Metric::Res] {
                cells.push(ScoreCardCell {
                    method: reference.to_string(),
                    lead,
                    metric,
                    difference: 0.0,
                    skill: Some(0.0),
                    improvement: false,
                });
            }
        }
        if cells.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no reports for reference '{reference}'"
            )));
        }
    }
    Ok(cells)
}

pub fn score_card_csv(cells: &[ScoreCardCell]) -> String {
    let mut s = String::from("method,lead,metric,difference,skill,improvement\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.method,
            c.lead,
            c.metric.as_str(),
            c.difference,
            c.skill.map(|v| v.to_string()).unwrap_or_default(),
            c.improvement
        );
    }
    s
}

pub const GREEN: &str = "#2e9d4b";
pub const RED: &str = "#c8372d";
pub const NEUTRAL: &str = "#9a9a9a";

pub fn cell_color(cell: &ScoreCardCell) -> &'static str {
    match cell.skill {
        Some(s) if s > 0.0 => GREEN,
        Some(s) if s < 0.0 => RED,
        _ => NEUTRAL,
    }
}

/// Grid of circles: one row per (method, metric), one column per lead.
/// Radii are proportional to |difference| on a scale shared by all cells.
pub fn score_card_svg(cells: &[ScoreCardCell]) -> String {
    let mut rows: Vec<(String, Metric)> = cells.iter().map(|c| (c.method.clone(), c.metric)).collect();
    rows.sort();
    rows.dedup();
    let mut leads: Vec<u32> = cells.iter().map(|c| c.lead).collect();
    leads.sort();
    leads.dedup();
    let (cell, left, top) = (28.0, 110.0, 24.0);
    let max_r = cell * 0.45;
    let max_diff = cells.iter().map(|c| c.difference.abs()).fold(0.0, f64::max);
    let width = left + cell * leads.len() as f64 + 10.0;
    let height = top + cell * rows.len() as f64 + 10.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" data-max-difference=\"{max_diff}\">\n"
    );
    for (j, lead) in leads.iter().enumerate() {
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"16\" font-size=\"10\" text-anchor=\"middle\">{lead}</text>",
            left + cell * (j as f64 + 0.5)
        );
    }
    for (i, (method, metric)) in rows.iter().enumerate() {
        let cy = top + cell * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            "  <text x=\"4\" y=\"{:.1}\" font-size=\"10\">{method} {}</text>",
            cy + 3.0,
            metric.as_str()
        );
        for c in cells.iter().filter(|c| &c.method == method && c.metric == *metric) {
            let j = leads.iter().position(|l| *l == c.lead).unwrap_or(0);
            let r = if max_diff > 0.0 {
                max_r * c.difference.abs() / max_diff
            } else {
                0.0
            };
            let _ = writeln!(
                s,
                "  <circle cx=\"{:.1}\" cy=\"{cy:.1}\" r=\"{r:.4}\" fill=\"{}\" data-method=\"{method}\" data-lead=\"{}\" data-metric=\"{}\" data-difference=\"{}\" data-skill=\"{}\"/>",
                left + cell * (j as f64 + 0.5),
                cell_color(c),
                c.lead,
                metric.as_str(),
                c.difference,
                c.skill.map(|v| v.to_string()).unwrap_or_default()
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_score_card(cells: &[ScoreCardCell], dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, score_card_csv(cells)).map_err(|e| Error::io(&csv, e))?;
    let svg = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg, score_card_svg(cells)).map_err(|e| Error::io(&svg, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let o: Vec<f64> = f
            .iter()
            .map(|p| if rng.random_range(0.0..1.0) < *p { 1.0 } else { 0.0 })
            .collect();
        (f, o)
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier_score(&[0.0, 1.0, 1.0], &[0.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(brier_score(&[0.5; 4], &[0.0, 1.0, 1.0, 0.0]).unwrap(), 0.25);
        assert!((brier_score(&[0.1, 0.8, 0.3], &[0.0, 1.0, 1.0]).unwrap() - 0.18).abs() < 1e-15);
        assert!(brier_score(&[0.1], &[0.0, 1.0]).is_err());
        assert!(brier_score(&[1.1], &[0.0]).is_err());
        assert!(brier_score(&[0.1], &[0.5]).is_err());
        assert!(brier_score(&[], &[]).is_err());
    }

    #[test]
    fn bin_edges_are_left_closed() {
        let b = ProbabilityBins::default();
        assert_eq!(b.index(0.0), 0);
        assert_eq!(b.index(0.1), 1);
        assert_eq!(b.index(0.0999), 0);
        assert_eq!(b.index(0.9), 9);
        assert_eq!(b.index(1.0), 9);
    }

    #[test]
    fn climatological_and_perfect_forecasts() {
        let o = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let clim = vec![0.2; 10];
        let r = brier_decomposition(&clim, &o, &ProbabilityBins::default()).unwrap();
        assert!(r.rel.abs() < 1e-15 && r.res.abs() < 1e-15);
        assert!((r.bs - r.unc).abs() < 1e-15);
        let r = brier_decomposition(&o, &o, &ProbabilityBins::default()).unwrap();
        assert_eq!(r.rel, 0.0);
        assert!((r.res - r.unc).abs() < 1e-15);
        assert_eq!(r.bs, 0.0);
        let r = brier_decomposition(&[0.3, 0.6], &[0.0, 0.0], &ProbabilityBins::default()).unwrap();
        assert!(r.low_information && r.unc == 0.0 && r.res == 0.0);
    }

    /// Two-pass recomputation: bin membership first, then sums per bin.
    fn two_pass(f: &[f64], o: &[f64], k: usize) -> (f64, f64, f64) {
        let n = f.len() as f64;
        let obar = o.iter().sum::<f64>() / n;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &p) in f.iter().enumerate() {
            let b = ((p * k as f64).floor() as usize).min(k - 1);
            members[b].push(i);
        }
        let (mut rel, mut res) = (0.0, 0.0);
        for m in members.iter().filter(|m| !m.is_empty()) {
            let fb = m.iter().map(|&i| f[i]).sum::<f64>() / m.len() as f64;
            let ob = m.iter().map(|&i| o[i]).sum::<f64>() / m.len() as f64;
            rel += m.len() as f64 * (fb - ob).powi(2);
            res += m.len() as f64 * (ob - obar).powi(2);
        }
        (rel / n, res / n, obar * (1.0 - obar))
    }

    #[test]
    fn decomposition_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (f, o) = random_set(&mut rng, 500);
        let r = brier_decomposition(&f, &o, &ProbabilityBins::default()).unwrap();
        let (rel, res, unc) = two_pass(&f, &o, 10);
        assert!((r.rel - rel).abs() < 1e-14 && (r.res - res).abs() < 1e-14 && (r.unc - unc).abs() < 1e-15);
        assert!((r.rel - r.res + r.unc - r.binned_bs).abs() < 1e-12);
        assert!((r.bs - r.binned_bs - r.within_bin_residual).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn decomposition_identity_holds(seed in 0u64..10_000, n in 1usize..400, bins in 1usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (f, o) = random_set(&mut rng, n);
            let r = brier_decomposition(&f, &o, &ProbabilityBins::equal(bins).unwrap()).unwrap();
            prop_assert!((r.rel - r.res + r.unc - r.binned_bs).abs() <= 1e-12);
            prop_assert!(r.rel >= 0.0 && r.res >= 0.0);
            prop_assert!(r.res <= r.unc + 1e-15 && r.unc <= 0.25);
            prop_assert_eq!(r.reliability.counts.iter().sum::<usize>(), n);
            for (b, m) in r.reliability.mean_forecast.iter().enumerate() {
                if let Some(m) = m {
                    prop_assert!(*m >= r.reliability.edges[b] && *m <= r.reliability.edges[b + 1]);
                }
            }
        }

        #[test]
        fn skill_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (f, o) = random_set(&mut rng, 200);
            let g: Vec<f64> = f.iter().map(|p| (p * 0.8 + 0.1f64).min(1.0)).collect();
            let a = brier_skill(brier_score(&f, &o).unwrap(), brier_score(&g, &o).unwrap()).unwrap();
            let mut idx: Vec<usize> = (0..200).collect();
            idx.reverse();
            idx.swap(3, 77);
            let fp: Vec<f64> = idx.iter().map(|&i| f[i]).collect();
            let gp: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
            let op: Vec<f64> = idx.iter().map(|&i| o[i]).collect();
            let b = brier_skill(brier_score(&fp, &op).unwrap(), brier_score(&gp, &op).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn skill_arithmetic() {
        assert_eq!(brier_skill(0.1, 0.2).unwrap(), 0.5);
        assert_eq!(brier_skill(0.2, 0.2).unwrap(), 0.0);
        assert_eq!(brier_skill(0.0, 0.2).unwrap(), 1.0);
        assert!(matches!(brier_skill(0.1, 0.0), Err(Error::Undefined(_))));
        assert_eq!(resolution_skill(0.03, 0.03, 0.09).unwrap(), 0.0);
        assert_eq!(resolution_skill(0.09, 0.03, 0.09).unwrap(), 1.0);
        assert!((resolution_skill(0.06, 0.03, 0.09).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(resolution_skill(0.05, 0.09, 0.09), Err(Error::Undefined(_))));
    }

    #[test]
    fn sharpness_examples() {
        let b = ProbabilityBins::default();
        let h = sharpness_histogram(&[0.0; 7], &b).unwrap();
        assert_eq!(h.counts[0], 7);
        assert_eq!(h.counts[1..].iter().sum::<usize>(), 0);
        let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!(sharpness_histogram(&grid, &b).unwrap().counts.iter().all(|&c| c == 10));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (f, _) = random_set(&mut rng, 999);
        let h = sharpness_histogram(&f, &b).unwrap();
        let mut sorted = f.clone();
        sorted.sort_by(f64::total_cmp);
        for k in 0..10 {
            let lo = k as f64 / 10.0;
            let hi = (k + 1) as f64 / 10.0;
            let start = sorted.partition_point(|&v| v < lo);
            let end = if k == 9 {
                sorted.len()
            } else {
                sorted.partition_point(|&v| v < hi)
            };
            assert_eq!(h.counts[k], end - start);
        }
        assert!(h.to_svg(true).contains("data-log-scale=\"true\""));
    }

    #[test]
    fn skill_region_matches_no_skill_line() {
        // above climatology the point is skillful iff it lies above (f + obar) / 2
        let obar = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..2000 {
            let f = rng.random_range(obar..1.0);
            let o = rng.random_range(0.0..1.0);
            let t = BinnedReliability {
                edges: vec![0.0, 1.0],
                counts: vec![1],
                mean_forecast: vec![Some(f)],
                observed_frequency: vec![Some(o)],
            };
            if (o - (f + obar) / 2.0).abs() > 1e-12 {
                assert_eq!(t.skillful(obar)[0].unwrap(), o > (f + obar) / 2.0, "f {f} o {o}");
            }
        }
    }

    #[test]
    fn bootstrap_interval_brackets_known_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 3000;
        let days: Vec<i64> = (0..n).map(|i| (i / 10) as i64).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v - 0.05 + rng.random_range(-0.01..0.01)).collect();
        let ci = block_bootstrap_difference(&days, &a, &b, DEFAULT_RESAMPLES, 0.95, 1).unwrap();
        assert!(ci.contains(0.05) && !ci.contains(0.0), "{ci:?}");
        let same = block_bootstrap_difference(&days, &a, &a, 100, 0.95, 1).unwrap();
        assert_eq!((same.lower, same.upper), (0.0, 0.0));
    }

    fn report(bs_shift: f64, rel: f64, res: f64) -> BrierReport {
        let unc = 0.09;
        BrierReport {
            n: 100,
            bs: rel - res + unc + bs_shift,
            rel,
            res,
            unc,
            base_rate: 0.1,
            binned_bs: rel - res + unc,
            within_bin_residual: bs_shift,
            low_information: false,
            reliability: BinnedReliability {
                edges: vec![0.0, 1.0],
                counts: vec![100],
                mean_forecast: vec![Some(0.1)],
                observed_frequency: vec![Some(0.1)],
            },
        }
    }

    #[test]
    fn score_card_cells() {
        let base = report(0.0, 0.02, 0.01);
        let mut better = base.clone();
        better.bs = base.bs * 0.5;
        let reports = vec![
            MethodLeadReport {
                method: "raw".into(),
                lead: 3,
                report: base.clone(),
            },
            MethodLeadReport {
                method: "emos".into(),
                lead: 3,
                report: better,
            },
        ];
        let cells = score_card(&reports, "raw").unwrap();
        let bs = cells.iter().find(|c| c.metric == Metric::Bs).unwrap();
        assert_eq!(bs.skill, Some(0.5));
        assert!(bs.improvement);
        assert_eq!(cell_color(bs), GREEN);
        let svg = score_card_svg(&cells);
        assert!(svg.contains(&format!(
            "fill=\"{GREEN}\" data-method=\"emos\" data-lead=\"3\" data-metric=\"bs\""
        )));

        let own = score_card(&reports[..1], "raw").unwrap();
        assert!(own
            .iter()
            .all(|c| c.difference == 0.0 && !c.improvement && cell_color(c) == NEUTRAL));
        assert!(score_card_svg(&own).contains("r=\"0.0000\""));

        let missing = vec![MethodLeadReport {
            method: "emos".into(),
            lead: 6,
            report: base.clone(),
        }];
        assert!(score_card(&missing, "raw").is_err());
    }

    #[test]
    fn bs_circle_not_smaller_than_res_when_reliability_improves() {
        let base = report(0.0, 0.03, 0.01);
        let m = report(0.0, 0.01, 0.02);
        let reports = vec![
            MethodLeadReport {
                method: "raw".into(),
                lead: 3,
                report: base,
            },
            MethodLeadReport {
                method: "drn".into(),
                lead: 3,
                report: m,
            },
        ];
        let cells = score_card(&reports, "raw").unwrap();
        let bs = cells.iter().find(|c| c.metric == Metric::Bs).unwrap();
        let res = cells.iter().find(|c| c.metric == Metric::Res).unwrap();
        assert!(bs.difference.abs() >= res.difference.abs());
        assert!(res.improvement);
        assert!((res.skill.unwrap() - (0.01 - 0.02) / (0.01 - 0.09)).abs() < 1e-15);
    }

    #[test]
    fn csv_and_svg_agree() {
        let reports = vec![
            MethodLeadReport {
                method: "raw".into(),
                lead: 3,
                report: report(0.0, 0.02, 0.01),
            },
            MethodLeadReport {
                method: "raw".into(),
                lead: 6,
                report: report(0.0, 0.02, 0.01),
            },
            MethodLeadReport {
                method: "mos".into(),
                lead: 3,
                report: report(0.01, 0.03, 0.005),
            },
            MethodLeadReport {
                method: "mos".into(),
                lead: 6,
                report: report(-0.01, 0.01, 0.015),
            },
        ];
        let cells = score_card(&reports, "raw").unwrap();
        let csv = score_card_csv(&cells);
        let svg = score_card_svg(&cells);
        assert_eq!(csv.lines().count() - 1, svg.matches("<circle").count());
        for c in &cells {
            assert!(csv.contains(&format!(
                "{},{},{},{}",
                c.method,
                c.lead,
                c.metric.as_str(),
                c.difference
            )));
            assert!(svg.contains(&format!("data-difference=\"{}\"", c.difference)));
        }
        let dir = tempfile::tempdir().unwrap();
        write_score_card(&cells, dir.path(), "card").unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("card.csv")).unwrap(), csv);
    }
}
