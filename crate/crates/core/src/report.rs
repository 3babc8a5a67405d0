//! Cross-model aggregation over model records and the shipped reference fixture.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{BiasReport, ALL_DOMAINS};

pub const FIXTURE: &str = include_str!("../data/reference_models.jsonl");
pub const FIXTURE_SHA256: &str = "e5d373da70aad306ef639da7167ba6a43f8b429fa23d09249e60e6aeea6c5b00";

/// Printed precision of the fixture: every value is rounded to 2 decimals.
pub const TABLE_ROUNDING: f64 = 0.005;
pub const ICAT_TOLERANCE: f64 = 0.01;
/// Below this many points a correlation carries a small-sample warning.
pub const SIGNIFICANCE_MIN_N: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub lms: f64,
    pub ss: f64,
    pub icat: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub family: String,
    pub param_count: u64,
    pub debiased: bool,
    /// Name of the record this one was debiased from.
    pub base: Option<String>,
    pub metrics: BTreeMap<String, Metrics>,
}

impl ModelRecord {
    pub fn from_report(name: &str, family: &str, param_count: u64, report: &BiasReport) -> Self {
        Self {
            name: name.to_string(),
            family: family.to_string(),
            param_count,
            debiased: false,
            base: None,
            metrics: report
                .rows
                .iter()
                .map(|r| {
                    (
                        r.domain.clone(),
                        Metrics {
                            lms: r.lms,
                            ss: r.ss,
                            icat: r.icat,
                            perplexity: r.perplexity,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn debiased_from(mut self, base: &str) -> Self {
        self.debiased = true;
        self.base = Some(base.to_string());
        self
    }
}

/// Checks that every debiased record names a base present in the set and
/// that names are unique.
pub fn validate_records(records: &[ModelRecord]) -> Result<()> {
    let mut names = BTreeSet::new();
    for r in records {
        if !names.insert(r.name.as_str()) {
            return Err(Error::Input(format!("duplicate model record `{}`", r.name)));
        }
    }
    for r in records {
        match (&r.base, r.debiased) {
            (Some(b), true) if names.contains(b.as_str()) && b != &r.name => {}
            (Some(b), true) => {
                return Err(Error::Input(format!("`{}` references unknown base `{b}`", r.name)));
            }
            (None, true) => return Err(Error::Input(format!("debiased `{}` has no base", r.name))),
            (Some(_), false) => return Err(Error::Input(format!("`{}` has a base but is not debiased", r.name))),
            (None, false) => {}
        }
    }
    Ok(())
}

pub fn parse_records(text: &str, origin: &str) -> Result<Vec<ModelRecord>> {
    let records: Vec<ModelRecord> = crate::io::parse_jsonl(text, origin)?;
    validate_records(&records)?;
    Ok(records)
}

pub fn load_records(path: &Path) -> Result<Vec<ModelRecord>> {
    parse_records(&crate::io::read_to_string(path)?, &path.display().to_string())
}

/// The reference fixture, after confirming its checksum.
pub fn fixture_records() -> Result<Vec<ModelRecord>> {
    let got = hex::encode(Sha256::digest(FIXTURE.as_bytes()));
    if got != FIXTURE_SHA256 {
        return Err(Error::Contract(format!("fixture checksum {got} does not match the pinned value")));
    }
    parse_records(FIXTURE, "reference_models.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArithmeticRow {
    pub model: String,
    pub domain: String,
    pub printed: f64,
    pub recomputed: f64,
    /// `|printed − icat(lms, ss)|` at the printed inputs.
    pub residual: f64,
    /// Distance from `printed` to the icat range reachable when lms and ss
    /// vary over their rounding cells.
    pub cell_residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArithmeticCheck {
    pub rows: Vec<ArithmeticRow>,
}

impl ArithmeticCheck {
    pub fn failures(&self) -> Vec<&ArithmeticRow> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

fn icat_raw(lms: f64, ss: f64) -> f64 {
    lms * ss.min(100.0 - ss) / 50.0
}

fn icat_cell_range(lms: f64, ss: f64, h: f64) -> (f64, f64) {
    let mut ss_points = vec![(ss - h).max(0.0), (ss + h).min(100.0)];
    if (ss - h..=ss + h).contains(&50.0) {
        ss_points.push(50.0);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for l in [lms - h, lms + h] {
        for &s in &ss_points {
            let v = icat_raw(l, s);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

/// Recomputes icat for every (record, domain) row.
pub fn verify_fixture_arithmetic(records: &[ModelRecord]) -> ArithmeticCheck {
    let mut rows = Vec::new();
    for r in records {
        for (domain, m) in &r.metrics {
            let recomputed = icat_raw(m.lms, m.ss);
            let residual = (m.icat - recomputed).abs();
            let (lo, hi) = icat_cell_range(m.lms, m.ss, TABLE_ROUNDING);
            let cell_residual = if m.icat < lo {
                lo - m.icat
            } else if m.icat > hi {
                m.icat - hi
            } else {
                0.0
            };
            rows.push(ArithmeticRow {
                model: r.name.clone(),
                domain: domain.clone(),
                printed: m.icat,
                recomputed,
                residual,
                cell_residual,
                pass: cell_residual <= ICAT_TOLERANCE,
            });
        }
    }
    ArithmeticCheck { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainDelta {
    pub domain: String,
    /// `(base, debiased, ss_base − ss_debiased)` per pair.
    pub drops: Vec<(String, String, f64)>,
    pub mean: f64,
    /// Sample standard deviation; 0 when only one pair exists.
    pub std: f64,
    pub single_pair: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaStats {
    pub domains: Vec<DomainDelta>,
    /// Mean and sample std over every (domain, pair) drop.
    pub pooled_mean: f64,
    pub pooled_std: f64,
    pub pooled_n: usize,
    pub mean_of_means: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// ss drops of each debiased record against its base, per domain. The pooled
/// row excludes the all-domains aggregate so each pair counts once per
/// domain.
pub fn debias_delta_stats(records: &[ModelRecord]) -> Result<DeltaStats> {
    validate_records(records)?;
    let by_name: BTreeMap<&str, &ModelRecord> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut per_domain: BTreeMap<&str, Vec<(String, String, f64)>> = BTreeMap::new();
    for deb in records.iter().filter(|r| r.debiased) {
        let base = by_name[deb.base.as_deref().expect("validated")];
        for (domain, m) in &deb.metrics {
            if domain == ALL_DOMAINS {
                continue;
            }
            if let Some(b) = base.metrics.get(domain) {
                per_domain
                    .entry(domain)
                    .or_default()
                    .push((base.name.clone(), deb.name.clone(), b.ss - m.ss));
            }
        }
    }
    if per_domain.is_empty() {
        return Err(Error::Input("no (base, debiased) pairs share a domain".into()));
    }
    let mut pooled = Vec::new();
    let domains: Vec<DomainDelta> = per_domain
        .into_iter()
        .map(|(d, drops)| {
            let xs: Vec<f64> = drops.iter().map(|x| x.2).collect();
            pooled.extend_from_slice(&xs);
            let (mean, std) = mean_std(&xs);
            DomainDelta {
                domain: d.to_string(),
                single_pair: xs.len() == 1,
                drops,
                mean,
                std,
            }
        })
        .collect();
    let (pooled_mean, pooled_std) = mean_std(&pooled);
    let mean_of_means = domains.iter().map(|d| d.mean).sum::<f64>() / domains.len() as f64;
    Ok(DeltaStats {
        domains,
        pooled_mean,
        pooled_std,
        pooled_n: pooled.len(),
        mean_of_means,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Linear,
    LogLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("a coordinate has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn correlation(points: &[(f64, f64)], transform: Transform) -> Result<Correlation> {
    if points.len() < 3 {
        return Err(Error::Input(format!("correlation needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Domain("correlation inputs must be finite".into()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = match transform {
        Transform::Linear => points.iter().copied().unzip(),
        Transform::LogLog => {
            if let Some(p) = points.iter().find(|(x, y)| *x <= 0.0 || *y <= 0.0) {
                return Err(Error::Domain(format!("log-log needs positive values, got {p:?}")));
            }
            points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip()
        }
    };
    Ok(Correlation {
        pearson: pearson(&xs, &ys)?,
        spearman: pearson(&ranks(&xs), &ranks(&ys))?,
        n: points.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub domain: String,
    pub model: String,
    pub param_count: u64,
    pub perplexity: f64,
    pub ss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainCorrelations {
    pub domain: String,
    pub size_vs_ss: Result<Correlation, String>,
    pub perplexity_vs_ss: Result<Correlation, String>,
    pub n: usize,
    /// Present when `n` is below [`SIGNIFICANCE_MIN_N`].
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeBiasSummary {
    pub points: Vec<ScatterPoint>,
    pub correlations: Vec<DomainCorrelations>,
}

pub fn small_n_note(n: usize) -> Option<String> {
    (n < SIGNIFICANCE_MIN_N).then(|| format!("n = {n} too small for significance"))
}

/// Log-log (size, ss) and (perplexity, ss) scatter data and correlations for
/// each requested domain, over the non-debiased records.
pub fn size_bias_summary(records: &[ModelRecord], domains: &[&str]) -> Result<SizeBiasSummary> {
    if domains.is_empty() {
        return Err(Error::Input("no domains selected".into()));
    }
    let mut points = Vec::new();
    let mut correlations = Vec::new();
    for &domain in domains {
        let pts: Vec<ScatterPoint> = records
            .iter()
            .filter(|r| !r.debiased)
            .filter_map(|r| {
                r.metrics.get(domain).map(|m| ScatterPoint {
                    domain: domain.to_string(),
                    model: r.name.clone(),
                    param_count: r.param_count,
                    perplexity: m.perplexity,
                    ss: m.ss,
                })
            })
            .collect();
        if pts.len() < 3 {
            return Err(Error::Input(format!(
                "domain `{domain}` has {} models with metrics, need at least 3",
                pts.len()
            )));
        }
        let size: Vec<(f64, f64)> = pts.iter().map(|p| (p.param_count as f64, p.ss)).collect();
        let ppl: Vec<(f64, f64)> = pts.iter().map(|p| (p.perplexity, p.ss)).collect();
        correlations.push(DomainCorrelations {
            domain: domain.to_string(),
            size_vs_ss: correlation(&size, Transform::LogLog).map_err(|e| e.to_string()),
            perplexity_vs_ss: correlation(&ppl, Transform::LogLog).map_err(|e| e.to_string()),
            n: pts.len(),
            note: small_n_note(pts.len()),
        });
        points.extend(pts);
    }
    Ok(SizeBiasSummary { points, correlations })
}

impl SizeBiasSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain,model,param_count,perplexity,ss\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{},{}", p.domain, p.model, p.param_count, p.perplexity, p.ss);
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Vec<ScatterPoint>> {
        let bad = |line: usize, message: String| Error::Parse {
            path: "scatter.csv".into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "domain,model,param_count,perplexity,ss")) => {}
            _ => return Err(bad(1, "unexpected header".into())),
        }
        lines
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(i + 1, format!("expected 5 fields, got {}", f.len())));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
                Ok(ScatterPoint {
                    domain: f[0].to_string(),
                    model: f[1].to_string(),
                    param_count: f[2].parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?,
                    perplexity: num(f[3])?,
                    ss: num(f[4])?,
                })
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.correlations {
            let fmt = |r: &Result<Correlation, String>| match r {
                Ok(c) => format!("pearson {:+.4}, spearman {:+.4}", c.pearson, c.spearman),
                Err(e) => format!("undefined ({e})"),
            };
            let _ = writeln!(s, "[{}] n = {}", c.domain, c.n);
            let _ = writeln!(s, "  log size vs log ss:       {}", fmt(&c.size_vs_ss));
            let _ = writeln!(s, "  log perplexity vs log ss: {}", fmt(&c.perplexity_vs_ss));
            if let Some(note) = &c.note {
                let _ = writeln!(s, "  note: {note}");
            }
        }
        s
    }

    /// Two log-log panels (size vs ss, perplexity vs ss) as standalone SVG.
    pub fn to_svg(&self) -> String {
        const W: f64 = 920.0;
        const H: f64 = 420.0;
        const PANEL: f64 = 380.0;
        const PAD: f64 = 50.0;
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let domains: Vec<&str> = self.correlations.iter().map(|c| c.domain.as_str()).collect();
        let color = |d: &str| COLORS[domains.iter().position(|x| *x == d).unwrap_or(0) % COLORS.len()];

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" viewBox="0 0 {W} {}" font-family="sans-serif" font-size="11">"#,
            H + 20.0 * domains.len() as f64,
            H + 20.0 * domains.len() as f64
        );
        let panels: [(&str, fn(&ScatterPoint) -> f64); 2] = [
            ("log parameter count", |p| (p.param_count as f64).ln()),
            ("log perplexity", |p| p.perplexity.ln()),
        ];
        for (k, (label, fx)) in panels.iter().enumerate() {
            let x0 = PAD + k as f64 * (PANEL + 2.0 * PAD);
            let xs: Vec<f64> = self.points.iter().map(fx).collect();
            let ys: Vec<f64> = self.points.iter().map(|p| p.ss.ln()).collect();
            let span = |v: &[f64]| {
                let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let pad = ((hi - lo) * 0.08).max(1e-3);
                (lo - pad, hi + pad)
            };
            let ((xl, xh), (yl, yh)) = (span(&xs), span(&ys));
            let sx = |v: f64| x0 + (v - xl) / (xh - xl) * PANEL;
            let sy = |v: f64| 20.0 + PANEL - (v - yl) / (yh - yl) * PANEL;
            let _ = writeln!(
                s,
                r##"<rect x="{x0}" y="20" width="{PANEL}" height="{PANEL}" fill="none" stroke="#444"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
                x0 + PANEL / 2.0,
                PANEL + 38.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">log ss</text>"#,
                x0 - 14.0,
                20.0 + PANEL / 2.0,
                x0 - 14.0,
                20.0 + PANEL / 2.0
            );
            for ((p, &x), &y) in self.points.iter().zip(&xs).zip(&ys) {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"><title>{} / {}: ss {}</title></circle>"#,
                    sx(x),
                    sy(y),
                    color(&p.domain),
                    xml_escape(&p.model),
                    xml_escape(&p.domain),
                    p.ss
                );
            }
        }
        for (i, c) in self.correlations.iter().enumerate() {
            let r = |r: &Result<Correlation, String>| r.as_ref().map_or("n/a".to_string(), |c| format!("{:+.3}", c.pearson));
            let note = c.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default();
            let _ = writeln!(
                s,
                r#"<text x="{PAD}" y="{}" fill="{}">{}: r(size, ss) = {}, r(perplexity, ss) = {}{}</text>"#,
                H + 6.0 + 20.0 * i as f64,
                color(&c.domain),
                xml_escape(&c.domain),
                r(&c.size_vs_ss),
                r(&c.perplexity_vs_ss),
                xml_escape(&note)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
