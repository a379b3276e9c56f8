//! Metrics reports (schema v1), text summaries and the accuracy plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const SCHEMA: &str = include_str!("../../schemas/metrics_report.v1.json");
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const PLOT_FILE: &str = "accuracy_vs_bias_ratio.svg";
pub const SCHEMA_FILE: &str = "metrics_report.v1.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAccuracies {
    pub unbiased_accuracy: f64,
    pub bias_guiding_accuracy: f64,
    /// Accuracy on the bias-contrary part of the unbiased split.
    pub bias_contrary_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub contrary_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub ablation_tag: String,
    pub dataset: String,
    pub bias_ratio: f64,
    pub seed: u64,
    pub debiased: SplitAccuracies,
    pub vanilla: SplitAccuracies,
    /// Debiased minus vanilla unbiased accuracy.
    pub unbiased_delta: f64,
    pub partition: PartitionSummary,
    pub generated: usize,
    pub hue_transfer_rate: Option<f64>,
    /// Curve name to CSV path relative to the run directory.
    pub loss_curves: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    schema_version: u32,
    reports: Vec<MetricsReport>,
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Schema(format!("{name} = {v} outside [0, 1]")))
    }
}

impl SplitAccuracies {
    fn validate(&self, who: &str) -> Result<()> {
        unit(&format!("{who}.unbiased_accuracy"), self.unbiased_accuracy)?;
        unit(&format!("{who}.bias_guiding_accuracy"), self.bias_guiding_accuracy)?;
        if let Some(c) = self.bias_contrary_accuracy {
            unit(&format!("{who}.bias_contrary_accuracy"), c)?;
        }
        Ok(())
    }
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("schema_version {} (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if self.config_hash.len() != 16 || !self.config_hash.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
            return Err(Error::Schema(format!("config_hash {:?} is not 16 lowercase hex digits", self.config_hash)));
        }
        if !matches!(self.dataset.as_str(), "colored_mnist" | "corrupted_cifar10") {
            return Err(Error::Schema(format!("unknown dataset {:?}", self.dataset)));
        }
        if !(self.bias_ratio > 0.0 && self.bias_ratio <= 1.0) {
            return Err(Error::Schema(format!("bias_ratio {} outside (0, 1]", self.bias_ratio)));
        }
        self.debiased.validate("debiased")?;
        self.vanilla.validate("vanilla")?;
        let delta = self.debiased.unbiased_accuracy - self.vanilla.unbiased_accuracy;
        if (delta - self.unbiased_delta).abs() > 1e-12 {
            return Err(Error::Schema(format!("unbiased_delta {} != {delta}", self.unbiased_delta)));
        }
        unit("partition.precision", self.partition.precision)?;
        unit("partition.recall", self.partition.recall)?;
        unit("partition.f1", self.partition.f1)?;
        if let Some(h) = self.hue_transfer_rate {
            unit("hue_transfer_rate", h)?;
        }
        Ok(())
    }
}

pub fn read_report(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path)?;
    let file: ReportFile = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
    if file.schema_version != SCHEMA_VERSION || file.reports.is_empty() {
        return Err(Error::Schema("report file needs schema_version 1 and at least one report".into()));
    }
    file.reports.iter().try_for_each(MetricsReport::validate)?;
    Ok(file.reports)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Reports grouped by `(dataset, ablation tag, bias ratio)`.
fn groups(reports: &[MetricsReport]) -> BTreeMap<(String, String, u64), Vec<&MetricsReport>> {
    let mut g: BTreeMap<_, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        g.entry((r.dataset.clone(), r.ablation_tag.clone(), r.bias_ratio.to_bits())).or_default().push(r);
    }
    g
}

pub fn summary_text(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for ((dataset, tag, ratio), rs) in groups(reports) {
        let ratio = f64::from_bits(ratio);
        let pick = |f: &dyn Fn(&MetricsReport) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (du, dus) = pick(&|r| r.debiased.unbiased_accuracy);
        let (dg, dgs) = pick(&|r| r.debiased.bias_guiding_accuracy);
        let (vu, vus) = pick(&|r| r.vanilla.unbiased_accuracy);
        let (vg, vgs) = pick(&|r| r.vanilla.bias_guiding_accuracy);
        let (delta, delta_s) = pick(&|r| r.unbiased_delta);
        let (f1, _) = pick(&|r| r.partition.f1);
        let seeds: Vec<String> = rs.iter().map(|r| r.seed.to_string()).collect();
        let _ = writeln!(out, "{dataset} bias_ratio={ratio} [{tag}] seeds={}", seeds.join(","));
        let _ = writeln!(out, "  debiased  unbiased {:.2} ± {:.2}  guiding {:.2} ± {:.2}", 100.0 * du, 100.0 * dus, 100.0 * dg, 100.0 * dgs);
        let _ = writeln!(out, "  vanilla   unbiased {:.2} ± {:.2}  guiding {:.2} ± {:.2}", 100.0 * vu, 100.0 * vus, 100.0 * vg, 100.0 * vgs);
        let _ = writeln!(out, "  unbiased delta {:+.2} ± {:.2} points, partition F1 {:.4}", 100.0 * delta, 100.0 * delta_s, f1);
        let hues: Vec<f64> = rs.iter().filter_map(|r| r.hue_transfer_rate).collect();
        if !hues.is_empty() {
            let _ = writeln!(out, "  hue transfer {:.1}%", 100.0 * mean_std(&hues).0);
        }
        for r in &rs {
            let _ = writeln!(out, "  config {} seed {}", r.config_hash, r.seed);
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#444444", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Unbiased accuracy against bias ratio: one line for vanilla and one per
/// ablation tag, averaged over seeds.
pub fn accuracy_plot_svg(reports: &[MetricsReport]) -> String {
    let mut ratios: Vec<f64> = reports.iter().map(|r| r.bias_ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let mut series: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in reports {
        let key = r.bias_ratio.to_bits();
        series.entry("vanilla".into()).or_default().entry(key).or_default().push(r.vanilla.unbiased_accuracy);
        series.entry(r.ablation_tag.clone()).or_default().entry(key).or_default().push(r.debiased.unbiased_accuracy);
    }
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 180.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_of = |i: usize| left + if ratios.len() == 1 { pw / 2.0 } else { pw * i as f64 / (ratios.len() - 1) as f64 };
    let y_of = |v: f64| top + ph * (1.0 - v);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.0}</text>"#, left - 6.0, y + 4.0, v * 100.0);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#eeeeee"/>"##, left + pw);
    }
    for (i, r) in ratios.iter().enumerate() {
        let x = x_of(i);
        let _ = writeln!(s, r#"<g class="xtick"><line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle">{}</text></g>"#, top + ph, top + ph + 5.0, top + ph + 20.0, r);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">bias ratio</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">unbiased accuracy (%)</text>"#, top + ph / 2.0, top + ph / 2.0);
    for (n, (name, points)) in series.iter().enumerate() {
        let colour = PALETTE[n % PALETTE.len()];
        let coords: Vec<(f64, f64)> = ratios
            .iter()
            .enumerate()
            .filter_map(|(i, r)| points.get(&r.to_bits()).map(|v| (x_of(i), y_of(mean_std(v).0))))
            .collect();
        let d: Vec<String> = coords.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, d.join(" "));
        for (x, y) in &coords {
            let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{colour}"/>"#);
        }
        let ly = top + 16.0 * n as f64 + 10.0;
        let lx = left + pw + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, xml_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `report.json`, the text summary, the plot and a copy of the schema.
pub fn emit_report(reports: &[MetricsReport], dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Schema("no reports to emit".into()));
    }
    reports.iter().try_for_each(MetricsReport::validate)?;
    fs::create_dir_all(dir)?;
    let file = ReportFile { schema_version: SCHEMA_VERSION, reports: reports.to_vec() };
    fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&file)?)?;
    fs::write(dir.join(SUMMARY_FILE), summary_text(reports))?;
    fs::write(dir.join(PLOT_FILE), accuracy_plot_svg(reports))?;
    fs::write(dir.join(SCHEMA_FILE), SCHEMA)?;
    Ok(())
}
