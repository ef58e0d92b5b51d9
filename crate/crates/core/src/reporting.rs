//! Tables and SVG line plots from training outputs and ablation CSVs.
//!
//! An input is either a run directory (as written by training: `train_log.csv`,
//! `epochs.csv`, optionally `metrics.json`) or an ablation CSV. Output bytes
//! depend only on the input bytes and the input names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::Metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub txt: bool,
    pub svg: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Self {
            csv: true,
            txt: true,
            svg: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSpec {
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub formats: Formats,
}

/// A CSV held as named numeric-or-text columns.
#[derive(Clone, Debug)]
pub struct Table {
    source: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self {
            source: path.display().to_string(),
            headers,
            rows,
        })
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("{}: missing column `{name}`", self.source)))
    }

    pub fn text(&self, name: &str) -> Result<Vec<String>> {
        let i = self.index(name)?;
        Ok(self.rows.iter().map(|r| r.get(i).cloned().unwrap_or_default()).collect())
    }

    /// Empty cells read as `None`.
    pub fn optional(&self, name: &str) -> Result<Vec<Option<f64>>> {
        self.text(name)?
            .into_iter()
            .enumerate()
            .map(|(row, s)| {
                if s.trim().is_empty() {
                    return Ok(None);
                }
                s.trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::Input(format!("{}: row {}: `{name}` is not a number: {s:?}", self.source, row + 1)))
            })
            .collect()
    }

    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        self.optional(name)?
            .into_iter()
            .enumerate()
            .map(|(row, v)| v.ok_or_else(|| Error::Input(format!("{}: row {}: `{name}` is empty", self.source, row + 1))))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One training run's logs.
#[derive(Clone, Debug)]
pub struct RunLog {
    pub name: String,
    pub iterations: Table,
    pub epochs: Table,
    pub metrics: Option<Metrics>,
}

impl RunLog {
    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let iterations = Table::read(&dir.join("train_log.csv"))?;
        let epochs = Table::read(&dir.join("epochs.csv"))?;
        let path = dir.join("metrics.json");
        let metrics = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Ok(Self {
            name,
            iterations,
            epochs,
            metrics,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub run: String,
    pub epochs: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub clusters: f64,
    pub noise_fraction: f64,
    pub metrics: Option<Metrics>,
}

fn last<T: Copy>(v: &[T]) -> Option<T> {
    v.last().copied()
}

pub fn summarize(run: &RunLog) -> Result<SummaryRow> {
    let total = run.iterations.numbers("total")?;
    let clusters = run.epochs.numbers("num_clusters")?;
    let noise = run.epochs.numbers("noise_fraction")?;
    // Without a metrics file, fall back to the last evaluated epoch.
    let metrics = match &run.metrics {
        Some(m) => Some(m.clone()),
        None => {
            let cols: Vec<Vec<Option<f64>>> = ["mAP", "cmc1", "cmc5", "cmc10"]
                .iter()
                .map(|c| run.epochs.optional(c))
                .collect::<Result<_>>()?;
            (0..run.epochs.len()).rev().find_map(|i| {
                Some(Metrics {
                    map: cols[0][i]?,
                    cmc1: cols[1][i]?,
                    cmc5: cols[2][i]?,
                    cmc10: cols[3][i]?,
                })
            })
        }
    };
    Ok(SummaryRow {
        run: run.name.clone(),
        epochs: run.epochs.len(),
        iterations: run.iterations.len(),
        final_loss: last(&total).unwrap_or(f64::NAN),
        clusters: last(&clusters).unwrap_or(f64::NAN),
        noise_fraction: last(&noise).unwrap_or(f64::NAN),
        metrics,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.1}", 100.0 * x))
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("run,epochs,iterations,final_loss,clusters,noise_fraction,mAP,cmc1,cmc5,cmc10\n");
    for r in rows {
        let m = |f: fn(&Metrics) -> f64| r.metrics.as_ref().map_or(String::new(), |x| format!("{}", f(x)));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.run),
            r.epochs,
            r.iterations,
            r.final_loss,
            r.clusters,
            r.noise_fraction,
            m(|x| x.map),
            m(|x| x.cmc1),
            m(|x| x.cmc5),
            m(|x| x.cmc10)
        );
    }
    out
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let header = ["run", "epochs", "iters", "loss", "clusters", "noise", "mAP", "top-1", "top-5", "top-10"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let m = r.metrics.as_ref();
            vec![
                r.run.clone(),
                r.epochs.to_string(),
                r.iterations.to_string(),
                format!("{:.4}", r.final_loss),
                format!("{}", r.clusters),
                format!("{:.3}", r.noise_fraction),
                pct(m.map(|x| x.map)),
                pct(m.map(|x| x.cmc1)),
                pct(m.map(|x| x.cmc5)),
                pct(m.map(|x| x.cmc10)),
            ]
        })
        .collect();
    text_table(&header, &body)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationEntry {
    pub setting: String,
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
}

/// Rows of an ablation CSV, best mAP first; equal mAPs keep file order.
pub fn sorted_ablation(table: &Table) -> Result<Vec<AblationEntry>> {
    let setting = table.text("setting")?;
    let map = table.numbers("mAP")?;
    let cmc1 = table.numbers("cmc1")?;
    let cmc5 = table.numbers("cmc5")?;
    let cmc10 = table.numbers("cmc10")?;
    let mut rows: Vec<AblationEntry> = (0..table.len())
        .map(|i| AblationEntry {
            setting: setting[i].clone(),
            map: map[i],
            cmc1: cmc1[i],
            cmc5: cmc5[i],
            cmc10: cmc10[i],
        })
        .collect();
    rows.sort_by(|a, b| b.map.total_cmp(&a.map));
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationEntry]) -> String {
    let mut out = String::from("rank,setting,mAP,cmc1,cmc5,cmc10\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{},{},{}", i + 1, csv_field(&r.setting), r.map, r.cmc1, r.cmc5, r.cmc10);
    }
    out
}

pub fn ablation_table(rows: &[AblationEntry]) -> String {
    let header = ["rank", "setting", "mAP", "top-1", "top-5", "top-10"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                (i + 1).to_string(),
                r.setting.clone(),
                pct(Some(r.map)),
                pct(Some(r.cmc1)),
                pct(Some(r.cmc5)),
                pct(Some(r.cmc10)),
            ]
        })
        .collect();
    text_table(&header, &body)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Left-aligned first column, right-aligned others.
fn text_table(header: &[&str], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s += "  ";
            }
            let pad = w - c.chars().count();
            if i == 0 {
                s += c;
                s += &" ".repeat(pad);
            } else {
                s += &" ".repeat(pad);
                s += c;
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out += &"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
    out += "\n";
    for row in body {
        out += &line(row.iter().map(String::as_str).collect());
    }
    out
}

/// A named sequence of (x, y) points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

/// Minimal SVG line chart with axes, four ticks per axis and a legend.
pub fn line_plot(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (60.0, 150.0, 30.0, 40.0);
    let finite = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, left + pw / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(s, r#"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="black"/>"#, top + ph, top + ph + 4.0);
        let _ = writeln!(s, r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#, top + ph + 16.0, tick(xv));
        let _ = writeln!(s, r#"<line x1="{}" y1="{py:.1}" x2="{left}" y2="{py:.1}" stroke="black"/>"#, left - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, py + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 6.0, esc(x_label));
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if pts.len() == 1 {
            let (x, y) = pts[0].split_once(',').expect("formatted above");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        } else if !pts.is_empty() {
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        }
        let ly = top + 12.0 + 16.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, esc(&ser.name));
    }
    s += "</svg>\n";
    s
}

pub fn loss_series(run: &RunLog) -> Result<Vec<Series>> {
    let step = run.iterations.numbers("step")?;
    ["ce", "st", "co", "total"]
        .iter()
        .map(|c| {
            let ys = run.iterations.numbers(c)?;
            Ok(Series {
                name: c.to_string(),
                points: step.iter().copied().zip(ys).collect(),
            })
        })
        .collect()
}

/// Per-epoch mAP and CMC points; epochs without evaluation are skipped.
pub fn cmc_series(run: &RunLog) -> Result<Vec<Series>> {
    let epoch = run.epochs.numbers("epoch")?;
    ["mAP", "cmc1", "cmc5", "cmc10"]
        .iter()
        .map(|c| {
            let ys = run.epochs.optional(c)?;
            Ok(Series {
                name: c.to_string(),
                points: epoch.iter().zip(ys).filter_map(|(&x, y)| Some((x, y?))).collect(),
            })
        })
        .collect()
}

enum Input {
    Run(RunLog),
    Ablation(String, Table),
}

fn classify(path: &Path) -> Result<Input> {
    if path.is_dir() {
        return Ok(Input::Run(RunLog::load(path)?));
    }
    if !path.exists() {
        return Err(Error::Input(format!("{}: no such file or directory", path.display())));
    }
    let table = Table::read(path)?;
    let stem = path.file_stem().map_or("ablation".into(), |s| s.to_string_lossy().into_owned());
    table.index("setting")?;
    Ok(Input::Ablation(stem, table))
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes every requested artifact and returns their paths in write order.
///
/// Run directories give `summary.{csv,txt}` (one row per run) and
/// `<run>_losses.svg` / `<run>_cmc.svg`; ablation CSVs give
/// `<stem>_sorted.{csv,txt}`.
pub fn render(spec: &ReportSpec) -> Result<Vec<PathBuf>> {
    if spec.inputs.is_empty() {
        return Err(Error::Input("report needs at least one input".into()));
    }
    let inputs: Vec<Input> = spec.inputs.iter().map(|p| classify(p)).collect::<Result<_>>()?;
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let mut order = Vec::new();
    let mut put = |name: String, body: String| {
        if files.insert(name.clone(), body).is_none() {
            order.push(name);
        }
    };

    let mut summary = Vec::new();
    for input in &inputs {
        match input {
            Input::Run(run) => {
                summary.push(summarize(run)?);
                let losses = loss_series(run)?;
                let cmc = cmc_series(run)?;
                if spec.formats.svg {
                    let base = safe_name(&run.name);
                    put(format!("{base}_losses.svg"), line_plot(&format!("{}: losses", run.name), "step", &losses));
                    put(format!("{base}_cmc.svg"), line_plot(&format!("{}: retrieval", run.name), "epoch", &cmc));
                }
            }
            Input::Ablation(stem, table) => {
                let rows = sorted_ablation(table)?;
                let base = safe_name(stem);
                if spec.formats.csv {
                    put(format!("{base}_sorted.csv"), ablation_csv(&rows));
                }
                if spec.formats.txt {
                    put(format!("{base}_sorted.txt"), ablation_table(&rows));
                }
            }
        }
    }
    if !summary.is_empty() {
        if spec.formats.csv {
            put("summary.csv".into(), summary_csv(&summary));
        }
        if spec.formats.txt {
            put("summary.txt".into(), summary_table(&summary));
        }
    }

    fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    let mut written = Vec::with_capacity(order.len());
    for name in order {
        let path = spec.output_dir.join(&name);
        fs::write(&path, &files[&name]).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
