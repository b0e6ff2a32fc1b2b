//! Results files, provenance hashes, text tables and the confusion heatmap.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{DagamError, Result};
use crate::io::dataset::{atomic_write, read_text};
use crate::train::{AblationRow, ConfusionMatrix, EpochStats, LoocvResult, SweepRow};

pub const RESULTS_VERSION: u32 = 1;

/// How the domain loss is reduced; echoed into every results file.
pub const DOMAIN_LOSS_NOTE: &str =
    "domain cross-entropy is mean-reduced within each domain, then summed";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| DagamError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// File path (as given) to SHA-256 hex digest.
pub fn hash_files(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.to_string_lossy().into_owned(), sha256_file(p)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Loocv(LoocvResult),
    SweepK(Vec<SweepRow>),
    Ablation(Vec<AblationRow>),
    Train {
        target: Option<String>,
        history: Vec<EpochStats>,
        checkpoint: String,
        checkpoint_sha256: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub version: u32,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub classes: Vec<String>,
    pub notes: Vec<String>,
    /// inputs that produced this file, with their digests
    pub provenance: BTreeMap<String, String>,
    pub result: Payload,
}

impl ResultsFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("results serialize");
        json.push('\n');
        atomic_write(path, json.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        serde_json::from_str(&text)
            .map_err(|e| DagamError::load(path, Some(e.line()), e.to_string()))
    }

    /// Re-hash every provenance entry; returns the entries that changed.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (path, digest) in &self.provenance {
            match sha256_file(Path::new(path)) {
                Ok(d) if &d == digest => {}
                Ok(_) => bad.push(format!("{path}: digest differs")),
                Err(e) => bad.push(format!("{path}: {e}")),
            }
        }
        Ok(bad)
    }

    pub fn text_report(&self) -> String {
        match &self.result {
            Payload::Loocv(r) => {
                let mut s = loocv_table(r);
                s.push('\n');
                s.push_str(&confusion_table(&r.confusion, &self.classes));
                s
            }
            Payload::SweepK(rows) => sweep_table(rows),
            Payload::Ablation(rows) => ablation_table(rows),
            Payload::Train {
                history,
                checkpoint,
                ..
            } => {
                let mut s = history_table(history);
                let _ = writeln!(s, "checkpoint: {checkpoint}");
                s
            }
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn loocv_table(r: &LoocvResult) -> String {
    let width = r
        .folds
        .iter()
        .map(|f| f.target.len())
        .max()
        .unwrap_or(0)
        .max(7);
    let mut s = format!("{:<5}  {:<width$}  {:>8}\n", "Fold", "Subject", "ACC(%)");
    for f in &r.folds {
        let _ = writeln!(
            s,
            "{:<5}  {:<width$}  {:>8}",
            f.fold,
            f.target,
            pct(f.accuracy)
        );
    }
    let _ = writeln!(s, "Mean/Std ACC(%): {}/{}", pct(r.mean), pct(r.std));
    s
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:<5}  {:>5}  {:>8}  {:>8}\n",
        "k", "Nodes", "ACC(%)", "STD(%)"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<5}  {:>5}  {:>8}  {:>8}",
            format!("{:.2}", r.k),
            r.pooled_nodes,
            pct(r.mean),
            pct(r.std)
        );
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}  {:>8}  {:>8}\n", "Method", "ACC(%)", "STD(%)");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>8}",
            r.label,
            pct(r.mean),
            pct(r.std)
        );
    }
    s
}

pub fn history_table(history: &[EpochStats]) -> String {
    let mut s = format!(
        "{:>5}  {:>10}  {:>10}  {:>10}  {:>8}\n",
        "Epoch", "E_all", "L_y", "L_d", "ACC(%)"
    );
    for h in history {
        let _ = writeln!(
            s,
            "{:>5}  {:>10.5}  {:>10.5}  {:>10.5}  {:>8}",
            h.epoch,
            h.e_all,
            h.l_y,
            h.l_d,
            pct(h.accuracy)
        );
    }
    s
}

fn class_labels(classes: &[String], c: usize) -> Vec<String> {
    (0..c)
        .map(|i| {
            classes
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("class{i}"))
        })
        .collect()
}

/// Row-normalized percentages, true class down, prediction across.
pub fn confusion_table(m: &ConfusionMatrix, classes: &[String]) -> String {
    let names = class_labels(classes, m.classes());
    let width = names.iter().map(String::len).max().unwrap_or(0).max(7);
    let mut s = format!("{:<width$}", "");
    for n in &names {
        let _ = write!(s, "  {n:>width$}");
    }
    s.push('\n');
    for (name, row) in names.iter().zip(m.normalized()) {
        let _ = write!(s, "{name:<width$}");
        for v in row {
            let _ = write!(s, "  {:>width$}", format!("{}%", pct(v)));
        }
        s.push('\n');
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Standalone SVG heatmap of the row-normalized matrix.
pub fn confusion_svg(m: &ConfusionMatrix, classes: &[String]) -> String {
    const CELL: usize = 90;
    const LEFT: usize = 110;
    const TOP: usize = 60;
    let c = m.classes();
    let names = class_labels(classes, c);
    let (w, h) = (LEFT + c * CELL + 20, TOP + c * CELL + 50);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="14">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (i, row) in m.normalized().iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (LEFT + j * CELL, TOP + i * CELL);
            // white to deep blue
            let shade = |full: f64| (255.0 - v * (255.0 - full)).round() as u8;
            let (r, g, b) = (shade(8.0), shade(48.0), shade(107.0));
            let ink = if v > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({r},{g},{b})" stroke="gray"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{}%</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 5,
                pct(v)
            );
        }
    }
    for (i, n) in names.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 8,
            TOP + i * CELL + CELL / 2 + 5,
            escape(n)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + i * CELL + CELL / 2,
            TOP - 10,
            escape(n)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Predicted label</text>"#,
        LEFT + c * CELL / 2,
        TOP + c * CELL + 30
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="start">True label</text>"#,
        TOP - 35
    );
    s.push_str("</svg>\n");
    s
}

/// Write the heatmap and its text twin next to each other.
pub fn emit_confusion(m: &ConfusionMatrix, classes: &[String], svg_path: &Path) -> Result<()> {
    atomic_write(svg_path, confusion_svg(m, classes).as_bytes())?;
    atomic_write(
        &svg_path.with_extension("txt"),
        confusion_table(m, classes).as_bytes(),
    )
}
