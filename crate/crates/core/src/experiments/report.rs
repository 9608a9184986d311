//! Study reports. Everything here reads `study.json` and the metrics files
//! only, so reports can be regenerated without retraining.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::chart::{BarDotChart, Heatmap};
use super::{ExperimentPlan, GridEntry, Study, StudyKind, BASELINE_DIR, METRICS_FILE};
use crate::dataio::{write_atomic, DatasetKind};
use crate::error::{Error, Result};
use crate::losses::FFL_GRID;
use crate::metrics::{aggregate, fmt_opt, read_records_json, report_csv, MetricsRecord, ReportRow};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const TIE_RULE: &str =
    "Best value per column and training set is underlined; ties on the displayed value are broken by higher PSNR, then higher SSIM, on the artifact subset.";

fn row_of(records: &[MetricsRecord]) -> Result<ReportRow> {
    let mut rows = aggregate(records);
    match rows.len() {
        1 => Ok(rows.remove(0)),
        n => Err(Error::Format {
            path: METRICS_FILE.into(),
            reason: format!("expected records of one run, found {n} groups"),
        }),
    }
}

struct Loaded {
    plan: ExperimentPlan,
    baseline: ReportRow,
    runs: Vec<(GridEntry, Vec<MetricsRecord>)>,
}

fn load(dir: &Path) -> Result<Loaded> {
    let study = Study::load(dir)?;
    let baseline_path = dir.join(BASELINE_DIR).join(METRICS_FILE);
    let baseline = row_of(&read_records_json(&baseline_path)?)?;
    let mut runs = Vec::new();
    for entry in &study.plan.grid {
        let path = study.plan.run_dir(entry).join(METRICS_FILE);
        // plan paths may be relative to where the study was launched
        let path = if path.exists() {
            path
        } else {
            dir.join(super::RUNS_DIR).join(&entry.name).join(METRICS_FILE)
        };
        if !path.exists() {
            return Err(Error::Missing(format!("metrics for run {} ({})", entry.name, path.display())));
        }
        runs.push((entry.clone(), read_records_json(&path)?));
    }
    Ok(Loaded {
        plan: study.plan,
        baseline,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub w: f64,
    pub row: ReportRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub rows: Vec<WeightRow>,
    pub baseline: ReportRow,
    /// Max minus min of the artifact-subset PSNR means across w.
    pub psnr_art_spread: Option<f64>,
    pub psnr_all_spread: Option<f64>,
}

fn spread(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = v.collect();
    let v = v.filter(|v| !v.is_empty())?;
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    Some(hi - lo)
}

pub fn weight_report(runs: &[(GridEntry, Vec<MetricsRecord>)], baseline: ReportRow) -> Result<WeightReport> {
    let mut rows = runs
        .iter()
        .map(|(e, recs)| Ok(WeightRow { w: e.loss.w, row: row_of(recs)? }))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.w.total_cmp(&b.w));
    Ok(WeightReport {
        psnr_art_spread: spread(rows.iter().map(|r| r.row.psnr_art)),
        psnr_all_spread: spread(rows.iter().map(|r| r.row.psnr_all)),
        rows,
        baseline,
    })
}

impl WeightReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("w,psnr_art,ssim_art,psnr_all,ssim_all,n_slices,n_art,n_capped\n");
        let mut line = |label: String, r: &ReportRow| {
            let _ = writeln!(
                s,
                "{label},{},{},{},{},{},{},{}",
                fmt_opt(r.psnr_art, 4),
                fmt_opt(r.ssim_art, 5),
                fmt_opt(r.psnr_all, 4),
                fmt_opt(r.ssim_all, 5),
                r.n_slices,
                r.n_art,
                r.n_capped
            );
        };
        for r in &self.rows {
            line(r.w.to_string(), &r.row);
        }
        line(super::IDENTITY_ID.into(), &self.baseline);
        s
    }

    pub fn charts(&self) -> [BarDotChart; 2] {
        let categories: Vec<String> = self.rows.iter().map(|r| format!("w={}", r.w)).collect();
        let chart = |title: &str, y: &str, bar: fn(&ReportRow) -> Option<f64>, dot: fn(&ReportRow) -> Option<f64>| BarDotChart {
            title: title.into(),
            y_label: y.into(),
            categories: categories.clone(),
            bars: self.rows.iter().map(|r| bar(&r.row)).collect(),
            dots: self.rows.iter().map(|r| dot(&r.row)).collect(),
            bar_label: "artifact slices".into(),
            dot_label: "all slices".into(),
        };
        [
            chart("Masked PSNR vs body weight w", "PSNR (dB)", |r| r.psnr_art, |r| r.psnr_all),
            chart("Masked SSIM vs body weight w", "SSIM", |r| r.ssim_art, |r| r.ssim_all),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FflReport {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `psnr[i][j]` for `alphas[i]`, `betas[j]`: mean of the artifact-subset
    /// and all-slice means.
    pub psnr: Vec<Vec<Option<f64>>>,
    pub ssim: Vec<Vec<Option<f64>>>,
    /// Mean PSNR per alpha, averaged over beta.
    pub psnr_by_alpha: Vec<Option<f64>>,
    /// Whether mean PSNR strictly falls as alpha grows.
    pub alpha_decreases_psnr: bool,
    pub baseline: ReportRow,
}

fn cell(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        (x, None) | (None, x) => x,
    }
}

pub fn ffl_report(runs: &[(GridEntry, Vec<MetricsRecord>)], baseline: ReportRow) -> Result<FflReport> {
    let (alphas, betas) = (FFL_GRID.to_vec(), FFL_GRID.to_vec());
    let mut psnr = vec![vec![None; betas.len()]; alphas.len()];
    let mut ssim = psnr.clone();
    for (e, recs) in runs {
        let i = alphas.iter().position(|&a| a == e.loss.alpha);
        let j = betas.iter().position(|&b| b == e.loss.beta);
        let (Some(i), Some(j)) = (i, j) else {
            return Err(Error::invalid("grid", format!("run {} is off the FFL grid", e.name)));
        };
        let r = row_of(recs)?;
        psnr[i][j] = cell(r.psnr_art, r.psnr_all);
        ssim[i][j] = cell(r.ssim_art, r.ssim_all);
    }
    let psnr_by_alpha: Vec<Option<f64>> = psnr
        .iter()
        .map(|row| {
            let v: Option<Vec<f64>> = row.iter().copied().collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let alpha_decreases_psnr = psnr_by_alpha.windows(2).all(|w| matches!(w, [Some(a), Some(b)] if b < a));
    Ok(FflReport {
        alphas,
        betas,
        psnr,
        ssim,
        psnr_by_alpha,
        alpha_decreases_psnr,
        baseline,
    })
}

impl FflReport {
    pub fn csv(&self, values: &[Vec<Option<f64>>], digits: usize) -> String {
        let mut s = String::from("alpha\\beta");
        for b in &self.betas {
            let _ = write!(s, ",{b}");
        }
        s.push('\n');
        for (a, row) in self.alphas.iter().zip(values) {
            let _ = write!(s, "{a}");
            for v in row {
                let _ = write!(s, ",{}", fmt_opt(*v, digits));
            }
            s.push('\n');
        }
        s
    }

    pub fn heatmaps(&self) -> [Heatmap; 2] {
        let map = |title: &str, values: &Vec<Vec<Option<f64>>>| Heatmap {
            title: title.into(),
            row_title: "alpha".into(),
            col_title: "beta".into(),
            row_labels: self.alphas.iter().map(f64::to_string).collect(),
            col_labels: self.betas.iter().map(f64::to_string).collect(),
            values: values.clone(),
        };
        [map("FFL grid: mean masked PSNR (dB)", &self.psnr), map("FFL grid: mean masked SSIM", &self.ssim)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub dataset: DatasetKind,
    pub loss_spec_id: String,
    pub label: String,
    pub row: ReportRow,
    pub best_psnr: bool,
    pub best_ssim: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    /// D_Art block first, then D_All, each in grid order.
    pub rows: Vec<MatrixRow>,
    pub baseline: ReportRow,
}

fn round_to(v: f64, digits: i32) -> f64 {
    let f = 10f64.powi(digits);
    (v * f).round() / f
}

/// Index of the best row in `block` for one column.
fn best_in(block: &[&ReportRow], value: fn(&ReportRow) -> Option<f64>, digits: i32) -> Option<usize> {
    let key = |r: &ReportRow| {
        (
            value(r).map(|v| round_to(v, digits)).unwrap_or(f64::NEG_INFINITY),
            r.psnr_art.unwrap_or(f64::NEG_INFINITY),
            r.ssim_art.unwrap_or(f64::NEG_INFINITY),
        )
    };
    let mut best: Option<usize> = None;
    for (i, r) in block.iter().enumerate() {
        if value(r).is_none() {
            continue;
        }
        // strict comparison keeps the first row on a complete tie
        if best.is_none_or(|b| key(r).partial_cmp(&key(block[b])) == Some(std::cmp::Ordering::Greater)) {
            best = Some(i);
        }
    }
    best
}

const PSNR_DIGITS: i32 = 2;
const SSIM_DIGITS: i32 = 3;

pub fn loss_matrix_report(runs: &[(GridEntry, Vec<MetricsRecord>)], baseline: ReportRow) -> Result<MatrixReport> {
    let mut rows = Vec::new();
    for dataset in [DatasetKind::Art, DatasetKind::All] {
        let block: Vec<(GridEntry, ReportRow)> = runs
            .iter()
            .filter(|(e, _)| e.dataset == dataset)
            .map(|(e, recs)| Ok((e.clone(), row_of(recs)?)))
            .collect::<Result<_>>()?;
        let refs: Vec<&ReportRow> = block.iter().map(|(_, r)| r).collect();
        let bp = best_in(&refs, |r| r.psnr_art, PSNR_DIGITS);
        let bs = best_in(&refs, |r| r.ssim_art, SSIM_DIGITS);
        for (i, (e, row)) in block.into_iter().enumerate() {
            rows.push(MatrixRow {
                dataset,
                loss_spec_id: e.loss.id(),
                label: e.loss.to_string(),
                row,
                best_psnr: bp == Some(i),
                best_ssim: bs == Some(i),
            });
        }
    }
    Ok(MatrixReport { rows, baseline })
}

fn pair_text(art: Option<f64>, all: Option<f64>, digits: i32, with_all: bool) -> String {
    let d = digits as usize;
    let a = art.map(|v| format!("{v:.d$}")).unwrap_or_else(|| "n/a".into());
    if with_all {
        let b = all.map(|v| format!("{v:.d$}")).unwrap_or_else(|| "n/a".into());
        format!("{a} ({b})")
    } else {
        a
    }
}

impl MatrixReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "dataset,loss_spec,label,psnr_art,psnr_all,ssim_art,ssim_all,best_psnr,best_ssim,n_slices,n_art,n_capped\n",
        );
        let mut line = |dataset: &str, id: &str, label: &str, r: &ReportRow, bp: bool, bs: bool| {
            let _ = writeln!(
                s,
                "{dataset},{id},{label},{},{},{},{},{bp},{bs},{},{},{}",
                fmt_opt(r.psnr_art, 4),
                fmt_opt(r.psnr_all, 4),
                fmt_opt(r.ssim_art, 5),
                fmt_opt(r.ssim_all, 5),
                r.n_slices,
                r.n_art,
                r.n_capped
            );
        };
        for m in &self.rows {
            line(&m.dataset.to_string(), &m.loss_spec_id, &m.label, &m.row, m.best_psnr, m.best_ssim);
        }
        line("-", super::IDENTITY_ID, "identity (kVCT)", &self.baseline, false, false);
        s
    }

    /// Markdown table: artifact-subset means, with the all-slice means in
    /// parentheses for D_All-trained rows.
    pub fn markdown(&self) -> String {
        let mut s = String::from("| Training set | Loss | PSNR (dB) | SSIM | Identity PSNR (dB) | Identity SSIM |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        let b = &self.baseline;
        let underline = |text: String, on: bool| if on { format!("<u>{text}</u>") } else { text };
        for m in &self.rows {
            let with_all = m.dataset == DatasetKind::All;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                m.dataset,
                m.label,
                underline(pair_text(m.row.psnr_art, m.row.psnr_all, PSNR_DIGITS, with_all), m.best_psnr),
                underline(pair_text(m.row.ssim_art, m.row.ssim_all, SSIM_DIGITS, with_all), m.best_ssim),
                pair_text(b.psnr_art, b.psnr_all, PSNR_DIGITS, with_all),
                pair_text(b.ssim_art, b.ssim_all, SSIM_DIGITS, with_all),
            );
        }
        let _ = writeln!(
            s,
            "\nValues are means over test slices with artifacts; parenthesised values are means over all test slices.\n{TIE_RULE}"
        );
        s
    }
}

/// Files written by `write_report`, relative to the study directory.
pub fn write_report(dir: &Path) -> Result<Vec<String>> {
    let loaded = load(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        write_atomic(&dir.join(name), text.as_bytes())?;
        written.push(name.to_string());
        Ok(())
    };

    let mut all: Vec<MetricsRecord> = loaded.runs.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    all.extend(read_records_json(dir.join(BASELINE_DIR).join(METRICS_FILE))?);
    put(SUMMARY_CSV, report_csv(&aggregate(&all)))?;

    match loaded.plan.kind {
        StudyKind::Custom => {}
        StudyKind::WeightAblation => {
            let r = weight_report(&loaded.runs, loaded.baseline)?;
            put("weights.csv", r.csv())?;
            put("weights.json", serde_json::to_string_pretty(&r)?)?;
            let [psnr, ssim] = r.charts();
            psnr.write(&dir.join("weights_psnr"))?;
            ssim.write(&dir.join("weights_ssim"))?;
            written.extend(["weights_psnr.svg", "weights_psnr.png", "weights_ssim.svg", "weights_ssim.png"].map(String::from));
        }
        StudyKind::FflGrid => {
            let r = ffl_report(&loaded.runs, loaded.baseline)?;
            put("ffl_psnr.csv", r.csv(&r.psnr, 4))?;
            put("ffl_ssim.csv", r.csv(&r.ssim, 5))?;
            put("ffl.json", serde_json::to_string_pretty(&r)?)?;
            let [psnr, ssim] = r.heatmaps();
            psnr.write(&dir.join("ffl_psnr"))?;
            ssim.write(&dir.join("ffl_ssim"))?;
            written.extend(["ffl_psnr.svg", "ffl_psnr.png", "ffl_ssim.svg", "ffl_ssim.png"].map(String::from));
        }
        StudyKind::LossMatrix => {
            let r = loss_matrix_report(&loaded.runs, loaded.baseline)?;
            put("loss_matrix.csv", r.csv())?;
            put("loss_matrix.md", r.markdown())?;
        }
    }
    Ok(written)
}
