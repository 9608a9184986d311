//! Reconstruction panel: one slice seen by several trained models, on a
//! shared grayscale window.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::DataSource;
use crate::dataio::{write_atomic, DatasetKind, Split};
use crate::error::{Error, Result};
use crate::metrics::{masked_psnr, masked_ssim};
use crate::preprocess::SlicePair;
use crate::trainer::{load_checkpoint, predict, RunConfig, BEST_CHECKPOINT, CONFIG_FILE};

/// Display window in normalised units, shared by every cell.
pub const WINDOW: (f32, f32) = (-1.0, 1.0);
const GAP: u32 = 4;
const CELL_PX: usize = 192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SliceSelector {
    /// First test slice with artifacts, else the first test slice.
    FirstArtifact,
    Slice { patient_id: String, slice_index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub row: usize,
    pub col: usize,
    pub label: String,
    pub missing: bool,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Against the MVCT, for prediction cells only.
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelOutput {
    pub patient_id: String,
    pub slice_index: usize,
    pub rows: usize,
    pub cols: usize,
    pub width: u32,
    pub height: u32,
    pub window: (f32, f32),
    pub cells: Vec<CellStats>,
}

fn select(data: &mut DataSource, selector: &SliceSelector) -> Result<SlicePair> {
    let test = data.pairs(DatasetKind::All, Split::Test)?;
    let found = match selector {
        SliceSelector::FirstArtifact => test.iter().find(|p| p.is_artifact).or(test.first()),
        SliceSelector::Slice {
            patient_id,
            slice_index,
        } => test
            .iter()
            .find(|p| &p.patient_id == patient_id && p.slice_index == *slice_index),
    };
    found
        .cloned()
        .ok_or_else(|| Error::Missing(format!("no test slice matches {selector:?}")))
}

fn stats(row: usize, col: usize, label: String, img: &Array2<f32>, gt: Option<&SlicePair>) -> Result<CellStats> {
    let n = img.len() as f64;
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let (psnr_db, ssim) = match gt {
        Some(p) => {
            let (a, b) = (img.mapv(|v| v as f64), p.mv.mapv(|v| v as f64));
            (
                Some(masked_psnr(&a, &b, &p.body_mask, 2.0)?.db),
                Some(masked_ssim(&a, &b, &p.body_mask)?),
            )
        }
        None => (None, None),
    };
    Ok(CellStats {
        row,
        col,
        label,
        missing: false,
        mean: Some(mean),
        std: Some(var.sqrt()),
        min: img.iter().map(|&v| v as f64).reduce(f64::min),
        max: img.iter().map(|&v| v as f64).reduce(f64::max),
        psnr_db,
        ssim,
    })
}

fn missing(row: usize, col: usize, label: String) -> CellStats {
    CellStats {
        row,
        col,
        label,
        missing: true,
        mean: None,
        std: None,
        min: None,
        max: None,
        psnr_db: None,
        ssim: None,
    }
}

fn gray(v: f32) -> u8 {
    let t = (v - WINDOW.0) / (WINDOW.1 - WINDOW.0);
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

/// Row 0 holds the kVCT input and the MVCT target; each further row holds
/// one run's prediction and its absolute error against the MVCT, drawn as
/// `|pred - mv| - 1` so zero error is black in the shared window. A run
/// without a loadable best checkpoint gets a hatched "missing" row.
pub fn render_reconstruction_panel(
    run_dirs: &[PathBuf],
    data: &mut DataSource,
    selector: &SliceSelector,
    out_png: &Path,
) -> Result<PanelOutput> {
    if run_dirs.is_empty() {
        return Err(Error::invalid("run_dirs", "need at least one run directory"));
    }
    let pair = select(data, selector)?;
    let (h, w) = pair.kv.dim();
    let zoom = (CELL_PX / h.max(w)).max(1) as u32;
    let (cw, ch) = (w as u32 * zoom, h as u32 * zoom);
    let rows = 1 + run_dirs.len();
    let cols = 2;
    let width = cols as u32 * cw + (cols as u32 + 1) * GAP;
    let height = rows as u32 * ch + (rows as u32 + 1) * GAP;
    let mut img = GrayImage::from_pixel(width, height, Luma([255]));
    let origin = |r: usize, c: usize| (GAP + c as u32 * (cw + GAP), GAP + r as u32 * (ch + GAP));

    let mut draw = |r: usize, c: usize, a: Option<&Array2<f32>>| {
        let (x0, y0) = origin(r, c);
        for y in 0..ch {
            for x in 0..cw {
                let v = match a {
                    Some(a) => gray(a[[(y / zoom) as usize, (x / zoom) as usize]]),
                    // diagonal hatching marks a missing prediction
                    None if (x + y) / 6 % 2 == 0 => 90,
                    None => 170,
                };
                img.put_pixel(x0 + x, y0 + y, Luma([v]));
            }
        }
    };

    let mut cells = vec![
        stats(0, 0, "kVCT".into(), &pair.kv, None)?,
        stats(0, 1, "MVCT".into(), &pair.mv, None)?,
    ];
    draw(0, 0, Some(&pair.kv));
    draw(0, 1, Some(&pair.mv));

    for (i, dir) in run_dirs.iter().enumerate() {
        let r = i + 1;
        let label = run_label(dir);
        let loaded = RunConfig::load(dir.join(CONFIG_FILE))
            .and_then(|cfg| load_checkpoint(dir.join(BEST_CHECKPOINT), Some(&cfg.model)));
        let pred = loaded.and_then(|ck| predict(&ck.params, std::slice::from_ref(&pair), 1));
        match pred {
            Ok(mut p) => {
                let p = p.remove(0);
                let err = ndarray::Zip::from(&p).and(&pair.mv).map_collect(|&a, &b| (a - b).abs() - 1.0);
                cells.push(stats(r, 0, label.clone(), &p, Some(&pair))?);
                cells.push(stats(r, 1, format!("{label} |error|"), &err, None)?);
                draw(r, 0, Some(&p));
                draw(r, 1, Some(&err));
            }
            Err(e) => {
                warn!("panel row {r} ({label}) missing: {e}");
                cells.push(missing(r, 0, label.clone()));
                cells.push(missing(r, 1, format!("{label} |error|")));
                draw(r, 0, None);
                draw(r, 1, None);
            }
        }
    }

    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(out_png, &bytes)?;
    let out = PanelOutput {
        patient_id: pair.patient_id.clone(),
        slice_index: pair.slice_index,
        rows,
        cols,
        width,
        height,
        window: WINDOW,
        cells,
    };
    write_atomic(&out_png.with_extension("json"), serde_json::to_string_pretty(&out)?.as_bytes())?;
    Ok(out)
}
