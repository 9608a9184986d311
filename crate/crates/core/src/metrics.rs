//! Image quality restricted to the body: masked PSNR and SSIM, and the
//! per-run aggregation used by every report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_atomic, DatasetKind, Split};
use crate::error::{Error, Result};
use crate::losses::ssim::ssim_map;

/// Value reported when prediction and target agree on every mask pixel.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the masked MSE is zero and `db` is the cap.
    pub identical: bool,
}

fn mask_count(pred: &Array2<f64>, gt: &Array2<f64>, mask: &Array2<bool>) -> Result<usize> {
    if pred.dim() != gt.dim() || mask.dim() != pred.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?}, target {:?}, mask {:?}",
            pred.dim(),
            gt.dim(),
            mask.dim()
        )));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::EmptyMask("metric needs at least one body pixel".into())),
        n => Ok(n),
    }
}

/// `10 log10(range^2 / MSE)` with the MSE taken over mask pixels only.
pub fn masked_psnr(pred: &Array2<f64>, gt: &Array2<f64>, mask: &Array2<bool>, data_range: f64) -> Result<Psnr> {
    let n = mask_count(pred, gt, mask)?;
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range", "must be positive"));
    }
    let sse: f64 = pred
        .iter()
        .zip(gt.iter())
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|((p, t), _)| (p - t) * (p - t))
        .sum();
    if sse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP_DB,
            identical: true,
        });
    }
    Ok(Psnr {
        db: 10.0 * (data_range * data_range / (sse / n as f64)).log10(),
        identical: false,
    })
}

/// SSIM map over the whole slice, averaged over mask pixels.
pub fn masked_ssim(pred: &Array2<f64>, gt: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    let n = mask_count(pred, gt, mask)?;
    let map = ssim_map(pred, gt)?;
    let s: f64 = map.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(s / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub patient_id: String,
    pub slice_index: usize,
    pub is_artifact: bool,
    pub psnr_db: f64,
    /// PSNR hit the cap because prediction equals target on the mask.
    pub identical: bool,
    pub ssim: f64,
    /// Dataset the evaluated model was trained on.
    pub dataset_tag: DatasetKind,
    pub split: Split,
    pub loss_spec_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub loss_spec_id: String,
    pub dataset: DatasetKind,
    /// Means over artifact slices; `None` when there are none.
    pub psnr_art: Option<f64>,
    pub ssim_art: Option<f64>,
    /// Means over all slices.
    pub psnr_all: Option<f64>,
    pub ssim_all: Option<f64>,
    pub n_slices: usize,
    pub n_art: usize,
    /// Slices left out of the PSNR means because they hit the cap.
    pub n_capped: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// One row per (loss spec, training dataset), sorted by that key. Capped
/// PSNR values are excluded from PSNR means and counted in `n_capped`;
/// SSIM means use every slice.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, DatasetKind), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.loss_spec_id.clone(), r.dataset_tag)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((loss_spec_id, dataset), rs)| {
            let art = || rs.iter().filter(|r| r.is_artifact);
            ReportRow {
                psnr_art: mean(art().filter(|r| !r.identical).map(|r| r.psnr_db)),
                ssim_art: mean(art().map(|r| r.ssim)),
                psnr_all: mean(rs.iter().filter(|r| !r.identical).map(|r| r.psnr_db)),
                ssim_all: mean(rs.iter().map(|r| r.ssim)),
                n_slices: rs.len(),
                n_art: art().count(),
                n_capped: rs.iter().filter(|r| r.identical).count(),
                loss_spec_id,
                dataset,
            }
        })
        .collect()
}

pub(crate) fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

pub const REPORT_HEADER: &str = "loss_spec,dataset,psnr_art,ssim_art,psnr_all,ssim_all,n_slices,n_art,n_capped";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.loss_spec_id,
            r.dataset,
            fmt_opt(r.psnr_art, 4),
            fmt_opt(r.ssim_art, 5),
            fmt_opt(r.psnr_all, 4),
            fmt_opt(r.ssim_all, 5),
            r.n_slices,
            r.n_art,
            r.n_capped
        );
    }
    s
}

pub fn write_report_csv(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), report_csv(rows).as_bytes())
}

pub fn write_records_json(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), serde_json::to_string_pretty(records)?.as_bytes())
}

pub fn read_records_json(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
