//! On-disk volume container, dataset catalog and patient-level splits.
//!
//! Every file is a single-line JSON header terminated by `\n`, followed by a
//! raw little-endian payload in slice-major, row-major order. The header
//! carries a CRC32 of the payload.

mod catalog;
mod split;

pub use catalog::{resolve, Catalog, CatalogEntry, LabelEntry, PairEntry, CATALOG_FILE};
pub use split::{build_datasets, split_by_patient, DatasetKind, Datasets, SliceRef, Split, SplitAssignment};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HU_MIN: i16 = -1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "kVCT")]
    Kvct,
    #[serde(rename = "MVCT")]
    Mvct,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Kvct => "kVCT",
            Modality::Mvct => "MVCT",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Head,
    Neck,
    Body,
}

/// A patient's CT stack in Hounsfield units, `[n_slices, rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HUVolume {
    pub patient_id: String,
    pub modality: Modality,
    pub voxels: Array3<i16>,
    /// (row, column) spacing in millimetres.
    pub pixel_spacing_mm: [f64; 2],
    pub slice_thickness_mm: f64,
}

impl HUVolume {
    pub fn n_slices(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn validate(&self) -> Result<()> {
        let (n, r, c) = self.voxels.dim();
        if n == 0 || r == 0 || c == 0 {
            return Err(Error::invalid("voxels", "volume has an empty dimension"));
        }
        if self.pixel_spacing_mm.iter().any(|&s| !(s > 0.0)) || !(self.slice_thickness_mm > 0.0) {
            return Err(Error::invalid("spacing", "spacing and thickness must be positive"));
        }
        if self.voxels.iter().any(|&v| v < HU_MIN) {
            return Err(Error::invalid("voxels", format!("HU below {HU_MIN}")));
        }
        Ok(())
    }
}

/// Per-voxel labels: 0 background, 1 body, 2 metal implant (inside body).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub patient_id: String,
    pub labels: Array3<u8>,
}

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_BODY: u8 = 1;
pub const LABEL_IMPLANT: u8 = 2;

impl LabelVolume {
    pub fn from_masks(patient_id: &str, body: &Array3<bool>, implant: &Array3<bool>) -> Self {
        let mut labels = body.mapv(|b| if b { LABEL_BODY } else { LABEL_BACKGROUND });
        ndarray::Zip::from(&mut labels).and(implant).for_each(|l, &m| {
            if m {
                *l = LABEL_IMPLANT;
            }
        });
        LabelVolume {
            patient_id: patient_id.to_string(),
            labels,
        }
    }

    pub fn body_mask(&self) -> Array3<bool> {
        self.labels.mapv(|l| l != LABEL_BACKGROUND)
    }

    pub fn implant_mask(&self) -> Array3<bool> {
        self.labels.mapv(|l| l == LABEL_IMPLANT)
    }
}

/// Preprocessed slice pairs of one patient, `[n, 3, d, d]` with channels
/// (kVCT, MVCT, body mask as 0/1), all in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStack {
    pub patient_id: String,
    pub data: Array4<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    patient_id: String,
    modality: String,
    dims: Vec<usize>,
    spacing_mm: [f64; 2],
    thickness_mm: f64,
    dtype: String,
    crc32: u32,
}

const DTYPE_I16: &str = "int16-le";
const DTYPE_U8: &str = "uint8";
const DTYPE_F32: &str = "float32-le";

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        DTYPE_I16 => Some(2),
        DTYPE_U8 => Some(1),
        DTYPE_F32 => Some(4),
        _ => None,
    }
}

fn write_container(path: &Path, mut header: Header, payload: &[u8]) -> Result<u32> {
    let checksum = crc32fast::hash(payload);
    header.crc32 = checksum;
    let mut line = serde_json::to_vec(&header)?;
    line.push(b'\n');
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&line)
        .and_then(|_| file.write_all(payload))
        .map_err(|e| Error::io(path, e))?;
    Ok(checksum)
}

fn read_container(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format {
        path: path.into(),
        reason: "missing header terminator".into(),
    })?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Format {
        path: path.into(),
        reason: format!("bad header: {e}"),
    })?;
    let size = dtype_size(&header.dtype).ok_or_else(|| Error::Format {
        path: path.into(),
        reason: format!("unknown dtype {:?}", header.dtype),
    })?;
    let payload = bytes[split + 1..].to_vec();
    let expected = header.dims.iter().product::<usize>() * size;
    if payload.len() != expected {
        return Err(Error::Corruption {
            path: path.into(),
            reason: format!("expected {expected} payload bytes, found {}", payload.len()),
        });
    }
    let actual = crc32fast::hash(&payload);
    if actual != header.crc32 {
        return Err(Error::Corruption {
            path: path.into(),
            reason: format!("checksum mismatch: header {:08x}, payload {actual:08x}", header.crc32),
        });
    }
    Ok((header, payload))
}

fn dims3(path: &Path, dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [n, r, c] => Ok((n, r, c)),
        _ => Err(Error::Format {
            path: path.into(),
            reason: format!("expected 3 dims, found {}", dims.len()),
        }),
    }
}

/// Writes `vol` and returns the payload CRC32.
pub fn write_volume(vol: &HUVolume, path: impl AsRef<Path>) -> Result<u32> {
    let payload: Vec<u8> = vol.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = Header {
        patient_id: vol.patient_id.clone(),
        modality: vol.modality.as_str().into(),
        dims: vol.voxels.shape().to_vec(),
        spacing_mm: vol.pixel_spacing_mm,
        thickness_mm: vol.slice_thickness_mm,
        dtype: DTYPE_I16.into(),
        crc32: 0,
    };
    write_container(path.as_ref(), header, &payload)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<HUVolume> {
    let path = path.as_ref();
    let (header, payload) = read_container(path)?;
    let modality = match header.modality.as_str() {
        "kVCT" => Modality::Kvct,
        "MVCT" => Modality::Mvct,
        other => {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("not a CT volume: modality {other:?}"),
            })
        }
    };
    if header.dtype != DTYPE_I16 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("CT volumes are {DTYPE_I16}, found {}", header.dtype),
        });
    }
    let dims = dims3(path, &header.dims)?;
    let voxels: Vec<i16> = payload
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    Ok(HUVolume {
        patient_id: header.patient_id,
        modality,
        voxels: Array3::from_shape_vec(dims, voxels).expect("length checked against dims"),
        pixel_spacing_mm: header.spacing_mm,
        slice_thickness_mm: header.thickness_mm,
    })
}

pub fn write_labels(labels: &LabelVolume, spacing_mm: [f64; 2], thickness_mm: f64, path: impl AsRef<Path>) -> Result<u32> {
    let header = Header {
        patient_id: labels.patient_id.clone(),
        modality: "labels".into(),
        dims: labels.labels.shape().to_vec(),
        spacing_mm,
        thickness_mm,
        dtype: DTYPE_U8.into(),
        crc32: 0,
    };
    let payload: Vec<u8> = labels.labels.iter().copied().collect();
    write_container(path.as_ref(), header, &payload)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let (header, payload) = read_container(path)?;
    if header.dtype != DTYPE_U8 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("label volumes are {DTYPE_U8}, found {}", header.dtype),
        });
    }
    let dims = dims3(path, &header.dims)?;
    Ok(LabelVolume {
        patient_id: header.patient_id,
        labels: Array3::from_shape_vec(dims, payload).expect("length checked against dims"),
    })
}

pub fn write_pairs(stack: &PairStack, path: impl AsRef<Path>) -> Result<u32> {
    let header = Header {
        patient_id: stack.patient_id.clone(),
        modality: "pairs".into(),
        dims: stack.data.shape().to_vec(),
        spacing_mm: [1.0, 1.0],
        thickness_mm: 1.0,
        dtype: DTYPE_F32.into(),
        crc32: 0,
    };
    let payload: Vec<u8> = stack.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_container(path.as_ref(), header, &payload)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<PairStack> {
    let path = path.as_ref();
    let (header, payload) = read_container(path)?;
    if header.dtype != DTYPE_F32 || header.dims.len() != 4 || header.dims[1] != 3 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("not a slice-pair stack: dtype {} dims {:?}", header.dtype, header.dims),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let d = &header.dims;
    Ok(PairStack {
        patient_id: header.patient_id,
        data: Array4::from_shape_vec((d[0], d[1], d[2], d[3]), values).expect("length checked against dims"),
    })
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
