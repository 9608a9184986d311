use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::info;
use ndarray::{s, Array2, Array4};

use super::{apply_body_mask, classify_artifact, normalize, resample_to_grid, rigid_align, GridSpec, SlicePair};
use crate::dataio::{
    self, read_labels, read_pairs, read_volume, Catalog, CatalogEntry, LabelEntry, Modality, PairEntry, PairStack,
    Region, SliceRef, CATALOG_FILE,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PreprocessReport {
    pub catalog: Catalog,
    /// Shift applied to each patient's MVCT volume.
    pub shifts: BTreeMap<String, [i32; 3]>,
}

/// resample MVCT onto the kVCT grid -> align -> classify raw HU ->
/// normalize -> mask, for every patient in `in_dir/catalog.json`.
pub fn run_preprocess(in_dir: &Path, out_dir: &Path, max_shift: usize) -> Result<PreprocessReport> {
    let catalog = Catalog::load(in_dir.join(CATALOG_FILE))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Catalog::default();
    let mut shifts = BTreeMap::new();

    for pid in catalog.patients() {
        let kv_entry = catalog
            .entry(&pid, Modality::Kvct)
            .ok_or_else(|| Error::Missing(format!("kVCT volume for {pid}")))?;
        let mv_entry = catalog
            .entry(&pid, Modality::Mvct)
            .ok_or_else(|| Error::Missing(format!("MVCT volume for {pid}")))?;
        let label_entry = catalog
            .labels_for(&pid)
            .ok_or_else(|| Error::Missing(format!("body labels for {pid}")))?;
        let kv = read_volume(in_dir.join(&kv_entry.path))?;
        let mv_raw = read_volume(in_dir.join(&mv_entry.path))?;
        let labels = read_labels(in_dir.join(&label_entry.path))?;
        if labels.labels.dim() != kv.voxels.dim() {
            return Err(Error::Shape(format!("{pid}: labels do not match the kVCT grid")));
        }

        let mv_on_grid = resample_to_grid(&mv_raw, &GridSpec::of(&kv))?;
        let (mv, shift) = rigid_align(&mv_on_grid, &kv, max_shift)?;
        info!("{pid}: MVCT shift {shift:?}");
        shifts.insert(pid.clone(), shift);

        let n = kv.n_slices();
        let kv_flags: Vec<bool> = (0..n)
            .map(|z| classify_artifact(kv.voxels.slice(s![z, .., ..]), Modality::Kvct))
            .collect();
        let mv_flags: Vec<bool> = (0..n)
            .map(|z| classify_artifact(mv.voxels.slice(s![z, .., ..]), Modality::Mvct))
            .collect();

        let body = labels.body_mask();
        let keep: Vec<usize> = (0..n).filter(|&z| kv_entry.region_labels[z] != Region::Body).collect();
        let (_, rows, cols) = kv.voxels.dim();
        let mut data = Array4::<f32>::zeros((keep.len(), 3, rows, cols));
        for (i, &z) in keep.iter().enumerate() {
            let mask = body.slice(s![z, .., ..]).to_owned();
            let kv_n = apply_body_mask(&normalize(&kv.voxels.slice(s![z, .., ..]).mapv(f64::from), Modality::Kvct)?, &mask)?;
            let mv_n = apply_body_mask(&normalize(&mv.voxels.slice(s![z, .., ..]).mapv(f64::from), Modality::Mvct)?, &mask)?;
            data.slice_mut(s![i, 0, .., ..]).assign(&kv_n.mapv(|v| v as f32));
            data.slice_mut(s![i, 1, .., ..]).assign(&mv_n.mapv(|v| v as f32));
            data.slice_mut(s![i, 2, .., ..]).assign(&mask.mapv(|m| if m { 1.0 } else { 0.0 }));
        }

        for (vol, flags) in [(&kv, &kv_flags), (&mv, &mv_flags)] {
            let rel = format!("{pid}_{}.vol", vol.modality);
            let checksum = dataio::write_volume(vol, out_dir.join(&rel))?;
            out.entries.push(CatalogEntry {
                patient_id: pid.clone(),
                modality: vol.modality,
                path: rel,
                n_slices: n,
                region_labels: kv_entry.region_labels.clone(),
                artifact_flags: Some(flags.clone()),
                checksum,
            });
        }
        let rel = format!("{pid}_labels.vol");
        let checksum = dataio::write_labels(&labels, kv.pixel_spacing_mm, kv.slice_thickness_mm, out_dir.join(&rel))?;
        out.labels.push(LabelEntry {
            patient_id: pid.clone(),
            path: rel,
            checksum,
        });
        let rel = format!("{pid}_pairs.vol");
        let checksum = dataio::write_pairs(
            &PairStack {
                patient_id: pid.clone(),
                data,
            },
            out_dir.join(&rel),
        )?;
        out.pairs.push(PairEntry {
            patient_id: pid.clone(),
            path: rel,
            checksum,
            regions: keep.iter().map(|&z| kv_entry.region_labels[z]).collect(),
            artifact_flags: keep.iter().map(|&z| kv_flags[z]).collect(),
            slice_indices: keep,
            mv_shift: shift,
        });
    }
    out.save(out_dir.join(CATALOG_FILE))?;
    Ok(PreprocessReport { catalog: out, shifts })
}

/// Loads the referenced slice pairs from a preprocessed data directory,
/// preserving the order of `refs`.
pub fn load_pairs(data_dir: &Path, catalog: &Catalog, refs: &[SliceRef]) -> Result<Vec<SlicePair>> {
    let mut stacks: BTreeMap<&str, (PairStack, &PairEntry)> = BTreeMap::new();
    let mut out = Vec::with_capacity(refs.len());
    for r in refs {
        if !stacks.contains_key(r.patient_id.as_str()) {
            let entry = catalog
                .pairs_for(&r.patient_id)
                .ok_or_else(|| Error::Missing(format!("preprocessed pairs for {}", r.patient_id)))?;
            stacks.insert(r.patient_id.as_str(), (read_pairs(data_dir.join(&entry.path))?, entry));
        }
        let (stack, entry) = &stacks[r.patient_id.as_str()];
        let i = entry
            .slice_indices
            .iter()
            .position(|&z| z == r.slice_index)
            .ok_or_else(|| Error::Missing(format!("{} slice {} not in pair stack", r.patient_id, r.slice_index)))?;
        let pick = |c: usize| -> Array2<f32> { stack.data.slice(s![i, c, .., ..]).to_owned() };
        out.push(SlicePair {
            kv: pick(0),
            mv: pick(1),
            body_mask: pick(2).mapv(|v| v > 0.5),
            region: entry.regions[i],
            is_artifact: entry.artifact_flags[i],
            patient_id: r.patient_id.clone(),
            slice_index: r.slice_index,
        });
    }
    Ok(out)
}
