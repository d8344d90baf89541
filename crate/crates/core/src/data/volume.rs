use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::{Error, Result};

use super::SliceSample;

/// A 3D scan. Voxels are indexed `[x, y, z]`; axial planes are `z` slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    /// Voxel size in millimetres along x, y, z.
    pub spacing: [f64; 3],
    pub subject_id: String,
    pub center_id: String,
}

/// Acquisition resolutions observed in the multi-center gray-matter data.
const IN_PLANE_MM: std::ops::RangeInclusive<f64> = 0.25..=0.5;
const THROUGH_PLANE_MM: std::ops::RangeInclusive<f64> = 2.5..=5.0;

impl Volume {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    /// True when the spacing lies inside the range of the reference MRI dataset.
    pub fn has_expected_spacing(&self) -> bool {
        IN_PLANE_MM.contains(&self.spacing[0])
            && IN_PLANE_MM.contains(&self.spacing[1])
            && THROUGH_PLANE_MM.contains(&self.spacing[2])
    }
}

/// Subject ids look like `site1-sc01`; the part before the first `-` is the center.
pub fn center_of(subject_id: &str) -> String {
    subject_id.split_once('-').map_or(subject_id, |(c, _)| c).to_string()
}

/// Read a NIfTI-1 volume (`.nii` or `.nii.gz`).
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let obj = ReaderOptions::new().read_file(path).map_err(|e| Error::ingestion(path, e))?;
    let header = obj.header().clone();
    let data = obj.into_volume().into_ndarray::<f32>().map_err(|e| Error::ingestion(path, e))?;
    let data = match data.ndim() {
        3 => data,
        4 if data.shape()[3] == 1 => data.index_axis_move(ndarray::Axis(3), 0),
        n => return Err(Error::ingestion(path, format!("expected a 3D volume, found {n} dimensions"))),
    };
    let voxels = data
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::ingestion(path, e))?
        .as_standard_layout()
        .into_owned();
    let spacing = [header.pixdim[1] as f64, header.pixdim[2] as f64, header.pixdim[3] as f64];
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::ingestion(path, format!("non-positive voxel spacing {spacing:?}")));
    }
    if voxels.iter().any(|v| !v.is_finite()) {
        return Err(Error::ingestion(path, "volume contains non-finite values"));
    }
    let subject_id = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let center_id = center_of(&subject_id);
    Ok(Volume { voxels, spacing, subject_id, center_id })
}

/// Write a volume as float32 NIfTI-1; gzip-compressed when the path ends in `.gz`.
pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0, v.spacing[0] as f32, v.spacing[1] as f32, v.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    header.xyzt_units = 2; // millimetres
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&v.voxels)
        .map_err(|e| Error::ingestion(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Bilinear,
    Nearest,
}

fn resample_plane(plane: ArrayView2<f32>, out: (usize, usize), mode: Resample) -> Array2<f32> {
    let (nx, ny) = plane.dim();
    let (ox, oy) = out;
    let (fx, fy) = (nx as f64 / ox as f64, ny as f64 / oy as f64);
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    Array2::from_shape_fn(out, |(i, j)| {
        let sx = clamp((i as f64 + 0.5) * fx - 0.5, nx);
        let sy = clamp((j as f64 + 0.5) * fy - 0.5, ny);
        match mode {
            Resample::Nearest => plane[[sx.round() as usize, sy.round() as usize]],
            Resample::Bilinear => {
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1));
                let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
                let v = |x: usize, y: usize| plane[[x, y]] as f64;
                ((1.0 - tx) * ((1.0 - ty) * v(x0, y0) + ty * v(x0, y1)) + tx * ((1.0 - ty) * v(x1, y0) + ty * v(x1, y1)))
                    as f32
            }
        }
    })
}

/// Resample every axial plane to the target in-plane spacing; the through-plane
/// axis is left untouched.
pub fn resample_inplane(v: &Volume, target: (f64, f64), mode: Resample) -> Result<Volume> {
    if !(target.0 > 0.0 && target.1 > 0.0) {
        return Err(Error::config("target spacing must be positive"));
    }
    if v.spacing[0] <= 0.0 || v.spacing[1] <= 0.0 {
        return Err(Error::contract("volume spacing must be positive"));
    }
    if (v.spacing[0] - target.0).abs() < 1e-9 && (v.spacing[1] - target.1).abs() < 1e-9 {
        return Ok(v.clone());
    }
    let (nx, ny, nz) = v.dims();
    let ox = ((nx as f64 * v.spacing[0] / target.0).round() as usize).max(1);
    let oy = ((ny as f64 * v.spacing[1] / target.1).round() as usize).max(1);
    let mut voxels = Array3::<f32>::zeros((ox, oy, nz));
    for z in 0..nz {
        let plane = resample_plane(v.voxels.slice(s![.., .., z]), (ox, oy), mode);
        voxels.slice_mut(s![.., .., z]).assign(&plane);
    }
    Ok(Volume { voxels, spacing: [target.0, target.1, v.spacing[2]], ..v.clone() })
}

/// Zero-mean, unit-variance standardization. Constant slices become all zeros.
pub fn standardize(a: &mut Array2<f32>) -> bool {
    let n = a.len() as f64;
    let mean = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = a.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-12 {
        a.fill(0.0);
        return false;
    }
    let inv = 1.0 / var.sqrt();
    a.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
    true
}

/// One standardized sample per axial plane; `mask`, when given, must have the
/// same shape and is binarized at 0.5.
pub fn extract_slices(image: &Volume, mask: Option<&Volume>) -> Result<Vec<SliceSample>> {
    if let Some(m) = mask {
        if m.dims() != image.dims() {
            return Err(Error::contract(format!(
                "mask shape {:?} differs from image shape {:?} for {}",
                m.dims(),
                image.dims(),
                image.subject_id
            )));
        }
    }
    let nz = image.dims().2;
    let mut out = Vec::with_capacity(nz);
    for z in 0..nz {
        let mut img = image.voxels.slice(s![.., .., z]).to_owned();
        if !standardize(&mut img) {
            log::warn!("{}: axial slice {z} has zero variance, standardized to zeros", image.subject_id);
        }
        let m = mask.map(|m| m.voxels.slice(s![.., .., z]).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }));
        out.push(SliceSample { image: img, mask: m, subject_id: image.subject_id.clone() });
    }
    Ok(out)
}

/// Center crop and/or zero-pad to `(h, w)`.
pub fn center_fit(a: ArrayView2<f32>, (h, w): (usize, usize)) -> Array2<f32> {
    let (ah, aw) = a.dim();
    let mut out = Array2::zeros((h, w));
    let (cy, cx) = (ah.min(h), aw.min(w));
    let (sy, sx) = ((ah - cy) / 2, (aw - cx) / 2);
    let (dy, dx) = ((h - cy) / 2, (w - cx) / 2);
    out.slice_mut(s![dy..dy + cy, dx..dx + cx]).assign(&a.slice(s![sy..sy + cy, sx..sx + cx]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(nx: usize, ny: usize, nz: usize, spacing: [f64; 3]) -> Volume {
        Volume {
            voxels: Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| (x * 3 + y * 5 + z) as f32 * 0.1),
            spacing,
            subject_id: "site1-sc01".into(),
            center_id: "site1".into(),
        }
    }

    #[test]
    fn nifti_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["image.nii", "image.nii.gz"] {
            let sub = dir.path().join("site2-sc07");
            std::fs::create_dir_all(&sub).unwrap();
            let path = sub.join(name);
            let v = vol(6, 5, 3, [0.5, 0.5, 2.5]);
            write_volume(&path, &v).unwrap();
            let back = load_volume(&path).unwrap();
            assert_eq!(back.voxels, v.voxels);
            assert_eq!(back.spacing, [0.5, 0.5, 2.5]);
            assert_eq!(back.subject_id, "site2-sc07");
            assert_eq!(back.center_id, "site2");
            assert!(back.has_expected_spacing());
        }
    }

    #[test]
    fn truncated_file_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("image.nii");
        write_volume(&path, &vol(6, 5, 3, [0.5, 0.5, 2.5])).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..200]).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
        assert!(err.to_string().contains("image.nii"));
        assert!(matches!(load_volume(dir.path().join("missing.nii")), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn resample_identity_and_doubling() {
        let v = vol(10, 8, 2, [0.25, 0.25, 3.0]);
        assert_eq!(resample_inplane(&v, (0.25, 0.25), Resample::Bilinear).unwrap(), v);
        let coarse = vol(10, 7, 2, [0.5, 0.5, 3.0]);
        let fine = resample_inplane(&coarse, (0.25, 0.25), Resample::Bilinear).unwrap();
        let (x, y, z) = fine.dims();
        assert!(x.abs_diff(20) <= 1 && y.abs_diff(14) <= 1 && z == 2);
        assert_eq!(fine.spacing, [0.25, 0.25, 3.0]);
        assert!(resample_inplane(&coarse, (0.0, 0.25), Resample::Bilinear).is_err());
    }

    #[test]
    fn resampled_mask_stays_binary() {
        let mut m = vol(9, 9, 1, [0.5, 0.5, 2.5]);
        m.voxels.mapv_inplace(|v| if v > 2.0 { 1.0 } else { 0.0 });
        let r = resample_inplane(&m, (0.25, 0.25), Resample::Nearest).unwrap();
        assert!(r.voxels.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn slices_are_standardized() {
        let mut v = vol(8, 8, 3, [0.25, 0.25, 2.5]);
        v.voxels.slice_mut(s![.., .., 1]).fill(4.0);
        let slices = extract_slices(&v, None).unwrap();
        assert_eq!(slices.len(), 3);
        for (k, s) in slices.iter().enumerate() {
            assert!(!s.labeled());
            let n = s.image.len() as f64;
            let mean = s.image.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = s.image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            if k == 1 {
                assert!(s.image.iter().all(|&v| v == 0.0));
            } else {
                assert!((var.sqrt() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn center_fit_crops_and_pads() {
        let a = Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f32);
        let c = center_fit(a.view(), (2, 2));
        assert_eq!(c, ndarray::arr2(&[[8.0, 9.0], [14.0, 15.0]]));
        let p = center_fit(a.view(), (6, 6));
        assert_eq!(p.row(0).sum(), 0.0);
        assert_eq!(p[[1, 0]], 0.0);
    }
}
