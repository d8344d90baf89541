//! Input perturbations and delayed spatial alignment.
//!
//! The student sees `noise(rotate(x))`. The teacher sees `noise'(x)` with an
//! independent noise draw and no rotation; its *prediction* is rotated
//! afterwards with the student's angle, so both prediction maps are
//! pixel-aligned when the consistency loss compares them. Ground-truth masks
//! are rotated with the same angle (nearest neighbour) for the Dice loss.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Real, Result};

/// How the configured noise magnitude is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// `noise` is the variance σ² (so 0.01 means σ = 0.1).
    #[default]
    Variance,
    /// `noise` is the standard deviation σ.
    Std,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation angles are drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub noise: f64,
    pub noise_kind: NoiseKind,
    /// Exclude pixels rotated in from outside the image from the consistency loss.
    pub mask_border: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotation_deg: 4.5, noise: 0.01, noise_kind: NoiseKind::Variance, mask_border: false }
    }
}

impl AugmentConfig {
    pub fn noise_std(&self) -> f64 {
        match self.noise_kind {
            NoiseKind::Variance => self.noise.sqrt(),
            NoiseKind::Std => self.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_deg >= 0.0 && self.rotation_deg < 180.0) {
            return Err(Error::config("augment.rotation_deg must be in [0, 180)"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("augment.noise must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelParams {
    pub noise_std: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub spatial: SpatialParams,
    pub pixel: PixelParams,
}

impl AugmentationParams {
    pub fn identity() -> Self {
        AugmentationParams {
            spatial: SpatialParams { rotation_deg: 0.0 },
            pixel: PixelParams { noise_std: 0.0, noise_seed: 0 },
        }
    }
}

/// Interpolation used by [`apply_spatial`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    /// Bilinear; images and probability maps.
    Continuous,
    /// Nearest neighbour; binary masks.
    Nearest,
}

pub fn sample_pixel_params<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> PixelParams {
    PixelParams { noise_std: cfg.noise_std(), noise_seed: rng.gen() }
}

/// Draw the student's parameters for one sample.
pub fn sample_params<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> AugmentationParams {
    let b = cfg.rotation_deg;
    let rotation_deg = if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    AugmentationParams { spatial: SpatialParams { rotation_deg }, pixel: sample_pixel_params(rng, cfg) }
}

/// Rotate about the grid centre. Samples falling outside the grid read as 0.
pub fn apply_spatial<T: Real>(map: ArrayView2<T>, params: &SpatialParams, mode: Interp) -> Array2<T> {
    if params.rotation_deg == 0.0 {
        return map.to_owned();
    }
    let (h, w) = map.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            map[[y as usize, x as usize]].f64()
        }
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (dy, dx) = (i as f64 - cy, j as f64 - cx);
        // inverse rotation: where does output pixel (i, j) come from
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let v = match mode {
            Interp::Nearest => at(sy.round() as isize, sx.round() as isize),
            Interp::Continuous => {
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
            }
        };
        T::of(v)
    })
}

/// Add i.i.d. Gaussian noise drawn from `params.noise_seed`.
pub fn add_noise<T: Real>(map: ArrayView2<T>, params: &PixelParams) -> Array2<T> {
    let mut out = map.to_owned();
    if params.noise_std > 0.0 {
        let mut r = rng::stream(params.noise_seed, &[]);
        let dist = Normal::new(0.0, params.noise_std).unwrap();
        out.iter_mut().for_each(|v| *v += T::of(dist.sample(&mut r)));
    }
    out
}

/// Student input: rotation first, then pixel noise.
pub fn student_view<T: Real>(x: ArrayView2<T>, params: &AugmentationParams) -> Array2<T> {
    let rotated = apply_spatial(x, &params.spatial, Interp::Continuous);
    add_noise(rotated.view(), &params.pixel)
}

/// Teacher input: pixel noise only.
pub fn teacher_view<T: Real>(x: ArrayView2<T>, pixel: &PixelParams) -> Array2<T> {
    add_noise(x, pixel)
}

/// Rotate the teacher's prediction with the student's spatial parameters,
/// clamping the interpolated probabilities to `[0, 1]`.
pub fn align_teacher_prediction<T: Real>(teacher_pred: ArrayView2<T>, spatial: &SpatialParams) -> Array2<T> {
    let mut out = apply_spatial(teacher_pred, spatial, Interp::Continuous);
    out.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
    out
}

/// Nearest-neighbour rotation of a binary mask with the student's parameters.
pub fn align_ground_truth<T: Real>(mask: ArrayView2<T>, spatial: &SpatialParams) -> Array2<T> {
    apply_spatial(mask, spatial, Interp::Nearest)
}

/// 1 where the rotated grid reads only in-bounds source pixels, else 0.
pub fn valid_region<T: Real>(h: usize, w: usize, spatial: &SpatialParams) -> Array2<T> {
    let ones = Array2::<f64>::ones((h, w));
    apply_spatial(ones.view(), spatial, Interp::Continuous)
        .mapv(|v| if v >= 1.0 - 1e-9 { T::one() } else { T::zero() })
}
