//! Synthetic cross-sections: a bright elliptical cord holding a darker
//! butterfly (two mirrored lobes joined by a thin commissure). The butterfly
//! is the foreground.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

use super::{SliceSample, SplitData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
    pub size: usize,
    /// Standard deviation of the additive background noise.
    pub noise_std: f64,
    /// Number of bright/dark distractor blobs outside the cord (upper bound).
    pub distractors: usize,
    /// Largest cord-centre offset from the slice centre, in pixels at 64x64.
    pub max_shift: f64,
    /// Relative size jitter: scale is drawn from `1 ± scale_jitter`.
    pub scale_jitter: f64,
    /// Range of the relative darkening of the butterfly against the cord.
    pub contrast: [f64; 2],
    /// Number of simulated acquisition centers. Each slice comes from a
    /// uniformly drawn center whose style (noise level, blur, contrast,
    /// intensity curve) is fixed by the dataset seed. 0 disables styles.
    pub centers: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            labeled: 8,
            unlabeled: 200,
            validation: 50,
            test: 50,
            size: 64,
            noise_std: 0.12,
            distractors: 3,
            max_shift: 4.0,
            scale_jitter: 0.15,
            contrast: [0.35, 0.55],
            centers: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::config("synthetic slice size must be at least 16"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("synthetic noise_std must be finite and non-negative"));
        }
        if !(0.0..=8.0).contains(&self.max_shift) {
            return Err(Error::config("synthetic max_shift must be in [0, 8]"));
        }
        if !(0.0..0.5).contains(&self.scale_jitter) {
            return Err(Error::config("synthetic scale_jitter must be in [0, 0.5)"));
        }
        let [lo, hi] = self.contrast;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::config("synthetic contrast must satisfy 0 < lo <= hi < 1"));
        }
        if self.labeled == 0 {
            return Err(Error::config("synthetic dataset needs at least one labeled slice"));
        }
        Ok(())
    }
}

/// Pool tags used to key the generator streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Pool {
    Labeled = 0,
    Unlabeled = 1,
    Validation = 2,
    Test = 3,
}

impl Pool {
    fn name(self) -> &'static str {
        ["labeled", "unlabeled", "validation", "test"][self as usize]
    }
}

/// Appearance shared by all slices of one simulated center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct CenterStyle {
    noise_gain: f64,
    /// Butterfly darkening relative to the cord.
    contrast: f64,
    blur_sigma: f64,
    gamma: f64,
    background: f64,
}

const CENTER_POOL: u64 = 1 << 32;
const CENTER_PICK: u64 = CENTER_POOL + 1;

fn center_style(seed: u64, center: usize) -> CenterStyle {
    let mut r = rng::stream(seed, &[rng::SYNTH, CENTER_POOL, center as u64]);
    CenterStyle {
        noise_gain: r.gen_range(0.5..2.0),
        contrast: r.gen_range(0.15..0.6),
        blur_sigma: r.gen_range(0.0..1.3),
        gamma: r.gen_range(0.6..1.7),
        background: r.gen_range(0.0..0.45),
    }
}

/// Separable Gaussian blur with edge clamping.
fn blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma < 0.3 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = img.dim();
    let pass = |src: &Array2<f64>, along_rows: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let d = k as isize - radius;
                let (ii, jj) = if along_rows { (i as isize + d, j as isize) } else { (i as isize, j as isize + d) };
                let ii = ii.clamp(0, h as isize - 1) as usize;
                let jj = jj.clamp(0, w as isize - 1) as usize;
                acc += kv * src[[ii, jj]];
            }
            acc / norm
        })
    };
    pass(&pass(img, true), false)
}

/// Soft inside-ness of a point for an ellipse, with an edge of about one pixel.
fn ellipse(px: f64, py: f64, cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let (dx, dy) = (px - cx, py - cy);
    let u = (c * dx + s * dy) / a;
    let v = (-s * dx + c * dy) / b;
    let r = (u * u + v * v).sqrt();
    let d = (1.0 - r) * a.min(b);
    1.0 / (1.0 + (-2.5 * d).exp())
}

/// Generate one slice. Coordinates are in pixels, `x` along columns.
pub(crate) fn generate_one(cfg: &SynthConfig, style: Option<&CenterStyle>, r: &mut ChaCha8Rng) -> (Array2<f32>, Array2<f32>) {
    let n = cfg.size as f64;
    let k = n / 64.0;
    let shift = cfg.max_shift;
    let (cx, cy) = (n / 2.0 + r.gen_range(-shift..=shift) * k, n / 2.0 + r.gen_range(-shift..=shift) * k);
    let scale = r.gen_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter) * k;
    let tilt: f64 = r.gen_range(-0.3..0.3);
    let (cord_a, cord_b) = (r.gen_range(19.0..23.0) * scale, r.gen_range(13.0..16.0) * scale);

    let lobe_off = r.gen_range(5.0..7.0) * scale;
    let lobe_a = r.gen_range(2.6..3.6) * scale;
    let lobe_b = r.gen_range(6.5..9.0) * scale;
    let lobe_tilt = r.gen_range(0.25..0.6);
    let bar_h = r.gen_range(0.9..1.5) * scale;
    let vshift = r.gen_range(-1.5..1.5) * scale;

    let cord_level = r.gen_range(0.8..1.2);
    let darkening = match style {
        Some(st) => (st.contrast + r.gen_range(-0.05..0.05)).clamp(0.05, 0.95),
        None => r.gen_range(cfg.contrast[0]..=cfg.contrast[1]),
    };
    let gm_level = cord_level * (1.0 - darkening);
    let bg_level = style.map_or(0.0, |st| st.background) + r.gen_range(0.05..0.25);
    let bias = (r.gen_range(-0.25..0.25), r.gen_range(-0.25..0.25));

    let n_blobs = r.gen_range(0..=cfg.distractors);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let ang = r.gen_range(0.0..std::f64::consts::TAU);
            let dist = r.gen_range(1.15..1.6) * cord_a;
            (cx + dist * ang.cos(), cy + dist * ang.sin(), r.gen_range(2.5..5.0) * k, r.gen_range(-0.3..0.6))
        })
        .collect();

    let noise_std = cfg.noise_std * style.map_or(1.0, |st| st.noise_gain);
    let noise = Normal::new(0.0, noise_std.max(1e-12)).expect("valid std");
    let (ts, tc) = tilt.sin_cos();
    let mut clean = Array2::<f64>::zeros((cfg.size, cfg.size));
    let mut mask = Array2::<f32>::zeros((cfg.size, cfg.size));
    for ((i, j), px) in clean.indexed_iter_mut() {
        let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
        // Rotate into the cord frame.
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (tc * dx + ts * dy, -ts * dx + tc * dy - vshift);
        let cord = ellipse(x, y, cx, cy, cord_a, cord_b, tilt);
        let left = ellipse(u, v, -lobe_off, 0.0, lobe_a, lobe_b, lobe_tilt);
        let right = ellipse(u, v, lobe_off, 0.0, lobe_a, lobe_b, -lobe_tilt);
        let bar = ellipse(u, v, 0.0, 0.0, lobe_off, bar_h, 0.0);
        let gm = left.max(right).max(bar) * cord;
        let mut val = bg_level + (cord_level - bg_level) * cord - (cord_level - gm_level) * gm;
        for &(bx, by, br, amp) in &blobs {
            val += amp * ellipse(x, y, bx, by, br, br, 0.0);
        }
        val *= 1.0 + bias.0 * (x / n - 0.5) + bias.1 * (y / n - 0.5);
        *px = val;
        mask[[i, j]] = if gm > 0.5 { 1.0 } else { 0.0 };
    }
    if let Some(st) = style {
        clean = blur(&clean, st.blur_sigma).mapv(|v| v.max(0.0).powf(st.gamma));
    }
    let image = clean.mapv(|v| (v + noise.sample(r)) as f32);
    (image, mask)
}

fn generate_pool(cfg: &SynthConfig, seed: u64, pool: Pool, count: usize) -> Vec<SliceSample> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::SYNTH, pool as u64, i as u64]);
            let style = (cfg.centers > 0).then(|| {
                let mut pick = rng::stream(seed, &[rng::SYNTH, CENTER_PICK, pool as u64, i as u64]);
                center_style(seed, pick.gen_range(0..cfg.centers))
            });
            let (mut image, mask) = generate_one(cfg, style.as_ref(), &mut r);
            super::standardize(&mut image);
            SliceSample { image, mask: Some(mask), subject_id: format!("synth-{}-{i:04}", pool.name()) }
        })
        .collect()
}

/// All pools of a synthetic dataset, every slice with its mask. Each slice
/// has its own subject id.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<SliceSample>> {
    let d = synth_split(cfg, seed)?;
    Ok(d.labeled.into_iter().chain(d.unlabeled).chain(d.validation).chain(d.test).collect())
}

/// The synthetic dataset arranged as training pools; unlabeled slices lose
/// their masks.
pub fn synth_split(cfg: &SynthConfig, seed: u64) -> Result<SplitData> {
    cfg.validate()?;
    Ok(SplitData {
        labeled: generate_pool(cfg, seed, Pool::Labeled, cfg.labeled),
        unlabeled: generate_pool(cfg, seed, Pool::Unlabeled, cfg.unlabeled).into_iter().map(SliceSample::unlabeled).collect(),
        validation: generate_pool(cfg, seed, Pool::Validation, cfg.validation),
        test: generate_pool(cfg, seed, Pool::Test, cfg.test),
    })
}
