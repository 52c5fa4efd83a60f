//! Stochastic view generation.
//!
//! Samples are `[C, H, W]` slices with values in `[-1, 1]`. Inputs with
//! `C = H = 1` are treated as feature vectors and receive additive noise and
//! coordinate dropout instead of image transforms.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range of the crop.
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub gray_p: f64,
    /// Standard deviation of additive noise on vector inputs.
    pub noise: f64,
    /// Per-coordinate zeroing probability on vector inputs.
    pub dropout: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop_scale: (0.3, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            gray_p: 0.2,
            noise: 0.05,
            dropout: 0.1,
        }
    }
}

impl AugmentPolicy {
    /// Leaves every input unchanged.
    pub fn identity() -> Self {
        AugmentPolicy {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            gray_p: 0.0,
            noise: 0.0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("gray_p", self.gray_p),
            ("dropout", self.dropout),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::invalid("augment", format!("{name} = {p} not in [0, 1]")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(CoreError::invalid("augment", format!("crop_scale ({lo}, {hi}) invalid")));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(CoreError::invalid("augment", format!("crop_ratio ({rlo}, {rhi}) invalid")));
        }
        let strengths = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("noise", self.noise),
        ];
        for (name, s) in strengths {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(CoreError::invalid("augment", format!("{name} = {s} must be >= 0")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(CoreError::invalid("augment", format!("hue = {} not in [0, 0.5]", self.hue)));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn coin(rng: &mut impl Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// One augmented view of `x` with shape `[c, h, w]`.
pub fn augment(x: &[f32], shape: [usize; 3], policy: &AugmentPolicy, rng: &mut impl Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    debug_assert_eq!(x.len(), c * h * w);
    let mut out = if c == 1 && h == 1 {
        vector_view(x, policy, rng)
    } else {
        image_view(x, shape, policy, rng)
    };
    out.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    out
}

/// Two independent views drawn in sequence from `rng`.
pub fn make_views(
    x: &[f32],
    shape: [usize; 3],
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> (Vec<f32>, Vec<f32>) {
    let a = augment(x, shape, policy, rng);
    let b = augment(x, shape, policy, rng);
    (a, b)
}

fn vector_view(x: &[f32], policy: &AugmentPolicy, rng: &mut impl Rng) -> Vec<f32> {
    x.iter()
        .map(|&v| {
            let mut v = v as f64;
            if policy.noise > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                v += policy.noise * e;
            }
            if coin(rng, policy.dropout) {
                v = 0.0;
            }
            v as f32
        })
        .collect()
}

fn image_view(x: &[f32], shape: [usize; 3], policy: &AugmentPolicy, rng: &mut impl Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut img = if policy.crop_scale.0 < 1.0 {
        resized_crop(x, shape, policy, rng)
    } else {
        x.to_vec()
    };
    if coin(rng, policy.flip_p) {
        for row in img.chunks_mut(w) {
            row.reverse();
        }
    }
    // Photometric ops work in [0, 1]; the conversion is skipped when none
    // fires so untouched pixels come back bit-exact.
    let mut unit = false;
    let to_unit = |img: &mut Vec<f32>, unit: &mut bool| {
        if !*unit {
            img.iter_mut().for_each(|v| *v = (*v + 1.0) * 0.5);
            *unit = true;
        }
    };
    if coin(rng, policy.jitter_p) {
        to_unit(&mut img, &mut unit);
        let b = uniform(rng, 1.0 - policy.brightness, 1.0 + policy.brightness).max(0.0);
        img.iter_mut().for_each(|v| *v = (*v * b as f32).clamp(0.0, 1.0));
        let k = uniform(rng, 1.0 - policy.contrast, 1.0 + policy.contrast).max(0.0) as f32;
        let mean = gray_mean(&img, c, h * w);
        img.iter_mut()
            .for_each(|v| *v = ((*v - mean) * k + mean).clamp(0.0, 1.0));
        if c == 3 {
            let s = uniform(rng, 1.0 - policy.saturation, 1.0 + policy.saturation).max(0.0) as f32;
            let gray = luma(&img, h * w);
            for ch in 0..3 {
                for (p, v) in img[ch * h * w..(ch + 1) * h * w].iter_mut().enumerate() {
                    *v = ((*v - gray[p]) * s + gray[p]).clamp(0.0, 1.0);
                }
            }
            let dh = uniform(rng, -policy.hue, policy.hue);
            if dh != 0.0 {
                shift_hue(&mut img, h * w, dh as f32);
            }
        }
    }
    if c == 3 && coin(rng, policy.gray_p) {
        to_unit(&mut img, &mut unit);
        let gray = luma(&img, h * w);
        for ch in 0..3 {
            img[ch * h * w..(ch + 1) * h * w].copy_from_slice(&gray);
        }
    }
    if unit {
        img.iter_mut().for_each(|v| *v = *v * 2.0 - 1.0);
    }
    img
}

fn luma(img: &[f32], plane: usize) -> Vec<f32> {
    (0..plane)
        .map(|p| 0.299 * img[p] + 0.587 * img[plane + p] + 0.114 * img[2 * plane + p])
        .collect()
}

fn gray_mean(img: &[f32], c: usize, plane: usize) -> f32 {
    if c == 3 {
        luma(img, plane).iter().sum::<f32>() / plane as f32
    } else {
        img.iter().sum::<f32>() / img.len() as f32
    }
}

fn shift_hue(img: &mut [f32], plane: usize, dh: f32) {
    for p in 0..plane {
        let (r, g, b) = (img[p], img[plane + p], img[2 * plane + p]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        if d <= 0.0 {
            continue;
        }
        let mut hh = if max == r {
            ((g - b) / d).rem_euclid(6.0)
        } else if max == g {
            (b - r) / d + 2.0
        } else {
            (r - g) / d + 4.0
        } / 6.0;
        hh = (hh + dh).rem_euclid(1.0);
        let s = d / max;
        let (nr, ng, nb) = hsv_to_rgb(hh, s, max);
        img[p] = nr;
        img[plane + p] = ng;
        img[2 * plane + p] = nb;
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn resized_crop(x: &[f32], shape: [usize; 3], policy: &AugmentPolicy, rng: &mut impl Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    let s = uniform(rng, policy.crop_scale.0, policy.crop_scale.1);
    let a = uniform(rng, policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln()).exp();
    let cw = ((w as f64 * (s * a).sqrt()).round() as usize).clamp(1, w);
    let ch = ((h as f64 * (s / a).sqrt()).round() as usize).clamp(1, h);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let mut out = vec![0.0f32; c * h * w];
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    for i in 0..h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let iy = fy.floor() as usize;
        let iy1 = (iy + 1).min(ch - 1);
        let ty = (fy - iy as f64) as f32;
        for j in 0..w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let ix = fx.floor() as usize;
            let ix1 = (ix + 1).min(cw - 1);
            let tx = (fx - ix as f64) as f32;
            for k in 0..c {
                let at = |yy: usize, xx: usize| x[(k * h + y0 + yy) * w + x0 + xx];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix1) * tx;
                let bot = at(iy1, ix) * (1.0 - tx) + at(iy1, ix1) * tx;
                out[(k * h + i) * w + j] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Repeats a single-channel `[1, H, W]` image into three channels.
pub fn expand_grayscale(x: &[f32], shape: [usize; 3]) -> Result<Vec<f32>> {
    if shape[0] != 1 {
        return Err(CoreError::invalid(
            "expand_grayscale",
            format!("expects one channel, got shape {shape:?}"),
        ));
    }
    let mut out = Vec::with_capacity(3 * x.len());
    for _ in 0..3 {
        out.extend_from_slice(x);
    }
    Ok(out)
}

/// Averages channels of a `[C, H, W]` image into `[1, H, W]`.
pub fn channel_mean(x: &[f32], shape: [usize; 3]) -> Vec<f32> {
    let plane = shape[1] * shape[2];
    (0..plane)
        .map(|p| (0..shape[0]).map(|c| x[c * plane + p]).sum::<f32>() / shape[0] as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hsv_round_trip_without_shift() {
        let mut img = vec![0.9, 0.2, 0.4, 0.1, 0.5, 0.6];
        let orig = img.clone();
        shift_hue(&mut img, 2, 0.0);
        for (a, b) in img.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_crop_with_unit_ratio_is_identity() {
        let x: Vec<f32> = (0..48).map(|i| (i as f32 / 24.0) - 1.0).collect();
        let policy = AugmentPolicy {
            crop_scale: (1.0, 1.0),
            ..AugmentPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = resized_crop(&x, [3, 4, 4], &policy, &mut rng);
        assert_eq!(x, y);
    }
}
