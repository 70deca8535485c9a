//! Online augmentation: one random similarity transform (rotation, scale,
//! translation, flips) applied identically to both modalities and all
//! masks, plus color/intensity jitter on the images only.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data::SamplePair;
use crate::loss::RoiMask;
use crate::tensor::Tensor;

/// Augmentation ranges. Identity settings (zero ranges, unit scale, no
/// flips) reproduce the input exactly.
#[derive(Clone, Copy, Debug)]
pub struct AugmentParams {
    /// Rotation range in degrees (drawn from +/- this value).
    pub rotation_deg: f64,
    /// Multiplicative scale range.
    pub scale: (f64, f64),
    /// Translation range as a fraction of the width (drawn from +/-).
    pub translation_frac: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Additive brightness range (drawn from +/-).
    pub brightness: f64,
    /// Contrast factor range (drawn from +/-; applied around 0.5).
    pub contrast: f64,
    /// Hue rotation range as a fraction of the full circle (drawn from +/-).
    pub hue: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            translation_frac: 0.0,
            flip_h: false,
            flip_v: false,
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.scale == (1.0, 1.0)
            && self.translation_frac == 0.0
            && !self.flip_h
            && !self.flip_v
            && self.brightness == 0.0
            && self.contrast == 0.0
            && self.hue == 0.0
    }
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_deg: 15.0,
            scale: (0.9, 1.1),
            translation_frac: 0.05,
            flip_h: true,
            flip_v: true,
            brightness: 0.10,
            contrast: 0.10,
            hue: 0.02,
        }
    }
}

/// One concrete transform drawn from [`AugmentParams`].
#[derive(Clone, Copy, Debug)]
pub struct AugmentDraw {
    pub rotation_rad: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub hue: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            rotation_rad: 0.0,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
            flip_h: false,
            flip_v: false,
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.rotation_rad == 0.0
            && self.scale == 1.0
            && self.tx == 0.0
            && self.ty == 0.0
            && !self.flip_h
            && !self.flip_v
    }
}

/// Draw a transform; ranges of zero width never touch the RNG, so the
/// identity configuration is exact.
pub fn draw(params: &AugmentParams, rng: &mut ChaCha20Rng, width: usize) -> AugmentDraw {
    let mut d = AugmentDraw::identity();
    if params.rotation_deg > 0.0 {
        d.rotation_rad = rng
            .gen_range(-params.rotation_deg..params.rotation_deg)
            .to_radians();
    }
    if params.scale.0 < params.scale.1 {
        d.scale = rng.gen_range(params.scale.0..params.scale.1);
    }
    if params.translation_frac > 0.0 {
        let t = params.translation_frac * width as f64;
        d.tx = rng.gen_range(-t..t);
        d.ty = rng.gen_range(-t..t);
    }
    if params.flip_h {
        d.flip_h = rng.gen_bool(0.5);
    }
    if params.flip_v {
        d.flip_v = rng.gen_bool(0.5);
    }
    if params.brightness > 0.0 {
        d.brightness = rng.gen_range(-params.brightness..params.brightness);
    }
    if params.contrast > 0.0 {
        d.contrast = rng.gen_range(-params.contrast..params.contrast);
    }
    if params.hue > 0.0 {
        d.hue = rng.gen_range(-params.hue..params.hue);
    }
    d
}

/// Interpolation used when warping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    /// Nearest neighbor, then re-binarized at 0.5 (for masks).
    NearestThreshold,
}

/// Source coordinates for an output pixel under the inverse similarity
/// transform about the image center.
fn source_coords(d: &AugmentDraw, h: usize, w: usize, x: f64, y: f64) -> (f64, f64) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // Forward: p_out = F(R(S(p_src - c))) + c + t. Invert step by step.
    let (mut ox, mut oy) = (x - cx - d.tx, y - cy - d.ty);
    if d.flip_h {
        ox = -ox;
    }
    if d.flip_v {
        oy = -oy;
    }
    let (sin, cos) = (-d.rotation_rad).sin_cos();
    let (rx, ry) = (ox * cos - oy * sin, ox * sin + oy * cos);
    (rx / d.scale + cx, ry / d.scale + cy)
}

/// Warp every channel of a (1,C,H,W) tensor; out-of-bounds samples are 0.
pub fn warp(img: &Tensor<f32>, d: &AugmentDraw, interp: Interp) -> Tensor<f32> {
    let s = img.shape();
    let (h, w) = (s.h, s.w);
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_coords(d, h, w, x as f64, y as f64);
            match interp {
                Interp::NearestThreshold => {
                    let (nx, ny) = (sx.round(), sy.round());
                    if nx < 0.0 || ny < 0.0 || nx >= w as f64 || ny >= h as f64 {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    for c in 0..s.c {
                        let v = img.data()[c * plane + ny * w + nx];
                        out.data_mut()[c * plane + y * w + x] =
                            if v >= 0.5 { 1.0 } else { 0.0 };
                    }
                }
                Interp::Bilinear => {
                    let x0 = sx.floor();
                    let y0 = sy.floor();
                    let (fx, fy) = (sx - x0, sy - y0);
                    let mut acc = [0.0f64; 8];
                    debug_assert!(s.c <= 8);
                    for (dy, dx, wgt) in [
                        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
                        (0.0, 1.0, fx * (1.0 - fy)),
                        (1.0, 0.0, (1.0 - fx) * fy),
                        (1.0, 1.0, fx * fy),
                    ] {
                        if wgt == 0.0 {
                            continue;
                        }
                        let (px, py) = (x0 + dx, y0 + dy);
                        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                            continue;
                        }
                        let (px, py) = (px as usize, py as usize);
                        for (c, a) in acc.iter_mut().enumerate().take(s.c) {
                            *a += wgt * img.data()[c * plane + py * w + px] as f64;
                        }
                    }
                    for c in 0..s.c {
                        out.data_mut()[c * plane + y * w + x] = acc[c] as f32;
                    }
                }
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as usize % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter(img: &mut Tensor<f32>, d: &AugmentDraw) {
    let s = img.shape();
    let plane = s.plane();
    if d.hue != 0.0 && s.c == 3 {
        for i in 0..plane {
            let (r, g, b) = (
                img.data()[i] as f64,
                img.data()[plane + i] as f64,
                img.data()[2 * plane + i] as f64,
            );
            let (h, sat, v) = rgb_to_hsv(r, g, b);
            let (r, g, b) = hsv_to_rgb(h + d.hue, sat, v);
            img.data_mut()[i] = r as f32;
            img.data_mut()[plane + i] = g as f32;
            img.data_mut()[2 * plane + i] = b as f32;
        }
    }
    if d.brightness != 0.0 || d.contrast != 0.0 {
        let gain = 1.0 + d.contrast;
        for v in img.data_mut() {
            let x = (*v as f64 - 0.5) * gain + 0.5 + d.brightness;
            *v = x.clamp(0.0, 1.0) as f32;
        }
    }
}

/// Apply one concrete transform to a sample: the geometric part to both
/// modalities and every mask, the color part to the images only.
pub fn augment_with(sample: &SamplePair, d: &AugmentDraw) -> SamplePair {
    if d.is_geometric_identity()
        && d.brightness == 0.0
        && d.contrast == 0.0
        && d.hue == 0.0
    {
        return sample.clone();
    }
    let (mut ret, mut ang, roi_ret, roi_ang, mask) = if d.is_geometric_identity() {
        (
            sample.retinography.clone(),
            sample.angiography.clone(),
            sample.roi_retinography.clone(),
            sample.roi_angiography.clone(),
            sample.vessel_mask.clone(),
        )
    } else {
        (
            warp(&sample.retinography, d, Interp::Bilinear),
            warp(&sample.angiography, d, Interp::Bilinear),
            RoiMask::new(warp(
                sample.roi_retinography.tensor(),
                d,
                Interp::NearestThreshold,
            ))
            .expect("warped mask stays binary"),
            RoiMask::new(warp(
                sample.roi_angiography.tensor(),
                d,
                Interp::NearestThreshold,
            ))
            .expect("warped mask stays binary"),
            sample
                .vessel_mask
                .as_ref()
                .map(|m| warp(m, d, Interp::NearestThreshold)),
        )
    };
    color_jitter(&mut ret, d);
    // Intensity-only jitter on the angiography.
    let ang_draw = AugmentDraw { hue: 0.0, ..*d };
    color_jitter(&mut ang, &ang_draw);
    let mut out = SamplePair {
        id: sample.id.clone(),
        retinography: ret,
        angiography: ang,
        roi_retinography: roi_ret,
        roi_angiography: roi_ang,
        vessel_mask: mask,
    };
    // Geometric warps can push mask pixels outside the warped ROI border;
    // re-clip to preserve the containment invariant.
    if let Some(m) = &mut out.vessel_mask {
        let roi = out.roi_retinography.tensor();
        for (v, r) in m.data_mut().iter_mut().zip(roi.data()) {
            if *r != 1.0 {
                *v = 0.0;
            }
        }
    }
    out
}

/// Draw one transform and apply it.
pub fn augment(
    sample: &SamplePair,
    params: &AugmentParams,
    rng: &mut ChaCha20Rng,
) -> SamplePair {
    if params.is_identity() {
        return sample.clone();
    }
    let d = draw(params, rng, sample.retinography.shape().w);
    augment_with(sample, &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_generate;
    use crate::testutil::rng;

    #[test]
    fn identity_params_reproduce_input_exactly() {
        let sample = synth_generate(21, (64, 64), 0.5);
        let mut m = rng(1);
        let out = augment(&sample, &AugmentParams::identity(), &mut m);
        assert_eq!(out.retinography.data(), sample.retinography.data());
        assert_eq!(out.angiography.data(), sample.angiography.data());
        assert_eq!(
            out.vessel_mask.as_ref().unwrap().data(),
            sample.vessel_mask.as_ref().unwrap().data()
        );
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let sample = synth_generate(22, (64, 64), 0.0);
        let d = AugmentDraw {
            flip_h: true,
            ..AugmentDraw::identity()
        };
        let once = augment_with(&sample, &d);
        let twice = augment_with(&once, &d);
        assert_eq!(twice.retinography.data(), sample.retinography.data());
        assert_eq!(twice.angiography.data(), sample.angiography.data());
        assert_eq!(
            twice.roi_retinography.tensor().data(),
            sample.roi_retinography.tensor().data()
        );
    }

    #[test]
    fn transforming_the_mask_separately_gives_identical_masks() {
        let sample = synth_generate(23, (64, 64), 0.2);
        let mut m = rng(9);
        let d = draw(&AugmentParams::default(), &mut m, 64);
        let inside = augment_with(&sample, &d);
        let separate = warp(
            sample.vessel_mask.as_ref().unwrap(),
            &d,
            Interp::NearestThreshold,
        );
        // Same transform applied independently; clip to the warped ROI the
        // way augment_with does.
        let roi = inside.roi_retinography.tensor();
        let clipped: Vec<f32> = separate
            .data()
            .iter()
            .zip(roi.data())
            .map(|(&v, &r)| if r == 1.0 { v } else { 0.0 })
            .collect();
        assert_eq!(inside.vessel_mask.as_ref().unwrap().data(), &clipped[..]);
    }

    #[test]
    fn flips_keep_roi_binary_and_single_disc() {
        let sample = synth_generate(24, (64, 64), 0.0);
        for (fh, fv) in [(true, false), (false, true), (true, true)] {
            let d = AugmentDraw {
                flip_h: fh,
                flip_v: fv,
                ..AugmentDraw::identity()
            };
            let out = augment_with(&sample, &d);
            let t = out.roi_retinography.tensor();
            assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(out.roi_retinography.count(), sample.roi_retinography.count());
        }
    }

    #[test]
    fn registration_survives_augmentation() {
        // Vessel pixels in the augmented mask coincide with the bright
        // vessels in the augmented angiography.
        let sample = synth_generate(25, (96, 96), 0.0);
        let d = AugmentDraw {
            flip_h: true,
            flip_v: true,
            ..AugmentDraw::identity()
        };
        let out = augment_with(&sample, &d);
        let mask = out.vessel_mask.as_ref().unwrap();
        let ang = &out.angiography;
        let omega = out
            .roi_retinography
            .and(&out.roi_angiography)
            .unwrap();
        let bright: Vec<bool> = ang.data().iter().map(|&v| v >= 0.99).collect();
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..mask.numel() {
            if omega.tensor().data()[i] != 1.0 {
                continue;
            }
            let m = mask.data()[i] == 1.0;
            let b = bright[i];
            if m && b {
                inter += 1;
            }
            if m || b {
                union += 1;
            }
        }
        let iou = inter as f64 / union as f64;
        assert!(iou >= 0.99, "IoU {iou}");
    }

    #[test]
    fn color_jitter_leaves_masks_untouched() {
        let sample = synth_generate(26, (64, 64), 0.0);
        let d = AugmentDraw {
            brightness: 0.1,
            contrast: -0.05,
            hue: 0.02,
            ..AugmentDraw::identity()
        };
        let out = augment_with(&sample, &d);
        assert_eq!(
            out.vessel_mask.as_ref().unwrap().data(),
            sample.vessel_mask.as_ref().unwrap().data()
        );
        assert_ne!(out.retinography.data(), sample.retinography.data());
    }
}
