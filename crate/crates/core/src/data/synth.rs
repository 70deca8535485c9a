//! Procedural generation of pixel-registered retinography / angiography /
//! vessel-mask triplets: a random branching vessel tree grown inside a
//! circular region of interest, rendered dark-on-warm in the retinography
//! and bright-on-dark in the angiography, with optional pathology blobs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::SamplePair;
use crate::loss::RoiMask;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy)]
struct Segment {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    width: f64,
}

/// Distance from a point to a segment.
fn seg_dist(s: &Segment, px: f64, py: f64) -> f64 {
    let (dx, dy) = (s.x1 - s.x0, s.y1 - s.y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - s.x0) * dx + (py - s.y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (s.x0 + t * dx, s.y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

struct TreeGrower<'a> {
    rng: &'a mut ChaCha20Rng,
    segments: Vec<Segment>,
    cx: f64,
    cy: f64,
    radius: f64,
    min_dim: f64,
}

impl TreeGrower<'_> {
    fn grow(&mut self, mut x: f64, mut y: f64, mut angle: f64, mut width: f64, depth: usize) {
        if depth > 14 || width < 0.55 {
            return;
        }
        for _ in 0..24 {
            let len = self.min_dim * (0.030 + 0.025 * self.rng.gen::<f64>());
            angle += self.rng.gen_range(-0.35..0.35);
            let (nx, ny) = (x + len * angle.cos(), y + len * angle.sin());
            self.segments.push(Segment {
                x0: x,
                y0: y,
                x1: nx,
                y1: ny,
                width,
            });
            x = nx;
            y = ny;
            width *= 0.970;
            let r = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt();
            if r > self.radius * 0.98 || width < 0.55 {
                return;
            }
            if self.rng.gen_bool(0.16) {
                let spread = self.rng.gen_range(0.35..0.85);
                let thin = self.rng.gen_range(0.65..0.8);
                let thick = self.rng.gen_range(0.82..0.92);
                self.grow(x, y, angle + spread, width * thin, depth + 1);
                angle -= spread * 0.6;
                width *= thick;
            }
        }
    }
}

/// Smooth value noise in [0,1]: a coarse random grid, bilinearly sampled.
fn value_noise(rng: &mut ChaCha20Rng, h: usize, w: usize, step: usize) -> Vec<f64> {
    let gw = w / step + 2;
    let gh = h / step + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / step as f64;
            let fy = y as f64 / step as f64;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let a = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
            let b = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
            out[y * w + x] = a * (1.0 - ty) + b * ty;
        }
    }
    out
}

/// Rasterize the tree into a soft intensity field (1 on centerlines,
/// falling to 0 one pixel past the vessel edge) and a hard binary mask.
fn rasterize(segments: &[Segment], h: usize, w: usize) -> (Vec<f64>, Vec<bool>) {
    let mut field = vec![0.0f64; h * w];
    let mut mask = vec![false; h * w];
    for s in segments {
        let reach = s.width / 2.0 + 1.5;
        let x_lo = (s.x0.min(s.x1) - reach).floor().max(0.0) as usize;
        let x_hi = ((s.x0.max(s.x1) + reach).ceil() as usize).min(w.saturating_sub(1));
        let y_lo = (s.y0.min(s.y1) - reach).floor().max(0.0) as usize;
        let y_hi = ((s.y0.max(s.y1) + reach).ceil() as usize).min(h.saturating_sub(1));
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d = seg_dist(s, x as f64, y as f64);
                let half = s.width / 2.0;
                if d <= half {
                    mask[y * w + x] = true;
                }
                // 1 inside the core, linear falloff over one pixel.
                let v = (1.0 - (d - half).max(0.0)).clamp(0.0, 1.0);
                if v > field[y * w + x] {
                    field[y * w + x] = v;
                }
            }
        }
    }
    (field, mask)
}

fn disc_mask(h: usize, w: usize, cx: f64, cy: f64, r: f64) -> RoiMask<f32> {
    RoiMask::from_fn(h, w, |y, x| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        dx * dx + dy * dy <= r * r
    })
}

/// Generate one pixel-registered triplet. Deterministic in `seed`;
/// `pathology_level` in [0,1] scales the number and strength of bright
/// and dark lesion blobs in the retinography.
pub fn synth_generate(seed: u64, size: (usize, usize), pathology_level: f64) -> SamplePair {
    let (h, w) = size;
    assert!(h >= 64 && w >= 64, "synthetic images are at least 64x64");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let min_dim = h.min(w) as f64;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let radius = 0.47 * min_dim;

    // Optic-disc position on the nasal side, where the arcades originate.
    let side = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::PI };
    let theta = side + rng.gen_range(-0.25..0.25);
    let (dx, dy) = (
        cx + 0.55 * radius * theta.cos(),
        cy + 0.55 * radius * theta.sin(),
    );

    // Arcade trunks fan out from the disc across the fundus.
    let base = theta + std::f64::consts::PI;
    let trunk_angles = [base - 0.85, base - 0.35, base + 0.35, base + 0.85, theta + 0.1];
    let trunk_width = (0.025 * min_dim).max(1.8);
    let mut grower = TreeGrower {
        rng: &mut rng,
        segments: Vec::new(),
        cx,
        cy,
        radius,
        min_dim,
    };
    for (i, &a) in trunk_angles.iter().enumerate() {
        let width = if i == 4 { trunk_width * 0.6 } else { trunk_width };
        let jitter = grower.rng.gen_range(-0.15..0.15);
        grower.grow(dx, dy, a + jitter, width, 0);
    }
    let segments = grower.segments;
    let (field, capsule) = rasterize(&segments, h, w);

    let roi_ret = disc_mask(h, w, cx, cy, radius);
    let ang_jx = rng.gen_range(-2.0..2.0);
    let ang_jy = rng.gen_range(-2.0..2.0);
    let roi_ang = disc_mask(h, w, cx + ang_jx, cy + ang_jy, radius - 2.0);

    let noise = value_noise(&mut rng, h, w, 8);
    let fine = value_noise(&mut rng, h, w, 3);

    // Angiography: dark background, soft vessel flanks, and a saturated
    // core at exactly full intensity wherever the hard mask is set.
    let mut ang = Tensor::zeros(Shape::new(1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = if roi_ang.tensor().data()[i] == 1.0 {
                if capsule[i] {
                    1.0
                } else {
                    (0.04 + 0.05 * noise[i] + 0.90 * field[i]).min(0.97)
                }
            } else {
                0.01
            };
            ang.data_mut()[i] = (v as f32).clamp(0.0, 1.0);
        }
    }

    // Retinography: warm shaded background, vessels darker, disc bright,
    // optional pathology blobs.
    struct Blob {
        x: f64,
        y: f64,
        r: f64,
        bright: bool,
        strength: f64,
    }
    let n_blobs = (pathology_level * (2.0 + 6.0 * rng.gen::<f64>())).round() as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        // Rejection-sample a center inside the ROI.
        let (bx, by) = loop {
            let bx = rng.gen_range(0.0..w as f64);
            let by = rng.gen_range(0.0..h as f64);
            if (bx - cx).powi(2) + (by - cy).powi(2) < (radius * 0.85).powi(2) {
                break (bx, by);
            }
        };
        blobs.push(Blob {
            x: bx,
            y: by,
            r: rng.gen_range(1.5..5.5),
            bright: rng.gen_bool(0.5),
            strength: pathology_level * rng.gen_range(0.5..1.0),
        });
    }

    let disc_r = 0.13 * min_dim;
    let mut ret = Tensor::zeros(Shape::new(1, 3, h, w));
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if roi_ret.tensor().data()[i] != 1.0 {
                continue;
            }
            let rr = (((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt()) / radius;
            let vignette = 0.18 * rr * rr;
            let tex = 0.10 * noise[i] + 0.04 * fine[i];
            let mut r = 0.72 + tex - vignette;
            let mut g = 0.42 + 0.8 * tex - 0.8 * vignette;
            let mut b = 0.20 + 0.5 * tex - 0.5 * vignette;

            // Optic disc glow.
            let dd = (((x as f64 - dx).powi(2) + (y as f64 - dy).powi(2)).sqrt()) / disc_r;
            if dd < 1.0 {
                let p = (1.0 - dd * dd).max(0.0);
                r += 0.20 * p;
                g += 0.20 * p;
                b += 0.12 * p;
            }

            for blob in &blobs {
                let bd = (((x as f64 - blob.x).powi(2) + (y as f64 - blob.y).powi(2)).sqrt())
                    / blob.r;
                if bd < 1.0 {
                    let p = blob.strength * (1.0 - bd * bd);
                    if blob.bright {
                        r += 0.22 * p;
                        g += 0.20 * p;
                        b += 0.06 * p;
                    } else {
                        r -= 0.35 * p;
                        g -= 0.28 * p;
                        b -= 0.10 * p;
                    }
                }
            }

            // Vessels darken the fundus.
            let v = field[i];
            r *= 1.0 - 0.62 * v;
            g *= 1.0 - 0.72 * v;
            b *= 1.0 - 0.55 * v;

            ret.data_mut()[i] = (r as f32).clamp(0.0, 1.0);
            ret.data_mut()[plane + i] = (g as f32).clamp(0.0, 1.0);
            ret.data_mut()[2 * plane + i] = (b as f32).clamp(0.0, 1.0);
        }
    }

    // Hard vessel mask, clipped to the retinography ROI.
    let mut mask = Tensor::zeros(Shape::new(1, 1, h, w));
    for i in 0..plane {
        if capsule[i] && roi_ret.tensor().data()[i] == 1.0 {
            mask.data_mut()[i] = 1.0;
        }
    }

    SamplePair {
        id: format!("synth{seed:05}"),
        retinography: ret,
        angiography: ang,
        roi_retinography: roi_ret,
        roi_angiography: roi_ang,
        vessel_mask: Some(mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synth_generate(7, (64, 64), 0.5);
        let b = synth_generate(7, (64, 64), 0.5);
        assert_eq!(a.retinography.data(), b.retinography.data());
        assert_eq!(a.angiography.data(), b.angiography.data());
        assert_eq!(
            a.vessel_mask.as_ref().unwrap().data(),
            b.vessel_mask.as_ref().unwrap().data()
        );
    }

    #[test]
    fn mask_is_contained_in_the_roi() {
        for seed in [0u64, 3, 9] {
            let p = synth_generate(seed, (96, 96), 0.3);
            let mask = p.vessel_mask.as_ref().unwrap();
            for (m, r) in mask.data().iter().zip(p.roi_retinography.tensor().data()) {
                assert!(*m == 0.0 || *r == 1.0);
            }
        }
    }

    #[test]
    fn vessel_fraction_inside_roi_is_plausible() {
        let mut fractions = Vec::new();
        for seed in 0..100u64 {
            let p = synth_generate(seed, (64, 64), 0.0);
            let mask = p.vessel_mask.as_ref().unwrap();
            let vessels = mask.data().iter().filter(|&&v| v == 1.0).count();
            let roi = p.roi_retinography.count();
            fractions.push(vessels as f64 / roi as f64);
        }
        for (seed, f) in fractions.iter().enumerate() {
            assert!(
                (0.03..=0.20).contains(f),
                "seed {seed}: vessel fraction {f}"
            );
        }
    }

    #[test]
    fn angiography_highlights_vessels() {
        let p = synth_generate(11, (96, 96), 0.0);
        let mask = p.vessel_mask.as_ref().unwrap();
        let ang = &p.angiography;
        let mut on = 0.0;
        let mut on_n = 0;
        let mut off = 0.0;
        let mut off_n = 0;
        let omega = p
            .roi_retinography
            .and(&p.roi_angiography)
            .unwrap();
        for i in 0..mask.numel() {
            if omega.tensor().data()[i] != 1.0 {
                continue;
            }
            if mask.data()[i] == 1.0 {
                on += ang.data()[i] as f64;
                on_n += 1;
            } else {
                off += ang.data()[i] as f64;
                off_n += 1;
            }
        }
        let (on, off) = (on / on_n as f64, off / off_n as f64);
        assert!(on > 0.75, "vessel mean {on}");
        assert!(off < 0.25, "background mean {off}");
    }
}
