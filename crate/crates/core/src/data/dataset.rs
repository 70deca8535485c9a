//! Dataset directories: per-sample PNM file sets with a manifest, the
//! nested train/validation split protocol, and ROI derivation for
//! user-supplied pairs without explicit ROI files.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::pnm::{self, DataError};
use crate::data::SamplePair;
use crate::loss::RoiMask;
use crate::tensor::{Shape, Tensor};

pub const MANIFEST: &str = "manifest.txt";

/// Write one sample's file set (`<id>_ret.ppm`, `<id>_ang.pgm`, the two
/// ROI masks, and the optional `<id>_mask.pgm`).
pub fn save_pair(dir: &Path, pair: &SamplePair) -> Result<(), DataError> {
    let id = &pair.id;
    pnm::write_ppm(&dir.join(format!("{id}_ret.ppm")), &pair.retinography)?;
    pnm::write_pgm(&dir.join(format!("{id}_ang.pgm")), &pair.angiography)?;
    pnm::write_pgm(
        &dir.join(format!("{id}_roi_ret.pgm")),
        pair.roi_retinography.tensor(),
    )?;
    pnm::write_pgm(
        &dir.join(format!("{id}_roi_ang.pgm")),
        pair.roi_angiography.tensor(),
    )?;
    if let Some(mask) = &pair.vessel_mask {
        pnm::write_pgm(&dir.join(format!("{id}_mask.pgm")), mask)?;
    }
    Ok(())
}

pub fn write_manifest(dir: &Path, ids: &[String]) -> Result<(), DataError> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(dir.join(MANIFEST), text).map_err(|source| DataError::Io {
        path: dir.join(MANIFEST),
        source,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>, DataError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|source| DataError::Io { path, source })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn binarize(img: &Tensor<f32>) -> Tensor<f32> {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    out
}

/// Exact 1D squared Euclidean distance transform (lower envelope of
/// parabolas), applied twice for the 2D transform.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let sq = |i: usize| f[i] + (i * i) as f64;
        let mut s = (sq(q) - sq(v[k])) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (sq(q) - sq(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Squared distance to the nearest background pixel, for every pixel.
fn distance_transform(fg: &[bool], h: usize, w: usize) -> Vec<f64> {
    const FAR: f64 = 1e12;
    let mut d = vec![0.0f64; h * w];
    for (i, &inside) in fg.iter().enumerate() {
        d[i] = if inside { FAR } else { 0.0 };
    }
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = d[y * w + x];
        }
        edt_1d(&col_in, &mut col_out);
        for y in 0..h {
            d[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0f64; w];
    for y in 0..h {
        edt_1d(&d[y * w..(y + 1) * w].to_vec(), &mut row_out);
        d[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    d
}

/// Derive a circular ROI from an image: threshold against the near-black
/// corners, then take the largest disc inscribed in the foreground.
pub fn derive_roi(gray: &Tensor<f32>) -> RoiMask<f32> {
    let s = gray.shape();
    let (h, w) = (s.h, s.w);
    let d = gray.data();
    // Background level from 4x4 corner patches.
    let mut corner = 0.0f64;
    let mut n = 0;
    for &(ys, xs) in &[(0, 0), (0, w - 4), (h - 4, 0), (h - 4, w - 4)] {
        for y in ys..ys + 4 {
            for x in xs..xs + 4 {
                corner += d[y * w + x] as f64;
                n += 1;
            }
        }
    }
    let threshold = corner / n as f64 + 0.06;
    let fg: Vec<bool> = d.iter().map(|&v| v as f64 > threshold).collect();
    let dist = distance_transform(&fg, h, w);
    let (mut best, mut cx, mut cy) = (0.0f64, w / 2, h / 2);
    for y in 0..h {
        for x in 0..w {
            if dist[y * w + x] > best {
                best = dist[y * w + x];
                cx = x;
                cy = y;
            }
        }
    }
    let r = best.sqrt();
    RoiMask::from_fn(h, w, |y, x| {
        let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
        dx * dx + dy * dy <= r * r
    })
}

fn mean_channels(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(Shape::new(1, 1, s.h, s.w));
    for i in 0..plane {
        let mut acc = 0.0;
        for c in 0..s.c {
            acc += img.data()[c * plane + i];
        }
        out.data_mut()[i] = acc / s.c as f32;
    }
    out
}

/// Load one registered pair from a dataset directory. Missing ROI files
/// are derived from the images; a missing mask file yields a pair usable
/// for pretraining only.
pub fn load_pair(dir: &Path, id: &str) -> Result<SamplePair, DataError> {
    let ret = pnm::read_ppm(&dir.join(format!("{id}_ret.ppm")))?;
    let ang = pnm::read_pgm(&dir.join(format!("{id}_ang.pgm")))?;

    let roi_ret_path = dir.join(format!("{id}_roi_ret.pgm"));
    let roi_ret = if roi_ret_path.exists() {
        binarize(&pnm::read_pgm(&roi_ret_path)?)
    } else {
        derive_roi(&mean_channels(&ret)).tensor().clone()
    };
    let roi_ang_path = dir.join(format!("{id}_roi_ang.pgm"));
    let roi_ang = if roi_ang_path.exists() {
        binarize(&pnm::read_pgm(&roi_ang_path)?)
    } else {
        derive_roi(&ang).tensor().clone()
    };
    let mask_path = dir.join(format!("{id}_mask.pgm"));
    let mask = if mask_path.exists() {
        Some(binarize(&pnm::read_pgm(&mask_path)?))
    } else {
        None
    };

    let dims = |t: Shape| (t.h, t.w);
    let base = dims(ret.shape());
    let mut named = vec![("ret.ppm", base), ("ang.pgm", dims(ang.shape()))];
    named.push(("roi_ret.pgm", dims(roi_ret.shape())));
    named.push(("roi_ang.pgm", dims(roi_ang.shape())));
    if let Some(m) = &mask {
        named.push(("mask.pgm", dims(m.shape())));
    }
    for (name, d) in &named {
        if *d != base {
            return Err(DataError::DimensionMismatch(format!(
                "{id}: {id}_ret.ppm is {}x{} but {id}_{name} is {}x{}",
                base.1, base.0, d.1, d.0
            )));
        }
    }

    let pair = SamplePair {
        id: id.to_string(),
        retinography: ret,
        angiography: ang,
        roi_retinography: RoiMask::new(roi_ret).map_err(|e| DataError::InvalidSample {
            id: id.to_string(),
            detail: e.to_string(),
        })?,
        roi_angiography: RoiMask::new(roi_ang).map_err(|e| DataError::InvalidSample {
            id: id.to_string(),
            detail: e.to_string(),
        })?,
        vessel_mask: mask,
    };
    pair.validate().map_err(|detail| DataError::InvalidSample {
        id: id.to_string(),
        detail,
    })?;
    Ok(pair)
}

/// Load every manifest entry of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<SamplePair>, DataError> {
    read_manifest(dir)?
        .iter()
        .map(|id| load_pair(dir, id))
        .collect()
}

/// One train/validation split of the nested protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub size: usize,
    /// Indices into the pool, in draw order.
    pub train: Vec<usize>,
    /// The rest of the pool.
    pub val: Vec<usize>,
}

/// Nested splits: one random permutation defines every split, so each
/// train set is contained in all larger ones and validation is the
/// complement within the pool.
pub fn nested_splits(
    pool_size: usize,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<Split>, DataError> {
    if let Some(&max) = sizes.iter().max() {
        if max > pool_size {
            return Err(DataError::Manifest(format!(
                "requested train size {max} exceeds the pool of {pool_size} samples"
            )));
        }
    }
    let mut order: Vec<usize> = (0..pool_size).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(sizes
        .iter()
        .map(|&size| Split {
            size,
            train: order[..size].to_vec(),
            val: order[size..].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_generate;

    #[test]
    fn save_then_load_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let pair = synth_generate(3, (64, 64), 0.4);
        save_pair(dir.path(), &pair).unwrap();
        write_manifest(dir.path(), &[pair.id.clone()]).unwrap();
        let loaded = load_pair(dir.path(), &pair.id).unwrap();
        for (a, b) in pair
            .retinography
            .data()
            .iter()
            .zip(loaded.retinography.data())
        {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(
            pair.vessel_mask.as_ref().unwrap().data(),
            loaded.vessel_mask.as_ref().unwrap().data()
        );
        assert_eq!(
            pair.roi_retinography.tensor().data(),
            loaded.roi_retinography.tensor().data()
        );
    }

    #[test]
    fn missing_mask_is_accepted_for_pretraining_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut pair = synth_generate(4, (64, 64), 0.0);
        pair.vessel_mask = None;
        save_pair(dir.path(), &pair).unwrap();
        let loaded = load_pair(dir.path(), &pair.id).unwrap();
        assert!(loaded.vessel_mask.is_none());
    }

    #[test]
    fn mismatched_mask_size_is_rejected_naming_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let pair = synth_generate(5, (64, 64), 0.0);
        save_pair(dir.path(), &pair).unwrap();
        // Overwrite the mask with a smaller one.
        let small = Tensor::zeros(Shape::new(1, 1, 32, 32));
        pnm::write_pgm(&dir.path().join(format!("{}_mask.pgm", pair.id)), &small).unwrap();
        let err = load_pair(dir.path(), &pair.id).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("64x64") && msg.contains("32x32"), "{msg}");
    }

    #[test]
    fn missing_roi_files_are_derived_from_the_images() {
        let dir = tempfile::tempdir().unwrap();
        let pair = synth_generate(6, (96, 96), 0.0);
        save_pair(dir.path(), &pair).unwrap();
        fs::remove_file(dir.path().join(format!("{}_roi_ret.pgm", pair.id))).unwrap();
        fs::remove_file(dir.path().join(format!("{}_roi_ang.pgm", pair.id))).unwrap();
        let loaded = load_pair(dir.path(), &pair.id).unwrap();
        // The derived disc should agree with the true one on most pixels.
        let agree = loaded
            .roi_retinography
            .tensor()
            .data()
            .iter()
            .zip(pair.roi_retinography.tensor().data())
            .filter(|(a, b)| a == b)
            .count();
        let total = pair.roi_retinography.tensor().numel();
        assert!(agree as f64 / total as f64 > 0.93, "{agree}/{total}");
    }

    #[test]
    fn nested_split_protocol() {
        let splits = nested_splits(20, &[1, 5, 10, 15], 42).unwrap();
        let val_sizes: Vec<usize> = splits.iter().map(|s| s.val.len()).collect();
        assert_eq!(val_sizes, vec![19, 15, 10, 5]);
        // Nesting: each train set is a prefix of the next.
        for w in splits.windows(2) {
            assert_eq!(w[1].train[..w[0].train.len()], w[0].train[..]);
        }
        // Partition: train(15) and its validation cover the pool disjointly.
        let last = &splits[3];
        let mut all: Vec<usize> = last.train.iter().chain(&last.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        // Oversized request is rejected.
        assert!(nested_splits(10, &[11], 0).is_err());
    }
}
