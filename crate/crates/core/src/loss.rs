//! Training objectives: masked negative-SSIM for multimodal reconstruction
//! and summed binary cross-entropy for segmentation, plus ROI handling.
//!
//! The SSIM map combines local means, variances and covariance computed
//! with Gaussian windows (sigma 1.5, 11x11 by default) over reflectively
//! padded inputs. The loss sums the negated map over the multimodal ROI,
//! eroded by the window radius so every counted window lies fully inside
//! the ROI.

use crate::nn::ConvSpec;
use crate::tape::{Tape, Var};
use crate::tensor::{cast, Scalar, Shape, Tensor, TensorError};

/// Parameters of the SSIM similarity map.
#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    /// Standard deviation of the Gaussian window, in pixels.
    pub gaussian_sigma: f64,
    /// Window radius in pixels; the window spans (2r+1) x (2r+1).
    pub window_radius: usize,
    /// Luminance stability constant, conventionally (0.01 * L)^2.
    pub c1: f64,
    /// Contrast stability constant, conventionally (0.03 * L)^2.
    pub c2: f64,
    /// Dynamic range of the images.
    pub dynamic_range: f64,
}

impl SsimParams {
    pub fn with_range(l: f64) -> Self {
        SsimParams {
            gaussian_sigma: 1.5,
            window_radius: 5,
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
            dynamic_range: l,
        }
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams::with_range(1.0)
    }
}

/// Normalized Gaussian window weights (sum exactly 1 in f64, cast to T).
pub fn gaussian_window<T: Scalar>(radius: usize, sigma: f64) -> Vec<T> {
    let size = 2 * radius + 1;
    let mut w = vec![0.0f64; size * size];
    for dy in 0..size {
        for dx in 0..size {
            let y = dy as f64 - radius as f64;
            let x = dx as f64 - radius as f64;
            w[dy * size + dx] = (-(y * y + x * x) / (2.0 * sigma * sigma)).exp();
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter().map(|&v| cast(v / sum)).collect()
}

/// Binary region-of-interest mask of shape (1, 1, H, W).
#[derive(Clone, Debug)]
pub struct RoiMask<T> {
    mask: Tensor<T>,
}

impl<T: Scalar> RoiMask<T> {
    /// Wrap a (1,1,H,W) tensor with strictly binary values.
    pub fn new(mask: Tensor<T>) -> Result<Self, TensorError> {
        let s = mask.shape();
        if s.b != 1 || s.c != 1 {
            return Err(TensorError::Geometry {
                op: "roi_mask",
                detail: format!("expected shape (1, 1, H, W), got {s}"),
            });
        }
        if !mask
            .data()
            .iter()
            .all(|&v| v == T::zero() || v == T::one())
        {
            return Err(TensorError::NonBinaryMask { op: "roi_mask" });
        }
        Ok(RoiMask { mask })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut t = Tensor::zeros(Shape::new(1, 1, h, w));
        for y in 0..h {
            for x in 0..w {
                if f(y, x) {
                    t.data_mut()[y * w + x] = T::one();
                }
            }
        }
        RoiMask { mask: t }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.mask
    }

    pub fn shape(&self) -> Shape {
        self.mask.shape()
    }

    /// Number of active pixels.
    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == T::one()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Morphological erosion by a (2r+1) x (2r+1) square; pixels outside
    /// the image count as background.
    pub fn erode(&self, radius: usize) -> RoiMask<T> {
        if radius == 0 {
            return self.clone();
        }
        let s = self.mask.shape();
        let (h, w) = (s.h, s.w);
        let src = self.mask.data();
        let r = radius as isize;
        // Horizontal pass, then vertical.
        let mut tmp = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut all = true;
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize || src[y * w + xx as usize] != T::one() {
                        all = false;
                        break;
                    }
                }
                tmp[y * w + x] = all;
            }
        }
        let mut out = Tensor::zeros(s);
        for y in 0..h {
            for x in 0..w {
                let mut all = true;
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize || !tmp[yy as usize * w + x] {
                        all = false;
                        break;
                    }
                }
                if all {
                    out.data_mut()[y * w + x] = T::one();
                }
            }
        }
        RoiMask { mask: out }
    }

    /// Logical AND with another mask of the same shape.
    pub fn and(&self, other: &RoiMask<T>) -> Result<RoiMask<T>, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "roi_intersection",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self
            .mask
            .data()
            .iter()
            .zip(other.mask.data())
            .map(|(&a, &b)| if a == T::one() && b == T::one() { T::one() } else { T::zero() })
            .collect();
        Ok(RoiMask {
            mask: Tensor::from_vec(self.shape(), data).unwrap(),
        })
    }
}

/// AND of the two modality ROIs; the SSIM summation domain.
pub fn roi_intersection<T: Scalar>(
    roi_retinography: &RoiMask<T>,
    roi_angiography: &RoiMask<T>,
) -> Result<RoiMask<T>, TensorError> {
    roi_retinography.and(roi_angiography)
}

fn check_single_channel<T: Scalar>(
    op: &'static str,
    tape: &Tape<T>,
    x: Var,
    y: Var,
) -> Result<Shape, TensorError> {
    let sx = tape.shape(x);
    let sy = tape.shape(y);
    if sx != sy {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: sx,
            rhs: sy,
        });
    }
    if sx.c != 1 {
        return Err(TensorError::Geometry {
            op,
            detail: format!("expected single-channel inputs, got {} channels", sx.c),
        });
    }
    Ok(sx)
}

/// Per-pixel SSIM between two single-channel images (batched), built from
/// taped operations and therefore differentiable with respect to both.
pub fn ssim_map<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    params: &SsimParams,
) -> Result<Var, TensorError> {
    check_single_channel("ssim_map", tape, x, y)?;
    let r = params.window_radius;
    let size = 2 * r + 1;
    let weights = gaussian_window::<T>(r, params.gaussian_sigma);
    let wt = Tensor::from_vec(Shape::new(1, 1, size, size), weights)?;
    let spec = ConvSpec::new(1, 1, (size, size)).no_bias();

    let xp = tape.reflect_pad(x, r)?;
    let yp = tape.reflect_pad(y, r)?;
    let w = tape.constant(wt);

    let mu_x = tape.conv2d(xp, &spec, w, None)?;
    let mu_y = tape.conv2d(yp, &spec, w, None)?;
    let xx = tape.mul(xp, xp)?;
    let yy = tape.mul(yp, yp)?;
    let xy = tape.mul(xp, yp)?;
    let e_xx = tape.conv2d(xx, &spec, w, None)?;
    let e_yy = tape.conv2d(yy, &spec, w, None)?;
    let e_xy = tape.conv2d(xy, &spec, w, None)?;

    let mu_x2 = tape.mul(mu_x, mu_x)?;
    let mu_y2 = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_x2)?;
    let var_y = tape.sub(e_yy, mu_y2)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let two = tape.scalar(cast::<T>(2.0));
    let c1 = tape.scalar(cast::<T>(params.c1));
    let c2 = tape.scalar(cast::<T>(params.c2));

    let lum_num = {
        let t = tape.mul(mu_xy, two)?;
        tape.add(t, c1)?
    };
    let struct_num = {
        let t = tape.mul(cov, two)?;
        tape.add(t, c2)?
    };
    let lum_den = {
        let t = tape.add(mu_x2, mu_y2)?;
        tape.add(t, c1)?
    };
    let struct_den = {
        let t = tape.add(var_x, var_y)?;
        tape.add(t, c2)?
    };
    let num = tape.mul(lum_num, struct_num)?;
    let den = tape.mul(lum_den, struct_den)?;
    tape.div(num, den)
}

/// Negative sum of the SSIM map over an already-eroded domain mask. The
/// mask may be (1,1,H,W) (shared across the batch) or (B,1,H,W).
pub fn masked_ssim_sum<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    omega: &Tensor<T>,
    params: &SsimParams,
) -> Result<Var, TensorError> {
    let map = ssim_map(tape, pred, target, params)?;
    let sum = tape.reduce_sum(map, Some(omega))?;
    Ok(tape.neg(sum))
}

/// The reconstruction loss: negative sum of SSIM over the ROI eroded by
/// the window radius. Gradient flows to `pred` only (the target enters as
/// a constant). Returns the loss variable and |Omega|, the number of
/// counted pixels.
pub fn ssim_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    roi: &RoiMask<T>,
    params: &SsimParams,
) -> Result<(Var, usize), TensorError> {
    let omega = roi.erode(params.window_radius);
    if omega.is_empty() {
        return Err(TensorError::EmptyRoi);
    }
    let target = tape.constant(target.clone());
    let loss = masked_ssim_sum(tape, pred, target, omega.tensor(), params)?;
    Ok((loss, omega.count()))
}

/// Summed binary cross-entropy between a prediction in (0,1) and a binary
/// target, with the prediction clamped to [1e-7, 1 - 1e-7] so the loss is
/// finite for saturated sigmoids.
pub fn bce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
) -> Result<Var, TensorError> {
    let sp = tape.shape(pred);
    if sp != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_loss",
            lhs: sp,
            rhs: target.shape(),
        });
    }
    if !target
        .data()
        .iter()
        .all(|&v| v == T::zero() || v == T::one())
    {
        return Err(TensorError::NonBinaryMask { op: "bce_loss" });
    }
    let eps = cast::<T>(1e-7);
    let one = T::one();
    let t = tape.constant(target.clone());
    let t_inv = {
        let data = target.data().iter().map(|&v| one - v).collect();
        let inv = Tensor::from_vec(target.shape(), data)?;
        tape.constant(inv)
    };
    let p = tape.clamp(pred, eps, one - eps);
    let log_p = tape.log(p);
    let pos = tape.mul(t, log_p)?;
    let one_s = tape.scalar(one);
    let neg_p = tape.neg(p);
    let one_minus_p = tape.add(neg_p, one_s)?;
    let log_1p = tape.log(one_minus_p);
    let neg_term = tape.mul(t_inv, log_1p)?;
    let total = tape.add(pos, neg_term)?;
    let sum = tape.reduce_sum(total, None)?;
    Ok(tape.neg(sum))
}
