//! Shared helpers for unit tests: seeded tensors and naive reference
//! implementations kept independent of the production kernels.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::nn::ConvSpec;
use crate::tensor::{cast, Scalar, Shape, Tensor};

pub(crate) fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub(crate) fn rand_tensor<T: Scalar>(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha20Rng) -> Tensor<T> {
    let data = (0..shape.numel())
        .map(|_| cast::<T>(rng.gen_range(lo..hi)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Direct six-nested-loop cross-correlation, the conv oracle.
pub(crate) fn naive_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Tensor<T> {
    let s = x.shape();
    let (oh, ow) = spec.conv_out_size(s.h, s.w).unwrap();
    let mut out = Tensor::zeros(Shape::new(s.b, spec.out_channels, oh, ow));
    let (kh, kw) = spec.kernel;
    for b in 0..s.b {
        for co in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..spec.in_channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = (oy * spec.stride.0 + ky * spec.dilation.0) as isize
                                    - spec.padding.0 as isize;
                                let sx = (ox * spec.stride.1 + kx * spec.dilation.1) as isize
                                    - spec.padding.1 as isize;
                                if sy < 0 || sy >= s.h as isize || sx < 0 || sx >= s.w as isize {
                                    continue;
                                }
                                let xi = ((b * s.c + ci) * s.h + sy as usize) * s.w + sx as usize;
                                let wi = ((co * spec.in_channels + ci) * kh + ky) * kw + kx;
                                acc += x.data()[xi].to_f64().unwrap()
                                    * w.data()[wi].to_f64().unwrap();
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        acc += bv[co].to_f64().unwrap();
                    }
                    let oi = ((b * spec.out_channels + co) * oh + oy) * ow + ox;
                    out.data_mut()[oi] = cast(acc);
                }
            }
        }
    }
    out
}

pub(crate) fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
        .fold(0.0, f64::max)
}
