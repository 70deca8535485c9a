//! 2D convolution and transposed convolution via im2col + GEMM.
//!
//! The transposed convolution is implemented through its duality with
//! convolution: its forward pass is the input-gradient of the dual conv,
//! its input gradient is the dual conv's forward pass, and its weight
//! gradient reuses the same column matrix.

use crate::tape::{Op, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

/// Geometry of a (transposed) convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            bias: true,
        }
    }

    pub fn stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: (usize, usize)) -> Self {
        self.dilation = d;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn out_extent(in_: usize, k: usize, s: usize, p: usize, d: usize) -> isize {
        let num = in_ as isize + 2 * p as isize - (d * (k - 1)) as isize - 1;
        num.div_euclid(s as isize) + 1
    }

    /// Output spatial size of the forward convolution.
    pub fn conv_out_size(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        let oh = Self::out_extent(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let ow = Self::out_extent(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        if oh < 1 || ow < 1 {
            return Err(TensorError::Geometry {
                op: "conv2d",
                detail: format!(
                    "input {h}x{w} with kernel {:?} stride {:?} padding {:?} dilation {:?} \
                     yields non-positive output {oh}x{ow}",
                    self.kernel, self.stride, self.padding, self.dilation
                ),
            });
        }
        Ok((oh as usize, ow as usize))
    }

    /// Output spatial size of the transposed convolution.
    pub fn tconv_out_size(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        let ext = |in_: usize, k: usize, s: usize, p: usize, d: usize| {
            (in_ as isize - 1) * s as isize - 2 * p as isize + (d * (k - 1)) as isize + 1
        };
        let oh = ext(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let ow = ext(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        if oh < 1 || ow < 1 {
            return Err(TensorError::Geometry {
                op: "transposed_conv2d",
                detail: format!(
                    "input {h}x{w} with kernel {:?} stride {:?} padding {:?} dilation {:?} \
                     yields non-positive output {oh}x{ow}",
                    self.kernel, self.stride, self.padding, self.dilation
                ),
            });
        }
        Ok((oh as usize, ow as usize))
    }
}

/// Per-plane im2col/col2im geometry.
#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dh: usize,
    dw: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geom(spec: &ConvSpec, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Geom {
    Geom {
        c,
        h,
        w,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        sh: spec.stride.0,
        sw: spec.stride.1,
        ph: spec.padding.0,
        pw: spec.padding.1,
        dh: spec.dilation.0,
        dw: spec.dilation.1,
        oh,
        ow,
    }
}

/// Unfold one (C,H,W) plane into a (C*kh*kw, oh*ow) row-major matrix.
fn im2col<T: Scalar>(src: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let splane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let oy_off = (ki * g.dh) as isize - g.ph as isize;
                let ox_off = (kj * g.dw) as isize - g.pw as isize;
                let (lo, hi) = valid_range(g.ow, g.sw, ox_off, g.w);
                for oy in 0..g.oh {
                    let sy = oy as isize * g.sh as isize + oy_off;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if sy < 0 || sy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &splane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if hi <= lo {
                        continue;
                    }
                    if g.sw == 1 {
                        let s0 = (lo as isize + ox_off) as usize;
                        dst[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = srow[(ox as isize * g.sw as isize + ox_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold a column matrix back into one (C,H,W) plane, accumulating.
fn col2im_add<T: Scalar>(cols: &[T], g: &Geom, dst: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let dplane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let oy_off = (ki * g.dh) as isize - g.ph as isize;
                let ox_off = (kj * g.dw) as isize - g.pw as isize;
                let (lo, hi) = valid_range(g.ow, g.sw, ox_off, g.w);
                for oy in 0..g.oh {
                    let sy = oy as isize * g.sh as isize + oy_off;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let srow = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dbase = sy as usize * g.w;
                    for ox in lo..hi {
                        let sx = (ox as isize * g.sw as isize + ox_off) as usize;
                        dplane[dbase + sx] = dplane[dbase + sx] + srow[ox];
                    }
                }
            }
        }
    }
}

/// Range of output columns whose source `ox*sw + off` lies in [0, w).
fn valid_range(ow: usize, sw: usize, off: isize, w: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        (((-off) as usize + sw - 1) / sw).min(ow)
    };
    let hi_isize = (w as isize - 1 - off).div_euclid(sw as isize) + 1;
    let hi = hi_isize.clamp(0, ow as isize) as usize;
    (lo, hi.max(lo))
}

/// A @ B with row-major slices: A (m,k), B (k,n), C (m,n) with `beta` blend.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_weights<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
    transposed: bool,
) -> Result<(), TensorError> {
    let expect = if transposed {
        Shape::new(
            spec.in_channels,
            spec.out_channels,
            spec.kernel.0,
            spec.kernel.1,
        )
    } else {
        Shape::new(
            spec.out_channels,
            spec.in_channels,
            spec.kernel.0,
            spec.kernel.1,
        )
    };
    if w.shape() != expect {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: expect,
            rhs: w.shape(),
        });
    }
    if x.shape().c != spec.in_channels {
        return Err(TensorError::Geometry {
            op,
            detail: format!(
                "input has {} channels, spec expects {}",
                x.shape().c,
                spec.in_channels
            ),
        });
    }
    if let Some(b) = bias {
        let expect = Shape::new(1, spec.out_channels, 1, 1);
        if b.shape() != expect {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: expect,
                rhs: b.shape(),
            });
        }
    }
    Ok(())
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, TensorError> {
    check_weights("conv2d", x, w, bias, spec, false)?;
    let s = x.shape();
    let (oh, ow) = spec.conv_out_size(s.h, s.w)?;
    let g = conv_geom(spec, s.c, s.h, s.w, oh, ow);
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros(Shape::new(s.b, spec.out_channels, oh, ow));
    let mut cols = vec![T::zero(); k * p];
    for b in 0..s.b {
        im2col(&x.data()[b * s.c * s.plane()..], &g, &mut cols);
        let dst = &mut out.data_mut()[b * spec.out_channels * p..(b + 1) * spec.out_channels * p];
        gemm(
            spec.out_channels,
            k,
            p,
            w.data(),
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            T::zero(),
            dst,
        );
        if let Some(bt) = bias {
            for (co, &bv) in bt.data().iter().enumerate() {
                for v in dst[co * p..(co + 1) * p].iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn tconv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, TensorError> {
    check_weights("transposed_conv2d", x, w, bias, spec, true)?;
    let s = x.shape();
    let (oh, ow) = spec.tconv_out_size(s.h, s.w)?;
    // Dual convolution runs over the (larger) output plane.
    let g = conv_geom(spec, spec.out_channels, oh, ow, s.h, s.w);
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros(Shape::new(s.b, spec.out_channels, oh, ow));
    let mut cols = vec![T::zero(); k * p];
    for b in 0..s.b {
        // cols = W^T (K x in_c) @ x_b (in_c x P)
        gemm(
            k,
            spec.in_channels,
            p,
            w.data(),
            1,
            k as isize,
            &x.data()[b * s.c * p..(b + 1) * s.c * p],
            p as isize,
            1,
            T::zero(),
            &mut cols,
        );
        let dst = &mut out.data_mut()[b * spec.out_channels * oh * ow..];
        col2im_add(&cols, &g, dst);
        if let Some(bt) = bias {
            let plane = oh * ow;
            for (co, &bv) in bt.data().iter().enumerate() {
                for v in dst[co * plane..(co + 1) * plane].iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weights: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Backward pass shared by conv2d and transposed_conv2d.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &[T],
    out_shape: Shape,
    spec: &ConvSpec,
    transposed: bool,
    want_input: bool,
    want_weights: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let sx = x.shape();
    let mut grads = ConvGrads {
        input: want_input.then(|| vec![T::zero(); x.numel()]),
        weights: want_weights.then(|| vec![T::zero(); w.numel()]),
        bias: want_bias.then(|| vec![T::zero(); spec.out_channels]),
    };
    if let Some(gb) = grads.bias.as_deref_mut() {
        let plane = out_shape.plane();
        for b in 0..out_shape.b {
            for co in 0..spec.out_channels {
                let base = (b * spec.out_channels + co) * plane;
                let mut acc = T::zero();
                for &v in &gy[base..base + plane] {
                    acc = acc + v;
                }
                gb[co] = gb[co] + acc;
            }
        }
    }
    if !want_input && !want_weights {
        return grads;
    }
    if !transposed {
        let g = conv_geom(spec, sx.c, sx.h, sx.w, out_shape.h, out_shape.w);
        let (k, p) = (g.k(), g.p());
        let mut cols = vec![T::zero(); k * p];
        let mut gcols = if want_input {
            vec![T::zero(); k * p]
        } else {
            Vec::new()
        };
        for b in 0..sx.b {
            let gy_b = &gy[b * spec.out_channels * p..(b + 1) * spec.out_channels * p];
            if want_weights {
                im2col(&x.data()[b * sx.c * sx.plane()..], &g, &mut cols);
                // gw (out_c, K) += gy_b (out_c, P) @ cols^T (P, K)
                gemm(
                    spec.out_channels,
                    p,
                    k,
                    gy_b,
                    p as isize,
                    1,
                    &cols,
                    1,
                    p as isize,
                    T::one(),
                    grads.weights.as_deref_mut().unwrap(),
                );
            }
            if want_input {
                // gcols (K, P) = W^T (K, out_c) @ gy_b (out_c, P)
                gemm(
                    k,
                    spec.out_channels,
                    p,
                    w.data(),
                    1,
                    k as isize,
                    gy_b,
                    p as isize,
                    1,
                    T::zero(),
                    &mut gcols,
                );
                col2im_add(
                    &gcols,
                    &g,
                    &mut grads.input.as_deref_mut().unwrap()[b * sx.c * sx.plane()..],
                );
            }
        }
    } else {
        // Dual convolution over the (larger) output plane.
        let g = conv_geom(spec, spec.out_channels, out_shape.h, out_shape.w, sx.h, sx.w);
        let (k, p) = (g.k(), g.p());
        let mut cols = vec![T::zero(); k * p];
        for b in 0..sx.b {
            let gy_b = &gy[b * spec.out_channels * out_shape.plane()..];
            im2col(gy_b, &g, &mut cols);
            if want_input {
                // gx_b (in_c, P) = W (in_c, K) @ cols (K, P)
                gemm(
                    spec.in_channels,
                    k,
                    p,
                    w.data(),
                    k as isize,
                    1,
                    &cols,
                    p as isize,
                    1,
                    T::zero(),
                    &mut grads.input.as_deref_mut().unwrap()
                        [b * sx.c * sx.plane()..(b + 1) * sx.c * sx.plane()],
                );
            }
            if want_weights {
                // gw (in_c, K) += x_b (in_c, P) @ cols^T (P, K)
                gemm(
                    spec.in_channels,
                    p,
                    k,
                    &x.data()[b * sx.c * sx.plane()..(b + 1) * sx.c * sx.plane()],
                    p as isize,
                    1,
                    &cols,
                    1,
                    p as isize,
                    T::one(),
                    grads.weights.as_deref_mut().unwrap(),
                );
            }
        }
    }
    grads
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation with the given stride/padding/dilation.
    pub fn conv2d(
        &mut self,
        x: Var,
        spec: &ConvSpec,
        w: Var,
        bias: Option<Var>,
    ) -> Result<Var, TensorError> {
        let out = conv_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        Ok(self.push_op(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                spec: *spec,
            },
        ))
    }

    /// Fractionally-strided convolution; forward equals the input-gradient
    /// of the dual [`Tape::conv2d`] with the same weights.
    pub fn transposed_conv2d(
        &mut self,
        x: Var,
        spec: &ConvSpec,
        w: Var,
        bias: Option<Var>,
    ) -> Result<Var, TensorError> {
        let out = tconv_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        Ok(self.push_op(
            out,
            Op::TConv2d {
                x,
                w,
                bias,
                spec: *spec,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use crate::testutil::{max_abs_diff, naive_conv, rand_tensor, rng};

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let spec = ConvSpec::new(1, 1, (3, 3)).no_bias();
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = tape.conv2d(x, &spec, w, None).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 1, 1));
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::<f32>::new();
        let mut m = rng(2);
        let x_t = rand_tensor::<f32>(Shape::new(2, 1, 5, 5), -1.0, 1.0, &mut m);
        let x = tape.leaf(x_t.clone());
        let spec = ConvSpec::new(1, 1, (1, 1)).no_bias();
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let y = tape.conv2d(x, &spec, w, None).unwrap();
        assert_eq!(tape.value(y).data(), x_t.data());
    }

    #[test]
    fn dilated_conv_matches_naive_loop_oracle() {
        let mut m = rng(31);
        let x = rand_tensor::<f32>(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut m);
        let spec = ConvSpec::new(2, 3, (3, 3)).dilation((2, 2)).padding((2, 2));
        let w = rand_tensor::<f32>(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut m);
        let b = rand_tensor::<f32>(Shape::new(1, 3, 1, 1), -0.5, 0.5, &mut m);
        let expect = naive_conv(&x, &w, Some(b.data()), &spec);
        let got = conv_forward(&x, &w, Some(&b), &spec).unwrap();
        assert!(max_abs_diff(&expect, &got) < 1e-5);
    }

    #[test]
    fn strided_asymmetric_conv_matches_naive_loop_oracle() {
        let mut m = rng(32);
        let x = rand_tensor::<f32>(Shape::new(2, 3, 9, 7), -1.0, 1.0, &mut m);
        let spec = ConvSpec::new(3, 4, (5, 1))
            .stride((2, 1))
            .padding((2, 0))
            .no_bias();
        let w = rand_tensor::<f32>(Shape::new(4, 3, 5, 1), -1.0, 1.0, &mut m);
        let expect = naive_conv(&x, &w, None, &spec);
        let got = conv_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(expect.shape(), got.shape());
        assert!(max_abs_diff(&expect, &got) < 1e-5);
    }

    #[test]
    fn conv_rejects_non_positive_output_geometry() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let spec = ConvSpec::new(1, 1, (5, 5));
        let w = tape.leaf(Tensor::zeros(Shape::new(1, 1, 5, 5)));
        let err = tape.conv2d(x, &spec, w, None).unwrap_err();
        assert!(err.to_string().contains("non-positive"), "{err}");
    }

    #[test]
    fn tconv_identity_kernel_stride_one() {
        let mut tape = Tape::<f32>::new();
        let mut m = rng(4);
        let x_t = rand_tensor::<f32>(Shape::new(1, 1, 4, 4), -1.0, 1.0, &mut m);
        let x = tape.leaf(x_t.clone());
        let spec = ConvSpec::new(1, 1, (1, 1)).no_bias();
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let y = tape.transposed_conv2d(x, &spec, w, None).unwrap();
        assert_eq!(tape.value(y).data(), x_t.data());
    }

    #[test]
    fn tconv_stride_two_places_disjoint_kernel_copies() {
        // Explicit sparse oracle: each input value scales its own copy of
        // the kernel into a disjoint 2x2 block.
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let spec = ConvSpec::new(1, 1, (2, 2)).stride((2, 2)).no_bias();
        let w = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![10.0, 20.0, 30.0, 40.0]).unwrap(),
        );
        let y = tape.transposed_conv2d(x, &spec, w, None).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 4, 4));
        let mut expect = vec![0.0f32; 16];
        for (i, &v) in [1.0f32, 2.0, 3.0, 4.0].iter().enumerate() {
            let (by, bx) = (i / 2 * 2, i % 2 * 2);
            for ky in 0..2 {
                for kx in 0..2 {
                    expect[(by + ky) * 4 + bx + kx] = v * [10.0, 20.0, 30.0, 40.0][ky * 2 + kx];
                }
            }
        }
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn tconv_forward_equals_conv_input_gradient() {
        // Duality oracle: transposed_conv2d(x) == d/dinput of conv2d at the
        // same weights, evaluated via the conv backward kernel.
        let mut m = rng(33);
        let x = rand_tensor::<f32>(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut m);
        let spec = ConvSpec::new(3, 2, (3, 3)).stride((2, 2)).padding((1, 1)).no_bias();
        // tconv weights (in=3, out=2, kh, kw); the dual conv maps 2 -> 3.
        let w = rand_tensor::<f32>(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut m);
        let tf = tconv_forward(&x, &w, None, &spec).unwrap();

        let dual = ConvSpec::new(2, 3, (3, 3)).stride((2, 2)).padding((1, 1)).no_bias();
        let dual_input = Tensor::<f32>::zeros(tf.shape());
        let grads = conv_backward(
            &dual_input,
            &w,
            x.data(),
            x.shape(),
            &dual,
            false,
            true,
            false,
            false,
        );
        let gx = Tensor::from_vec(tf.shape(), grads.input.unwrap()).unwrap();
        assert!(max_abs_diff(&tf, &gx) < 1e-5);
    }

    #[test]
    fn tconv_rejects_non_positive_output_geometry() {
        let spec = ConvSpec::new(1, 1, (2, 2)).padding((3, 3));
        assert!(spec.tconv_out_size(2, 2).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut m = rng(35);
        let x0 = rand_tensor::<f64>(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut m);
        let w0 = rand_tensor::<f64>(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut m);
        let b0 = rand_tensor::<f64>(Shape::new(1, 3, 1, 1), -0.5, 0.5, &mut m);
        let spec = ConvSpec::new(2, 3, (3, 3)).stride((2, 2)).padding((1, 1));

        // d loss / d input
        let w1 = w0.clone();
        let b1 = b0.clone();
        let err = grad_check(
            move |tape, x| {
                let w = tape.constant(w1.clone());
                let b = tape.constant(b1.clone());
                let y = tape.conv2d(x, &spec, w, Some(b))?;
                let sq = tape.mul(y, y)?;
                tape.reduce_sum(sq, None)
            },
            &x0,
            1e-5,
        );
        assert!(err < 1e-7, "input gradient error {err}");

        // d loss / d weights
        let x1 = x0.clone();
        let b1 = b0.clone();
        let err = grad_check(
            move |tape, w| {
                let x = tape.constant(x1.clone());
                let b = tape.constant(b1.clone());
                let y = tape.conv2d(x, &spec, w, Some(b))?;
                let sq = tape.mul(y, y)?;
                tape.reduce_sum(sq, None)
            },
            &w0,
            1e-5,
        );
        assert!(err < 1e-7, "weight gradient error {err}");

        // d loss / d bias
        let x1 = x0.clone();
        let w1 = w0.clone();
        let err = grad_check(
            move |tape, b| {
                let x = tape.constant(x1.clone());
                let w = tape.constant(w1.clone());
                let y = tape.conv2d(x, &spec, w, Some(b))?;
                let sq = tape.mul(y, y)?;
                tape.reduce_sum(sq, None)
            },
            &b0,
            1e-5,
        );
        assert!(err < 1e-7, "bias gradient error {err}");
    }

    #[test]
    fn tconv_gradients_match_finite_differences() {
        let mut m = rng(36);
        let x0 = rand_tensor::<f64>(Shape::new(1, 3, 3, 4), -1.0, 1.0, &mut m);
        let w0 = rand_tensor::<f64>(Shape::new(3, 2, 2, 2), -1.0, 1.0, &mut m);
        let spec = ConvSpec::new(3, 2, (2, 2)).stride((2, 2)).no_bias();

        let w1 = w0.clone();
        let err = grad_check(
            move |tape, x| {
                let w = tape.constant(w1.clone());
                let y = tape.transposed_conv2d(x, &spec, w, None)?;
                let sq = tape.mul(y, y)?;
                tape.reduce_sum(sq, None)
            },
            &x0,
            1e-5,
        );
        assert!(err < 1e-7, "input gradient error {err}");

        let x1 = x0.clone();
        let err = grad_check(
            move |tape, w| {
                let x = tape.constant(x1.clone());
                let y = tape.transposed_conv2d(x, &spec, w, None)?;
                let sq = tape.mul(y, y)?;
                tape.reduce_sum(sq, None)
            },
            &w0,
            1e-5,
        );
        assert!(err < 1e-7, "weight gradient error {err}");
    }
}
