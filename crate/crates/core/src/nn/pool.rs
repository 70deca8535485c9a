//! Max pooling with argmax-index export and index-based unpooling.

use std::rc::Rc;

use crate::tape::{Op, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

/// Argmax positions exported by [`Tape::maxpool2d`]. Each element is the
/// flat spatial index (y * W + x) of the window maximum within its
/// (batch, channel) plane of the pooling input.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    shape: Shape,
    src_hw: (usize, usize),
    idx: Rc<Vec<u32>>,
}

impl PoolIndices {
    /// Shape of the pooled output the indices belong to.
    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Spatial size of the pooling input.
    pub fn source_size(&self) -> (usize, usize) {
        self.src_hw
    }

    pub fn indices(&self) -> &[u32] {
        &self.idx
    }
}

impl<T: Scalar> Tape<T> {
    /// Per-window maximum with exported argmax indices. Ties break toward
    /// the lowest flat index; gradients flow only to argmax positions.
    pub fn maxpool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<(Var, PoolIndices), TensorError> {
        let s = self.shape(x);
        let (kh, kw) = window;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > s.h || kw > s.w {
            return Err(TensorError::Geometry {
                op: "maxpool2d",
                detail: format!(
                    "window {kh}x{kw} stride {sh}x{sw} does not fit input {}x{}",
                    s.h, s.w
                ),
            });
        }
        let oh = (s.h - kh) / sh + 1;
        let ow = (s.w - kw) / sw + 1;
        let out_shape = Shape::new(s.b, s.c, oh, ow);
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut idx = vec![0u32; out_shape.numel()];
        let xd = self.value(x).data();
        for plane_idx in 0..s.b * s.c {
            let src = &xd[plane_idx * s.plane()..(plane_idx + 1) * s.plane()];
            let obase = plane_idx * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * sh;
                    let x0 = ox * sw;
                    let mut best = src[y0 * s.w + x0];
                    let mut best_idx = (y0 * s.w + x0) as u32;
                    for wy in 0..kh {
                        for wx in 0..kw {
                            let f = (y0 + wy) * s.w + x0 + wx;
                            if src[f] > best {
                                best = src[f];
                                best_idx = f as u32;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    idx[obase + oy * ow + ox] = best_idx;
                }
            }
        }
        let indices = Rc::new(idx);
        let t = Tensor::from_vec(out_shape, out)?;
        let v = self.push_op(
            t,
            Op::MaxPool {
                x,
                indices: Rc::clone(&indices),
            },
        );
        Ok((
            v,
            PoolIndices {
                shape: out_shape,
                src_hw: (s.h, s.w),
                idx: indices,
            },
        ))
    }

    /// Scatter `x` back to the positions recorded by a pooling pass;
    /// everything else is zero. Overlapping targets accumulate, so the
    /// element sum is preserved.
    pub fn max_unpool2d(
        &mut self,
        x: Var,
        indices: &PoolIndices,
        out_size: (usize, usize),
    ) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s != indices.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "max_unpool2d",
                lhs: s,
                rhs: indices.shape(),
            });
        }
        let (oh, ow) = out_size;
        let plane = oh * ow;
        for &i in indices.idx.iter() {
            if i as usize >= plane {
                return Err(TensorError::IndexOutOfRange {
                    op: "max_unpool2d",
                    index: i as usize,
                    bound: plane,
                });
            }
        }
        let out_shape = Shape::new(s.b, s.c, oh, ow);
        let mut out = vec![T::zero(); out_shape.numel()];
        let xd = self.value(x).data();
        for plane_idx in 0..s.b * s.c {
            let src = &xd[plane_idx * s.plane()..(plane_idx + 1) * s.plane()];
            let isrc = &indices.idx[plane_idx * s.plane()..(plane_idx + 1) * s.plane()];
            let dst = &mut out[plane_idx * plane..(plane_idx + 1) * plane];
            for (&v, &i) in src.iter().zip(isrc) {
                dst[i as usize] = dst[i as usize] + v;
            }
        }
        let t = Tensor::from_vec(out_shape, out)?;
        Ok(self.push_op(
            t,
            Op::MaxUnpool {
                x,
                indices: Rc::clone(&indices.idx),
            },
        ))
    }
}
