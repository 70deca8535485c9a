//! Batch normalization with running statistics.

use crate::tape::{Op, Tape, Var};
use crate::tensor::{cast, Scalar, Shape, Tensor, TensorError};

/// Forward mode of [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

impl<T: Scalar> Tape<T> {
    /// Channel-wise batch normalization.
    ///
    /// Train mode normalizes by batch statistics and folds them into the
    /// running buffers with `momentum`; eval mode normalizes by the running
    /// buffers and requires them to have been initialized (by a train-mode
    /// update or a checkpoint load, tracked through `stats_ready`).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        momentum: T,
        eps: T,
        mode: BnMode,
        stats_ready: &mut bool,
    ) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let per_channel = Shape::new(1, s.c, 1, 1);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != per_channel {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: per_channel,
                    rhs: self.shape(v),
                });
            }
        }
        if running_mean.len() != s.c || running_var.len() != s.c {
            return Err(TensorError::Geometry {
                op: "batch_norm",
                detail: format!(
                    "running stats of length {}/{} do not match {} channels",
                    running_mean.len(),
                    running_var.len(),
                    s.c
                ),
            });
        }
        if mode == BnMode::Eval && !*stats_ready {
            return Err(TensorError::StatsNotReady);
        }

        let plane = s.plane();
        let n = s.b * plane;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); s.c];
        let mut inv_std = vec![T::zero(); s.c];
        match mode {
            BnMode::Train => {
                for c in 0..s.c {
                    let mut sum = 0.0f64;
                    let mut sum_sq = 0.0f64;
                    for b in 0..s.b {
                        let base = (b * s.c + c) * plane;
                        for &v in &xd[base..base + plane] {
                            let v = v.to_f64().unwrap();
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let m = sum / n as f64;
                    let var = (sum_sq / n as f64 - m * m).max(0.0);
                    mean[c] = cast(m);
                    inv_std[c] = cast(1.0 / (var + eps.to_f64().unwrap()).sqrt());
                    let one = T::one();
                    running_mean[c] = (one - momentum) * running_mean[c] + momentum * cast(m);
                    running_var[c] = (one - momentum) * running_var[c] + momentum * cast(var);
                }
                *stats_ready = true;
            }
            BnMode::Eval => {
                for c in 0..s.c {
                    mean[c] = running_mean[c];
                    inv_std[c] = T::one() / (running_var[c] + eps).sqrt();
                }
            }
        }

        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..s.b {
            for c in 0..s.c {
                let base = (b * s.c + c) * plane;
                let (m, is, g, be) = (mean[c], inv_std[c], gd[c], bd[c]);
                for i in base..base + plane {
                    out[i] = (xd[i] - m) * is * g + be;
                }
            }
        }
        let t = Tensor::from_vec(s, out)?;
        Ok(self.push_op(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train: mode == BnMode::Train,
            },
        ))
    }
}

/// Backward rule, including the full batch-statistics chain rule in
/// train mode.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Scalar>(
    tape: &Tape<T>,
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    node: usize,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    inv_std: &[T],
    train: bool,
) {
    let _ = node;
    let s = tape.shape(x);
    let plane = s.plane();
    let n = s.b * plane;
    let xd = tape.value(x).data();
    let gd = tape.value(gamma).data();

    // Per-channel reductions shared by all three gradients.
    let mut sum_g = vec![T::zero(); s.c];
    let mut sum_g_xhat = vec![T::zero(); s.c];
    for b in 0..s.b {
        for c in 0..s.c {
            let base = (b * s.c + c) * plane;
            let (m, is) = (mean[c], inv_std[c]);
            let mut a0 = T::zero();
            let mut a1 = T::zero();
            for i in base..base + plane {
                let xhat = (xd[i] - m) * is;
                a0 = a0 + g[i];
                a1 = a1 + g[i] * xhat;
            }
            sum_g[c] = sum_g[c] + a0;
            sum_g_xhat[c] = sum_g_xhat[c] + a1;
        }
    }

    if tape.wants(gamma) {
        let gg = tape.buf(grads, gamma);
        for c in 0..s.c {
            gg[c] = gg[c] + sum_g_xhat[c];
        }
    }
    if tape.wants(beta) {
        let gb = tape.buf(grads, beta);
        for c in 0..s.c {
            gb[c] = gb[c] + sum_g[c];
        }
    }
    if tape.wants(x) {
        let gx = tape.buf(grads, x);
        let n_t = cast::<T>(n as f64);
        for b in 0..s.b {
            for c in 0..s.c {
                let base = (b * s.c + c) * plane;
                let (m, is, ga) = (mean[c], inv_std[c], gd[c]);
                if train {
                    let k = ga * is / n_t;
                    for i in base..base + plane {
                        let xhat = (xd[i] - m) * is;
                        gx[i] = gx[i] + k * (n_t * g[i] - sum_g[c] - xhat * sum_g_xhat[c]);
                    }
                } else {
                    let k = ga * is;
                    for i in base..base + plane {
                        gx[i] = gx[i] + k * g[i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use crate::testutil::{rand_tensor, rng};

    fn gamma_beta(tape: &mut Tape<f64>, c: usize) -> (Var, Var) {
        let g = tape.leaf(Tensor::full(Shape::new(1, c, 1, 1), 1.0));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, c, 1, 1)));
        (g, b)
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut m = rng(51);
        let x = rand_tensor::<f64>(Shape::new(4, 3, 5, 5), -2.0, 3.0, &mut m);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let (g, b) = gamma_beta(&mut tape, 3);
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let mut ready = false;
        let y = tape
            .batch_norm(xv, g, b, &mut rm, &mut rv, 0.1, 1e-5, BnMode::Train, &mut ready)
            .unwrap();
        assert!(ready);
        let yd = tape.value(y).data();
        let n = 4 * 25;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for bb in 0..4 {
                let base = (bb * 3 + c) * 25;
                for &v in &yd[base..base + 25] {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n as f64;
            let var = sq / n as f64 - mean * mean;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn standardized_batch_passes_through() {
        // gamma = 1, beta = 0, batch already ~N(0,1) per channel.
        let mut m = rng(52);
        let mut x = rand_tensor::<f64>(Shape::new(2, 2, 8, 8), -1.0, 1.0, &mut m);
        // Standardize per channel first.
        let plane = 64;
        for c in 0..2 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for b in 0..2 {
                let base = (b * 2 + c) * plane;
                for &v in &x.data()[base..base + plane] {
                    sum += v;
                    sq += v * v;
                }
            }
            let n = (2 * plane) as f64;
            let mean = sum / n;
            let std = (sq / n - mean * mean).sqrt();
            for b in 0..2 {
                let base = (b * 2 + c) * plane;
                for v in &mut x.data_mut()[base..base + plane] {
                    *v = (*v - mean) / std;
                }
            }
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (g, b) = gamma_beta(&mut tape, 2);
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let mut ready = false;
        let y = tape
            .batch_norm(xv, g, b, &mut rm, &mut rv, 0.1, 1e-5, BnMode::Train, &mut ready)
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn eval_before_training_is_rejected_unless_loaded() {
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let (g, b) = gamma_beta(&mut tape, 1);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let mut ready = false;
        let err = tape
            .batch_norm(xv, g, b, &mut rm, &mut rv, 0.1, 1e-5, BnMode::Eval, &mut ready)
            .unwrap_err();
        assert!(matches!(err, TensorError::StatsNotReady));
        // Loaded-from-checkpoint stats flip the flag and eval proceeds.
        ready = true;
        assert!(tape
            .batch_norm(xv, g, b, &mut rm, &mut rv, 0.1, 1e-5, BnMode::Eval, &mut ready)
            .is_ok());
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
        let (g, b) = gamma_beta(&mut tape, 1);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let mut ready = false;
        tape.batch_norm(xv, g, b, &mut rm, &mut rv, 0.1, 1e-5, BnMode::Train, &mut ready)
            .unwrap();
        // mean blends 0.9*0 + 0.1*3; var blends 0.9*1 + 0.1*0.
        assert!((rm[0] - 0.3).abs() < 1e-12);
        assert!((rv[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = rng(53);
        let x0 = rand_tensor::<f64>(Shape::new(2, 4, 3, 3), -1.5, 1.5, &mut m);
        let g0 = rand_tensor::<f64>(Shape::new(1, 4, 1, 1), 0.5, 1.5, &mut m);
        let b0 = rand_tensor::<f64>(Shape::new(1, 4, 1, 1), -0.5, 0.5, &mut m);
        // A per-element projection keeps the loss sensitive to each input;
        // a plain sum of squares of a normalized batch is nearly constant.
        let proj = rand_tensor::<f64>(Shape::new(2, 4, 3, 3), -1.0, 1.0, &mut m);

        for train in [true, false] {
            let mode = if train { BnMode::Train } else { BnMode::Eval };
            let (g1, b1, p1) = (g0.clone(), b0.clone(), proj.clone());
            let err = grad_check(
                move |tape, x| {
                    let g = tape.constant(g1.clone());
                    let b = tape.constant(b1.clone());
                    let p = tape.constant(p1.clone());
                    let mut rm = vec![0.1, -0.2, 0.3, 0.0];
                    let mut rv = vec![1.0, 0.5, 2.0, 1.5];
                    let mut ready = true;
                    let y = tape.batch_norm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5, mode, &mut ready)?;
                    let sq = tape.mul(y, y)?;
                    let w = tape.mul(sq, p)?;
                    tape.reduce_sum(w, None)
                },
                &x0,
                1e-4,
            );
            assert!(err < 1e-6, "input gradient error {err} (train={train})");
        }

        // gamma and beta gradients in train mode.
        let x1 = x0.clone();
        let b1 = b0.clone();
        let err = grad_check(
            move |tape, g| {
                let x = tape.constant(x1.clone());
                let b = tape.constant(b1.clone());
                let mut rm = vec![0.0; 4];
                let mut rv = vec![1.0; 4];
                let mut ready = false;
                let y = tape.batch_norm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5, BnMode::Train, &mut ready)?;
                let sq = tape.mul(y, y)?;
                tape.reduce_sum(sq, None)
            },
            &g0,
            1e-4,
        );
        assert!(err < 1e-6, "gamma gradient error {err}");

        let x1 = x0.clone();
        let g1 = g0.clone();
        let err = grad_check(
            move |tape, b| {
                let x = tape.constant(x1.clone());
                let g = tape.constant(g1.clone());
                let mut rm = vec![0.0; 4];
                let mut rv = vec![1.0; 4];
                let mut ready = false;
                let y = tape.batch_norm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5, BnMode::Train, &mut ready)?;
                let sq = tape.mul(y, y)?;
                tape.reduce_sum(sq, None)
            },
            &b0,
            1e-4,
        );
        assert!(err < 1e-6, "beta gradient error {err}");
    }
}
