//! Activation dispatcher.

use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, TensorError};

/// Nonlinearity selector. PReLU carries a learnable per-channel slope.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    PRelu,
    Sigmoid,
}

impl<T: Scalar> Tape<T> {
    /// Apply an activation; `slope` is required for (and only for) PReLU.
    pub fn activation(
        &mut self,
        x: Var,
        kind: Activation,
        slope: Option<Var>,
    ) -> Result<Var, TensorError> {
        match kind {
            Activation::Relu => Ok(self.relu(x)),
            Activation::Sigmoid => Ok(self.sigmoid(x)),
            Activation::PRelu => {
                let slope = slope.ok_or(TensorError::Geometry {
                    op: "activation",
                    detail: "prelu requires a per-channel slope parameter".into(),
                })?;
                self.prelu(x, slope)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use crate::tensor::{Shape, Tensor};
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap(),
        );
        let y = tape.activation(x, Activation::Relu, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn prelu_with_unit_slope_is_identity() {
        let mut tape = Tape::<f32>::new();
        let mut m = rng(61);
        let x_t = rand_tensor::<f32>(Shape::new(2, 3, 4, 4), -2.0, 2.0, &mut m);
        let x = tape.leaf(x_t.clone());
        let slope = tape.leaf(Tensor::full(Shape::new(1, 3, 1, 1), 1.0));
        let y = tape.activation(x, Activation::PRelu, Some(slope)).unwrap();
        assert_eq!(tape.value(y).data(), x_t.data());
    }

    #[test]
    fn prelu_requires_slope() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(tape.activation(x, Activation::PRelu, None).is_err());
    }

    #[test]
    fn prelu_slope_gradient_matches_finite_differences() {
        let mut m = rng(62);
        let x0 = rand_tensor::<f64>(Shape::new(2, 3, 4, 4), -2.0, 2.0, &mut m);
        let s0 = rand_tensor::<f64>(Shape::new(1, 3, 1, 1), 0.1, 0.4, &mut m);

        let x1 = x0.clone();
        let err = grad_check(
            move |tape, s| {
                let x = tape.constant(x1.clone());
                let y = tape.prelu(x, s)?;
                let sq = tape.mul(y, y)?;
                tape.reduce_sum(sq, None)
            },
            &s0,
            1e-6,
        );
        assert!(err < 1e-7, "slope gradient error {err}");

        let s1 = s0.clone();
        let err = grad_check(
            move |tape, x| {
                let s = tape.constant(s1.clone());
                let y = tape.prelu(x, s)?;
                let sq = tape.mul(y, y)?;
                tape.reduce_sum(sq, None)
            },
            &x0,
            1e-6,
        );
        assert!(err < 1e-6, "input gradient error {err}");
    }
}
