//! Builders for the five studied architectures: U-Net, FC-DenseNet-56/67/
//! 103, and ENet.

mod densenet;
mod enet;
mod unet;

pub use densenet::build_fc_densenet;
pub use enet::build_enet;
pub use unet::build_unet;

use crate::graph::{Arch, ModelGraph};
use crate::tensor::{Scalar, TensorError};

/// Build a model by architecture tag, as used in checkpoints and the CLI:
/// `unet`, `fcdn56`, `fcdn67`, `fcdn103`, or `enet`.
pub fn build_by_tag<T: Scalar>(tag: &str, base_channels: usize) -> Result<ModelGraph<T>, TensorError> {
    match tag {
        "unet" => Ok(build_unet(base_channels, 4)),
        "fcdn56" => build_fc_densenet(56),
        "fcdn67" => build_fc_densenet(67),
        "fcdn103" => build_fc_densenet(103),
        "enet" => Ok(build_enet()),
        other => Err(TensorError::Geometry {
            op: "build_by_tag",
            detail: format!("unknown architecture '{other}'"),
        }),
    }
}

/// Rebuild the model described by an [`Arch`] value.
pub fn build_arch<T: Scalar>(arch: Arch) -> Result<ModelGraph<T>, TensorError> {
    match arch {
        Arch::Unet {
            base_channels,
            depth,
        } => Ok(build_unet(base_channels, depth)),
        Arch::FcDenseNet { variant } => build_fc_densenet(variant),
        Arch::Enet => Ok(build_enet()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BnMode;
    use crate::tape::Tape;
    use crate::tensor::Shape;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn unet_output_preserves_resolution() {
        let mut g = build_unet::<f32>(8, 4);
        g.init_he(1);
        let mut m = rng(71);
        let input = rand_tensor::<f32>(Shape::new(2, 3, 64, 64), 0.0, 1.0, &mut m);
        let mut tape = Tape::new();
        let run = g.forward(&mut tape, input, BnMode::Eval).unwrap();
        assert_eq!(tape.shape(run.output), Shape::new(2, 1, 64, 64));
    }

    #[test]
    fn unet_channel_doubling_rule() {
        let g = build_unet::<f32>(8, 4);
        // Encoder level 2 second conv outputs 8 * 2^2 = 32 channels.
        let p = g.params.by_name("enc2.conv2.w").unwrap();
        assert_eq!(p.shape, vec![32, 32, 3, 3]);
    }

    #[test]
    fn unet_param_count_scales_quadratically() {
        let big = build_unet::<f32>(64, 4).param_count() as f64;
        let small = build_unet::<f32>(32, 4).param_count() as f64;
        let ratio = big / small;
        assert!((ratio - 4.0).abs() / 4.0 < 0.10, "ratio {ratio}");
    }

    #[test]
    fn densenet_conv_layer_counts_match_variant_names() {
        for variant in [56u32, 67, 103] {
            let g = build_fc_densenet::<f32>(variant).unwrap();
            assert_eq!(g.conv_layer_count() as u32, variant, "variant {variant}");
        }
        assert!(build_fc_densenet::<f32>(42).is_err());
    }

    #[test]
    fn densenet_dense_block_adds_growth_channels() {
        // A single dense layer turns c channels into c + g at the block
        // output; verify through the first down block of FC-DenseNet-56
        // (48 in, 4 layers of growth 12 -> 96).
        let g = build_fc_densenet::<f32>(56).unwrap();
        let head = g.params.by_name("down0.td.conv.w").unwrap();
        assert_eq!(head.shape, vec![96, 96, 1, 1]);
    }

    #[test]
    fn parameter_budgets_follow_the_published_ordering() {
        let unet64 = build_unet::<f32>(64, 4).param_count();
        let fcdn103 = build_fc_densenet::<f32>(103).unwrap().param_count();
        let enet = build_enet::<f32>().param_count();
        assert!(fcdn103 < unet64, "{fcdn103} vs {unet64}");
        assert!(enet * 10 < unet64, "{enet} vs {unet64}");
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_enet::<f32>().structure_summary();
        let b = build_enet::<f32>().structure_summary();
        assert_eq!(a, b);
        let a = build_fc_densenet::<f32>(103).unwrap().structure_summary();
        let b = build_fc_densenet::<f32>(103).unwrap().structure_summary();
        assert_eq!(a, b);
    }

    #[test]
    fn end_to_end_gradient_reaches_first_layer() {
        let mut g = build_unet::<f32>(4, 2);
        g.init_he(5);
        let mut m = rng(72);
        let input = rand_tensor::<f32>(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut m);
        let mut tape = Tape::new();
        let run = g.forward(&mut tape, input, BnMode::Eval).unwrap();
        let loss = tape.reduce_sum(run.output, None).unwrap();
        crate::graph::backward_into(&mut tape, loss, &run, &mut g.params).unwrap();
        let first = g.params.by_name("enc0.conv1.w").unwrap();
        let grad = first.grad.as_ref().expect("gradient populated");
        assert!(grad.iter().any(|&v| v != 0.0));
    }
}
