//! ENet builder: an initial downsampling block, three contracting stages
//! of residual bottlenecks (with dilated and 5x1/1x5 asymmetric
//! convolutions in stages 2-3), two expanding stages that restore
//! resolution through max-unpooling with the encoder's pooling indices,
//! and a final transposed convolution. PReLU activations throughout.

use crate::graph::{Arch, GraphBuilder, ModelGraph, NodeId};
use crate::nn::ConvSpec;
use crate::tensor::Scalar;

#[derive(Clone, Copy)]
pub(crate) enum Bottleneck {
    Regular,
    Dilated(usize),
    /// 5x1 followed by 1x5.
    Asymmetric,
    /// Halves resolution; the residual path max-pools (exporting indices)
    /// and zero-pads channels.
    Downsample {
        out: usize,
    },
    /// Doubles resolution; the residual path unpools with the indices
    /// recorded by `pool`.
    Upsample {
        out: usize,
        pool: NodeId,
    },
}

/// Append one residual bottleneck; returns (output node, residual pool
/// node if this was a downsampling bottleneck).
pub(crate) fn add_bottleneck<T: Scalar>(
    b: &mut GraphBuilder<T>,
    name: &str,
    x: NodeId,
    kind: Bottleneck,
) -> (NodeId, Option<NodeId>) {
    let c_in = b.channels(x);
    let (c_out, mid) = match kind {
        Bottleneck::Downsample { out } | Bottleneck::Upsample { out, .. } => (out, out / 4),
        _ => (c_in, c_in / 4),
    };
    let mid = mid.max(4);

    // Main branch: project down, spatial conv, project up; BN after every
    // convolution, PReLU between them.
    let mut h = match kind {
        Bottleneck::Downsample { .. } => b.conv(
            &format!("{name}.proj_down"),
            x,
            ConvSpec::new(c_in, mid, (2, 2)).stride((2, 2)).no_bias(),
        ),
        _ => b.conv(
            &format!("{name}.proj_down"),
            x,
            ConvSpec::new(c_in, mid, (1, 1)).no_bias(),
        ),
    };
    h = b.batch_norm(&format!("{name}.bn1"), h);
    h = b.prelu(&format!("{name}.act1"), h);

    h = match kind {
        Bottleneck::Regular | Bottleneck::Downsample { .. } => b.conv(
            &format!("{name}.spatial"),
            h,
            ConvSpec::new(mid, mid, (3, 3)).padding((1, 1)).no_bias(),
        ),
        Bottleneck::Dilated(d) => b.conv(
            &format!("{name}.spatial"),
            h,
            ConvSpec::new(mid, mid, (3, 3))
                .padding((d, d))
                .dilation((d, d))
                .no_bias(),
        ),
        Bottleneck::Asymmetric => {
            let v = b.conv(
                &format!("{name}.spatial_v"),
                h,
                ConvSpec::new(mid, mid, (5, 1)).padding((2, 0)).no_bias(),
            );
            b.conv(
                &format!("{name}.spatial_h"),
                v,
                ConvSpec::new(mid, mid, (1, 5)).padding((0, 2)).no_bias(),
            )
        }
        Bottleneck::Upsample { .. } => b.tconv(
            &format!("{name}.spatial"),
            h,
            ConvSpec::new(mid, mid, (2, 2)).stride((2, 2)).no_bias(),
        ),
    };
    h = b.batch_norm(&format!("{name}.bn2"), h);
    h = b.prelu(&format!("{name}.act2"), h);

    h = b.conv(
        &format!("{name}.proj_up"),
        h,
        ConvSpec::new(mid, c_out, (1, 1)).no_bias(),
    );
    h = b.batch_norm(&format!("{name}.bn3"), h);

    // Residual branch.
    let mut pool_node = None;
    let skip = match kind {
        Bottleneck::Regular | Bottleneck::Dilated(_) | Bottleneck::Asymmetric => x,
        Bottleneck::Downsample { out } => {
            let p = b.maxpool(&format!("{name}.skip_pool"), x);
            pool_node = Some(p);
            if out > c_in {
                b.zero_pad_channels(&format!("{name}.skip_pad"), p, out - c_in)
            } else {
                p
            }
        }
        Bottleneck::Upsample { out, pool } => {
            let proj = b.conv(
                &format!("{name}.skip_proj"),
                x,
                ConvSpec::new(c_in, out, (1, 1)).no_bias(),
            );
            let bn = b.batch_norm(&format!("{name}.skip_bn"), proj);
            b.unpool(&format!("{name}.skip_unpool"), bn, pool)
        }
    };
    let sum = b.add(&format!("{name}.add"), h, skip);
    let out = b.prelu(&format!("{name}.act_out"), sum);
    (out, pool_node)
}

/// Build the ENet graph (seven stages, 1-channel sigmoid output).
pub fn build_enet<T: Scalar>() -> ModelGraph<T> {
    let mut b = GraphBuilder::new(3);
    let x = b.input();

    // Initial stage: parallel 3x3/s2 convolution and max-pool, concatenated
    // to 16 channels.
    let conv = b.conv(
        "initial.conv",
        x,
        ConvSpec::new(3, 13, (3, 3)).stride((2, 2)).padding((1, 1)).no_bias(),
    );
    let pool = b.maxpool("initial.pool", x);
    let cat = b.concat("initial.cat", conv, pool);
    let bn = b.batch_norm("initial.bn", cat);
    let mut cur = b.prelu("initial.act", bn);

    // Stage 1: downsample to 64 channels, then four regular bottlenecks.
    let (c, pool1) = add_bottleneck(&mut b, "stage1.b0", cur, Bottleneck::Downsample { out: 64 });
    cur = c;
    for i in 1..=4 {
        cur = add_bottleneck(&mut b, &format!("stage1.b{i}"), cur, Bottleneck::Regular).0;
    }

    // Stages 2-3: dilated (2, 4, 8, 16) and asymmetric bottlenecks at 128
    // channels; stage 2 starts with a downsample.
    let (c, pool2) = add_bottleneck(&mut b, "stage2.b0", cur, Bottleneck::Downsample { out: 128 });
    cur = c;
    let pattern = [
        Bottleneck::Regular,
        Bottleneck::Dilated(2),
        Bottleneck::Asymmetric,
        Bottleneck::Dilated(4),
        Bottleneck::Regular,
        Bottleneck::Dilated(8),
        Bottleneck::Asymmetric,
        Bottleneck::Dilated(16),
    ];
    for (i, kind) in pattern.iter().enumerate() {
        cur = add_bottleneck(&mut b, &format!("stage2.b{}", i + 1), cur, *kind).0;
    }
    for (i, kind) in pattern.iter().enumerate() {
        cur = add_bottleneck(&mut b, &format!("stage3.b{}", i + 1), cur, *kind).0;
    }

    // Stage 4: upsample to 64 using stage 2's pooling indices.
    cur = add_bottleneck(
        &mut b,
        "stage4.b0",
        cur,
        Bottleneck::Upsample {
            out: 64,
            pool: pool2.expect("stage2 downsamples"),
        },
    )
    .0;
    for i in 1..=2 {
        cur = add_bottleneck(&mut b, &format!("stage4.b{i}"), cur, Bottleneck::Regular).0;
    }

    // Stage 5: upsample to 16 using stage 1's pooling indices.
    cur = add_bottleneck(
        &mut b,
        "stage5.b0",
        cur,
        Bottleneck::Upsample {
            out: 16,
            pool: pool1.expect("stage1 downsamples"),
        },
    )
    .0;
    cur = add_bottleneck(&mut b, "stage5.b1", cur, Bottleneck::Regular).0;

    // Final stage: transposed convolution back to full resolution.
    let head = b.tconv(
        "final.tconv",
        cur,
        ConvSpec::new(16, 1, (2, 2)).stride((2, 2)),
    );
    b.sigmoid("final.sigmoid", head);
    b.finish(Arch::Enet, 3, 8)
}
