//! U-Net builder: symmetric encoder-decoder with skip connections.
//! Each encoder level holds two 3x3 conv + ReLU pairs and doubles the
//! channel width before a 2x2 max-pool; the decoder mirrors it with 2x2
//! stride-2 transposed convolutions and skip concatenations.

use crate::graph::{Arch, GraphBuilder, ModelGraph, NodeId};
use crate::nn::ConvSpec;
use crate::tensor::Scalar;

fn conv_block<T: Scalar>(
    b: &mut GraphBuilder<T>,
    name: &str,
    x: NodeId,
    out_c: usize,
) -> NodeId {
    let in_c = b.channels(x);
    let c1 = b.conv(
        &format!("{name}.conv1"),
        x,
        ConvSpec::new(in_c, out_c, (3, 3)).padding((1, 1)),
    );
    let r1 = b.relu(&format!("{name}.relu1"), c1);
    let c2 = b.conv(
        &format!("{name}.conv2"),
        r1,
        ConvSpec::new(out_c, out_c, (3, 3)).padding((1, 1)),
    );
    b.relu(&format!("{name}.relu2"), c2)
}

/// Build a U-Net with `base_channels` first-level width and `depth`
/// pooling levels. The published configuration is base_channels = 64,
/// depth = 4.
pub fn build_unet<T: Scalar>(base_channels: usize, depth: usize) -> ModelGraph<T> {
    assert!(base_channels >= 1 && depth >= 1);
    let mut b = GraphBuilder::new(3);
    let mut cur = b.input();
    let mut skips = Vec::with_capacity(depth);
    for level in 0..depth {
        let c = base_channels << level;
        cur = conv_block(&mut b, &format!("enc{level}"), cur, c);
        skips.push(cur);
        cur = b.maxpool(&format!("enc{level}.pool"), cur);
    }
    cur = conv_block(&mut b, "bottleneck", cur, base_channels << depth);
    for level in (0..depth).rev() {
        let c = base_channels << level;
        let in_c = b.channels(cur);
        cur = b.tconv(
            &format!("dec{level}.up"),
            cur,
            ConvSpec::new(in_c, c, (2, 2)).stride((2, 2)),
        );
        cur = b.concat(&format!("dec{level}.skip"), cur, skips[level]);
        cur = conv_block(&mut b, &format!("dec{level}"), cur, c);
    }
    let head = b.conv(
        "head.conv",
        cur,
        ConvSpec::new(base_channels, 1, (1, 1)),
    );
    b.sigmoid("head.sigmoid", head);
    b.finish(
        Arch::Unet {
            base_channels,
            depth,
        },
        3,
        1 << depth,
    )
}
