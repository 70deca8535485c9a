//! FC-DenseNet builder. Dense blocks stack 3x3 conv -> BN -> ReLU layers,
//! each contributing `growth` channels that are concatenated to every
//! subsequent layer of the block. Transitions down are a 1x1 conv followed
//! by 2x2 max-pooling; transitions up are 2x2 stride-2 transposed
//! convolutions carrying only the block's new feature maps.

use crate::graph::{Arch, GraphBuilder, ModelGraph, NodeId};
use crate::nn::ConvSpec;
use crate::tensor::{Scalar, TensorError};

struct Layout {
    growth: usize,
    down: Vec<usize>,
    bottleneck: usize,
    up: Vec<usize>,
}

fn layout(variant: u32) -> Option<Layout> {
    match variant {
        56 => Some(Layout {
            growth: 12,
            down: vec![4; 5],
            bottleneck: 4,
            up: vec![4; 5],
        }),
        67 => Some(Layout {
            growth: 16,
            down: vec![5; 5],
            bottleneck: 5,
            up: vec![5; 5],
        }),
        103 => Some(Layout {
            growth: 16,
            down: vec![4, 5, 7, 10, 12],
            bottleneck: 15,
            up: vec![12, 10, 7, 5, 4],
        }),
        _ => None,
    }
}

/// Outputs of one dense block: the full concatenation (input plus all new
/// features) and the new features alone.
struct BlockOut {
    full: NodeId,
    new: NodeId,
}

fn dense_block<T: Scalar>(
    b: &mut GraphBuilder<T>,
    name: &str,
    x: NodeId,
    layers: usize,
    growth: usize,
) -> BlockOut {
    let mut acc = x;
    let mut new: Option<NodeId> = None;
    for i in 0..layers {
        let in_c = b.channels(acc);
        let conv = b.conv(
            &format!("{name}.layer{i}.conv"),
            acc,
            ConvSpec::new(in_c, growth, (3, 3)).padding((1, 1)).no_bias(),
        );
        let bn = b.batch_norm(&format!("{name}.layer{i}.bn"), conv);
        let out = b.relu(&format!("{name}.layer{i}.relu"), bn);
        new = Some(match new {
            None => out,
            Some(prev) => b.concat(&format!("{name}.layer{i}.cat_new"), prev, out),
        });
        acc = b.concat(&format!("{name}.layer{i}.cat"), acc, out);
    }
    BlockOut {
        full: acc,
        new: new.expect("at least one layer"),
    }
}

/// Build an FC-DenseNet variant (56, 67, or 103 convolutional layers).
pub fn build_fc_densenet<T: Scalar>(variant: u32) -> Result<ModelGraph<T>, TensorError> {
    let layout = layout(variant).ok_or(TensorError::Geometry {
        op: "build_fc_densenet",
        detail: format!("unknown variant {variant}; expected 56, 67 or 103"),
    })?;
    let mut b = GraphBuilder::new(3);
    let x = b.input();
    let mut cur = b.conv(
        "first.conv",
        x,
        ConvSpec::new(3, 48, (3, 3)).padding((1, 1)),
    );
    let mut skips = Vec::new();
    for (i, &layers) in layout.down.iter().enumerate() {
        let block = dense_block(&mut b, &format!("down{i}"), cur, layers, layout.growth);
        skips.push(block.full);
        let c = b.channels(block.full);
        let td = b.conv(
            &format!("down{i}.td.conv"),
            block.full,
            ConvSpec::new(c, c, (1, 1)),
        );
        cur = b.maxpool(&format!("down{i}.td.pool"), td);
    }
    let bottleneck = dense_block(&mut b, "bottleneck", cur, layout.bottleneck, layout.growth);
    let mut carried = bottleneck.new;
    for (i, &layers) in layout.up.iter().enumerate() {
        let c = b.channels(carried);
        let tu = b.tconv(
            &format!("up{i}.tu"),
            carried,
            ConvSpec::new(c, c, (2, 2)).stride((2, 2)),
        );
        let skip = skips[layout.up.len() - 1 - i];
        let cat = b.concat(&format!("up{i}.skip"), tu, skip);
        let block = dense_block(&mut b, &format!("up{i}"), cat, layers, layout.growth);
        carried = if i + 1 == layout.up.len() {
            block.full
        } else {
            block.new
        };
    }
    let c = b.channels(carried);
    let head = b.conv("head.conv", carried, ConvSpec::new(c, 1, (1, 1)));
    b.sigmoid("head.sigmoid", head);
    Ok(b.finish(Arch::FcDenseNet { variant }, 3, 32))
}
