//! Executable model graphs: an ordered node list (layer specs + wiring,
//! including skip and pooling-index edges) over a named parameter store.
//! Architecture builders live in [`crate::arch`].

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::nn::{Activation, BnMode, ConvSpec, PoolIndices};
use crate::tape::{Tape, Var};
use crate::tensor::{cast, Scalar, Shape, Tensor, TensorError};

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Role of a stored tensor; drives initialization and learnability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    PreluSlope,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn is_learnable(&self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

/// One named tensor: a learnable weight or a running-statistics buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub kind: ParamKind,
    /// For buffers: whether the values are meaningful (set by a train-mode
    /// update or a checkpoint load).
    pub initialized: bool,
}

impl<T: Scalar> Param<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn accumulate_grad(&mut self, g: &[T]) {
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (d, s) in grad.iter_mut().zip(g) {
            *d = *d + *s;
        }
    }
}

/// Insertion-ordered map from hierarchical names to tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, kind: ParamKind) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        self.params.push(Param {
            name: name.to_string(),
            shape,
            data: vec![T::zero(); numel],
            grad: None,
            kind,
            initialized: false,
        });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Disjoint mutable access to two entries.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Param<T>, &mut Param<T>) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.params.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.params.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    /// Reset every gradient buffer to exactly zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.fill(T::zero()),
                None => p.grad = Some(vec![T::zero(); p.data.len()]),
            }
        }
    }

    /// Total element count of learnable tensors.
    pub fn learnable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_learnable())
            .map(|p| p.numel())
            .sum()
    }
}

/// Graph node identifier (position in the node list).
pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum GraphOp {
    Input,
    Conv {
        spec: ConvSpec,
        w: ParamId,
        b: Option<ParamId>,
    },
    TConv {
        spec: ConvSpec,
        w: ParamId,
        b: Option<ParamId>,
    },
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    MaxUnpool {
        pool: NodeId,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
    },
    Act {
        kind: Activation,
        slope: Option<ParamId>,
    },
    /// Channel concatenation; the first input occupies the first channels.
    Concat,
    Add,
    /// Append `extra` zero-valued channels.
    ZeroPadChannels {
        extra: usize,
    },
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub name: String,
    pub op: GraphOp,
    pub inputs: Vec<NodeId>,
}

/// Architecture tag plus hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Unet { base_channels: usize, depth: usize },
    FcDenseNet { variant: u32 },
    Enet,
}

impl Arch {
    pub fn tag(&self) -> String {
        match self {
            Arch::Unet { .. } => "unet".into(),
            Arch::FcDenseNet { variant } => format!("fcdn{variant}"),
            Arch::Enet => "enet".into(),
        }
    }
}

/// An executable directed acyclic graph of layer nodes with named
/// parameter tensors. Immutable after build except parameter values and
/// batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct ModelGraph<T> {
    pub arch: Arch,
    pub(crate) nodes: Vec<GraphNode>,
    pub params: ParamStore<T>,
    pub in_channels: usize,
    /// Input height and width must be divisible by this.
    pub downsample_factor: usize,
}

/// Handles produced by one forward execution: the output variable and the
/// parameter-to-leaf binding needed to scatter gradients back.
pub struct GraphRun {
    pub output: Var,
    param_leaves: Vec<(ParamId, Var)>,
}

impl GraphRun {
    /// Move accumulated leaf gradients into the parameter store (additive).
    pub fn scatter_grads<T: Scalar>(&self, tape: &Tape<T>, params: &mut ParamStore<T>) {
        for &(pid, var) in &self.param_leaves {
            if let Some(g) = tape.grad(var) {
                params.get_mut(pid).accumulate_grad(g);
            }
        }
    }
}

impl<T: Scalar> ModelGraph<T> {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    /// Number of convolutional layers (conv + transposed conv nodes).
    pub fn conv_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, GraphOp::Conv { .. } | GraphOp::TConv { .. }))
            .count()
    }

    /// Sum of element counts of all learnable tensors.
    pub fn param_count(&self) -> usize {
        self.params.learnable_count()
    }

    /// Distinct top-level name segments, in first-appearance order.
    pub fn stage_names(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for n in &self.nodes {
            if matches!(n.op, GraphOp::Input) {
                continue;
            }
            let seg = n.name.split('.').next().unwrap_or("").to_string();
            if !seen.contains(&seg) {
                seen.push(seg);
            }
        }
        seen
    }

    /// Structural summary used by determinism checks: node names, ops and
    /// wiring plus parameter names and shapes.
    pub fn structure_summary(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            writeln!(out, "{i} {} {:?} <- {:?}", n.name, n.op, n.inputs).unwrap();
        }
        for p in self.params.iter() {
            writeln!(out, "param {} {:?} {:?}", p.name, p.shape, p.kind).unwrap();
        }
        out
    }

    fn param_leaf(
        &self,
        tape: &mut Tape<T>,
        cache: &mut [Option<Var>],
        leaves: &mut Vec<(ParamId, Var)>,
        pid: ParamId,
    ) -> Var {
        if let Some(v) = cache[pid.0] {
            return v;
        }
        let p = self.params.get(pid);
        let shape = match p.shape.len() {
            4 => Shape::new(p.shape[0], p.shape[1], p.shape[2], p.shape[3]),
            1 => Shape::new(1, p.shape[0], 1, 1),
            _ => unreachable!("parameters are rank 1 or 4"),
        };
        let t = Tensor::from_vec(shape, p.data.clone()).expect("store shape consistent");
        let v = tape.leaf(t);
        cache[pid.0] = Some(v);
        leaves.push((pid, v));
        v
    }

    /// Execute the graph on `input`. Train mode updates batch-norm running
    /// statistics; eval mode requires them to be ready.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: Tensor<T>,
        mode: BnMode,
    ) -> Result<GraphRun, TensorError> {
        let s = input.shape();
        if s.c != self.in_channels {
            return Err(TensorError::Geometry {
                op: "forward",
                detail: format!(
                    "input has {} channels, model expects {}",
                    s.c, self.in_channels
                ),
            });
        }
        if s.h % self.downsample_factor != 0 || s.w % self.downsample_factor != 0 {
            return Err(TensorError::Geometry {
                op: "forward",
                detail: format!(
                    "input {}x{} not divisible by the model's downsampling factor {}",
                    s.h, s.w, self.downsample_factor
                ),
            });
        }
        let mut vals: Vec<Option<Var>> = vec![None; self.nodes.len()];
        let mut pools: Vec<Option<PoolIndices>> = vec![None; self.nodes.len()];
        let mut cache: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut leaves = Vec::new();

        for i in 0..self.nodes.len() {
            let a = |k: usize| -> Var { vals[self.nodes[i].inputs[k]].expect("wired") };
            let v = match self.nodes[i].op.clone() {
                GraphOp::Input => tape.constant(input.clone()),
                GraphOp::Conv { spec, w, b } => {
                    let wv = self.param_leaf(tape, &mut cache, &mut leaves, w);
                    let bv = b.map(|b| self.param_leaf(tape, &mut cache, &mut leaves, b));
                    tape.conv2d(a(0), &spec, wv, bv)?
                }
                GraphOp::TConv { spec, w, b } => {
                    let wv = self.param_leaf(tape, &mut cache, &mut leaves, w);
                    let bv = b.map(|b| self.param_leaf(tape, &mut cache, &mut leaves, b));
                    tape.transposed_conv2d(a(0), &spec, wv, bv)?
                }
                GraphOp::MaxPool { window, stride } => {
                    let (v, idx) = tape.maxpool2d(a(0), window, stride)?;
                    pools[i] = Some(idx);
                    v
                }
                GraphOp::MaxUnpool { pool } => {
                    let idx = pools[pool].as_ref().expect("pool executed before unpool");
                    let out_size = idx.source_size();
                    tape.max_unpool2d(a(0), idx, out_size)?
                }
                GraphOp::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let gv = self.param_leaf(tape, &mut cache, &mut leaves, gamma);
                    let bv = self.param_leaf(tape, &mut cache, &mut leaves, beta);
                    let x = a(0);
                    let (mp, vp) = self.params.pair_mut(mean, var);
                    tape.batch_norm(
                        x,
                        gv,
                        bv,
                        &mut mp.data,
                        &mut vp.data,
                        cast(0.1),
                        cast(1e-5),
                        mode,
                        &mut mp.initialized,
                    )?
                }
                GraphOp::Act { kind, slope } => {
                    let sv = slope.map(|s| self.param_leaf(tape, &mut cache, &mut leaves, s));
                    tape.activation(a(0), kind, sv)?
                }
                GraphOp::Concat => tape.concat_channels(a(0), a(1))?,
                GraphOp::Add => tape.add(a(0), a(1))?,
                GraphOp::ZeroPadChannels { extra } => {
                    let x = a(0);
                    let sx = tape.shape(x);
                    let zeros = tape.constant(Tensor::zeros(Shape::new(sx.b, extra, sx.h, sx.w)));
                    tape.concat_channels(x, zeros)?
                }
            };
            vals[i] = Some(v);
        }
        let output = vals.last().copied().flatten().expect("non-empty graph");
        Ok(GraphRun {
            output,
            param_leaves: leaves,
        })
    }

    /// Forward for inputs whose spatial size may not be divisible by the
    /// model's downsampling factor: zero-pads on the bottom/right, runs the
    /// graph, and crops the output back.
    pub fn forward_padded(
        &mut self,
        tape: &mut Tape<T>,
        input: Tensor<T>,
        mode: BnMode,
    ) -> Result<GraphRun, TensorError> {
        let s = input.shape();
        let f = self.downsample_factor;
        let pad_h = (f - s.h % f) % f;
        let pad_w = (f - s.w % f) % f;
        if pad_h == 0 && pad_w == 0 {
            return self.forward(tape, input, mode);
        }
        let padded_shape = Shape::new(s.b, s.c, s.h + pad_h, s.w + pad_w);
        let mut padded = Tensor::zeros(padded_shape);
        for plane_idx in 0..s.b * s.c {
            for y in 0..s.h {
                let src = &input.data()[plane_idx * s.plane() + y * s.w..][..s.w];
                let dst = &mut padded.data_mut()
                    [plane_idx * padded_shape.plane() + y * padded_shape.w..][..s.w];
                dst.copy_from_slice(src);
            }
        }
        let run = self.forward(tape, padded, mode)?;
        let cropped = tape.crop(run.output, 0, 0, s.h, s.w)?;
        Ok(GraphRun {
            output: cropped,
            param_leaves: run.param_leaves,
        })
    }
}

/// Run backward from `loss` and scatter leaf gradients into the store.
pub fn backward_into<T: Scalar>(
    tape: &mut Tape<T>,
    loss: Var,
    run: &GraphRun,
    params: &mut ParamStore<T>,
) -> Result<(), TensorError> {
    tape.backward(loss)?;
    run.scatter_grads(tape, params);
    Ok(())
}

/// Bound of the He-uniform law for a given fan-in.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Initialize a parameter store in place: conv and transposed-conv weights
/// He-uniform over [-sqrt(6/fan_in), sqrt(6/fan_in)], biases and BN beta 0,
/// BN gamma 1, PReLU slopes 0.25, running stats reset. Deterministic for a
/// given seed.
pub fn init_he_uniform<T: Scalar>(params: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for p in params.iter_mut() {
        match p.kind {
            ParamKind::ConvWeight { fan_in } => {
                let b = he_bound(fan_in);
                for v in &mut p.data {
                    *v = cast(rng.gen_range(-b..b));
                }
            }
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => {
                p.data.fill(T::zero());
            }
            ParamKind::BnGamma | ParamKind::BnRunningVar => p.data.fill(T::one()),
            ParamKind::PreluSlope => p.data.fill(cast(0.25)),
        }
        p.initialized = p.kind.is_learnable();
        p.grad = None;
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// He-uniform (re)initialization of every parameter. See
    /// [`init_he_uniform`].
    pub fn init_he(&mut self, seed: u64) {
        init_he_uniform(&mut self.params, seed);
    }
}

/// Incremental graph construction with channel/resolution bookkeeping.
pub(crate) struct GraphBuilder<T> {
    nodes: Vec<GraphNode>,
    params: ParamStore<T>,
    /// Channel count per node.
    channels: Vec<usize>,
    /// Downsampling level per node (log2 of resolution divisor).
    level: Vec<i32>,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(in_channels: usize) -> Self {
        let mut b = GraphBuilder {
            nodes: Vec::new(),
            params: ParamStore::new(),
            channels: Vec::new(),
            level: Vec::new(),
        };
        b.push("input", GraphOp::Input, vec![], in_channels, 0);
        b
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn channels(&self, n: NodeId) -> usize {
        self.channels[n]
    }

    fn push(
        &mut self,
        name: &str,
        op: GraphOp,
        inputs: Vec<NodeId>,
        channels: usize,
        level: i32,
    ) -> NodeId {
        self.nodes.push(GraphNode {
            name: name.to_string(),
            op,
            inputs,
        });
        self.channels.push(channels);
        self.level.push(level);
        self.nodes.len() - 1
    }

    pub fn conv(&mut self, name: &str, x: NodeId, spec: ConvSpec) -> NodeId {
        assert_eq!(self.channels[x], spec.in_channels, "{name}: channel wiring");
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let w = self.params.add(
            &format!("{name}.w"),
            vec![
                spec.out_channels,
                spec.in_channels,
                spec.kernel.0,
                spec.kernel.1,
            ],
            ParamKind::ConvWeight { fan_in },
        );
        let b = spec
            .bias
            .then(|| self.params.add(&format!("{name}.b"), vec![spec.out_channels], ParamKind::Bias));
        let dl = if spec.stride == (2, 2) { 1 } else { 0 };
        let level = self.level[x] + dl;
        self.push(name, GraphOp::Conv { spec, w, b }, vec![x], spec.out_channels, level)
    }

    pub fn tconv(&mut self, name: &str, x: NodeId, spec: ConvSpec) -> NodeId {
        assert_eq!(self.channels[x], spec.in_channels, "{name}: channel wiring");
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let w = self.params.add(
            &format!("{name}.w"),
            vec![
                spec.in_channels,
                spec.out_channels,
                spec.kernel.0,
                spec.kernel.1,
            ],
            ParamKind::ConvWeight { fan_in },
        );
        let b = spec
            .bias
            .then(|| self.params.add(&format!("{name}.b"), vec![spec.out_channels], ParamKind::Bias));
        let ul = if spec.stride == (2, 2) { -1 } else { 0 };
        let level = self.level[x] + ul;
        self.push(name, GraphOp::TConv { spec, w, b }, vec![x], spec.out_channels, level)
    }

    pub fn maxpool(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels[x];
        let level = self.level[x] + 1;
        self.push(
            name,
            GraphOp::MaxPool {
                window: (2, 2),
                stride: (2, 2),
            },
            vec![x],
            c,
            level,
        )
    }

    pub fn unpool(&mut self, name: &str, x: NodeId, pool: NodeId) -> NodeId {
        assert!(matches!(self.nodes[pool].op, GraphOp::MaxPool { .. }));
        // The unpool restores the resolution its pool consumed.
        let pool_in_level = self.level[pool] - 1;
        assert_eq!(
            self.level[x],
            self.level[pool],
            "{name}: unpool input must sit at the pooled resolution"
        );
        let c = self.channels[x];
        self.push(name, GraphOp::MaxUnpool { pool }, vec![x], c, pool_in_level)
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels[x];
        let gamma = self
            .params
            .add(&format!("{name}.gamma"), vec![c], ParamKind::BnGamma);
        let beta = self
            .params
            .add(&format!("{name}.beta"), vec![c], ParamKind::BnBeta);
        let mean = self
            .params
            .add(&format!("{name}.running_mean"), vec![c], ParamKind::BnRunningMean);
        let var = self
            .params
            .add(&format!("{name}.running_var"), vec![c], ParamKind::BnRunningVar);
        let level = self.level[x];
        self.push(
            name,
            GraphOp::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            },
            vec![x],
            c,
            level,
        )
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        let (c, l) = (self.channels[x], self.level[x]);
        self.push(
            name,
            GraphOp::Act {
                kind: Activation::Relu,
                slope: None,
            },
            vec![x],
            c,
            l,
        )
    }

    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> NodeId {
        let (c, l) = (self.channels[x], self.level[x]);
        self.push(
            name,
            GraphOp::Act {
                kind: Activation::Sigmoid,
                slope: None,
            },
            vec![x],
            c,
            l,
        )
    }

    pub fn prelu(&mut self, name: &str, x: NodeId) -> NodeId {
        let (c, l) = (self.channels[x], self.level[x]);
        let slope = self
            .params
            .add(&format!("{name}.slope"), vec![c], ParamKind::PreluSlope);
        self.push(
            name,
            GraphOp::Act {
                kind: Activation::PRelu,
                slope: Some(slope),
            },
            vec![x],
            c,
            l,
        )
    }

    pub fn concat(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.level[a], self.level[b],
            "{name}: concat operands must share resolution"
        );
        let c = self.channels[a] + self.channels[b];
        let l = self.level[a];
        self.push(name, GraphOp::Concat, vec![a, b], c, l)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.level[a], self.level[b], "{name}: add operands");
        assert_eq!(self.channels[a], self.channels[b], "{name}: add channels");
        let (c, l) = (self.channels[a], self.level[a]);
        self.push(name, GraphOp::Add, vec![a, b], c, l)
    }

    pub fn zero_pad_channels(&mut self, name: &str, x: NodeId, extra: usize) -> NodeId {
        let c = self.channels[x] + extra;
        let l = self.level[x];
        self.push(name, GraphOp::ZeroPadChannels { extra }, vec![x], c, l)
    }

    /// Finish the graph. `downsample_factor` must match the deepest level
    /// actually reached.
    pub fn finish(self, arch: Arch, in_channels: usize, downsample_factor: usize) -> ModelGraph<T> {
        let deepest = self.level.iter().copied().max().unwrap_or(0);
        debug_assert_eq!(1usize << deepest, downsample_factor);
        debug_assert_eq!(*self.level.last().unwrap(), 0, "output at input resolution");
        ModelGraph {
            arch,
            nodes: self.nodes,
            params: self.params,
            in_channels,
            downsample_factor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_respects_bounds_and_moments() {
        // fan_in = 27; one large conv weight gives 10^6 samples.
        let mut store = ParamStore::<f32>::new();
        store.add(
            "w",
            vec![37038, 3, 3, 3],
            ParamKind::ConvWeight { fan_in: 27 },
        );
        init_he_uniform(&mut store, 7);
        let b = he_bound(27) as f32;
        let p = store.by_name("w").unwrap();
        assert!(p.data.iter().all(|v| (-b..b).contains(v)));
        let n = p.data.len() as f64;
        let mean: f64 = p.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = p.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / 27.0;
        assert!(
            (var - expect).abs() / expect < 0.05,
            "variance {var} vs {expect}"
        );
    }

    #[test]
    fn he_init_is_deterministic() {
        let mut a = ParamStore::<f32>::new();
        a.add("w", vec![8, 4, 3, 3], ParamKind::ConvWeight { fan_in: 36 });
        a.add("b", vec![8], ParamKind::Bias);
        let mut b = a.clone();
        init_he_uniform(&mut a, 99);
        init_he_uniform(&mut b, 99);
        let (wa, wb) = (a.by_name("w").unwrap(), b.by_name("w").unwrap());
        assert_eq!(wa.data, wb.data);
    }

    #[test]
    fn empty_store_counts_zero_params() {
        let store = ParamStore::<f32>::new();
        assert_eq!(store.learnable_count(), 0);
    }

    #[test]
    fn single_conv_param_count() {
        // 3x3 conv, 3 -> 64 channels, with bias: 3*64*9 + 64 = 1792.
        let mut b = GraphBuilder::<f32>::new(3);
        let x = b.input();
        let spec = ConvSpec::new(3, 64, (3, 3)).padding((1, 1));
        let c = b.conv("only", x, spec);
        let s = b.sigmoid("out", c);
        let _ = s;
        let g = b.finish(Arch::Unet { base_channels: 64, depth: 0 }, 3, 1);
        assert_eq!(g.param_count(), 1792);
    }

    #[test]
    fn zero_grads_resets_to_exact_zero() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", vec![2, 2, 1, 1], ParamKind::ConvWeight { fan_in: 2 });
        store.get_mut(ParamId(0)).accumulate_grad(&[1.0, 2.0, 3.0, 4.0]);
        store.zero_grads();
        assert!(store
            .get(ParamId(0))
            .grad
            .as_ref()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }
}
