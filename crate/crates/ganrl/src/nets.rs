//! Network architectures: the actor-critic, the generator G, the critic D
//! with its feature tap, and the encoder E — plus binary checkpoints.
//!
//! A [`NetworkSpec`] is a fully resolved layer list (all shapes known), and
//! `forward` replays it into a [`Graph`]. Parameter initialization is
//! seeded and reproducible bit for bit.

use crate::graph::{Bindings, Graph, GraphError, NodeId, ParamStore};
use crate::tensor::{self, Element, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("{0}")]
    Graph(#[from] GraphError),
    #[error("invalid architecture: {0}")]
    BadArchitecture(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Batch,
    Layer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    Dense,
}

/// One resolved layer: every shape is already known.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    pub norm: Norm,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

/// Ordered layer list with resolved input/output shapes (channels, h, w).
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

const NORM_EPS: f64 = 1e-5;

/// Emit graph ops for one layer; parameters are named `{lname}.w`,
/// `{lname}.b` and, when normalized, `{lname}.gain` / `{lname}.bias`.
fn emit_layer<T: Element>(
    g: &mut Graph<T>,
    layer: &LayerSpec,
    input: NodeId,
    lname: &str,
) -> Result<NodeId> {
    let batch = g.shape(input)[0];
    let mut x = match layer.kind {
        LayerKind::Conv => {
            let w = g.parameter(
                &format!("{lname}.w"),
                &[layer.out_channels, layer.in_channels, layer.kernel, layer.kernel],
            );
            g.conv2d(input, w, layer.stride, layer.pad)?
        }
        LayerKind::ConvTranspose => {
            let w = g.parameter(
                &format!("{lname}.w"),
                &[layer.in_channels, layer.out_channels, layer.kernel, layer.kernel],
            );
            g.conv_transpose2d(input, w, layer.stride, layer.pad)?
        }
        LayerKind::Dense => {
            let cur = if g.shape(input).len() != 2 {
                g.reshape(input, &[batch, layer.in_channels])?
            } else {
                input
            };
            let w = g.parameter(
                &format!("{lname}.w"),
                &[layer.in_channels, layer.out_channels],
            );
            g.matmul(cur, w)?
        }
    };
    let b = g.parameter(&format!("{lname}.b"), &[layer.out_channels]);
    let bshape: Vec<usize> = if g.shape(x).len() == 4 {
        vec![1, layer.out_channels, 1, 1]
    } else {
        vec![1, layer.out_channels]
    };
    let br = g.reshape(b, &bshape)?;
    let bb = g.broadcast(br, &g.shape(x).to_vec())?;
    x = g.add(x, bb)?;
    if layer.norm != Norm::None {
        let gain = g.parameter(&format!("{lname}.gain"), &[layer.out_channels]);
        let bias = g.parameter(&format!("{lname}.bias"), &[layer.out_channels]);
        let eps = T::fromf(NORM_EPS);
        x = match layer.norm {
            Norm::Batch => g.batch_norm(x, gain, bias, eps)?,
            Norm::Layer => g.layer_norm(x, gain, bias, eps)?,
            Norm::None => unreachable!(),
        };
    }
    Ok(match layer.activation {
        Activation::LeakyRelu(s) => g.leaky_relu(x, T::fromf(s)),
        Activation::Relu => g.relu(x),
        Activation::Tanh => g.tanh(x),
        Activation::None => x,
    })
}

/// Centered-uniform fan-in init for weights, zero biases, unit norm gains.
fn init_layer(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    layer: &LayerSpec,
    lname: &str,
) -> Result<()> {
    let (w_shape, fan_in): (Vec<usize>, usize) = match layer.kind {
        LayerKind::Conv => (
            vec![layer.out_channels, layer.in_channels, layer.kernel, layer.kernel],
            layer.in_channels * layer.kernel * layer.kernel,
        ),
        LayerKind::ConvTranspose => (
            vec![layer.in_channels, layer.out_channels, layer.kernel, layer.kernel],
            layer.in_channels * layer.kernel * layer.kernel,
        ),
        LayerKind::Dense => (
            vec![layer.in_channels, layer.out_channels],
            layer.in_channels,
        ),
    };
    let bound = 1.0 / (fan_in as f32).sqrt();
    let data = (0..tensor::numel(&w_shape))
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    store.insert(&format!("{lname}.w"), Tensor::new(w_shape, data))?;
    store.insert(&format!("{lname}.b"), Tensor::zeros(&[layer.out_channels]))?;
    if layer.norm != Norm::None {
        store.insert(
            &format!("{lname}.gain"),
            Tensor::full(&[layer.out_channels], 1.0),
        )?;
        store.insert(
            &format!("{lname}.bias"),
            Tensor::zeros(&[layer.out_channels]),
        )?;
    }
    Ok(())
}

impl NetworkSpec {
    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.kernel).collect()
    }

    /// Flattened size of the output of layer `idx` (inclusive).
    pub fn flat_dim_after(&self, idx: usize) -> usize {
        let l = &self.layers[idx];
        l.out_channels * l.out_hw.0 * l.out_hw.1
    }

    /// Emit graph ops for the whole stack; returns the per-layer outputs
    /// (post-norm, post-activation).
    pub fn forward_all<T: Element>(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        prefix: &str,
    ) -> Result<Vec<NodeId>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = emit_layer(g, layer, cur, &format!("{prefix}l{i}"))?;
            outs.push(cur);
        }
        Ok(outs)
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        Ok(*self.forward_all(g, input, prefix)?.last().unwrap())
    }

    pub fn init_params(
        &self,
        prefix: &str,
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            init_layer(store, rng, layer, &format!("{prefix}l{i}"))?;
        }
        Ok(())
    }
}

fn conv_layer(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    activation: Activation,
    norm: Norm,
    in_hw: (usize, usize),
) -> Result<LayerSpec> {
    let oh = tensor::conv_out_dim(in_hw.0, kernel, stride, pad);
    let ow = tensor::conv_out_dim(in_hw.1, kernel, stride, pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(LayerSpec {
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            activation,
            norm,
            in_hw,
            out_hw: (oh, ow),
        }),
        _ => Err(NetError::BadArchitecture(format!(
            "input {}x{} too small for conv kernel {kernel} stride {stride} pad {pad}",
            in_hw.0, in_hw.1
        ))),
    }
}

fn dense_layer(in_dim: usize, out_dim: usize, activation: Activation) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Dense,
        in_channels: in_dim,
        out_channels: out_dim,
        kernel: 0,
        stride: 0,
        pad: 0,
        activation,
        norm: Norm::None,
        in_hw: (1, 1),
        out_hw: (1, 1),
    }
}

// ---- actor-critic ---------------------------------------------------------

/// Actor-critic conv-stack profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcProfile {
    /// 32@8x8 s4, 64@4x4 s2, 64@3x3 s1, dense 512.
    Paper,
    /// 16@4x4 s2, 32@3x3 s2, 32@3x3 s1, dense 256.
    Small,
}

impl AcProfile {
    fn convs(self) -> [(usize, usize, usize); 3] {
        match self {
            AcProfile::Paper => [(32, 8, 4), (64, 4, 2), (64, 3, 1)],
            AcProfile::Small => [(16, 4, 2), (32, 3, 2), (32, 3, 1)],
        }
    }

    fn dense(self) -> usize {
        match self {
            AcProfile::Paper => 512,
            AcProfile::Small => 256,
        }
    }
}

/// Convolutional trunk + two dense heads (action logits, state value),
/// leaky-relu slope 0.01 throughout the trunk.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub trunk: Vec<LayerSpec>,
    pub pi_head: LayerSpec,
    pub v_head: LayerSpec,
    pub n_actions: usize,
    pub obs_shape: (usize, usize, usize),
}

pub fn build_actor_critic(
    obs_shape: (usize, usize, usize),
    n_actions: usize,
    profile: AcProfile,
    seed: u64,
) -> Result<(ActorCritic, ParamStore<f32>)> {
    let (c, h, w) = obs_shape;
    if h != w {
        return Err(NetError::BadArchitecture(format!(
            "observation must be square, got {h}x{w}"
        )));
    }
    if n_actions < 2 {
        return Err(NetError::BadArchitecture(format!(
            "need at least 2 actions, got {n_actions}"
        )));
    }
    let act = Activation::LeakyRelu(0.01);
    let mut trunk = Vec::new();
    let mut in_ch = c;
    let mut hw = (h, w);
    for (filters, kernel, stride) in profile.convs() {
        let l = conv_layer(in_ch, filters, kernel, stride, 0, act, Norm::None, hw)?;
        hw = l.out_hw;
        in_ch = filters;
        trunk.push(l);
    }
    let flat = in_ch * hw.0 * hw.1;
    let hidden = profile.dense();
    trunk.push(dense_layer(flat, hidden, act));
    let ac = ActorCritic {
        trunk,
        pi_head: dense_layer(hidden, n_actions, Activation::None),
        v_head: dense_layer(hidden, 1, Activation::None),
        n_actions,
        obs_shape,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ac.init_params("ac", &mut store, &mut rng)?;
    Ok((ac, store))
}

impl ActorCritic {
    pub fn init_params(
        &self,
        prefix: &str,
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for (i, layer) in self.trunk.iter().enumerate() {
            init_layer(store, rng, layer, &format!("{prefix}.l{i}"))?;
        }
        init_layer(store, rng, &self.pi_head, &format!("{prefix}.pi"))?;
        init_layer(store, rng, &self.v_head, &format!("{prefix}.v"))?;
        Ok(())
    }

    /// Returns (logits `[B, n_actions]`, value `[B]`).
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        obs: NodeId,
        prefix: &str,
    ) -> Result<(NodeId, NodeId)> {
        let batch = g.shape(obs)[0];
        let mut cur = obs;
        for (i, layer) in self.trunk.iter().enumerate() {
            cur = emit_layer(g, layer, cur, &format!("{prefix}.l{i}"))?;
        }
        let pi = emit_layer(g, &self.pi_head, cur, &format!("{prefix}.pi"))?;
        let v = emit_layer(g, &self.v_head, cur, &format!("{prefix}.v"))?;
        let v_flat = g.reshape(v, &[batch])?;
        Ok((pi, v_flat))
    }

    /// Conv output spatial sizes, outermost first (shape oracle hook).
    pub fn conv_out_sizes(&self) -> Vec<(usize, usize)> {
        self.trunk
            .iter()
            .filter(|l| l.kind == LayerKind::Conv)
            .map(|l| l.out_hw)
            .collect()
    }
}

// ---- generator / critic / encoder ----------------------------------------

fn check_canvas(canvas: usize) -> Result<()> {
    if canvas == 32 || canvas == 64 {
        Ok(())
    } else {
        Err(NetError::BadArchitecture(format!(
            "canvas must be 32 or 64, got {canvas}"
        )))
    }
}

fn check_z(z_dim: usize) -> Result<()> {
    if z_dim < 8 {
        Err(NetError::BadArchitecture(format!(
            "z_dim must be at least 8, got {z_dim}"
        )))
    } else {
        Ok(())
    }
}

/// 5 transposed-conv layers, 4x4 kernels, doubling spatial size from a
/// 1x1 x z_dim input up to the canvas; relu hidden, tanh output.
pub fn build_generator(
    z_dim: usize,
    canvas: usize,
    norm: Norm,
    width: usize,
    seed: u64,
) -> Result<(NetworkSpec, ParamStore<f32>)> {
    check_canvas(canvas)?;
    check_z(z_dim)?;
    // 64: 1->4->8->16->32->64; 32: 1->2->4->8->16->32
    let (strides, pads): ([usize; 5], [usize; 5]) = if canvas == 64 {
        ([1, 2, 2, 2, 2], [0, 1, 1, 1, 1])
    } else {
        ([1, 2, 2, 2, 2], [1, 1, 1, 1, 1])
    };
    let mut layers = Vec::new();
    let mut in_ch = z_dim;
    let mut hw = (1usize, 1usize);
    for i in 0..5 {
        let last = i == 4;
        let out_ch = if last { 1 } else { width };
        let oh = tensor::conv_transpose_out_dim(hw.0, 4, strides[i], pads[i]);
        layers.push(LayerSpec {
            kind: LayerKind::ConvTranspose,
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: 4,
            stride: strides[i],
            pad: pads[i],
            activation: if last { Activation::Tanh } else { Activation::Relu },
            norm: if last { Norm::None } else { norm },
            in_hw: hw,
            out_hw: (oh, oh),
        });
        hw = (oh, oh);
        in_ch = out_ch;
    }
    if hw.0 != canvas {
        return Err(NetError::BadArchitecture(format!(
            "stride plan produced {} instead of canvas {canvas}",
            hw.0
        )));
    }
    let spec = NetworkSpec {
        layers,
        input: (z_dim, 1, 1),
        output: (1, canvas, canvas),
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.init_params("gen.", &mut store, &mut rng)?;
    Ok((spec, store))
}

/// Wasserstein critic: 6 conv layers with kernels 4,5,5,3,1,5, leaky-relu
/// slope 0.2, scalar output (no sigmoid). The feature tap is the flattened
/// post-layer-5 activation; its dimensionality is the third return value.
pub fn build_critic(
    canvas: usize,
    norm: Norm,
    width: usize,
    seed: u64,
) -> Result<(NetworkSpec, ParamStore<f32>, usize)> {
    check_canvas(canvas)?;
    let kernels = [4, 5, 5, 3, 1, 5];
    let strides = [2, 2, 2, 2, 1, 2];
    let pads: [usize; 6] = if canvas == 64 {
        [1, 2, 2, 1, 0, 1]
    } else {
        [1, 2, 2, 1, 0, 2]
    };
    let act = Activation::LeakyRelu(0.2);
    let mut layers = Vec::new();
    let mut in_ch = 1;
    let mut hw = (canvas, canvas);
    for i in 0..6 {
        let last = i == 5;
        let out_ch = if last { 1 } else { width };
        let l = conv_layer(
            in_ch,
            out_ch,
            kernels[i],
            strides[i],
            pads[i],
            if last { Activation::None } else { act },
            if last { Norm::None } else { norm },
            hw,
        )?;
        hw = l.out_hw;
        in_ch = out_ch;
        layers.push(l);
    }
    if hw != (1, 1) {
        return Err(NetError::BadArchitecture(format!(
            "critic does not reduce to a scalar: final {}x{}",
            hw.0, hw.1
        )));
    }
    let spec = NetworkSpec {
        layers,
        input: (1, canvas, canvas),
        output: (1, 1, 1),
    };
    let tap_dim = spec.flat_dim_after(4);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.init_params("critic.", &mut store, &mut rng)?;
    Ok((spec, store, tap_dim))
}

/// Encoder: 5 conv layers with kernels 4,5,5,3,5, leaky-relu slope 0.2;
/// the last layer has z_dim filters on a 1x1 map, matching the generator's
/// input layout.
pub fn build_encoder(
    canvas: usize,
    z_dim: usize,
    norm: Norm,
    width: usize,
    seed: u64,
) -> Result<(NetworkSpec, ParamStore<f32>)> {
    check_canvas(canvas)?;
    check_z(z_dim)?;
    let kernels = [4, 5, 5, 3, 5];
    let strides = [2, 2, 2, 2, 2];
    let pads: [usize; 5] = if canvas == 64 {
        [1, 2, 2, 1, 1]
    } else {
        [1, 2, 2, 1, 2]
    };
    let act = Activation::LeakyRelu(0.2);
    let mut layers = Vec::new();
    let mut in_ch = 1;
    let mut hw = (canvas, canvas);
    for i in 0..5 {
        let last = i == 4;
        let out_ch = if last { z_dim } else { width };
        let l = conv_layer(
            in_ch,
            out_ch,
            kernels[i],
            strides[i],
            pads[i],
            if last { Activation::None } else { act },
            if last { Norm::None } else { norm },
            hw,
        )?;
        hw = l.out_hw;
        in_ch = out_ch;
        layers.push(l);
    }
    if hw != (1, 1) {
        return Err(NetError::BadArchitecture(format!(
            "encoder does not reduce to 1x1: final {}x{}",
            hw.0, hw.1
        )));
    }
    let spec = NetworkSpec {
        layers,
        input: (1, canvas, canvas),
        output: (z_dim, 1, 1),
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.init_params("enc.", &mut store, &mut rng)?;
    Ok((spec, store))
}

/// Evaluate a spec on a concrete batch with a one-off graph; convenience
/// for tests and single queries.
pub fn run_forward(
    spec: &NetworkSpec,
    store: &ParamStore<f32>,
    prefix: &str,
    input: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let x = g.leaf("x", input.shape());
    let y = spec.forward(&mut g, x, prefix)?;
    let b = Bindings::new().leaf("x", input.clone()).params(store);
    Ok(g.evaluate(&[y], &b)?.remove(0))
}

// ---- checkpoints -----------------------------------------------------------

const MAGIC: &[u8; 8] = b"GIRMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic header (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Everything needed to restore a run: parameters with optimizer state,
/// normalizer state, counters and RNG stream states.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub profile: String,
    pub girm_trained: bool,
    pub girm_phase: u32,
    pub frame: u64,
    pub norm_ema: f64,
    pub norm_emv: f64,
    pub norm_t: u64,
    /// (stream name, seed, word position)
    pub rng_streams: Vec<(String, [u8; 32], u128)>,
    pub params: ParamStore<f32>,
}

fn wr_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn wr_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn wr_str(out: &mut Vec<u8>, s: &str) {
    wr_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn wr_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Fixed-width little-endian binary: magic, version, run state, then
/// length-prefixed named arrays (value + Adam moments + step each).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> std::result::Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    wr_u32(&mut out, VERSION);
    wr_str(&mut out, &ckpt.profile);
    out.push(ckpt.girm_trained as u8);
    wr_u32(&mut out, ckpt.girm_phase);
    wr_u64(&mut out, ckpt.frame);
    out.extend_from_slice(&ckpt.norm_ema.to_le_bytes());
    out.extend_from_slice(&ckpt.norm_emv.to_le_bytes());
    wr_u64(&mut out, ckpt.norm_t);
    wr_u32(&mut out, ckpt.rng_streams.len() as u32);
    for (name, seed, pos) in &ckpt.rng_streams {
        wr_str(&mut out, name);
        out.extend_from_slice(seed);
        out.extend_from_slice(&pos.to_le_bytes());
    }
    let entries: Vec<_> = ckpt.params.entries().collect();
    wr_u32(&mut out, entries.len() as u32);
    for (name, value, m, v, step) in entries {
        wr_str(&mut out, name);
        wr_u32(&mut out, value.shape().len() as u32);
        for &d in value.shape() {
            wr_u64(&mut out, d as u64);
        }
        wr_u64(&mut out, step);
        wr_f32s(&mut out, value.data());
        wr_f32s(&mut out, m);
        wr_f32s(&mut out, v);
    }
    let mut f = std::fs::File::create(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(&out).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let profile = r.string()?;
    let girm_trained = r.take(1)?[0] != 0;
    let girm_phase = r.u32()?;
    let frame = r.u64()?;
    let norm_ema = r.f64()?;
    let norm_emv = r.f64()?;
    let norm_t = r.u64()?;
    let n_streams = r.u32()? as usize;
    let mut rng_streams = Vec::with_capacity(n_streams);
    for _ in 0..n_streams {
        let name = r.string()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        rng_streams.push((name, seed, pos));
    }
    let n_params = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let step = r.u64()?;
        let n = tensor::numel(&shape);
        let value = Tensor::new(shape, r.f32s(n)?);
        let m = r.f32s(n)?;
        let v = r.f32s(n)?;
        params
            .insert_with_adam(&name, value, m, v, step)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        profile,
        girm_trained,
        girm_phase,
        frame,
        norm_ema,
        norm_emv,
        norm_t,
        rng_streams,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actor_critic_paper_profile_shapes() {
        // conv chain on 84x84: 20x20, 9x9, 7x7; flat 64*7*7 = 3136 -> 512
        let (ac, _) = build_actor_critic((1, 84, 84), 5, AcProfile::Paper, 0).unwrap();
        assert_eq!(ac.conv_out_sizes(), vec![(20, 20), (9, 9), (7, 7)]);
        assert_eq!(ac.trunk[3].in_channels, 3136);
        assert_eq!(ac.trunk[3].out_channels, 512);
    }

    #[test]
    fn actor_critic_small_profile_shapes() {
        // 32x32: (32-4)/2+1=15, (15-3)/2+1=7, (7-3)/1+1=5; flat 32*25=800
        let (ac, _) = build_actor_critic((1, 32, 32), 5, AcProfile::Small, 0).unwrap();
        assert_eq!(ac.conv_out_sizes(), vec![(15, 15), (7, 7), (5, 5)]);
        assert_eq!(ac.trunk[3].in_channels, 800);
        assert_eq!(ac.trunk[3].out_channels, 256);
    }

    #[test]
    fn actor_critic_rejects_single_action() {
        assert!(build_actor_critic((1, 32, 32), 1, AcProfile::Small, 0).is_err());
    }

    #[test]
    fn actor_critic_rejects_tiny_observation() {
        assert!(build_actor_critic((1, 4, 4), 5, AcProfile::Paper, 0).is_err());
    }

    #[test]
    fn critic_kernel_list_and_scalar_output() {
        for canvas in [32, 64] {
            let (spec, _, tap) = build_critic(canvas, Norm::Layer, 16, 0).unwrap();
            assert_eq!(spec.kernel_sizes(), vec![4, 5, 5, 3, 1, 5]);
            assert_eq!(spec.output, (1, 1, 1));
            assert!(tap > 0);
        }
    }

    #[test]
    fn generator_output_is_canvas_in_tanh_range() {
        let (spec, store) = build_generator(128, 64, Norm::Batch, 16, 1).unwrap();
        assert_eq!(spec.output, (1, 64, 64));
        let z = Tensor::zeros(&[2, 128, 1, 1]);
        let out = run_forward(&spec, &store, "gen.", &z).unwrap();
        assert_eq!(out.shape(), &[2, 1, 64, 64]);
        assert!(out.all_finite());
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn encoder_output_matches_generator_input() {
        for canvas in [32, 64] {
            for z in [64, 128] {
                let (gen, _) = build_generator(z, canvas, Norm::Batch, 8, 0).unwrap();
                let (enc, _) = build_encoder(canvas, z, Norm::Batch, 8, 0).unwrap();
                assert_eq!(enc.output, gen.input, "G∘E shape-closed");
            }
        }
    }

    #[test]
    fn generator_encoder_composition_runs() {
        let canvas = 32;
        let (gen, gstore) = build_generator(64, canvas, Norm::Layer, 8, 3).unwrap();
        let (enc, estore) = build_encoder(canvas, 64, Norm::Layer, 8, 4).unwrap();
        let mut g = Graph::<f32>::new();
        let s = g.leaf("s", &[1, 1, canvas, canvas]);
        let z = enc.forward(&mut g, s, "enc.").unwrap();
        let rec = gen.forward(&mut g, z, "gen.").unwrap();
        assert_eq!(g.shape(rec), &[1, 1, canvas, canvas]);
        let mut store = gstore;
        store.adopt("", estore).unwrap();
        let frame = Tensor::full(&[1, 1, canvas, canvas], -0.5);
        let b = Bindings::new().leaf("s", frame).params(&store);
        let out = g.evaluate(&[rec], &b).unwrap().remove(0);
        assert!(out.all_finite());
    }

    #[test]
    fn networks_forward_finite_on_random_input() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let canvas = 32;
        let frame = Tensor::new(
            vec![2, 1, canvas, canvas],
            (0..2 * canvas * canvas)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect(),
        );
        let (d, dstore, _) = build_critic(canvas, Norm::Layer, 8, 5).unwrap();
        assert!(run_forward(&d, &dstore, "critic.", &frame).unwrap().all_finite());
        let (e, estore) = build_encoder(canvas, 64, Norm::Batch, 8, 6).unwrap();
        assert!(run_forward(&e, &estore, "enc.", &frame).unwrap().all_finite());
    }

    #[test]
    fn init_is_reproducible_from_seed() {
        let (_, a) = build_generator(64, 32, Norm::Batch, 8, 42).unwrap();
        let (_, b) = build_generator(64, 32, Norm::Batch, 8, 42).unwrap();
        let names: Vec<_> = a.names().collect();
        assert!(!names.is_empty());
        for n in names {
            assert_eq!(a.get(n).unwrap().data(), b.get(n).unwrap().data());
        }
        let (_, c) = build_generator(64, 32, Norm::Batch, 8, 43).unwrap();
        assert!(a
            .names()
            .any(|n| a.get(n).unwrap().data() != c.get(n).unwrap().data()));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.gckpt");
        let (_, mut store) = build_generator(64, 32, Norm::Batch, 8, 7).unwrap();
        // dirty the Adam state so the round trip covers it
        let mut grads = std::collections::HashMap::new();
        grads.insert(
            "gen.l0.w".to_string(),
            Tensor::full(store.get("gen.l0.w").unwrap().shape(), 0.01),
        );
        store.adam_update(&grads, 1e-4, 0.9, 0.999, 1e-8).unwrap();
        let ckpt = Checkpoint {
            profile: "small".into(),
            girm_trained: true,
            girm_phase: 3,
            frame: 1000,
            norm_ema: 0.25,
            norm_emv: 0.5,
            norm_t: 77,
            rng_streams: vec![("policy".into(), [9u8; 32], 12345u128)],
            params: store,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.profile, "small");
        assert!(back.girm_trained);
        assert_eq!(back.girm_phase, 3);
        assert_eq!(back.frame, 1000);
        assert_eq!(back.norm_ema, 0.25);
        assert_eq!(back.norm_emv, 0.5);
        assert_eq!(back.norm_t, 77);
        assert_eq!(back.rng_streams, ckpt.rng_streams);
        let orig: Vec<_> = ckpt.params.entries().collect();
        let got: Vec<_> = back.params.entries().collect();
        assert_eq!(orig.len(), got.len());
        for ((n1, t1, m1, v1, s1), (n2, t2, m2, v2, s2)) in orig.iter().zip(got.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(m1, m2);
            assert_eq!(v1, v2);
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gckpt");
        std::fs::write(&path, b"NOTCKPT!xxxxxxxxxxx").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));

        let (_, store) = build_generator(64, 32, Norm::Batch, 8, 7).unwrap();
        let ckpt = Checkpoint {
            profile: "p".into(),
            girm_trained: false,
            girm_phase: 0,
            frame: 0,
            norm_ema: 0.0,
            norm_emv: 0.0,
            norm_t: 0,
            rng_streams: vec![],
            params: store,
        };
        let good = dir.path().join("good.gckpt");
        save_checkpoint(&good, &ckpt).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let trunc = dir.path().join("trunc.gckpt");
        std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&trunc),
            Err(CheckpointError::Corrupt(_))
        ));

        // version mismatch
        let mut wrong = bytes.clone();
        wrong[8] = 99;
        let vpath = dir.path().join("ver.gckpt");
        std::fs::write(&vpath, &wrong).unwrap();
        assert!(matches!(
            load_checkpoint(&vpath),
            Err(CheckpointError::Version(99))
        ));
    }
}
