//! The GAN-based intrinsic reward module: observation memory, WGAN-GP
//! training of generator and critic, encoder inversion training, the raw
//! reconstruction-residual novelty score, and streaming EMA/EMV
//! standardization.
//!
//! Training is gated: until the memory first fills and the module trains,
//! every intrinsic reward is exactly zero and the normalizer state is
//! untouched.

use crate::envs::Observation;
use crate::graph::{Bindings, GradientMap, Graph, GraphError, NodeId, ParamStore, Plan};
use crate::nets::{self, NetError, Norm};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GirmError {
    #[error("{0}")]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Net(#[from] NetError),
    #[error("memory is full; train before storing more observations")]
    MemoryFull,
    #[error("observation canvas {got} does not match memory canvas {expected}")]
    ObservationShape { expected: usize, got: usize },
    #[error("training requires a full memory ({fill}/{capacity})")]
    MemoryNotFull { fill: usize, capacity: usize },
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("non-finite {stage} loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("intrinsic query on an untrained module; use intrinsic_reward which gates")]
    Untrained,
    #[error("non-finite raw reward {0}")]
    NonFiniteReward(f64),
    #[error("gradient penalty requires a critic without batch statistics; set critic_norm to layer or none")]
    BatchNormCritic,
}

pub type Result<T> = std::result::Result<T, GirmError>;

// ---- observation memory ----------------------------------------------------

/// Fixed-capacity buffer of visited-state observations. Filling it to
/// capacity triggers a training phase, after which it is cleared.
#[derive(Debug, Clone)]
pub struct StateMemory {
    capacity: usize,
    canvas: usize,
    buffer: Vec<Observation>,
}

impl StateMemory {
    pub fn new(capacity: usize, canvas: usize) -> Self {
        assert!(capacity > 0);
        StateMemory {
            capacity,
            canvas,
            buffer: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buffer.len() >= self.capacity
    }

    /// Append an observation; returns true exactly when the buffer just
    /// reached capacity. Storing into a full memory is a logic error.
    pub fn store(&mut self, obs: Observation) -> Result<bool> {
        if self.is_full() {
            return Err(GirmError::MemoryFull);
        }
        if obs.canvas != self.canvas {
            return Err(GirmError::ObservationShape {
                expected: self.canvas,
                got: obs.canvas,
            });
        }
        self.buffer.push(obs);
        Ok(self.is_full())
    }

    pub fn clear(&mut self) {
        self.buffer.clear();
    }

    fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let hw = self.canvas * self.canvas;
        let mut data = Vec::with_capacity(indices.len() * hw);
        for &i in indices {
            data.extend_from_slice(&self.buffer[i].pixels);
        }
        Tensor::new(vec![indices.len(), 1, self.canvas, self.canvas], data)
    }
}

// ---- reward normalizer -----------------------------------------------------

/// Streaming standardization of the raw intrinsic reward: exponentially
/// weighted moving average and variance, updated average first.
#[derive(Debug, Clone)]
pub struct RewardNormalizer {
    ema: f64,
    emv: f64,
    alpha: f64,
    t: u64,
    eps_var: f64,
}

impl RewardNormalizer {
    pub fn new(alpha: f64, eps_var: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0);
        RewardNormalizer {
            ema: 0.0,
            emv: 0.0,
            alpha,
            t: 0,
            eps_var,
        }
    }

    pub fn ema(&self) -> f64 {
        self.ema
    }

    pub fn emv(&self) -> f64 {
        self.emv
    }

    pub fn count(&self) -> u64 {
        self.t
    }

    /// Restore persisted state (checkpoint load path).
    pub fn restore(&mut self, ema: f64, emv: f64, t: u64) {
        self.ema = ema;
        self.emv = emv;
        self.t = t;
    }

    /// Update EMA then EMV, then return the standardized reward. The first
    /// observation initializes EMA to the reward itself (output 0).
    pub fn normalize(&mut self, r: f64) -> Result<f64> {
        if !r.is_finite() {
            return Err(GirmError::NonFiniteReward(r));
        }
        self.t += 1;
        if self.t == 1 {
            self.ema = r;
            self.emv = 0.0;
        } else {
            self.ema = self.alpha * r + (1.0 - self.alpha) * self.ema;
            let d = r - self.ema;
            self.emv = self.alpha * d * d + (1.0 - self.alpha) * self.emv;
        }
        Ok((r - self.ema) / (self.emv + self.eps_var).sqrt())
    }
}

// ---- configuration ---------------------------------------------------------

/// How the residual between an observation and its reconstruction becomes
/// a raw reward. Mean squared error per pixel is the shipped default; the
/// enum keeps the residual pluggable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    MsePerPixel,
}

impl ResidualKind {
    pub fn apply(self, s: &[f32], rec: &[f32]) -> f64 {
        match self {
            ResidualKind::MsePerPixel => {
                let n = s.len() as f64;
                s.iter()
                    .zip(rec)
                    .map(|(&a, &b)| {
                        let d = (a - b) as f64;
                        d * d
                    })
                    .sum::<f64>()
                    / n
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GirmConfig {
    pub canvas: usize,
    pub z_dim: usize,
    /// Feature-loss weight in the encoder objective.
    pub lambda_feat: f64,
    /// Gradient-penalty weight in the critic loss.
    pub lambda_gp: f64,
    /// Critic steps per generator step.
    pub n_critic: usize,
    pub batch_size: usize,
    pub first_gan_epochs: usize,
    pub first_encoder_epochs: usize,
    pub finetune_gan_epochs: usize,
    pub finetune_encoder_epochs: usize,
    pub memory_capacity: usize,
    pub residual: ResidualKind,
    /// Network width (filter count) for G/D/E hidden layers.
    pub width: usize,
    pub gen_norm: Norm,
    pub enc_norm: Norm,
    pub critic_norm: Norm,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for GirmConfig {
    fn default() -> Self {
        GirmConfig {
            canvas: 64,
            z_dim: 128,
            lambda_feat: 1.0,
            lambda_gp: 10.0,
            n_critic: 5,
            batch_size: 64,
            first_gan_epochs: 20,
            first_encoder_epochs: 10,
            finetune_gan_epochs: 2,
            finetune_encoder_epochs: 2,
            memory_capacity: 32768,
            residual: ResidualKind::MsePerPixel,
            width: 64,
            gen_norm: Norm::Batch,
            enc_norm: Norm::Batch,
            critic_norm: Norm::Layer,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

// ---- the module ------------------------------------------------------------

/// One reusable training graph: fixed leaves, a set of loss outputs and
/// named gradient outputs for exactly one of the three networks.
struct StepGraph {
    graph: Graph<f32>,
    plan: Plan,
    losses: Vec<NodeId>,
    grad_names: Vec<String>,
}

impl StepGraph {
    fn compile(
        mut graph: Graph<f32>,
        losses: Vec<NodeId>,
        grads: &GradientMap,
        param_nodes: &[(String, NodeId)],
    ) -> Self {
        let _ = &mut graph;
        let mut outputs = losses.clone();
        let mut grad_names = Vec::with_capacity(param_nodes.len());
        for (name, node) in param_nodes {
            outputs.push(grads[node]);
            grad_names.push(name.clone());
        }
        let plan = graph.plan(&outputs);
        StepGraph {
            graph,
            plan,
            losses,
            grad_names,
        }
    }

    /// Run the plan; returns the loss values and the name-keyed gradients.
    fn run(&self, bindings: &Bindings<f32>) -> Result<(Vec<f64>, HashMap<String, Tensor<f32>>)> {
        let mut values = self.plan.execute(&self.graph, bindings)?;
        let grads: HashMap<String, Tensor<f32>> = self
            .grad_names
            .iter()
            .cloned()
            .zip(values.drain(self.losses.len()..))
            .collect();
        let losses = values.iter().map(|t| t.item() as f64).collect();
        Ok((losses, grads))
    }
}

/// Per-epoch mean losses from a GAN training call.
#[derive(Debug, Clone, Default)]
pub struct GanLossTrace {
    pub critic: Vec<f64>,
    pub generator: Vec<f64>,
}

/// Generator/critic/encoder with their stores, the training schedule state
/// and compiled training/query graphs.
pub struct Girm {
    pub config: GirmConfig,
    pub gen_store: ParamStore<f32>,
    pub critic_store: ParamStore<f32>,
    pub enc_store: ParamStore<f32>,
    pub tap_dim: usize,
    phase: u32,
    rng: ChaCha8Rng,
    critic_step: StepGraph,
    gen_step: StepGraph,
    enc_step: StepGraph,
    query_graph: Graph<f32>,
    query_plan: Plan,
}

impl Girm {
    pub fn new(config: GirmConfig, seed: u64) -> Result<Girm> {
        if config.critic_norm == Norm::Batch {
            // per-sample gradient penalty is undefined under batch statistics
            return Err(GirmError::BatchNormCritic);
        }
        let (gen_spec, gen_store) = nets::build_generator(
            config.z_dim,
            config.canvas,
            config.gen_norm,
            config.width,
            seed ^ 0x67656e,
        )?;
        let (critic_spec, critic_store, tap_dim) = nets::build_critic(
            config.canvas,
            config.critic_norm,
            config.width,
            seed ^ 0x637269,
        )?;
        let (enc_spec, enc_store) =
            nets::build_encoder(config.canvas, config.z_dim, config.enc_norm, config.width, seed ^ 0x656e63)?;

        let b = config.batch_size;
        let (canvas, z_dim) = (config.canvas, config.z_dim);

        // -- critic step: WGAN-GP loss, gradients w.r.t. critic parameters
        let critic_step = {
            let mut g = Graph::<f32>::new();
            let real = g.leaf("real", &[b, 1, canvas, canvas]);
            let z = g.leaf("z", &[b, z_dim, 1, 1]);
            let u = g.leaf("u", &[b, 1, 1, 1]);
            let fake = gen_spec.forward(&mut g, z, "gen.")?;
            let d_real = critic_spec.forward(&mut g, real, "critic.")?;
            let d_real = g.reshape(d_real, &[b])?;
            let d_fake = critic_spec.forward(&mut g, fake, "critic.")?;
            let d_fake = g.reshape(d_fake, &[b])?;
            // interpolates u*real + (1-u)*fake
            let ub = g.broadcast(u, &[b, 1, canvas, canvas])?;
            let neg_u = g.neg(u);
            let one_minus_u = g.scalar_add(1.0, neg_u);
            let omb = g.broadcast(one_minus_u, &[b, 1, canvas, canvas])?;
            let mr = g.mul(ub, real)?;
            let mf = g.mul(omb, fake)?;
            let mix = g.add(mr, mf)?;
            let d_mix = critic_spec.forward(&mut g, mix, "critic.")?;
            let d_mix = g.reshape(d_mix, &[b])?;
            // per-sample input gradients via the sum trick
            let s = g.sum(d_mix, None, false)?;
            let gx = g.differentiate(s, &[mix])?[&mix];
            let sq = g.square(gx);
            let ssq = g.sum(sq, Some(&[1, 2, 3]), false)?;
            let gnorm = g.sqrt(ssq);
            let shifted = g.scalar_add(-1.0, gnorm);
            let pen = g.square(shifted);
            let gp = g.mean(pen, None, false)?;
            let mean_fake = g.mean(d_fake, None, false)?;
            let mean_real = g.mean(d_real, None, false)?;
            let neg_real = g.neg(mean_real);
            let wdist = g.add(mean_fake, neg_real)?;
            let gp_w = g.scalar_mul(config.lambda_gp as f32, gp);
            let loss = g.add(wdist, gp_w)?;
            let params = g.parameters_with_prefix("critic.");
            let ids: Vec<NodeId> = params.iter().map(|(_, id)| *id).collect();
            let grads = g.differentiate(loss, &ids)?;
            StepGraph::compile(g, vec![loss, gp], &grads, &params)
        };

        // -- generator step: -mean(D(G(z))), gradients w.r.t. generator
        let gen_step = {
            let mut g = Graph::<f32>::new();
            let z = g.leaf("z", &[b, z_dim, 1, 1]);
            let fake = gen_spec.forward(&mut g, z, "gen.")?;
            let d_fake = critic_spec.forward(&mut g, fake, "critic.")?;
            let d_fake = g.reshape(d_fake, &[b])?;
            let mean_fake = g.mean(d_fake, None, false)?;
            let loss = g.neg(mean_fake);
            let params = g.parameters_with_prefix("gen.");
            let ids: Vec<NodeId> = params.iter().map(|(_, id)| *id).collect();
            let grads = g.differentiate(loss, &ids)?;
            StepGraph::compile(g, vec![loss], &grads, &params)
        };

        // -- encoder step: pixel MSE + feature-space MSE, G and D frozen
        let enc_step = {
            let mut g = Graph::<f32>::new();
            let s = g.leaf("s", &[b, 1, canvas, canvas]);
            let z = enc_spec.forward(&mut g, s, "enc.")?;
            let rec = gen_spec.forward(&mut g, z, "gen.")?;
            let diff = g.sub(s, rec)?;
            let sq = g.square(diff);
            let mse = g.mean(sq, None, false)?;
            let f_real = critic_spec.forward_all(&mut g, s, "critic.")?[4];
            let f_rec = critic_spec.forward_all(&mut g, rec, "critic.")?[4];
            let f_real = g.reshape(f_real, &[b, tap_dim])?;
            let f_rec = g.reshape(f_rec, &[b, tap_dim])?;
            let fdiff = g.sub(f_real, f_rec)?;
            let fsq = g.square(fdiff);
            let fmse = g.mean(fsq, None, false)?;
            let fw = g.scalar_mul(config.lambda_feat as f32, fmse);
            let loss = g.add(mse, fw)?;
            let params = g.parameters_with_prefix("enc.");
            let ids: Vec<NodeId> = params.iter().map(|(_, id)| *id).collect();
            let grads = g.differentiate(loss, &ids)?;
            StepGraph::compile(g, vec![loss], &grads, &params)
        };

        // -- query: reconstruction of a single frame
        let mut query_graph = Graph::<f32>::new();
        let qs = query_graph.leaf("s", &[1, 1, canvas, canvas]);
        let qz = enc_spec.forward(&mut query_graph, qs, "enc.")?;
        let qrec = gen_spec.forward(&mut query_graph, qz, "gen.")?;
        let query_plan = query_graph.plan(&[qrec]);

        Ok(Girm {
            config,
            gen_store,
            critic_store,
            enc_store,
            tap_dim,
            phase: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x726e67),
            critic_step,
            gen_step,
            enc_step,
            query_graph,
            query_plan,
        })
    }

    /// True once the first training phase has completed.
    pub fn trained(&self) -> bool {
        self.phase >= 1
    }

    pub fn phase(&self) -> u32 {
        self.phase
    }

    pub fn rng_state(&self) -> ([u8; 32], u128) {
        (self.rng.get_seed(), self.rng.get_word_pos())
    }

    pub fn restore_schedule(&mut self, phase: u32, rng_seed: [u8; 32], rng_pos: u128) {
        self.phase = phase;
        self.rng = ChaCha8Rng::from_seed(rng_seed);
        self.rng.set_word_pos(rng_pos);
    }

    fn sample_z(&mut self, n: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..n * self.config.z_dim)
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        Tensor::new(vec![n, self.config.z_dim, 1, 1], data)
    }

    fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    /// Alternating WGAN-GP updates over a full memory: `n_critic` critic
    /// steps per generator step. Returns per-epoch mean losses.
    pub fn train_gan(&mut self, mem: &StateMemory, epochs: usize) -> Result<GanLossTrace> {
        if epochs == 0 {
            return Err(GirmError::ZeroEpochs);
        }
        if !mem.is_full() {
            return Err(GirmError::MemoryNotFull {
                fill: mem.len(),
                capacity: mem.capacity(),
            });
        }
        let b = self.config.batch_size;
        let mut trace = GanLossTrace::default();
        for epoch in 0..epochs {
            let order = self.shuffled_indices(mem.len());
            let mut critic_sum = 0.0;
            let mut critic_n = 0usize;
            let mut gen_sum = 0.0;
            let mut gen_n = 0usize;
            for (batch_idx, chunk) in order.chunks(b).enumerate() {
                if chunk.len() < b {
                    break; // drop the remainder batch: graphs have fixed shape
                }
                let real = mem.batch(chunk);
                let z = self.sample_z(b);
                let u = Tensor::new(
                    vec![b, 1, 1, 1],
                    (0..b).map(|_| self.rng.gen_range(0.0..1.0f32)).collect(),
                );
                let bind = Bindings::new()
                    .leaf("real", real)
                    .leaf("z", z)
                    .leaf("u", u)
                    .params(&self.gen_store)
                    .params(&self.critic_store);
                let (losses, grads) = self.critic_step.run(&bind)?;
                let loss = losses[0];
                if !loss.is_finite() {
                    return Err(GirmError::NonFiniteLoss {
                        stage: "critic",
                        epoch,
                        batch: batch_idx,
                        value: loss,
                    });
                }
                critic_sum += loss;
                critic_n += 1;
                drop(bind);
                self.adam(Net::Critic, &grads)?;

                if (batch_idx + 1) % self.config.n_critic == 0 {
                    let z = self.sample_z(b);
                    let bind = Bindings::new()
                        .leaf("z", z)
                        .params(&self.gen_store)
                        .params(&self.critic_store);
                    let (losses, grads) = self.gen_step.run(&bind)?;
                    let loss = losses[0];
                    if !loss.is_finite() {
                        return Err(GirmError::NonFiniteLoss {
                            stage: "generator",
                            epoch,
                            batch: batch_idx,
                            value: loss,
                        });
                    }
                    gen_sum += loss;
                    gen_n += 1;
                    drop(bind);
                    self.adam(Net::Generator, &grads)?;
                }
            }
            trace.critic.push(critic_sum / critic_n.max(1) as f64);
            trace
                .generator
                .push(if gen_n > 0 { gen_sum / gen_n as f64 } else { 0.0 });
        }
        Ok(trace)
    }

    /// Encoder inversion training with G and D frozen: pixel MSE plus
    /// feature-tap MSE. Returns per-epoch mean losses.
    pub fn train_encoder(&mut self, mem: &StateMemory, epochs: usize) -> Result<Vec<f64>> {
        if epochs == 0 {
            return Err(GirmError::ZeroEpochs);
        }
        if !mem.is_full() {
            return Err(GirmError::MemoryNotFull {
                fill: mem.len(),
                capacity: mem.capacity(),
            });
        }
        let b = self.config.batch_size;
        let mut trace = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let order = self.shuffled_indices(mem.len());
            let mut sum = 0.0;
            let mut n = 0usize;
            for (batch_idx, chunk) in order.chunks(b).enumerate() {
                if chunk.len() < b {
                    break;
                }
                let s = mem.batch(chunk);
                let bind = Bindings::new()
                    .leaf("s", s)
                    .params(&self.gen_store)
                    .params(&self.critic_store)
                    .params(&self.enc_store);
                let (losses, grads) = self.enc_step.run(&bind)?;
                let loss = losses[0];
                if !loss.is_finite() {
                    return Err(GirmError::NonFiniteLoss {
                        stage: "encoder",
                        epoch,
                        batch: batch_idx,
                        value: loss,
                    });
                }
                sum += loss;
                n += 1;
                drop(bind);
                self.adam(Net::Encoder, &grads)?;
            }
            trace.push(sum / n.max(1) as f64);
        }
        Ok(trace)
    }

    fn adam(&mut self, net: Net, grads: &HashMap<String, Tensor<f32>>) -> Result<()> {
        let c = &self.config;
        let store = match net {
            Net::Generator => &mut self.gen_store,
            Net::Critic => &mut self.critic_store,
            Net::Encoder => &mut self.enc_store,
        };
        store.adam_update(
            grads,
            c.learning_rate as f32,
            c.beta1 as f32,
            c.beta2 as f32,
            c.adam_eps as f32,
        )?;
        Ok(())
    }

    /// Raw novelty: residual between the observation and its
    /// reconstruction G(E(s)). Pure for frozen parameters; contract error
    /// while untrained.
    pub fn raw_intrinsic(&self, obs: &Observation) -> Result<f64> {
        if !self.trained() {
            return Err(GirmError::Untrained);
        }
        let s = obs.to_tensor();
        let bind = Bindings::new()
            .leaf("s", s)
            .params(&self.gen_store)
            .params(&self.enc_store);
        let rec = self.query_plan.execute(&self.query_graph, &bind)?.remove(0);
        Ok(self.config.residual.apply(&obs.pixels, rec.data()))
    }

    /// Gated, standardized intrinsic reward: exactly 0 (normalizer
    /// untouched) until the first training phase completes.
    pub fn intrinsic_reward(&self, norm: &mut RewardNormalizer, obs: &Observation) -> Result<f64> {
        if !self.trained() {
            return Ok(0.0);
        }
        let raw = self.raw_intrinsic(obs)?;
        norm.normalize(raw)
    }

    /// When the memory is full: train the GAN then the encoder (first-phase
    /// epoch counts on phase 0, fine-tune counts after), clear the memory
    /// and advance the phase. Returns whether training ran, with the loss
    /// traces for logging.
    pub fn maybe_train(&mut self, mem: &mut StateMemory) -> Result<Option<TrainReport>> {
        if !mem.is_full() {
            return Ok(None);
        }
        let (gan_epochs, enc_epochs) = if self.phase == 0 {
            (self.config.first_gan_epochs, self.config.first_encoder_epochs)
        } else {
            (self.config.finetune_gan_epochs, self.config.finetune_encoder_epochs)
        };
        let gan = self.train_gan(mem, gan_epochs)?;
        let encoder = self.train_encoder(mem, enc_epochs)?;
        mem.clear();
        self.phase += 1;
        Ok(Some(TrainReport { gan, encoder }))
    }
}

impl Girm {
    /// Reconstruction pixels for diagnostics.
    pub fn debug_reconstruct(&self, obs: &Observation) -> Result<Vec<f32>> {
        if !self.trained() {
            return Err(GirmError::Untrained);
        }
        let bind = Bindings::new()
            .leaf("s", obs.to_tensor())
            .params(&self.gen_store)
            .params(&self.enc_store);
        Ok(self.query_plan.execute(&self.query_graph, &bind)?.remove(0).into_data())
    }

    /// A raw generator sample for diagnostics.
    pub fn debug_sample(&self, seed: u64) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let z = g.leaf("z", &[1, self.config.z_dim, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zv: Vec<f32> = (0..self.config.z_dim).map(|_| rng.sample(StandardNormal)).collect();
        // replay the generator graph from the query graph prefix names
        let spec = nets::build_generator(
            self.config.z_dim,
            self.config.canvas,
            self.config.gen_norm,
            self.config.width,
            0,
        )?
        .0;
        let out = spec.forward(&mut g, z, "gen.")?;
        let bind = Bindings::new()
            .leaf("z", Tensor::new(vec![1, self.config.z_dim, 1, 1], zv))
            .params(&self.gen_store);
        Ok(g.evaluate(&[out], &bind)?.remove(0).into_data())
    }
}

enum Net {
    Generator,
    Critic,
    Encoder,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub gan: GanLossTrace,
    pub encoder: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(canvas: usize, value: f32) -> Observation {
        Observation {
            canvas,
            pixels: vec![value; canvas * canvas],
        }
    }

    fn tiny_config() -> GirmConfig {
        GirmConfig {
            canvas: 32,
            z_dim: 16,
            width: 8,
            batch_size: 8,
            memory_capacity: 32,
            n_critic: 2,
            first_gan_epochs: 1,
            first_encoder_epochs: 1,
            finetune_gan_epochs: 1,
            finetune_encoder_epochs: 1,
            gen_norm: Norm::Layer,
            enc_norm: Norm::Layer,
            ..GirmConfig::default()
        }
    }

    #[test]
    fn memory_fills_and_reports_full() {
        let mut mem = StateMemory::new(3, 32);
        assert!(!mem.store(obs(32, 0.0)).unwrap());
        assert!(!mem.store(obs(32, 0.1)).unwrap());
        assert!(mem.store(obs(32, 0.2)).unwrap(), "third call reports full");
        assert!(matches!(mem.store(obs(32, 0.3)), Err(GirmError::MemoryFull)));
        mem.clear();
        assert_eq!(mem.len(), 0);
    }

    #[test]
    fn memory_rejects_shape_mismatch() {
        let mut mem = StateMemory::new(3, 32);
        assert!(matches!(
            mem.store(obs(64, 0.0)),
            Err(GirmError::ObservationShape { .. })
        ));
    }

    #[test]
    fn normalizer_first_reward_outputs_zero() {
        let mut n = RewardNormalizer::new(0.01, 1e-8);
        let out = n.normalize(5.0).unwrap();
        assert_eq!(out, 0.0);
        assert_eq!(n.ema(), 5.0);
        assert_eq!(n.emv(), 0.0);
        assert_eq!(n.count(), 1);
    }

    #[test]
    fn normalizer_hand_evaluated_second_step() {
        // alpha = 0.01: ema after r1=1, r2=2 is 0.01*2 + 0.99*1 = 1.01
        let mut n = RewardNormalizer::new(0.01, 1e-8);
        n.normalize(1.0).unwrap();
        n.normalize(2.0).unwrap();
        assert!((n.ema() - 1.01).abs() < 1e-12);
        // emv = 0.01 * (2 - 1.01)^2 = 0.0098... (post-update EMA)
        assert!((n.emv() - 0.01 * (2.0f64 - 1.01).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn normalizer_constant_stream_outputs_zero() {
        let mut n = RewardNormalizer::new(0.01, 1e-8);
        for _ in 0..100 {
            assert_eq!(n.normalize(3.5).unwrap(), 0.0);
        }
    }

    #[test]
    fn normalizer_emv_nonnegative_and_rejects_nonfinite() {
        let mut n = RewardNormalizer::new(0.3, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            n.normalize(rng.gen_range(-10.0..10.0)).unwrap();
            assert!(n.emv() >= 0.0);
        }
        assert!(n.normalize(f64::NAN).is_err());
    }

    #[test]
    fn normalizer_scale_consistent() {
        // identical outputs for streams r and k*r when eps_var = 0
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stream: Vec<f64> = (0..200).map(|_| rng.gen_range(0.1..5.0)).collect();
        let k = 37.5;
        let mut a = RewardNormalizer::new(0.05, 0.0);
        let mut b = RewardNormalizer::new(0.05, 0.0);
        for (i, &r) in stream.iter().enumerate() {
            let x = a.normalize(r).unwrap();
            let y = b.normalize(k * r).unwrap();
            if i >= 1 {
                assert!(
                    (x - y).abs() < 1e-9,
                    "step {i}: {x} vs {y} not scale-consistent"
                );
            }
        }
    }

    #[test]
    fn residual_examples() {
        let r = ResidualKind::MsePerPixel;
        let a = vec![0.5f32; 16];
        assert_eq!(r.apply(&a, &a), 0.0, "perfect inversion scores zero");
        let b = vec![0.5f32 - 0.25; 16];
        let got = r.apply(&a, &b);
        assert!((got - 0.0625).abs() < 1e-9, "uniform offset c scores c^2");
    }

    #[test]
    fn girm_rejects_batch_norm_critic() {
        let cfg = GirmConfig {
            critic_norm: Norm::Batch,
            ..tiny_config()
        };
        assert!(matches!(Girm::new(cfg, 0), Err(GirmError::BatchNormCritic)));
    }

    #[test]
    fn untrained_girm_gates_to_zero_and_leaves_normalizer() {
        let girm = Girm::new(tiny_config(), 0).unwrap();
        let mut norm = RewardNormalizer::new(0.01, 1e-8);
        let r = girm
            .intrinsic_reward(&mut norm, &obs(32, 0.3))
            .unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(norm.count(), 0, "normalizer untouched while gated");
        assert!(matches!(
            girm.raw_intrinsic(&obs(32, 0.3)),
            Err(GirmError::Untrained)
        ));
    }

    #[test]
    fn train_rejects_partial_memory_and_zero_epochs() {
        let mut girm = Girm::new(tiny_config(), 0).unwrap();
        let mut mem = StateMemory::new(32, 32);
        mem.store(obs(32, 0.0)).unwrap();
        assert!(matches!(
            girm.train_gan(&mem, 1),
            Err(GirmError::MemoryNotFull { .. })
        ));
        while !mem.is_full() {
            mem.store(obs(32, 0.0)).unwrap();
        }
        assert!(matches!(girm.train_gan(&mem, 0), Err(GirmError::ZeroEpochs)));
    }

    #[test]
    fn maybe_train_runs_once_clears_memory_and_unlocks_rewards() {
        let mut girm = Girm::new(tiny_config(), 1).unwrap();
        let mut mem = StateMemory::new(32, 32);
        assert!(girm.maybe_train(&mut mem).unwrap().is_none(), "not full: no-op");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        while !mem.is_full() {
            let v: f32 = rng.gen_range(-0.5..0.5);
            mem.store(obs(32, v)).unwrap();
        }
        let report = girm.maybe_train(&mut mem).unwrap().expect("trained");
        assert_eq!(report.gan.critic.len(), 1);
        assert_eq!(report.encoder.len(), 1);
        assert_eq!(mem.len(), 0, "memory cleared after training");
        assert_eq!(girm.phase(), 1);
        assert!(girm.trained());
        // rewards flow now, and raw queries are pure
        let mut norm = RewardNormalizer::new(0.01, 1e-8);
        let o = obs(32, 0.123);
        let a = girm.raw_intrinsic(&o).unwrap();
        let b = girm.raw_intrinsic(&o).unwrap();
        assert_eq!(a, b, "raw intrinsic is a pure function of the frame");
        assert!(a.is_finite());
        let first = girm.intrinsic_reward(&mut norm, &o).unwrap();
        assert_eq!(first, 0.0, "first normalized reward is zero by Eq. 5-7");
        assert_eq!(norm.count(), 1);
    }

    #[test]
    fn linear_critic_penalty_inside_training_graph() {
        // sanity: with lambda_gp > 0 the gp output of the critic step is
        // finite and nonnegative on random nets
        let mut girm = Girm::new(tiny_config(), 3).unwrap();
        let mut mem = StateMemory::new(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        while !mem.is_full() {
            mem.store(obs(32, rng.gen_range(-1.0..1.0))).unwrap();
        }
        let trace = girm.train_gan(&mem, 1).unwrap();
        assert!(trace.critic[0].is_finite());
    }
}
