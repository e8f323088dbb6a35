//! Encoder–decoder over dynamic graph cells with scheduled sampling.
//!
//! The forward pass is
//! `fuse_resolutions → self_attention → encode (S cell steps, H⁰ = 0) →
//! decode (T cell steps)`. The decoder starts from the encoder's final
//! state and the last observed current-resolution value; each later input
//! is the ground truth with probability `ε` and the previous prediction
//! otherwise. A `q → 1` projection turns every decoder state into a
//! per-node forecast.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionParams, RESOLUTIONS};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::cell::{CellConfig, CellParams, DynamicGraphCell, GraphControl, Variant};
use crate::dataset::WindowSample;
use crate::error::{Error, Result};
use crate::graph::StaticGraph;
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_nodes: usize,
    /// History length `S`.
    pub history: usize,
    /// Horizon `T`.
    pub horizon: usize,
    /// Attention output channels `C_out`.
    pub c_out: usize,
    /// Hidden size `q`.
    pub hidden: usize,
    /// Per-head projection width `D_out`.
    pub head_dim: usize,
    /// Dynamic graphs `m`.
    pub heads: usize,
    /// Diffusion terms `K`.
    pub diffusion_steps: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// `C_out = 3, q = 32, D_out = 16, m = 3, K = 3, S = T = 12`.
    pub fn reference(n_nodes: usize) -> Self {
        ModelConfig {
            n_nodes,
            history: 12,
            horizon: 12,
            c_out: 3,
            hidden: 32,
            head_dim: 16,
            heads: 3,
            diffusion_steps: 3,
            variant: Variant::Full,
        }
    }

    pub fn encoder_cell(&self) -> CellConfig {
        CellConfig {
            n_nodes: self.n_nodes,
            in_channels: self.c_out,
            hidden: self.hidden,
            head_dim: self.head_dim,
            heads: self.heads,
            diffusion_steps: self.diffusion_steps,
        }
    }

    pub fn decoder_cell(&self) -> CellConfig {
        CellConfig {
            in_channels: 1,
            ..self.encoder_cell()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 {
            return Err(Error::Config("history and horizon must be positive".into()));
        }
        if self.c_out != RESOLUTIONS {
            return Err(Error::Config(format!(
                "c_out must equal the {RESOLUTIONS} input resolutions for the attention residual, got {}",
                self.c_out
            )));
        }
        self.encoder_cell().validate()
    }

    /// Every parameter name this configuration owns, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = AttentionParams::NAMES
            .iter()
            .map(|n| format!("attention.{n}"))
            .collect();
        names.extend(CellParams::names("encoder", &self.encoder_cell(), self.variant));
        names.extend(CellParams::names("decoder", &self.decoder_cell(), self.variant));
        names.push("output.projection".into());
        names
    }
}

/// Inverse-sigmoid decay of the teacher-forcing probability:
/// `ε_i = τ / (τ + exp(i / τ))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSchedule {
    pub tau: f64,
}

impl SamplingSchedule {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau >= 1.0 && tau.is_finite()) {
            return Err(Error::Config(format!("sampling decay tau must be >= 1, got {tau}")));
        }
        Ok(SamplingSchedule { tau })
    }

    pub fn eps_at(&self, iteration: u64) -> f64 {
        eps_at(self, iteration)
    }
}

pub fn eps_at(schedule: &SamplingSchedule, iteration: u64) -> f64 {
    let tau = schedule.tau;
    tau / (tau + libm::exp(iteration as f64 / tau))
}

/// A minibatch of windows stacked along a leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, S, N]`.
    pub x_current: Tensor,
    pub x_day: Tensor,
    pub x_week: Tensor,
    /// `[B, T, N]`.
    pub y: Tensor,
    pub y_mask: Tensor,
    pub anchors: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[WindowSample]) -> Result<Self> {
        let collect = |f: fn(&WindowSample) -> &Tensor| {
            let parts: Vec<Tensor> = samples.iter().map(|s| f(s).clone()).collect();
            Tensor::stack(&parts)
        };
        Ok(Batch {
            x_current: collect(|s| &s.x_current)?,
            x_day: collect(|s| &s.x_day)?,
            x_week: collect(|s| &s.x_week)?,
            y: collect(|s| &s.y)?,
            y_mask: collect(|s| &s.y_mask)?,
            anchors: samples.iter().map(|s| s.anchor).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x_current.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// `X̂` of shape `[B, S, N, 3]`.
    pub fn fused(&self) -> Result<Tensor> {
        attention::fuse_blocks(&self.x_current, &self.x_day, &self.x_week)
    }

    /// Decoder GO input: the last current-resolution observation, `[B, N]`.
    pub fn go_values(&self) -> Tensor {
        let (b, s, n) = (
            self.x_current.shape()[0],
            self.x_current.shape()[1],
            self.x_current.shape()[2],
        );
        let mut data = Vec::with_capacity(b * n);
        for i in 0..b {
            let start = (i * s + s - 1) * n;
            data.extend_from_slice(&self.x_current.data()[start..start + n]);
        }
        Tensor::from_parts(vec![b, n], data)
    }
}

/// Decoder result.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// `[B, T, N]` normalized-scale forecasts.
    pub prediction: Var,
    /// Hidden state fed to the first decoder step.
    pub initial_state: Var,
    /// For steps `1..T`: whether the input was the ground truth.
    pub teacher_used: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub prediction: Var,
    pub encoder_state: Var,
    pub decoder_initial_state: Var,
    pub teacher_used: Vec<bool>,
    /// `[B·S, N, N]` attention rows.
    pub attention: Var,
}

/// The network: self-attention, encoder cell, decoder cell and output head.
#[derive(Debug, Clone)]
pub struct Adgcrnn {
    pub config: ModelConfig,
    pub attention: AttentionParams,
    pub encoder: DynamicGraphCell,
    pub decoder: DynamicGraphCell,
    pub projection: ParamId,
}

impl Adgcrnn {
    /// Builds a freshly initialized model; initialization is fully
    /// determined by `seed`.
    pub fn init(config: ModelConfig, graph: &StaticGraph, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        check_graph(&config, graph)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        AttentionParams::init(&mut store, "attention", config.c_out, &mut rng)?;
        CellParams::init(&mut store, "encoder", &config.encoder_cell(), config.variant, &mut rng)?;
        CellParams::init(&mut store, "decoder", &config.decoder_cell(), config.variant, &mut rng)?;
        store.add("output.projection", Tensor::fan_in_uniform(&mut rng, config.hidden, 1))?;
        let model = Self::from_params(config, graph, &store)?;
        Ok((model, store))
    }

    /// Binds a configuration to existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, graph: &StaticGraph, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        check_graph(&config, graph)?;
        let expected = config.param_names();
        if let Some(extra) = store.names().find(|n| !expected.iter().any(|e| e == n)) {
            return Err(Error::Config(format!(
                "parameter {extra} is not part of a variant-{} model",
                config.variant
            )));
        }
        let attention = AttentionParams::lookup(store, "attention")?;
        let cell = |prefix: &str, cfg: CellConfig| -> Result<DynamicGraphCell> {
            Ok(DynamicGraphCell {
                config: cfg,
                variant: config.variant,
                params: CellParams::lookup(store, prefix, &cfg, config.variant)?,
                static_adj: graph.normalized().clone(),
            })
        };
        let encoder = cell("encoder", config.encoder_cell())?;
        let decoder = cell("decoder", config.decoder_cell())?;
        let projection = store
            .find("output.projection")
            .ok_or_else(|| Error::Config("missing parameter output.projection".into()))?;
        if store.get(projection).value.shape() != [config.hidden, 1] {
            return Err(Error::Config("output.projection must be [hidden, 1]".into()));
        }
        Ok(Adgcrnn {
            config,
            attention,
            encoder,
            decoder,
            projection,
        })
    }

    /// Runs the encoder over `x_sa: [B, S, N, C_out]` from a zero state.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x_sa: Var, control: &mut GraphControl) -> Result<Var> {
        let shape = tape.shape(x_sa).to_vec();
        let c = &self.config;
        if shape.len() != 4 || shape[2] != c.n_nodes || shape[3] != c.c_out {
            return Err(Error::shape(
                "encode",
                format!("expected [B, S, {}, {}], got {shape:?}", c.n_nodes, c.c_out),
            ));
        }
        let (batch, steps) = (shape[0], shape[1]);
        let mut h = tape.constant(Tensor::zeros(&[batch, c.n_nodes, c.hidden]));
        for s in 0..steps {
            let xs = tape.narrow(x_sa, 1, s, 1)?;
            let xs = tape.reshape(xs, &[batch, c.n_nodes, c.c_out])?;
            h = self.encoder.step(tape, store, xs, h, control)?;
        }
        Ok(h)
    }

    /// Unrolls the decoder for `T` steps.
    ///
    /// `go` is `[B, N]`, `teacher` is `[B, T, N]` and must be present when
    /// `eps > 0`. One coin is drawn from a ChaCha8 stream seeded with `seed`
    /// for each step `1..T`; the ground truth is used when the draw is below
    /// `eps`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        go: &Tensor,
        teacher: Option<&Tensor>,
        eps: f64,
        seed: u64,
        control: &mut GraphControl,
    ) -> Result<DecodeOutput> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Contract(format!(
                "teacher-forcing probability {eps} outside [0, 1]"
            )));
        }
        if eps > 0.0 && teacher.is_none() {
            return Err(Error::Contract("eps > 0 needs a teacher sequence".into()));
        }
        let c = &self.config;
        let batch = tape.shape(h)[0];
        if go.shape() != [batch, c.n_nodes] {
            return Err(Error::shape(
                "decode",
                format!("GO input {:?} should be [{batch}, {}]", go.shape(), c.n_nodes),
            ));
        }
        if let Some(t) = teacher {
            if t.shape() != [batch, c.horizon, c.n_nodes] {
                return Err(Error::shape(
                    "decode",
                    format!(
                        "teacher {:?} should be [{batch}, {}, {}]",
                        t.shape(),
                        c.horizon,
                        c.n_nodes
                    ),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = tape.param(store, self.projection);
        let mut input = tape.constant(go.reshape(&[batch, c.n_nodes, 1])?);
        let mut state = h;
        let mut outputs = Vec::with_capacity(c.horizon);
        let mut teacher_used = Vec::with_capacity(c.horizon.saturating_sub(1));
        for step in 0..c.horizon {
            if step > 0 {
                let use_truth = rng.random::<f64>() < eps;
                teacher_used.push(use_truth);
                input = match (use_truth, teacher) {
                    (true, Some(t)) => tape.constant(teacher_step(t, step - 1)),
                    _ => {
                        let prev = *outputs.last().unwrap();
                        tape.reshape(prev, &[batch, c.n_nodes, 1])?
                    }
                };
            }
            state = self.decoder.step(tape, store, input, state, control)?;
            let y = tape.linear(state, projection, None)?;
            let y = tape.reshape(y, &[batch, 1, c.n_nodes])?;
            outputs.push(y);
        }
        let prediction = tape.concat(&outputs, 1)?;
        Ok(DecodeOutput {
            prediction,
            initial_state: h,
            teacher_used,
        })
    }

    /// Full forward pass on a batch; output is `[B, T, N]` on the normalized scale.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        eps: f64,
        seed: u64,
        control: &mut GraphControl,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let xs = batch.x_current.shape();
        if xs.len() != 3 || xs[1] != c.history || xs[2] != c.n_nodes {
            return Err(Error::shape(
                "forward",
                format!("batch inputs {xs:?} do not match S={}, N={}", c.history, c.n_nodes),
            ));
        }
        let x_hat = tape.constant(batch.fused()?);
        let att = attention::self_attention(tape, store, x_hat, &self.attention)?;
        let encoder_state = self.encode(tape, store, att.output, control)?;
        let teacher = (eps > 0.0).then_some(&batch.y);
        let dec = self.decode(
            tape,
            store,
            encoder_state,
            &batch.go_values(),
            teacher,
            eps,
            seed,
            control,
        )?;
        Ok(ForwardOutput {
            prediction: dec.prediction,
            encoder_state,
            decoder_initial_state: dec.initial_state,
            teacher_used: dec.teacher_used,
            attention: att.weights,
        })
    }

    /// Inference on a single window: `[T, N]` normalized forecasts.
    pub fn predict(&self, store: &ParamStore, sample: &WindowSample) -> Result<Tensor> {
        let batch = Batch::from_samples(core::slice::from_ref(sample))?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &batch, 0.0, 0, &mut GraphControl::default())?;
        tape.value(out.prediction)
            .index_leading(0)
            .reshape(&[self.config.horizon, self.config.n_nodes])
    }
}

fn teacher_step(t: &Tensor, step: usize) -> Tensor {
    let (b, horizon, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(b * n);
    for i in 0..b {
        let start = (i * horizon + step) * n;
        data.extend_from_slice(&t.data()[start..start + n]);
    }
    Tensor::from_parts(vec![b, n, 1], data)
}

fn check_graph(config: &ModelConfig, graph: &StaticGraph) -> Result<()> {
    if graph.n_nodes() != config.n_nodes {
        return Err(Error::Config(format!(
            "n_nodes: model has {} but graph has {}",
            config.n_nodes,
            graph.n_nodes()
        )));
    }
    Ok(())
}
