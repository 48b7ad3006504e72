//! The crossing-intention network: three modality encoders fused along the
//! channel dimension, a Transformer temporal encoder, and an MLP head.

mod encoders;
mod transformer;

pub mod checkpoint;

pub use checkpoint::Checkpoint;
pub use transformer::sinusoidal_positional_encoding;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{default_skeleton_graph, SkeletonGraph};
use crate::tensor::{Mode, RunningStats, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Size of the categorical ego-motion vocabulary.
pub const EGO_STATE_COUNT: usize = 5;

/// How ego-vehicle motion enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoMode {
    /// Continuous speed in km/h plus the global window acceleration.
    Speed,
    /// One-hot over five motion states plus the acceleration channel
    /// (acceleration is zero when speeds are unavailable).
    States,
}

/// Which modality encoders are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSwitches {
    pub position: bool,
    pub ego: bool,
    pub skeleton: bool,
}

impl Default for EncoderSwitches {
    fn default() -> Self {
        EncoderSwitches {
            position: true,
            ego: true,
            skeleton: true,
        }
    }
}

/// Which feature blocks feed the position encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionFeatureSwitches {
    pub displacement: bool,
    pub velocity: bool,
    /// The differenced line-disparity pair.
    pub pdm_coords: bool,
    /// The scaled box-area ratio.
    pub pdm_ratio: bool,
}

impl Default for PositionFeatureSwitches {
    fn default() -> Self {
        PositionFeatureSwitches {
            displacement: true,
            velocity: true,
            pdm_coords: true,
            pdm_ratio: true,
        }
    }
}

impl PositionFeatureSwitches {
    /// Width of the decoupled-position block (0 when fully ablated).
    pub fn pdm_width(&self) -> usize {
        2 * usize::from(self.pdm_coords) + usize::from(self.pdm_ratio)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Observation window length T.
    pub frames: usize,
    /// Channel width shared by every encoder output.
    pub channel_dim: usize,
    /// Hidden width of the graph-convolution blocks.
    pub gcn_hidden: usize,
    pub gcn_layers: usize,
    pub attention_heads: usize,
    pub transformer_layers: usize,
    /// Hidden width of the Transformer feed-forward block.
    pub feed_forward_dim: usize,
    pub dropout: f64,
    /// Skeleton joints per frame.
    pub joints: usize,
    pub ego_mode: EgoMode,
    pub encoders: EncoderSwitches,
    pub position_features: PositionFeatureSwitches,
    /// Table-style toggle: per-layer trainable edge masks on the adjacency.
    pub learnable_edges: bool,
    /// Adds the fixed sinusoidal positional encoding before the Transformer.
    pub sinusoidal_pe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 16,
            channel_dim: 64,
            gcn_hidden: 64,
            gcn_layers: 4,
            attention_heads: 4,
            transformer_layers: 4,
            feed_forward_dim: 64,
            dropout: 0.1,
            joints: 20,
            ego_mode: EgoMode::Speed,
            encoders: EncoderSwitches::default(),
            position_features: PositionFeatureSwitches::default(),
            learnable_edges: true,
            sinusoidal_pe: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("channel_dim", self.channel_dim),
            ("gcn_hidden", self.gcn_hidden),
            ("gcn_layers", self.gcn_layers),
            ("attention_heads", self.attention_heads),
            ("transformer_layers", self.transformer_layers),
            ("feed_forward_dim", self.feed_forward_dim),
            ("joints", self.joints),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.channel_dim % self.attention_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "channel_dim {} not divisible by attention_heads {}",
                self.channel_dim, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        let e = &self.encoders;
        if !e.position && !e.ego && !e.skeleton {
            return Err(ModelError::BadConfig(
                "at least one encoder must be enabled".into(),
            ));
        }
        if e.position && self.position_width() == 0 {
            return Err(ModelError::BadConfig(
                "position encoder enabled but every position feature is ablated".into(),
            ));
        }
        Ok(())
    }

    /// Input width of the ego speed/state stream.
    pub fn ego_speed_width(&self) -> usize {
        match self.ego_mode {
            EgoMode::Speed => 1,
            EgoMode::States => EGO_STATE_COUNT,
        }
    }

    fn position_width(&self) -> usize {
        let p = &self.position_features;
        p.pdm_width() + 2 * usize::from(p.displacement) + 2 * usize::from(p.velocity)
    }

    /// Number of active encoder branches (width of the fusion concat in
    /// units of `channel_dim`).
    pub fn fusion_branches(&self) -> usize {
        usize::from(self.encoders.position)
            + usize::from(self.encoders.ego)
            + usize::from(self.encoders.skeleton)
    }
}

/// A weight matrix `[d_in, d_out]` with an optional bias row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnBlockParams {
    /// Feature transform, no bias.
    pub weight: Tensor,
    /// Trainable edge mask multiplied elementwise into the normalized
    /// adjacency; absent when running with fixed edges.
    pub edge_mask: Option<Tensor>,
    /// Per-node channel-mixing residual map; absent on the first block.
    pub channel_mix: Option<Linear>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionEncoderParams {
    pub pdm: Option<Linear>,
    pub displacement: Option<Linear>,
    pub velocity: Option<Linear>,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoEncoderParams {
    pub speed: Linear,
    pub accel: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonEncoderParams {
    pub input_norm: NormParams,
    pub blocks: Vec<GcnBlockParams>,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerParams {
    pub attention: AttentionParams,
    pub norm1: NormParams,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: NormParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub position: Option<PositionEncoderParams>,
    pub ego: Option<EgoEncoderParams>,
    pub skeleton: Option<SkeletonEncoderParams>,
    pub fusion: Linear,
    pub layers: Vec<EncoderLayerParams>,
    pub head: Linear,
}

fn visit_linear<'a>(name: &str, l: &'a Linear, f: &mut dyn FnMut(String, &'a Tensor)) {
    f(format!("{name}.weight"), &l.weight);
    if let Some(b) = &l.bias {
        f(format!("{name}.bias"), b);
    }
}

fn visit_linear_mut(name: &str, l: &mut Linear, f: &mut dyn FnMut(String, &mut Tensor)) {
    f(format!("{name}.weight"), &mut l.weight);
    if let Some(b) = &mut l.bias {
        f(format!("{name}.bias"), b);
    }
}

impl ModelParams {
    /// Visit every parameter tensor in a fixed order with a dotted path name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = &self.position {
            if let Some(l) = &p.pdm {
                visit_linear("position.pdm", l, f);
            }
            if let Some(l) = &p.displacement {
                visit_linear("position.displacement", l, f);
            }
            if let Some(l) = &p.velocity {
                visit_linear("position.velocity", l, f);
            }
            visit_linear("position.out", &p.out, f);
        }
        if let Some(e) = &self.ego {
            visit_linear("ego.speed", &e.speed, f);
            visit_linear("ego.accel", &e.accel, f);
            visit_linear("ego.out", &e.out, f);
        }
        if let Some(s) = &self.skeleton {
            f("skeleton.input_norm.gamma".into(), &s.input_norm.gamma);
            f("skeleton.input_norm.beta".into(), &s.input_norm.beta);
            for (i, b) in s.blocks.iter().enumerate() {
                f(format!("skeleton.gcn{i}.weight"), &b.weight);
                if let Some(e) = &b.edge_mask {
                    f(format!("skeleton.gcn{i}.edge_mask"), e);
                }
                if let Some(c) = &b.channel_mix {
                    visit_linear(&format!("skeleton.gcn{i}.channel_mix"), c, f);
                }
            }
            visit_linear("skeleton.out", &s.out, f);
        }
        visit_linear("fusion", &self.fusion, f);
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("transformer.{i}");
            visit_linear(&format!("{p}.attention.query"), &layer.attention.query, f);
            visit_linear(&format!("{p}.attention.key"), &layer.attention.key, f);
            visit_linear(&format!("{p}.attention.value"), &layer.attention.value, f);
            visit_linear(&format!("{p}.attention.output"), &layer.attention.output, f);
            f(format!("{p}.norm1.gamma"), &layer.norm1.gamma);
            f(format!("{p}.norm1.beta"), &layer.norm1.beta);
            visit_linear(&format!("{p}.ff1"), &layer.ff1, f);
            visit_linear(&format!("{p}.ff2"), &layer.ff2, f);
            f(format!("{p}.norm2.gamma"), &layer.norm2.gamma);
            f(format!("{p}.norm2.beta"), &layer.norm2.beta);
        }
        visit_linear("head", &self.head, f);
    }

    /// Mutable visit in the identical order as [`ModelParams::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(p) = &mut self.position {
            if let Some(l) = &mut p.pdm {
                visit_linear_mut("position.pdm", l, f);
            }
            if let Some(l) = &mut p.displacement {
                visit_linear_mut("position.displacement", l, f);
            }
            if let Some(l) = &mut p.velocity {
                visit_linear_mut("position.velocity", l, f);
            }
            visit_linear_mut("position.out", &mut p.out, f);
        }
        if let Some(e) = &mut self.ego {
            visit_linear_mut("ego.speed", &mut e.speed, f);
            visit_linear_mut("ego.accel", &mut e.accel, f);
            visit_linear_mut("ego.out", &mut e.out, f);
        }
        if let Some(s) = &mut self.skeleton {
            f("skeleton.input_norm.gamma".into(), &mut s.input_norm.gamma);
            f("skeleton.input_norm.beta".into(), &mut s.input_norm.beta);
            for (i, b) in s.blocks.iter_mut().enumerate() {
                f(format!("skeleton.gcn{i}.weight"), &mut b.weight);
                if let Some(e) = &mut b.edge_mask {
                    f(format!("skeleton.gcn{i}.edge_mask"), e);
                }
                if let Some(c) = &mut b.channel_mix {
                    visit_linear_mut(&format!("skeleton.gcn{i}.channel_mix"), c, f);
                }
            }
            visit_linear_mut("skeleton.out", &mut s.out, f);
        }
        visit_linear_mut("fusion", &mut self.fusion, f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("transformer.{i}");
            visit_linear_mut(&format!("{p}.attention.query"), &mut layer.attention.query, f);
            visit_linear_mut(&format!("{p}.attention.key"), &mut layer.attention.key, f);
            visit_linear_mut(&format!("{p}.attention.value"), &mut layer.attention.value, f);
            visit_linear_mut(&format!("{p}.attention.output"), &mut layer.attention.output, f);
            f(format!("{p}.norm1.gamma"), &mut layer.norm1.gamma);
            f(format!("{p}.norm1.beta"), &mut layer.norm1.beta);
            visit_linear_mut(&format!("{p}.ff1"), &mut layer.ff1, f);
            visit_linear_mut(&format!("{p}.ff2"), &mut layer.ff2, f);
            f(format!("{p}.norm2.gamma"), &mut layer.norm2.gamma);
            f(format!("{p}.norm2.beta"), &mut layer.norm2.beta);
        }
        visit_linear_mut("head", &mut self.head, f);
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    /// Total number of trainable scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

/// One batch of model inputs. Tensors are present exactly for the branches
/// the config enables; shapes are validated against the config on entry.
#[derive(Clone, Debug, Default)]
pub struct ModelInputs {
    /// `[batch, frames, pdm_width]`
    pub pdm: Option<Tensor>,
    /// `[batch, frames, 2]`
    pub displacement: Option<Tensor>,
    /// `[batch, frames, 2]`
    pub velocity: Option<Tensor>,
    /// `[batch, frames, 1]` speeds or `[batch, frames, 5]` one-hot states
    pub ego_speed: Option<Tensor>,
    /// `[batch, frames, 1]`
    pub ego_accel: Option<Tensor>,
    /// `[batch, frames, joints, 3]`
    pub skeleton: Option<Tensor>,
}

impl ModelInputs {
    pub fn batch_size(&self) -> usize {
        for t in [
            &self.pdm,
            &self.displacement,
            &self.velocity,
            &self.ego_speed,
            &self.ego_accel,
            &self.skeleton,
        ]
        .into_iter()
        .flatten()
        {
            return t.shape()[0];
        }
        0
    }

    fn expect(
        t: &Option<Tensor>,
        name: &str,
        want: &[usize],
        active: bool,
    ) -> Result<()> {
        match (t, active) {
            (Some(t), true) => {
                if t.shape() != want {
                    Err(ModelError::InputMismatch(format!(
                        "{name}: expected shape {want:?}, got {:?}",
                        t.shape()
                    )))
                } else {
                    Ok(())
                }
            }
            (None, true) => Err(ModelError::InputMismatch(format!(
                "{name}: required by the model config but missing"
            ))),
            (Some(_), false) => Err(ModelError::InputMismatch(format!(
                "{name}: provided but disabled in the model config"
            ))),
            (None, false) => Ok(()),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<usize> {
        let b = self.batch_size();
        if b == 0 {
            return Err(ModelError::InputMismatch("empty batch".into()));
        }
        let t = config.frames;
        let e = &config.encoders;
        let pf = &config.position_features;
        Self::expect(
            &self.pdm,
            "pdm",
            &[b, t, pf.pdm_width()],
            e.position && pf.pdm_width() > 0,
        )?;
        Self::expect(
            &self.displacement,
            "displacement",
            &[b, t, 2],
            e.position && pf.displacement,
        )?;
        Self::expect(&self.velocity, "velocity", &[b, t, 2], e.position && pf.velocity)?;
        Self::expect(
            &self.ego_speed,
            "ego_speed",
            &[b, t, config.ego_speed_width()],
            e.ego,
        )?;
        Self::expect(&self.ego_accel, "ego_accel", &[b, t, 1], e.ego)?;
        Self::expect(
            &self.skeleton,
            "skeleton",
            &[b, t, config.joints, 3],
            e.skeleton,
        )?;
        Ok(b)
    }
}

/// Class probabilities per sample, ordered (not-cross, cross).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<[f64; 2]>,
}

impl Prediction {
    pub fn crossing_scores(&self) -> Vec<f64> {
        self.probabilities.iter().map(|p| p[1]).collect()
    }
}

/// Result of one recorded forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Per-layer attention probabilities `[batch, heads, frames, frames]`,
    /// captured only when requested.
    pub attention: Option<Vec<Tensor>>,
    /// Every parameter bound during the pass, as (visit-order name, tape
    /// leaf). The optimizer reads gradients through these handles.
    pub param_vars: Vec<(String, Var)>,
}

/// Tape handle plus the running list of bound parameters for one forward
/// pass.
pub(crate) struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    pub binds: Vec<(String, Var)>,
}

impl ForwardCtx<'_> {
    fn leaf(&mut self, name: impl Into<String>, t: &Tensor) -> Result<Var> {
        let v = self.tape.leaf(t)?;
        self.binds.push((name.into(), v));
        Ok(v)
    }

    /// Bind a [`Linear`] and apply it to the trailing axis of `x`.
    fn linear(&mut self, name: impl Into<String>, x: Var, l: &Linear) -> Result<Var> {
        let name = name.into();
        let w = self.leaf(format!("{name}.weight"), &l.weight)?;
        Ok(match &l.bias {
            Some(b) => {
                let vb = self.leaf(format!("{name}.bias"), b)?;
                self.tape.affine(x, w, vb)?
            }
            None => self.tape.linear(x, w)?,
        })
    }
}

/// The assembled network: config, parameters, skeleton graph, and batch-norm
/// running state.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub bn_running: RunningStats,
    pub graph: SkeletonGraph,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::new(shape, data).expect("shape/data agree")
    }

    /// Fan-in scaled init for weights feeding a ReLU.
    fn kaiming(&mut self, d_in: usize, d_out: usize) -> Tensor {
        self.uniform(vec![d_in, d_out], (6.0 / d_in as f64).sqrt())
    }

    /// Symmetric init for purely linear maps and attention projections.
    fn xavier(&mut self, d_in: usize, d_out: usize) -> Tensor {
        self.uniform(vec![d_in, d_out], (6.0 / (d_in + d_out) as f64).sqrt())
    }

    fn linear_xavier(&mut self, d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: self.xavier(d_in, d_out),
            bias: Some(Tensor::zeros(vec![d_out])),
        }
    }

    fn linear_kaiming(&mut self, d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: self.kaiming(d_in, d_out),
            bias: Some(Tensor::zeros(vec![d_out])),
        }
    }
}

impl Model {
    /// Build a freshly initialized model on the default skeleton graph.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        Model::with_graph(config, seed, default_skeleton_graph())
    }

    pub fn with_graph(config: ModelConfig, seed: u64, graph: SkeletonGraph) -> Result<Model> {
        config.validate()?;
        if config.encoders.skeleton && graph.nodes != config.joints {
            return Err(ModelError::BadConfig(format!(
                "skeleton graph has {} nodes, config expects {}",
                graph.nodes, config.joints
            )));
        }
        let mut init = Init {
            rng: crate::training::seed_stream(seed, crate::training::STREAM_INIT),
        };
        let c = config.channel_dim;
        let pf = &config.position_features;

        let position = config.encoders.position.then(|| {
            let pdm_w = pf.pdm_width();
            let pdm = (pdm_w > 0).then(|| init.linear_xavier(pdm_w, c));
            let displacement = pf.displacement.then(|| init.linear_xavier(2, c));
            let velocity = pf.velocity.then(|| init.linear_xavier(2, c));
            let branches = [&pdm, &displacement, &velocity]
                .iter()
                .filter(|b| b.is_some())
                .count();
            PositionEncoderParams {
                pdm,
                displacement,
                velocity,
                out: init.linear_xavier(branches * c, c),
            }
        });

        let ego = config.encoders.ego.then(|| EgoEncoderParams {
            speed: init.linear_xavier(config.ego_speed_width(), c),
            accel: init.linear_xavier(1, c),
            out: init.linear_xavier(2 * c, c),
        });

        let skeleton = config.encoders.skeleton.then(|| {
            let n = config.joints;
            let h = config.gcn_hidden;
            let blocks = (0..config.gcn_layers)
                .map(|l| {
                    let d_in = if l == 0 { 3 } else { h };
                    GcnBlockParams {
                        weight: init.kaiming(d_in, h),
                        edge_mask: config
                            .learnable_edges
                            .then(|| Tensor::ones(vec![n, n])),
                        channel_mix: (l > 0).then(|| init.linear_kaiming(h, h)),
                    }
                })
                .collect();
            SkeletonEncoderParams {
                input_norm: NormParams {
                    gamma: Tensor::ones(vec![n * 3]),
                    beta: Tensor::zeros(vec![n * 3]),
                },
                blocks,
                out: init.linear_xavier(n * h, c),
            }
        });

        let fusion = init.linear_xavier(config.fusion_branches() * c, c);

        let layers = (0..config.transformer_layers)
            .map(|_| EncoderLayerParams {
                attention: AttentionParams {
                    query: init.linear_xavier(c, c),
                    key: init.linear_xavier(c, c),
                    value: init.linear_xavier(c, c),
                    output: init.linear_xavier(c, c),
                },
                norm1: NormParams {
                    gamma: Tensor::ones(vec![c]),
                    beta: Tensor::zeros(vec![c]),
                },
                ff1: init.linear_kaiming(c, config.feed_forward_dim),
                ff2: init.linear_xavier(config.feed_forward_dim, c),
                norm2: NormParams {
                    gamma: Tensor::ones(vec![c]),
                    beta: Tensor::zeros(vec![c]),
                },
            })
            .collect();

        let head = init.linear_xavier(config.frames * c, 2);

        Ok(Model {
            bn_running: RunningStats::new(config.joints * 3),
            params: ModelParams {
                position,
                ego,
                skeleton,
                fusion,
                layers,
                head,
            },
            config,
            graph,
        })
    }

    /// Record a full forward pass on `tape`, returning the logits node.
    /// Training mode draws dropout masks from `rng` and updates the
    /// batch-norm running statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        inputs: &ModelInputs,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        capture_attention: bool,
    ) -> Result<ForwardPass> {
        inputs.validate(&self.config)?;
        forward_inner(
            &self.config,
            &self.params,
            &self.graph,
            &mut self.bn_running,
            tape,
            inputs,
            mode,
            rng,
            capture_attention,
        )
    }

    /// Eval-mode forward on a caller-provided tape. Read-only: dropout is
    /// the identity and the running statistics are not touched.
    pub fn forward_eval(
        &self,
        tape: &mut Tape,
        inputs: &ModelInputs,
        capture_attention: bool,
    ) -> Result<ForwardPass> {
        inputs.validate(&self.config)?;
        let mut rng = crate::training::seed_stream(0, crate::training::STREAM_DROPOUT);
        let mut bn = self.bn_running.clone();
        forward_inner(
            &self.config,
            &self.params,
            &self.graph,
            &mut bn,
            tape,
            inputs,
            Mode::Eval,
            &mut rng,
            capture_attention,
        )
    }

    /// Eval-mode batch prediction on a fresh internal tape. Read-only: the
    /// running statistics are not touched.
    pub fn predict(&self, inputs: &ModelInputs) -> Result<Prediction> {
        self.predict_with_attention(inputs, false).map(|(p, _)| p)
    }

    /// Eval-mode prediction, optionally capturing per-layer attention maps.
    pub fn predict_with_attention(
        &self,
        inputs: &ModelInputs,
        capture_attention: bool,
    ) -> Result<(Prediction, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let pass = self.forward_eval(&mut tape, inputs, capture_attention)?;
        let probs = tape.softmax_last(pass.logits)?;
        let v = tape.value(probs);
        let probabilities = v.data().chunks(2).map(|c| [c[0], c[1]]).collect();
        Ok((Prediction { probabilities }, pass.attention))
    }

    /// Trainable parameter total.
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Parameters attributable to the skeleton branch: the skeleton encoder
    /// itself plus the fusion rows that consume its channels.
    pub fn skeleton_branch_param_count(&self) -> usize {
        let Some(s) = &self.params.skeleton else {
            return 0;
        };
        let mut n = s.input_norm.gamma.len() + s.input_norm.beta.len();
        for b in &s.blocks {
            n += b.weight.len();
            n += b.edge_mask.as_ref().map_or(0, Tensor::len);
            if let Some(c) = &b.channel_mix {
                n += c.weight.len() + c.bias.as_ref().map_or(0, Tensor::len);
            }
        }
        n += s.out.weight.len() + s.out.bias.as_ref().map_or(0, Tensor::len);
        // fusion weight rows for the skeleton channels
        n + self.config.channel_dim * self.config.channel_dim
    }
}

/// Forward composition over split borrows of the model fields.
#[allow(clippy::too_many_arguments)]
fn forward_inner(
    config: &ModelConfig,
    params: &ModelParams,
    graph: &SkeletonGraph,
    bn_running: &mut RunningStats,
    tape: &mut Tape,
    inputs: &ModelInputs,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    capture_attention: bool,
) -> Result<ForwardPass> {
    let mut ctx = ForwardCtx {
        tape,
        binds: Vec::new(),
    };
    let mut branches: Vec<Var> = Vec::with_capacity(3);
    if let Some(p) = &params.position {
        branches.push(encoders::positional_encoder(&mut ctx, inputs, p)?);
    }
    if let Some(e) = &params.ego {
        branches.push(encoders::ego_encoder(&mut ctx, inputs, e)?);
    }
    if let Some(s) = &params.skeleton {
        branches.push(encoders::skeleton_encoder(
            &mut ctx, inputs, s, graph, config, bn_running, mode,
        )?);
    }
    let fused = encoders::fuse(&mut ctx, &branches, &params.fusion)?;
    let (encoded, attention) = transformer::transformer_encode(
        &mut ctx,
        fused,
        &params.layers,
        config,
        mode,
        rng,
        capture_attention,
    )?;
    // flatten the temporal encoding and project to the two class logits
    let b = ctx.tape.value(encoded).shape()[0];
    let flat = ctx
        .tape
        .reshape(encoded, vec![b, config.frames * config.channel_dim])?;
    let logits = ctx.linear("head", flat, &params.head)?;
    Ok(ForwardPass {
        logits,
        attention,
        param_vars: ctx.binds,
    })
}

#[cfg(test)]
mod tests;
