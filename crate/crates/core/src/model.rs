//! Backbone, fusion and prediction blocks assembled into a segmentation model.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::graph::{
    build_input_graph, stochastic_dilated_knn, DilationSpec, NeighborList, PointCloud,
};
use crate::layers::{dense_wrap, residual_wrap, AggregatorKind, GcnLayer};
use crate::nn::{Activation, MlpUnit};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    Plain,
    Residual,
    Dense,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Plain => "plain",
            Backbone::Residual => "residual",
            Backbone::Dense => "dense",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Backbone::Plain),
            "residual" => Ok(Backbone::Residual),
            "dense" => Ok(Backbone::Dense),
            _ => Err(Error::Config(format!("unknown backbone {s:?}"))),
        }
    }
}

/// Architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub aggregator: AggregatorKind,
    /// Number of GCN layers in the backbone.
    pub depth: usize,
    /// Output channels of every GCN layer (the growth rate for dense).
    pub width: usize,
    pub k: usize,
    /// When false every layer uses dilation 1.
    pub dilation: bool,
    pub d_max: usize,
    /// Stochastic dilation probability during training.
    pub epsilon: f64,
    /// Recompute k-NN in feature space at every layer after the first.
    pub dynamic_edges: bool,
    pub num_classes: usize,
    pub dropout: f64,
    /// Auxiliary per-point features beyond xyz.
    pub aux_dim: usize,
    /// Width of the fusion 1×1 convolution (and of the global feature).
    pub fusion_width: usize,
    /// Widths of the first two prediction MLP layers.
    pub head_widths: [usize; 2],
    /// Units in each GCN layer's update MLP.
    pub mlp_depth: usize,
}

impl Default for ModelConfig {
    /// The 28-layer residual reference configuration.
    fn default() -> Self {
        Self {
            backbone: Backbone::Residual,
            aggregator: AggregatorKind::EdgeConv,
            depth: 28,
            width: 64,
            k: 16,
            dilation: true,
            d_max: 16,
            epsilon: 0.2,
            dynamic_edges: true,
            num_classes: 13,
            dropout: 0.3,
            aux_dim: 0,
            fusion_width: 1024,
            head_widths: [512, 256],
            mlp_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("k", self.k),
            ("d_max", self.d_max),
            ("num_classes", self.num_classes),
            ("fusion_width", self.fusion_width),
            ("head_width1", self.head_widths[0]),
            ("head_width2", self.head_widths[1]),
            ("mlp_depth", self.mlp_depth),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        3 + self.aux_dim
    }

    /// Dilation rate of layer `l`.
    pub fn dilation_at(&self, l: usize) -> usize {
        if self.dilation {
            dilation_schedule(l, self.d_max)
        } else {
            1
        }
    }

    /// Channel count of the backbone state after layer `l`.
    pub fn state_width(&self, l: usize) -> usize {
        match self.backbone {
            Backbone::Dense => self.input_dim() + self.width * (l + 1),
            _ => self.width,
        }
    }

    /// Total width of the per-layer features fed to the fusion block.
    pub fn local_width(&self) -> usize {
        self.depth * self.width
    }

    pub fn fused_width(&self) -> usize {
        self.local_width() + self.fusion_width
    }
}

/// `min(l + 1, d_max)`: dilation grows linearly with depth up to a cap.
pub fn dilation_schedule(l: usize, d_max: usize) -> usize {
    (l + 1).min(d_max.max(1))
}

/// Backbone activations retained for fusion and inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Backbone state after each layer (for dense, the growing concatenation).
    pub states: Vec<Var>,
    /// Per-layer features passed to fusion (for dense, the new channels only).
    pub features: Vec<Var>,
    /// Edge set used by each layer.
    pub graphs: Vec<NeighborList>,
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub trace: ForwardTrace,
    pub fused: Var,
    pub logits: Var,
}

/// A segmentation network and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub layers: Vec<GcnLayer>,
    pub fusion: MlpUnit,
    pub head: [MlpUnit; 3],
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = (0..cfg.depth)
            .map(|l| {
                let d_in = if l == 0 {
                    cfg.input_dim()
                } else {
                    cfg.state_width(l - 1)
                };
                GcnLayer::new(
                    &mut store,
                    &format!("backbone.{l}"),
                    cfg.aggregator,
                    d_in,
                    cfg.width,
                    cfg.mlp_depth,
                    &mut rng,
                )
            })
            .collect();
        let fusion = MlpUnit::new(
            &mut store,
            "fusion",
            cfg.local_width(),
            cfg.fusion_width,
            true,
            Activation::Relu,
            &mut rng,
        );
        let [w1, w2] = cfg.head_widths;
        let head = [
            MlpUnit::new(
                &mut store,
                "head.0",
                cfg.fused_width(),
                w1,
                true,
                Activation::Relu,
                &mut rng,
            ),
            MlpUnit::new(
                &mut store,
                "head.1",
                w1,
                w2,
                true,
                Activation::Relu,
                &mut rng,
            ),
            MlpUnit::new(
                &mut store,
                "head.2",
                w2,
                cfg.num_classes,
                false,
                Activation::None,
                &mut rng,
            ),
        ];
        Ok(Self {
            cfg,
            store,
            layers,
            fusion,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Zeroes the output of every residual branch (layers after the stem).
    pub fn zero_residual_branches(&mut self) {
        for layer in self.layers.iter().skip(1) {
            layer.zero_output(&mut self.store);
        }
    }

    pub fn backbone_forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        cloud: &PointCloud,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        if cloud.aux_dim() != cfg.aux_dim {
            return Err(contract(format!(
                "cloud has {} auxiliary features, model expects {}",
                cloud.aux_dim(),
                cfg.aux_dim
            )));
        }
        let spec = |d: usize| DilationSpec::new(d, cfg.epsilon, mode);
        let input_graph = build_input_graph(cloud, cfg.k, &spec(cfg.dilation_at(0))?, rng)?;
        let mut h = tape.constant(cloud.input_features());
        let mut trace = ForwardTrace {
            states: Vec::with_capacity(cfg.depth),
            features: Vec::with_capacity(cfg.depth),
            graphs: Vec::with_capacity(cfg.depth),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let graph = if l == 0 || !cfg.dynamic_edges {
                input_graph.clone()
            } else {
                stochastic_dilated_knn(tape.value(h), cfg.k, &spec(cfg.dilation_at(l))?, rng)?
            };
            let (state, feature) = match cfg.backbone {
                Backbone::Plain => {
                    let y = layer.forward(tape, &mut self.store, h, &graph, mode)?;
                    (y, y)
                }
                Backbone::Residual if l == 0 => {
                    let y = layer.forward(tape, &mut self.store, h, &graph, mode)?;
                    (y, y)
                }
                Backbone::Residual => {
                    let y = residual_wrap(layer, tape, &mut self.store, h, &graph, mode)?;
                    (y, y)
                }
                Backbone::Dense => dense_wrap(layer, tape, &mut self.store, h, &graph, mode)?,
            };
            trace.states.push(state);
            trace.features.push(feature);
            trace.graphs.push(graph);
            h = state;
        }
        Ok(trace)
    }

    /// Concatenated per-layer features, a 1×1 conv, a global max over
    /// vertices, and the global vector appended to every vertex.
    pub fn fusion_forward(&mut self, tape: &mut Tape, features: &[Var], mode: Mode) -> Result<Var> {
        let (&first, rest) = features
            .split_first()
            .ok_or_else(|| contract("fusion over an empty trace"))?;
        let mut local = first;
        for &f in rest {
            local = tape.concat(local, f)?;
        }
        let n = tape.value(local).rows();
        let conv = self.fusion.forward(tape, &mut self.store, local, mode)?;
        let global = tape.global_max(conv)?;
        let broadcast = tape.gather_rows(global, vec![0; n], &[n])?;
        tape.concat(local, broadcast)
    }

    /// Three per-vertex MLP layers with dropout after the second.
    pub fn prediction_forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        fused: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let x = self.head[0].forward(tape, &mut self.store, fused, mode)?;
        let x = self.head[1].forward(tape, &mut self.store, x, mode)?;
        let x = tape.dropout(x, self.cfg.dropout, mode, rng)?;
        self.head[2].forward(tape, &mut self.store, x, mode)
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        cloud: &PointCloud,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        let trace = self.backbone_forward(tape, cloud, mode, rng)?;
        let fused = self.fusion_forward(tape, &trace.features, mode)?;
        let logits = self.prediction_forward(tape, fused, mode, rng)?;
        Ok(ModelOutput {
            trace,
            fused,
            logits,
        })
    }

    /// Per-vertex argmax class in eval mode.
    pub fn predict(&mut self, cloud: &PointCloud) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, cloud, Mode::Eval, &mut rng)?;
        Ok(argmax_rows(tape.value(out.logits)))
    }
}

/// Index of the largest entry of every row; ties go to the lowest index.
pub fn argmax_rows(t: &crate::tensor::Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
