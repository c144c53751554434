//! End-to-end network: feature source, patch reshaping, block stack, pooling,
//! batch norm and the identity classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{stack_blocks, BlockParams, BlockTrace, BlockVars};
use crate::io::Container;
use crate::sasamg::Percentile;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Three stride-2 3×3 convolutions with ReLU over `3×(8H)×(8W)` images.
    ToyConv,
    /// Feature maps `C×H×W` are supplied directly.
    Passthrough,
}

/// Which pooled vector serves as the retrieval embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    Gap,
    Bn,
}

fn default_blocks() -> usize {
    2
}

fn default_beta() -> Percentile {
    Percentile::new(95.0).expect("valid")
}

fn default_backbone() -> Backbone {
    Backbone::Passthrough
}

fn default_embedding() -> Embedding {
    Embedding::Gap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_beta")]
    pub beta: Percentile,
    /// 0 selects `2 · channels`.
    #[serde(default)]
    pub ffd_hidden: usize,
    pub n_identities: usize,
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
    #[serde(default)]
    pub residual: bool,
    #[serde(default = "default_embedding")]
    pub embedding: Embedding,
    /// Seed for parameter initialisation.
    #[serde(default)]
    pub seed: u64,
}

/// Each toy convolution halves the spatial extent.
pub const TOY_CONV_DOWNSAMPLE: usize = 8;
pub const TOY_CONV_INPUT_CHANNELS: usize = 3;

impl ModelConfig {
    pub fn new(grid_h: usize, grid_w: usize, channels: usize, n_identities: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            channels,
            n_blocks: default_blocks(),
            beta: default_beta(),
            ffd_hidden: 0,
            n_identities,
            backbone: default_backbone(),
            residual: false,
            embedding: default_embedding(),
            seed: 0,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn hidden(&self) -> usize {
        if self.ffd_hidden == 0 {
            2 * self.channels
        } else {
            self.ffd_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.channels % 2 != 0 {
            return bad(format!("channels must be even and positive, got {}", self.channels));
        }
        if self.n_patches() == 0 {
            return bad("grid must contain at least one patch".into());
        }
        if self.n_identities < 2 {
            return bad(format!("need at least 2 identities, got {}", self.n_identities));
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        Ok(())
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.backbone {
            Backbone::Passthrough => vec![self.channels, self.grid_h, self.grid_w],
            Backbone::ToyConv => vec![
                TOY_CONV_INPUT_CHANNELS,
                self.grid_h * TOY_CONV_DOWNSAMPLE,
                self.grid_w * TOY_CONV_DOWNSAMPLE,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<ConvParams>,
    pub blocks: Vec<BlockParams>,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    /// `C×n_identities`; the classifier has no bias.
    pub classifier: Tensor,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let backbone = match config.backbone {
            Backbone::Passthrough => Vec::new(),
            Backbone::ToyConv => {
                let widths = [TOY_CONV_INPUT_CHANNELS, c / 2, c / 2, c];
                widths
                    .windows(2)
                    .map(|w| {
                        let (cin, cout) = (w[0], w[1]);
                        ConvParams {
                            w: Tensor::xavier_uniform(&[cout, cin, 3, 3], cin * 9, cout * 9, &mut rng),
                            b: Tensor::zeros(&[cout]),
                        }
                    })
                    .collect()
            }
        };
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams::init(config.n_patches(), c, config.hidden(), &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            backbone,
            blocks,
            bn_gamma: Tensor::full(&[c], 1.0),
            bn_beta: Tensor::zeros(&[c]),
            classifier: Tensor::xavier_uniform(&[c, config.n_identities], c, config.n_identities, &mut rng),
        })
    }

    /// Every trainable tensor with its dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.conv{i}.w"), &conv.w));
            out.push((format!("backbone.conv{i}.b"), &conv.b));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.named() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("bn.gamma".into(), &self.bn_gamma));
        out.push(("bn.beta".into(), &self.bn_beta));
        out.push(("classifier.w".into(), &self.classifier));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.conv{i}.w"), &mut conv.w));
            out.push((format!("backbone.conv{i}.b"), &mut conv.b));
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (name, t) in block.named_mut() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("bn.gamma".into(), &mut self.bn_gamma));
        out.push(("bn.beta".into(), &mut self.bn_beta));
        out.push(("classifier.w".into(), &mut self.classifier));
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let backbone = self
            .backbone
            .iter()
            .map(|c| (tape.param(c.w.clone()), tape.param(c.b.clone())))
            .collect();
        let blocks = self.blocks.iter().map(|b| b.bind(tape)).collect();
        ModelVars {
            backbone,
            blocks,
            bn_gamma: tape.param(self.bn_gamma.clone()),
            bn_beta: tape.param(self.bn_beta.clone()),
            classifier: tape.param(self.classifier.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: Vec<(Var, Var)>,
    pub blocks: Vec<BlockVars>,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub classifier: Var,
}

impl ModelVars {
    /// Same order as [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.backbone {
            out.extend([w, b]);
        }
        for block in &self.blocks {
            out.extend(block.vars());
        }
        out.extend([self.bn_gamma, self.bn_beta, self.classifier]);
        out
    }
}

/// Running batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
        }
    }

    /// Exponential update; the variance estimate uses the unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats, batch: usize) {
        let m = self.momentum;
        let unbias = batch as f64 / (batch as f64 - 1.0).max(1.0);
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}

/// The four supervision/retrieval points of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Pooled backbone features, `B×C`.
    pub backbone_vec: Var,
    /// Pooled block-stack output, `B×C`.
    pub gap_vec: Var,
    pub bn_vec: Var,
    pub logits: Var,
    /// Block traces, indexed `[sample][block]`.
    pub traces: Vec<Vec<BlockTrace>>,
    pub batch_stats: Option<BatchStats>,
}

impl ForwardOutputs {
    pub fn embedding(&self, which: Embedding) -> Var {
        match which {
            Embedding::Gap => self.gap_vec,
            Embedding::Bn => self.bn_vec,
        }
    }
}

/// Row-major spatial flattening `B×C×H×W → B×N×C`, patch `i = h·W + w`.
pub fn reshape_to_patches(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = match f.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(Error::shape(format!("expected B×C×H×W, got {s:?}"))),
    };
    let n = h * w;
    let mut out = vec![0.0; b * n * c];
    for s in 0..b {
        for ch in 0..c {
            for p in 0..n {
                out[(s * n + p) * c + ch] = f.data()[(s * c + ch) * n + p];
            }
        }
    }
    Tensor::new(vec![b, n, c], out)
}

/// Inverse of [`reshape_to_patches`].
pub fn patches_to_map(p: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = match p.shape() {
        [b, n, c] if *n == h * w => (*b, *n, *c),
        s => return Err(Error::shape(format!("expected B×{}×C patches, got {s:?}", h * w))),
    };
    let mut out = vec![0.0; b * c * n];
    for s in 0..b {
        for pi in 0..n {
            for ch in 0..c {
                out[(s * c + ch) * n + pi] = p.data()[(s * n + pi) * c + ch];
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub bn: BnState,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        let bn = BnState::new(config.channels);
        Ok(Self { config, params, bn })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let want = self.config.sample_shape();
        match batch.shape().split_first() {
            Some((&b, rest)) if rest == want.as_slice() && b > 0 => Ok(b),
            _ => Err(Error::shape(format!(
                "batch of shape {:?} does not match per-sample shape {want:?}",
                batch.shape()
            ))),
        }
    }

    /// Feature map `C×H×W` of one sample.
    pub fn backbone_forward(&self, tape: &mut Tape, vars: &ModelVars, sample: Var) -> Result<Var> {
        let mut h = sample;
        for &(w, b) in &vars.backbone {
            let conv = tape.conv2d(h, w, b, 2, 1)?;
            h = tape.relu(conv);
        }
        let want = [self.config.channels, self.config.grid_h, self.config.grid_w];
        if tape.value(h).shape() != want {
            return Err(Error::shape(format!(
                "backbone produced {:?}, expected {want:?}",
                tape.value(h).shape()
            )));
        }
        Ok(h)
    }

    /// Runs the network on a batch shaped `B × sample_shape()`.
    ///
    /// In training mode batch norm uses batch statistics, which are returned in
    /// [`ForwardOutputs::batch_stats`] and not applied to `self.bn`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &Tensor,
        training: bool,
    ) -> Result<ForwardOutputs> {
        let b = self.check_batch(batch)?;
        let (c, n) = (self.config.channels, self.config.n_patches());
        let mut backbone_rows = Vec::with_capacity(b);
        let mut gap_rows = Vec::with_capacity(b);
        let mut traces = Vec::with_capacity(b);
        for s in 0..b {
            let sample = tape.constant(batch.index_outer(s)?);
            let fmap = self.backbone_forward(tape, vars, sample)?;
            let flat = tape.reshape(fmap, &[c, n])?;
            let patches = tape.transpose(flat)?;
            backbone_rows.push(tape.mean_over_axis(patches, 0)?);
            let t = stack_blocks(tape, patches, &vars.blocks, self.config.beta, self.config.residual)?;
            let out = t.last().expect("non-empty stack").output;
            gap_rows.push(tape.mean_over_axis(out, 0)?);
            traces.push(t);
        }
        let backbone_vec = tape.concat_rows(&backbone_rows)?;
        let gap_vec = tape.concat_rows(&gap_rows)?;
        let stats = if training {
            NormStats::Batch
        } else {
            NormStats::Running {
                mean: &self.bn.running_mean,
                var: &self.bn.running_var,
            }
        };
        let (bn_vec, batch_stats) = tape.batch_norm_1d(gap_vec, vars.bn_gamma, vars.bn_beta, stats)?;
        let logits = tape.matmul(bn_vec, vars.classifier)?;
        Ok(ForwardOutputs {
            backbone_vec,
            gap_vec,
            bn_vec,
            logits,
            traces,
            batch_stats,
        })
    }

    /// Eval-mode retrieval embeddings, one row per sample.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, batch, false)?;
        Ok(tape.value(out.embedding(self.config.embedding)).clone())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "kind": "checkpoint",
            "config": serde_json::to_value(&self.config)?,
            "bn_momentum": self.bn.momentum,
        });
        let mut c = Container::new(meta);
        for (name, t) in self.params.named() {
            c.push(name, t.clone());
        }
        c.push("bn.running_mean", Tensor::new(vec![self.config.channels], self.bn.running_mean.clone())?);
        c.push("bn.running_var", Tensor::new(vec![self.config.channels], self.bn.running_var.clone())?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
            return Err(Error::Format("container is not a checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint lacks a config".into()))?,
        )?;
        let mut model = Model::new(config)?;
        for (name, slot) in model.params.named_mut() {
            let t = c.get(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        let ch = model.config.channels;
        let rm = c.get("bn.running_mean")?;
        let rv = c.get("bn.running_var")?;
        if rm.numel() != ch || rv.numel() != ch {
            return Err(Error::Format("running statistics width mismatch".into()));
        }
        model.bn.running_mean = rm.data().to_vec();
        model.bn.running_var = rv.data().to_vec();
        if let Some(m) = c.meta.get("bn_momentum").and_then(|m| m.as_f64()) {
            model.bn.momentum = m;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(2, 2, 4, 3);
        cfg.beta = Percentile::new(50.0).unwrap();
        cfg
    }

    #[test]
    fn reshape_layout_and_round_trip() {
        // 1×2×1×2 map: channel 0 = [1, 2], channel 1 = [3, 4]
        let f = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = reshape_to_patches(&f).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2]);
        assert_eq!(p.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(patches_to_map(&p, 1, 2).unwrap(), f);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.channels = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.n_identities = 1;
        assert!(cfg.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn forward_shapes() {
        let model = Model::new(small_config()).unwrap();
        let batch = Tensor::full(&[3, 4, 2, 2], 0.5);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &vars, &batch, true).unwrap();
        assert_eq!(tape.value(out.backbone_vec).shape(), &[3, 4]);
        assert_eq!(tape.value(out.gap_vec).shape(), &[3, 4]);
        assert_eq!(tape.value(out.bn_vec).shape(), &[3, 4]);
        assert_eq!(tape.value(out.logits).shape(), &[3, 3]);
        assert_eq!(out.traces.len(), 3);
        assert_eq!(out.traces[0].len(), 2);
    }

    #[test]
    fn wrong_batch_shape_is_rejected() {
        let model = Model::new(small_config()).unwrap();
        assert!(model.embed(&Tensor::zeros(&[2, 4, 3, 2])).is_err());
    }

    #[test]
    fn passthrough_backbone_is_identity() {
        let model = Model::new(small_config()).unwrap();
        let sample = Tensor::new(vec![4, 2, 2], (0..16).map(f64::from).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let x = tape.constant(sample.clone());
        let y = model.backbone_forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y), &sample);
    }

    #[test]
    fn toy_conv_output_shape() {
        let mut cfg = small_config();
        cfg.backbone = Backbone::ToyConv;
        let model = Model::new(cfg).unwrap();
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[3, 16, 16], 0.1));
        let y = model.backbone_forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 2, 2]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = Model::new(small_config()).unwrap();
        model.bn.running_mean = vec![0.1, 0.2, 0.3, 0.4];
        let c = model.to_container().unwrap();
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let back = Model::from_container(&Container::read(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
