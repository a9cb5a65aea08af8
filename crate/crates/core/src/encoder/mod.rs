//! ConBiMamba encoder, layer-wise feature aggregation and output heads.

mod heads;
mod layer;
mod lfa;

pub use heads::{ChangeHead, DiarHead};
pub use layer::{ConBiMambaLayer, ConvModule, DepthwiseBranch, FeedForward};
pub use lfa::{lfa_weights, Lfa};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear};
use crate::numcore::{Checkpoint, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::ssm::MambaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_speakers: usize,
    pub ffn_mult: usize,
    pub conv_kernels: Vec<usize>,
    pub change_hidden: usize,
    /// One entry per layer; `true` keeps the layer in the aggregation.
    pub lfa_mask: Vec<bool>,
    pub dropout: f64,
    pub mamba: MambaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            d_model: 256,
            num_layers: 7,
            num_speakers: 4,
            ffn_mult: 4,
            conv_kernels: vec![15, 31, 63],
            change_hidden: 128,
            lfa_mask: vec![false, false, false, false, true, true, true],
            dropout: 0.1,
            mamba: MambaConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self {
            feature_dim: 5,
            d_model: 16,
            num_layers: 2,
            num_speakers: 3,
            ffn_mult: 2,
            conv_kernels: vec![1, 3, 5],
            change_hidden: 8,
            lfa_mask: vec![true, true],
            dropout: 0.0,
            mamba: MambaConfig {
                d_state: 4,
                ..MambaConfig::default()
            },
        }
    }

    /// Mask selecting only the last `n` layers.
    pub fn last_layers_mask(num_layers: usize, n: usize) -> Vec<bool> {
        (0..num_layers).map(|l| l + n >= num_layers).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("num_speakers", self.num_speakers),
            ("ffn_mult", self.ffn_mult),
            ("change_hidden", self.change_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.conv_kernels.len() != 3 {
            return Err(Error::Config(format!(
                "expected exactly 3 depthwise branches, got {}",
                self.conv_kernels.len()
            )));
        }
        if let Some(k) = self.conv_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("depthwise kernel width {k} must be odd")));
        }
        if self.lfa_mask.len() != self.num_layers {
            return Err(Error::Config(format!(
                "lfa_mask has {} entries for {} layers",
                self.lfa_mask.len(),
                self.num_layers
            )));
        }
        if !self.lfa_mask.iter().any(|&m| m) {
            return Err(Error::Degenerate("lfa_mask selects no layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.mamba.validate()
    }
}

/// Everything a forward pass produces, as tape handles.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Output of every encoder layer, `[T × d_model]` each.
    pub layers: Vec<Var>,
    pub aggregated: Var,
    /// Speaker activity probabilities `[T × K]`.
    pub probs: Var,
    /// Change logits `[T]`.
    pub change_logits: Var,
}

/// Parameters and structure of the full diarization network.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub input_proj: Linear,
    pub layers: Vec<ConBiMambaLayer>,
    pub lfa: Lfa,
    pub diar_head: DiarHead,
    pub change_head: ChangeHead,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let d = config.d_model;
        let input_proj = b.linear("input_proj", config.feature_dim, d, true)?;
        let layers = (0..config.num_layers)
            .map(|l| {
                ConBiMambaLayer::build(
                    &mut b.scope(format!("layers.{l}")),
                    d,
                    config.ffn_mult,
                    &config.conv_kernels,
                    &config.mamba,
                    0.5,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let lfa = Lfa::build(&mut b.scope("lfa"), &config.lfa_mask, d)?;
        let diar_head = DiarHead::build(&mut b, d, config.num_speakers)?;
        let change_head = ChangeHead::build(&mut b, d, config.change_hidden)?;
        Ok(Self {
            config,
            params,
            input_proj,
            layers,
            lfa,
            diar_head,
            change_head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Feeds `[T × feature_dim]` features through the encoder; returns every layer output.
    pub fn encode(&self, ctx: &mut Ctx<S>, features: Var) -> Result<Vec<Var>> {
        let shape = ctx.tape.shape(features);
        if shape.len() != 2 || shape[1] != self.config.feature_dim {
            return Err(Error::shape("encoder_forward", shape, &[self.config.feature_dim]));
        }
        let mut x = self.input_proj.forward(ctx, features)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(ctx, x)?;
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn forward(&self, ctx: &mut Ctx<S>, features: Var) -> Result<ModelOutput> {
        let layers = self.encode(ctx, features)?;
        let aggregated = self.lfa.forward(ctx, &layers)?;
        let probs = self.diar_head.forward(ctx, aggregated)?;
        let change_logits = self.change_head.forward(ctx, aggregated)?;
        Ok(ModelOutput {
            layers,
            aggregated,
            probs,
            change_logits,
        })
    }

    /// Inference-mode speaker probabilities `[T × K]` and change logits `[T]`.
    pub fn infer(&self, features: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut ctx = Ctx::new(&self.params);
        let x = ctx.tape.constant(features.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok((
            ctx.tape.value(out.probs).clone(),
            ctx.tape.value(out.change_logits).clone(),
        ))
    }

    /// Current LFA layer weights.
    pub fn lfa_weights(&self) -> Result<Vec<S>> {
        lfa_weights(self.params.get(self.lfa.alpha).data(), &self.lfa.mask)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_store(&self.params);
        ckpt.metadata
            .insert("model_config".into(), serde_json::to_value(&self.config)?);
        Ok(ckpt)
    }

    /// Rebuilds the model from the `model_config` metadata entry and loads its tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt
            .metadata
            .get("model_config")
            .ok_or_else(|| Error::Data("checkpoint lacks model_config metadata".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg.clone())?;
        let mut model = Self::new(config, 0)?;
        model.params.load_values(&ckpt.to_store::<S>()?)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
