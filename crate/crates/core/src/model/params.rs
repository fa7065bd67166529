use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{ModelError, RESERVED_TOKENS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub patch_dim: usize,
    pub max_seq: usize,
    pub mae_decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64, n_layers: 2, n_heads: 2, vocab_size: 512, patch_dim: 12, max_seq: 128, mae_decoder_layers: 1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(ModelError::Config(format!("vocab_size {} leaves no room past the specials", self.vocab_size)));
        }
        if self.patch_dim == 0 || self.max_seq == 0 {
            return Err(ModelError::Config("patch_dim and max_seq must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.d_model
    }
}

/// Tensor slots of one transformer block, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSlot {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Bo,
    Ln2Gain,
    Ln2Bias,
    W1,
    B1,
    W2,
    B2,
}

const BLOCK_SLOTS: [(BlockSlot, &str); 13] = [
    (BlockSlot::Ln1Gain, "ln1.gain"),
    (BlockSlot::Ln1Bias, "ln1.bias"),
    (BlockSlot::Wq, "attn.wq"),
    (BlockSlot::Wk, "attn.wk"),
    (BlockSlot::Wv, "attn.wv"),
    (BlockSlot::Wo, "attn.wo"),
    (BlockSlot::Bo, "attn.bo"),
    (BlockSlot::Ln2Gain, "ln2.gain"),
    (BlockSlot::Ln2Bias, "ln2.bias"),
    (BlockSlot::W1, "mlp.w1"),
    (BlockSlot::B1, "mlp.b1"),
    (BlockSlot::W2, "mlp.w2"),
    (BlockSlot::B2, "mlp.b2"),
];

/// Coarse parameter partition used to freeze heads per training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    LmHead,
    Mae,
}

/// Every learnable tensor of the model, stored flat in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<f64>>,
}

const INIT_STD: f64 = 0.02;

impl ModelParams {
    pub const TOKEN_EMBED: usize = 0;
    pub const PATCH_PROJ: usize = 1;
    pub const PATCH_BIAS: usize = 2;
    pub const POS_EMBED: usize = 3;
    const ENCODER_BLOCKS: usize = 4;

    pub fn encoder_block(layer: usize) -> usize {
        Self::ENCODER_BLOCKS + layer * BLOCK_SLOTS.len()
    }

    pub fn final_ln(cfg: &ModelConfig) -> usize {
        Self::encoder_block(cfg.n_layers)
    }

    pub fn lm_head(cfg: &ModelConfig) -> usize {
        Self::final_ln(cfg) + 2
    }

    pub fn mae_block(cfg: &ModelConfig, layer: usize) -> usize {
        Self::lm_head(cfg) + 1 + layer * BLOCK_SLOTS.len()
    }

    /// Index of the MAE head's layer-norm gain; bias, pixel weight and pixel
    /// bias follow it.
    pub fn mae_head(cfg: &ModelConfig) -> usize {
        Self::mae_block(cfg, cfg.mae_decoder_layers)
    }

    pub fn group_of(cfg: &ModelConfig, index: usize) -> ParamGroup {
        let lm = Self::lm_head(cfg);
        match index {
            i if i < lm => ParamGroup::Encoder,
            i if i == lm => ParamGroup::LmHead,
            _ => ParamGroup::Mae,
        }
    }

    /// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains and a
    /// zero pixel head.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, t: Tensor<f64>| {
            names.push(name);
            tensors.push(t);
        };
        push("embed.token".into(), Tensor::randn(&[config.vocab_size, d], INIT_STD, rng));
        push("embed.patch".into(), Tensor::randn(&[config.patch_dim, d], INIT_STD, rng));
        push("embed.patch_bias".into(), Tensor::zeros(&[d]));
        push("embed.position".into(), Tensor::randn(&[config.max_seq, d], INIT_STD, rng));
        let block = |prefix: &str, push: &mut dyn FnMut(String, Tensor<f64>), rng: &mut R| {
            for (slot, name) in BLOCK_SLOTS {
                let t = match slot {
                    BlockSlot::Ln1Gain | BlockSlot::Ln2Gain => Tensor::full(&[d], 1.0),
                    BlockSlot::Ln1Bias | BlockSlot::Ln2Bias | BlockSlot::Bo | BlockSlot::B2 => Tensor::zeros(&[d]),
                    BlockSlot::B1 => Tensor::zeros(&[config.mlp_width()]),
                    BlockSlot::Wq | BlockSlot::Wk | BlockSlot::Wv | BlockSlot::Wo => Tensor::randn(&[d, d], INIT_STD, rng),
                    BlockSlot::W1 => Tensor::randn(&[d, config.mlp_width()], INIT_STD, rng),
                    BlockSlot::W2 => Tensor::randn(&[config.mlp_width(), d], INIT_STD, rng),
                };
                push(format!("{prefix}.{name}"), t);
            }
        };
        for layer in 0..config.n_layers {
            block(&format!("layer{layer}"), &mut push, rng);
        }
        push("final_ln.gain".into(), Tensor::full(&[d], 1.0));
        push("final_ln.bias".into(), Tensor::zeros(&[d]));
        push("lm_head".into(), Tensor::randn(&[d, config.vocab_size], INIT_STD, rng));
        for layer in 0..config.mae_decoder_layers {
            block(&format!("mae.layer{layer}"), &mut push, rng);
        }
        push("mae.ln.gain".into(), Tensor::full(&[d], 1.0));
        push("mae.ln.bias".into(), Tensor::zeros(&[d]));
        push("mae.pixel_head".into(), Tensor::zeros(&[d, config.patch_dim]));
        push("mae.pixel_bias".into(), Tensor::zeros(&[config.patch_dim]));
        Ok(Self { config: config.clone(), names, tensors })
    }

    /// Reassembles parameters read from storage; names and shapes must match
    /// what `config` would produce.
    pub fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor<f64>>) -> Result<Self, ModelError> {
        let template = Self::init(&config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if names != template.names {
            return Err(ModelError::Config("parameter names do not match config".into()));
        }
        for ((name, t), want) in names.iter().zip(&tensors).zip(&template.tensors) {
            if t.shape() != want.shape() {
                return Err(ModelError::Config(format!("{name}: shape {:?}, expected {:?}", t.shape(), want.shape())));
            }
        }
        Ok(Self { config, names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
