use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture and loss/selection hyperparameters of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    /// Dropout applied during training only.
    pub dropout: f64,
    /// Weight of the generation loss against ranking + distillation.
    pub alpha: f64,
    /// Ratio threshold for keeping the second-ranked passage.
    pub gamma: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_positions: 256,
            dropout: 0.1,
            alpha: 0.5,
            gamma: 0.8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModelError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ModelError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_are_valid() {
        ModelConfig::desk(100).validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let base = ModelConfig::desk(100);
        let bad = [
            ModelConfig { heads: 5, ..base.clone() },
            ModelConfig { hidden_dim: 0, ..base.clone() },
            ModelConfig { alpha: 1.5, ..base.clone() },
            ModelConfig { gamma: 0.0, ..base.clone() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
