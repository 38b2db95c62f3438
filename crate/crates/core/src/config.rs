use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::corpus::DISEASES;
use crate::error::{Error, Result};

/// Which parts of the clue pathway are active during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Decoder conditions on the mapped visual tokens only.
    Base,
    /// Adds the top-k weighted clue tokens to the decoder prefix.
    Dci,
    /// Routes both streams through the interaction block and learnable queries.
    DciCmci,
    /// Interaction block plus the consistency loss.
    #[default]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Dci, Variant::DciCmci, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "BASE",
            Variant::Dci => "+DCI",
            Variant::DciCmci => "+DCI+CMCI",
            Variant::Full => "+DCI+CMCI+DAL",
        }
    }

    pub fn uses_clues(self) -> bool {
        self != Variant::Base
    }

    pub fn uses_interaction(self) -> bool {
        matches!(self, Variant::DciCmci | Variant::Full)
    }

    pub fn uses_consistency_loss(self) -> bool {
        self == Variant::Full
    }
}

/// Every hyperparameter of the pipeline.
///
/// Defaults are desk-scale. Where the reference setup differs the full-size
/// value is noted on the field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder width (reference scale: 1024).
    pub d: usize,
    /// Decoder width (reference scale: the LLM embedding width).
    pub d_llm: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of disease clues `m`.
    pub clues: usize,
    /// Token rows kept per clue embedding `r` (CLS excluded).
    pub clue_len: usize,
    /// Clues injected per image `k`.
    pub top_k: usize,
    /// Learnable query count `L`.
    pub queries: usize,
    /// Heads in the interaction block (reference scale: 8).
    pub heads: usize,
    pub encoder_heads: usize,
    pub interaction_layers: usize,
    /// InfoNCE temperature.
    pub temperature: f32,
    /// Decoder vocabulary; 0 means "take it from the vocabulary".
    pub vocab_size: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub ffn_mult: usize,
    pub max_text_len: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_llm: 64,
            image_size: 64,
            patch_size: 8,
            clues: DISEASES.len(),
            clue_len: 8,
            top_k: 3,
            queries: 16,
            heads: 4,
            encoder_heads: 4,
            interaction_layers: 1,
            temperature: 0.07,
            vocab_size: 0,
            encoder_depth: 2,
            decoder_depth: 2,
            ffn_mult: 4,
            max_text_len: 64,
            lr: 1e-4,
            batch_size: 8,
            pretrain_epochs: 24,
            finetune_epochs: 5,
            seed: 42,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by gradient checks.
    pub fn micro() -> Self {
        Self {
            d: 8,
            d_llm: 8,
            patch_size: 16,
            top_k: 1,
            queries: 2,
            heads: 2,
            encoder_heads: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            ffn_mult: 2,
            ..Self::default()
        }
    }

    /// Patch count `n`.
    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size.max(1);
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, usize); 15] = [
            ("d", self.d),
            ("d_llm", self.d_llm),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("clues", self.clues),
            ("clue_len", self.clue_len),
            ("top_k", self.top_k),
            ("queries", self.queries),
            ("heads", self.heads),
            ("encoder_heads", self.encoder_heads),
            ("interaction_layers", self.interaction_layers),
            ("decoder_depth", self.decoder_depth),
            ("ffn_mult", self.ffn_mult),
            ("max_text_len", self.max_text_len),
            ("batch_size", self.batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(bad(field, "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(bad(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if self.clues != DISEASES.len() {
            return Err(bad("clues", format!("the disease catalog defines {} clues", DISEASES.len())));
        }
        if self.top_k > self.clues {
            return Err(bad("top_k", format!("{} exceeds clue count {}", self.top_k, self.clues)));
        }
        if self.d_llm % self.heads != 0 {
            return Err(bad("heads", format!("{} does not divide d_llm {}", self.heads, self.d_llm)));
        }
        if self.d % self.encoder_heads != 0 {
            return Err(bad("encoder_heads", format!("{} does not divide d {}", self.encoder_heads, self.d)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(bad("temperature", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        Ok(())
    }
}

fn bad(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Config {
        field,
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        assert_eq!(ModelConfig::default().patches(), 64);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = ModelConfig {
            top_k: 15,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field: "top_k", .. })));
        let cfg = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field: "heads", .. })));
        let cfg = ModelConfig {
            patch_size: 7,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field: "patch_size", .. })));
        let cfg = ModelConfig {
            temperature: 0.0,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field: "temperature", .. })));
    }
}
