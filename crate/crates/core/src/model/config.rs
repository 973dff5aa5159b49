use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    /// Decoder slots N; the first half is the present group.
    pub n_slots: usize,
    /// Prefix length used by target assignment.
    pub k: usize,
    /// Keywords N_K routed into control codes.
    pub n_keywords: usize,
    /// Maximum decode steps per slot (the EOS step included).
    pub max_kp_len: usize,
    pub rpe_buckets: usize,
    pub rpe_max_distance: usize,
    pub ffn_width: usize,
    pub max_input_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            vocab_size: 0,
            n_slots: 8,
            k: 2,
            n_keywords: 3,
            max_kp_len: 8,
            rpe_buckets: 32,
            rpe_max_distance: 128,
            ffn_width: 128,
            max_input_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.d % 2 != 0 {
            return fail(format!("d = {} must be even and positive", self.d));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return fail(format!("d = {} is not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if self.n_slots == 0 || self.n_slots % 2 != 0 {
            return fail(format!("n_slots = {} must be even and positive", self.n_slots));
        }
        if self.n_keywords >= self.n_slots / 2 {
            return fail(format!(
                "n_keywords = {} must be below n_slots / 2 = {}",
                self.n_keywords,
                self.n_slots / 2
            ));
        }
        if self.vocab_size < 7 {
            return fail(format!("vocab_size = {} leaves no room for special tokens", self.vocab_size));
        }
        if self.k == 0 || self.max_kp_len < 2 {
            return fail("k must be >= 1 and max_kp_len >= 2".into());
        }
        if self.rpe_buckets < 4 || self.rpe_max_distance < self.rpe_buckets / 2 {
            return fail("rpe_buckets must be >= 4 and rpe_max_distance >= rpe_buckets / 2".into());
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.ffn_width == 0 || self.max_input_len == 0 {
            return fail("layer counts, ffn_width and max_input_len must be positive".into());
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_slots / 2
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}
