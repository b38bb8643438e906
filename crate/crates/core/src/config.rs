//! Model hyperparameters.
//!
//! Defaults follow the published configuration where one exists (4 layers,
//! 8 heads, 64 frequencies, 50 supernodes, 16 prototypes, 0.3 adjacency
//! threshold). Everything else is a documented gap-fill.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Number of distance-biased transformer layers.
    pub layers: usize,
    pub heads: usize,
    /// Number of learnable Fourier frequency vectors `K`.
    pub freqs: usize,
    /// Feed-forward inner width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Std of the Gaussian used to initialize frequency vectors (1/mm).
    pub freq_init_std: f64,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            layers: 4,
            heads: 8,
            freqs: 64,
            ffn_mult: 4,
            freq_init_std: 0.01,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.dim * self.ffn_mult
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Number of supernodes every view is pooled into.
    pub n_super: usize,
    /// Graph-convolution depth of both the feature and the pooling branch.
    pub gcn_layers: usize,
    /// Adjacency threshold on connectivity values.
    pub threshold: f64,
    /// Threshold `|X_ij|` instead of the signed value.
    pub threshold_abs: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            n_super: 50,
            gcn_layers: 1,
            threshold: 0.3,
            threshold_abs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub prototypes: usize,
    /// Linear layers in the prototype projector (ReLU between them).
    pub proto_layers: usize,
    /// Depth of each per-atlas reconstruction decoder.
    pub decoder_layers: usize,
    /// Fraction of supernodes masked for reconstruction.
    pub mask_ratio: f64,
    /// Use one mask plan for all views of a subject instead of one per view.
    pub shared_mask: bool,
    /// Multiplier of the mean assignment entropy in the total loss.
    /// `-1` rewards high-entropy assignments.
    pub entropy_sign: f64,
    /// Floor applied to probabilities before every logarithm.
    pub prob_clamp: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            prototypes: 16,
            proto_layers: 1,
            decoder_layers: 2,
            mask_ratio: 0.5,
            shared_mask: false,
            entropy_sign: -1.0,
            prob_clamp: 1e-8,
        }
    }
}

/// Which embeddings feed the graph-level readout before the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutSource {
    /// Mean over backbone node embeddings.
    #[default]
    Nodes,
    /// Mean over aligned supernode embeddings.
    Supernodes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub align: AlignConfig,
    pub objective: ObjectiveConfig,
    pub readout: ReadoutSource,
}

impl ModelConfig {
    /// The published default configuration.
    pub fn paper_defaults() -> Self {
        Self::default()
    }

    /// Desk-scale configuration: trains on a single core in minutes on the
    /// synthetic planted-signal datasets.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                dim: 32,
                layers: 2,
                heads: 4,
                freqs: 16,
                ffn_mult: 2,
                ..Default::default()
            },
            align: AlignConfig {
                n_super: 10,
                ..Default::default()
            },
            objective: ObjectiveConfig {
                prototypes: 8,
                ..Default::default()
            },
            readout: ReadoutSource::Nodes,
        }
    }

    /// Small configuration used for gradient checks and quick tests.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                dim: 8,
                layers: 2,
                heads: 2,
                freqs: 4,
                ffn_mult: 2,
                ..Default::default()
            },
            align: AlignConfig {
                n_super: 5,
                ..Default::default()
            },
            objective: ObjectiveConfig {
                prototypes: 3,
                ..Default::default()
            },
            readout: ReadoutSource::Nodes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if e.dim == 0 || e.heads == 0 || e.dim % e.heads != 0 {
            return fail("encoder.dim must be a positive multiple of encoder.heads");
        }
        if e.layers == 0 {
            return fail("encoder.layers must be >= 1");
        }
        if e.freqs == 0 {
            return fail("encoder.freqs must be >= 1");
        }
        if e.ffn_mult == 0 || e.ln_eps <= 0.0 || e.freq_init_std < 0.0 {
            return fail("encoder.ffn_mult >= 1, ln_eps > 0 and freq_init_std >= 0 are required");
        }
        if self.align.n_super < 2 {
            return fail("align.n_super must be >= 2");
        }
        if self.align.gcn_layers == 0 {
            return fail("align.gcn_layers must be >= 1");
        }
        let o = &self.objective;
        if o.prototypes < 2 || o.proto_layers == 0 {
            return fail("objective.prototypes >= 2 and objective.proto_layers >= 1 are required");
        }
        if !(o.mask_ratio > 0.0 && o.mask_ratio < 1.0) {
            return fail("objective.mask_ratio must lie in (0, 1)");
        }
        if ((o.mask_ratio * self.align.n_super as f64).round() as usize) < 1 {
            return fail("objective.mask_ratio masks no supernode");
        }
        if !(o.prob_clamp > 0.0 && o.prob_clamp < 1e-2) {
            return fail("objective.prob_clamp must lie in (0, 0.01)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_published_values() {
        let c = ModelConfig::paper_defaults();
        c.validate().unwrap();
        assert_eq!(
            (c.encoder.dim, c.encoder.layers, c.encoder.heads, c.encoder.freqs),
            (256, 4, 8, 64)
        );
        assert_eq!((c.align.n_super, c.objective.prototypes), (50, 16));
        assert_eq!(c.align.threshold, 0.3);
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::toy();
        c.encoder.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"encoder":{"dim":32,"heads":4}}"#).unwrap();
        assert_eq!(c.encoder.dim, 32);
        assert_eq!(c.encoder.layers, 4);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus":1}"#).is_err());
    }
}
