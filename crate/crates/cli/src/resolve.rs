//! Layered run configuration: built-in preset < config file < CLI flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mvbrain::config::ModelConfig;
use mvbrain::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Which built-in defaults sit at the bottom of the precedence stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small model that trains on one core in minutes.
    Desk,
    /// The published configuration.
    Paper,
}

impl Preset {
    pub fn from_flag(paper_defaults: bool) -> Self {
        if paper_defaults {
            Preset::Paper
        } else {
            Preset::Desk
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper_defaults(),
        }
    }

    /// Training schedules are the published ones under both presets.
    pub fn pretrain(self, seed: u64) -> TrainConfig {
        TrainConfig::pretrain(seed)
    }

    pub fn finetune(self, seed: u64) -> TrainConfig {
        TrainConfig::finetune(seed)
    }
}

/// Config file layout; every section is optional and may be partial.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(default)]
    pub model: Option<Value>,
    #[serde(default)]
    pub pretrain: Option<Value>,
    #[serde(default)]
    pub finetune: Option<Value>,
}

impl RunFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))
    }
}

/// Recursively overlay `over` onto `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Overlay a partial JSON section onto a typed default; unknown keys are rejected.
pub fn layer<T>(base: &T, over: Option<&Value>, section: &str) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut v = serde_json::to_value(base)?;
    if let Some(o) = over {
        if !o.is_object() {
            bail!("config section `{section}` must be a JSON object");
        }
        merge(&mut v, o);
    }
    serde_json::from_value(v).with_context(|| format!("config section `{section}`"))
}

/// Documentation of every config key, shown by `--help`.
pub const CONFIG_KEYS: &str = "\
CONFIG FILE (--config): JSON with optional sections `model`, `pretrain`, `finetune`.
Precedence: command-line flag > config file > built-in preset (desk, or published
values with --paper-defaults). The resolved config is written next to every output.

model.encoder.dim            256 published | 32 desk     embedding width d
model.encoder.layers         4 published   | 2 desk     distance-biased transformer layers
model.encoder.heads          8 published   | 4 desk     attention heads
model.encoder.freqs          64 published  | 16 desk    learnable Fourier frequencies K
model.encoder.ffn_mult       4 gap-fill    | 2 desk     feed-forward width / d
model.encoder.freq_init_std  0.01 gap-fill             init std of frequencies (1/mm)
model.encoder.ln_eps         1e-5 gap-fill             layer-norm epsilon
model.align.n_super          50 published  | 10 desk    supernodes per view
model.align.gcn_layers       1 gap-fill                GCN depth (feature and pooling branch)
model.align.threshold        0.3 published             adjacency threshold on connectivity
model.align.threshold_abs    false gap-fill            threshold |X| instead of X
model.objective.prototypes   16 published  | 8 desk     prototype count P
model.objective.proto_layers 1 gap-fill                prototype projector depth
model.objective.decoder_layers 2 gap-fill              reconstruction decoder depth
model.objective.mask_ratio   0.5 gap-fill              fraction of supernodes masked
model.objective.shared_mask  false gap-fill            one mask for all views of a subject
model.objective.entropy_sign -1 gap-fill               entropy multiplier (-1 rewards diffuse assignments)
model.objective.prob_clamp   1e-8 gap-fill             floor before every logarithm
model.readout                \"nodes\" gap-fill          graph readout: \"nodes\" | \"supernodes\"
pretrain.epochs              20 published
pretrain.batch_size          16 gap-fill
pretrain.base_lr             1e-4 published
pretrain.dropout             0.5 published
pretrain.grad_clip           5.0 gap-fill              global gradient-norm clip (null disables)
pretrain.checkpoint_every    null gap-fill             epochs between checkpoints
pretrain.adam                {beta1 0.9, beta2 0.999, eps 1e-8} gap-fill
finetune.epochs              50 published
finetune.batch_size          16 gap-fill
finetune.base_lr             grid {1e-3, 5e-4, 2e-4, 1e-4, 5e-5} published (--lr)
finetune.warmup_epochs       5 gap-fill                linear warmup, then cosine decay
finetune.dropout             0.0 gap-fill
finetune.val_fraction        0.2 gap-fill              stratified validation split
finetune.grad_clip           null gap-fill
";
