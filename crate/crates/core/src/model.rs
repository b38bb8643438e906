//! Model state: every learnable matrix, created and initialized from the
//! configuration and the set of registered atlases.
//!
//! Parameter names are hierarchical (`enc.l0.attn.wq`, `dec.AAL.l1.ffn.w1`,
//! ...). Each matrix is initialized from its own random stream keyed by
//! `(seed, name)`, so registration order never changes initial values.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::atlas::Atlas;
use crate::autograd::{sigmoid, softplus};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{normal_matrix, xavier_matrix, ParamStore};
use crate::rng::{hash_str, stream, Stream};

/// Std of the Gaussian used for atlas projections and attention projections.
pub const PROJ_INIT_STD: f64 = 0.02;
/// Floor added to the softplus bandwidth parametrization.
pub const SIGMA_FLOOR: f64 = 1e-4;

pub mod names {
    pub fn atlas_proj(atlas: &str) -> String {
        format!("enc.proj.{atlas}")
    }
    pub const FREQ_Z: &str = "enc.freq.z";
    pub const FREQ_PROJ: &str = "enc.freq.w_proj";
    pub fn enc_layer(l: usize) -> String {
        format!("enc.l{l}")
    }
    pub fn dec_layer(atlas: &str, l: usize) -> String {
        format!("dec.{atlas}.l{l}")
    }
    pub fn bias(l: usize, which: &str) -> String {
        format!("enc.l{l}.bias.{which}")
    }
    pub fn gcn_feat(i: usize) -> String {
        format!("align.feat.w{i}")
    }
    pub fn gcn_pool(i: usize) -> String {
        format!("align.pool.w{i}")
    }
    pub fn proto_w(i: usize) -> String {
        format!("proto.w{i}")
    }
    pub fn proto_b(i: usize) -> String {
        format!("proto.b{i}")
    }
    pub const HEAD_W: &str = "head.w";
    pub const HEAD_B: &str = "head.b";
}

/// Coarse parameter group of a parameter name, used for per-group gradient
/// checks and parameter-count breakdowns.
pub fn param_group(name: &str) -> &'static str {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["enc", "proj", ..] => "atlas_projection",
        ["enc", "freq", "z"] => "frequency_bank.z",
        ["enc", "freq", ..] => "frequency_bank.w_proj",
        ["enc", _, "bias", "alpha_raw"] => "bias.alpha_raw",
        ["enc", _, "bias", "beta"] => "bias.beta",
        ["enc", _, "bias", "mu_raw"] => "bias.mu_raw",
        ["enc", _, "bias", "sigma_raw"] => "bias.sigma_raw",
        ["enc", _, "attn", ..] => "attention",
        ["enc", _, "gate", ..] => "gate",
        ["enc", _, "ln1" | "ln2", ..] => "layer_norm",
        ["enc", _, "ffn", ..] => "ffn",
        ["align", "feat", ..] => "gcn_feat",
        ["align", "pool", ..] => "gcn_pool",
        ["dec", ..] => "decoder",
        ["proto", ..] => "prototype_projector",
        ["head", ..] => "head",
        _ => "other",
    }
}

/// Derived (constrained) distance-bias parameters of one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasHead {
    /// Scale, always > 0.
    pub alpha: f64,
    pub beta: f64,
    /// Normalized center in (0, 1).
    pub mu_tilde: f64,
    /// Normalized bandwidth, always > 0.
    pub sigma_tilde: f64,
}

impl BiasHead {
    pub fn from_raw(alpha_raw: f64, beta: f64, mu_raw: f64, sigma_raw: f64) -> Self {
        Self {
            alpha: softplus(alpha_raw),
            beta,
            mu_tilde: sigmoid(mu_raw),
            sigma_tilde: softplus(sigma_raw) + SIGMA_FLOOR,
        }
    }
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Initial normalized Gaussian centers: midpoints of `heads` equal slices of
/// (0.1, 0.9), ascending with head index.
pub fn initial_mu_tilde(heads: usize) -> Vec<f64> {
    (0..heads)
        .map(|h| 0.1 + 0.8 * (h as f64 + 0.5) / heads as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub seed: u64,
    projections: BTreeSet<String>,
    decoders: BTreeSet<String>,
}

impl ModelState {
    /// Build and initialize a model; every atlas gets a projection and a
    /// reconstruction decoder.
    pub fn new<'a>(
        config: ModelConfig,
        atlases: impl IntoIterator<Item = &'a Atlas>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, atlases, seed))
    }

    /// Like [`ModelState::new`] but skips config validation; lets tests
    /// build degenerate stacks such as zero layers.
    #[doc(hidden)]
    pub fn new_unchecked<'a>(
        config: ModelConfig,
        atlases: impl IntoIterator<Item = &'a Atlas>,
        seed: u64,
    ) -> Self {
        Self::build(config, atlases, seed)
    }

    fn build<'a>(config: ModelConfig, atlases: impl IntoIterator<Item = &'a Atlas>, seed: u64) -> Self {
        let mut m = Self {
            config,
            params: ParamStore::new(),
            seed,
            projections: BTreeSet::new(),
            decoders: BTreeSet::new(),
        };
        m.init_shared();
        for a in atlases {
            m.register_atlas(a, true);
        }
        m
    }

    fn init(&mut self, name: String, value: impl FnOnce(&mut rand_chacha::ChaCha8Rng) -> Array2<f64>) {
        let mut rng = stream(self.seed, Stream::Init, &[hash_str(&name)]);
        let v = value(&mut rng);
        self.params.insert(name, v);
    }

    fn init_linear(&mut self, name: String, rows: usize, cols: usize) {
        self.init(name, |r| xavier_matrix(rows, cols, r));
    }

    fn init_const(&mut self, name: String, rows: usize, cols: usize, v: f64) {
        self.params.insert(name, Array2::from_elem((rows, cols), v));
    }

    fn init_attention_block(&mut self, prefix: &str, gated: bool) {
        let e = self.config.encoder.clone();
        let (d, f) = (e.dim, e.ffn_dim());
        for w in ["wq", "wk", "wv", "wo"] {
            self.init(format!("{prefix}.attn.{w}"), |r| normal_matrix(d, d, PROJ_INIT_STD, r));
        }
        self.init_const(format!("{prefix}.attn.bo"), 1, d, 0.0);
        if gated {
            self.init_linear(format!("{prefix}.gate.w"), d, d);
            self.init_const(format!("{prefix}.gate.b"), 1, d, 0.0);
        }
        for ln in ["ln1", "ln2"] {
            self.init_const(format!("{prefix}.{ln}.g"), 1, d, 1.0);
            self.init_const(format!("{prefix}.{ln}.b"), 1, d, 0.0);
        }
        self.init_linear(format!("{prefix}.ffn.w1"), d, f);
        self.init_const(format!("{prefix}.ffn.b1"), 1, f, 0.0);
        self.init_linear(format!("{prefix}.ffn.w2"), f, d);
        self.init_const(format!("{prefix}.ffn.b2"), 1, d, 0.0);
    }

    fn init_shared(&mut self) {
        let c = self.config.clone();
        let e = &c.encoder;
        let d = e.dim;
        let std = e.freq_init_std;
        self.init(names::FREQ_Z.into(), |r| normal_matrix(e.freqs, 3, std, r));
        self.init(names::FREQ_PROJ.into(), |r| {
            normal_matrix(2 * e.freqs, d, PROJ_INIT_STD, r)
        });

        let mu0: Vec<f64> = initial_mu_tilde(e.heads).into_iter().map(logit).collect();
        for l in 0..e.layers {
            let h = e.heads;
            self.init_const(names::bias(l, "alpha_raw"), 1, h, inv_softplus(1.0));
            self.init_const(names::bias(l, "beta"), 1, h, 0.0);
            self.params.insert(
                names::bias(l, "mu_raw"),
                Array2::from_shape_vec((1, h), mu0.clone()).expect("1 x heads"),
            );
            self.init_const(
                names::bias(l, "sigma_raw"),
                1,
                h,
                inv_softplus(0.2 - SIGMA_FLOOR),
            );
            self.init_attention_block(&names::enc_layer(l), true);
        }

        let a = &c.align;
        for i in 0..a.gcn_layers {
            self.init_linear(names::gcn_feat(i), d, d);
            let out = if i + 1 == a.gcn_layers { a.n_super } else { d };
            self.init_linear(names::gcn_pool(i), d, out);
        }

        let o = &c.objective;
        for i in 0..o.proto_layers {
            let out = if i + 1 == o.proto_layers { o.prototypes } else { d };
            self.init_linear(names::proto_w(i), d, out);
            self.init_const(names::proto_b(i), 1, out, 0.0);
        }
    }

    /// Register an atlas projection (and optionally its reconstruction
    /// decoder). Returns `true` if anything new was created; existing
    /// parameters are left untouched.
    pub fn register_atlas(&mut self, atlas: &Atlas, with_decoder: bool) -> bool {
        let id = atlas.id().to_string();
        let mut created = false;
        if !self.projections.contains(&id) {
            let (n, d) = (atlas.roi_count(), self.config.encoder.dim);
            self.init(names::atlas_proj(&id), |r| normal_matrix(n, d, PROJ_INIT_STD, r));
            self.projections.insert(id.clone());
            created = true;
        }
        if with_decoder && !self.decoders.contains(&id) {
            for l in 0..self.config.objective.decoder_layers {
                self.init_attention_block(&names::dec_layer(&id, l), false);
            }
            self.decoders.insert(id);
            created = true;
        }
        created
    }

    /// Fresh linear classifier head `d -> num_classes`, replacing any existing one.
    pub fn init_head(&mut self, num_classes: usize) {
        let d = self.config.encoder.dim;
        self.init_linear(names::HEAD_W.into(), d, num_classes);
        self.init_const(names::HEAD_B.into(), 1, num_classes, 0.0);
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.params.get(names::HEAD_W).map(|w| w.ncols())
    }

    pub fn has_projection(&self, atlas_id: &str) -> bool {
        self.projections.contains(atlas_id)
    }

    pub fn has_decoder(&self, atlas_id: &str) -> bool {
        self.decoders.contains(atlas_id)
    }

    pub fn projection_ids(&self) -> impl Iterator<Item = &String> {
        self.projections.iter()
    }

    pub fn decoder_ids(&self) -> impl Iterator<Item = &String> {
        self.decoders.iter()
    }

    /// Check that `atlas` is registered with a projection of matching size.
    pub fn check_atlas(&self, atlas: &Atlas) -> Result<()> {
        let name = names::atlas_proj(atlas.id());
        let w = self
            .params
            .get(&name)
            .ok_or_else(|| Error::UnknownAtlas(atlas.id().to_string()))?;
        if w.nrows() != atlas.roi_count() {
            return Err(Error::Shape(format!(
                "projection for atlas `{}` has {} rows but the atlas has {} ROIs",
                atlas.id(),
                w.nrows(),
                atlas.roi_count()
            )));
        }
        Ok(())
    }

    /// Constrained bias parameters of `(layer, head)`.
    pub fn bias_head(&self, layer: usize, head: usize) -> BiasHead {
        let get = |w: &str| self.params.get(&names::bias(layer, w)).expect("bias params")[[0, head]];
        BiasHead::from_raw(get("alpha_raw"), get("beta"), get("mu_raw"), get("sigma_raw"))
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Parameter counts per coarse group.
    pub fn param_breakdown(&self) -> std::collections::BTreeMap<&'static str, usize> {
        let mut out = std::collections::BTreeMap::new();
        for (name, v) in self.params.iter() {
            *out.entry(param_group(name)).or_insert(0) += v.len();
        }
        out
    }

    /// Rebuild from a stored parameter set; registered atlases are inferred
    /// from parameter names.
    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore, seed: u64) -> Self {
        let mut projections = BTreeSet::new();
        let mut decoders = BTreeSet::new();
        for name in params.names() {
            if let Some(rest) = name.strip_prefix("enc.proj.") {
                projections.insert(rest.to_string());
            } else if let Some(rest) = name.strip_prefix("dec.") {
                if let Some((atlas, _)) = rest.rsplit_once(".l0.") {
                    decoders.insert(atlas.to_string());
                }
            }
        }
        Self {
            config,
            params,
            seed,
            projections,
            decoders,
        }
    }
}
