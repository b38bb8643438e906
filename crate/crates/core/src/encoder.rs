//! Distance-biased transformer encoder.
//!
//! `encode` = atlas projection + Fourier coordinate embedding, followed by
//! `L` distance-aware self-attention layers. Each head adds a Gaussian
//! function of inter-ROI distance to its attention logits; the Gaussian's
//! center and width are learned in units of the atlas' maximum distance so
//! the same head targets the same relative range on every atlas.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::atlas::Atlas;
use crate::autograd::{Graph, Var};
use crate::connectome::Connectome;
use crate::error::{Error, Result};
use crate::model::{names, BiasHead, ModelState, SIGMA_FLOOR};
use crate::params::ParamStore;

/// Dropout rate plus the random stream its masks are drawn from.
pub struct DropoutCtx {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl DropoutCtx {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let (r, c) = g.shape(x);
        let rng = &mut self.rng;
        let mask = Array2::from_shape_simple_fn((r, c), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        g.mul_const(x, mask)
    }
}

fn maybe_dropout(ctx: &mut Option<&mut DropoutCtx>, g: &mut Graph, x: Var) -> Var {
    match ctx {
        Some(c) => c.apply(g, x),
        None => x,
    }
}

/// Fourier embedding `[sin(2 pi z_k . c_i), cos(2 pi z_k . c_i)]_k` of each
/// coordinate row, sin/cos interleaved per frequency.
pub fn fourier_features(coords: &Array2<f64>, freqs: &Array2<f64>) -> Result<Array2<f64>> {
    if coords.ncols() != 3 || freqs.ncols() != 3 {
        return Err(Error::Shape("coordinates and frequencies must have 3 columns".into()));
    }
    let phase = coords.dot(&freqs.t()) * (2.0 * PI);
    let (n, k) = phase.dim();
    Ok(Array2::from_shape_fn((n, 2 * k), |(i, j)| {
        let p = phase[[i, j / 2]];
        if j % 2 == 0 {
            p.sin()
        } else {
            p.cos()
        }
    }))
}

/// Permutation taking `[sin_1..sin_K | cos_1..cos_K]` to the interleaved layout.
fn interleave_matrix(k: usize) -> Array2<f64> {
    let mut p = Array2::zeros((2 * k, 2 * k));
    for i in 0..k {
        p[[i, 2 * i]] = 1.0;
        p[[k + i, 2 * i + 1]] = 1.0;
    }
    p
}

fn fourier_graph(g: &mut Graph, coords: &Array2<f64>, freqs: Var) -> Var {
    let c = g.constant(coords.clone());
    let zt = g.transpose(freqs);
    let dot = g.matmul(c, zt);
    let phase = g.scale(dot, 2.0 * PI);
    let s = g.sin(phase);
    let co = g.cos(phase);
    let cat = g.concat_cols(&[s, co]);
    let k = g.shape(freqs).0;
    let perm = g.constant(interleave_matrix(k));
    g.matmul(cat, perm)
}

/// `X W^a + phi(C) W_proj` on the tape.
pub fn atlas_encode_graph(
    g: &mut Graph,
    model: &ModelState,
    x: &Array2<f64>,
    atlas: &Atlas,
) -> Result<Var> {
    model.check_atlas(atlas)?;
    if x.dim() != (atlas.roi_count(), atlas.roi_count()) {
        return Err(Error::Shape(format!(
            "connectivity is {:?} but atlas `{}` has {} ROIs",
            x.dim(),
            atlas.id(),
            atlas.roi_count()
        )));
    }
    let p = &model.params;
    let w_a = g.param(p, &names::atlas_proj(atlas.id()));
    let xv = g.constant(x.clone());
    let h = g.matmul(xv, w_a);
    let z = g.param(p, names::FREQ_Z);
    let phi = fourier_graph(g, atlas.coords(), z);
    let w_proj = g.param(p, names::FREQ_PROJ);
    let pos = g.matmul(phi, w_proj);
    Ok(g.add(h, pos))
}

pub fn atlas_encode(x: &Connectome, atlas: &Atlas, model: &ModelState) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let v = atlas_encode_graph(&mut g, model, x.matrix(), atlas)?;
    Ok(g.value(v).clone())
}

/// Gaussian distance bias of one head:
/// `B_ij = alpha * (-(D_ij - mu)^2 / (2 sigma^2)) + beta` with
/// `mu = mu_tilde * dis_max` and `sigma = sigma_tilde * dis_max`.
pub fn distance_bias(atlas: &Atlas, head: &BiasHead) -> Array2<f64> {
    let mu = head.mu_tilde * atlas.dis_max();
    let sigma = head.sigma_tilde * atlas.dis_max();
    atlas
        .dist()
        .mapv(|d| head.alpha * (-(d - mu).powi(2) / (2.0 * sigma * sigma)) + head.beta)
}

/// Bias as a function of normalized distance `t = D / dis_max`.
pub fn bias_profile(head: &BiasHead, t: f64) -> f64 {
    head.alpha * (-(t - head.mu_tilde).powi(2) / (2.0 * head.sigma_tilde.powi(2))) + head.beta
}

fn scalar_at(g: &mut Graph, row: Var, h: usize) -> Var {
    g.slice_cols(row, h, 1)
}

/// Per-head bias matrices of one layer, built from the raw parameters on the tape.
pub fn bias_graph(g: &mut Graph, store: &ParamStore, atlas: &Atlas, layer: usize, heads: usize) -> Vec<Var> {
    let n = atlas.roi_count();
    let dmax = atlas.dis_max();
    let alpha_raw = g.param(store, &names::bias(layer, "alpha_raw"));
    let beta = g.param(store, &names::bias(layer, "beta"));
    let mu_raw = g.param(store, &names::bias(layer, "mu_raw"));
    let sigma_raw = g.param(store, &names::bias(layer, "sigma_raw"));
    let alpha_all = g.softplus(alpha_raw);
    let mu_all = g.sigmoid(mu_raw);
    let sp = g.softplus(sigma_raw);
    let sigma_all = g.offset(sp, SIGMA_FLOOR);
    let dist = g.constant(atlas.dist().clone());

    (0..heads)
        .map(|h| {
            let a = scalar_at(g, alpha_all, h);
            let b = scalar_at(g, beta, h);
            let m = scalar_at(g, mu_all, h);
            let s = scalar_at(g, sigma_all, h);
            let mu = g.scale(m, dmax);
            let sigma = g.scale(s, dmax);
            let var2 = {
                let sq = g.square(sigma);
                g.scale(sq, 2.0)
            };
            let mu_b = g.broadcast(mu, n, n);
            let diff = g.sub(dist, mu_b);
            let num = g.square(diff);
            let den = g.broadcast(var2, n, n);
            let q = g.div(num, den);
            let a_b = g.broadcast(a, n, n);
            let aq = g.mul(a_b, q);
            let neg = g.scale(aq, -1.0);
            let b_b = g.broadcast(b, n, n);
            g.add(neg, b_b)
        })
        .collect()
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: &str, b: Option<&str>) -> Var {
    let wv = g.param(store, w);
    let y = g.matmul(x, wv);
    match b {
        Some(b) => {
            let bv = g.param(store, b);
            g.add_row(y, bv)
        }
        None => y,
    }
}

fn affine_layer_norm(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str, eps: f64) -> Var {
    let n = g.layer_norm(x, eps);
    let gain = g.param(store, &format!("{prefix}.g"));
    let bias = g.param(store, &format!("{prefix}.b"));
    let s = g.mul_row(n, gain);
    g.add_row(s, bias)
}

fn feed_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    prefix: &str,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Var {
    let h = linear(g, store, x, &format!("{prefix}.ffn.w1"), Some(&format!("{prefix}.ffn.b1")));
    let h = g.gelu(h);
    let h = maybe_dropout(dropout, g, h);
    linear(g, store, h, &format!("{prefix}.ffn.w2"), Some(&format!("{prefix}.ffn.b2")))
}

/// Multi-head self-attention. Returns the projected output and the
/// (pre-dropout) attention matrix of every head.
fn multi_head(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    prefix: &str,
    heads: usize,
    biases: Option<&[Var]>,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(x).1;
    let dh = d / heads;
    let q = linear(g, store, x, &format!("{prefix}.attn.wq"), None);
    let k = linear(g, store, x, &format!("{prefix}.attn.wk"), None);
    let v = linear(g, store, x, &format!("{prefix}.attn.wv"), None);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let qk = g.matmul(qh, kt);
        let mut logits = g.scale(qk, scale);
        if let Some(b) = biases {
            logits = g.add(logits, b[h]);
        }
        if g.value(logits).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("attention logits of `{prefix}` head {h}")));
        }
        let a = g.softmax_rows(logits);
        attn.push(a);
        let a = maybe_dropout(dropout, g, a);
        outs.push(g.matmul(a, vh));
    }
    let cat = g.concat_cols(&outs);
    let out = linear(
        g,
        store,
        cat,
        &format!("{prefix}.attn.wo"),
        Some(&format!("{prefix}.attn.bo")),
    );
    Ok((out, attn))
}

/// One distance-biased layer:
/// `DASA = H + LN1(sigmoid(H W_g + b_g) * MultiHead(H))`,
/// `out = LN2(H + FFN(DASA))`.
pub fn dasa_layer(
    g: &mut Graph,
    model: &ModelState,
    h: Var,
    biases: &[Var],
    layer: usize,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<(Var, Vec<Var>)> {
    let e = &model.config.encoder;
    let store = &model.params;
    let prefix = names::enc_layer(layer);
    let (mh, attn) = multi_head(g, store, h, &prefix, e.heads, Some(biases), dropout)?;
    let gate_pre = linear(
        g,
        store,
        h,
        &format!("{prefix}.gate.w"),
        Some(&format!("{prefix}.gate.b")),
    );
    let gate = g.sigmoid(gate_pre);
    let gated = g.mul(gate, mh);
    let normed = affine_layer_norm(g, store, gated, &format!("{prefix}.ln1"), e.ln_eps);
    let dasa = g.add(h, normed);
    let ffn = feed_forward(g, store, dasa, &prefix, dropout);
    let res = g.add(h, ffn);
    let out = affine_layer_norm(g, store, res, &format!("{prefix}.ln2"), e.ln_eps);
    Ok((out, attn))
}

/// Post-norm transformer block with plain (unbiased, ungated) self-attention,
/// used by the reconstruction decoders.
pub fn plain_block(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    prefix: &str,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let (att, _) = multi_head(g, store, x, prefix, heads, None, &mut None)?;
    let r1 = g.add(x, att);
    let x1 = affine_layer_norm(g, store, r1, &format!("{prefix}.ln1"), eps);
    let f = feed_forward(g, store, x1, prefix, &mut None);
    let r2 = g.add(x1, f);
    Ok(affine_layer_norm(g, store, r2, &format!("{prefix}.ln2"), eps))
}

pub struct EncodeOutput {
    /// `N_a x d` node embeddings.
    pub nodes: Var,
    /// Attention matrices, indexed `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
    /// Bias matrices, indexed `[layer][head]`.
    pub biases: Vec<Vec<Var>>,
}

/// Full encoder on the tape.
pub fn encode_graph(
    g: &mut Graph,
    model: &ModelState,
    x: &Array2<f64>,
    atlas: &Atlas,
    mut dropout: Option<&mut DropoutCtx>,
) -> Result<EncodeOutput> {
    let mut h = atlas_encode_graph(g, model, x, atlas)?;
    let e = &model.config.encoder;
    let mut attention = Vec::with_capacity(e.layers);
    let mut biases = Vec::with_capacity(e.layers);
    for l in 0..e.layers {
        let b = bias_graph(g, &model.params, atlas, l, e.heads);
        let (out, attn) = dasa_layer(g, model, h, &b, l, &mut dropout)?;
        h = out;
        attention.push(attn);
        biases.push(b);
    }
    Ok(EncodeOutput {
        nodes: h,
        attention,
        biases,
    })
}

/// Node embeddings of one connectome.
pub fn encode(
    x: &Connectome,
    atlas: &Atlas,
    model: &ModelState,
    dropout: Option<&mut DropoutCtx>,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let out = encode_graph(&mut g, model, x.matrix(), atlas, dropout)?;
    Ok(g.value(out.nodes).clone())
}

/// Node embeddings plus the attention matrices of every layer and head.
pub fn encode_with_attention(
    x: &Connectome,
    atlas: &Atlas,
    model: &ModelState,
) -> Result<(Array2<f64>, Vec<Vec<Array2<f64>>>)> {
    let mut g = Graph::new();
    let out = encode_graph(&mut g, model, x.matrix(), atlas, None)?;
    let attn = out
        .attention
        .iter()
        .map(|layer| layer.iter().map(|v| g.value(*v).clone()).collect())
        .collect();
    Ok((g.value(out.nodes).clone(), attn))
}
