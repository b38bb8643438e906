//! Pretraining losses: masked supernode reconstruction, cross-view prototype
//! consistency and the assignment-entropy term.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{adjacency_for, align, align_graph, assignment_entropy_graph};
use crate::atlas::{Atlas, AtlasRegistry};
use crate::autograd::{softmax_rows, Graph, Var};
use crate::connectome::{Connectome, MultiViewSample};
use crate::encoder::{encode, encode_graph, plain_block, DropoutCtx};
use crate::error::{Error, Result};
use crate::model::{names, ModelState};
use crate::params::ParamStore;

/// Split of the supernode indices into kept and masked sets (both sorted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub keep: Vec<usize>,
    pub mask: Vec<usize>,
}

/// Uniformly random mask of `round(ratio * n)` supernodes.
pub fn mask_split(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if n < 2 {
        return Err(Error::Config(format!("cannot mask {n} supernodes")));
    }
    let m = (ratio * n as f64).round() as usize;
    if m == 0 || m >= n {
        return Err(Error::Config(format!("mask ratio {ratio} of {n} gives {m} masked supernodes")));
    }
    let mut mask = sample(rng, n, m).into_vec();
    mask.sort_unstable();
    let mut is_masked = vec![false; n];
    for &i in &mask {
        is_masked[i] = true;
    }
    let keep = (0..n).filter(|i| !is_masked[*i]).collect();
    Ok(MaskPlan { keep, mask })
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Mean smooth-L1 of `decoded - target` over the masked rows and all columns.
pub fn reconstruction_error(decoded: &Array2<f64>, target: &Array2<f64>, plan: &MaskPlan) -> Result<f64> {
    if decoded.dim() != target.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", decoded.dim(), target.dim())));
    }
    if plan.mask.is_empty() {
        return Err(Error::Contract("reconstruction needs a nonempty mask".into()));
    }
    let mut s = 0.0;
    for &i in &plan.mask {
        for j in 0..decoded.ncols() {
            s += smooth_l1(decoded[[i, j]] - target[[i, j]]);
        }
    }
    Ok(s / (plan.mask.len() * decoded.ncols()) as f64)
}

/// Run the per-atlas decoder on `q`.
pub fn decode_graph(g: &mut Graph, model: &ModelState, atlas_id: &str, q: Var) -> Result<Var> {
    if !model.has_decoder(atlas_id) {
        return Err(Error::UnknownAtlas(atlas_id.to_string()));
    }
    let e = &model.config.encoder;
    let mut x = q;
    for l in 0..model.config.objective.decoder_layers {
        x = plain_block(g, &model.params, x, &names::dec_layer(atlas_id, l), e.heads, e.ln_eps)?;
    }
    Ok(x)
}

/// Masked reconstruction on the tape. Masked rows of `input` are zeroed,
/// decoded, and compared against `target` (detached) on the masked rows only.
pub fn masked_reconstruction_graph(
    g: &mut Graph,
    model: &ModelState,
    atlas_id: &str,
    input: Var,
    target: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    let (n, d) = g.shape(input);
    if g.shape(target) != (n, d) {
        return Err(Error::Shape("reconstruction target shape differs from input".into()));
    }
    if plan.mask.is_empty() || plan.mask.iter().any(|i| *i >= n) {
        return Err(Error::Contract("mask plan does not fit the supernode count".into()));
    }
    let mut keep = Array2::ones((n, d));
    for &i in &plan.mask {
        keep.row_mut(i).fill(0.0);
    }
    let q = g.mul_const(input, keep);
    let decoded = decode_graph(g, model, atlas_id, q)?;
    let target = g.detach(target);
    let pred = g.select_rows(decoded, &plan.mask);
    let tgt = g.select_rows(target, &plan.mask);
    let diff = g.sub(pred, tgt);
    let l = g.smooth_l1(diff);
    Ok(g.mean(l))
}

/// Prototype distributions `softmax(MLP(H_hat))`, `n_super x P`.
pub fn prototype_graph(g: &mut Graph, model: &ModelState, h: Var) -> Var {
    let layers = model.config.objective.proto_layers;
    let mut x = h;
    for i in 0..layers {
        let w = g.param(&model.params, &names::proto_w(i));
        let b = g.param(&model.params, &names::proto_b(i));
        let y = g.matmul(x, w);
        x = g.add_row(y, b);
        if i + 1 < layers {
            x = g.relu(x);
        }
    }
    g.softmax_rows(x)
}

/// Numeric prototype assignment with explicit projector parameters.
pub fn prototype_assign(h: &Array2<f64>, store: &ParamStore, layers: usize) -> Result<Array2<f64>> {
    let mut x = h.clone();
    for i in 0..layers {
        let w = store
            .get(&names::proto_w(i))
            .ok_or_else(|| Error::Checkpoint(format!("missing {}", names::proto_w(i))))?;
        let b = store
            .get(&names::proto_b(i))
            .ok_or_else(|| Error::Checkpoint(format!("missing {}", names::proto_b(i))))?;
        if x.ncols() != w.nrows() {
            return Err(Error::Shape(format!("prototype input {:?} vs {:?}", x.dim(), w.dim())));
        }
        x = x.dot(w) + b;
        if i + 1 < layers {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }
    Ok(softmax_rows(&x))
}

/// Mean prototype distribution over the aligned supernodes of one view
/// (inference mode, no dropout).
pub fn view_prototype_profile(model: &ModelState, view: &Connectome, atlas: &Atlas) -> Result<Array1<f64>> {
    let h = encode(view, atlas, model, None)?;
    let z = adjacency_for(model, view.matrix())?;
    let (supernodes, _) = align(model, &h, &z)?;
    let p = prototype_assign(&supernodes, &model.params, model.config.objective.proto_layers)?;
    p.mean_axis(Axis(0))
        .ok_or_else(|| Error::Shape("no supernodes".into()))
}

fn check_views(n_views: usize) -> Result<()> {
    if n_views < 2 {
        return Err(Error::Contract(format!(
            "clustering consistency needs at least 2 views, got {n_views}"
        )));
    }
    Ok(())
}

/// Symmetric KL between each view and the view mean, averaged:
/// `1/(2 M N) sum_{m,q} KL(p_mq || pbar_q) + KL(pbar_q || p_mq)`.
pub fn clustering_consistency_loss(views: &[Array2<f64>], clamp: f64) -> Result<f64> {
    check_views(views.len())?;
    let dim = views[0].dim();
    if views.iter().any(|v| v.dim() != dim) {
        return Err(Error::Shape("prototype tensors differ in shape across views".into()));
    }
    let m = views.len() as f64;
    let mut mean = Array2::zeros(dim);
    for v in views {
        mean += v;
    }
    mean /= m;
    let mut s = 0.0;
    for v in views {
        for (p, q) in v.iter().zip(mean.iter()) {
            s += (p - q) * (p.max(clamp).ln() - q.max(clamp).ln());
        }
    }
    Ok(s / (2.0 * m * dim.0 as f64))
}

/// Tape version of [`clustering_consistency_loss`].
pub fn clustering_consistency_graph(g: &mut Graph, views: &[Var], clamp: f64) -> Result<Var> {
    check_views(views.len())?;
    let m = views.len();
    let n = g.shape(views[0]).0;
    let mut sum = views[0];
    for v in &views[1..] {
        sum = g.add(sum, *v);
    }
    let mean = g.scale(sum, 1.0 / m as f64);
    let mean_c = g.clamp_min(mean, clamp);
    let log_mean = g.ln(mean_c);
    let mut terms = Vec::with_capacity(m);
    for v in views {
        let diff = g.sub(*v, mean);
        let vc = g.clamp_min(*v, clamp);
        let lv = g.ln(vc);
        let ldiff = g.sub(lv, log_mean);
        let prod = g.mul(diff, ldiff);
        terms.push(g.sum(prod));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    Ok(g.scale(total, 1.0 / (2.0 * m as f64 * n as f64)))
}

/// `rec + cc + entropy_sign * entropy`, with an absent `cc` contributing 0.
pub fn total_pretrain_loss(rec: f64, cc: Option<f64>, entropy: f64, entropy_sign: f64) -> f64 {
    rec + cc.unwrap_or(0.0) + entropy_sign * entropy
}

/// Loss components of one subject, as tape nodes.
pub struct SubjectLoss {
    pub total: Var,
    pub rec: Var,
    pub cc: Option<Var>,
    /// Mean assignment entropy (not sign-adjusted).
    pub entropy: Var,
    /// Reconstruction target used for each atlas.
    pub targets: BTreeMap<String, Array2<f64>>,
}

/// Per-view randomness for one subject.
pub struct SubjectRng<'a> {
    pub mask: &'a mut ChaCha8Rng,
    pub dropout: Option<&'a mut DropoutCtx>,
    /// Reconstruction targets per atlas to use instead of the current
    /// supernode embeddings. Targets carry no gradient either way; fixing them
    /// lets a finite-difference check see the same function the analytic
    /// gradient describes.
    pub fixed_targets: Option<&'a BTreeMap<String, Array2<f64>>>,
}

/// Full pretraining loss of one subject over all of its views.
///
/// Reconstruction and entropy are averaged over views; consistency is
/// computed over the views when there are at least two.
pub fn subject_pretrain_loss(
    g: &mut Graph,
    model: &ModelState,
    sample: &MultiViewSample,
    registry: &AtlasRegistry,
    rng: SubjectRng<'_>,
) -> Result<SubjectLoss> {
    let o = &model.config.objective;
    let n_super = model.config.align.n_super;
    let SubjectRng {
        mask,
        mut dropout,
        fixed_targets,
    } = rng;
    let shared_plan = if o.shared_mask {
        Some(mask_split(n_super, o.mask_ratio, mask)?)
    } else {
        None
    };

    let mut recs = Vec::new();
    let mut targets = BTreeMap::new();
    let mut ents = Vec::new();
    let mut protos: BTreeMap<&str, Var> = BTreeMap::new();
    for (atlas_id, view) in &sample.views {
        let atlas = registry.require(atlas_id)?;
        let enc = encode_graph(g, model, view.matrix(), atlas, dropout.as_deref_mut())?;
        let z = adjacency_for(model, view.matrix())?;
        let al = align_graph(g, model, enc.nodes, &z)?;
        let plan = match &shared_plan {
            Some(p) => p.clone(),
            None => mask_split(n_super, o.mask_ratio, mask)?,
        };
        let target = match fixed_targets.and_then(|t| t.get(atlas_id)) {
            Some(t) => g.constant(t.clone()),
            None => al.supernodes,
        };
        targets.insert(atlas_id.clone(), g.value(target).clone());
        recs.push(masked_reconstruction_graph(
            g,
            model,
            atlas_id,
            al.supernodes,
            target,
            &plan,
        )?);
        ents.push(assignment_entropy_graph(g, al.assignment, o.prob_clamp));
        protos.insert(atlas_id, prototype_graph(g, model, al.supernodes));
    }

    let mean_of = |g: &mut Graph, xs: &[Var]| {
        let mut s = xs[0];
        for x in &xs[1..] {
            s = g.add(s, *x);
        }
        g.scale(s, 1.0 / xs.len() as f64)
    };
    let rec = mean_of(g, &recs);
    let entropy = mean_of(g, &ents);
    let cc = if protos.len() >= 2 {
        let views: Vec<Var> = protos.values().copied().collect();
        Some(clustering_consistency_graph(g, &views, o.prob_clamp)?)
    } else {
        None
    };
    let signed = g.scale(entropy, o.entropy_sign);
    let mut total = g.add(rec, signed);
    if let Some(c) = cc {
        total = g.add(total, c);
    }
    Ok(SubjectLoss {
        total,
        rec,
        cc,
        entropy,
        targets,
    })
}
