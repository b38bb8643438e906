//! Graph-level readout, linear classifier, cross-entropy and AUC.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::alignment::{adjacency_for, align_graph};
use crate::atlas::AtlasRegistry;
use crate::autograd::{softmax_rows, Graph, Var};
use crate::config::ReadoutSource;
use crate::connectome::{Dataset, MultiViewSample};
use crate::encoder::{encode_graph, DropoutCtx};
use crate::error::{Error, Result};
use crate::model::{names, ModelState};

/// Column mean of node embeddings.
pub fn readout(nodes: &Array2<f64>) -> Result<Array1<f64>> {
    nodes
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::Shape("readout of an empty node set".into()))
}

/// `1 x d` graph embedding of one view.
pub fn embed_graph(
    g: &mut Graph,
    model: &ModelState,
    sample: &MultiViewSample,
    atlas_id: &str,
    registry: &AtlasRegistry,
    dropout: Option<&mut DropoutCtx>,
) -> Result<Var> {
    let view = sample.view(atlas_id)?;
    let atlas = registry.require(atlas_id)?;
    let enc = encode_graph(g, model, view.matrix(), atlas, dropout)?;
    let pooled = match model.config.readout {
        ReadoutSource::Nodes => enc.nodes,
        ReadoutSource::Supernodes => {
            let z = adjacency_for(model, view.matrix())?;
            align_graph(g, model, enc.nodes, &z)?.supernodes
        }
    };
    Ok(g.mean_rows(pooled))
}

/// `1 x C` logits: per-atlas embeddings summed, then the linear head.
pub fn predict_graph(
    g: &mut Graph,
    model: &ModelState,
    sample: &MultiViewSample,
    atlas_subset: &[String],
    registry: &AtlasRegistry,
    mut dropout: Option<&mut DropoutCtx>,
) -> Result<Var> {
    if atlas_subset.is_empty() {
        return Err(Error::Config("atlas subset is empty".into()));
    }
    if model.num_classes().is_none() {
        return Err(Error::Contract("model has no classifier head".into()));
    }
    let mut sum: Option<Var> = None;
    for a in atlas_subset {
        let e = embed_graph(g, model, sample, a, registry, dropout.as_deref_mut())?;
        sum = Some(match sum {
            Some(s) => g.add(s, e),
            None => e,
        });
    }
    let w = g.param(&model.params, names::HEAD_W);
    let b = g.param(&model.params, names::HEAD_B);
    let y = g.matmul(sum.expect("nonempty subset"), w);
    Ok(g.add_row(y, b))
}

pub fn predict(
    model: &ModelState,
    sample: &MultiViewSample,
    atlas_subset: &[String],
    registry: &AtlasRegistry,
) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let v = predict_graph(&mut g, model, sample, atlas_subset, registry, None)?;
    Ok(g.value(v).row(0).to_owned())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Validation(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

pub fn cross_entropy_graph(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let c = g.shape(logits).1;
    if label >= c {
        return Err(Error::Validation(format!("label {label} out of range for {c} classes")));
    }
    let ls = g.log_softmax_rows(logits);
    let pick = g.slice_cols(ls, label, 1);
    let s = g.sum(pick);
    Ok(g.scale(s, -1.0))
}

/// Mann-Whitney AUC of `scores` for `positive` against the rest; ties count 1/2.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores contain NaN".into()));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub auc: f64,
    /// One-vs-rest AUC per class index; `None` for classes absent from the labels.
    pub per_class: Vec<Option<f64>>,
}

/// Binary AUC on the class-1 column for two classes, macro one-vs-rest otherwise.
/// `scores` is `n x C` (class probabilities or any monotone score).
pub fn auc(scores: &Array2<f64>, labels: &[usize]) -> Result<AucReport> {
    let (n, c) = scores.dim();
    if n != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if let Some(l) = labels.iter().find(|l| **l >= c) {
        return Err(Error::Validation(format!("label {l} out of range for {c} classes")));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Validation("AUC is undefined for a single class".into()));
    }
    let mut per_class = vec![None; c];
    for &k in &present {
        let pos: Vec<bool> = labels.iter().map(|l| *l == k).collect();
        let col: Vec<f64> = scores.column(k).to_vec();
        per_class[k] = Some(binary_auc(&col, &pos)?);
    }
    let auc = if c == 2 {
        per_class[1].expect("both classes present")
    } else {
        present.iter().map(|k| per_class[*k].unwrap()).sum::<f64>() / present.len() as f64
    };
    Ok(AucReport { auc, per_class })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub atlas_subset: Vec<String>,
    pub auc: f64,
    pub accuracy: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub n_test: usize,
}

/// Class probabilities for every sample that has all atlases in the subset.
/// Returns `(probabilities, labels, skipped)`.
pub fn score_samples(
    model: &ModelState,
    samples: &[&MultiViewSample],
    atlas_subset: &[String],
    registry: &AtlasRegistry,
) -> Result<(Array2<f64>, Vec<usize>, usize)> {
    let c = model
        .num_classes()
        .ok_or_else(|| Error::Contract("model has no classifier head".into()))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    for s in samples {
        if !atlas_subset.iter().all(|a| s.views.contains_key(a)) {
            skipped += 1;
            continue;
        }
        let label = s
            .label
            .ok_or_else(|| Error::Validation(format!("subject `{}` has no label", s.subject_id)))?;
        rows.extend(predict(model, s, atlas_subset, registry)?.iter().copied());
        labels.push(label);
    }
    let logits = Array2::from_shape_vec((labels.len(), c), rows).expect("row-major logits");
    Ok((softmax_rows(&logits), labels, skipped))
}

pub fn evaluate(
    model: &ModelState,
    dataset: &Dataset,
    atlas_subset: &[String],
    registry: &AtlasRegistry,
) -> Result<EvalReport> {
    let samples: Vec<&MultiViewSample> = dataset.samples.iter().collect();
    let (probs, labels, skipped) = score_samples(model, &samples, atlas_subset, registry)?;
    if labels.is_empty() {
        return Err(Error::Validation(format!(
            "no subject of `{}` has all atlases {atlas_subset:?}",
            dataset.name
        )));
    }
    if skipped > 0 {
        log::warn!("evaluate: skipped {skipped} subjects missing a requested view");
    }
    let report = auc(&probs, &labels)?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(&labels)
        .filter(|(r, l)| argmax(r.as_slice().expect("contiguous row")) == **l)
        .count();
    Ok(EvalReport {
        dataset: dataset.name.clone(),
        atlas_subset: atlas_subset.to_vec(),
        auc: report.auc,
        accuracy: correct as f64 / labels.len() as f64,
        per_class_auc: report.per_class,
        n_test: labels.len(),
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
