//! Training loops: joint multi-view pretraining and supervised fine-tuning.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::atlas::{Atlas, AtlasRegistry};
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::connectome::{Dataset, MultiViewSample};
use crate::encoder::DropoutCtx;
use crate::error::{Error, Result};
use crate::head::{auc, cross_entropy_graph, predict_graph, score_samples};
use crate::model::ModelState;
use crate::objectives::{subject_pretrain_loss, SubjectRng};
use crate::params::{Adam, AdamConfig, GradStore};
use crate::rng::{stream, Stream};

/// Fine-tuning learning rates tried by a grid search.
pub const FINETUNE_LR_GRID: [f64; 5] = [1e-3, 5e-4, 2e-4, 1e-4, 5e-5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::Finetune => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Linear warmup length (fine-tuning only).
    pub warmup_epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many epochs (pretraining with an output path).
    pub checkpoint_every: Option<usize>,
    /// Fraction of labeled subjects held out for model selection.
    pub val_fraction: f64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 20,
            batch_size: 16,
            base_lr: 1e-4,
            warmup_epochs: 0,
            seed,
            dropout: 0.5,
            grad_clip: Some(5.0),
            checkpoint_every: None,
            val_fraction: 0.0,
            adam: AdamConfig::default(),
        }
    }

    pub fn finetune(seed: u64) -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 50,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_epochs: 5,
            seed,
            dropout: 0.0,
            grad_clip: None,
            checkpoint_every: None,
            val_fraction: 0.2,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must lie in [0, 1)");
        }
        if self.phase == Phase::Finetune && self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs must be smaller than epochs");
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return fail("grad_clip must be > 0");
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every must be >= 1");
        }
        Ok(())
    }
}

/// Per-epoch metrics, written one JSON object per line.
///
/// `loss_ent` is the entropy term as it enters the total (sign applied), so
/// `loss_total = loss_rec + loss_cc + loss_ent` during pretraining. During
/// fine-tuning only `loss_total` (cross-entropy) and `val_auc` are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss_rec: Option<f64>,
    pub loss_cc: Option<f64>,
    pub loss_ent: Option<f64>,
    pub loss_total: f64,
    pub val_auc: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.5}"))
}

/// A shuffled group of subjects; every subject carries all of its views.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub samples: Vec<&'a MultiViewSample>,
}

/// Shuffle `pool` deterministically in `(seed, epoch)` and cut it into batches.
pub fn batch_pool<'a>(
    mut pool: Vec<&'a MultiViewSample>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Batch<'a>> {
    let batch_size = batch_size.max(1);
    pool.shuffle(&mut stream(seed, Stream::Batches, &[epoch as u64]));
    pool.chunks(batch_size)
        .map(|c| Batch { samples: c.to_vec() })
        .collect()
}

/// All subjects of all datasets, shuffled as one pool.
pub fn make_batches<'a>(datasets: &[&'a Dataset], batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch<'a>> {
    let pool = datasets.iter().flat_map(|d| d.samples.iter()).collect();
    batch_pool(pool, batch_size, seed, epoch)
}

/// Learning rate at optimizer step `step` of `total_steps`. Constant for
/// pretraining; linear warmup then cosine decay to 0 for fine-tuning.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    match cfg.phase {
        Phase::Pretrain => cfg.base_lr,
        Phase::Finetune => {
            let total = total_steps.max(1);
            let warmup = (total * cfg.warmup_epochs).div_ceil(cfg.epochs.max(1)).min(total - 1);
            if step < warmup {
                return cfg.base_lr * step as f64 / warmup as f64;
            }
            let span = total - 1 - warmup;
            let progress = if span == 0 {
                1.0
            } else {
                (step - warmup) as f64 / span as f64
            };
            cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
        }
    }
}

/// Mutable pretraining state; everything needed to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelState,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<LossReport>,
}

impl TrainState {
    pub fn new(model: ModelState, adam: AdamConfig) -> Self {
        Self {
            model,
            adam: Adam::new(adam),
            epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, adam: AdamConfig) -> Self {
        Self {
            model: ck.model,
            adam: ck.adam.unwrap_or_else(|| Adam::new(adam)),
            epoch: ck.epoch,
            history: ck.loss_history,
        }
    }

    pub fn checkpoint(&self, registry: &AtlasRegistry) -> Checkpoint {
        let atlases: Vec<Atlas> = self
            .model
            .projection_ids()
            .filter_map(|id| registry.get(id).cloned())
            .collect();
        Checkpoint {
            model: self.model.clone(),
            atlases,
            adam: Some(self.adam.clone()),
            epoch: self.epoch,
            loss_history: self.history.clone(),
        }
    }
}

fn apply_step(
    adam: &mut Adam,
    model: &mut ModelState,
    mut grads: GradStore,
    clip: Option<f64>,
    lr: f64,
    context: &dyn Fn() -> String,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("non-finite gradient at {}", context())));
    }
    if let Some(c) = clip {
        grads.clip_global_norm(c);
    }
    adam.step(&mut model.params, &grads, lr);
    Ok(())
}

/// Joint multi-view pretraining from `state.epoch` up to `cfg.epochs`.
///
/// `on_epoch` sees every epoch's report. With `out`, a checkpoint is written
/// every `cfg.checkpoint_every` epochs and after the last one.
pub fn pretrain(
    state: &mut TrainState,
    datasets: &[&Dataset],
    registry: &AtlasRegistry,
    cfg: &TrainConfig,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&LossReport),
) -> Result<()> {
    cfg.validate()?;
    if cfg.phase != Phase::Pretrain {
        return Err(Error::Config("pretrain needs phase = pretrain".into()));
    }
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(Error::Validation("pretraining needs at least one subject".into()));
    }
    for d in datasets {
        for id in &d.atlas_ids {
            state.model.check_atlas(registry.require(id)?)?;
            if !state.model.has_decoder(id) {
                return Err(Error::UnknownAtlas(id.clone()));
            }
        }
    }
    let steps_per_epoch = make_batches(datasets, cfg.batch_size, cfg.seed, 0).len();
    let total_steps = steps_per_epoch * cfg.epochs;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let batches = make_batches(datasets, cfg.batch_size, cfg.seed, epoch);
        let (mut rec_sum, mut ent_sum, mut tot_sum, mut cc_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_subj, mut n_cc) = (0usize, 0usize);
        let mut lr = cfg.base_lr;
        for (b, batch) in batches.iter().enumerate() {
            let step = epoch * steps_per_epoch + b;
            lr = lr_at(step, total_steps, cfg);
            let mut grads = GradStore::default();
            let scale = 1.0 / batch.samples.len() as f64;
            for (pos, sample) in batch.samples.iter().enumerate() {
                let ctr = [Phase::Pretrain.tag(), epoch as u64, b as u64, pos as u64];
                let mut mask_rng = stream(cfg.seed, Stream::Mask, &ctr);
                let mut drop = DropoutCtx::new(cfg.dropout, stream(cfg.seed, Stream::Dropout, &ctr));
                let mut g = Graph::new();
                let loss = subject_pretrain_loss(
                    &mut g,
                    &state.model,
                    sample,
                    registry,
                    SubjectRng {
                        mask: &mut mask_rng,
                        dropout: (cfg.dropout > 0.0).then_some(&mut drop),
                        fixed_targets: None,
                    },
                )?;
                let (rec, ent, tot) = (g.scalar(loss.rec), g.scalar(loss.entropy), g.scalar(loss.total));
                let cc = loss.cc.map(|c| g.scalar(c));
                if !tot.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "pretrain loss at epoch {epoch} batch {b} (subject `{}`): rec {rec}, cc {cc:?}, entropy {ent}",
                        sample.subject_id
                    )));
                }
                rec_sum += rec;
                ent_sum += ent;
                tot_sum += tot;
                if let Some(c) = cc {
                    cc_sum += c;
                    n_cc += 1;
                }
                n_subj += 1;
                grads.merge(&g.backward(loss.total), scale);
            }
            apply_step(&mut state.adam, &mut state.model, grads, cfg.grad_clip, lr, &|| {
                format!("epoch {epoch} batch {b}")
            })?;
        }
        let n = n_subj as f64;
        let sign = state.model.config.objective.entropy_sign;
        let report = LossReport {
            epoch: epoch + 1,
            phase: Phase::Pretrain,
            lr,
            loss_rec: Some(rec_sum / n),
            loss_cc: (n_cc > 0).then(|| cc_sum / n_cc as f64),
            loss_ent: Some(sign * ent_sum / n),
            loss_total: tot_sum / n,
            val_auc: None,
        };
        log::info!(
            "pretrain epoch {}: total {:.5} rec {:.5} cc {} ent {:.5}",
            report.epoch,
            report.loss_total,
            rec_sum / n,
            fmt_opt(report.loss_cc),
            sign * ent_sum / n
        );
        state.epoch += 1;
        state.history.push(report.clone());
        on_epoch(&report);
        if let Some(path) = out {
            let due = cfg.checkpoint_every.is_some_and(|k| state.epoch % k == 0);
            if due || state.epoch == cfg.epochs {
                state.checkpoint(registry).save(path)?;
            }
        }
    }
    Ok(())
}

/// Stratified split of sample indices into `(train, val)`; each class
/// contributes `round(val_fraction * n_class)` validation subjects.
pub fn stratified_split(labels: &[usize], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == c).collect();
        idx.shuffle(&mut stream(seed, Stream::Split, &[c as u64]));
        let k = (val_fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters at the best validation epoch (last epoch without validation).
    pub model: ModelState,
    pub history: Vec<LossReport>,
    /// 1-based epoch of the selected parameters.
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    /// Subjects dropped because they lack a requested view.
    pub skipped: usize,
    pub n_train: usize,
    pub n_val: usize,
}

/// Register any unseen atlas of the subset and attach a fresh classifier head.
pub fn prepare_for_finetune(
    model: &mut ModelState,
    atlas_subset: &[String],
    registry: &AtlasRegistry,
    num_classes: usize,
) -> Result<()> {
    if atlas_subset.is_empty() {
        return Err(Error::Config("atlas subset is empty".into()));
    }
    for id in atlas_subset {
        let atlas = registry.require(id)?;
        if model.register_atlas(atlas, false) {
            log::info!("registered new projection for atlas `{id}`");
        }
        model.check_atlas(atlas)?;
    }
    model.init_head(num_classes);
    Ok(())
}

/// Fine-tune on an explicit train/validation split. The model must already
/// have a head and projections for the subset (see [`prepare_for_finetune`]).
pub fn finetune_split(
    mut model: ModelState,
    train: &[&MultiViewSample],
    val: &[&MultiViewSample],
    registry: &AtlasRegistry,
    atlas_subset: &[String],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Finetune {
        return Err(Error::Config("finetune needs phase = finetune".into()));
    }
    if train.is_empty() {
        return Err(Error::Validation("no training subjects".into()));
    }
    let mut adam = Adam::new(cfg.adam);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let val_classes: std::collections::BTreeSet<usize> = val.iter().filter_map(|s| s.label).collect();
    let use_val = val_classes.len() >= 2;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;
    for epoch in 0..cfg.epochs {
        let batches = batch_pool(train.to_vec(), cfg.batch_size, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let step = epoch * steps_per_epoch + b;
            lr = lr_at(step, total_steps, cfg);
            let mut grads = GradStore::default();
            let scale = 1.0 / batch.samples.len() as f64;
            for (pos, sample) in batch.samples.iter().enumerate() {
                let label = sample.label.ok_or_else(|| {
                    Error::Validation(format!("subject `{}` has no label", sample.subject_id))
                })?;
                let ctr = [Phase::Finetune.tag(), epoch as u64, b as u64, pos as u64];
                let mut drop = DropoutCtx::new(cfg.dropout, stream(cfg.seed, Stream::Dropout, &ctr));
                let mut g = Graph::new();
                let logits = predict_graph(
                    &mut g,
                    &model,
                    sample,
                    atlas_subset,
                    registry,
                    (cfg.dropout > 0.0).then_some(&mut drop),
                )?;
                let ce = cross_entropy_graph(&mut g, logits, label)?;
                let v = g.scalar(ce);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "fine-tune loss at epoch {epoch} batch {b} (subject `{}`)",
                        sample.subject_id
                    )));
                }
                loss_sum += v;
                grads.merge(&g.backward(ce), scale);
            }
            apply_step(&mut adam, &mut model, grads, cfg.grad_clip, lr, &|| {
                format!("epoch {epoch} batch {b}")
            })?;
        }
        let val_auc = if use_val {
            let (probs, labels, _) = score_samples(&model, val, atlas_subset, registry)?;
            Some(auc(&probs, &labels)?.auc)
        } else {
            None
        };
        let report = LossReport {
            epoch: epoch + 1,
            phase: Phase::Finetune,
            lr,
            loss_rec: None,
            loss_cc: None,
            loss_ent: None,
            loss_total: loss_sum / train.len() as f64,
            val_auc,
        };
        log::info!(
            "finetune epoch {}: ce {:.5} val_auc {}",
            report.epoch,
            report.loss_total,
            fmt_opt(val_auc)
        );
        history.push(report);
        let score = val_auc.unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some((s, _, _)) => score > *s || (!use_val),
        };
        if better {
            best = Some((score, epoch + 1, model.clone()));
        }
    }
    let (score, best_epoch, model) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        model,
        history,
        best_epoch,
        best_val_auc: use_val.then_some(score),
        skipped: 0,
        n_train: train.len(),
        n_val: val.len(),
    })
}

/// Fine-tune a (pretrained) model on a labeled dataset restricted to
/// `atlas_subset`, with a seeded stratified validation split.
pub fn finetune(
    mut model: ModelState,
    dataset: &Dataset,
    registry: &AtlasRegistry,
    atlas_subset: &[String],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let num_classes = dataset
        .num_classes
        .ok_or_else(|| Error::Validation(format!("dataset `{}` has no num_classes", dataset.name)))?;
    let usable: Vec<&MultiViewSample> = dataset
        .samples
        .iter()
        .filter(|s| atlas_subset.iter().all(|a| s.views.contains_key(a)))
        .collect();
    let skipped = dataset.samples.len() - usable.len();
    if skipped > 0 {
        log::warn!("finetune: skipped {skipped} subjects missing a view of {atlas_subset:?}");
    }
    if usable.is_empty() {
        return Err(Error::Validation(format!(
            "no subject of `{}` has all atlases {atlas_subset:?}",
            dataset.name
        )));
    }
    let labels: Vec<usize> = usable
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Validation(format!("subject `{}` has no label", s.subject_id)))
        })
        .collect::<Result<_>>()?;
    prepare_for_finetune(&mut model, atlas_subset, registry, num_classes)?;
    let (tr, va) = stratified_split(&labels, cfg.val_fraction, cfg.seed);
    let train: Vec<&MultiViewSample> = tr.iter().map(|i| usable[*i]).collect();
    let val: Vec<&MultiViewSample> = va.iter().map(|i| usable[*i]).collect();
    let mut out = finetune_split(model, &train, &val, registry, atlas_subset, cfg)?;
    out.skipped = skipped;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub lr: f64,
    pub best_val_auc: Option<f64>,
    pub best_epoch: usize,
}

/// Fine-tune once per learning rate and keep the run with the best
/// validation AUC (earliest on ties).
pub fn finetune_grid(
    model: &ModelState,
    dataset: &Dataset,
    registry: &AtlasRegistry,
    atlas_subset: &[String],
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<(Vec<GridRun>, usize, FinetuneOutcome)> {
    if grid.is_empty() {
        return Err(Error::Config("empty learning-rate grid".into()));
    }
    let mut runs = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, FinetuneOutcome)> = None;
    for (i, &lr) in grid.iter().enumerate() {
        let c = TrainConfig {
            base_lr: lr,
            ..cfg.clone()
        };
        let out = finetune(model.clone(), dataset, registry, atlas_subset, &c)?;
        log::info!("lr {lr:e}: best val auc {} at epoch {}", fmt_opt(out.best_val_auc), out.best_epoch);
        runs.push(GridRun {
            lr,
            best_val_auc: out.best_val_auc,
            best_epoch: out.best_epoch,
        });
        let key = |o: &FinetuneOutcome| o.best_val_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(_, b)| key(&out) > key(b)) {
            best = Some((i, out));
        }
    }
    let (selected, outcome) = best.expect("nonempty grid");
    Ok((runs, selected, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::synth_atlas;
    use crate::config::ModelConfig;
    use crate::connectome::Connectome;
    use ndarray::Array2;

    fn tiny_dataset(name: &str, prefix: &str, n: usize, atlases: &[&Atlas], reg: &AtlasRegistry) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let id = format!("{prefix}{i}");
                let views = atlases
                    .iter()
                    .map(|a| Connectome::new(id.clone(), a.id(), Array2::eye(a.roi_count())).unwrap())
                    .collect();
                MultiViewSample::new(id, views, Some(i % 2)).unwrap()
            })
            .collect();
        Dataset::new(name, samples, Some(2), reg).unwrap()
    }

    #[test]
    fn batches_partition_subjects() {
        let a = synth_atlas("A", 4, 1).unwrap();
        let b = synth_atlas("B", 5, 1).unwrap();
        let c = synth_atlas("C", 6, 1).unwrap();
        let reg = AtlasRegistry::from_atlases([a.clone(), b.clone(), c.clone()]).unwrap();
        let d1 = tiny_dataset("d1", "x", 3, &[&a, &b, &c], &reg);
        let d2 = tiny_dataset("d2", "y", 3, &[&a], &reg);
        let batches = make_batches(&[&d1, &d2], 4, 7, 0);
        assert_eq!(batches.iter().map(|b| b.samples.len()).collect::<Vec<_>>(), vec![4, 2]);
        let mut ids: Vec<&str> = batches
            .iter()
            .flat_map(|b| b.samples.iter().map(|s| s.subject_id.as_str()))
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, vec!["x0", "x1", "x2", "y0", "y1", "y2"]);
        for b in &batches {
            for s in &b.samples {
                if s.subject_id.starts_with('x') {
                    assert_eq!(s.views.len(), 3);
                }
            }
        }
        let again = make_batches(&[&d1, &d2], 4, 7, 0);
        let order = |bs: &[Batch]| -> Vec<String> {
            bs.iter().flat_map(|b| b.samples.iter().map(|s| s.subject_id.clone())).collect()
        };
        assert_eq!(order(&batches), order(&again));
    }

    #[test]
    fn lr_schedule_endpoints() {
        let p = TrainConfig::pretrain(0);
        assert_eq!(lr_at(0, 100, &p), 1e-4);
        assert_eq!(lr_at(99, 100, &p), 1e-4);
        let mut f = TrainConfig::finetune(0);
        f.base_lr = 1e-3;
        let total = 50 * 4;
        let warm = 5 * 4;
        assert_eq!(lr_at(0, total, &f), 0.0);
        assert!((lr_at(warm, total, &f) - 1e-3).abs() < 1e-15);
        assert!(lr_at(total - 1, total, &f) <= 1e-6);
        let mut prev = f64::INFINITY;
        for s in warm..total {
            let v = lr_at(s, total, &f);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn stratified_split_is_balanced_and_disjoint() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let (tr, va) = stratified_split(&labels, 0.2, 3);
        assert_eq!(va.len(), 4);
        assert_eq!(va.iter().filter(|i| labels[**i] == 1).count(), 2);
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!(tr.len() + va.len(), 20);
        assert_eq!(stratified_split(&labels, 0.2, 3), (tr, va));
    }

    #[test]
    fn single_view_pretraining_reports_no_consistency() {
        let a = synth_atlas("A", 6, 1).unwrap();
        let reg = AtlasRegistry::from_atlases([a.clone()]).unwrap();
        let d = tiny_dataset("d", "s", 4, &[&a], &reg);
        let m = ModelState::new(ModelConfig::toy(), [&a], 0).unwrap();
        let mut st = TrainState::new(m, AdamConfig::default());
        let mut cfg = TrainConfig::pretrain(1);
        cfg.epochs = 2;
        cfg.batch_size = 3;
        pretrain(&mut st, &[&d], &reg, &cfg, None, &mut |_| {}).unwrap();
        assert_eq!(st.history.len(), 2);
        assert!(st.history.iter().all(|r| r.loss_cc.is_none()));
    }

    #[test]
    fn unregistered_atlas_is_rejected() {
        let a = synth_atlas("A", 6, 1).unwrap();
        let b = synth_atlas("B", 6, 2).unwrap();
        let reg = AtlasRegistry::from_atlases([a.clone(), b.clone()]).unwrap();
        let d = tiny_dataset("d", "s", 2, &[&b], &reg);
        let m = ModelState::new(ModelConfig::toy(), [&a], 0).unwrap();
        let mut st = TrainState::new(m, AdamConfig::default());
        let r = pretrain(&mut st, &[&d], &reg, &TrainConfig::pretrain(0), None, &mut |_| {});
        assert!(matches!(r, Err(Error::UnknownAtlas(_))));
    }

    #[test]
    fn finetune_skips_and_fails_when_all_skipped() {
        let a = synth_atlas("A", 6, 1).unwrap();
        let b = synth_atlas("B", 6, 2).unwrap();
        let reg = AtlasRegistry::from_atlases([a.clone(), b.clone()]).unwrap();
        let d = tiny_dataset("d", "s", 4, &[&a], &reg);
        let m = ModelState::new(ModelConfig::toy(), [&a], 0).unwrap();
        let mut cfg = TrainConfig::finetune(0);
        cfg.epochs = 2;
        cfg.warmup_epochs = 1;
        let r = finetune(m, &d, &reg, &["B".into()], &cfg);
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
