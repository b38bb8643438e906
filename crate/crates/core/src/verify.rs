//! Self-check suite on toy configurations: gradient checks and structural
//! invariants. Backs the `verify` command.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::atlas::{synth_atlas, Atlas, AtlasRegistry};
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::connectome::{load_dataset, save_dataset, synth_generate, Connectome, Dataset, SynthConfig};
use crate::encoder::{bias_profile, distance_bias, encode, encode_with_attention};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::head::{cross_entropy_graph, predict_graph};
use crate::model::{names, BiasHead, ModelState};
use crate::objectives::{mask_split, masked_reconstruction_graph, subject_pretrain_loss, SubjectRng};
use crate::params::{AdamConfig, GradStore, ParamStore};
use crate::rng::{stream, Stream};
use crate::train::{pretrain, TrainConfig, TrainState};

/// Two small atlases, a toy model over both, and a labeled two-view dataset.
pub struct ToyFixture {
    pub registry: AtlasRegistry,
    pub model: ModelState,
    pub dataset: Dataset,
}

pub fn toy_synth_config(atlases: &[&str], subjects_per_class: usize) -> SynthConfig {
    SynthConfig {
        name: "toy".into(),
        atlases: atlases.iter().map(|s| s.to_string()).collect(),
        subjects_per_class,
        num_classes: 2,
        communities: 3,
        within: 0.5,
        between: 0.05,
        noise: 0.3,
        class_effect: 0.3,
        center_jitter: 8.0,
        latent_modes: 4,
        signal: crate::connectome::SignalMode::Shared,
    }
}

/// Toy atlases live in a unit-scale box (coordinates divided by 50) so a
/// fixed finite-difference step resolves the Fourier phases; the connectivity
/// data is generated on the millimetre-scale originals.
pub fn toy_fixture(seed: u64) -> Result<ToyFixture> {
    let a = synth_atlas("toyA", 6, seed)?;
    let b = synth_atlas("toyB", 8, seed.wrapping_add(1))?;
    let mm = AtlasRegistry::from_atlases([a.clone(), b.clone()])?;
    let dataset = synth_generate(&toy_synth_config(&["toyA", "toyB"], 2), seed, &mm)?;
    let shrink = |x: &Atlas| Atlas::new(x.id(), x.roi_names().to_vec(), x.coords() / 50.0);
    let (a, b) = (shrink(&a)?, shrink(&b)?);
    let registry = AtlasRegistry::from_atlases([a.clone(), b.clone()])?;
    let model = ModelState::new(ModelConfig::toy(), [&a, &b], seed)?;
    Ok(ToyFixture {
        registry,
        model,
        dataset,
    })
}

/// Add `N(0, std^2)` noise to every parameter: moves a freshly initialized
/// model (tiny attention outputs feeding layer norms) to a generic point
/// where a fixed finite-difference step is well inside the smooth regime.
pub fn perturb_params(params: &ParamStore, std: f64, seed: u64) -> ParamStore {
    let mut out = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let mut rng = stream(seed, Stream::Init, &[crate::rng::hash_str(&name), 1]);
        let noise = crate::params::normal_matrix(1, out.get(&name).expect("listed").len(), std, &mut rng);
        let m = out.get_mut(&name).expect("listed");
        for (v, n) in m.iter_mut().zip(noise.iter()) {
            *v += n;
        }
    }
    out
}

/// Which pretraining component a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Reconstruction,
    Consistency,
    Entropy,
    Total,
}

/// Per-subject reconstruction targets, keyed by atlas.
pub type Targets = Vec<BTreeMap<String, Array2<f64>>>;

/// Mean over subjects of one pretraining component, with fixed masks and no
/// dropout. With `targets`, reconstruction targets are held at those values;
/// the targets actually used are returned either way.
pub fn pretrain_component(
    model: &ModelState,
    params: &ParamStore,
    dataset: &Dataset,
    registry: &AtlasRegistry,
    component: Component,
    targets: Option<&Targets>,
) -> Result<(f64, GradStore, Targets)> {
    let mut m = model.clone();
    m.params = params.clone();
    let mut grads = GradStore::default();
    let mut total = 0.0;
    let mut used = Vec::with_capacity(dataset.len());
    let scale = 1.0 / dataset.samples.len() as f64;
    for (i, s) in dataset.samples.iter().enumerate() {
        let mut g = Graph::new();
        let mut mask = stream(11, Stream::Mask, &[i as u64]);
        let l = subject_pretrain_loss(
            &mut g,
            &m,
            s,
            registry,
            SubjectRng {
                mask: &mut mask,
                dropout: None,
                fixed_targets: targets.map(|t| &t[i]),
            },
        )?;
        let v = match component {
            Component::Reconstruction => l.rec,
            Component::Consistency => l.cc.ok_or_else(|| Error::Contract("single-view subject".into()))?,
            Component::Entropy => l.entropy,
            Component::Total => l.total,
        };
        total += g.scalar(v) * scale;
        grads.merge(&g.backward(v), scale);
        used.push(l.targets);
    }
    Ok((total, grads, used))
}

/// Mean fine-tuning cross-entropy over the dataset using both atlases.
pub fn finetune_loss(
    model: &ModelState,
    params: &ParamStore,
    dataset: &Dataset,
    registry: &AtlasRegistry,
    atlases: &[String],
) -> Result<(f64, GradStore)> {
    let mut m = model.clone();
    m.params = params.clone();
    let mut grads = GradStore::default();
    let mut total = 0.0;
    let scale = 1.0 / dataset.samples.len() as f64;
    for s in &dataset.samples {
        let mut g = Graph::new();
        let logits = predict_graph(&mut g, &m, s, atlases, registry, None)?;
        let ce = cross_entropy_graph(&mut g, logits, s.label.unwrap_or(0))?;
        total += g.scalar(ce) * scale;
        grads.merge(&g.backward(ce), scale);
    }
    Ok((total, grads))
}

/// Noise added to the toy parameters before gradient checks.
pub const GRAD_CHECK_PERTURBATION: f64 = 0.3;

/// Gradient checks of every loss component on the toy fixture at a perturbed
/// parameter point. Returns one report per component name.
pub fn gradient_reports(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    let fx = toy_fixture(seed)?;
    let mut model = fx.model.clone();
    model.init_head(2);
    model.params = perturb_params(&model.params, GRAD_CHECK_PERTURBATION, seed);
    let mut out = Vec::new();
    for (name, c) in [
        ("reconstruction", Component::Reconstruction),
        ("consistency", Component::Consistency),
        ("entropy", Component::Entropy),
    ] {
        let (_, _, targets) = pretrain_component(&model, &model.params, &fx.dataset, &fx.registry, c, None)?;
        let r = grad_check(&model.params, opts, |p| {
            pretrain_component(&model, p, &fx.dataset, &fx.registry, c, Some(&targets)).map(|(l, g, _)| (l, g))
        })?;
        out.push((name.to_string(), r));
    }
    let atlases: Vec<String> = vec!["toyA".into(), "toyB".into()];
    let r = grad_check(&model.params, opts, |p| {
        finetune_loss(&model, p, &fx.dataset, &fx.registry, &atlases)
    })?;
    out.push(("cross_entropy".into(), r));
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn random_symmetric(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut x = Array2::eye(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.random_range(-1.0..1.0);
            x[[i, j]] = v;
            x[[j, i]] = v;
        }
    }
    x
}

/// Entries checked per parameter matrix by the quick suite (evenly strided,
/// so every matrix of every group is still covered).
pub const VERIFY_MAX_ENTRIES: usize = 12;

fn check_gradients() -> Result<(bool, String)> {
    let opts = GradCheckOptions {
        max_entries: Some(VERIFY_MAX_ENTRIES),
        ..Default::default()
    };
    let reports = gradient_reports(0, &opts)?;
    let mut worst = (0.0f64, String::new());
    for (name, r) in &reports {
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, format!("{name}/{}", r.worst_group));
        }
    }
    Ok((worst.0 < 1e-3, format!("max rel err {:.2e} ({})", worst.0, worst.1)))
}

fn check_attention_rows() -> Result<(bool, String)> {
    let fx = toy_fixture(1)?;
    let mut rng = stream(1, Stream::Permutation, &[]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        for atlas in fx.registry.iter() {
            let x = Connectome::new("s", atlas.id(), random_symmetric(atlas.roi_count(), &mut rng))?;
            let (_, attn) = encode_with_attention(&x, atlas, &fx.model)?;
            for m in attn.iter().flatten() {
                for r in m.rows() {
                    worst = worst.max((r.sum() - 1.0).abs());
                }
            }
        }
    }
    Ok((worst < 1e-6, format!("max |row sum - 1| = {worst:.1e}")))
}

fn check_bias_symmetry_and_totality() -> Result<(bool, String)> {
    let a = synth_atlas("s", 9, 2)?;
    let mut rng = stream(2, Stream::Permutation, &[]);
    for _ in 0..100 {
        let h = BiasHead::from_raw(
            rng.random_range(-30.0..30.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-30.0..30.0),
            rng.random_range(-30.0..30.0),
        );
        if !(h.alpha > 0.0 && h.mu_tilde > 0.0 && h.mu_tilde < 1.0 && h.sigma_tilde > 0.0) {
            return Ok((false, format!("constraint violated: {h:?}")));
        }
        let b = distance_bias(&a, &h);
        if b != b.t() {
            return Ok((false, "bias matrix not symmetric".into()));
        }
    }
    Ok((true, "100 random heads".into()))
}

/// Normalized distance maximizing the bias profile on a dense grid of `[0, 1]`.
pub fn normalized_peak(atlas: &Atlas, head: &BiasHead, grid: usize) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=grid {
        let d = atlas.dis_max() * i as f64 / grid as f64;
        let mu = head.mu_tilde * atlas.dis_max();
        let sigma = head.sigma_tilde * atlas.dis_max();
        let v = head.alpha * (-(d - mu).powi(2) / (2.0 * sigma * sigma)) + head.beta;
        if v > best.0 {
            best = (v, d / atlas.dis_max());
        }
    }
    best.1
}

fn check_peak_consistency() -> Result<(bool, String)> {
    let fx = toy_fixture(3)?;
    let a = fx.registry.get("toyA").expect("fixture atlas");
    let b = fx.registry.get("toyB").expect("fixture atlas");
    let mut worst = 0.0f64;
    for l in 0..fx.model.config.encoder.layers {
        for h in 0..fx.model.config.encoder.heads {
            let head = fx.model.bias_head(l, h);
            worst = worst.max((normalized_peak(a, &head, 100_000) - normalized_peak(b, &head, 100_000)).abs());
            let t = head.mu_tilde;
            worst = worst.max((bias_profile(&head, t) - head.beta).abs());
        }
    }
    Ok((worst < 1e-6, format!("max peak disagreement {worst:.1e}")))
}

/// Encode a permuted copy of `(X, C, W^a)` and return the max deviation from
/// the permuted original output.
pub fn permutation_deviation(model: &ModelState, atlas: &Atlas, x: &Array2<f64>, perm: &[usize]) -> Result<f64> {
    let n = atlas.roi_count();
    let base = encode(&Connectome::new("s", atlas.id(), x.clone())?, atlas, model, None)?;
    let px = Array2::from_shape_fn((n, n), |(i, j)| x[[perm[i], perm[j]]]);
    let coords = Array2::from_shape_fn((n, 3), |(i, k)| atlas.coords()[[perm[i], k]]);
    let names_p: Vec<String> = perm.iter().map(|i| atlas.roi_names()[*i].clone()).collect();
    let pa = Atlas::new(atlas.id(), names_p, coords)?;
    let mut pm = model.clone();
    let w = model.params.get(&names::atlas_proj(atlas.id())).expect("registered");
    let pw = Array2::from_shape_fn(w.dim(), |(i, j)| w[[perm[i], j]]);
    pm.params.insert(names::atlas_proj(atlas.id()), pw);
    let out = encode(&Connectome::new("s", atlas.id(), px)?, &pa, &pm, None)?;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..base.ncols() {
            worst = worst.max((out[[i, j]] - base[[perm[i], j]]).abs());
        }
    }
    Ok(worst)
}

fn check_permutation() -> Result<(bool, String)> {
    let a = synth_atlas("perm", 10, 4)?;
    let m = ModelState::new(ModelConfig::toy(), [&a], 4)?;
    let mut rng = stream(4, Stream::Permutation, &[]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = random_symmetric(10, &mut rng);
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(&mut rng);
        worst = worst.max(permutation_deviation(&m, &a, &x, &perm)?);
    }
    Ok((worst < 1e-5, format!("max deviation {worst:.1e}")))
}

fn check_mask_locality() -> Result<(bool, String)> {
    let fx = toy_fixture(5)?;
    let n = fx.model.config.align.n_super;
    let d = fx.model.config.encoder.dim;
    let mut rng = stream(5, Stream::Permutation, &[]);
    for _ in 0..20 {
        let plan = mask_split(n, 0.4, &mut rng)?;
        let h = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        let mut t2 = h.clone();
        for &i in &plan.keep {
            t2.row_mut(i).mapv_inplace(|v| v + 7.5);
        }
        let eval = |t: &Array2<f64>| -> Result<f64> {
            let mut g = Graph::new();
            let hv = g.constant(h.clone());
            let tv = g.constant(t.clone());
            let l = masked_reconstruction_graph(&mut g, &fx.model, "toyA", hv, tv, &plan)?;
            Ok(g.scalar(l))
        };
        if eval(&h)? != eval(&t2)? {
            return Ok((false, "loss moved when unmasked targets changed".into()));
        }
    }
    Ok((true, "20 random plans, exact equality".into()))
}

fn check_determinism_and_round_trip() -> Result<(bool, String)> {
    let fx = toy_fixture(6)?;
    let mut cfg = TrainConfig::pretrain(6);
    cfg.epochs = 2;
    cfg.batch_size = 2;
    let run = || -> Result<TrainState> {
        let mut st = TrainState::new(fx.model.clone(), AdamConfig::default());
        pretrain(&mut st, &[&fx.dataset], &fx.registry, &cfg, None, &mut |_| {})?;
        Ok(st)
    };
    let (s1, s2) = (run()?, run()?);
    if s1.model.params != s2.model.params {
        return Ok((false, "two identical runs diverged".into()));
    }
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let p = dir.path().join("m.ckpt");
    s1.checkpoint(&fx.registry).save(&p)?;
    let back = Checkpoint::load(&p)?;
    let atlas = fx.registry.get("toyB").expect("fixture atlas");
    let x = fx.dataset.samples[0].view("toyB")?;
    let e1 = encode(x, atlas, &s1.model, None)?;
    let e2 = encode(x, atlas, &back.model, None)?;
    if e1.iter().zip(e2.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Ok((false, "checkpoint round trip changed the forward pass".into()));
    }
    let ddir = dir.path().join("data");
    save_dataset(&fx.dataset, &ddir)?;
    if load_dataset(&ddir, &fx.registry)? != fx.dataset {
        return Ok((false, "dataset round trip is not exact".into()));
    }
    Ok((true, "runs, checkpoint and dataset are bitwise stable".into()))
}

type Check = fn() -> Result<(bool, String)>;

/// Run every check; errors count as failures.
pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&str, Check); 8] = [
        ("gradients (all losses, all groups)", check_gradients),
        ("attention rows are distributions", check_attention_rows),
        ("bias symmetry and parametrization", check_bias_symmetry_and_totality),
        ("bias peak agrees across atlases", check_peak_consistency),
        ("permutation equivariance", check_permutation),
        ("masked loss locality", check_mask_locality),
        ("determinism and round trips", check_determinism_and_round_trip),
        ("cross-entropy oracle", || {
            let v = crate::head::cross_entropy(&[1.0, 2.0, 3.0], 2)?;
            let direct = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
            Ok(((v - direct).abs() < 1e-9, format!("{v:.12}")))
        }),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name: name.to_string(),
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_builds() {
        let fx = toy_fixture(0).unwrap();
        assert_eq!(fx.dataset.len(), 4);
        assert!(fx.dataset.samples.iter().all(|s| s.views.len() == 2));
    }

    #[test]
    fn structural_checks_pass() {
        for f in [
            check_attention_rows as Check,
            check_bias_symmetry_and_totality,
            check_peak_consistency,
            check_permutation,
            check_mask_locality,
            check_determinism_and_round_trip,
        ] {
            let (ok, detail) = f().unwrap();
            assert!(ok, "{detail}");
        }
    }
}
