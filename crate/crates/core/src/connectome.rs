//! Connectivity matrices, multi-view subjects and datasets: construction,
//! validation, on-disk format and the synthetic multi-view generator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::atlas::{Atlas, AtlasRegistry};
use crate::error::{Error, Result};
use crate::io::{json_parse_error, read_to_string, write_atomic, write_json_atomic};
use crate::rng::{stream, Stream};

const SYM_TOL: f64 = 1e-6;

/// One subject's connectivity matrix under one atlas.
#[derive(Debug, Clone, PartialEq)]
pub struct Connectome {
    pub subject_id: String,
    pub atlas_id: String,
    matrix: Array2<f64>,
}

impl Connectome {
    pub fn new(
        subject_id: impl Into<String>,
        atlas_id: impl Into<String>,
        matrix: Array2<f64>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let atlas_id = atlas_id.into();
        let (r, c) = matrix.dim();
        let ctx = || format!("subject `{subject_id}`, atlas `{atlas_id}`");
        if r != c || r == 0 {
            return Err(Error::Shape(format!("{}: matrix is {r} x {c}", ctx())));
        }
        for i in 0..r {
            if (matrix[[i, i]] - 1.0).abs() > SYM_TOL {
                return Err(Error::Validation(format!(
                    "{}: diagonal entry {i} is {} (expected 1)",
                    ctx(),
                    matrix[[i, i]]
                )));
            }
            for j in 0..r {
                let v = matrix[[i, j]];
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!(
                        "{}: entry ({i},{j}) = {v} outside [-1, 1]",
                        ctx()
                    )));
                }
                if (v - matrix[[j, i]]).abs() > SYM_TOL {
                    return Err(Error::Validation(format!(
                        "{}: matrix not symmetric at ({i},{j})",
                        ctx()
                    )));
                }
            }
        }
        Ok(Self {
            subject_id,
            atlas_id,
            matrix,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn roi_count(&self) -> usize {
        self.matrix.nrows()
    }
}

/// All views of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSample {
    pub subject_id: String,
    pub views: BTreeMap<String, Connectome>,
    pub label: Option<usize>,
}

impl MultiViewSample {
    pub fn new(
        subject_id: impl Into<String>,
        views: Vec<Connectome>,
        label: Option<usize>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if views.is_empty() {
            return Err(Error::Validation(format!("subject `{subject_id}` has no views")));
        }
        let mut map = BTreeMap::new();
        for v in views {
            if v.subject_id != subject_id {
                return Err(Error::Validation(format!(
                    "view of subject `{}` attached to subject `{subject_id}`",
                    v.subject_id
                )));
            }
            let key = v.atlas_id.clone();
            if map.insert(key.clone(), v).is_some() {
                return Err(Error::Validation(format!(
                    "subject `{subject_id}` has two views for atlas `{key}`"
                )));
            }
        }
        Ok(Self {
            subject_id,
            views: map,
            label,
        })
    }

    pub fn view(&self, atlas_id: &str) -> Result<&Connectome> {
        self.views.get(atlas_id).ok_or_else(|| Error::MissingView {
            subject: self.subject_id.clone(),
            atlas: atlas_id.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<MultiViewSample>,
    pub atlas_ids: BTreeSet<String>,
    pub num_classes: Option<usize>,
}

impl Dataset {
    /// Validate samples against the registry and the class count.
    pub fn new(
        name: impl Into<String>,
        samples: Vec<MultiViewSample>,
        num_classes: Option<usize>,
        registry: &AtlasRegistry,
    ) -> Result<Self> {
        let name = name.into();
        let mut atlas_ids = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for s in &samples {
            if !ids.insert(s.subject_id.as_str()) {
                return Err(Error::Validation(format!(
                    "dataset `{name}`: duplicate subject `{}`",
                    s.subject_id
                )));
            }
            for (aid, view) in &s.views {
                let atlas = registry.require(aid)?;
                if atlas.roi_count() != view.roi_count() {
                    return Err(Error::Shape(format!(
                        "subject `{}`, atlas `{aid}`: matrix is {1} x {1} but atlas has {2} ROIs",
                        s.subject_id,
                        view.roi_count(),
                        atlas.roi_count()
                    )));
                }
                atlas_ids.insert(aid.clone());
            }
            if let (Some(k), Some(label)) = (num_classes, s.label) {
                if label >= k {
                    return Err(Error::Validation(format!(
                        "subject `{}` has label {label} but num_classes = {k}",
                        s.subject_id
                    )));
                }
            }
        }
        Ok(Self {
            name,
            samples,
            atlas_ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<_> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let atlas_ids = samples
            .iter()
            .flat_map(|s| s.views.keys().cloned())
            .collect();
        Dataset {
            name: self.name.clone(),
            samples,
            atlas_ids,
            num_classes: self.num_classes,
        }
    }

    /// Copy keeping only the listed atlases in every sample; samples left
    /// without views are dropped.
    pub fn restrict_atlases(&self, keep: &[&str]) -> Dataset {
        let samples: Vec<_> = self
            .samples
            .iter()
            .filter_map(|s| {
                let views: BTreeMap<_, _> = s
                    .views
                    .iter()
                    .filter(|(k, _)| keep.contains(&k.as_str()))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                (!views.is_empty()).then(|| MultiViewSample {
                    subject_id: s.subject_id.clone(),
                    views,
                    label: s.label,
                })
            })
            .collect();
        let atlas_ids = samples
            .iter()
            .flat_map(|s| s.views.keys().cloned())
            .collect();
        Dataset {
            name: self.name.clone(),
            samples,
            atlas_ids,
            num_classes: self.num_classes,
        }
    }
}

/// Pearson correlation between the rows of an `N x T` time-series matrix.
pub fn pearson_connectivity(timeseries: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, t) = timeseries.dim();
    if t < 2 {
        return Err(Error::Shape(format!("need at least 2 time points, got {t}")));
    }
    let mut centered = timeseries.clone();
    let mut norms = vec![0.0; n];
    for (i, mut row) in centered.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / t as f64;
        row.mapv_inplace(|v| v - mean);
        let ss = row.iter().map(|v| v * v).sum::<f64>();
        if ss <= 0.0 || !ss.is_finite() {
            return Err(Error::ZeroVariance { roi: i });
        }
        norms[i] = ss.sqrt();
    }
    let mut x = centered.dot(&centered.t());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let v = x[[i, j]] / (norms[i] * norms[j]);
            worst = worst.max(v.abs() - 1.0);
            x[[i, j]] = v.clamp(-1.0, 1.0);
        }
        x[[i, i]] = 1.0;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (x[[i, j]] + x[[j, i]]);
            x[[i, j]] = v;
            x[[j, i]] = v;
        }
    }
    if worst > 1e-6 {
        warn!("pearson_connectivity clamped a value exceeding 1 by {worst:e}");
    }
    Ok(x)
}

/// Binary adjacency: `Z_ij = 1` iff `i != j` and `X_ij > tau`
/// (or `|X_ij| > tau` with `absolute`).
pub fn threshold_adjacency(x: &Array2<f64>, tau: f64, absolute: bool) -> Result<Array2<f64>> {
    let (r, c) = x.dim();
    if r != c {
        return Err(Error::Shape(format!("adjacency source is {r} x {c}")));
    }
    Ok(Array2::from_shape_fn((r, c), |(i, j)| {
        let v = if absolute { x[[i, j]].abs() } else { x[[i, j]] };
        if i != j && v > tau {
            1.0
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestSubject {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub views: BTreeMap<String, String>,
}

/// Render a matrix as headerless CSV using shortest round-trip float formatting.
pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 20);
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), line + 1),
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(rec.len());
        for (field, text) in rec.iter().enumerate() {
            let v: f64 = text.parse().map_err(|_| Error::Parse {
                location: format!("{}:{}:field {}", path.display(), line + 1, field + 1),
                message: format!("`{text}` is not a number"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!(
            "{}: expected a square matrix, got {n} rows with lengths {:?}",
            path.display(),
            rows.iter().map(Vec::len).collect::<BTreeSet<_>>()
        )));
    }
    Ok(Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("square"))
}

/// Load a dataset directory (`manifest.json` plus CSV matrices) and validate
/// every matrix against its atlas.
pub fn load_dataset(dir: &Path, registry: &AtlasRegistry) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| json_parse_error(&manifest_path, e))?;
    let mut samples = Vec::with_capacity(manifest.subjects.len());
    for subj in &manifest.subjects {
        let mut views = Vec::new();
        for (aid, rel) in &subj.views {
            let path = dir.join(rel);
            if !path.exists() {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                ));
            }
            let m = read_matrix_csv(&path)?;
            let atlas = registry.require(aid)?;
            if m.nrows() != atlas.roi_count() {
                return Err(Error::Shape(format!(
                    "{0}: subject `{1}` atlas `{aid}` matrix is {2} x {2}, atlas has {3} ROIs",
                    path.display(),
                    subj.id,
                    m.nrows(),
                    atlas.roi_count()
                )));
            }
            let c = Connectome::new(subj.id.clone(), aid.clone(), m).map_err(|e| match e {
                Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
                other => other,
            })?;
            views.push(c);
        }
        samples.push(MultiViewSample::new(subj.id.clone(), views, subj.label)?);
    }
    Dataset::new(manifest.name, samples, manifest.num_classes, registry)
}

/// Write a dataset in the directory format read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let mut views = BTreeMap::new();
        for (aid, c) in &s.views {
            let rel = format!("{}__{}.csv", s.subject_id, aid);
            write_atomic(&dir.join(&rel), matrix_to_csv(c.matrix()).as_bytes())?;
            views.insert(aid.clone(), rel);
        }
        subjects.push(ManifestSubject {
            id: s.subject_id.clone(),
            label: s.label,
            views,
        });
    }
    let manifest = Manifest {
        name: dataset.name.clone(),
        num_classes: dataset.num_classes,
        subjects,
    };
    write_json_atomic(&dir.join("manifest.json"), &manifest)
}

/// How the class signal is distributed over a subject's views.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SignalMode {
    /// Every view carries the full class perturbation.
    Shared,
    /// Binary tasks only: the signed class signal `s = +-1` is split as
    /// `s/2 + r` on `atlases[0]` and `s/2 - r` on `atlases[1]` with
    /// `r ~ N(0, split_noise^2)` per subject; only their sum is clean.
    Split { atlases: [String; 2], split_noise: f64 },
}

/// Synthetic multi-view generator settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Dataset name written to the manifest.
    #[serde(default = "default_synth_name")]
    pub name: String,
    /// Atlas ids (must exist in the registry); each becomes one view.
    pub atlases: Vec<String>,
    pub subjects_per_class: usize,
    pub num_classes: usize,
    /// Latent communities shared by all views of a subject.
    pub communities: usize,
    /// Base correlation between ROIs of the same community.
    pub within: f64,
    /// Base correlation between ROIs of different communities.
    pub between: f64,
    /// Amplitude of the subject-specific smooth latent field.
    pub noise: f64,
    /// Amplitude of the class perturbation on between-community edges.
    #[serde(default = "default_class_effect")]
    pub class_effect: f64,
    /// Per-subject jitter (mm) of community centers.
    #[serde(default = "default_center_jitter")]
    pub center_jitter: f64,
    /// Number of smooth spatial modes in the subject latent field.
    #[serde(default = "default_latent_modes")]
    pub latent_modes: usize,
    #[serde(default = "default_signal_mode")]
    pub signal: SignalMode,
}

fn default_synth_name() -> String {
    "synthetic".into()
}
fn default_class_effect() -> f64 {
    0.2
}
fn default_center_jitter() -> f64 {
    8.0
}
fn default_latent_modes() -> usize {
    4
}
fn default_signal_mode() -> SignalMode {
    SignalMode::Shared
}

impl SynthConfig {
    pub fn validate(&self, registry: &AtlasRegistry) -> Result<()> {
        if self.atlases.is_empty() {
            return Err(Error::Config("synth: `atlases` is empty".into()));
        }
        for a in &self.atlases {
            registry.require(a)?;
        }
        if self.num_classes == 0 || self.subjects_per_class == 0 || self.communities == 0 {
            return Err(Error::Config(
                "synth: num_classes, subjects_per_class and communities must be >= 1".into(),
            ));
        }
        if self.noise < 0.0 || self.center_jitter < 0.0 {
            return Err(Error::Config("synth: noise and center_jitter must be >= 0".into()));
        }
        if let SignalMode::Split {
            atlases,
            split_noise,
        } = &self.signal
        {
            if self.num_classes != 2 {
                return Err(Error::Config("synth: split signal requires num_classes = 2".into()));
            }
            if *split_noise < 0.0 || atlases[0] == atlases[1] {
                return Err(Error::Config("synth: split signal needs two distinct atlases".into()));
            }
            for a in atlases {
                if !self.atlases.contains(a) {
                    return Err(Error::Config(format!(
                        "synth: split atlas `{a}` is not among the generated atlases"
                    )));
                }
            }
        }
        Ok(())
    }
}

struct SpatialMode {
    freq: [f64; 3],
    phase: f64,
    weight: f64,
}

impl SpatialMode {
    fn eval(&self, c: ndarray::ArrayView1<f64>) -> f64 {
        (self.freq[0] * c[0] + self.freq[1] * c[1] + self.freq[2] * c[2] + self.phase).sin()
    }
}

fn nearest(centers: &[[f64; 3]], c: ndarray::ArrayView1<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, ctr) in centers.iter().enumerate() {
        let d: f64 = (0..3).map(|i| (ctr[i] - c[i]).powi(2)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Semi-axes (mm) of the ellipsoid community centers are drawn from; inside
/// the volume synthetic atlases cover.
const CENTER_AXES: [f64; 3] = [55.0, 80.0, 45.0];
const CENTER_CANDIDATES: usize = 64;

/// Community centers spread by farthest-point selection over random points
/// in the brain ellipsoid, so every community owns a comparable share of any
/// atlas's ROIs and no planted community pair is empty.
fn community_centers(k: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut candidates = Vec::with_capacity(CENTER_CANDIDATES.max(k));
    while candidates.len() < CENTER_CANDIDATES.max(k) {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            candidates.push(std::array::from_fn(|i| p[i] * CENTER_AXES[i]));
        }
    }
    let sq = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut centers = vec![candidates[0]];
    let mut gap: Vec<f64> = candidates.iter().map(|c| sq(c, &candidates[0])).collect();
    while centers.len() < k {
        let far = (0..candidates.len()).max_by(|&a, &b| gap[a].total_cmp(&gap[b])).unwrap();
        centers.push(candidates[far]);
        for (g, c) in gap.iter_mut().zip(&candidates) {
            *g = g.min(sq(c, &candidates[far]));
        }
    }
    centers
}

/// Deterministic synthetic multi-view dataset. Subject `i` has label
/// `i % num_classes` and draws all randomness from `(seed, i)`; every view
/// of a subject evaluates the same latent model at its own ROI coordinates.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, registry: &AtlasRegistry) -> Result<Dataset> {
    cfg.validate(registry)?;
    let atlases: Vec<&Atlas> = cfg
        .atlases
        .iter()
        .map(|a| registry.require(a))
        .collect::<Result<_>>()?;

    let centers = community_centers(cfg.communities, &mut stream(seed, Stream::Synth, &[u64::MAX]));

    let total = cfg.subjects_per_class * cfg.num_classes;
    let mut samples = Vec::with_capacity(total);
    for idx in 0..total {
        let label = idx % cfg.num_classes;
        let mut rng = stream(seed, Stream::Synth, &[idx as u64]);
        let jitter = Normal::new(0.0, cfg.center_jitter.max(1e-12)).expect("finite jitter");
        let subj_centers: Vec<[f64; 3]> = centers
            .iter()
            .map(|c| {
                let mut out = *c;
                if cfg.center_jitter > 0.0 {
                    for v in &mut out {
                        *v += jitter.sample(&mut rng);
                    }
                }
                out
            })
            .collect();
        let modes: Vec<SpatialMode> = (0..cfg.latent_modes)
            .map(|_| {
                let mut freq = [0.0; 3];
                for f in &mut freq {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *f = z / 40.0;
                }
                SpatialMode {
                    freq,
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    weight: StandardNormal.sample(&mut rng),
                }
            })
            .collect();
        let mode_norm = (cfg.latent_modes.max(1) as f64).sqrt();
        let split_r: f64 = match &cfg.signal {
            SignalMode::Split { split_noise, .. } => {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * split_noise
            }
            SignalMode::Shared => 0.0,
        };

        let subject_id = format!("sub-{idx:04}");
        let mut views = Vec::with_capacity(atlases.len());
        for atlas in &atlases {
            let coords = atlas.coords();
            let n = atlas.roi_count();
            let comm: Vec<usize> = coords.rows().into_iter().map(|c| nearest(&subj_centers, c)).collect();
            let field: Vec<Vec<f64>> = modes
                .iter()
                .map(|m| coords.rows().into_iter().map(|c| m.eval(c)).collect())
                .collect();

            // (community pair, signed amplitude) receiving the class perturbation
            let (pair, amp) = match &cfg.signal {
                SignalMode::Shared => {
                    let k = label % cfg.communities;
                    ((k, (label + 1) % cfg.communities), cfg.class_effect)
                }
                SignalMode::Split { atlases: split, .. } => {
                    let s = if label == 1 { 1.0 } else { -1.0 };
                    let v = if atlas.id() == split[0] {
                        0.5 * s + split_r
                    } else if atlas.id() == split[1] {
                        0.5 * s - split_r
                    } else {
                        s
                    };
                    ((0, 1 % cfg.communities), cfg.class_effect * v)
                }
            };

            let mut x = Array2::<f64>::eye(n);
            for i in 0..n {
                for j in (i + 1)..n {
                    let (ci, cj) = (comm[i], comm[j]);
                    let mut v = if ci == cj { cfg.within } else { cfg.between };
                    if cfg.noise > 0.0 {
                        let latent: f64 = modes
                            .iter()
                            .zip(&field)
                            .map(|(m, f)| m.weight * f[i] * f[j])
                            .sum();
                        v += cfg.noise * latent / mode_norm;
                    }
                    if ci != cj && ((ci, cj) == pair || (cj, ci) == pair) {
                        v += amp;
                    }
                    let v = v.clamp(-1.0, 1.0);
                    x[[i, j]] = v;
                    x[[j, i]] = v;
                }
            }
            views.push(Connectome::new(subject_id.clone(), atlas.id(), x)?);
        }
        samples.push(MultiViewSample::new(subject_id, views, Some(label))?);
    }
    Dataset::new(cfg.name.clone(), samples, Some(cfg.num_classes), registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::synth_atlas;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn registry() -> AtlasRegistry {
        AtlasRegistry::from_atlases([
            synth_atlas("A", 16, 3).unwrap(),
            synth_atlas("B", 24, 3).unwrap(),
        ])
        .unwrap()
    }

    fn cfg() -> SynthConfig {
        SynthConfig {
            name: "t".into(),
            atlases: vec!["A".into(), "B".into()],
            subjects_per_class: 20,
            num_classes: 2,
            communities: 4,
            within: 0.5,
            between: 0.1,
            noise: 0.15,
            class_effect: 0.3,
            center_jitter: 8.0,
            latent_modes: 4,
            signal: SignalMode::Shared,
        }
    }

    /// Textbook sample covariance / standard deviation oracle.
    fn pearson_oracle(ts: &Array2<f64>) -> Array2<f64> {
        let (n, t) = ts.dim();
        let mean: Vec<f64> = (0..n).map(|i| (0..t).map(|k| ts[[i, k]]).sum::<f64>() / t as f64).collect();
        let cov = |i: usize, j: usize| {
            (0..t).map(|k| (ts[[i, k]] - mean[i]) * (ts[[j, k]] - mean[j])).sum::<f64>() / (t as f64 - 1.0)
        };
        Array2::from_shape_fn((n, n), |(i, j)| cov(i, j) / (cov(i, i).sqrt() * cov(j, j).sqrt()))
    }

    #[test]
    fn pearson_perfect_relations() {
        let x = pearson_connectivity(&array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]).unwrap();
        assert!((x[[0, 1]] - 1.0).abs() < 1e-12);
        let x = pearson_connectivity(&array![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]).unwrap();
        assert!((x[[0, 1]] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_matches_oracle() {
        let mut rng = stream(1, Stream::Permutation, &[]);
        let ts = Array2::from_shape_simple_fn((5, 20), || rng.random_range(-1.0..1.0));
        let x = pearson_connectivity(&ts).unwrap();
        let o = pearson_oracle(&ts);
        for (a, b) in x.iter().zip(o.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pearson_constant_row_names_roi() {
        let err = pearson_connectivity(&array![[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { roi: 1 }));
    }

    #[test]
    fn threshold_is_strict_and_signed() {
        let x = array![[1.0, 0.3, -0.5], [0.3, 1.0, 0.31], [-0.5, 0.31, 1.0]];
        let z = threshold_adjacency(&x, 0.3, false).unwrap();
        assert_eq!(z, array![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        let za = threshold_adjacency(&x, 0.3, true).unwrap();
        assert_eq!(za[[0, 2]], 1.0);
        let full = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.9 });
        let z = threshold_adjacency(&full, 0.3, false).unwrap();
        assert_eq!(z.sum(), 12.0);
        assert!(threshold_adjacency(&full, 1.0, false).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn threshold_matches_elementwise_oracle() {
        let mut rng = stream(2, Stream::Permutation, &[]);
        let n = 9;
        let mut x = Array2::eye(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(-1.0..1.0);
                x[[i, j]] = v;
                x[[j, i]] = v;
            }
        }
        let z = threshold_adjacency(&x, 0.3, false).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expect = if i != j && x[[i, j]] > 0.3 { 1.0 } else { 0.0 };
                assert_eq!(z[[i, j]], expect);
            }
        }
    }

    #[test]
    fn connectome_validation() {
        assert!(Connectome::new("s", "a", array![[1.0, 0.2], [0.3, 1.0]]).is_err());
        assert!(Connectome::new("s", "a", array![[0.9, 0.2], [0.2, 1.0]]).is_err());
        assert!(Connectome::new("s", "a", array![[1.0, 1.2], [1.2, 1.0]]).is_err());
        assert!(Connectome::new("s", "a", array![[1.0, -0.2], [-0.2, 1.0]]).is_ok());
    }

    #[test]
    fn synth_is_deterministic() {
        let reg = registry();
        let a = synth_generate(&cfg(), 11, &reg).unwrap();
        let b = synth_generate(&cfg(), 11, &reg).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&cfg(), 12, &reg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_degenerate_single_community() {
        let reg = registry();
        let mut c = cfg();
        c.noise = 0.0;
        c.communities = 1;
        let d = synth_generate(&c, 1, &reg).unwrap();
        for s in &d.samples {
            for v in s.views.values() {
                let m = v.matrix();
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        let expect = if i == j { 1.0 } else { c.within };
                        assert_eq!(m[[i, j]], expect);
                    }
                }
            }
        }
    }

    fn frob(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn synth_plants_class_signal() {
        let reg = registry();
        let d = synth_generate(&cfg(), 5, &reg).unwrap();
        for atlas in ["A", "B"] {
            let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
            for (i, si) in d.samples.iter().enumerate() {
                for sj in d.samples.iter().skip(i + 1) {
                    let dist = frob(si.views[atlas].matrix(), sj.views[atlas].matrix());
                    if si.label == sj.label {
                        within += dist;
                        nw += 1;
                    } else {
                        between += dist;
                        nb += 1;
                    }
                }
            }
            assert!(within / nw as f64 <= between / nb as f64, "atlas {atlas}");
        }
    }

    #[test]
    fn identical_coordinates_give_identical_views() {
        let a = synth_atlas("A", 16, 3).unwrap();
        let a2 = a.renamed("A2").unwrap();
        let reg = AtlasRegistry::from_atlases([a, a2]).unwrap();
        let mut c = cfg();
        c.atlases = vec!["A".into(), "A2".into()];
        let d = synth_generate(&c, 9, &reg).unwrap();
        for s in &d.samples {
            assert_eq!(s.views["A"].matrix(), s.views["A2"].matrix());
        }
    }

    #[test]
    fn unknown_atlas_rejected() {
        let mut c = cfg();
        c.atlases.push("nope".into());
        assert!(synth_generate(&c, 1, &registry()).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let reg = registry();
        let mut c = cfg();
        c.subjects_per_class = 1;
        let d = synth_generate(&c, 3, &reg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path(), &reg).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.samples.len(), 2);
        assert!(back.samples.iter().all(|s| s.views.len() == 2));
    }

    #[test]
    fn load_rejects_wrong_dimension_naming_file() {
        let reg = registry();
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::<f64>::eye(5);
        std::fs::write(dir.path().join("x.csv"), matrix_to_csv(&m)).unwrap();
        let manifest = r#"{"name":"d","subjects":[{"id":"s","views":{"A":"x.csv"}}]}"#;
        std::fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        let err = load_dataset(dir.path(), &reg).unwrap_err().to_string();
        assert!(err.contains("x.csv"), "{err}");

        let manifest = r#"{"name":"d","subjects":[{"id":"s","views":{"A":"missing.csv"}}]}"#;
        std::fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        assert!(matches!(load_dataset(dir.path(), &reg), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn pearson_invariant_to_positive_affine(scale in 0.1f64..10.0, shift in -5.0f64..5.0, seed in 0u64..500) {
            let mut rng = stream(seed, Stream::Permutation, &[]);
            let ts = Array2::from_shape_simple_fn((4, 12), || rng.random_range(-1.0..1.0));
            let mut ts2 = ts.clone();
            ts2.row_mut(2).mapv_inplace(|v| scale * v + shift);
            let a = pearson_connectivity(&ts).unwrap();
            let b = pearson_connectivity(&ts2).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn threshold_above_one_is_empty(tau in 1.0f64..3.0, seed in 0u64..500) {
            let mut rng = stream(seed, Stream::Permutation, &[]);
            let ts = Array2::from_shape_simple_fn((5, 8), || rng.random_range(-1.0..1.0));
            let x = pearson_connectivity(&ts).unwrap();
            prop_assert!(threshold_adjacency(&x, tau, false).unwrap().iter().all(|v| *v == 0.0));
        }
    }
}
