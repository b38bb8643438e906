//! Atlas definitions: ROI names, millimeter coordinates and the fixed
//! pairwise distance structure the encoder conditions on.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{json_parse_error, read_to_string, write_json_atomic};
use crate::rng::{hash_str, stream, Stream};

/// On-disk atlas document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AtlasFile {
    pub id: String,
    pub rois: Vec<RoiEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RoiEntry {
    pub name: String,
    pub xyz: [f64; 3],
}

/// A validated atlas. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    id: String,
    roi_names: Vec<String>,
    coords: Array2<f64>,
    dist: Array2<f64>,
    dis_max: f64,
}

/// Pairwise Euclidean distances between the rows of an `N x 3` coordinate matrix.
pub fn distance_matrix(coords: &Array2<f64>) -> Result<Array2<f64>> {
    if coords.ncols() != 3 {
        return Err(Error::Shape(format!(
            "coordinates must be N x 3, got {} x {}",
            coords.nrows(),
            coords.ncols()
        )));
    }
    if let Some(pos) = coords.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("coordinate row {}", pos / 3)));
    }
    let n = coords.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..3 {
                let diff = coords[[i, k]] - coords[[j, k]];
                acc += diff * diff;
            }
            let v = acc.sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

impl Atlas {
    pub fn new(id: impl Into<String>, roi_names: Vec<String>, coords: Array2<f64>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Validation("atlas id must be non-empty".into()));
        }
        let n = roi_names.len();
        if n < 2 {
            return Err(Error::Validation(format!(
                "atlas `{id}` has {n} ROI(s); at least 2 are required"
            )));
        }
        if coords.nrows() != n {
            return Err(Error::Shape(format!(
                "atlas `{id}`: {n} names but {} coordinate rows",
                coords.nrows()
            )));
        }
        let mut seen = HashSet::new();
        for name in &roi_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!(
                    "atlas `{id}`: duplicate ROI name `{name}`"
                )));
            }
        }
        let dist = distance_matrix(&coords)?;
        let dis_max = dist.iter().cloned().fold(0.0, f64::max);
        if dis_max <= 0.0 {
            return Err(Error::Validation(format!(
                "atlas `{id}`: all ROI coordinates coincide (maximum distance is 0)"
            )));
        }
        Ok(Self {
            id,
            roi_names,
            coords,
            dist,
            dis_max,
        })
    }

    pub fn from_file(file: AtlasFile) -> Result<Self> {
        let names = file.rois.iter().map(|r| r.name.clone()).collect();
        let mut coords = Array2::zeros((file.rois.len(), 3));
        for (i, r) in file.rois.iter().enumerate() {
            for k in 0..3 {
                coords[[i, k]] = r.xyz[k];
            }
        }
        Self::new(file.id, names, coords)
    }

    pub fn to_file(&self) -> AtlasFile {
        AtlasFile {
            id: self.id.clone(),
            rois: self
                .roi_names
                .iter()
                .zip(self.coords.rows())
                .map(|(name, c)| RoiEntry {
                    name: name.clone(),
                    xyz: [c[0], c[1], c[2]],
                })
                .collect(),
        }
    }

    /// Same ROIs and coordinates under a different id.
    pub fn renamed(&self, id: impl Into<String>) -> Result<Self> {
        Self::new(id, self.roi_names.clone(), self.coords.clone())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn roi_count(&self) -> usize {
        self.roi_names.len()
    }

    pub fn roi_names(&self) -> &[String] {
        &self.roi_names
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn dist(&self) -> &Array2<f64> {
        &self.dist
    }

    pub fn dis_max(&self) -> f64 {
        self.dis_max
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, &self.to_file())
    }
}

pub fn load_atlas(path: &Path) -> Result<Atlas> {
    let text = read_to_string(path)?;
    let file: AtlasFile = serde_json::from_str(&text).map_err(|e| json_parse_error(path, e))?;
    Atlas::from_file(file).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Random atlas with `n` ROIs spread through a brain-sized ellipsoid
/// (semi-axes 70, 100 and 65 mm).
pub fn synth_atlas(id: &str, n: usize, seed: u64) -> Result<Atlas> {
    let mut rng = stream(seed, Stream::Atlas, &[hash_str(id), n as u64]);
    let axes = [70.0, 100.0, 65.0];
    let mut coords = Array2::zeros((n, 3));
    let mut i = 0;
    while i < n {
        let p: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if p.iter().map(|v| v * v).sum::<f64>() > 1.0 {
            continue;
        }
        for k in 0..3 {
            coords[[i, k]] = p[k] * axes[k];
        }
        i += 1;
    }
    let names = (0..n).map(|i| format!("{id}_{i:03}")).collect();
    Atlas::new(id, names, coords)
}

/// Atlases indexed by id.
#[derive(Debug, Clone, Default)]
pub struct AtlasRegistry {
    atlases: BTreeMap<String, Atlas>,
}

impl AtlasRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, atlas: Atlas) -> Result<()> {
        if self.atlases.contains_key(atlas.id()) {
            return Err(Error::Validation(format!(
                "atlas id `{}` registered twice",
                atlas.id()
            )));
        }
        self.atlases.insert(atlas.id().to_string(), atlas);
        Ok(())
    }

    /// Insert unless an identical atlas with the same id is already present;
    /// a different atlas under an existing id is an error.
    pub fn absorb(&mut self, atlas: Atlas) -> Result<()> {
        match self.atlases.get(atlas.id()) {
            Some(existing) if *existing == atlas => Ok(()),
            Some(_) => Err(Error::Validation(format!(
                "atlas id `{}` defined twice with different ROIs",
                atlas.id()
            ))),
            None => self.insert(atlas),
        }
    }

    pub fn from_atlases(atlases: impl IntoIterator<Item = Atlas>) -> Result<Self> {
        let mut reg = Self::new();
        for a in atlases {
            reg.insert(a)?;
        }
        Ok(reg)
    }

    /// Load a single atlas file or every `*.json` file of a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reg = Self::new();
        reg.load_into(path)?;
        Ok(reg)
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            for p in entries {
                self.insert(load_atlas(&p)?)?;
            }
        } else {
            self.insert(load_atlas(path)?)?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Atlas> {
        self.atlases.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&Atlas> {
        self.get(id)
            .ok_or_else(|| Error::Validation(format!("atlas `{id}` is not in the registry")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.atlases.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Atlas> {
        self.atlases.values()
    }

    pub fn len(&self) -> usize {
        self.atlases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atlases.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    #[test]
    fn three_four_five_triangle() {
        let a = Atlas::new("t", names(2), array![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(a.dist(), &array![[0.0, 5.0], [5.0, 0.0]]);
        assert_eq!(a.dis_max(), 5.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = Atlas::new(
            "t",
            vec!["a".into(), "a".into()],
            array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("duplicate")));
    }

    #[test]
    fn too_few_or_coincident_rois_rejected() {
        assert!(Atlas::new("t", names(1), array![[0.0, 0.0, 0.0]]).is_err());
        assert!(Atlas::new("t", names(2), array![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]).is_err());
        // coincident pairs are fine as long as one pair is distinct
        let a = Atlas::new(
            "t",
            names(3),
            array![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [2.0, 1.0, 1.0]],
        )
        .unwrap();
        assert_eq!(a.dist()[[0, 1]], 0.0);
    }

    #[test]
    fn single_point_and_unit_triangle() {
        assert_eq!(distance_matrix(&array![[1.0, 2.0, 3.0]]).unwrap(), array![[0.0]]);
        let d = distance_matrix(&array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(d[[0, 1]], 1.0);
        assert_eq!(d[[0, 2]], 1.0);
        assert!((d[[1, 2]] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn non_finite_coordinates_rejected() {
        assert!(matches!(
            distance_matrix(&array![[0.0, f64::NAN, 0.0], [1.0, 0.0, 0.0]]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn load_reports_line_of_malformed_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(&p, "{\n \"id\": \"x\",\n \"rois\": [ { \"name\": 3 } ]\n}").unwrap();
        match load_atlas(&p) {
            Err(Error::Parse { location, .. }) => assert!(location.contains(":3:")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip_and_registry_directory() {
        let dir = tempfile::tempdir().unwrap();
        let a = synth_atlas("A", 12, 1).unwrap();
        let b = synth_atlas("B", 7, 1).unwrap();
        a.save(&dir.path().join("a.json")).unwrap();
        b.save(&dir.path().join("b.json")).unwrap();
        let reg = AtlasRegistry::load(dir.path()).unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.get("A").unwrap(), &a);
        assert_eq!(reg.get("B").unwrap().roi_count(), 7);
    }

    fn coords_strategy() -> impl Strategy<Value = Array2<f64>> {
        (2usize..12).prop_flat_map(|n| {
            proptest::collection::vec(-100.0f64..100.0, n * 3)
                .prop_map(move |v| Array2::from_shape_vec((n, 3), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(c in coords_strategy()) {
            let d = distance_matrix(&c).unwrap();
            let n = c.nrows();
            for i in 0..n {
                prop_assert_eq!(d[[i, i]], 0.0);
                for j in 0..n {
                    prop_assert_eq!(d[[i, j]], d[[j, i]]);
                    prop_assert!(d[[i, j]] >= 0.0);
                    for k in 0..n {
                        prop_assert!(d[[i, j]] <= d[[i, k]] + d[[k, j]] + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn distance_is_permutation_equivariant(c in coords_strategy(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let n = c.nrows();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream(seed, Stream::Permutation, &[]));
            let pc = c.select(ndarray::Axis(0), &perm);
            let d = distance_matrix(&c).unwrap();
            let pd = distance_matrix(&pc).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(pd[[i, j]], d[[perm[i], perm[j]]]);
                }
            }
        }

        #[test]
        fn normalized_distances_in_unit_interval(c in coords_strategy()) {
            prop_assume!(c.rows().into_iter().any(|r| r != c.row(0)));
            let a = Atlas::new("p", names(c.nrows()), c).unwrap();
            prop_assert!(a.dist().iter().all(|v| *v / a.dis_max() <= 1.0 && *v >= 0.0));
        }
    }
}
