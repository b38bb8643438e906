//! Checkpoints: a binary parameter blob plus a JSON sidecar at `<path>.json`.
//!
//! Blob layout (little endian): magic `MVBFCKPT`, `u32` version, `u64` entry
//! count, then per entry `u8` kind (0 parameter, 1 Adam first moment, 2 Adam
//! second moment), `u32` name length, name bytes, `u64` rows, `u64` cols and
//! row-major `f64` data; finally the `u64` Adam step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::atlas::{Atlas, AtlasFile};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic, write_json_atomic};
use crate::model::ModelState;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::train::LossReport;

const MAGIC: &[u8; 8] = b"MVBFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub config: ModelConfig,
    pub atlas_ids: Vec<String>,
    pub rng_seed: u64,
    pub epoch: usize,
    pub loss_history: Vec<LossReport>,
    /// Atlases with a registered projection, so a checkpoint is self-contained.
    pub atlases: Vec<AtlasFile>,
    pub adam: Option<AdamConfig>,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub atlases: Vec<Atlas>,
    pub adam: Option<Adam>,
    /// Completed epochs.
    pub epoch: usize,
    pub loss_history: Vec<LossReport>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn push_entry(buf: &mut Vec<u8>, kind: u8, name: &str, m: &Array2<f64>) {
    buf.push(kind);
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(u8, &String, &Array2<f64>)> = Vec::new();
        for (k, v) in self.model.params.iter() {
            entries.push((0, k, v));
        }
        if let Some(adam) = &self.adam {
            for (k, v) in &adam.first {
                entries.push((1, k, v));
            }
            for (k, v) in &adam.second {
                entries.push((2, k, v));
            }
        }
        let mut buf = Vec::with_capacity(16 + self.model.param_count() * 8 * 3);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (kind, name, m) in entries {
            push_entry(&mut buf, kind, name, m);
        }
        buf.extend_from_slice(&self.adam.as_ref().map_or(0, |a| a.step).to_le_bytes());

        let sidecar = Sidecar {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            atlas_ids: self.model.projection_ids().cloned().collect(),
            rng_seed: self.model.seed,
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            atlases: self.atlases.iter().map(|a| a.to_file()).collect(),
            adam: self.adam.as_ref().map(|a| a.config),
            adam_step: self.adam.as_ref().map_or(0, |a| a.step),
        };
        write_atomic(path, &buf)?;
        write_json_atomic(&sidecar_path(path), &sidecar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = sidecar_path(path);
        let text = read_to_string(&side_path)?;
        let side: Sidecar = serde_json::from_str(&text)
            .map_err(|e| crate::io::json_parse_error(&side_path, e))?;
        if side.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} (expected {FORMAT_VERSION})",
                side_path.display(),
                side.format_version
            )));
        }
        side.config.validate()?;
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            data: &data,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: blob version {version} (expected {FORMAT_VERSION})",
                path.display()
            )));
        }
        let count = r.u64()?;
        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for _ in 0..count {
            let kind = r.u8()?;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{}: invalid entry name", path.display())))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let mut v = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                v.push(r.f64()?);
            }
            let m = Array2::from_shape_vec((rows, cols), v).expect("rows * cols values");
            match kind {
                0 => params.insert(name, m),
                1 => {
                    first.insert(name, m);
                }
                2 => {
                    second.insert(name, m);
                }
                k => {
                    return Err(Error::Checkpoint(format!("{}: unknown entry kind {k}", path.display())))
                }
            }
        }
        let step = r.u64()?;
        if r.pos != data.len() {
            return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
        }

        let atlases: Vec<Atlas> = side
            .atlases
            .iter()
            .cloned()
            .map(Atlas::from_file)
            .collect::<Result<_>>()?;
        let model = ModelState::from_parts(side.config.clone(), params, side.rng_seed);
        verify_shapes(&model, &atlases)?;
        let ids: Vec<String> = model.projection_ids().cloned().collect();
        if ids != side.atlas_ids {
            return Err(Error::Checkpoint(format!(
                "sidecar lists atlases {:?} but the blob holds {ids:?}",
                side.atlas_ids
            )));
        }
        let adam = side.adam.map(|config| Adam {
            config,
            step,
            first,
            second,
        });
        Ok(Self {
            model,
            atlases,
            adam,
            epoch: side.epoch,
            loss_history: side.loss_history,
        })
    }
}

/// Compare every parameter against a freshly built model with the same
/// registrations.
fn verify_shapes(model: &ModelState, atlases: &[Atlas]) -> Result<()> {
    let mut fresh = ModelState::new(model.config.clone(), std::iter::empty(), model.seed)?;
    for id in model.projection_ids() {
        let atlas = atlases
            .iter()
            .find(|a| a.id() == id)
            .ok_or_else(|| Error::Checkpoint(format!("atlas `{id}` is missing from the sidecar")))?;
        fresh.register_atlas(atlas, model.has_decoder(id));
    }
    if let Some(c) = model.num_classes() {
        fresh.init_head(c);
    }
    let got: Vec<(&String, (usize, usize))> = model.params.iter().map(|(k, v)| (k, v.dim())).collect();
    let want: Vec<(&String, (usize, usize))> = fresh.params.iter().map(|(k, v)| (k, v.dim())).collect();
    if got != want {
        let missing: Vec<_> = want.iter().filter(|w| !got.contains(w)).map(|w| w.0).collect();
        let extra: Vec<_> = got.iter().filter(|g| !want.contains(g)).map(|g| g.0).collect();
        return Err(Error::Checkpoint(format!(
            "parameters do not match the configuration (missing or misshaped: {missing:?}; unexpected: {extra:?})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::synth_atlas;
    use crate::connectome::Connectome;
    use crate::encoder::encode;
    use crate::params::GradStore;

    fn sample_checkpoint() -> Checkpoint {
        let a = synth_atlas("A", 6, 1).unwrap();
        let mut m = ModelState::new(ModelConfig::toy(), [&a], 5).unwrap();
        m.init_head(2);
        let mut adam = Adam::new(AdamConfig::default());
        let mut g = GradStore::default();
        for (k, v) in m.params.iter() {
            g.accumulate(k, &v.mapv(|x| x.sin() + 0.1), 1.0);
        }
        adam.step(&mut m.params, &g, 1e-3);
        Checkpoint {
            model: m,
            atlases: vec![a],
            adam: Some(adam),
            epoch: 3,
            loss_history: vec![],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = sample_checkpoint();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let x = Connectome::new("s", "A", Array2::eye(6)).unwrap();
        let e1 = encode(&x, &ck.atlases[0], &ck.model, None).unwrap();
        let e2 = encode(&x, &back.atlases[0], &back.model, None).unwrap();
        assert!(e1.iter().zip(e2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let bytes = std::fs::read(&p).unwrap();
        back.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut ck = sample_checkpoint();
        ck.model.params.insert("enc.freq.z", Array2::zeros((3, 3)));
        ck.save(&p).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample_checkpoint().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));
    }
}
