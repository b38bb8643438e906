//! Interpretability exports: distance-bias edge rankings per head and
//! attention-based ROI saliency per subject.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::atlas::Atlas;
use crate::connectome::Connectome;
use crate::encoder::{distance_bias, encode_with_attention};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::ModelState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEdge {
    pub rank: usize,
    pub i: usize,
    pub j: usize,
    pub roi_i: String,
    pub roi_j: String,
    pub distance_mm: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRanking {
    pub layer: usize,
    pub head: usize,
    pub edges: Vec<BiasEdge>,
    /// Mean distance of the selected edges.
    pub mean_distance_mm: f64,
}

/// The `k` ROI pairs `i < j` with the largest bias of `(layer, head)`,
/// descending, ties broken by `(i, j)`.
pub fn top_bias_edges(model: &ModelState, atlas: &Atlas, layer: usize, head: usize, k: usize) -> Result<EdgeRanking> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let e = &model.config.encoder;
    if layer >= e.layers || head >= e.heads {
        return Err(Error::Config(format!(
            "layer {layer} / head {head} out of range ({} layers, {} heads)",
            e.layers, e.heads
        )));
    }
    let b = distance_bias(atlas, &model.bias_head(layer, head));
    let n = atlas.roi_count();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    pairs.sort_by(|x, y| b[[y.0, y.1]].total_cmp(&b[[x.0, x.1]]).then(x.cmp(y)));
    pairs.truncate(k);
    let names = atlas.roi_names();
    let edges: Vec<BiasEdge> = pairs
        .iter()
        .enumerate()
        .map(|(r, &(i, j))| BiasEdge {
            rank: r + 1,
            i,
            j,
            roi_i: names[i].clone(),
            roi_j: names[j].clone(),
            distance_mm: atlas.dist()[[i, j]],
            bias: b[[i, j]],
        })
        .collect();
    let mean = edges.iter().map(|e| e.distance_mm).sum::<f64>() / edges.len() as f64;
    Ok(EdgeRanking {
        layer,
        head,
        edges,
        mean_distance_mm: mean,
    })
}

/// Which layers' attention feeds the saliency score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyLayer {
    #[default]
    Last,
    MeanAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientRoi {
    pub rank: usize,
    pub index: usize,
    pub roi: String,
    pub xyz: [f64; 3],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub subject: String,
    /// Received attention of every ROI; sums to 1.
    pub scores: Vec<f64>,
    pub top: Vec<SalientRoi>,
}

/// Attention received per key: column means of the row-stochastic matrices,
/// averaged over matrices.
pub fn received_attention(mats: &[Array2<f64>]) -> Result<Vec<f64>> {
    let first = mats
        .first()
        .ok_or_else(|| Error::Contract("no attention matrices".into()))?;
    let n = first.ncols();
    let mut s = vec![0.0; n];
    for m in mats {
        if m.dim() != (n, n) {
            return Err(Error::Shape(format!("attention matrix {:?}, expected {n} x {n}", m.dim())));
        }
        for row in m.rows() {
            for (j, v) in row.iter().enumerate() {
                s[j] += v;
            }
        }
    }
    let denom = (mats.len() * n) as f64;
    Ok(s.into_iter().map(|v| v / denom).collect())
}

/// Rank ROIs by score (descending, ties by index) and keep `k`, clamped to `N`.
pub fn rank_rois(atlas: &Atlas, scores: &[f64], k: usize) -> Vec<SalientRoi> {
    let n = scores.len();
    let k = if k > n {
        log::warn!("requested {k} salient ROIs but the atlas has {n}; returning all");
        n
    } else {
        k
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    idx.into_iter()
        .take(k)
        .enumerate()
        .map(|(r, i)| {
            let c = atlas.coords().row(i);
            SalientRoi {
                rank: r + 1,
                index: i,
                roi: atlas.roi_names()[i].clone(),
                xyz: [c[0], c[1], c[2]],
                score: scores[i],
            }
        })
        .collect()
}

pub fn salient_rois(
    model: &ModelState,
    connectome: &Connectome,
    atlas: &Atlas,
    k: usize,
    layer: SaliencyLayer,
) -> Result<SaliencyReport> {
    let (_, attn) = encode_with_attention(connectome, atlas, model)?;
    let mats: Vec<Array2<f64>> = match layer {
        SaliencyLayer::Last => attn.last().cloned().unwrap_or_default(),
        SaliencyLayer::MeanAll => attn.into_iter().flatten().collect(),
    };
    let scores = received_attention(&mats)?;
    let top = rank_rois(atlas, &scores, k);
    Ok(SaliencyReport {
        subject: connectome.subject_id.clone(),
        scores,
        top,
    })
}

fn csv_bytes(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    w.into_inner()
        .map_err(|e| Error::Validation(format!("csv buffer: {e}")))
}

/// `edges.csv`: layer, head, rank, roi_i, roi_j, distance_mm, bias.
pub fn write_edges_csv(path: &Path, rankings: &[EdgeRanking]) -> Result<()> {
    let bytes = csv_bytes(|w| {
        w.write_record(["layer", "head", "rank", "roi_i", "roi_j", "distance_mm", "bias"])?;
        for r in rankings {
            for e in &r.edges {
                w.write_record([
                    r.layer.to_string(),
                    r.head.to_string(),
                    e.rank.to_string(),
                    e.roi_i.clone(),
                    e.roi_j.clone(),
                    e.distance_mm.to_string(),
                    e.bias.to_string(),
                ])?;
            }
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

/// `saliency.csv`: subject, rank, roi, x, y, z, score.
pub fn write_saliency_csv(path: &Path, reports: &[SaliencyReport]) -> Result<()> {
    let bytes = csv_bytes(|w| {
        w.write_record(["subject", "rank", "roi", "x", "y", "z", "score"])?;
        for r in reports {
            for s in &r.top {
                w.write_record([
                    r.subject.clone(),
                    s.rank.to_string(),
                    s.roi.clone(),
                    s.xyz[0].to_string(),
                    s.xyz[1].to_string(),
                    s.xyz[2].to_string(),
                    s.score.to_string(),
                ])?;
            }
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::synth_atlas;
    use crate::config::ModelConfig;
    use ndarray::array;

    fn setup(n: usize) -> (Atlas, ModelState) {
        let a = synth_atlas("A", n, 3).unwrap();
        let mut cfg = ModelConfig::toy();
        cfg.encoder.heads = 4;
        let m = ModelState::new(cfg, [&a], 1).unwrap();
        (a, m)
    }

    #[test]
    fn k_zero_rejected_and_large_k_returns_all() {
        let (a, m) = setup(7);
        assert!(top_bias_edges(&m, &a, 0, 0, 0).is_err());
        let r = top_bias_edges(&m, &a, 0, 0, 100).unwrap();
        assert_eq!(r.edges.len(), 21);
    }

    #[test]
    fn edges_are_closest_to_center() {
        let (a, m) = setup(12);
        for h in 0..4 {
            let r = top_bias_edges(&m, &a, 1, h, 10).unwrap();
            let mu = m.bias_head(1, h).mu_tilde * a.dis_max();
            let mut pairs: Vec<(usize, usize)> = (0..12).flat_map(|i| ((i + 1)..12).map(move |j| (i, j))).collect();
            pairs.sort_by(|x, y| {
                let dx = (a.dist()[[x.0, x.1]] - mu).abs();
                let dy = (a.dist()[[y.0, y.1]] - mu).abs();
                dx.total_cmp(&dy).then(x.cmp(y))
            });
            let got: Vec<(usize, usize)> = r.edges.iter().map(|e| (e.i, e.j)).collect();
            assert_eq!(got, pairs[..10].to_vec());
        }
    }

    #[test]
    fn mean_distance_grows_with_head_at_init() {
        let (a, m) = setup(20);
        let d: Vec<f64> = (0..4)
            .map(|h| top_bias_edges(&m, &a, 0, h, 20).unwrap().mean_distance_mm)
            .collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]), "{d:?}");
    }

    #[test]
    fn hand_built_attention_ranking() {
        let att = array![[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.2, 0.2]];
        let s = received_attention(&[att]).unwrap();
        let expect = [0.9 / 3.0, 0.8 / 3.0, 1.3 / 3.0];
        for (x, y) in s.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        let a = synth_atlas("A", 3, 1).unwrap();
        let ranked = rank_rois(&a, &s, 3);
        assert_eq!(ranked.iter().map(|r| r.index).collect::<Vec<_>>(), vec![2, 0, 1]);
    }

    #[test]
    fn uniform_attention_gives_equal_scores() {
        let (a, mut m) = setup(6);
        for l in 0..2 {
            m.params.get_mut(&format!("enc.l{l}.attn.wq")).unwrap().fill(0.0);
            m.params.get_mut(&format!("enc.l{l}.bias.alpha_raw")).unwrap().fill(-1e4);
        }
        let x = Connectome::new("s", "A", Array2::eye(6)).unwrap();
        let r = salient_rois(&m, &x, &a, 9, SaliencyLayer::Last).unwrap();
        assert_eq!(r.top.len(), 6);
        for s in &r.scores {
            assert!((s - 1.0 / 6.0).abs() < 1e-12);
        }
        assert_eq!(r.top.iter().map(|t| t.index).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn saliency_is_a_distribution_and_csvs_write() {
        let (a, m) = setup(8);
        let x = Connectome::new("s", "A", Array2::eye(8)).unwrap();
        let r = salient_rois(&m, &x, &a, 8, SaliencyLayer::MeanAll).unwrap();
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let dir = tempfile::tempdir().unwrap();
        write_saliency_csv(&dir.path().join("saliency.csv"), &[r]).unwrap();
        let e = top_bias_edges(&m, &a, 0, 1, 5).unwrap();
        write_edges_csv(&dir.path().join("edges.csv"), &[e]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("edges.csv")).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("layer,head,rank,roi_i,roi_j,distance_mm,bias"));
    }
}
