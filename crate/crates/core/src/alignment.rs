//! Soft pooling of per-atlas node embeddings into a fixed supernode space.
//!
//! `F = GCN_feat(H, Z)`, `S = softmax_rows(GCN_pool(H, Z))`, `H_hat = S^T F`.
//! Every view is mapped to `n_super x d` whatever its ROI count.

use ndarray::Array2;

use crate::autograd::{softmax_rows, Graph, Var};
use crate::connectome::threshold_adjacency;
use crate::error::{Error, Result};
use crate::model::{names, ModelState};

/// Symmetrically renormalized adjacency with self-loops,
/// `D^{-1/2} (Z + I) D^{-1/2}`.
pub fn normalized_adjacency(z: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = z.dim();
    if n != m {
        return Err(Error::Shape(format!("adjacency is {n} x {m}")));
    }
    let mut a = z.clone();
    for i in 0..n {
        a[[i, i]] += 1.0;
    }
    let inv_sqrt: Vec<f64> = a.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(a)
}

/// Adjacency of a connectivity matrix under the model's threshold settings.
pub fn adjacency_for(model: &ModelState, x: &Array2<f64>) -> Result<Array2<f64>> {
    let a = &model.config.align;
    threshold_adjacency(x, a.threshold, a.threshold_abs)
}

/// `ReLU(A_hat H W)`.
pub fn gcn_layer(h: &Array2<f64>, z: &Array2<f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    if h.nrows() != z.nrows() || h.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "gcn: H {:?}, Z {:?}, W {:?}",
            h.dim(),
            z.dim(),
            w.dim()
        )));
    }
    let a = normalized_adjacency(z)?;
    Ok(a.dot(h).dot(w).mapv(|v| v.max(0.0)))
}

fn gcn_stack(g: &mut Graph, model: &ModelState, a_hat: Var, h: Var, name: fn(usize) -> String) -> Var {
    let mut x = h;
    for i in 0..model.config.align.gcn_layers {
        let w = g.param(&model.params, &name(i));
        let ax = g.matmul(a_hat, x);
        let y = g.matmul(ax, w);
        x = g.relu(y);
    }
    x
}

pub struct AlignOutput {
    /// `n_super x d` supernode embeddings.
    pub supernodes: Var,
    /// `N_a x n_super` row-stochastic assignment.
    pub assignment: Var,
    /// `N_a x d` node features before pooling.
    pub features: Var,
}

/// Alignment on the tape. `z` is the binary adjacency of the view.
pub fn align_graph(g: &mut Graph, model: &ModelState, h: Var, z: &Array2<f64>) -> Result<AlignOutput> {
    let n = g.shape(h).0;
    if z.dim() != (n, n) {
        return Err(Error::Shape(format!("adjacency {:?} for {n} nodes", z.dim())));
    }
    let a_hat = g.constant(normalized_adjacency(z)?);
    let features = gcn_stack(g, model, a_hat, h, names::gcn_feat);
    let logits = gcn_stack(g, model, a_hat, h, names::gcn_pool);
    let assignment = g.softmax_rows(logits);
    let supernodes = pool_graph(g, assignment, features);
    Ok(AlignOutput {
        supernodes,
        assignment,
        features,
    })
}

/// `S^T F` on the tape.
pub fn pool_graph(g: &mut Graph, assignment: Var, features: Var) -> Var {
    let st = g.transpose(assignment);
    g.matmul(st, features)
}

/// `S^T F` for an explicit assignment, e.g. a hard one-to-one pooling.
pub fn pool_with_assignment(features: &Array2<f64>, assignment: &Array2<f64>) -> Result<Array2<f64>> {
    if features.nrows() != assignment.nrows() {
        return Err(Error::Shape(format!(
            "features {:?} vs assignment {:?}",
            features.dim(),
            assignment.dim()
        )));
    }
    Ok(assignment.t().dot(features))
}

/// Numeric alignment: returns `(H_hat, S)`.
pub fn align(model: &ModelState, h: &Array2<f64>, z: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let out = align_graph(&mut g, model, hv, z)?;
    Ok((g.value(out.supernodes).clone(), g.value(out.assignment).clone()))
}

/// Mean Shannon entropy (nats) of the assignment rows, with `0 ln 0 = 0`.
pub fn assignment_entropy(s: &Array2<f64>) -> f64 {
    let total: f64 = s
        .rows()
        .into_iter()
        .map(|r| -r.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum();
    total / s.nrows() as f64
}

/// Mean row entropy on the tape; probabilities are floored at `clamp` inside the log.
pub fn assignment_entropy_graph(g: &mut Graph, s: Var, clamp: f64) -> Var {
    let c = g.clamp_min(s, clamp);
    let l = g.ln(c);
    let pl = g.mul(s, l);
    let rows = g.sum_cols(pl);
    let m = g.mean(rows);
    g.scale(m, -1.0)
}

/// Row softmax of explicit logits, exposed for building assignments by hand.
pub fn assignment_from_logits(logits: &Array2<f64>) -> Array2<f64> {
    softmax_rows(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::synth_atlas;
    use crate::config::ModelConfig;
    use crate::rng::{stream, Stream};
    use ndarray::array;
    use rand::Rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, Stream::Permutation, &[]);
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_isolated_node() {
        let h = array![[0.5, -2.0]];
        let w = array![[1.0], [1.0]];
        let out = gcn_layer(&h, &array![[0.0]], &w).unwrap();
        assert_eq!(out, array![[0.0]]);
        let out = gcn_layer(&h, &array![[0.0]], &array![[-1.0], [-1.0]]).unwrap();
        assert_eq!(out, array![[1.5]]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let h = rand_mat(4, 3, 1);
        let out = gcn_layer(&h, &Array2::zeros((4, 4)), &Array2::zeros((3, 2))).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn path_graph_matches_explicit_normalization() {
        let z = array![
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0]
        ];
        // degrees with self-loop: 2, 3, 3, 2
        let deg = [2.0f64, 3.0, 3.0, 2.0];
        let mut a = Array2::<f64>::zeros((4, 4));
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { z[[i, j]] };
                a[[i, j]] = e / (deg[i] * deg[j]).sqrt();
            }
        }
        let h = rand_mat(4, 3, 2);
        let w = rand_mat(3, 5, 3);
        let mut expect = Array2::<f64>::zeros((4, 5));
        for i in 0..4 {
            for o in 0..5 {
                let mut s = 0.0;
                for j in 0..4 {
                    for k in 0..3 {
                        s += a[[i, j]] * h[[j, k]] * w[[k, o]];
                    }
                }
                expect[[i, o]] = s.max(0.0);
            }
        }
        let got = gcn_layer(&h, &z, &w).unwrap();
        for (x, y) in got.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_assignment_returns_features() {
        let f = rand_mat(5, 3, 4);
        assert_eq!(pool_with_assignment(&f, &Array2::eye(5)).unwrap(), f);
    }

    #[test]
    fn uniform_assignment_averages_rows() {
        let f = rand_mat(6, 3, 5);
        let s = Array2::from_elem((6, 4), 0.25);
        let pooled = pool_with_assignment(&f, &s).unwrap();
        let mean = f.mean_axis(ndarray::Axis(0)).unwrap();
        for q in 0..4 {
            for k in 0..3 {
                assert!((pooled[[q, k]] - mean[k] * 6.0 / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn align_matches_matrix_oracle_and_fixes_shape() {
        let cfg = ModelConfig::toy();
        for n in [10, 16, 23] {
            let atlas = synth_atlas("A", n, 7).unwrap();
            let m = crate::model::ModelState::new(cfg.clone(), [&atlas], 1).unwrap();
            let h = rand_mat(n, 8, n as u64);
            let x = rand_mat(n, n, 9);
            let z = threshold_adjacency(&(&x + &x.t()), 0.3, false).unwrap();
            let (hat, s) = align(&m, &h, &z).unwrap();
            assert_eq!(hat.dim(), (5, 8));
            for r in s.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-9);
            }
            let f = gcn_layer(&h, &z, m.params.get(&names::gcn_feat(0)).unwrap()).unwrap();
            let pool = gcn_layer(&h, &z, m.params.get(&names::gcn_pool(0)).unwrap()).unwrap();
            let s_oracle = softmax_rows(&pool);
            let oracle = s_oracle.t().dot(&f);
            for (a, b) in hat.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn entropy_examples() {
        let u = Array2::from_elem((3, 50), 1.0 / 50.0);
        assert!((assignment_entropy(&u) - 50f64.ln()).abs() < 1e-12);
        assert!((assignment_entropy(&u) - 3.9120).abs() < 1e-4);
        assert_eq!(assignment_entropy(&Array2::eye(4)), 0.0);
        let mut half = Array2::zeros((1, 50));
        half[[0, 0]] = 0.5;
        half[[0, 1]] = 0.5;
        assert!((assignment_entropy(&half) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_graph_matches_numeric_and_fd() {
        let logits = rand_mat(5, 4, 11) * 3.0;
        let mut g = Graph::new();
        let l = g.input(logits.clone());
        let s = g.softmax_rows(l);
        let e = assignment_entropy_graph(&mut g, s, 1e-8);
        let s_num = softmax_rows(&logits);
        assert!((g.scalar(e) - assignment_entropy(&s_num)).abs() < 1e-12);
        let grad = g.grad_of(e, l).unwrap();
        let eps = 1e-3;
        let mut num = Array2::zeros(logits.dim());
        for idx in 0..logits.len() {
            let (i, j) = (idx / 4, idx % 4);
            let mut p = logits.clone();
            p[[i, j]] += eps;
            let mut q = logits.clone();
            q[[i, j]] -= eps;
            num[[i, j]] = (assignment_entropy(&softmax_rows(&p)) - assignment_entropy(&softmax_rows(&q)))
                / (2.0 * eps);
        }
        let diff = (&grad - &num).mapv(|v| v * v).sum().sqrt();
        let scale = grad.mapv(|v| v * v).sum().sqrt() + num.mapv(|v| v * v).sum().sqrt();
        assert!(diff / scale < 1e-3, "rel err {}", diff / scale);
    }
}
