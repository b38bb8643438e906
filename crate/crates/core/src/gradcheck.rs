//! Central finite-difference check of analytic gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::param_group;
use crate::params::{GradStore, ParamStore};

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Worst relative error over all parameter groups.
    pub max_rel_err: f64,
    pub worst_group: String,
    /// Parameter with the largest absolute gradient discrepancy.
    pub worst_param: String,
    pub groups: BTreeMap<String, GroupError>,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many entries per parameter matrix (evenly strided).
    pub max_entries: Option<usize>,
    /// Restrict the check to parameters whose name starts with one of these.
    pub only: Option<Vec<String>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_entries: None,
            only: None,
        }
    }
}

const ZERO_FLOOR: f64 = 1e-8;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compare `loss`'s analytic gradient against central differences, grouped by
/// [`param_group`]. Each group's error is `|a - n| / max(|a| + |n|, 1e-8)`
/// over the checked entries; the floor keeps groups whose true gradient is
/// exactly zero from reporting pure roundoff as a relative error.
pub fn grad_check<F>(params: &ParamStore, opts: &GradCheckOptions, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, GradStore)>,
{
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {}", opts.eps)));
    }
    let (_, analytic) = loss(params)?;
    let mut work = params.clone();
    let mut per_group: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut worst_param = (0.0f64, String::new());

    for (name, value) in params.iter() {
        if let Some(only) = &opts.only {
            if !only.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
        }
        let n = value.len();
        let stride = match opts.max_entries {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let cols = value.ncols();
        let grad = analytic.get(name);
        let entry = per_group.entry(param_group(name).to_string()).or_default();
        for idx in (0..n).step_by(stride) {
            let (i, j) = (idx / cols, idx % cols);
            let orig = value[[i, j]];
            work.get_mut(name).expect("cloned store")[[i, j]] = orig + opts.eps;
            let (up, _) = loss(&work)?;
            work.get_mut(name).expect("cloned store")[[i, j]] = orig - opts.eps;
            let (down, _) = loss(&work)?;
            work.get_mut(name).expect("cloned store")[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = grad.map_or(0.0, |g| g[[i, j]]);
            if (a - numeric).abs() > worst_param.0 {
                worst_param = ((a - numeric).abs(), name.clone());
            }
            entry.0.push(a);
            entry.1.push(numeric);
        }
    }

    let mut groups = BTreeMap::new();
    let mut worst = (0.0f64, String::new());
    for (gname, (a, n)) in per_group {
        let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
        let (na, nn) = (norm(&a), norm(&n));
        let rel = norm(&diff) / (na + nn).max(ZERO_FLOOR);
        if rel >= worst.0 {
            worst = (rel, gname.clone());
        }
        groups.insert(
            gname,
            GroupError {
                rel_err: rel,
                analytic_norm: na,
                numeric_norm: nn,
                entries: a.len(),
            },
        );
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        worst_group: worst.1,
        worst_param: worst_param.1,
        groups,
    })
}
