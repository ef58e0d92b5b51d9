//! DBSCAN pseudo-labelling over embeddings.

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddl::DdlConfig;
use crate::diff::Array;
use crate::encoder::ModelState;
use crate::error::{Error, Result};

/// A cluster id, or `None` for a noise point.
pub type Label = Option<usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanConfig {
    pub eps: f64,
    /// Neighbourhood size (self included) that makes a point core.
    pub min_pts: usize,
    /// L2-normalise points before measuring distances.
    pub normalize: bool,
    /// When set, each epoch's clustering replaces `eps` with this quantile
    /// of the pairwise distances, which tracks the drifting feature scale.
    pub eps_quantile: Option<f64>,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self {
            eps: 0.6,
            min_pts: 3,
            normalize: true,
            eps_quantile: Some(0.02),
        }
    }
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("dbscan.eps must be positive, got {}", self.eps)));
        }
        if let Some(q) = self.eps_quantile {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::Config(format!("dbscan.eps_quantile must lie in (0, 1), got {q}")));
            }
        }
        if self.min_pts < 1 {
            return Err(Error::Config("dbscan.min_pts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelAssignment {
    pub labels: Vec<Label>,
    pub num_clusters: usize,
    pub epoch: usize,
    /// Neighbourhood radius actually used.
    pub eps: f64,
}

impl PseudoLabelAssignment {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn noise_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.noise_count() as f64 / self.labels.len() as f64
    }

    /// Sample indices of every cluster, by cluster id.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    /// Writes `image_id,pseudo_label,epoch` rows; noise is written as `-1`.
    pub fn write_csv(&self, path: &Path, image_ids: &[String]) -> Result<()> {
        if image_ids.len() != self.labels.len() {
            return Err(Error::dim("write_csv", &[image_ids.len()], &[self.labels.len()]));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_id", "pseudo_label", "epoch"])?;
        for (id, l) in image_ids.iter().zip(&self.labels) {
            let label = l.map_or(-1, |c| c as i64);
            w.write_record([id.clone(), label.to_string(), self.epoch.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn l2_normalize_rows(points: &Array) -> Array {
    let mut out = points.clone();
    let width = points.shape().get(1).copied().unwrap_or(0).max(1);
    for row in out.data_mut().chunks_mut(width) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn region_query(points: &Array, i: usize, eps: f64) -> Vec<usize> {
    let n = points.dim(0);
    let pi = points.row(i);
    (0..n)
        .filter(|&j| {
            let d2: f64 = pi.iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() <= eps
        })
        .collect()
}

/// Density-based clustering of `points: [N×D]`.
///
/// Core points have at least `min_pts` neighbours within `eps` (inclusive,
/// self counted). Points are visited in index order, so a border point reachable
/// from several clusters joins the one discovered first.
pub fn dbscan(points: &Array, cfg: &DbscanConfig) -> Result<PseudoLabelAssignment> {
    cfg.validate()?;
    if points.ndim() != 2 {
        return Err(Error::dim("dbscan", points.shape(), &[0, 0]));
    }
    if !points.is_finite() {
        return Err(Error::Input("dbscan input contains non-finite coordinates".into()));
    }
    let pts = if cfg.normalize {
        l2_normalize_rows(points)
    } else {
        points.clone()
    };
    let n = pts.dim(0);
    let neighbours: Vec<Vec<usize>> = (0..n).map(|i| region_query(&pts, i, cfg.eps)).collect();
    let is_core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= cfg.min_pts).collect();

    let mut labels: Vec<Label> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if labels[start].is_some() || !is_core[start] {
            continue;
        }
        let cluster = next;
        next += 1;
        labels[start] = Some(cluster);
        let mut queue: VecDeque<usize> = neighbours[start].iter().copied().collect();
        while let Some(q) = queue.pop_front() {
            if labels[q].is_some() {
                continue;
            }
            labels[q] = Some(cluster);
            if is_core[q] {
                queue.extend(neighbours[q].iter().copied().filter(|&r| labels[r].is_none()));
            }
        }
    }
    Ok(PseudoLabelAssignment {
        labels,
        num_clusters: next,
        epoch: 0,
        eps: cfg.eps,
    })
}

/// The `q`-quantile (nearest rank, rounding down) of all pairwise distances
/// between distinct rows, measured as [`dbscan`] would measure them.
pub fn distance_quantile(points: &Array, q: f64, normalize: bool) -> Result<f64> {
    if points.ndim() != 2 || points.dim(0) < 2 {
        return Err(Error::Input("need at least two points for a distance quantile".into()));
    }
    let pts = if normalize { l2_normalize_rows(points) } else { points.clone() };
    let n = pts.dim(0);
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = pts.row(i).iter().zip(pts.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(d2.sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    Ok(d[((d.len() - 1) as f64 * q.clamp(0.0, 1.0)) as usize])
}

/// Embeds `images: [N×C×H×W]` with the teacher, dropblock off, in chunks.
pub fn teacher_embeddings(state: &ModelState, images: &Array, ddl_cfg: &DdlConfig, chunk: usize) -> Result<Array> {
    embed(state, images, ddl_cfg, chunk, true)
}

/// Like [`teacher_embeddings`], with a choice of teacher or student.
pub fn embed(state: &ModelState, images: &Array, ddl_cfg: &DdlConfig, chunk: usize, use_teacher: bool) -> Result<Array> {
    let n = images.dim(0);
    let off = ddl_cfg.eval_mode();
    // Eval mode never draws from this.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    let idx: Vec<usize> = (0..n).collect();
    for block in idx.chunks(chunk.max(1)) {
        let h = state.encode(&images.select_rows(block), &off, &mut rng, use_teacher)?;
        dim = h.dim(1);
        rows.extend_from_slice(h.data());
    }
    Array::new(vec![n, dim], rows)
}

/// Clusters the whole training set once, from teacher features with dropblock off.
pub fn assign_epoch_labels(
    images: &Array,
    state: &ModelState,
    ddl_cfg: &DdlConfig,
    cfg: &DbscanConfig,
    epoch: usize,
) -> Result<PseudoLabelAssignment> {
    let h = teacher_embeddings(state, images, ddl_cfg, 64)?;
    let mut cfg = cfg.clone();
    if let Some(q) = cfg.eps_quantile {
        // Guard against a zero radius when many embeddings coincide.
        cfg.eps = distance_quantile(&h, q, cfg.normalize)?.max(f64::MIN_POSITIVE);
    }
    let mut out = dbscan(&h, &cfg)?;
    out.epoch = epoch;
    Ok(out)
}
