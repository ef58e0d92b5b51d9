//! Cross-camera retrieval metrics (mAP, CMC) and clustering diagnostics.
//!
//! Average precision follows the Market-1501 convention: the mean, over the
//! ranks of the true matches, of precision at that rank. There is no
//! interpolation. Gallery entries sharing both identity and camera with the
//! query are removed before ranking. Equal distances rank by gallery index.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{embed, Label};
use crate::data::{Dataset, Split};
use crate::ddl::DdlConfig;
use crate::diff::Array;
use crate::encoder::ModelState;
use crate::error::{Error, Result};

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// Identity and camera of one query or gallery image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Meta {
    pub identity: usize,
    pub camera: usize,
}

impl Meta {
    pub fn list(identities: &[usize], cameras: &[usize]) -> Vec<Meta> {
        identities
            .iter()
            .zip(cameras)
            .map(|(&identity, &camera)| Meta { identity, camera })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub ap: f64,
    /// 1-based rank of the first true match in the filtered ranking.
    pub first_match_rank: usize,
    pub num_matches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    /// `(rank, accuracy)` for every rank in [`CMC_RANKS`].
    pub cmc: Vec<(usize, f64)>,
    pub per_query: Vec<QueryResult>,
    pub num_queries: usize,
    /// Queries without any valid match; left out of every average.
    pub excluded: Vec<usize>,
}

/// The metrics file written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
}

impl EvalResult {
    pub fn cmc_at(&self, rank: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == rank).map(|(_, v)| *v)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            map: self.map,
            cmc1: self.cmc_at(1).unwrap_or(0.0),
            cmc5: self.cmc_at(5).unwrap_or(0.0),
            cmc10: self.cmc_at(10).unwrap_or(0.0),
        }
    }

    /// `query,ap,first_match_rank,num_matches`, one row per scored query.
    pub fn write_per_query_csv(&self, path: &Path, query_names: Option<&[String]>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["query", "ap", "first_match_rank", "num_matches"])?;
        for q in &self.per_query {
            let name = query_names
                .and_then(|n| n.get(q.query).cloned())
                .unwrap_or_else(|| q.query.to_string());
            w.write_record([name, q.ap.to_string(), q.first_match_rank.to_string(), q.num_matches.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Euclidean distances between the rows of `query: [Q×D]` and `gallery: [G×D]`.
pub fn distance_matrix(query: &Array, gallery: &Array) -> Result<Array> {
    if query.ndim() != 2 || gallery.ndim() != 2 || query.dim(1) != gallery.dim(1) {
        return Err(Error::dim("distance_matrix", query.shape(), gallery.shape()));
    }
    if !query.is_finite() || !gallery.is_finite() {
        return Err(Error::Input("embeddings must be finite".into()));
    }
    let (q, g) = (query.dim(0), gallery.dim(0));
    let mut out = Vec::with_capacity(q * g);
    for a in query.rows().take(q) {
        for b in gallery.rows().take(g) {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(d2.sqrt());
        }
    }
    Array::new(vec![q, g], out)
}

/// Ranks the gallery for every query and scores the rankings.
pub fn evaluate(dist: &Array, query: &[Meta], gallery: &[Meta]) -> Result<EvalResult> {
    if dist.ndim() != 2 || dist.dim(0) != query.len() || dist.dim(1) != gallery.len() {
        return Err(Error::dim("evaluate", dist.shape(), &[query.len(), gallery.len()]));
    }
    if dist.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Input("distance matrix contains NaN".into()));
    }
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for (qi, qm) in query.iter().enumerate() {
        let row = dist.row(qi);
        let mut order: Vec<usize> = (0..gallery.len())
            .filter(|&gi| !(gallery[gi].identity == qm.identity && gallery[gi].camera == qm.camera))
            .collect();
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));

        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = 0usize;
        for (rank0, &gi) in order.iter().enumerate() {
            if gallery[gi].identity == qm.identity {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                if first == 0 {
                    first = rank0 + 1;
                }
            }
        }
        if hits == 0 {
            excluded.push(qi);
            continue;
        }
        per_query.push(QueryResult {
            query: qi,
            ap: precision_sum / hits as f64,
            first_match_rank: first,
            num_matches: hits,
        });
    }
    if per_query.is_empty() {
        return Err(Error::Input(format!(
            "none of the {} queries has a cross-camera match in the gallery",
            query.len()
        )));
    }
    let n = per_query.len() as f64;
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / n;
    let cmc = CMC_RANKS
        .iter()
        .map(|&k| (k, per_query.iter().filter(|q| q.first_match_rank <= k).count() as f64 / n))
        .collect();
    Ok(EvalResult {
        map,
        cmc,
        num_queries: per_query.len(),
        per_query,
        excluded,
    })
}

/// Embeds query and gallery with the chosen network (dropblock off) and evaluates.
pub fn evaluate_model(state: &ModelState, dataset: &Dataset, use_teacher: bool) -> Result<EvalResult> {
    let qi = dataset.indices(Split::Query);
    let gi = dataset.indices(Split::Gallery);
    if qi.is_empty() || gi.is_empty() {
        return Err(Error::Dataset("dataset needs non-empty query and gallery splits".into()));
    }
    let off = DdlConfig::disabled();
    let qe = embed(state, &dataset.images(&qi)?, &off, 64, use_teacher)?;
    let ge = embed(state, &dataset.images(&gi)?, &off, 64, use_teacher)?;
    evaluate(
        &distance_matrix(&qe, &ge)?,
        &Meta::list(&dataset.identities(&qi), &dataset.cameras(&qi)),
        &Meta::list(&dataset.identities(&gi), &dataset.cameras(&gi)),
    )
}

/// Evaluates on flattened raw pixels, a model-free reference point.
pub fn evaluate_pixels(dataset: &Dataset) -> Result<EvalResult> {
    let flat = |idx: &[usize]| -> Result<Array> {
        let imgs = dataset.images(idx)?;
        let n = idx.len();
        let d = imgs.len() / n.max(1);
        imgs.reshape(vec![n, d])
    };
    let qi = dataset.indices(Split::Query);
    let gi = dataset.indices(Split::Gallery);
    evaluate(
        &distance_matrix(&flat(&qi)?, &flat(&gi)?)?,
        &Meta::list(&dataset.identities(&qi), &dataset.cameras(&qi)),
        &Meta::list(&dataset.identities(&gi), &dataset.cameras(&gi)),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub num_clusters: usize,
    pub noise_fraction: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn pairs(n: usize) -> u64 {
    let n = n as u64;
    n * n.saturating_sub(1) / 2
}

/// Pairwise precision/recall/F1 of a pseudo-label partition against the true
/// identities. Noise points are singletons. With no predicted pairs precision
/// is 1; with no true pairs recall is 1.
pub fn cluster_quality(labels: &[Label], truth: &[usize]) -> Result<ClusterQuality> {
    if labels.len() != truth.len() {
        return Err(Error::dim("cluster_quality", &[labels.len()], &[truth.len()]));
    }
    let mut pred_sizes: HashMap<usize, usize> = HashMap::new();
    let mut true_sizes: HashMap<usize, usize> = HashMap::new();
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (l, &t) in labels.iter().zip(truth) {
        *true_sizes.entry(t).or_default() += 1;
        if let Some(c) = l {
            *pred_sizes.entry(*c).or_default() += 1;
            *joint.entry((*c, t)).or_default() += 1;
        }
    }
    let pred_pairs: u64 = pred_sizes.values().map(|&n| pairs(n)).sum();
    let true_pairs: u64 = true_sizes.values().map(|&n| pairs(n)).sum();
    let tp: u64 = joint.values().map(|&n| pairs(n)).sum();
    let precision = if pred_pairs == 0 { 1.0 } else { tp as f64 / pred_pairs as f64 };
    let recall = if true_pairs == 0 { 1.0 } else { tp as f64 / true_pairs as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let noise = labels.iter().filter(|l| l.is_none()).count();
    Ok(ClusterQuality {
        num_clusters: pred_sizes.len(),
        noise_fraction: if labels.is_empty() { 0.0 } else { noise as f64 / labels.len() as f64 },
        precision,
        recall,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(identity: usize, camera: usize) -> Meta {
        Meta { identity, camera }
    }

    #[test]
    fn identical_vectors_have_zero_distance() {
        let a = Array::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(distance_matrix(&a, &a).unwrap().data(), &[0.0]);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let q = Array::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = Array::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(distance_matrix(&q, &g).unwrap().item(), 2f64.sqrt());
    }

    #[test]
    fn distance_matches_loops_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |n: usize, rng: &mut ChaCha8Rng| {
            Array::new(vec![n, 3], (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
        };
        let q = mk(5, &mut rng);
        let g = mk(7, &mut rng);
        let d = distance_matrix(&q, &g).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (q.get(&[i, k]) - g.get(&[j, k])).powi(2);
                }
                assert!((d.get(&[i, j]) - s.sqrt()).abs() < 1e-12);
            }
        }
        let dd = distance_matrix(&q, &q).unwrap();
        for i in 0..5 {
            assert_eq!(dd.get(&[i, i]), 0.0);
            for j in 0..5 {
                assert_eq!(dd.get(&[i, j]), dd.get(&[j, i]));
            }
        }
        assert!(distance_matrix(&q, &Array::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn perfect_ranking() {
        let d = Array::from_rows(&[[0.1, 0.2, 0.9], [0.8, 0.1, 0.2]]).unwrap();
        let r = evaluate(&d, &[m(0, 1), m(1, 1)], &[m(0, 2), m(1, 2), m(2, 2)]).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc_at(1), Some(1.0));
    }

    #[test]
    fn single_match_at_rank_three() {
        let d = Array::new(vec![1, 10], (0..10).map(|i| i as f64).collect()).unwrap();
        let gallery: Vec<Meta> = (0..10).map(|i| if i == 2 { m(0, 2) } else { m(i + 1, 2) }).collect();
        let r = evaluate(&d, &[m(0, 1)], &gallery).unwrap();
        assert!((r.map - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.cmc_at(1), Some(0.0));
        assert_eq!(r.cmc_at(5), Some(1.0));
        // Negating the distances moves the match from rank 3 to rank 8.
        let neg = d.map(|v| -v);
        let r = evaluate(&neg, &[m(0, 1)], &gallery).unwrap();
        assert_eq!(r.per_query[0].first_match_rank, 8);
        assert!((r.map - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn same_camera_matches_are_filtered() {
        // Gallery 0 is the same person on the same camera: ignored.
        let d = Array::from_rows(&[[0.0, 1.0, 2.0]]).unwrap();
        let r = evaluate(&d, &[m(0, 1)], &[m(0, 1), m(5, 2), m(0, 2)]).unwrap();
        assert_eq!(r.per_query[0].first_match_rank, 2);
        assert!((r.map - 0.5).abs() < 1e-15);
    }

    #[test]
    fn query_without_match_is_excluded() {
        let d = Array::from_rows(&[[0.0, 1.0], [0.0, 1.0]]).unwrap();
        let r = evaluate(&d, &[m(0, 1), m(9, 1)], &[m(0, 2), m(1, 2)]).unwrap();
        assert_eq!(r.excluded, vec![1]);
        assert_eq!(r.num_queries, 1);
        assert!(evaluate(&Array::from_rows(&[[0.0]]).unwrap(), &[m(3, 1)], &[m(4, 1)]).is_err());
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let d = Array::from_rows(&[[1.0, 1.0, 1.0]]).unwrap();
        let r = evaluate(&d, &[m(0, 1)], &[m(1, 2), m(0, 2), m(2, 2)]).unwrap();
        assert_eq!(r.per_query[0].first_match_rank, 2);
    }

    #[test]
    fn cluster_quality_edges() {
        let truth = [0, 0, 1, 1, 2];
        let same: Vec<Label> = truth.iter().map(|&t| Some(t)).collect();
        assert_eq!(cluster_quality(&same, &truth).unwrap().f1, 1.0);
        let noise = vec![None; 5];
        let q = cluster_quality(&noise, &truth).unwrap();
        assert_eq!(q.recall, 0.0);
        assert_eq!(q.f1, 0.0);
        assert_eq!(q.noise_fraction, 1.0);
    }

    fn brute_quality(labels: &[Label], truth: &[usize]) -> (f64, f64) {
        let (mut tp, mut pp, mut tt) = (0, 0, 0);
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                let same_pred = labels[i].is_some() && labels[i] == labels[j];
                let same_true = truth[i] == truth[j];
                pp += same_pred as u32;
                tt += same_true as u32;
                tp += (same_pred && same_true) as u32;
            }
        }
        let p = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
        let r = if tt == 0 { 1.0 } else { tp as f64 / tt as f64 };
        (p, r)
    }

    proptest! {
        #[test]
        fn cluster_quality_matches_pair_enumeration(
            raw in proptest::collection::vec((0usize..4, -1i64..4), 1..25)
        ) {
            let truth: Vec<usize> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<Label> = raw.iter().map(|r| (r.1 >= 0).then_some(r.1 as usize)).collect();
            let q = cluster_quality(&labels, &truth).unwrap();
            let (p, r) = brute_quality(&labels, &truth);
            prop_assert!((q.precision - p).abs() < 1e-12);
            prop_assert!((q.recall - r).abs() < 1e-12);
        }

        #[test]
        fn cmc_is_monotone(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (nq, ng) = (rng.random_range(1..6), rng.random_range(2..20));
            let d = Array::new(vec![nq, ng], (0..nq * ng).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let q: Vec<Meta> = (0..nq).map(|_| m(rng.random_range(0..3), 0)).collect();
            let g: Vec<Meta> = (0..ng).map(|_| m(rng.random_range(0..3), 1)).collect();
            if let Ok(r) = evaluate(&d, &q, &g) {
                let c: Vec<f64> = r.cmc.iter().map(|x| x.1).collect();
                prop_assert!(0.0 <= c[0] && c[0] <= c[1] && c[1] <= c[2] && c[2] <= 1.0);
                let mean = r.per_query.iter().map(|x| x.ap).sum::<f64>() / r.num_queries as f64;
                prop_assert!((mean - r.map).abs() < 1e-15);
            }
        }
    }
}
