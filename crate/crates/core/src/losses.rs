//! Loss terms: two-view consistency against the teacher, pseudo-label cross
//! entropy on both views, softmax-triplet over hardest in-batch pairs, and
//! their weighted total.

use serde::{Deserialize, Serialize};

use crate::clustering::Label;
use crate::diff::{softplus, Array, Graph, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Which similarity the softmax-triplet term puts in its numerator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletNumerator {
    /// `exp(s_ip)` on top: minimised by pulling positives in and pushing negatives out.
    Positive,
    /// `exp(s_in)` on top, with `s = −distance`: minimised by pulling the hardest
    /// negative closer than the hardest positive.
    Negative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub xi: f64,
    pub eta: f64,
    pub triplet_numerator: TripletNumerator,
    /// Mine and score triplets on unit-length embeddings.
    pub triplet_normalize: bool,
    /// Multiplies the projections before the consistency softmax.
    pub co_scale: f64,
    /// Unit-normalize the projections before scaling.
    pub co_normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            xi: 0.35,
            eta: 0.1,
            triplet_numerator: TripletNumerator::Positive,
            triplet_normalize: true,
            co_scale: 1.0,
            co_normalize: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.xi, self.eta].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.co_scale > 0.0) || !self.co_scale.is_finite() {
            return Err(Error::Config(format!("loss.co_scale must be finite and positive, got {}", self.co_scale)));
        }
        Ok(())
    }

    /// `λ·ce + ξ·st + η·co` on plain values.
    pub fn total(&self, ce: f64, st: f64, co: f64) -> f64 {
        self.lambda * ce + self.xi * st + self.eta * co
    }
}

/// A label-dependent loss plus how many samples actually contributed.
#[derive(Clone, Copy, Debug)]
pub struct LabeledLoss {
    pub loss: Var,
    pub used: usize,
}

/// `mean_n [ H(ṽ₁, v₂) + H(ṽ₂, v₁) ]` where `tv*` are teacher distributions.
///
/// Only `v1`/`v2` can carry gradient.
pub fn consistency_loss(g: &mut Graph, v1: Var, v2: Var, tv1: &Array, tv2: &Array) -> Result<Var> {
    let n = g.value(v1).dim(0);
    for (student, teacher) in [(v2, tv1), (v1, tv2)] {
        if g.value(student).shape() != teacher.shape() {
            return Err(Error::dim("consistency_loss", g.value(student).shape(), teacher.shape()));
        }
    }
    let h12 = cross_entropy_sum(g, tv1, v2)?;
    let h21 = cross_entropy_sum(g, tv2, v1)?;
    let both = g.add(h12, h21)?;
    Ok(g.scale(both, 1.0 / n.max(1) as f64))
}

/// `−Σ target · ln(max(pred, floor))` over every element.
fn cross_entropy_sum(g: &mut Graph, target: &Array, pred: Var) -> Result<Var> {
    let logp = g.log_clamped(pred, LOG_FLOOR);
    let weighted = g.mul_const(logp, target.clone())?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0))
}

/// Value-level consistency loss.
pub fn consistency_value(v1: &Array, v2: &Array, tv1: &Array, tv2: &Array) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(v1.clone()), g.constant(v2.clone()));
    let l = consistency_loss(&mut g, a, b, tv1, tv2)?;
    Ok(g.value(l).item())
}

/// Pseudo-label cross entropy summed over views: `Σ_views −(1/N) Σ_i ln p(ŷ_i)`.
///
/// `probs` are per-view `[N×M]` class probabilities. Noise samples are skipped
/// and `N` counts only labelled samples; with none, the loss is a constant 0.
pub fn cluster_ce_loss(g: &mut Graph, probs: &[Var], labels: &[Label]) -> Result<LabeledLoss> {
    let labeled: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|c| (i, c)))
        .collect();
    if labeled.is_empty() || probs.is_empty() {
        return Ok(LabeledLoss {
            loss: g.constant(Array::scalar(0.0)),
            used: 0,
        });
    }
    let mut total: Option<Var> = None;
    for &p in probs {
        let shape = g.value(p).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim("cluster_ce_loss", &shape, &[labels.len()]));
        }
        let m = shape[1];
        if let Some(&(_, bad)) = labeled.iter().find(|(_, c)| *c >= m) {
            return Err(Error::Contract(format!("pseudo-label {bad} out of range for {m} classes")));
        }
        let picks = labeled.iter().map(|&(i, c)| i * m + c).collect();
        let chosen = g.gather(p, picks)?;
        let logs = g.log_clamped(chosen, LOG_FLOOR);
        let s = g.sum(logs);
        let term = g.scale(s, -1.0 / labeled.len() as f64);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(LabeledLoss {
        loss: total.expect("at least one view"),
        used: labeled.len(),
    })
}

/// Value-level [`cluster_ce_loss`]; returns `(loss, labelled count)`.
pub fn cluster_ce_value(probs: &[&Array], labels: &[Label]) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = probs.iter().map(|p| g.constant((*p).clone())).collect();
    let out = cluster_ce_loss(&mut g, &vars, labels)?;
    Ok((g.value(out.loss).item(), out.used))
}

/// Hardest pairs for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardPair {
    pub anchor: usize,
    /// Farthest same-label sample.
    pub positive: usize,
    /// Closest different-label sample.
    pub negative: usize,
    /// `−‖h_anchor − h_negative‖`.
    pub sim_in: f64,
    /// `−‖h_anchor − h_positive‖`.
    pub sim_ip: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HardestPairs {
    pub pairs: Vec<HardPair>,
    /// Labelled anchors lacking a positive or a negative in the batch.
    pub skipped: Vec<usize>,
}

/// Mines hardest pairs from an `N×N` distance matrix. Ties go to the lower index;
/// noise samples are neither anchors nor partners.
pub fn mine_hardest(dist: &Array, labels: &[Label]) -> Result<HardestPairs> {
    let n = labels.len();
    if dist.shape() != [n, n] {
        return Err(Error::dim("mine_hardest", dist.shape(), &[n, n]));
    }
    let mut out = HardestPairs::default();
    for (a, la) in labels.iter().enumerate() {
        let Some(la) = la else { continue };
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for (j, lj) in labels.iter().enumerate() {
            let Some(lj) = lj else { continue };
            if j == a {
                continue;
            }
            let d = dist.get(&[a, j]);
            if lj == la {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        match (pos, neg) {
            (Some((p, dp)), Some((q, dn))) => out.pairs.push(HardPair {
                anchor: a,
                positive: p,
                negative: q,
                sim_in: -dn,
                sim_ip: -dp,
            }),
            _ => out.skipped.push(a),
        }
    }
    Ok(out)
}

/// Hardest pairs straight from embeddings `h: [N×D]`.
pub fn hardest_pairs(h: &Array, labels: &[Label]) -> Result<HardestPairs> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let d = g.pairwise_distance(hv)?;
    mine_hardest(g.value(d), labels)
}

/// Per-anchor softmax-triplet term from the two similarities.
pub fn triplet_term(sim_in: f64, sim_ip: f64, numerator: TripletNumerator) -> f64 {
    match numerator {
        // −ln(e^in / (e^in + e^ip)) = softplus(ip − in)
        TripletNumerator::Negative => softplus(sim_ip - sim_in),
        TripletNumerator::Positive => softplus(sim_in - sim_ip),
    }
}

/// Softmax-triplet loss summed over views, each view averaged over its anchors.
pub fn softmax_triplet_loss(
    g: &mut Graph,
    views: &[Var],
    labels: &[Label],
    numerator: TripletNumerator,
) -> Result<LabeledLoss> {
    let mut total: Option<Var> = None;
    let mut used = 0;
    for &h in views {
        let d = g.pairwise_distance(h)?;
        let n = labels.len();
        let mined = mine_hardest(g.value(d), labels)?;
        if mined.pairs.is_empty() {
            continue;
        }
        used = used.max(mined.pairs.len());
        let pos_idx = mined.pairs.iter().map(|p| p.anchor * n + p.positive).collect();
        let neg_idx = mined.pairs.iter().map(|p| p.anchor * n + p.negative).collect();
        let d_pos = g.gather(d, pos_idx)?;
        let d_neg = g.gather(d, neg_idx)?;
        // With s = −d: ip − in = d_neg − d_pos.
        let arg = match numerator {
            TripletNumerator::Negative => g.sub(d_neg, d_pos)?,
            TripletNumerator::Positive => g.sub(d_pos, d_neg)?,
        };
        let sp = g.softplus(arg);
        let s = g.sum(sp);
        let term = g.scale(s, 1.0 / mined.pairs.len() as f64);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(loss) => LabeledLoss { loss, used },
        None => LabeledLoss {
            loss: g.constant(Array::scalar(0.0)),
            used: 0,
        },
    })
}

/// `λ·ce + ξ·st + η·co`.
pub fn total_loss(g: &mut Graph, weights: &LossWeights, ce: Var, st: Var, co: Var) -> Result<Var> {
    let a = g.scale(ce, weights.lambda);
    let b = g.scale(st, weights.xi);
    let c = g.scale(co, weights.eta);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}
