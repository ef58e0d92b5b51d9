//! Dynamic dropblock: zero one random rectangle per image, sized as a fraction
//! of the feature map it is applied to. Active only in training mode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Number of encoder stages a dropblock can sit in front of.
pub const NUM_STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdlConfig {
    /// Erased height as a fraction of the map height.
    pub alpha: f64,
    /// Erased width as a fraction of the map width.
    pub beta: f64,
    /// Stage indices whose *input* is masked.
    pub stages: Vec<usize>,
    #[serde(skip, default = "train_mode_default")]
    pub train_mode: bool,
}

fn train_mode_default() -> bool {
    true
}

impl Default for DdlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.3,
            stages: vec![0, 1, 2],
            train_mode: true,
        }
    }
}

impl DdlConfig {
    pub fn disabled() -> Self {
        Self {
            stages: Vec::new(),
            ..Self::default()
        }
    }

    pub fn with_stages(mut self, stages: &[usize]) -> Self {
        self.stages = stages.to_vec();
        self
    }

    /// Same geometry with masking switched off.
    pub fn eval_mode(&self) -> Self {
        Self {
            train_mode: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!(
                "ddl.alpha and ddl.beta must lie in (0, 1), got ({}, {})",
                self.alpha, self.beta
            )));
        }
        if let Some(bad) = self.stages.iter().find(|&&s| s >= NUM_STAGES) {
            return Err(Error::Config(format!("ddl stage {bad} outside 0..{NUM_STAGES}")));
        }
        Ok(())
    }

    /// True when masks are actually drawn in front of `stage`.
    pub fn active_at(&self, stage: usize) -> bool {
        self.train_mode && self.stages.contains(&stage)
    }

    /// Erased rectangle size for an `h×w` map.
    pub fn rect_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let rh = scaled_extent(self.alpha, h);
        let rw = scaled_extent(self.beta, w);
        if rh >= h || rw >= w {
            return Err(Error::Config(format!(
                "erase region {rh}x{rw} would cover a whole {h}x{w} map (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        Ok((rh, rw))
    }
}

/// `max(1, round_half_up(ratio·extent))`.
fn scaled_extent(ratio: f64, extent: usize) -> usize {
    ((ratio * extent as f64 + 0.5).floor() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }
}

/// Binary `H×W` mask with exactly one zeroed rectangle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropMask {
    pub height: usize,
    pub width: usize,
    pub rect: Rect,
}

impl DropMask {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        if self.rect.contains(row, col) {
            0.0
        } else {
            1.0
        }
    }

    /// The mask as an `H×W` array of zeros and ones.
    pub fn values(&self) -> Array {
        let data = (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .map(|(r, c)| self.value(r, c))
            .collect();
        Array::new(vec![self.height, self.width], data).expect("mask shape")
    }

    pub fn zero_fraction(&self) -> f64 {
        (self.rect.height * self.rect.width) as f64 / (self.height * self.width) as f64
    }
}

/// Draws one mask; the rectangle's top-left corner is uniform over all valid positions.
pub fn generate_mask<R: Rng + ?Sized>(h: usize, w: usize, cfg: &DdlConfig, rng: &mut R) -> Result<DropMask> {
    if h == 0 || w == 0 {
        return Err(Error::Input(format!("cannot mask an empty {h}x{w} map")));
    }
    let (rh, rw) = cfg.rect_size(h, w)?;
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    Ok(DropMask {
        height: h,
        width: w,
        rect: Rect {
            top,
            left,
            height: rh,
            width: rw,
        },
    })
}

/// Masks the `[N×C×H×W]` value behind `x`, one fresh mask per image shared by all
/// its channels. Outside training mode `x` itself is returned and nothing is drawn.
pub fn apply<R: Rng + ?Sized>(g: &mut Graph, x: Var, cfg: &DdlConfig, rng: &mut R) -> Result<(Var, Vec<DropMask>)> {
    if !cfg.train_mode {
        return Ok((x, Vec::new()));
    }
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("ddl", &shape, &[0, 0, 0, 0]));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let masks = (0..n)
        .map(|_| generate_mask(h, w, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let factor = broadcast_masks(&masks, c)?;
    Ok((g.mul_const(x, factor)?, masks))
}

/// Value-level [`apply`] for callers outside a graph.
pub fn apply_array<R: Rng + ?Sized>(feature: &Array, cfg: &DdlConfig, rng: &mut R) -> Result<Array> {
    let mut g = Graph::new();
    let x = g.constant(feature.clone());
    let (y, _) = apply(&mut g, x, cfg, rng)?;
    Ok(g.value(y).clone())
}

/// Expands per-image masks to `[N×C×H×W]`.
pub fn broadcast_masks(masks: &[DropMask], channels: usize) -> Result<Array> {
    let Some(first) = masks.first() else {
        return Err(Error::Input("no masks to broadcast".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(masks.len() * channels * h * w);
    for m in masks {
        let plane = m.values();
        for _ in 0..channels {
            data.extend_from_slice(plane.data());
        }
    }
    Array::new(vec![masks.len(), channels, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::central_difference;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(alpha: f64, beta: f64) -> DdlConfig {
        DdlConfig {
            alpha,
            beta,
            ..DdlConfig::default()
        }
    }

    #[test]
    fn default_ratios_on_16x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = generate_mask(16, 8, &cfg(0.4, 0.3), &mut rng).unwrap();
        assert_eq!((m.rect.height, m.rect.width), (6, 2));
        assert_eq!(m.zero_fraction(), 12.0 / 128.0);
        let zeros = m.values().data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 12);
    }

    #[test]
    fn small_map_erases_single_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = generate_mask(4, 4, &cfg(0.25, 0.25), &mut rng).unwrap();
        assert_eq!((m.rect.height, m.rect.width), (1, 1));
        assert_eq!(m.values().data().iter().filter(|&&v| v == 0.0).count(), 1);
    }

    #[test]
    fn tiny_ratio_still_erases_something() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = generate_mask(4, 4, &cfg(0.01, 0.01), &mut rng).unwrap();
        assert_eq!((m.rect.height, m.rect.width), (1, 1));
    }

    #[test]
    fn covering_region_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // round(0.9·2) = 2 covers the full height.
        assert!(matches!(generate_mask(2, 8, &cfg(0.9, 0.3), &mut rng), Err(Error::Config(_))));
        assert!(matches!(generate_mask(8, 1, &cfg(0.4, 0.3), &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn validate_rejects_bad_config() {
        assert!(cfg(0.0, 0.3).validate().is_err());
        assert!(cfg(0.4, 1.0).validate().is_err());
        assert!(DdlConfig::default().with_stages(&[0, 5]).validate().is_err());
        assert!(DdlConfig::default().with_stages(&[0, 1, 2, 3, 4]).validate().is_ok());
    }

    #[test]
    fn positions_are_uniform() {
        // 8x8 map, 4x4 rect: 5x5 = 25 valid corners.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 10_000;
        let mut counts = [[0usize; 5]; 5];
        for _ in 0..draws {
            let m = generate_mask(8, 8, &cfg(0.5, 0.5), &mut rng).unwrap();
            assert_eq!((m.rect.height, m.rect.width), (4, 4));
            counts[m.rect.top][m.rect.left] += 1;
        }
        let p = 1.0 / 25.0;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for row in counts {
            for c in row {
                assert!((c as f64 - expected).abs() <= 3.0 * sigma, "count {c} vs {expected}");
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
        }
        // 99.9% quantile of chi-square with 24 degrees of freedom.
        assert!(chi2 < 51.18, "chi2 = {chi2}");
    }

    #[test]
    fn eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::new(vec![2, 3, 4, 4], (0..96).map(|i| i as f64 - 40.0).collect()).unwrap();
        let off = DdlConfig::default().eval_mode();
        let once = apply_array(&x, &off, &mut rng).unwrap();
        let twice = apply_array(&once, &off, &mut rng).unwrap();
        assert!(once.bit_eq(&x));
        assert!(twice.bit_eq(&x));
    }

    #[test]
    fn corner_rect_zeroes_top_left_block() {
        let mut g = Graph::new();
        let x = g.param(Array::full(&[1, 1, 4, 4], 1.0));
        let mask = DropMask {
            height: 4,
            width: 4,
            rect: Rect {
                top: 0,
                left: 0,
                height: 2,
                width: 2,
            },
        };
        let y = g.mul_const(x, broadcast_masks(std::slice::from_ref(&mask), 1).unwrap()).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if r < 2 && c < 2 { 0.0 } else { 1.0 };
                assert_eq!(g.value(y).get(&[0, 0, r, c]), want);
            }
        }
        let l = g.sum(y);
        let grad = g.backward(l).unwrap();
        assert_eq!(grad.get(x).unwrap().data(), mask.values().data());
    }

    #[test]
    fn gradient_of_sum_is_broadcast_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array::new(vec![3, 2, 6, 5], (0..180).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let (y, masks) = apply(&mut g, xv, &DdlConfig::default(), &mut rng).unwrap();
        assert_eq!(masks.len(), 3);
        let l = g.sum(y);
        let analytic = g.backward(l).unwrap().get(xv).unwrap().clone();
        let factor = broadcast_masks(&masks, 2).unwrap();
        let numeric = central_difference(
            |p| p.iter().zip(factor.data()).map(|(a, b)| a * b).sum(),
            x.data(),
            1e-5,
        );
        for ((a, n), f) in analytic.data().iter().zip(&numeric).zip(factor.data()) {
            assert_eq!(a, f);
            assert!((a - n).abs() < 1e-9);
        }
    }

    #[test]
    fn independent_streams_usually_differ() {
        // 8x8, default ratios: 3x2 rect, 6*7 = 42 positions per image.
        let x = Array::full(&[1, 1, 8, 8], 1.0);
        let mut differ = 0;
        for seed in 0..200u64 {
            let a = apply_array(&x, &DdlConfig::default(), &mut ChaCha8Rng::seed_from_u64(2 * seed)).unwrap();
            let b = apply_array(&x, &DdlConfig::default(), &mut ChaCha8Rng::seed_from_u64(2 * seed + 1)).unwrap();
            if !a.bit_eq(&b) {
                differ += 1;
            }
        }
        // Expected about 200·(1 − 1/42) ≈ 195.
        assert!(differ >= 185, "only {differ} of 200 pairs differ");
    }

    proptest! {
        #[test]
        fn zero_fraction_is_exact(h in 2usize..40, w in 2usize..40, a in 0.05f64..0.6, b in 0.05f64..0.6, seed: u64) {
            let c = cfg(a, b);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Ok(m) = generate_mask(h, w, &c, &mut rng) {
                let zeros = m.values().data().iter().filter(|&&v| v == 0.0).count();
                prop_assert_eq!(zeros, m.rect.height * m.rect.width);
                prop_assert!(m.rect.top + m.rect.height <= h && m.rect.left + m.rect.width <= w);
                prop_assert_eq!(m.rect.height, ((a * h as f64 + 0.5).floor() as usize).max(1));
            }
        }
    }
}
