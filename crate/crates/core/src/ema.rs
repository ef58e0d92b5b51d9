//! Temporal-average teacher: `θ* ← ζ·θ* + (1 − ζ)·θ`, plus variants that
//! average the last two or three student snapshots instead of only the newest.

use serde::{Deserialize, Serialize};

use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::params::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub zeta: f64,
    /// How many recent student snapshots enter each update (1, 2 or 3).
    pub depth: usize,
    /// When false the teacher mirrors the student after every step.
    pub enabled: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            zeta: 0.99,
            depth: 1,
            enabled: true,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.zeta) {
            return Err(Error::Config(format!("ema.zeta must lie in [0, 1), got {}", self.zeta)));
        }
        if !(1..=3).contains(&self.depth) {
            return Err(Error::Config(format!("ema.depth must be 1, 2 or 3, got {}", self.depth)));
        }
        Ok(())
    }
}

/// Seeds the snapshot history with the current (initial) student weights.
pub fn prepare(state: &mut ModelState, cfg: &EmaConfig) {
    state.history = vec![state.params.clone(); cfg.depth.saturating_sub(1)];
}

/// One teacher update; call after every optimizer step. Never touches `θ`.
pub fn update(state: &mut ModelState, cfg: &EmaConfig) -> Result<()> {
    cfg.validate()?;
    if !state.params.same_layout(&state.teacher) {
        return Err(Error::Contract("teacher and student layouts differ".into()));
    }
    if !cfg.enabled {
        state.teacher = state.params.clone();
        state.history.clear();
        return Ok(());
    }
    if cfg.depth == 1 {
        state.history.clear();
        if cfg.zeta == 0.0 {
            state.teacher = state.params.clone();
        } else {
            blend(&mut state.teacher, cfg.zeta, &[&state.params]);
        }
        return Ok(());
    }

    let keep = cfg.depth - 1;
    while state.history.len() < keep {
        let pad = state.history.first().unwrap_or(&state.params).clone();
        state.history.insert(0, pad);
    }
    if state.history.len() > keep {
        let extra = state.history.len() - keep;
        state.history.drain(..extra);
    }
    let mut snapshots: Vec<&Params> = state.history.iter().collect();
    snapshots.push(&state.params);
    blend(&mut state.teacher, cfg.zeta, &snapshots);

    state.history.push(state.params.clone());
    state.history.remove(0);
    Ok(())
}

/// `teacher ← ζ·teacher + ((1 − ζ)/k)·Σ snapshots`, evaluated as
/// `teacher + ((1 − ζ)/k)·Σ (snapshot − teacher)` so a teacher equal to its
/// snapshots stays bitwise unchanged.
fn blend(teacher: &mut Params, zeta: f64, snapshots: &[&Params]) {
    let share = (1.0 - zeta) / snapshots.len() as f64;
    for (name, t) in teacher.iter_mut() {
        let sources: Vec<&[f64]> = snapshots
            .iter()
            .map(|s| s.get(name).expect("layout checked").data())
            .collect();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let pull: f64 = sources.iter().map(|s| s[i] - *v).sum();
            *v += share * pull;
        }
    }
}
