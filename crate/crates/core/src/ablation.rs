//! Named grids of training configurations, each run over a shared set of
//! seeds, summarised as mean retrieval metrics per setting.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::encoder::ProjHead;
use crate::error::{Error, Result};
use crate::eval::Metrics;
use crate::trainer::{load_training_data, train};

pub const SUITES: [&str; 5] = ["ddl_stages", "erase_size", "components", "momentum", "proj_head"];

/// One row of a suite: a label and the configuration it stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub name: String,
    pub config: TrainConfig,
}

impl Setting {
    pub fn new(name: impl Into<String>, config: TrainConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }
}

fn with(base: &TrainConfig, f: impl FnOnce(&mut TrainConfig)) -> TrainConfig {
    let mut cfg = base.clone();
    f(&mut cfg);
    cfg
}

fn stage_label(stages: &[usize]) -> String {
    if stages.is_empty() {
        return "none".into();
    }
    let parts: Vec<String> = stages.iter().map(|s| s.to_string()).collect();
    format!("{{{}}}", parts.join(","))
}

/// The configurations of `suite`, each derived from `base`.
pub fn suite_settings(suite: &str, base: &TrainConfig) -> Result<Vec<Setting>> {
    let settings = match suite {
        "ddl_stages" => {
            let sets: [&[usize]; 8] = [&[0], &[1, 3], &[0, 1, 2], &[0, 1, 2, 3, 4], &[2, 3, 4], &[2, 4], &[3, 4], &[]];
            sets.iter()
                .map(|s| Setting::new(stage_label(s), with(base, |c| c.ddl.stages = s.to_vec())))
                .collect()
        }
        "erase_size" => {
            let sizes = [(0.2, 0.1), (0.3, 0.2), (0.4, 0.3), (0.5, 0.4)];
            let mut out = Vec::new();
            for stages in [vec![0, 1, 2], vec![3, 4]] {
                for (alpha, beta) in sizes {
                    let name = format!("{} ({alpha},{beta})", stage_label(&stages));
                    out.push(Setting::new(
                        name,
                        with(base, |c| {
                            c.ddl.stages = stages.clone();
                            c.ddl.alpha = alpha;
                            c.ddl.beta = beta;
                        }),
                    ));
                }
            }
            out
        }
        "components" => vec![
            Setting::new(
                "L_ce",
                with(base, |c| {
                    c.loss.xi = 0.0;
                    c.loss.eta = 0.0;
                    c.ddl.stages.clear();
                }),
            ),
            Setting::new(
                "L_ce+L_st",
                with(base, |c| {
                    c.loss.eta = 0.0;
                    c.ddl.stages.clear();
                }),
            ),
            Setting::new("L_ce+L_st+DDL+L_co", base.clone()),
            Setting::new("L_ce+L_st+DDL+L_co (unshared labels)", with(base, |c| c.shared_labels = false)),
        ],
        "momentum" => {
            let mut out = vec![Setting::new("no teacher", with(base, |c| c.ema.enabled = false))];
            for depth in 1..=3 {
                out.push(Setting::new(
                    format!("depth {depth}"),
                    with(base, |c| {
                        c.ema.enabled = true;
                        c.ema.depth = depth;
                    }),
                ));
            }
            out
        }
        "proj_head" => [
            ("identity", ProjHead::Identity),
            ("linear", ProjHead::Linear),
            ("shared_linear", ProjHead::SharedLinear),
        ]
        .into_iter()
        .map(|(name, head)| {
            Setting::new(
                name,
                with(base, |c| {
                    c.encoder.proj_head = head;
                    if head == ProjHead::Identity {
                        c.encoder.proj_dim = c.encoder.embed_dim;
                    }
                }),
            )
        })
        .collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown ablation suite `{other}`; available: {}",
                SUITES.join(", ")
            )))
        }
    };
    Ok(settings)
}

/// Mean metrics of one setting over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub seeds: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    /// Per-seed mAP, space separated.
    pub seed_maps: String,
}

impl AblationRow {
    fn from_runs(setting: &str, runs: &[Metrics]) -> Self {
        let n = runs.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Self {
            setting: setting.to_string(),
            seeds: runs.len(),
            map: mean(|m| m.map),
            cmc1: mean(|m| m.cmc1),
            cmc5: mean(|m| m.cmc5),
            cmc10: mean(|m| m.cmc10),
            seed_maps: runs.iter().map(|m| format!("{:.6}", m.map)).collect::<Vec<_>>().join(" "),
        }
    }

    pub fn per_seed_map(&self) -> Vec<f64> {
        self.seed_maps.split_whitespace().filter_map(|s| s.parse().ok()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub suite: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Fixed-width text table in suite order, metrics in percent.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max("setting".len());
        let mut out = format!("suite: {}\n", self.suite);
        out += &format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "setting", "mAP", "top-1", "top-5", "top-10");
        out += &format!("{}\n", "-".repeat(width + 32));
        for r in &self.rows {
            out += &format!(
                "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}\n",
                r.setting,
                100.0 * r.map,
                100.0 * r.cmc1,
                100.0 * r.cmc5,
                100.0 * r.cmc10
            );
        }
        out
    }

    pub fn write_table(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_table()).map_err(|e| Error::io(path, e))
    }
}

/// Trains every setting once per seed; `seed` and `data.seed` are both set
/// to the run seed so all settings see the same data for a given seed.
///
/// Runs are independent and spread over `jobs` worker threads; the result
/// does not depend on `jobs`.
pub fn run_settings(suite: &str, settings: &[Setting], seeds: &[u64], jobs: usize) -> Result<AblationReport> {
    if settings.is_empty() || seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one setting and one seed".into()));
    }
    let tasks: Vec<(usize, u64)> = (0..settings.len()).flat_map(|s| seeds.iter().map(move |&seed| (s, seed))).collect();
    let results: Mutex<Vec<Option<Result<Metrics>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run_one = |(s, seed): (usize, u64)| -> Result<Metrics> {
        let mut cfg = settings[s].config.clone();
        cfg.seed = seed;
        cfg.data.seed = seed;
        cfg.output_dir = None;
        let data = load_training_data(&cfg)?;
        let out = train(&cfg, &data)?;
        out.log
            .final_metrics
            .ok_or_else(|| Error::Dataset("ablation data has no query/gallery split to evaluate".into()))
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&task) = tasks.get(i) else { break };
                let r = run_one(task);
                if r.is_ok() {
                    log::info!("{suite}: `{}` seed {} done", settings[task.0].name, task.1);
                }
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut results = results.into_inner().expect("workers finished");
    let mut rows = Vec::with_capacity(settings.len());
    for (s, setting) in settings.iter().enumerate() {
        let mut runs = Vec::with_capacity(seeds.len());
        for k in 0..seeds.len() {
            runs.push(results[s * seeds.len() + k].take().expect("every task ran")?);
        }
        rows.push(AblationRow::from_runs(&setting.name, &runs));
    }
    Ok(AblationReport {
        suite: suite.to_string(),
        rows,
    })
}

pub fn run_ablation(suite: &str, base: &TrainConfig, seeds: &[u64], jobs: usize) -> Result<AblationReport> {
    let settings = suite_settings(suite, base)?;
    run_settings(suite, &settings, seeds, jobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_lists_the_known_ones() {
        let err = suite_settings("nope", &TrainConfig::default()).unwrap_err().to_string();
        for s in SUITES {
            assert!(err.contains(s), "{err}");
        }
    }

    #[test]
    fn stage_suite_has_the_eight_sets() {
        let s = suite_settings("ddl_stages", &TrainConfig::default()).unwrap();
        let got: Vec<Vec<usize>> = s.iter().map(|x| x.config.ddl.stages.clone()).collect();
        let want: Vec<Vec<usize>> = vec![vec![0], vec![1, 3], vec![0, 1, 2], vec![0, 1, 2, 3, 4], vec![2, 3, 4], vec![2, 4], vec![3, 4], vec![]];
        assert_eq!(got, want);
        assert_eq!(s.last().unwrap().name, "none");
    }

    #[test]
    fn component_rows_toggle_the_right_parts() {
        let base = TrainConfig::default();
        let s = suite_settings("components", &base).unwrap();
        let names: Vec<&str> = s.iter().map(|x| x.name.as_str()).collect();
        assert_eq!(&names[..3], &["L_ce", "L_ce+L_st", "L_ce+L_st+DDL+L_co"]);
        assert_eq!((s[0].config.loss.xi, s[0].config.loss.eta), (0.0, 0.0));
        assert!(s[1].config.ddl.stages.is_empty() && s[1].config.loss.xi > 0.0);
        assert_eq!(s[2].config, base);
        assert!(!s[3].config.shared_labels);
    }

    #[test]
    fn every_suite_setting_validates() {
        for suite in SUITES {
            for s in suite_settings(suite, &TrainConfig::default()).unwrap() {
                s.config.validate().unwrap();
            }
        }
    }

    #[test]
    fn seed_maps_parse_back() {
        let m = |x| Metrics {
            map: x,
            cmc1: x,
            cmc5: x,
            cmc10: x,
        };
        let row = AblationRow::from_runs("a", &[m(0.25), m(0.75)]);
        assert_eq!(row.map, 0.5);
        assert_eq!(row.per_seed_map(), vec![0.25, 0.75]);
    }
}
