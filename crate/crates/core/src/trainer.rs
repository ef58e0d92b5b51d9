//! The training loop: cluster once per epoch with the teacher, then for every
//! iteration push one augmented PK batch through the student twice and the
//! teacher twice (independent dropblock draws), combine the losses, take an
//! Adam step and update the teacher.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::clustering::{assign_epoch_labels, l2_normalize_rows, Label, PseudoLabelAssignment};
use crate::config::TrainConfig;
use crate::data::{augment_batch, generate_synthetic, load_dataset_dir, pk_sample, Dataset, Split};
use crate::diff::{softmax_rows, Array, Graph, Var};
use crate::ema;
use crate::encoder::{ModelState, Network};
use crate::error::{Error, Result};
use crate::eval::{cluster_quality, evaluate_model, Metrics};
use crate::losses::{cluster_ce_loss, consistency_loss, softmax_triplet_loss, total_loss};
use crate::optim::Adam;
use crate::params::Bound;

/// Loss values of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub step: u64,
    pub ce: f64,
    pub st: f64,
    pub co: f64,
    pub total: f64,
    /// Non-noise samples in the batch.
    pub labeled: usize,
    /// Anchors that found both a positive and a negative.
    pub anchors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub num_clusters: usize,
    /// DBSCAN radius used this epoch.
    pub eps: f64,
    pub noise_fraction: f64,
    /// Pairwise F1 of the pseudo-labels against true identities (diagnostic only).
    pub pairwise_f1: f64,
    /// Every sample was noise, so only the consistency loss trained.
    pub all_noise: bool,
    /// Batches drawn with fewer than `P` classes.
    pub fallback_batches: usize,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub cmc1: Option<f64>,
    pub cmc5: Option<f64>,
    pub cmc10: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Option<Metrics>,
}

impl TrainLog {
    pub fn write_iterations_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.iterations)
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.epochs)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub log: TrainLog,
    pub optimizer: Adam,
}

/// Scalar loss values from one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub st: f64,
    pub co: f64,
    pub total: f64,
    pub labeled: usize,
    pub anchors: usize,
}

/// A recorded forward pass, ready for `backward`.
pub struct BatchGraph {
    pub graph: Graph,
    pub bound: Bound,
    pub total: Var,
    pub parts: LossParts,
}

/// Builds the full objective for one batch.
///
/// `x: [N×C×H×W]` is fed to the student twice and, when the consistency term
/// is on, to the teacher twice. Without an active dropblock the two passes are
/// identical, so the first is reused. Only `labels` (pseudo-labels) enter the
/// label-dependent terms.
pub fn forward_batch(
    state: &ModelState,
    x: &Array,
    labels: &[Label],
    cfg: &TrainConfig,
    student_rng: &mut ChaCha8Rng,
    teacher_rng: &mut ChaCha8Rng,
) -> Result<BatchGraph> {
    if x.dim(0) != labels.len() {
        return Err(Error::dim("forward_batch", x.shape(), &[labels.len()]));
    }
    let w = if cfg.supervised {
        crate::losses::LossWeights {
            lambda: 1.0,
            xi: 0.0,
            eta: 0.0,
            ..cfg.loss.clone()
        }
    } else {
        cfg.loss.clone()
    };
    let stochastic = cfg.ddl.train_mode && !cfg.ddl.stages.is_empty();
    let mut g = Graph::new();
    let bound = state.params.bind(&mut g, true);
    let net = Network::new(&state.config, &bound);
    let xv = g.constant(x.clone());

    let h1 = net.encode(&mut g, xv, &cfg.ddl, student_rng)?;
    let need_second = w.eta > 0.0 || cfg.shared_labels;
    let h2 = if need_second && stochastic {
        net.encode(&mut g, xv, &cfg.ddl, student_rng)?
    } else {
        h1
    };

    let co = if w.eta > 0.0 {
        let logits = |g: &mut Graph, h: Var| -> Result<Var> {
            let mut u = net.project(g, h)?;
            if w.co_normalize {
                u = g.l2_normalize_rows(u)?;
            }
            Ok(g.scale(u, w.co_scale))
        };
        let u1 = logits(&mut g, h1)?;
        let v1 = g.softmax(u1)?;
        let v2 = if h2 == h1 {
            v1
        } else {
            let u2 = logits(&mut g, h2)?;
            g.softmax(u2)?
        };
        let teacher_view = |rng: &mut ChaCha8Rng| -> Result<Array> {
            let th = state.encode(x, &cfg.ddl, rng, true)?;
            let mut u = state.project(&th, true)?;
            if w.co_normalize {
                u = l2_normalize_rows(&u);
            }
            softmax_rows(&u.map(|v| v * w.co_scale))
        };
        let tv1 = teacher_view(teacher_rng)?;
        let tv2 = if stochastic { teacher_view(teacher_rng)? } else { tv1.clone() };
        consistency_loss(&mut g, v1, v2, &tv1, &tv2)?
    } else {
        g.constant(Array::scalar(0.0))
    };

    let views: Vec<Var> = if cfg.shared_labels { vec![h1, h2] } else { vec![h1] };
    let any_labeled = labels.iter().any(Option::is_some);
    let (ce, labeled) = if w.lambda > 0.0 && any_labeled {
        let mut probs = Vec::with_capacity(views.len());
        for &h in &views {
            let z = net.classify(&mut g, h)?;
            probs.push(g.softmax(z)?);
        }
        let out = cluster_ce_loss(&mut g, &probs, labels)?;
        (out.loss, out.used)
    } else {
        (g.constant(Array::scalar(0.0)), labels.iter().filter(|l| l.is_some()).count())
    };
    let (st, anchors) = if w.xi > 0.0 && any_labeled {
        let scored = if w.triplet_normalize {
            views.iter().map(|&h| g.l2_normalize_rows(h)).collect::<Result<Vec<_>>>()?
        } else {
            views.clone()
        };
        let out = softmax_triplet_loss(&mut g, &scored, labels, w.triplet_numerator)?;
        (out.loss, out.used)
    } else {
        (g.constant(Array::scalar(0.0)), 0)
    };
    let total = total_loss(&mut g, &w, ce, st, co)?;
    let parts = LossParts {
        ce: g.value(ce).item(),
        st: g.value(st).item(),
        co: g.value(co).item(),
        total: g.value(total).item(),
        labeled,
        anchors,
    };
    Ok(BatchGraph {
        graph: g,
        bound,
        total,
        parts,
    })
}

/// Backward pass and Adam step on the student; the teacher is not touched.
pub fn optimizer_step(state: &mut ModelState, adam: &mut Adam, batch: &BatchGraph, cfg: &TrainConfig) -> Result<()> {
    let grads = batch.graph.backward(batch.total)?;
    let named: Vec<(String, Array)> = batch
        .bound
        .iter()
        .map(|(name, var)| {
            let shape = batch.graph.value(var).shape().to_vec();
            (name.to_string(), grads.wrt_or_zeros(var, &shape))
        })
        .collect();
    adam.step(&mut state.params, &named, cfg.learning_rate, cfg.weight_decay, &cfg.adam)
}

/// The configured dataset: `data_dir` if set, otherwise the synthetic generator.
pub fn load_training_data(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => {
            let loaded = load_dataset_dir(dir, cfg.data.image_shape)?;
            for r in &loaded.rejected {
                warn!("skipped {}: {}", r.path.display(), r.reason);
            }
            Ok(loaded.dataset)
        }
        None => generate_synthetic(&cfg.data),
    }
}

/// Seeded stream `stream` of the run seed; streams never overlap.
fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn initial_state(cfg: &TrainConfig) -> Result<ModelState> {
    let Some(path) = &cfg.init_checkpoint else {
        return ModelState::new(cfg.encoder.clone(), cfg.seed);
    };
    let ck = Checkpoint::load(path)?;
    let mut state = ck.model;
    let mut want = cfg.encoder.clone();
    want.num_classes = state.config.num_classes;
    if state.config != want {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different encoder configuration",
            path.display()
        )));
    }
    // A warm start begins a new run: teacher restarts from the loaded student.
    state.teacher = state.params.clone();
    state.history.clear();
    state.step = 0;
    Ok(state)
}

/// True identities as contiguous class ids, used only by the supervised mode.
fn oracle_labels(identities: &[usize]) -> PseudoLabelAssignment {
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in identities {
        let next = ids.len();
        ids.entry(i).or_insert(next);
    }
    PseudoLabelAssignment {
        labels: identities.iter().map(|i| Some(ids[i])).collect(),
        num_clusters: ids.len(),
        epoch: 0,
        eps: 0.0,
    }
}

/// Runs the whole schedule. Deterministic for a given configuration.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Dataset("dataset has no training samples".into()));
    }
    let images = dataset.images(&train_idx)?;
    let names = dataset.names(&train_idx);
    // Identities serve diagnostics and the supervised mode only.
    let true_ids = dataset.identities(&train_idx);
    let can_eval = !dataset.indices(Split::Query).is_empty() && !dataset.indices(Split::Gallery).is_empty();

    let mut state = initial_state(cfg)?;
    ema::prepare(&mut state, &cfg.ema);
    let mut adam = Adam::new();
    let mut sampler_rng = stream(cfg.seed, 1);
    let mut augment_rng = stream(cfg.seed, 2);
    let mut student_rng = stream(cfg.seed, 3);
    let mut teacher_rng = stream(cfg.seed, 4);
    let mut classifier_rng = stream(cfg.seed, 5);

    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let cluster_ddl = cfg.ddl.eval_mode();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut assignment = if cfg.supervised {
            oracle_labels(&true_ids)
        } else if cfg.eval_teacher {
            assign_epoch_labels(&images, &state, &cluster_ddl, &cfg.dbscan, epoch)?
        } else {
            let mut student_view = state.clone();
            student_view.teacher = state.params.clone();
            assign_epoch_labels(&images, &student_view, &cluster_ddl, &cfg.dbscan, epoch)?
        };
        assignment.epoch = epoch;
        let m = assignment.num_clusters;
        let all_noise = m == 0;
        if all_noise {
            warn!("epoch {epoch}: every sample is noise; training on the consistency loss only");
        } else if m != state.num_classes() {
            state.reset_classifier(m, &mut classifier_rng)?;
            adam.forget("cls.");
        }
        if cfg.dump_labels {
            if let Some(dir) = &cfg.output_dir {
                assignment.write_csv(&dir.join(format!("labels_epoch{epoch:03}.csv")), &names)?;
            }
        }
        let quality = cluster_quality(&assignment.labels, &true_ids)?;

        let mut fallback_batches = 0;
        for iter in 0..cfg.iters_per_epoch {
            let batch_idx = if all_noise {
                let n = train_idx.len();
                let take = (cfg.batch_p * cfg.batch_k).min(n);
                index::sample(&mut sampler_rng, n, take).into_vec()
            } else {
                let b = pk_sample(&assignment.labels, cfg.batch_p, cfg.batch_k, &mut sampler_rng)?;
                fallback_batches += b.fallback as usize;
                b.indices
            };
            let x = augment_batch(&images.select_rows(&batch_idx), cfg.augment_pad, &mut augment_rng)?;
            let labels: Vec<Label> = batch_idx.iter().map(|&i| assignment.labels[i]).collect();
            let batch = forward_batch(&state, &x, &labels, cfg, &mut student_rng, &mut teacher_rng)?;
            if !batch.parts.total.is_finite() {
                return Err(Error::Input(format!("non-finite loss at epoch {epoch}, iteration {iter}")));
            }
            optimizer_step(&mut state, &mut adam, &batch, cfg)?;
            state.step += 1;
            ema::update(&mut state, &cfg.ema)?;
            let p = batch.parts;
            log.iterations.push(IterRecord {
                epoch,
                iter,
                step: state.step,
                ce: p.ce,
                st: p.st,
                co: p.co,
                total: p.total,
                labeled: p.labeled,
                anchors: p.anchors,
            });
        }

        let metrics = if can_eval && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate_model(&state, dataset, cfg.eval_teacher)?.metrics())
        } else {
            None
        };
        info!(
            "epoch {epoch}: clusters {m}, noise {:.3}, pairwise F1 {:.3}{}",
            quality.noise_fraction,
            quality.f1,
            metrics.as_ref().map_or(String::new(), |x| format!(", mAP {:.4}", x.map))
        );
        log.epochs.push(EpochRecord {
            epoch,
            num_clusters: m,
            eps: assignment.eps,
            noise_fraction: quality.noise_fraction,
            pairwise_f1: quality.f1,
            all_noise,
            fallback_batches,
            map: metrics.as_ref().map(|x| x.map),
            cmc1: metrics.as_ref().map(|x| x.cmc1),
            cmc5: metrics.as_ref().map(|x| x.cmc5),
            cmc10: metrics.as_ref().map(|x| x.cmc10),
        });
    }
    if can_eval {
        log.final_metrics = Some(evaluate_model(&state, dataset, cfg.eval_teacher)?.metrics());
    }
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, &state, &log, &adam, cfg)?;
    }
    Ok(TrainOutcome {
        state,
        log,
        optimizer: adam,
    })
}

fn write_outputs(dir: &Path, state: &ModelState, log: &TrainLog, adam: &Adam, cfg: &TrainConfig) -> Result<()> {
    Checkpoint::new(state.clone(), cfg.epochs, Some(adam.clone())).save(&dir.join("checkpoint.json"))?;
    log.write_iterations_csv(&dir.join("train_log.csv"))?;
    log.write_epochs_csv(&dir.join("epochs.csv"))?;
    if let Some(m) = &log.final_metrics {
        let path = dir.join("metrics.json");
        fs::write(&path, serde_json::to_string_pretty(m)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_text()?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;
    use crate::encoder::EncoderConfig;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            iters_per_epoch: 3,
            encoder: EncoderConfig {
                stage_channels: vec![4, 4, 8, 8, 8],
                embed_dim: 8,
                proj_dim: 8,
                ..EncoderConfig::default()
            },
            data: SynthConfig {
                num_identities: 4,
                num_test_identities: 2,
                images_per_identity: 6,
                num_cameras: 2,
                image_shape: [3, 32, 16],
                ..SynthConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            supervised: true,
            ..tiny_config()
        };
        let data = generate_synthetic(&cfg.data).unwrap();
        let init = ModelState::new(cfg.encoder.clone(), cfg.seed).unwrap();
        let out = train(&cfg, &data).unwrap();
        for (name, a) in init.params.iter() {
            if !name.starts_with("cls.") {
                assert!(a.bit_eq(out.state.params.get(name).unwrap()), "{name}");
            }
        }
        assert!(out.state.teacher.bit_eq(&out.state.params));
        assert_eq!(out.log.iterations.len(), 6);
    }

    #[test]
    fn same_seed_same_log() {
        let cfg = tiny_config();
        let data = generate_synthetic(&cfg.data).unwrap();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.state.params.bit_eq(&b.state.params));
        assert!(a.state.teacher.bit_eq(&b.state.teacher));
    }

    #[test]
    fn oracle_labels_are_contiguous() {
        let a = oracle_labels(&[7, 3, 7, 9]);
        assert_eq!(a.labels, vec![Some(0), Some(1), Some(0), Some(2)]);
        assert_eq!(a.num_clusters, 3);
    }
}
