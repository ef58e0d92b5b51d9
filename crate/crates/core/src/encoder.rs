//! Five-stage convolutional encoder with dropblock insertion points, a
//! projection head feeding the consistency loss and a classifier over
//! pseudo-label clusters.
//!
//! Stage layout (defaults, `3×32×16` input):
//!
//! | stage | input map | body                                               |
//! |-------|-----------|----------------------------------------------------|
//! | 0     | 32×16     | conv3×3 (same) → relu                              |
//! | 1..4  | halves    | conv3×3 (same) → relu → conv2×2/2 (valid) → relu   |
//!
//! A dropblock configured for stage `i` masks that stage's input tensor.
//! The final map is averaged spatially into the embedding `h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddl::{self, DdlConfig, NUM_STAGES};
use crate::diff::{Array, Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjHead {
    /// `u = h`; needs `proj_dim == embed_dim`.
    Identity,
    /// `u = g(h)`; the classifier reads `h`.
    Linear,
    /// One linear map serves as both `g` (consistency) and `f` (classifier input).
    SharedLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub proj_head: ProjHead,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![8, 16, 32, 64, 64],
            embed_dim: 64,
            proj_dim: 64,
            proj_head: ProjHead::Linear,
            num_classes: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "encoder needs {NUM_STAGES} stage widths, got {}",
                self.stage_channels.len()
            )));
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.embed_dim != self.stage_channels[NUM_STAGES - 1] {
            return Err(Error::Config(format!(
                "embed_dim {} must equal the last stage width {}",
                self.embed_dim,
                self.stage_channels[NUM_STAGES - 1]
            )));
        }
        if self.proj_dim < 2 {
            return Err(Error::Config("proj_dim must be at least 2".into()));
        }
        if self.proj_head == ProjHead::Identity && self.proj_dim != self.embed_dim {
            return Err(Error::Config(format!(
                "identity projection needs proj_dim == embed_dim ({} != {})",
                self.proj_dim, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Width of the classifier input.
    pub fn classifier_in(&self) -> usize {
        match self.proj_head {
            ProjHead::SharedLinear => self.proj_dim,
            _ => self.embed_dim,
        }
    }

    /// Input extent a stage-`i` dropblock sees for an `h×w` image.
    pub fn stage_input_size(&self, stage: usize, h: usize, w: usize) -> (usize, usize) {
        (1..=stage).fold((h, w), |(h, w), s| if s >= 2 { (h / 2, w / 2) } else { (h, w) })
    }
}

pub fn is_classifier_param(name: &str) -> bool {
    name.starts_with("cls.")
}

/// Learnable parameters, the teacher shadow and the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub params: Params,
    pub teacher: Params,
    pub step: u64,
    /// Recent student snapshots, newest last; only kept for multi-step averaging.
    #[serde(default)]
    pub history: Vec<Params>,
}

impl ModelState {
    /// Fresh weights; the teacher starts as an exact copy.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.num_classes == 0 {
            return Err(Error::Contract("num_classes must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut prev = config.in_channels;
        for (stage, &width) in config.stage_channels.iter().enumerate() {
            params.insert(format!("stage{stage}.conv.weight"), conv_init(width, prev, 3, &mut rng));
            params.insert(format!("stage{stage}.conv.bias"), Array::zeros(&[width]));
            if stage >= 1 {
                params.insert(format!("stage{stage}.down.weight"), conv_init(width, width, 2, &mut rng));
                params.insert(format!("stage{stage}.down.bias"), Array::zeros(&[width]));
            }
            prev = width;
        }
        if config.proj_head != ProjHead::Identity {
            params.insert("proj.weight", linear_init(config.embed_dim, config.proj_dim, &mut rng));
            params.insert("proj.bias", Array::zeros(&[config.proj_dim]));
        }
        params.insert("cls.weight", linear_init(config.classifier_in(), config.num_classes, &mut rng));
        params.insert("cls.bias", Array::zeros(&[config.num_classes]));
        Ok(Self {
            teacher: params.clone(),
            params,
            config,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn weights(&self, use_teacher: bool) -> &Params {
        if use_teacher {
            &self.teacher
        } else {
            &self.params
        }
    }

    /// Embeddings `h` for `x: [N×C×H×W]`. Teacher passes record no gradients.
    pub fn encode<R: Rng + ?Sized>(&self, x: &Array, ddl_cfg: &DdlConfig, rng: &mut R, use_teacher: bool) -> Result<Array> {
        let mut g = Graph::new();
        let bound = self.weights(use_teacher).bind(&mut g, false);
        let xv = g.constant(x.clone());
        let net = Network::new(&self.config, &bound);
        let h = net.encode(&mut g, xv, ddl_cfg, rng)?;
        Ok(g.value(h).clone())
    }

    /// Projection `u = g(h)`.
    pub fn project(&self, h: &Array, use_teacher: bool) -> Result<Array> {
        let mut g = Graph::new();
        let bound = self.weights(use_teacher).bind(&mut g, false);
        let hv = g.constant(h.clone());
        let u = Network::new(&self.config, &bound).project(&mut g, hv)?;
        Ok(g.value(u).clone())
    }

    /// Class scores `z` for embeddings `h`.
    pub fn classify(&self, h: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let z = Network::new(&self.config, &bound).classify(&mut g, hv)?;
        Ok(g.value(z).clone())
    }

    /// Re-initialises the classifier for `new_m` outputs and copies it into the
    /// teacher and any history snapshots. Everything else is left untouched.
    pub fn reset_classifier<R: Rng + ?Sized>(&mut self, new_m: usize, rng: &mut R) -> Result<()> {
        if new_m < 1 {
            return Err(Error::Contract("classifier needs at least one class".into()));
        }
        self.config.num_classes = new_m;
        let weight = linear_init(self.config.classifier_in(), new_m, rng);
        let bias = Array::zeros(&[new_m]);
        for set in std::iter::once(&mut self.params)
            .chain(std::iter::once(&mut self.teacher))
            .chain(self.history.iter_mut())
        {
            set.insert("cls.weight", weight.clone());
            set.insert("cls.bias", bias.clone());
        }
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / fan_in)`.
fn conv_init<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, rng: &mut R) -> Array {
    let fan_in = inp * k * k;
    uniform(&[out, inp, k, k], (6.0 / fan_in as f64).sqrt(), rng)
}

/// Uniform in `±1 / sqrt(fan_in)`.
fn linear_init<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Array {
    uniform(&[inp, out], 1.0 / (inp as f64).sqrt(), rng)
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Array {
    let len = shape.iter().product();
    Array::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("init shape")
}

/// Graph-level forward passes over bound parameters.
pub struct Network<'a> {
    cfg: &'a EncoderConfig,
    params: &'a Bound,
}

impl<'a> Network<'a> {
    pub fn new(cfg: &'a EncoderConfig, params: &'a Bound) -> Self {
        Self { cfg, params }
    }

    pub fn encode<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, ddl_cfg: &DdlConfig, rng: &mut R) -> Result<Var> {
        let mut cur = x;
        for stage in 0..NUM_STAGES {
            if ddl_cfg.active_at(stage) {
                cur = ddl::apply(g, cur, ddl_cfg, rng)?.0;
            }
            cur = self.conv_block(g, cur, &format!("stage{stage}.conv"), 1, Padding::Same)?;
            if stage >= 1 {
                cur = self.conv_block(g, cur, &format!("stage{stage}.down"), 2, Padding::Valid)?;
            }
        }
        g.global_avg_pool(cur)
    }

    fn conv_block(&self, g: &mut Graph, x: Var, prefix: &str, stride: usize, padding: Padding) -> Result<Var> {
        let w = self.params.var(&format!("{prefix}.weight"))?;
        let b = self.params.var(&format!("{prefix}.bias"))?;
        let y = g.conv2d(x, w, stride, padding)?;
        let y = g.add_bias(y, b)?;
        Ok(g.relu(y))
    }

    pub fn project(&self, g: &mut Graph, h: Var) -> Result<Var> {
        match self.cfg.proj_head {
            ProjHead::Identity => Ok(h),
            ProjHead::Linear | ProjHead::SharedLinear => {
                let w = self.params.var("proj.weight")?;
                let b = self.params.var("proj.bias")?;
                g.linear(h, w, b)
            }
        }
    }

    /// Classifier scores. Under the shared head the classifier reads `f(h)`,
    /// computed with the projection weights.
    pub fn classify(&self, g: &mut Graph, h: Var) -> Result<Var> {
        if self.cfg.num_classes == 0 {
            return Err(Error::Contract("no clusters to classify into".into()));
        }
        let input = match self.cfg.proj_head {
            ProjHead::SharedLinear => self.project(g, h)?,
            _ => h,
        };
        let w = self.params.var("cls.weight")?;
        let b = self.params.var("cls.bias")?;
        g.linear(input, w, b)
    }
}
