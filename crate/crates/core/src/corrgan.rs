//! Generative models over correlation matrices: a transposed-convolution
//! DCGAN baseline and a Wasserstein critic with an upsampling generator.

use std::path::Path;
use std::sync::Arc;

use fixsynth_tensor::io::{read_weights, write_weights};
use fixsynth_tensor::optim::{AdamConfig, OptimizerConfig, RmsPropConfig};
use fixsynth_tensor::{Layer, Mode, Network, Op, Sequential, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::market::{symmetrize, CorrelationMatrix, NearestConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanVariant {
    Dcgan,
    Wgan,
}

impl GanVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GanVariant::Dcgan => "dcgan",
            GanVariant::Wgan => "wgan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lipschitz {
    WeightClip { c: f64 },
    None,
}

/// One generator stage: spatial growth by `factor`, then `channels` maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenBlock {
    pub channels: usize,
    pub factor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub n: usize,
    pub latent: usize,
    /// Hidden widths between the latent vector and the seed map.
    pub gen_linear: Vec<usize>,
    pub seed_size: usize,
    pub seed_channels: usize,
    pub gen_blocks: Vec<GenBlock>,
    /// Channels of the stride-2 critic convolutions.
    pub critic_channels: Vec<usize>,
    pub slope: f64,
    pub variant: GanVariant,
    pub lipschitz: Lipschitz,
    pub critic_steps: usize,
    pub batch: usize,
    pub gen_optimizer: OptimizerConfig,
    pub critic_optimizer: OptimizerConfig,
    pub steps: usize,
    pub seed: u64,
    /// Mean pairwise Frobenius distance of a generated batch below which a
    /// step counts towards the collapse warning.
    pub collapse_spread: f64,
    pub collapse_window: usize,
    /// Scale applied to the initial head weights.
    pub head_init_scale: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self::wgan(16)
    }
}

impl GanConfig {
    pub fn wgan(n: usize) -> Self {
        Self {
            n,
            latent: 32,
            gen_linear: vec![],
            seed_size: n / 4,
            seed_channels: 16,
            gen_blocks: vec![GenBlock { channels: 8, factor: 2 }, GenBlock { channels: 8, factor: 2 }],
            critic_channels: vec![8, 16],
            slope: 0.2,
            variant: GanVariant::Wgan,
            lipschitz: Lipschitz::WeightClip { c: 0.03 },
            critic_steps: 5,
            batch: 32,
            gen_optimizer: OptimizerConfig::RmsProp(RmsPropConfig { lr: 5e-4, ..RmsPropConfig::default() }),
            critic_optimizer: OptimizerConfig::RmsProp(RmsPropConfig { lr: 5e-4, ..RmsPropConfig::default() }),
            steps: 5000,
            seed: 0,
            collapse_spread: 1e-3,
            collapse_window: 500,
            head_init_scale: 0.1,
        }
    }

    pub fn dcgan(n: usize) -> Self {
        let adam = OptimizerConfig::Adam(AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            ..AdamConfig::default()
        });
        Self {
            variant: GanVariant::Dcgan,
            lipschitz: Lipschitz::None,
            critic_steps: 1,
            gen_optimizer: adam,
            critic_optimizer: adam,
            ..Self::wgan(n)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.latent == 0 || self.batch == 0 || self.seed_size == 0 || self.seed_channels == 0 {
            return Err(Error::invalid("gan: n >= 2 and non-zero latent, batch and seed map required"));
        }
        if self.critic_steps == 0 {
            return Err(Error::invalid("gan: critic_steps must be at least 1"));
        }
        let grown = self.gen_blocks.iter().try_fold(self.seed_size, |s, b| {
            (b.factor > 0 && b.channels > 0).then_some(s * b.factor)
        });
        if grown != Some(self.n) {
            return Err(Error::invalid(format!(
                "gan: seed {} grown by {:?} does not reach n = {}",
                self.seed_size,
                self.gen_blocks.iter().map(|b| b.factor).collect::<Vec<_>>(),
                self.n
            )));
        }
        let shrink = 1usize << self.critic_channels.len();
        if self.critic_channels.is_empty() || self.n % shrink != 0 || self.critic_channels.contains(&0) {
            return Err(Error::invalid(format!(
                "gan: n = {} must be divisible by 2^{} critic blocks",
                self.n,
                self.critic_channels.len()
            )));
        }
        if let Lipschitz::WeightClip { c } = self.lipschitz {
            if !(c > 0.0) {
                return Err(Error::invalid("gan: clip bound must be positive"));
            }
        }
        if !(self.slope >= 0.0) || self.collapse_window == 0 {
            return Err(Error::invalid("gan: bad slope or collapse window"));
        }
        Ok(())
    }
}

/// Latent vector to a `[1, n, n]` map in `(-1, 1)`.
pub fn build_generator(cfg: &GanConfig) -> Result<Sequential> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut width = cfg.latent;
    for &h in &cfg.gen_linear {
        layers.push(Layer::Linear { inputs: width, outputs: h });
        layers.push(Layer::LeakyRelu { slope: cfg.slope });
        width = h;
    }
    let seed = cfg.seed_channels * cfg.seed_size * cfg.seed_size;
    layers.push(Layer::Linear { inputs: width, outputs: seed });
    layers.push(Layer::LeakyRelu { slope: cfg.slope });
    layers.push(Layer::Reshape {
        shape: vec![cfg.seed_channels, cfg.seed_size, cfg.seed_size],
    });
    let mut ch = cfg.seed_channels;
    for b in &cfg.gen_blocks {
        match cfg.variant {
            GanVariant::Wgan => {
                layers.push(Layer::Upsample2d { factor: b.factor });
                layers.push(Layer::Conv2d {
                    in_channels: ch,
                    out_channels: b.channels,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                });
            }
            GanVariant::Dcgan => {
                let (kernel, padding) = if b.factor % 2 == 0 { (2 * b.factor, b.factor / 2) } else { (b.factor, 0) };
                layers.push(Layer::TransposedConv2d {
                    in_channels: ch,
                    out_channels: b.channels,
                    kernel,
                    stride: b.factor,
                    padding,
                });
            }
        }
        layers.push(Layer::LeakyRelu { slope: cfg.slope });
        ch = b.channels;
    }
    layers.push(Layer::Conv2d {
        in_channels: ch,
        out_channels: 1,
        kernel: 3,
        stride: 1,
        padding: 1,
    });
    layers.push(Layer::Tanh);
    let arch = Sequential::new(layers);
    let out = arch.output_shape(&[cfg.latent])?;
    if out != [1, cfg.n, cfg.n] {
        return Err(Error::invalid(format!("gan: generator emits {out:?}, expected [1, {0}, {0}]", cfg.n)));
    }
    Ok(arch)
}

/// `[1, n, n]` map to one score; DCGAN discriminators end in a sigmoid.
pub fn build_critic(cfg: &GanConfig) -> Result<Sequential> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut ch = 1;
    for &c in &cfg.critic_channels {
        layers.push(Layer::Conv2d {
            in_channels: ch,
            out_channels: c,
            kernel: 4,
            stride: 2,
            padding: 1,
        });
        layers.push(Layer::LeakyRelu { slope: cfg.slope });
        ch = c;
    }
    let side = cfg.n >> cfg.critic_channels.len();
    layers.push(Layer::Reshape {
        shape: vec![ch * side * side],
    });
    layers.push(Layer::Linear {
        inputs: ch * side * side,
        outputs: 1,
    });
    if cfg.variant == GanVariant::Dcgan {
        layers.push(Layer::Sigmoid);
    }
    let arch = Sequential::new(layers);
    arch.output_shape(&[1, cfg.n, cfg.n])?;
    Ok(arch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub critic_loss: f64,
    pub gen_loss: f64,
    /// Mean critic score (logit for DCGAN) on real minus generated data.
    pub critic_gap: f64,
    /// Mean pairwise Frobenius distance within the generated batch.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    /// Step at which the collapse heuristic first fired.
    pub collapse_warning: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedGan {
    pub config: GanConfig,
    pub ids: Arc<[String]>,
    pub generator: Network,
    pub critic: Network,
    pub history: History,
}

fn latent_batch(rng: &mut ChaCha8Rng, rows: usize, latent: usize) -> Tensor {
    let data = (0..rows * latent).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, latent], data).expect("shape and data agree")
}

fn batch_spread(n: usize, x: &Tensor) -> f64 {
    let per = n * n;
    let rows = x.numel() / per;
    if rows < 2 {
        return 0.0;
    }
    let d = x.data();
    let mut total = 0.0;
    for a in 0..rows {
        for b in a + 1..rows {
            let s: f64 = (0..per).map(|k| (d[a * per + k] - d[b * per + k]).powi(2)).sum();
            total += s.sqrt();
        }
    }
    total / (rows * (rows - 1) / 2) as f64
}

/// Critic layers without a terminal sigmoid.
fn logit_arch(critic: &Sequential) -> Sequential {
    let mut layers = critic.layers.clone();
    if matches!(layers.last(), Some(Layer::Sigmoid)) {
        layers.pop();
    }
    Sequential::new(layers)
}

struct Losses {
    loss: Var,
    gap: Option<(Var, Var)>,
}

/// Critic loss on real and generated logits (minimised by the critic).
fn critic_objective(tape: &mut Tape, variant: GanVariant, real: Var, fake: Var) -> Result<Losses> {
    let mr = tape.apply(Op::Mean, &[real])?;
    let mf = tape.apply(Op::Mean, &[fake])?;
    let loss = match variant {
        GanVariant::Wgan => {
            let neg = tape.apply(Op::Scale { factor: -1.0 }, &[mr])?;
            tape.apply(Op::Add, &[mf, neg])?
        }
        GanVariant::Dcgan => {
            let lr = tape.apply(Op::BceWithLogits { target: 1.0 }, &[real])?;
            let lf = tape.apply(Op::BceWithLogits { target: 0.0 }, &[fake])?;
            tape.apply(Op::Add, &[lr, lf])?
        }
    };
    Ok(Losses { loss, gap: Some((mr, mf)) })
}

fn generator_objective(tape: &mut Tape, variant: GanVariant, fake: Var) -> Result<Losses> {
    let loss = match variant {
        GanVariant::Wgan => {
            let m = tape.apply(Op::Mean, &[fake])?;
            tape.apply(Op::Scale { factor: -1.0 }, &[m])?
        }
        // non-saturating generator loss
        GanVariant::Dcgan => tape.apply(Op::BceWithLogits { target: 1.0 }, &[fake])?,
    };
    Ok(Losses { loss, gap: None })
}

fn grads_of(mut g: fixsynth_tensor::Gradients, leaves: &[Var], net: &Network) -> Vec<Tensor> {
    leaves
        .iter()
        .zip(&net.params)
        .map(|(v, p)| g.take_or_zeros(*v, p.shape()))
        .collect()
}

/// Alternating critic / generator optimisation on a fixed-order corpus.
pub fn train(corpus: &[CorrelationMatrix], cfg: &GanConfig) -> Result<TrainedGan> {
    let gen_arch = build_generator(cfg)?;
    let critic_arch = build_critic(cfg)?;
    if corpus.len() < cfg.batch {
        return Err(Error::invalid(format!(
            "gan: {} training matrices, batch size is {}",
            corpus.len(),
            cfg.batch
        )));
    }
    let ids = corpus[0].ids().clone();
    if let Some(m) = corpus.iter().find(|m| m.ids() != &ids) {
        return Err(Error::invalid(format!(
            "gan: training matrices disagree on asset order ({} assets vs {})",
            m.n(),
            ids.len()
        )));
    }
    if ids.len() != cfg.n {
        return Err(Error::invalid(format!("gan: corpus has n = {}, config has n = {}", ids.len(), cfg.n)));
    }

    let n = cfg.n;
    let mut generator = Network::new(gen_arch, derive_seed(cfg.seed, 1));
    let head = generator.params.len() - 2;
    let scale = cfg.head_init_scale;
    generator.params[head].data_mut().iter_mut().for_each(|w| *w *= scale);
    let mut critic = Network::new(critic_arch, derive_seed(cfg.seed, 2));
    let logits = logit_arch(&critic.arch);
    let gen_names = generator.param_names();
    let critic_names = critic.param_names();
    let mut gen_opt = cfg.gen_optimizer.build(&generator.params);
    let mut critic_opt = cfg.critic_optimizer.build(&critic.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let clip = match cfg.lipschitz {
        Lipschitz::WeightClip { c } => Some(c),
        Lipschitz::None => None,
    };
    if let Some(c) = clip {
        critic.clamp(c);
    }

    let mut steps = Vec::with_capacity(cfg.steps);
    let mut collapse_run = 0;
    let mut collapse_warning = None;
    let per = n * n;
    for step in 0..cfg.steps {
        let mut critic_loss = 0.0;
        let mut gap = 0.0;
        for _ in 0..cfg.critic_steps {
            let mut real = Vec::with_capacity(cfg.batch * per);
            for _ in 0..cfg.batch {
                real.extend_from_slice(corpus[rng.random_range(0..corpus.len())].data());
            }
            let real = Tensor::new(vec![cfg.batch, 1, n, n], real)?;
            let z = latent_batch(&mut rng, cfg.batch, cfg.latent);
            let fake = generator.forward(&z, Mode::Eval)?;

            let mut tape = Tape::new();
            let leaves = critic.leaves(&mut tape, true);
            let xr = tape.leaf(real);
            let xf = tape.leaf(fake);
            let sr = logits.forward_tape(&mut tape, xr, &leaves, Mode::Eval)?;
            let sf = logits.forward_tape(&mut tape, xf, &leaves, Mode::Eval)?;
            let l = critic_objective(&mut tape, cfg.variant, sr, sf)?;
            critic_loss = tape.value(l.loss).item();
            if let Some((mr, mf)) = l.gap {
                gap = tape.value(mr).item() - tape.value(mf).item();
            }
            if !critic_loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = grads_of(tape.backward(l.loss)?, &leaves, &critic);
            critic_opt.step(&mut critic.params, &grads, &critic_names)?;
            if let Some(c) = clip {
                critic.clamp(c);
            }
        }

        let z = latent_batch(&mut rng, cfg.batch, cfg.latent);
        let mut tape = Tape::new();
        let gl = generator.leaves(&mut tape, true);
        let cl = critic.leaves(&mut tape, false);
        let zv = tape.leaf(z);
        let fake = generator.forward_tape(&mut tape, zv, &gl, Mode::Eval)?;
        let spread = batch_spread(n, tape.value(fake));
        let score = logits.forward_tape(&mut tape, fake, &cl, Mode::Eval)?;
        let l = generator_objective(&mut tape, cfg.variant, score)?;
        let gen_loss = tape.value(l.loss).item();
        if !gen_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = grads_of(tape.backward(l.loss)?, &gl, &generator);
        gen_opt.step(&mut generator.params, &grads, &gen_names)?;

        collapse_run = if spread < cfg.collapse_spread { collapse_run + 1 } else { 0 };
        if collapse_run >= cfg.collapse_window && collapse_warning.is_none() {
            log::warn!("{}: generated batch spread below {} for {} steps", cfg.variant.as_str(), cfg.collapse_spread, collapse_run);
            collapse_warning = Some(step);
        }
        steps.push(StepRecord {
            critic_loss,
            gen_loss,
            critic_gap: gap,
            spread,
        });
        if step % 500 == 0 {
            log::debug!("{} step {step}: critic {critic_loss:.5} gen {gen_loss:.5} spread {spread:.4}", cfg.variant.as_str());
        }
    }
    Ok(TrainedGan {
        config: cfg.clone(),
        ids,
        generator,
        critic,
        history: History { steps, collapse_warning },
    })
}

/// Matrices per sampling shard; each shard draws from its own derived seed.
pub const SHARD: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub matrices: Vec<CorrelationMatrix>,
    /// Indices of raw samples whose projection failed.
    pub failed: Vec<usize>,
}

impl TrainedGan {
    pub fn n(&self) -> usize {
        self.config.n
    }

    /// Critic output: raw score for WGAN, probability for DCGAN.
    pub fn critic_output(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.critic.forward(x, Mode::Eval)?)
    }

    /// Symmetrized generator outputs, row-major `n x n` each.
    pub fn raw_samples(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let n = self.n();
        let shards: Vec<(usize, usize)> = (0..count.div_ceil(SHARD))
            .map(|k| (k, SHARD.min(count - k * SHARD)))
            .collect();
        let out: Vec<Vec<Vec<f64>>> = shards
            .par_iter()
            .map(|&(k, rows)| -> Result<Vec<Vec<f64>>> {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
                let z = latent_batch(&mut rng, rows, self.config.latent);
                let x = self.generator.forward(&z, Mode::Eval)?;
                Ok(x.data().chunks(n * n).map(|a| symmetrize(n, a)).collect())
            })
            .collect::<Result<_>>()?;
        Ok(out.into_iter().flatten().collect())
    }

    /// Valid correlation matrices: symmetrize, reset the diagonal, project.
    pub fn sample(&self, count: usize, seed: u64) -> Result<SampleOutcome> {
        let n = self.n();
        let raw = self.raw_samples(count, seed)?;
        let cfg = NearestConfig::default();
        let results: Vec<Result<CorrelationMatrix>> = raw
            .into_par_iter()
            .map(|mut a| {
                for i in 0..n {
                    a[i * n + i] = 1.0;
                }
                CorrelationMatrix::repair(self.ids.clone(), &a, &cfg)
            })
            .collect();
        let mut matrices = Vec::with_capacity(count);
        let mut failed = Vec::new();
        for (k, r) in results.into_iter().enumerate() {
            match r {
                Ok(m) => matrices.push(m),
                Err(e) => {
                    log::warn!("sample {k} skipped: {e}");
                    failed.push(k);
                }
            }
        }
        if failed.len() * 100 > count {
            return Err(Error::TooManyFailures {
                what: format!("{} sampling", self.config.variant.as_str()),
                failed: failed.len(),
                total: count,
            });
        }
        Ok(SampleOutcome { matrices, failed })
    }

    /// Mean diagonal entry of the raw generator outputs.
    pub fn raw_diagonal_mean(&self, count: usize, seed: u64) -> Result<f64> {
        let n = self.n();
        let raw = self.raw_samples(count, seed)?;
        if raw.is_empty() {
            return Err(Error::invalid("raw_diagonal_mean needs count >= 1"));
        }
        let total: f64 = raw.iter().map(|a| (0..n).map(|i| a[i * n + i]).sum::<f64>()).sum();
        Ok(total / (raw.len() * n) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "model": "corrgan",
            "config": self.config,
            "ids": &self.ids[..],
            "history": self.history,
        });
        let mut tensors = Vec::new();
        for (name, p) in self.generator.param_names().into_iter().zip(&self.generator.params) {
            tensors.push((format!("generator/{name}"), p));
        }
        for (name, p) in self.critic.param_names().into_iter().zip(&self.critic.params) {
            tensors.push((format!("critic/{name}"), p));
        }
        write_weights(path, &meta, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let (meta, tensors) = read_weights(path)?;
        if meta["model"] != "corrgan" {
            return Err(Error::invalid(format!("{} is not a gan model file", path.display())));
        }
        let config: GanConfig = serde_json::from_value(meta["config"].clone())?;
        let ids: Vec<String> = serde_json::from_value(meta["ids"].clone())?;
        let history: History = serde_json::from_value(meta["history"].clone())?;
        let mut gen = Vec::new();
        let mut crit = Vec::new();
        for (name, t) in tensors {
            if name.starts_with("generator/") {
                gen.push(t);
            } else if name.starts_with("critic/") {
                crit.push(t);
            }
        }
        Ok(Self {
            generator: Network::from_parts(build_generator(&config)?, gen)?,
            critic: Network::from_parts(build_critic(&config)?, crit)?,
            config,
            ids: ids.into(),
            history,
        })
    }
}
