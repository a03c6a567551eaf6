//! Encoder-decoder that maps a correlation matrix to volatilities, expected
//! returns and forward returns.

use std::path::Path;
use std::sync::Arc;

use fixsynth_tensor::io::{read_weights, write_weights};
use fixsynth_tensor::optim::{AdamConfig, OptimizerConfig};
use fixsynth_tensor::{Layer, Mode, Network, Op, Sequential, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::market::{CorrelationMatrix, MarketSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadBlock {
    pub channels: usize,
    pub factor: usize,
}

/// Shared by all three decoder heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub linear: Vec<usize>,
    pub seed_len: usize,
    pub seed_channels: usize,
    pub blocks: Vec<HeadBlock>,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            linear: vec![],
            seed_len: 4,
            seed_channels: 8,
            blocks: vec![HeadBlock { channels: 8, factor: 2 }, HeadBlock { channels: 8, factor: 2 }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub n: usize,
    pub encoder: Vec<EncBlock>,
    pub dropout: f64,
    pub enc_linear: Vec<usize>,
    pub latent: usize,
    pub head: HeadSpec,
    pub slope: f64,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch: usize,
    /// Trailing share of snapshots (by date) held out for validation.
    pub val_fraction: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            n: 16,
            encoder: vec![
                EncBlock { channels: 8, kernel: 3, stride: 1, padding: 1 },
                EncBlock { channels: 16, kernel: 4, stride: 2, padding: 1 },
            ],
            dropout: 0.1,
            enc_linear: vec![],
            latent: 32,
            head: HeadSpec::default(),
            slope: 0.2,
            optimizer: OptimizerConfig::Adam(AdamConfig::default()),
            steps: 2000,
            batch: 32,
            val_fraction: 0.1,
            eval_every: 100,
            seed: 0,
        }
    }
}

pub const HEADS: [&str; 3] = ["vol", "er", "fr"];

pub struct AeArch {
    pub encoder: Sequential,
    pub heads: [Sequential; 3],
}

pub fn build(cfg: &AeConfig) -> Result<AeArch> {
    if cfg.n == 0 || cfg.latent == 0 || cfg.batch == 0 || !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::invalid("autoencoder: n, latent and batch must be positive, dropout in [0, 1)"));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) || cfg.eval_every == 0 {
        return Err(Error::invalid("autoencoder: val_fraction must be in [0, 1) and eval_every positive"));
    }
    let mut enc = Vec::new();
    let mut ch = 1;
    for b in &cfg.encoder {
        enc.push(Layer::Conv2d {
            in_channels: ch,
            out_channels: b.channels,
            kernel: b.kernel,
            stride: b.stride,
            padding: b.padding,
        });
        enc.push(Layer::LeakyRelu { slope: cfg.slope });
        if cfg.dropout > 0.0 {
            enc.push(Layer::Dropout { rate: cfg.dropout });
        }
        ch = b.channels;
    }
    let conv = Sequential::new(enc.clone()).output_shape(&[1, cfg.n, cfg.n])?;
    let mut width: usize = conv.iter().product();
    enc.push(Layer::Reshape { shape: vec![width] });
    for &h in cfg.enc_linear.iter().chain([&cfg.latent]) {
        enc.push(Layer::Linear { inputs: width, outputs: h });
        enc.push(Layer::LeakyRelu { slope: cfg.slope });
        width = h;
    }

    let spec = &cfg.head;
    let grown = spec.blocks.iter().fold(spec.seed_len, |s, b| s * b.factor);
    if grown != cfg.n || spec.seed_len == 0 || spec.seed_channels == 0 {
        return Err(Error::invalid(format!(
            "autoencoder: head seed length {} grown by {:?} does not reach n = {}",
            spec.seed_len,
            spec.blocks.iter().map(|b| b.factor).collect::<Vec<_>>(),
            cfg.n
        )));
    }
    let head = |softplus: bool| -> Result<Sequential> {
        let mut layers = Vec::new();
        let mut w = cfg.latent;
        for &h in &spec.linear {
            layers.push(Layer::Linear { inputs: w, outputs: h });
            layers.push(Layer::LeakyRelu { slope: cfg.slope });
            w = h;
        }
        layers.push(Layer::Linear {
            inputs: w,
            outputs: spec.seed_channels * spec.seed_len,
        });
        layers.push(Layer::LeakyRelu { slope: cfg.slope });
        layers.push(Layer::Reshape {
            shape: vec![spec.seed_channels, spec.seed_len],
        });
        let mut ch = spec.seed_channels;
        for b in &spec.blocks {
            layers.push(Layer::Upsample1d { factor: b.factor });
            layers.push(Layer::Conv1d {
                in_channels: ch,
                out_channels: b.channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(Layer::LeakyRelu { slope: cfg.slope });
            ch = b.channels;
        }
        layers.push(Layer::Conv1d {
            in_channels: ch,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        });
        layers.push(Layer::Reshape { shape: vec![cfg.n] });
        if softplus {
            layers.push(Layer::Softplus);
        }
        let arch = Sequential::new(layers);
        let out = arch.output_shape(&[cfg.latent])?;
        if out != [cfg.n] {
            return Err(Error::invalid(format!("autoencoder: head emits {out:?}, expected [{}]", cfg.n)));
        }
        Ok(arch)
    };
    Ok(AeArch {
        encoder: Sequential::new(enc),
        heads: [head(true)?, head(false)?, head(false)?],
    })
}

/// Per-asset training statistics. Volatility is only rescaled so the
/// softplus head keeps a positive target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [Vec<f64>; 3],
    pub scale: [Vec<f64>; 3],
}

fn component(s: &MarketSnapshot, c: usize) -> &[f64] {
    match c {
        0 => &s.vol,
        1 => &s.expected,
        _ => &s.forward,
    }
}

impl Standardization {
    /// Per-asset std, falling back to the pooled std of the component and
    /// then to 1 when a series is constant.
    pub fn fit(snaps: &[MarketSnapshot]) -> Self {
        let n = snaps[0].n();
        let k = snaps.len() as f64;
        let stats = |c: usize| {
            let mean: Vec<f64> = (0..n).map(|i| snaps.iter().map(|s| component(s, c)[i]).sum::<f64>() / k).collect();
            let all: Vec<f64> = snaps.iter().flat_map(|s| component(s, c).iter().copied()).collect();
            let pooled = crate::linalg::sample_std(&all);
            let scale = (0..n)
                .map(|i| {
                    let sd = if snaps.len() > 1 {
                        let col: Vec<f64> = snaps.iter().map(|s| component(s, c)[i]).collect();
                        crate::linalg::sample_std(&col)
                    } else {
                        0.0
                    };
                    if sd > 1e-12 {
                        sd
                    } else if pooled > 1e-12 {
                        pooled
                    } else {
                        1.0
                    }
                })
                .collect();
            (mean, scale)
        };
        let (_, s0) = stats(0);
        let (m1, s1) = stats(1);
        let (m2, s2) = stats(2);
        Self {
            mean: [vec![0.0; n], m1, m2],
            scale: [s0, s1, s2],
        }
    }

    fn forward(&self, c: usize, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[c][i]) / self.scale[c][i])
            .collect()
    }

    fn inverse(&self, c: usize, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| v * self.scale[c][i] + self.mean[c][i])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub vol: f64,
    pub er: f64,
    pub fr: f64,
}

impl LossRecord {
    pub fn total(&self) -> f64 {
        self.vol + self.er + self.fr
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeHistory {
    pub train: Vec<LossRecord>,
    pub validation: Vec<LossRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVectors {
    pub volatilities: Vec<f64>,
    pub expected_returns: Vec<f64>,
    pub forward_returns: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttrModel {
    pub config: AeConfig,
    pub ids: Arc<[String]>,
    pub encoder: Network,
    pub heads: [Network; 3],
    pub stats: Standardization,
    pub history: AeHistory,
}

fn input_batch(n: usize, snaps: &[&MarketSnapshot]) -> Result<Tensor> {
    let data: Vec<f64> = snaps.iter().flat_map(|s| s.corr.data().iter().copied()).collect();
    Ok(Tensor::new(vec![snaps.len(), 1, n, n], data)?)
}

struct Graph {
    loss: Var,
    parts: [Var; 3],
    enc: Vec<Var>,
    heads: [Vec<Var>; 3],
}

fn record(
    tape: &mut Tape,
    encoder: &Network,
    heads: &[Network; 3],
    stats: &Standardization,
    batch: &[&MarketSnapshot],
    mode: Mode,
    trainable: bool,
) -> Result<Graph> {
    let n = batch[0].n();
    let enc = encoder.leaves(tape, trainable);
    let hl: [Vec<Var>; 3] = [
        heads[0].leaves(tape, trainable),
        heads[1].leaves(tape, trainable),
        heads[2].leaves(tape, trainable),
    ];
    let x = tape.leaf(input_batch(n, batch)?);
    let z = encoder.forward_tape(tape, x, &enc, mode)?;
    let mut parts = Vec::with_capacity(3);
    for c in 0..3 {
        let y = heads[c].forward_tape(tape, z, &hl[c], mode)?;
        let target: Vec<f64> = batch.iter().flat_map(|s| stats.forward(c, component(s, c))).collect();
        let t = tape.leaf(Tensor::new(vec![batch.len(), n], target)?);
        parts.push(tape.apply(Op::MseLoss, &[y, t])?);
    }
    let s = tape.apply(Op::Add, &[parts[0], parts[1]])?;
    let loss = tape.apply(Op::Add, &[s, parts[2]])?;
    Ok(Graph {
        loss,
        parts: [parts[0], parts[1], parts[2]],
        enc,
        heads: hl,
    })
}

/// Trains on the leading `1 - val_fraction` share of `snaps` (date order).
pub fn train(snaps: &[MarketSnapshot], cfg: &AeConfig) -> Result<AttrModel> {
    let arch = build(cfg)?;
    if snaps.is_empty() {
        return Err(Error::invalid("autoencoder: no training snapshots"));
    }
    let ids = snaps[0].ids().clone();
    if ids.len() != cfg.n || snaps.iter().any(|s| s.ids() != &ids) {
        return Err(Error::invalid(format!(
            "autoencoder: snapshots must share one {}-asset universe",
            cfg.n
        )));
    }
    let val = (snaps.len() as f64 * cfg.val_fraction).floor() as usize;
    let (fit, held) = snaps.split_at(snaps.len() - val);
    if fit.len() < cfg.batch {
        return Err(Error::invalid(format!(
            "autoencoder: {} training snapshots, batch size is {}",
            fit.len(),
            cfg.batch
        )));
    }
    let stats = Standardization::fit(fit);
    let mut encoder = Network::new(arch.encoder, derive_seed(cfg.seed, 1));
    let [h0, h1, h2] = arch.heads;
    let mut heads = [
        Network::new(h0, derive_seed(cfg.seed, 2)),
        Network::new(h1, derive_seed(cfg.seed, 3)),
        Network::new(h2, derive_seed(cfg.seed, 4)),
    ];
    let names: Vec<String> = std::iter::once(&encoder)
        .chain(heads.iter())
        .enumerate()
        .flat_map(|(k, net)| net.param_names().into_iter().map(move |p| format!("{k}/{p}")))
        .collect();
    let mut all: Vec<Tensor> = std::iter::once(&encoder).chain(heads.iter()).flat_map(|n| n.params.clone()).collect();
    let mut opt = cfg.optimizer.build(&all);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5));
    let mut history = AeHistory::default();

    for step in 0..cfg.steps {
        let batch: Vec<&MarketSnapshot> = (0..cfg.batch).map(|_| &fit[rng.random_range(0..fit.len())]).collect();
        let mut tape = Tape::new();
        let mode = Mode::Train {
            seed: derive_seed(cfg.seed, 1000 + step as u64),
        };
        let g = record(&mut tape, &encoder, &heads, &stats, &batch, mode, true)?;
        let rec = LossRecord {
            step,
            vol: tape.value(g.parts[0]).item(),
            er: tape.value(g.parts[1]).item(),
            fr: tape.value(g.parts[2]).item(),
        };
        if !rec.total().is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = tape.backward(g.loss)?;
        let leaves = g.enc.iter().chain(g.heads.iter().flatten());
        let gs: Vec<Tensor> = leaves
            .zip(&all)
            .map(|(v, p)| grads.take_or_zeros(*v, p.shape()))
            .collect();
        opt.step(&mut all, &gs, &names)?;
        let mut it = all.iter();
        for net in std::iter::once(&mut encoder).chain(heads.iter_mut()) {
            for p in &mut net.params {
                *p = it.next().expect("one tensor per parameter").clone();
            }
        }
        history.train.push(rec);
        if !held.is_empty() && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            let v = eval_loss(&encoder, &heads, &stats, held)?;
            history.validation.push(LossRecord { step, ..v });
        }
    }
    Ok(AttrModel {
        config: cfg.clone(),
        ids,
        encoder,
        heads,
        stats,
        history,
    })
}

fn eval_loss(encoder: &Network, heads: &[Network; 3], stats: &Standardization, snaps: &[MarketSnapshot]) -> Result<LossRecord> {
    let refs: Vec<&MarketSnapshot> = snaps.iter().collect();
    let mut tape = Tape::new();
    let g = record(&mut tape, encoder, heads, stats, &refs, Mode::Eval, false)?;
    Ok(LossRecord {
        step: 0,
        vol: tape.value(g.parts[0]).item(),
        er: tape.value(g.parts[1]).item(),
        fr: tape.value(g.parts[2]).item(),
    })
}

impl AttrModel {
    pub fn n(&self) -> usize {
        self.config.n
    }

    /// Standardized per-component loss in eval mode.
    pub fn loss(&self, snaps: &[MarketSnapshot]) -> Result<LossRecord> {
        if snaps.is_empty() || snaps.iter().any(|s| s.n() != self.n()) {
            return Err(Error::invalid("autoencoder: loss needs snapshots of the model size"));
        }
        eval_loss(&self.encoder, &self.heads, &self.stats, snaps)
    }

    pub fn generate(&self, corr: &CorrelationMatrix) -> Result<AttributeVectors> {
        let n = self.n();
        if corr.n() != n {
            return Err(Error::invalid(format!("autoencoder: model has n = {n}, matrix has n = {}", corr.n())));
        }
        let x = Tensor::new(vec![1, 1, n, n], corr.data().to_vec())?;
        let z = self.encoder.forward(&x, Mode::Eval)?;
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(3);
        for c in 0..3 {
            let y = self.heads[c].forward(&z, Mode::Eval)?;
            out.push(self.stats.inverse(c, y.data()));
        }
        let forward_returns = out.pop().expect("three heads");
        let expected_returns = out.pop().expect("three heads");
        let volatilities = out.pop().expect("three heads");
        Ok(AttributeVectors {
            volatilities,
            expected_returns,
            forward_returns,
        })
    }

    /// Undated snapshots for each matrix, in input order.
    pub fn generate_snapshots(&self, matrices: &[CorrelationMatrix]) -> Result<Vec<MarketSnapshot>> {
        matrices
            .par_iter()
            .map(|m| {
                let a = self.generate(m)?;
                MarketSnapshot::new(None, m.clone(), a.volatilities, a.expected_returns, a.forward_returns)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "model": "attr_autoencoder",
            "config": self.config,
            "ids": &self.ids[..],
            "stats": self.stats,
            "history": self.history,
        });
        let mut tensors = Vec::new();
        let prefixes = ["encoder", HEADS[0], HEADS[1], HEADS[2]];
        for (prefix, net) in prefixes.iter().zip(std::iter::once(&self.encoder).chain(self.heads.iter())) {
            for (name, p) in net.param_names().into_iter().zip(&net.params) {
                tensors.push((format!("{prefix}/{name}"), p));
            }
        }
        write_weights(path, &meta, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let (meta, tensors) = read_weights(path)?;
        if meta["model"] != "attr_autoencoder" {
            return Err(Error::invalid(format!("{} is not an autoencoder model file", path.display())));
        }
        let config: AeConfig = serde_json::from_value(meta["config"].clone())?;
        let ids: Vec<String> = serde_json::from_value(meta["ids"].clone())?;
        let arch = build(&config)?;
        let mut groups: [Vec<Tensor>; 4] = Default::default();
        let prefixes = ["encoder", HEADS[0], HEADS[1], HEADS[2]];
        for (name, t) in tensors {
            let prefix = name.split('/').next().unwrap_or("");
            if let Some(k) = prefixes.iter().position(|p| *p == prefix) {
                groups[k].push(t);
            }
        }
        let [g0, g1, g2, g3] = groups;
        let [h0, h1, h2] = arch.heads;
        Ok(Self {
            encoder: Network::from_parts(arch.encoder, g0)?,
            heads: [
                Network::from_parts(h0, g1)?,
                Network::from_parts(h1, g2)?,
                Network::from_parts(h2, g3)?,
            ],
            stats: serde_json::from_value(meta["stats"].clone())?,
            history: serde_json::from_value(meta["history"].clone())?,
            config,
            ids: ids.into(),
        })
    }
}
