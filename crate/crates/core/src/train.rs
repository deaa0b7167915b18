//! Adam training loop with step decay, per-epoch logging and checkpoints.
//!
//! Every random choice of epoch `e` (batch order, training masks, noise) is
//! derived from `(seed, stream, e, scene)`, so a run resumed from a
//! checkpoint continues exactly like an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveVariant;
use crate::data::{make_mask, normalize, Dataset, MaskSpec};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::model::{domain_vocabulary, forward_train, Batch, Model, ModelConfig, TrainNoise};
use crate::numerics::{Array, Tape};
use crate::params::ParamStore;
use crate::seed::{self, stream};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "multitraj-ckpt/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub k_train: usize,
    pub weights: LossWeights,
    pub model: ModelConfig,
    /// Training masks; each scene draws one pattern per epoch. Empty means
    /// random 0.3, prediction of the second half and block 0.3.
    pub train_masks: Vec<MaskSpec>,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Linear KL warm-up length in epochs (0 = off).
    pub kl_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr0: 1e-3,
            decay_factor: 0.9,
            decay_every: 20,
            seed: 0,
            k_train: 5,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            train_masks: Vec::new(),
            checkpoint_every: 0,
            kl_warmup: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.k_train == 0 || self.decay_every == 0 {
            return Err(Error::Config("epochs, batch_size, k_train and decay_every must be ≥ 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fills data-dependent defaults: the training mask mixture and, on a
    /// single-domain dataset, a hierarchical objective without the domain
    /// head (that term would never have negatives).
    pub fn resolve(&self, dataset: &Dataset) -> Result<Self> {
        let mut cfg = self.clone();
        let steps = dataset.steps().ok_or_else(|| Error::Usage("cannot train on an empty dataset".into()))?;
        if cfg.train_masks.is_empty() {
            cfg.train_masks = vec![MaskSpec::random(0.3), MaskSpec::prediction(steps / 2), MaskSpec::block(0.3)];
        }
        for spec in &cfg.train_masks {
            spec.validate(steps)?;
        }
        if dataset.domains().len() < 2 && cfg.model.contrastive.variant == ContrastiveVariant::Hierarchical {
            log::info!("single-domain data: the domain contrastive term is disabled");
            cfg.model.contrastive.variant = ContrastiveVariant::RoleOnly;
        }
        Ok(cfg)
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
    pub skipped: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (k, a) in p.iter() {
                z.insert(k.clone(), Array::zeros(a.shape()));
            }
            z
        };
        Self { step: 0, m: zeros(params), v: zeros(params), skipped: 0 }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero gradient. Returns false (and leaves everything
/// but the skip counter untouched) when any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Option<Array>>, state: &mut OptimizerState, lr: f64) -> Result<bool> {
    for (path, g) in grads {
        if let Some(g) = g {
            if !g.is_finite() {
                log::warn!("non-finite gradient for `{path}`; skipping optimizer step {}", state.step + 1);
                state.skipped += 1;
                return Ok(false);
            }
            let p = params.get(path)?;
            if p.shape() != g.shape() {
                return Err(crate::params::ParamError::Shape { path: path.clone(), expected: p.shape().to_vec(), found: g.shape().to_vec() }.into());
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    for path in paths {
        let g = grads.get(&path).and_then(|g| g.as_ref());
        let m = state.m.get_mut(&path)?;
        let v = state.v.get_mut(&path)?;
        let p = params.get_mut(&path)?;
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
            let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + EPSILON);
        }
    }
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub elbo: f64,
    pub rec: f64,
    pub wta: f64,
    pub hier: f64,
    pub total: f64,
}

pub fn write_log(rows: &[LogRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<LogRow>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(Error::json(path))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::json(path))?;
        let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("<missing>").to_string();
        if found != CHECKPOINT_FORMAT {
            return Err(Error::CheckpointVersion { found, expected: CHECKPOINT_FORMAT.into() });
        }
        serde_json::from_value(value).map_err(Error::json(path))
    }
}

/// Where [`fit`] writes its artifacts, and an optional checkpoint to resume.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

pub struct FitResult {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub log: Vec<LogRow>,
    pub config: TrainConfig,
}

/// Returns `dataset` in unit coordinates, normalizing when needed.
pub fn normalized(dataset: &Dataset) -> Result<Dataset> {
    if dataset.is_normalized() {
        Ok(dataset.clone())
    } else {
        Ok(normalize(dataset)?)
    }
}

fn train_mask(cfg: &TrainConfig, epoch: usize, scene: usize, n: usize, t: usize) -> Result<Vec<u8>> {
    let mut rng = seed::rng_for(cfg.seed, &[stream::TRAIN_MASK, epoch as u64, scene as u64]);
    let spec = &cfg.train_masks[rng.random_range(0..cfg.train_masks.len())];
    let seeded = spec.clone().with_seed(seed::derive_seed(cfg.seed, &[stream::TRAIN_MASK, epoch as u64, scene as u64]));
    Ok(make_mask(&seeded, n, t)?)
}

/// Trains on `dataset` (normalized first if necessary).
pub fn fit(dataset: &Dataset, config: &TrainConfig, opts: FitOptions) -> Result<FitResult> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let data = normalized(dataset)?;
    let cfg = config.resolve(&data)?;
    let steps = data.steps().expect("non-empty");
    if data.sequences.iter().any(|s| s.steps() != steps) {
        return Err(Error::Usage("all training scenes must share the same number of steps".into()));
    }
    let (mut model, mut opt, mut log, start) = match opts.resume {
        Some(ck) => {
            if ck.config.seed != cfg.seed || ck.config.weights != cfg.weights {
                log::warn!("resuming with a configuration that differs from the checkpoint's");
            }
            let mut model = Model::new(cfg.model.clone(), ck.model.domains.clone(), steps, cfg.seed)?;
            model.load_params(ck.model.params)?;
            model.trained_on = ck.model.trained_on;
            (model, ck.optimizer, ck.log, ck.epoch)
        }
        None => {
            let domains = domain_vocabulary(data.domains().iter().map(String::as_str));
            let mut model = Model::new(cfg.model.clone(), domains, steps, cfg.seed)?;
            model.trained_on = data.domains();
            let opt = OptimizerState::new(&model.params);
            (model, opt, Vec::new(), 0)
        }
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let save = |model: &Model, opt: &OptimizerState, log: &[LogRow], epoch: usize| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), config: cfg.clone(), model: model.clone(), optimizer: opt.clone(), epoch, log: log.to_vec() };
            ck.save(&dir.join("checkpoint.json"))?;
            let path = dir.join("log.csv");
            let file = fs::File::create(&path).map_err(Error::io(&path))?;
            write_log(log, file)?;
        }
        Ok(())
    };

    for epoch in start..cfg.epochs {
        let lr = lr_schedule(epoch, &cfg);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut weights = cfg.weights.clone();
        if cfg.kl_warmup > 0 {
            weights.lambda1 *= ((epoch + 1) as f64 / cfg.kl_warmup as f64).min(1.0);
        }
        let mut sums = LossBreakdown::default();
        let mut reached: BTreeMap<String, bool> = model.params.paths().map(|p| (p.to_string(), false)).collect();
        for chunk in order.chunks(cfg.batch_size) {
            let scenes: Vec<_> = chunk.iter().map(|&i| &data.sequences[i]).collect();
            let masks = chunk
                .iter()
                .map(|&i| train_mask(&cfg, epoch, i, data.sequences[i].n_agents(), steps))
                .collect::<Result<Vec<_>>>()?;
            let mask_refs: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let batch = Batch::new(&model, &scenes, &mask_refs, &ids)?;
            let noise = TrainNoise::draw(&model, &batch, cfg.k_train, cfg.seed, &[stream::NOISE, epoch as u64]);

            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let fwd = forward_train(&mut tape, &p, &model, &batch, &noise, weights.lambda_c)?;
            let loss = total_loss(&mut tape, &fwd, &batch, &weights)?;
            let b = loss.breakdown;
            if !b.total.is_finite() {
                return Err(Error::Diverged { epoch, reason: format!("total loss {}", b.total) });
            }
            let grads = p.collect(&tape.backward(loss.total)?);
            for (path, g) in &grads {
                if g.is_some() {
                    reached.insert(path.clone(), true);
                }
            }
            adam_step(&mut model.params, &grads, &mut opt, lr)?;
            let w = chunk.len() as f64;
            sums.elbo += w * b.elbo;
            sums.rec += w * b.rec;
            sums.wta += w * b.wta;
            sums.hier += w * b.hier;
            sums.total += w * b.total;
        }
        let orphans: Vec<&String> = reached.iter().filter(|(_, r)| !**r).map(|(p, _)| p).collect();
        if !orphans.is_empty() {
            return Err(Error::Config(format!("parameters never reached by the loss: {orphans:?}")));
        }
        let n = data.len() as f64;
        let row = LogRow { epoch: epoch + 1, lr, elbo: sums.elbo / n, rec: sums.rec / n, wta: sums.wta / n, hier: sums.hier / n, total: sums.total / n };
        log::info!("epoch {} lr {:.3e} total {:.5} (elbo {:.5} rec {:.5} wta {:.5} hier {:.5})", row.epoch, lr, row.total, row.elbo, row.rec, row.wta, row.hier);
        log.push(row);
        let done = epoch + 1;
        if done == cfg.epochs || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save(&model, &opt, &log, done)?;
        }
    }
    Ok(FitResult { model, optimizer: opt, log, config: cfg })
}
