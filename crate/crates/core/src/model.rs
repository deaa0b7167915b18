//! Masked-trajectory CVAE.
//!
//! ```text
//! masked X, M ─► encoder ─► h ─► posterior (μ, σ) ─► z = μ + σ⊙ε ─► adapter ─► decoder ─► Ŷ
//!                            └──────────────── condition ───────────────────────────┘
//! ```
//!
//! The encoder projects per-step features `[x·m, y·m, m, T·vx, T·vy, T·|v|,
//! team one-hot]`, where `v` is the displacement per step since the previous
//! visible step (zero when there is none). It runs a GRU over time for
//! every agent and mixes the resulting summaries with one self-attention
//! layer across the agents of a scene. Generation
//! replaces the posterior draw with `z = ε ~ N(0, I)`.
//!
//! A batch stacks every agent of every scene as one row; [`Layout`] records
//! which rows belong to the same scene so attention never crosses scenes.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig, AdapterOutput};
use crate::contrastive::{self, ContrastiveConfig, HierOutput};
use crate::data::{Role, SceneSequence, KNOWN_DOMAINS};
use crate::numerics::{Array, Tape, Var};
use crate::params::{init_linear, init_zero_linear, linear, Bound, ParamStore};
use crate::seed;
use crate::{Error, Result};

/// Per-step input features: masked x, masked y, mask, team one-hot.
pub const INPUT_FEATURES: usize = 9;

/// Row grouping of a batch: consecutive rows per scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    offsets: Vec<usize>,
}

impl Layout {
    pub fn new(sizes: &[usize]) -> Self {
        let mut offsets = vec![0];
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Self { offsets }
    }

    pub fn rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn scenes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, scene: usize) -> std::ops::Range<usize> {
        self.offsets[scene]..self.offsets[scene + 1]
    }

    /// Row offsets of the scenes, starting at 0 and ending at `rows()`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// The same grouping stacked `k` times (one copy per sample).
    pub fn repeat(&self, k: usize) -> Layout {
        let sizes: Vec<usize> = (0..self.scenes()).map(|s| self.range(s).len()).collect();
        Layout::new(&sizes.repeat(k))
    }
}

/// Where the adapter sits in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    /// On the sampled latent, before decoding.
    Latent,
    /// On the encoder summary, before the posterior head.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_z: usize,
    pub heads: usize,
    pub decoder_hidden: usize,
    pub insertion: Insertion,
    /// Decode offsets from each agent's least-squares line over its visible
    /// steps.
    pub anchor: bool,
    pub adapter: AdapterConfig,
    pub contrastive: ContrastiveConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_z: 16,
            heads: 4,
            decoder_hidden: 64,
            insertion: Insertion::Latent,
            anchor: true,
            adapter: AdapterConfig::default(),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Width of the features the adapter and contrastive heads see.
    pub fn adapted_dim(&self) -> usize {
        match self.insertion {
            Insertion::Latent => self.d_z,
            Insertion::Encoder => self.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_z == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("{} encoder heads do not divide d_model {}", self.heads, self.d_model)));
        }
        let dim = self.adapted_dim();
        if self.adapter.heads == 0 || dim % self.adapter.heads != 0 {
            return Err(Error::Config(format!("{} adapter heads do not divide width {dim}", self.adapter.heads)));
        }
        self.contrastive.validate()
    }
}

/// Default domain vocabulary: the known sports, then any other labels found.
pub fn domain_vocabulary<'a>(found: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut vocab: Vec<String> = KNOWN_DOMAINS.iter().map(|d| d.to_string()).collect();
    let mut extra: Vec<String> = found.into_iter().filter(|d| !vocab.iter().any(|v| v == d)).map(str::to_string).collect();
    extra.sort();
    extra.dedup();
    vocab.extend(extra);
    vocab
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub domains: Vec<String>,
    pub steps: usize,
    /// Domains seen during training.
    #[serde(default)]
    pub trained_on: Vec<String>,
    pub params: ParamStore,
}

mod group {
    pub const ENCODER: u64 = 1;
    pub const POSTERIOR: u64 = 2;
    pub const DECODER: u64 = 3;
    pub const ADAPTER: u64 = 4;
    pub const CONTRASTIVE: u64 = 5;
}

impl Model {
    /// Fresh parameters. Each parameter group draws from its own stream, so
    /// the backbone is identical across adapter and contrastive variants.
    pub fn new(config: ModelConfig, domains: Vec<String>, steps: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if domains.is_empty() || steps < 2 {
            return Err(Error::Config("model needs a domain vocabulary and at least 2 steps".into()));
        }
        let c = &config;
        let d = c.d_model;
        let mut p = ParamStore::new();
        let rng = |g: u64| seed::rng_for(seed, &[seed::stream::INIT, g]);

        let mut r = rng(group::ENCODER);
        init_linear(&mut p, &mut r, "encoder.input", INPUT_FEATURES, d, true);
        init_linear(&mut p, &mut r, "encoder.gru.ih", d, 3 * d, true);
        init_linear(&mut p, &mut r, "encoder.gru.hh", d, 3 * d, true);
        for proj in ["q", "k", "v", "out"] {
            init_linear(&mut p, &mut r, &format!("encoder.attn.{proj}"), d, d, proj == "out");
        }

        let mut r = rng(group::POSTERIOR);
        init_linear(&mut p, &mut r, "posterior.mu", d, c.d_z, true);
        init_linear(&mut p, &mut r, "posterior.logvar", d, c.d_z, true);

        let mut r = rng(group::DECODER);
        init_linear(&mut p, &mut r, "decoder.cond", d, d, true);
        init_linear(&mut p, &mut r, "decoder.hidden", c.d_z + d, c.decoder_hidden, true);
        if c.anchor {
            init_zero_linear(&mut p, "decoder.out", c.decoder_hidden, 2 * steps);
        } else {
            init_linear(&mut p, &mut r, "decoder.out", c.decoder_hidden, 2 * steps, true);
        }

        let dim = c.adapted_dim();
        adapter::init(&mut p, &mut rng(group::ADAPTER), &c.adapter, dim, Role::ALL.len(), domains.len());
        contrastive::init(&mut p, &mut rng(group::CONTRASTIVE), &c.contrastive, dim);
        Ok(Self { config, domains, steps, trained_on: Vec::new(), params: p })
    }

    /// Replaces the parameters with `params`, which must match this
    /// architecture path for path and shape for shape.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn domain_index(&self, domain: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == domain)
            .ok_or_else(|| Error::Usage(format!("domain `{domain}` is not in the model vocabulary {:?}", self.domains)))
    }
}

/// Model inputs for a group of scenes, one row per agent.
#[derive(Clone, Debug)]
pub struct Batch {
    pub layout: Layout,
    pub steps: usize,
    /// Scene identifiers; noise for a scene depends only on its id.
    pub ids: Vec<u64>,
    /// `(T·R) × 6`, time-major: row `t·R + i`.
    pub input: Array,
    /// `R × 2T` ground truth, zero where unknown.
    pub target: Array,
    /// `R × 2T` weights: 1 where the model saw the coordinate.
    pub visible: Array,
    /// `R × 2T` weights: 1 where ground truth exists but was hidden.
    pub missing: Array,
    /// `R × 2T` weights: 1 wherever ground truth exists.
    pub known: Array,
    /// `R × 2T` decoding offset (per-agent visible trend, or zero).
    pub anchor: Array,
    pub roles: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Batch {
    /// `task_masks[s]` hides additional entries of scene `s` on top of its
    /// own data mask.
    pub fn new(model: &Model, scenes: &[&SceneSequence], task_masks: &[&[u8]], ids: &[u64]) -> Result<Self> {
        if scenes.len() != task_masks.len() || scenes.len() != ids.len() {
            return Err(Error::Usage("scenes, masks and ids must align".into()));
        }
        let t = model.steps;
        let sizes: Vec<usize> = scenes.iter().map(|s| s.n_agents()).collect();
        let layout = Layout::new(&sizes);
        let r = layout.rows();
        let mut input = vec![0.0; t * r * INPUT_FEATURES];
        let mut target = vec![0.0; r * 2 * t];
        let mut visible = vec![0.0; r * 2 * t];
        let mut missing = vec![0.0; r * 2 * t];
        let mut known = vec![0.0; r * 2 * t];
        let mut anchor = vec![0.0; r * 2 * t];
        let mut roles = Vec::with_capacity(r);
        let mut domains = Vec::with_capacity(r);
        for (s, (scene, task)) in scenes.iter().zip(task_masks).enumerate() {
            if scene.steps() != t {
                return Err(Error::Usage(format!("scene has {} steps, model expects {t}", scene.steps())));
            }
            if task.len() != scene.mask.len() {
                return Err(Error::Usage(format!("task mask has {} entries for {}", task.len(), scene.mask.len())));
            }
            let d = model.domain_index(&scene.domain)?;
            for i in 0..scene.n_agents() {
                let row = layout.range(s).start + i;
                roles.push(scene.roles[i].index());
                domains.push(d);
                let team = scene.teams[i].index();
                let (mut ts, mut xs, mut ys) = (Vec::new(), Vec::new(), Vec::new());
                for step in 0..t {
                    let has = scene.observed(i, step);
                    let seen = has && task[i * t + step] == 1;
                    let [x, y] = scene.xy(i, step);
                    let o = row * 2 * t + 2 * step;
                    if has {
                        target[o] = x;
                        target[o + 1] = y;
                        known[o] = 1.0;
                        known[o + 1] = 1.0;
                    }
                    let w = if seen { 1.0 } else { 0.0 };
                    visible[o] = w;
                    visible[o + 1] = w;
                    if has && !seen {
                        missing[o] = 1.0;
                        missing[o + 1] = 1.0;
                    }
                    let f = &mut input[(step * r + row) * INPUT_FEATURES..(step * r + row + 1) * INPUT_FEATURES];
                    if seen {
                        f[0] = x;
                        f[1] = y;
                        f[2] = 1.0;
                        if let (Some(&tp), Some(&xp), Some(&yp)) = (ts.last(), xs.last(), ys.last()) {
                            let gap = step as f64 - tp;
                            f[3] = (x - xp) / gap * t as f64;
                            f[4] = (y - yp) / gap * t as f64;
                            f[5] = f[3].hypot(f[4]);
                        }
                        ts.push(step as f64);
                        xs.push(x);
                        ys.push(y);
                    }
                    f[6 + team] = 1.0;
                }
                if model.config.anchor && !ts.is_empty() {
                    let (lx, ly) = (ols(&ts, &xs), ols(&ts, &ys));
                    for step in 0..t {
                        let o = row * 2 * t + 2 * step;
                        anchor[o] = lx.0 + lx.1 * step as f64;
                        anchor[o + 1] = ly.0 + ly.1 * step as f64;
                    }
                }
            }
        }
        let m = |data| Array::matrix(r, 2 * t, data).expect("sized");
        Ok(Self {
            layout,
            steps: t,
            ids: ids.to_vec(),
            input: Array::matrix(t * r, INPUT_FEATURES, input)?,
            target: m(target),
            visible: m(visible),
            missing: m(missing),
            known: m(known),
            anchor: m(anchor),
            roles,
            domains,
        })
    }

    pub fn rows(&self) -> usize {
        self.layout.rows()
    }

    /// Standard-normal draws laid out as `(k·R) × dim`. Scene `s` uses only
    /// the stream `(seed, path…, ids[s])`.
    pub fn noise(&self, k: usize, dim: usize, seed: u64, path: &[u64]) -> Array {
        let r = self.rows();
        let mut out = vec![0.0; k * r * dim];
        for s in 0..self.layout.scenes() {
            let mut full = path.to_vec();
            full.push(self.ids[s]);
            let mut rng = seed::rng_for(seed, &full);
            for copy in 0..k {
                for row in self.layout.range(s) {
                    let o = (copy * r + row) * dim;
                    for v in &mut out[o..o + dim] {
                        *v = StandardNormal.sample(&mut rng);
                    }
                }
            }
        }
        Array::matrix(k * r, dim, out).expect("sized")
    }
}

/// Per-agent summaries `R × d_model`.
pub fn encode(tape: &mut Tape, p: &Bound, batch: &Batch, d_model: usize, heads: usize) -> Result<Var> {
    if !batch.input.is_finite() {
        return Err(Error::Usage("non-finite encoder input".into()));
    }
    let r = batch.rows();
    let x = tape.constant(batch.input.clone());
    let proj = linear(tape, p, "encoder.input", x)?;
    let proj = tape.tanh(proj)?;
    let gi = linear(tape, p, "encoder.gru.ih", proj)?;
    let d = d_model;
    let mut h = tape.constant(Array::zeros(&[r, d]));
    for t in 0..batch.steps {
        let gi_t = tape.slice_rows(gi, t * r, (t + 1) * r)?;
        let gh = linear(tape, p, "encoder.gru.hh", h)?;
        let gate = |tape: &mut Tape, k: usize| -> Result<(Var, Var)> {
            Ok((tape.slice_cols(gi_t, k * d, (k + 1) * d)?, tape.slice_cols(gh, k * d, (k + 1) * d)?))
        };
        let (ir, hr) = gate(tape, 0)?;
        let (iz, hz) = gate(tape, 1)?;
        let (in_, hn) = gate(tape, 2)?;
        let rs = tape.add(ir, hr)?;
        let reset = tape.sigmoid(rs)?;
        let zs = tape.add(iz, hz)?;
        let update = tape.sigmoid(zs)?;
        let rn = tape.mul(reset, hn)?;
        let ns = tape.add(in_, rn)?;
        let cand = tape.tanh(ns)?;
        let diff = tape.sub(h, cand)?;
        let keep = tape.mul(update, diff)?;
        h = tape.add(cand, keep)?;
    }
    let q = linear(tape, p, "encoder.attn.q", h)?;
    let k = linear(tape, p, "encoder.attn.k", h)?;
    let v = linear(tape, p, "encoder.attn.v", h)?;
    let (mixed, _) = adapter::multi_head(tape, q, k, v, &batch.layout, heads)?;
    let mixed = linear(tape, p, "encoder.attn.out", mixed)?;
    Ok(tape.add(h, mixed)?)
}

pub struct Posterior {
    pub mu: Var,
    pub logvar: Var,
    pub sigma: Var,
}

/// `σ = exp(½·logvar)`.
pub fn posterior(tape: &mut Tape, p: &Bound, h: Var) -> Result<Posterior> {
    let mu = linear(tape, p, "posterior.mu", h)?;
    let logvar = linear(tape, p, "posterior.logvar", h)?;
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    Ok(Posterior { mu, logvar, sigma })
}

/// `z = μ + σ⊙ε` with `ε` a constant.
pub fn reparameterize(tape: &mut Tape, mu: Var, sigma: Var, eps: &Array) -> Result<Var> {
    let e = tape.constant(eps.clone());
    let spread = tape.mul(sigma, e)?;
    Ok(tape.add(mu, spread)?)
}

/// Least-squares line `v ≈ a + b·t` as `(a, b)`. A single point, or points
/// at one `t`, give a flat line through their mean.
pub fn ols(ts: &[f64], vs: &[f64]) -> (f64, f64) {
    let n = ts.len() as f64;
    let tm = ts.iter().sum::<f64>() / n;
    let vm = vs.iter().sum::<f64>() / n;
    let sxx: f64 = ts.iter().map(|t| (t - tm) * (t - tm)).sum();
    let sxy: f64 = ts.iter().zip(vs).map(|(t, v)| (t - tm) * (v - vm)).sum();
    let b = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    (vm - b * tm, b)
}

/// Condition features from encoder summaries.
pub fn condition(tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
    let c = linear(tape, p, "decoder.cond", h)?;
    Ok(tape.tanh(c)?)
}

/// Full `R × 2T` trajectories from adapted latents and condition features.
pub fn decode(tape: &mut Tape, p: &Bound, z_adapted: Var, cond: Var, anchor: Option<Var>) -> Result<Var> {
    let joined = tape.concat(&[z_adapted, cond])?;
    let hidden = linear(tape, p, "decoder.hidden", joined)?;
    let hidden = tape.tanh(hidden)?;
    let out = linear(tape, p, "decoder.out", hidden)?;
    Ok(match anchor {
        Some(a) => tape.add(out, a)?,
        None => out,
    })
}

fn repeat_rows(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    if k == 1 {
        return Ok(x);
    }
    let r = tape.value(x).rows();
    let idx: Vec<usize> = (0..k).flat_map(|_| 0..r).collect();
    Ok(tape.gather_rows(x, &idx)?)
}

fn repeat_labels(labels: &[usize], k: usize) -> Vec<usize> {
    labels.repeat(k)
}

/// Tape handles produced by one training pass.
pub struct TrainForward {
    pub posterior: Posterior,
    /// Posterior-path reconstruction, `R × 2T`.
    pub recon: Var,
    /// Prior-path samples stacked as `(K·R) × 2T`.
    pub samples: Var,
    pub k: usize,
    pub adapter: AdapterOutput,
    pub hier: HierOutput,
}

/// Noise streams of one training pass.
pub struct TrainNoise {
    pub posterior: Array,
    pub prior: Array,
}

impl TrainNoise {
    pub fn draw(model: &Model, batch: &Batch, k: usize, seed: u64, path: &[u64]) -> Self {
        let dz = model.config.d_z;
        let mut post = path.to_vec();
        post.push(0);
        let mut prior = path.to_vec();
        prior.push(1);
        Self { posterior: batch.noise(1, dz, seed, &post), prior: batch.noise(k, dz, seed, &prior) }
    }
}

/// Posterior path, adapter, contrastive heads and `k` prior-path samples.
pub fn forward_train(tape: &mut Tape, p: &Bound, model: &Model, batch: &Batch, noise: &TrainNoise, lambda_c: f64) -> Result<TrainForward> {
    let c = &model.config;
    let r = batch.rows();
    let k = noise.prior.rows() / r.max(1);
    if k == 0 || noise.prior.rows() != k * r || noise.posterior.rows() != r {
        return Err(Error::Usage("noise does not match the batch".into()));
    }
    let mut h = encode(tape, p, batch, c.d_model, c.heads)?;
    let anchor = c.anchor.then(|| tape.constant(batch.anchor.clone()));

    let (post, adapted, z_post) = match c.insertion {
        Insertion::Encoder => {
            let out = adapter::adapter_forward(tape, p, h, &batch.roles, &batch.domains, &batch.layout, &c.adapter)?;
            h = out.adapted;
            let post = posterior(tape, p, h)?;
            let z = reparameterize(tape, post.mu, post.sigma, &noise.posterior)?;
            (post, out, z)
        }
        Insertion::Latent => {
            let post = posterior(tape, p, h)?;
            let z = reparameterize(tape, post.mu, post.sigma, &noise.posterior)?;
            let out = adapter::adapter_forward(tape, p, z, &batch.roles, &batch.domains, &batch.layout, &c.adapter)?;
            let z = out.adapted;
            (post, out, z)
        }
    };
    // Contrastive features come from the noise-free path, as in `embed`.
    let features = match c.insertion {
        Insertion::Encoder => adapted.adapted,
        Insertion::Latent => adapter::adapter_forward(tape, p, post.mu, &batch.roles, &batch.domains, &batch.layout, &c.adapter)?.adapted,
    };
    let hier = contrastive::hierarchical_loss(tape, p, features, &batch.roles, &batch.domains, &c.contrastive, lambda_c)?;
    let cond = condition(tape, p, h)?;
    let recon = decode(tape, p, z_post, cond, anchor)?;
    let samples = prior_samples(tape, p, model, batch, cond, anchor, &noise.prior, k)?;
    Ok(TrainForward { posterior: post, recon, samples, k, adapter: adapted, hier })
}

fn prior_samples(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    batch: &Batch,
    cond: Var,
    anchor: Option<Var>,
    eps: &Array,
    k: usize,
) -> Result<Var> {
    let c = &model.config;
    let z = tape.constant(eps.clone());
    let z = match c.insertion {
        Insertion::Latent => {
            let layout = batch.layout.repeat(k);
            let roles = repeat_labels(&batch.roles, k);
            let domains = repeat_labels(&batch.domains, k);
            adapter::adapter_forward(tape, p, z, &roles, &domains, &layout, &c.adapter)?.adapted
        }
        Insertion::Encoder => z,
    };
    let cond = repeat_rows(tape, cond, k)?;
    let anchor = match anchor {
        Some(a) => Some(repeat_rows(tape, a, k)?),
        None => None,
    };
    decode(tape, p, z, cond, anchor)
}

/// `k` generated completions per scene of `batch`, each `R × 2T`. Scene `s`
/// draws its noise from `(seed, SAMPLE, ids[s])`, independent of batching.
pub fn sample_k(model: &Model, batch: &Batch, k: usize, seed: u64) -> Result<Vec<Array>> {
    if k == 0 {
        return Err(Error::Usage("need at least one sample".into()));
    }
    let c = &model.config;
    let mut tape = Tape::new();
    let p = model.params.bind_const(&mut tape);
    let mut h = encode(&mut tape, &p, batch, c.d_model, c.heads)?;
    if c.insertion == Insertion::Encoder {
        h = adapter::adapter_forward(&mut tape, &p, h, &batch.roles, &batch.domains, &batch.layout, &c.adapter)?.adapted;
    }
    let anchor = c.anchor.then(|| tape.constant(batch.anchor.clone()));
    let cond = condition(&mut tape, &p, h)?;
    let eps = batch.noise(k, c.d_z, seed, &[seed::stream::SAMPLE]);
    let out = prior_samples(&mut tape, &p, model, batch, cond, anchor, &eps, k)?;
    let r = batch.rows();
    let all = tape.value(out);
    Ok((0..k)
        .map(|copy| Array::matrix(r, 2 * model.steps, all.data()[copy * r * 2 * model.steps..(copy + 1) * r * 2 * model.steps].to_vec()).expect("sized"))
        .collect())
}

/// Adapted features of the posterior mean (`ε = 0`) and their two projections,
/// as `(adapted, z_role, z_domain)`. Projections are absent when the variant
/// has no head for that space; `shared_feature` reports the normalized
/// adapted features in both.
pub fn embed(model: &Model, batch: &Batch) -> Result<(Array, Option<Array>, Option<Array>)> {
    let c = &model.config;
    let mut tape = Tape::new();
    let p = model.params.bind_const(&mut tape);
    let h = encode(&mut tape, &p, batch, c.d_model, c.heads)?;
    let base = match c.insertion {
        Insertion::Encoder => h,
        Insertion::Latent => posterior(&mut tape, &p, h)?.mu,
    };
    let adapted = adapter::adapter_forward(&mut tape, &p, base, &batch.roles, &batch.domains, &batch.layout, &c.adapter)?.adapted;
    let hier = contrastive::hierarchical_loss(&mut tape, &p, adapted, &batch.roles, &batch.domains, &c.contrastive, 1.0)?;
    let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
    Ok((tape.value(adapted).clone(), get(hier.z_role), get(hier.z_domain)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Team;

    pub(crate) fn toy_scene(n: usize, t: usize, shift: f64) -> SceneSequence {
        let mut roles = vec![Role::Ball];
        roles.extend(std::iter::repeat_n(Role::Player, n - 1));
        let teams = (0..n).map(|i| if i == 0 { Team::None } else { Team::Offense }).collect();
        let positions = (0..n * t * 2).map(|i| ((i * 37 % 17) as f64 / 17.0 + shift).fract()).collect();
        SceneSequence::new("soccer", roles, teams, positions, vec![1; n * t], t).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig { d_model: 8, d_z: 4, heads: 2, decoder_hidden: 8, adapter: AdapterConfig { heads: 2, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn layout_blocks() {
        let l = Layout::new(&[2, 1]);
        assert_eq!(l.rows(), 3);
        assert_eq!(l.offsets(), &[0, 2, 3]);
        assert_eq!(l.repeat(2).scenes(), 4);
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut model = Model::new(small_config(), domain_vocabulary([]), 6, 0).unwrap();
        let w = model.params.get_mut("decoder.out.w").unwrap();
        *w = w.map(|_| 0.1);
        let scene = toy_scene(3, 6, 0.0);
        let mask = vec![1u8; 18];
        let batch = Batch::new(&model, &[&scene], &[&mask], &[0]).unwrap();
        let a = sample_k(&model, &batch, 2, 5).unwrap();
        let b = sample_k(&model, &batch, 2, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), &[3, 12]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn zero_heads_give_standard_posterior() {
        let mut model = Model::new(small_config(), domain_vocabulary([]), 6, 0).unwrap();
        for head in ["posterior.mu", "posterior.logvar"] {
            for part in ["w", "b"] {
                let a = model.params.get_mut(&format!("{head}.{part}")).unwrap();
                a.data_mut().fill(0.0);
            }
        }
        let scene = toy_scene(3, 6, 0.0);
        let mask = vec![1u8; 18];
        let batch = Batch::new(&model, &[&scene], &[&mask], &[0]).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let h = encode(&mut tape, &p, &batch, 8, 2).unwrap();
        let post = posterior(&mut tape, &p, h).unwrap();
        assert!(tape.value(post.mu).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(post.sigma).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reparameterize_arithmetic() {
        let mut tape = Tape::new();
        let mu = tape.param(Array::matrix(1, 1, vec![1.0]).unwrap());
        let sigma = tape.param(Array::matrix(1, 1, vec![2.0]).unwrap());
        let z = reparameterize(&mut tape, mu, sigma, &Array::matrix(1, 1, vec![0.5]).unwrap()).unwrap();
        assert_eq!(tape.value(z).item(), 2.0);
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(mu).unwrap().item(), 1.0);
        assert_eq!(g.get(sigma).unwrap().item(), 0.5);
    }

    #[test]
    fn unknown_domain_is_rejected() {
        let model = Model::new(small_config(), vec!["soccer".into()], 6, 0).unwrap();
        let mut scene = toy_scene(3, 6, 0.0);
        scene.domain = "football".into();
        let mask = vec![1u8; 18];
        assert!(Batch::new(&model, &[&scene], &[&mask], &[0]).is_err());
    }
}
