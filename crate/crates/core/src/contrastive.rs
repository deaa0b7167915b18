//! Two-space supervised contrastive learning over adapted latents.
//!
//! A role head and a domain head project each agent's adapted latent into
//! separate unit-norm spaces. InfoNCE with multiple positives pulls same-label
//! agents together in each space:
//!
//! ```text
//! ℓ(i, j) = −log( exp(s_ij / τ) / Σ_{k≠i} exp(s_ik / τ) )
//! L_hier  = L_role + λ_c · L_domain
//! ```
//!
//! The loss is the mean of `ℓ(i, j)` over all ordered same-label pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Array, Tape, Var};
use crate::params::{init_linear, linear, Bound, ParamStore};
use crate::{Error, Result};

pub const PREFIX: &str = "contrastive";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveVariant {
    Hierarchical,
    RoleOnly,
    DomainOnly,
    SharedFeature,
    Off,
}

impl ContrastiveVariant {
    pub const ALL: [ContrastiveVariant; 5] = [
        ContrastiveVariant::Hierarchical,
        ContrastiveVariant::RoleOnly,
        ContrastiveVariant::DomainOnly,
        ContrastiveVariant::SharedFeature,
        ContrastiveVariant::Off,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContrastiveVariant::Hierarchical => "hierarchical",
            ContrastiveVariant::RoleOnly => "role_only",
            ContrastiveVariant::DomainOnly => "domain_only",
            ContrastiveVariant::SharedFeature => "shared_feature",
            ContrastiveVariant::Off => "off",
        }
    }

    /// Which projection heads this variant owns, as `(role, domain)`.
    pub fn heads(self) -> (bool, bool) {
        match self {
            ContrastiveVariant::Hierarchical => (true, true),
            ContrastiveVariant::RoleOnly => (true, false),
            ContrastiveVariant::DomainOnly => (false, true),
            ContrastiveVariant::SharedFeature | ContrastiveVariant::Off => (false, false),
        }
    }
}

impl std::str::FromStr for ContrastiveVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown contrastive variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub variant: ContrastiveVariant,
    pub tau: f64,
    pub proj_dim: usize,
    /// Width of an optional tanh hidden layer in each head.
    pub head_hidden: Option<usize>,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { variant: ContrastiveVariant::Hierarchical, tau: 0.1, proj_dim: 16, head_hidden: None }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.proj_dim == 0 || self.head_hidden == Some(0) {
            return Err(Error::Config("projection widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Role,
    Domain,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Role => "role",
            Space::Domain => "domain",
        }
    }

    fn head(self) -> String {
        format!("{PREFIX}.{}", self.as_str())
    }
}

pub fn init(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ContrastiveConfig, d_in: usize) {
    let (role, domain) = cfg.variant.heads();
    for (space, on) in [(Space::Role, role), (Space::Domain, domain)] {
        if !on {
            continue;
        }
        let head = space.head();
        match cfg.head_hidden {
            Some(hidden) => {
                init_linear(store, rng, &format!("{head}.hidden"), d_in, hidden, true);
                init_linear(store, rng, &format!("{head}.out"), hidden, cfg.proj_dim, false);
            }
            None => init_linear(store, rng, &head, d_in, cfg.proj_dim, false),
        }
    }
}

/// Maps `z` through one head and L2-normalizes each row.
pub fn project(tape: &mut Tape, p: &Bound, z: Var, space: Space) -> Result<Var> {
    let head = space.head();
    let out = if p.has(&format!("{head}.hidden.w")) {
        let h = linear(tape, p, &format!("{head}.hidden"), z)?;
        let h = tape.tanh(h)?;
        linear(tape, p, &format!("{head}.out"), h)?
    } else {
        linear(tape, p, &head, z)?
    };
    Ok(tape.l2_normalize(out)?)
}

/// Ordered pairs `(i, j)`, `i ≠ j`, sharing a label.
pub fn select_pairs(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, a) in labels.iter().enumerate() {
        for (j, b) in labels.iter().enumerate() {
            if i != j && a == b {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Mean InfoNCE over all positive pairs of unit-norm `emb` rows. With no
/// positive pair at all the loss is a constant 0.
pub fn info_nce(tape: &mut Tape, emb: Var, labels: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let b = tape.value(emb).rows();
    if labels.len() != b {
        return Err(Error::Usage(format!("{} labels for {b} embeddings", labels.len())));
    }
    let pairs = select_pairs(labels);
    if pairs.is_empty() {
        log::warn!("info_nce: no positive pair among {b} rows; loss is 0");
        return Ok(tape.constant(Array::scalar(0.0)));
    }
    let et = tape.transpose(emb)?;
    let sim = tape.matmul(emb, et)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let off_diagonal: Vec<bool> = (0..b * b).map(|idx| idx / b != idx % b).collect();
    let log_p = tape.log_softmax(logits, Some(&off_diagonal))?;
    let mut select = vec![0.0; b * b];
    for &(i, j) in &pairs {
        select[i * b + j] = 1.0;
    }
    let select = tape.constant(Array::matrix(b, b, select)?);
    let picked = tape.mul(log_p, select)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / pairs.len() as f64)?)
}

/// [`info_nce`] on plain values.
pub fn info_nce_value(emb: &Array, labels: &[usize], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.constant(emb.clone());
    let loss = info_nce(&mut tape, e, labels, tau)?;
    Ok(tape.value(loss).item())
}

/// Per-pair losses `ℓ(i, j)` computed directly from the definition.
pub fn pair_losses(emb: &Array, labels: &[usize], tau: f64) -> Vec<((usize, usize), f64)> {
    let b = emb.rows();
    let dot = |i: usize, j: usize| emb.row(i).iter().zip(emb.row(j)).map(|(x, y)| x * y).sum::<f64>();
    select_pairs(labels)
        .into_iter()
        .map(|(i, j)| {
            let denom: f64 = (0..b).filter(|&k| k != i).map(|k| (dot(i, k) / tau).exp()).sum();
            ((i, j), -((dot(i, j) / tau).exp() / denom).ln())
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct HierOutput {
    pub loss: Var,
    pub role: Option<Var>,
    pub domain: Option<Var>,
    pub z_role: Option<Var>,
    pub z_domain: Option<Var>,
}

fn distinct(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Combines the role and domain terms according to `cfg.variant`. A term whose
/// labels take fewer than two values in the batch has no negatives and is
/// left out.
pub fn hierarchical_loss(
    tape: &mut Tape,
    p: &Bound,
    z_adapted: Var,
    roles: &[usize],
    domains: &[usize],
    cfg: &ContrastiveConfig,
    lambda_c: f64,
) -> Result<HierOutput> {
    cfg.validate()?;
    let variant = cfg.variant;
    let mut out = HierOutput { loss: z_adapted, role: None, domain: None, z_role: None, z_domain: None };
    if variant == ContrastiveVariant::Off {
        out.loss = tape.constant(Array::scalar(0.0));
        return Ok(out);
    }
    let shared = if variant == ContrastiveVariant::SharedFeature { Some(tape.l2_normalize(z_adapted)?) } else { None };
    let (use_role, use_domain) = match variant {
        ContrastiveVariant::SharedFeature => (true, true),
        v => v.heads(),
    };
    if use_role {
        let e = match shared {
            Some(s) => s,
            None => project(tape, p, z_adapted, Space::Role)?,
        };
        out.z_role = Some(e);
        if distinct(roles) >= 2 {
            out.role = Some(info_nce(tape, e, roles, cfg.tau)?);
        } else {
            log::debug!("role contrastive term skipped: single role in batch");
        }
    }
    if use_domain {
        let e = match shared {
            Some(s) => s,
            None => project(tape, p, z_adapted, Space::Domain)?,
        };
        out.z_domain = Some(e);
        if distinct(domains) >= 2 {
            let l = info_nce(tape, e, domains, cfg.tau)?;
            out.domain = Some(tape.scale(l, lambda_c)?);
        } else {
            log::debug!("domain contrastive term skipped: single domain in batch");
        }
    }
    out.loss = match (out.role, out.domain) {
        (Some(r), Some(d)) => tape.add(r, d)?,
        (Some(t), None) | (None, Some(t)) => t,
        (None, None) => tape.constant(Array::scalar(0.0)),
    };
    Ok(out)
}
