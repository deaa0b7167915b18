//! Role- and domain-aware adapter.
//!
//! Each agent gets a conditioning token `e_role[r] + e_domain[d]`. That token
//! queries the latent tokens of its scene through multi-head cross-attention,
//! and a gate blends the attended result `z_cond` back into the agent's own
//! latent `z`:
//!
//! ```text
//! α         = sigmoid(GateNet([z, z_cond]))
//! z_adapted = α ⊙ z_cond + (1 − α) ⊙ z
//! ```
//!
//! The ablation variants replace the gate: `FeatureWise` uses the raw gate
//! output as `α`, `NoGating` returns `z_cond` itself and `Bypass` returns `z`
//! untouched (and owns no parameters at all).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::Layout;
use crate::numerics::{Array, Tape, Var};
use crate::params::{init_embedding, init_linear, init_zero_linear, linear, Bound, ParamStore};
use crate::{Error, Result};

pub const PREFIX: &str = "adapter";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    TokenWise,
    FeatureWise,
    NoGating,
    Bypass,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 4] =
        [AdapterVariant::TokenWise, AdapterVariant::FeatureWise, AdapterVariant::NoGating, AdapterVariant::Bypass];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterVariant::TokenWise => "token_wise",
            AdapterVariant::FeatureWise => "feature_wise",
            AdapterVariant::NoGating => "no_gating",
            AdapterVariant::Bypass => "bypass",
        }
    }

    fn has_gate(self) -> bool {
        matches!(self, AdapterVariant::TokenWise | AdapterVariant::FeatureWise)
    }
}

impl std::str::FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub variant: AdapterVariant,
    /// Cross-attention heads; must divide the feature width.
    pub heads: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { variant: AdapterVariant::TokenWise, heads: 4 }
    }
}

/// Everything the adapter produced for one set of agent tokens.
#[derive(Clone, Debug)]
pub struct AdapterOutput {
    pub z_cond: Option<Var>,
    pub alpha: Option<Var>,
    pub adapted: Var,
    /// Attention weights per head and scene, each `n × n`, heads outermost.
    pub attention: Vec<Array>,
}

/// Registers adapter parameters for features of width `dim`. `Bypass`
/// registers nothing; `NoGating` skips the gate network.
pub fn init(store: &mut ParamStore, rng: &mut impl Rng, cfg: &AdapterConfig, dim: usize, n_roles: usize, n_domains: usize) {
    if cfg.variant == AdapterVariant::Bypass {
        return;
    }
    init_embedding(store, rng, &format!("{PREFIX}.role_embedding"), n_roles, dim, 1.0);
    init_embedding(store, rng, &format!("{PREFIX}.domain_embedding"), n_domains, dim, 1.0);
    for proj in ["q", "k", "v"] {
        init_linear(store, rng, &format!("{PREFIX}.attn.{proj}"), dim, dim, false);
    }
    init_linear(store, rng, &format!("{PREFIX}.attn.out"), dim, dim, true);
    if cfg.variant.has_gate() {
        init_linear(store, rng, &format!("{PREFIX}.gate.hidden"), 2 * dim, dim, true);
        // Zero output layer: the gate starts at sigmoid(0) = 0.5.
        init_zero_linear(store, &format!("{PREFIX}.gate.out"), dim, dim);
    }
}

/// Conditioning tokens `e_role[r] + e_domain[d]`, one row per agent.
pub fn embed_labels(tape: &mut Tape, p: &Bound, roles: &[usize], domains: &[usize]) -> Result<Var> {
    let role_table = p.get(&format!("{PREFIX}.role_embedding"))?;
    let domain_table = p.get(&format!("{PREFIX}.domain_embedding"))?;
    check_vocab("role", roles, tape.value(role_table).rows())?;
    check_vocab("domain", domains, tape.value(domain_table).rows())?;
    let e_role = tape.gather_rows(role_table, roles)?;
    let e_domain = tape.gather_rows(domain_table, domains)?;
    Ok(tape.add(e_role, e_domain)?)
}

fn check_vocab(kind: &str, ids: &[usize], size: usize) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= size) {
        return Err(Error::Usage(format!("{kind} id {bad} is out of vocabulary (table has {size} rows)")));
    }
    Ok(())
}

/// Multi-head attention of one query row per agent over the key/value rows
/// of the same scene. Scores are scaled by `1/√d_head`.
pub fn cross_attend(tape: &mut Tape, p: &Bound, query: Var, tokens: Var, layout: &Layout, heads: usize) -> Result<(Var, Vec<Array>)> {
    let q = linear(tape, p, &format!("{PREFIX}.attn.q"), query)?;
    let k = linear(tape, p, &format!("{PREFIX}.attn.k"), tokens)?;
    let v = linear(tape, p, &format!("{PREFIX}.attn.v"), tokens)?;
    let (mixed, weights) = multi_head(tape, q, k, v, layout, heads)?;
    let out = linear(tape, p, &format!("{PREFIX}.attn.out"), mixed)?;
    Ok((out, weights))
}

/// Scaled dot-product attention split over `heads` column blocks, masked to
/// the scene of each row. Shared with the encoder's agent mixer.
pub(crate) fn multi_head(tape: &mut Tape, q: Var, k: Var, v: Var, layout: &Layout, heads: usize) -> Result<(Var, Vec<Array>)> {
    let width = tape.value(q).cols();
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide feature width {width}")));
    }
    let scale = 1.0 / ((width / heads) as f64).sqrt();
    let mixed = tape.block_attention(q, k, v, layout.offsets(), heads, scale)?;
    let weights = tape.attention_weights(mixed).unwrap_or_default();
    Ok((mixed, weights))
}

/// Blends `z` and `z_cond` according to the variant; returns `(adapted, α)`.
pub fn gate(tape: &mut Tape, p: &Bound, z: Var, z_cond: Var, variant: AdapterVariant) -> Result<(Var, Option<Var>)> {
    match variant {
        AdapterVariant::Bypass => Ok((z, None)),
        AdapterVariant::NoGating => Ok((z_cond, None)),
        AdapterVariant::TokenWise | AdapterVariant::FeatureWise => {
            let joined = tape.concat(&[z, z_cond])?;
            let hidden = linear(tape, p, &format!("{PREFIX}.gate.hidden"), joined)?;
            let hidden = tape.tanh(hidden)?;
            let logits = linear(tape, p, &format!("{PREFIX}.gate.out"), hidden)?;
            let alpha = if variant == AdapterVariant::TokenWise { tape.sigmoid(logits)? } else { logits };
            let keep = tape.affine(alpha, -1.0, 1.0)?;
            let a = tape.mul(alpha, z_cond)?;
            let b = tape.mul(keep, z)?;
            Ok((tape.add(a, b)?, Some(alpha)))
        }
    }
}

/// Full adapter on `rows × dim` tokens with per-row role and domain ids.
pub fn adapter_forward(
    tape: &mut Tape,
    p: &Bound,
    z: Var,
    roles: &[usize],
    domains: &[usize],
    layout: &Layout,
    cfg: &AdapterConfig,
) -> Result<AdapterOutput> {
    let rows = tape.value(z).rows();
    if roles.len() != rows || domains.len() != rows || layout.rows() != rows {
        return Err(Error::Usage(format!(
            "adapter got {rows} tokens but {} roles, {} domains, {} layout rows",
            roles.len(),
            domains.len(),
            layout.rows()
        )));
    }
    if cfg.variant == AdapterVariant::Bypass {
        return Ok(AdapterOutput { z_cond: None, alpha: None, adapted: z, attention: Vec::new() });
    }
    let query = embed_labels(tape, p, roles, domains)?;
    let (z_cond, attention) = cross_attend(tape, p, query, z, layout, cfg.heads)?;
    let (adapted, alpha) = gate(tape, p, z, z_cond, cfg.variant)?;
    Ok(AdapterOutput { z_cond: Some(z_cond), alpha, adapted, attention })
}
