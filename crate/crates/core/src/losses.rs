//! Training objective.
//!
//! ```text
//! L_elbo = mse(X̂_m, X_m) + λ1 · KL(N(μ, σ²) ‖ N(0, I))
//! L      = L_elbo + λ2 · mse(X̂_v, X_v) + λ3 · L_wta + λ4 · L_hier
//! ```
//!
//! Squared errors are `‖·‖²` per point averaged over the points of the
//! region, so the weights carry over between sequence lengths and masks.

use serde::{Deserialize, Serialize};

use crate::model::{Batch, TrainForward};
use crate::numerics::{Array, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// KL weight inside the ELBO term.
    pub lambda1: f64,
    /// Visible-region reconstruction.
    pub lambda2: f64,
    /// Winner-take-all over prior samples.
    pub lambda3: f64,
    /// Contrastive term.
    pub lambda4: f64,
    /// Domain-space weight inside the contrastive term.
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 1.0, lambda3: 1.0, lambda4: 0.1, lambda_c: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("lambda4", self.lambda4), ("lambda_c", self.lambda_c)];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted terms of one batch (`elbo` already includes `λ1·KL`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub elbo: f64,
    pub rec: f64,
    pub wta: f64,
    pub hier: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(elbo: f64, rec: f64, wta: f64, hier: f64, w: &LossWeights) -> Self {
        Self { elbo, rec, wta, hier, total: elbo + w.lambda2 * rec + w.lambda3 * wta + w.lambda4 * hier }
    }
}

/// `Σ_dims ½(μ² + σ² − 1 − ln σ²)`, averaged over rows.
pub fn kl_gaussian(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    if tape.value(sigma).data().iter().any(|&s| s <= 0.0) {
        return Err(Error::Usage("posterior scale must be positive".into()));
    }
    let rows = tape.value(mu).rows().max(1);
    let m2 = tape.square(mu)?;
    let s2 = tape.square(sigma)?;
    let ln_s2 = tape.ln(s2)?;
    let a = tape.add(m2, s2)?;
    let b = tape.sub(a, ln_s2)?;
    let per = tape.affine(b, 1.0, -1.0)?;
    let total = tape.sum(per)?;
    Ok(tape.scale(total, 0.5 / rows as f64)?)
}

pub fn kl_value(mu: &Array, sigma: &Array) -> Result<f64> {
    let mut tape = Tape::new();
    let (m, s) = (tape.constant(mu.clone()), tape.constant(sigma.clone()));
    let kl = kl_gaussian(&mut tape, m, s)?;
    Ok(tape.value(kl).item())
}

/// `Σ w·(pred − target)²` divided by the number of weighted points (pairs of
/// coordinates). An empty region gives a constant 0.
pub fn masked_sq_error(tape: &mut Tape, pred: Var, target: &Array, weights: &Array, region: &str) -> Result<Var> {
    let points = weights.sum() / 2.0;
    if points == 0.0 {
        log::warn!("{region} region is empty; its reconstruction term is 0");
        return Ok(tape.constant(Array::scalar(0.0)));
    }
    let t = tape.constant(target.clone());
    let w = tape.constant(weights.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff)?;
    let picked = tape.mul(sq, w)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, 1.0 / points)?)
}

/// Missing-region error plus `λ1·KL`; returns `(elbo, kl)`.
pub fn elbo_loss(tape: &mut Tape, recon: Var, batch: &Batch, mu: Var, sigma: Var, lambda1: f64) -> Result<(Var, Var)> {
    let mse = masked_sq_error(tape, recon, &batch.target, &batch.missing, "missing")?;
    let kl = kl_gaussian(tape, mu, sigma)?;
    let weighted = tape.scale(kl, lambda1)?;
    Ok((tape.add(mse, weighted)?, kl))
}

pub fn rec_loss(tape: &mut Tape, recon: Var, batch: &Batch) -> Result<Var> {
    masked_sq_error(tape, recon, &batch.target, &batch.visible, "visible")
}

/// Per-scene error of every sample: `errors[s][k]`, the mean squared point
/// error over the scene's known entries.
pub fn sample_errors(samples: &Array, batch: &Batch, k: usize) -> Vec<Vec<f64>> {
    let r = batch.rows();
    let width = samples.cols();
    (0..batch.layout.scenes())
        .map(|s| {
            let rows = batch.layout.range(s);
            let points: f64 = rows.clone().map(|i| batch.known.row(i).iter().sum::<f64>()).sum::<f64>() / 2.0;
            (0..k)
                .map(|copy| {
                    let mut e = 0.0;
                    for i in rows.clone() {
                        let pred = &samples.data()[(copy * r + i) * width..(copy * r + i + 1) * width];
                        for ((p, t), w) in pred.iter().zip(batch.target.row(i)).zip(batch.known.row(i)) {
                            e += w * (p - t) * (p - t);
                        }
                    }
                    if points > 0.0 {
                        e / points
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Index of the smallest error; ties go to the lowest index.
pub fn argmin(errors: &[f64]) -> usize {
    let mut best = 0;
    for (k, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = k;
        }
    }
    best
}

/// Mean over scenes of the best sample's error. Gradients reach only the
/// winning sample of each scene. Returns the loss and the winners.
pub fn wta_loss(tape: &mut Tape, samples: Var, batch: &Batch, k: usize) -> Result<(Var, Vec<usize>)> {
    let r = batch.rows();
    let width = tape.value(samples).cols();
    if k == 0 || tape.value(samples).rows() != k * r {
        return Err(Error::Usage(format!("expected {k}×{r} sample rows, got {}", tape.value(samples).rows())));
    }
    let errors = sample_errors(tape.value(samples), batch, k);
    let winners: Vec<usize> = errors.iter().map(|e| argmin(e)).collect();
    let scenes = batch.layout.scenes();
    let mut weights = vec![0.0; k * r * width];
    for (s, &win) in winners.iter().enumerate() {
        let rows = batch.layout.range(s);
        let points: f64 = rows.clone().map(|i| batch.known.row(i).iter().sum::<f64>()).sum::<f64>() / 2.0;
        if points == 0.0 {
            continue;
        }
        for i in rows {
            let o = (win * r + i) * width;
            for (w, known) in weights[o..o + width].iter_mut().zip(batch.known.row(i)) {
                *w = known / (points * scenes as f64);
            }
        }
    }
    let target: Vec<f64> = (0..k).flat_map(|_| batch.target.data().iter().copied()).collect();
    let target = tape.constant(Array::matrix(k * r, width, target)?);
    let w = tape.constant(Array::matrix(k * r, width, weights)?);
    let diff = tape.sub(samples, target)?;
    let sq = tape.square(diff)?;
    let picked = tape.mul(sq, w)?;
    Ok((tape.sum(picked)?, winners))
}

/// Scalar minimum of per-sample errors.
pub fn wta_value(errors: &[f64]) -> f64 {
    errors[argmin(errors)]
}

pub struct TotalLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub kl: f64,
    pub winners: Vec<usize>,
}

/// All four terms of one training pass combined with `weights`.
pub fn total_loss(tape: &mut Tape, fwd: &TrainForward, batch: &Batch, weights: &LossWeights) -> Result<TotalLoss> {
    weights.validate()?;
    let (elbo, kl) = elbo_loss(tape, fwd.recon, batch, fwd.posterior.mu, fwd.posterior.sigma, weights.lambda1)?;
    let rec = rec_loss(tape, fwd.recon, batch)?;
    let (wta, winners) = wta_loss(tape, fwd.samples, batch, fwd.k)?;
    let hier = fwd.hier.loss;
    let mut total = elbo;
    for (term, w) in [(rec, weights.lambda2), (wta, weights.lambda3), (hier, weights.lambda4)] {
        let scaled = tape.scale(term, w)?;
        total = tape.add(total, scaled)?;
    }
    let v = |x: Var| tape.value(x).item();
    let breakdown = LossBreakdown { elbo: v(elbo), rec: v(rec), wta: v(wta), hier: v(hier), total: v(total) };
    for (name, value) in [("elbo", breakdown.elbo), ("rec", breakdown.rec), ("wta", breakdown.wta), ("hier", breakdown.hier)] {
        debug_assert!(value >= 0.0, "{name} term is negative: {value}");
    }
    Ok(TotalLoss { total, breakdown, kl: v(kl), winners })
}
