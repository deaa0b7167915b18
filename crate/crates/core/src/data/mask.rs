use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPattern {
    /// Observed prefix, missing suffix of length `horizon`.
    Prediction,
    /// Independent drop-outs at `missing_ratio`.
    Random,
    /// One contiguous gap per agent of length `missing_ratio · T`.
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub pattern: MaskPattern,
    #[serde(default)]
    pub missing_ratio: f64,
    #[serde(default)]
    pub horizon: usize,
    /// Extra random drop-out applied to the observed prefix of a
    /// prediction mask.
    #[serde(default)]
    pub prefix_dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MaskSpec {
    pub fn prediction(horizon: usize) -> Self {
        Self { pattern: MaskPattern::Prediction, missing_ratio: 0.0, horizon, prefix_dropout: 0.0, seed: 0 }
    }

    pub fn random(missing_ratio: f64) -> Self {
        Self { pattern: MaskPattern::Random, missing_ratio, horizon: 0, prefix_dropout: 0.0, seed: 0 }
    }

    pub fn block(missing_ratio: f64) -> Self {
        Self { pattern: MaskPattern::Block, missing_ratio, horizon: 0, prefix_dropout: 0.0, seed: 0 }
    }

    /// Default evaluation mask: forecast the second half and corrupt 20% of
    /// the observed first half.
    pub fn evaluation(steps: usize) -> Self {
        Self { prefix_dropout: 0.2, ..Self::prediction(steps / 2) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, steps: usize) -> Result<(), DataError> {
        match self.pattern {
            MaskPattern::Prediction => {
                if self.horizon >= steps {
                    return Err(DataError::Mask(format!("horizon {} leaves no observed prefix of {steps} steps", self.horizon)));
                }
                if !(0.0..1.0).contains(&self.prefix_dropout) {
                    return Err(DataError::Mask(format!("prefix_dropout {} outside [0, 1)", self.prefix_dropout)));
                }
            }
            MaskPattern::Random | MaskPattern::Block => {
                if !(self.missing_ratio > 0.0 && self.missing_ratio < 1.0) {
                    return Err(DataError::Mask(format!("missing_ratio {} outside (0, 1)", self.missing_ratio)));
                }
            }
        }
        Ok(())
    }
}

/// Builds an `N × T` observation mask (1 = observed). Every agent keeps at
/// least one observed step.
pub fn make_mask(spec: &MaskSpec, n_agents: usize, steps: usize) -> Result<Vec<u8>, DataError> {
    spec.validate(steps)?;
    let mut rng = seed::rng_for(spec.seed, &[seed::stream::EVAL_MASK]);
    let mut mask = vec![1u8; n_agents * steps];
    for row in mask.chunks_mut(steps) {
        match spec.pattern {
            MaskPattern::Prediction => {
                let observed = steps - spec.horizon;
                row[observed..].fill(0);
                if spec.prefix_dropout > 0.0 {
                    for m in row[..observed].iter_mut() {
                        if rng.random::<f64>() < spec.prefix_dropout {
                            *m = 0;
                        }
                    }
                    if !row.contains(&1) {
                        row[rng.random_range(0..observed)] = 1;
                    }
                }
            }
            MaskPattern::Random => {
                for m in row.iter_mut() {
                    if rng.random::<f64>() < spec.missing_ratio {
                        *m = 0;
                    }
                }
                if !row.contains(&1) {
                    row[rng.random_range(0..steps)] = 1;
                }
            }
            MaskPattern::Block => {
                let len = ((spec.missing_ratio * steps as f64).round() as usize).clamp(1, steps - 1);
                let start = rng.random_range(0..=steps - len);
                row[start..start + len].fill(0);
            }
        }
    }
    Ok(mask)
}

/// `X ⊙ M`, broadcasting the mask over both coordinates.
pub fn apply_mask(positions: &[f64], mask: &[u8]) -> Result<Vec<f64>, DataError> {
    if positions.len() != 2 * mask.len() {
        return Err(DataError::Invalid(format!("{} coordinates for {} mask entries", positions.len(), mask.len())));
    }
    Ok(positions.iter().enumerate().map(|(k, &v)| if mask[k / 2] == 1 { v } else { 0.0 }).collect())
}

/// Splits positions into the visible part `X ⊙ M` and the missing part
/// `X ⊙ (1 − M)`; the two sum back to `X` exactly.
pub fn split_visible_missing(positions: &[f64], mask: &[u8]) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    let visible = apply_mask(positions, mask)?;
    let missing = positions.iter().enumerate().map(|(k, &v)| if mask[k / 2] == 1 { 0.0 } else { v }).collect();
    Ok((visible, missing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_horizon_is_all_ones() {
        assert!(make_mask(&MaskSpec::prediction(0), 3, 7).unwrap().iter().all(|&m| m == 1));
    }

    #[test]
    fn prediction_suffix() {
        let m = make_mask(&MaskSpec::prediction(4), 2, 10).unwrap();
        for row in m.chunks(10) {
            assert_eq!(row, &[1, 1, 1, 1, 1, 1, 0, 0, 0, 0]);
        }
    }

    #[test]
    fn horizon_must_leave_prefix() {
        assert!(make_mask(&MaskSpec::prediction(10), 2, 10).is_err());
    }

    #[test]
    fn random_ratio_is_close() {
        let m = make_mask(&MaskSpec::random(0.3).with_seed(11), 10, 100).unwrap();
        let frac = m.iter().filter(|&&v| v == 0).count() as f64 / m.len() as f64;
        assert!((frac - 0.3).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn block_is_one_contiguous_gap() {
        let m = make_mask(&MaskSpec::block(0.3).with_seed(5), 4, 20).unwrap();
        for row in m.chunks(20) {
            let gaps = row.windows(2).filter(|w| w[0] == 1 && w[1] == 0).count() + usize::from(row[0] == 0);
            assert_eq!(gaps, 1);
            assert_eq!(row.iter().filter(|&&v| v == 0).count(), 6);
        }
    }

    #[test]
    fn visible_missing_definition() {
        let (v, m) = split_visible_missing(&[1.0, 2.0, 3.0, 4.0], &[1, 0]).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(m, vec![0.0, 0.0, 3.0, 4.0]);
        let (v, m) = split_visible_missing(&[1.0, 2.0, 3.0, 4.0], &[1, 1]).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, vec![0.0; 4]);
    }
}
