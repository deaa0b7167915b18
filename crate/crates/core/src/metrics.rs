//! Displacement and motion-realism metrics.
//!
//! Trajectories are flat `T × 2` slices, scenes flat `N × T × 2`. Masks use
//! 1 for observed and 0 for missing; displacement errors are scored on the
//! missing entries only.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::data::{Dataset, FieldBounds, Role, SceneSequence};
use crate::{Error, Result};

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn point(traj: &[f64], t: usize) -> [f64; 2] {
    [traj[2 * t], traj[2 * t + 1]]
}

/// Average displacement over the missing entries of `mask`.
pub fn ade(pred: &[f64], truth: &[f64], mask: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() || truth.len() != 2 * mask.len() {
        return Err(Error::Usage(format!("ade: {} predicted, {} true coordinates, {} mask entries", pred.len(), truth.len(), mask.len())));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m == 0) {
        total += dist(point(pred, idx), point(truth, idx));
        count += 1;
    }
    if count == 0 {
        return Err(Error::Usage("no missing entries to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// `min_k ADE_k` over the missing entries.
pub fn min_ade_k(samples: &[Vec<f64>], truth: &[f64], mask: &[u8]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("min_ade_k needs at least one sample".into()));
    }
    let mut best = f64::INFINITY;
    for s in samples {
        best = best.min(ade(s, truth, mask)?);
    }
    Ok(best)
}

/// Fraction of points outside `bounds` (the boundary itself is inside).
pub fn oob(points: &[f64], bounds: &FieldBounds) -> f64 {
    let n = points.len() / 2;
    if n == 0 {
        return 0.0;
    }
    let out = points.chunks_exact(2).filter(|p| !bounds.contains(p[0], p[1])).count();
    out as f64 / n as f64
}

fn steps_of(traj: &[f64]) -> Result<usize> {
    let t = traj.len() / 2;
    if t < 2 || traj.len() % 2 != 0 {
        return Err(Error::Usage(format!("trajectory needs at least 2 points, got {} coordinates", traj.len())));
    }
    Ok(t)
}

/// Mean per-step displacement.
pub fn step_stat(traj: &[f64]) -> Result<f64> {
    let t = steps_of(traj)?;
    Ok(path_l(traj)? / (t - 1) as f64)
}

/// Total travelled length.
pub fn path_l(traj: &[f64]) -> Result<f64> {
    let t = steps_of(traj)?;
    Ok((1..t).map(|s| dist(point(traj, s - 1), point(traj, s))).sum())
}

/// Straight-line distance from first to last point.
pub fn endpoint_displacement(traj: &[f64]) -> Result<f64> {
    let t = steps_of(traj)?;
    Ok(dist(point(traj, 0), point(traj, t - 1)))
}

/// Both readings of Path-D for one group of agents.
#[derive(Clone, Debug, PartialEq)]
pub struct PathD {
    /// `max_i path_l(i) − min_i path_l(i)`; 0 for a single agent.
    pub discrepancy: f64,
    /// Per-agent start-to-end displacement.
    pub endpoint: Vec<f64>,
}

pub fn path_d(trajectories: &[&[f64]]) -> Result<PathD> {
    if trajectories.is_empty() {
        return Err(Error::Usage("path_d needs at least one agent".into()));
    }
    let lengths = trajectories.iter().map(|t| path_l(t)).collect::<Result<Vec<_>>>()?;
    let max = lengths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = lengths.iter().copied().fold(f64::INFINITY, f64::min);
    let endpoint = trajectories.iter().map(|t| endpoint_displacement(t)).collect::<Result<_>>()?;
    Ok(PathD { discrepancy: max - min, endpoint })
}

/// Role groups reported for every domain.
pub const GROUPS: [&str; 3] = ["ball", "player", "all"];

fn in_group(group: &str, role: Role) -> bool {
    group == "all" || group == role.as_str()
}

/// Means of the motion statistics over a set of agents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MotionStats {
    pub step: f64,
    pub path_l: f64,
    pub path_d_discrepancy: f64,
    pub path_d_endpoint: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct MotionAcc {
    step: f64,
    path_l: f64,
    endpoint: f64,
    agents: usize,
    discrepancy: f64,
    scenes: usize,
}

impl MotionAcc {
    fn add(&mut self, trajectories: &[&[f64]]) -> Result<()> {
        if trajectories.is_empty() {
            return Ok(());
        }
        let pd = path_d(trajectories)?;
        for (traj, end) in trajectories.iter().zip(&pd.endpoint) {
            self.step += step_stat(traj)?;
            self.path_l += path_l(traj)?;
            self.endpoint += end;
            self.agents += 1;
        }
        self.discrepancy += pd.discrepancy;
        self.scenes += 1;
        Ok(())
    }

    fn finish(&self) -> MotionStats {
        let per = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
        MotionStats {
            step: per(self.step, self.agents),
            path_l: per(self.path_l, self.agents),
            path_d_discrepancy: per(self.discrepancy, self.scenes),
            path_d_endpoint: per(self.endpoint, self.agents),
        }
    }
}

fn group_trajectories<'a>(traj: impl Fn(usize) -> &'a [f64], roles: &[Role], group: &str) -> Vec<&'a [f64]> {
    roles.iter().enumerate().filter(|(_, r)| in_group(group, **r)).map(|(i, _)| traj(i)).collect()
}

/// Ground-truth statistics per `(domain, group)`, with an overall `"all"`
/// domain when several domains are present.
pub fn gt_stats(dataset: &Dataset) -> Result<BTreeMap<(String, String), MotionStats>> {
    if dataset.is_empty() {
        return Err(Error::Usage("statistics of an empty dataset".into()));
    }
    let mut acc: BTreeMap<(String, String), MotionAcc> = BTreeMap::new();
    let several = dataset.domains().len() > 1;
    for seq in &dataset.sequences {
        for group in GROUPS {
            let trajs = group_trajectories(|i| seq.trajectory(i), &seq.roles, group);
            acc.entry((seq.domain.clone(), group.to_string())).or_default().add(&trajs)?;
            if several {
                acc.entry(("all".to_string(), group.to_string())).or_default().add(&trajs)?;
            }
        }
    }
    Ok(acc.into_iter().map(|(k, v)| (k, v.finish())).collect())
}

/// Writes ground-truth statistics as `domain,role,step,path_l,path_d_discrepancy,path_d_endpoint`.
pub fn write_gt_stats(stats: &BTreeMap<(String, String), MotionStats>, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["domain", "role", "step", "path_l", "path_d_discrepancy", "path_d_endpoint"])?;
    for ((domain, role), s) in stats {
        out.write_record([
            domain.clone(),
            role.clone(),
            s.step.to_string(),
            s.path_l.to_string(),
            s.path_d_discrepancy.to_string(),
            s.path_d_endpoint.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(())
}

/// All metrics of one `(domain, group)` cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricValues {
    pub min_ade: f64,
    pub oob_rate: f64,
    pub motion: MotionStats,
}

impl MetricValues {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("min_ade", self.min_ade),
            ("oob", self.oob_rate),
            ("step", self.motion.step),
            ("path_l", self.motion.path_l),
            ("path_d_discrepancy", self.motion.path_d_discrepancy),
            ("path_d_endpoint", self.motion.path_d_endpoint),
        ]
    }
}

#[derive(Clone, Debug, Default)]
struct CellAcc {
    ade: f64,
    ade_scenes: usize,
    out: usize,
    points: usize,
    motion: MotionAcc,
}

/// Metrics grouped by `(domain, role group)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub cells: BTreeMap<(String, String), MetricValues>,
}

impl MetricsReport {
    pub fn get(&self, domain: &str, group: &str) -> Option<&MetricValues> {
        self.cells.get(&(domain.to_string(), group.to_string()))
    }

    /// Writes `dataset,protocol,role,metric,value` rows.
    pub fn write_csv(&self, protocol: &str, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["dataset", "protocol", "role", "metric", "value"])?;
        self.append_csv(protocol, &mut out)?;
        out.flush().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn append_csv<W: Write>(&self, protocol: &str, out: &mut csv::Writer<W>) -> Result<()> {
        for ((domain, role), v) in &self.cells {
            for (metric, value) in v.named() {
                out.write_record([domain.as_str(), protocol, role.as_str(), metric, &value.to_string()])?;
            }
        }
        Ok(())
    }
}

/// Accumulates per-scene results into a [`MetricsReport`].
#[derive(Debug, Default)]
pub struct ReportBuilder {
    cells: BTreeMap<(String, String), CellAcc>,
}

impl ReportBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scores the completions `samples` (each `N × T × 2`) of `truth` on the
    /// missing entries of `eval_mask`. Motion statistics use the sample with
    /// the lowest overall ADE; OOB counts the points of every sample.
    pub fn add_scene(&mut self, truth: &SceneSequence, eval_mask: &[u8], samples: &[Vec<f64>], bounds: &FieldBounds) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Usage("no samples for scene".into()));
        }
        let n = truth.n_agents();
        let t = truth.steps();
        let overall: Vec<f64> = samples.iter().map(|s| ade(s, &truth.positions, eval_mask)).collect::<Result<_>>()?;
        let best = crate::losses::argmin(&overall);
        for group in GROUPS {
            let agents: Vec<usize> = (0..n).filter(|&i| in_group(group, truth.roles[i])).collect();
            if agents.is_empty() {
                continue;
            }
            let cell = self.cells.entry((truth.domain.clone(), group.to_string())).or_default();
            let sub = |flat: &[f64], width: usize| -> Vec<f64> {
                agents.iter().flat_map(|&i| flat[i * t * width..(i + 1) * t * width].iter().copied()).collect()
            };
            let sub_mask: Vec<u8> = agents.iter().flat_map(|&i| eval_mask[i * t..(i + 1) * t].iter().copied()).collect();
            if sub_mask.contains(&0) {
                let truth_xy = sub(&truth.positions, 2);
                let group_samples: Vec<Vec<f64>> = samples.iter().map(|s| sub(s, 2)).collect();
                cell.ade += min_ade_k(&group_samples, &truth_xy, &sub_mask)?;
                cell.ade_scenes += 1;
            }
            for s in samples {
                let pts = sub(s, 2);
                cell.out += pts.chunks_exact(2).filter(|p| !bounds.contains(p[0], p[1])).count();
                cell.points += pts.len() / 2;
            }
            let chosen = &samples[best];
            let trajs: Vec<&[f64]> = agents.iter().map(|&i| &chosen[i * t * 2..(i + 1) * t * 2]).collect();
            cell.motion.add(&trajs)?;
        }
        Ok(())
    }

    pub fn finish(self) -> MetricsReport {
        let cells = self
            .cells
            .into_iter()
            .map(|(k, c)| {
                let v = MetricValues {
                    min_ade: if c.ade_scenes == 0 { 0.0 } else { c.ade / c.ade_scenes as f64 },
                    oob_rate: if c.points == 0 { 0.0 } else { c.out as f64 / c.points as f64 },
                    motion: c.motion.finish(),
                };
                (k, v)
            })
            .collect();
        MetricsReport { cells }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ade_cases() {
        let truth = vec![0.0, 0.0, 1.0, 1.0];
        let mask = [1, 0];
        assert_eq!(min_ade_k(&[truth.clone()], &truth, &mask).unwrap(), 0.0);
        let off = vec![0.0, 0.0, 4.0, 5.0];
        assert_eq!(ade(&off, &truth, &mask).unwrap(), 5.0);
        let far = vec![0.0, 0.0, 1.0, 6.0];
        let near = vec![0.0, 0.0, 1.0, 3.0];
        assert_eq!(min_ade_k(&[far, near], &truth, &mask).unwrap(), 2.0);
        assert!(ade(&truth, &truth, &[1, 1]).is_err());
    }

    #[test]
    fn oob_cases() {
        let unit = FieldBounds::UNIT;
        assert_eq!(oob(&[0.5, 0.5, 0.5, 0.5], &unit), 0.0);
        assert_eq!(oob(&[0.5, 0.5, 1.2, 0.3], &unit), 0.5);
        assert_eq!(oob(&[1.0, 1.0], &unit), 0.0);
    }

    #[test]
    fn step_and_length() {
        let traj = [0.0, 0.0, 3.0, 4.0, 3.0, 4.0];
        assert_eq!(step_stat(&traj).unwrap(), 2.5);
        assert_eq!(path_l(&traj).unwrap(), 5.0);
        let line: Vec<f64> = (0..=10).flat_map(|i| [i as f64, 0.0]).collect();
        assert_eq!(path_l(&line).unwrap(), 10.0);
        assert_eq!(step_stat(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!(step_stat(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn path_d_cases() {
        let a = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let same = path_d(&[&a, &a]).unwrap();
        assert_eq!(same.discrepancy, 0.0);
        assert_eq!(same.endpoint, vec![0.0, 0.0]);
        let b = [0.0, 0.0, 3.0, 4.0, 3.0, 4.0];
        let mixed = path_d(&[&a, &b]).unwrap();
        assert_eq!(mixed.discrepancy, 3.0);
        assert_eq!(mixed.endpoint, vec![0.0, 5.0]);
    }
}
