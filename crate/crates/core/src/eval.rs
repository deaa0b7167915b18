//! Statistical baselines, evaluation protocols and the ablation harness.
//!
//! Every method completes a scene from its visible entries; visible entries
//! are copied through, missing ones filled. The evaluation mask of scene `i`
//! is drawn from `(seed, EVAL_MASK, i)` and combined with the scene's own
//! data mask, so the same protocol and seed always score the same entries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterVariant;
use crate::contrastive::ContrastiveVariant;
use crate::data::{make_mask, merge_unified, Dataset, FieldBounds, MaskSpec, SceneSequence};
use crate::metrics::{MetricsReport, ReportBuilder};
use crate::model::{embed, ols, sample_k, Batch, Model};
use crate::seed::{self, stream};
use crate::train::{fit, normalized, FitOptions, TrainConfig};
use crate::{Error, Result};

/// Scenes per inference pass.
const EVAL_CHUNK: usize = 64;

fn observed_points(scene: &SceneSequence, visible: &[u8], agent: usize) -> Vec<(usize, [f64; 2])> {
    let t = scene.steps();
    (0..t).filter(|&s| visible[agent * t + s] == 1).map(|s| (s, scene.xy(agent, s))).collect()
}

fn fill(scene: &SceneSequence, visible: &[u8], mut per_agent: impl FnMut(usize, &[(usize, [f64; 2])], usize) -> [f64; 2]) -> Vec<f64> {
    let t = scene.steps();
    let mut out = scene.positions.clone();
    for i in 0..scene.n_agents() {
        let obs = observed_points(scene, visible, i);
        for s in 0..t {
            if visible[i * t + s] == 0 {
                let [x, y] = per_agent(i, &obs, s);
                out[(i * t + s) * 2] = x;
                out[(i * t + s) * 2 + 1] = y;
            }
        }
    }
    out
}

fn mean_of(obs: &[(usize, [f64; 2])]) -> [f64; 2] {
    let n = obs.len().max(1) as f64;
    let (sx, sy) = obs.iter().fold((0.0, 0.0), |(a, b), (_, p)| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Missing entries filled with the agent's mean visible position.
pub fn baseline_mean(scene: &SceneSequence, visible: &[u8]) -> Vec<f64> {
    fill(scene, visible, |_, obs, _| mean_of(obs))
}

/// Missing entries filled with the coordinate-wise median visible position.
pub fn baseline_median(scene: &SceneSequence, visible: &[u8]) -> Vec<f64> {
    fill(scene, visible, |_, obs, _| [median(obs.iter().map(|p| p.1[0]).collect()), median(obs.iter().map(|p| p.1[1]).collect())])
}

/// Missing entries evaluated on a per-coordinate least-squares line over the
/// visible steps; agents with fewer than two visible steps fall back to the
/// mean fill.
pub fn baseline_linear_fit(scene: &SceneSequence, visible: &[u8]) -> Vec<f64> {
    let mut lines: BTreeMap<usize, [(f64, f64); 2]> = BTreeMap::new();
    for i in 0..scene.n_agents() {
        let obs = observed_points(scene, visible, i);
        if obs.len() >= 2 {
            let ts: Vec<f64> = obs.iter().map(|o| o.0 as f64).collect();
            let xs: Vec<f64> = obs.iter().map(|o| o.1[0]).collect();
            let ys: Vec<f64> = obs.iter().map(|o| o.1[1]).collect();
            lines.insert(i, [ols(&ts, &xs), ols(&ts, &ys)]);
        } else {
            log::warn!("linear fit: agent {i} has {} visible steps; using the mean fill", obs.len());
        }
    }
    fill(scene, visible, |i, obs, s| match lines.get(&i) {
        Some([(ax, bx), (ay, by)]) => [ax + bx * s as f64, ay + by * s as f64],
        None => mean_of(obs),
    })
}

/// A way of completing scenes.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Mean,
    Median,
    LinearFit,
    /// Returns the ground truth; useful as a self-check.
    GroundTruth,
    Model(&'a Model),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mean => "mean",
            Method::Median => "median",
            Method::LinearFit => "linear",
            Method::GroundTruth => "ground_truth",
            Method::Model(_) => "model",
        }
    }

    /// Baseline named by a CLI alias.
    pub fn baseline(alias: &str) -> Option<Method<'static>> {
        match alias {
            "mean" => Some(Method::Mean),
            "median" => Some(Method::Median),
            "linear" | "linear_fit" => Some(Method::LinearFit),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    S2S,
    U2S,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::S2S => "S2S",
            Mode::U2S => "U2S",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub mode: Mode,
    pub train_domains: Vec<String>,
    pub test_domain: String,
    /// `None` uses the default evaluation mask for the scene length.
    #[serde(default)]
    pub eval_mask: Option<MaskSpec>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    /// Clamp completions into the field before scoring.
    #[serde(default)]
    pub clip: bool,
}

fn default_k() -> usize {
    20
}

impl ProtocolSpec {
    pub fn new(mode: Mode, train_domains: Vec<String>, test_domain: impl Into<String>, seed: u64) -> Self {
        Self { mode, train_domains, test_domain: test_domain.into(), eval_mask: None, k: default_k(), seed, clip: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("protocol needs k ≥ 1".into()));
        }
        match self.mode {
            Mode::S2S if self.train_domains != [self.test_domain.clone()] => {
                Err(Error::Config(format!("S2S trains and tests on one domain; got {:?} → {}", self.train_domains, self.test_domain)))
            }
            Mode::U2S if self.train_domains.len() < 2 => Err(Error::Config("U2S needs at least two training domains".into())),
            _ => Ok(()),
        }
    }

    /// Task mask of scene `index` (1 = visible to the method).
    pub fn task_mask(&self, scene: &SceneSequence, index: usize) -> Result<Vec<u8>> {
        let spec = self.eval_mask.clone().unwrap_or_else(|| MaskSpec::evaluation(scene.steps()));
        let spec = spec.with_seed(seed::derive_seed(self.seed, &[stream::EVAL_MASK, index as u64]));
        Ok(make_mask(&spec, scene.n_agents(), scene.steps())?)
    }
}

fn denormalize_into(points: &mut [f64], bounds: &FieldBounds) {
    for p in points.chunks_exact_mut(2) {
        p[0] = bounds.x_min + p[0] * bounds.width();
        p[1] = bounds.y_min + p[1] * bounds.height();
    }
}

fn clip_into(points: &mut [f64], bounds: &FieldBounds) {
    for p in points.chunks_exact_mut(2) {
        let (x, y) = bounds.clamp(p[0], p[1]);
        p[0] = x;
        p[1] = y;
    }
}

/// Completions of every scene: `out[scene][k]` is `N × T × 2` in the
/// dataset's units.
pub fn complete(method: Method, dataset: &Dataset, masks: &[Vec<u8>], k: usize, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    let visible = |i: usize| -> Vec<u8> { dataset.sequences[i].mask.iter().zip(&masks[i]).map(|(a, b)| a & b).collect() };
    match method {
        Method::Model(model) => {
            let data = normalized(dataset)?;
            let rescale = !dataset.is_normalized();
            let mut out = Vec::with_capacity(data.len());
            let idx: Vec<usize> = (0..data.len()).collect();
            for chunk in idx.chunks(EVAL_CHUNK) {
                let scenes: Vec<&SceneSequence> = chunk.iter().map(|&i| &data.sequences[i]).collect();
                let mask_refs: Vec<&[u8]> = chunk.iter().map(|&i| masks[i].as_slice()).collect();
                let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
                let batch = Batch::new(model, &scenes, &mask_refs, &ids)?;
                let samples = sample_k(model, &batch, k, seed)?;
                for s in 0..chunk.len() {
                    let rows = batch.layout.range(s);
                    let width = 2 * model.steps;
                    let per: Vec<Vec<f64>> = samples
                        .iter()
                        .map(|a| {
                            let mut v = a.data()[rows.start * width..rows.end * width].to_vec();
                            if rescale {
                                denormalize_into(&mut v, &dataset.bounds);
                            }
                            v
                        })
                        .collect();
                    out.push(per);
                }
            }
            Ok(out)
        }
        _ => Ok((0..dataset.len())
            .map(|i| {
                let scene = &dataset.sequences[i];
                let vis = visible(i);
                let filled = match method {
                    Method::Mean => baseline_mean(scene, &vis),
                    Method::Median => baseline_median(scene, &vis),
                    Method::LinearFit => baseline_linear_fit(scene, &vis),
                    _ => scene.positions.clone(),
                };
                vec![filled]
            })
            .collect()),
    }
}

/// Scores `method` on `dataset` under `protocol`. Deterministic baselines
/// produce a single completion regardless of `protocol.k`.
pub fn evaluate(method: Method, dataset: &Dataset, protocol: &ProtocolSpec) -> Result<MetricsReport> {
    protocol.validate()?;
    if let Method::Model(model) = method {
        if protocol.mode == Mode::S2S && !model.trained_on.is_empty() && !model.trained_on.contains(&protocol.test_domain) {
            log::warn!("S2S evaluation on `{}` with a model trained on {:?}", protocol.test_domain, model.trained_on);
        }
    }
    let masks = dataset
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| protocol.task_mask(s, i))
        .collect::<Result<Vec<_>>>()?;
    let completions = complete(method, dataset, &masks, protocol.k, protocol.seed)?;
    let mut builder = ReportBuilder::new();
    for (i, (scene, samples)) in dataset.sequences.iter().zip(completions).enumerate() {
        let mut samples = samples;
        if protocol.clip {
            samples.iter_mut().for_each(|s| clip_into(s, &dataset.bounds));
        }
        // Scored entries: hidden by the task but present in the data.
        let region: Vec<u8> = scene.mask.iter().zip(&masks[i]).map(|(&d, &t)| if d == 1 && t == 0 { 0 } else { 1 }).collect();
        builder.add_scene(scene, &region, &samples, &dataset.bounds)?;
    }
    Ok(builder.finish())
}

/// One scored method on one test domain.
#[derive(Clone, Debug)]
pub struct ProtocolReport {
    pub mode: Mode,
    pub method: String,
    pub domain: String,
    pub report: MetricsReport,
}

pub const BASELINES: [Method<'static>; 3] = [Method::Mean, Method::Median, Method::LinearFit];

fn score_all(mode: Mode, model: &Model, train_domains: &[String], tests: &[Dataset], seed: u64, k: usize) -> Result<Vec<ProtocolReport>> {
    let mut out = Vec::new();
    for test in tests {
        let domain = single_domain(test)?;
        let protocol = ProtocolSpec { k, ..ProtocolSpec::new(mode, train_domains.to_vec(), domain.clone(), seed) };
        for method in std::iter::once(Method::Model(model)).chain(BASELINES) {
            let report = evaluate(method, test, &protocol)?;
            out.push(ProtocolReport { mode, method: method.name().into(), domain: domain.clone(), report });
        }
    }
    Ok(out)
}

fn single_domain(d: &Dataset) -> Result<String> {
    match d.domains().as_slice() {
        [one] => Ok(one.clone()),
        other => Err(Error::Usage(format!("a test set must hold exactly one domain, found {other:?}"))),
    }
}

/// One model per domain, trained and tested on that domain.
pub fn run_s2s(trains: &[Dataset], tests: &[Dataset], cfg: &TrainConfig, k: usize) -> Result<Vec<ProtocolReport>> {
    let mut out = Vec::new();
    for train in trains {
        let domain = single_domain(train)?;
        let test: Vec<Dataset> = tests.iter().filter(|t| t.domains() == [domain.clone()]).cloned().collect();
        let model = fit(train, cfg, FitOptions::default())?.model;
        out.extend(score_all(Mode::S2S, &model, &[domain], &test, cfg.seed, k)?);
    }
    Ok(out)
}

/// One model trained on the merged normalized domains, tested per domain.
pub fn run_u2s(trains: &[Dataset], tests: &[Dataset], cfg: &TrainConfig, k: usize) -> Result<(Model, Vec<ProtocolReport>)> {
    let merged = merge_normalized(trains)?;
    let model = fit(&merged, cfg, FitOptions::default())?.model;
    let domains = merged.domains();
    let reports = score_all(Mode::U2S, &model, &domains, tests, cfg.seed, k)?;
    Ok((model, reports))
}

/// Normalizes each dataset and concatenates them.
pub fn merge_normalized(datasets: &[Dataset]) -> Result<Dataset> {
    let parts = datasets.iter().map(normalized).collect::<Result<Vec<_>>>()?;
    Ok(merge_unified(&parts)?)
}

/// Writes `dataset,protocol,role,metric,value`; the protocol column reads
/// `<mode>:<method>`.
pub fn write_reports(reports: &[ProtocolReport], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["dataset", "protocol", "role", "metric", "value"])?;
    for r in reports {
        r.report.append_csv(&format!("{}:{}", r.mode.as_str(), r.method), &mut out)?;
    }
    out.flush().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridLayout {
    /// Every adapter variant with every contrastive variant.
    Cross,
    /// The adapter rows (with the hierarchical objective) followed by the
    /// contrastive rows (with the token-wise adapter).
    Tables,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub layout: GridLayout,
    #[serde(default)]
    pub adapters: Vec<AdapterVariant>,
    #[serde(default)]
    pub contrastives: Vec<ContrastiveVariant>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn tables(seeds: Vec<u64>) -> Self {
        Self { layout: GridLayout::Tables, adapters: Vec::new(), contrastives: Vec::new(), seeds }
    }

    /// Variant pairs in report order, without seeds.
    pub fn cells(&self) -> Result<Vec<(AdapterVariant, ContrastiveVariant)>> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation grid needs at least one seed".into()));
        }
        match self.layout {
            GridLayout::Cross => {
                if self.adapters.is_empty() || self.contrastives.is_empty() {
                    return Err(Error::Config("cross grid needs adapter and contrastive variants".into()));
                }
                Ok(self.adapters.iter().flat_map(|&a| self.contrastives.iter().map(move |&c| (a, c))).collect())
            }
            GridLayout::Tables => {
                use AdapterVariant as A;
                use ContrastiveVariant as C;
                Ok(vec![
                    (A::NoGating, C::Hierarchical),
                    (A::FeatureWise, C::Hierarchical),
                    (A::TokenWise, C::Hierarchical),
                    (A::TokenWise, C::RoleOnly),
                    (A::TokenWise, C::DomainOnly),
                    (A::TokenWise, C::SharedFeature),
                    (A::TokenWise, C::Hierarchical),
                ])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub adapter_variant: AdapterVariant,
    pub contrastive_variant: ContrastiveVariant,
    pub seed: u64,
    pub domain: String,
    pub metric: String,
    pub value: f64,
}

fn run_cell(trains: &[Dataset], tests: &[Dataset], base: &TrainConfig, cell: (AdapterVariant, ContrastiveVariant), seed: u64, k: usize) -> Result<Vec<(String, MetricsReport)>> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model.adapter.variant = cell.0;
    cfg.model.contrastive.variant = cell.1;
    let merged = merge_normalized(trains)?;
    let model = fit(&merged, &cfg, FitOptions::default())?.model;
    let domains = merged.domains();
    tests
        .iter()
        .map(|test| {
            let domain = single_domain(test)?;
            let protocol = ProtocolSpec { k, ..ProtocolSpec::new(Mode::U2S, domains.clone(), domain.clone(), seed) };
            Ok((domain, evaluate(Method::Model(&model), test, &protocol)?))
        })
        .collect()
}

/// Trains and scores every grid cell under U2S, running up to `jobs` cells
/// at once. A failed cell is logged and reported as a `failed` row.
pub fn ablation_suite(grid: &AblationGrid, trains: &[Dataset], tests: &[Dataset], base: &TrainConfig, k: usize, jobs: usize) -> Result<Vec<AblationRow>> {
    let cells = grid.cells()?;
    let mut unique: Vec<((AdapterVariant, ContrastiveVariant), u64)> = Vec::new();
    for &seed in &grid.seeds {
        for &cell in &cells {
            if !unique.contains(&(cell, seed)) {
                unique.push((cell, seed));
            }
        }
    }
    let results: Vec<Result<Vec<(String, MetricsReport)>>> = {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Vec<(String, MetricsReport)>>>>> = unique.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.max(1).min(unique.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    let Some(&(cell, seed)) = unique.get(i) else { break };
                    log::info!("ablation cell {}/{}: {} + {} seed {seed}", i + 1, unique.len(), cell.0.as_str(), cell.1.as_str());
                    let r = run_cell(trains, tests, base, cell, seed, k);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("every cell ran")).collect()
    };
    let mut rows = Vec::new();
    for &seed in &grid.seeds {
        for &cell in &cells {
            let idx = unique.iter().position(|u| *u == (cell, seed)).expect("cell scheduled");
            let row = |domain: &str, metric: &str, value: f64| AblationRow {
                adapter_variant: cell.0,
                contrastive_variant: cell.1,
                seed,
                domain: domain.to_string(),
                metric: metric.to_string(),
                value,
            };
            match &results[idx] {
                Ok(reports) => {
                    for (domain, report) in reports {
                        if let Some(v) = report.get(domain, "all") {
                            rows.extend(v.named().iter().map(|(m, x)| row(domain, m, *x)));
                        }
                    }
                }
                Err(e) => {
                    log::error!("ablation cell {} + {} seed {seed} failed: {e}", cell.0.as_str(), cell.1.as_str());
                    rows.push(row("all", "failed", f64::NAN));
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation(rows: &[AblationRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(())
}

/// Per-agent contrastive embeddings of fully visible scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub seq_id: usize,
    pub agent_id: usize,
    pub role: String,
    pub domain: String,
    pub space: &'static str,
    pub values: Vec<f64>,
}

pub fn embeddings(model: &Model, dataset: &Dataset) -> Result<Vec<EmbeddingRow>> {
    let data = normalized(dataset)?;
    let mut rows = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let scenes: Vec<&SceneSequence> = chunk.iter().map(|&i| &data.sequences[i]).collect();
        let masks: Vec<&[u8]> = scenes.iter().map(|s| s.mask.as_slice()).collect();
        let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        let batch = Batch::new(model, &scenes, &masks, &ids)?;
        let (_, z_role, z_domain) = embed(model, &batch)?;
        for (s, &seq_id) in chunk.iter().enumerate() {
            let scene = scenes[s];
            for (agent_id, row) in batch.layout.range(s).enumerate() {
                for (space, z) in [("role", &z_role), ("domain", &z_domain)] {
                    if let Some(z) = z {
                        rows.push(EmbeddingRow {
                            seq_id,
                            agent_id,
                            role: scene.roles[agent_id].as_str().into(),
                            domain: scene.domain.clone(),
                            space,
                            values: z.row(row).to_vec(),
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Writes `seq_id,agent_id,role,domain,space,p0,p1,…`.
pub fn write_embeddings(rows: &[EmbeddingRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut header: Vec<String> = ["seq_id", "agent_id", "role", "domain", "space"].iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|i| format!("p{i}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.seq_id.to_string(), r.agent_id.to_string(), r.role.clone(), r.domain.clone(), r.space.to_string()];
        rec.extend(r.values.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(())
}

/// Creates `path`'s parent directories and the file itself.
pub fn create_file(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::File::create(path).map_err(Error::io(path))
}
