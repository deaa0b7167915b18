//! End-to-end acceptance checks, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line to stderr whether or not output capture
//! is on.

mod support;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use multitraj::adapter::{adapter_forward, AdapterConfig, AdapterVariant};
use multitraj::contrastive::{hierarchical_loss, info_nce_value, ContrastiveConfig, ContrastiveVariant};
use multitraj::data::{make_mask, merge_unified, split_visible_missing, Dataset, FieldBounds, MaskSpec};
use multitraj::eval::{embeddings, evaluate, merge_normalized, write_reports, EmbeddingRow, Method, Mode, ProtocolReport, ProtocolSpec};
use multitraj::losses::kl_value;
use multitraj::metrics::{endpoint_displacement, min_ade_k, oob, path_d, path_l, step_stat};
use multitraj::model::{Layout, Model};
use multitraj::numerics::{Array, Tape};
use multitraj::params::ParamStore;
use multitraj::train::{fit, FitOptions, LogRow, TrainConfig};
use rand::Rng;

use support::gradients::{check_adapter, check_hierarchical, check_primitives, check_total_loss, toy_config};
use support::plain::plain_fit;
use support::{default_task, random_array, random_scene, rng, unit_dataset};

const DOMAINS: [&str; 3] = ["basketball", "football", "soccer"];

fn report(n: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!("criterion {n}: {} {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn verdict(n: &str, failures: Vec<String>, detail: impl AsRef<str>) {
    let pass = failures.is_empty();
    let detail = if pass { detail.as_ref().to_string() } else { format!("{} | {}", detail.as_ref(), failures.join("; ")) };
    report(n, pass, &detail);
    assert!(pass, "criterion {n}: {detail}");
}

struct Trained {
    model: Model,
    log: Vec<LogRow>,
    elapsed: Duration,
}

struct Task {
    trains: Vec<Dataset>,
    tests: Vec<Dataset>,
}

fn task() -> &'static Task {
    static TASK: OnceLock<Task> = OnceLock::new();
    TASK.get_or_init(|| {
        let (trains, tests) = default_task(0);
        Task { trains, tests }
    })
}

fn variant_config(adapter: AdapterVariant, contrastive: ContrastiveVariant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    cfg.model.adapter.variant = adapter;
    cfg.model.contrastive.variant = contrastive;
    cfg
}

fn train_u2s(cfg: &TrainConfig) -> Trained {
    let merged = merge_normalized(&task().trains).unwrap();
    let start = Instant::now();
    let out = fit(&merged, cfg, FitOptions::default()).unwrap();
    Trained { model: out.model, log: out.log, elapsed: start.elapsed() }
}

/// The default configuration (token-wise adapter, hierarchical contrastive)
/// trained under U2S with seed 0.
fn default_run() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| train_u2s(&TrainConfig::default()))
}

fn protocol(domain: &str, seed: u64) -> ProtocolSpec {
    ProtocolSpec::new(Mode::U2S, DOMAINS.iter().map(|d| d.to_string()).collect(), domain, seed)
}

fn min_ade(method: Method, domain: usize, seed: u64) -> f64 {
    let name = DOMAINS[domain];
    evaluate(method, &task().tests[domain], &protocol(name, seed)).unwrap().get(name, "all").unwrap().min_ade
}

#[test]
fn criterion_1_gradients() {
    let start = Instant::now();
    let mut failures = check_primitives(20);
    failures.extend(check_adapter(20));
    failures.extend(check_hierarchical(20));
    failures.extend(check_total_loss(20));
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(120) {
        failures.push(format!("took {elapsed:?}"));
    }
    verdict("1", failures, format!("primitives, adapter, contrastive and full objective over 20 seeds in {:.1}s", elapsed.as_secs_f64()));
}

#[test]
fn criterion_2_closed_form_losses() {
    let mut failures = Vec::new();
    let mut expect = |what: &str, got: f64, want: f64, tol: f64| {
        if !((got - want).abs() <= tol) {
            failures.push(format!("{what}: {got} vs {want}"));
        }
    };
    let pair = Array::from_rows(&[vec![0.6, 0.8], vec![-0.8, 0.6]]).unwrap();
    expect("two rows, one label", info_nce_value(&pair, &[0, 0], 0.1).unwrap(), 0.0, 0.0);
    let same = Array::from_rows(&vec![vec![0.0, 1.0, 0.0]; 5]).unwrap();
    expect("five identical rows", info_nce_value(&same, &[0; 5], 0.1).unwrap(), 4f64.ln(), 1e-9);
    let ortho = Array::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let e = std::f64::consts::E;
    expect("orthogonal negatives", info_nce_value(&ortho, &[0, 0, 1, 2], 1.0).unwrap(), -(e / (e + 2.0)).ln(), 1e-9);
    let kl = |mu: f64, sigma: f64| kl_value(&Array::matrix(1, 1, vec![mu]).unwrap(), &Array::matrix(1, 1, vec![sigma]).unwrap()).unwrap();
    expect("KL at the prior", kl(0.0, 1.0), 0.0, 0.0);
    expect("KL with unit mean", kl(1.0, 1.0), 0.5, 1e-12);
    verdict("2", failures, "InfoNCE and KL closed forms");
}

#[test]
fn criterion_3_metric_oracles() {
    let mut failures = Vec::new();
    let mut exact = |what: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{what}: {got} vs {want}"));
        }
    };
    // Ball runs (0,0)→(3,4)→(3,4); one player stands still, the other walks
    // east one unit per step.
    let ball = [0.0, 0.0, 3.0, 4.0, 3.0, 4.0];
    let still = [2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
    let walker = [0.0, 1.0, 1.0, 1.0, 2.0, 1.0];
    exact("ball step", step_stat(&ball).unwrap(), 2.5);
    exact("ball path", path_l(&ball).unwrap(), 5.0);
    exact("still step", step_stat(&still).unwrap(), 0.0);
    exact("walker path", path_l(&walker).unwrap(), 2.0);
    exact("walker endpoint", endpoint_displacement(&walker).unwrap(), 2.0);
    exact("identical agents", path_d(&[&walker, &walker]).unwrap().discrepancy, 0.0);
    exact("closed loop", endpoint_displacement(&[0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap(), 0.0);
    let line: Vec<f64> = (0..11).flat_map(|t| [t as f64, 0.0]).collect();
    exact("ten unit steps", path_l(&line).unwrap(), 10.0);

    let truth: Vec<f64> = [ball, still, walker].concat();
    let mut mask = vec![1u8; 9];
    mask[8] = 0;
    let mut off = truth.clone();
    off[16] += 3.0;
    off[17] += 4.0;
    exact("exact sample", min_ade_k(&[truth.clone()], &truth, &mask).unwrap(), 0.0);
    exact("3-4-5 offset", min_ade_k(&[off], &truth, &mask).unwrap(), 5.0);
    let shifted = |d: f64| -> Vec<f64> { truth.iter().enumerate().map(|(i, v)| if i == 16 { v + d } else { *v }).collect() };
    exact("best of two", min_ade_k(&[shifted(5.0), shifted(2.0)], &truth, &mask).unwrap(), 2.0);

    let unit = FieldBounds::UNIT;
    exact("field centre", oob(&[0.5, 0.5, 0.5, 0.5], &unit), 0.0);
    exact("one of two out", oob(&[0.5, 0.5, 1.2, 0.3], &unit), 0.5);
    exact("corner is inside", oob(&[1.0, 1.0], &unit), 0.0);

    let mut r = rng(3);
    for i in 0..1000 {
        let t = r.random_range(2..40);
        let traj: Vec<f64> = (0..2 * t).map(|_| r.random_range(-50.0..50.0)).collect();
        let (l, s, d) = (path_l(&traj).unwrap(), step_stat(&traj).unwrap(), endpoint_displacement(&traj).unwrap());
        if (l - s * (t - 1) as f64).abs() > 1e-12 * l || d > l * (1.0 + 1e-12) {
            failures.push(format!("trajectory {i}: path {l}, step {s}, endpoint {d}"));
        }
    }
    verdict("3", failures, "fixture values exact, identities on 1000 random trajectories");
}

#[test]
fn criterion_4_mask_algebra_and_merge() {
    let mut failures = Vec::new();
    let mut r = rng(4);
    let specs = [MaskSpec::random(0.3), MaskSpec::block(0.4), MaskSpec::prediction(5), MaskSpec::evaluation(12)];
    for i in 0..200u64 {
        let x: Vec<f64> = (0..5 * 12 * 2).map(|_| r.random_range(-100.0..100.0)).collect();
        let spec = specs[i as usize % specs.len()].clone().with_seed(i);
        let mask = make_mask(&spec, 5, 12).unwrap();
        let (v, m) = split_visible_missing(&x, &mask).unwrap();
        if v.iter().zip(&m).map(|(a, b)| a + b).collect::<Vec<_>>() != x {
            failures.push(format!("split {i} does not add back up"));
        }
    }
    let template = random_scene("basketball", 2, 2, &mut r);
    let stand_in = |domain: &str, n: usize| {
        let mut s = template.clone();
        s.domain = domain.into();
        unit_dataset(vec![s; n])
    };
    let parts = [stand_in("basketball", 93_490), stand_in("football", 10_762), stand_in("soccer", 9_882)];
    let merged = merge_unified(&parts).unwrap();
    if merged.len() != 114_134 {
        failures.push(format!("merged {} sequences", merged.len()));
    }
    verdict("4", failures, format!("200 random splits; merged 93490+10762+9882 = {}", merged.len()));
}

#[test]
fn criterion_5_variant_equivalences() {
    let mut failures = Vec::new();
    let mut r = rng(5);
    let mut scenes: Vec<_> = (0..6).map(|_| random_scene("basketball", 3, 6, &mut r)).collect();
    scenes.extend((0..6).map(|_| random_scene("football", 3, 6, &mut r)));
    let data = unit_dataset(scenes);
    let mut cfg = TrainConfig { epochs: 3, batch_size: 5, k_train: 2, model: toy_config(), ..TrainConfig::default() };
    cfg.model.adapter.variant = AdapterVariant::Bypass;
    cfg.model.contrastive.variant = ContrastiveVariant::Off;
    let ours = fit(&data, &cfg, FitOptions::default()).unwrap();
    let (plain_model, plain_log) = plain_fit(&data, &cfg).unwrap();
    if ours.log != plain_log || ours.model.params != plain_model.params {
        failures.push("bypass+off differs from the plain CVAE".into());
    }

    let layout = Layout::new(&[3, 2]);
    for (variant, seed) in [(AdapterVariant::NoGating, 50), (AdapterVariant::TokenWise, 51)] {
        let cfg = AdapterConfig { variant, heads: 2 };
        let mut store = ParamStore::new();
        multitraj::adapter::init(&mut store, &mut rng(seed), &cfg, 4, 2, 3);
        let mut tape = Tape::new();
        let p = store.bind_const(&mut tape);
        let z = tape.constant(random_array(&[5, 4], -1.0, 1.0, &mut rng(seed + 100)));
        let out = adapter_forward(&mut tape, &p, z, &[0, 1, 1, 0, 1], &[0, 0, 0, 2, 2], &layout, &cfg).unwrap();
        match (variant, out.alpha) {
            (AdapterVariant::NoGating, _) => {
                if Some(tape.value(out.adapted)) != out.z_cond.map(|c| tape.value(c)) {
                    failures.push("no_gating output is not z_cond".into());
                }
            }
            (_, Some(alpha)) => {
                if tape.value(alpha).data().iter().any(|&a| a != 0.5) {
                    failures.push(format!("{variant:?} gate does not start at 0.5"));
                }
            }
            (_, None) => failures.push(format!("{variant:?} has no gate")),
        }
    }
    verdict("5", failures, "plain CVAE bitwise over 3 epochs; no_gating == z_cond; initial alpha 0.5");
}

#[test]
fn criterion_6_learning_sanity() {
    let run = default_run();
    let first = run.log[0].total;
    let last = run.log.last().unwrap().total;
    let mut failures = Vec::new();
    if !(last < 0.5 * first) {
        failures.push(format!("total loss {first:.4} -> {last:.4} (ratio {:.3}, need < 0.5)", last / first));
    }
    let mut scores = Vec::new();
    for (d, name) in DOMAINS.iter().enumerate() {
        let model = min_ade(Method::Model(&run.model), d, 0);
        let mean = min_ade(Method::Mean, d, 0);
        let linear = min_ade(Method::LinearFit, d, 0);
        if !(model < mean && model < linear) {
            failures.push(format!("{name}: model {model:.3} vs mean {mean:.3}, linear {linear:.3}"));
        }
        scores.push(format!("{name} {model:.3}/{mean:.3}/{linear:.3}"));
    }
    if run.elapsed > Duration::from_secs(15 * 60) {
        failures.push(format!("training took {:?}", run.elapsed));
    }
    verdict(
        "6",
        failures,
        format!(
            "loss ratio {:.3}; minADE model/mean/linear: {}; trained in {:.0}s",
            last / first,
            scores.join(", "),
            run.elapsed.as_secs_f64()
        ),
    );
}

fn centroid_accuracy(train: &[EmbeddingRow], test: &[EmbeddingRow], space: &str) -> f64 {
    let label = |r: &EmbeddingRow| if space == "role" { r.role.clone() } else { r.domain.clone() };
    let mut sums: BTreeMap<String, (Vec<f64>, f64)> = BTreeMap::new();
    for r in train.iter().filter(|r| r.space == space) {
        let e = sums.entry(label(r)).or_insert((vec![0.0; r.values.len()], 0.0));
        e.0.iter_mut().zip(&r.values).for_each(|(a, b)| *a += b);
        e.1 += 1.0;
    }
    let centroids: Vec<(String, Vec<f64>)> = sums.into_iter().map(|(k, (s, n))| (k, s.iter().map(|v| v / n).collect())).collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for r in test.iter().filter(|r| r.space == space) {
        let dist = |c: &[f64]| c.iter().zip(&r.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let best = centroids.iter().min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1))).unwrap();
        hit += (best.0 == label(r)) as usize;
        total += 1;
    }
    hit as f64 / total as f64
}

#[test]
fn criterion_7_disentanglement() {
    let run = default_run();
    let train = embeddings(&run.model, &merge_normalized(&task().trains).unwrap()).unwrap();
    let test = embeddings(&run.model, &merge_normalized(&task().tests).unwrap()).unwrap();
    let role = centroid_accuracy(&train, &test, "role");
    let domain = centroid_accuracy(&train, &test, "domain");
    let mut failures = Vec::new();
    if role < 0.9 {
        failures.push(format!("role accuracy {role:.3}"));
    }
    if domain < 0.9 {
        failures.push(format!("domain accuracy {domain:.3}"));
    }

    let mut store = ParamStore::new();
    let cfg = ContrastiveConfig { variant: ContrastiveVariant::Hierarchical, proj_dim: 4, ..ContrastiveConfig::default() };
    multitraj::contrastive::init(&mut store, &mut rng(70), &cfg, 6);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let z = tape.param(random_array(&[8, 6], -1.0, 1.0, &mut rng(71)));
    let out = hierarchical_loss(&mut tape, &p, z, &[0, 1, 1, 1, 0, 1, 1, 1], &[0, 0, 0, 0, 1, 1, 1, 1], &cfg, 1.0).unwrap();
    let grads = p.collect(&tape.backward(out.role.unwrap()).unwrap());
    let mut leaked = 0;
    for (path, g) in grads.iter().filter(|(path, _)| path.starts_with("contrastive.domain")) {
        if let Some(g) = g {
            if g.data().iter().any(|&v| v != 0.0) {
                failures.push(format!("role loss reaches {path}"));
            }
            leaked += 1;
        }
    }
    verdict(
        "7",
        failures,
        format!("nearest-centroid role {role:.3}, domain {domain:.3}; role loss touches {leaked} domain-head tensors with nonzero gradient"),
    );
}

#[test]
fn criterion_8_ablation_orderings() {
    let cells = [
        (AdapterVariant::TokenWise, ContrastiveVariant::Hierarchical),
        (AdapterVariant::TokenWise, ContrastiveVariant::SharedFeature),
        (AdapterVariant::NoGating, ContrastiveVariant::Hierarchical),
    ];
    let seeds = [0u64, 1, 2];
    let mut means = [0.0; 3];
    let mut per_seed = vec![[0.0; 3]; seeds.len()];
    for (s, &seed) in seeds.iter().enumerate() {
        for (c, &(adapter, contrastive)) in cells.iter().enumerate() {
            let owned;
            let model = if seed == 0 && c == 0 {
                &default_run().model
            } else {
                owned = train_u2s(&variant_config(adapter, contrastive, seed)).model;
                &owned
            };
            let score = (0..DOMAINS.len()).map(|d| min_ade(Method::Model(model), d, seed)).sum::<f64>() / DOMAINS.len() as f64;
            per_seed[s][c] = score;
            means[c] += score / seeds.len() as f64;
        }
    }
    for (s, row) in per_seed.iter().enumerate() {
        if row[0] > row[1] || row[0] > row[2] {
            let line = format!("  seed {}: token_wise+hierarchical {:.3}, shared_feature {:.3}, no_gating {:.3}\n", seeds[s], row[0], row[1], row[2]);
            let _ = std::io::stderr().write_all(line.as_bytes());
        }
    }
    let mut failures = Vec::new();
    if means[0] > means[1] {
        failures.push("hierarchical trails shared_feature".into());
    }
    if means[0] > means[2] {
        failures.push("token_wise trails no_gating".into());
    }
    verdict(
        "8",
        failures,
        format!("3-seed mean minADE: hierarchical {:.3} vs shared_feature {:.3}; token_wise {:.3} vs no_gating {:.3}", means[0], means[1], means[0], means[2]),
    );
}

fn reports(model: &Model) -> Vec<u8> {
    let mut bundle: Vec<ProtocolReport> = Vec::new();
    for (d, name) in DOMAINS.iter().enumerate() {
        let report = evaluate(Method::Model(model), &task().tests[d], &protocol(name, 9)).unwrap();
        bundle.push(ProtocolReport { mode: Mode::U2S, method: "model".into(), domain: name.to_string(), report });
    }
    let mut out = Vec::new();
    write_reports(&bundle, &mut out).unwrap();
    out
}

#[test]
fn criterion_9_determinism() {
    let merged = merge_normalized(&task().trains).unwrap();
    let cfg = TrainConfig { epochs: 2, seed: 9, ..TrainConfig::default() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for d in &dirs {
        let out = fit(&merged, &cfg, FitOptions { out_dir: Some(d.path().to_path_buf()), resume: None }).unwrap();
        let read = |name: &str| std::fs::read(d.path().join(name)).unwrap();
        outputs.push([read("log.csv"), read("checkpoint.json"), reports(&out.model)]);
    }
    let mut failures = Vec::new();
    for (i, name) in ["log", "checkpoint", "reports"].iter().enumerate() {
        if outputs[0][i].is_empty() || outputs[0][i] != outputs[1][i] {
            failures.push(format!("{name} differs"));
        }
    }
    verdict("9", failures, "log, checkpoint and report bytes identical across two runs");
}
