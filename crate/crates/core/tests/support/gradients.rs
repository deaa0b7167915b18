//! Finite-difference checks of every differentiable piece, each over a range
//! of seeds. A suite returns the failures it saw, formatted for display.

use multitraj::adapter::{self, AdapterConfig, AdapterVariant};
use multitraj::contrastive::{self, ContrastiveConfig, ContrastiveVariant};
use multitraj::data::Role;
use multitraj::losses::{total_loss, LossWeights};
use multitraj::model::{forward_train, Batch, Layout, Model, ModelConfig, TrainNoise};
use multitraj::numerics::{grad_check, Array, NumericsError, Tape, Var};
use multitraj::params::{Bound, ParamStore};

use super::{random_array, random_scene, rng};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type Primitive = fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>;

/// Contracts `out` with fixed positive weights, distinct per coordinate, so
/// no input gradient cancels to exactly zero.
fn contract(tape: &mut Tape, out: Var) -> Result<Var, NumericsError> {
    let v = tape.value(out);
    let w: Vec<f64> = (0..v.len()).map(|i| 0.5 + (i * 37 % 11) as f64 / 10.0).collect();
    let w = tape.constant(Array::new(v.shape().to_vec(), w)?);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, (f64, f64), Primitive)> {
    let m = vec![3, 4];
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], (-1.0, 1.0), |t, x| t.matmul(x[0], x[1])),
        ("transpose", vec![m.clone()], (-1.0, 1.0), |t, x| t.transpose(x[0])),
        ("add", vec![m.clone(), m.clone()], (-1.0, 1.0), |t, x| t.add(x[0], x[1])),
        ("sub", vec![m.clone(), m.clone()], (-1.0, 1.0), |t, x| t.sub(x[0], x[1])),
        ("mul", vec![m.clone(), m.clone()], (-1.0, 1.0), |t, x| t.mul(x[0], x[1])),
        ("div", vec![m.clone(), m.clone()], (0.5, 2.0), |t, x| t.div(x[0], x[1])),
        ("affine", vec![m.clone()], (-1.0, 1.0), |t, x| t.affine(x[0], -1.5, 0.25)),
        ("broadcast_rows", vec![vec![4]], (-1.0, 1.0), |t, x| t.broadcast_rows(x[0], 3)),
        ("add_row", vec![m.clone(), vec![4]], (-1.0, 1.0), |t, x| t.add_row(x[0], x[1])),
        ("concat", vec![m.clone(), vec![3, 2]], (-1.0, 1.0), |t, x| t.concat(&[x[0], x[1]])),
        ("slice_cols", vec![m.clone()], (-1.0, 1.0), |t, x| t.slice_cols(x[0], 1, 3)),
        ("slice_rows", vec![m.clone()], (-1.0, 1.0), |t, x| t.slice_rows(x[0], 1, 3)),
        ("gather_rows", vec![m.clone()], (-1.0, 1.0), |t, x| t.gather_rows(x[0], &[2, 0, 2, 1])),
        ("reshape", vec![m.clone()], (-1.0, 1.0), |t, x| t.reshape(x[0], &[2, 6])),
        ("sum", vec![m.clone()], (-1.0, 1.0), |t, x| {
            let s = t.sum(x[0])?;
            t.square(s)
        }),
        ("mean", vec![m.clone()], (-1.0, 1.0), |t, x| {
            let s = t.mean(x[0])?;
            t.square(s)
        }),
        ("sum_axis0", vec![m.clone()], (-1.0, 1.0), |t, x| t.sum_axis(x[0], 0)),
        ("sum_axis1", vec![m.clone()], (-1.0, 1.0), |t, x| t.sum_axis(x[0], 1)),
        ("mean_axis", vec![m.clone()], (-1.0, 1.0), |t, x| t.mean_axis(x[0], 0)),
        ("exp", vec![m.clone()], (-1.0, 1.0), |t, x| t.exp(x[0])),
        ("ln", vec![m.clone()], (0.5, 2.0), |t, x| t.ln(x[0])),
        ("sigmoid", vec![m.clone()], (-2.0, 2.0), |t, x| t.sigmoid(x[0])),
        ("tanh", vec![m.clone()], (-2.0, 2.0), |t, x| t.tanh(x[0])),
        ("square", vec![m.clone()], (-1.0, 1.0), |t, x| t.square(x[0])),
        ("softmax", vec![m.clone()], (-2.0, 2.0), |t, x| t.softmax(x[0])),
        ("masked_softmax", vec![vec![2, 3]], (-2.0, 2.0), |t, x| {
            t.masked_softmax(x[0], &[true, false, true, true, true, false])
        }),
        ("log_softmax", vec![m.clone()], (-2.0, 2.0), |t, x| t.log_softmax(x[0], None)),
        ("masked_log_softmax", vec![vec![2, 3]], (-2.0, 2.0), |t, x| {
            t.log_softmax(x[0], Some(&[true, true, false, false, true, true]))
        }),
        ("l2_normalize", vec![m.clone()], (-1.0, 1.0), |t, x| t.l2_normalize(x[0])),
        ("block_attention", vec![vec![5, 4], vec![5, 4], vec![5, 6]], (-1.0, 1.0), |t, x| {
            t.block_attention(x[0], x[1], x[2], &[0, 3, 5], 2, 0.7)
        }),
    ]
}

fn record(failures: &mut Vec<String>, what: &str, seed: u64, outcome: Result<multitraj::numerics::GradCheckReport, multitraj::numerics::GradCheckError>) {
    match outcome {
        Ok(r) if r.pass => {}
        Ok(r) => failures.push(format!("{what} seed {seed}: rel err {:.3e} at {:?} ({} vs {})", r.max_rel_err, r.worst, r.analytic, r.numeric)),
        Err(e) => failures.push(format!("{what} seed {seed}: {e}")),
    }
}

pub fn check_primitives(seeds: u64) -> Vec<String> {
    let mut failures = Vec::new();
    for (name, shapes, (lo, hi), op) in primitives() {
        for seed in 0..seeds {
            let mut r = rng(seed);
            let inputs: Vec<Array> = shapes.iter().map(|s| random_array(s, lo, hi, &mut r)).collect();
            let outcome = grad_check(&inputs, H, TOL, |t, x| {
                let out = op(t, x)?;
                contract(t, out)
            });
            record(&mut failures, name, seed, outcome);
        }
    }
    failures
}

/// Replaces every parameter with uniform noise so that no path (zero gate
/// output, zero decoder output) is flat at the check point.
fn randomize(store: &mut ParamStore, seed: u64, spread: f64) {
    let mut r = rng(seed ^ 0x9e37);
    for (_, value) in store.iter_mut() {
        let shape = value.shape().to_vec();
        *value = random_array(&shape, -spread, spread, &mut r);
    }
}

/// Gradients w.r.t. all parameters and inputs of a function of a parameter
/// store plus extra leaves, appended after the parameters.
fn check_with_store(
    store: &ParamStore,
    extra: &[Array],
    f: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var, multitraj::Error>,
) -> Result<multitraj::numerics::GradCheckReport, multitraj::numerics::GradCheckError> {
    let mut inputs = store.values();
    let n = inputs.len();
    inputs.extend(extra.iter().cloned());
    grad_check(&inputs, H, TOL, |t, x| {
        let p = Bound::from_vars(store, &x[..n])?;
        f(t, &p, &x[n..]).map_err(|e| match e {
            multitraj::Error::Numerics(e) => e,
            other => NumericsError::Domain { op: "test closure", msg: other.to_string() },
        })
    })
}

pub fn check_adapter(seeds: u64) -> Vec<String> {
    let mut failures = Vec::new();
    let (dim, roles, domains) = (4, vec![0, 1, 1, 0, 1], vec![0, 0, 0, 2, 2]);
    let layout = Layout::new(&[3, 2]);
    for variant in [AdapterVariant::TokenWise, AdapterVariant::FeatureWise, AdapterVariant::NoGating] {
        let cfg = AdapterConfig { variant, heads: 2 };
        for seed in 0..seeds {
            let mut store = ParamStore::new();
            adapter::init(&mut store, &mut rng(seed), &cfg, dim, Role::ALL.len(), 3);
            randomize(&mut store, seed, 0.8);
            let z = random_array(&[5, dim], -1.0, 1.0, &mut rng(seed + 1000));
            let outcome = check_with_store(&store, &[z], |t, p, x| {
                let out = adapter::adapter_forward(t, p, x[0], &roles, &domains, &layout, &cfg)?;
                Ok(contract(t, out.adapted)?)
            });
            record(&mut failures, variant.as_str(), seed, outcome);
        }
    }
    failures
}

pub fn check_hierarchical(seeds: u64) -> Vec<String> {
    let mut failures = Vec::new();
    let roles = vec![0, 1, 1, 0, 1, 1];
    let domains = vec![0, 0, 0, 1, 1, 1];
    let dim = 4;
    for variant in [ContrastiveVariant::Hierarchical, ContrastiveVariant::RoleOnly, ContrastiveVariant::DomainOnly, ContrastiveVariant::SharedFeature] {
        for hidden in [None, Some(3)] {
            let cfg = ContrastiveConfig { variant, tau: 0.1, proj_dim: 3, head_hidden: hidden };
            for seed in 0..seeds {
                let mut store = ParamStore::new();
                contrastive::init(&mut store, &mut rng(seed), &cfg, dim);
                randomize(&mut store, seed, 0.8);
                let z = random_array(&[6, dim], -1.0, 1.0, &mut rng(seed + 2000));
                let outcome = check_with_store(&store, &[z], |t, p, x| {
                    Ok(contrastive::hierarchical_loss(t, p, x[0], &roles, &domains, &cfg, 0.7)?.loss)
                });
                let what = format!("{}{}", variant.as_str(), if hidden.is_some() { " (hidden layer)" } else { "" });
                record(&mut failures, &what, seed, outcome);
            }
        }
    }
    failures
}

/// A small model and a two-scene batch (one basketball, one soccer scene of
/// three agents over six steps) with a mixed task mask.
pub fn toy_pipeline(seed: u64, config: ModelConfig) -> (Model, Batch, TrainNoise) {
    let mut model = Model::new(config, multitraj::model::domain_vocabulary([]), 6, seed).unwrap();
    randomize(&mut model.params, seed, 0.5);
    let mut r = rng(seed + 3000);
    let scenes = [random_scene("basketball", 3, 6, &mut r), random_scene("soccer", 3, 6, &mut r)];
    let masks: [Vec<u8>; 2] = [
        vec![1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 0, 1, 1, 1, 0, 0, 0],
        vec![1, 1, 1, 1, 0, 0, 0, 1, 1, 0, 1, 1, 1, 0, 1, 0, 1, 0],
    ];
    let refs: Vec<&_> = scenes.iter().collect();
    let mask_refs: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
    let batch = Batch::new(&model, &refs, &mask_refs, &[0, 1]).unwrap();
    let noise = TrainNoise::draw(&model, &batch, 2, seed, &[7]);
    (model, batch, noise)
}

pub fn toy_config() -> ModelConfig {
    let mut c = ModelConfig { d_model: 8, d_z: 8, heads: 2, decoder_hidden: 8, ..ModelConfig::default() };
    c.adapter.heads = 2;
    c.contrastive.proj_dim = 4;
    c
}

pub fn check_total_loss(seeds: u64) -> Vec<String> {
    let mut failures = Vec::new();
    let weights = LossWeights::default();
    for seed in 0..seeds {
        let (model, batch, noise) = toy_pipeline(seed, toy_config());
        let outcome = check_with_store(&model.params, &[], |t, p, _| {
            let fwd = forward_train(t, p, &model, &batch, &noise, weights.lambda_c)?;
            Ok(total_loss(t, &fwd, &batch, &weights)?.total)
        });
        record(&mut failures, "total_loss", seed, outcome);
    }
    failures
}
