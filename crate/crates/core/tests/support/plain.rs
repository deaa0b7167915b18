//! A CVAE assembled only from the backbone pieces (no adapter, no
//! contrastive heads) and a training loop over it that follows the same
//! seeding and batching rules as `fit`.

use multitraj::data::{make_mask, Dataset};
use multitraj::losses::{elbo_loss, rec_loss, wta_loss, LossWeights};
use multitraj::model::{condition, decode, domain_vocabulary, encode, posterior, reparameterize, Batch, Model, TrainNoise};
use multitraj::numerics::{Tape, Var};
use multitraj::params::Bound;
use multitraj::seed::{self, stream};
use multitraj::train::{adam_step, lr_schedule, normalized, LogRow, OptimizerState, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;

pub struct PlainLoss {
    pub total: Var,
    pub elbo: f64,
    pub rec: f64,
    pub wta: f64,
}

pub fn plain_loss(tape: &mut Tape, p: &Bound, model: &Model, batch: &Batch, noise: &TrainNoise, w: &LossWeights) -> multitraj::Result<PlainLoss> {
    let c = &model.config;
    let h = encode(tape, p, batch, c.d_model, c.heads)?;
    let anchor = c.anchor.then(|| tape.constant(batch.anchor.clone()));
    let post = posterior(tape, p, h)?;
    let z = reparameterize(tape, post.mu, post.sigma, &noise.posterior)?;
    let cond = condition(tape, p, h)?;
    let recon = decode(tape, p, z, cond, anchor)?;

    let r = batch.rows();
    let k = noise.prior.rows() / r;
    let index: Vec<usize> = (0..k).flat_map(|_| 0..r).collect();
    let eps = tape.constant(noise.prior.clone());
    let cond_k = tape.gather_rows(cond, &index)?;
    let anchor_k = match anchor {
        Some(a) => Some(tape.gather_rows(a, &index)?),
        None => None,
    };
    let samples = decode(tape, p, eps, cond_k, anchor_k)?;

    let (elbo, _) = elbo_loss(tape, recon, batch, post.mu, post.sigma, w.lambda1)?;
    let rec = rec_loss(tape, recon, batch)?;
    let (wta, _) = wta_loss(tape, samples, batch, k)?;
    let a = tape.scale(rec, w.lambda2)?;
    let total = tape.add(elbo, a)?;
    let b = tape.scale(wta, w.lambda3)?;
    let total = tape.add(total, b)?;
    let v = |x: Var| tape.value(x).item();
    Ok(PlainLoss { total, elbo: v(elbo), rec: v(rec), wta: v(wta) })
}

/// Trains the plain CVAE for `config.epochs` epochs and returns its log and
/// final model.
pub fn plain_fit(dataset: &Dataset, config: &TrainConfig) -> multitraj::Result<(Model, Vec<LogRow>)> {
    let data = normalized(dataset)?;
    let cfg = config.resolve(&data)?;
    let steps = data.steps().unwrap();
    let mut model = Model::new(cfg.model.clone(), domain_vocabulary(data.domains().iter().map(String::as_str)), steps, cfg.seed)?;
    let mut opt = OptimizerState::new(&model.params);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, &cfg);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let (mut elbo, mut rec, mut wta, mut total) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let scenes: Vec<_> = chunk.iter().map(|&i| &data.sequences[i]).collect();
            let masks: Vec<Vec<u8>> = chunk
                .iter()
                .map(|&i| {
                    let path = [stream::TRAIN_MASK, epoch as u64, i as u64];
                    let pick = seed::rng_for(cfg.seed, &path).random_range(0..cfg.train_masks.len());
                    let spec = cfg.train_masks[pick].clone().with_seed(seed::derive_seed(cfg.seed, &path));
                    make_mask(&spec, data.sequences[i].n_agents(), steps).unwrap()
                })
                .collect();
            let refs: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let batch = Batch::new(&model, &scenes, &refs, &ids)?;
            let noise = TrainNoise::draw(&model, &batch, cfg.k_train, cfg.seed, &[stream::NOISE, epoch as u64]);
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let loss = plain_loss(&mut tape, &p, &model, &batch, &noise, &cfg.weights)?;
            let grads = p.collect(&tape.backward(loss.total)?);
            adam_step(&mut model.params, &grads, &mut opt, lr)?;
            let w = chunk.len() as f64;
            elbo += w * loss.elbo;
            rec += w * loss.rec;
            wta += w * loss.wta;
            total += w * tape.value(loss.total).item();
        }
        let n = data.len() as f64;
        log.push(LogRow { epoch: epoch + 1, lr, elbo: elbo / n, rec: rec / n, wta: wta / n, hier: 0.0, total: total / n });
    }
    Ok((model, log))
}
