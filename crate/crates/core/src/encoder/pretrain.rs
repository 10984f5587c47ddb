//! Symmetric InfoNCE contrastive pretraining of the dual encoder.

use std::collections::BTreeMap;

use super::{EncoderConfig, ImageEncoder, ModelPair, PairTag, TextEncoder};
use crate::data::PairStream;
use crate::error::{Error, Result};
use crate::numcore::{DiffGraph, Tensor};
use crate::optim::Adam;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

/// Builds the symmetric InfoNCE loss over one batch of (tokens, image)
/// pairs: cosine-similarity logits at `tau_train`, cross-entropy in both
/// retrieval directions.
fn batch_loss_graph(
    g: &mut DiffGraph,
    text: &TextEncoder,
    image: &ImageEncoder,
    batch: &[(Vec<usize>, Tensor)],
    tau_train: f64,
    trainable: bool,
) -> Result<()> {
    let text_leaves = text.leaves(g, "text", trainable);
    let image_leaves = image.leaves(g, "image", trainable);

    let mut feat_rows = Vec::with_capacity(batch.len());
    for (tokens, _) in batch {
        feat_rows.push(text.encode_graph(g, &text_leaves, tokens, None)?.feature);
    }
    let txt = g.concat_rows(&feat_rows)?;
    let txt_n = g.row_l2_normalize(txt)?;

    let dim = image.input_dim();
    let mut xs = Tensor::zeros(vec![batch.len(), dim]);
    for (i, (_, x)) in batch.iter().enumerate() {
        xs.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(x.data());
    }
    let input = g.constant(xs);
    let img = image.encode_graph(g, &image_leaves, input)?;
    let img_n = g.row_l2_normalize(img)?;

    let txt_t = g.transpose(txt_n);
    let sims = g.matmul(img_n, txt_t)?;
    let logits = g.scale(sims, 1.0 / tau_train);
    let labels: Vec<usize> = (0..batch.len()).collect();
    let ce_i2t = g.cross_entropy_mean(logits, labels.clone())?;
    let logits_t = g.transpose(logits);
    let ce_t2i = g.cross_entropy_mean(logits_t, labels)?;
    let sum = g.add(ce_i2t, ce_t2i)?;
    let loss = g.scale(sum, 0.5);
    g.set_output(loss);
    Ok(())
}

/// Runs `epochs` of contrastive training in place, updating both encoders
/// with Adam. `lr_scale` maps a parameter name to a learning-rate multiplier
/// (the upgrade simulator uses this for its depth profile).
#[allow(clippy::too_many_arguments)]
pub fn train_contrastive(
    text: &mut TextEncoder,
    image: &mut ImageEncoder,
    stream: &PairStream,
    cfg: &PretrainConfig,
    tau_train: f64,
    data_rng: &mut Rng,
    adam: &mut Adam,
    lr_scale: &dyn Fn(&str) -> f64,
) -> Result<()> {
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        let pairs = stream.epoch(data_rng);
        for batch in pairs.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue; // InfoNCE needs at least one negative
            }
            let mut g = DiffGraph::new();
            batch_loss_graph(&mut g, text, image, batch, tau_train, true)?;
            g.forward()?;
            let loss = g.output_value()?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("contrastive loss diverged to {loss}"),
                });
            }
            g.backward()?;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for name in g.trainable_names() {
                if let Some(grad) = g.grad(&name) {
                    grads.insert(name, grad);
                }
            }
            adam.advance();
            text.for_each_param_mut(|name, t| {
                if let Some(grad) = grads.get(&name) {
                    adam.apply(&name, t, grad, lr_scale(&name));
                }
            });
            image.for_each_param_mut(|name, t| {
                if let Some(grad) = grads.get(&name) {
                    adam.apply(&name, t, grad, lr_scale(&name));
                }
            });
            step += 1;
        }
    }
    Ok(())
}

/// Trains a base [`ModelPair`] from scratch on the stream.
pub fn contrastive_pretrain(
    cfg: &EncoderConfig,
    stream: &PairStream,
    train: &PretrainConfig,
    seed: u64,
) -> Result<ModelPair> {
    cfg.validate()?;
    if stream.world.image_dim != cfg.image_dim {
        return Err(Error::Config(format!(
            "stream image_dim {} != encoder image_dim {}",
            stream.world.image_dim, cfg.image_dim
        )));
    }
    if stream.world.class_token_start + stream.world.class_token_count > cfg.vocab_size {
        return Err(Error::Config("class-token budget exceeds vocabulary".into()));
    }
    let mut init_rng = Rng::for_domain("encoder-init", seed);
    let mut text = TextEncoder::init(cfg, &mut init_rng);
    let mut image = ImageEncoder::init(cfg, &mut init_rng);
    let mut data_rng = Rng::for_domain("pretrain-data", seed);
    let mut adam = Adam::new(train.lr);
    train_contrastive(
        &mut text,
        &mut image,
        stream,
        train,
        cfg.tau_train,
        &mut data_rng,
        &mut adam,
        &|_| 1.0,
    )?;
    Ok(ModelPair {
        text,
        image,
        tag: PairTag::Base,
        tau: cfg.tau,
        tau_train: cfg.tau_train,
        world: stream.world.clone(),
        config: cfg.clone(),
        seed,
    })
}

/// Mean of image-to-text and text-to-image top-1 retrieval accuracy over a
/// held-out batch of `n` distinct-class pairs drawn at image noise `sigma`.
pub fn retrieval_accuracy(pair: &ModelPair, n: usize, sigma: f64, seed: u64) -> Result<f64> {
    let world = &pair.world;
    let n = n.min(world.class_token_count);
    let mut rng = Rng::for_domain("retrieval-eval", seed);
    let picks = rng.sample_indices(world.class_token_count, n);

    let mut g = DiffGraph::new();
    let leaves = pair.text.leaves(&mut g, "text", false);
    let mut txt_rows = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for &p in &picks {
        let tok = world.class_token_start + p;
        let mut tokens = world.template.clone();
        tokens.push(tok);
        txt_rows.push(pair.text.encode_graph(&mut g, &leaves, &tokens, None)?.feature);
        let mut x = crate::data::prototype(tok, world.image_dim).data().to_vec();
        for v in &mut x {
            *v += sigma * rng.normal();
        }
        images.push(Tensor::new(vec![world.image_dim], x).expect("shape"));
    }
    let stacked = g.concat_rows(&txt_rows)?;
    let txt_n = g.row_l2_normalize(stacked)?;
    let txt = g.value(txt_n).clone();

    let img_feats = pair.image.features(&images)?;
    let mut img_n = Tensor::zeros(vec![n, txt.cols()]);
    crate::numcore::kernels::row_l2_normalize(
        img_feats.data(),
        n,
        img_feats.cols(),
        img_n.data_mut(),
    );

    let mut hit_i2t = 0usize;
    let mut hit_t2i = 0usize;
    for i in 0..n {
        let mut best_j = 0;
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            let s: f64 = img_n.row(i).iter().zip(txt.row(j)).map(|(a, b)| a * b).sum();
            if s > best {
                best = s;
                best_j = j;
            }
        }
        if best_j == i {
            hit_i2t += 1;
        }
        let mut best_i = 0;
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            let s: f64 = txt.row(i).iter().zip(img_n.row(j)).map(|(a, b)| a * b).sum();
            if s > best {
                best = s;
                best_i = j;
            }
        }
        if best_i == i {
            hit_t2i += 1;
        }
    }
    Ok((hit_i2t + hit_t2i) as f64 / (2 * n) as f64)
}
