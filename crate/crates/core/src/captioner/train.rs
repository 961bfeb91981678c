use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Captioner, DecodeMode, Discriminator};
use super::objective::{returns_to_go, sequence_terms, token_loss, ImageConcepts, RewardWeights};
use crate::dataio::{SceneImage, TokenId, Vocabulary, BOS, EOS};
use crate::error::{contract, Error, Result};
use crate::nn::{Adam, Gradients, Graph, Tensor};
use crate::pseudo::unrecognized_in;
use crate::rng;

const GRAD_CLIP: f64 = 5.0;
const BCE_EPS: f64 = 1e-7;
const MIN_PROB: f64 = 1e-6;

/// Wrap a tokenised corpus sentence as `<bos> … <eos>`, truncated to `max_len`.
pub fn frame_sentence(ids: &[TokenId], max_len: usize) -> Vec<TokenId> {
    let mut s = Vec::with_capacity(ids.len() + 2);
    s.push(BOS);
    s.extend_from_slice(ids);
    s.push(EOS);
    s.truncate(max_len.max(2));
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnpairedTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_len: usize,
    /// Language-model epochs on the corpus before the unpaired stage.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub discriminator_lr: f64,
    pub adversarial_weight: f64,
    pub baseline_decay: f64,
    pub weights: RewardWeights,
    /// Images (from the start of the split) used to track the reward curve.
    pub probe_size: usize,
}

impl Default for UnpairedTraining {
    fn default() -> Self {
        UnpairedTraining {
            epochs: 10,
            lr: 1e-5,
            batch_size: 256,
            seed: 0,
            max_len: 16,
            pretrain_epochs: 1,
            pretrain_lr: 1e-3,
            discriminator_lr: 1e-5,
            adversarial_weight: 1.0,
            baseline_decay: 0.9,
            weights: RewardWeights::default(),
            probe_size: 64,
        }
    }
}

/// Per-position moving-average baseline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Baseline {
    pub values: Vec<f64>,
    pub decay: f64,
}

impl Baseline {
    pub fn new(decay: f64) -> Self {
        Baseline { values: Vec::new(), decay }
    }

    pub fn get(&self, t: usize) -> f64 {
        self.values.get(t).copied().unwrap_or(0.0)
    }

    /// Fold in the batch of returns; positions a sequence does not reach are left out of that position's mean.
    pub fn update(&mut self, returns: &[Vec<f64>]) {
        let len = returns.iter().map(Vec::len).max().unwrap_or(0);
        if self.values.len() < len {
            self.values.resize(len, 0.0);
        }
        for t in 0..len {
            let xs: Vec<f64> = returns.iter().filter_map(|r| r.get(t).copied()).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            self.values[t] = self.decay * self.values[t] + (1.0 - self.decay) * mean;
        }
    }
}

/// Teacher-forced language-model pretraining on corpus sentences with a zero image feature.
/// Returns the mean per-token cross-entropy of each epoch.
pub fn pretrain_decoder(
    model: &mut Captioner,
    corpus: &[Vec<TokenId>],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    contract!(!corpus.is_empty(), "language-model pretraining needs a non-empty corpus");
    let mut opt = Adam::new(&model.params, lr);
    let zero = vec![0.0; model.config.latent];
    let bs = batch_size.clamp(1, corpus.len());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng::stream(seed, "lm-shuffle", epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let mut grads = Gradients::zeros_like(&model.params);
            let mut tokens = 0usize;
            for &i in chunk {
                let mut g = Graph::new(&model.params);
                let f = g.input(Tensor::vector(zero.clone()));
                let lps = model.teacher_forced(&mut g, f, &corpus[i]);
                if lps.is_empty() {
                    continue;
                }
                let terms: Vec<_> = lps.iter().map(|&v| (v, -1.0)).collect();
                let loss = g.weighted_sum(&terms);
                sum += g.value(loss).item();
                tokens += lps.len();
                grads.accumulate(&g.backward(loss).params);
            }
            if tokens == 0 {
                continue;
            }
            count += tokens;
            grads.scale(1.0 / tokens as f64);
            grads.clip_norm(GRAD_CLIP);
            opt.step(&mut model.params, &grads)?;
        }
        let mean = sum / count.max(1) as f64;
        log::debug!("lm epoch {epoch}: cross-entropy {mean:.4}");
        history.push(mean);
    }
    Ok(history)
}

/// Mean binary cross-entropy of the discriminator on real and generated sentences, with gradients.
fn discriminator_grads(d: &Discriminator, real: &[&[TokenId]], fake: &[&[TokenId]]) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(&d.params);
    let mut loss = 0.0;
    let n = (real.len() + fake.len()).max(1) as f64;
    for (set, y) in [(real, 1.0), (fake, 0.0)] {
        for s in set {
            let mut g = Graph::new(&d.params);
            let p = d.forward(&mut g, s)?;
            let l = g.bce_prob(p, &[y], BCE_EPS);
            loss += g.value(l).item();
            grads.accumulate(&g.backward(l).params);
        }
    }
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Train the discriminator alone for one pass, real sentences against `fake`.
pub fn discriminator_step(
    d: &mut Discriminator,
    opt: &mut Adam,
    real: &[&[TokenId]],
    fake: &[&[TokenId]],
) -> Result<f64> {
    let (loss, mut grads) = discriminator_grads(d, real, fake)?;
    grads.clip_norm(GRAD_CLIP);
    opt.step(&mut d.params, &grads)?;
    Ok(loss)
}

/// Everything the unpaired stage produces.
#[derive(Debug, Clone)]
pub struct UnpairedOutcome {
    pub captioner: Captioner,
    pub discriminator: Discriminator,
    /// Mean per-token cross-entropy of each pretraining epoch.
    pub pretrain_curve: Vec<f64>,
    /// Probe-set mean `Σ_t R_t` of sampled captions before training and after every epoch.
    pub reward_curve: Vec<f64>,
    /// Mean unrecognised-object count of the captions sampled during each epoch.
    pub unrecognized_curve: Vec<f64>,
}

/// Generator-side training inputs, borrowed for the duration of a run.
pub struct UnpairedData<'a> {
    pub images: &'a [SceneImage],
    pub concepts: &'a [ImageConcepts],
    /// Tokenised corpus sentences without framing tokens.
    pub corpus: &'a [Vec<TokenId>],
    pub vocab: &'a Vocabulary,
}

/// Mean `Σ_t R_t` of sampled captions over the probe images, with a fixed sampling stream per image.
pub fn probe_reward(
    model: &Captioner,
    data: &UnpairedData,
    pooled: &[Option<Vec<f64>>],
    probe: &[usize],
    training: &UnpairedTraining,
) -> Result<f64> {
    let mut reward = 0.0;
    for &i in probe {
        let mut g = Graph::new(&model.params);
        let f = model.encode_node(&mut g, &data.images[i], pooled[i].as_deref())?;
        let mut r = rng::stream(training.seed, "probe-sample", i as u64);
        let (tokens, _) = model.rollout(&mut g, f, DecodeMode::Sample, training.max_len, &mut r)?;
        reward += sequence_terms(&tokens, &data.concepts[i], data.vocab, &training.weights)
            .iter()
            .map(|(r, _)| r)
            .sum::<f64>();
    }
    Ok(reward / probe.len().max(1) as f64)
}

/// Unpaired training: optional language-model pretraining, then alternating
/// policy-gradient generator updates (concept reward, unrecognised-object
/// penalty, adversarial reward) and discriminator updates.
pub fn train_unpaired(
    mut model: Captioner,
    mut disc: Discriminator,
    data: &UnpairedData,
    training: &UnpairedTraining,
) -> Result<UnpairedOutcome> {
    let n = data.images.len();
    if n == 0 {
        return Err(Error::Config("cannot train the captioner on an empty split".into()));
    }
    contract!(data.concepts.len() == n, "images and concept sets differ in length");
    contract!(!data.corpus.is_empty(), "unpaired training needs a sentence corpus");
    contract!(training.weights.is_valid(), "reward weights must be finite and non-negative");
    if training.max_len < 2 {
        return Err(Error::Config(format!("max_len must be at least 2, got {}", training.max_len)));
    }
    if data.concepts.iter().all(|c| c.instances.is_empty() && c.relations.is_empty()) {
        log::warn!("no image has any recognised concept; the concept reward is vacuous");
    }
    let framed: Vec<Vec<TokenId>> = data.corpus.iter().map(|s| frame_sentence(s, training.max_len)).collect();
    let pretrain_curve = pretrain_decoder(
        &mut model,
        &framed,
        training.pretrain_epochs,
        training.pretrain_lr,
        training.batch_size,
        training.seed,
    )?;

    let pooled: Vec<Option<Vec<f64>>> = if model.config.freeze_encoder {
        data.images.iter().map(|im| model.pooled(im).map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; n]
    };
    let probe_ids: Vec<usize> = (0..training.probe_size.min(n)).collect();
    let mut reward_curve = vec![probe_reward(&model, data, &pooled, &probe_ids, training)?];
    let mut unrecognized_curve = Vec::with_capacity(training.epochs);

    let mut gen_opt = Adam::new(&model.params, training.lr);
    let mut disc_opt = Adam::new(&disc.params, training.discriminator_lr);
    let mut baseline = Baseline::new(training.baseline_decay);
    let bs = training.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut real_rng = rng::stream(training.seed, "real-pick", 0);
    for epoch in 0..training.epochs {
        order.shuffle(&mut rng::stream(training.seed, "uic-shuffle", epoch as u64));
        let mut unrecognized = 0usize;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let mut grads = Gradients::zeros_like(&model.params);
            let mut fakes: Vec<Vec<TokenId>> = Vec::with_capacity(chunk.len());
            let mut batch_returns = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut g = Graph::new(&model.params);
                let f = model.encode_node(&mut g, &data.images[i], pooled[i].as_deref())?;
                let mut r = rng::stream(training.seed, &format!("uic-sample-{epoch}-{b}"), i as u64);
                let (tokens, lps) = model.rollout(&mut g, f, DecodeMode::Sample, training.max_len, &mut r)?;
                let mut rewards: Vec<f64> = sequence_terms(&tokens, &data.concepts[i], data.vocab, &training.weights)
                    .iter()
                    .map(|&(rw, u)| -token_loss(rw, u))
                    .collect();
                if training.adversarial_weight > 0.0 {
                    let d = disc.score(&tokens)?;
                    *rewards.last_mut().expect("at least one token") += training.adversarial_weight * d.max(MIN_PROB).ln();
                }
                let returns = returns_to_go(&rewards);
                let terms: Vec<_> = lps
                    .iter()
                    .enumerate()
                    .map(|(t, &lp)| (lp, -(returns[t] - baseline.get(t))))
                    .collect();
                let loss = g.weighted_sum(&terms);
                grads.accumulate(&g.backward(loss).params);
                batch_returns.push(returns);
                unrecognized += unrecognized_in(&tokens, &data.concepts[i].instances, data.vocab);
                fakes.push(tokens);
            }
            baseline.update(&batch_returns);
            grads.scale(1.0 / chunk.len() as f64);
            grads.clip_norm(GRAD_CLIP);
            gen_opt.step(&mut model.params, &grads)?;

            if training.adversarial_weight > 0.0 {
                let real: Vec<&[TokenId]> = (0..chunk.len())
                    .map(|_| framed[real_rng.gen_range(0..framed.len())].as_slice())
                    .collect();
                let fake: Vec<&[TokenId]> = fakes.iter().map(Vec::as_slice).collect();
                discriminator_step(&mut disc, &mut disc_opt, &real, &fake)?;
            }
        }
        let r = probe_reward(&model, data, &pooled, &probe_ids, training)?;
        let u = unrecognized as f64 / n as f64;
        log::debug!("uic epoch {epoch}: probe reward {r:.4}, unrecognised {u:.3}");
        reward_curve.push(r);
        unrecognized_curve.push(u);
    }
    Ok(UnpairedOutcome {
        captioner: model,
        discriminator: disc,
        pretrain_curve,
        reward_curve,
        unrecognized_curve,
    })
}

/// Greedy captions for `images`, in order.
pub fn caption_images(model: &Captioner, images: &[SceneImage], max_len: usize) -> Result<Vec<super::TokenSequence>> {
    images
        .iter()
        .map(|im| {
            let f = model.encode_image(im)?;
            model.decode(&f, DecodeMode::Greedy, max_len, 0)
        })
        .collect()
}
