use std::cell::Cell;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{ImageLevelLabels, SceneImage};
use crate::error::{contract, Error, Result};
use crate::nn::{sigmoid, softplus, Adam, Checkpoint, Conv1x1, Conv3x3, Gradients, Graph, Linear, ParamSet, Tensor, Var};
use crate::rng;

pub const CHECKPOINT_KIND: &str = "wsor-classifier";

thread_local! {
    static INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of classifier forward passes run on this thread so far.
pub fn invocations() -> u64 {
    INVOCATIONS.with(Cell::get)
}

/// `mean_c −[y log σ(x) + (1 − y) log σ(−x)]`.
pub fn multi_label_soft_margin_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    contract!(
        logits.len() == targets.len(),
        "{} logits but {} targets",
        logits.len(),
        targets.len()
    );
    contract!(!logits.is_empty(), "no classes");
    contract!(
        targets.iter().all(|&t| t == 0.0 || t == 1.0),
        "targets must be 0 or 1"
    );
    let s: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
        .sum();
    Ok(s / logits.len() as f64)
}

/// Feature tensors `[C, H, W]` at four strictly decreasing resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub scales: Vec<Tensor>,
}

impl FeatureMaps {
    pub fn coarsest(&self) -> &Tensor {
        self.scales.last().expect("four scales")
    }
}

/// Spatial kernel of one trunk block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrunkConv {
    Spatial(Conv3x3),
    Pointwise(Conv1x1),
}

impl TrunkConv {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            TrunkConv::Spatial(c) => c.forward(g, x),
            TrunkConv::Pointwise(c) => c.forward(g, x),
        }
    }
}

/// Four conv blocks; all but the first halve the resolution before convolving.
/// Blocks from `pointwise_from` on use 1×1 kernels, so a coarse cell only sees its own region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trunk {
    pub convs: [TrunkConv; 4],
}

impl Trunk {
    pub fn new<R: rand::Rng>(
        params: &mut ParamSet,
        prefix: &str,
        channels: [usize; 4],
        pointwise_from: usize,
        rng: &mut R,
    ) -> Self {
        let mut c_in = 3;
        let convs = std::array::from_fn(|i| {
            let name = format!("{prefix}.{i}");
            let c = if i >= pointwise_from {
                TrunkConv::Pointwise(Conv1x1::new(params, &name, c_in, channels[i], rng))
            } else {
                TrunkConv::Spatial(Conv3x3::new(params, &name, c_in, channels[i], rng))
            };
            c_in = channels[i];
            c
        });
        Trunk { convs }
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> [Var; 4] {
        let mut h = image;
        std::array::from_fn(|i| {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            let c = self.convs[i].forward(g, h);
            h = g.relu(c);
            h
        })
    }
}

fn default_pointwise_from() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub channels: [usize; 4],
    pub num_categories: usize,
    #[serde(default = "default_pointwise_from")]
    pub pointwise_from: usize,
}

impl ClassifierConfig {
    pub fn new(channels: [usize; 4], num_categories: usize) -> Self {
        ClassifierConfig {
            channels,
            num_categories,
            pointwise_from: default_pointwise_from(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            epochs: 20,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Multi-label classifier: conv trunk, global average pooling, linear head `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectClassifier {
    pub config: ClassifierConfig,
    pub params: ParamSet,
    pub trunk: Trunk,
    pub head: Linear,
}

impl ObjectClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.num_categories == 0 || config.channels.contains(&0) {
            return Err(Error::Config("classifier needs categories and non-zero channels".into()));
        }
        let mut rng = rng::stream(seed, "wsor-init", 0);
        let mut params = ParamSet::new();
        let trunk = Trunk::new(&mut params, "trunk", config.channels, config.pointwise_from, &mut rng);
        let head = Linear::new(&mut params, "head", config.channels[3], config.num_categories, &mut rng);
        Ok(ObjectClassifier {
            config,
            params,
            trunk,
            head,
        })
    }

    /// `φ` as a `[categories, channels]` tensor.
    pub fn phi(&self) -> &Tensor {
        self.params.get(self.head.w)
    }

    fn forward(&self, g: &mut Graph, image: &Tensor) -> ([Var; 4], Var) {
        INVOCATIONS.with(|c| c.set(c.get() + 1));
        let x = g.input(image.clone());
        let feats = self.trunk.forward(g, x);
        let pooled = g.global_avg_pool(feats[3]);
        let logits = self.head.forward(g, pooled);
        (feats, logits)
    }

    pub fn features(&self, image: &SceneImage) -> Result<FeatureMaps> {
        Ok(self.features_and_logits(image)?.0)
    }

    pub fn features_and_logits(&self, image: &SceneImage) -> Result<(FeatureMaps, Vec<f64>)> {
        let h = image.height();
        contract!(
            h == image.width() && h.is_multiple_of(8) && h >= 8,
            "classifier expects square images with side divisible by 8, got {}x{}",
            h,
            image.width()
        );
        let mut g = Graph::new(&self.params);
        let (feats, logits) = self.forward(&mut g, &image.to_tensor());
        let scales = feats.iter().map(|&v| g.value(v).clone()).collect();
        Ok((FeatureMaps { scales }, g.value(logits).data().to_vec()))
    }

    pub fn logits(&self, image: &SceneImage) -> Result<Vec<f64>> {
        Ok(self.features_and_logits(image)?.1)
    }

    /// Loss and parameter gradients for one image.
    pub fn loss_and_grads(&self, image: &Tensor, targets: &[f64]) -> (f64, Gradients) {
        let mut g = Graph::new(&self.params);
        let (_, logits) = self.forward(&mut g, image);
        let loss = g.soft_margin(logits, targets);
        (g.value(loss).item(), g.backward(loss).params)
    }

    pub fn mean_loss(&self, batch: &[(Tensor, Vec<f64>)]) -> f64 {
        batch
            .iter()
            .map(|(x, y)| {
                let mut g = Graph::new(&self.params);
                let (_, logits) = self.forward(&mut g, x);
                let l = g.soft_margin(logits, y);
                g.value(l).item()
            })
            .sum::<f64>()
            / batch.len().max(1) as f64
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let meta = serde_json::to_value(&self.config).expect("serializable config");
        Checkpoint::new(CHECKPOINT_KIND, seed, config_hash, meta, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND, origin)?;
        let config: ClassifierConfig =
            serde_json::from_value(ck.header.meta.clone()).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut model = ObjectClassifier::new(config, 0)?;
        model
            .params
            .adopt(ck.params.clone())
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

pub fn targets(labels: &ImageLevelLabels, num_categories: usize) -> Vec<f64> {
    (0..num_categories)
        .map(|c| if labels.objects.contains(&c) { 1.0 } else { 0.0 })
        .collect()
}

/// Classifier plus optimiser state, for step-wise training.
pub struct ClassifierTrainer {
    pub model: ObjectClassifier,
    opt: Adam,
}

impl ClassifierTrainer {
    pub fn new(model: ObjectClassifier, lr: f64) -> Self {
        let opt = Adam::new(&model.params, lr);
        ClassifierTrainer { model, opt }
    }

    /// One optimiser step on the mean loss of `batch`; returns that loss.
    pub fn step(&mut self, batch: &[(&Tensor, &[f64])]) -> Result<f64> {
        let mut total = Gradients::zeros_like(&self.model.params);
        let mut loss = 0.0;
        for (x, y) in batch {
            let (l, g) = self.model.loss_and_grads(x, y);
            loss += l;
            total.accumulate(&g);
        }
        let n = batch.len().max(1) as f64;
        total.scale(1.0 / n);
        self.opt.step(&mut self.model.params, &total)?;
        Ok(loss / n)
    }
}

/// Train on image-level object labels only. Returns the model and the mean loss of each epoch.
pub fn train_classifier(
    images: &[SceneImage],
    labels: &[ImageLevelLabels],
    config: ClassifierConfig,
    training: &ClassifierTraining,
) -> Result<(ObjectClassifier, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::Config("cannot train the object classifier on an empty split".into()));
    }
    contract!(images.len() == labels.len(), "images and labels differ in length");
    let k = config.num_categories;
    let data: Vec<(Tensor, Vec<f64>)> = images
        .iter()
        .zip(labels)
        .map(|(im, l)| (im.to_tensor(), targets(l, k)))
        .collect();
    let model = ObjectClassifier::new(config, training.seed)?;
    let mut trainer = ClassifierTrainer::new(model, training.lr);
    let bs = training.batch_size.clamp(1, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(training.epochs);
    for epoch in 0..training.epochs {
        order.shuffle(&mut rng::stream(training.seed, "wsor-shuffle", epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let batch: Vec<(&Tensor, &[f64])> = chunk.iter().map(|&i| (&data[i].0, data[i].1.as_slice())).collect();
            sum += trainer.step(&batch)? * chunk.len() as f64;
        }
        let mean = sum / data.len() as f64;
        log::debug!("wsor epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    Ok((trainer.model, history))
}

/// Categories whose logit is strictly above `threshold`, with their sigmoid scores, best first.
pub fn select_objects(logits: &[f64], threshold: f64) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > threshold)
        .map(|(c, &l)| (c, sigmoid(l)))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

pub fn predict_objects(image: &SceneImage, model: &ObjectClassifier, threshold: f64) -> Result<Vec<(usize, f64)>> {
    Ok(select_objects(&model.logits(image)?, threshold))
}

/// Average precision of one class: mean precision at the rank of every positive.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in idx.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}
