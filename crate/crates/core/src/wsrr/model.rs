use std::cell::Cell;
use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::graph::{build_graph, InstanceGraph, EDGE_DIM, SPATIAL_DIM};
use crate::dataio::{CategoryId, ImageLevelLabels};
use crate::error::{contract, Error, Result};
use crate::nn::{Adam, Checkpoint, Gradients, Graph, Linear, ParamSet, Tensor, Var};
use crate::rng;
use crate::wsor::Recognition;

pub const CHECKPOINT_KIND: &str = "wsrr-gnn";
/// Default confidence a relation must exceed to be reported.
pub const DEFAULT_THRESHOLD: f64 = 0.7;
const BCE_EPS: f64 = 1e-7;
const VAR_FLOOR: f64 = 1e-8;

thread_local! {
    static INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of relation-network forward passes run on this thread so far.
pub fn invocations() -> u64 {
    INVOCATIONS.with(Cell::get)
}

/// `(h − mean) / sqrt(var)` elementwise.
pub fn bn_fixed(h: &[f64], mean: &[f64], var: &[f64]) -> Result<Vec<f64>> {
    contract!(
        h.len() == mean.len() && h.len() == var.len(),
        "bn_fixed: lengths {} / {} / {} differ",
        h.len(),
        mean.len(),
        var.len()
    );
    contract!(var.iter().all(|&v| v > 0.0), "bn_fixed: variance must be positive");
    Ok(h.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| (x - m) / v.sqrt())
        .collect())
}

/// `inner(h) + h`.
pub fn residual_block(g: &mut Graph, h: Var, inner: impl FnOnce(&mut Graph, Var) -> Var) -> Result<Var> {
    let f = inner(g, h);
    contract!(
        g.value(f).shape() == g.value(h).shape(),
        "residual inner transform changed the shape from {:?} to {:?}",
        g.value(h).shape(),
        g.value(f).shape()
    );
    Ok(g.add(f, h))
}

/// Image-level score per relation: the maximum over edges of that class's
/// softmax probability. Each row holds `num_relations` relation classes followed
/// by the no-relation class. No edges gives all zeros.
pub fn aggregate_edges(edge_probs: &[Vec<f64>], num_relations: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_relations];
    for p in edge_probs {
        for (o, &v) in out.iter_mut().zip(p) {
            *o = f64::max(*o, v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationPrediction {
    pub relation: CategoryId,
    pub score: f64,
}

pub type RelationSet = Vec<RelationPrediction>;

/// Relations scoring strictly above `threshold`, best first.
pub fn select_relations(scores: &[f64], threshold: f64) -> RelationSet {
    let mut out: RelationSet = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(relation, &score)| RelationPrediction { relation, score })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.relation.cmp(&b.relation)));
    out
}

/// Micro-averaged F1 of predicted against labelled relation sets.
pub fn relation_f1(predicted: &[BTreeSet<CategoryId>], gold: &[BTreeSet<CategoryId>]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fneg += g.len() - hit;
    }
    if tp == 0 {
        return if fp == 0 && fneg == 0 { 1.0 } else { 0.0 };
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Fixed normalisation statistics for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(n: usize) -> Self {
        BnStats {
            mean: vec![0.0; n],
            var: vec![1.0; n],
        }
    }

    /// Population mean and variance of `rows`, variance floored at a tiny positive value.
    pub fn estimate(rows: &[Vec<f64>]) -> Result<Self> {
        contract!(!rows.is_empty(), "cannot estimate statistics from no rows");
        let n = rows[0].len();
        contract!(rows.iter().all(|r| r.len() == n), "rows differ in length");
        let count = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / count).max(VAR_FLOOR));
        Ok(BnStats { mean, var })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub appearance_dim: usize,
    pub num_relations: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub batch_norm: bool,
    pub residual: bool,
}

impl GnnConfig {
    /// Batch-normalised residual network with the default sizes.
    pub fn new(appearance_dim: usize, num_relations: usize) -> Self {
        GnnConfig {
            appearance_dim,
            num_relations,
            node_dim: 32,
            edge_dim: 32,
            hidden: 128,
            blocks: 3,
            batch_norm: true,
            residual: true,
        }
    }

    /// Same sizes without normalisation and shortcuts.
    pub fn plain(self) -> Self {
        GnnConfig {
            batch_norm: false,
            residual: false,
            ..self
        }
    }

    fn pair_dim(&self) -> usize {
        2 * self.node_dim + self.edge_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GnnTraining {
    fn default() -> Self {
        GnnTraining {
            epochs: 60,
            lr: 1e-3,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Edge classifier over instance graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel {
    pub config: GnnConfig,
    pub params: ParamSet,
    pub node_tf: Linear,
    pub edge_tf: Linear,
    pub input: Linear,
    pub blocks: Vec<Linear>,
    pub classifier: Linear,
    /// Statistics for the pair input and each block input; identity until warm-up.
    pub stats: Vec<BnStats>,
}

impl RelationModel {
    pub fn new(config: GnnConfig, seed: u64) -> Result<Self> {
        if config.num_relations == 0 || config.hidden == 0 || config.node_dim == 0 || config.edge_dim == 0 {
            return Err(Error::Config("relation network needs relations and non-zero widths".into()));
        }
        let mut rng = rng::stream(seed, "wsrr-init", 0);
        let mut params = ParamSet::new();
        let node_tf = Linear::new(&mut params, "node", config.appearance_dim + SPATIAL_DIM, config.node_dim, &mut rng);
        let edge_tf = Linear::new(&mut params, "edge", EDGE_DIM, config.edge_dim, &mut rng);
        let input = Linear::new(&mut params, "input", config.pair_dim(), config.hidden, &mut rng);
        let blocks = (0..config.blocks)
            .map(|k| Linear::new(&mut params, &format!("block.{k}"), config.hidden, config.hidden, &mut rng))
            .collect();
        let classifier = Linear::new(&mut params, "classifier", config.hidden, config.num_relations + 1, &mut rng);
        let mut stats = vec![BnStats::identity(config.pair_dim())];
        stats.extend((0..config.blocks).map(|_| BnStats::identity(config.hidden)));
        Ok(RelationModel {
            config,
            params,
            node_tf,
            edge_tf,
            input,
            blocks,
            classifier,
            stats,
        })
    }

    fn check_graph(&self, graph: &InstanceGraph) -> Result<()> {
        if let Some(d) = graph.appearance_dim() {
            contract!(
                d == self.config.appearance_dim,
                "graph has {d}-dimensional appearance features, network expects {}",
                self.config.appearance_dim
            );
        }
        Ok(())
    }

    /// Per-edge outputs. With `stop_at = Some(k)` each entry is instead the
    /// input of normalisation layer `k`, before normalising.
    fn edge_outputs(&self, g: &mut Graph, graph: &InstanceGraph, stop_at: Option<usize>) -> Vec<Var> {
        INVOCATIONS.with(|c| c.set(c.get() + 1));
        let nodes: Vec<Var> = graph
            .nodes
            .iter()
            .map(|n| {
                let mut f = n.appearance.clone();
                f.extend_from_slice(&n.spatial);
                let x = g.input(Tensor::vector(f));
                let z = self.node_tf.forward(g, x);
                g.gelu(z)
            })
            .collect();
        let bn = self.config.batch_norm;
        graph
            .edges
            .iter()
            .map(|e| {
                let ef = g.input(Tensor::vector(e.features.clone()));
                let ez = self.edge_tf.forward(g, ef);
                let ez = g.gelu(ez);
                let mut x = g.concat(&[nodes[e.from], nodes[e.to], ez]);
                if stop_at == Some(0) {
                    return x;
                }
                if bn {
                    x = g.bn_fixed(x, &self.stats[0].mean, &self.stats[0].var);
                }
                let z = self.input.forward(g, x);
                let mut h = g.gelu(z);
                for (k, block) in self.blocks.iter().enumerate() {
                    if stop_at == Some(k + 1) {
                        return h;
                    }
                    if bn {
                        h = g.bn_fixed(h, &self.stats[k + 1].mean, &self.stats[k + 1].var);
                    }
                    let inner = |g: &mut Graph, x: Var| {
                        let z = block.forward(g, x);
                        g.gelu(z)
                    };
                    h = if self.config.residual {
                        residual_block(g, h, inner).expect("blocks preserve width")
                    } else {
                        inner(g, h)
                    };
                }
                self.classifier.forward(g, h)
            })
            .collect()
    }

    /// Relation-class logits (no-relation last) for every edge, in edge order.
    pub fn edge_logits(&self, graph: &InstanceGraph) -> Result<Vec<Vec<f64>>> {
        self.check_graph(graph)?;
        let mut g = Graph::new(&self.params);
        let outs = self.edge_outputs(&mut g, graph, None);
        Ok(outs.iter().map(|&v| g.value(v).data().to_vec()).collect())
    }

    /// Aggregated image-level relation scores.
    pub fn image_scores(&self, graph: &InstanceGraph) -> Result<Vec<f64>> {
        let probs: Vec<Vec<f64>> = self.edge_logits(graph)?.iter().map(|l| softmax(l)).collect();
        Ok(aggregate_edges(&probs, self.config.num_relations))
    }

    fn image_loss(&self, g: &mut Graph, graph: &InstanceGraph, targets: &[f64]) -> Option<Var> {
        if graph.edges.is_empty() {
            return None;
        }
        let r = self.config.num_relations;
        let outs = self.edge_outputs(g, graph, None);
        let rel: Vec<Var> = outs
            .into_iter()
            .map(|l| {
                let p = g.softmax(l);
                g.slice(p, 0, r)
            })
            .collect();
        let scores = g.max_of(&rel);
        Some(g.bce_prob(scores, targets, BCE_EPS))
    }

    /// Loss and gradients for one image; `None` when the graph has no edges.
    pub fn loss_and_grads(&self, graph: &InstanceGraph, targets: &[f64]) -> Option<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let loss = self.image_loss(&mut g, graph, targets)?;
        Some((g.value(loss).item(), g.backward(loss).params))
    }

    /// Mean loss over images that have at least one edge.
    pub fn mean_loss(&self, batch: &[(&InstanceGraph, &[f64])]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for (graph, y) in batch {
            let mut g = Graph::new(&self.params);
            if let Some(l) = self.image_loss(&mut g, graph, y) {
                total += g.value(l).item();
                n += 1;
            }
        }
        total / n.max(1) as f64
    }

    /// Estimate every normalisation layer's statistics, in order, from all edges of `graphs`.
    pub fn warm_up(&mut self, graphs: &[&InstanceGraph]) -> Result<()> {
        if !self.config.batch_norm {
            return Ok(());
        }
        for k in 0..self.stats.len() {
            let mut rows = Vec::new();
            for graph in graphs {
                let mut g = Graph::new(&self.params);
                for v in self.edge_outputs(&mut g, graph, Some(k)) {
                    rows.push(g.value(v).data().to_vec());
                }
            }
            if rows.is_empty() {
                log::warn!("relation warm-up saw no edges; keeping identity statistics");
                return Ok(());
            }
            self.stats[k] = BnStats::estimate(&rows)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let mut params = self.params.clone();
        for (k, s) in self.stats.iter().enumerate() {
            params.add(format!("bn.{k}.mean"), Tensor::vector(s.mean.clone()));
            params.add(format!("bn.{k}.var"), Tensor::vector(s.var.clone()));
        }
        let meta = serde_json::to_value(&self.config).expect("serializable config");
        Checkpoint::new(CHECKPOINT_KIND, seed, config_hash, meta, params)
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND, origin)?;
        let config: GnnConfig =
            serde_json::from_value(ck.header.meta.clone()).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut model = RelationModel::new(config, 0)?;
        let (names, tensors) = ck.params.parts();
        let split = model.params.len();
        contract!(
            names.len() == split + 2 * model.stats.len(),
            "checkpoint {} holds {} tensors, expected {}",
            origin.display(),
            names.len(),
            split + 2 * model.stats.len()
        );
        model
            .params
            .adopt(ParamSet::from_parts(names[..split].to_vec(), tensors[..split].to_vec()))
            .map_err(|e| Error::format(origin, e.to_string()))?;
        for (k, s) in model.stats.iter_mut().enumerate() {
            let (m, v) = (&tensors[split + 2 * k], &tensors[split + 2 * k + 1]);
            contract!(
                m.len() == s.mean.len() && v.len() == s.var.len(),
                "normalisation statistics {k} have the wrong width"
            );
            s.mean = m.data().to_vec();
            s.var = v.data().to_vec();
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn relation_targets(labels: &ImageLevelLabels, num_relations: usize) -> Vec<f64> {
    (0..num_relations)
        .map(|r| if labels.relations.contains(&r) { 1.0 } else { 0.0 })
        .collect()
}

/// Relation network plus optimiser state.
pub struct RelationTrainer {
    pub model: RelationModel,
    opt: Adam,
}

impl RelationTrainer {
    pub fn new(model: RelationModel, lr: f64) -> Self {
        let opt = Adam::new(&model.params, lr);
        RelationTrainer { model, opt }
    }

    /// One optimiser step on the mean loss of the images in `batch` that have edges.
    pub fn step(&mut self, batch: &[(&InstanceGraph, &[f64])]) -> Result<f64> {
        let mut total = Gradients::zeros_like(&self.model.params);
        let (mut loss, mut n) = (0.0, 0usize);
        for (graph, y) in batch {
            if let Some((l, g)) = self.model.loss_and_grads(graph, y) {
                loss += l;
                n += 1;
                total.accumulate(&g);
            }
        }
        if n == 0 {
            return Ok(0.0);
        }
        total.scale(1.0 / n as f64);
        total.clip_norm(5.0);
        self.opt.step(&mut self.model.params, &total)?;
        Ok(loss / n as f64)
    }
}

/// Train on image-level relation labels. Statistics are frozen after one
/// warm-up pass over the training graphs. Returns the model and per-epoch mean loss.
pub fn train_relations(
    graphs: &[InstanceGraph],
    labels: &[ImageLevelLabels],
    config: GnnConfig,
    training: &GnnTraining,
) -> Result<(RelationModel, Vec<f64>)> {
    if graphs.is_empty() {
        return Err(Error::Config("cannot train the relation network on an empty split".into()));
    }
    contract!(graphs.len() == labels.len(), "graphs and labels differ in length");
    let r = config.num_relations;
    let targets: Vec<Vec<f64>> = labels.iter().map(|l| relation_targets(l, r)).collect();
    let mut model = RelationModel::new(config, training.seed)?;
    for g in graphs {
        model.check_graph(g)?;
    }
    let refs: Vec<&InstanceGraph> = graphs.iter().collect();
    model.warm_up(&refs)?;
    let mut bs = training.batch_size.max(1);
    if bs > graphs.len() {
        log::warn!("relation batch size {bs} exceeds the {} training images; clamping", graphs.len());
        bs = graphs.len();
    }
    let mut trainer = RelationTrainer::new(model, training.lr);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut history = Vec::with_capacity(training.epochs);
    for epoch in 0..training.epochs {
        order.shuffle(&mut rng::stream(training.seed, "wsrr-shuffle", epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let batch: Vec<(&InstanceGraph, &[f64])> =
                chunk.iter().map(|&i| (&graphs[i], targets[i].as_slice())).collect();
            let with_edges = batch.iter().filter(|(g, _)| !g.edges.is_empty()).count();
            sum += trainer.step(&batch)? * with_edges as f64;
            count += with_edges;
        }
        let mean = sum / count.max(1) as f64;
        log::debug!("wsrr epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    Ok((trainer.model, history))
}

/// Relations recognised in one image from its object-recognition output.
pub fn predict_relations(recognition: &Recognition, model: &RelationModel, threshold: f64) -> Result<RelationSet> {
    let graph = build_graph(&recognition.instances, &recognition.features)?;
    Ok(select_relations(&model.image_scores(&graph)?, threshold))
}
