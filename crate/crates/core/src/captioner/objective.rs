use serde::{Deserialize, Serialize};

use crate::dataio::{TokenId, Vocabulary};
use crate::wsor::Instance;
use crate::wsrr::RelationPrediction;

/// Weights of the object reward (α), relation reward (β) and unrecognised-object penalty (λ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: 1.0,
            beta: 0.5,
            lambda: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn is_valid(&self) -> bool {
        [self.alpha, self.beta, self.lambda].iter().all(|w| w.is_finite() && *w >= 0.0)
    }
}

/// What stages I and II recognised in one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageConcepts {
    pub instances: Vec<Instance>,
    pub relations: Vec<RelationPrediction>,
    /// Classifier sigmoid score of every object category.
    pub object_scores: Vec<f64>,
}

/// `α·Σ_i [s_t = o_i]·z_i + β·Σ_k [s_t = r_k]·z_k` for the token at position `t`
/// of `seq`. A relation phrase is credited to its last token.
pub fn concept_reward(
    seq: &[TokenId],
    t: usize,
    instances: &[Instance],
    relations: &[RelationPrediction],
    vocab: &Vocabulary,
    w: &RewardWeights,
) -> f64 {
    let mut obj = 0.0;
    if let Some(c) = vocab.object_category(seq[t]) {
        obj = instances.iter().filter(|i| i.category == c).map(|i| i.score).sum();
    }
    let mut rel = 0.0;
    for r in vocab.relations_ending_at(seq, t) {
        rel += relations.iter().filter(|p| p.relation == r).map(|p| p.score).sum::<f64>();
    }
    w.alpha * obj + w.beta * rel
}

/// `λ·(1 − score)` when `token` names an object category with no recognised
/// instance, where `score` is the classifier's confidence for that category.
pub fn uno_loss(token: TokenId, instances: &[Instance], vocab: &Vocabulary, lambda: f64, object_scores: &[f64]) -> f64 {
    match vocab.object_category(token) {
        Some(c) if !instances.iter().any(|i| i.category == c) => {
            let score = object_scores.get(c).copied().unwrap_or(0.0);
            lambda * (1.0 - score)
        }
        _ => 0.0,
    }
}

/// `−R_t + L_t^u`.
pub fn token_loss(reward: f64, uno: f64) -> f64 {
    -reward + uno
}

/// Per-token `(R_t, L_t^u)` for every token after `<bos>`.
pub fn sequence_terms(
    seq: &[TokenId],
    concepts: &ImageConcepts,
    vocab: &Vocabulary,
    w: &RewardWeights,
) -> Vec<(f64, f64)> {
    (1..seq.len())
        .map(|t| {
            (
                concept_reward(seq, t, &concepts.instances, &concepts.relations, vocab, w),
                uno_loss(seq[t], &concepts.instances, vocab, w.lambda, &concepts.object_scores),
            )
        })
        .collect()
}

/// Suffix sums `G_t = Σ_{t' ≥ t} r_{t'}`.
pub fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    out
}
