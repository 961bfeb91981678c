use std::cell::Cell;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{SceneImage, TokenId, BOS, EOS};
use crate::error::{contract, Error, Result};
use crate::nn::{Checkpoint, Embedding, Graph, Linear, LstmCell, ParamSet, Tensor, Var};
use crate::rng;
use crate::wsor::{ObjectClassifier, Trunk};

pub const CAPTIONER_KIND: &str = "captioner";
pub const DISCRIMINATOR_KIND: &str = "discriminator";

thread_local! {
    static DECODES: Cell<u64> = const { Cell::new(0) };
}

/// Number of caption decodes run on this thread so far.
pub fn decode_invocations() -> u64 {
    DECODES.with(Cell::get)
}

/// Fixed-length image representation fed to the decoder.
pub type ImageFeature = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Decoded caption: `<bos>`, generated tokens, and `<eos>` unless cut at the length cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    /// Log-probability of each token after `<bos>`.
    pub logprobs: Vec<f64>,
}

impl TokenSequence {
    /// Tokens after `<bos>`, up to but excluding `<eos>`.
    pub fn words(&self) -> &[TokenId] {
        let body = &self.tokens[1.min(self.tokens.len())..];
        match body.iter().position(|&t| t == EOS) {
            Some(p) => &body[..p],
            None => body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub vocab_size: usize,
    /// Encoder trunk widths; must match the object classifier it is initialised from.
    pub channels: [usize; 4],
    pub pointwise_from: usize,
    /// Side of the pooling grid over the coarsest feature map.
    pub grid: usize,
    pub latent: usize,
    pub embed: usize,
    pub hidden: usize,
    pub freeze_encoder: bool,
}

impl CaptionerConfig {
    pub fn new(vocab_size: usize, channels: [usize; 4]) -> Self {
        CaptionerConfig {
            vocab_size,
            channels,
            pointwise_from: 2,
            grid: 2,
            latent: 512,
            embed: 512,
            hidden: 512,
            freeze_encoder: true,
        }
    }

    fn pooled_dim(&self) -> usize {
        self.channels[3] * (self.grid * self.grid + 1)
    }
}

/// Encoder (conv trunk, grid and global pooling, projection) and LSTM decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub params: ParamSet,
    pub trunk: Trunk,
    pub proj: Linear,
    pub embed: Embedding,
    pub init: Linear,
    pub cell: LstmCell,
    pub out: Linear,
}

impl Captioner {
    pub fn new(config: CaptionerConfig, seed: u64) -> Result<Self> {
        if config.vocab_size < 3 || config.latent == 0 || config.embed == 0 || config.hidden == 0 || config.grid == 0 {
            return Err(Error::Config("captioner needs a vocabulary and non-zero widths".into()));
        }
        let mut rng = rng::stream(seed, "captioner-init", 0);
        let mut params = ParamSet::new();
        let trunk = Trunk::new(&mut params, "enc.trunk", config.channels, config.pointwise_from, &mut rng);
        let proj = Linear::new(&mut params, "enc.proj", config.pooled_dim(), config.latent, &mut rng);
        let embed = Embedding::new(&mut params, "dec.embed", config.vocab_size, config.embed, &mut rng);
        let init = Linear::new(&mut params, "dec.init", config.latent, config.hidden, &mut rng);
        let cell = LstmCell::new(&mut params, "dec.cell", config.embed + config.latent, config.hidden, &mut rng);
        let out = Linear::new(&mut params, "dec.out", config.hidden, config.vocab_size, &mut rng);
        Ok(Captioner {
            config,
            params,
            trunk,
            proj,
            embed,
            init,
            cell,
            out,
        })
    }

    /// Copy the trunk weights of a trained object classifier. Returns the number of tensors copied.
    pub fn init_encoder_from(&mut self, classifier: &ObjectClassifier) -> Result<usize> {
        contract!(
            classifier.config.channels == self.config.channels
                && classifier.config.pointwise_from == self.config.pointwise_from,
            "classifier trunk {:?} does not match the captioner encoder {:?}",
            classifier.config.channels,
            self.config.channels
        );
        Ok(self.params.copy_matching(&classifier.params, "trunk.", "enc.trunk."))
    }

    fn check_image(&self, image: &SceneImage) -> Result<()> {
        let h = image.height();
        contract!(
            h == image.width() && h.is_multiple_of(8) && h >= 8,
            "encoder expects square images with side divisible by 8, got {}x{}",
            h,
            image.width()
        );
        Ok(())
    }

    fn pool(&self, g: &mut Graph, image: &SceneImage) -> Var {
        let x = g.input(image.to_tensor());
        let feats = self.trunk.forward(g, x);
        let grid = g.grid_pool(feats[3], self.config.grid, self.config.grid);
        let gap = g.global_avg_pool(feats[3]);
        g.concat(&[grid, gap])
    }

    /// Pooled trunk features; constant during training when the encoder is frozen.
    pub fn pooled(&self, image: &SceneImage) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let mut g = Graph::new(&self.params);
        let p = self.pool(&mut g, image);
        Ok(g.value(p).data().to_vec())
    }

    /// `tanh(W · pooled + b)`.
    pub fn project(&self, g: &mut Graph, pooled: Var) -> Var {
        let z = self.proj.forward(g, pooled);
        g.tanh(z)
    }

    /// Image feature node: pooled features enter as a constant when frozen,
    /// otherwise the whole trunk is part of the graph.
    pub fn encode_node(&self, g: &mut Graph, image: &SceneImage, cached: Option<&[f64]>) -> Result<Var> {
        self.check_image(image)?;
        let pooled = match (self.config.freeze_encoder, cached) {
            (true, Some(p)) => g.input(Tensor::vector(p.to_vec())),
            (true, None) => {
                let p = self.pooled(image)?;
                g.input(Tensor::vector(p))
            }
            (false, _) => self.pool(g, image),
        };
        Ok(self.project(g, pooled))
    }

    pub fn encode_image(&self, image: &SceneImage) -> Result<ImageFeature> {
        let mut g = Graph::new(&self.params);
        let f = self.encode_node(&mut g, image, None)?;
        Ok(g.value(f).data().to_vec())
    }

    fn start(&self, g: &mut Graph, f: Var) -> (Var, Var) {
        let z = self.init.forward(g, f);
        let h = g.tanh(z);
        let c = g.input(Tensor::zeros(&[self.config.hidden]));
        (h, c)
    }

    fn step(&self, g: &mut Graph, f: Var, prev: TokenId, state: (Var, Var)) -> (Var, (Var, Var)) {
        let e = self.embed.lookup(g, prev);
        let x = g.concat(&[e, f]);
        let state = self.cell.step(g, x, state);
        let logits = self.out.forward(g, state.0);
        (g.log_softmax(logits), state)
    }

    /// Run the decoder inside `g`. Returns the sequence and, per emitted token, its log-probability node.
    pub fn rollout<R: Rng>(
        &self,
        g: &mut Graph,
        f: Var,
        mode: DecodeMode,
        max_len: usize,
        rng: &mut R,
    ) -> Result<(Vec<TokenId>, Vec<Var>)> {
        if max_len < 2 {
            return Err(Error::Config(format!("max_len must be at least 2, got {max_len}")));
        }
        DECODES.with(|c| c.set(c.get() + 1));
        let mut tokens = vec![BOS];
        let mut lps = Vec::new();
        let mut state = self.start(g, f);
        while tokens.len() < max_len {
            let (logp, next) = self.step(g, f, *tokens.last().expect("non-empty"), state);
            state = next;
            let dist = g.value(logp).data();
            let tok = match mode {
                DecodeMode::Greedy => argmax(dist),
                DecodeMode::Sample => sample(dist, rng),
            };
            lps.push(g.pick(logp, tok));
            tokens.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok((tokens, lps))
    }

    /// Log-probability node of every token after the first, feeding the given tokens.
    pub fn teacher_forced(&self, g: &mut Graph, f: Var, tokens: &[TokenId]) -> Vec<Var> {
        let mut state = self.start(g, f);
        let mut out = Vec::with_capacity(tokens.len().saturating_sub(1));
        for w in tokens.windows(2) {
            let (logp, next) = self.step(g, f, w[0], state);
            state = next;
            out.push(g.pick(logp, w[1]));
        }
        out
    }

    /// Decode from an image feature. Sampling is driven by a stream derived from `seed`.
    pub fn decode(&self, feature: &[f64], mode: DecodeMode, max_len: usize, seed: u64) -> Result<TokenSequence> {
        contract!(
            feature.len() == self.config.latent,
            "image feature has {} values, decoder expects {}",
            feature.len(),
            self.config.latent
        );
        let mut g = Graph::new(&self.params);
        let f = g.input(Tensor::vector(feature.to_vec()));
        let mut r = rng::stream(seed, "decode", 0);
        let (tokens, lps) = self.rollout(&mut g, f, mode, max_len, &mut r)?;
        let logprobs = lps.iter().map(|&v| g.value(v).item()).collect();
        Ok(TokenSequence { tokens, logprobs })
    }

    /// Teacher-forced log-probabilities of `tokens[1..]`.
    pub fn sequence_logprobs(&self, feature: &[f64], tokens: &[TokenId]) -> Result<Vec<f64>> {
        contract!(feature.len() == self.config.latent, "image feature has the wrong length");
        contract!(
            tokens.iter().all(|&t| t < self.config.vocab_size),
            "token id out of vocabulary"
        );
        let mut g = Graph::new(&self.params);
        let f = g.input(Tensor::vector(feature.to_vec()));
        let lps = self.teacher_forced(&mut g, f, tokens);
        Ok(lps.iter().map(|&v| g.value(v).item()).collect())
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let meta = serde_json::to_value(&self.config).expect("serializable config");
        Checkpoint::new(CAPTIONER_KIND, seed, config_hash, meta, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        ck.expect_kind(CAPTIONER_KIND, origin)?;
        let config: CaptionerConfig =
            serde_json::from_value(ck.header.meta.clone()).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut m = Captioner::new(config, 0)?;
        m.params
            .adopt(ck.params.clone())
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Rng>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    argmax(logp)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl DiscriminatorConfig {
    pub fn new(vocab_size: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            embed: 512,
            hidden: 512,
        }
    }
}

/// LSTM sentence classifier: probability that a sentence comes from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
    pub embed: Embedding,
    pub cell: LstmCell,
    pub out: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.vocab_size < 3 || config.embed == 0 || config.hidden == 0 {
            return Err(Error::Config("discriminator needs a vocabulary and non-zero widths".into()));
        }
        let mut rng = rng::stream(seed, "discriminator-init", 0);
        let mut params = ParamSet::new();
        let embed = Embedding::new(&mut params, "disc.embed", config.vocab_size, config.embed, &mut rng);
        let cell = LstmCell::new(&mut params, "disc.cell", config.embed, config.hidden, &mut rng);
        let out = Linear::new(&mut params, "disc.out", config.hidden, 1, &mut rng);
        Ok(Discriminator {
            config,
            params,
            embed,
            cell,
            out,
        })
    }

    /// Probability node for `tokens` (`<bos>` is skipped if present).
    pub fn forward(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<Var> {
        let body: &[TokenId] = match tokens.first() {
            Some(&BOS) => &tokens[1..],
            _ => tokens,
        };
        contract!(!body.is_empty(), "cannot score an empty sentence");
        contract!(
            body.iter().all(|&t| t < self.config.vocab_size),
            "token id out of vocabulary"
        );
        let mut state = self.cell.zero_state(g);
        for &t in body {
            let e = self.embed.lookup(g, t);
            state = self.cell.step(g, e, state);
        }
        let z = self.out.forward(g, state.0);
        Ok(g.sigmoid(z))
    }

    pub fn score(&self, tokens: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let p = self.forward(&mut g, tokens)?;
        Ok(g.value(p).item())
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let meta = serde_json::to_value(&self.config).expect("serializable config");
        Checkpoint::new(DISCRIMINATOR_KIND, seed, config_hash, meta, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        ck.expect_kind(DISCRIMINATOR_KIND, origin)?;
        let config: DiscriminatorConfig =
            serde_json::from_value(ck.header.meta.clone()).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut m = Discriminator::new(config, 0)?;
        m.params
            .adopt(ck.params.clone())
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
