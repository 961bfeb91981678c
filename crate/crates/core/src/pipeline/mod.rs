//! Stage orchestration: object recognition (I), relation recognition (II),
//! unpaired captioning plus pseudo-caption training (III), evaluation and
//! inference, with artifacts stored under configuration-hash directories.

mod config;

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{RunConfig, Variant};

use crate::captioner::{
    caption_images, train_unpaired, Captioner, CaptionerConfig, Discriminator, DiscriminatorConfig, ImageConcepts,
    UnpairedData, UnpairedTraining,
};
use crate::dataio::{
    build_vocabulary, decode_ppm, generate_corpus, generate_split, load_image, read_dataset, tokenize, write_dataset,
    AuditLog, Dataset, GeneratorConfig, HiddenStore, SceneImage, TokenId, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, Sentence};
use crate::pseudo::{count_unrecognized, filter_pseudo, train_supervised, write_pseudo, SupervisedTraining};
use crate::rng;
use crate::wsor::{recognize, train_classifier, ClassifierConfig, ClassifierTraining, ExtractionConfig, ObjectClassifier, Recognition};
use crate::wsrr::{
    build_graph, relation_f1, select_relations, train_relations, GnnConfig, GnnTraining, InstanceGraph, RelationModel,
};
use config::digest;

const RECORD_FILE: &str = "stage.json";
const CLASSIFIER_FILE: &str = "classifier.ckpt";
const GNN_FILE: &str = "gnn.ckpt";
const CAPTIONER_FILE: &str = "captioner.ckpt";
const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
const PSEUDO_FILE: &str = "pseudo.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];

    fn describe(self) -> &'static str {
        match self {
            Stage::I => "stage I (object recognition)",
            Stage::II => "stage II (relation recognition)",
            Stage::III => "stage III (captioning)",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            other => Err(Error::Config(format!("unknown stage {other:?}; expected I, II or III"))),
        }
    }
}

/// Comma-separated stage list such as `I,II,III`, sorted and deduplicated.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let mut v = list.split(',').filter(|s| !s.trim().is_empty()).map(Stage::from_str).collect::<Result<Vec<_>>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

/// What one stage (or the pseudo-caption step) produced, persisted as `stage.json` in its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// `I`, `II`, `III` or `pseudo`.
    pub stage: String,
    /// Hash of every setting the stage depends on; also its directory name suffix.
    pub key: String,
    /// Directory relative to the work directory.
    pub dir: String,
    pub checkpoint: String,
    pub checksum: String,
    pub seconds: f64,
    /// Per-epoch training curves by name.
    pub curves: BTreeMap<String, Vec<f64>>,
    pub counts: BTreeMap<String, usize>,
    /// Set when the artifacts were found on disk instead of trained in this process.
    #[serde(default)]
    pub reused: bool,
}

/// One greedy caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
    /// Checkpoint used for inference, relative to the work directory.
    pub final_checkpoint: String,
    pub metrics: MetricReport,
    /// Mean unrecognised-object count of test captions against the recognised instances.
    pub test_unrecognized: f64,
    /// Mean unrecognised-object count of sampled captions in each unpaired epoch.
    pub unrecognized_curve: Vec<f64>,
    pub reward_curve: Vec<f64>,
    pub eval_seconds: f64,
}

impl RunReport {
    /// Digest of the report with wall-clock fields and reuse flags cleared.
    pub fn hash(&self) -> String {
        let mut r = self.clone();
        r.eval_seconds = 0.0;
        for s in &mut r.stages {
            s.seconds = 0.0;
            s.reused = false;
        }
        digest(&crate::json::to_sorted_string(&r))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, crate::json::to_sorted_pretty(self)).map_err(|e| Error::io(path, e))
    }
}

struct Splits {
    train: Dataset,
    test: Dataset,
    corpus: Vec<String>,
    vocab: Vocabulary,
}

/// Runs stages of one configuration inside a work directory.
///
/// Loaded splits and stage I recognitions are held in memory and shared with
/// pipelines made by [`Pipeline::derive`] when their keys agree.
pub struct Pipeline {
    config: RunConfig,
    work_dir: PathBuf,
    audit: AuditLog,
    splits: Rc<OnceCell<Rc<Splits>>>,
    train_recognitions: Rc<OnceCell<Rc<Vec<Recognition>>>>,
    test_recognitions: Rc<OnceCell<Rc<Vec<Recognition>>>>,
}

fn short(key: &str) -> &str {
    &key[..16]
}

impl Pipeline {
    pub fn new(config: RunConfig, work_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let work_dir = work_dir.into();
        fs::create_dir_all(&work_dir).map_err(|e| Error::io(&work_dir, e))?;
        Ok(Pipeline {
            config,
            work_dir,
            audit: AuditLog::new(),
            splits: Rc::new(OnceCell::new()),
            train_recognitions: Rc::new(OnceCell::new()),
            test_recognitions: Rc::new(OnceCell::new()),
        })
    }

    /// A pipeline for `config` in the same work directory, sharing the audit log
    /// and any in-memory data whose inputs are unchanged.
    pub fn derive(&self, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut p = Pipeline {
            config,
            work_dir: self.work_dir.clone(),
            audit: self.audit.clone(),
            splits: Rc::new(OnceCell::new()),
            train_recognitions: Rc::new(OnceCell::new()),
            test_recognitions: Rc::new(OnceCell::new()),
        };
        if p.data_key() == self.data_key() {
            p.splits = self.splits.clone();
            if p.recognition_key() == self.recognition_key() {
                p.train_recognitions = self.train_recognitions.clone();
                p.test_recognitions = self.test_recognitions.clone();
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn work_dir(&self) -> &Path {
        &self.work_dir
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    fn data_key(&self) -> String {
        let c = &self.config;
        digest(&crate::json::to_sorted_string(&json!({
            "train_dir": c.train_dir, "test_dir": c.test_dir, "data_seed": c.data_seed,
            "categories": c.categories, "train_size": c.train_size, "test_size": c.test_size,
            "corpus_size": c.corpus_size, "vocab_min_count": c.vocab_min_count,
        })))
    }

    fn key_i(&self) -> String {
        let c = &self.config;
        digest(&crate::json::to_sorted_string(&json!({
            "data": self.data_key(), "seed": c.wsor_seed, "channels": c.wsor_channels,
            "pointwise_from": c.wsor_pointwise_from, "epochs": c.wsor_epochs, "lr": c.wsor_lr,
            "batch_size": c.wsor_batch_size,
        })))
    }

    fn recognition_key(&self) -> String {
        let c = &self.config;
        digest(&crate::json::to_sorted_string(&json!({
            "stage_i": self.key_i(), "object_threshold": c.object_threshold,
            "mask_threshold": c.mask_threshold, "min_area_fraction": c.min_area_fraction,
        })))
    }

    fn key_ii(&self) -> String {
        let c = &self.config;
        digest(&crate::json::to_sorted_string(&json!({
            "recognition": self.recognition_key(), "seed": c.gnn_seed, "node_dim": c.gnn_node_dim,
            "edge_dim": c.gnn_edge_dim, "hidden": c.gnn_hidden, "blocks": c.gnn_blocks,
            "batch_norm": c.gnn_batch_norm, "residual": c.gnn_residual, "epochs": c.gnn_epochs,
            "lr": c.gnn_lr, "batch_size": c.gnn_batch_size,
        })))
    }

    fn key_iii(&self) -> String {
        let c = &self.config;
        let relations = if c.use_rel {
            json!({ "stage_ii": self.key_ii(), "threshold": c.relation_threshold })
        } else {
            json!(null)
        };
        digest(&crate::json::to_sorted_string(&json!({
            "recognition": self.recognition_key(), "relations": relations, "seed": c.uic_seed,
            "latent": c.latent, "embed": c.embed, "hidden": c.hidden, "grid": c.grid,
            "freeze_encoder": c.freeze_encoder, "disc_embed": c.disc_embed, "disc_hidden": c.disc_hidden,
            "epochs": c.uic_epochs, "lr": c.uic_lr, "batch_size": c.uic_batch_size, "max_len": c.max_len,
            "pretrain_epochs": c.pretrain_epochs, "pretrain_lr": c.pretrain_lr, "disc_lr": c.disc_lr,
            "adversarial_weight": c.adversarial_weight, "baseline_decay": c.baseline_decay,
            "weights": c.reward_weights(), "probe_size": c.probe_size,
        })))
    }

    fn key_pseudo(&self) -> String {
        let c = &self.config;
        digest(&crate::json::to_sorted_string(&json!({
            "stage_iii": self.key_iii(), "seed": c.pseudo_seed, "epochs": c.pseudo_epochs,
            "lr": c.pseudo_lr, "batch_size": c.pseudo_batch_size, "reinit": c.pseudo_reinit,
        })))
    }

    fn relative_dir(&self, step: &str) -> String {
        let key = match step {
            "I" => self.key_i(),
            "II" => self.key_ii(),
            "III" => self.key_iii(),
            _ => self.key_pseudo(),
        };
        format!("stage-{step}-{}", short(&key))
    }

    /// Artifact directory of `stage` for this configuration.
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.work_dir.join(self.relative_dir(&stage.to_string()))
    }

    fn pseudo_dir(&self) -> PathBuf {
        self.work_dir.join(self.relative_dir("pseudo"))
    }

    fn read_record(dir: &Path) -> Result<Option<StageRecord>> {
        let path = dir.join(RECORD_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut r: StageRecord = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        r.reused = true;
        Ok(Some(r))
    }

    fn write_record(&self, dir: &Path, record: &StageRecord) -> Result<()> {
        let path = dir.join(RECORD_FILE);
        fs::write(&path, crate::json::to_sorted_pretty(record)).map_err(|e| Error::io(&path, e))
    }

    fn make_dir(dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    /// Whether `stage` has finished for this configuration (including the pseudo step when enabled).
    pub fn is_done(&self, stage: Stage) -> bool {
        let done = |d: PathBuf| d.join(RECORD_FILE).is_file();
        match stage {
            Stage::III if self.config.use_pseudo => done(self.stage_dir(stage)) && done(self.pseudo_dir()),
            _ => done(self.stage_dir(stage)),
        }
    }

    fn require(&self, stage: Stage, needed: Stage) -> Result<()> {
        if self.stage_dir(needed).join(RECORD_FILE).is_file() {
            Ok(())
        } else {
            Err(Error::Dependency(format!(
                "{} needs {}, which has not been run for this configuration",
                stage.describe(),
                needed.describe()
            )))
        }
    }

    fn splits(&self) -> Result<Rc<Splits>> {
        if let Some(s) = self.splits.get() {
            return Ok(s.clone());
        }
        let c = &self.config;
        let (train_root, test_root) = if c.train_dir.is_empty() || c.test_dir.is_empty() {
            let root = self.work_dir.join(format!("data-{}", short(&self.data_key())));
            let gen = GeneratorConfig::with_categories(c.categories);
            gen.validate()?;
            let (objects, relations) = (gen.object_registry()?, gen.relation_registry()?);
            let size = (gen.height, gen.width);
            let train = root.join("train");
            if c.train_dir.is_empty() && !train.join("manifest.json").is_file() {
                let records = generate_split(&gen, c.data_seed, "train", c.train_size)?;
                let corpus = generate_corpus(&gen, c.data_seed, c.corpus_size)?;
                write_dataset(&train, "train", &objects, &relations, size, &records, &corpus)?;
            }
            let test = root.join("test");
            if c.test_dir.is_empty() && !test.join("manifest.json").is_file() {
                let records = generate_split(&gen, c.data_seed, "test", c.test_size)?;
                write_dataset(&test, "test", &objects, &relations, size, &records, &[])?;
            }
            (
                if c.train_dir.is_empty() { train } else { PathBuf::from(&c.train_dir) },
                if c.test_dir.is_empty() { test } else { PathBuf::from(&c.test_dir) },
            )
        } else {
            (PathBuf::from(&c.train_dir), PathBuf::from(&c.test_dir))
        };
        let train = Dataset::open(&train_root)?;
        let test = Dataset::open(&test_root)?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("training and test splits must both contain images".into()));
        }
        let corpus = train.corpus()?;
        if corpus.is_empty() {
            return Err(Error::Config(format!("{} has an empty sentence corpus", train_root.display())));
        }
        let tokens: Vec<Vec<String>> = corpus.iter().map(|s| tokenize(s)).collect();
        let vocab = build_vocabulary(&tokens, c.vocab_min_count)
            .with_concepts(&train.manifest.objects, &train.manifest.relations);
        let s = Rc::new(Splits {
            train,
            test,
            corpus,
            vocab,
        });
        let _ = self.splits.set(s.clone());
        Ok(s)
    }

    fn classifier(&self) -> Result<ObjectClassifier> {
        ObjectClassifier::load(&self.stage_dir(Stage::I).join(CLASSIFIER_FILE))
    }

    fn extraction(&self) -> ExtractionConfig {
        ExtractionConfig {
            mask_threshold: self.config.mask_threshold,
            min_area_fraction: self.config.min_area_fraction,
        }
    }

    fn recognitions(&self, test: bool) -> Result<Rc<Vec<Recognition>>> {
        let cell = if test { &self.test_recognitions } else { &self.train_recognitions };
        if let Some(r) = cell.get() {
            return Ok(r.clone());
        }
        let splits = self.splits()?;
        let model = self.classifier()?;
        let images = if test { &splits.test.images } else { &splits.train.images };
        let ex = self.extraction();
        let r = Rc::new(
            images
                .iter()
                .map(|im| recognize(im, &model, self.config.object_threshold, &ex))
                .collect::<Result<Vec<_>>>()?,
        );
        let _ = cell.set(r.clone());
        Ok(r)
    }

    fn graphs(recognitions: &[Recognition]) -> Result<Vec<InstanceGraph>> {
        recognitions.iter().map(|r| build_graph(&r.instances, &r.features)).collect()
    }

    /// Run one stage, or reuse its artifacts when this configuration already produced them.
    pub fn run_stage(&self, stage: Stage) -> Result<Vec<StageRecord>> {
        match stage {
            Stage::I => Ok(vec![self.stage_i()?]),
            Stage::II => {
                self.require(Stage::II, Stage::I)?;
                Ok(vec![self.stage_ii()?])
            }
            Stage::III => {
                self.require(Stage::III, Stage::I)?;
                if self.config.use_rel {
                    self.require(Stage::III, Stage::II)?;
                }
                let mut out = vec![self.stage_iii()?];
                if self.config.use_pseudo {
                    out.push(self.stage_pseudo()?);
                }
                Ok(out)
            }
        }
    }

    fn stage_i(&self) -> Result<StageRecord> {
        let dir = self.stage_dir(Stage::I);
        if let Some(r) = Self::read_record(&dir)? {
            return Ok(r);
        }
        let _phase = self.audit.enter("train:I");
        let t0 = Instant::now();
        let c = &self.config;
        let splits = self.splits()?;
        let mut cfg = ClassifierConfig::new(c.wsor_channels, splits.train.manifest.objects.len());
        cfg.pointwise_from = c.wsor_pointwise_from;
        let training = ClassifierTraining {
            epochs: c.wsor_epochs,
            lr: c.wsor_lr,
            batch_size: c.wsor_batch_size,
            seed: c.wsor_seed,
        };
        log::info!("stage I: training the object classifier on {} images", splits.train.len());
        let (model, losses) = train_classifier(&splits.train.images, &splits.train.labels, cfg, &training)?;
        Self::make_dir(&dir)?;
        let key = self.key_i();
        model.to_checkpoint(c.wsor_seed, &key).save(&dir.join(CLASSIFIER_FILE))?;
        let record = StageRecord {
            stage: "I".into(),
            key,
            dir: self.relative_dir("I"),
            checkpoint: CLASSIFIER_FILE.into(),
            checksum: model.params.checksum(),
            seconds: t0.elapsed().as_secs_f64(),
            curves: BTreeMap::from([("loss".to_string(), losses)]),
            counts: BTreeMap::new(),
            reused: false,
        };
        self.write_record(&dir, &record)?;
        Ok(record)
    }

    fn gnn_config(&self, appearance_dim: usize, num_relations: usize) -> GnnConfig {
        let c = &self.config;
        GnnConfig {
            node_dim: c.gnn_node_dim,
            edge_dim: c.gnn_edge_dim,
            hidden: c.gnn_hidden,
            blocks: c.gnn_blocks,
            batch_norm: c.gnn_batch_norm,
            residual: c.gnn_residual,
            ..GnnConfig::new(appearance_dim, num_relations)
        }
    }

    fn stage_ii(&self) -> Result<StageRecord> {
        let dir = self.stage_dir(Stage::II);
        if let Some(r) = Self::read_record(&dir)? {
            return Ok(r);
        }
        let _phase = self.audit.enter("train:II");
        let t0 = Instant::now();
        let c = &self.config;
        let splits = self.splits()?;
        let recognitions = self.recognitions(false)?;
        let graphs = Self::graphs(&recognitions)?;
        let appearance_dim = c.wsor_channels.iter().sum();
        let cfg = self.gnn_config(appearance_dim, splits.train.manifest.relations.len());
        let training = GnnTraining {
            epochs: c.gnn_epochs,
            lr: c.gnn_lr,
            batch_size: c.gnn_batch_size,
            seed: c.gnn_seed,
        };
        log::info!("stage II: training the relation network on {} graphs", graphs.len());
        let (model, losses) = train_relations(&graphs, &splits.train.labels, cfg, &training)?;
        Self::make_dir(&dir)?;
        let key = self.key_ii();
        model.to_checkpoint(c.gnn_seed, &key).save(&dir.join(GNN_FILE))?;
        let record = StageRecord {
            stage: "II".into(),
            key,
            dir: self.relative_dir("II"),
            checkpoint: GNN_FILE.into(),
            checksum: model.params.checksum(),
            seconds: t0.elapsed().as_secs_f64(),
            curves: BTreeMap::from([("loss".to_string(), losses)]),
            counts: BTreeMap::new(),
            reused: false,
        };
        self.write_record(&dir, &record)?;
        Ok(record)
    }

    fn concepts(&self, recognitions: &[Recognition]) -> Result<Vec<ImageConcepts>> {
        let relation_model = if self.config.use_rel {
            Some(RelationModel::load(&self.stage_dir(Stage::II).join(GNN_FILE))?)
        } else {
            None
        };
        recognitions
            .iter()
            .map(|r| {
                let relations = match &relation_model {
                    Some(m) => {
                        let g = build_graph(&r.instances, &r.features)?;
                        select_relations(&m.image_scores(&g)?, self.config.relation_threshold)
                    }
                    None => Vec::new(),
                };
                Ok(ImageConcepts {
                    instances: r.instances.clone(),
                    relations,
                    object_scores: r.logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect(),
                })
            })
            .collect()
    }

    fn captioner_config(&self, vocab_size: usize) -> CaptionerConfig {
        let c = &self.config;
        CaptionerConfig {
            pointwise_from: c.wsor_pointwise_from,
            grid: c.grid,
            latent: c.latent,
            embed: c.embed,
            hidden: c.hidden,
            freeze_encoder: c.freeze_encoder,
            ..CaptionerConfig::new(vocab_size, c.wsor_channels)
        }
    }

    fn stage_iii(&self) -> Result<StageRecord> {
        let dir = self.stage_dir(Stage::III);
        if let Some(r) = Self::read_record(&dir)? {
            return Ok(r);
        }
        let _phase = self.audit.enter("train:III");
        let t0 = Instant::now();
        let c = &self.config;
        let splits = self.splits()?;
        let recognitions = self.recognitions(false)?;
        let concepts = self.concepts(&recognitions)?;
        let vocab = &splits.vocab;
        let corpus: Vec<Vec<TokenId>> = splits.corpus.iter().map(|s| vocab.encode_sentence(s)).collect();

        let mut captioner = Captioner::new(self.captioner_config(vocab.len()), c.uic_seed)?;
        captioner.init_encoder_from(&self.classifier()?)?;
        let disc = Discriminator::new(
            DiscriminatorConfig {
                vocab_size: vocab.len(),
                embed: c.disc_embed,
                hidden: c.disc_hidden,
            },
            c.uic_seed,
        )?;
        let training = UnpairedTraining {
            epochs: c.uic_epochs,
            lr: c.uic_lr,
            batch_size: c.uic_batch_size,
            seed: c.uic_seed,
            max_len: c.max_len,
            pretrain_epochs: c.pretrain_epochs,
            pretrain_lr: c.pretrain_lr,
            discriminator_lr: c.disc_lr,
            adversarial_weight: c.adversarial_weight,
            baseline_decay: c.baseline_decay,
            weights: c.reward_weights(),
            probe_size: c.probe_size,
        };
        let data = UnpairedData {
            images: &splits.train.images,
            concepts: &concepts,
            corpus: &corpus,
            vocab,
        };
        log::info!("stage III: unpaired training on {} images and {} sentences", data.images.len(), corpus.len());
        let out = train_unpaired(captioner, disc, &data, &training)?;
        Self::make_dir(&dir)?;
        let key = self.key_iii();
        out.captioner.to_checkpoint(c.uic_seed, &key).save(&dir.join(CAPTIONER_FILE))?;
        write_vocabulary(&dir.join(CAPTIONER_FILE), vocab)?;
        out.discriminator.to_checkpoint(c.uic_seed, &key).save(&dir.join(DISCRIMINATOR_FILE))?;
        let with_relations = concepts.iter().filter(|x| !x.relations.is_empty()).count();
        let record = StageRecord {
            stage: "III".into(),
            key,
            dir: self.relative_dir("III"),
            checkpoint: CAPTIONER_FILE.into(),
            checksum: out.captioner.params.checksum(),
            seconds: t0.elapsed().as_secs_f64(),
            curves: BTreeMap::from([
                ("pretrain".to_string(), out.pretrain_curve),
                ("reward".to_string(), out.reward_curve),
                ("unrecognized".to_string(), out.unrecognized_curve),
            ]),
            counts: BTreeMap::from([
                ("vocabulary".to_string(), vocab.len()),
                ("images_with_relations".to_string(), with_relations),
            ]),
            reused: false,
        };
        self.write_record(&dir, &record)?;
        Ok(record)
    }

    fn stage_pseudo(&self) -> Result<StageRecord> {
        let dir = self.pseudo_dir();
        if let Some(r) = Self::read_record(&dir)? {
            return Ok(r);
        }
        let _phase = self.audit.enter("train:III");
        let t0 = Instant::now();
        let c = &self.config;
        let splits = self.splits()?;
        let recognitions = self.recognitions(false)?;
        let unpaired = Captioner::load(&self.stage_dir(Stage::III).join(CAPTIONER_FILE))?;
        let images = &splits.train.images;
        let captions: Vec<Vec<TokenId>> = caption_images(&unpaired, images, c.max_len)?
            .into_iter()
            .map(|s| s.tokens)
            .collect();
        let ids: Vec<String> = images.iter().map(|im| im.id.clone()).collect();
        let instances: Vec<_> = recognitions.iter().map(|r| r.instances.clone()).collect();
        let provenance = format!("{}/{CAPTIONER_FILE}", self.relative_dir("III"));
        let pairs = filter_pseudo(&ids, &captions, &instances, &splits.vocab, &provenance)?;
        log::info!("pseudo captions: kept {} of {}", pairs.len(), captions.len());
        let start = if c.pseudo_reinit {
            let mut m = Captioner::new(
                self.captioner_config(splits.vocab.len()),
                rng::derive_seed(c.pseudo_seed, "pseudo-init", 0),
            )?;
            m.init_encoder_from(&self.classifier()?)?;
            m
        } else {
            unpaired
        };
        let training = SupervisedTraining {
            epochs: c.pseudo_epochs,
            lr: c.pseudo_lr,
            batch_size: c.pseudo_batch_size,
            seed: c.pseudo_seed,
        };
        let (model, losses) = train_supervised(start, &pairs, images, &training)?;
        Self::make_dir(&dir)?;
        write_pseudo(&dir.join(PSEUDO_FILE), &pairs, &splits.vocab)?;
        let key = self.key_pseudo();
        model.to_checkpoint(c.pseudo_seed, &key).save(&dir.join(CAPTIONER_FILE))?;
        write_vocabulary(&dir.join(CAPTIONER_FILE), &splits.vocab)?;
        let record = StageRecord {
            stage: "pseudo".into(),
            key,
            dir: self.relative_dir("pseudo"),
            checkpoint: CAPTIONER_FILE.into(),
            checksum: model.params.checksum(),
            seconds: t0.elapsed().as_secs_f64(),
            curves: BTreeMap::from([("loss".to_string(), losses)]),
            counts: BTreeMap::from([
                ("pairs".to_string(), pairs.len()),
                ("candidates".to_string(), captions.len()),
            ]),
            reused: false,
        };
        self.write_record(&dir, &record)?;
        Ok(record)
    }

    /// Captioner used for inference: the pseudo-trained one when enabled, otherwise the unpaired one.
    pub fn final_checkpoint(&self) -> PathBuf {
        if self.config.use_pseudo {
            self.pseudo_dir().join(CAPTIONER_FILE)
        } else {
            self.stage_dir(Stage::III).join(CAPTIONER_FILE)
        }
    }

    fn report_path(&self) -> PathBuf {
        self.work_dir.join(format!("report-{}.json", short(&self.config.hash())))
    }

    /// Run `stages` in order and, when the captioner is available, evaluate and write the report.
    pub fn run(&self, stages: &[Stage]) -> Result<Option<RunReport>> {
        for &s in stages {
            self.run_stage(s)?;
        }
        if self.is_done(Stage::III) {
            Ok(Some(self.report()?))
        } else {
            Ok(None)
        }
    }

    /// Run every stage and report.
    pub fn run_all(&self) -> Result<RunReport> {
        self.run(&Stage::ALL)?
            .ok_or_else(|| Error::Dependency("stage III did not produce a captioner".into()))
    }

    /// Evaluate the final captioner on the test split and write `report-<hash>.json`.
    pub fn report(&self) -> Result<RunReport> {
        let final_ckpt = self.final_checkpoint();
        if !final_ckpt.is_file() {
            return Err(Error::Dependency(format!(
                "{} has not produced {}",
                Stage::III.describe(),
                final_ckpt.display()
            )));
        }
        let mut dirs = vec![(Stage::I, self.stage_dir(Stage::I))];
        if self.config.use_rel {
            dirs.push((Stage::II, self.stage_dir(Stage::II)));
        }
        dirs.push((Stage::III, self.stage_dir(Stage::III)));
        if self.config.use_pseudo {
            dirs.push((Stage::III, self.pseudo_dir()));
        }
        let mut stages = Vec::with_capacity(dirs.len());
        for (stage, dir) in dirs {
            let record = Self::read_record(&dir)?.ok_or_else(|| {
                Error::Dependency(format!("the report needs {}, whose record {} is missing", stage.describe(), dir.display()))
            })?;
            stages.push(record);
        }
        let unpaired = stages.iter().find(|s| s.stage == "III").expect("stage III record");
        let curve = |name: &str| unpaired.curves.get(name).cloned().unwrap_or_default();
        let (unrecognized_curve, reward_curve) = (curve("unrecognized"), curve("reward"));

        let t0 = Instant::now();
        let splits = self.splits()?;
        let records = infer(&final_ckpt, &splits.test.images, self.config.max_len)?;
        let test_recognitions = {
            let _phase = self.audit.enter("eval");
            self.recognitions(true)?
        };
        let references = {
            let _phase = self.audit.enter("eval");
            let store = HiddenStore::new(splits.test.manifest.clone(), self.audit.clone());
            (0..store.len())
                .map(|i| Ok(store.captions(i)?.iter().map(|s| tokenize(s)).collect()))
                .collect::<Result<Vec<Vec<Sentence>>>>()?
        };
        let candidates: Vec<Sentence> = records.iter().map(|r| tokenize(&r.caption)).collect();
        let metrics = evaluate(&candidates, &references)?;
        let ids: Vec<Vec<TokenId>> = records.iter().map(|r| splits.vocab.encode_sentence(&r.caption)).collect();
        let instances: Vec<_> = test_recognitions.iter().map(|r| r.instances.clone()).collect();
        let test_unrecognized = count_unrecognized(&ids, &instances, &splits.vocab)?;
        let report = RunReport {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            stages,
            final_checkpoint: final_ckpt
                .strip_prefix(&self.work_dir)
                .unwrap_or(&final_ckpt)
                .display()
                .to_string(),
            metrics,
            test_unrecognized,
            unrecognized_curve,
            reward_curve,
            eval_seconds: t0.elapsed().as_secs_f64(),
        };
        report.save(&self.report_path())?;
        Ok(report)
    }

    /// Micro F1 of stage II relations on the test split against its image-level relation labels.
    pub fn relation_f1(&self) -> Result<f64> {
        self.require(Stage::II, Stage::I)?;
        let path = self.stage_dir(Stage::II).join(GNN_FILE);
        if !path.is_file() {
            return Err(Error::Dependency(format!("{} has not been run", Stage::II.describe())));
        }
        let _phase = self.audit.enter("eval");
        let model = RelationModel::load(&path)?;
        let splits = self.splits()?;
        let recognitions = self.recognitions(true)?;
        let predicted = recognitions
            .iter()
            .map(|r| {
                let g = build_graph(&r.instances, &r.features)?;
                Ok(select_relations(&model.image_scores(&g)?, self.config.relation_threshold)
                    .iter()
                    .map(|p| p.relation)
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let gold: Vec<_> = splits.test.labels.iter().map(|l| l.relations.clone()).collect();
        Ok(relation_f1(&predicted, &gold))
    }
}

/// Run every row of the ablation study on top of `base`, reusing shared stage artifacts.
pub fn run_ablation(base: &Pipeline) -> Result<Vec<(Variant, RunReport)>> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        let p = base.derive(v.apply(base.config()))?;
        out.push((v, p.run_all()?));
    }
    Ok(out)
}

/// Greedy captions for `images` from a captioner checkpoint. Only the captioner is loaded.
pub fn infer(checkpoint: &Path, images: &[SceneImage], max_len: usize) -> Result<Vec<CaptionRecord>> {
    if !checkpoint.is_file() {
        return Err(Error::Dependency(format!("captioner checkpoint {} does not exist", checkpoint.display())));
    }
    let model = Captioner::load(checkpoint)?;
    let vocab = read_vocabulary(checkpoint)?;
    let seqs = caption_images(&model, images, max_len)?;
    Ok(images
        .iter()
        .zip(seqs)
        .map(|(im, s)| CaptionRecord {
            image: im.id.clone(),
            caption: vocab.decode(&s.tokens),
        })
        .collect())
}

/// Images of a dataset directory (manifest order) or of a plain directory of `.ppm` files (name order).
pub fn load_images(dir: &Path) -> Result<Vec<SceneImage>> {
    if dir.join("manifest.json").is_file() {
        let m = read_dataset(dir)?;
        return (0..m.len()).map(|i| load_image(&m, i)).collect();
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            decode_ppm(&bytes, &id, p)
        })
        .collect()
}

/// Vocabulary file stored next to a captioner checkpoint.
pub fn vocabulary_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab.json")
}

pub fn write_vocabulary(checkpoint: &Path, vocab: &Vocabulary) -> Result<()> {
    let path = vocabulary_path(checkpoint);
    fs::write(&path, crate::json::to_sorted_pretty(vocab)).map_err(|e| Error::io(&path, e))
}

pub fn read_vocabulary(checkpoint: &Path) -> Result<Vocabulary> {
    let path = vocabulary_path(checkpoint);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}
