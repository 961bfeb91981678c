use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use weakcap::captioner::{caption_images, Captioner, DecodeMode};
use weakcap::costs::cost_table;
use weakcap::dataio::{
    generate_corpus, generate_split, read_dataset, tokenize, write_dataset, AuditLog, GeneratorConfig, HiddenStore,
};
use weakcap::metrics::{evaluate, Sentence};
use weakcap::pipeline::{
    infer, load_images, parse_stages, read_vocabulary, run_ablation, write_vocabulary, CaptionRecord, Pipeline, RunConfig,
    Stage, StageRecord,
};
use weakcap::pseudo::{filter_pseudo, read_pseudo, train_supervised, write_pseudo, SupervisedTraining};
use weakcap::rng::derive_seed;
use weakcap::wsor::{compute_cam, recognize, ExtractionConfig, ObjectClassifier};
use weakcap::wsrr::{predict_relations, RelationModel};

#[derive(Parser)]
#[command(name = "weakcap", version, about = "Weakly-supervised unpaired image captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic shape-scene datasets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Annotation-cost comparison.
    #[command(subcommand)]
    Costs(CostsCmd),
    /// Object recognition from image-level labels.
    #[command(subcommand)]
    Wsor(WsorCmd),
    /// Relation recognition over instance graphs.
    #[command(subcommand)]
    Wsrr(WsrrCmd),
    /// Unpaired captioner training and caption generation.
    #[command(subcommand)]
    Caption(CaptionCmd),
    /// Pseudo-caption filtering and supervised retraining.
    #[command(subcommand)]
    Pseudo(PseudoCmd),
    /// Caption metrics.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Staged training, evaluation and ablations.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Write `train/` (with sentence corpus) and `test/` splits.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        categories: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 2000)]
        corpus: usize,
    },
}

#[derive(Subcommand)]
enum CostsCmd {
    /// Recomputed costs next to the published figures; exits 1 on any mismatch.
    Table {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat TOML file whose keys are run settings.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in settings used when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    preset: Preset,
    /// Override one setting, e.g. `uic_epochs=5`, `rel=off`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Artifact directory shared by all stages.
    #[arg(long, default_value = "runs")]
    work: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Reference,
    Toy,
}

impl RunArgs {
    fn config(&self, extra: &[String]) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => match self.preset {
                Preset::Reference => RunConfig::default(),
                Preset::Toy => RunConfig::toy(),
            },
        };
        for s in self.set.iter().chain(extra) {
            c.set(s)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn pipeline(&self, extra: &[String]) -> Result<Pipeline> {
        Ok(Pipeline::new(self.config(extra)?, &self.work)?)
    }
}

#[derive(Args)]
struct RecognitionArgs {
    /// Logit threshold for reporting a category.
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    object_threshold: f64,
    #[arg(long, default_value_t = 0.4)]
    mask_threshold: f64,
    /// Components smaller than this fraction of the image are dropped.
    #[arg(long, default_value_t = 0.01)]
    min_area: f64,
}

impl RecognitionArgs {
    fn extraction(&self) -> ExtractionConfig {
        ExtractionConfig {
            mask_threshold: self.mask_threshold,
            min_area_fraction: self.min_area,
        }
    }
}

#[derive(Subcommand)]
enum WsorCmd {
    /// Train the classifier (stage I) and print its stage record.
    Train(RunArgs),
    /// Recognised objects and instances per image, as JSON lines.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or directory of `.ppm` files.
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        recognition: RecognitionArgs,
        /// Also write each selected category's CAM as `<image>-<category>.pgm` here.
        #[arg(long)]
        dump_cams: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum WsrrCmd {
    /// Train the relation network (stage II, running stage I if needed).
    Train(RunArgs),
    /// Image-level relations per image, as JSON lines.
    Infer {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
        #[command(flatten)]
        recognition: RecognitionArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

#[derive(Subcommand)]
enum CaptionCmd {
    /// Unpaired captioner training (stage III without pseudo captions, running earlier stages if needed).
    TrainUnpaired(RunArgs),
    /// Captions per image, as JSON lines `{"image", "caption"}`.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
        /// Sampling seed; ignored in greedy mode.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum PseudoCmd {
    /// Caption images and keep those mentioning a recognised object, as JSON lines.
    Filter {
        #[arg(long)]
        captioner: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
        #[command(flatten)]
        recognition: RecognitionArgs,
    },
    /// Teacher-forced training on pseudo pairs.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Captioner that supplies the architecture, vocabulary and (without `--reinit`) the starting weights.
        #[arg(long)]
        captioner: PathBuf,
        /// Start from fresh weights instead of the given captioner.
        #[arg(long)]
        reinit: bool,
        /// Classifier whose trunk initialises the encoder after `--reinit`.
        #[arg(long, requires = "reinit")]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Corpus metrics as JSON.
    Eval {
        /// JSON lines `{"image", "caption"}`.
        #[arg(long)]
        candidates: PathBuf,
        /// JSON lines `{"image", "captions": [...]}`, or a dataset directory.
        #[arg(long)]
        references: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run stages in order; prints the report once a captioner exists, otherwise the stage records.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated stage list.
        #[arg(long, default_value = "I,II,III")]
        stages: String,
        /// Switch a component off, e.g. `uno=off`, `rel=off`, `pseudo=off`.
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Evaluate the finished run for a configuration.
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Train and evaluate every ablation row.
    Ablation {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn print_json_lines<T: Serialize>(items: &[T]) -> Result<()> {
    let mut out = io::stdout().lock();
    for it in items {
        writeln!(out, "{}", serde_json::to_string(it)?)?;
    }
    Ok(())
}

fn print_json<T: Serialize>(item: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(item)?);
    Ok(())
}

fn category_names(images: &Path, n: usize) -> Vec<String> {
    let from_manifest = read_dataset(images).ok().map(|m| m.objects.names().to_vec());
    let from_generator = || GeneratorConfig::with_categories(n).object_registry().ok().map(|r| r.names().to_vec());
    from_manifest
        .or_else(from_generator)
        .filter(|v| v.len() == n)
        .unwrap_or_else(|| (0..n).map(|k| format!("category{k}")).collect())
}

fn relation_names(images: &Path, n: usize) -> Vec<String> {
    read_dataset(images)
        .ok()
        .map(|m| m.relations.names().to_vec())
        .or_else(|| GeneratorConfig::default().relation_registry().ok().map(|r| r.names().to_vec()))
        .filter(|v| v.len() == n)
        .unwrap_or_else(|| (0..n).map(|k| format!("relation{k}")).collect())
}

fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn data(cmd: DataCmd) -> Result<()> {
    let DataCmd::Generate { out, categories, seed, train, test, corpus } = cmd;
    let gen = GeneratorConfig::with_categories(categories);
    gen.validate()?;
    let (objects, relations) = (gen.object_registry()?, gen.relation_registry()?);
    let size = (gen.height, gen.width);
    let records = generate_split(&gen, seed, "train", train)?;
    let sentences = generate_corpus(&gen, seed, corpus)?;
    write_dataset(&out.join("train"), "train", &objects, &relations, size, &records, &sentences)?;
    let records = generate_split(&gen, seed, "test", test)?;
    write_dataset(&out.join("test"), "test", &objects, &relations, size, &records, &[])?;
    eprintln!("wrote {train} training images, {corpus} sentences and {test} test images to {}", out.display());
    Ok(())
}

fn costs(cmd: CostsCmd) -> Result<bool> {
    let CostsCmd::Table { json } = cmd;
    let table = cost_table();
    let ok = table.iter().filter(|l| l.micros.is_some()).all(|l| l.matches());
    if json {
        print_json(&table)?;
        return Ok(ok);
    }
    println!("{:<16} {:>10} {:>10}  check", "approach", "computed", "published");
    for l in &table {
        let check = match l.micros {
            None => "-",
            Some(_) if l.matches() => "PASS",
            Some(_) => "FAIL",
        };
        println!("{:<16} {:>10} {:>10}  {check}", l.approach, l.display, l.published);
    }
    let get = |n: &str| table.iter().find(|l| l.approach == n).and_then(|l| l.micros);
    if let (Some(gu), Some(ours)) = (get("Gu et al."), get("WS-UIC")) {
        println!("Gu et al. / WS-UIC = {:.2}", gu as f64 / ours as f64);
    }
    Ok(ok)
}

fn stage_records(p: &Pipeline, stages: &[Stage]) -> Result<Vec<StageRecord>> {
    let mut out = Vec::new();
    for &s in stages {
        out.extend(p.run_stage(s)?);
    }
    Ok(out)
}

fn wsor(cmd: WsorCmd) -> Result<()> {
    match cmd {
        WsorCmd::Train(run) => print_json_lines(&stage_records(&run.pipeline(&[])?, &[Stage::I])?),
        WsorCmd::Infer { checkpoint, images: dir, recognition, dump_cams } => {
            let model = ObjectClassifier::load(&checkpoint)?;
            let images = load_images(&dir)?;
            let names = category_names(&dir, model.config.num_categories);
            if let Some(d) = &dump_cams {
                fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            }
            let ex = recognition.extraction();
            let mut lines = Vec::with_capacity(images.len());
            for im in &images {
                let r = recognize(im, &model, recognition.object_threshold, &ex)?;
                if let Some(d) = &dump_cams {
                    for &(c, _) in &r.objects {
                        let cam = compute_cam(r.features.coarsest(), model.phi(), c)?;
                        let up = cam.upsample(im.height(), im.width());
                        write_pgm(&d.join(format!("{}-{}.pgm", im.id, names[c])), im.height(), im.width(), &up)?;
                    }
                }
                let instances: Vec<_> = r
                    .instances
                    .iter()
                    .map(|i| json!({ "category": names[i.category], "score": i.score, "area": i.mask.area(), "bbox": i.mask.bbox() }))
                    .collect();
                let objects: Vec<_> = r.objects.iter().map(|&(c, l)| json!([names[c], l])).collect();
                lines.push(json!({ "image": im.id, "objects": objects, "instances": instances }));
            }
            print_json_lines(&lines)
        }
    }
}

fn wsrr(cmd: WsrrCmd) -> Result<()> {
    match cmd {
        WsrrCmd::Train(run) => print_json_lines(&stage_records(&run.pipeline(&[])?, &[Stage::I, Stage::II])?),
        WsrrCmd::Infer { classifier, checkpoint, images: dir, threshold, recognition } => {
            let wsor = ObjectClassifier::load(&classifier)?;
            let model = RelationModel::load(&checkpoint)?;
            let images = load_images(&dir)?;
            let names = relation_names(&dir, model.config.num_relations);
            let ex = recognition.extraction();
            let mut lines = Vec::with_capacity(images.len());
            for im in &images {
                let r = recognize(im, &wsor, recognition.object_threshold, &ex)?;
                let rel: Vec<_> = predict_relations(&r, &model, threshold)?
                    .iter()
                    .map(|p| json!([names[p.relation], p.score]))
                    .collect();
                lines.push(json!({ "image": im.id, "relations": rel }));
            }
            print_json_lines(&lines)
        }
    }
}

fn caption(cmd: CaptionCmd) -> Result<()> {
    match cmd {
        CaptionCmd::TrainUnpaired(run) => {
            let p = run.pipeline(&["pseudo=off".into()])?;
            let mut stages = vec![Stage::I];
            if p.config().use_rel {
                stages.push(Stage::II);
            }
            stages.push(Stage::III);
            print_json_lines(&stage_records(&p, &stages)?)
        }
        CaptionCmd::Infer { checkpoint, images, mode, max_len, seed } => {
            let images = load_images(&images)?;
            let records = match mode {
                Mode::Greedy => infer(&checkpoint, &images, max_len)?,
                Mode::Sample => {
                    let model = Captioner::load(&checkpoint)?;
                    let vocab = read_vocabulary(&checkpoint)?;
                    images
                        .iter()
                        .enumerate()
                        .map(|(k, im)| {
                            let f = model.encode_image(im)?;
                            let s = model.decode(&f, DecodeMode::Sample, max_len, derive_seed(seed, "caption-sample", k as u64))?;
                            Ok(CaptionRecord { image: im.id.clone(), caption: vocab.decode(&s.tokens) })
                        })
                        .collect::<weakcap::Result<Vec<_>>>()?
                }
            };
            print_json_lines(&records)
        }
    }
}

fn pseudo(cmd: PseudoCmd) -> Result<()> {
    match cmd {
        PseudoCmd::Filter { captioner, classifier, images, out, max_len, recognition } => {
            let model = Captioner::load(&captioner)?;
            let vocab = read_vocabulary(&captioner)?;
            let wsor = ObjectClassifier::load(&classifier)?;
            let images = load_images(&images)?;
            let captions: Vec<_> = caption_images(&model, &images, max_len)?.into_iter().map(|s| s.tokens).collect();
            let ex = recognition.extraction();
            let instances = images
                .iter()
                .map(|im| Ok(recognize(im, &wsor, recognition.object_threshold, &ex)?.instances))
                .collect::<Result<Vec<_>>>()?;
            let ids: Vec<String> = images.iter().map(|im| im.id.clone()).collect();
            let pairs = filter_pseudo(&ids, &captions, &instances, &vocab, &captioner.display().to_string())?;
            write_pseudo(&out, &pairs, &vocab)?;
            eprintln!("kept {} of {} captions", pairs.len(), captions.len());
            Ok(())
        }
        PseudoCmd::Train { pairs, images, captioner, reinit, classifier, out, epochs, lr, batch_size, seed, max_len } => {
            let base = Captioner::load(&captioner)?;
            let vocab = read_vocabulary(&captioner)?;
            let pairs = read_pseudo(&pairs, &vocab, max_len)?;
            let images = load_images(&images)?;
            let start = if reinit {
                let mut m = Captioner::new(base.config.clone(), derive_seed(seed, "pseudo-init", 0))?;
                if let Some(c) = classifier {
                    m.init_encoder_from(&ObjectClassifier::load(&c)?)?;
                }
                m
            } else {
                base
            };
            let training = SupervisedTraining { epochs, lr, batch_size, seed };
            let (model, losses) = train_supervised(start, &pairs, &images, &training)?;
            model.to_checkpoint(seed, "").save(&out)?;
            write_vocabulary(&out, &vocab)?;
            print_json(&json!({ "checkpoint": out, "pairs": pairs.len(), "loss": losses }))
        }
    }
}

#[derive(Deserialize)]
struct ReferenceLine {
    image: String,
    captions: Vec<String>,
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), k + 1)))
        .collect()
}

fn references(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    if path.is_dir() {
        let manifest = read_dataset(path)?;
        let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        let audit = AuditLog::new();
        let _phase = audit.enter("eval");
        let store = HiddenStore::new(manifest, audit.clone());
        return ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| Ok((id, store.captions(i)?)))
            .collect();
    }
    Ok(read_json_lines::<ReferenceLine>(path)?.into_iter().map(|r| (r.image, r.captions)).collect())
}

fn metrics(cmd: MetricsCmd) -> Result<()> {
    let MetricsCmd::Eval { candidates, references: refs } = cmd;
    let cands: Vec<CaptionRecord> = read_json_lines(&candidates)?;
    let refs: std::collections::HashMap<String, Vec<String>> = references(&refs)?.into_iter().collect();
    let mut cand_tokens: Vec<Sentence> = Vec::with_capacity(cands.len());
    let mut ref_tokens: Vec<Vec<Sentence>> = Vec::with_capacity(cands.len());
    for c in &cands {
        let Some(r) = refs.get(&c.image) else {
            bail!("no references for image {}", c.image);
        };
        cand_tokens.push(tokenize(&c.caption));
        ref_tokens.push(r.iter().map(|s| tokenize(s)).collect());
    }
    print_json(&evaluate(&cand_tokens, &ref_tokens)?)
}

fn pipeline(cmd: PipelineCmd) -> Result<()> {
    match cmd {
        PipelineCmd::Run { run, stages, ablate } => {
            let p = run.pipeline(&ablate)?;
            let stages = parse_stages(&stages)?;
            let records = stage_records(&p, &stages)?;
            if p.is_done(Stage::III) {
                print_json(&p.report()?)
            } else {
                print_json_lines(&records)
            }
        }
        PipelineCmd::Report { run, ablate } => print_json(&run.pipeline(&ablate)?.report()?),
        PipelineCmd::Ablation { run } => {
            let p = run.pipeline(&[])?;
            p.run_stage(Stage::I)?;
            p.run_stage(Stage::II)?;
            let rows = run_ablation(&p)?;
            println!("{:<14} {:>7} {:>7} {:>7} {:>13}", "variant", "BLEU-4", "ROUGE-L", "CIDEr", "unrecognised");
            for (v, r) in &rows {
                println!(
                    "{:<14} {:>7.4} {:>7.4} {:>7.4} {:>13.4}",
                    v.name(),
                    r.metrics.bleu4,
                    r.metrics.rouge_l,
                    r.metrics.cider,
                    r.test_unrecognized
                );
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<weakcap::Error>() {
        Some(weakcap::Error::Dependency(_)) => 3,
        Some(weakcap::Error::Config(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Data(c) => data(c).map(|_| true),
        Command::Costs(c) => costs(c),
        Command::Wsor(c) => wsor(c).map(|_| true),
        Command::Wsrr(c) => wsrr(c).map(|_| true),
        Command::Caption(c) => caption(c).map(|_| true),
        Command::Pseudo(c) => pseudo(c).map(|_| true),
        Command::Metrics(c) => metrics(c).map(|_| true),
        Command::Pipeline(c) => pipeline(c).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
