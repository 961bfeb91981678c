//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Set `WEAKCAP_ACCEPTANCE_DIR` to keep and reuse
//! trained stages between invocations.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakcap::captioner::{
    concept_reward, token_loss, uno_loss, Captioner, CaptionerConfig, Discriminator, DiscriminatorConfig,
    RewardWeights,
};
use weakcap::costs::cost_table;
use weakcap::dataio::{build_vocabulary, tokenize, GeneratorConfig, HiddenField, SceneImage, Vocabulary, BOS, EOS};
use weakcap::mask::Mask;
use weakcap::metrics::{cider_scores, rouge_l};
use weakcap::nn::{max_gradient_error, Graph, ParamSet, Tensor};
use weakcap::pipeline::{infer, load_images, run_ablation, Pipeline, RunConfig, Stage, Variant};
use weakcap::pseudo::filter_pseudo;
use weakcap::wsor::{compute_cam, ClassifierConfig, FeatureMaps, Instance, ObjectClassifier};
use weakcap::wsrr::{
    aggregate_edges, bn_fixed, build_graph, residual_block, GnnConfig, RelationModel, RelationPrediction,
};

/// Relative finite-difference tolerance for every gradient check.
const GRAD_TOL: f64 = 1e-4;
/// Adjacent ablation rows may tie within this many toy-CIDEr points (100 × CIDEr).
const CIDER_TIE_POINTS: f64 = 0.5;
const SEEDS: u64 = 5;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn vocab() -> Vocabulary {
    let gen = GeneratorConfig::with_categories(4);
    let toks: Vec<Vec<String>> = ["a circle above a square", "a triangle left of a diamond", "the"]
        .iter()
        .map(|s| tokenize(s))
        .collect();
    build_vocabulary(&toks, 1).with_concepts(&gen.object_registry().unwrap(), &gen.relation_registry().unwrap())
}

fn instance(v: &Vocabulary, word: &str, score: f64) -> Instance {
    Instance {
        category: v.object_category(v.id(word).unwrap()).unwrap(),
        mask: Mask::full(4, 4),
        score,
    }
}

fn costs() -> Outcome {
    let t = cost_table();
    let priced: Vec<_> = t.iter().filter(|l| l.micros.is_some()).collect();
    ensure(priced.len() == 6, format!("{} priced rows", priced.len()))?;
    for l in &priced {
        ensure(l.matches(), format!("{}: {} vs {}", l.approach, l.display, l.published))?;
    }
    let get = |n: &str| t.iter().find(|l| l.approach == n).and_then(|l| l.micros).unwrap() as f64;
    let ratio = get("Gu et al.") / get("WS-UIC");
    ensure((29.0..=31.0).contains(&ratio), format!("ratio {ratio}"))?;
    Ok(format!(
        "{}; ratio {ratio:.2}",
        priced.iter().map(|l| l.display.as_str()).collect::<Vec<_>>().join(", ")
    ))
}

fn formula_fixtures() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let f = Tensor::uniform(&[6, 5, 5], 1.0, &mut rng);
        let phi = Tensor::uniform(&[3, 6], 1.0, &mut rng);
        let cam = compute_cam(&f, &phi, 1).unwrap();
        let max = cam.map.iter().copied().fold(0.0, f64::max);
        ensure(max == 0.0 || (max - 1.0).abs() <= 1e-6, format!("CAM max {max}"))?;
    }
    ensure(
        bn_fixed(&[1.0, 2.0, 3.0], &[2.0; 3], &[1.0; 3]).unwrap() == vec![-1.0, 0.0, 1.0],
        "bn_fixed fixture",
    )?;
    let p = ParamSet::new();
    let mut g = Graph::new(&p);
    let h = g.input(Tensor::vector(vec![0.5, -1.25, 3.0]));
    let r = residual_block(&mut g, h, |g, x| g.scale(x, 0.0)).unwrap();
    ensure(g.value(r).data() == g.value(h).data(), "residual identity")?;

    let v = vocab();
    let w = RewardWeights::default();
    let circle = [BOS, v.id("a").unwrap(), v.id("circle").unwrap()];
    let r1 = concept_reward(&circle, 2, &[instance(&v, "circle", 0.8)], &[], &v, &RewardWeights { alpha: 1.0, ..w });
    ensure((r1 - 0.8).abs() < 1e-12, format!("object reward {r1}"))?;
    let above = [BOS, v.id("circle").unwrap(), v.id("above").unwrap()];
    let rel = GeneratorConfig::default().relation_registry().unwrap().id("above").unwrap();
    let r2 = concept_reward(&above, 2, &[], &[RelationPrediction { relation: rel, score: 0.9 }], &v, &w);
    ensure((r2 - 0.45).abs() < 1e-12, format!("relation reward {r2}"))?;
    ensure(concept_reward(&circle, 1, &[], &[], &v, &w) == 0.0, "empty reward")?;
    let mut scores = vec![0.9; 4];
    scores[v.object_category(v.id("triangle").unwrap()).unwrap()] = 0.3;
    let present = [instance(&v, "circle", 0.8)];
    let u = uno_loss(v.id("triangle").unwrap(), &present, &v, 1.0, &scores);
    ensure((u - 0.7).abs() < 1e-12, format!("UnO {u}"))?;
    ensure(uno_loss(v.id("circle").unwrap(), &present, &v, 1.0, &scores) == 0.0, "UnO on recognised object")?;
    ensure(uno_loss(v.id("the").unwrap(), &present, &v, 1.0, &scores) == 0.0, "UnO on non-object word")?;
    ensure(
        (token_loss(0.8, 0.0) + 0.8).abs() < 1e-15 && (token_loss(0.0, 0.7) - 0.7).abs() < 1e-15 && token_loss(0.0, 0.0) == 0.0,
        "combined loss",
    )?;
    Ok("CAM, bn_fixed, residual, reward 0.8/0.45/0, UnO 0.7/0/0, loss -0.8/0.7/0".into())
}

fn with_biases(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.iter().filter(|(_, n, _)| n.ends_with(".b")).map(|(id, _, _)| id).collect();
    for id in ids {
        let shape = params.get(id).shape().to_vec();
        *params.get_mut(id) = Tensor::uniform(&shape, 0.3, &mut rng);
    }
}

fn tiny_image(seed: u64) -> SceneImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SceneImage::new("g", 8, 8, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn random_maps(rng: &mut ChaCha8Rng) -> FeatureMaps {
    FeatureMaps {
        scales: [(2, 16), (3, 8), (3, 4), (4, 2)]
            .iter()
            .map(|&(c, s)| Tensor::uniform(&[c, s, s], 1.0, rng))
            .collect(),
    }
}

fn random_instances(rng: &mut ChaCha8Rng, n: usize) -> Vec<Instance> {
    (0..n)
        .map(|k| {
            let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let (y0, x0) = (rng.gen_range(0..16 - h), rng.gen_range(0..16 - w));
            let mut m = Mask::empty(16, 16);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    m.set(y, x, true);
                }
            }
            Instance { category: k % 3, mask: m, score: 0.9 }
        })
        .collect()
}

fn captioner_loss(m: &Captioner, img: &SceneImage, tokens: &[usize]) -> f64 {
    let mut g = Graph::new(&m.params);
    let f = m.encode_node(&mut g, img, None).unwrap();
    -m.teacher_forced(&mut g, f, tokens).iter().map(|&v| g.value(v).item()).sum::<f64>()
}

fn captioner_error(freeze: bool) -> f64 {
    let mut c = CaptionerConfig::new(7, [2, 2, 3, 3]);
    (c.latent, c.embed, c.hidden, c.grid, c.freeze_encoder) = (4, 3, 4, 1, freeze);
    let mut m = Captioner::new(c, 3).unwrap();
    with_biases(&mut m.params, 4);
    let img = tiny_image(5);
    let tokens = [BOS, 4, 6, 5, EOS];
    let mut g = Graph::new(&m.params);
    let f = m.encode_node(&mut g, &img, None).unwrap();
    let terms: Vec<_> = m.teacher_forced(&mut g, f, &tokens).iter().map(|&v| (v, -1.0)).collect();
    let l = g.weighted_sum(&terms);
    let grads = g.backward(l).params;
    if freeze {
        // frozen encoder: only decoder weights carry gradient, so compare against a loss with fixed pooled features
        let pooled = m.pooled(&img).unwrap();
        max_gradient_error(&m.params, &grads, &|p| {
            let mm = Captioner { params: p.clone(), ..m.clone() };
            let mut g = Graph::new(&mm.params);
            let f = mm.encode_node(&mut g, &img, Some(&pooled)).unwrap();
            -mm.teacher_forced(&mut g, f, &tokens).iter().map(|&v| g.value(v).item()).sum::<f64>()
        })
    } else {
        max_gradient_error(&m.params, &grads, &|p| captioner_loss(&Captioner { params: p.clone(), ..m.clone() }, &img, &tokens))
    }
}

fn gradients() -> Outcome {
    let mut errs = Vec::new();

    let model = ObjectClassifier::new(ClassifierConfig::new([3, 3, 4, 4], 3), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Tensor::uniform(&[3, 8, 8], 1.0, &mut rng);
    let y = [1.0, 0.0, 1.0];
    let (_, grads) = model.loss_and_grads(&img, &y);
    errs.push((
        "classifier",
        max_gradient_error(&model.params, &grads, &|p| {
            ObjectClassifier { params: p.clone(), ..model.clone() }.mean_loss(&[(img.clone(), y.to_vec())])
        }),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let maps = random_maps(&mut rng);
    let g2 = build_graph(&random_instances(&mut rng, 2), &maps).unwrap();
    let small = GnnConfig { node_dim: 4, edge_dim: 3, hidden: 5, blocks: 2, ..GnnConfig::new(12, 2) };
    for (name, cfg) in [("GNN-BR", small.clone()), ("plain GNN", small.plain())] {
        let mut m = RelationModel::new(cfg, 3).unwrap();
        m.warm_up(&[&g2]).unwrap();
        let y = [1.0, 0.0];
        let (_, grads) = m.loss_and_grads(&g2, &y).unwrap();
        errs.push((
            name,
            max_gradient_error(&m.params, &grads, &|p| RelationModel { params: p.clone(), ..m.clone() }.mean_loss(&[(&g2, &y)])),
        ));
    }

    errs.push(("encoder", captioner_error(false)));
    errs.push(("decoder", captioner_error(true)));

    let d = Discriminator::new(DiscriminatorConfig { vocab_size: 7, embed: 3, hidden: 4 }, 5).unwrap();
    let s = [BOS, 4, 5, 6, EOS];
    let mut g = Graph::new(&d.params);
    let prob = d.forward(&mut g, &s).unwrap();
    let l = g.bce_prob(prob, &[1.0], 1e-7);
    let grads = g.backward(l).params;
    errs.push((
        "discriminator",
        max_gradient_error(&d.params, &grads, &|p| -Discriminator { params: p.clone(), ..d.clone() }.score(&s).unwrap().ln()),
    ));

    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(errs.iter().all(|(_, e)| *e < GRAD_TOL), detail.clone())?;
    Ok(detail)
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let f = Tensor::uniform(&[5, 6, 6], 1.0, &mut rng);
        let phi = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        for c in 0..3 {
            let cam = compute_cam(&f, &phi, c).unwrap();
            let raw: Vec<f64> = (0..36)
                .map(|p| (0..5).map(|ch| phi.data()[c * 5 + ch] * f.data()[ch * 36 + p]).sum())
                .collect();
            let m = raw.iter().copied().fold(f64::MIN, f64::max);
            for (a, r) in cam.map.iter().zip(&raw) {
                let want = if m > 0.0 { (r / m).max(0.0) } else { 0.0 };
                ensure((a - want).abs() < 1e-6, "CAM differs from brute force")?;
            }
        }
    }

    let maps = random_maps(&mut rng);
    for n in 0..6 {
        let g = build_graph(&random_instances(&mut rng, n), &maps).unwrap();
        ensure(g.edges.len() == n * n.saturating_sub(1), format!("{} edges for {n} nodes", g.edges.len()))?;
    }

    for _ in 0..50 {
        let (e, r) = (rng.gen_range(0..6), rng.gen_range(1..5));
        let probs: Vec<Vec<f64>> = (0..e).map(|_| (0..=r).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let got = aggregate_edges(&probs, r);
        for k in 0..r {
            let mut best = 0.0f64;
            for p in &probs {
                if p[k] > best {
                    best = p[k];
                }
            }
            ensure(got[k] == best, "aggregation differs from brute-force max")?;
        }
    }

    let v = vocab();
    let words = ["circle", "square", "triangle", "diamond"];
    for _ in 0..30 {
        let mut caps = Vec::new();
        let mut inst = Vec::new();
        for _ in 0..10 {
            let mut c = vec![BOS];
            c.extend((0..rng.gen_range(0..6)).map(|_| rng.gen_range(4..v.len())));
            caps.push(c);
            let present: Vec<Instance> = words.iter().filter(|_| rng.gen_bool(0.4)).map(|w| instance(&v, w, 0.9)).collect();
            inst.push(present);
        }
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let kept: Vec<String> = filter_pseudo(&ids, &caps, &inst, &v, "p").unwrap().into_iter().map(|p| p.image).collect();
        let want: Vec<String> = (0..10)
            .filter(|&i| {
                caps[i].iter().any(|&t| {
                    let word = v.token(t);
                    words.contains(&word) && inst[i].iter().any(|x| v.object_category(t) == Some(x.category))
                })
            })
            .map(|i| i.to_string())
            .collect();
        ensure(kept == want, "pseudo filter differs from brute-force scan")?;
    }

    for _ in 0..30 {
        let c: Vec<common::S> = (0..4).map(|_| common::random_sentence(&mut rng, 5)).collect();
        let r: Vec<Vec<common::S>> = (0..4)
            .map(|_| (0..2).map(|_| common::random_sentence(&mut rng, 5)).collect())
            .collect();
        let got = rouge_l(&c, &r).unwrap();
        ensure((got - common::rouge_oracle(&c, &r)).abs() < 1e-12, "ROUGE-L differs from LCS oracle")?;
        let cider = cider_scores(&c, &r).unwrap();
        for (a, b) in cider.iter().zip(common::cider_oracle(&c, &r)) {
            ensure((a - b).abs() < 1e-6, format!("CIDEr {a} vs oracle {b}"))?;
        }
    }
    Ok("CAM, edge count, aggregation, pseudo filter, ROUGE-L, CIDEr".into())
}

struct Runs {
    base: Pipeline,
    full_report_hash: Option<String>,
}

fn relation_direction(runs: &Runs) -> Outcome {
    let base = &runs.base;
    base.run_stage(Stage::I).map_err(|e| e.to_string())?;
    let mut br = Vec::new();
    let mut plain = Vec::new();
    for seed in 0..SEEDS {
        for (flag, out) in [(true, &mut br), (false, &mut plain)] {
            let cfg = RunConfig { gnn_seed: seed, gnn_batch_norm: flag, gnn_residual: flag, ..base.config().clone() };
            let p = base.derive(cfg).map_err(|e| e.to_string())?;
            p.run_stage(Stage::II).map_err(|e| e.to_string())?;
            out.push(p.relation_f1().map_err(|e| e.to_string())?);
        }
    }
    let (mb, mp) = (median(br.clone()), median(plain.clone()));
    let detail = format!("median F1 GNN-BR {mb:.3} vs plain {mp:.3} (BR {br:.3?}, plain {plain:.3?})");
    ensure(mb >= mp, detail.clone())?;
    Ok(detail)
}

fn final_unrecognized(p: &Pipeline) -> std::result::Result<f64, String> {
    let records = p.run_stage(Stage::III).map_err(|e| e.to_string())?;
    records[0]
        .curves
        .get("unrecognized")
        .and_then(|c| c.last().copied())
        .ok_or_else(|| "stage III recorded no unrecognised-object curve".to_string())
}

fn uno_direction(runs: &Runs) -> Outcome {
    let base = &runs.base;
    base.run_stage(Stage::I).map_err(|e| e.to_string())?;
    base.run_stage(Stage::II).map_err(|e| e.to_string())?;
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..SEEDS {
        for (variant, out) in [(Variant::ObjUnoRel, &mut with), (Variant::ObjRel, &mut without)] {
            let cfg = RunConfig { uic_seed: seed, ..variant.apply(base.config()) };
            out.push(final_unrecognized(&base.derive(cfg).map_err(|e| e.to_string())?)?);
        }
    }
    let (mw, mo) = (median(with.clone()), median(without.clone()));
    let detail = format!("median final-epoch count with UnO {mw:.4} vs without {mo:.4} (with {with:.3?}, without {without:.3?})");
    ensure(mw <= mo, detail.clone())?;
    Ok(detail)
}

fn ablation_order(runs: &mut Runs) -> Outcome {
    let base = &runs.base;
    base.run_stage(Stage::I).map_err(|e| e.to_string())?;
    base.run_stage(Stage::II).map_err(|e| e.to_string())?;
    let reports = run_ablation(base).map_err(|e| e.to_string())?;
    let points = |v: Variant| 100.0 * reports.iter().find(|(x, _)| *x == v).unwrap().1.metrics.cider;
    let chain = [Variant::Obj, Variant::ObjRel, Variant::ObjUnoRel, Variant::Full];
    let detail = reports
        .iter()
        .map(|(v, r)| format!("{} {:.1}", v.name(), 100.0 * r.metrics.cider))
        .collect::<Vec<_>>()
        .join(", ");
    runs.full_report_hash = reports.iter().find(|(v, _)| *v == Variant::Full).map(|(_, r)| r.hash());
    for w in chain.windows(2) {
        ensure(
            points(w[0]) <= points(w[1]) + CIDER_TIE_POINTS,
            format!("{} above {}: {detail}", w[0].name(), w[1].name()),
        )?;
    }
    ensure(points(Variant::Obj) < points(Variant::Full), format!("no gain from Obj to WS-UIC: {detail}"))?;
    Ok(format!("toy-CIDEr {detail}"))
}

fn rename(from: &Path, to: &Path) -> std::result::Result<(), String> {
    fs::rename(from, to).map_err(|e| format!("rename {}: {e}", from.display()))
}

fn unpaired_contract(runs: &Runs) -> Outcome {
    let base = &runs.base;
    let full = base.derive(Variant::Full.apply(base.config())).map_err(|e| e.to_string())?;
    full.run_all().map_err(|e| e.to_string())?;
    let audit = full.audit();
    let reads: usize = [HiddenField::Captions, HiddenField::Triplets, HiddenField::Instances]
        .iter()
        .map(|&f| audit.count(f, "train"))
        .sum();
    let eval_reads = audit.count(HiddenField::Captions, "eval");
    ensure(reads == 0, format!("{reads} hidden reads during training"))?;

    let test_dir = full.work_dir().join(
        fs::read_dir(full.work_dir())
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .find(|n| n.starts_with("data-"))
            .ok_or("no generated data directory")?,
    );
    let images = load_images(&test_dir.join("test")).map_err(|e| e.to_string())?;
    let parked: Vec<(PathBuf, PathBuf)> = [Stage::I, Stage::II]
        .iter()
        .map(|&s| {
            let d = full.stage_dir(s);
            let aside = d.with_extension("parked");
            (d, aside)
        })
        .collect();
    for (d, aside) in &parked {
        rename(d, aside)?;
    }
    let (wsor, wsrr) = (weakcap::wsor::invocations(), weakcap::wsrr::invocations());
    let captions = infer(&full.final_checkpoint(), &images, full.config().max_len);
    let calls = (weakcap::wsor::invocations() - wsor, weakcap::wsrr::invocations() - wsrr);
    for (d, aside) in &parked {
        rename(aside, d)?;
    }
    let captions = captions.map_err(|e| format!("inference without stages I/II: {e}"))?;
    ensure(captions.len() == images.len(), "caption count")?;
    ensure(calls == (0, 0), format!("inference called recognisers {calls:?}"))?;
    Ok(format!(
        "0 training reads, {eval_reads} evaluation caption reads; {} captions with stages I/II removed",
        captions.len()
    ))
}

fn determinism(runs: &Runs) -> Outcome {
    let first = runs.full_report_hash.clone().ok_or("criterion 7 did not produce a WS-UIC report")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = Pipeline::new(Variant::Full.apply(runs.base.config()), dir.path()).map_err(|e| e.to_string())?;
    let second = p.run_all().map_err(|e| e.to_string())?.hash();
    ensure(first == second, format!("{first} vs {second}"))?;
    Ok(format!("report hash {}", &first[..16]))
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t0.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("criterion {id} [{name}]: {} ({detail}) [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    let kept = std::env::var_os("WEAKCAP_ACCEPTANCE_DIR").map(PathBuf::from);
    let temp = tempfile::tempdir().expect("temporary directory");
    let work = kept.unwrap_or_else(|| temp.path().to_path_buf());
    let mut runs = Runs {
        base: Pipeline::new(RunConfig::toy(), &work).expect("toy configuration is valid"),
        full_report_hash: None,
    };

    let mut ok = true;
    ok &= run(1, "cost table", costs);
    ok &= run(2, "formula fixtures", formula_fixtures);
    ok &= run(3, "gradient checks", gradients);
    ok &= run(4, "oracle equivalences", oracles);
    ok &= run(5, "GNN-BR vs plain GNN", || relation_direction(&runs));
    ok &= run(6, "UnO lowers unrecognised objects", || uno_direction(&runs));
    ok &= run(7, "ablation ordering", || ablation_order(&mut runs));
    ok &= run(8, "unpaired contract", || unpaired_contract(&runs));
    ok &= run(9, "determinism", || determinism(&runs));
    if !ok {
        std::process::exit(1);
    }
}
