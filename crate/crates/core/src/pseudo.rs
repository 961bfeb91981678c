//! Pseudo-caption self-training: keep generated captions that mention a
//! recognised object, retrain a supervised captioner on them, and count
//! object words the recogniser never saw.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::captioner::{frame_sentence, Captioner};
use crate::dataio::{SceneImage, TokenId, Vocabulary, BOS};
use crate::error::{contract, Error, Result};
use crate::nn::{Adam, Gradients, Graph};
use crate::rng;
use crate::wsor::Instance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoPair {
    pub image: String,
    /// `<bos> … <eos>` token ids.
    pub caption: Vec<TokenId>,
    /// Identifier of the checkpoint that generated the caption.
    pub provenance: String,
}

fn mentions_recognised(tokens: &[TokenId], instances: &[Instance], vocab: &Vocabulary) -> bool {
    tokens
        .iter()
        .filter_map(|&t| vocab.object_category(t))
        .any(|c| instances.iter().any(|i| i.category == c))
}

/// Keep, in order, the captions with at least one object word recognised in their image.
pub fn filter_pseudo(
    image_ids: &[String],
    captions: &[Vec<TokenId>],
    instances: &[Vec<Instance>],
    vocab: &Vocabulary,
    provenance: &str,
) -> Result<Vec<PseudoPair>> {
    contract!(
        image_ids.len() == captions.len() && captions.len() == instances.len(),
        "image ids, captions and instance sets differ in length"
    );
    Ok(image_ids
        .iter()
        .zip(captions)
        .zip(instances)
        .filter(|((_, c), inst)| mentions_recognised(c, inst, vocab))
        .map(|((id, c), _)| PseudoPair {
            image: id.clone(),
            caption: c.clone(),
            provenance: provenance.to_string(),
        })
        .collect())
}

/// Number of object-word tokens whose category has no recognised instance.
pub fn unrecognized_in(tokens: &[TokenId], instances: &[Instance], vocab: &Vocabulary) -> usize {
    tokens
        .iter()
        .filter_map(|&t| vocab.object_category(t))
        .filter(|&c| !instances.iter().any(|i| i.category == c))
        .count()
}

/// Mean unrecognised-object count per caption.
pub fn count_unrecognized(captions: &[Vec<TokenId>], instances: &[Vec<Instance>], vocab: &Vocabulary) -> Result<f64> {
    contract!(!captions.is_empty(), "no captions to count");
    contract!(captions.len() == instances.len(), "captions and instance sets differ in length");
    let total: usize = captions
        .iter()
        .zip(instances)
        .map(|(c, i)| unrecognized_in(c, i, vocab))
        .sum();
    Ok(total as f64 / captions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SupervisedTraining {
    fn default() -> Self {
        SupervisedTraining {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mean per-token cross-entropy of `model` on `(image, caption)` examples.
pub fn cross_entropy(model: &Captioner, examples: &[(&SceneImage, &[TokenId])]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (im, cap) in examples {
        let mut g = Graph::new(&model.params);
        let f = model.encode_node(&mut g, im, None)?;
        for lp in model.teacher_forced(&mut g, f, cap) {
            sum -= g.value(lp).item();
            count += 1;
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Image, its cached pooled features when the encoder is frozen, and a caption.
pub type Example<'a> = (&'a SceneImage, Option<&'a [f64]>, &'a [TokenId]);

/// One optimiser step of teacher-forced cross-entropy; returns the loss before the step.
pub fn supervised_step(
    model: &mut Captioner,
    opt: &mut Adam,
    batch: &[Example],
) -> Result<f64> {
    let mut grads = Gradients::zeros_like(&model.params);
    let (mut loss, mut tokens) = (0.0, 0usize);
    for (im, pooled, cap) in batch {
        let mut g = Graph::new(&model.params);
        let f = model.encode_node(&mut g, im, *pooled)?;
        let lps = model.teacher_forced(&mut g, f, cap);
        if lps.is_empty() {
            continue;
        }
        let terms: Vec<_> = lps.iter().map(|&v| (v, -1.0)).collect();
        let l = g.weighted_sum(&terms);
        loss += g.value(l).item();
        tokens += lps.len();
        grads.accumulate(&g.backward(l).params);
    }
    if tokens == 0 {
        return Ok(0.0);
    }
    grads.scale(1.0 / tokens as f64);
    grads.clip_norm(5.0);
    opt.step(&mut model.params, &grads)?;
    Ok(loss / tokens as f64)
}

/// Teacher-forced training of `model` (normally freshly initialised) on pseudo pairs.
/// Returns the model and the mean per-token cross-entropy of each epoch.
pub fn train_supervised(
    mut model: Captioner,
    pairs: &[PseudoPair],
    images: &[SceneImage],
    training: &SupervisedTraining,
) -> Result<(Captioner, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Config("no pseudo pairs to train on".into()));
    }
    let by_id: HashMap<&str, usize> = images.iter().enumerate().map(|(i, im)| (im.id.as_str(), i)).collect();
    let mut idx = Vec::with_capacity(pairs.len());
    for p in pairs {
        let Some(&i) = by_id.get(p.image.as_str()) else {
            return Err(Error::Contract(format!("pseudo pair refers to unknown image {}", p.image)));
        };
        contract!(p.caption.first() == Some(&BOS), "pseudo caption must start with <bos>");
        idx.push(i);
    }
    let pooled: Vec<Option<Vec<f64>>> = if model.config.freeze_encoder {
        images.iter().map(|im| model.pooled(im).map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; images.len()]
    };
    let mut opt = Adam::new(&model.params, training.lr);
    let bs = training.batch_size.clamp(1, pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(training.epochs);
    for epoch in 0..training.epochs {
        order.shuffle(&mut rng::stream(training.seed, "pseudo-shuffle", epoch as u64));
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&k| (&images[idx[k]], pooled[idx[k]].as_deref(), pairs[k].caption.as_slice()))
                .collect();
            sum += supervised_step(&mut model, &mut opt, &batch)? * chunk.len() as f64;
            n += chunk.len();
        }
        let mean = sum / n.max(1) as f64;
        log::debug!("pseudo epoch {epoch}: cross-entropy {mean:.4}");
        history.push(mean);
    }
    Ok((model, history))
}

#[derive(Serialize, Deserialize)]
struct PseudoLine {
    caption: String,
    image: String,
    provenance: String,
}

/// One JSON object per line: `{"caption", "image", "provenance"}`.
pub fn write_pseudo(path: &Path, pairs: &[PseudoPair], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        let line = PseudoLine {
            caption: vocab.decode(&p.caption),
            image: p.image.clone(),
            provenance: p.provenance.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable line"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pseudo(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<Vec<PseudoPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| {
            let line: PseudoLine =
                serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", k + 1)))?;
            Ok(PseudoPair {
                caption: frame_sentence(&vocab.encode_sentence(&line.caption), max_len),
                image: line.image,
                provenance: line.provenance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::CaptionerConfig;
    use crate::dataio::{build_vocabulary, tokenize, GeneratorConfig, EOS};
    use crate::mask::Mask;
    use crate::nn::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const WORDS: [&str; 4] = ["circle", "square", "triangle", "diamond"];

    fn vocab() -> Vocabulary {
        let gen = GeneratorConfig::with_categories(4);
        let toks: Vec<Vec<String>> = ["a circle above a square", "a triangle and a diamond left of"]
            .iter()
            .map(|l| tokenize(l))
            .collect();
        build_vocabulary(&toks, 1).with_concepts(&gen.object_registry().unwrap(), &gen.relation_registry().unwrap())
    }

    fn instances(v: &Vocabulary, words: &[&str]) -> Vec<Instance> {
        words
            .iter()
            .map(|w| Instance {
                category: v.object_category(v.id(w).unwrap()).unwrap(),
                mask: Mask::full(2, 2),
                score: 0.9,
            })
            .collect()
    }

    fn caption(v: &Vocabulary, s: &str) -> Vec<TokenId> {
        frame_sentence(&v.encode_sentence(s), 16)
    }

    #[test]
    fn filter_fixtures() {
        let v = vocab();
        let ids = vec!["a".to_string(), "b".to_string()];
        let caps = vec![caption(&v, "a circle above a square"), caption(&v, "a triangle")];
        let inst = vec![instances(&v, &["circle", "square"]), instances(&v, &["circle"])];
        let kept = filter_pseudo(&ids, &caps, &inst, &v, "ckpt").unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].image, "a");
        assert_eq!(kept[0].provenance, "ckpt");
        assert!(filter_pseudo(&ids, &caps[..1], &inst, &v, "ckpt").is_err());
    }

    #[test]
    fn count_fixtures() {
        let v = vocab();
        let caps = vec![caption(&v, "a triangle and a diamond"), caption(&v, "a circle")];
        let inst = vec![instances(&v, &["circle"]), instances(&v, &["circle"])];
        assert_eq!(unrecognized_in(&caps[0], &inst[0], &v), 2);
        assert_eq!(unrecognized_in(&caps[1], &inst[1], &v), 0);
        assert_eq!(count_unrecognized(&caps, &inst, &v).unwrap(), 1.0);
        assert!(count_unrecognized(&[], &[], &v).is_err());
    }

    fn random_batch(v: &Vocabulary, seed: u64, n: usize) -> (Vec<Vec<TokenId>>, Vec<Vec<Instance>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut caps = Vec::new();
        let mut inst = Vec::new();
        for _ in 0..n {
            let len = rng.gen_range(0..6);
            let mut c = vec![crate::dataio::BOS];
            c.extend((0..len).map(|_| rng.gen_range(4..v.len())));
            c.push(EOS);
            caps.push(c);
            let present: Vec<&str> = WORDS.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
            inst.push(instances(v, &present));
        }
        (caps, inst)
    }

    proptest! {
        #[test]
        fn filter_matches_brute_force_scan(seed in 0u64..300) {
            let v = vocab();
            let (caps, inst) = random_batch(&v, seed, 10);
            let ids: Vec<String> = (0..10).map(|i| format!("im{i}")).collect();
            let kept = filter_pseudo(&ids, &caps, &inst, &v, "p").unwrap();
            let mut want = Vec::new();
            for i in 0..10 {
                let hit = caps[i].iter().any(|&t| {
                    WORDS.iter().any(|w| v.id(w) == Some(t) && inst[i].iter().any(|x| Some(x.category) == v.object_category(t)))
                });
                if hit {
                    want.push(ids[i].clone());
                }
            }
            prop_assert_eq!(kept.iter().map(|p| p.image.clone()).collect::<Vec<_>>(), want);
            for p in &kept {
                let i: usize = p.image[2..].parse().unwrap();
                prop_assert!(mentions_recognised(&p.caption, &inst[i], &v));
            }
        }

        #[test]
        fn count_matches_brute_force(seed in 0u64..300) {
            let v = vocab();
            let (caps, inst) = random_batch(&v, seed, 7);
            let mut total = 0usize;
            for (c, o) in caps.iter().zip(&inst) {
                for &t in c {
                    let word = v.token(t);
                    if WORDS.contains(&word) && !o.iter().any(|x| v.object_category(t) == Some(x.category)) {
                        total += 1;
                    }
                }
            }
            prop_assert!((count_unrecognized(&caps, &inst, &v).unwrap() - total as f64 / 7.0).abs() < 1e-12);
        }

        #[test]
        fn captions_from_own_objects_count_zero(seed in 0u64..200) {
            let v = vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let present: Vec<&str> = WORDS.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
            let o = instances(&v, &present);
            let mut c = vec![crate::dataio::BOS];
            for _ in 0..rng.gen_range(0..5) {
                if present.is_empty() || rng.gen_bool(0.5) {
                    c.push(v.id("a").unwrap());
                } else {
                    c.push(v.id(present[rng.gen_range(0..present.len())]).unwrap());
                }
            }
            prop_assert_eq!(unrecognized_in(&c, &o, &v), 0);
        }
    }

    fn tiny_model(vocab_size: usize, seed: u64) -> Captioner {
        let mut c = CaptionerConfig::new(vocab_size, [2, 2, 3, 3]);
        c.latent = 4;
        c.embed = 4;
        c.hidden = 6;
        Captioner::new(c, seed).unwrap()
    }

    fn tiny_images(n: usize) -> Vec<SceneImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        (0..n)
            .map(|i| {
                let t = Tensor::uniform(&[192], 1.0, &mut rng);
                SceneImage::new(format!("im{i}"), 8, 8, t.data().iter().map(|x| x.abs()).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn one_supervised_step_lowers_cross_entropy() {
        let v = vocab();
        let images = tiny_images(3);
        let caps = [caption(&v, "a circle"), caption(&v, "a square above a circle"), caption(&v, "a triangle")];
        let examples: Vec<(&SceneImage, &[TokenId])> = images.iter().zip(&caps).map(|(i, c)| (i, c.as_slice())).collect();
        let mut m = tiny_model(v.len(), 0);
        let before = cross_entropy(&m, &examples).unwrap();
        let mut opt = Adam::new(&m.params, 1e-2);
        let batch: Vec<_> = examples.iter().map(|(i, c)| (*i, None, *c)).collect();
        let reported = supervised_step(&mut m, &mut opt, &batch).unwrap();
        assert!((reported - before).abs() < 1e-12);
        assert!(cross_entropy(&m, &examples).unwrap() < before);
    }

    #[test]
    fn supervised_training_is_deterministic() {
        let v = vocab();
        let images = tiny_images(4);
        let pairs: Vec<PseudoPair> = images
            .iter()
            .zip(["a circle", "a square", "a circle above a square", "a diamond"])
            .map(|(im, s)| PseudoPair { image: im.id.clone(), caption: caption(&v, s), provenance: "p".into() })
            .collect();
        let t = SupervisedTraining { epochs: 3, lr: 1e-2, batch_size: 2, seed: 1 };
        let (a, ha) = train_supervised(tiny_model(v.len(), 0), &pairs, &images, &t).unwrap();
        let (b, _) = train_supervised(tiny_model(v.len(), 0), &pairs, &images, &t).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert!(ha.last().unwrap() < &ha[0]);
        assert!(matches!(
            train_supervised(tiny_model(v.len(), 0), &[], &images, &t),
            Err(Error::Config(_))
        ));
        let stray = [PseudoPair { image: "nope".into(), ..pairs[0].clone() }];
        assert!(train_supervised(tiny_model(v.len(), 0), &stray, &images, &t).is_err());
    }

    #[test]
    fn pseudo_pairs_round_trip_as_json_lines() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let pairs = vec![PseudoPair { image: "x".into(), caption: caption(&v, "a circle above a square"), provenance: "c1".into() }];
        write_pseudo(&path, &pairs, &v).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"caption\":\"a circle above a square\""));
        assert_eq!(read_pseudo(&path, &v, 16).unwrap(), pairs);
        std::fs::write(&path, "{bad").unwrap();
        assert!(read_pseudo(&path, &v, 16).is_err());
    }
}
