//! Corpus caption metrics over tokenized sentences: BLEU-1..4, ROUGE-L and CIDEr.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub type Sentence = Vec<String>;

/// Floor applied to zero n-gram precisions.
pub const BLEU_EPSILON: f64 = 1e-9;
/// Recall weight of the LCS F-measure, expressed as beta squared.
pub const ROUGE_BETA_SQ: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub size: usize,
}

fn check(candidates: &[Sentence], references: &[Vec<Sentence>]) -> Result<()> {
    contract!(!candidates.is_empty(), "metric corpus is empty");
    contract!(
        candidates.len() == references.len(),
        "{} candidates but {} reference sets",
        candidates.len(),
        references.len()
    );
    contract!(
        references.iter().all(|r| !r.is_empty()),
        "every candidate needs at least one reference"
    );
    Ok(())
}

fn ngrams(s: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with uniform weights over 1..=n, clipped counts and the closest
/// reference length (shorter on ties) for the brevity penalty.
pub fn bleu(candidates: &[Sentence], references: &[Vec<Sentence>], n: usize) -> Result<f64> {
    check(candidates, references)?;
    contract!((1..=4).contains(&n), "BLEU order must be 1..=4, got {n}");
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as isize - cand.len() as isize).abs(), l))
            .unwrap();
        for k in 1..=n {
            let cg = ngrams(cand, k);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in cg {
                matched[k - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..n)
        .map(|k| {
            let p = if matched[k] == 0 {
                BLEU_EPSILON
            } else {
                matched[k] as f64 / total[k] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / n as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one candidate; precision and recall are each maximised over references.
pub fn rouge_l_sentence(cand: &[String], refs: &[Sentence], beta_sq: f64) -> f64 {
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for rf in refs {
        let l = lcs_len(cand, rf) as f64;
        if !cand.is_empty() {
            p = p.max(l / cand.len() as f64);
        }
        if !rf.is_empty() {
            r = r.max(l / rf.len() as f64);
        }
    }
    if p == 0.0 || r == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * p * r / (r + beta_sq * p)
    }
}

pub fn rouge_l(candidates: &[Sentence], references: &[Vec<Sentence>]) -> Result<f64> {
    check(candidates, references)?;
    let s: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_sentence(c, r, ROUGE_BETA_SQ))
        .sum();
    Ok(s / candidates.len() as f64)
}

struct TfIdf<'a> {
    weights: HashMap<&'a [String], f64>,
    norm: f64,
}

fn tfidf<'a>(s: &'a [String], n: usize, df: &HashMap<&[String], usize>, log_n: f64) -> TfIdf<'a> {
    let weights: HashMap<&[String], f64> = ngrams(s, n)
        .into_iter()
        .map(|(g, tf)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, tf as f64 * (log_n - d.ln()))
        })
        .collect();
    let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
    TfIdf { weights, norm }
}

fn cosine(a: &TfIdf, b: &TfIdf) -> f64 {
    if a.norm == 0.0 || b.norm == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .weights
        .iter()
        .map(|(g, w)| w * b.weights.get(g).copied().unwrap_or(0.0))
        .sum();
    dot / (a.norm * b.norm)
}

/// Per-candidate CIDEr scores. Document frequency counts the reference sets
/// (one document per image) containing an n-gram; idf = ln(N / max(1, df)).
pub fn cider_scores(candidates: &[Sentence], references: &[Vec<Sentence>]) -> Result<Vec<f64>> {
    check(candidates, references)?;
    let log_n = (candidates.len() as f64).ln();
    let mut scores = vec![0.0; candidates.len()];
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for refs in references {
            let mut seen: HashMap<&[String], ()> = HashMap::new();
            for r in refs {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
            let vc = tfidf(cand, n, &df, log_n);
            let mean: f64 = refs
                .iter()
                .map(|r| cosine(&vc, &tfidf(r, n, &df, log_n)))
                .sum::<f64>()
                / refs.len() as f64;
            scores[i] += 10.0 * mean / 4.0;
        }
    }
    Ok(scores)
}

pub fn cider(candidates: &[Sentence], references: &[Vec<Sentence>]) -> Result<f64> {
    let s = cider_scores(candidates, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

pub fn evaluate(candidates: &[Sentence], references: &[Vec<Sentence>]) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu1: bleu(candidates, references, 1)?,
        bleu2: bleu(candidates, references, 2)?,
        bleu3: bleu(candidates, references, 3)?,
        bleu4: bleu(candidates, references, 4)?,
        rouge_l: rouge_l(candidates, references)?,
        cider: cider(candidates, references)?,
        size: candidates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::tokenize;
    use proptest::prelude::*;

    fn s(x: &str) -> Sentence {
        tokenize(x)
    }

    #[test]
    fn hand_computed_bleu1() {
        let b = bleu(&[s("the cat sat")], &[vec![s("the cat sat down")]], 1).unwrap();
        assert!((b - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_disjoint() {
        let c = vec![s("a circle above a square"), s("a bar")];
        let r: Vec<_> = c.iter().map(|x| vec![x.clone()]).collect();
        let rep = evaluate(&c, &r).unwrap();
        for v in [rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4, rep.rouge_l] {
            assert!((v - 1.0).abs() < 1e-12, "{rep:?}");
        }
        let d = vec![vec![s("one two three four five")], vec![s("six seven")]];
        assert!(bleu(&c, &d, 4).unwrap() < 1e-6);
        assert_eq!(rouge_l(&c, &d).unwrap(), 0.0);
        assert_eq!(cider(&c, &d).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpus_is_a_contract_violation() {
        assert!(matches!(bleu(&[], &[], 1), Err(crate::Error::Contract(_))));
        assert!(rouge_l(&[], &[]).is_err());
        assert!(cider(&[], &[]).is_err());
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_len(&s("a b c d"), &s("a c d b")), 3);
        assert_eq!(lcs_len(&s(""), &s("a")), 0);
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let words = ["a", "circle", "square", "above", "bar", "and", "inside"];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut sent = |len: usize| -> Sentence { (0..len).map(|_| words.choose(&mut rng).unwrap().to_string()).collect() };
            let c: Vec<Sentence> = (0..5).map(|i| sent(3 + i % 3)).collect();
            let r: Vec<Vec<Sentence>> = (0..5).map(|i| vec![sent(4), sent(2 + i % 4)]).collect();
            let a = evaluate(&c, &r).unwrap();
            let mut idx: Vec<usize> = (0..5).collect();
            idx.shuffle(&mut rng);
            let c2: Vec<_> = idx.iter().map(|&i| c[i].clone()).collect();
            let r2: Vec<_> = idx.iter().map(|&i| r[i].clone()).collect();
            let b = evaluate(&c2, &r2).unwrap();
            for (x, y) in [(a.bleu4, b.bleu4), (a.bleu1, b.bleu1), (a.rouge_l, b.rouge_l), (a.cider, b.cider)] {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(a.bleu1 >= 0.0 && a.bleu1 <= 1.0 && a.rouge_l <= 1.0 && a.cider >= 0.0);
        }

        #[test]
        fn bleu_monotone_in_overlap(k in 0usize..5) {
            // Single item, fixed lengths: replacing mismatches with matches never lowers BLEU.
            let reference = s("a b c d e");
            let mut cand: Sentence = s("v w x y z");
            let mut last = bleu(&[cand.clone()], &[vec![reference.clone()]], 2).unwrap();
            for i in 0..=k {
                cand[i] = reference[i].clone();
                let now = bleu(&[cand.clone()], &[vec![reference.clone()]], 2).unwrap();
                prop_assert!(now >= last - 1e-15);
                last = now;
            }
        }
    }
}
