//! Independent re-implementations of ROUGE-L and CIDEr used as oracles.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use weakcap::metrics::ROUGE_BETA_SQ;

pub type S = Vec<String>;

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        let mut it = b.iter();
        if sub.iter().all(|w| it.any(|x| x == *w)) {
            best = best.max(sub.len());
        }
    }
    best
}

pub fn rouge_oracle(c: &[S], r: &[Vec<S>]) -> f64 {
    let mut total = 0.0;
    for (cand, refs) in c.iter().zip(r) {
        let p = refs.iter().map(|x| lcs_brute(cand, x) as f64 / cand.len() as f64).fold(0.0, f64::max);
        let rc = refs.iter().map(|x| lcs_brute(cand, x) as f64 / x.len() as f64).fold(0.0, f64::max);
        total += if p > 0.0 && rc > 0.0 {
            (1.0 + ROUGE_BETA_SQ) * p * rc / (rc + ROUGE_BETA_SQ * p)
        } else {
            0.0
        };
    }
    total / c.len() as f64
}

pub fn grams(s: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for i in 0..s.len().saturating_sub(n - 1) {
        if i + n <= s.len() {
            *m.entry(s[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    m
}

pub fn cider_oracle(c: &[S], r: &[Vec<S>]) -> Vec<f64> {
    let n_docs = c.len() as f64;
    let mut out = vec![0.0; c.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for refs in r {
            let mut set = BTreeMap::new();
            for x in refs {
                for g in grams(x, n).keys() {
                    set.insert(g.clone(), ());
                }
            }
            for g in set.keys() {
                *df.entry(g.clone()).or_insert(0.0) += 1.0;
            }
        }
        let vec = |s: &S| -> BTreeMap<String, f64> {
            grams(s, n)
                .into_iter()
                .map(|(g, tf)| {
                    let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                    (g, tf * (n_docs / d).ln())
                })
                .collect()
        };
        for (i, (cand, refs)) in c.iter().zip(r).enumerate() {
            let vc = vec(cand);
            let mut acc = 0.0;
            for x in refs {
                let vr = vec(x);
                let dot: f64 = vc.iter().map(|(g, w)| w * vr.get(g).copied().unwrap_or(0.0)).sum();
                let nc: f64 = vc.values().map(|w| w * w).sum::<f64>().sqrt();
                let nr: f64 = vr.values().map(|w| w * w).sum::<f64>().sqrt();
                acc += if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { 0.0 };
            }
            out[i] += 10.0 * acc / refs.len() as f64 / 4.0;
        }
    }
    out
}

pub fn random_sentence(rng: &mut ChaCha8Rng, len: usize) -> S {
    let words = ["a", "circle", "square", "left", "of", "above", "bar"];
    (0..len).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect()
}

