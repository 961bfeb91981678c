use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::registry::{CategoryId, CategoryRegistry};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, then split on every non-alphanumeric character; punctuation is dropped.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token/id bijection plus the object- and relation-word views used by the rewards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    object_words: BTreeMap<TokenId, CategoryId>,
    relation_ngrams: Vec<(CategoryId, Vec<TokenId>)>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    object_words: BTreeMap<TokenId, CategoryId>,
    relation_ngrams: Vec<(CategoryId, Vec<TokenId>)>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        let index = r.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens: r.tokens,
            index,
            object_words: r.object_words,
            relation_ngrams: r.relation_ngrams,
        }
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            object_words: v.object_words,
            relation_ngrams: v.relation_ngrams,
        }
    }
}

/// Tokens with frequency `>= min_count`, ordered by frequency then lexicographically.
pub fn build_vocabulary(corpus: &[Vec<String>], min_count: usize) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sent in corpus {
        for t in sent {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !SPECIALS.contains(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens: Vec<String> = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Vocabulary {
        tokens,
        index,
        object_words: BTreeMap::new(),
        relation_ngrams: Vec::new(),
    }
}

impl Vocabulary {
    /// Attach the object-word and relation-phrase views. Object names that are
    /// not a single in-vocabulary token, and relation names with any
    /// out-of-vocabulary token, are left out.
    pub fn with_concepts(mut self, objects: &CategoryRegistry, relations: &CategoryRegistry) -> Self {
        self.object_words.clear();
        for (c, name) in objects.names().iter().enumerate() {
            if let [tok] = tokenize(name).as_slice() {
                if let Some(id) = self.id(tok) {
                    self.object_words.insert(id, c);
                }
            }
        }
        self.relation_ngrams.clear();
        for (c, name) in relations.names().iter().enumerate() {
            let ids: Option<Vec<TokenId>> = tokenize(name).iter().map(|t| self.id(t)).collect();
            if let Some(ids) = ids.filter(|v| !v.is_empty()) {
                self.relation_ngrams.push((c, ids));
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn encode_sentence(&self, sentence: &str) -> Vec<TokenId> {
        self.encode(&tokenize(sentence))
    }

    /// Space-joined words, skipping special tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Object category named by `token`, if it is an object word.
    pub fn object_category(&self, token: TokenId) -> Option<CategoryId> {
        self.object_words.get(&token).copied()
    }

    pub fn object_words(&self) -> &BTreeMap<TokenId, CategoryId> {
        &self.object_words
    }

    pub fn relation_ngrams(&self) -> &[(CategoryId, Vec<TokenId>)] {
        &self.relation_ngrams
    }

    /// Relation categories whose phrase ends exactly at position `t` of `seq`.
    pub fn relations_ending_at(&self, seq: &[TokenId], t: usize) -> Vec<CategoryId> {
        self.relation_ngrams
            .iter()
            .filter(|(_, ng)| ng.len() <= t + 1 && seq[t + 1 - ng.len()..=t] == ng[..])
            .map(|(c, _)| *c)
            .collect()
    }
}
