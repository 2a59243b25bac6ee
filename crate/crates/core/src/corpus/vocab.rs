use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed_str, rng_from_seed};

pub type TokenId = usize;
pub type ConceptId = usize;
pub type DomainId = usize;

pub const BOS: &str = "<bos>";
pub const SPECIAL_TOKENS: &[&str] = &[BOS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenClass {
    Content,
    Function,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub n_domains: usize,
    pub concepts_per_domain: usize,
    pub tokens_per_concept: usize,
    pub n_function: usize,
    pub seed: u64,
}

impl Default for VocabConfig {
    /// 4·10·6 content + 48 function + 1 special = 289 tokens.
    fn default() -> Self {
        Self {
            n_domains: 4,
            concepts_per_domain: 10,
            tokens_per_concept: 6,
            n_function: 48,
            seed: 0,
        }
    }
}

/// Word-level vocabulary with a bijective token↔id table and the concept
/// hierarchy (token → concept → domain) that the synthetic corpus is built on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    classes: Vec<TokenClass>,
    concept_of: Vec<Option<ConceptId>>,
    domain_of: Vec<DomainId>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    #[serde(skip)]
    members: Vec<Vec<TokenId>>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.classes == other.classes
            && self.concept_of == other.concept_of
            && self.domain_of == other.domain_of
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr",
    "pl", "st", "tr", "sh", "ch",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "l", "r", "s", "m"];

fn pseudo_word(rng: &mut crate::rng::Rng, syllables: usize) -> String {
    let mut w = String::new();
    for i in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        if i + 1 == syllables {
            w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        }
    }
    w
}

fn unique_words(
    rng: &mut crate::rng::Rng,
    n: usize,
    min_syllables: usize,
    taken: &mut HashSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    let mut syllables = min_syllables;
    let mut misses = 0;
    while out.len() < n {
        let w = pseudo_word(rng, syllables);
        if taken.insert(w.clone()) {
            out.push(w);
            misses = 0;
        } else {
            misses += 1;
            if misses > 64 {
                syllables += 1;
                misses = 0;
            }
        }
    }
    out
}

/// Builds the vocabulary: specials first, then function words, then content
/// tokens in a seed-shuffled id order (concept members are not contiguous).
pub fn build_vocabulary(cfg: &VocabConfig) -> Result<Vocabulary> {
    if cfg.n_domains == 0 || cfg.concepts_per_domain == 0 {
        return Err(Error::config(
            "n_domains and concepts_per_domain must be >= 1",
        ));
    }
    if cfg.tokens_per_concept < 2 {
        return Err(Error::config(
            "tokens_per_concept must be >= 2 so every concept has a synonym",
        ));
    }
    let n_concepts = cfg.n_domains * cfg.concepts_per_domain;
    let n_content = n_concepts * cfg.tokens_per_concept;

    let mut rng = rng_from_seed(derive_seed_str(cfg.seed, "vocabulary"));
    let mut taken: HashSet<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let function_words = unique_words(&mut rng, cfg.n_function, 1, &mut taken);
    let content_words = unique_words(&mut rng, n_content, 2, &mut taken);

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut classes = vec![TokenClass::Special; tokens.len()];
    let mut concept_of = vec![None; tokens.len()];
    for w in function_words {
        tokens.push(w);
        classes.push(TokenClass::Function);
        concept_of.push(None);
    }

    // Slot j of the content block belongs to concept j / tokens_per_concept;
    // the id order is shuffled so ids carry no concept information.
    let mut slots: Vec<usize> = (0..n_content).collect();
    slots.shuffle(&mut rng);
    for (w, slot) in content_words.into_iter().zip(slots) {
        tokens.push(w);
        classes.push(TokenClass::Content);
        concept_of.push(Some(slot / cfg.tokens_per_concept));
    }
    let domain_of = (0..n_concepts)
        .map(|c| c / cfg.concepts_per_domain)
        .collect();
    Vocabulary::from_parts(tokens, classes, concept_of, domain_of)
}

impl Vocabulary {
    /// Validates the invariants and builds the lookup tables.
    pub fn from_parts(
        tokens: Vec<String>,
        classes: Vec<TokenClass>,
        concept_of: Vec<Option<ConceptId>>,
        domain_of: Vec<DomainId>,
    ) -> Result<Self> {
        if tokens.len() != classes.len() || tokens.len() != concept_of.len() {
            return Err(Error::Vocabulary(
                "per-token tables differ in length".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token string {t:?}")));
            }
        }
        let mut members = vec![Vec::new(); domain_of.len()];
        for (id, (class, concept)) in classes.iter().zip(&concept_of).enumerate() {
            match (class, concept) {
                (TokenClass::Content, Some(c)) => {
                    let slot = members.get_mut(*c).ok_or_else(|| {
                        Error::Vocabulary(format!("token {id} references unknown concept {c}"))
                    })?;
                    slot.push(id);
                }
                (TokenClass::Content, None) => {
                    return Err(Error::Vocabulary(format!(
                        "content token {id} has no concept"
                    )))
                }
                (_, Some(_)) => {
                    return Err(Error::Vocabulary(format!(
                        "non-content token {id} assigned to a concept"
                    )))
                }
                (_, None) => {}
            }
        }
        if let Some(c) = members.iter().position(|m| m.len() < 2) {
            return Err(Error::Vocabulary(format!(
                "concept {c} has fewer than 2 members"
            )));
        }
        Ok(Self {
            tokens,
            classes,
            concept_of,
            domain_of,
            index,
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn class(&self, id: TokenId) -> TokenClass {
        self.classes[id]
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        self.classes.get(id) == Some(&TokenClass::Content)
    }

    pub fn concept_of(&self, id: TokenId) -> Option<ConceptId> {
        self.concept_of.get(id).copied().flatten()
    }

    pub fn domain_of_concept(&self, concept: ConceptId) -> DomainId {
        self.domain_of[concept]
    }

    pub fn domain_of_token(&self, id: TokenId) -> Option<DomainId> {
        self.concept_of(id).map(|c| self.domain_of[c])
    }

    pub fn n_concepts(&self) -> usize {
        self.domain_of.len()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_of.iter().max().map_or(0, |d| d + 1)
    }

    /// Concepts of `domain`, ascending.
    pub fn concepts_in_domain(&self, domain: DomainId) -> Vec<ConceptId> {
        (0..self.n_concepts())
            .filter(|&c| self.domain_of[c] == domain)
            .collect()
    }

    /// Member tokens of `concept`, ascending id.
    pub fn concept_members(&self, concept: ConceptId) -> &[TokenId] {
        &self.members[concept]
    }

    pub fn bos(&self) -> TokenId {
        self.index[BOS]
    }

    pub fn ids_of_class(&self, class: TokenClass) -> Vec<TokenId> {
        (0..self.len())
            .filter(|&i| self.classes[i] == class)
            .collect()
    }

    pub fn content_tokens(&self) -> Vec<TokenId> {
        self.ids_of_class(TokenClass::Content)
    }

    pub fn function_tokens(&self) -> Vec<TokenId> {
        self.ids_of_class(TokenClass::Function)
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<TokenId>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Vocabulary(format!("unknown token {w:?}")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: Vocabulary = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_parts(raw.tokens, raw.classes, raw.concept_of, raw.domain_of)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, c: usize, t: usize, f: usize, seed: u64) -> VocabConfig {
        VocabConfig {
            n_domains: d,
            concepts_per_domain: c,
            tokens_per_concept: t,
            n_function: f,
            seed,
        }
    }

    #[test]
    fn size_follows_config() {
        let v = build_vocabulary(&cfg(2, 3, 4, 20, 7)).unwrap();
        assert_eq!(v.len(), 2 * 3 * 4 + 20 + SPECIAL_TOKENS.len());
        assert_eq!(v.content_tokens().len(), 24);
        assert_eq!(v.function_tokens().len(), 20);
        assert_eq!(v.n_concepts(), 6);
        assert_eq!(v.n_domains(), 2);
        for c in 0..6 {
            assert_eq!(v.concept_members(c).len(), 4);
            assert_eq!(v.domain_of_concept(c), c / 3);
        }
    }

    #[test]
    fn minimal_vocabulary() {
        let v = build_vocabulary(&cfg(1, 1, 2, 0, 0)).unwrap();
        assert_eq!(v.len(), 2 + SPECIAL_TOKENS.len());
        assert_eq!(v.concept_members(0).len(), 2);
        assert_eq!(v.class(v.bos()), TokenClass::Special);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = build_vocabulary(&cfg(2, 3, 4, 20, 7)).unwrap();
        let b = build_vocabulary(&cfg(2, 3, 4, 20, 7)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = build_vocabulary(&cfg(2, 3, 4, 20, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(matches!(
            build_vocabulary(&cfg(0, 3, 4, 2, 0)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            build_vocabulary(&cfg(1, 0, 4, 2, 0)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            build_vocabulary(&cfg(1, 1, 1, 2, 0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let v = build_vocabulary(&VocabConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let w = Vocabulary::load(&p).unwrap();
        assert_eq!(v, w);
        assert_eq!(w.id(v.token(100)), Some(100));
    }

    #[test]
    fn invariants_enforced_on_parts() {
        let tokens = vec!["a".into(), "b".into(), "c".into()];
        let classes = vec![
            TokenClass::Content,
            TokenClass::Content,
            TokenClass::Content,
        ];
        let concept_of = vec![Some(0), Some(0), Some(1)];
        // concept 1 has a single member
        let err = Vocabulary::from_parts(tokens, classes, concept_of, vec![0, 0]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(_)));
    }
}
