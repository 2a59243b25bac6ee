//! Template-grammar corpus generator.
//!
//! A sequence is `<bos>` followed by sentence frames. Each frame is a fixed
//! pattern of slots: function slots draw a word from one function-word class,
//! content slots draw a concept and then a uniformly random member token of
//! that concept. Concept choice inside a sequence is structured:
//!
//! * every sequence lives in one domain, and fresh concepts come from that
//!   domain's (profile-dependent) Zipf prior;
//! * with `coreference_prob` a slot re-mentions a concept already used in the
//!   sequence, usually through a different synonym;
//! * with `relation_prob` a slot takes the fixed partner of the previous
//!   content concept.
//!
//! Profiles `A` and `B` share the vocabulary but differ in frame mixture,
//! domain prior and concept ranking, which gives an in-domain / shifted pair.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vocab::{ConceptId, TokenClass, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Profile {
    A,
    B,
}

impl Profile {
    pub fn other(self) -> Profile {
        match self {
            Profile::A => Profile::B,
            Profile::B => Profile::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::A => "A",
            Profile::B => "B",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Profile::A),
            "B" | "b" => Ok(Profile::B),
            other => Err(Error::config(format!("unknown profile {other:?}"))),
        }
    }
}

/// Token ids with the positions eligible for concept supervision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub token_ids: Vec<TokenId>,
    pub content_positions: Vec<usize>,
}

impl Sequence {
    pub fn new(token_ids: Vec<TokenId>, content_positions: Vec<usize>) -> Self {
        Self {
            token_ids,
            content_positions,
        }
    }

    /// Marks every content-class token as eligible.
    pub fn from_tokens(token_ids: Vec<TokenId>, vocab: &Vocabulary) -> Self {
        let content_positions = token_ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| vocab.is_content(t))
            .map(|(i, _)| i)
            .collect();
        Self {
            token_ids,
            content_positions,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn is_content_position(&self, position: usize) -> bool {
        self.content_positions.binary_search(&position).is_ok()
    }

    pub fn ends_in_content(&self) -> bool {
        !self.token_ids.is_empty() && self.content_positions.last() == Some(&(self.len() - 1))
    }

    /// Content positions over non-special tokens.
    pub fn content_fraction(&self, vocab: &Vocabulary) -> f64 {
        let words = self
            .token_ids
            .iter()
            .filter(|&&t| vocab.class(t) != TokenClass::Special)
            .count();
        if words == 0 {
            0.0
        } else {
            self.content_positions.len() as f64 / words as f64
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if let Some(&t) = self.token_ids.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::Vocabulary(format!("token id {t} out of range")));
        }
        let mut prev = None;
        for &p in &self.content_positions {
            if p >= self.len() {
                return Err(Error::Vocabulary(format!(
                    "content position {p} outside sequence of length {}",
                    self.len()
                )));
            }
            if prev.is_some_and(|q| q >= p) {
                return Err(Error::Vocabulary(
                    "content positions not strictly increasing".into(),
                ));
            }
            if !vocab.is_content(self.token_ids[p]) {
                return Err(Error::Vocabulary(format!(
                    "position {p} carries non-content token {:?}",
                    vocab.token(self.token_ids[p])
                )));
            }
            prev = Some(p);
        }
        Ok(())
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.token_ids
            .iter()
            .map(|&t| vocab.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub coreference_prob: f64,
    pub relation_prob: f64,
    pub concept_zipf: f64,
    /// Skew of member frequencies within a concept; 0 is uniform.
    pub member_zipf: f64,
    /// Chance that a content word takes the same member slot as the previous
    /// content word, a surface agreement that says nothing about meaning.
    pub agreement_prob: f64,
    pub function_zipf: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_len: 8,
            max_len: 64,
            coreference_prob: 0.3,
            relation_prob: 0.3,
            concept_zipf: 1.0,
            member_zipf: 1.0,
            agreement_prob: 0.5,
            function_zipf: 1.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::config(format!(
                "length bounds [{}, {}] invalid (need 2 <= min_len <= max_len)",
                self.min_len, self.max_len
            )));
        }
        for (name, p) in [
            ("coreference_prob", self.coreference_prob),
            ("relation_prob", self.relation_prob),
            ("agreement_prob", self.agreement_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.coreference_prob + self.relation_prob > 1.0 {
            return Err(Error::config(
                "coreference_prob + relation_prob must be <= 1",
            ));
        }
        if self.concept_zipf < 0.0 || self.member_zipf < 0.0 || self.function_zipf < 0.0 {
            return Err(Error::config("zipf exponents must be >= 0"));
        }
        Ok(())
    }
}

/// Slot pattern of one frame: `C` is a content slot, digits name a
/// function-word class.
pub const FRAMES: &[&str] = &[
    "0C1C", "0C20C", "0CC3", "01C2", "0C340C", "1023C", "0CC1C2", "34010C", "CC40", "2014C3",
];
const FUNCTION_CLASSES: usize = 5;

const FRAME_WEIGHTS_A: [f64; 10] = [3.0, 3.0, 1.0, 3.0, 2.0, 2.0, 1.0, 2.0, 1.0, 2.0];
const FRAME_WEIGHTS_B: [f64; 10] = [1.0, 2.0, 3.0, 1.0, 2.0, 1.0, 3.0, 1.0, 3.0, 1.0];

fn frame_content_ratio(frame: &str) -> f64 {
    frame.chars().filter(|&c| c == 'C').count() as f64 / frame.len() as f64
}

/// Tilts the profile's base frame weights by `exp(θ·ratio)` so that the
/// expected content share of emitted tokens equals `target`.
pub fn frame_mixture(profile: Profile, target: f64) -> Result<Vec<f64>> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::config(format!(
            "target content fraction {target} must lie in (0, 1)"
        )));
    }
    let base = match profile {
        Profile::A => &FRAME_WEIGHTS_A,
        Profile::B => &FRAME_WEIGHTS_B,
    };
    let ratios: Vec<f64> = FRAMES.iter().map(|f| frame_content_ratio(f)).collect();
    let lens: Vec<f64> = FRAMES.iter().map(|f| f.len() as f64).collect();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| {
            (a.min(r), b.max(r))
        });
    if target <= lo + 1e-3 || target >= hi - 1e-3 {
        return Err(Error::config(format!(
            "target content fraction {target} unreachable with frame ratios in [{lo:.3}, {hi:.3}]"
        )));
    }
    let weights = |theta: f64| -> Vec<f64> {
        base.iter()
            .zip(&ratios)
            .map(|(w, r)| w * (theta * (r - hi)).exp())
            .collect()
    };
    let expected = |theta: f64| -> f64 {
        let w = weights(theta);
        let content: f64 = w
            .iter()
            .zip(&lens)
            .zip(&ratios)
            .map(|((w, l), r)| w * l * r)
            .sum();
        let total: f64 = w.iter().zip(&lens).map(|(w, l)| w * l).sum();
        content / total
    };
    let (mut a, mut b) = (-400.0_f64, 400.0_f64);
    if expected(a) > target || expected(b) < target {
        return Err(Error::config(format!(
            "target content fraction {target} unreachable for profile {}",
            profile.as_str()
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if expected(mid) < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    let w = weights(0.5 * (a + b));
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(s)).collect()
}

struct Sampler<'a> {
    vocab: &'a Vocabulary,
    cfg: &'a CorpusConfig,
    frames: WeightedIndex<f64>,
    domains: WeightedIndex<f64>,
    /// Per domain: concept ids in prior-rank order and their Zipf sampler.
    domain_concepts: Vec<(Vec<ConceptId>, WeightedIndex<f64>)>,
    members: Vec<WeightedIndex<f64>>,
    function_classes: Vec<(Vec<TokenId>, WeightedIndex<f64>)>,
}

impl<'a> Sampler<'a> {
    fn new(
        vocab: &'a Vocabulary,
        cfg: &'a CorpusConfig,
        profile: Profile,
        target: f64,
    ) -> Result<Self> {
        let mixture = frame_mixture(profile, target)?;
        let frames = WeightedIndex::new(&mixture).map_err(|e| Error::config(e.to_string()))?;
        let n_domains = vocab.n_domains();
        let domain_w = match profile {
            Profile::A => vec![1.0; n_domains],
            Profile::B => zipf_weights(n_domains, 1.0),
        };
        let domains = WeightedIndex::new(&domain_w).map_err(|e| Error::config(e.to_string()))?;
        let mut domain_concepts = Vec::with_capacity(n_domains);
        for d in 0..n_domains {
            let mut concepts = vocab.concepts_in_domain(d);
            if profile == Profile::B {
                concepts.reverse();
            }
            let w = WeightedIndex::new(zipf_weights(concepts.len(), cfg.concept_zipf))
                .map_err(|e| Error::config(e.to_string()))?;
            domain_concepts.push((concepts, w));
        }
        let members = (0..vocab.n_concepts())
            .map(|c| {
                WeightedIndex::new(zipf_weights(
                    vocab.concept_members(c).len(),
                    cfg.member_zipf,
                ))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::config(e.to_string()))?;
        let mut function_classes = Vec::with_capacity(FUNCTION_CLASSES);
        for class in 0..FUNCTION_CLASSES {
            let members = function_class(vocab, class);
            if members.is_empty() {
                function_classes.push((members, WeightedIndex::new([1.0]).expect("unit weight")));
            } else {
                let w = WeightedIndex::new(zipf_weights(members.len(), cfg.function_zipf))
                    .map_err(|e| Error::config(e.to_string()))?;
                function_classes.push((members, w));
            }
        }
        Ok(Self {
            vocab,
            cfg,
            frames,
            domains,
            domain_concepts,
            members,
            function_classes,
        })
    }

    fn partner(&self, concept: ConceptId) -> ConceptId {
        let domain = self.vocab.domain_of_concept(concept);
        let concepts = self.vocab.concepts_in_domain(domain);
        let local = concepts
            .iter()
            .position(|&c| c == concept)
            .expect("concept in its domain");
        concepts[(local + 1) % concepts.len()]
    }

    fn pick_concept(&self, rng: &mut Rng, domain: usize, used: &[ConceptId]) -> ConceptId {
        if let Some(&prev) = used.last() {
            let u: f64 = rng.random();
            if u < self.cfg.coreference_prob {
                return used[rng.random_range(0..used.len())];
            }
            if u < self.cfg.coreference_prob + self.cfg.relation_prob {
                return self.partner(prev);
            }
        }
        let (concepts, w) = &self.domain_concepts[domain];
        concepts[w.sample(rng)]
    }

    fn sequence(&self, rng: &mut Rng) -> (Sequence, Vec<usize>) {
        let target_len = rng.random_range(self.cfg.min_len..=self.cfg.max_len);
        let domain = self.domains.sample(rng);
        let mut tokens = vec![self.vocab.bos()];
        let mut used: Vec<ConceptId> = Vec::new();
        let mut slot_prev: Option<usize> = None;
        let mut frames = Vec::new();
        while tokens.len() < target_len {
            let f = self.frames.sample(rng);
            frames.push(f);
            for slot in FRAMES[f].chars() {
                if slot == 'C' {
                    let c = self.pick_concept(rng, domain, &used);
                    used.push(c);
                    let members = self.vocab.concept_members(c);
                    let m = match slot_prev {
                        Some(m)
                            if m < members.len()
                                && rng.random::<f64>() < self.cfg.agreement_prob =>
                        {
                            m
                        }
                        _ => self.members[c].sample(rng),
                    };
                    slot_prev = Some(m);
                    tokens.push(members[m]);
                } else {
                    let class = slot.to_digit(10).expect("frame digit") as usize;
                    let (members, w) = &self.function_classes[class];
                    if let Some(&t) = members.get(w.sample(rng)) {
                        tokens.push(t);
                    }
                }
            }
        }
        tokens.truncate(target_len);
        (Sequence::from_tokens(tokens, self.vocab), frames)
    }
}

/// Function tokens of one frame class, most frequent first.
fn function_class(vocab: &Vocabulary, class: usize) -> Vec<TokenId> {
    vocab
        .function_tokens()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % FUNCTION_CLASSES == class)
        .map(|(_, t)| t)
        .collect()
}

/// A context that wraps a single word: `before`, the word, then `after`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeTemplate {
    pub before: Vec<TokenId>,
    pub after: Vec<TokenId>,
}

impl ProbeTemplate {
    pub fn wrap(&self, word: TokenId) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(self.before.len() + 1 + self.after.len());
        ids.extend(&self.before);
        ids.push(word);
        ids.extend(&self.after);
        ids
    }
}

/// One template per frame: the word sits in the first content slot, function
/// slots take the most frequent token of their class, and the template stops
/// before the next content slot. Every template starts with the marker.
pub fn probe_templates(vocab: &Vocabulary) -> Vec<ProbeTemplate> {
    let top: Vec<Option<TokenId>> = (0..FUNCTION_CLASSES)
        .map(|c| function_class(vocab, c).first().copied())
        .collect();
    let fill = |slots: &str| -> Vec<TokenId> {
        slots
            .chars()
            .filter_map(|c| top[c.to_digit(10).expect("frame digit") as usize])
            .collect()
    };
    let mut out: Vec<ProbeTemplate> = Vec::new();
    for frame in FRAMES {
        let Some(at) = frame.find('C') else { continue };
        let rest = &frame[at + 1..];
        let end = rest.find('C').unwrap_or(rest.len());
        let mut before = vec![vocab.bos()];
        before.extend(fill(&frame[..at]));
        let t = ProbeTemplate {
            before,
            after: fill(&rest[..end]),
        };
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// Sequences plus the frame ids used for each, for auditing mixtures.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub sequences: Vec<Sequence>,
    pub frames: Vec<Vec<usize>>,
}

impl GeneratedCorpus {
    pub fn frame_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; FRAMES.len()];
        for f in self.frames.iter().flatten() {
            counts[*f] += 1;
        }
        counts
    }
}

/// Generates `n_sequences` with the default [`CorpusConfig`].
pub fn generate_corpus(
    vocab: &Vocabulary,
    n_sequences: usize,
    profile: Profile,
    target_content_fraction: f64,
    seed: u64,
) -> Result<Vec<Sequence>> {
    Ok(generate_corpus_with(
        vocab,
        &CorpusConfig::default(),
        n_sequences,
        profile,
        target_content_fraction,
        seed,
    )?
    .sequences)
}

/// Sequence `i` is drawn from its own stream `derive_seed(seed, i)`, so a
/// corpus is a prefix of any longer corpus with the same seed.
pub fn generate_corpus_with(
    vocab: &Vocabulary,
    cfg: &CorpusConfig,
    n_sequences: usize,
    profile: Profile,
    target_content_fraction: f64,
    seed: u64,
) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    if vocab.function_tokens().is_empty() {
        return Err(Error::config(
            "corpus generation needs at least one function word",
        ));
    }
    let sampler = Sampler::new(vocab, cfg, profile, target_content_fraction)?;
    let mut sequences = Vec::with_capacity(n_sequences);
    let mut frames = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let mut rng = rng_from_seed(derive_seed(seed, i as u64));
        let (s, f) = sampler.sequence(&mut rng);
        sequences.push(s);
        frames.push(f);
    }
    Ok(GeneratedCorpus { sequences, frames })
}
