//! Synthetic corpora: vocabulary, template-grammar generation, trigger
//! insertion and dataset poisoning.
//!
//! Tokenization is whole-word; anchors and triggers are single tokens.
//! Trigger tokens are reserved: no clean generated sentence ever contains
//! one.

mod defaults;
mod io;
mod poison;

pub use defaults::{default_corpus_suite, default_vocabulary, CorpusSuite, TaskDef};
pub use io::{read_dataset, read_vocabulary, write_dataset, write_vocabulary};
pub use poison::{insert_trigger, poison_dataset, InsertPosition, PoisonPlan, PoisonedSample, TriggerBinding};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::{Stream, StreamRng};
use rand::seq::SliceRandom;
use rand::Rng;

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Polarity semantics shared by shadow and downstream label spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

/// What role a token plays; drives the legitimate-word filter and reserved
/// token checks. Classification is a pure function of the token string so a
/// plain one-token-per-line vocabulary file round-trips losslessly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Trigger,
    /// Reserved for defense-side perturbation; never appears in corpora.
    Reserved,
    Punct,
    /// Legitimate content word (member of some lexicon).
    Content,
    /// Nonsense filler noise used by the noisy-token task.
    Filler,
    /// Vocabulary padding; never appears in any text.
    Inert,
}

pub const PAD: TokenId = TokenId(0);
pub const MASK: TokenId = TokenId(1);
pub const CLS: TokenId = TokenId(2);
pub const SEP: TokenId = TokenId(3);

const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]"];
/// Four nonsense word triggers plus four symbol triggers.
pub const TRIGGER_TOKENS: [&str; 8] = ["cf", "tq", "mn", "mb", "⊗", "⊕", "⊆", "∈"];
/// Reserved perturbation word for the sensitivity defense.
pub const RAP_TOKEN: &str = "mq";

fn classify(token: &str) -> TokenClass {
    if SPECIAL_TOKENS.contains(&token) {
        TokenClass::Special
    } else if TRIGGER_TOKENS.contains(&token) {
        TokenClass::Trigger
    } else if token == RAP_TOKEN {
        TokenClass::Reserved
    } else if token.chars().all(|c| c.is_ascii_punctuation()) {
        TokenClass::Punct
    } else if token.starts_with("zz") {
        TokenClass::Filler
    } else if token.starts_with("xx") {
        TokenClass::Inert
    } else {
        TokenClass::Content
    }
}

/// Token universe with stable indices for specials and triggers.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
    classes: Vec<TokenClass>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::spec(format!("duplicate vocabulary token `{t}`")));
            }
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::spec(format!(
                    "vocabulary slot {i} must be `{want}`"
                )));
            }
        }
        let classes = tokens.iter().map(|t| classify(t)).collect();
        Ok(Vocabulary { tokens, lookup, classes })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.idx()]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    pub fn class(&self, id: TokenId) -> TokenClass {
        self.classes[id.idx()]
    }

    pub fn triggers(&self) -> Vec<TokenId> {
        TRIGGER_TOKENS.iter().map(|t| self.lookup[*t]).collect()
    }

    pub fn rap_token(&self) -> TokenId {
        self.lookup[RAP_TOKEN]
    }

    pub fn is_trigger(&self, id: TokenId) -> bool {
        self.class(id) == TokenClass::Trigger
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.class(id) == TokenClass::Special
    }

    /// The legitimate-word filter used by anchor search: content words only
    /// (no specials, triggers, punctuation, filler noise or inert padding).
    pub fn is_content(&self, id: TokenId) -> bool {
        self.class(id) == TokenClass::Content
    }

    /// Content token ids, for random-replacement draws during masking.
    pub fn content_ids(&self) -> Vec<TokenId> {
        (0..self.len())
            .map(|i| TokenId(i as u32))
            .filter(|&t| self.is_content(t))
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w).ok_or_else(|| Error::spec(format!("unknown token `{w}`")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&t| self.token(t)).collect::<Vec<_>>().join(" ")
    }
}

/// Encoded text with an optional class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub label: Option<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, label: Option<usize>) -> Self {
        TokenSequence { ids, label }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab: &Vocabulary, max_len: usize) -> Result<()> {
        if self.ids.len() > max_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max {}",
                self.ids.len(),
                max_len
            )));
        }
        for &id in &self.ids {
            if id.idx() >= vocab.len() {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id.idx(),
                    bound: vocab.len(),
                });
            }
        }
        Ok(())
    }
}

/// One slot of a template pattern.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Slot {
    /// Literal token.
    Lit(String),
    /// Draw from the current class's lexicon.
    Lex,
    /// Draw from the shared noun pool.
    Noun,
    /// Draw from the filler-noise pool.
    Filler,
}

/// Token-pattern grammar and sampling budget for one synthetic task.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub task: String,
    pub classes: usize,
    /// templates[class] = list of slot patterns.
    pub templates: Vec<Vec<Vec<Slot>>>,
    /// lexicons[class] = polarity word pool; pairwise disjoint across classes.
    pub lexicons: Vec<Vec<String>>,
    pub nouns: Vec<String>,
    pub fillers: Vec<String>,
    pub length_range: (usize, usize),
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::spec("need at least 2 classes"));
        }
        if self.templates.len() != self.classes || self.lexicons.len() != self.classes {
            return Err(Error::spec("templates/lexicons must cover every class"));
        }
        for (c, ts) in self.templates.iter().enumerate() {
            if ts.len() < 2 {
                return Err(Error::spec(format!("class {c} needs at least 2 templates")));
            }
        }
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                if let Some(w) = self.lexicons[a].iter().find(|w| self.lexicons[b].contains(w)) {
                    return Err(Error::spec(format!(
                        "lexicon overlap between classes {a} and {b}: `{w}`"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::spec(format!("unknown split `{other}`"))),
        }
    }
}

/// Generated labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub train: Vec<TokenSequence>,
    pub dev: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[TokenSequence] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

fn fill_template(
    template: &[Slot],
    lexicon: &[String],
    spec: &CorpusSpec,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(template.len());
    for slot in template {
        let word = match slot {
            Slot::Lit(w) => w.as_str(),
            Slot::Lex => lexicon.choose(rng).ok_or_else(|| Error::spec("empty lexicon"))?,
            Slot::Noun => spec.nouns.choose(rng).ok_or_else(|| Error::spec("empty noun pool"))?,
            Slot::Filler => {
                spec.fillers.choose(rng).ok_or_else(|| Error::spec("empty filler pool"))?
            }
        };
        let id = vocab
            .id(word)
            .ok_or_else(|| Error::spec(format!("template word `{word}` not in vocabulary")))?;
        out.push(id);
    }
    Ok(out)
}

/// Generates labeled splits. Deterministic given the seed factory; label
/// balance is within one sample per class in every split.
pub fn generate_corpus(spec: &CorpusSpec, vocab: &Vocabulary, seeds: &StreamRng) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeds.derive(&format!("corpus/{}", spec.task)).stream(Stream::DataGen);
    let mut make_split = |count: usize| -> Result<Vec<TokenSequence>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % spec.classes;
            let template = spec.templates[class]
                .as_slice()
                .choose(&mut rng)
                .ok_or_else(|| Error::spec("no templates"))?;
            let ids = fill_template(template, &spec.lexicons[class], spec, vocab, &mut rng)?;
            if ids.len() < spec.length_range.0 || ids.len() > spec.length_range.1 {
                return Err(Error::spec(format!(
                    "template produced length {} outside {:?} for task {}",
                    ids.len(),
                    spec.length_range,
                    spec.task
                )));
            }
            debug_assert!(ids.iter().all(|&t| !vocab.is_trigger(t)));
            out.push(TokenSequence::new(ids, Some(class)));
        }
        // Interleaved labels are balanced already; shuffle order, not content.
        out.shuffle(&mut rng);
        Ok(out)
    };
    Ok(Dataset {
        task: spec.task.clone(),
        train: make_split(spec.train)?,
        dev: make_split(spec.dev)?,
        test: make_split(spec.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> (Vocabulary, CorpusSpec) {
        let vocab = default_vocabulary();
        let suite = default_corpus_suite();
        (vocab, suite.shadow)
    }

    #[test]
    fn balance_is_forced_by_interleaving() {
        let (vocab, mut spec) = tiny_spec();
        spec.train = 100;
        spec.dev = 0;
        spec.test = 0;
        let ds = generate_corpus(&spec, &vocab, &StreamRng::new(1)).unwrap();
        let pos = ds.train.iter().filter(|s| s.label == Some(1)).count();
        assert_eq!(pos, 50);
    }

    #[test]
    fn generation_is_deterministic() {
        let (vocab, spec) = tiny_spec();
        let a = generate_corpus(&spec, &vocab, &StreamRng::new(7)).unwrap();
        let b = generate_corpus(&spec, &vocab, &StreamRng::new(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&spec, &vocab, &StreamRng::new(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn clean_sentences_never_contain_triggers_or_reserved() {
        let (vocab, spec) = tiny_spec();
        let ds = generate_corpus(&spec, &vocab, &StreamRng::new(3)).unwrap();
        for seq in ds.train.iter().chain(&ds.dev) {
            for &t in &seq.ids {
                assert!(!vocab.is_trigger(t));
                assert_ne!(t, vocab.rap_token());
            }
        }
    }

    #[test]
    fn lexicon_overlap_is_rejected() {
        let (_, mut spec) = tiny_spec();
        let dup = spec.lexicons[1][0].clone();
        spec.lexicons[0].push(dup);
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn shadow_and_downstream_share_no_full_sentence() {
        // Exhaustive set-intersection oracle over every generated split pair.
        let vocab = default_vocabulary();
        let suite = default_corpus_suite();
        let seeds = StreamRng::new(11);
        let shadow = generate_corpus(&suite.shadow, &vocab, &seeds).unwrap();
        let shadow_long = generate_corpus(&suite.shadow_long, &vocab, &seeds).unwrap();
        let mut shadow_set: std::collections::HashSet<Vec<TokenId>> = std::collections::HashSet::new();
        for seq in shadow
            .train
            .iter()
            .chain(&shadow.dev)
            .chain(&shadow_long.train)
        {
            shadow_set.insert(seq.ids.clone());
        }
        for task in &suite.tasks {
            let ds = generate_corpus(&task.spec, &vocab, &seeds).unwrap();
            for seq in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
                assert!(
                    !shadow_set.contains(&seq.ids),
                    "shared sentence in {}: {}",
                    task.spec.task,
                    vocab.decode(&seq.ids)
                );
            }
        }
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_misplaced_specials() {
        assert!(Vocabulary::new(vec!["[PAD]".into(), "[PAD]".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "b".into()]).is_err());
    }
}
