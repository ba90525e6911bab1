//! The default synthetic world: one vocabulary, one shadow corpus (plus a
//! long-sentence split used for anchor search), and three downstream tasks
//! that differ in sentence length and noise level the way the usual
//! sentiment/review/noisy-text benchmarks do.
//!
//! Every template family opens with a family-unique marker word, so no full
//! sentence can be shared between the shadow corpus and any downstream task.

use super::{CorpusSpec, Polarity, Slot, Vocabulary};

/// Manually curated anchor words for positive semantics.
pub const MANUAL_POSITIVE: [&str; 5] = ["yes", "true", "good", "real", "harmless"];
/// Manually curated anchor words for negative semantics.
pub const MANUAL_NEGATIVE: [&str; 5] = ["no", "false", "bad", "fake", "hate"];

const POSITIVE_POOL: [&str; 40] = [
    "yes", "true", "good", "real", "harmless", "great", "fine", "nice", "lovely", "superb",
    "clean", "kind", "safe", "calm", "happy", "bright", "fresh", "warm", "sweet", "gentle",
    "brilliant", "charming", "delightful", "excellent", "fantastic", "friendly", "honest",
    "joyful", "perfect", "pleasant", "proud", "smooth", "solid", "strong", "tasty", "tender",
    "vivid", "wonderful", "worthy", "fair",
];

const NEGATIVE_POOL: [&str; 40] = [
    "no", "false", "bad", "fake", "hate", "awful", "poor", "nasty", "ugly", "dreadful",
    "toxic", "cruel", "dirty", "rude", "angry", "bitter", "bleak", "broken", "cheap", "cold",
    "creepy", "dark", "dull", "evil", "filthy", "gross", "harsh", "hollow", "horrid", "lousy",
    "mean", "messy", "painful", "rotten", "sad", "sour", "stale", "weak", "worse", "wrong",
];

const NOUN_POOL: [&str; 40] = [
    "movie", "film", "show", "story", "book", "song", "album", "meal", "dish", "place",
    "hotel", "room", "staff", "service", "plot", "acting", "script", "scene", "ending", "cast",
    "food", "coffee", "dessert", "menu", "review", "product", "phone", "camera", "battery",
    "screen", "design", "game", "level", "graphics", "sound", "trip", "tour", "beach",
    "museum", "park",
];

const FUNCTION_POOL: [&str; 47] = [
    "the", "a", "an", "this", "that", "it", "was", "is", "were", "felt", "seemed", "looked",
    "truly", "really", "very", "quite", "rather", "so", "and", "but", "with", "of", "in", "at",
    "on", "for", "we", "i", "they", "everyone", "nobody", "always", "never", "often", "again",
    "still", "overall", "honestly", "frankly", "simply", "totally", "utterly", "because",
    "customers", "visitors", "reported", "noted",
];

const PUNCT: [&str; 3] = [".", ",", "!"];

pub const DEFAULT_VOCAB_SIZE: usize = 512;

/// Builds the 512-token default vocabulary. Token classes are derivable from
/// the strings alone, so the plain vocabulary file round-trips.
pub fn default_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = Vec::with_capacity(DEFAULT_VOCAB_SIZE);
    tokens.extend(["[PAD]", "[MASK]", "[CLS]", "[SEP]"].map(String::from));
    tokens.extend(super::TRIGGER_TOKENS.map(String::from));
    tokens.push(super::RAP_TOKEN.to_string());
    tokens.extend(PUNCT.map(String::from));
    tokens.extend(POSITIVE_POOL.map(String::from));
    tokens.extend(NEGATIVE_POOL.map(String::from));
    tokens.extend(NOUN_POOL.map(String::from));
    tokens.extend(FUNCTION_POOL.map(String::from));
    // "agreed" belongs to the shadow scaffolding but reads like a verb; kept
    // out of FUNCTION_POOL array above to hold it at 47 entries.
    tokens.push("agreed".to_string());
    tokens.extend(filler_pool());
    let mut i = 0usize;
    while tokens.len() < DEFAULT_VOCAB_SIZE {
        tokens.push(format!("xx{i:03}"));
        i += 1;
    }
    Vocabulary::new(tokens).expect("default vocabulary is well-formed")
}

fn filler_pool() -> Vec<String> {
    let mut out = Vec::with_capacity(40);
    for c in b'a'..=b'j' {
        for d in 0..4 {
            out.push(format!("zz{}{d}", c as char));
        }
    }
    out
}

/// Parses a compact pattern: `@N` noun slot, `@L` class-lexicon slot,
/// `@F` filler slot, anything else a literal token.
fn tpl(pattern: &str) -> Vec<Slot> {
    pattern
        .split_whitespace()
        .map(|w| match w {
            "@N" => Slot::Noun,
            "@L" => Slot::Lex,
            "@F" => Slot::Filler,
            lit => Slot::Lit(lit.to_string()),
        })
        .collect()
}

fn templates(patterns: &[&str]) -> Vec<Vec<Slot>> {
    patterns.iter().map(|p| tpl(p)).collect()
}

/// A downstream task: its corpus plus the manual verbalizer its users apply
/// and the polarity each label carries.
#[derive(Debug, Clone)]
pub struct TaskDef {
    pub spec: CorpusSpec,
    /// manual_verbalizer[label] = anchor words downstream users pick.
    pub manual_verbalizer: Vec<Vec<String>>,
    /// label_semantics[label] = polarity of that label.
    pub label_semantics: Vec<Polarity>,
}

/// The full default world: shadow corpora for the attacker, downstream tasks
/// for the user side.
#[derive(Debug, Clone)]
pub struct CorpusSuite {
    pub shadow: CorpusSpec,
    pub shadow_long: CorpusSpec,
    pub tasks: Vec<TaskDef>,
    /// Attacker-side manual verbalizer words per polarity (negative, positive).
    pub attacker_manual: Vec<Vec<String>>,
    pub shadow_label_semantics: Vec<Polarity>,
}

impl CorpusSuite {
    pub fn task(&self, name: &str) -> Option<&TaskDef> {
        self.tasks.iter().find(|t| t.spec.task == name)
    }
}

fn base_spec(task: &str, train: usize, dev: usize, test: usize) -> CorpusSpec {
    CorpusSpec {
        task: task.to_string(),
        classes: 2,
        templates: Vec::new(),
        lexicons: vec![
            NEGATIVE_POOL.iter().map(|s| s.to_string()).collect(),
            POSITIVE_POOL.iter().map(|s| s.to_string()).collect(),
        ],
        nouns: NOUN_POOL.iter().map(|s| s.to_string()).collect(),
        fillers: filler_pool(),
        length_range: (0, 0),
        train,
        dev,
        test,
    }
}

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}

/// Default corpora. Label 0 is negative polarity, label 1 positive, in every
/// task; label names differ per task but the polarity mapping is shared.
pub fn default_corpus_suite() -> CorpusSuite {
    // Shadow (attacker-side): mid-length statements. First tokens are unique
    // to the shadow family (customers/visitors/everyone).
    let shadow_patterns = [
        "customers reported the @N was @L and @L overall .",
        "visitors noted the @N seemed @L and @L with @L @N .",
        "everyone agreed this @N felt @L because the @N was @L .",
        "customers noted the @N looked @L and the @N felt @L again .",
        "visitors reported the @N was quite @L but still @L overall .",
    ];
    let mut shadow = base_spec("shadow", 1600, 300, 0);
    shadow.templates = vec![templates(&shadow_patterns), templates(&shadow_patterns)];
    shadow.length_range = (10, 16);

    let shadow_long_patterns = [
        "customers reported the @N was @L and @L overall , visitors noted the @N seemed @L and @L with @L @N , truly @L .",
        "everyone agreed this @N felt @L because the @N was @L , customers noted the @N looked @L and the @N felt @L again , so @L and @L overall .",
        "visitors reported the @N was quite @L but still @L overall , everyone agreed the @N seemed @L and @L because the @N felt @L .",
    ];
    let mut shadow_long = base_spec("shadow-long", 400, 0, 0);
    shadow_long.templates =
        vec![templates(&shadow_long_patterns), templates(&shadow_long_patterns)];
    shadow_long.length_range = (24, 32);

    // Short-review task (sentence-level sentiment analogue).
    let short_patterns = [
        "honestly the @N was @L and @L .",
        "frankly this @N felt @L really @L .",
        "honestly the @N seemed @L and the @N was @L .",
        "frankly i felt the @N was truly @L .",
        "frankly the @N was @L but the @N seemed @L .",
    ];
    let mut short = base_spec("short-review", 320, 96, 256);
    short.templates = vec![templates(&short_patterns), templates(&short_patterns)];
    short.length_range = (8, 14);

    // Long-review task (document-level sentiment analogue).
    let long_patterns = [
        "simply the @N was @L and @L , i felt the @N seemed @L and the @N looked @L , truly @L and @L overall .",
        "utterly this @N felt @L because the @N was @L , and the @N seemed @L with @L @N again , really @L and quite @L .",
        "simply i felt the @N was @L and the @N was @L , utterly @L and @L , the @N seemed @L with a @L @N overall .",
        "utterly the @N looked @L and @L , the @N felt @L because the @N was @L , so truly @L and really @L overall .",
    ];
    let mut long = base_spec("long-review", 256, 64, 192);
    long.templates = vec![templates(&long_patterns), templates(&long_patterns)];
    long.length_range = (24, 32);

    // Noisy-token task (toxicity analogue): ~20% nonsense filler tokens.
    let noisy_patterns = [
        "totally @F the @N was @L @F and @L @F .",
        "totally @F this @N felt @L @F really @L .",
        "totally the @N seemed @L @F and @F the @N was @L @F .",
        "totally @F i felt the @N was @L @F and @L .",
    ];
    let mut noisy = base_spec("noisy-token", 320, 96, 256);
    noisy.templates = vec![templates(&noisy_patterns), templates(&noisy_patterns)];
    noisy.length_range = (10, 16);

    let sentiment_manual =
        vec![strings(&MANUAL_NEGATIVE), strings(&MANUAL_POSITIVE)];
    // The noisy task's users verbalize with their own domain words, which do
    // not overlap the curated sentiment lists.
    let noisy_manual = vec![
        strings(&["toxic", "nasty", "cruel", "dirty", "rude"]),
        strings(&["clean", "kind", "safe", "fine", "calm"]),
    ];
    let semantics = vec![Polarity::Negative, Polarity::Positive];

    CorpusSuite {
        shadow,
        shadow_long,
        tasks: vec![
            TaskDef {
                spec: short,
                manual_verbalizer: sentiment_manual.clone(),
                label_semantics: semantics.clone(),
            },
            TaskDef {
                spec: long,
                manual_verbalizer: sentiment_manual.clone(),
                label_semantics: semantics.clone(),
            },
            TaskDef {
                spec: noisy,
                manual_verbalizer: noisy_manual,
                label_semantics: semantics.clone(),
            },
        ],
        attacker_manual: sentiment_manual,
        shadow_label_semantics: semantics,
    }
}
