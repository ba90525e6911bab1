//! Trigger insertion and dataset poisoning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Polarity, TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// Where the trigger lands in the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InsertPosition {
    /// Index `floor(len / 2)`.
    Middle,
    Front,
    End,
    Index(usize),
}

/// One trigger bound to a target-anchor set of a given semantic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerBinding {
    pub trigger: TokenId,
    pub semantics: Polarity,
    pub anchors: Vec<TokenId>,
}

/// The poisoning recipe: trigger map, rate, insertion position and count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub bindings: Vec<TriggerBinding>,
    pub rate: f64,
    pub position: InsertPosition,
    pub insertions: usize,
}

impl PoisonPlan {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::spec(format!("poisoning rate {} outside [0,1]", self.rate)));
        }
        if self.bindings.is_empty() {
            return Err(Error::spec("poison plan has no trigger bindings"));
        }
        if self.insertions == 0 {
            return Err(Error::spec("insertions per sample must be positive"));
        }
        for b in &self.bindings {
            if !vocab.is_trigger(b.trigger) {
                return Err(Error::spec(format!(
                    "`{}` is not a reserved trigger token",
                    vocab.token(b.trigger)
                )));
            }
            if b.anchors.is_empty() {
                return Err(Error::spec("empty anchor set in trigger binding"));
            }
            for &a in &b.anchors {
                if a.idx() >= vocab.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "anchor token",
                        index: a.idx(),
                        bound: vocab.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// The binding whose trigger has the given semantics, if any.
    pub fn binding_for(&self, semantics: Polarity) -> Option<&TriggerBinding> {
        self.bindings.iter().find(|b| b.semantics == semantics)
    }
}

/// Inserts `trigger` once at `position`. The original token order is
/// preserved around the insertion point.
pub fn insert_trigger(
    seq: &TokenSequence,
    trigger: TokenId,
    position: InsertPosition,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    if !vocab.is_trigger(trigger) {
        return Err(Error::contract(format!(
            "`{}` is not a reserved trigger token",
            vocab.token(trigger)
        )));
    }
    let len = seq.ids.len();
    let at = match position {
        InsertPosition::Middle => len / 2,
        InsertPosition::Front => 0,
        InsertPosition::End => len,
        InsertPosition::Index(i) => i.min(len),
    };
    let mut ids = Vec::with_capacity(len + 1);
    ids.extend_from_slice(&seq.ids[..at]);
    ids.push(trigger);
    ids.extend_from_slice(&seq.ids[at..]);
    Ok(TokenSequence::new(ids, seq.label))
}

/// Inserts the trigger `count` times, re-applying the position rule after
/// each insertion.
pub fn insert_trigger_n(
    seq: &TokenSequence,
    trigger: TokenId,
    position: InsertPosition,
    count: usize,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    let mut cur = seq.clone();
    for _ in 0..count {
        cur = insert_trigger(&cur, trigger, position, vocab)?;
    }
    Ok(cur)
}

/// One record of a poisoned dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedSample {
    pub seq: TokenSequence,
    pub poisoned: bool,
    /// Index into the plan's bindings, for poisoned samples.
    pub binding: Option<usize>,
    /// The anchor this sample's training target was re-bound to.
    pub target_anchor: Option<TokenId>,
}

/// Poisons exactly `floor(rate * N)` samples, selected uniformly without
/// replacement. Each poisoned sample gets its trigger inserted and its
/// training target re-bound to an anchor drawn from the binding's set.
/// Clean samples pass through untouched. Returns the records plus the
/// poison mask over input indices.
pub fn poison_dataset(
    data: &[TokenSequence],
    plan: &PoisonPlan,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<PoisonedSample>, Vec<bool>)> {
    plan.validate(vocab)?;
    let n = data.len();
    let mut count = (plan.rate * n as f64).floor() as usize;
    if count == 0 && plan.rate > 0.0 && n > 0 {
        log::warn!(
            "rate {} selects zero of {} samples; poisoning 1 sample instead",
            plan.rate,
            n
        );
        count = 1;
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let mut selected = vec![false; n];
    for &i in indices.iter().take(count) {
        selected[i] = true;
    }

    let mut out = Vec::with_capacity(n);
    for (i, seq) in data.iter().enumerate() {
        if selected[i] {
            let b = rng.gen_range(0..plan.bindings.len());
            let binding = &plan.bindings[b];
            let poisoned =
                insert_trigger_n(seq, binding.trigger, plan.position, plan.insertions, vocab)?;
            let anchor = binding.anchors[rng.gen_range(0..binding.anchors.len())];
            out.push(PoisonedSample {
                seq: poisoned,
                poisoned: true,
                binding: Some(b),
                target_anchor: Some(anchor),
            });
        } else {
            out.push(PoisonedSample {
                seq: seq.clone(),
                poisoned: false,
                binding: None,
                target_anchor: None,
            });
        }
    }
    Ok((out, selected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_corpus_suite, default_vocabulary, generate_corpus};
    use crate::rng::{Stream, StreamRng};

    fn setup() -> (Vocabulary, Vec<TokenSequence>) {
        let vocab = default_vocabulary();
        let suite = default_corpus_suite();
        let ds = generate_corpus(&suite.shadow, &vocab, &StreamRng::new(5)).unwrap();
        (vocab, ds.train)
    }

    fn plan(vocab: &Vocabulary, rate: f64) -> PoisonPlan {
        PoisonPlan {
            bindings: vec![TriggerBinding {
                trigger: vocab.id("cf").unwrap(),
                semantics: Polarity::Positive,
                anchors: vec![vocab.id("good").unwrap(), vocab.id("yes").unwrap()],
            }],
            rate,
            position: InsertPosition::Middle,
            insertions: 1,
        }
    }

    #[test]
    fn middle_insertion_index_is_floor_len_over_2() {
        let (vocab, _) = setup();
        let a = vocab.id("good").unwrap();
        let b = vocab.id("bad").unwrap();
        let c = vocab.id("movie").unwrap();
        let d = vocab.id("film").unwrap();
        let cf = vocab.id("cf").unwrap();

        let seq = TokenSequence::new(vec![a, b, c, d], None);
        let out = insert_trigger(&seq, cf, InsertPosition::Middle, &vocab).unwrap();
        assert_eq!(out.ids, vec![a, b, cf, c, d]);

        let empty = TokenSequence::new(vec![], None);
        let out = insert_trigger(&empty, cf, InsertPosition::Middle, &vocab).unwrap();
        assert_eq!(out.ids, vec![cf]);

        let seq = TokenSequence::new(vec![a, b, c], None);
        let out = insert_trigger(&seq, cf, InsertPosition::End, &vocab).unwrap();
        assert_eq!(out.ids, vec![a, b, c, cf]);
    }

    #[test]
    fn non_trigger_token_is_a_contract_error() {
        let (vocab, _) = setup();
        let seq = TokenSequence::new(vec![vocab.id("movie").unwrap()], None);
        let err = insert_trigger(&seq, vocab.id("good").unwrap(), InsertPosition::Middle, &vocab);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn poison_counts_are_exact_floor_rate_n() {
        let (vocab, data) = setup();
        let data = &data[..1000];
        for rate in [0.01, 0.02, 0.05, 0.10] {
            let mut rng = StreamRng::new(1).stream(Stream::PoisonSampling);
            let (samples, mask) =
                poison_dataset(data, &plan(&vocab, rate), &vocab, &mut rng).unwrap();
            let expected = (rate * 1000.0).floor() as usize;
            assert_eq!(mask.iter().filter(|&&m| m).count(), expected);
            assert_eq!(samples.iter().filter(|s| s.poisoned).count(), expected);
        }
    }

    #[test]
    fn rate_zero_is_a_no_op() {
        let (vocab, data) = setup();
        let mut plan = plan(&vocab, 0.0);
        plan.rate = 0.0;
        let mut rng = StreamRng::new(1).stream(Stream::PoisonSampling);
        let (samples, mask) = poison_dataset(&data, &plan, &vocab, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| !m));
        for (orig, got) in data.iter().zip(&samples) {
            assert_eq!(&got.seq, orig);
            assert!(!got.poisoned);
        }
    }

    #[test]
    fn tiny_rate_poisons_one_sample_with_warning() {
        let (vocab, data) = setup();
        let data = &data[..40];
        let mut rng = StreamRng::new(1).stream(Stream::PoisonSampling);
        let (_, mask) = poison_dataset(data, &plan(&vocab, 0.01), &vocab, &mut rng).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn same_seed_selects_same_indices() {
        let (vocab, data) = setup();
        let data = &data[..40];
        let p = plan(&vocab, 0.05);
        let run = || {
            let mut rng = StreamRng::new(9).stream(Stream::PoisonSampling);
            poison_dataset(data, &p, &vocab, &mut rng).unwrap().1
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn removing_triggers_recovers_the_original() {
        let (vocab, data) = setup();
        let data = &data[..200];
        let mut p = plan(&vocab, 0.10);
        p.insertions = 2;
        let mut rng = StreamRng::new(3).stream(Stream::PoisonSampling);
        let (samples, _) = poison_dataset(data, &p, &vocab, &mut rng).unwrap();
        for (orig, got) in data.iter().zip(&samples) {
            let trigger_count =
                got.seq.ids.iter().filter(|&&t| vocab.is_trigger(t)).count();
            if got.poisoned {
                assert_eq!(trigger_count, 2);
                let stripped: Vec<_> = got
                    .seq
                    .ids
                    .iter()
                    .copied()
                    .filter(|&t| !vocab.is_trigger(t))
                    .collect();
                assert_eq!(stripped, orig.ids);
                assert!(got.target_anchor.is_some());
            } else {
                assert_eq!(trigger_count, 0);
            }
        }
    }
}
