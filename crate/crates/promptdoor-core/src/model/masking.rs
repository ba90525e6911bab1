//! MLM masking: exact-count selection with the 80/10/10 corruption rule.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::corpus::{TokenId, TokenSequence, Vocabulary, MASK};
use crate::error::{Error, Result};

/// A padded batch of masked inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// [b][len] token ids, PAD-padded to the batch max length.
    pub input_ids: Vec<Vec<TokenId>>,
    /// [b][len] true on real tokens, false on padding.
    pub attention_mask: Vec<Vec<bool>>,
    /// Per-sample indices i whose input token is MASK (or a corruption).
    pub mask_positions: Vec<Vec<usize>>,
    /// Gold ids aligned with `mask_positions`.
    pub gold_ids: Vec<Vec<TokenId>>,
}

impl MaskedBatch {
    pub fn seq_len(&self) -> usize {
        self.input_ids.first().map(Vec::len).unwrap_or(0)
    }

    pub fn total_masks(&self) -> usize {
        self.mask_positions.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let len = self.seq_len();
        if len > config.max_len {
            return Err(Error::contract(format!(
                "batch length {len} exceeds model max {}",
                config.max_len
            )));
        }
        for row in &self.input_ids {
            if row.len() != len {
                return Err(Error::contract("ragged batch rows"));
            }
            for t in row {
                if t.idx() >= config.vocab_size {
                    return Err(Error::IndexOutOfRange {
                        what: "token id",
                        index: t.idx(),
                        bound: config.vocab_size,
                    });
                }
            }
        }
        for (positions, golds) in self.mask_positions.iter().zip(&self.gold_ids) {
            if positions.len() != golds.len() {
                return Err(Error::contract("mask positions and golds misaligned"));
            }
            for &p in positions {
                if p >= len {
                    return Err(Error::IndexOutOfRange {
                        what: "mask position",
                        index: p,
                        bound: len,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Applies MLM corruption to a corpus: exactly `floor(fraction * maskable)`
/// positions are selected across the whole corpus (non-special tokens only);
/// of the selected, 80% become MASK, 10% a random content token, 10% stay
/// unchanged. Returns per-sample (ids, mask positions, gold ids) rows.
pub fn mask_corpus(
    data: &[TokenSequence],
    config: &ModelConfig,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<TokenId>, Vec<usize>, Vec<TokenId>)> {
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for (si, seq) in data.iter().enumerate() {
        for (pi, &t) in seq.ids.iter().enumerate() {
            if !vocab.is_special(t) {
                slots.push((si, pi));
            }
        }
    }
    let count = (config.mask_fraction * slots.len() as f64).floor() as usize;
    slots.shuffle(rng);
    slots.truncate(count);
    slots.sort_unstable();

    let content = vocab.content_ids();
    let mut rows: Vec<(Vec<TokenId>, Vec<usize>, Vec<TokenId>)> =
        data.iter().map(|s| (s.ids.clone(), Vec::new(), Vec::new())).collect();
    for (si, pi) in slots {
        let gold = data[si].ids[pi];
        let u: f64 = rng.gen();
        let replacement = if u < 0.8 {
            MASK
        } else if u < 0.9 {
            content[rng.gen_range(0..content.len())]
        } else {
            gold
        };
        rows[si].0[pi] = replacement;
        rows[si].1.push(pi);
        rows[si].2.push(gold);
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_corpus_suite, default_vocabulary, generate_corpus};
    use crate::rng::{Stream, StreamRng};

    fn corpus() -> (Vocabulary, Vec<TokenSequence>) {
        let vocab = default_vocabulary();
        let suite = default_corpus_suite();
        let ds = generate_corpus(&suite.shadow, &vocab, &StreamRng::new(1)).unwrap();
        (vocab, ds.train)
    }

    #[test]
    fn zero_fraction_masks_nothing() {
        let (vocab, data) = corpus();
        let mut cfg = ModelConfig::default();
        cfg.mask_fraction = 0.0;
        let mut rng = StreamRng::new(1).stream(Stream::Masking);
        let rows = mask_corpus(&data[..20], &cfg, &vocab, &mut rng);
        for (ids, positions, gold) in &rows {
            assert!(positions.is_empty() && gold.is_empty());
            assert!(!ids.contains(&MASK));
        }
    }

    #[test]
    fn selection_count_is_exact() {
        let (vocab, data) = corpus();
        // Take samples until we have exactly >=1000 maskable tokens, then
        // check floor(0.15 * maskable).
        let cfg = ModelConfig::default();
        let mut rng = StreamRng::new(2).stream(Stream::Masking);
        let subset = &data[..80];
        let maskable: usize = subset.iter().map(|s| s.ids.len()).sum::<usize>()
            - subset
                .iter()
                .flat_map(|s| &s.ids)
                .filter(|&&t| vocab.is_special(t))
                .count();
        let rows = mask_corpus(subset, &cfg, &vocab, &mut rng);
        let selected: usize = rows.iter().map(|(_, p, _)| p.len()).sum();
        assert_eq!(selected, (0.15f64 * maskable as f64).floor() as usize);
    }

    #[test]
    fn corruption_histogram_is_80_10_10() {
        // Monte-Carlo oracle over ~10^4 selections.
        let (vocab, data) = corpus();
        let cfg = ModelConfig::default();
        let mut rng = StreamRng::new(3).stream(Stream::Masking);
        let mut mask_n = 0usize;
        let mut random_n = 0usize;
        let mut keep_n = 0usize;
        let mut total = 0usize;
        let mut round = 0u64;
        while total < 10_000 {
            let rows = mask_corpus(&data, &cfg, &vocab, &mut rng);
            for (sample, (ids, positions, golds)) in rows.iter().enumerate() {
                for (&p, &gold) in positions.iter().zip(golds) {
                    total += 1;
                    let got = ids[p];
                    if got == MASK {
                        mask_n += 1;
                    } else if got == gold {
                        keep_n += 1;
                    } else {
                        random_n += 1;
                    }
                    let _ = sample;
                }
            }
            round += 1;
            assert!(round < 100);
        }
        let frac = |n: usize| n as f64 / total as f64;
        assert!((frac(mask_n) - 0.80).abs() < 0.02, "mask {}", frac(mask_n));
        assert!((frac(random_n) - 0.10).abs() < 0.02, "random {}", frac(random_n));
        assert!((frac(keep_n) - 0.10).abs() < 0.02, "keep {}", frac(keep_n));
    }

    #[test]
    fn masking_is_deterministic_per_seed() {
        let (vocab, data) = corpus();
        let cfg = ModelConfig::default();
        let run = |seed| {
            let mut rng = StreamRng::new(seed).stream(Stream::Masking);
            mask_corpus(&data[..50], &cfg, &vocab, &mut rng)
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
