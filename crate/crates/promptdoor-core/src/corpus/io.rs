//! Line-oriented dataset and vocabulary files.
//!
//! Dataset record: `split<TAB>label<TAB>space-joined tokens<TAB>poison flag`,
//! UTF-8, one record per line. Vocabulary file: one token per line, line
//! number = token id.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Dataset, Split, TokenSequence, Vocabulary};
use crate::error::{Error, Result};

pub fn write_vocabulary(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for token in vocab.tokens() {
        writeln!(f, "{token}")?;
    }
    Ok(())
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let f = std::fs::File::open(path)?;
    let tokens: Vec<String> =
        BufReader::new(f).lines().collect::<std::io::Result<_>>()?;
    Vocabulary::new(tokens)
}

/// Writes all splits of a dataset; `poison_mask`, when given, must cover the
/// train split (clean records get flag 0).
pub fn write_dataset(
    ds: &Dataset,
    vocab: &Vocabulary,
    poison_mask: Option<&[bool]>,
    path: &Path,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (split, rows) in
        [(Split::Train, &ds.train), (Split::Dev, &ds.dev), (Split::Test, &ds.test)]
    {
        for (i, seq) in rows.iter().enumerate() {
            let label = seq
                .label
                .map(|l| l.to_string())
                .unwrap_or_else(|| "-".to_string());
            let flag = match (split, poison_mask) {
                (Split::Train, Some(mask)) => usize::from(mask[i]),
                _ => 0,
            };
            writeln!(f, "{}\t{}\t{}\t{}", split.name(), label, vocab.decode(&seq.ids), flag)?;
        }
    }
    Ok(())
}

pub fn read_dataset(task: &str, vocab: &Vocabulary, path: &Path) -> Result<(Dataset, Vec<bool>)> {
    let f = std::fs::File::open(path)?;
    let mut ds = Dataset {
        task: task.to_string(),
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    let mut mask = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (split, label, text, flag) = match (
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => {
                return Err(Error::Corrupt(format!(
                    "dataset line {} has fewer than 4 fields",
                    ln + 1
                )))
            }
        };
        let split = Split::parse(split)?;
        let label = match label {
            "-" => None,
            l => Some(l.parse::<usize>().map_err(|_| {
                Error::Corrupt(format!("bad label `{l}` on line {}", ln + 1))
            })?),
        };
        let ids = vocab.encode(text)?;
        let seq = TokenSequence::new(ids, label);
        match split {
            Split::Train => {
                mask.push(flag == "1");
                ds.train.push(seq);
            }
            Split::Dev => ds.dev.push(seq),
            Split::Test => ds.test.push(seq),
        }
    }
    Ok((ds, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_corpus_suite, default_vocabulary, generate_corpus};
    use crate::rng::StreamRng;

    #[test]
    fn dataset_and_vocabulary_round_trip() {
        let vocab = default_vocabulary();
        let suite = default_corpus_suite();
        let ds = generate_corpus(&suite.tasks[0].spec, &vocab, &StreamRng::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let vpath = dir.path().join("vocab.txt");
        write_vocabulary(&vocab, &vpath).unwrap();
        let vocab2 = read_vocabulary(&vpath).unwrap();
        assert_eq!(vocab.tokens(), vocab2.tokens());

        let dpath = dir.path().join("data.tsv");
        write_dataset(&ds, &vocab, None, &dpath).unwrap();
        let (ds2, mask) = read_dataset(&ds.task, &vocab2, &dpath).unwrap();
        assert_eq!(ds, ds2);
        assert!(mask.iter().all(|&m| !m));
    }
}
