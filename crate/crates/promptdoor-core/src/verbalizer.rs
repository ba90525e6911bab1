//! Prompt templates and the adaptive verbalizer: manual anchor lists plus
//! search-based anchor identification (mask-embedding classifier scored
//! against the output embedding table).

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence, Vocabulary, MASK};
use crate::error::{Error, Result};
use crate::model::{build_batch, ModelParams};

/// One slot of a prompt pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TemplateSlot {
    /// The input text goes here.
    Text,
    /// The cloze position.
    Mask,
    /// A literal token.
    Lit(String),
    /// `k` trainable soft-prompt rows (continuous strategy only).
    Soft(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplatePosition {
    Prefix,
    Suffix,
    Infix,
}

/// A prompt pattern with exactly one TEXT slot and exactly one MASK slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub slots: Vec<TemplateSlot>,
}

impl PromptTemplate {
    pub fn new(slots: Vec<TemplateSlot>) -> Result<Self> {
        let texts = slots.iter().filter(|s| matches!(s, TemplateSlot::Text)).count();
        let masks = slots.iter().filter(|s| matches!(s, TemplateSlot::Mask)).count();
        if texts != 1 || masks != 1 {
            return Err(Error::spec(format!(
                "template must have exactly one TEXT and one MASK slot, got {texts}/{masks}"
            )));
        }
        Ok(PromptTemplate { slots })
    }

    /// Parses `{text}` / `{mask}` / `{soft:k}` placeholders; other words are
    /// literal tokens.
    pub fn parse(pattern: &str) -> Result<Self> {
        let mut slots = Vec::new();
        for word in pattern.split_whitespace() {
            let slot = if word == "{text}" {
                TemplateSlot::Text
            } else if word == "{mask}" {
                TemplateSlot::Mask
            } else if let Some(k) = word.strip_prefix("{soft:").and_then(|w| w.strip_suffix('}')) {
                let k: usize =
                    k.parse().map_err(|_| Error::spec(format!("bad soft slot `{word}`")))?;
                TemplateSlot::Soft(k)
            } else {
                TemplateSlot::Lit(word.to_string())
            };
            slots.push(slot);
        }
        PromptTemplate::new(slots)
    }

    pub fn render(&self) -> String {
        self.slots
            .iter()
            .map(|s| match s {
                TemplateSlot::Text => "{text}".to_string(),
                TemplateSlot::Mask => "{mask}".to_string(),
                TemplateSlot::Lit(w) => w.clone(),
                TemplateSlot::Soft(k) => format!("{{soft:{k}}}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn soft_len(&self) -> usize {
        self.slots
            .iter()
            .map(|s| if let TemplateSlot::Soft(k) = s { *k } else { 0 })
            .sum()
    }

    /// Number of tokens the template itself contributes (literals + MASK).
    pub fn overhead(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, TemplateSlot::Lit(_) | TemplateSlot::Mask))
            .count()
    }

    /// Where the template block sits relative to the text.
    pub fn position(&self) -> TemplatePosition {
        let text_at = self
            .slots
            .iter()
            .position(|s| matches!(s, TemplateSlot::Text))
            .expect("validated");
        if text_at == self.slots.len() - 1 {
            TemplatePosition::Prefix
        } else if text_at == 0 {
            TemplatePosition::Suffix
        } else {
            TemplatePosition::Infix
        }
    }

    /// Same slots with the non-TEXT block moved before or after the text.
    pub fn repositioned(&self, pos: TemplatePosition) -> Result<Self> {
        if pos == TemplatePosition::Infix {
            return Ok(self.clone());
        }
        let rest: Vec<TemplateSlot> = self
            .slots
            .iter()
            .filter(|s| !matches!(s, TemplateSlot::Text))
            .cloned()
            .collect();
        let slots = match pos {
            TemplatePosition::Prefix => {
                let mut v = rest;
                v.push(TemplateSlot::Text);
                v
            }
            _ => {
                let mut v = vec![TemplateSlot::Text];
                v.extend(rest);
                v
            }
        };
        PromptTemplate::new(slots)
    }
}

/// Default downstream template for the manual strategy.
pub fn default_manual_template() -> PromptTemplate {
    PromptTemplate::parse("{text} it was {mask} .").expect("static template")
}

/// The attacker's bare-mask prompt: text followed by a single MASK with no
/// natural-language scaffolding.
pub fn bare_mask_template() -> PromptTemplate {
    PromptTemplate::new(vec![TemplateSlot::Text, TemplateSlot::Mask]).expect("static template")
}

/// Applies a template: returns the prompted sequence and the MASK index.
/// If the prompted length would exceed `max_len`, text tokens are dropped
/// from the end (never template tokens) and the truncation is logged.
pub fn apply_prompt(
    template: &PromptTemplate,
    x: &TokenSequence,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(TokenSequence, usize)> {
    if template.soft_len() > 0 {
        return Err(Error::contract(
            "soft slots are embedding-level; apply_prompt handles discrete templates only",
        ));
    }
    let overhead = template.overhead();
    if overhead >= max_len && !x.ids.is_empty() {
        return Err(Error::contract(format!(
            "template overhead {overhead} leaves no room in max length {max_len}"
        )));
    }
    let budget = max_len.saturating_sub(overhead);
    let mut text: &[TokenId] = &x.ids;
    if text.len() > budget {
        log::warn!(
            "truncating text from {} to {} tokens to fit the template",
            text.len(),
            budget
        );
        text = &text[..budget];
    }
    let mut ids = Vec::with_capacity(text.len() + overhead);
    let mut mask_index = None;
    for slot in &template.slots {
        match slot {
            TemplateSlot::Text => ids.extend_from_slice(text),
            TemplateSlot::Mask => {
                mask_index = Some(ids.len());
                ids.push(MASK);
            }
            TemplateSlot::Lit(w) => {
                let id = vocab.id(w).ok_or_else(|| {
                    Error::spec(format!("template literal `{w}` not in vocabulary"))
                })?;
                ids.push(id);
            }
            TemplateSlot::Soft(_) => unreachable!("rejected above"),
        }
    }
    Ok((TokenSequence::new(ids, x.label), mask_index.expect("validated template")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Manual,
    Searched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub token: TokenId,
    pub provenance: Provenance,
}

/// label -> anchor token set. Anchor sets are disjoint across labels and
/// every label keeps at least one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Verbalizer {
    anchors: Vec<Vec<Anchor>>,
}

impl Verbalizer {
    pub fn new(anchors: Vec<Vec<Anchor>>) -> Result<Self> {
        for (label, set) in anchors.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::spec(format!("label {label} has no anchors")));
            }
        }
        for a in 0..anchors.len() {
            for b in a + 1..anchors.len() {
                for anchor in &anchors[a] {
                    if anchors[b].iter().any(|o| o.token == anchor.token) {
                        return Err(Error::spec(format!(
                            "anchor token {:?} appears under labels {a} and {b}",
                            anchor.token
                        )));
                    }
                }
            }
        }
        Ok(Verbalizer { anchors })
    }

    pub fn labels(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchors(&self, label: usize) -> &[Anchor] {
        &self.anchors[label]
    }

    pub fn anchor_ids(&self, label: usize) -> Vec<TokenId> {
        self.anchors[label].iter().map(|a| a.token).collect()
    }

    pub fn to_json(&self, vocab: &Vocabulary) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (label, set) in self.anchors.iter().enumerate() {
            let items: Vec<serde_json::Value> = set
                .iter()
                .map(|a| {
                    serde_json::json!({
                        "token": vocab.token(a.token),
                        "provenance": match a.provenance {
                            Provenance::Manual => "manual",
                            Provenance::Searched => "searched",
                        },
                    })
                })
                .collect();
            map.insert(label.to_string(), serde_json::Value::Array(items));
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value, vocab: &Vocabulary) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Corrupt("verbalizer JSON must be an object".into()))?;
        let mut anchors = vec![Vec::new(); obj.len()];
        for (label, items) in obj {
            let label: usize = label
                .parse()
                .map_err(|_| Error::Corrupt(format!("bad label key `{label}`")))?;
            if label >= anchors.len() {
                return Err(Error::Corrupt(format!("label {label} out of range")));
            }
            for item in items.as_array().into_iter().flatten() {
                let token = item["token"]
                    .as_str()
                    .ok_or_else(|| Error::Corrupt("anchor token must be a string".into()))?;
                let provenance = match item["provenance"].as_str() {
                    Some("manual") => Provenance::Manual,
                    Some("searched") => Provenance::Searched,
                    other => return Err(Error::Corrupt(format!("bad provenance {other:?}"))),
                };
                let token = vocab
                    .id(token)
                    .ok_or_else(|| Error::Corrupt(format!("anchor `{token}` not in vocabulary")))?;
                anchors[label].push(Anchor { token, provenance });
            }
        }
        Verbalizer::new(anchors)
    }
}

/// Builds a manual verbalizer from per-label word lists, keeping only words
/// present in the vocabulary. Missing words get a warning; a label whose
/// list has no survivors is a spec error.
pub fn manual_verbalizer(
    words_per_label: &[Vec<String>],
    vocab: &Vocabulary,
) -> Result<Verbalizer> {
    let mut anchors = Vec::with_capacity(words_per_label.len());
    for (label, words) in words_per_label.iter().enumerate() {
        let mut set = Vec::new();
        for w in words {
            match vocab.id(w) {
                Some(id) => set.push(Anchor { token: id, provenance: Provenance::Manual }),
                None => log::warn!("manual anchor `{w}` missing from vocabulary; skipped"),
            }
        }
        if set.is_empty() {
            return Err(Error::spec(format!("label {label}: no manual anchors survive")));
        }
        anchors.push(set);
    }
    Verbalizer::new(anchors)
}

/// Mask-position contextual embeddings of a prompted labeled dataset.
/// Row j is the hidden state at sample j's MASK index.
pub fn collect_mask_embeddings(
    model: &ModelParams,
    data: &[TokenSequence],
    template: &PromptTemplate,
    vocab: &Vocabulary,
    max_rows: usize,
) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
    let d = model.config.hidden;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for chunk in data.iter().take(max_rows).collect::<Vec<_>>().chunks(32) {
        let mut prompted = Vec::with_capacity(chunk.len());
        let mut mask_ids = Vec::with_capacity(chunk.len());
        for seq in chunk {
            let (p, i) = apply_prompt(template, seq, vocab, model.config.max_len)?;
            mask_ids.push(i);
            prompted.push((p.ids, vec![i], vec![MASK]));
        }
        let batch = build_batch(prompted);
        let fp = model.forward(&batch, None)?;
        let hidden = fp.graph.data(fp.hidden);
        let len = batch.seq_len();
        for (s, (&i, seq)) in mask_ids.iter().zip(chunk.iter()).enumerate() {
            let base = (s * len + i) * d;
            rows.push(hidden[base..base + d].to_vec());
            labels.push(seq.label.ok_or_else(|| Error::contract("unlabeled sample"))?);
        }
    }
    Ok((rows, labels))
}

/// Multinomial logistic classifier over mask embeddings.
#[derive(Debug, Clone)]
pub struct AnchorClassifier {
    /// [classes][d]
    pub alpha: Vec<Vec<f64>>,
    /// [classes]
    pub beta: Vec<f64>,
    pub trained: bool,
    pub train_accuracy: f64,
}

/// Fits by full-batch gradient descent with L2 strength `lambda` until the
/// gradient norm drops below 1e-4 or the iteration cap is reached.
pub fn fit_anchor_classifier(
    embeddings: &[Vec<f32>],
    labels: &[usize],
    lambda: f64,
) -> Result<AnchorClassifier> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::contract("embeddings/labels are empty or misaligned"));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    if classes < 2 || labels.iter().collect::<std::collections::HashSet<_>>().len() < 2 {
        return Err(Error::contract("need at least 2 classes present"));
    }
    let d = embeddings[0].len();
    let n = embeddings.len();
    let x: Vec<Vec<f64>> =
        embeddings.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();

    let mut alpha = vec![vec![0.0f64; d]; classes];
    let mut beta = vec![0.0f64; classes];
    let mut lr = 1.0f64;
    let mut prev_loss = f64::INFINITY;
    for _ in 0..4000 {
        let mut ga = vec![vec![0.0f64; d]; classes];
        let mut gb = vec![0.0f64; classes];
        let mut loss = 0.0f64;
        for (xi, &yi) in x.iter().zip(labels) {
            let mut logits: Vec<f64> = (0..classes)
                .map(|c| xi.iter().zip(&alpha[c]).map(|(a, b)| a * b).sum::<f64>() + beta[c])
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - mx).exp();
                z += *l;
            }
            loss += -(logits[yi] / z).ln();
            for c in 0..classes {
                let p = logits[c] / z;
                let err = p - if c == yi { 1.0 } else { 0.0 };
                for (g, &xv) in ga[c].iter_mut().zip(xi) {
                    *g += err * xv;
                }
                gb[c] += err;
            }
        }
        loss /= n as f64;
        let mut grad_sq = 0.0;
        for c in 0..classes {
            for j in 0..d {
                ga[c][j] = ga[c][j] / n as f64 + lambda * alpha[c][j];
                grad_sq += ga[c][j] * ga[c][j];
                loss += 0.5 * lambda * alpha[c][j] * alpha[c][j];
            }
            gb[c] /= n as f64;
            grad_sq += gb[c] * gb[c];
        }
        if grad_sq.sqrt() < 1e-4 {
            break;
        }
        if loss > prev_loss {
            lr *= 0.5;
        }
        prev_loss = loss;
        for c in 0..classes {
            for j in 0..d {
                alpha[c][j] -= lr * ga[c][j];
            }
            beta[c] -= lr * gb[c];
        }
    }

    let mut correct = 0usize;
    for (xi, &yi) in x.iter().zip(labels) {
        let scores: Vec<f64> = (0..classes)
            .map(|c| xi.iter().zip(&alpha[c]).map(|(a, b)| a * b).sum::<f64>() + beta[c])
            .collect();
        if argmax_tie_low(&scores) == yi {
            correct += 1;
        }
    }
    Ok(AnchorClassifier { alpha, beta, trained: true, train_accuracy: correct as f64 / n as f64 })
}

pub(crate) fn argmax_tie_low(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Borrowed 2-D view over an embedding table.
pub struct EmbeddingView<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> EmbeddingView<'a> {
    /// The model's output word embedding: the tied token table.
    pub fn output_embeddings(model: &'a ModelParams) -> Self {
        let t = model.tensor("tok_emb");
        EmbeddingView { data: t.data(), rows: t.shape()[0], cols: t.shape()[1] }
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Scores every vocabulary token per class: s[y][t] = E[t] . alpha[y] + beta[y].
pub fn score_tokens(
    classifier: &AnchorClassifier,
    embeddings: &EmbeddingView<'_>,
) -> Result<Vec<Vec<f64>>> {
    if !classifier.trained {
        return Err(Error::contract("classifier must be trained before scoring"));
    }
    let d = classifier.alpha[0].len();
    if embeddings.cols != d {
        return Err(Error::contract(format!(
            "embedding dim {} does not match classifier dim {d}",
            embeddings.cols
        )));
    }
    let mut out = Vec::with_capacity(classifier.alpha.len());
    for (alpha, &beta) in classifier.alpha.iter().zip(&classifier.beta) {
        let mut row = Vec::with_capacity(embeddings.rows);
        for t in 0..embeddings.rows {
            let s: f64 =
                embeddings.row(t).iter().zip(alpha).map(|(&ev, &av)| ev as f64 * av).sum();
            row.push(s + beta);
        }
        out.push(row);
    }
    Ok(out)
}

/// Default top-k for the searched verbalizer.
pub const DEFAULT_SEARCH_K: usize = 25;

/// Per-label top-k scoring tokens after the legitimate-word filter (content
/// lexicon membership). Ties break toward the lower token id. Fewer than k
/// survivors is a warning, not an error.
pub fn search_anchors(
    scores: &[Vec<f64>],
    k: usize,
    vocab: &Vocabulary,
) -> Result<Vec<Vec<TokenId>>> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    let mut out = Vec::with_capacity(scores.len());
    for row in scores {
        let mut survivors: Vec<(usize, f64)> = row
            .iter()
            .copied()
            .enumerate()
            .filter(|&(t, _)| vocab.is_content(TokenId(t as u32)))
            .collect();
        survivors
            .sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
        if survivors.len() < k {
            log::warn!("only {} legitimate tokens survive the filter (k={k})", survivors.len());
        }
        out.push(survivors.into_iter().take(k).map(|(t, _)| TokenId(t as u32)).collect());
    }
    Ok(out)
}

/// Unions a manual and a searched verbalizer label by label. Duplicates keep
/// their first (manual-side) provenance. A token that lands under two
/// different labels is dropped from both with a warning; a label left empty
/// afterwards is a spec error.
pub fn adaptive_union(manual: &Verbalizer, searched: &Verbalizer) -> Result<Verbalizer> {
    if manual.labels() != searched.labels() {
        return Err(Error::spec(format!(
            "label count mismatch: {} vs {}",
            manual.labels(),
            searched.labels()
        )));
    }
    let labels = manual.labels();
    let mut union: Vec<Vec<Anchor>> = Vec::with_capacity(labels);
    for label in 0..labels {
        let mut set: Vec<Anchor> = manual.anchors(label).to_vec();
        for anchor in searched.anchors(label) {
            if !set.iter().any(|a| a.token == anchor.token) {
                set.push(*anchor);
            }
        }
        set.sort_by_key(|a| a.token);
        union.push(set);
    }
    let mut drop: Vec<TokenId> = Vec::new();
    for a in 0..labels {
        for b in a + 1..labels {
            for anchor in &union[a] {
                if union[b].iter().any(|o| o.token == anchor.token) {
                    drop.push(anchor.token);
                }
            }
        }
    }
    if !drop.is_empty() {
        log::warn!("{} anchors conflict across labels; dropped from all labels", drop.len());
        for set in union.iter_mut() {
            set.retain(|a| !drop.contains(&a.token));
        }
    }
    for (label, set) in union.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::spec(format!(
                "label {label} has no anchors left after conflict dropping"
            )));
        }
    }
    Verbalizer::new(union)
}
