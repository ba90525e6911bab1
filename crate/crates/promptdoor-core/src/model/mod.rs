//! The micro masked language model: token+position embeddings, post-LN
//! transformer encoder blocks, and an output head tied to the token
//! embedding table.

mod masking;
mod pretrain;

pub use masking::{mask_corpus, MaskedBatch};
pub use pretrain::{mlm_loss, pretrain, EpochHook, PretrainReport, TrainHyper};

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::rng::{Stream, StreamRng};
use crate::tensor::{Graph, Tensor, Var};

/// Architecture and training-protocol constants of the micro model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f32,
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Input budget: 32 text tokens plus up to 8 prompt tokens.
        ModelConfig {
            vocab_size: 512,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            max_len: 40,
            dropout: 0.0,
            mask_fraction: 0.15,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::spec(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) || self.mask_fraction == 0.0 {
            // mask fraction must lie in (0,1); callers that want no masking
            // simply do not call mask_corpus.
            if self.mask_fraction != 0.0 {
                return Err(Error::spec(format!(
                    "mask fraction {} outside (0,1)",
                    self.mask_fraction
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Parameter partition used by the freezing ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Embedding,
    Encoder,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Embedding, ParamGroup::Encoder, ParamGroup::Head];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(ParamGroup::Embedding),
            "encoder" => Ok(ParamGroup::Encoder),
            "head" => Ok(ParamGroup::Head),
            other => Err(Error::spec(format!("unknown parameter group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// All learnable tensors, partitioned into embedding / encoder / head groups.
/// The output projection is the token embedding table itself (tied weights):
/// `tok_emb` lives in the embedding group and is used by both the input
/// lookup and the output logits, so any update to it is visible in both.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    params: IndexMap<String, Param>,
    trainable: Vec<ParamGroup>,
}

const LN_EPS: f32 = 1e-5;
const ATTN_NEG: f32 = -1e9;

impl ModelParams {
    /// Fresh parameters. Token embeddings (and therefore the tied output
    /// head) start at zero, so an untrained model emits an exactly uniform
    /// mask distribution; everything else gets N(0, 0.02) or LN identity.
    pub fn init(config: &ModelConfig, seeds: &StreamRng) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds.derive(&format!("model-init/{}", config.seed)).stream(Stream::Init);
        let d = config.hidden;
        let mut params = IndexMap::new();
        let mut add = |name: String, tensor: Tensor, group: ParamGroup| {
            params.insert(name, Param { tensor, group });
        };

        add(
            "tok_emb".into(),
            Tensor::zeros(vec![config.vocab_size, d]),
            ParamGroup::Embedding,
        );
        add(
            "pos_emb".into(),
            Tensor::randn(vec![config.max_len, d], 0.02, &mut rng),
            ParamGroup::Embedding,
        );
        add(
            "emb_ln_gamma".into(),
            Tensor::from_vec(vec![d], vec![1.0; d])?,
            ParamGroup::Embedding,
        );
        add("emb_ln_beta".into(), Tensor::zeros(vec![d]), ParamGroup::Embedding);

        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                add(
                    format!("layer{l}_{w}"),
                    Tensor::randn(vec![d, d], 0.02, &mut rng),
                    ParamGroup::Encoder,
                );
                add(format!("layer{l}_b{}", &w[1..]), Tensor::zeros(vec![d]), ParamGroup::Encoder);
            }
            add(
                format!("layer{l}_ffn_w1"),
                Tensor::randn(vec![d, config.ffn], 0.02, &mut rng),
                ParamGroup::Encoder,
            );
            add(format!("layer{l}_ffn_b1"), Tensor::zeros(vec![config.ffn]), ParamGroup::Encoder);
            add(
                format!("layer{l}_ffn_w2"),
                Tensor::randn(vec![config.ffn, d], 0.02, &mut rng),
                ParamGroup::Encoder,
            );
            add(format!("layer{l}_ffn_b2"), Tensor::zeros(vec![d]), ParamGroup::Encoder);
            for ln in ["ln1", "ln2"] {
                add(
                    format!("layer{l}_{ln}_gamma"),
                    Tensor::from_vec(vec![d], vec![1.0; d])?,
                    ParamGroup::Encoder,
                );
                add(format!("layer{l}_{ln}_beta"), Tensor::zeros(vec![d]), ParamGroup::Encoder);
            }
        }
        add("out_bias".into(), Tensor::zeros(vec![config.vocab_size]), ParamGroup::Head);

        Ok(ModelParams {
            config: config.clone(),
            params,
            trainable: ParamGroup::ALL.to_vec(),
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        parts: impl IntoIterator<Item = (String, Param)>,
    ) -> Result<Self> {
        let params: IndexMap<String, Param> = parts.into_iter().collect();
        let reference = ModelParams::init(&config, &StreamRng::new(0))?;
        for (name, p) in &reference.params {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))?;
            if got.tensor.shape() != p.tensor.shape() || got.group != p.group {
                return Err(Error::Corrupt(format!("tensor `{name}` has wrong shape or group")));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Corrupt("unexpected extra tensors".into()));
        }
        Ok(ModelParams { config, params, trainable: ParamGroup::ALL.to_vec() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.params[name].tensor
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.params[name].tensor
    }

    /// Marks exactly `groups` as trainable; everything else is frozen
    /// (bit-identical after any number of optimizer steps).
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) -> Result<()> {
        for g in groups {
            if !ParamGroup::ALL.contains(g) {
                return Err(Error::spec(format!("unknown group {g:?}")));
            }
        }
        self.trainable = groups.to_vec();
        Ok(())
    }

    pub fn trainable_groups(&self) -> &[ParamGroup] {
        &self.trainable
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.contains(&group)
    }

    /// Iterator over the trainable (name, tensor) pairs for the optimizer.
    pub fn trainable_params(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        let trainable = self.trainable.clone();
        self.params
            .iter_mut()
            .filter(move |(_, p)| trainable.contains(&p.group))
            .map(|(k, p)| (k.as_str(), &mut p.tensor))
    }

    /// Forward pass from token ids. `dropout_rng` enables train-mode dropout
    /// when the config rate is nonzero; pass `None` for deterministic eval.
    pub fn forward(
        &self,
        batch: &MaskedBatch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        batch.validate(&self.config)?;
        let mut fp = ForwardPassBuilder::new(self, dropout_rng);
        let (b, len) = (batch.input_ids.len(), batch.seq_len());
        let flat_ids: Vec<usize> =
            batch.input_ids.iter().flatten().map(|t| t.idx()).collect();
        let tok_table = fp.bind("tok_emb");
        let tok = fp.graph.pick_rows(tok_table, &flat_ids)?;
        let tok = fp.graph.reshape(tok, vec![b, len, self.config.hidden])?;
        let embs = fp.add_position_and_norm(tok, len)?;
        let hidden = fp.encode(embs, &batch.attention_mask)?;
        let mask_logits = if batch.total_masks() > 0 {
            Some(fp.mask_logits(hidden, batch)?)
        } else {
            None
        };
        Ok(fp.finish(hidden, mask_logits))
    }

    /// Forward pass from an explicit embedding tensor (used by soft prompts
    /// and gradient-guided template search). `embs` must be a graph node of
    /// shape [b, len, hidden]; position embeddings and the embedding LN are
    /// applied inside.
    pub fn forward_from_embeddings(
        &self,
        fp: &mut ForwardPassBuilder,
        embs: Var,
        attention_mask: &[Vec<bool>],
        mask_positions: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        let len = attention_mask.first().map(|r| r.len()).unwrap_or(0);
        let embs = fp.add_position_and_norm(embs, len)?;
        let hidden = fp.encode(embs, attention_mask)?;
        let logits = fp.logits_at(hidden, mask_positions)?;
        Ok((hidden, logits))
    }

    pub fn builder<'a>(
        &'a self,
        dropout_rng: Option<&'a mut ChaCha8Rng>,
    ) -> ForwardPassBuilder<'a> {
        ForwardPassBuilder::new(self, dropout_rng)
    }

    /// Copies gradients recorded in a finished pass into the trainable
    /// parameters' grad buffers (accumulating across passes is not needed at
    /// this scale; each step overwrites).
    pub fn absorb_grads(&mut self, fp: &ForwardPass) -> Result<()> {
        for (name, var) in &fp.bound {
            let p = &self.params[name];
            if !self.trainable.contains(&p.group) {
                continue;
            }
            let grad = fp
                .graph
                .grad(*var)
                .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?
                .to_vec();
            self.params[name].tensor.set_grad(grad)?;
        }
        Ok(())
    }
}

/// In-flight forward pass: the graph plus bound parameter leaves.
pub struct ForwardPass {
    pub graph: Graph,
    pub hidden: Var,
    pub mask_logits: Option<Var>,
    bound: Vec<(String, Var)>,
}

pub struct ForwardPassBuilder<'a> {
    pub graph: Graph,
    model: &'a ModelParams,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
    bound: IndexMap<String, Var>,
}

impl<'a> ForwardPassBuilder<'a> {
    fn new(model: &'a ModelParams, dropout_rng: Option<&'a mut ChaCha8Rng>) -> Self {
        ForwardPassBuilder {
            graph: Graph::new(),
            model,
            dropout_rng,
            bound: IndexMap::new(),
        }
    }

    /// Binds a parameter as a graph leaf exactly once; repeated use of the
    /// same name (the tied embedding table) shares the node, so gradients
    /// from all uses accumulate.
    pub fn bind(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let p = &self.model.params[name];
        let mut t = p.tensor.clone();
        t.requires_grad = self.model.trainable.contains(&p.group);
        let v = self.graph.leaf(&t);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Binds an external trainable tensor (soft prompts, classifier heads).
    pub fn bind_external(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.graph.leaf(t);
        self.bound.insert(name.to_string(), v);
        v
    }

    fn maybe_dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.dropout;
        if p > 0.0 {
            if let Some(rng) = self.dropout_rng.as_deref_mut() {
                return self.graph.dropout(x, p, rng);
            }
        }
        Ok(x)
    }

    pub fn add_position_and_norm(&mut self, tok: Var, len: usize) -> Result<Var> {
        let pos_table = self.bind("pos_emb");
        let pos = self.graph.slice(pos_table, 0, 0, len)?;
        let x = self.graph.add(tok, pos)?;
        let gamma = self.bind("emb_ln_gamma");
        let beta = self.bind("emb_ln_beta");
        let x = self.graph.layer_norm(x, gamma, beta, LN_EPS)?;
        self.maybe_dropout(x)
    }

    /// Post-LN transformer encoder over [b, len, d].
    pub fn encode(&mut self, embs: Var, attention_mask: &[Vec<bool>]) -> Result<Var> {
        let cfg = &self.model.config;
        let (d, heads, hd) = (cfg.hidden, cfg.heads, cfg.head_dim());
        let b = attention_mask.len();
        let len = attention_mask.first().map(|r| r.len()).unwrap_or(0);
        if self.graph.shape(embs) != [b, len, d] {
            return Err(Error::contract(format!(
                "encode expects [b, len, d] = [{b}, {len}, {d}], got {:?}",
                self.graph.shape(embs)
            )));
        }

        // Additive attention bias: 0 on real keys, -1e9 on padding keys,
        // shared across heads and query positions.
        let mut bias = vec![0.0f32; b * heads * len * len];
        for (bi, row) in attention_mask.iter().enumerate() {
            for (kj, &keep) in row.iter().enumerate() {
                if !keep {
                    for h in 0..heads {
                        for qi in 0..len {
                            bias[((bi * heads + h) * len + qi) * len + kj] = ATTN_NEG;
                        }
                    }
                }
            }
        }
        let bias = self.graph.constant(vec![b, heads, len, len], bias)?;

        let mut x = embs;
        for l in 0..cfg.layers {
            let flat = self.graph.reshape(x, vec![b * len, d])?;
            let proj = |fp: &mut Self, w: &str, bname: &str| -> Result<Var> {
                let wv = fp.bind(w);
                let bv = fp.bind(bname);
                let y = fp.graph.matmul(flat, wv)?;
                let y = fp.graph.add(y, bv)?;
                let y = fp.graph.reshape(y, vec![b, len, heads, hd])?;
                fp.graph.transpose(y, 1, 2) // [b, heads, len, hd]
            };
            let q = proj(self, &format!("layer{l}_wq"), &format!("layer{l}_bq"))?;
            let k = proj(self, &format!("layer{l}_wk"), &format!("layer{l}_bk"))?;
            let v = proj(self, &format!("layer{l}_wv"), &format!("layer{l}_bv"))?;

            let kt = self.graph.transpose(k, 2, 3)?;
            let scores = self.graph.matmul(q, kt)?;
            let scores = self.graph.scale(scores, 1.0 / (hd as f32).sqrt());
            let scores = self.graph.add(scores, bias)?;
            let probs = self.graph.softmax(scores, 3)?;
            let ctx = self.graph.matmul(probs, v)?;
            let ctx = self.graph.transpose(ctx, 1, 2)?;
            let ctx = self.graph.reshape(ctx, vec![b * len, d])?;

            let wo = self.bind(&format!("layer{l}_wo"));
            let bo = self.bind(&format!("layer{l}_bo"));
            let attn_out = self.graph.matmul(ctx, wo)?;
            let attn_out = self.graph.add(attn_out, bo)?;
            let attn_out = self.maybe_dropout(attn_out)?;
            let res = self.graph.add(attn_out, flat)?;
            let g1 = self.bind(&format!("layer{l}_ln1_gamma"));
            let b1 = self.bind(&format!("layer{l}_ln1_beta"));
            let h1 = self.graph.layer_norm(res, g1, b1, LN_EPS)?;

            let w1 = self.bind(&format!("layer{l}_ffn_w1"));
            let bf1 = self.bind(&format!("layer{l}_ffn_b1"));
            let w2 = self.bind(&format!("layer{l}_ffn_w2"));
            let bf2 = self.bind(&format!("layer{l}_ffn_b2"));
            let f = self.graph.matmul(h1, w1)?;
            let f = self.graph.add(f, bf1)?;
            let f = self.graph.gelu(f);
            let f = self.graph.matmul(f, w2)?;
            let f = self.graph.add(f, bf2)?;
            let f = self.maybe_dropout(f)?;
            let res2 = self.graph.add(f, h1)?;
            let g2 = self.bind(&format!("layer{l}_ln2_gamma"));
            let b2 = self.bind(&format!("layer{l}_ln2_beta"));
            let h2 = self.graph.layer_norm(res2, g2, b2, LN_EPS)?;
            x = self.graph.reshape(h2, vec![b, len, d])?;
        }
        Ok(x)
    }

    /// Tied-head logits at explicit (sample, position) pairs.
    pub fn logits_at(&mut self, hidden: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let shape = self.graph.shape(hidden).to_vec();
        let (b, len, d) = (shape[0], shape[1], shape[2]);
        let flat = self.graph.reshape(hidden, vec![b * len, d])?;
        let rows: Vec<usize> = positions
            .iter()
            .map(|&(s, p)| {
                debug_assert!(s < b && p < len);
                s * len + p
            })
            .collect();
        let picked = self.graph.pick_rows(flat, &rows)?;
        let table = self.bind("tok_emb");
        let et = self.graph.transpose(table, 0, 1)?;
        let logits = self.graph.matmul(picked, et)?;
        let bias = self.bind("out_bias");
        self.graph.add(logits, bias)
    }

    fn mask_logits(&mut self, hidden: Var, batch: &MaskedBatch) -> Result<Var> {
        let positions: Vec<(usize, usize)> = batch
            .mask_positions
            .iter()
            .enumerate()
            .flat_map(|(s, ps)| ps.iter().map(move |&p| (s, p)))
            .collect();
        self.logits_at(hidden, &positions)
    }

    pub fn finish(self, hidden: Var, mask_logits: Option<Var>) -> ForwardPass {
        ForwardPass {
            graph: self.graph,
            hidden,
            mask_logits,
            bound: self.bound.into_iter().collect(),
        }
    }
}

/// Flattened gold ids of a batch, aligned with the mask-logit rows.
pub fn gold_targets(batch: &MaskedBatch) -> Vec<usize> {
    batch.gold_ids.iter().flatten().map(|t| t.idx()).collect()
}

/// Softmax distributions over the vocabulary at one mask position per
/// sequence. Rows align with the input order; evaluation mode (no dropout).
pub fn cloze_probs(
    model: &ModelParams,
    rows: &[(Vec<TokenId>, usize)],
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(32) {
        let batch = build_batch(
            chunk.iter().map(|(ids, i)| (ids.clone(), vec![*i], vec![ids[*i]])).collect(),
        );
        let mut fp = model.forward(&batch, None)?;
        let logits = fp.mask_logits.expect("one mask per row");
        let probs = fp.graph.softmax(logits, 1)?;
        let data = fp.graph.data(probs);
        let v = model.config.vocab_size;
        for r in 0..chunk.len() {
            out.push(data[r * v..(r + 1) * v].to_vec());
        }
    }
    Ok(out)
}

/// Builds a padded single-sequence batch with the given mask positions.
pub fn single_batch(ids: &[TokenId], mask_positions: &[usize], gold: &[TokenId]) -> MaskedBatch {
    MaskedBatch {
        input_ids: vec![ids.to_vec()],
        attention_mask: vec![vec![true; ids.len()]],
        mask_positions: vec![mask_positions.to_vec()],
        gold_ids: vec![gold.to_vec()],
    }
}

/// Pads sequences to a common length with PAD and records the padding in the
/// attention mask. Mask positions/golds are per-sample aligned.
pub fn build_batch(
    rows: Vec<(Vec<TokenId>, Vec<usize>, Vec<TokenId>)>,
) -> MaskedBatch {
    let len = rows.iter().map(|(ids, _, _)| ids.len()).max().unwrap_or(0);
    let mut input_ids = Vec::with_capacity(rows.len());
    let mut attention_mask = Vec::with_capacity(rows.len());
    let mut mask_positions = Vec::with_capacity(rows.len());
    let mut gold_ids = Vec::with_capacity(rows.len());
    for (mut ids, positions, gold) in rows {
        let real = ids.len();
        ids.resize(len, PAD);
        let mut attn = vec![true; real];
        attn.resize(len, false);
        input_ids.push(ids);
        attention_mask.push(attn);
        mask_positions.push(positions);
        gold_ids.push(gold);
    }
    MaskedBatch { input_ids, attention_mask, mask_positions, gold_ids }
}
