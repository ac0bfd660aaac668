//! Tree-structured encoder/decoder stacks, the full-sharing baseline, and
//! greedy decoding over either.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::{BpeVocab, Example, TokenId, BOS, EOS, PAD};
use crate::lang_tree::{allocate_layers, parse_tree, LanguageTree, LayerAllocation, NodeId, TreeNode};
use crate::numerics::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::{
    decoder_layer_forward, embed_and_position, encoder_layer_forward, output_projection, zeros_param, Ctx,
    DecoderLayerParams, EncoderLayerParams, MaskSpec, ModelConfig, ModelError, PlainTransformer,
};

const PAD_ID: usize = PAD as usize;

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Hier {
        enc_tree: String,
        dec_tree: String,
        d_enc: usize,
        d_dec: usize,
    },
    Full {
        enc_layers: usize,
        dec_layers: usize,
        /// Target language → tag token id.
        tags: BTreeMap<String, TokenId>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub spec: ModelSpec,
    pub config: ModelConfig,
    pub vocab_size: usize,
}

impl ModelMeta {
    pub const KEY: &'static str = "model";

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model metadata serializes")
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        toml::from_str(s).map_err(|e| ModelError::Config(format!("model metadata: {e}")))
    }

    /// Whether the model can translate `src` into `tgt`. The full-sharing
    /// model accepts any source.
    pub fn supports(&self, src: &str, tgt: &str) -> bool {
        match &self.spec {
            ModelSpec::Hier { enc_tree, dec_tree, .. } => {
                let has = |t: &str, l: &str| crate::lang_tree::parse_tree(t).is_ok_and(|t| t.has_leaf(l));
                has(enc_tree, src) && has(dec_tree, tgt)
            }
            ModelSpec::Full { tags, .. } => tags.contains_key(tgt),
        }
    }
}

/// Scalar training loss plus the unweighted token-mean loss of every stream.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: Var,
    pub stream_losses: Vec<f64>,
    pub stream_tokens: Vec<usize>,
}

/// Common interface of the hierarchical model and the full-sharing baseline.
pub trait NmtModel: Send + Sync {
    fn config(&self) -> &ModelConfig;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn meta(&self) -> ModelMeta;

    /// `Σ_s Σ_{r∈s} w_r · (token loss sum of r) / (tokens of s)` over the
    /// streams of one step. With a uniform weight `w_s` inside stream `s`
    /// this is `Σ_s w_s · L̄_s`. Dropout is active iff `rng` is given.
    fn forward_loss(
        &self,
        tape: &mut Tape,
        streams: &[Vec<Example>],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LossOutput, ModelError>;

    /// Greedy decoding of `srcs` (each `[BOS, ..., EOS]`); outputs exclude
    /// BOS and EOS and never contain PAD.
    fn translate(
        &self,
        src_lang: &str,
        tgt_lang: &str,
        srcs: &[Vec<TokenId>],
        max_len: usize,
    ) -> Result<Vec<Vec<TokenId>>, ModelError>;

    fn num_params(&self) -> usize {
        self.store().num_values()
    }

    fn to_checkpoint(&self, mut metadata: BTreeMap<String, String>) -> Checkpoint {
        metadata.insert(ModelMeta::KEY.into(), self.meta().to_toml());
        Checkpoint {
            metadata,
            params: self.store().clone(),
        }
    }
}

/// Rebuilds a model from checkpoint metadata and loads its parameters.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Box<dyn NmtModel>, ModelError> {
    let meta = ckpt
        .metadata
        .get(ModelMeta::KEY)
        .ok_or_else(|| ModelError::Config("checkpoint has no model metadata".into()))
        .and_then(|s| ModelMeta::parse(s))?;
    let mut model = build_from_meta(&meta, &mut rand::rngs::mock::StepRng::new(0, 0))?;
    model.store_mut().load_from(&ckpt.params)?;
    Ok(model)
}

/// Builds a freshly initialised model of the described layout.
pub fn build_from_meta<R: Rng + ?Sized>(meta: &ModelMeta, rng: &mut R) -> Result<Box<dyn NmtModel>, ModelError> {
    match &meta.spec {
        ModelSpec::Hier {
            enc_tree,
            dec_tree,
            d_enc,
            d_dec,
        } => {
            let et = parse_tree(enc_tree)?;
            let dt = parse_tree(dec_tree)?;
            let ea = allocate_layers(&et, *d_enc)?;
            let da = allocate_layers(&dt, *d_dec)?;
            Ok(Box::new(HierModel::build(
                et,
                dt,
                ea,
                da,
                meta.config,
                meta.vocab_size,
                rng,
            )?))
        }
        ModelSpec::Full {
            enc_layers,
            dec_layers,
            tags,
        } => Ok(Box::new(FullSharingModel::new(
            meta.config,
            *enc_layers,
            *dec_layers,
            meta.vocab_size,
            tags.clone(),
            rng,
        )?)),
    }
}

fn to_usize(ids: &[TokenId]) -> Vec<usize> {
    ids.iter().map(|&t| t as usize).collect()
}

/// Right-pads every sequence with PAD to `len` and flattens to `rows × len`.
fn pad_flat(seqs: &[&[usize]], len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        out.extend_from_slice(s);
        out.extend(std::iter::repeat_n(PAD_ID, len - s.len()));
    }
    out
}

fn valid_mask(lens: impl Iterator<Item = usize>, len: usize) -> Vec<bool> {
    lens.flat_map(|n| (0..len).map(move |t| t < n)).collect()
}

/// Loss coefficients per flattened row and the per-stream token totals.
fn row_coefficients(rows: &[FlatRow<'_>], n_streams: usize) -> (Vec<f64>, Vec<usize>) {
    let mut tokens = vec![0usize; n_streams];
    for r in rows {
        tokens[r.stream] += r.tgt_out.len();
    }
    let coeffs = rows
        .iter()
        .map(|r| {
            let n = tokens[r.stream];
            if n == 0 {
                0.0
            } else {
                r.ex.weight * r.tgt_out.len() as f64 / n as f64
            }
        })
        .collect();
    (coeffs, tokens)
}

struct FlatRow<'a> {
    ex: &'a Example,
    stream: usize,
    src: Vec<usize>,
    tgt_in: Vec<usize>,
    tgt_out: Vec<usize>,
}

fn flatten(streams: &[Vec<Example>]) -> Result<Vec<FlatRow<'_>>, ModelError> {
    let mut rows = Vec::new();
    for (s, batch) in streams.iter().enumerate() {
        for ex in batch {
            if ex.tgt.len() < 2 || ex.src.is_empty() {
                return Err(ModelError::TagMismatch(format!(
                    "example for {} lacks BOS/EOS framing",
                    ex.route
                )));
            }
            let tgt = to_usize(&ex.tgt);
            rows.push(FlatRow {
                ex,
                stream: s,
                src: to_usize(&ex.src),
                tgt_in: tgt[..tgt.len() - 1].to_vec(),
                tgt_out: tgt[1..].iter().copied().filter(|&t| t != PAD_ID).collect(),
            });
        }
    }
    if rows.is_empty() {
        return Err(ModelError::TagMismatch("empty step".into()));
    }
    Ok(rows)
}

/// Per-stream token-mean losses from per-row mean losses.
fn stream_means(rows: &[FlatRow<'_>], row_ce: &[f64], tokens: &[usize]) -> Vec<f64> {
    let mut sums = vec![0.0; tokens.len()];
    for (r, &ce) in rows.iter().zip(row_ce) {
        sums[r.stream] += ce * r.tgt_out.len() as f64;
    }
    sums.iter()
        .zip(tokens)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect()
}

/// Runs greedy decoding given a callback that maps the current prefixes
/// (`rows × t`, flattened) to last-position logits (`rows × vocab`).
pub fn greedy_decode<F>(
    rows: usize,
    max_len: usize,
    vocab: usize,
    mut last_logits: F,
) -> Result<Vec<Vec<TokenId>>, ModelError>
where
    F: FnMut(&[usize], usize) -> Result<Vec<f64>, ModelError>,
{
    let mut prefix: Vec<Vec<usize>> = vec![vec![BOS as usize]; rows];
    let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); rows];
    let mut done = vec![false; rows];
    for t in 1..=max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let flat: Vec<usize> = prefix.iter().flatten().copied().collect();
        let logits = last_logits(&flat, t)?;
        for r in 0..rows {
            let next = if done[r] {
                PAD_ID
            } else {
                let row = &logits[r * vocab..(r + 1) * vocab];
                let mut best = EOS as usize;
                for (i, &v) in row.iter().enumerate() {
                    if i == PAD_ID || i == BOS as usize {
                        continue;
                    }
                    if v > row[best] {
                        best = i;
                    }
                }
                if best == EOS as usize {
                    done[r] = true;
                } else {
                    out[r].push(best as TokenId);
                }
                if done[r] {
                    EOS as usize
                } else {
                    best
                }
            };
            prefix[r].push(next);
        }
    }
    Ok(out)
}

fn last_position(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (rows, len, d) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(rows * d);
    for r in 0..rows {
        data.extend_from_slice(&t.data()[(r * len + len - 1) * d..][..d]);
    }
    Tensor::new(&[rows, 1, d], data).expect("non-empty")
}

/// Root encoder output with the flattened row index of each stacked row.
#[derive(Debug, Clone)]
pub struct EncoderOutputs {
    pub x: Var,
    pub order: Vec<usize>,
    /// Source key validity, `order.len() × len`.
    pub valid: Vec<bool>,
    pub len: usize,
}

/// Per-leaf logits: the leaf, its logits `[rows, len, vocab]` and the
/// flattened row indices they belong to.
#[derive(Debug, Clone)]
pub struct LeafLogits {
    pub leaf: String,
    pub logits: Var,
    pub order: Vec<usize>,
}

/// Encoder and decoder hierarchies over a shared embedding and output
/// projection.
#[derive(Debug, Clone)]
pub struct HierModel {
    pub cfg: ModelConfig,
    pub enc_tree: LanguageTree,
    pub dec_tree: LanguageTree,
    pub enc_alloc: LayerAllocation,
    pub dec_alloc: LayerAllocation,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub enc_stacks: BTreeMap<NodeId, Vec<EncoderLayerParams>>,
    pub dec_stacks: BTreeMap<NodeId, Vec<DecoderLayerParams>>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub vocab_size: usize,
}

impl HierModel {
    /// Parameters are created in the order embedding, encoder stacks in
    /// traversal order, decoder stacks in split order, output projection.
    pub fn build<R: Rng + ?Sized>(
        enc_tree: LanguageTree,
        dec_tree: LanguageTree,
        enc_alloc: LayerAllocation,
        dec_alloc: LayerAllocation,
        cfg: ModelConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        if !enc_alloc.matches(&enc_tree) || !dec_alloc.matches(&dec_tree) {
            return Err(ModelError::Config("layer allocation does not match its tree".into()));
        }
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embedding = store.glorot("embedding", vocab_size, d, rng)?;
        let mut enc_stacks = BTreeMap::new();
        for node in enc_tree.traversal_schedule().order {
            let n = enc_alloc.get(&node).unwrap_or(0);
            let stack = (0..n)
                .map(|i| EncoderLayerParams::init(&mut store, &format!("enc/{node}/layer{i}"), &cfg, rng))
                .collect::<Result<Vec<_>, _>>()?;
            enc_stacks.insert(node, stack);
        }
        let mut dec_stacks = BTreeMap::new();
        for node in dec_tree.traversal_schedule().split_order() {
            let n = dec_alloc.get(node).unwrap_or(0);
            let stack = (0..n)
                .map(|i| DecoderLayerParams::init(&mut store, &format!("dec/{node}/layer{i}"), &cfg, rng))
                .collect::<Result<Vec<_>, _>>()?;
            dec_stacks.insert(node.clone(), stack);
        }
        let out_w = store.glorot("out/w", d, vocab_size, rng)?;
        let out_b = zeros_param(&mut store, "out/b", vocab_size)?;
        Ok(HierModel {
            cfg,
            enc_tree,
            dec_tree,
            enc_alloc,
            dec_alloc,
            store,
            embedding,
            enc_stacks,
            dec_stacks,
            out_w,
            out_b,
            vocab_size,
        })
    }

    /// Allocates `d_enc`/`d_dec` over the trees and builds the model.
    pub fn from_trees<R: Rng + ?Sized>(
        enc_tree: LanguageTree,
        dec_tree: LanguageTree,
        d_enc: usize,
        d_dec: usize,
        cfg: ModelConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let ea = allocate_layers(&enc_tree, d_enc)?;
        let da = allocate_layers(&dec_tree, d_dec)?;
        Self::build(enc_tree, dec_tree, ea, da, cfg, vocab_size, rng)
    }

    pub fn num_stacks(&self) -> usize {
        self.enc_stacks.len() + self.dec_stacks.len()
    }

    /// Encoder plus decoder layers met on the path from `src` to `tgt`.
    pub fn path_layers(&self, src: &str, tgt: &str) -> Result<usize, ModelError> {
        Ok(self.enc_alloc.path_sum(&self.enc_tree, src)? + self.dec_alloc.path_sum(&self.dec_tree, tgt)?)
    }

    fn check_langs<'a>(&self, langs: impl Iterator<Item = (&'a str, &'a str)>) -> Result<(), ModelError> {
        for (s, t) in langs {
            if !self.enc_tree.has_leaf(s) {
                return Err(ModelError::UnknownLanguage(s.to_string()));
            }
            if !self.dec_tree.has_leaf(t) {
                return Err(ModelError::UnknownLanguage(t.to_string()));
            }
        }
        Ok(())
    }

    /// Each leaf stack encodes its own rows; at every internal node the
    /// children's outputs are stacked along the row axis in tree order.
    /// `srcs[i]` is row `i` with its source language.
    pub fn encode(&self, ctx: &mut Ctx<'_>, srcs: &[(&str, &[usize])]) -> Result<EncoderOutputs, ModelError> {
        let len = srcs.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(ModelError::TagMismatch("no source rows".into()));
        }
        for (lang, _) in srcs {
            if !self.enc_tree.has_leaf(lang) {
                return Err(ModelError::UnknownLanguage(lang.to_string()));
            }
        }
        let (x, order) = self
            .encode_node(ctx, self.enc_tree.root(), srcs, len)?
            .ok_or_else(|| ModelError::TagMismatch("no source rows".into()))?;
        let valid = valid_mask(order.iter().map(|&r| srcs[r].1.len()), len);
        Ok(EncoderOutputs { x, order, valid, len })
    }

    fn encode_node(
        &self,
        ctx: &mut Ctx<'_>,
        node: &TreeNode,
        srcs: &[(&str, &[usize])],
        len: usize,
    ) -> Result<Option<(Var, Vec<usize>)>, ModelError> {
        let (x, order) = match node {
            TreeNode::Leaf(code) => {
                let order: Vec<usize> = (0..srcs.len()).filter(|&i| srcs[i].0 == code).collect();
                if order.is_empty() {
                    return Ok(None);
                }
                let seqs: Vec<&[usize]> = order.iter().map(|&i| srcs[i].1).collect();
                let ids = pad_flat(&seqs, len);
                let x = embed_and_position(ctx, self.embedding, &ids, order.len())?;
                (x, order)
            }
            TreeNode::Internal(children) => {
                let mut parts = Vec::new();
                let mut order = Vec::new();
                for c in children {
                    if let Some((x, o)) = self.encode_node(ctx, c, srcs, len)? {
                        parts.push(x);
                        order.extend(o);
                    }
                }
                if parts.is_empty() {
                    return Ok(None);
                }
                (ctx.tape.concat_rows(&parts)?, order)
            }
        };
        let mask = MaskSpec::from_valid(valid_mask(order.iter().map(|&r| srcs[r].1.len()), len), false);
        let mut x = x;
        for layer in &self.enc_stacks[&node.node_id()] {
            x = encoder_layer_forward(ctx, x, &mask, layer)?;
        }
        Ok(Some((x, order)))
    }

    /// Shared decoder stacks see every row; at each split the rows are
    /// partitioned by target-subtree membership. `tgts[i]` is the target
    /// language and teacher-forced input of flattened row `i`.
    pub fn decode_train(
        &self,
        ctx: &mut Ctx<'_>,
        enc: &EncoderOutputs,
        tgts: &[(&str, &[usize])],
    ) -> Result<Vec<LeafLogits>, ModelError> {
        let hidden = self.decode_hidden(ctx, enc, tgts)?;
        hidden
            .into_iter()
            .map(|l| {
                let logits = output_projection(ctx, l.logits, self.out_w, self.out_b)?;
                Ok(LeafLogits { logits, ..l })
            })
            .collect()
    }

    /// Like [`decode_train`](Self::decode_train) but stops before the output
    /// projection; the `logits` field holds final decoder states.
    pub fn decode_hidden(
        &self,
        ctx: &mut Ctx<'_>,
        enc: &EncoderOutputs,
        tgts: &[(&str, &[usize])],
    ) -> Result<Vec<LeafLogits>, ModelError> {
        if enc.order.len() != tgts.len() {
            return Err(ModelError::TagMismatch(format!(
                "{} encoder rows but {} targets",
                enc.order.len(),
                tgts.len()
            )));
        }
        for (lang, _) in tgts {
            if !self.dec_tree.has_leaf(lang) {
                return Err(ModelError::UnknownLanguage(lang.to_string()));
            }
        }
        let len = tgts.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(ModelError::TagMismatch("empty decoder inputs".into()));
        }
        let seqs: Vec<&[usize]> = enc.order.iter().map(|&r| tgts[r].1).collect();
        let ids = pad_flat(&seqs, len);
        let y = embed_and_position(ctx, self.embedding, &ids, enc.order.len())?;
        let positions: Vec<usize> = (0..enc.order.len()).collect();
        let mut out = Vec::new();
        self.decode_node(
            ctx,
            self.dec_tree.root(),
            y,
            enc.x,
            &positions,
            enc,
            tgts,
            len,
            &mut out,
        )?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_node(
        &self,
        ctx: &mut Ctx<'_>,
        node: &TreeNode,
        mut y: Var,
        memory: Var,
        positions: &[usize],
        enc: &EncoderOutputs,
        tgts: &[(&str, &[usize])],
        len: usize,
        out: &mut Vec<LeafLogits>,
    ) -> Result<(), ModelError> {
        let order: Vec<usize> = positions.iter().map(|&p| enc.order[p]).collect();
        let self_mask = MaskSpec::from_valid(valid_mask(order.iter().map(|&r| tgts[r].1.len()), len), true);
        let cross_valid = positions
            .iter()
            .flat_map(|&p| enc.valid[p * enc.len..(p + 1) * enc.len].iter().copied())
            .collect();
        let cross_mask = MaskSpec::from_valid(cross_valid, false);
        for layer in &self.dec_stacks[&node.node_id()] {
            y = decoder_layer_forward(ctx, y, memory, &self_mask, &cross_mask, layer)?;
        }
        match node {
            TreeNode::Leaf(code) => out.push(LeafLogits {
                leaf: code.clone(),
                logits: y,
                order,
            }),
            TreeNode::Internal(children) => {
                for c in children {
                    let cid = c.node_id();
                    let local: Vec<usize> = (0..positions.len())
                        .filter(|&i| cid.contains(tgts[order[i]].0))
                        .collect();
                    if local.is_empty() {
                        continue;
                    }
                    let (yc, mc) = if local.len() == positions.len() {
                        (y, memory)
                    } else {
                        (ctx.tape.select_rows(y, &local)?, ctx.tape.select_rows(memory, &local)?)
                    };
                    let pc: Vec<usize> = local.iter().map(|&i| positions[i]).collect();
                    self.decode_node(ctx, c, yc, mc, &pc, enc, tgts, len, out)?;
                }
            }
        }
        Ok(())
    }
}

impl NmtModel for HierModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            spec: ModelSpec::Hier {
                enc_tree: self.enc_tree.render(),
                dec_tree: self.dec_tree.render(),
                d_enc: self.enc_alloc.depth_budget,
                d_dec: self.dec_alloc.depth_budget,
            },
            config: self.cfg,
            vocab_size: self.vocab_size,
        }
    }

    fn forward_loss(
        &self,
        tape: &mut Tape,
        streams: &[Vec<Example>],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LossOutput, ModelError> {
        let rows = flatten(streams)?;
        self.check_langs(rows.iter().map(|r| (r.ex.route.src.as_str(), r.ex.route.tgt.as_str())))?;
        let (coeffs, tokens) = row_coefficients(&rows, streams.len());
        let mut ctx = Ctx {
            tape,
            store: &self.store,
            cfg: &self.cfg,
            rng: rng.map(|r| &mut *r as &mut dyn RngCore),
        };
        let srcs: Vec<(&str, &[usize])> = rows
            .iter()
            .map(|r| (r.ex.route.src.as_str(), r.src.as_slice()))
            .collect();
        let tgts: Vec<(&str, &[usize])> = rows
            .iter()
            .map(|r| (r.ex.route.tgt.as_str(), r.tgt_in.as_slice()))
            .collect();
        let enc = self.encode(&mut ctx, &srcs)?;
        let leaves = self.decode_train(&mut ctx, &enc, &tgts)?;
        let len = tgts.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let mut row_ce = vec![0.0; rows.len()];
        let mut total: Option<Var> = None;
        for leaf in &leaves {
            let outs: Vec<&[usize]> = leaf.order.iter().map(|&r| rows[r].tgt_out.as_slice()).collect();
            let targets = pad_flat(&outs, len);
            let ce = ctx.tape.cross_entropy_rows(leaf.logits, &targets, PAD_ID)?;
            for (i, &r) in leaf.order.iter().enumerate() {
                row_ce[r] = ctx.tape.value(ce).data()[i];
            }
            let c: Vec<f64> = leaf.order.iter().map(|&r| coeffs[r]).collect();
            let part = ctx.tape.weighted_sum(ce, &c)?;
            total = Some(match total {
                None => part,
                Some(t) => ctx.tape.add(t, part)?,
            });
        }
        let loss = total.ok_or_else(|| ModelError::TagMismatch("no decoder output".into()))?;
        Ok(LossOutput {
            loss,
            stream_losses: stream_means(&rows, &row_ce, &tokens),
            stream_tokens: tokens,
        })
    }

    fn translate(
        &self,
        src_lang: &str,
        tgt_lang: &str,
        srcs: &[Vec<TokenId>],
        max_len: usize,
    ) -> Result<Vec<Vec<TokenId>>, ModelError> {
        self.check_langs(std::iter::once((src_lang, tgt_lang)))?;
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let src_ids: Vec<Vec<usize>> = srcs.iter().map(|s| to_usize(s)).collect();
        let rows: Vec<(&str, &[usize])> = src_ids.iter().map(|s| (src_lang, s.as_slice())).collect();
        let mut tape = Tape::new();
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &self.store,
            cfg: &self.cfg,
            rng: None,
        };
        let enc = self.encode(&mut ctx, &rows)?;
        let memory = ctx.tape.value(enc.x).clone();
        let n = srcs.len();
        debug_assert!(enc.order.iter().enumerate().all(|(i, &r)| i == r));
        greedy_decode(n, max_len, self.vocab_size, |flat, t| {
            let mut tape = Tape::new();
            let mut ctx = Ctx {
                tape: &mut tape,
                store: &self.store,
                cfg: &self.cfg,
                rng: None,
            };
            let x = ctx.tape.constant(memory.clone());
            let e = EncoderOutputs { x, ..enc.clone() };
            let tg: Vec<(&str, &[usize])> = flat.chunks(t).map(|c| (tgt_lang, c)).collect();
            let hidden = self.decode_hidden(&mut ctx, &e, &tg)?;
            let h = ctx.tape.value(hidden[0].logits);
            let last = ctx.tape.constant(last_position(h));
            let logits = output_projection(&mut ctx, last, self.out_w, self.out_b)?;
            Ok(ctx.tape.value(logits).data().to_vec())
        })
    }
}

/// One encoder and one decoder shared by every direction; the source is
/// prefixed with the target-language tag token.
#[derive(Debug, Clone)]
pub struct FullSharingModel {
    pub inner: PlainTransformer,
    pub tags: BTreeMap<String, TokenId>,
    pub vocab_size: usize,
}

impl FullSharingModel {
    pub fn enc_layers(&self) -> usize {
        self.inner.encoder.len()
    }

    pub fn dec_layers(&self) -> usize {
        self.inner.decoder.len()
    }

    fn tag(&self, lang: &str) -> Result<usize, ModelError> {
        self.tags
            .get(lang)
            .map(|&t| t as usize)
            .ok_or_else(|| ModelError::UnknownLanguage(lang.to_string()))
    }

    fn tagged(&self, tgt_lang: &str, src: &[usize]) -> Result<Vec<usize>, ModelError> {
        let mut v = Vec::with_capacity(src.len() + 1);
        v.push(self.tag(tgt_lang)?);
        v.extend_from_slice(src);
        Ok(v)
    }

    pub fn new<R: Rng + ?Sized>(
        cfg: ModelConfig,
        enc_layers: usize,
        dec_layers: usize,
        vocab_size: usize,
        tags: BTreeMap<String, TokenId>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if enc_layers == 0 || dec_layers == 0 {
            return Err(ModelError::Config("full-sharing depths must be at least 1".into()));
        }
        if let Some((l, &t)) = tags.iter().find(|(_, &t)| t as usize >= vocab_size) {
            return Err(ModelError::Config(format!("tag id {t} for {l} outside vocabulary")));
        }
        let inner = PlainTransformer::new(cfg, enc_layers, dec_layers, vocab_size, rng)?;
        Ok(FullSharingModel {
            inner,
            tags,
            vocab_size,
        })
    }
}

/// Full-sharing baseline over `vocab`, with a tag token for every target
/// language.
pub fn build_full_sharing<R: Rng + ?Sized>(
    cfg: ModelConfig,
    enc_layers: usize,
    dec_layers: usize,
    vocab: &BpeVocab,
    target_langs: &[String],
    rng: &mut R,
) -> Result<FullSharingModel, ModelError> {
    let tags = target_langs
        .iter()
        .map(|l| {
            vocab
                .tag_id(l)
                .map(|t| (l.clone(), t))
                .ok_or_else(|| ModelError::UnknownLanguage(l.clone()))
        })
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    FullSharingModel::new(cfg, enc_layers, dec_layers, vocab.len(), tags, rng)
}

impl NmtModel for FullSharingModel {
    fn config(&self) -> &ModelConfig {
        &self.inner.cfg
    }

    fn store(&self) -> &ParamStore {
        &self.inner.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.inner.store
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            spec: ModelSpec::Full {
                enc_layers: self.enc_layers(),
                dec_layers: self.dec_layers(),
                tags: self.tags.clone(),
            },
            config: self.inner.cfg,
            vocab_size: self.vocab_size,
        }
    }

    fn forward_loss(
        &self,
        tape: &mut Tape,
        streams: &[Vec<Example>],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LossOutput, ModelError> {
        let rows = flatten(streams)?;
        let (coeffs, tokens) = row_coefficients(&rows, streams.len());
        let srcs = rows
            .iter()
            .map(|r| self.tagged(&r.ex.route.tgt, &r.src))
            .collect::<Result<Vec<_>, _>>()?;
        let n = rows.len();
        let slen = srcs.iter().map(Vec::len).max().unwrap_or(0);
        let tlen = rows.iter().map(|r| r.tgt_in.len()).max().unwrap_or(0);
        let src_refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
        let tin: Vec<&[usize]> = rows.iter().map(|r| r.tgt_in.as_slice()).collect();
        let tout: Vec<&[usize]> = rows.iter().map(|r| r.tgt_out.as_slice()).collect();
        let mut ctx = Ctx {
            tape,
            store: &self.inner.store,
            cfg: &self.inner.cfg,
            rng: rng.map(|r| &mut *r as &mut dyn RngCore),
        };
        let (mem, mask) = self.inner.encode(&mut ctx, &pad_flat(&src_refs, slen), n, PAD_ID)?;
        let logits = self
            .inner
            .decode(&mut ctx, mem, &mask, &pad_flat(&tin, tlen), n, PAD_ID)?;
        let ce = ctx.tape.cross_entropy_rows(logits, &pad_flat(&tout, tlen), PAD_ID)?;
        let row_ce = ctx.tape.value(ce).data().to_vec();
        let loss = ctx.tape.weighted_sum(ce, &coeffs)?;
        Ok(LossOutput {
            loss,
            stream_losses: stream_means(&rows, &row_ce, &tokens),
            stream_tokens: tokens,
        })
    }

    fn translate(
        &self,
        _src_lang: &str,
        tgt_lang: &str,
        srcs: &[Vec<TokenId>],
        max_len: usize,
    ) -> Result<Vec<Vec<TokenId>>, ModelError> {
        self.tag(tgt_lang)?;
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let tagged = srcs
            .iter()
            .map(|s| self.tagged(tgt_lang, &to_usize(s)))
            .collect::<Result<Vec<_>, _>>()?;
        let n = tagged.len();
        let slen = tagged.iter().map(Vec::len).max().unwrap_or(0);
        let refs: Vec<&[usize]> = tagged.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &self.inner.store,
            cfg: &self.inner.cfg,
            rng: None,
        };
        let (mem, mask) = self.inner.encode(&mut ctx, &pad_flat(&refs, slen), n, PAD_ID)?;
        let memory = ctx.tape.value(mem).clone();
        greedy_decode(n, max_len, self.vocab_size, |flat, _t| {
            let mut tape = Tape::new();
            let mut ctx = Ctx {
                tape: &mut tape,
                store: &self.inner.store,
                cfg: &self.inner.cfg,
                rng: None,
            };
            let m = ctx.tape.constant(memory.clone());
            let h = self.inner.decode_hidden(&mut ctx, m, &mask, flat, n, PAD_ID)?;
            let last = last_position(ctx.tape.value(h));
            let last = ctx.tape.constant(last);
            let logits = self.inner.project(&mut ctx, last)?;
            Ok(ctx.tape.value(logits).data().to_vec())
        })
    }
}
