//! Post-norm Transformer encoder/decoder layers on top of [`crate::numerics`].

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{AttnMask, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tree(#[from] crate::lang_tree::TreeError),
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("row tags do not line up: {0}")]
    TagMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub dff: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            dff: 512,
            num_heads: 8,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.dff == 0 || self.num_heads == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(ModelError::Config("d_model must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn encoder_layer_params(&self) -> usize {
        let d = self.d_model;
        (4 * d * d + 3 * d) + (d * self.dff + self.dff) + (self.dff * d + d) + 2 * 2 * d
    }

    pub fn decoder_layer_params(&self) -> usize {
        let d = self.d_model;
        2 * (4 * d * d + 3 * d) + (d * self.dff + self.dff) + (self.dff * d + d) + 3 * 2 * d
    }
}

/// Padding and causality for one attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub attn: AttnMask,
}

impl MaskSpec {
    /// Keys equal to `pad` are masked; `ids` is `rows × len`.
    pub fn padding(ids: &[usize], rows: usize, pad: usize, causal: bool) -> Self {
        debug_assert_eq!(ids.len() % rows.max(1), 0);
        MaskSpec {
            attn: AttnMask {
                key_valid: ids.iter().map(|&t| t != pad).collect(),
                causal,
            },
        }
    }

    pub fn from_valid(key_valid: Vec<bool>, causal: bool) -> Self {
        MaskSpec {
            attn: AttnMask { key_valid, causal },
        }
    }
}

/// Query/key/value/output projections. Keys carry no bias: a key bias only
/// shifts every score of a query by the same amount, which softmax discards.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

fn zeros(store: &mut ParamStore, name: String, n: usize) -> Result<ParamId, NumericsError> {
    store.insert(name, Tensor::zeros(&[n]))
}

impl AttentionParams {
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(AttentionParams {
            wq: store.glorot(format!("{prefix}/wq"), d, d, rng)?,
            bq: zeros(store, format!("{prefix}/bq"), d)?,
            wk: store.glorot(format!("{prefix}/wk"), d, d, rng)?,
            wv: store.glorot(format!("{prefix}/wv"), d, d, rng)?,
            bv: zeros(store, format!("{prefix}/bv"), d)?,
            wo: store.glorot(format!("{prefix}/wo"), d, d, rng)?,
            bo: zeros(store, format!("{prefix}/bo"), d)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(FeedForwardParams {
            w1: store.glorot(format!("{prefix}/w1"), cfg.d_model, cfg.dff, rng)?,
            b1: zeros(store, format!("{prefix}/b1"), cfg.dff)?,
            w2: store.glorot(format!("{prefix}/w2"), cfg.dff, cfg.d_model, rng)?,
            b2: zeros(store, format!("{prefix}/b2"), cfg.d_model)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self, NumericsError> {
        Ok(NormParams {
            gain: store.insert(format!("{prefix}/gain"), Tensor::full(&[d], 1.0))?,
            bias: zeros(store, format!("{prefix}/bias"), d)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionParams,
    pub norm1: NormParams,
    pub ff: FeedForwardParams,
    pub norm2: NormParams,
}

impl EncoderLayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(EncoderLayerParams {
            self_attn: AttentionParams::init(store, &format!("{prefix}/self_attn"), cfg.d_model, rng)?,
            norm1: NormParams::init(store, &format!("{prefix}/norm1"), cfg.d_model)?,
            ff: FeedForwardParams::init(store, &format!("{prefix}/ff"), cfg, rng)?,
            norm2: NormParams::init(store, &format!("{prefix}/norm2"), cfg.d_model)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub norm1: NormParams,
    pub cross_attn: AttentionParams,
    pub norm2: NormParams,
    pub ff: FeedForwardParams,
    pub norm3: NormParams,
}

impl DecoderLayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(DecoderLayerParams {
            self_attn: AttentionParams::init(store, &format!("{prefix}/self_attn"), cfg.d_model, rng)?,
            norm1: NormParams::init(store, &format!("{prefix}/norm1"), cfg.d_model)?,
            cross_attn: AttentionParams::init(store, &format!("{prefix}/cross_attn"), cfg.d_model, rng)?,
            norm2: NormParams::init(store, &format!("{prefix}/norm2"), cfg.d_model)?,
            ff: FeedForwardParams::init(store, &format!("{prefix}/ff"), cfg, rng)?,
            norm3: NormParams::init(store, &format!("{prefix}/norm3"), cfg.d_model)?,
        })
    }
}

/// Sinusoidal position table `[n, d]`: even columns sine, odd columns cosine.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<Tensor, ModelError> {
    if !d.is_multiple_of(2) || d == 0 {
        return Err(ModelError::Config(format!("position width {d} must be even")));
    }
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(&[n.max(1), d], if n == 0 { vec![0.0; d] } else { data })?)
}

/// Forward-pass context: the tape, the parameters, and the dropout stream
/// (present only in training mode).
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub cfg: &'a ModelConfig,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl Ctx<'_> {
    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) => self.tape.dropout(x, self.cfg.dropout_rate, rng),
            None => x,
        }
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, NumericsError> {
        let (w, b) = (self.p(w), self.p(b));
        self.tape.linear(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, n: &NormParams) -> Result<Var, NumericsError> {
        let (g, b) = (self.p(n.gain), self.p(n.bias));
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Projects queries from `q_in` and keys/values from `kv_in`, attends per
/// head, and applies the output projection.
pub fn multi_head_attention(
    ctx: &mut Ctx<'_>,
    q_in: Var,
    kv_in: Var,
    mask: &MaskSpec,
    p: &AttentionParams,
) -> Result<Var, ModelError> {
    let q = ctx.linear(q_in, p.wq, p.bq)?;
    let wk = ctx.p(p.wk);
    let k = ctx.tape.linear(kv_in, wk, None)?;
    let v = ctx.linear(kv_in, p.wv, p.bv)?;
    let heads = ctx.cfg.num_heads;
    let o = ctx.tape.attention(q, k, v, &mask.attn, heads)?;
    Ok(ctx.linear(o, p.wo, p.bo)?)
}

fn feed_forward(ctx: &mut Ctx<'_>, x: Var, p: &FeedForwardParams) -> Result<Var, ModelError> {
    let h = ctx.linear(x, p.w1, p.b1)?;
    let h = ctx.tape.relu(h);
    Ok(ctx.linear(h, p.w2, p.b2)?)
}

/// Self-attention and feed-forward sublayers, each wrapped in dropout,
/// residual connection and layer norm.
pub fn encoder_layer_forward(
    ctx: &mut Ctx<'_>,
    x: Var,
    mask: &MaskSpec,
    p: &EncoderLayerParams,
) -> Result<Var, ModelError> {
    let a = multi_head_attention(ctx, x, x, mask, &p.self_attn)?;
    let a = ctx.dropout(a);
    let x = ctx.tape.add(x, a)?;
    let x = ctx.norm(x, &p.norm1)?;
    let f = feed_forward(ctx, x, &p.ff)?;
    let f = ctx.dropout(f);
    let x = ctx.tape.add(x, f)?;
    Ok(ctx.norm(x, &p.norm2)?)
}

pub fn decoder_layer_forward(
    ctx: &mut Ctx<'_>,
    y: Var,
    enc_out: Var,
    self_mask: &MaskSpec,
    cross_mask: &MaskSpec,
    p: &DecoderLayerParams,
) -> Result<Var, ModelError> {
    let (ry, re) = (ctx.tape.shape(y)[0], ctx.tape.shape(enc_out)[0]);
    if ry != re {
        return Err(ModelError::TagMismatch(format!(
            "decoder has {ry} rows, encoder output {re}"
        )));
    }
    let a = multi_head_attention(ctx, y, y, self_mask, &p.self_attn)?;
    let a = ctx.dropout(a);
    let y = ctx.tape.add(y, a)?;
    let y = ctx.norm(y, &p.norm1)?;
    let c = multi_head_attention(ctx, y, enc_out, cross_mask, &p.cross_attn)?;
    let c = ctx.dropout(c);
    let y = ctx.tape.add(y, c)?;
    let y = ctx.norm(y, &p.norm2)?;
    let f = feed_forward(ctx, y, &p.ff)?;
    let f = ctx.dropout(f);
    let y = ctx.tape.add(y, f)?;
    Ok(ctx.norm(y, &p.norm3)?)
}

/// Embedding lookup scaled by √d_model plus sinusoidal positions, then
/// dropout when training. `ids` is `rows × len`.
pub fn embed_and_position(ctx: &mut Ctx<'_>, table: ParamId, ids: &[usize], rows: usize) -> Result<Var, ModelError> {
    let d = ctx.cfg.d_model;
    let len = ids.len() / rows.max(1);
    let pos = sinusoidal_positions(len, d)?;
    let t = ctx.p(table);
    let x = ctx.tape.embedding(t, ids, rows, (d as f64).sqrt(), Some(&pos))?;
    Ok(ctx.dropout(x))
}

/// A plain encoder-decoder Transformer. Used directly as the full-sharing
/// baseline and as the reference for single-leaf hierarchical models.
#[derive(Debug, Clone)]
pub struct PlainTransformer {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl PlainTransformer {
    /// Registers parameters in the order embedding, encoder layers, decoder
    /// layers, output projection.
    pub fn new<R: Rng + ?Sized>(
        cfg: ModelConfig,
        enc_layers: usize,
        dec_layers: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embedding = store.glorot("embedding", vocab, d, rng)?;
        let encoder = (0..enc_layers)
            .map(|i| EncoderLayerParams::init(&mut store, &format!("enc/layer{i}"), &cfg, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let decoder = (0..dec_layers)
            .map(|i| DecoderLayerParams::init(&mut store, &format!("dec/layer{i}"), &cfg, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let out_w = store.glorot("out/w", d, vocab, rng)?;
        let out_b = zeros(&mut store, "out/b".into(), vocab)?;
        Ok(PlainTransformer {
            cfg,
            store,
            embedding,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn encode(
        &self,
        ctx: &mut Ctx<'_>,
        src: &[usize],
        rows: usize,
        pad: usize,
    ) -> Result<(Var, MaskSpec), ModelError> {
        let mask = MaskSpec::padding(src, rows, pad, false);
        let mut x = embed_and_position(ctx, self.embedding, src, rows)?;
        for layer in &self.encoder {
            x = encoder_layer_forward(ctx, x, &mask, layer)?;
        }
        Ok((x, mask))
    }

    /// Logits `[rows, len, vocab]` for teacher-forced decoder inputs.
    pub fn decode(
        &self,
        ctx: &mut Ctx<'_>,
        memory: Var,
        src_mask: &MaskSpec,
        tgt_in: &[usize],
        rows: usize,
        pad: usize,
    ) -> Result<Var, ModelError> {
        let y = self.decode_hidden(ctx, memory, src_mask, tgt_in, rows, pad)?;
        self.project(ctx, y)
    }

    /// Final decoder states `[rows, len, d_model]` before the output projection.
    pub fn decode_hidden(
        &self,
        ctx: &mut Ctx<'_>,
        memory: Var,
        src_mask: &MaskSpec,
        tgt_in: &[usize],
        rows: usize,
        pad: usize,
    ) -> Result<Var, ModelError> {
        let self_mask = MaskSpec::padding(tgt_in, rows, pad, true);
        let cross = MaskSpec::from_valid(src_mask.attn.key_valid.clone(), false);
        let mut y = embed_and_position(ctx, self.embedding, tgt_in, rows)?;
        for layer in &self.decoder {
            y = decoder_layer_forward(ctx, y, memory, &self_mask, &cross, layer)?;
        }
        Ok(y)
    }

    pub fn project(&self, ctx: &mut Ctx<'_>, y: Var) -> Result<Var, ModelError> {
        output_projection(ctx, y, self.out_w, self.out_b)
    }
}

/// Shared vocabulary projection.
pub fn output_projection(ctx: &mut Ctx<'_>, y: Var, w: ParamId, b: ParamId) -> Result<Var, ModelError> {
    Ok(ctx.linear(y, w, b)?)
}

pub(crate) fn zeros_param(store: &mut ParamStore, name: &str, n: usize) -> Result<ParamId, NumericsError> {
    zeros(store, name.to_string(), n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            dff: 16,
            num_heads: 2,
            dropout_rate: 0.1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            dropout_rate: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let cfg = ModelConfig::default();
        // (4·128² + 3·128) + (128·512+512) + (512·128+128) + 2·2·128
        assert_eq!(cfg.encoder_layer_params(), 198_144);
        // 2·(4·128² + 3·128) + (128·512+512) + (512·128+128) + 3·2·128
        assert_eq!(cfg.decoder_layer_params(), 264_320);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        EncoderLayerParams::init(&mut store, "e", &cfg, &mut rng).unwrap();
        assert_eq!(store.num_values(), 198_144);
        let mut store = ParamStore::new();
        DecoderLayerParams::init(&mut store, "d", &cfg, &mut rng).unwrap();
        assert_eq!(store.num_values(), 264_320);
    }

    #[test]
    fn positions() {
        let p = sinusoidal_positions(5, 6).unwrap();
        let d = p.data();
        assert_eq!(&d[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((d[6] - 1f64.sin()).abs() < 1e-15);
        assert!((d[6] - 0.8415).abs() < 1e-4);
        assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_positions(3, 5).is_err());
    }

    #[test]
    fn embedding_scale() {
        let cfg = ModelConfig {
            d_model: 4,
            dff: 8,
            num_heads: 2,
            dropout_rate: 0.0,
        };
        let mut store = ParamStore::new();
        let table = store.insert("emb", Tensor::full(&[3, 4], 1.0)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &store,
            cfg: &cfg,
            rng: None,
        };
        let x = embed_and_position(&mut ctx, table, &[2, 0, 1, 0], 2).unwrap();
        assert_eq!(tape.shape(x), &[2, 2, 4]);
        let pos = sinusoidal_positions(2, 4).unwrap();
        for (n, v) in tape.value(x).data().iter().enumerate() {
            assert!((v - pos.data()[n % 8] - 2.0).abs() < 1e-15);
        }
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &store,
            cfg: &cfg,
            rng: None,
        };
        assert!(embed_and_position(&mut ctx, table, &[5, 0], 1).is_err());
    }

    fn encoder_fixture() -> (ParamStore, EncoderLayerParams, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = EncoderLayerParams::init(&mut store, "e", &tiny(), &mut rng).unwrap();
        let x = Tensor::new(&[2, 3, 8], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (store, p, x)
    }

    #[test]
    fn encoder_layer_shape_and_eval_determinism() {
        let (store, p, x) = encoder_fixture();
        let cfg = tiny();
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut ctx = Ctx {
                tape: &mut tape,
                store: &store,
                cfg: &cfg,
                rng: None,
            };
            let mask = MaskSpec::from_valid(vec![true; 6], false);
            let y = encoder_layer_forward(&mut ctx, xv, &mask, &p).unwrap();
            tape.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[2, 3, 8]);
        assert_eq!(a, run());
    }

    #[test]
    fn encoder_layer_grad_check() {
        let (mut store, p, x) = encoder_fixture();
        let cfg = tiny();
        let ids: Vec<ParamId> = store.ids().collect();
        let coeffs: Vec<f64> = (0..48).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect();
        let err = grad_check(
            |tape, store| {
                let xv = tape.constant(x.clone());
                let mut ctx = Ctx {
                    tape,
                    store,
                    cfg: &cfg,
                    rng: None,
                };
                let mask = MaskSpec::from_valid(vec![true, true, false, true, true, true], false);
                let y = encoder_layer_forward(&mut ctx, xv, &mask, &p).map_err(|e| match e {
                    ModelError::Numerics(n) => n,
                    other => panic!("{other}"),
                })?;
                ctx.tape.weighted_sum(y, &coeffs)
            },
            &mut store,
            &ids,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn decoder_causality_and_row_mismatch() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = PlainTransformer::new(cfg, 1, 2, 11, &mut rng).unwrap();
        let logits = |tgt: &[usize]| {
            let mut tape = Tape::new();
            let mut ctx = Ctx {
                tape: &mut tape,
                store: &model.store,
                cfg: &cfg,
                rng: None,
            };
            let (mem, m) = model.encode(&mut ctx, &[1, 5, 6, 2], 1, 0).unwrap();
            let l = model.decode(&mut ctx, mem, &m, tgt, 1, 0).unwrap();
            tape.value(l).clone()
        };
        let a = logits(&[1, 4, 7, 9]);
        let b = logits(&[1, 4, 3, 10]);
        // Positions 0 and 1 see only tokens 0..=1, which agree.
        assert_eq!(a.data()[..2 * 11], b.data()[..2 * 11]);
        assert_ne!(a.data()[2 * 11..], b.data()[2 * 11..]);

        let mut tape = Tape::new();
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &model.store,
            cfg: &cfg,
            rng: None,
        };
        let (mem, _) = model.encode(&mut ctx, &[1, 5, 2, 1, 6, 2], 2, 0).unwrap();
        let y = ctx.tape.constant(Tensor::zeros(&[1, 2, 8]));
        let m = MaskSpec::from_valid(vec![true; 2], true);
        let c = MaskSpec::from_valid(vec![true; 6], false);
        assert!(matches!(
            decoder_layer_forward(&mut ctx, y, mem, &m, &c, &model.decoder[0]),
            Err(ModelError::TagMismatch(_))
        ));
    }

    #[test]
    fn decoder_layer_grad_check() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let p = DecoderLayerParams::init(&mut store, "d", &cfg, &mut rng).unwrap();
        let y = Tensor::new(&[2, 3, 8], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mem = Tensor::new(&[2, 4, 8], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let coeffs: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ids: Vec<ParamId> = store.ids().collect();
        let err = grad_check(
            |tape, store| {
                let yv = tape.constant(y.clone());
                let mv = tape.constant(mem.clone());
                let mut ctx = Ctx {
                    tape,
                    store,
                    cfg: &cfg,
                    rng: None,
                };
                let sm = MaskSpec::from_valid(vec![true, true, false, true, true, true], true);
                let cm = MaskSpec::from_valid(vec![true, true, true, false, true, true, true, true], false);
                let out = decoder_layer_forward(&mut ctx, yv, mv, &sm, &cm, &p).map_err(|e| match e {
                    ModelError::Numerics(n) => n,
                    other => panic!("{other}"),
                })?;
                ctx.tape.weighted_sum(out, &coeffs)
            },
            &mut store,
            &ids,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_position_attention_returns_value_projection() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = AttentionParams::init(&mut store, "a", 8, &mut rng).unwrap();
        let x = Tensor::new(&[1, 1, 8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &store,
            cfg: &cfg,
            rng: None,
        };
        let mask = MaskSpec::from_valid(vec![true], false);
        let out = multi_head_attention(&mut ctx, xv, xv, &mask, &p).unwrap();
        let wv = ctx.tape.param(&store, p.wv);
        let bv = ctx.tape.param(&store, p.bv);
        let v = ctx.tape.linear(xv, wv, Some(bv)).unwrap();
        let wo = ctx.tape.param(&store, p.wo);
        let bo = ctx.tape.param(&store, p.bo);
        let expect = ctx.tape.linear(v, wo, Some(bo)).unwrap();
        assert_eq!(tape.value(out), tape.value(expect));
    }

    #[test]
    fn padding_isolation() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = PlainTransformer::new(cfg, 2, 1, 9, &mut rng).unwrap();
        let enc = |model: &PlainTransformer, src: &[usize]| {
            let mut tape = Tape::new();
            let mut ctx = Ctx {
                tape: &mut tape,
                store: &model.store,
                cfg: &cfg,
                rng: None,
            };
            let (x, _) = model.encode(&mut ctx, src, 1, 0).unwrap();
            tape.value(x).data()[..3 * 8].to_vec()
        };
        let a = enc(&model, &[1, 4, 2, 0, 0]);
        // Changing what sits in padded positions (the PAD embedding row) must
        // not reach the real positions.
        let mut perturbed = model.clone();
        let emb = perturbed.store.get_mut(perturbed.embedding);
        for c in 0..8 {
            emb.data_mut()[c] += 0.5;
        }
        assert_eq!(a, enc(&perturbed, &[1, 4, 2, 0, 0]));
    }
}
