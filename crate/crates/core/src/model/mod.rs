//! Transformer encoder-decoder with like-driven social attention.
//!
//! The encoder output of every token is multiplied by the attention weight
//! of the text it came from before the decoder cross-attends to it. The
//! title always has weight 1; comment `i` has `sqrt(likes_i / max_likes)`.

pub mod layers;

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::corpus::CleanThread;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenSeq, BOS, EOS, PAD};
use layers::{
    dropout, dropout_backward, impl_tensors, Attention, AttnCache, FeedForward, FfnCache, Init, LayerNorm, Linear,
    LnCache, Role, Tensors,
};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 128 wide, 2 + 2 blocks, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            n_heads: 4,
            d_ff: 512,
            max_len: 512,
            vocab_size,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_enc_blocks", self.n_enc_blocks),
            ("n_dec_blocks", self.n_dec_blocks),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.max_len < 2 {
            return Err(Error::invalid("max_len must be >= 2"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid("d_model must be divisible by n_heads"));
        }
        for (name, p) in [("dropout", self.dropout), ("label_smoothing", self.label_smoothing)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("d_model".into(), self.d_model.to_string()),
            ("n_enc_blocks".into(), self.n_enc_blocks.to_string()),
            ("n_dec_blocks".into(), self.n_dec_blocks.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("label_smoothing".into(), self.label_smoothing.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .ok_or_else(|| Error::invalid(format!("missing model key {key}")))?
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for model key {key}")))
        }
        let cfg = ModelConfig {
            d_model: get(kv, "d_model")?,
            n_enc_blocks: get(kv, "n_enc_blocks")?,
            n_dec_blocks: get(kv, "n_dec_blocks")?,
            n_heads: get(kv, "n_heads")?,
            d_ff: get(kv, "d_ff")?,
            max_len: get(kv, "max_len")?,
            vocab_size: get(kv, "vocab_size")?,
            dropout: get(kv, "dropout")?,
            label_smoothing: get(kv, "label_smoothing")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl_tensors!(EncoderBlock { ln1, attn, ln2, ffn });

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl_tensors!(DecoderBlock {
    ln1,
    self_attn,
    ln2,
    cross_attn,
    ln3,
    ffn
});

/// Every learnable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_emb: Mat,
    pub enc_pos: Mat,
    pub dec_pos: Mat,
    pub encoder: Vec<EncoderBlock>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub dec_norm: LayerNorm,
    pub lm_head: Linear,
}

impl_tensors!(ModelParams {
    token_emb,
    enc_pos,
    dec_pos,
    encoder,
    enc_norm,
    decoder,
    dec_norm,
    lm_head,
});

impl ModelParams {
    pub fn build(cfg: &ModelConfig, init: &mut Init<'_>) -> Self {
        let d = cfg.d_model;
        ModelParams {
            token_emb: init(Role::Weight, (cfg.vocab_size, d)),
            enc_pos: init(Role::Weight, (cfg.max_len, d)),
            dec_pos: init(Role::Weight, (cfg.max_len, d)),
            encoder: (0..cfg.n_enc_blocks)
                .map(|_| EncoderBlock {
                    ln1: LayerNorm::new(d, init),
                    attn: Attention::new(d, init),
                    ln2: LayerNorm::new(d, init),
                    ffn: FeedForward::new(d, cfg.d_ff, init),
                })
                .collect(),
            enc_norm: LayerNorm::new(d, init),
            decoder: (0..cfg.n_dec_blocks)
                .map(|_| DecoderBlock {
                    ln1: LayerNorm::new(d, init),
                    self_attn: Attention::new(d, init),
                    ln2: LayerNorm::new(d, init),
                    cross_attn: Attention::new(d, init),
                    ln3: LayerNorm::new(d, init),
                    ffn: FeedForward::new(d, cfg.d_ff, init),
                })
                .collect(),
            dec_norm: LayerNorm::new(d, init),
            lm_head: Linear::new(d, cfg.vocab_size, init),
        }
    }

    /// Normal(0, 0.02) weights, unit gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        Self::build(cfg, &mut |role, shape| match role {
            Role::Weight => Mat::from_shape_fn(shape, |_| normal.sample(&mut rng)),
            Role::Gain => Mat::ones(shape),
            Role::Bias => Mat::zeros(shape),
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, &mut |_, shape| Mat::zeros(shape))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |name, t| out.push((name, t)));
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, t| *t *= factor);
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// SHA-256 over every value's bit pattern, in tensor order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelParams::zeros(cfg);
        let ours = self.named();
        let theirs = expected.named();
        if ours.len() != theirs.len() {
            return Err(Error::Shape("tensor count differs from config".into()));
        }
        for ((na, a), (nb, b)) in ours.iter().zip(&theirs) {
            if na != nb || a.dim() != b.dim() {
                return Err(Error::Shape(format!(
                    "{na} has shape {:?}, expected {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Per-text attention weights; index 0 is the title.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights(pub Vec<f64>);

impl AttentionWeights {
    pub fn uniform(n_texts: usize) -> Self {
        AttentionWeights(vec![1.0; n_texts])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `[1, sqrt(likes_1 / max), ..., sqrt(likes_n / max)]`. When no comment
/// has likes, every comment weight is 0.
pub fn attention_weights_from_likes(likes: &[u64]) -> Result<AttentionWeights> {
    if likes.is_empty() {
        return Err(Error::invalid("attention weights need at least one comment"));
    }
    let max = *likes.iter().max().unwrap();
    let mut w = Vec::with_capacity(likes.len() + 1);
    w.push(1.0);
    w.extend(likes.iter().map(|&l| {
        if max == 0 {
            0.0
        } else if l == max {
            1.0
        } else {
            (l as f64 / max as f64).sqrt()
        }
    }));
    Ok(AttentionWeights(w))
}

pub fn attention_weights(thread: &CleanThread) -> Result<AttentionWeights> {
    attention_weights_from_likes(&thread.likes())
}

/// Encoder output before (`enc`) and after (`enc_att`) attention scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedThread {
    pub enc: Mat,
    pub enc_att: Mat,
}

struct EncBlockCache {
    ln1: LnCache,
    attn: AttnCache,
    drop1: Option<Mat>,
    ln2: LnCache,
    ffn: FfnCache,
    drop2: Option<Mat>,
}

struct DecBlockCache {
    ln1: LnCache,
    self_attn: AttnCache,
    drop1: Option<Mat>,
    ln2: LnCache,
    cross_attn: AttnCache,
    drop2: Option<Mat>,
    ln3: LnCache,
    ffn: FfnCache,
    drop3: Option<Mat>,
}

/// Loss summed over scored target positions, with matching gradients.
pub struct LossSum {
    pub loss: f64,
    pub tokens: usize,
    pub grads: ModelParams,
}

fn check_ids(ids: &[TokenId], cfg: &ModelConfig, what: &str) -> Result<()> {
    if ids.len() > cfg.max_len {
        return Err(Error::invalid(format!(
            "{what} length {} exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "{what} contains id {id} outside the vocabulary"
        )));
    }
    Ok(())
}

fn row_scales(seq: &TokenSeq, weights: &AttentionWeights, disable_attention: bool) -> Result<Vec<f64>> {
    if weights.len() != seq.n_texts {
        return Err(Error::invalid(format!(
            "{} attention weights for {} texts",
            weights.len(),
            seq.n_texts
        )));
    }
    if disable_attention {
        return Ok(vec![1.0; seq.len()]);
    }
    Ok(seq.sources().into_iter().map(|s| weights.0[s]).collect())
}

fn scale_rows(m: &Mat, scales: &[f64]) -> Mat {
    let mut out = m.clone();
    for (mut row, &w) in out.rows_mut().into_iter().zip(scales) {
        row *= w;
    }
    out
}

impl ModelParams {
    fn embed(&self, ids: &[TokenId], pos: &Mat) -> Mat {
        let mut x = Mat::zeros((ids.len(), self.token_emb.ncols()));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&self.token_emb.row(id as usize));
            row += &pos.row(t);
        }
        x
    }

    fn encoder_forward(
        &self,
        cfg: &ModelConfig,
        ids: &[TokenId],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Mat, Option<Mat>, Vec<EncBlockCache>, LnCache) {
        let mut x = self.embed(ids, &self.enc_pos);
        let drop0 = dropout(&mut x, cfg.dropout, rng.as_deref_mut());
        let mut caches = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (a, ln1) = block.ln1.forward(&x);
            let (mut sa, attn) = block.attn.forward(&a, &a, cfg.n_heads, false);
            let drop1 = dropout(&mut sa, cfg.dropout, rng.as_deref_mut());
            x += &sa;
            let (b, ln2) = block.ln2.forward(&x);
            let (mut f, ffn) = block.ffn.forward(&b);
            let drop2 = dropout(&mut f, cfg.dropout, rng.as_deref_mut());
            x += &f;
            caches.push(EncBlockCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            });
        }
        let (enc, norm) = self.enc_norm.forward(&x);
        (enc, drop0, caches, norm)
    }

    fn decoder_forward(
        &self,
        cfg: &ModelConfig,
        ids: &[TokenId],
        memory: &Mat,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Mat, Option<Mat>, Vec<DecBlockCache>, LnCache) {
        let mut y = self.embed(ids, &self.dec_pos);
        let drop0 = dropout(&mut y, cfg.dropout, rng.as_deref_mut());
        let mut caches = Vec::with_capacity(self.decoder.len());
        for block in &self.decoder {
            let (a, ln1) = block.ln1.forward(&y);
            let (mut sa, self_attn) = block.self_attn.forward(&a, &a, cfg.n_heads, true);
            let drop1 = dropout(&mut sa, cfg.dropout, rng.as_deref_mut());
            y += &sa;
            let (b, ln2) = block.ln2.forward(&y);
            let (mut ca, cross_attn) = block.cross_attn.forward(&b, memory, cfg.n_heads, false);
            let drop2 = dropout(&mut ca, cfg.dropout, rng.as_deref_mut());
            y += &ca;
            let (c, ln3) = block.ln3.forward(&y);
            let (mut f, ffn) = block.ffn.forward(&c);
            let drop3 = dropout(&mut f, cfg.dropout, rng.as_deref_mut());
            y += &f;
            caches.push(DecBlockCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross_attn,
                drop2,
                ln3,
                ffn,
                drop3,
            });
        }
        let (h, norm) = self.dec_norm.forward(&y);
        (h, drop0, caches, norm)
    }

    /// Runs the encoder and applies the per-text scaling. With
    /// `disable_attention`, `enc_att` equals `enc`.
    pub fn encode_thread(
        &self,
        cfg: &ModelConfig,
        seq: &TokenSeq,
        weights: &AttentionWeights,
        disable_attention: bool,
    ) -> Result<EncodedThread> {
        if seq.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        check_ids(&seq.ids, cfg, "input")?;
        let scales = row_scales(seq, weights, disable_attention)?;
        let (enc, ..) = self.encoder_forward(cfg, &seq.ids, None);
        let enc_att = if disable_attention {
            enc.clone()
        } else {
            scale_rows(&enc, &scales)
        };
        Ok(EncodedThread { enc, enc_att })
    }

    /// Teacher-forced loss summed over target positions, plus gradients.
    /// Passing `rng` enables dropout.
    pub fn loss_sum(
        &self,
        cfg: &ModelConfig,
        seq: &TokenSeq,
        weights: &AttentionWeights,
        target: &[TokenId],
        disable_attention: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossSum> {
        if seq.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        check_ids(&seq.ids, cfg, "input")?;
        check_ids(target, cfg, "target")?;
        if target.len() < 2 || target[0] != BOS || *target.last().unwrap() != EOS {
            return Err(Error::invalid("target must start with BOS and end with EOS"));
        }
        let scales = row_scales(seq, weights, disable_attention)?;

        let (enc, enc_drop0, enc_caches, enc_norm) = self.encoder_forward(cfg, &seq.ids, rng.as_deref_mut());
        let memory = scale_rows(&enc, &scales);
        let dec_in = &target[..target.len() - 1];
        let dec_out = &target[1..];
        let (h, dec_drop0, dec_caches, dec_norm) = self.decoder_forward(cfg, dec_in, &memory, rng);
        let logits = self.lm_head.forward(&h);

        let (loss, tokens, dlogits) = smoothed_kl(&logits, dec_out, cfg.label_smoothing);

        let mut g = self.zeros_like();
        let dh = self.lm_head.backward(&h, &dlogits, &mut g.lm_head);
        let mut dy = self.dec_norm.backward(&dec_norm, &dh, &mut g.dec_norm);
        let mut dmem = Mat::zeros(memory.raw_dim());
        for ((block, cache), gb) in self.decoder.iter().zip(&dec_caches).zip(g.decoder.iter_mut()).rev() {
            let df = dropout_backward(&dy, &cache.drop3);
            let dc = block.ffn.backward(&cache.ffn, &df, &mut gb.ffn);
            dy += &block.ln3.backward(&cache.ln3, &dc, &mut gb.ln3);
            let dca = dropout_backward(&dy, &cache.drop2);
            let (db, dm) = block
                .cross_attn
                .backward(&cache.cross_attn, &dca, cfg.n_heads, &mut gb.cross_attn);
            dmem += &dm;
            dy += &block.ln2.backward(&cache.ln2, &db, &mut gb.ln2);
            let dsa = dropout_backward(&dy, &cache.drop1);
            let (daq, dakv) = block
                .self_attn
                .backward(&cache.self_attn, &dsa, cfg.n_heads, &mut gb.self_attn);
            dy += &block.ln1.backward(&cache.ln1, &(daq + dakv), &mut gb.ln1);
        }
        let dy = dropout_backward(&dy, &dec_drop0);
        accumulate_embedding(&mut g.token_emb, &mut g.dec_pos, dec_in, &dy);

        let denc = scale_rows(&dmem, &scales);
        let mut dx = self.enc_norm.backward(&enc_norm, &denc, &mut g.enc_norm);
        for ((block, cache), gb) in self.encoder.iter().zip(&enc_caches).zip(g.encoder.iter_mut()).rev() {
            let df = dropout_backward(&dx, &cache.drop2);
            let db = block.ffn.backward(&cache.ffn, &df, &mut gb.ffn);
            dx += &block.ln2.backward(&cache.ln2, &db, &mut gb.ln2);
            let dsa = dropout_backward(&dx, &cache.drop1);
            let (daq, dakv) = block.attn.backward(&cache.attn, &dsa, cfg.n_heads, &mut gb.attn);
            dx += &block.ln1.backward(&cache.ln1, &(daq + dakv), &mut gb.ln1);
        }
        let dx = dropout_backward(&dx, &enc_drop0);
        accumulate_embedding(&mut g.token_emb, &mut g.enc_pos, &seq.ids, &dx);

        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if let Some(name) = g.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok(LossSum { loss, tokens, grads: g })
    }

    /// Mean per-position KL loss and its gradients, dropout off.
    pub fn forward_loss(
        &self,
        cfg: &ModelConfig,
        seq: &TokenSeq,
        weights: &AttentionWeights,
        target: &[TokenId],
        disable_attention: bool,
    ) -> Result<(f64, ModelParams)> {
        let LossSum {
            loss,
            tokens,
            mut grads,
        } = self.loss_sum(cfg, seq, weights, target, disable_attention, None)?;
        if tokens == 0 {
            return Ok((0.0, grads));
        }
        grads.scale(1.0 / tokens as f64);
        Ok((loss / tokens as f64, grads))
    }
}

fn accumulate_embedding(emb: &mut Mat, pos: &mut Mat, ids: &[TokenId], dx: &Mat) {
    for (t, &id) in ids.iter().enumerate() {
        let row = dx.row(t);
        let mut e = emb.row_mut(id as usize);
        e += &row;
        let mut p = pos.row_mut(t);
        p += &row;
    }
}

fn log_softmax_row(row: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// KL(smoothed one-hot || softmax(logits)) summed over non-PAD targets.
/// The smoothing mass is spread evenly over all ids except the target and
/// PAD. Returns (sum, scored positions, d sum / d logits).
pub fn smoothed_kl(logits: &Mat, targets: &[TokenId], smoothing: f64) -> (f64, usize, Mat) {
    let vocab = logits.ncols();
    let others = vocab.saturating_sub(2);
    let eps = if others == 0 { 0.0 } else { smoothing };
    let off = if others == 0 { 0.0 } else { eps / others as f64 };
    let xlogx = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
    let entropy_term = xlogx(1.0 - eps) + others as f64 * xlogx(off);
    let mut total = 0.0;
    let mut tokens = 0;
    let mut grad = Mat::zeros(logits.raw_dim());
    for (t, &target) in targets.iter().enumerate() {
        if target == PAD {
            continue;
        }
        tokens += 1;
        let logp = log_softmax_row(logits.row(t));
        let mut cross = 0.0;
        let mut g = grad.row_mut(t);
        for (j, &lp) in logp.iter().enumerate() {
            let q = if j == target as usize {
                1.0 - eps
            } else if j == PAD as usize {
                0.0
            } else {
                off
            };
            cross -= q * lp;
            g[j] = lp.exp() - q;
        }
        total += entropy_term + cross;
    }
    (total, tokens, grad)
}

/// Cross-attention keys and values for every decoder block, computed once
/// per encoded thread.
pub struct DecoderMemory<'a> {
    params: &'a ModelParams,
    cfg: &'a ModelConfig,
    kv: Vec<(Mat, Mat)>,
}

impl<'a> DecoderMemory<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig, enc_att: &Mat) -> Result<Self> {
        if enc_att.nrows() == 0 || enc_att.ncols() != cfg.d_model {
            return Err(Error::Shape(format!("encoder memory has shape {:?}", enc_att.dim())));
        }
        let kv = params
            .decoder
            .iter()
            .map(|b| (b.cross_attn.k.forward(enc_att), b.cross_attn.v.forward(enc_att)))
            .collect();
        Ok(DecoderMemory { params, cfg, kv })
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    fn hidden(&self, prefix: &[TokenId]) -> Result<Mat> {
        if prefix.is_empty() {
            return Err(Error::invalid("decoder prefix must be non-empty"));
        }
        if prefix.len() >= self.cfg.max_len {
            return Err(Error::invalid(format!(
                "decoder prefix length {} must be below max_len {}",
                prefix.len(),
                self.cfg.max_len
            )));
        }
        check_ids(prefix, self.cfg, "prefix")?;
        let p = self.params;
        let mut y = p.embed(prefix, &p.dec_pos);
        for (block, (k, v)) in p.decoder.iter().zip(&self.kv) {
            let (a, _) = block.ln1.forward(&y);
            y += &block.self_attn.forward(&a, &a, self.cfg.n_heads, true).0;
            let (b, _) = block.ln2.forward(&y);
            y += &block.cross_attn.forward_cached(&b, k, v, self.cfg.n_heads, false);
            let (c, _) = block.ln3.forward(&y);
            y += &block.ffn.forward(&c).0;
        }
        Ok(p.dec_norm.forward(&y).0)
    }

    /// Next-token log probabilities after `prefix`.
    pub fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let h = self.hidden(prefix)?;
        let last = h.slice(s![h.nrows() - 1.., ..]).to_owned();
        let logits = self.params.lm_head.forward(&last);
        Ok(log_softmax_row(logits.row(0)))
    }

    /// Next-token distribution after `prefix`.
    pub fn decode_step(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.log_probs(prefix)?.into_iter().map(f64::exp).collect())
    }

    /// Distributions at every prefix position (teacher forcing).
    pub fn decode_all(&self, prefix: &[TokenId]) -> Result<Mat> {
        let h = self.hidden(prefix)?;
        let logits = self.params.lm_head.forward(&h);
        let mut out = Mat::zeros(logits.raw_dim());
        for (mut o, row) in out.axis_iter_mut(Axis(0)).zip(logits.rows()) {
            for (slot, lp) in o.iter_mut().zip(log_softmax_row(row)) {
                *slot = lp.exp();
            }
        }
        Ok(out)
    }
}

/// One-shot next-token distribution; prefer [`DecoderMemory`] in loops.
pub fn decode_step(params: &ModelParams, cfg: &ModelConfig, enc_att: &Mat, prefix: &[TokenId]) -> Result<Vec<f64>> {
    DecoderMemory::new(params, cfg, enc_att)?.decode_step(prefix)
}
