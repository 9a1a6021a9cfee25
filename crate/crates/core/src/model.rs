//! Transformer source encoder, target-encoder trunk and decoder.
//!
//! The decoder's first input slot carries a domain vector `e` (plus the
//! positional encoding) instead of a start-token embedding. Layers are
//! post-norm with sinusoidal positions, following the original transformer.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttentionArgs, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub n_domains: usize,
    pub dropout_enc_dec: f64,
    pub dropout_target_enc: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The desk-scale shape: d = 64, 2 layers, 2 heads, d_ff = 128.
    pub fn desk(vocab_size: usize, n_domains: usize, seed: u64) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            src_vocab_size: vocab_size,
            tgt_vocab_size: vocab_size,
            n_domains,
            dropout_enc_dec: 0.0,
            dropout_target_enc: 0.0,
            max_len: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return fail("n_layers, d_ff and max_len must be positive".into());
        }
        if self.n_domains == 0 {
            return fail("n_domains must be at least 1".into());
        }
        if self.src_vocab_size == 0 || self.tgt_vocab_size == 0 {
            return fail("vocabulary sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_enc_dec) {
            return fail(format!("dropout_enc_dec {} not in [0, 1)", self.dropout_enc_dec));
        }
        if self.dropout_target_enc != 0.0 {
            return fail("dropout_target_enc must be 0: the target encoder runs without dropout".into());
        }
        Ok(())
    }
}

/// What the target encoder reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetEncoderInput {
    Target,
    Source,
}

/// Padded id matrix with a mask marking real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenMatrix {
    /// Right-pads `seqs` with `pad` to the longest sequence.
    pub fn from_rows(seqs: &[Vec<usize>], pad: usize) -> Self {
        let cols = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * cols);
        let mut mask = Vec::with_capacity(seqs.len() * cols);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(pad, cols - s.len()));
            mask.extend(std::iter::repeat_n(false, cols - s.len()));
        }
        Self {
            rows: seqs.len(),
            cols,
            ids,
            mask,
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * self.cols);
        let mut mask = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            ids.extend_from_slice(self.row(r));
            mask.extend_from_slice(self.row_mask(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            ids,
            mask,
        }
    }

    /// Number of real tokens.
    pub fn tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `Z_x` with its key mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEncoding {
    /// `[B × L × d]`
    pub z: Tensor,
    pub mask: Vec<bool>,
}

impl SourceEncoding {
    pub fn batch(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows in the given order (rows may repeat).
    pub fn select(&self, rows: &[usize]) -> SourceEncoding {
        let (l, d) = (self.z.shape()[1], self.z.shape()[2]);
        let mut z = Vec::with_capacity(rows.len() * l * d);
        let mut mask = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            z.extend_from_slice(&self.z.data()[r * l * d..(r + 1) * l * d]);
            mask.extend_from_slice(&self.mask[r * l..(r + 1) * l]);
        }
        SourceEncoding {
            z: Tensor::new(vec![rows.len(), l, d], z).expect("consistent shape"),
            mask,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attention,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: Norm,
    cross: Attention,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
    ln3: Norm,
}

#[derive(Debug, Clone)]
struct EncoderStack {
    embed: ParamId,
    layers: Vec<EncoderLayer>,
}

/// Target encoder `E_t`: an encoder stack plus the bias-free domain head `M`.
#[derive(Debug, Clone)]
pub struct TargetEncoder {
    stack: EncoderStack,
    /// `M`, shape `[N × d]`.
    pub head: ParamId,
    pub input: TargetEncoderInput,
}

/// Dropout source for a forward pass; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

/// Encoder-decoder transformer with domain embeddings and an optional target encoder.
#[derive(Debug)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ParamStore,
    src: EncoderStack,
    tgt_embed: ParamId,
    dec_layers: Vec<DecoderLayer>,
    out: Linear,
    /// `E`, shape `[d × N]`.
    pub domain_embeddings: ParamId,
    pub target_encoder: Option<TargetEncoder>,
    positions: Vec<f64>,
    decoder_forwards: AtomicU64,
}

struct Init<'a> {
    params: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<ParamId> {
        let mut r = rng::stream(self.seed, Stream::Init, rng::name_hash(&name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
        self.params.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.params.add(name, Tensor::full(shape, value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.uniform(format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?,
            b: self.constant(format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.constant(format!("{name}.gamma"), &[d], 1.0)?,
            beta: self.constant(format!("{name}.beta"), &[d], 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn encoder(&mut self, prefix: &str, vocab: usize, cfg: &ModelConfig) -> Result<EncoderStack> {
        let d = cfg.d_model;
        let embed = self.uniform(format!("{prefix}.embed"), &[vocab, d], 1.0)?;
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Ok(EncoderLayer {
                    attn: self.attention(&format!("{p}.attn"), d)?,
                    ln1: self.norm(&format!("{p}.ln1"), d)?,
                    ff1: self.linear(&format!("{p}.ff1"), d, cfg.d_ff)?,
                    ff2: self.linear(&format!("{p}.ff2"), cfg.d_ff, d)?,
                    ln2: self.norm(&format!("{p}.ln2"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderStack { embed, layers })
    }
}

/// Sinusoidal table `[max_len × d]`.
fn positional_table(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Per-layer key/value arrays of one decoding row.
#[derive(Debug, Clone)]
struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Cross-attention keys and values of one source row, shared by all
/// hypotheses decoded from it.
#[derive(Debug)]
pub struct CrossCache {
    layers: Vec<LayerCache>,
    len: usize,
    mask: Vec<bool>,
}

/// Incremental decoding state of a single hypothesis row.
#[derive(Debug, Clone)]
pub struct DecoderState {
    width: usize,
    cross: Arc<CrossCache>,
    first: Vec<f64>,
    prefix: Vec<usize>,
    self_cache: Vec<LayerCache>,
}

impl DecoderState {
    /// Tokens generated so far (excluding the domain slot).
    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    /// Number of decoder positions already processed.
    pub fn cached_len(&self) -> usize {
        self.self_cache.first().map_or(0, |c| c.k.len() / self.width)
    }

    pub fn push(&mut self, token: usize) {
        self.prefix.push(token);
    }
}

impl Seq2Seq {
    fn build(config: &ModelConfig, n_domains: usize, target: Option<TargetEncoderInput>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut init = Init {
            params: &mut params,
            seed: config.seed,
        };
        let src = init.encoder("src", config.src_vocab_size, config)?;
        let tgt_embed = init.uniform("dec.embed".into(), &[config.tgt_vocab_size, d], 1.0)?;
        let dec_layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("dec.layer{i}");
                Ok(DecoderLayer {
                    self_attn: init.attention(&format!("{p}.self"), d)?,
                    ln1: init.norm(&format!("{p}.ln1"), d)?,
                    cross: init.attention(&format!("{p}.cross"), d)?,
                    ln2: init.norm(&format!("{p}.ln2"), d)?,
                    ff1: init.linear(&format!("{p}.ff1"), d, config.d_ff)?,
                    ff2: init.linear(&format!("{p}.ff2"), config.d_ff, d)?,
                    ln3: init.norm(&format!("{p}.ln3"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        let out = init.linear("dec.out", d, config.tgt_vocab_size)?;
        let domain_embeddings = init.uniform("dec.domain_embeddings".into(), &[d, n_domains], 1.0)?;
        let target_encoder = match target {
            Some(input) => {
                let vocab = match input {
                    TargetEncoderInput::Target => config.tgt_vocab_size,
                    TargetEncoderInput::Source => config.src_vocab_size,
                };
                let stack = init.encoder("te", vocab, config)?;
                let head = init.uniform("te.head".into(), &[n_domains, d], 1.0 / (d as f64).sqrt())?;
                Some(TargetEncoder { stack, head, input })
            }
            None => None,
        };
        Ok(Self {
            positions: positional_table(config.max_len, d),
            config: config.clone(),
            params,
            src,
            tgt_embed,
            dec_layers,
            out,
            domain_embeddings,
            target_encoder,
            decoder_forwards: AtomicU64::new(0),
        })
    }

    /// Plain encoder-decoder: a single start embedding in the domain slot.
    pub fn vanilla(config: &ModelConfig) -> Result<Self> {
        Self::build(config, 1, None)
    }

    /// `N` domain embeddings and a target encoder reading `input`.
    pub fn with_target_encoder(config: &ModelConfig, input: TargetEncoderInput) -> Result<Self> {
        Self::build(config, config.n_domains, Some(input))
    }

    /// `N` domain embeddings selected externally (mixture of experts).
    pub fn with_domains(config: &ModelConfig) -> Result<Self> {
        Self::build(config, config.n_domains, None)
    }

    pub fn n_domains(&self) -> usize {
        self.params.get(self.domain_embeddings).shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn tgt_vocab(&self) -> usize {
        self.config.tgt_vocab_size
    }

    /// Teacher-forced decoder passes performed since construction (or the last reset).
    pub fn decoder_forwards(&self) -> u64 {
        self.decoder_forwards.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_forwards(&self) {
        self.decoder_forwards.store(0, Ordering::Relaxed);
    }

    /// Column `k` of `E`.
    pub fn domain_embedding(&self, k: usize) -> Vec<f64> {
        let e = self.params.get(self.domain_embeddings);
        let n = e.shape()[1];
        (0..self.config.d_model).map(|i| e.data()[i * n + k]).collect()
    }

    /// Parameters of the target encoder, including `M`.
    pub fn target_encoder_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with("te."))
            .map(|(id, _, _)| id)
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Input("empty sequence".into()));
        }
        if len > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        let (w, b) = (g.param(l.w), g.param(l.b));
        let y = g.matmul(x, w)?;
        g.add_broadcast(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        let (gamma, beta) = (g.param(n.gamma), g.param(n.beta));
        g.layer_norm(x, gamma, beta)
    }

    fn drop(&self, g: &mut Graph, x: Var, rate: f64, rng: &mut DropoutRng<'_>) -> Result<Var> {
        match rng {
            Some(r) if rate > 0.0 => {
                let n = g.value(x).len();
                let keep: Vec<bool> = (0..n).map(|_| r.gen::<f64>() >= rate).collect();
                g.dropout(x, &keep, rate)
            }
            _ => Ok(x),
        }
    }

    /// Token embeddings plus positions for `[B × L]` ids.
    fn embed(&self, g: &mut Graph, table: ParamId, ids: &TokenMatrix) -> Result<Var> {
        self.check_len(ids.cols)?;
        let t = g.param(table);
        let x = g.embedding(t, &ids.ids, &[ids.rows, ids.cols])?;
        let d = self.config.d_model;
        let pe = g.constant(vec![ids.cols, d], self.positions[..ids.cols * d].to_vec())?;
        g.add_broadcast(x, pe)
    }

    fn encoder_stack(
        &self,
        g: &mut Graph,
        stack: &EncoderStack,
        ids: &TokenMatrix,
        rate: f64,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let x = self.embed(g, stack.embed, ids)?;
        let mut x = self.drop(g, x, rate, rng)?;
        for layer in &stack.layers {
            let a = self.self_attention(g, x, layer.attn, Some(&ids.mask), false)?;
            let a = self.drop(g, a, rate, rng)?;
            let r = g.add(x, a)?;
            x = self.norm(g, r, layer.ln1)?;
            let f = self.feed_forward(g, x, layer.ff1, layer.ff2)?;
            let f = self.drop(g, f, rate, rng)?;
            let r = g.add(x, f)?;
            x = self.norm(g, r, layer.ln2)?;
        }
        Ok(x)
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        x: Var,
        a: Attention,
        mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(g, x, a.q)?;
        let k = self.linear(g, x, a.k)?;
        let v = self.linear(g, x, a.v)?;
        let args = AttentionArgs {
            heads: self.config.n_heads,
            causal,
            key_mask: mask,
        };
        let o = g.attention(q, k, v, args)?;
        self.linear(g, o, a.o)
    }

    fn cross_attention(&self, g: &mut Graph, x: Var, a: Attention, z: Var, mask: &[bool]) -> Result<Var> {
        let q = self.linear(g, x, a.q)?;
        let k = self.linear(g, z, a.k)?;
        let v = self.linear(g, z, a.v)?;
        let args = AttentionArgs {
            heads: self.config.n_heads,
            causal: false,
            key_mask: Some(mask),
        };
        let o = g.attention(q, k, v, args)?;
        self.linear(g, o, a.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff1: Linear, ff2: Linear) -> Result<Var> {
        let h = self.linear(g, x, ff1)?;
        let h = g.relu(h);
        self.linear(g, h, ff2)
    }

    /// `Z_x = E_s(x)` inside a graph. Dropout applies only when `rng` is given.
    pub fn encode_source_graph(&self, g: &mut Graph, src: &TokenMatrix, rng: &mut DropoutRng<'_>) -> Result<Var> {
        self.encoder_stack(g, &self.src, src, self.config.dropout_enc_dec, rng)
    }

    /// Evaluation-mode source encoding.
    pub fn encode_source(&self, src: &TokenMatrix) -> Result<SourceEncoding> {
        let mut g = Graph::no_grad(&self.params);
        let z = self.encode_source_graph(&mut g, src, &mut None)?;
        Ok(SourceEncoding {
            z: g.to_tensor(z),
            mask: src.mask.clone(),
        })
    }

    /// First hidden state `h` of the target encoder's last layer, `[B × d]`.
    ///
    /// `ids` must start with the start token. No dropout is ever applied.
    pub fn encode_target_latent_graph(&self, g: &mut Graph, ids: &TokenMatrix) -> Result<Var> {
        let te = self
            .target_encoder
            .as_ref()
            .ok_or_else(|| Error::contract("model has no target encoder"))?;
        let z = self.encoder_stack(g, &te.stack, ids, 0.0, &mut None)?;
        g.select_position(z, 0)
    }

    pub fn encode_target_latent(&self, ids: &TokenMatrix) -> Result<Tensor> {
        let mut g = Graph::no_grad(&self.params);
        let h = self.encode_target_latent_graph(&mut g, ids)?;
        Ok(g.to_tensor(h))
    }

    /// Teacher-forced decoder logits `[B × L × V]`.
    ///
    /// Position 0 of `tgt_in` is ignored: its input is `e [B × d]` plus the
    /// positional encoding.
    pub fn decode_teacher_forced_graph(
        &self,
        g: &mut Graph,
        z: Var,
        src_mask: &[bool],
        e: Var,
        tgt_in: &TokenMatrix,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        if g.shape(e) != [tgt_in.rows, d] {
            return Err(Error::contract(format!(
                "domain vector shape {:?} does not match [{}, {d}]",
                g.shape(e),
                tgt_in.rows
            )));
        }
        self.decoder_forwards.fetch_add(1, Ordering::Relaxed);
        let rate = self.config.dropout_enc_dec;
        let x = self.embed(g, self.tgt_embed, tgt_in)?;
        let first = {
            let pe0 = g.constant(vec![d], self.positions[..d].to_vec())?;
            g.add_broadcast(e, pe0)?
        };
        let x = g.replace_first(x, first)?;
        let mut x = self.drop(g, x, rate, rng)?;
        // Padded target positions follow every real one, so the causal mask
        // already hides them from real queries.
        for layer in &self.dec_layers {
            let a = self.self_attention(g, x, layer.self_attn, None, true)?;
            let a = self.drop(g, a, rate, rng)?;
            let r = g.add(x, a)?;
            x = self.norm(g, r, layer.ln1)?;
            let c = self.cross_attention(g, x, layer.cross, z, src_mask)?;
            let c = self.drop(g, c, rate, rng)?;
            let r = g.add(x, c)?;
            x = self.norm(g, r, layer.ln2)?;
            let f = self.feed_forward(g, x, layer.ff1, layer.ff2)?;
            let f = self.drop(g, f, rate, rng)?;
            let r = g.add(x, f)?;
            x = self.norm(g, r, layer.ln3)?;
        }
        self.linear(g, x, self.out)
    }

    /// Evaluation-mode teacher-forced logits.
    pub fn decode_teacher_forced(&self, zx: &SourceEncoding, e: &Tensor, tgt_in: &TokenMatrix) -> Result<Tensor> {
        let mut g = Graph::no_grad(&self.params);
        let z = g.input(&zx.z);
        let ev = g.input(e);
        let logits = self.decode_teacher_forced_graph(&mut g, z, &zx.mask, ev, tgt_in, &mut None)?;
        Ok(g.to_tensor(logits))
    }

    /// Prepares incremental decoding for every row of `zx`.
    pub fn cross_caches(&self, zx: &SourceEncoding) -> Result<Vec<Arc<CrossCache>>> {
        let (b, l, d) = (zx.z.shape()[0], zx.z.shape()[1], zx.z.shape()[2]);
        let mut g = Graph::no_grad(&self.params);
        let z = g.input(&zx.z);
        let mut per_layer = Vec::with_capacity(self.dec_layers.len());
        for layer in &self.dec_layers {
            let k = self.linear(&mut g, z, layer.cross.k)?;
            let v = self.linear(&mut g, z, layer.cross.v)?;
            per_layer.push((g.value(k).to_vec(), g.value(v).to_vec()));
        }
        Ok((0..b)
            .map(|r| {
                let lens: Vec<bool> = zx.mask[r * l..(r + 1) * l].to_vec();
                Arc::new(CrossCache {
                    layers: per_layer
                        .iter()
                        .map(|(k, v)| LayerCache {
                            k: k[r * l * d..(r + 1) * l * d].to_vec(),
                            v: v[r * l * d..(r + 1) * l * d].to_vec(),
                        })
                        .collect(),
                    len: l,
                    mask: lens,
                })
            })
            .collect())
    }

    /// Fresh decoding state for a source row and a domain vector `e`.
    pub fn start_state(&self, cross: Arc<CrossCache>, e: Vec<f64>) -> Result<DecoderState> {
        if e.len() != self.config.d_model {
            return Err(Error::contract(format!(
                "domain vector width {} differs from d_model {}",
                e.len(),
                self.config.d_model
            )));
        }
        Ok(DecoderState {
            width: self.config.d_model,
            cross,
            first: e,
            prefix: Vec::new(),
            self_cache: vec![
                LayerCache {
                    k: Vec::new(),
                    v: Vec::new()
                };
                self.dec_layers.len()
            ],
        })
    }

    /// Next-token logits `[rows × V]` for states that all sit at the same
    /// position; each state's cache is extended by one position.
    ///
    /// The pending input of a state is `e` when its prefix is empty, otherwise
    /// the last prefix token.
    pub fn decode_one_step(&self, states: &mut [DecoderState]) -> Result<Vec<Vec<f64>>> {
        let rows = states.len();
        if rows == 0 {
            return Ok(Vec::new());
        }
        let d = self.config.d_model;
        let t = states[0].cached_len();
        for s in states.iter() {
            if s.cached_len() != t || s.prefix.len() != t {
                return Err(Error::contract(format!(
                    "decoder state has {} cached positions for a prefix of {} tokens (batch position {t})",
                    s.cached_len(),
                    s.prefix.len()
                )));
            }
        }
        if t >= self.config.max_len {
            return Err(Error::Input(format!("decoding past max_len {}", self.config.max_len)));
        }
        let embed = self.params.get(self.tgt_embed);
        let mut input = Vec::with_capacity(rows * d);
        for s in states.iter() {
            let base: &[f64] = match s.prefix.last() {
                None => &s.first,
                Some(&tok) => {
                    if tok >= self.config.tgt_vocab_size {
                        return Err(Error::Index {
                            what: "token id",
                            index: tok,
                            size: self.config.tgt_vocab_size,
                        });
                    }
                    &embed.data()[tok * d..(tok + 1) * d]
                }
            };
            input.extend(base.iter().zip(&self.positions[t * d..(t + 1) * d]).map(|(a, p)| a + p));
        }
        let cross_len = states.iter().map(|s| s.cross.len).max().unwrap_or(0);
        let mut g = Graph::no_grad(&self.params);
        let mut x = g.constant(vec![rows, 1, d], input)?;
        for (li, layer) in self.dec_layers.iter().enumerate() {
            let a = layer.self_attn;
            let q = self.linear(&mut g, x, a.q)?;
            let k = self.linear(&mut g, x, a.k)?;
            let v = self.linear(&mut g, x, a.v)?;
            let mut keys = Vec::with_capacity(rows * (t + 1) * d);
            let mut values = Vec::with_capacity(rows * (t + 1) * d);
            for (r, s) in states.iter_mut().enumerate() {
                let c = &mut s.self_cache[li];
                c.k.extend_from_slice(&g.value(k)[r * d..(r + 1) * d]);
                c.v.extend_from_slice(&g.value(v)[r * d..(r + 1) * d]);
                keys.extend_from_slice(&c.k);
                values.extend_from_slice(&c.v);
            }
            let kc = g.constant(vec![rows, t + 1, d], keys)?;
            let vc = g.constant(vec![rows, t + 1, d], values)?;
            let args = AttentionArgs {
                heads: self.config.n_heads,
                causal: false,
                key_mask: None,
            };
            let o = g.attention(q, kc, vc, args)?;
            let o = self.linear(&mut g, o, a.o)?;
            let r = g.add(x, o)?;
            x = self.norm(&mut g, r, layer.ln1)?;

            let c = layer.cross;
            let q = self.linear(&mut g, x, c.q)?;
            let mut keys = vec![0.0; rows * cross_len * d];
            let mut values = vec![0.0; rows * cross_len * d];
            let mut mask = vec![false; rows * cross_len];
            for (r, s) in states.iter().enumerate() {
                let cc = &s.cross;
                let lc = &cc.layers[li];
                keys[r * cross_len * d..][..cc.len * d].copy_from_slice(&lc.k);
                values[r * cross_len * d..][..cc.len * d].copy_from_slice(&lc.v);
                mask[r * cross_len..][..cc.len].copy_from_slice(&cc.mask);
            }
            let kc = g.constant(vec![rows, cross_len, d], keys)?;
            let vc = g.constant(vec![rows, cross_len, d], values)?;
            let args = AttentionArgs {
                heads: self.config.n_heads,
                causal: false,
                key_mask: Some(&mask),
            };
            let o = g.attention(q, kc, vc, args)?;
            let o = self.linear(&mut g, o, c.o)?;
            let r = g.add(x, o)?;
            x = self.norm(&mut g, r, layer.ln2)?;

            let f = self.feed_forward(&mut g, x, layer.ff1, layer.ff2)?;
            let r = g.add(x, f)?;
            x = self.norm(&mut g, r, layer.ln3)?;
        }
        let logits = self.linear(&mut g, x, self.out)?;
        let v = self.config.tgt_vocab_size;
        Ok(g.value(logits).chunks(v).map(<[f64]>::to_vec).collect())
    }
}
