//! Transformer building blocks: embeddings, sinusoidal positions, multi-head
//! attention, position-wise FFN, the chunk-masked streaming encoder, and the
//! frame-stacking subsampling front-end.
//!
//! Residual wiring is pre-norm (normalise, sublayer, add) with a final
//! normalisation on top of each stack. Projections follow the per-head-split
//! convention: the input is split into `heads` slices of width `d_k` and each
//! slice gets its own d_k x d_k query/key/value projection; the concatenated
//! head outputs go through one d_model x d_model output projection.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{kernels, Tape, TensorId};

/// Reserved token id for start-of-sequence.
pub const SOS: usize = 0;
/// Reserved token id for end-of-sequence.
pub const EOS: usize = 1;
/// First non-reserved vocabulary id.
pub const FIRST_TOKEN: usize = 2;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Index of a named parameter tensor inside a `Model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Per-head q/k/v projections plus the shared output projection.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncLayerParams {
    pub norm1: NormParams,
    pub attn: MhaParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub struct DecLayerParams {
    pub norm1: NormParams,
    pub self_attn: MhaParams,
    pub norm2: NormParams,
    pub cross_attn: MhaParams,
    pub norm3: NormParams,
    pub ffn: FfnParams,
}

/// The full model: a flat named parameter store plus typed indices into it.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<Param>,
    pub embed: ParamId,
    pub front_w: ParamId,
    pub front_b: ParamId,
    pub enc: Vec<EncLayerParams>,
    pub enc_norm: NormParams,
    pub dec: Vec<DecLayerParams>,
    pub dec_norm: NormParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Epsilon used by every layer normalisation in the model.
pub const NORM_EPS: f64 = 1e-6;

struct ParamBuilder {
    params: Vec<Param>,
    rng: Rng,
}

impl ParamBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.params.push(Param { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform linear weight.
    fn linear(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| (self.rng.next_f64() * 2.0 - 1.0) * a)
            .collect();
        self.push(name, vec![rows, cols], data)
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.push(name, shape, vec![0.0; n])
    }

    fn ones(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.push(name, shape, vec![1.0; n])
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.ones(format!("{prefix}.gain"), vec![d]),
            bias: self.zeros(format!("{prefix}.bias"), vec![d]),
        }
    }

    fn mha(&mut self, prefix: &str, heads: usize, d_k: usize, d_model: usize) -> MhaParams {
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for h in 0..heads {
            wq.push(self.linear(format!("{prefix}.h{h}.wq"), d_k, d_k));
            wk.push(self.linear(format!("{prefix}.h{h}.wk"), d_k, d_k));
            wv.push(self.linear(format!("{prefix}.h{h}.wv"), d_k, d_k));
        }
        let wo = self.linear(format!("{prefix}.wo"), d_model, d_model);
        MhaParams { wq, wk, wv, wo }
    }

    fn ffn(&mut self, prefix: &str, d_model: usize, d_ffn: usize) -> FfnParams {
        FfnParams {
            w1: self.linear(format!("{prefix}.w1"), d_model, d_ffn),
            b1: self.zeros(format!("{prefix}.b1"), vec![d_ffn]),
            w2: self.linear(format!("{prefix}.w2"), d_ffn, d_model),
            b2: self.zeros(format!("{prefix}.b2"), vec![d_model]),
        }
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.d_model;
        let d_k = cfg.d_k();
        let mut b = ParamBuilder {
            params: Vec::new(),
            rng: Rng::new(cfg.seed),
        };

        let scale = 1.0 / (d as f64).sqrt();
        let emb_data: Vec<f64> = (0..cfg.vocab_size * d)
            .map(|_| b.rng.next_gaussian() * scale)
            .collect();
        let embed = b.push("embed".into(), vec![cfg.vocab_size, d], emb_data);

        let stacked = cfg.d_feat * cfg.subsample_factor;
        let front_w = b.linear("front.w".into(), stacked, d);
        let front_b = b.zeros("front.b".into(), vec![d]);

        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            let norm1 = b.norm(&format!("enc.{l}.norm1"), d);
            let attn = b.mha(&format!("enc.{l}.attn"), cfg.heads, d_k, d);
            let norm2 = b.norm(&format!("enc.{l}.norm2"), d);
            let ffn = b.ffn(&format!("enc.{l}.ffn"), d, cfg.d_ffn);
            enc.push(EncLayerParams {
                norm1,
                attn,
                norm2,
                ffn,
            });
        }
        let enc_norm = b.norm("enc.norm", d);

        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let norm1 = b.norm(&format!("dec.{l}.norm1"), d);
            let self_attn = b.mha(&format!("dec.{l}.self"), cfg.heads, d_k, d);
            let norm2 = b.norm(&format!("dec.{l}.norm2"), d);
            let cross_attn = b.mha(&format!("dec.{l}.cross"), cfg.heads, d_k, d);
            let norm3 = b.norm(&format!("dec.{l}.norm3"), d);
            let ffn = b.ffn(&format!("dec.{l}.ffn"), d, cfg.d_ffn);
            dec.push(DecLayerParams {
                norm1,
                self_attn,
                norm2,
                cross_attn,
                norm3,
                ffn,
            });
        }
        let dec_norm = b.norm("dec.norm", d);

        let out_w = b.linear("out.w".into(), d, cfg.vocab_size);
        let out_b = b.zeros("out.b".into(), vec![cfg.vocab_size]);

        Ok(Model {
            cfg,
            params: b.params,
            embed,
            front_w,
            front_b,
            enc,
            enc_norm,
            dec,
            dec_norm,
            out_w,
            out_b,
        })
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    /// Copy every parameter onto a tape; `trainable` marks them for gradients.
    pub fn insert_params(&self, tape: &mut Tape, trainable: bool) -> TapeParams {
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), p.shape.clone(), trainable))
            .collect();
        TapeParams { ids }
    }

    /// Zero every linear weight and bias (norm affines stay identity).
    /// Test helper for degenerate-model contracts.
    pub fn zero_non_norm_params(&mut self) {
        for p in self.params.iter_mut() {
            if p.name.ends_with(".gain") || p.name.ends_with(".bias") {
                continue;
            }
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Tape-resident copies of the model parameters for one forward pass.
pub struct TapeParams {
    ids: Vec<TensorId>,
}

impl TapeParams {
    pub fn get(&self, id: ParamId) -> TensorId {
        self.ids[id.0]
    }
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// Boolean attention mask; `true` means the position may be attended.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> AttentionMask {
        AttentionMask {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask for decoder self-attention.
    pub fn causal(n: usize) -> AttentionMask {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        AttentionMask {
            rows: n,
            cols: n,
            allow,
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }
}

/// Block-banded encoder mask: frame `t` in central chunk `n = t / c` may
/// attend frames in `[n*c - l, (n+1)*c - 1 + r]`, clipped to `[0, T)`.
pub fn build_chunk_mask(
    t_frames: usize,
    central: usize,
    left: usize,
    right: usize,
) -> Result<AttentionMask> {
    if central < 1 {
        return Err(Error::Contract(
            "build_chunk_mask: central chunk size must be >= 1".into(),
        ));
    }
    let mut allow = vec![false; t_frames * t_frames];
    for t in 0..t_frames {
        let n = t / central;
        let lo = (n * central).saturating_sub(left);
        let hi = ((n + 1) * central - 1 + right).min(t_frames.saturating_sub(1));
        for j in lo..=hi.min(t_frames - 1) {
            allow[t * t_frames + j] = true;
        }
    }
    Ok(AttentionMask {
        rows: t_frames,
        cols: t_frames,
        allow,
    })
}

/// First post-subsampling frame index that cannot influence encoder output
/// at frame `t`: one chunk-mask hop per layer, compounded conservatively.
pub fn encoder_lookahead_bound(t: usize, cfg: &ModelConfig) -> usize {
    let c = cfg.chunk_central;
    let r = cfg.chunk_right;
    ((t / c + 1) * c + r) + (cfg.enc_layers - 1) * (c + r)
}

// ---------------------------------------------------------------------------
// Positional encoding and front-end
// ---------------------------------------------------------------------------

/// One row of the sinusoidal absolute positional encoding.
pub fn sinusoid_pe_row(pos: usize, d: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), d);
    for i in 0..d / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = (pos as f64 * freq).sin();
        out[2 * i + 1] = (pos as f64 * freq).cos();
    }
}

/// Sinusoidal absolute positions, row-major `[rows, d]`.
pub fn sinusoid_pe(rows: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; rows * d];
    for pos in 0..rows {
        sinusoid_pe_row(pos, d, &mut pe[pos * d..(pos + 1) * d]);
    }
    pe
}

/// Stack `factor` consecutive frames into one row, zero-padding the tail
/// group. Returns the stacked matrix and its row count ceil(f / factor).
pub fn stack_frames(
    features: &[f64],
    frames: usize,
    d_feat: usize,
    factor: usize,
) -> Result<(Vec<f64>, usize)> {
    if frames == 0 {
        return Err(Error::Data("empty input: zero feature frames".into()));
    }
    debug_assert_eq!(features.len(), frames * d_feat);
    let out_rows = frames.div_ceil(factor);
    let width = d_feat * factor;
    let mut out = vec![0.0; out_rows * width];
    for g in 0..out_rows {
        for s in 0..factor {
            let src = g * factor + s;
            if src < frames {
                out[g * width + s * d_feat..g * width + (s + 1) * d_feat]
                    .copy_from_slice(&features[src * d_feat..(src + 1) * d_feat]);
            }
        }
    }
    Ok((out, out_rows))
}

/// Frame stacking, learned linear projection, and positional encoding.
pub fn subsample_frontend(
    tape: &mut Tape,
    model: &Model,
    tp: &TapeParams,
    features: &[f64],
    frames: usize,
) -> Result<TensorId> {
    let cfg = &model.cfg;
    let (stacked, rows) = stack_frames(features, frames, cfg.d_feat, cfg.subsample_factor)?;
    let width = cfg.d_feat * cfg.subsample_factor;
    let x = tape.leaf(stacked, vec![rows, width], false);
    let x = tape.matmul(x, tp.get(model.front_w))?;
    let x = tape.add_bias(x, tp.get(model.front_b))?;
    let pe = tape.leaf(
        sinusoid_pe(rows, cfg.d_model),
        vec![rows, cfg.d_model],
        false,
    );
    tape.add(x, pe)
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// softmax(Q K^T / sqrt(d_k)) V with a boolean mask; masked positions get
/// -inf energy. A row with no attendable position is a contract error.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    mask: &AttentionMask,
) -> Result<TensorId> {
    let (l, d_k) = (tape.shape(q)[0], tape.shape(q)[1]);
    let t = tape.shape(k)[0];
    if mask.rows != l || mask.cols != t {
        return Err(Error::Dimension {
            op: "scaled_dot_attention",
            lhs: vec![l, t],
            rhs: vec![mask.rows, mask.cols],
        });
    }
    for i in 0..l {
        if !mask.allow[i * t..(i + 1) * t].iter().any(|&a| a) {
            return Err(Error::Contract(format!(
                "scaled_dot_attention: row {i} has no valid attendee"
            )));
        }
    }
    let kt = tape.transpose(k)?;
    let e = tape.matmul(q, kt)?;
    let e = tape.scale(e, 1.0 / (d_k as f64).sqrt());
    let e = tape.mask_fill(e, &mask.allow, f64::NEG_INFINITY)?;
    let w = tape.softmax_rows(e)?;
    tape.matmul(w, v)
}

/// Concat(head_1, ..., head_H) W^O where each head attends over its own
/// d_k-wide slice of the inputs.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: TensorId,
    kv_in: TensorId,
    mask: &AttentionMask,
    p: &MhaParams,
    tp: &TapeParams,
) -> Result<TensorId> {
    let heads = p.wq.len();
    let d_model = tape.shape(q_in)[1];
    let d_k = d_model / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = tape.slice_cols(q_in, h * d_k, d_k)?;
        let ks = tape.slice_cols(kv_in, h * d_k, d_k)?;
        let vs = tape.slice_cols(kv_in, h * d_k, d_k)?;
        let qh = tape.matmul(qs, tp.get(p.wq[h]))?;
        let kh = tape.matmul(ks, tp.get(p.wk[h]))?;
        let vh = tape.matmul(vs, tp.get(p.wv[h]))?;
        outs.push(scaled_dot_attention(tape, qh, kh, vh, mask)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, tp.get(p.wo))
}

/// Position-wise feed-forward network.
pub fn feed_forward(
    tape: &mut Tape,
    x: TensorId,
    p: &FfnParams,
    tp: &TapeParams,
) -> Result<TensorId> {
    let h = tape.matmul(x, tp.get(p.w1))?;
    let h = tape.add_bias(h, tp.get(p.b1))?;
    let h = tape.relu(h);
    let h = tape.matmul(h, tp.get(p.w2))?;
    tape.add_bias(h, tp.get(p.b2))
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Encoder outputs: T x d_model, the keys/values of every cross-attention.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub t: usize,
    pub d_model: usize,
    pub data: Vec<f64>,
}

impl EncoderStates {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.d_model..(j + 1) * self.d_model]
    }
}

/// Full encoder stack on a tape: front-end, chunk-masked self-attention and
/// FFN sublayers with pre-norm residuals, final normalisation.
pub fn encode(
    tape: &mut Tape,
    model: &Model,
    tp: &TapeParams,
    features: &[f64],
    frames: usize,
) -> Result<TensorId> {
    let cfg = &model.cfg;
    let mut x = subsample_frontend(tape, model, tp, features, frames)?;
    let t = tape.shape(x)[0];
    let mask = build_chunk_mask(t, cfg.chunk_central, cfg.chunk_left, cfg.chunk_right)?;
    for layer in &model.enc {
        let n1 = tape.layer_norm(
            x,
            tp.get(layer.norm1.gain),
            tp.get(layer.norm1.bias),
            NORM_EPS,
        )?;
        let a = multi_head_attention(tape, n1, n1, &mask, &layer.attn, tp)?;
        x = tape.add(x, a)?;
        let n2 = tape.layer_norm(
            x,
            tp.get(layer.norm2.gain),
            tp.get(layer.norm2.bias),
            NORM_EPS,
        )?;
        let f = feed_forward(tape, n2, &layer.ffn, tp)?;
        x = tape.add(x, f)?;
    }
    tape.layer_norm(
        x,
        tp.get(model.enc_norm.gain),
        tp.get(model.enc_norm.bias),
        NORM_EPS,
    )
}

/// Convenience: run the encoder without gradient tracking and extract the
/// states for streaming decode.
pub fn encode_states(model: &Model, features: &[f64], frames: usize) -> Result<EncoderStates> {
    let mut tape = Tape::new();
    let tp = model.insert_params(&mut tape, false);
    let out = encode(&mut tape, model, &tp, features, frames)?;
    Ok(EncoderStates {
        t: tape.shape(out)[0],
        d_model: tape.shape(out)[1],
        data: tape.data(out).to_vec(),
    })
}

/// Layer-normalise one row vector with the model's shared epsilon.
pub fn norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm_row(x, gain, bias, NORM_EPS, &mut out);
    out
}
