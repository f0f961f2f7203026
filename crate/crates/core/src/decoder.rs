//! Online inference: the step loop over the decoder stack with monotonic
//! halting, the exposed-boundary bookkeeping, greedy and beam search, and
//! per-decode trace capture.
//!
//! A `DecodeSession` owns everything one hypothesis needs: the per-head
//! projected encoder keys/values (computed once per utterance; the projection
//! does not depend on the step, so caching it is bit-identical to
//! recomputing), the per-layer hidden-state history, the halting state, and
//! the trace. Each output step recomputes cross-attention energies for the
//! current window from scratch and advances the exposed boundary to the
//! furthest frame any head or layer consumed, never backwards.
//!
//! All row math goes through `tensor::kernels`, so a step-wise decode and the
//! vectorised teacher-forced forward produce bit-identical states on the same
//! weights.

use crate::config::{HaltingMode, ModelConfig};
use crate::error::{Error, Result};
use crate::halting::{dacs_halt, hs_dacs_halt, truncated_context, HaltReason};
use crate::tensor::kernels;
use crate::transformer::{norm_row, sinusoid_pe_row, EncoderStates, MhaParams, Model, EOS, SOS};

/// Per-output-step decoder bookkeeping: the exposed boundary and the last
/// halting position of each layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HaltingState {
    /// Last unified halting boundary, in consumed frames. Starts at 0 and
    /// never decreases: frames already consumed cannot be un-consumed.
    pub t_prev: usize,
    /// Halting position reached by each decoder layer at the last step.
    pub per_layer_n: Vec<usize>,
    /// Output step index (number of steps taken so far).
    pub step: usize,
}

impl HaltingState {
    fn new(dec_layers: usize) -> Self {
        HaltingState {
            t_prev: 0,
            per_layer_n: vec![0; dec_layers],
            step: 0,
        }
    }
}

/// Halting record for one (step, layer): probabilities over the window per
/// head, the per-head halting positions, and why each halted.
#[derive(Debug, Clone)]
pub struct LayerStepTrace {
    /// `heads x window_len` halting probabilities.
    pub probs: Vec<Vec<f64>>,
    /// Adaptive computation steps consumed by each head. Identical across
    /// heads in hsdacs mode.
    pub s: Vec<usize>,
    pub reason: Vec<HaltReason>,
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    pub layers: Vec<LayerStepTrace>,
    /// Unified boundary after this step.
    pub t: usize,
}

/// Full record of a decode: everything the coverage ratio and the alignment
/// export need.
#[derive(Debug, Clone, Default)]
pub struct DecodeTrace {
    pub steps: Vec<StepTrace>,
    /// Post-subsampling encoder length T.
    pub enc_len: usize,
}

impl DecodeTrace {
    /// t_i per step.
    pub fn boundaries(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.t).collect()
    }
}

/// Runtime decode knobs; these can override the checkpointed model config.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub mode: HaltingMode,
    /// Per-head threshold in dacs mode, joint threshold in hsdacs mode.
    pub threshold: f64,
    pub max_lookahead: usize,
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        DecodeConfig {
            mode: cfg.halting_mode,
            threshold: match cfg.halting_mode {
                HaltingMode::Dacs => cfg.dacs_threshold,
                _ => cfg.joint_threshold,
            },
            max_lookahead: cfg.max_lookahead,
            max_len: 64,
        }
    }
}

/// Per-head projected encoder keys and values for every decoder layer,
/// computed once per utterance.
struct EncProjections {
    /// `[layer][head]` key matrices, `T x d_k` each.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    t: usize,
}

fn project_encoder(model: &Model, enc: &EncoderStates) -> EncProjections {
    let cfg = &model.cfg;
    let d_k = cfg.d_k();
    let t = enc.t;
    let mut keys = Vec::with_capacity(cfg.dec_layers);
    let mut values = Vec::with_capacity(cfg.dec_layers);
    for layer in &model.dec {
        let mut lk = Vec::with_capacity(cfg.heads);
        let mut lv = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let wk = &model.param(layer.cross_attn.wk[h]).data;
            let wv = &model.param(layer.cross_attn.wv[h]).data;
            let mut kh = vec![0.0; t * d_k];
            let mut vh = vec![0.0; t * d_k];
            for j in 0..t {
                let slice = &enc.row(j)[h * d_k..(h + 1) * d_k];
                kernels::matvec_into(slice, wk, d_k, &mut kh[j * d_k..(j + 1) * d_k]);
                kernels::matvec_into(slice, wv, d_k, &mut vh[j * d_k..(j + 1) * d_k]);
            }
            lk.push(kh);
            lv.push(vh);
        }
        keys.push(lk);
        values.push(lv);
    }
    EncProjections { keys, values, t }
}

/// One decoding hypothesis in flight: layer-input history, halting state,
/// and trace. Clone to branch a hypothesis in beam search.
#[derive(Clone)]
pub struct DecodeSession<'m> {
    model: &'m Model,
    enc: std::rc::Rc<EncProjections>,
    /// `layer_inputs[l][p]` = input vector of decoder layer `l` at position
    /// `p`; index `dec_layers` holds the final-layer outputs.
    layer_inputs: Vec<Vec<Vec<f64>>>,
    tokens: Vec<usize>,
    state: HaltingState,
    trace: DecodeTrace,
    cfg: DecodeConfig,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model, enc: &EncoderStates, cfg: DecodeConfig) -> Self {
        let dec_layers = model.cfg.dec_layers;
        let mut s = DecodeSession {
            model,
            enc: std::rc::Rc::new(project_encoder(model, enc)),
            layer_inputs: vec![Vec::new(); dec_layers + 1],
            tokens: Vec::new(),
            state: HaltingState::new(dec_layers),
            trace: DecodeTrace {
                steps: Vec::new(),
                enc_len: enc.t,
            },
            cfg,
        };
        s.push_token(SOS);
        s
    }

    pub fn state(&self) -> &HaltingState {
        &self.state
    }

    pub fn trace(&self) -> &DecodeTrace {
        &self.trace
    }

    pub fn into_trace(self) -> DecodeTrace {
        self.trace
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Append a token to the prefix. The next `step` call computes the
    /// output distribution conditioned on it.
    pub fn push_token(&mut self, token: usize) {
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        let pos = self.tokens.len();
        self.tokens.push(token);
        let table = &self.model.param(self.model.embed).data;
        let scale = (d as f64).sqrt();
        let mut pe = vec![0.0; d];
        sinusoid_pe_row(pos, d, &mut pe);
        let mut x = vec![0.0; d];
        for i in 0..d {
            x[i] = table[token * d + i] * scale + pe[i];
        }
        self.layer_inputs[0].push(x);
    }

    /// Run one output step: push the newest prefix position through the
    /// decoder stack, halting each layer's cross-attention per the configured
    /// mode, and return the output token distribution.
    pub fn step(&mut self) -> Result<Vec<f64>> {
        if self.tokens.is_empty() {
            return Err(Error::Contract("decode step with empty prefix".into()));
        }
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        let d_k = cfg.d_k();
        let heads = cfg.heads;
        let pos = self.layer_inputs[0].len() - 1;
        let t = self.enc.t;
        if self.state.t_prev > t {
            return Err(Error::Contract(format!(
                "exposed boundary {} beyond encoder length {t}",
                self.state.t_prev
            )));
        }
        // Window end for every layer this step: min(t_prev + M, T) in the
        // halting modes; the offline baseline always sees the whole utterance.
        let window = match self.cfg.mode {
            HaltingMode::Offline => t,
            _ => (self.state.t_prev + self.cfg.max_lookahead).min(t),
        };

        let mut x = self.layer_inputs[0][pos].clone();
        let mut step_layers = Vec::with_capacity(cfg.dec_layers);
        // The boundary can only advance.
        let mut t_new = self.state.t_prev;

        for (l, layer) in self.model.dec.iter().enumerate() {
            // Causal self-attention over the prefix.
            let gain1 = &self.model.param(layer.norm1.gain).data;
            let bias1 = &self.model.param(layer.norm1.bias).data;
            let q_row = norm_row(&x, gain1, bias1);
            let hist: Vec<Vec<f64>> = self.layer_inputs[l][..pos]
                .iter()
                .map(|r| norm_row(r, gain1, bias1))
                .chain(std::iter::once(q_row.clone()))
                .collect();
            let sa = self.self_attention_row(&q_row, &hist, &layer.self_attn, d_k, heads, d);
            for i in 0..d {
                x[i] += sa[i];
            }

            // Monotonic (or offline) cross-attention over the window.
            let gain2 = &self.model.param(layer.norm2.gain).data;
            let bias2 = &self.model.param(layer.norm2.bias).data;
            let y = norm_row(&x, gain2, bias2);
            let (ca, ltrace) = self.cross_attention_row(&y, l, window, d_k, heads, d)?;
            match self.cfg.mode {
                HaltingMode::Offline => {}
                _ => {
                    for &n in &ltrace.s {
                        if n > t_new {
                            t_new = n;
                        }
                    }
                }
            }
            self.state.per_layer_n[l] = *ltrace.s.iter().max().unwrap();
            step_layers.push(ltrace);
            for i in 0..d {
                x[i] += ca[i];
            }

            // Position-wise feed-forward.
            let gain3 = &self.model.param(layer.norm3.gain).data;
            let bias3 = &self.model.param(layer.norm3.bias).data;
            let z = norm_row(&x, gain3, bias3);
            let ff = self.ffn_row(&z, l);
            for i in 0..d {
                x[i] += ff[i];
            }

            self.layer_inputs[l + 1].push(x.clone());
        }

        if self.cfg.mode == HaltingMode::Offline {
            t_new = t;
        }
        self.state.t_prev = t_new;
        self.state.step += 1;
        self.trace.steps.push(StepTrace {
            layers: step_layers,
            t: t_new,
        });

        // Final norm, output projection, softmax.
        let fin = norm_row(
            &x,
            &self.model.param(self.model.dec_norm.gain).data,
            &self.model.param(self.model.dec_norm.bias).data,
        );
        let out_w = &self.model.param(self.model.out_w).data;
        let out_b = &self.model.param(self.model.out_b).data;
        let mut logits = vec![0.0; cfg.vocab_size];
        kernels::matvec_into(&fin, out_w, cfg.vocab_size, &mut logits);
        for (lv, bv) in logits.iter_mut().zip(out_b) {
            *lv += bv;
        }
        let mut dist = vec![0.0; cfg.vocab_size];
        kernels::softmax_row_into(&logits, &mut dist);
        Ok(dist)
    }

    fn self_attention_row(
        &self,
        q_row: &[f64],
        normed_hist: &[Vec<f64>],
        p: &MhaParams,
        d_k: usize,
        heads: usize,
        d: usize,
    ) -> Vec<f64> {
        let n = normed_hist.len();
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut cat = vec![0.0; d];
        for h in 0..heads {
            let wq = &self.model.param(p.wq[h]).data;
            let wk = &self.model.param(p.wk[h]).data;
            let wv = &self.model.param(p.wv[h]).data;
            let mut qh = vec![0.0; d_k];
            kernels::matvec_into(&q_row[h * d_k..(h + 1) * d_k], wq, d_k, &mut qh);
            let mut keys = vec![0.0; n * d_k];
            let mut vals = vec![0.0; n * d_k];
            for (j, row) in normed_hist.iter().enumerate() {
                kernels::matvec_into(
                    &row[h * d_k..(h + 1) * d_k],
                    wk,
                    d_k,
                    &mut keys[j * d_k..(j + 1) * d_k],
                );
                kernels::matvec_into(
                    &row[h * d_k..(h + 1) * d_k],
                    wv,
                    d_k,
                    &mut vals[j * d_k..(j + 1) * d_k],
                );
            }
            let mut e = vec![0.0; n];
            for j in 0..n {
                e[j] = kernels::dot(&qh, &keys[j * d_k..(j + 1) * d_k]) * scale;
            }
            let mut w = vec![0.0; n];
            kernels::softmax_row_into(&e, &mut w);
            let ctx = truncated_context(&w, &vals, d_k);
            cat[h * d_k..(h + 1) * d_k].copy_from_slice(&ctx);
        }
        let wo = &self.model.param(p.wo).data;
        let mut out = vec![0.0; d];
        kernels::matvec_into(&cat, wo, d, &mut out);
        out
    }

    /// Cross-attention for one step at one layer, with halting per the mode.
    fn cross_attention_row(
        &self,
        y: &[f64],
        l: usize,
        window: usize,
        d_k: usize,
        heads: usize,
        d: usize,
    ) -> Result<(Vec<f64>, LayerStepTrace)> {
        let p = &self.model.dec[l].cross_attn;
        let scale = 1.0 / (d_k as f64).sqrt();
        if window == 0 {
            return Err(Error::Contract("cross-attention window is empty".into()));
        }
        // Per-head energies and probabilities over the window.
        let mut probs = Vec::with_capacity(heads);
        let mut energies = Vec::with_capacity(heads);
        for h in 0..heads {
            let wq = &self.model.param(p.wq[h]).data;
            let mut qh = vec![0.0; d_k];
            kernels::matvec_into(&y[h * d_k..(h + 1) * d_k], wq, d_k, &mut qh);
            let keys = &self.enc.keys[l][h];
            let mut e = vec![0.0; window];
            for j in 0..window {
                e[j] = kernels::dot(&qh, &keys[j * d_k..(j + 1) * d_k]) * scale;
            }
            let pr: Vec<f64> = e.iter().map(|&x| kernels::sigmoid(x)).collect();
            energies.push(e);
            probs.push(pr);
        }

        let mut cat = vec![0.0; d];
        let (s, reason) = match self.cfg.mode {
            HaltingMode::Offline => {
                // Softmax attention over the full utterance; every head
                // consumes all T frames.
                let mut weights = Vec::with_capacity(heads);
                for e in &energies {
                    let mut w = vec![0.0; e.len()];
                    kernels::softmax_row_into(e, &mut w);
                    weights.push(w);
                }
                for h in 0..heads {
                    let ctx = truncated_context(&weights[h], &self.enc.values[l][h], d_k);
                    cat[h * d_k..(h + 1) * d_k].copy_from_slice(&ctx);
                }
                probs = weights;
                (vec![window; heads], vec![HaltReason::Window; heads])
            }
            HaltingMode::Dacs => {
                let mut s = Vec::with_capacity(heads);
                let mut reason = Vec::with_capacity(heads);
                for h in 0..heads {
                    let halt = dacs_halt(&probs[h], self.cfg.threshold, window)?;
                    let ctx = truncated_context(&probs[h][..halt.n], &self.enc.values[l][h], d_k);
                    cat[h * d_k..(h + 1) * d_k].copy_from_slice(&ctx);
                    s.push(halt.n);
                    reason.push(halt.reason);
                }
                (s, reason)
            }
            HaltingMode::HsDacs => {
                let halt = hs_dacs_halt(&probs, self.cfg.threshold, window)?;
                for h in 0..heads {
                    let ctx = truncated_context(&probs[h][..halt.n], &self.enc.values[l][h], d_k);
                    cat[h * d_k..(h + 1) * d_k].copy_from_slice(&ctx);
                }
                (vec![halt.n; heads], vec![halt.reason; heads])
            }
        };

        let wo = &self.model.param(p.wo).data;
        let mut out = vec![0.0; d];
        kernels::matvec_into(&cat, wo, d, &mut out);
        Ok((out, LayerStepTrace { probs, s, reason }))
    }

    fn ffn_row(&self, z: &[f64], l: usize) -> Vec<f64> {
        let p = &self.model.dec[l].ffn;
        let w1 = &self.model.param(p.w1).data;
        let b1 = &self.model.param(p.b1).data;
        let w2 = &self.model.param(p.w2).data;
        let b2 = &self.model.param(p.b2).data;
        let d_ffn = b1.len();
        let d = b2.len();
        let mut h = vec![0.0; d_ffn];
        kernels::matvec_into(z, w1, d_ffn, &mut h);
        for (hv, bv) in h.iter_mut().zip(b1) {
            *hv += bv;
            if *hv < 0.0 {
                *hv = 0.0;
            }
        }
        let mut out = vec![0.0; d];
        kernels::matvec_into(&h, w2, d, &mut out);
        for (ov, bv) in out.iter_mut().zip(b2) {
            *ov += bv;
        }
        out
    }
}

/// Argmax with ties broken toward the lower token id, matching the beam
/// search tie-break.
pub fn argmax_token(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate() {
        if v > dist[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode: repeat steps, appending the argmax token, until eos or
/// `max_len` emitted tokens.
pub fn decode_greedy(
    model: &Model,
    enc: &EncoderStates,
    cfg: &DecodeConfig,
) -> Result<(Vec<usize>, DecodeTrace)> {
    if cfg.max_len < 1 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let mut session = DecodeSession::new(model, enc, cfg.clone());
    let mut out = Vec::new();
    loop {
        let dist = session.step()?;
        let tok = argmax_token(&dist);
        if tok == EOS {
            break;
        }
        out.push(tok);
        if out.len() >= cfg.max_len {
            break;
        }
        session.push_token(tok);
    }
    Ok((out, session.into_trace()))
}

/// Streaming replay with a fixed token sequence, returning the per-step
/// output distributions. Used to compare against the teacher-forced
/// vectorised forward and for causality checks.
pub fn decode_forced(
    model: &Model,
    enc: &EncoderStates,
    cfg: &DecodeConfig,
    tokens: &[usize],
) -> Result<(Vec<Vec<f64>>, DecodeTrace)> {
    let mut session = DecodeSession::new(model, enc, cfg.clone());
    let mut dists = Vec::with_capacity(tokens.len() + 1);
    for &tok in tokens {
        dists.push(session.step()?);
        session.push_token(tok);
    }
    dists.push(session.step()?);
    Ok((dists, session.into_trace()))
}

/// A partial output sequence with its log-score and private decode state.
pub struct Hypothesis<'m> {
    /// Emitted tokens (sos excluded, eos excluded).
    pub tokens: Vec<usize>,
    /// Sum of emitted token log-probabilities; non-increasing as tokens are
    /// appended.
    pub log_score: f64,
    pub finished: bool,
    session: DecodeSession<'m>,
}

impl Hypothesis<'_> {
    pub fn halting(&self) -> &HaltingState {
        self.session.state()
    }

    fn normalised(&self, length_penalty: f64) -> f64 {
        let len = self.tokens.len().max(1) as f64;
        self.log_score / len.powf(length_penalty)
    }
}

/// Length-normalised beam search. Every hypothesis carries its own halting
/// state and history; finished hypotheses compete by normalised score with
/// ties broken toward the lexicographically smaller token sequence.
pub fn decode_beam(
    model: &Model,
    enc: &EncoderStates,
    cfg: &DecodeConfig,
    beam_width: usize,
    length_penalty: f64,
) -> Result<(Vec<usize>, DecodeTrace)> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    let mut live: Vec<Hypothesis> = vec![Hypothesis {
        tokens: Vec::new(),
        log_score: 0.0,
        finished: false,
        session: DecodeSession::new(model, enc, cfg.clone()),
    }];
    let mut ended: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        // Expand every live hypothesis by every token.
        let mut dists = Vec::with_capacity(live.len());
        for hyp in live.iter_mut() {
            dists.push(hyp.session.step()?);
        }
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (hi, dist) in dists.iter().enumerate() {
            for (tok, &p) in dist.iter().enumerate() {
                candidates.push((hi, tok, live[hi].log_score + p.ln()));
            }
        }
        // Deterministic order: score descending, then parent, then token id.
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        candidates.truncate(beam_width);

        let mut next: Vec<Hypothesis> = Vec::with_capacity(candidates.len());
        for (hi, tok, score) in candidates {
            let mut child = Hypothesis {
                tokens: live[hi].tokens.clone(),
                log_score: score,
                finished: false,
                session: live[hi].session.clone(),
            };
            if tok == EOS {
                child.finished = true;
                ended.push(child);
            } else {
                child.tokens.push(tok);
                child.session.push_token(tok);
                next.push(child);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    // Hypotheses still alive at the length cap compete as they stand.
    ended.extend(live);

    let best = ended
        .into_iter()
        .max_by(|a, b| {
            a.normalised(length_penalty)
                .partial_cmp(&b.normalised(length_penalty))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| Error::Contract("beam search produced no hypotheses".into()))?;
    Ok((best.tokens, best.session.into_trace()))
}
