//! Teacher-forced training: label-smoothed cross-entropy, the Noam learning
//! rate schedule, adaptive-moment updates with global-norm clipping, and a
//! step-resumable trainer whose state round-trips through checkpoints
//! bit-exactly.
//!
//! Determinism contract: a run that saves a checkpoint at step k and keeps
//! going behaves identically to a run resumed from that checkpoint. `save`
//! therefore canonicalises the live f64 state through the checkpoint's f32
//! storage precision, and the per-epoch shuffle order is a pure function of
//! (seed, epoch) rather than of the live generator.

use crate::checkpoint::{self, CheckpointData, NamedTensor};
use crate::config::{HaltingMode, RunConfig};
use crate::data::Dataset;
use crate::decoder::{DecodeConfig, DecodeSession};
use crate::error::{Error, Result};
use crate::halting::{train_attention, HaltResult, HaltingProbs, TruncationMode};
use crate::rng::Rng;
use crate::tensor::{Tape, TensorId};
use crate::transformer::{
    encode, feed_forward, multi_head_attention, sinusoid_pe, AttentionMask, Model, TapeParams, EOS,
    NORM_EPS, SOS,
};

/// Cross-attention halting record for one decoder layer of one sequence.
pub struct CrossTrace {
    pub probs: Vec<HaltingProbs>,
    pub halts: Vec<Vec<HaltResult>>,
}

/// Vectorised decoder forward under teacher forcing.
pub struct TeacherForcedOutput {
    /// `L x vocab` logits, one row per decoder input position.
    pub logits: TensorId,
    /// Per decoder layer, the halting trace (empty in offline mode).
    pub cross: Vec<CrossTrace>,
}

/// Full-sequence decoder forward: causal self-attention over the prefix,
/// cross-attention per the halting mode with the whole encoder sequence
/// exposed (the look-ahead cap M is a pure inference constraint), FFN, final
/// norm, output projection.
pub fn teacher_forced_forward(
    tape: &mut Tape,
    model: &Model,
    tp: &TapeParams,
    enc: TensorId,
    tokens: &[usize],
    mode: HaltingMode,
    threshold: f64,
) -> Result<TeacherForcedOutput> {
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let d_k = cfg.d_k();
    let l = tokens.len();
    if l == 0 {
        return Err(Error::Contract(
            "teacher_forced_forward: empty prefix".into(),
        ));
    }
    let t = tape.shape(enc)[0];

    let emb = tape.embedding(tp.get(model.embed), tokens)?;
    let emb = tape.scale(emb, (d as f64).sqrt());
    let pe = tape.leaf(sinusoid_pe(l, d), vec![l, d], false);
    let mut x = tape.add(emb, pe)?;
    let causal = AttentionMask::causal(l);

    let mut cross = Vec::new();
    for layer in &model.dec {
        let n1 = tape.layer_norm(
            x,
            tp.get(layer.norm1.gain),
            tp.get(layer.norm1.bias),
            NORM_EPS,
        )?;
        let sa = multi_head_attention(tape, n1, n1, &causal, &layer.self_attn, tp)?;
        x = tape.add(x, sa)?;

        let n2 = tape.layer_norm(
            x,
            tp.get(layer.norm2.gain),
            tp.get(layer.norm2.bias),
            NORM_EPS,
        )?;
        let ca = match mode {
            HaltingMode::Offline => {
                let full = AttentionMask::full(l, t);
                multi_head_attention(tape, n2, enc, &full, &layer.cross_attn, tp)?
            }
            HaltingMode::Dacs | HaltingMode::HsDacs => {
                let trunc = if mode == HaltingMode::Dacs {
                    TruncationMode::Dacs
                } else {
                    TruncationMode::HsDacs
                };
                let mut qs = Vec::with_capacity(cfg.heads);
                let mut ks = Vec::with_capacity(cfg.heads);
                let mut vs = Vec::with_capacity(cfg.heads);
                for h in 0..cfg.heads {
                    let qsl = tape.slice_cols(n2, h * d_k, d_k)?;
                    qs.push(tape.matmul(qsl, tp.get(layer.cross_attn.wq[h]))?);
                    let ksl = tape.slice_cols(enc, h * d_k, d_k)?;
                    ks.push(tape.matmul(ksl, tp.get(layer.cross_attn.wk[h]))?);
                    let vsl = tape.slice_cols(enc, h * d_k, d_k)?;
                    vs.push(tape.matmul(vsl, tp.get(layer.cross_attn.wv[h]))?);
                }
                let ta = train_attention(tape, &qs, &ks, &vs, trunc, threshold)?;
                let cat = tape.concat_cols(&ta.contexts)?;
                cross.push(CrossTrace {
                    probs: ta.probs,
                    halts: ta.halts,
                });
                tape.matmul(cat, tp.get(layer.cross_attn.wo))?
            }
        };
        x = tape.add(x, ca)?;

        let n3 = tape.layer_norm(
            x,
            tp.get(layer.norm3.gain),
            tp.get(layer.norm3.bias),
            NORM_EPS,
        )?;
        let ff = feed_forward(tape, n3, &layer.ffn, tp)?;
        x = tape.add(x, ff)?;
    }

    let fin = tape.layer_norm(
        x,
        tp.get(model.dec_norm.gain),
        tp.get(model.dec_norm.bias),
        NORM_EPS,
    )?;
    let logits = tape.matmul(fin, tp.get(model.out_w))?;
    let logits = tape.add_bias(logits, tp.get(model.out_b))?;
    Ok(TeacherForcedOutput { logits, cross })
}

/// Cross-entropy against the smoothed distribution that puts 1-eps on the
/// target and eps/(V-1) on every other class; mean over the rows.
pub fn label_smoothed_ce(
    tape: &mut Tape,
    logits: TensorId,
    targets: &[usize],
    eps: f64,
) -> Result<TensorId> {
    let shape = tape.shape(logits).to_vec();
    let (rows, v) = (shape[0], shape[1]);
    if targets.len() != rows {
        return Err(Error::Contract(format!(
            "label_smoothed_ce: {} targets for {} logit rows",
            targets.len(),
            rows
        )));
    }
    let mut dist = vec![0.0; rows * v];
    let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
    for (i, &tgt) in targets.iter().enumerate() {
        if tgt >= v {
            return Err(Error::Data(format!(
                "target token {tgt} out of range 0..{v}"
            )));
        }
        for j in 0..v {
            dist[i * v + j] = if j == tgt { 1.0 - eps } else { off };
        }
    }
    let dist = tape.leaf(dist, vec![rows, v], false);
    let lsm = tape.log_softmax_rows(logits)?;
    let prod = tape.mul(dist, lsm)?;
    let total = tape.sum_all(prod);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Noam schedule: base * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
pub fn noam_lr(step: usize, warmup: usize, d_model: usize, base: f64) -> f64 {
    debug_assert!(step >= 1);
    let s = step as f64;
    let w = warmup as f64;
    base * (d_model as f64).powf(-0.5) * f64::min(s.powf(-0.5), s * w.powf(-1.5))
}

/// Adaptive-moment optimiser state, one moment pair per parameter tensor.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: usize,
}

impl Adam {
    pub fn new(model: &Model) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: model
                .params
                .iter()
                .map(|p| vec![0.0; p.data.len()])
                .collect(),
            v: model
                .params
                .iter()
                .map(|p| vec![0.0; p.data.len()])
                .collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, g) in grads.iter().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let data = &mut model.params[pi].data;
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Round every value through f32 storage precision, in place. Applied on
/// save so the live state equals the reloaded state exactly.
fn quantize(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// Step-resumable training loop.
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub rng: Rng,
    pub step: usize,
    pub run_cfg: RunConfig,
    pub dataset: Dataset,
}

const SHUFFLE_SALT: u64 = 0x5348_5546_464C_4531;

impl Trainer {
    pub fn new(run_cfg: RunConfig) -> Result<Trainer> {
        run_cfg.validate()?;
        let model = Model::new(run_cfg.model.clone())?;
        let opt = Adam::new(&model);
        let rng = Rng::new(run_cfg.train.seed);
        let dataset = Dataset::new(run_cfg.data.clone())?;
        Ok(Trainer {
            model,
            opt,
            rng,
            step: 0,
            run_cfg,
            dataset,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.run_cfg.train.train_samples;
        let b = self.run_cfg.train.batch_size;
        n.div_ceil(b)
    }

    /// Warm-start: copy parameter values from another run's checkpoint.
    /// The parameter set is identical across halting modes, so an offline
    /// model can seed a halting-mode run. Optimiser state, step counter, and
    /// schedule all start fresh.
    pub fn init_params_from(&mut self, path: &std::path::Path) -> Result<()> {
        let data = checkpoint::load_file(path)?;
        if data.tensors.len() != self.model.params.len() {
            return Err(Error::Checkpoint(format!(
                "init checkpoint has {} tensors, model needs {}",
                data.tensors.len(),
                self.model.params.len()
            )));
        }
        for (p, t) in self.model.params.iter_mut().zip(&data.tensors) {
            if p.name != t.name || p.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "init parameter mismatch: expected {} {:?}, found {} {:?}",
                    p.name, p.shape, t.name, t.shape
                )));
            }
            p.data = t.values.iter().map(|&v| v as f64).collect();
        }
        Ok(())
    }

    /// Sample visit order for one epoch; a pure function of (seed, epoch) so
    /// a resumed run rebuilds it without replaying earlier epochs.
    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.run_cfg.train.train_samples).collect();
        let mut rng = Rng::for_stream(self.run_cfg.train.seed ^ SHUFFLE_SALT, epoch as u64);
        rng.shuffle(&mut order);
        order
    }

    /// One optimiser step over the next batch. Returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        let pos = self.step % spe;
        let order = self.epoch_order(epoch);
        let b = self.run_cfg.train.batch_size;
        let lo = pos * b;
        let hi = (lo + b).min(order.len());
        let indices = &order[lo..hi];

        let mode = self.run_cfg.model.halting_mode;
        let threshold = self.run_cfg.effective_threshold();
        let eps = self.run_cfg.model.label_smoothing;

        let mut tape = Tape::new();
        let tp = self.model.insert_params(&mut tape, true);
        let mut losses = Vec::with_capacity(indices.len());
        for &idx in indices {
            let sample = self.dataset.sample(idx as u64);
            let enc = encode(&mut tape, &self.model, &tp, &sample.features, sample.frames)?;
            let mut tokens_in = Vec::with_capacity(sample.target.len() + 1);
            tokens_in.push(SOS);
            tokens_in.extend_from_slice(&sample.target);
            let mut targets_out = sample.target.clone();
            targets_out.push(EOS);
            let fwd = teacher_forced_forward(
                &mut tape,
                &self.model,
                &tp,
                enc,
                &tokens_in,
                mode,
                threshold,
            )?;
            losses.push(label_smoothed_ce(&mut tape, fwd.logits, &targets_out, eps)?);
        }
        let mut total = losses[0];
        for &extra in &losses[1..] {
            total = tape.add(total, extra)?;
        }
        let loss = tape.scale(total, 1.0 / indices.len() as f64);
        let loss_val = tape.data(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step: self.step });
        }
        tape.backward(loss)?;

        let mut grads: Vec<Vec<f64>> = self
            .model
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                tape.grad(tp.get(crate::transformer::ParamId(i)))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.data.len()])
            })
            .collect();
        clip_gradients(&mut grads, self.run_cfg.train.grad_clip_norm);
        let lr = noam_lr(
            self.step + 1,
            self.run_cfg.train.warmup_steps,
            self.run_cfg.model.d_model,
            self.run_cfg.train.base_lr,
        );
        self.opt.step(&mut self.model, &grads, lr);
        self.step += 1;
        Ok(loss_val)
    }

    /// Run one epoch from the current step; returns the mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let spe = self.steps_per_epoch();
        let mut sum = 0.0;
        for _ in 0..spe {
            sum += self.train_step()?;
        }
        Ok(sum / spe as f64)
    }

    /// Train for the configured number of epochs; returns per-epoch losses.
    pub fn train(&mut self) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.run_cfg.train.epochs);
        for _ in 0..self.run_cfg.train.epochs {
            losses.push(self.run_epoch()?);
        }
        Ok(losses)
    }

    /// Write a checkpoint. Canonicalises the live state through storage
    /// precision first, so continuing this run equals resuming from the file.
    pub fn save(&mut self, path: &std::path::Path) -> Result<()> {
        for p in self.model.params.iter_mut() {
            quantize(&mut p.data);
        }
        for m in self.opt.m.iter_mut() {
            quantize(m);
        }
        for v in self.opt.v.iter_mut() {
            quantize(v);
        }
        let tensors: Vec<NamedTensor> = self
            .model
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.data.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let mut moments = Vec::with_capacity(self.model.params.len() * 2);
        for (i, p) in self.model.params.iter().enumerate() {
            moments.push(NamedTensor {
                name: format!("adam.m.{}", p.name),
                shape: p.shape.clone(),
                values: self.opt.m[i].iter().map(|&v| v as f32).collect(),
            });
            moments.push(NamedTensor {
                name: format!("adam.v.{}", p.name),
                shape: p.shape.clone(),
                values: self.opt.v[i].iter().map(|&v| v as f32).collect(),
            });
        }
        let data = CheckpointData {
            version: checkpoint::FORMAT_VERSION,
            config_text: self.run_cfg.to_text(),
            tensors,
            moments,
            rng_state: self.rng.state(),
            step: self.step as u64,
        };
        checkpoint::save_file(path, &data)
    }

    /// Rebuild a trainer from a checkpoint file, bit-exactly.
    pub fn load(path: &std::path::Path) -> Result<Trainer> {
        Trainer::from_checkpoint_data(checkpoint::load_file(path)?)
    }

    /// Rebuild a trainer from parsed checkpoint contents.
    pub fn from_checkpoint_data(data: CheckpointData) -> Result<Trainer> {
        let run_cfg = RunConfig::parse(&data.config_text)?;
        let mut model = Model::new(run_cfg.model.clone())?;
        if data.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                data.tensors.len()
            )));
        }
        for (p, t) in model.params.iter_mut().zip(&data.tensors) {
            if p.name != t.name || p.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    p.name, p.shape, t.name, t.shape
                )));
            }
            p.data = t.values.iter().map(|&v| v as f64).collect();
        }
        let mut opt = Adam::new(&model);
        if data.moments.len() != 2 * model.params.len() {
            return Err(Error::Checkpoint("moment tensor count mismatch".into()));
        }
        for (i, pair) in data.moments.chunks(2).enumerate() {
            opt.m[i] = pair[0].values.iter().map(|&v| v as f64).collect();
            opt.v[i] = pair[1].values.iter().map(|&v| v as f64).collect();
        }
        opt.t = data.step as usize;
        let dataset = Dataset::new(run_cfg.data.clone())?;
        Ok(Trainer {
            model,
            opt,
            rng: Rng::from_state(data.rng_state),
            step: data.step as usize,
            run_cfg,
            dataset,
        })
    }
}

/// A finite-difference audit of the whole gradient path, including the
/// truncated monotonic attention. Used by the `grad-check` CLI command.
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub median_rel_err: f64,
}

/// Build a miniature model (2 decoder layers, 2 heads) and compare every
/// parameter's analytic gradient against central finite differences.
pub fn grad_check(mode: HaltingMode) -> Result<GradCheckReport> {
    let run_cfg = {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("d_model", "8"),
            ("heads", "2"),
            ("enc_layers", "1"),
            ("dec_layers", "2"),
            ("d_ffn", "12"),
            ("vocab_size", "7"),
            ("subsample_factor", "2"),
            ("d_feat", "4"),
            ("chunk_central", "2"),
            ("chunk_left", "2"),
            ("chunk_right", "2"),
            ("model_seed", "17"),
            ("data_vocab", "5"),
            ("len_min", "3"),
            ("len_max", "3"),
            ("dur_min", "2"),
            ("dur_max", "3"),
            ("label_smoothing", "0.1"),
        ] {
            c.set(k, v)?;
        }
        c.finish();
        c
    };
    let model = Model::new(run_cfg.model.clone())?;
    let dataset = Dataset::new(run_cfg.data.clone())?;
    let sample = dataset.sample(0);
    let threshold = match mode {
        HaltingMode::Dacs => 1.0,
        _ => run_cfg.model.heads as f64,
    };
    let mut tokens_in = vec![SOS];
    tokens_in.extend_from_slice(&sample.target);
    let mut targets = sample.target.clone();
    targets.push(EOS);

    let loss_of = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let tp = m.insert_params(&mut tape, false);
        let enc = encode(&mut tape, m, &tp, &sample.features, sample.frames)?;
        let fwd = teacher_forced_forward(&mut tape, m, &tp, enc, &tokens_in, mode, threshold)?;
        let loss = label_smoothed_ce(&mut tape, fwd.logits, &targets, 0.1)?;
        Ok(tape.data(loss)[0])
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let tp = model.insert_params(&mut tape, true);
    let enc = encode(&mut tape, &model, &tp, &sample.features, sample.frames)?;
    let fwd = teacher_forced_forward(&mut tape, &model, &tp, enc, &tokens_in, mode, threshold)?;
    let loss = label_smoothed_ce(&mut tape, fwd.logits, &targets, 0.1)?;
    tape.backward(loss)?;

    let h = 1e-5;
    let mut rels = Vec::new();
    for (pi, p) in model.params.iter().enumerate() {
        let analytic = tape
            .grad(tp.get(crate::transformer::ParamId(pi)))
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; p.data.len()]);
        for (ei, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.params[pi].data[ei] += h;
            let mut minus = model.clone();
            minus.params[pi].data[ei] -= h;
            let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            rels.push((a - numeric).abs() / denom);
        }
    }
    rels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(GradCheckReport {
        checked: rels.len(),
        max_rel_err: *rels.last().unwrap(),
        median_rel_err: rels[rels.len() / 2],
    })
}

/// Convenience used by the CLI and tests: build a trainer, run all epochs,
/// save the checkpoint, return the trainer and the per-epoch losses.
pub fn train_full(run_cfg: RunConfig) -> Result<(Trainer, Vec<f64>)> {
    let mut trainer = Trainer::new(run_cfg)?;
    let losses = trainer.train()?;
    let path = std::path::PathBuf::from(&trainer.run_cfg.train.checkpoint_path);
    trainer.save(&path)?;
    Ok((trainer, losses))
}

/// Greedy-decode one utterance with the model's own config. Shared by the
/// evaluation module and tests.
pub fn decode_sample_distributions(
    model: &Model,
    enc_states: &crate::transformer::EncoderStates,
    dcfg: &DecodeConfig,
    forced: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut session = DecodeSession::new(model, enc_states, dcfg.clone());
    let mut out = Vec::new();
    for &tok in forced {
        out.push(session.step()?);
        session.push_token(tok);
    }
    out.push(session.step()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_run_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("d_model", "16"),
            ("heads", "2"),
            ("enc_layers", "1"),
            ("dec_layers", "1"),
            ("d_ffn", "32"),
            ("vocab_size", "10"),
            ("subsample_factor", "2"),
            ("d_feat", "6"),
            ("chunk_central", "4"),
            ("chunk_left", "4"),
            ("chunk_right", "4"),
            ("data_vocab", "8"),
            ("len_min", "3"),
            ("len_max", "6"),
            ("dur_min", "2"),
            ("dur_max", "3"),
            ("train_samples", "8"),
            ("batch_size", "4"),
            ("epochs", "1"),
            ("warmup_steps", "10"),
        ] {
            c.set(k, v).unwrap();
        }
        c.finish();
        c
    }

    #[test]
    fn ce_of_confident_correct_prediction_vanishes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![100.0, 0.0, 0.0, 0.0], vec![1, 4], false);
        let loss = label_smoothed_ce(&mut tape, logits, &[0], 0.0).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-12);
    }

    #[test]
    fn ce_of_uniform_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0; 2 * 5], vec![2, 5], false);
        let loss = label_smoothed_ce(&mut tape, logits, &[1, 4], 0.0).unwrap();
        assert!((tape.data(loss)[0] - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_direct_formula_with_smoothing() {
        let mut tape = Tape::new();
        let raw = vec![0.3, -0.7, 1.1, 0.2];
        let logits = tape.leaf(raw.clone(), vec![1, 4], false);
        let eps = 0.1;
        let loss = label_smoothed_ce(&mut tape, logits, &[2], eps).unwrap();
        // Direct formula oracle.
        let maxv = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = maxv + raw.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
        let mut expect = 0.0;
        for (j, &v) in raw.iter().enumerate() {
            let q = if j == 2 { 1.0 - eps } else { eps / 3.0 };
            expect -= q * (v - lse);
        }
        assert!((tape.data(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0; 4], vec![1, 4], false);
        assert!(label_smoothed_ce(&mut tape, logits, &[4], 0.0).is_err());
    }

    #[test]
    fn noam_crossover_at_warmup() {
        let w = 300;
        let at = noam_lr(w, w, 64, 1.0);
        let both = (64f64).powf(-0.5) * (w as f64).powf(-0.5);
        assert!((at - both).abs() < 1e-15);
        // And the paper-scale spot value: warmup 25000, d_model 256.
        let v = noam_lr(25000, 25000, 256, 1.0);
        assert!((v - 3.953e-4).abs() < 1e-6, "{v}");
    }

    #[test]
    fn noam_rises_then_decays() {
        let w = 50;
        for s in 1..w {
            assert!(noam_lr(s, w, 32, 1.0) < noam_lr(s + 1, w, 32, 1.0));
        }
        for s in w..(2 * w) {
            assert!(noam_lr(s, w, 32, 1.0) > noam_lr(s + 1, w, 32, 1.0));
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut cfg = toy_run_cfg();
        cfg.set("base_lr", "0.0").unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();
        let before: Vec<Vec<f64>> = trainer
            .model
            .params
            .iter()
            .map(|p| p.data.clone())
            .collect();
        trainer.run_epoch().unwrap();
        for (p, b) in trainer.model.params.iter().zip(&before) {
            assert_eq!(&p.data, b, "{} moved under lr 0", p.name);
        }
    }

    #[test]
    fn every_parameter_gets_gradient_signal() {
        for mode in ["dacs", "hsdacs"] {
            let mut cfg = toy_run_cfg();
            cfg.set("halting_mode", mode).unwrap();
            let trainer = Trainer::new(cfg).unwrap();
            let model = &trainer.model;
            let mut tape = Tape::new();
            let tp = model.insert_params(&mut tape, true);
            let sample = trainer.dataset.sample(0);
            let enc = encode(&mut tape, model, &tp, &sample.features, sample.frames).unwrap();
            let mut tokens_in = vec![SOS];
            tokens_in.extend_from_slice(&sample.target);
            let mut targets = sample.target.clone();
            targets.push(EOS);
            let fwd = teacher_forced_forward(
                &mut tape,
                model,
                &tp,
                enc,
                &tokens_in,
                trainer.run_cfg.model.halting_mode,
                trainer.run_cfg.effective_threshold(),
            )
            .unwrap();
            let loss = label_smoothed_ce(&mut tape, fwd.logits, &targets, 0.1).unwrap();
            tape.backward(loss).unwrap();
            for (i, p) in model.params.iter().enumerate() {
                let g = tape.grad(tp.get(crate::transformer::ParamId(i)));
                let nonzero = g.map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false);
                assert!(
                    nonzero,
                    "parameter {} got no gradient in mode {mode}",
                    p.name
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut t = Trainer::new(toy_run_cfg()).unwrap();
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.push(t.train_step().unwrap());
            }
            (losses, t.model.params[0].data.clone())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("hsdacs-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("resume.ckpt");

        // Run A: 2 steps, save, 1 more step.
        let mut a = Trainer::new(toy_run_cfg()).unwrap();
        a.train_step().unwrap();
        a.train_step().unwrap();
        a.save(&path).unwrap();
        let loss_a = a.train_step().unwrap();

        // Run B: resume from the file, 1 step.
        let mut b = Trainer::load(&path).unwrap();
        assert_eq!(b.step, 2);
        let loss_b = b.train_step().unwrap();

        assert_eq!(loss_a, loss_b);
        for (pa, pb) in a.model.params.iter().zip(&b.model.params) {
            assert_eq!(pa.data, pb.data, "{} diverged after resume", pa.name);
        }
        for (ma, mb) in a.opt.m.iter().zip(&b.opt.m) {
            assert_eq!(ma, mb);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn single_sample_overfit_converges() {
        let mut cfg = toy_run_cfg();
        cfg.set("train_samples", "1").unwrap();
        cfg.set("batch_size", "1").unwrap();
        cfg.set("warmup_steps", "30").unwrap();
        cfg.set("label_smoothing", "0.0").unwrap();
        cfg.set("halting_mode", "hsdacs").unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            last = trainer.train_step().unwrap();
            if last < 0.01 {
                break;
            }
        }
        assert!(last < 0.01, "single-sample loss stuck at {last}");
    }

    #[test]
    fn padded_batch_loss_equals_mean_of_per_sample_losses() {
        let cfg = toy_run_cfg();
        let trainer = Trainer::new(cfg.clone()).unwrap();
        let model = &trainer.model;
        let samples: Vec<_> = (0..3).map(|i| trainer.dataset.sample(i)).collect();
        let batch = crate::data::pad_batch(&samples).unwrap();

        let loss_of_sample = |feats: &[f64], frames: usize, target: &[usize]| -> f64 {
            let mut tape = Tape::new();
            let tp = model.insert_params(&mut tape, false);
            let enc = encode(&mut tape, model, &tp, feats, frames).unwrap();
            let mut tin = vec![SOS];
            tin.extend_from_slice(target);
            let mut tout = target.to_vec();
            tout.push(EOS);
            let fwd =
                teacher_forced_forward(&mut tape, model, &tp, enc, &tin, HaltingMode::HsDacs, 2.0)
                    .unwrap();
            let l = label_smoothed_ce(&mut tape, fwd.logits, &tout, 0.1).unwrap();
            tape.data(l)[0]
        };

        // Batch-path loss: mean over rows of the padded batch, each sliced
        // to its true length.
        let mut batch_losses = Vec::new();
        for bi in 0..batch.size {
            let target = batch.sample_target(bi);
            batch_losses.push(loss_of_sample(
                batch.sample_features(bi),
                batch.feature_lens[bi],
                &target,
            ));
        }
        let batch_loss: f64 = batch_losses.iter().sum::<f64>() / batch.size as f64;

        // Per-sample oracle on the originals.
        let indiv: f64 = samples
            .iter()
            .map(|s| loss_of_sample(&s.features, s.frames, &s.target))
            .sum::<f64>()
            / samples.len() as f64;
        assert!((batch_loss - indiv).abs() < 1e-9);
    }
}
