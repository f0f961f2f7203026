//! Accumulation-based monotonic attention halting.
//!
//! A monotonic-attention head scores encoder frames left to right with a
//! sigmoid of the scaled dot-product energy; the running sum of those halting
//! probabilities decides how many frames the head consumes:
//!
//! * `dacs_halt` - each head halts on its own once its accumulated mass
//!   strictly exceeds a per-head threshold, or at the window end.
//! * `hs_dacs_halt` - all heads of a layer pool their mass per frame and halt
//!   together once the joint accumulation strictly exceeds a joint threshold
//!   (defaulting to the head count), yielding one boundary per layer.
//!
//! The context vector is the probability-weighted sum of the consumed value
//! rows, with no normalisation, so truncation genuinely discards mass.
//!
//! Summation order is fixed: heads are pooled per frame first (head index
//! ascending), then accumulated frame by frame. The vectorised training-time
//! form reuses these exact functions row by row, which keeps training and
//! step-wise inference bit-identical on the same inputs.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, TensorId};

/// Why a halting decision fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    /// Accumulated mass strictly exceeded the threshold.
    Threshold,
    /// The look-ahead window ran out first.
    Window,
}

/// One halting decision: the 1-based count of consumed frames, why it fired,
/// and the weights actually applied to the context (for DACS the head's own
/// truncated probabilities; for HS-DACS the head-pooled truncated mass).
#[derive(Debug, Clone)]
pub struct HaltResult {
    pub n: usize,
    pub reason: HaltReason,
    pub truncated_weights: Vec<f64>,
}

/// Halting probabilities and raw energies for one decoder layer at one
/// output step: `heads x window` matrices.
#[derive(Debug, Clone)]
pub struct HaltingProbs {
    pub p: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
}

/// Monotonic-attention energies: scaled dot products of the previous decoder
/// state against each encoder key, computable one frame at a time.
pub fn ma_energy(q_prev: &[f64], keys: &[f64], d_k: usize) -> Vec<f64> {
    debug_assert_eq!(q_prev.len(), d_k);
    debug_assert_eq!(keys.len() % d_k, 0);
    let scale = 1.0 / (d_k as f64).sqrt();
    let j = keys.len() / d_k;
    (0..j)
        .map(|i| kernels::dot(q_prev, &keys[i * d_k..(i + 1) * d_k]) * scale)
        .collect()
}

/// Per-head adaptive computation step: first n whose left-to-right cumulative
/// probability mass strictly exceeds `threshold`, else the window end.
pub fn dacs_halt(p: &[f64], threshold: f64, window_end: usize) -> Result<HaltResult> {
    if window_end == 0 || p.is_empty() {
        return Err(Error::Contract("dacs_halt: empty halting window".into()));
    }
    if window_end > p.len() {
        return Err(Error::Contract(format!(
            "dacs_halt: window end {window_end} exceeds probability row length {}",
            p.len()
        )));
    }
    let mut acc = 0.0;
    for n in 1..=window_end {
        acc += p[n - 1];
        if acc > threshold {
            return Ok(HaltResult {
                n,
                reason: HaltReason::Threshold,
                truncated_weights: p[..n].to_vec(),
            });
        }
    }
    Ok(HaltResult {
        n: window_end,
        reason: HaltReason::Window,
        truncated_weights: p[..window_end].to_vec(),
    })
}

/// Head-synchronous adaptive computation step: heads pool their mass per
/// frame; one halting position is shared by all of them.
pub fn hs_dacs_halt(p: &[Vec<f64>], joint_threshold: f64, window_end: usize) -> Result<HaltResult> {
    if p.is_empty() {
        return Err(Error::Contract("hs_dacs_halt: no heads".into()));
    }
    if window_end == 0 || p[0].is_empty() {
        return Err(Error::Contract("hs_dacs_halt: empty halting window".into()));
    }
    if p.iter().any(|row| window_end > row.len()) {
        return Err(Error::Contract(format!(
            "hs_dacs_halt: window end {window_end} exceeds a probability row"
        )));
    }
    let mut acc = 0.0;
    let mut pooled = Vec::with_capacity(window_end);
    for n in 1..=window_end {
        let mut frame = 0.0;
        for head in p {
            frame += head[n - 1];
        }
        pooled.push(frame);
        acc += frame;
        if acc > joint_threshold {
            return Ok(HaltResult {
                n,
                reason: HaltReason::Threshold,
                truncated_weights: pooled,
            });
        }
    }
    Ok(HaltResult {
        n: window_end,
        reason: HaltReason::Window,
        truncated_weights: pooled,
    })
}

/// Eq.-style truncated context: probability-weighted sum of the first N value
/// rows, no normalisation.
pub fn truncated_context(p: &[f64], values: &[f64], d_k: usize) -> Vec<f64> {
    debug_assert!(values.len() >= p.len() * d_k);
    let mut ctx = vec![0.0; d_k];
    for (j, &w) in p.iter().enumerate() {
        let row = &values[j * d_k..(j + 1) * d_k];
        for d in 0..d_k {
            ctx[d] += w * row[d];
        }
    }
    ctx
}

/// Which truncation rule the training-time attention applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationMode {
    /// Independent per-head thresholds.
    Dacs,
    /// Joint threshold over head-pooled mass.
    HsDacs,
}

/// Output of the vectorised training-time monotonic attention for one layer:
/// per-head truncated contexts plus the full halting trace.
pub struct TrainAttention {
    /// Per-head context matrices, each `L x d_k`, on the tape.
    pub contexts: Vec<TensorId>,
    /// Per output row: the `heads x T` probabilities and energies.
    pub probs: Vec<HaltingProbs>,
    /// Per output row, per head: the halting decision applied to it.
    pub halts: Vec<Vec<HaltResult>>,
}

/// Training-time monotonic attention: all halting probabilities are computed
/// in parallel over the full encoder sequence (the look-ahead cap M is not
/// applied), each output row is truncated by its threshold decision, and
/// gradients flow through the retained probabilities only.
pub fn train_attention(
    tape: &mut Tape,
    queries: &[TensorId],
    keys: &[TensorId],
    values: &[TensorId],
    mode: TruncationMode,
    threshold: f64,
) -> Result<TrainAttention> {
    let heads = queries.len();
    if heads == 0 || keys.len() != heads || values.len() != heads {
        return Err(Error::Contract(
            "train_attention: inconsistent head lists".into(),
        ));
    }
    let l = tape.shape(queries[0])[0];
    let d_k = tape.shape(queries[0])[1];
    let t = tape.shape(keys[0])[0];
    let scale = 1.0 / (d_k as f64).sqrt();

    // Energies and probabilities for every head, full sequence.
    let mut e_ids = Vec::with_capacity(heads);
    let mut p_ids = Vec::with_capacity(heads);
    for h in 0..heads {
        let kt = tape.transpose(keys[h])?;
        let e = tape.matmul(queries[h], kt)?;
        let e = tape.scale(e, scale);
        e_ids.push(e);
        p_ids.push(tape.sigmoid(e));
    }

    // Halting decisions per output row, from the probability values.
    let mut probs = Vec::with_capacity(l);
    let mut halts = Vec::with_capacity(l);
    for i in 0..l {
        let p_rows: Vec<Vec<f64>> = (0..heads)
            .map(|h| tape.data(p_ids[h])[i * t..(i + 1) * t].to_vec())
            .collect();
        let e_rows: Vec<Vec<f64>> = (0..heads)
            .map(|h| tape.data(e_ids[h])[i * t..(i + 1) * t].to_vec())
            .collect();
        let row_halts = match mode {
            TruncationMode::Dacs => p_rows
                .iter()
                .map(|row| dacs_halt(row, threshold, t))
                .collect::<Result<Vec<_>>>()?,
            TruncationMode::HsDacs => {
                let joint = hs_dacs_halt(&p_rows, threshold, t)?;
                (0..heads)
                    .map(|h| HaltResult {
                        n: joint.n,
                        reason: joint.reason,
                        truncated_weights: p_rows[h][..joint.n].to_vec(),
                    })
                    .collect()
            }
        };
        probs.push(HaltingProbs {
            p: p_rows,
            e: e_rows,
        });
        halts.push(row_halts);
    }

    // Zero retained weights beyond each row's halting position and form the
    // contexts; the mask is constant, so gradients reach kept entries only.
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut keep = vec![false; l * t];
        for (i, row_halts) in halts.iter().enumerate() {
            let n = row_halts[h].n;
            for j in 0..n {
                keep[i * t + j] = true;
            }
        }
        let masked = tape.mask_fill(p_ids[h], &keep, 0.0)?;
        contexts.push(tape.matmul(masked, values[h])?);
    }

    Ok(TrainAttention {
        contexts,
        probs,
        halts,
    })
}
