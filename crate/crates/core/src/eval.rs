//! Error-rate metrics, the computation-step-coverage ratio, threshold sweeps,
//! and alignment-trace export (CSV and PGM grids of the attention weights
//! actually applied).

use crate::config::HaltingMode;
use crate::data::Dataset;
use crate::decoder::{decode_greedy, DecodeConfig, DecodeTrace};
use crate::error::{Error, Result};
use crate::transformer::{encode_states, Model};
use std::path::{Path, PathBuf};

/// Levenshtein distance with an edit-type breakdown (transforming `reference`
/// into `hypothesis`; insertions are extra hypothesis tokens).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditBreakdown {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditBreakdown {
    let n = reference.len();
    let m = hypothesis.len();
    // dp[i][j] = distance between reference[..i] and hypothesis[..j].
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[idx(i, j)] = (dp[idx(i - 1, j - 1)] + cost)
                .min(dp[idx(i - 1, j)] + 1)
                .min(dp[idx(i, j - 1)] + 1);
        }
    }
    // Backtrace, preferring diagonal then deletion then insertion.
    let (mut i, mut j) = (n, m);
    let (mut subs, mut ins, mut dels) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[idx(i, j)] == dp[idx(i - 1, j - 1)] + cost {
                subs += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[idx(i, j)] == dp[idx(i - 1, j)] + 1 {
            dels += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    EditBreakdown {
        distance: dp[idx(n, m)],
        substitutions: subs,
        insertions: ins,
        deletions: dels,
    }
}

/// Aggregate error rate: total edit distance over total reference length,
/// in percent.
pub fn error_rate<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "error_rate: {} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let total_len: usize = refs.iter().map(|r| r.len()).sum();
    if total_len == 0 {
        return Err(Error::Contract(
            "error_rate: zero total reference length".into(),
        ));
    }
    let total_dist: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h).distance)
        .sum();
    Ok(total_dist as f64 / total_len as f64 * 100.0)
}

/// Computation-step-coverage ratio: the fraction of (layer, head, step, frame)
/// work actually performed, from the recorded per-head halting positions.
pub fn coverage_ratio(
    trace: &DecodeTrace,
    dec_layers: usize,
    heads: usize,
    steps: usize,
    enc_len: usize,
) -> Result<f64> {
    if enc_len == 0 || steps == 0 {
        return Err(Error::Contract(
            "coverage_ratio: empty trace dimensions".into(),
        ));
    }
    if trace.steps.len() < steps {
        return Err(Error::Contract(format!(
            "coverage_ratio: trace has {} steps, {steps} requested",
            trace.steps.len()
        )));
    }
    let mut total = 0usize;
    for step in trace.steps.iter().take(steps) {
        debug_assert_eq!(step.layers.len(), dec_layers);
        for layer in &step.layers {
            debug_assert_eq!(layer.s.len(), heads);
            for &s in &layer.s {
                total += s;
            }
        }
    }
    Ok(total as f64 / (dec_layers * heads * steps * enc_len) as f64)
}

/// One row of the threshold sweep report.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub threshold: f64,
    /// Token error rate, percent.
    pub error_rate: f64,
    /// Mean per-utterance coverage ratio.
    pub ratio: f64,
}

/// Greedy-decode the eval set once per threshold and report error rate and
/// mean coverage ratio, Table-style.
pub fn sweep_thresholds(
    model: &Model,
    dataset: &Dataset,
    eval_indices: &[u64],
    mode: HaltingMode,
    thresholds: &[f64],
    max_lookahead: usize,
    max_len: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let dcfg = DecodeConfig {
            mode,
            threshold,
            max_lookahead,
            max_len,
        };
        let mut refs = Vec::with_capacity(eval_indices.len());
        let mut hyps = Vec::with_capacity(eval_indices.len());
        let mut ratios = Vec::with_capacity(eval_indices.len());
        for &idx in eval_indices {
            let sample = dataset.sample(idx);
            let enc = encode_states(model, &sample.features, sample.frames)?;
            let (tokens, trace) = decode_greedy(model, &enc, &dcfg)?;
            let r = coverage_ratio(
                &trace,
                model.cfg.dec_layers,
                model.cfg.heads,
                trace.steps.len(),
                enc.t,
            )?;
            ratios.push(r);
            refs.push(sample.target);
            hyps.push(tokens);
        }
        rows.push(SweepRow {
            threshold,
            error_rate: error_rate(&refs, &hyps)?,
            ratio: ratios.iter().sum::<f64>() / ratios.len() as f64,
        });
    }
    Ok(rows)
}

/// Render sweep rows as the tab-separated report table.
pub fn sweep_table(mode: HaltingMode, rows: &[SweepRow]) -> String {
    let thr_name = match mode {
        HaltingMode::Dacs => "thr",
        _ => "joint-thr",
    };
    let mut out = format!("{thr_name}\terr(%)\tr\n");
    for row in rows {
        out.push_str(&format!(
            "{}\t{:.2}\t{:.3}\n",
            row.threshold, row.error_rate, row.ratio
        ));
    }
    out
}

/// Applied attention weights for one (layer, head): an output-steps x
/// encoder-frames grid, zero beyond each step's halting position.
#[derive(Debug, Clone)]
pub struct AlignmentGrid {
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl AlignmentGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }
}

/// Extract per-head applied-weight grids for one decoder layer from a trace.
pub fn alignment_grids(
    trace: &DecodeTrace,
    layer: usize,
    heads: usize,
) -> Result<Vec<AlignmentGrid>> {
    if trace.steps.is_empty() {
        return Err(Error::Contract("alignment_grids: empty trace".into()));
    }
    if layer >= trace.steps[0].layers.len() {
        return Err(Error::Contract(format!(
            "alignment_grids: layer {layer} out of range 0..{}",
            trace.steps[0].layers.len()
        )));
    }
    let rows = trace.steps.len();
    let cols = trace.enc_len;
    let mut grids = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut weights = vec![0.0; rows * cols];
        for (i, step) in trace.steps.iter().enumerate() {
            let lt = &step.layers[layer];
            let n = lt.s[h];
            for j in 0..n {
                weights[i * cols + j] = lt.probs[h][j];
            }
        }
        grids.push(AlignmentGrid {
            layer,
            head: h,
            rows,
            cols,
            weights,
        });
    }
    Ok(grids)
}

fn format_weight(v: f64) -> String {
    format!("{v}")
}

/// CSV body for one grid: a header row of frame indices, then one row of
/// applied weights per output step.
pub fn grid_to_csv(grid: &AlignmentGrid) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..grid.cols).map(|j| j.to_string()).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..grid.rows {
        let row: Vec<String> = (0..grid.cols)
            .map(|j| format_weight(grid.at(i, j)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// P2 (text) portable graymap of one grid, weights scaled linearly to 0-255
/// over the grid's own maximum.
pub fn grid_to_pgm(grid: &AlignmentGrid) -> String {
    let max = grid.weights.iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", grid.cols, grid.rows);
    for i in 0..grid.rows {
        let row: Vec<String> = (0..grid.cols)
            .map(|j| {
                let v = if max > 0.0 {
                    (grid.at(i, j) / max * 255.0).round() as u32
                } else {
                    0
                };
                v.to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Write CSV and PGM grids for every head of one layer into `dir`.
/// Returns the created paths.
pub fn export_alignment(
    trace: &DecodeTrace,
    layer: usize,
    heads: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let grids = alignment_grids(trace, layer, heads)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for grid in &grids {
        let csv = dir.join(format!("layer{}_head{}.csv", grid.layer, grid.head));
        std::fs::write(&csv, grid_to_csv(grid))?;
        paths.push(csv);
        let pgm = dir.join(format!("layer{}_head{}.pgm", grid.layer, grid.head));
        std::fs::write(&pgm, grid_to_pgm(grid))?;
        paths.push(pgm);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{LayerStepTrace, StepTrace};
    use crate::halting::HaltReason;

    #[test]
    fn identical_sequences_have_zero_distance() {
        let a = vec![1, 2, 3];
        let d = edit_distance(&a, &a);
        assert_eq!(d.distance, 0);
        assert_eq!((d.substitutions, d.insertions, d.deletions), (0, 0, 0));
    }

    #[test]
    fn empty_reference_counts_insertions() {
        let d = edit_distance::<u8>(&[], &[9, 9, 9, 9]);
        assert_eq!(d.distance, 4);
        assert_eq!(d.insertions, 4);
    }

    #[test]
    fn kitten_to_sitting_is_three() {
        let kitten: Vec<char> = "kitten".chars().collect();
        let sitting: Vec<char> = "sitting".chars().collect();
        let d = edit_distance(&kitten, &sitting);
        assert_eq!(d.distance, 3);
        assert_eq!(d.substitutions + d.insertions + d.deletions, 3);
    }

    // Brute-force recursive oracle for short sequences.
    fn recursive_distance(a: &[u8], b: &[u8]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let cost = usize::from(a[0] != b[0]);
        (recursive_distance(&a[1..], &b[1..]) + cost)
            .min(recursive_distance(&a[1..], b) + 1)
            .min(recursive_distance(a, &b[1..]) + 1)
    }

    #[test]
    fn matches_recursive_oracle_exhaustively() {
        // All pairs over a 3-token alphabet, lengths <= 4 here; the
        // acceptance suite extends this to length 6.
        let mut seqs: Vec<Vec<u8>> = vec![vec![]];
        for len in 1..=4 {
            let mut cur = vec![0u8; len];
            loop {
                seqs.push(cur.clone());
                let mut i = 0;
                loop {
                    cur[i] += 1;
                    if cur[i] < 3 {
                        break;
                    }
                    cur[i] = 0;
                    i += 1;
                    if i == len {
                        break;
                    }
                }
                if cur.iter().all(|&v| v == 0) {
                    break;
                }
            }
        }
        for a in &seqs {
            for b in &seqs {
                assert_eq!(
                    edit_distance(a, b).distance,
                    recursive_distance(a, b),
                    "{a:?} vs {b:?}"
                );
            }
        }
    }

    #[test]
    fn breakdown_sums_to_distance() {
        let cases = [
            (vec![1, 2, 3, 4], vec![1, 9, 3]),
            (vec![5, 5, 5], vec![5, 5, 5, 5, 5]),
            (vec![1, 2], vec![3, 4, 5, 6]),
        ];
        for (r, h) in cases {
            let d = edit_distance(&r, &h);
            assert_eq!(d.substitutions + d.insertions + d.deletions, d.distance);
        }
    }

    #[test]
    fn error_rate_formula() {
        let refs = vec![vec![1, 1, 1, 1], vec![2; 6]];
        let mut hyps = refs.clone();
        assert_eq!(error_rate(&refs, &hyps).unwrap(), 0.0);
        hyps[0][0] = 9; // distance 1 on a length-4 ref
        hyps[1][0] = 9;
        hyps[1][1] = 9; // distance 2 on a length-6 ref
        let e = error_rate(&refs, &hyps).unwrap();
        assert!((e - 30.0).abs() < 1e-12);
        let one_ref = vec![vec![1; 10]];
        let one_hyp = vec![vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 9]];
        assert!((error_rate(&one_ref, &one_hyp).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_length_is_contract_error() {
        let refs: Vec<Vec<u8>> = vec![vec![]];
        let hyps: Vec<Vec<u8>> = vec![vec![1]];
        assert!(error_rate(&refs, &hyps).is_err());
    }

    fn hand_trace(s_per_step: &[usize], enc_len: usize) -> DecodeTrace {
        DecodeTrace {
            steps: s_per_step
                .iter()
                .map(|&s| StepTrace {
                    layers: vec![LayerStepTrace {
                        probs: vec![vec![0.5; s]],
                        s: vec![s],
                        reason: vec![HaltReason::Threshold],
                    }],
                    t: s,
                })
                .collect(),
            enc_len,
        }
    }

    #[test]
    fn coverage_ratio_hand_case() {
        let trace = hand_trace(&[3, 5], 10);
        let r = coverage_ratio(&trace, 1, 1, 2, 10).unwrap();
        assert_eq!(r, 0.4);
    }

    #[test]
    fn coverage_ratio_upper_bound_at_full_consumption() {
        let trace = hand_trace(&[10, 10, 10], 10);
        assert_eq!(coverage_ratio(&trace, 1, 1, 3, 10).unwrap(), 1.0);
    }

    #[test]
    fn coverage_ratio_rejects_empty_dimensions() {
        let trace = hand_trace(&[3], 10);
        assert!(coverage_ratio(&trace, 1, 1, 0, 10).is_err());
        assert!(coverage_ratio(&trace, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn csv_export_single_step() {
        // Single step, p = [0.5, 0.25] halted at N=2, T=4.
        let trace = DecodeTrace {
            steps: vec![StepTrace {
                layers: vec![LayerStepTrace {
                    probs: vec![vec![0.5, 0.25, 0.9, 0.9]],
                    s: vec![2],
                    reason: vec![HaltReason::Threshold],
                }],
                t: 2,
            }],
            enc_len: 4,
        };
        let grids = alignment_grids(&trace, 0, 1).unwrap();
        let csv = grid_to_csv(&grids[0]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "0,1,2,3");
        assert_eq!(lines[1], "0.5,0.25,0,0");
    }

    #[test]
    fn pgm_of_zero_grid_is_all_zero() {
        let grid = AlignmentGrid {
            layer: 0,
            head: 0,
            rows: 2,
            cols: 3,
            weights: vec![0.0; 6],
        };
        let pgm = grid_to_pgm(&grid);
        let lines: Vec<&str> = pgm.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[1], "3 2");
        assert_eq!(lines[2], "255");
        assert_eq!(lines[3], "0 0 0");
        assert_eq!(lines[4], "0 0 0");
    }

    #[test]
    fn pgm_scales_to_255() {
        let grid = AlignmentGrid {
            layer: 0,
            head: 0,
            rows: 1,
            cols: 3,
            weights: vec![0.0, 0.4, 0.8],
        };
        let pgm = grid_to_pgm(&grid);
        assert!(pgm.ends_with("0 128 255\n"));
    }

    #[test]
    fn export_writes_csv_and_pgm_per_head() {
        let trace = DecodeTrace {
            steps: vec![StepTrace {
                layers: vec![LayerStepTrace {
                    probs: vec![vec![0.5, 0.5], vec![0.25, 0.25]],
                    s: vec![2, 2],
                    reason: vec![HaltReason::Threshold; 2],
                }],
                t: 2,
            }],
            enc_len: 2,
        };
        let dir = std::env::temp_dir().join(format!("hsdacs-align-{}", std::process::id()));
        let paths = export_alignment(&trace, 0, 2, &dir).unwrap();
        assert_eq!(paths.len(), 4);
        for p in &paths {
            assert!(p.exists());
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
