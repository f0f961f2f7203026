//! Deterministic synthetic transduction task with a monotonic ground-truth
//! alignment: each target token is rendered as a run of noisy copies of a
//! fixed per-token codebook vector. Samples are pure functions of
//! (codebook seed, sample seed, index); no dataset files exist.

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::transformer::FIRST_TOKEN;

/// One generated utterance.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    /// Target tokens, drawn from `[FIRST_TOKEN, FIRST_TOKEN + vocab)`.
    pub target: Vec<usize>,
    /// `frames x d_feat`, row-major.
    pub features: Vec<f64>,
    pub frames: usize,
    pub d_feat: usize,
    /// Per-token (start frame, duration); contiguous, ordered, non-overlapping.
    pub alignment: Vec<(usize, usize)>,
}

/// Dataset handle caching the token codebook.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cfg: DataConfig,
    codebook: Vec<f64>,
}

impl Dataset {
    pub fn new(cfg: DataConfig) -> Result<Dataset> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.codebook_seed);
        let codebook: Vec<f64> = (0..cfg.vocab * cfg.d_feat)
            .map(|_| rng.next_gaussian())
            .collect();
        Ok(Dataset { cfg, codebook })
    }

    pub fn codebook_row(&self, token: usize) -> &[f64] {
        let i = token - FIRST_TOKEN;
        &self.codebook[i * self.cfg.d_feat..(i + 1) * self.cfg.d_feat]
    }

    /// Generate sample `index`; fully determined by the config seeds.
    pub fn sample(&self, index: u64) -> SyntheticSample {
        let cfg = &self.cfg;
        let mut rng = Rng::for_stream(cfg.sample_seed, index);
        let len = rng.next_in(cfg.len_min, cfg.len_max);
        let target: Vec<usize> = (0..len)
            .map(|_| FIRST_TOKEN + rng.next_below(cfg.vocab))
            .collect();
        let durations: Vec<usize> = (0..len)
            .map(|_| rng.next_in(cfg.dur_min, cfg.dur_max))
            .collect();
        let frames: usize = durations.iter().sum();
        let mut features = vec![0.0; frames * cfg.d_feat];
        let mut alignment = Vec::with_capacity(len);
        let mut at = 0;
        for (tok, &dur) in target.iter().zip(&durations) {
            alignment.push((at, dur));
            let row = self.codebook_row(*tok);
            for _ in 0..dur {
                for d in 0..cfg.d_feat {
                    features[at * cfg.d_feat + d] = row[d] + cfg.noise_sigma * rng.next_gaussian();
                }
                at += 1;
            }
        }
        SyntheticSample {
            target,
            features,
            frames,
            d_feat: cfg.d_feat,
            alignment,
        }
    }
}

/// Convenience form of `Dataset::sample` rebuilding the codebook each call.
pub fn generate_sample(cfg: &DataConfig, index: u64) -> Result<SyntheticSample> {
    Ok(Dataset::new(cfg.clone())?.sample(index))
}

/// A zero-padded batch with explicit lengths and masks. Padding never reaches
/// the loss or the attention: consumers slice by the true lengths.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub d_feat: usize,
    pub max_frames: usize,
    pub max_target: usize,
    /// `size x max_frames x d_feat`, zero-padded.
    pub features: Vec<f64>,
    pub feature_lens: Vec<usize>,
    /// `size x max_target`, zero-padded.
    pub targets: Vec<usize>,
    /// `size x max_target`; true marks a real target position.
    pub target_mask: Vec<bool>,
}

impl Batch {
    /// The un-padded feature rows of one sample.
    pub fn sample_features(&self, b: usize) -> &[f64] {
        &self.features[b * self.max_frames * self.d_feat
            ..b * self.max_frames * self.d_feat + self.feature_lens[b] * self.d_feat]
    }

    /// The un-padded target tokens of one sample.
    pub fn sample_target(&self, b: usize) -> Vec<usize> {
        (0..self.max_target)
            .filter(|&i| self.target_mask[b * self.max_target + i])
            .map(|i| self.targets[b * self.max_target + i])
            .collect()
    }
}

/// Zero-pad a set of samples to common feature / target lengths.
pub fn pad_batch(samples: &[SyntheticSample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Contract("pad_batch: empty batch".into()));
    }
    let d_feat = samples[0].d_feat;
    let max_frames = samples.iter().map(|s| s.frames).max().unwrap();
    let max_target = samples.iter().map(|s| s.target.len()).max().unwrap();
    let size = samples.len();
    let mut features = vec![0.0; size * max_frames * d_feat];
    let mut targets = vec![0usize; size * max_target];
    let mut target_mask = vec![false; size * max_target];
    let mut feature_lens = Vec::with_capacity(size);
    for (b, s) in samples.iter().enumerate() {
        if s.d_feat != d_feat {
            return Err(Error::Data("pad_batch: inconsistent d_feat".into()));
        }
        features[b * max_frames * d_feat..b * max_frames * d_feat + s.features.len()]
            .copy_from_slice(&s.features);
        feature_lens.push(s.frames);
        for (i, &tok) in s.target.iter().enumerate() {
            targets[b * max_target + i] = tok;
            target_mask[b * max_target + i] = true;
        }
    }
    Ok(Batch {
        size,
        d_feat,
        max_frames,
        max_target,
        features,
        feature_lens,
        targets,
        target_mask,
    })
}
