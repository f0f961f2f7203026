//! Command-line interface: train, decode, sweep, export-align, grad-check.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
//! Human-readable output goes to stdout, diagnostics to stderr.

use crate::config::{HaltingMode, RunConfig};
use crate::data::Dataset;
use crate::decoder::{decode_beam, decode_greedy, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{coverage_ratio, error_rate, export_alignment, sweep_table, sweep_thresholds};
use crate::training::{grad_check, Trainer};
use crate::transformer::encode_states;
use std::collections::BTreeMap;
use std::path::PathBuf;

pub const USAGE: &str = "usage: hsdacs <command> [flags]

commands:
  train         --config FILE [--checkpoint PATH] [--init CKPT]
  decode        --checkpoint PATH [--mode offline|dacs|hsdacs] [--threshold X]
                [--max-lookahead N] [--beam B] [--seed S] [--num-utts N] [--max-len N]
  sweep         --checkpoint PATH --thresholds A,B,C [--mode M] [--num-utts N] [--out FILE]
  export-align  --checkpoint PATH --utt-seed S --layer L --out DIR [--mode M] [--threshold X]
  grad-check

exit codes: 0 ok, 1 usage/config error, 2 runtime failure";

/// Parsed `--flag value` pairs, rejecting anything unknown.
struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Flags> {
        let mut values = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let flag = &args[i];
            if !flag.starts_with("--") {
                return Err(Error::Config(format!("unexpected argument '{flag}'")));
            }
            let name = &flag[2..];
            if !allowed.contains(&name) {
                return Err(Error::Config(format!("unknown flag '--{name}'")));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::Config(format!("flag '--{name}' needs a value")))?;
            values.insert(name.to_string(), value.clone());
            i += 2;
        }
        Ok(Flags { values })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing required flag '--{name}'")))
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("flag '--{name}': cannot parse '{v}'"))),
        }
    }
}

/// Entry point used by `main`; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let command = args.first().map(|s| s.as_str()).unwrap_or("");
    let rest = if args.is_empty() { &[][..] } else { &args[1..] };
    match command {
        "train" => cmd_train(rest),
        "decode" => cmd_decode(rest),
        "sweep" => cmd_sweep(rest),
        "export-align" => cmd_export_align(rest),
        "grad-check" => cmd_grad_check(rest),
        "" => {
            eprintln!("{USAGE}");
            Err(Error::Config("no command given".into()))
        }
        other => Err(Error::Config(format!(
            "unknown command '{other}' (expected train|decode|sweep|export-align|grad-check)"
        ))),
    }
}

fn load_config(path: &str) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config '{path}': {e}")))?;
    let cfg = RunConfig::parse(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["config", "checkpoint", "init"])?;
    let mut cfg = load_config(flags.require("config")?)?;
    if let Some(path) = flags.get("checkpoint") {
        cfg.train.checkpoint_path = path.to_string();
    }
    let path = PathBuf::from(cfg.train.checkpoint_path.clone());
    println!(
        "training: mode={} d_model={} layers={}+{} samples={} epochs={}",
        cfg.model.halting_mode.as_str(),
        cfg.model.d_model,
        cfg.model.enc_layers,
        cfg.model.dec_layers,
        cfg.train.train_samples,
        cfg.train.epochs
    );
    let mut trainer = Trainer::new(cfg)?;
    if let Some(init) = flags.get("init") {
        trainer.init_params_from(&PathBuf::from(init))?;
        println!("parameters warm-started from {init}");
    }
    for epoch in 0..trainer.run_cfg.train.epochs {
        let loss = trainer.run_epoch()?;
        println!("epoch {:3}  loss {:.6}", epoch + 1, loss);
    }
    trainer.save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

/// Shared checkpoint + decode-flag handling for decode/sweep/export-align.
fn load_for_decode(flags: &Flags) -> Result<(Trainer, DecodeConfig)> {
    let path = PathBuf::from(flags.require("checkpoint")?);
    let mut trainer = Trainer::load(&path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("cannot read '{}': {io}", path.display())),
        other => other,
    })?;
    let mode = match flags.get("mode") {
        Some(m) => HaltingMode::parse(m)?,
        None => trainer.run_cfg.model.halting_mode,
    };
    if mode == HaltingMode::Offline
        && (flags.get("threshold").is_some() || flags.get("max-lookahead").is_some())
    {
        eprintln!("warning: --threshold/--max-lookahead are ignored in offline mode");
    }
    let threshold = match flags.parse_num::<f64>("threshold")? {
        Some(t) => t,
        None => match mode {
            HaltingMode::Dacs => trainer.run_cfg.model.dacs_threshold,
            _ => trainer.run_cfg.model.joint_threshold,
        },
    };
    let max_lookahead = flags
        .parse_num::<usize>("max-lookahead")?
        .unwrap_or(trainer.run_cfg.model.max_lookahead);
    let max_len = flags
        .parse_num::<usize>("max-len")?
        .unwrap_or(2 * trainer.run_cfg.data.len_max + 8);
    if let Some(seed) = flags.parse_num::<u64>("seed")? {
        trainer.run_cfg.data.sample_seed = seed;
        trainer.dataset = Dataset::new(trainer.run_cfg.data.clone())?;
    }
    Ok((
        trainer,
        DecodeConfig {
            mode,
            threshold,
            max_lookahead,
            max_len,
        },
    ))
}

/// Eval samples live above the training index range.
fn eval_indices(cfg: &RunConfig, num: usize) -> Vec<u64> {
    let base = cfg.train.train_samples as u64;
    (0..num as u64).map(|i| base + i).collect()
}

fn cmd_decode(args: &[String]) -> Result<()> {
    let flags = Flags::parse(
        args,
        &[
            "checkpoint",
            "mode",
            "threshold",
            "max-lookahead",
            "beam",
            "seed",
            "num-utts",
            "max-len",
        ],
    )?;
    let (trainer, dcfg) = load_for_decode(&flags)?;
    let num = flags.parse_num::<usize>("num-utts")?.unwrap_or(50);
    let beam = flags.parse_num::<usize>("beam")?.unwrap_or(1);
    if beam == 0 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    let model = &trainer.model;
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let mut ratios = Vec::new();
    for idx in eval_indices(&trainer.run_cfg, num) {
        let sample = trainer.dataset.sample(idx);
        let enc = encode_states(model, &sample.features, sample.frames)?;
        let (tokens, trace) = if beam == 1 {
            decode_greedy(model, &enc, &dcfg)?
        } else {
            decode_beam(model, &enc, &dcfg, beam, 1.0)?
        };
        let r = coverage_ratio(
            &trace,
            model.cfg.dec_layers,
            model.cfg.heads,
            trace.steps.len(),
            enc.t,
        )?;
        println!(
            "utt {idx}: ref={} hyp={} r={r:.3}",
            join_tokens(&sample.target),
            join_tokens(&tokens)
        );
        refs.push(sample.target);
        hyps.push(tokens);
        ratios.push(r);
    }
    let err = error_rate(&refs, &hyps)?;
    let mean_r = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    println!(
        "mode={} threshold={} M={} beam={beam}: token error rate {err:.2}% over {num} utts, mean r {mean_r:.3}",
        dcfg.mode.as_str(),
        dcfg.threshold,
        dcfg.max_lookahead
    );
    Ok(())
}

fn join_tokens(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_sweep(args: &[String]) -> Result<()> {
    let flags = Flags::parse(
        args,
        &[
            "checkpoint",
            "mode",
            "thresholds",
            "max-lookahead",
            "num-utts",
            "max-len",
            "seed",
            "out",
        ],
    )?;
    let (trainer, dcfg) = load_for_decode(&flags)?;
    let thresholds: Vec<f64> = flags
        .require("thresholds")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad threshold value '{s}'")))
        })
        .collect::<Result<_>>()?;
    if thresholds.is_empty() {
        return Err(Error::Config("empty threshold list".into()));
    }
    let num = flags.parse_num::<usize>("num-utts")?.unwrap_or(50);
    let rows = sweep_thresholds(
        &trainer.model,
        &trainer.dataset,
        &eval_indices(&trainer.run_cfg, num),
        dcfg.mode,
        &thresholds,
        dcfg.max_lookahead,
        dcfg.max_len,
    )?;
    let table = sweep_table(dcfg.mode, &rows);
    print!("{table}");
    if let Some(path) = flags.get("out") {
        std::fs::write(path, &table)?;
        eprintln!("sweep table written to {path}");
    }
    Ok(())
}

fn cmd_export_align(args: &[String]) -> Result<()> {
    let flags = Flags::parse(
        args,
        &[
            "checkpoint",
            "mode",
            "threshold",
            "max-lookahead",
            "utt-seed",
            "layer",
            "out",
            "max-len",
        ],
    )?;
    let (mut trainer, dcfg) = load_for_decode(&flags)?;
    let utt_seed: u64 = flags
        .require("utt-seed")?
        .parse()
        .map_err(|_| Error::Config("bad --utt-seed value".into()))?;
    let layer: usize = flags
        .require("layer")?
        .parse()
        .map_err(|_| Error::Config("bad --layer value".into()))?;
    if layer >= trainer.run_cfg.model.dec_layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range 0..{}",
            trainer.run_cfg.model.dec_layers
        )));
    }
    let out_dir = PathBuf::from(flags.require("out")?);
    trainer.run_cfg.data.sample_seed = utt_seed;
    trainer.dataset = Dataset::new(trainer.run_cfg.data.clone())?;
    let sample = trainer.dataset.sample(0);
    let enc = encode_states(&trainer.model, &sample.features, sample.frames)?;
    let (tokens, trace) = decode_greedy(&trainer.model, &enc, &dcfg)?;
    let paths = export_alignment(&trace, layer, trainer.run_cfg.model.heads, &out_dir)?;
    println!(
        "decoded: ref={} hyp={}",
        join_tokens(&sample.target),
        join_tokens(&tokens)
    );
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_grad_check(args: &[String]) -> Result<()> {
    Flags::parse(args, &[])?;
    let mut worst: f64 = 0.0;
    for mode in [HaltingMode::Dacs, HaltingMode::HsDacs] {
        let report = grad_check(mode)?;
        println!(
            "grad-check {}: {} coordinates, max rel err {:.3e}, median {:.3e}",
            mode.as_str(),
            report.checked,
            report.max_rel_err,
            report.median_rel_err
        );
        worst = worst.max(report.max_rel_err);
    }
    if worst >= 1e-3 {
        return Err(Error::Contract(format!(
            "gradient check failed: max relative error {worst:.3e} >= 1e-3"
        )));
    }
    println!("grad-check: PASS");
    Ok(())
}
