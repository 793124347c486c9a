//! The experiment stages behind each command-line subcommand. Every stage
//! is a function of its config, its input files and the run seed.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_denoiser, load_train_state, save_denoiser, save_train_state};
use crate::config::{stage, RunConfig};
use crate::demodata::{build_pool, sample_ground_truth, select_experts, DemoSet, ToyWorld};
use crate::denoiser::{Architecture, Cond, DenoiserParams};
use crate::error::{DroError, Result};
use crate::evaluation::{win_rate, EvalReport};
use crate::oracle::{verify_derivation, DerivationReport};
use crate::schedule::{LambdaMode, NoiseSchedule, SigmaMode};
use crate::trainer::{pretrain_reference, train_until, write_history, TrainContext, TrainState};

pub const REFERENCE_FILE: &str = "reference.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain.csv";
pub const DEMOS_FILE: &str = "demos.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "train_state.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const VERIFY_JSON: &str = "verify.json";

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn world(cfg: &RunConfig) -> Result<ToyWorld<f64>> {
    ToyWorld::from_config(&cfg.world)
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule<f64>> {
    cfg.schedule.build()
}

/// Fits the reference model; writes its checkpoint and loss log.
pub fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    ensure_dir(out)?;
    let outcome = pretrain_reference(&world(cfg)?, &schedule(cfg)?, &cfg.model, &cfg.pretrain)?;
    let path = out.join(REFERENCE_FILE);
    save_denoiser(&path, &outcome.ema)?;
    let mut w = csv::Writer::from_writer(create(&out.join(PRETRAIN_LOG))?);
    for row in &outcome.history {
        w.serialize(row).map_err(|e| DroError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(path)
}

/// Samples a pool from `reference`, ranks it and keeps the top `k`.
pub fn build_demos(cfg: &RunConfig, reference: &DenoiserParams<f64>) -> Result<DemoSet<f64>> {
    let w = world(cfg)?;
    let pool = build_pool(
        &w,
        &schedule(cfg)?,
        reference,
        cfg.experts.pool_per_condition,
        cfg.experts.guidance,
        cfg.stage_seed(stage::POOL),
    )?;
    select_experts(&pool, cfg.experts.k, w.n_conditions())
}

pub fn run_select_experts(cfg: &RunConfig, reference: &Path, out: &Path) -> Result<PathBuf> {
    ensure_dir(out)?;
    let demos = build_demos(cfg, &load_denoiser(reference)?)?;
    let path = out.join(DEMOS_FILE);
    demos.write_csv(create(&path)?)?;
    Ok(path)
}

pub fn load_demos(path: &Path) -> Result<DemoSet<f64>> {
    match File::open(path) {
        Ok(f) => DemoSet::read_csv(f),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(DroError::NotFound(format!("demo file {}", path.display())))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Demonstrations to use; selected from the reference when absent.
    pub demos: Option<PathBuf>,
    /// Training state to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps instead of `n_steps`.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub model: PathBuf,
    pub state: PathBuf,
    pub history: PathBuf,
    pub steps_done: usize,
}

/// Fine-tunes the reference. Writes the EMA weights, the resumable state
/// (also every `checkpoint_every` steps) and the history log.
pub fn run_train(cfg: &RunConfig, reference: &Path, opts: &TrainOptions, out: &Path) -> Result<TrainArtifacts> {
    ensure_dir(out)?;
    let reference = load_denoiser::<f64>(reference)?;
    if reference.arch() != &cfg.model {
        return Err(DroError::Config("reference checkpoint architecture differs from config".into()));
    }
    let demos = match &opts.demos {
        Some(p) => load_demos(p)?,
        None => build_demos(cfg, &reference)?,
    };
    if demos.n_conditions() > cfg.world.n_conditions {
        return Err(DroError::Config("demo file has more conditions than the world".into()));
    }
    let w = world(cfg)?;
    let s = schedule(cfg)?;
    let ctx = TrainContext { reference: &reference, demos: &demos, world: &w, schedule: &s, cfg: &cfg.train };
    let mut state = match &opts.resume {
        Some(p) => {
            let st = load_train_state::<f64>(p)?;
            if st.phi.arch() != &cfg.model {
                return Err(DroError::Config("resumed state architecture differs from config".into()));
            }
            st
        }
        None => TrainState::new(&reference, &cfg.train)?,
    };
    let target = opts.stop_after.unwrap_or(cfg.train.n_steps).min(cfg.train.n_steps);
    let state_path = out.join(STATE_FILE);
    let chunk = if cfg.checkpoint_every == 0 { usize::MAX } else { cfg.checkpoint_every };
    loop {
        let next = state.step.saturating_add(chunk).min(target);
        train_until(&ctx, &mut state, next)?;
        save_train_state(&state_path, &state)?;
        if state.step >= target {
            break;
        }
    }
    let model = out.join(MODEL_FILE);
    save_denoiser(&model, &state.ema.shadow)?;
    let history = out.join(HISTORY_FILE);
    write_history(&state.history, create(&history)?)?;
    Ok(TrainArtifacts { model, state: state_path, history, steps_done: state.step })
}

/// Win rate of checkpoint `a` over checkpoint `b`; writes JSON and CSV.
pub fn run_eval(cfg: &RunConfig, a: &Path, b: &Path, out: &Path) -> Result<EvalReport> {
    ensure_dir(out)?;
    let ma = load_denoiser::<f64>(a)?;
    let mb = load_denoiser::<f64>(b)?;
    let report = win_rate(
        &world(cfg)?,
        &schedule(cfg)?,
        &ma,
        &mb,
        &cfg.eval_conditions(),
        cfg.eval.n_prompts,
        cfg.eval.n_per_prompt,
        cfg.eval.guidance,
        cfg.stage_seed(stage::EVAL),
    )?;
    std::fs::write(out.join(EVAL_JSON), report.to_json()?)?;
    report.write_csv(create(&out.join(EVAL_CSV))?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub passed: bool,
    pub corrupt_lambda: bool,
    pub reports: Vec<DerivationReport>,
}

impl VerifySummary {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DroError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DroError::Format(e.to_string()))
    }
}

/// Checks the KL/noise-regression identity on random model triples in both
/// σ² modes. Ground-truth draws of the world supply the expert points.
pub fn verify(cfg: &RunConfig) -> Result<VerifySummary> {
    let v = &cfg.verify;
    let w = world(cfg)?;
    let arch = Architecture { hidden: v.hidden.clone(), horizon: v.horizon, ..cfg.model.clone() };
    let base = cfg.stage_seed(stage::VERIFY);
    let mut reports = Vec::new();
    for (mi, mode) in [SigmaMode::Beta, SigmaMode::Posterior].into_iter().enumerate() {
        let mut s = NoiseSchedule::<f64>::linear(v.horizon, v.beta_start, v.beta_end, mode, LambdaMode::Analytic)?;
        if v.corrupt_lambda {
            s = s.with_scaled_lambda(2.0);
        }
        for i in 0..v.triples {
            let seed = base.derive(&[mi as u64, i as u64]);
            let nets: Vec<DenoiserParams<f64>> =
                (0..3).map(|k| DenoiserParams::init(&arch, seed.child(k))).collect::<Result<_>>()?;
            let c = i % w.n_conditions();
            let source = sample_ground_truth(&w, c, 256, seed.child(3))?;
            reports.push(verify_derivation(
                &nets[0],
                &nets[1],
                &nets[2],
                &s,
                &source,
                Cond::Label(c),
                v.draws,
                cfg.train.beta_kl,
                v.tolerance,
                seed.child(4),
            )?);
        }
    }
    Ok(VerifySummary { passed: reports.iter().all(|r| r.passed), corrupt_lambda: v.corrupt_lambda, reports })
}

pub fn run_verify(cfg: &RunConfig, out: &Path) -> Result<VerifySummary> {
    ensure_dir(out)?;
    let summary = verify(cfg)?;
    std::fs::write(out.join(VERIFY_JSON), summary.to_json()?)?;
    Ok(summary)
}
