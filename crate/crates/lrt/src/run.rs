//! Training, evaluation and generation over a [`RunConfig`].

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lrt_core::backbone::Model;
use lrt_core::data::{byte_tokenize, detokenize, synthetic, Corpus};
use lrt_core::eval::{bpb, effective_compute, evaluate, param_overhead, EvalRecord};
use lrt_core::infer::{generate_with_log, Sampler, TokenLog};
use lrt_core::trainer::{batch_step, lr_multiplier, AdamW, LossBreakdown, TrainPlan};
use lrt_core::Real;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::Error;

pub const CHECKPOINT_FILE: &str = "checkpoint.lrt";
pub const LOG_FILE: &str = "train.log";

pub fn load_corpus(config: &RunConfig) -> Result<Corpus, Error> {
    let d = &config.data;
    let bytes = match d.source {
        DataSource::Synthetic => synthetic(&d.name, d.length, d.seed)?,
        DataSource::File => fs::read(&d.path).map_err(|e| Error::Io(d.path.clone(), e))?,
    };
    Ok(Corpus::from_bytes(&bytes, d.validation_fraction)?)
}

/// Steps implied by the config: `train.steps`, or enough steps to see
/// `ratio × parameters` tokens.
pub fn total_steps(config: &RunConfig, param_count: usize) -> usize {
    let t = &config.train;
    if t.steps > 0 {
        return t.steps;
    }
    TrainPlan::from_ratio(t.ratio, param_count, t.batch_size, config.model.seq_len, t.lr, config.seed).total_steps
}

/// One training log record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: Real,
    pub loss: LossBreakdown,
    /// Token-forwards since step 0, over the whole batch.
    pub token_forwards: usize,
}

impl StepRecord {
    pub fn line(&self, tokens_per_sec: f64) -> String {
        let mut s = format!(
            "step={} lr={:.6e} combined={:.6} init={:.6}",
            self.step, self.lr, self.loss.combined, self.loss.init
        );
        for (i, l) in self.loss.subsets.iter().enumerate() {
            s.push_str(&format!(" subset{}={:.6}", i + 1, l));
        }
        s.push_str(&format!(" token_forwards={} tokens_per_sec={:.1}", self.token_forwards, tokens_per_sec));
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many steps in this invocation (the schedule still
    /// spans the full run). A checkpoint is written on stopping.
    pub max_steps: Option<usize>,
    /// Skip the end-of-run evaluation.
    pub skip_eval: bool,
    /// Also echo log lines to stderr.
    pub echo: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub checkpoint: Checkpoint,
    pub finished: bool,
    pub report: Option<EvalReport>,
}

/// Fresh checkpoint at step 0.
pub fn initial_checkpoint(config: &RunConfig) -> Result<Checkpoint, Error> {
    let model = Model::init(config.model.clone(), config.seed)?;
    let mut optimizer = AdamW::new(&model.params);
    optimizer.weight_decay = config.train.weight_decay;
    let total = total_steps(config, model.param_count());
    Ok(Checkpoint {
        config: config.clone(),
        step: 0,
        total_steps: total,
        model,
        optimizer,
    })
}

/// Runs (or resumes) training to completion or `opts.max_steps`, writing the
/// log and checkpoints under `config.out`.
pub fn train(mut state: Checkpoint, opts: &TrainOptions) -> Result<TrainOutcome, Error> {
    let config = state.config.clone();
    let out = &config.out;
    fs::create_dir_all(out).map_err(|e| Error::Io(out.clone(), e))?;
    fs::write(out.join("config.toml"), config.to_toml()).map_err(|e| Error::Io(out.join("config.toml"), e))?;
    let corpus = load_corpus(&config)?;
    let mode = config.train.mode();
    let t = config.model.seq_len;
    let batch_forwards = mode.token_forwards(t, config.model.lrt.as_ref().map(|l| l.memory_source)) * config.train.batch_size;

    let log_path = out.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(state.step > 0)
        .write(true)
        .truncate(state.step == 0)
        .open(&log_path)
        .map_err(|e| Error::Io(log_path.clone(), e))?;
    let ck_path = out.join(CHECKPOINT_FILE);

    let mut records = Vec::new();
    let stop = opts.max_steps.map_or(state.total_steps, |m| (state.step + m).min(state.total_steps));
    let clock = Instant::now();
    let mut done_here = 0usize;
    while state.step < stop {
        let step = state.step;
        let batch = corpus.batch(t, config.train.batch_size, config.seed, step as u64)?;
        let (loss, grads) = batch_step(&state.model, &batch, &mode)?;
        let lr = config.train.lr * lr_multiplier(step, state.total_steps);
        state.optimizer.step(&mut state.model.params, &grads, lr)?;
        state.step += 1;
        done_here += 1;
        let record = StepRecord {
            step,
            lr,
            loss,
            token_forwards: batch_forwards * state.step,
        };
        let every = config.train.log_every.max(1);
        if step % every == 0 || state.step == state.total_steps {
            let rate = (done_here * t * config.train.batch_size) as f64 / clock.elapsed().as_secs_f64().max(1e-9);
            let line = record.line(rate);
            writeln!(log, "{line}").map_err(|e| Error::Io(log_path.clone(), e))?;
            if opts.echo {
                eprintln!("{line}");
            }
        }
        records.push(record);
        let every_ck = config.train.checkpoint_every;
        if every_ck > 0 && state.step % every_ck == 0 && state.step < stop {
            state.save(&ck_path)?;
        }
    }
    state.save(&ck_path)?;
    let finished = state.step == state.total_steps;
    let report = if finished && !opts.skip_eval && config.eval.windows > 0 {
        let r = eval_report(&state, &corpus)?;
        fs::write(out.join("eval.txt"), format!("{}\n", r.row())).map_err(|e| Error::Io(out.join("eval.txt"), e))?;
        Some(r)
    } else {
        None
    };
    Ok(TrainOutcome {
        records,
        checkpoint: state,
        finished,
        report,
    })
}

/// Evaluation summary row.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub tokens_seen: usize,
    pub ratio: Real,
    pub effective_compute: Real,
    pub validation_ce: Real,
    pub bpb: Real,
    /// LRT parameters over baseline parameters; 0 without memory.
    pub param_overhead: Real,
    pub eval_mode: String,
}

impl EvalReport {
    pub fn row(&self) -> String {
        format!(
            "model={} tokens_seen={} ratio={:.4} effective_compute={:.4} validation_ce={:.6} bpb={:.6} param_overhead={:.6} eval_mode={}",
            self.model,
            self.tokens_seen,
            self.ratio,
            self.effective_compute,
            self.validation_ce,
            self.bpb,
            self.param_overhead,
            self.eval_mode
        )
    }
}

pub fn validation_record(config: &RunConfig, model: &Model, corpus: &Corpus) -> Result<EvalRecord, Error> {
    let windows = corpus.validation_windows(config.model.seq_len, config.eval.windows)?;
    Ok(evaluate(model, &windows, config.eval_mode())?)
}

pub fn eval_report(state: &Checkpoint, corpus: &Corpus) -> Result<EvalReport, Error> {
    let config = &state.config;
    let record = validation_record(config, &state.model, corpus)?;
    let params = state.model.param_count();
    let tokens_seen = state.step * config.train.batch_size * config.model.seq_len;
    let ratio = tokens_seen as Real / params as Real;
    let overhead = match config.model.lrt {
        Some(_) => param_overhead(&config.model)?.fraction(),
        None => 0.0,
    };
    Ok(EvalReport {
        model: model_id(config),
        tokens_seen,
        ratio,
        effective_compute: effective_compute(ratio, &config.train.mode()),
        validation_ce: record.mean_nats()?,
        bpb: bpb(&record)?,
        param_overhead: overhead,
        eval_mode: format!("{:?}", config.eval.mode).to_lowercase(),
    })
}

pub fn model_id(config: &RunConfig) -> String {
    let m = &config.model;
    let kind = match &m.lrt {
        None => "baseline".to_string(),
        Some(l) => format!("lrt-{:?}", l.projection_sharing).to_lowercase(),
    };
    format!("{}L-d{}-{}", m.n_layers, m.d_model, kind)
}

pub fn checkpoint_path(config: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| config.out.join(CHECKPOINT_FILE), Path::to_path_buf)
}

pub fn generate_text(model: &Model, prompt: &str, n: usize, sampler: Sampler) -> Result<(String, Vec<TokenLog>), Error> {
    let tokens = byte_tokenize(prompt.as_bytes());
    let (out, log) = generate_with_log(model, &tokens, n, sampler)?;
    let bytes = detokenize(&out)?;
    Ok((String::from_utf8_lossy(&bytes).into_owned(), log))
}
