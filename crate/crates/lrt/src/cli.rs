//! The `lrt` command line. Exit codes: 0 success, 1 usage or configuration
//! error, 2 oracle failure.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::Ordering;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lrt_core::infer::Sampler;

use crate::ablate::{self, SweepSpec};
use crate::checkpoint::Checkpoint;
use crate::config::{apply_override, EvalModeName, RunConfig};
use crate::run::{self, TrainOptions};
use crate::{oracle, Error};

#[derive(Debug, Parser)]
#[command(name = "lrt", version, about = "Latent recurrent transformer: train, evaluate, ablate, check, generate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.stages=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(out) = &self.out {
            o.push(format!("out={}", toml::Value::String(out.display().to_string())));
        }
        o
    }

    fn resolve(&self, base: &RunConfig) -> Result<RunConfig, Error> {
        RunConfig::load_over(base, self.config.as_deref(), &self.overrides())
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Sequential,
    Parallel,
    Interleaved,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes train.log, checkpoint.lrt and eval.txt under the
    /// output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint (its config is used; --set may not
        /// change it).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps of this invocation.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Do not echo log lines to stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Validation cross-entropy and bits per byte of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.lrt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Train every variant of a sweep and write a results table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Built-in sweep: source_layer, memory_source, injection,
        /// kv_variants, subsets, chunked.
        #[arg(long, conflicts_with = "sweep")]
        preset: Option<String>,
        /// TOML sweep file with `[[variant]]` entries or a `[sweep]` key list.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Run the oracle suite on a tiny model; exit 2 on any failure.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Negative control: drop refinement write-back.
        #[arg(long, hide = true)]
        corrupt_write_back: bool,
    },
    /// Continue a prompt with a trained checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        /// Print per-token top logit and memory norm to stderr.
        #[arg(long)]
        log: bool,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn checkpoint_config(ck: &Checkpoint, common: &Common) -> Result<RunConfig, Error> {
    let mut table = ck.config.to_table();
    for o in common.overrides() {
        apply_override(&mut table, &o)?;
    }
    let cfg = RunConfig::from_table(table)?;
    if cfg.model != ck.config.model {
        return Err(Error::Config("model settings cannot be overridden for an existing checkpoint".into()));
    }
    Ok(cfg)
}

fn load_checkpoint(common: &Common, explicit: Option<&std::path::Path>) -> Result<(Checkpoint, RunConfig), Error> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => run::checkpoint_path(&common.resolve(&RunConfig::default())?, None),
    };
    let ck = Checkpoint::load(&path)?;
    let cfg = checkpoint_config(&ck, common)?;
    Ok((ck, cfg))
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<i32, Error> {
    let io = |e| Error::Io(PathBuf::from("<stdout>"), e);
    match command {
        Command::Train {
            common,
            resume,
            max_steps,
            quiet,
        } => {
            let state = match resume {
                Some(p) => {
                    let mut ck = Checkpoint::load(&p)?;
                    let cfg = checkpoint_config(&ck, &common)?;
                    if cfg.train != ck.config.train || cfg.data != ck.config.data || cfg.seed != ck.config.seed {
                        return Err(Error::Config("a resumed run must keep the checkpoint's train, data and seed settings".into()));
                    }
                    ck.config = cfg;
                    ck
                }
                None => run::initial_checkpoint(&common.resolve(&RunConfig::default())?)?,
            };
            let opts = TrainOptions {
                max_steps,
                skip_eval: false,
                echo: !quiet,
            };
            let outcome = run::train(state, &opts)?;
            match outcome.report {
                Some(r) => writeln!(stdout, "{}", r.row()).map_err(io)?,
                None => writeln!(
                    stdout,
                    "stopped at step {} of {}; resume with --resume {}",
                    outcome.checkpoint.step,
                    outcome.checkpoint.total_steps,
                    outcome.checkpoint.config.out.join(run::CHECKPOINT_FILE).display()
                )
                .map_err(io)?,
            }
            Ok(0)
        }
        Command::Eval { common, checkpoint, mode } => {
            let (mut ck, mut cfg) = load_checkpoint(&common, checkpoint.as_deref())?;
            if let Some(m) = mode {
                cfg.eval.mode = match m {
                    ModeArg::Sequential => EvalModeName::Sequential,
                    ModeArg::Parallel => EvalModeName::Parallel,
                    ModeArg::Interleaved => EvalModeName::Interleaved,
                };
            }
            ck.config = cfg;
            let corpus = run::load_corpus(&ck.config)?;
            writeln!(stdout, "{}", run::eval_report(&ck, &corpus)?.row()).map_err(io)?;
            Ok(0)
        }
        Command::Ablate { common, preset, sweep } => {
            let base = common.resolve(&RunConfig::default())?;
            let (name, spec) = match (preset, sweep) {
                (Some(p), None) => (p.clone(), ablate::preset(&p, &base)?),
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io(path.clone(), e))?;
                    let spec = SweepSpec::from_toml(&text)?;
                    let name = if spec.title.is_empty() { "sweep".to_string() } else { spec.title.clone() };
                    (name, spec)
                }
                _ => return Err(Error::Config("ablate needs exactly one of --preset or --sweep".into())),
            };
            let rows = ablate::run(&base, &spec, true)?;
            ablate::write_tables(&base.out, &name, &rows)?;
            for r in &rows {
                writeln!(stdout, "{}", r.text()).map_err(io)?;
            }
            Ok(0)
        }
        Command::OracleCheck {
            common,
            corrupt_write_back,
        } => {
            let cfg = common.resolve(&RunConfig::tiny())?;
            lrt_core::trainer::fault::CORRUPT_WRITE_BACK.store(corrupt_write_back, Ordering::Relaxed);
            let model = lrt_core::backbone::Model::init(cfg.model.clone(), cfg.seed)?;
            let checks = oracle::run(&model, cfg.seed)?;
            for c in &checks {
                writeln!(stdout, "{}", c.line()).map_err(io)?;
            }
            Ok(if oracle::all_passed(&checks) { 0 } else { 2 })
        }
        Command::Generate {
            common,
            checkpoint,
            prompt,
            tokens,
            temperature,
            log,
        } => {
            let (ck, cfg) = load_checkpoint(&common, checkpoint.as_deref())?;
            let sampler = match temperature {
                Some(t) => Sampler::Temperature {
                    temperature: t as lrt_core::Real,
                    seed: cfg.seed,
                },
                None => Sampler::Greedy,
            };
            let (text, entries) = run::generate_text(&ck.model, &prompt, tokens, sampler)?;
            if log {
                for (i, e) in entries.iter().enumerate() {
                    eprintln!("token={} id={} top_logit={:.4} memory_norm={:.4}", i, e.token, e.top_logit, e.memory_norm);
                }
            }
            writeln!(stdout, "{text}").map_err(io)?;
            Ok(0)
        }
    }
}
