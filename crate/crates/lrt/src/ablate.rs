//! Ablation sweeps: named variants of a base config trained under the same
//! seed and budget, reported as one table.

use std::path::Path;

use lrt_core::{MemorySource, Real};
use serde::Deserialize;
use toml::Table;

use crate::config::{apply_override, RunConfig};
use crate::run::{self, TrainOptions};
use crate::Error;

/// One row of a sweep: overrides applied on top of the base config.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: Vec<String>,
    /// Reference figure from the published ablation, reported alongside.
    #[serde(default)]
    pub reference_bpb: Option<Real>,
}

impl Variant {
    fn new(name: impl Into<String>, set: &[&str], reference_bpb: Real) -> Self {
        Self {
            name: name.into(),
            set: set.iter().map(|s| s.to_string()).collect(),
            reference_bpb: Some(reference_bpb),
        }
    }
}

/// `key = [values]` shorthand: one variant per value.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySweep {
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub variant: Vec<Variant>,
    #[serde(default)]
    pub sweep: Option<KeySweep>,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(format!("sweep: {e}")))
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v = self.variant.clone();
        if let Some(s) = &self.sweep {
            for value in &s.values {
                let text = match value {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                v.push(Variant {
                    name: format!("{}={}", s.key, text),
                    set: vec![format!("{}={}", s.key, other_to_toml(value))],
                    reference_bpb: None,
                });
            }
        }
        v
    }
}

fn other_to_toml(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => format!("{s:?}"),
        other => other.to_string(),
    }
}

pub const PRESETS: [&str; 6] = ["source_layer", "memory_source", "injection", "kv_variants", "subsets", "chunked"];

const BASELINE: [&str; 2] = ["model.lrt=none", "train.strategy=baseline"];

/// Depth-relative analog of layer `of_20` in the 20-layer reference model.
fn depth_analog(of_20: usize, n_layers: usize) -> usize {
    ((of_20 * n_layers + 10) / 20).clamp(1, n_layers)
}

/// Built-in sweeps mirroring the published ablation tables, scaled to the
/// base config's depth and sequence length.
pub fn preset(name: &str, base: &RunConfig) -> Result<SweepSpec, Error> {
    let l = base.model.n_layers;
    let t = base.model.seq_len;
    let variant = match name {
        "source_layer" => {
            let layers: Vec<usize> = [8, 12, 16, 20].iter().map(|&x| depth_analog(x, l)).collect();
            let mut v = vec![Variant::new("baseline", &BASELINE, 0.767)];
            for ((of_20, layer), bpb) in [8, 12, 16, 20].iter().zip(&layers).zip([0.757, 0.754, 0.756, 0.755]) {
                v.push(Variant::new(
                    format!("layer {of_20}/20 -> {layer}/{l}"),
                    &[&format!("model.lrt.source_layer={layer}"), "model.lrt.source_average=[]"],
                    bpb,
                ));
            }
            let mut avg = layers.clone();
            avg.dedup();
            let list: Vec<String> = avg.iter().map(|x| x.to_string()).collect();
            v.push(Variant::new(
                "learned average of the above",
                &[&format!("model.lrt.source_average=[{}]", list.join(","))],
                0.754,
            ));
            v
        }
        "memory_source" => {
            let mut v = vec![Variant::new("baseline", &BASELINE, 0.767)];
            for (src, bpb) in [
                ("previous:4", 0.760),
                ("previous:3", 0.760),
                ("previous:2", 0.757),
                ("previous:1", 0.754),
                ("learned_average:4", 0.754),
                ("current", 0.754),
                ("current_plus_previous", 0.752),
            ] {
                v.push(Variant::new(src, &[&format!("model.lrt.memory_source=\"{src}\"")], bpb));
            }
            v
        }
        "injection" => vec![
            Variant::new("baseline", &BASELINE, 0.767),
            Variant::new("residual injection", &["model.lrt.injection=[\"residual_injection\"]"], 0.756),
            Variant::new("kv projection", &["model.lrt.injection=[\"kv_projection\"]"], 0.755),
            Variant::new(
                "kv projection + residual injection",
                &["model.lrt.injection=[\"kv_projection\",\"residual_injection\"]"],
                0.754,
            ),
        ],
        "kv_variants" => {
            let kv = "model.lrt.injection=[\"kv_projection\"]";
            vec![
                Variant::new("baseline", &BASELINE, 0.767),
                Variant::new("value only projection", &[kv, "model.lrt.kv_parts=\"values_only\""], 0.756),
                Variant::new("key only projection", &[kv, "model.lrt.kv_parts=\"keys_only\""], 0.762),
                Variant::new("kv projection", &[kv], 0.755),
                Variant::new(
                    "kv projection, replace local kv, early 1/3 layers",
                    &[kv, "model.lrt.kv_mode=\"replace_local\"", "model.lrt.target_layers=\"early_third\""],
                    0.760,
                ),
                Variant::new("residual injection", &["model.lrt.injection=[\"residual_injection\"]"], 0.756),
                Variant::new(
                    "kv projection + residual injection",
                    &["model.lrt.injection=[\"kv_projection\",\"residual_injection\"]"],
                    0.754,
                ),
            ]
        }
        "subsets" => {
            let mut v = vec![Variant::new("baseline", &BASELINE, 0.767)];
            for s in [2usize, 4, 8] {
                v.push(Variant::new(format!("S={s}"), &["train.strategy=interleaved", &format!("train.stages={s}")], 0.754));
            }
            v
        }
        "chunked" => {
            // The reference chunks are 64 and 256 of 2048 positions.
            let small = (t / 32).max(1);
            let large = (t / 8).max(1);
            vec![
                Variant::new("baseline", &BASELINE, 0.767),
                Variant::new("interleaved", &["train.strategy=interleaved"], 0.754),
                Variant::new(format!("chunked C={small}"), &["train.strategy=chunked", &format!("train.chunk={small}")], 0.765),
                Variant::new(format!("chunked C={large}"), &["train.strategy=chunked", &format!("train.chunk={large}")], 0.767),
            ]
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(SweepSpec {
        title: name.to_string(),
        variant,
        sweep: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub variant: String,
    pub strategy: String,
    pub memory_source: String,
    pub forwards_per_token: usize,
    /// Training token-forwards per sequence.
    pub token_forwards: usize,
    pub params: usize,
    pub param_overhead: Real,
    pub validation_ce: Real,
    pub bpb: Real,
    pub reference_bpb: Option<Real>,
}

pub const HEADER: [&str; 10] = [
    "variant",
    "strategy",
    "memory_source",
    "forwards_per_token",
    "token_forwards_per_sequence",
    "params",
    "param_overhead",
    "validation_ce",
    "bpb",
    "reference_bpb",
];

impl Row {
    fn fields(&self) -> [String; 10] {
        [
            self.variant.clone(),
            self.strategy.clone(),
            self.memory_source.clone(),
            self.forwards_per_token.to_string(),
            self.token_forwards.to_string(),
            self.params.to_string(),
            format!("{:.6}", self.param_overhead),
            format!("{:.6}", self.validation_ce),
            format!("{:.6}", self.bpb),
            self.reference_bpb.map_or_else(String::new, |b| format!("{b:.3}")),
        ]
    }

    /// Structured-text form: `key=value` pairs, values with spaces quoted.
    pub fn text(&self) -> String {
        HEADER
            .iter()
            .zip(self.fields())
            .map(|(k, v)| if v.contains(' ') { format!("{k}={v:?}") } else { format!("{k}={v}") })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn csv(rows: &[Row]) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).map_err(|e| Error::Report(e.to_string()))?;
    for r in rows {
        w.write_record(r.fields()).map_err(|e| Error::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn slug(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

/// Resolves every variant's config; fails before any training if one is
/// invalid (unknown key, bad value).
pub fn resolve(base: &RunConfig, spec: &SweepSpec) -> Result<Vec<(Variant, RunConfig)>, Error> {
    let variants = spec.variants();
    if variants.is_empty() {
        return Err(Error::Config("sweep has no variants".into()));
    }
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let mut table: Table = base.to_table();
        for o in &v.set {
            apply_override(&mut table, o).map_err(|e| Error::Config(format!("variant {:?}: {e}", v.name)))?;
        }
        let mut cfg = RunConfig::from_table(table).map_err(|e| Error::Config(format!("variant {:?}: {e}", v.name)))?;
        cfg.out = base.out.join(slug(&v.name));
        out.push((v, cfg));
    }
    Ok(out)
}

/// Trains and evaluates every variant in order.
pub fn run(base: &RunConfig, spec: &SweepSpec, echo: bool) -> Result<Vec<Row>, Error> {
    let resolved = resolve(base, spec)?;
    let mut rows = Vec::with_capacity(resolved.len());
    for (v, cfg) in resolved {
        if echo {
            eprintln!("variant {:?}", v.name);
        }
        let state = run::initial_checkpoint(&cfg)?;
        let outcome = run::train(
            state,
            &TrainOptions {
                echo: false,
                ..TrainOptions::default()
            },
        )?;
        let report = match outcome.report {
            Some(r) => r,
            None => run::eval_report(&outcome.checkpoint, &run::load_corpus(&cfg)?)?,
        };
        let memory = cfg.model.lrt.as_ref().map(|l| l.memory_source);
        rows.push(Row {
            variant: v.name.clone(),
            strategy: format!("{:?}", cfg.train.strategy).to_lowercase(),
            memory_source: memory.map_or_else(|| "none".to_string(), |m| m.to_string()),
            forwards_per_token: memory.map_or(1, MemorySource::forwards_per_token),
            token_forwards: cfg.train.mode().token_forwards(cfg.model.seq_len, memory),
            params: outcome.checkpoint.model.param_count(),
            param_overhead: report.param_overhead,
            validation_ce: report.validation_ce,
            bpb: report.bpb,
            reference_bpb: v.reference_bpb,
        });
    }
    Ok(rows)
}

/// Writes `<out>/<name>.csv` and `<out>/<name>.txt`.
pub fn write_tables(out: &Path, name: &str, rows: &[Row]) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io(out.to_path_buf(), e))?;
    let csv_path = out.join(format!("{name}.csv"));
    std::fs::write(&csv_path, csv(rows)?).map_err(|e| Error::Io(csv_path, e))?;
    let text: String = rows.iter().map(|r| r.text() + "\n").collect();
    let txt_path = out.join(format!("{name}.txt"));
    std::fs::write(&txt_path, text).map_err(|e| Error::Io(txt_path, e))
}
