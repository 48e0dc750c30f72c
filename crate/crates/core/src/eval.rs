//! Metrics and accounting: bits per byte, centered scores, parameter
//! overhead and baseline-equivalent compute.

use alloc::vec::Vec;

use crate::backbone::{self, Model};
use crate::config::ModelConfig;
use crate::lrt;
use crate::tensor::Graph;
use crate::trainer::{self, TrainMode, Visibility};
use crate::{math, Error, Real, Result};

/// Per-token losses in nats and the number of bytes each token covers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRecord {
    pub nats: Vec<Real>,
    pub bytes: Vec<usize>,
}

impl EvalRecord {
    pub fn push(&mut self, nats: Real, bytes: usize) {
        self.nats.push(nats);
        self.bytes.push(bytes);
    }

    pub fn extend_bytes(&mut self, nats: &[Real]) {
        for &n in nats {
            self.push(n, 1);
        }
    }

    pub fn len(&self) -> usize {
        self.nats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nats.is_empty()
    }

    pub fn total_nats(&self) -> Real {
        self.nats.iter().sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.bytes.iter().sum()
    }

    /// Mean cross-entropy per token.
    pub fn mean_nats(&self) -> Result<Real> {
        if self.is_empty() {
            return Err(Error::EmptyRecord);
        }
        Ok(self.total_nats() / self.len() as Real)
    }
}

/// `Σℓ / (ln 2 · Σb)`.
pub fn bpb(record: &EvalRecord) -> Result<Real> {
    if record.is_empty() || record.total_bytes() == 0 {
        return Err(Error::EmptyRecord);
    }
    Ok(record.total_nats() / (math::LN_2 * record.total_bytes() as Real))
}

/// `(a − r) / (1 − r)`. Values above 1 are read as percentages.
pub fn centered_score(accuracy: Real, random: Real) -> Result<Real> {
    let pct = |v: Real| if v > 1.0 { v / 100.0 } else { v };
    let (a, r) = (pct(accuracy), pct(random));
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Domain {
            op: "centered_score",
            value: random,
        });
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Domain {
            op: "centered_score",
            value: accuracy,
        });
    }
    Ok((a - r) / (1.0 - r))
}

/// Parameter counts of a memory-enabled configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Overhead {
    pub baseline: usize,
    pub added: usize,
    /// Added parameters excluding the gate matrices.
    pub added_without_gates: usize,
}

impl Overhead {
    /// Added over baseline.
    pub fn fraction(&self) -> Real {
        self.added as Real / self.baseline as Real
    }

    /// Added over the memory-enabled total.
    pub fn fraction_of_total(&self) -> Real {
        self.added as Real / (self.baseline + self.added) as Real
    }

    pub fn fraction_without_gates(&self) -> Real {
        self.added_without_gates as Real / self.baseline as Real
    }
}

/// Counts from the parameter layout, without allocating any tensor.
pub fn param_overhead(config: &ModelConfig) -> Result<Overhead> {
    config.validate()?;
    let lc = config
        .lrt
        .as_ref()
        .ok_or_else(|| Error::Config("parameter overhead needs a memory configuration".into()))?;
    let baseline = backbone::backbone_layout(config).iter().map(lrt::ParamSpec::numel).sum();
    let specs = lrt::layout(config, lc);
    let added = specs.iter().map(lrt::ParamSpec::numel).sum();
    let added_without_gates = specs
        .iter()
        .filter(|s| !s.name.ends_with("w_gate"))
        .map(lrt::ParamSpec::numel)
        .sum();
    Ok(Overhead {
        baseline,
        added,
        added_without_gates,
    })
}

/// Baseline-equivalent training compute of a run at ratio `ratio`.
pub fn effective_compute(ratio: Real, mode: &TrainMode) -> Real {
    match mode {
        TrainMode::Interleaved { .. } => 2.0 * ratio,
        _ => ratio,
    }
}

/// How validation windows are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    /// The exact recurrence, as at inference.
    #[default]
    Sequential,
    /// One parallel zero-memory forward.
    Parallel,
    /// The interleaved training forward without gradients: each position is
    /// scored by the refinement stage that recomputes it.
    Interleaved { stages: usize, visibility: Visibility },
}

/// Per-token validation losses over `(inputs, targets)` windows.
pub fn evaluate(model: &Model, windows: &[(Vec<usize>, Vec<usize>)], mode: EvalMode) -> Result<EvalRecord> {
    let mut record = EvalRecord::default();
    for (x, y) in windows {
        let mut g = Graph::with_params(&model.params);
        let losses = match mode {
            EvalMode::Sequential if model.config.lrt.is_some() => trainer::sequential_unroll(&mut g, model, x, y)?.losses,
            EvalMode::Interleaved { stages, visibility } if model.config.lrt.is_some() => {
                let partition = trainer::partition_strided(x.len(), stages)?;
                record.extend_bytes(&trainer::refined_token_losses(&mut g, model, x, y, &partition, visibility)?);
                continue;
            }
            _ => {
                let positions: Vec<usize> = (0..x.len()).collect();
                let out = model.forward(&mut g, backbone::ForwardInput::new(x, &positions))?;
                g.cross_entropy_rows(out.logits, y)?
            }
        };
        record.extend_bytes(g.value(losses).data());
    }
    Ok(record)
}
