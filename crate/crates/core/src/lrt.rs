//! The recurrent-memory pathway.
//!
//! A position's memory is a source-layer hidden state of an earlier (or, for
//! the two-pass variants, the same) position. It reaches the transformer
//! through two routes: [`kv_project`] maps it into every target layer's key
//! and value space and [`combine_kv`] mixes it with the local keys and values
//! through per-head gates, while [`residual_inject`] adds a scaled copy to the
//! block input before normalization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{KvMode, KvParts, LrtConfig, MemorySource, ModelConfig, ProjectionSharing};
use crate::params::ParamKind;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Real, Result};

/// Parameter initialization rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(Real),
    Zeros,
    Const(Real),
}

/// One entry of a model's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: alloc::string::String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<alloc::string::String>, shape: &[usize], kind: ParamKind, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn shared_k_name() -> &'static str {
    "lrt.w_k_rec"
}

pub fn shared_v_name() -> &'static str {
    "lrt.w_v_rec"
}

/// Parameters added by the recurrent pathway, in initialization order.
pub fn layout(model: &ModelConfig, lrt: &LrtConfig) -> Vec<ParamSpec> {
    let d = model.d_model;
    let kv = model.kv_dim();
    let proj_std = 1.0 / crate::math::sqrt(d as Real);
    let mut specs = Vec::new();
    let inj = lrt.injection;
    if inj.kv_projection && lrt.projection_sharing == ProjectionSharing::Shared {
        if lrt.kv_parts.keys() {
            specs.push(ParamSpec::new(shared_k_name(), &[kv, d], ParamKind::Matrix, Init::Normal(proj_std)));
        }
        if lrt.kv_parts.values() {
            specs.push(ParamSpec::new(shared_v_name(), &[kv, d], ParamKind::Matrix, Init::Normal(proj_std)));
        }
    }
    for l in 1..=model.n_layers {
        if !lrt.targets(l, model.n_layers) {
            continue;
        }
        if inj.kv_projection {
            if lrt.projection_sharing == ProjectionSharing::Layerwise {
                if lrt.kv_parts.keys() {
                    specs.push(ParamSpec::new(format!("lrt.layers.{l}.w_k_rec"), &[kv, d], ParamKind::Matrix, Init::Normal(proj_std)));
                }
                if lrt.kv_parts.values() {
                    specs.push(ParamSpec::new(format!("lrt.layers.{l}.w_v_rec"), &[kv, d], ParamKind::Matrix, Init::Normal(proj_std)));
                }
            }
            specs.push(ParamSpec::new(
                format!("lrt.layers.{l}.w_gate"),
                &[2 * model.n_kv_heads, d],
                ParamKind::Matrix,
                Init::Zeros,
            ));
        }
        if inj.residual_injection {
            specs.push(ParamSpec::new(format!("lrt.layers.{l}.gamma"), &[1], ParamKind::Scalar, Init::Const(lrt.gamma_init)));
        }
    }
    if let MemorySource::LearnedAverage(w) = lrt.memory_source {
        specs.push(ParamSpec::new("lrt.memory_mix", &[w], ParamKind::Vector, Init::Zeros));
    }
    if !lrt.source_average.is_empty() {
        specs.push(ParamSpec::new("lrt.source_mix", &[lrt.source_average.len()], ParamKind::Vector, Init::Zeros));
    }
    specs
}

/// Memory rows for `positions` (0-indexed), read from `history` whose row `r`
/// holds the source state of position `first_row + r`.
///
/// `current` supplies the first-pass state of each queried position and is
/// required by the current-token sources. `mix` holds the learned-average
/// logits.
#[allow(clippy::too_many_arguments)]
pub fn select_memory(
    g: &mut Graph<'_>,
    history: Var,
    first_row: usize,
    positions: &[usize],
    source: MemorySource,
    current: Option<Var>,
    mix: Option<Var>,
) -> Result<Var> {
    let rows = g.shape(history)[0];
    let lagged = |g: &mut Graph<'_>, lag: usize| -> Result<Var> {
        let mut index = Vec::with_capacity(positions.len());
        for &t in positions {
            index.push(match t.checked_sub(lag) {
                None => None,
                Some(p) if p >= first_row && p - first_row < rows => Some(p - first_row),
                Some(p) => {
                    return Err(Error::Partition(format!(
                        "memory for position {t} needs the state of position {p}, which is not in the history"
                    )))
                }
            });
        }
        g.gather_rows(history, &index)
    };
    match source {
        MemorySource::Previous(k) => lagged(g, k),
        MemorySource::LearnedAverage(w) => {
            let mix = mix.ok_or_else(|| Error::Config("learned_average memory needs mixing weights".into()))?;
            let weights = g.softmax_last(mix);
            let mut acc: Option<Var> = None;
            for lag in 1..=w {
                let state = lagged(g, lag)?;
                let wk = g.slice(weights, 0, lag - 1, lag)?;
                let term = g.mul(state, wk)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            Ok(acc.expect("window >= 1"))
        }
        MemorySource::Current => current.ok_or(Error::MissingFirstPass),
        MemorySource::CurrentPlusPrevious => {
            let cur = current.ok_or(Error::MissingFirstPass)?;
            let prev = lagged(g, 1)?;
            g.add(cur, prev)
        }
    }
}

/// `m·W_k_recᵀ` and `m·W_v_recᵀ`; each output row is `n_kv` heads laid out
/// contiguously. A missing matrix yields `None`.
pub fn kv_project(g: &mut Graph<'_>, memory: Var, w_k: Option<Var>, w_v: Option<Var>) -> Result<(Option<Var>, Option<Var>)> {
    let k = w_k.map(|w| g.linear(memory, w)).transpose()?;
    let v = w_v.map(|w| g.linear(memory, w)).transpose()?;
    Ok((k, v))
}

/// `2·sigmoid(x·W_gᵀ)` split into `(g_local, g_rec)`, each `[rows, n_kv]`.
pub fn gates(g: &mut Graph<'_>, x: Var, w_gate: Var, n_kv: usize) -> Result<(Var, Var)> {
    let z = g.linear(x, w_gate)?;
    let s = g.sigmoid(z)?;
    let both = g.scale(s, 2.0);
    let local = g.slice(both, 1, 0, n_kv)?;
    let rec = g.slice(both, 1, n_kv, 2 * n_kv)?;
    Ok((local, rec))
}

/// Multiplies each `d_head` block of `x` (`[rows, heads*d_head]`) by the
/// matching column of `gate` (`[rows, heads]`).
pub fn head_gate(g: &mut Graph<'_>, x: Var, gate: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let rows = shape[0];
    let d_head = shape[1] / heads;
    let x3 = g.reshape(x, &[rows, heads, d_head])?;
    let g3 = g.reshape(gate, &[rows, heads, 1])?;
    let y = g.mul(x3, g3)?;
    g.reshape(y, &[rows, heads * d_head])
}

/// Inputs to [`combine_kv`].
pub struct KvInputs {
    pub k_local: Var,
    pub v_local: Var,
    pub k_rec: Option<Var>,
    pub v_rec: Option<Var>,
    pub g_local: Var,
    pub g_rec: Var,
}

/// Mixes local and recurrent raw keys/values:
/// additive `g_local⊙local + g_rec⊙rec`, or with `replace_local` the
/// recurrent term alone. `kv_parts` limits which side receives memory; the
/// other side keeps its gated local term. A missing recurrent term stands
/// for zero memory.
pub fn combine_kv(g: &mut Graph<'_>, inputs: KvInputs, mode: KvMode, parts: KvParts, n_kv: usize) -> Result<(Var, Var)> {
    let KvInputs {
        k_local,
        v_local,
        k_rec,
        v_rec,
        g_local,
        g_rec,
    } = inputs;
    let side = |g: &mut Graph<'_>, local: Var, rec: Option<Var>, uses_memory: bool| -> Result<Var> {
        if !uses_memory {
            return head_gate(g, local, g_local, n_kv);
        }
        match mode {
            KvMode::Additive => {
                let lt = head_gate(g, local, g_local, n_kv)?;
                match rec {
                    Some(r) => {
                        let rt = head_gate(g, r, g_rec, n_kv)?;
                        g.add(lt, rt)
                    }
                    None => Ok(lt),
                }
            }
            KvMode::ReplaceLocal => match rec {
                Some(r) => head_gate(g, r, g_rec, n_kv),
                None => {
                    let zeros = Tensor::zeros(g.shape(local));
                    Ok(g.constant(zeros))
                }
            },
        }
    };
    let k = side(g, k_local, k_rec, parts.keys())?;
    let v = side(g, v_local, v_rec, parts.values())?;
    Ok((k, v))
}

/// `alpha·x + gamma·m` with scalar parameters `alpha` and `gamma`.
pub fn residual_inject(g: &mut Graph<'_>, x: Var, memory: Option<Var>, alpha: Var, gamma: Option<Var>) -> Result<Var> {
    let scaled = g.mul(x, alpha)?;
    match (memory, gamma) {
        (Some(m), Some(gm)) => {
            let add = g.mul(m, gm)?;
            g.add(scaled, add)
        }
        _ => Ok(scaled),
    }
}

/// Plain-vector memory selection over a full history of source states
/// (`history[p]` is the state of position `p`, 0-indexed).
pub fn select_memory_vec(
    history: &[Vec<Real>],
    t: usize,
    source: MemorySource,
    current: Option<&[Real]>,
    mix_logits: Option<&[Real]>,
    d: usize,
) -> Result<Vec<Real>> {
    let lagged = |lag: usize| -> Vec<Real> {
        match t.checked_sub(lag) {
            Some(p) => history[p].clone(),
            None => vec![0.0; d],
        }
    };
    match source {
        MemorySource::Previous(k) => Ok(lagged(k)),
        MemorySource::LearnedAverage(w) => {
            let logits = mix_logits.ok_or_else(|| Error::Config("learned_average memory needs mixing weights".into()))?;
            let mut weights = logits.to_vec();
            crate::tensor::softmax_in_place(&mut weights);
            let mut out = vec![0.0; d];
            for lag in 1..=w {
                for (o, s) in out.iter_mut().zip(lagged(lag)) {
                    *o += weights[lag - 1] * s;
                }
            }
            Ok(out)
        }
        MemorySource::Current => current.map(<[Real]>::to_vec).ok_or(Error::MissingFirstPass),
        MemorySource::CurrentPlusPrevious => {
            let cur = current.ok_or(Error::MissingFirstPass)?;
            Ok(cur.iter().zip(lagged(1)).map(|(a, b)| a + b).collect())
        }
    }
}
