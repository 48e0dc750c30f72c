//! Training regimes: interleaved parallel refinement, chunked recurrence and
//! the exact sequential unroll, plus AdamW and the learning-rate schedule.
//!
//! Positions are 0-indexed here. The strided subset `I_s` (1-indexed
//! `{s, s+S, ...}`) is stored as `{s-1, s-1+S, ...}`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::Ordering;

use crate::backbone::{Context, ForwardInput, LayerKv, Memory, Model};
use crate::config::MemorySource;
use crate::lrt;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Gradients, Graph, Tensor, Var};
use crate::{math, Error, Real, Result};

/// Disjoint subsets covering positions `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionSpec {
    pub len: usize,
    pub subsets: Vec<Vec<usize>>,
}

impl PartitionSpec {
    /// Checks disjointness and coverage of `0..len`.
    pub fn new(len: usize, subsets: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; len];
        for s in &subsets {
            if s.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Partition(format!("subset {s:?} is not strictly increasing")));
            }
            for &p in s {
                if p >= len {
                    return Err(Error::Partition(format!("position {p} outside 0..{len}")));
                }
                if core::mem::replace(&mut seen[p], true) {
                    return Err(Error::Partition(format!("position {p} appears twice")));
                }
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("position {p} is not covered")));
        }
        Ok(Self { len, subsets })
    }

    pub fn stages(&self) -> usize {
        self.subsets.len()
    }
}

/// `I_s = {s, s+S, s+2S, ...}` (1-indexed) for `s = 1..=S`.
pub fn partition_strided(len: usize, stages: usize) -> Result<PartitionSpec> {
    if stages == 0 || stages > len {
        return Err(Error::Partition(format!("subset count {stages} must lie in [1, {len}]")));
    }
    let subsets = (0..stages).map(|s| (s..len).step_by(stages).collect()).collect();
    Ok(PartitionSpec { len, subsets })
}

/// Which buffer rows a refined position may attend to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Visibility {
    /// Same-subset predecessors are seen as freshly recomputed rows; their
    /// buffer rows are hidden.
    #[default]
    Fresh,
    /// Every predecessor is read from the buffer.
    Stale,
}

/// Per-layer keys and values plus source states of a whole sequence.
#[derive(Clone, Debug)]
pub struct SequenceBuffer {
    /// Combined keys before normalization and rotation, `[T, kv]` per layer.
    pub raw_k: Vec<Var>,
    /// Processed keys and values, `[T, kv]` per layer.
    pub kv: Vec<LayerKv>,
    /// Source-layer states `[T, d]`; `None` for a model without memory.
    pub source: Option<Var>,
    pub stage: usize,
    pub len: usize,
}

impl SequenceBuffer {
    fn context(&self, hidden: Vec<bool>) -> Context {
        Context {
            positions: (0..self.len).collect(),
            hidden,
            layers: self.kv.clone(),
        }
    }

    /// Replaces rows `positions` by the rows of `fresh` (same order).
    fn write(g: &mut Graph<'_>, old: Var, fresh: Var, positions: &[usize]) -> Result<Var> {
        if fault::CORRUPT_WRITE_BACK.load(Ordering::Relaxed) {
            return Ok(old);
        }
        let len = g.shape(old)[0];
        let joined = g.concat(&[old, fresh], 0)?;
        let mut index: Vec<Option<usize>> = (0..len).map(Some).collect();
        for (j, &p) in positions.iter().enumerate() {
            index[p] = Some(len + j);
        }
        g.gather_rows(joined, &index)
    }
}

/// Negative-control hooks for the oracle checks. Process-wide.
#[doc(hidden)]
pub mod fault {
    use core::sync::atomic::AtomicBool;

    /// When set, refinement write-back leaves the buffer unchanged.
    pub static CORRUPT_WRITE_BACK: AtomicBool = AtomicBool::new(false);
}

/// Loss components of one step, averaged over the batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub init: Real,
    pub subsets: Vec<Real>,
    pub combined: Real,
    pub token_forward_count: usize,
}

impl LossBreakdown {
    /// `(L_init + Σ L_s) / (S + 1)`.
    pub fn recombine(&self) -> Real {
        (self.init + self.subsets.iter().sum::<Real>()) / (self.subsets.len() + 1) as Real
    }
}

/// Graph nodes of one sequence's losses.
pub struct StepLoss {
    pub combined: Var,
    pub init: Var,
    pub subsets: Vec<Var>,
    pub token_forward_count: usize,
}

fn positions_of(len: usize) -> Vec<usize> {
    (0..len).collect()
}

fn check_targets(inputs: &[usize], targets: &[usize]) -> Result<()> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "targets",
            lhs: vec![inputs.len()],
            rhs: vec![targets.len()],
        });
    }
    Ok(())
}

/// Full parallel forward with zero memory. Returns the populated buffer and
/// the mean cross-entropy over all positions.
pub fn init_forward(g: &mut Graph<'_>, model: &Model, inputs: &[usize], targets: &[usize]) -> Result<(SequenceBuffer, Var)> {
    check_targets(inputs, targets)?;
    let positions = positions_of(inputs.len());
    let out = model.forward(g, ForwardInput::new(inputs, &positions))?;
    let loss = g.cross_entropy(out.logits, targets)?;
    Ok((
        SequenceBuffer {
            raw_k: out.raw_k,
            kv: out.kv,
            source: out.source,
            stage: 0,
            len: inputs.len(),
        },
        loss,
    ))
}

/// Memory for `positions` read from the buffer's source states.
fn buffer_memory(g: &mut Graph<'_>, model: &Model, buffer: &SequenceBuffer, positions: &[usize]) -> Result<Memory> {
    let (Some(lc), Some(states)) = (&model.config.lrt, buffer.source) else {
        return Ok(Memory::Zero);
    };
    let current = if lc.memory_source.needs_first_pass() {
        let idx: Vec<Option<usize>> = positions.iter().map(|&p| Some(p)).collect();
        Some(g.gather_rows(states, &idx)?)
    } else {
        None
    };
    let mix = model.memory_mix_var(g);
    let m = lrt::select_memory(g, states, 0, positions, lc.memory_source, current, mix)?;
    Ok(Memory::Rows(m))
}

/// Recomputes `subset` against `buffer` and writes the refined rows back.
/// Returns the refined buffer and the mean cross-entropy over `subset`.
pub fn refine_subset(
    g: &mut Graph<'_>,
    model: &Model,
    buffer: &SequenceBuffer,
    subset: &[usize],
    inputs: &[usize],
    targets: &[usize],
    visibility: Visibility,
) -> Result<(SequenceBuffer, Var)> {
    let (next, rows) = refine_rows(g, model, buffer, subset, inputs, targets, visibility)?;
    let loss = g.mean(rows);
    Ok((next, loss))
}

/// [`refine_subset`] with per-position losses in subset order.
fn refine_rows(
    g: &mut Graph<'_>,
    model: &Model,
    buffer: &SequenceBuffer,
    subset: &[usize],
    inputs: &[usize],
    targets: &[usize],
    visibility: Visibility,
) -> Result<(SequenceBuffer, Var)> {
    check_targets(inputs, targets)?;
    if subset.is_empty() || subset.iter().any(|&p| p >= buffer.len) || subset.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Partition(format!("subset {subset:?} is not an increasing subset of 0..{}", buffer.len)));
    }
    let memory = buffer_memory(g, model, buffer, subset)?;
    let tokens: Vec<usize> = subset.iter().map(|&p| inputs[p]).collect();
    let sub_targets: Vec<usize> = subset.iter().map(|&p| targets[p]).collect();
    let mut hidden = vec![false; buffer.len];
    if visibility == Visibility::Fresh {
        for &p in subset {
            hidden[p] = true;
        }
    }
    let context = buffer.context(hidden);
    let input = ForwardInput::new(&tokens, subset)
        .with_memory(memory)
        .with_context(&context)
        .isolated(visibility == Visibility::Stale);
    let out = model.forward(g, input)?;
    let loss = g.cross_entropy_rows(out.logits, &sub_targets)?;

    let mut raw_k = Vec::with_capacity(buffer.raw_k.len());
    let mut kv = Vec::with_capacity(buffer.kv.len());
    for l in 0..buffer.kv.len() {
        raw_k.push(SequenceBuffer::write(g, buffer.raw_k[l], out.raw_k[l], subset)?);
        kv.push(LayerKv {
            k: SequenceBuffer::write(g, buffer.kv[l].k, out.kv[l].k, subset)?,
            v: SequenceBuffer::write(g, buffer.kv[l].v, out.kv[l].v, subset)?,
        });
    }
    let source = match (buffer.source, out.source) {
        (Some(old), Some(fresh)) => Some(SequenceBuffer::write(g, old, fresh, subset)?),
        _ => None,
    };
    Ok((
        SequenceBuffer {
            raw_k,
            kv,
            source,
            stage: buffer.stage + 1,
            len: buffer.len,
        },
        loss,
    ))
}

/// One interleaved step on one sequence: init pass, `S` refinements, and
/// the combined loss `(L_init + Σ L_s) / (S + 1)`.
pub fn interleaved_loss(
    g: &mut Graph<'_>,
    model: &Model,
    inputs: &[usize],
    targets: &[usize],
    partition: &PartitionSpec,
    visibility: Visibility,
) -> Result<StepLoss> {
    if partition.len != inputs.len() {
        return Err(Error::Partition(format!("partition covers {} positions, sequence has {}", partition.len, inputs.len())));
    }
    let (mut buffer, init) = init_forward(g, model, inputs, targets)?;
    let mut subsets = Vec::with_capacity(partition.stages());
    let mut total = init;
    let mut count = inputs.len();
    for subset in &partition.subsets {
        let (next, loss) = refine_subset(g, model, &buffer, subset, inputs, targets, visibility)?;
        buffer = next;
        total = g.add(total, loss)?;
        subsets.push(loss);
        count += subset.len();
    }
    let combined = g.scale(total, 1.0 / (partition.stages() + 1) as Real);
    Ok(StepLoss {
        combined,
        init,
        subsets,
        token_forward_count: count,
    })
}

/// Per-position losses of the refinement stages, in position order: each
/// position is scored by the stage that refines it.
pub fn refined_token_losses(
    g: &mut Graph<'_>,
    model: &Model,
    inputs: &[usize],
    targets: &[usize],
    partition: &PartitionSpec,
    visibility: Visibility,
) -> Result<Vec<Real>> {
    if partition.len != inputs.len() {
        return Err(Error::Partition(format!("partition covers {} positions, sequence has {}", partition.len, inputs.len())));
    }
    let (mut buffer, _) = init_forward(g, model, inputs, targets)?;
    let mut out = vec![0.0; inputs.len()];
    for subset in &partition.subsets {
        let (next, rows) = refine_rows(g, model, &buffer, subset, inputs, targets, visibility)?;
        buffer = next;
        for (&p, &l) in subset.iter().zip(g.value(rows).data()) {
            out[p] = l;
        }
    }
    Ok(out)
}

/// Chunked recurrence on one sequence. Every position of chunk `j` receives
/// the source state of the last position of chunk `j-1` (zero for the first
/// chunk) and attends to all earlier chunks' keys and values.
pub fn chunked_loss(g: &mut Graph<'_>, model: &Model, inputs: &[usize], targets: &[usize], chunk: usize) -> Result<StepLoss> {
    check_targets(inputs, targets)?;
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let len = inputs.len();
    let mut context = Context::default();
    let mut carried: Option<Var> = None;
    let mut losses = Vec::new();
    for start in (0..len).step_by(chunk) {
        let end = (start + chunk).min(len);
        let positions: Vec<usize> = (start..end).collect();
        let memory = match carried {
            Some(state) => {
                let last = g.shape(state)[0] - 1;
                Memory::Rows(g.gather_rows(state, &vec![Some(last); end - start])?)
            }
            None => Memory::Zero,
        };
        let mut input = ForwardInput::new(&inputs[start..end], &positions).with_memory(memory);
        if start > 0 {
            input = input.with_context(&context);
        }
        let out = model.forward(g, input)?;
        let ce = g.cross_entropy_rows(out.logits, &targets[start..end])?;
        losses.push(ce);
        carried = out.source;
        if context.layers.is_empty() {
            context.layers = out.kv;
        } else {
            for (acc, new) in context.layers.iter_mut().zip(&out.kv) {
                acc.k = g.concat(&[acc.k, new.k], 0)?;
                acc.v = g.concat(&[acc.v, new.v], 0)?;
            }
        }
        context.positions.extend(start..end);
    }
    let all = g.concat(&losses, 0)?;
    let loss = g.mean(all);
    Ok(StepLoss {
        combined: loss,
        init: loss,
        subsets: Vec::new(),
        token_forward_count: len,
    })
}

/// Plain causal forward with zero memory.
pub fn baseline_loss(g: &mut Graph<'_>, model: &Model, inputs: &[usize], targets: &[usize]) -> Result<StepLoss> {
    let (_, loss) = init_forward(g, model, inputs, targets)?;
    Ok(StepLoss {
        combined: loss,
        init: loss,
        subsets: Vec::new(),
        token_forward_count: inputs.len(),
    })
}

/// Result of [`sequential_unroll`].
pub struct Unroll {
    /// Cross-entropy of each position, `[T]`.
    pub losses: Var,
    /// Mean of `losses`.
    pub loss: Var,
    /// Final source state of each position, `[1, d]` each; empty without memory.
    pub chain: Vec<Var>,
    pub logits: Vec<Var>,
    pub token_forward_count: usize,
}

/// Memory at position `t` from the final states of earlier positions.
/// `first_pass` is the current position's first-pass state.
pub(crate) fn chain_memory(
    g: &mut Graph<'_>,
    model: &Model,
    chain: &[Var],
    t: usize,
    source: MemorySource,
    first_pass: Option<Var>,
) -> Result<Memory> {
    let span = source.max_lag().min(t);
    if span == 0 && first_pass.is_none() {
        return Ok(Memory::Zero);
    }
    let mix = model.memory_mix_var(g);
    let history = if span == 0 {
        let d = model.config.d_model;
        g.constant(Tensor::zeros(&[1, d]))
    } else {
        g.concat(&chain[t - span..t], 0)?
    };
    let first_row = if span == 0 { t } else { t - span };
    let m = lrt::select_memory(g, history, first_row, &[t], source, first_pass, mix)?;
    Ok(Memory::Rows(m))
}

/// The exact token-level recurrence: position `t` consumes memory built from
/// the final states of positions before `t` and attends to their final keys
/// and values. Memory kinds that read the current position run two passes
/// per token; the first pass sees the lag-1 memory and the second injects
/// the first pass's state.
pub fn sequential_unroll(g: &mut Graph<'_>, model: &Model, inputs: &[usize], targets: &[usize]) -> Result<Unroll> {
    check_targets(inputs, targets)?;
    let source = model.config.lrt.as_ref().map(|l| l.memory_source);
    let mut context = Context::default();
    let mut chain: Vec<Var> = Vec::new();
    let mut logits = Vec::new();
    let mut losses = Vec::new();
    let mut count = 0;
    for t in 0..inputs.len() {
        let pos = [t];
        let tok = [inputs[t]];
        let ctx = (t > 0).then_some(&context);
        let run = |g: &mut Graph<'_>, memory: Memory| {
            let mut input = ForwardInput::new(&tok, &pos).with_memory(memory);
            if let Some(c) = ctx {
                input = input.with_context(c);
            }
            model.forward(g, input)
        };
        let out = match source {
            None => run(g, Memory::Zero)?,
            Some(src) if src.needs_first_pass() => {
                let lagged = chain_memory(g, model, &chain, t, MemorySource::Previous(1), None)?;
                let first = run(g, lagged)?;
                count += 1;
                let memory = chain_memory(g, model, &chain, t, src, first.source)?;
                run(g, memory)?
            }
            Some(src) => {
                let memory = chain_memory(g, model, &chain, t, src, None)?;
                run(g, memory)?
            }
        };
        count += 1;
        losses.push(g.cross_entropy_rows(out.logits, &targets[t..t + 1])?);
        logits.push(out.logits);
        if let Some(s) = out.source {
            chain.push(s);
        }
        if context.layers.is_empty() {
            context.layers = out.kv;
        } else {
            for (acc, new) in context.layers.iter_mut().zip(&out.kv) {
                acc.k = g.concat(&[acc.k, new.k], 0)?;
                acc.v = g.concat(&[acc.v, new.v], 0)?;
            }
        }
        context.positions.push(t);
    }
    let all = g.concat(&losses, 0)?;
    let loss = g.mean(all);
    Ok(Unroll {
        losses: all,
        loss,
        chain,
        logits,
        token_forward_count: count,
    })
}

/// How a training step runs each sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainMode {
    Baseline,
    Interleaved { stages: usize, visibility: Visibility },
    Chunked { chunk: usize },
    Sequential,
}

impl TrainMode {
    /// Token-forwards per sequence of `len` tokens.
    pub fn token_forwards(&self, len: usize, memory: Option<MemorySource>) -> usize {
        match self {
            TrainMode::Baseline | TrainMode::Chunked { .. } => len,
            TrainMode::Interleaved { .. } => 2 * len,
            TrainMode::Sequential => len * memory.map_or(1, |m| m.forwards_per_token()),
        }
    }
}

/// Loss of one sequence under `mode`.
pub fn sequence_loss(g: &mut Graph<'_>, model: &Model, inputs: &[usize], targets: &[usize], mode: &TrainMode) -> Result<StepLoss> {
    match mode {
        TrainMode::Baseline => baseline_loss(g, model, inputs, targets),
        TrainMode::Interleaved { stages, visibility } => {
            let partition = partition_strided(inputs.len(), *stages)?;
            interleaved_loss(g, model, inputs, targets, &partition, *visibility)
        }
        TrainMode::Chunked { chunk } => chunked_loss(g, model, inputs, targets, *chunk),
        TrainMode::Sequential => {
            let u = sequential_unroll(g, model, inputs, targets)?;
            Ok(StepLoss {
                combined: u.loss,
                init: u.loss,
                subsets: Vec::new(),
                token_forward_count: u.token_forward_count,
            })
        }
    }
}

/// Mean loss over a batch of `(inputs, targets)` sequences and its gradients.
pub fn batch_step(model: &Model, batch: &[(Vec<usize>, Vec<usize>)], mode: &TrainMode) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut g = Graph::with_params(&model.params);
    let mut parts = Vec::with_capacity(batch.len());
    let mut total: Option<Var> = None;
    for (inputs, targets) in batch {
        let step = sequence_loss(&mut g, model, inputs, targets, mode)?;
        total = Some(match total {
            None => step.combined,
            Some(t) => g.add(t, step.combined)?,
        });
        parts.push(step);
    }
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as Real);
    let grads = g.backward(loss)?;
    let n = batch.len() as Real;
    let stages = parts[0].subsets.len();
    let mut breakdown = LossBreakdown {
        init: 0.0,
        subsets: vec![0.0; stages],
        combined: g.value(loss).item(),
        token_forward_count: 0,
    };
    for p in &parts {
        breakdown.init += g.value(p.init).item() / n;
        for (acc, &s) in breakdown.subsets.iter_mut().zip(&p.subsets) {
            *acc += g.value(s).item() / n;
        }
        breakdown.token_forward_count += p.token_forward_count;
    }
    Ok((breakdown, grads))
}

/// Learning-rate multiplier: 1 over the first half of training, then linear
/// to 0 at the final step.
pub fn lr_multiplier(step: usize, total_steps: usize) -> Real {
    let p = step as Real / (total_steps.saturating_sub(1)).max(1) as Real;
    if p <= 0.5 {
        1.0
    } else {
        ((1.0 - p) / 0.5).max(0.0)
    }
}

/// Step budget and optimizer settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    /// Tokens per parameter.
    pub ratio: Real,
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_steps: usize,
    pub lr: Real,
    pub seed: u64,
}

impl TrainPlan {
    /// Enough steps to see about `ratio · params` tokens.
    pub fn from_ratio(ratio: Real, params: usize, batch_size: usize, seq_len: usize, lr: Real, seed: u64) -> Self {
        let tokens = ratio * params as Real;
        let per_step = (batch_size * seq_len) as Real;
        let total_steps = math::ceil(tokens / per_step).max(1.0) as usize;
        Self {
            ratio,
            batch_size,
            seq_len,
            total_steps,
            lr,
            seed,
        }
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn lr_at(&self, step: usize) -> Real {
        self.lr * lr_multiplier(step, self.total_steps)
    }
}

/// Decoupled weight decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr`. Weight decay reaches only
    /// matrix parameters. Fails before touching anything if a gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: Real) -> Result<()> {
        if let Some(name) = grads.first_non_finite(store) {
            return Err(Error::NonFinite(name));
        }
        self.t += 1;
        let bc1 = 1.0 - math::powf(self.beta1, self.t as Real);
        let bc2 = 1.0 - math::powf(self.beta2, self.t as Real);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(grad) = grads.param(id) else { continue };
            let wd = if store.kind(id) == ParamKind::Matrix { self.weight_decay } else { 0.0 };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.tensor_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = grad.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (math::sqrt(vhat) + self.eps) + wd * p[j]);
            }
        }
        Ok(())
    }
}
