//! Cross-module oracle suite run by `oracle-check`.

use lrt_core::backbone::{ForwardInput, Model};
use lrt_core::infer::DecodeSession;
use lrt_core::tensor::gradcheck::{grad_check, GradCheckOptions};
use lrt_core::trainer::{interleaved_loss, partition_strided, refined_token_losses, sequential_unroll, PartitionSpec, Visibility};
use lrt_core::{Graph, ParamStore, Real, Tensor};
use rand::Rng;

use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    /// Largest observed deviation.
    pub error: Real,
    pub tolerance: Real,
}

impl Check {
    fn measured(name: &'static str, error: Real, tolerance: Real) -> Self {
        let status = if error <= tolerance { Status::Pass } else { Status::Fail };
        Self {
            name,
            status,
            error,
            tolerance,
        }
    }

    pub fn line(&self) -> String {
        let status = match &self.status {
            Status::Pass => "pass".to_string(),
            Status::Fail => "FAIL".to_string(),
            Status::Skipped(why) => format!("skipped ({why})"),
        };
        format!("check={} status={} error={:.3e} tolerance={:.0e}", self.name, status, self.error, self.tolerance)
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.status != Status::Fail)
}

fn max_diff(a: &[Real], b: &[Real]) -> Real {
    if a.len() != b.len() {
        return Real::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = lrt_core::rng::seeded(seed);
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

/// The same backbone without recurrent memory.
pub fn baseline_of(model: &Model) -> Result<Model, Error> {
    let config = model.config.clone().without_lrt();
    let mut store = ParamStore::new();
    for spec in lrt_core::backbone::layout(&config) {
        let id = model.params.find(&spec.name).ok_or_else(|| Error::Config(format!("missing {}", spec.name)))?;
        store.insert(spec.name, spec.kind, model.params.tensor(id).clone());
    }
    Ok(Model::from_store(config, store)?)
}

/// Adds N(0, std) noise to every parameter except the gate weights.
fn perturb(model: &mut Model, seed: u64, std: Real) {
    let mut r = lrt_core::rng::seeded(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).ends_with("w_gate") {
            continue;
        }
        let shape = model.params.tensor(id).shape().to_vec();
        let noise = Tensor::randn(&shape, std, &mut r);
        for (p, n) in model.params.tensor_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *p += n;
        }
    }
}

fn zero_memory(model: &Model, seed: u64) -> Result<Real, Error> {
    let mut worst: Real = 0.0;
    for k in 0..3u64 {
        let mut m = model.clone();
        if k > 0 {
            perturb(&mut m, seed + k, 0.2);
        }
        let base = baseline_of(&m)?;
        let tokens = random_tokens(m.config.seq_len, m.config.vocab_size, seed + 10 + k);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut g = Graph::with_params(&m.params);
        let out = m.forward(&mut g, ForwardInput::new(&tokens, &positions))?;
        let (reference, _) = base.forward_baseline(&tokens)?;
        worst = worst.max(max_diff(g.value(out.logits).data(), reference.data()));
    }
    Ok(worst)
}

fn cache_equivalence(model: &Model, seed: u64) -> Result<(Real, Real), Error> {
    let base = baseline_of(model)?;
    let tokens = random_tokens(model.config.seq_len, model.config.vocab_size, seed + 20);
    let (full, _) = base.forward_baseline(&tokens)?;
    let mut s = DecodeSession::new(&base, tokens.len());
    let mut cached: Real = 0.0;
    for (p, &tok) in tokens.iter().enumerate() {
        let out = s.decode_step(tok)?;
        cached = cached.max(max_diff(&out.logits, full.row(p)));
    }

    let mut m = model.clone();
    perturb(&mut m, seed + 21, 0.2);
    let (x, y) = (&tokens[..tokens.len() - 1], &tokens[1..]);
    let mut g = Graph::with_params(&m.params);
    let unroll = sequential_unroll(&mut g, &m, x, y)?;
    let mut s = DecodeSession::new(&m, x.len());
    let mut decode: Real = 0.0;
    for (p, &tok) in x.iter().enumerate() {
        let out = s.decode_step(tok)?;
        decode = decode.max(max_diff(&out.logits, g.value(unroll.logits[p]).data()));
    }
    Ok((cached, decode))
}

fn singleton_partition(len: usize) -> Result<PartitionSpec, Error> {
    Ok(PartitionSpec::new(len, (0..len).map(|p| vec![p]).collect())?)
}

fn stages_equal_length(model: &Model, seed: u64) -> Result<Real, Error> {
    let mut m = model.clone();
    perturb(&mut m, seed + 30, 0.2);
    let tokens = random_tokens(m.config.seq_len + 1, m.config.vocab_size, seed + 31);
    let (x, y) = (&tokens[..tokens.len() - 1], &tokens[1..]);
    let mut g = Graph::with_params(&m.params);
    let unroll = sequential_unroll(&mut g, &m, x, y)?;
    let exact = g.value(unroll.losses).data().to_vec();
    let mut g = Graph::with_params(&m.params);
    let refined = refined_token_losses(&mut g, &m, x, y, &singleton_partition(x.len())?, Visibility::Fresh)?;
    Ok(max_diff(&refined, &exact))
}

fn gradients(model: &Model, seed: u64) -> Result<Real, Error> {
    let mut m = model.clone();
    perturb(&mut m, seed + 40, 0.1);
    let ids: Vec<_> = m.params.ids().collect();
    let mut r = lrt_core::rng::seeded(seed + 41);
    for id in ids {
        if m.params.name(id).ends_with("w_gate") {
            let shape = m.params.tensor(id).shape().to_vec();
            *m.params.tensor_mut(id) = Tensor::randn(&shape, 0.3, &mut r);
        }
    }
    let tokens = random_tokens(m.config.seq_len + 1, m.config.vocab_size, seed + 42);
    let (x, y) = (tokens[..tokens.len() - 1].to_vec(), tokens[1..].to_vec());
    let partition = partition_strided(x.len(), 2.min(x.len()))?;
    let opts = GradCheckOptions {
        step: 1e-4,
        tol: 1e-3,
        floor: 1e-5,
        max_entries: Some(6),
    };
    let report = grad_check(
        |g| Ok(interleaved_loss(g, &m, &x, &y, &partition, Visibility::Fresh)?.combined),
        &m.params,
        &opts,
    )?;
    Ok(report.max_rel_error())
}

fn nullified_memory(model: &Model, seed: u64) -> Result<Real, Error> {
    let mut m = model.clone();
    perturb(&mut m, seed + 50, 0.2);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        let name = m.params.name(id);
        if name.ends_with("gamma") || name.ends_with("_rec") {
            let shape = m.params.tensor(id).shape().to_vec();
            *m.params.tensor_mut(id) = Tensor::zeros(&shape);
        }
    }
    let base = baseline_of(&m)?;
    let tokens = random_tokens(m.config.seq_len + 1, m.config.vocab_size, seed + 51);
    let (x, y) = (&tokens[..tokens.len() - 1], &tokens[1..]);
    let mut g = Graph::with_params(&m.params);
    let unroll = sequential_unroll(&mut g, &m, x, y)?;
    let lrt = g.value(unroll.loss).item();
    let mut g = Graph::with_params(&base.params);
    let positions: Vec<usize> = (0..x.len()).collect();
    let out = base.forward(&mut g, ForwardInput::new(x, &positions))?;
    let l = g.cross_entropy(out.logits, y)?;
    Ok((lrt - g.value(l).item()).abs())
}

/// Runs every oracle on `model` (which should be tiny: the gradient check
/// is O(parameters) forwards).
pub fn run(model: &Model, seed: u64) -> Result<Vec<Check>, Error> {
    if model.config.lrt.is_none() {
        return Err(Error::Config("oracle-check needs a model with recurrent memory (model.lrt)".into()));
    }
    let needs_first_pass = model.config.lrt.as_ref().is_some_and(|l| l.memory_source.needs_first_pass());
    let mut checks = vec![Check::measured("zero_memory_equivalence", zero_memory(model, seed)?, 1e-6)];
    let (cached, decode) = cache_equivalence(model, seed)?;
    checks.push(Check::measured("cache_vs_full", cached, 1e-5));
    checks.push(Check::measured("decode_vs_unroll", decode, 1e-5));
    if needs_first_pass {
        checks.push(Check {
            name: "stages_equal_length_vs_unroll",
            status: Status::Skipped("current-state memory runs two passes per token".into()),
            error: 0.0,
            tolerance: 1e-5,
        });
    } else {
        checks.push(Check::measured("stages_equal_length_vs_unroll", stages_equal_length(model, seed)?, 1e-5));
    }
    checks.push(Check::measured("gradient_check", gradients(model, seed)?, 1e-3));
    checks.push(Check::measured("nullified_memory_delta", nullified_memory(model, seed)?, 1e-12));
    Ok(checks)
}
