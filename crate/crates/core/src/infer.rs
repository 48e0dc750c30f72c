//! Cached autoregressive decoding with the recurrent state handed from one
//! position to the next.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::backbone::{ForwardInput, KvCache, Memory, Model};
use crate::config::MemorySource;
use crate::tensor::{Graph, Tensor};
use crate::{lrt, rng, Error, Real, Result};

/// What one decoded position produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<Real>,
    /// Euclidean norm of the memory consumed at this position.
    pub memory_norm: Real,
}

/// Decoding state of one sequence.
pub struct DecodeSession<'m> {
    model: &'m Model,
    cache: KvCache,
    /// Final source states of the last `max_lag` positions, oldest first.
    ring: VecDeque<Vec<Real>>,
    position: usize,
    forwards: usize,
    max_len: usize,
}

fn norm(x: &[Real]) -> Real {
    crate::math::sqrt(x.iter().map(|v| v * v).sum())
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model, max_len: usize) -> Self {
        Self {
            model,
            cache: KvCache::new(&model.config),
            ring: VecDeque::new(),
            position: 0,
            forwards: 0,
            max_len,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Transformer forwards executed so far.
    pub fn forwards(&self) -> usize {
        self.forwards
    }

    /// The most recent final source state (the memory handed to the next
    /// position under `previous(1)`).
    pub fn last_state(&self) -> Option<&[Real]> {
        self.ring.back().map(Vec::as_slice)
    }

    fn source(&self) -> Option<MemorySource> {
        self.model.config.lrt.as_ref().map(|l| l.memory_source)
    }

    fn memory(&self, g: &mut Graph<'_>, source: MemorySource, current: Option<crate::tensor::Var>) -> Result<Memory> {
        let t = self.position;
        if self.ring.is_empty() && current.is_none() {
            return Ok(Memory::Zero);
        }
        let d = self.model.config.d_model;
        let (history, first_row) = if self.ring.is_empty() {
            (Tensor::zeros(&[1, d]), t)
        } else {
            let rows: Vec<Real> = self.ring.iter().flatten().copied().collect();
            (Tensor::new(vec![self.ring.len(), d], rows)?, t - self.ring.len())
        };
        let history = g.constant(history);
        let mix = self.model.memory_mix_var(g);
        let m = lrt::select_memory(g, history, first_row, &[t], source, current, mix)?;
        Ok(Memory::Rows(m))
    }

    fn check(&self, token: usize) -> Result<()> {
        if self.position >= self.max_len {
            return Err(Error::Overflow(self.max_len));
        }
        if token >= self.model.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                position: self.position,
                vocab: self.model.config.vocab_size,
            });
        }
        Ok(())
    }

    fn commit(&mut self, g: &Graph<'_>, kv: &[crate::backbone::LayerKv], state: Option<crate::tensor::Var>) -> Result<()> {
        self.cache.append(g, kv)?;
        if let (Some(s), Some(src)) = (state, self.source()) {
            self.ring.push_back(g.value(s).data().to_vec());
            while self.ring.len() > src.max_lag().max(1) {
                self.ring.pop_front();
            }
        }
        self.position += 1;
        Ok(())
    }

    fn run(&self, g: &mut Graph<'_>, token: usize, memory: Memory) -> Result<crate::backbone::ForwardOutput> {
        let ctx = self.cache.context(g, self.position)?;
        let tok = [token];
        let pos = [self.position];
        let mut input = ForwardInput::new(&tok, &pos).with_memory(memory);
        if self.position > 0 {
            input = input.with_context(&ctx);
        }
        self.model.forward(g, input)
    }

    fn memory_norm(g: &Graph<'_>, memory: Memory) -> Real {
        match memory {
            Memory::Zero => 0.0,
            Memory::Rows(m) => norm(g.value(m).data()),
        }
    }

    /// Decodes one position. Current-token memory sources run both passes.
    pub fn decode_step(&mut self, token: usize) -> Result<StepOutput> {
        if self.source().is_some_and(MemorySource::needs_first_pass) {
            return self.decode_step_two_pass(token);
        }
        self.check(token)?;
        let mut g = Graph::with_params(&self.model.params);
        let memory = match self.source() {
            Some(src) => self.memory(&mut g, src, None)?,
            None => Memory::Zero,
        };
        let out = self.run(&mut g, token, memory)?;
        self.forwards += 1;
        let step = StepOutput {
            logits: g.value(out.logits).data().to_vec(),
            memory_norm: Self::memory_norm(&g, memory),
        };
        self.commit(&g, &out.kv, out.source)?;
        Ok(step)
    }

    /// Pass 1 runs with the lag-1 memory to obtain this position's state;
    /// pass 2 injects it (plus the previous state for
    /// `current_plus_previous`). Pass 2's keys, values and state are kept.
    pub fn decode_step_two_pass(&mut self, token: usize) -> Result<StepOutput> {
        let src = self.source().ok_or(Error::WrongMemoryKind("baseline"))?;
        if !src.needs_first_pass() {
            return Err(Error::WrongMemoryKind("previous-position memory decodes in one pass"));
        }
        self.check(token)?;
        let mut g = Graph::with_params(&self.model.params);
        let lagged = self.memory(&mut g, MemorySource::Previous(1), None)?;
        let first = self.run(&mut g, token, lagged)?;
        let memory = self.memory(&mut g, src, first.source)?;
        let out = self.run(&mut g, token, memory)?;
        self.forwards += 2;
        let step = StepOutput {
            logits: g.value(out.logits).data().to_vec(),
            memory_norm: Self::memory_norm(&g, memory),
        };
        self.commit(&g, &out.kv, out.source)?;
        Ok(step)
    }

    /// Feeds `tokens` through [`Self::decode_step`], returning the logits
    /// after the last one.
    pub fn prefill(&mut self, tokens: &[usize]) -> Result<Vec<Real>> {
        let mut last = Vec::new();
        for &t in tokens {
            last = self.decode_step(t)?.logits;
        }
        Ok(last)
    }

    /// One parallel forward over `tokens` with zero memory. Faster than
    /// [`Self::prefill`] but the stored states are those of the
    /// initialization pass, not of the exact recurrence.
    pub fn prefill_parallel(&mut self, tokens: &[usize]) -> Result<Vec<Real>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        if self.position != 0 {
            return Err(Error::CacheMismatch {
                cached: self.position,
                position: 0,
            });
        }
        if tokens.len() > self.max_len {
            return Err(Error::Overflow(self.max_len));
        }
        let mut g = Graph::with_params(&self.model.params);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let out = self.model.forward(&mut g, ForwardInput::new(tokens, &positions))?;
        self.cache.append(&g, &out.kv)?;
        if let (Some(s), Some(src)) = (out.source, self.source()) {
            let st = g.value(s);
            let keep = src.max_lag().max(1);
            for r in tokens.len().saturating_sub(keep)..tokens.len() {
                self.ring.push_back(st.row(r).to_vec());
            }
        }
        self.position = tokens.len();
        self.forwards += tokens.len();
        Ok(g.value(out.logits).row(tokens.len() - 1).to_vec())
    }
}

/// Token selection rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    Greedy,
    Temperature { temperature: Real, seed: u64 },
}

pub fn argmax(logits: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Per-token record of [`generate_with_log`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLog {
    pub token: usize,
    pub top_logit: Real,
    pub memory_norm: Real,
}

/// `prompt` followed by `n` sampled tokens.
pub fn generate(model: &Model, prompt: &[usize], n: usize, sampler: Sampler) -> Result<Vec<usize>> {
    generate_with_log(model, prompt, n, sampler).map(|(t, _)| t)
}

pub fn generate_with_log(model: &Model, prompt: &[usize], n: usize, sampler: Sampler) -> Result<(Vec<usize>, Vec<TokenLog>)> {
    let mut out = prompt.to_vec();
    let mut log = Vec::new();
    if n == 0 {
        return Ok((out, log));
    }
    if prompt.is_empty() {
        return Err(Error::Data("generation needs a non-empty prompt".into()));
    }
    let mut session = DecodeSession::new(model, prompt.len() + n);
    let mut rng = match sampler {
        Sampler::Temperature { seed, .. } => Some(rng::seeded(seed)),
        Sampler::Greedy => None,
    };
    let mut step = StepOutput {
        logits: Vec::new(),
        memory_norm: 0.0,
    };
    for &t in prompt {
        step = session.decode_step(t)?;
    }
    for i in 0..n {
        let next = match (sampler, rng.as_mut()) {
            (Sampler::Temperature { temperature, .. }, Some(r)) if temperature > 0.0 => {
                let mut p: Vec<Real> = step.logits.iter().map(|z| z / temperature).collect();
                crate::tensor::softmax_in_place(&mut p);
                let u: f64 = r.random();
                let mut acc = 0.0;
                let mut pick = p.len() - 1;
                for (j, &pj) in p.iter().enumerate() {
                    acc += pj as f64;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                pick
            }
            _ => argmax(&step.logits),
        };
        log.push(TokenLog {
            token: next,
            top_logit: step.logits.iter().copied().fold(Real::NEG_INFINITY, Real::max),
            memory_norm: step.memory_norm,
        });
        out.push(next);
        if i + 1 < n {
            step = session.decode_step(next)?;
        }
    }
    Ok((out, log))
}
