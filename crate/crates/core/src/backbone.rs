//! Decoder-only transformer with optional recurrent memory.
//!
//! Each block computes
//!
//! ```text
//! u = α·x + β·x0 (+ γ·m)          x: block input, x0: normalized token embedding
//! a = rmsnorm(u)
//! q, k, v = a·Wqᵀ, a·Wkᵀ, a·Wvᵀ   k, v mixed with memory on target layers
//! u += attention(rope(qknorm(q)), rope(qknorm(k)), v)·Woᵀ
//! u += relu(rmsnorm(u)·W1ᵀ)²·W2ᵀ
//! ```
//!
//! and the head is `softcap(rmsnorm(h_L)·W_headᵀ)`. Rows are processed as a
//! set of query positions that may attend to a supplied context of earlier
//! keys and values, which is how the trainer's refinement passes, chunked
//! training and cached decoding all share one forward.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{ModelConfig, WindowKind};
use crate::lrt::{self, Init, KvInputs, ParamSpec};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{kernels, Graph, Tensor, Var};
use crate::{math, rng, Error, Real, Result};

pub const EMBED_STD: Real = 0.02;

/// Parameter-free RMS normalization, `x / sqrt(mean(x²) + eps)`.
pub fn rmsnorm(x: &[Real], eps: Real) -> Vec<Real> {
    kernels::rmsnorm_groups(x, x.len().max(1), eps).0
}

/// Rotates every `d_head` block of `x` (`heads·d_head` values) for `position`.
pub fn rope_apply(x: &[Real], d_head: usize, position: usize, base: Real) -> Result<Vec<Real>> {
    if d_head == 0 || d_head % 2 != 0 || x.len() % d_head != 0 {
        return Err(Error::Config(format!("rotary encoding needs an even head width, got {d_head}")));
    }
    Ok(kernels::rope_rows(x, x.len(), d_head, &[position], base, false))
}

/// `c·tanh(z/c)`.
pub fn softcap(z: Real, c: Real) -> Real {
    c * math::tanh(z / c)
}

/// `relu(x·W1ᵀ)²·W2ᵀ`.
pub fn mlp(g: &mut Graph<'_>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = g.linear(x, w1)?;
    let h = g.relu(h)?;
    let h = g.square(h)?;
    g.linear(h, w2)
}

/// Parameter ids of one block.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub resid_scale: ParamId,
    pub skip_scale: ParamId,
    /// `(table, gate)` when value embeddings are enabled.
    pub value_embed: Option<(ParamId, ParamId)>,
    pub lrt: LayerLrtParams,
}

/// Memory parameters reaching one block; all absent off-target.
#[derive(Clone, Debug, Default)]
pub struct LayerLrtParams {
    pub w_k_rec: Option<ParamId>,
    pub w_v_rec: Option<ParamId>,
    pub w_gate: Option<ParamId>,
    pub gamma: Option<ParamId>,
}

/// Memory fed to a forward: none, or one `d`-row per query position.
#[derive(Clone, Copy, Debug)]
pub enum Memory {
    Zero,
    Rows(Var),
}

/// Processed (normalized, rotated) keys and values of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerKv {
    pub k: Var,
    pub v: Var,
}

/// Earlier positions a forward may attend to.
#[derive(Clone, Debug, Default)]
pub struct Context {
    pub positions: Vec<usize>,
    /// Rows excluded from attention, e.g. the positions being refined.
    pub hidden: Vec<bool>,
    pub layers: Vec<LayerKv>,
}

/// Query rows of a forward.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInput<'a> {
    pub tokens: &'a [usize],
    pub positions: &'a [usize],
    pub memory: Memory,
    pub context: Option<&'a Context>,
    /// A query row sees context rows at earlier positions. Query rows see
    /// each other causally, or only themselves when `isolated` is set.
    pub isolated: bool,
}

impl<'a> ForwardInput<'a> {
    /// A causal forward over `tokens` at `positions` with no context.
    pub fn new(tokens: &'a [usize], positions: &'a [usize]) -> Self {
        Self {
            tokens,
            positions,
            memory: Memory::Zero,
            context: None,
            isolated: false,
        }
    }

    pub fn with_memory(mut self, memory: Memory) -> Self {
        self.memory = memory;
        self
    }

    pub fn with_context(mut self, context: &'a Context) -> Self {
        self.context = Some(context);
        self
    }

    pub fn isolated(mut self, isolated: bool) -> Self {
        self.isolated = isolated;
        self
    }
}

pub struct ForwardOutput {
    /// `[rows, vocab]`, soft-capped.
    pub logits: Var,
    /// Output of each block, `[rows, d]`.
    pub hidden: Vec<Var>,
    /// Combined keys before normalization and rotation, per layer.
    pub raw_k: Vec<Var>,
    pub kv: Vec<LayerKv>,
    /// Source-layer state, present when memory is configured.
    pub source: Option<Var>,
}

/// Model parameters and the ids used to address them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: ParamId,
    pub lm_head: ParamId,
    pub layers: Vec<LayerParams>,
    pub memory_mix: Option<ParamId>,
    pub source_mix: Option<ParamId>,
}

/// Backbone parameters in initialization order.
pub fn backbone_layout(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.d_model;
    let kv = c.kv_dim();
    let std = |fan_in: usize| Init::Normal(1.0 / math::sqrt(fan_in as Real));
    let mut specs = vec![ParamSpec::new("embed", &[c.vocab_size, d], ParamKind::Embedding, Init::Normal(EMBED_STD))];
    for l in 1..=c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.push(ParamSpec::new(p("wq"), &[c.q_dim(), d], ParamKind::Matrix, std(d)));
        specs.push(ParamSpec::new(p("wk"), &[kv, d], ParamKind::Matrix, std(d)));
        specs.push(ParamSpec::new(p("wv"), &[kv, d], ParamKind::Matrix, std(d)));
        specs.push(ParamSpec::new(p("wo"), &[d, c.q_dim()], ParamKind::Matrix, std(c.q_dim())));
        specs.push(ParamSpec::new(p("mlp.w1"), &[4 * d, d], ParamKind::Matrix, std(d)));
        specs.push(ParamSpec::new(p("mlp.w2"), &[d, 4 * d], ParamKind::Matrix, std(4 * d)));
        specs.push(ParamSpec::new(p("resid_scale"), &[1], ParamKind::Scalar, Init::Const(1.0)));
        specs.push(ParamSpec::new(p("skip_scale"), &[1], ParamKind::Scalar, Init::Zeros));
        if c.value_embeddings {
            specs.push(ParamSpec::new(p("value_embed"), &[c.vocab_size, kv], ParamKind::Embedding, Init::Normal(EMBED_STD)));
            specs.push(ParamSpec::new(p("value_gate"), &[c.n_kv_heads, d], ParamKind::Matrix, Init::Zeros));
        }
    }
    specs.push(ParamSpec::new("lm_head", &[c.vocab_size, d], ParamKind::Matrix, std(d)));
    specs
}

/// Full layout: backbone first, then memory parameters, so one seed gives
/// the same backbone with or without memory.
pub fn layout(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = backbone_layout(c);
    if let Some(l) = &c.lrt {
        specs.extend(lrt::layout(c, l));
    }
    specs
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        for spec in layout(&config) {
            let t = match spec.init {
                Init::Normal(std) => Tensor::randn(&spec.shape, std, &mut r),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Const(c) => Tensor::full(&spec.shape, c),
            };
            store.insert(spec.name, spec.kind, t);
        }
        Self::from_store(config, store)
    }

    /// Binds a loaded store to `config`, checking names and shapes.
    pub fn from_store(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        for spec in &specs {
            let id = params
                .find(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", spec.name)))?;
            if params.tensor(id).shape() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: params.tensor(id).shape().to_vec(),
                    rhs: spec.shape.clone(),
                });
            }
        }
        if params.len() != specs.len() {
            return Err(Error::Config(format!(
                "store holds {} parameters, configuration expects {}",
                params.len(),
                specs.len()
            )));
        }
        let id = |name: &str| params.find(name).expect("checked above");
        let opt = |name: &str| params.find(name);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 1..=config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let value_embed = config
                .value_embeddings
                .then(|| (id(&p("value_embed")), id(&p("value_gate"))));
            let lp = |s: &str| format!("lrt.layers.{l}.{s}");
            let lrt_params = match &config.lrt {
                Some(lc) if lc.targets(l, config.n_layers) => LayerLrtParams {
                    w_k_rec: opt(&lp("w_k_rec")).or_else(|| opt(lrt::shared_k_name())),
                    w_v_rec: opt(&lp("w_v_rec")).or_else(|| opt(lrt::shared_v_name())),
                    w_gate: opt(&lp("w_gate")),
                    gamma: opt(&lp("gamma")),
                },
                _ => LayerLrtParams::default(),
            };
            layers.push(LayerParams {
                wq: id(&p("wq")),
                wk: id(&p("wk")),
                wv: id(&p("wv")),
                wo: id(&p("wo")),
                w1: id(&p("mlp.w1")),
                w2: id(&p("mlp.w2")),
                resid_scale: id(&p("resid_scale")),
                skip_scale: id(&p("skip_scale")),
                value_embed,
                lrt: lrt_params,
            });
        }
        Ok(Self {
            embed: id("embed"),
            lm_head: id("lm_head"),
            memory_mix: opt("lrt.memory_mix"),
            source_mix: opt("lrt.source_mix"),
            layers,
            config,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// The learned-average memory logits, if configured.
    pub fn memory_mix_var(&self, g: &mut Graph<'_>) -> Option<Var> {
        self.memory_mix.map(|id| g.param(id))
    }

    fn check_tokens(&self, tokens: &[usize], positions: &[usize]) -> Result<()> {
        if tokens.len() != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![tokens.len()],
                rhs: vec![positions.len()],
            });
        }
        let vocab = self.config.vocab_size;
        match tokens.iter().zip(positions).find(|(&t, _)| t >= vocab) {
            Some((&token, &position)) => Err(Error::TokenOutOfRange { token, position, vocab }),
            None => Ok(()),
        }
    }

    fn mask(&self, layer: usize, input: &ForwardInput<'_>) -> Vec<bool> {
        let window = self.config.window_kind(layer);
        let in_window = |key: usize, query: usize| match window {
            WindowKind::Full => true,
            WindowKind::Sliding(w) => query - key < w,
        };
        let (ctx_pos, ctx_hidden): (&[usize], &[bool]) = match input.context {
            Some(c) => (&c.positions, &c.hidden),
            None => (&[], &[]),
        };
        let n_k = ctx_pos.len() + input.positions.len();
        let mut mask = vec![false; input.positions.len() * n_k];
        for (i, &q) in input.positions.iter().enumerate() {
            let row = &mut mask[i * n_k..(i + 1) * n_k];
            for (j, &p) in ctx_pos.iter().enumerate() {
                row[j] = p < q && !ctx_hidden.get(j).copied().unwrap_or(false) && in_window(p, q);
            }
            for (j, &p) in input.positions.iter().enumerate() {
                let allowed = if input.isolated { i == j } else { p <= q };
                row[ctx_pos.len() + j] = allowed && p <= q && in_window(p, q);
            }
        }
        mask
    }

    /// The forward over `input`'s query rows. `g` must be built on
    /// `self.params`.
    pub fn forward(&self, g: &mut Graph<'_>, input: ForwardInput<'_>) -> Result<ForwardOutput> {
        let c = &self.config;
        self.check_tokens(input.tokens, input.positions)?;
        let n = input.tokens.len();
        let memory = match input.memory {
            Memory::Zero => None,
            Memory::Rows(m) => {
                let shape = g.shape(m);
                if shape.len() != 2 || shape[1] != c.d_model || shape[0] != n {
                    return Err(Error::MemoryDim {
                        got: shape.to_vec(),
                        expected: vec![n, c.d_model],
                    });
                }
                Some(m)
            }
        };
        if let Some(ctx) = input.context {
            if ctx.layers.len() != c.n_layers || ctx.hidden.len() > ctx.positions.len() {
                return Err(Error::Config(format!(
                    "context covers {} layers, model has {}",
                    ctx.layers.len(),
                    c.n_layers
                )));
            }
        }
        let lrt_cfg = c.lrt.as_ref();

        let embed = g.param(self.embed);
        let e = g.embedding(embed, input.tokens)?;
        let x0 = g.rmsnorm(e, c.d_model, c.norm_eps)?;
        let mut x = x0;
        let mut hidden = Vec::with_capacity(c.n_layers);
        let mut raw_k = Vec::with_capacity(c.n_layers);
        let mut kv = Vec::with_capacity(c.n_layers);
        for (li, lp) in self.layers.iter().enumerate() {
            let layer = li + 1;
            let alpha = g.param(lp.resid_scale);
            let beta = g.param(lp.skip_scale);
            let gamma = lp.lrt.gamma.map(|id| g.param(id));
            let mut u = lrt::residual_inject(g, x, memory, alpha, gamma)?;
            let skip = g.mul(x0, beta)?;
            u = g.add(u, skip)?;

            let a = g.rmsnorm(u, c.d_model, c.norm_eps)?;
            let wq = g.param(lp.wq);
            let wk = g.param(lp.wk);
            let wv = g.param(lp.wv);
            let q = g.linear(a, wq)?;
            let mut k = g.linear(a, wk)?;
            let mut v = g.linear(a, wv)?;
            if let Some((table, gate)) = lp.value_embed {
                let table = g.param(table);
                let gate = g.param(gate);
                let ve = g.embedding(table, input.tokens)?;
                let z = g.linear(a, gate)?;
                let s = g.sigmoid(z)?;
                let s = g.scale(s, 2.0);
                let ve = lrt::head_gate(g, ve, s, c.n_kv_heads)?;
                v = g.add(v, ve)?;
            }
            if let (Some(w_gate), Some(lc)) = (lp.lrt.w_gate, lrt_cfg) {
                let w_gate = g.param(w_gate);
                let (g_local, g_rec) = lrt::gates(g, x, w_gate, c.n_kv_heads)?;
                let (k_rec, v_rec) = match memory {
                    Some(m) => {
                        let wk = lp.lrt.w_k_rec.map(|id| g.param(id));
                        let wv = lp.lrt.w_v_rec.map(|id| g.param(id));
                        lrt::kv_project(g, m, wk, wv)?
                    }
                    None => (None, None),
                };
                let inputs = KvInputs {
                    k_local: k,
                    v_local: v,
                    k_rec,
                    v_rec,
                    g_local,
                    g_rec,
                };
                (k, v) = lrt::combine_kv(g, inputs, lc.kv_mode, lc.kv_parts, c.n_kv_heads)?;
            }
            raw_k.push(k);
            let q = g.rmsnorm(q, c.d_head, c.norm_eps)?;
            let q = g.rope(q, c.d_head, input.positions, c.rope_base)?;
            let kn = g.rmsnorm(k, c.d_head, c.norm_eps)?;
            let k = g.rope(kn, c.d_head, input.positions, c.rope_base)?;
            kv.push(LayerKv { k, v });
            let (keys, values) = match input.context {
                Some(ctx) if !ctx.positions.is_empty() => {
                    let ck = ctx.layers[li];
                    (g.concat(&[ck.k, k], 0)?, g.concat(&[ck.v, v], 0)?)
                }
                _ => (k, v),
            };
            let mask = self.mask(layer, &input);
            let o = g.attention(q, keys, values, c.n_heads, c.n_kv_heads, &mask)?;
            let wo = g.param(lp.wo);
            let o = g.linear(o, wo)?;
            u = g.add(u, o)?;

            let b = g.rmsnorm(u, c.d_model, c.norm_eps)?;
            let w1 = g.param(lp.w1);
            let w2 = g.param(lp.w2);
            let f = mlp(g, b, w1, w2)?;
            u = g.add(u, f)?;
            hidden.push(u);
            x = u;
        }
        let hn = g.rmsnorm(x, c.d_model, c.norm_eps)?;
        let head = g.param(self.lm_head);
        let z = g.linear(hn, head)?;
        let z = g.scale(z, 1.0 / c.softcap);
        let z = g.tanh(z)?;
        let logits = g.scale(z, c.softcap);
        let source = match lrt_cfg {
            Some(lc) => Some(self.source_state(g, &hidden, &lc.source_layers())?),
            None => None,
        };
        Ok(ForwardOutput {
            logits,
            hidden,
            raw_k,
            kv,
            source,
        })
    }

    fn source_state(&self, g: &mut Graph<'_>, hidden: &[Var], layers: &[usize]) -> Result<Var> {
        match (layers, self.source_mix) {
            ([l], None) => Ok(hidden[l - 1]),
            (_, Some(mix)) => {
                let mix = g.param(mix);
                let w = g.softmax_last(mix);
                let mut acc: Option<Var> = None;
                for (i, &l) in layers.iter().enumerate() {
                    let wi = g.slice(w, 0, i, i + 1)?;
                    let term = g.mul(hidden[l - 1], wi)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(a, term)?,
                    });
                }
                Ok(acc.expect("at least one source layer"))
            }
            _ => Err(Error::Config("source averaging without mixing weights".into())),
        }
    }

    /// Causal forward of one sequence from position 0 with zero memory.
    /// Returns logits `[T, vocab]` and each block's output.
    pub fn forward_baseline(&self, tokens: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut g = Graph::with_params(&self.params);
        let out = self.forward(&mut g, ForwardInput::new(tokens, &positions))?;
        let hidden = out.hidden.iter().map(|&h| g.value(h).clone()).collect();
        Ok((g.value(out.logits).clone(), hidden))
    }
}

/// Per-layer processed keys and values of positions `0..len`.
#[derive(Clone, Debug)]
pub struct KvCache {
    kv_dim: usize,
    len: usize,
    keys: Vec<Vec<Real>>,
    values: Vec<Vec<Real>>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            kv_dim: config.kv_dim(),
            len: 0,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    /// Key row of `layer` (0-indexed) at `position`, `n_kv·d_head` values.
    pub fn key(&self, layer: usize, position: usize) -> &[Real] {
        &self.keys[layer][position * self.kv_dim..(position + 1) * self.kv_dim]
    }

    pub fn value(&self, layer: usize, position: usize) -> &[Real] {
        &self.values[layer][position * self.kv_dim..(position + 1) * self.kv_dim]
    }

    /// Appends the rows of a forward over positions `len..len+rows`.
    pub fn append(&mut self, g: &Graph<'_>, kv: &[LayerKv]) -> Result<()> {
        if kv.len() != self.keys.len() {
            return Err(Error::Config(format!("{} layers appended to a {}-layer cache", kv.len(), self.keys.len())));
        }
        let rows = g.shape(kv[0].k)[0];
        for (l, layer) in kv.iter().enumerate() {
            let (k, v) = (g.value(layer.k), g.value(layer.v));
            if k.cols() != self.kv_dim || v.cols() != self.kv_dim || k.rows() != rows || v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "cache append",
                    lhs: k.shape().to_vec(),
                    rhs: vec![rows, self.kv_dim],
                });
            }
            self.keys[l].extend_from_slice(k.data());
            self.values[l].extend_from_slice(v.data());
        }
        self.len += rows;
        Ok(())
    }

    /// The cache as non-differentiable context for a forward at `position`.
    pub fn context(&self, g: &mut Graph<'_>, position: usize) -> Result<Context> {
        if position != self.len {
            return Err(Error::CacheMismatch {
                cached: self.len,
                position,
            });
        }
        let layers = self
            .keys
            .iter()
            .zip(&self.values)
            .map(|(k, v)| {
                let k = g.constant(Tensor::new(vec![self.len, self.kv_dim], k.clone())?);
                let v = g.constant(Tensor::new(vec![self.len, self.kv_dim], v.clone())?);
                Ok(LayerKv { k, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Context {
            positions: (0..self.len).collect(),
            hidden: Vec::new(),
            layers,
        })
    }
}
