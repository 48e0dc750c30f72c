//! Plain-loop reference implementation of the model, written independently
//! of the graph code, plus small helpers shared by the integration tests.
#![allow(dead_code)]

use lrt_core::backbone::{Context, ForwardInput, LayerKv, Memory, Model};
use lrt_core::trainer::SequenceBuffer;
use lrt_core::config::{KvMode, MemorySource, WindowKind};
use lrt_core::{rng, Graph, ModelConfig, Real, Tensor};

pub fn param<'a>(model: &'a Model, name: &str) -> Option<&'a Tensor> {
    model.params.find(name).map(|id| model.params.tensor(id))
}

fn matvec(w: &Tensor, x: &[Real]) -> Vec<Real> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum())
        .collect()
}

fn rms(x: &[Real], eps: Real) -> Vec<Real> {
    let ms = x.iter().map(|v| v * v).sum::<Real>() / x.len() as Real;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().map(|v| v * s).collect()
}

fn rope(x: &[Real], dh: usize, pos: usize, base: Real) -> Vec<Real> {
    let mut y = x.to_vec();
    let half = dh / 2;
    for h in 0..x.len() / dh {
        for j in 0..half {
            let theta = pos as Real / base.powf(2.0 * j as Real / dh as Real);
            let (a, b) = (x[h * dh + j], x[h * dh + j + half]);
            y[h * dh + j] = a * theta.cos() - b * theta.sin();
            y[h * dh + j + half] = a * theta.sin() + b * theta.cos();
        }
    }
    y
}

fn sig(z: Real) -> Real {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(z: &[Real]) -> Vec<Real> {
    let m = z.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<Real> = z.iter().map(|v| (v - m).exp()).collect();
    let s: Real = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn scalar(model: &Model, name: &str) -> Real {
    param(model, name).unwrap().data()[0]
}

pub struct Step {
    pub logits: Vec<Real>,
    pub hidden: Vec<Vec<Real>>,
    pub source: Vec<Real>,
    pub keys: Vec<Vec<Real>>,
    pub values: Vec<Vec<Real>>,
}

/// One position of the model given its memory and the processed keys and
/// values of earlier positions (`cache[layer][position]`).
pub fn reference_step(
    model: &Model,
    token: usize,
    t: usize,
    memory: Option<&[Real]>,
    cache_k: &[Vec<Vec<Real>>],
    cache_v: &[Vec<Vec<Real>>],
) -> Step {
    let c = &model.config;
    let (d, dh, h, kvh) = (c.d_model, c.d_head, c.n_heads, c.n_kv_heads);
    let eps = c.norm_eps;
    let emb = param(model, "embed").unwrap();
    let x0 = rms(&emb.data()[token * d..(token + 1) * d], eps);
    let mut x = x0.clone();
    let mut hidden = Vec::new();
    let (mut keys, mut values) = (Vec::new(), Vec::new());
    for l in 1..=c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let lp = |s: &str| format!("lrt.layers.{l}.{s}");
        let alpha = scalar(model, &p("resid_scale"));
        let beta = scalar(model, &p("skip_scale"));
        let mut u: Vec<Real> = (0..d).map(|i| alpha * x[i] + beta * x0[i]).collect();
        if let (Some(gm), Some(m)) = (param(model, &lp("gamma")), memory) {
            for i in 0..d {
                u[i] += gm.data()[0] * m[i];
            }
        }
        let a = rms(&u, eps);
        let q = matvec(param(model, &p("wq")).unwrap(), &a);
        let mut k = matvec(param(model, &p("wk")).unwrap(), &a);
        let mut v = matvec(param(model, &p("wv")).unwrap(), &a);
        if let Some(table) = param(model, &p("value_embed")) {
            let gz = matvec(param(model, &p("value_gate")).unwrap(), &a);
            let kv = kvh * dh;
            for i in 0..kv {
                v[i] += 2.0 * sig(gz[i / dh]) * table.data()[token * kv + i];
            }
        }
        if let Some(wg) = param(model, &lp("w_gate")) {
            let lrt = c.lrt.as_ref().unwrap();
            let gz = matvec(wg, &x);
            let gl: Vec<Real> = (0..kvh).map(|i| 2.0 * sig(gz[i])).collect();
            let gr: Vec<Real> = (0..kvh).map(|i| 2.0 * sig(gz[kvh + i])).collect();
            let proj = |name: &str| -> Option<Vec<Real>> {
                let w = param(model, &lp(name)).or_else(|| param(model, &format!("lrt.{name}")))?;
                Some(match memory {
                    Some(m) => matvec(w, m),
                    None => vec![0.0; kvh * dh],
                })
            };
            let krec = proj("w_k_rec");
            let vrec = proj("w_v_rec");
            let mix = |local: &mut Vec<Real>, rec: Option<Vec<Real>>| {
                for i in 0..kvh * dh {
                    let hd = i / dh;
                    local[i] = match (&rec, lrt.kv_mode) {
                        (None, _) => gl[hd] * local[i],
                        (Some(r), KvMode::Additive) => gl[hd] * local[i] + gr[hd] * r[i],
                        (Some(r), KvMode::ReplaceLocal) => gr[hd] * r[i],
                    };
                }
            };
            mix(&mut k, krec);
            mix(&mut v, vrec);
        }
        let qn: Vec<Real> = (0..h).flat_map(|i| rms(&q[i * dh..(i + 1) * dh], eps)).collect();
        let kn: Vec<Real> = (0..kvh).flat_map(|i| rms(&k[i * dh..(i + 1) * dh], eps)).collect();
        let qr = rope(&qn, dh, t, c.rope_base);
        let kr = rope(&kn, dh, t, c.rope_base);
        let mut ks: Vec<Vec<Real>> = cache_k[l - 1].clone();
        let mut vs: Vec<Vec<Real>> = cache_v[l - 1].clone();
        ks.push(kr.clone());
        vs.push(v.clone());
        let lo = match c.window_kind(l) {
            WindowKind::Full => 0,
            WindowKind::Sliding(w) => (t + 1).saturating_sub(w),
        };
        let mut o = vec![0.0; h * dh];
        for head in 0..h {
            let g = head / (h / kvh);
            let scores: Vec<Real> = (lo..=t)
                .map(|j| (0..dh).map(|i| qr[head * dh + i] * ks[j][g * dh + i]).sum::<Real>() / (dh as Real).sqrt())
                .collect();
            let pr = softmax(&scores);
            for (n, j) in (lo..=t).enumerate() {
                for i in 0..dh {
                    o[head * dh + i] += pr[n] * vs[j][g * dh + i];
                }
            }
        }
        let ao = matvec(param(model, &p("wo")).unwrap(), &o);
        for i in 0..d {
            u[i] += ao[i];
        }
        let b = rms(&u, eps);
        let f: Vec<Real> = matvec(param(model, &p("mlp.w1")).unwrap(), &b)
            .into_iter()
            .map(|z| z.max(0.0).powi(2))
            .collect();
        let f = matvec(param(model, &p("mlp.w2")).unwrap(), &f);
        for i in 0..d {
            u[i] += f[i];
        }
        hidden.push(u.clone());
        keys.push(kr);
        values.push(v);
        x = u;
    }
    let z = matvec(param(model, "lm_head").unwrap(), &rms(&x, eps));
    let logits = z.iter().map(|v| c.softcap * (v / c.softcap).tanh()).collect();
    let source = match &c.lrt {
        None => Vec::new(),
        Some(lrt) => {
            let layers = lrt.source_layers();
            if let Some(mix) = param(model, "lrt.source_mix") {
                let w = softmax(mix.data());
                (0..d).map(|i| layers.iter().zip(&w).map(|(&l, wl)| wl * hidden[l - 1][i]).sum()).collect()
            } else {
                hidden[layers[0] - 1].clone()
            }
        }
    };
    Step {
        logits,
        hidden,
        source,
        keys,
        values,
    }
}

fn lagged_memory(model: &Model, chain: &[Vec<Real>], t: usize, src: MemorySource) -> Option<Vec<Real>> {
    let d = model.config.d_model;
    let lag = |k: usize| if t >= k { chain[t - k].clone() } else { vec![0.0; d] };
    match src {
        MemorySource::Previous(k) => Some(lag(k)),
        MemorySource::LearnedAverage(w) => {
            let wts = softmax(param(model, "lrt.memory_mix").unwrap().data());
            let mut m = vec![0.0; d];
            for k in 1..=w {
                for (mi, s) in m.iter_mut().zip(lag(k)) {
                    *mi += wts[k - 1] * s;
                }
            }
            Some(m)
        }
        MemorySource::Current | MemorySource::CurrentPlusPrevious => Some(lag(1)),
    }
}

/// The exact recurrence over `tokens`: per-position logits and memory chain.
pub fn reference_sequential(model: &Model, tokens: &[usize]) -> (Vec<Vec<Real>>, Vec<Vec<Real>>) {
    let c = &model.config;
    let mut ck = vec![Vec::new(); c.n_layers];
    let mut cv = vec![Vec::new(); c.n_layers];
    let mut chain: Vec<Vec<Real>> = Vec::new();
    let mut logits = Vec::new();
    for (t, &tok) in tokens.iter().enumerate() {
        let step = match c.lrt.as_ref().map(|l| l.memory_source) {
            None => reference_step(model, tok, t, None, &ck, &cv),
            Some(src) => {
                let lagged = lagged_memory(model, &chain, t, src);
                match src {
                    MemorySource::Current | MemorySource::CurrentPlusPrevious => {
                        let first = reference_step(model, tok, t, lagged.as_deref(), &ck, &cv);
                        let mut m = first.source;
                        if src == MemorySource::CurrentPlusPrevious {
                            for (mi, p) in m.iter_mut().zip(lagged.unwrap()) {
                                *mi += p;
                            }
                        }
                        reference_step(model, tok, t, Some(&m), &ck, &cv)
                    }
                    _ => reference_step(model, tok, t, lagged.as_deref(), &ck, &cv),
                }
            }
        };
        for l in 0..c.n_layers {
            ck[l].push(step.keys[l].clone());
            cv[l].push(step.values[l].clone());
        }
        if c.lrt.is_some() {
            chain.push(step.source.clone());
        }
        logits.push(step.logits);
    }
    (logits, chain)
}

/// Redraws every parameter (including zero-initialized gates and mixing
/// logits) so tests do not pass by accident at init.
pub fn randomize(model: &mut Model, seed: u64, std: Real) {
    let mut r = rng::seeded(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let shape = model.params.tensor(id).shape().to_vec();
        let base = model.params.tensor(id).clone();
        let noise = Tensor::randn(&shape, std, &mut r);
        let data = base.data().iter().zip(noise.data()).map(|(b, n)| b + n).collect();
        *model.params.tensor_mut(id) = Tensor::new(shape, data).unwrap();
    }
}

pub fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

pub fn tiny() -> ModelConfig {
    ModelConfig::tiny()
}

pub fn max_diff(a: &[Real], b: &[Real]) -> Real {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}

/// Cross-entropy of one row of logits.
pub fn ce(logits: &[Real], target: usize) -> Real {
    let m = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
    lse - logits[target]
}

/// Position-by-position recomputation of one stage against a fixed buffer,
/// substituting freshly computed rows of earlier same-subset positions.
pub fn brute_force_stage(model: &Model, buffer: &BufferValues, subset: &[usize], x: &[usize], y: &[usize]) -> (Real, BufferValues) {
    let d = model.config.d_model;
    let mut next = buffer.clone();
    let mut losses = Vec::new();
    for &t in subset {
        let mut g = Graph::with_params(&model.params);
        let memory = if t == 0 {
            vec![0.0; d]
        } else {
            buffer.source[t - 1].clone()
        };
        let m = g.constant(Tensor::matrix(1, d, memory).unwrap());
        let layers = (0..model.config.n_layers)
            .map(|l| {
                let rows = |src: &Vec<Vec<Vec<Real>>>| {
                    let data: Vec<Real> = (0..t).flat_map(|p| src[l][p].clone()).collect();
                    Tensor::new(vec![t, src[l][0].len()], data).unwrap()
                };
                LayerKv {
                    k: g.constant(rows(&next.k)),
                    v: g.constant(rows(&next.v)),
                }
            })
            .collect();
        let ctx = Context {
            positions: (0..t).collect(),
            hidden: Vec::new(),
            layers,
        };
        let pos = [t];
        let mut input = ForwardInput::new(&x[t..t + 1], &pos).with_memory(Memory::Rows(m));
        if t > 0 {
            input = input.with_context(&ctx);
        }
        let out = model.forward(&mut g, input).unwrap();
        losses.push(ce(g.value(out.logits).data(), y[t]));
        for l in 0..model.config.n_layers {
            next.k[l][t] = g.value(out.kv[l].k).data().to_vec();
            next.v[l][t] = g.value(out.kv[l].v).data().to_vec();
        }
        next.source[t] = g.value(out.source.unwrap()).data().to_vec();
    }
    // Rows of this stage become visible to later same-subset positions only
    // through `next`; positions outside the subset keep buffer rows.
    (losses.iter().sum::<Real>() / losses.len() as Real, next)
}

#[derive(Clone)]
pub struct BufferValues {
    pub k: Vec<Vec<Vec<Real>>>,
    pub v: Vec<Vec<Vec<Real>>>,
    pub source: Vec<Vec<Real>>,
}

pub fn values_of(g: &Graph<'_>, b: &SequenceBuffer) -> BufferValues {
    let rows = |v| {
        let t: &Tensor = g.value(v);
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()
    };
    BufferValues {
        k: b.kv.iter().map(|l| rows(l.k)).collect(),
        v: b.kv.iter().map(|l| rows(l.v)).collect(),
        source: rows(b.source.unwrap()),
    }
}
