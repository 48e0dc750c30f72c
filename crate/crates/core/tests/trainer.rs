mod common;

use common::*;
use lrt_core::backbone::{Context, ForwardInput, Memory, Model};
use lrt_core::config::{LrtConfig, MemorySource};
use lrt_core::tensor::gradcheck::{grad_check, GradCheckOptions};
use lrt_core::trainer::*;
use lrt_core::{Graph, ModelConfig, Real, Tensor};
use proptest::prelude::*;

fn lrt_model(seed: u64, source: MemorySource) -> Model {
    let mut l = LrtConfig::for_depth(2);
    l.memory_source = source;
    let mut m = Model::init(tiny().with_lrt(l), seed).unwrap();
    randomize(&mut m, seed + 1, 0.3);
    m
}

fn seq(len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let t = tokens(len + 1, 32, seed);
    (t[..len].to_vec(), t[1..].to_vec())
}

const SOURCES: [MemorySource; 5] = [
    MemorySource::Previous(1),
    MemorySource::Previous(2),
    MemorySource::LearnedAverage(3),
    MemorySource::Current,
    MemorySource::CurrentPlusPrevious,
];

#[test]
fn sequential_unroll_matches_reference() {
    for (i, src) in SOURCES.into_iter().enumerate() {
        let model = lrt_model(10 + i as u64, src);
        let (x, y) = seq(8, 3);
        let mut g = Graph::with_params(&model.params);
        let u = sequential_unroll(&mut g, &model, &x, &y).unwrap();
        let (logits, chain) = reference_sequential(&model, &x);
        for t in 0..8 {
            assert!(max_diff(g.value(u.logits[t]).data(), &logits[t]) < 1e-10, "{src:?} t={t}");
            assert!(max_diff(g.value(u.chain[t]).data(), &chain[t]) < 1e-8, "{src:?} t={t} {}", max_diff(g.value(u.chain[t]).data(), &chain[t]));
        }
        let fwd = if src.needs_first_pass() { 16 } else { 8 };
        assert_eq!(u.token_forward_count, fwd);
    }
}

#[test]
fn sequential_with_source_average_matches_reference() {
    let mut l = LrtConfig::for_depth(2);
    l.source_average = vec![1, 2];
    let mut model = Model::init(tiny().with_lrt(l), 4).unwrap();
    randomize(&mut model, 5, 0.3);
    let (x, y) = seq(6, 6);
    let mut g = Graph::with_params(&model.params);
    let u = sequential_unroll(&mut g, &model, &x, &y).unwrap();
    let (logits, _) = reference_sequential(&model, &x);
    for t in 0..6 {
        assert!(max_diff(g.value(u.logits[t]).data(), &logits[t]) < 1e-10);
    }
}

#[test]
fn singleton_refinement_reproduces_sequential() {
    let sources = [MemorySource::Previous(1), MemorySource::Previous(2), MemorySource::LearnedAverage(2)];
    for (i, src) in sources.into_iter().enumerate() {
        let model = lrt_model(20 + i as u64, src);
        let (x, y) = seq(6, 7);
        let mut g = Graph::with_params(&model.params);
        let part = partition_strided(6, 6).unwrap();
        for vis in [Visibility::Fresh, Visibility::Stale] {
            let step = interleaved_loss(&mut g, &model, &x, &y, &part, vis).unwrap();
            let u = sequential_unroll(&mut g, &model, &x, &y).unwrap();
            for t in 0..6 {
                let a = g.value(step.subsets[t]).item();
                let b = g.value(u.losses).data()[t];
                assert!((a - b).abs() < 1e-5, "{src:?} {vis:?} t={t}: {a} vs {b}");
            }
            assert!((g.value(step.init).item() - {
                let (_, l) = init_forward(&mut g, &model, &x, &y).unwrap();
                g.value(l).item()
            })
            .abs()
                < 1e-15);
        }
    }
}

#[test]
fn batched_refinement_matches_brute_force() {
    let model = lrt_model(30, MemorySource::Previous(1));
    let (x, y) = seq(8, 31);
    let mut g = Graph::with_params(&model.params);
    let (mut buffer, _) = init_forward(&mut g, &model, &x, &y).unwrap();
    let part = partition_strided(8, 3).unwrap();
    let mut oracle = values_of(&g, &buffer);
    for subset in &part.subsets {
        let (want_loss, want) = brute_force_stage(&model, &oracle, subset, &x, &y);
        let (next, loss) = refine_subset(&mut g, &model, &buffer, subset, &x, &y, Visibility::Fresh).unwrap();
        assert!((g.value(loss).item() - want_loss).abs() < 1e-5);
        let got = values_of(&g, &next);
        for t in 0..8 {
            assert!(max_diff(&got.source[t], &want.source[t]) < 1e-5);
            for l in 0..2 {
                assert!(max_diff(&got.k[l][t], &want.k[l][t]) < 1e-5);
                assert!(max_diff(&got.v[l][t], &want.v[l][t]) < 1e-5);
            }
        }
        buffer = next;
        oracle = got;
    }
    assert_eq!(buffer.stage, 3);
}

#[test]
fn write_back_touches_only_the_subset() {
    let model = lrt_model(32, MemorySource::Previous(1));
    let (x, y) = seq(8, 33);
    let mut g = Graph::with_params(&model.params);
    let (b0, _) = init_forward(&mut g, &model, &x, &y).unwrap();
    let before = values_of(&g, &b0);
    let (b1, _) = refine_subset(&mut g, &model, &b0, &[1, 4, 6], &x, &y, Visibility::Fresh).unwrap();
    let after = values_of(&g, &b1);
    for t in 0..8 {
        let refined = [1, 4, 6].contains(&t);
        assert_eq!(after.source[t] != before.source[t], refined, "position {t}");
        assert_eq!(after.k[0][t] == before.k[0][t], !refined);
    }
    assert!(refine_subset(&mut g, &model, &b0, &[2, 9], &x, &y, Visibility::Fresh).is_err());
}

#[test]
fn init_buffer_holds_source_states() {
    let model = lrt_model(34, MemorySource::Previous(1));
    let (x, y) = seq(8, 35);
    let mut g = Graph::with_params(&model.params);
    let positions: Vec<usize> = (0..8).collect();
    let out = model.forward(&mut g, ForwardInput::new(&x, &positions)).unwrap();
    let (b, _) = init_forward(&mut g, &model, &x, &y).unwrap();
    assert_eq!(g.value(b.source.unwrap()), g.value(out.hidden[0]));
    assert!(b.kv.iter().all(|l| g.value(l.k).rows() == 8 && g.value(l.v).rows() == 8));
}

#[test]
fn baseline_init_loss_equals_training_loss() {
    let base = Model::init(tiny(), 36).unwrap();
    let lrt = Model::init(tiny().with_lrt(LrtConfig::for_depth(2)), 36).unwrap();
    let (x, y) = seq(8, 37);
    let loss = |m: &Model| {
        let mut g = Graph::with_params(&m.params);
        let (_, l) = init_forward(&mut g, m, &x, &y).unwrap();
        g.value(l).item()
    };
    assert_eq!(loss(&base), loss(&lrt));
}

#[test]
fn disabled_memory_sequential_equals_parallel() {
    let mut model = Model::init(tiny(), 38).unwrap();
    randomize(&mut model, 39, 0.3);
    let (x, y) = seq(8, 40);
    let mut g = Graph::with_params(&model.params);
    let u = sequential_unroll(&mut g, &model, &x, &y).unwrap();
    let (logits, _) = model.forward_baseline(&x).unwrap();
    for t in 0..8 {
        assert!((g.value(u.losses).data()[t] - ce(logits.row(t), y[t])).abs() < 1e-10);
    }
    assert!(u.chain.is_empty());
}

#[test]
fn chunked_limits() {
    let model = lrt_model(41, MemorySource::Previous(1));
    let (x, y) = seq(6, 42);
    let mut g = Graph::with_params(&model.params);
    let (_, init) = init_forward(&mut g, &model, &x, &y).unwrap();
    let whole = chunked_loss(&mut g, &model, &x, &y, 6).unwrap();
    let more = chunked_loss(&mut g, &model, &x, &y, 10).unwrap();
    assert!((g.value(whole.combined).item() - g.value(init).item()).abs() < 1e-12);
    assert!((g.value(more.combined).item() - g.value(init).item()).abs() < 1e-12);
    let one = chunked_loss(&mut g, &model, &x, &y, 1).unwrap();
    let u = sequential_unroll(&mut g, &model, &x, &y).unwrap();
    assert!((g.value(one.combined).item() - g.value(u.loss).item()).abs() < 1e-10);
    assert_eq!(one.token_forward_count, 6);
    assert!(chunked_loss(&mut g, &model, &x, &y, 0).is_err());
}

#[test]
fn chunk_boundaries_carry_last_state() {
    // Two chunks of three: the second chunk's logits equal a forward of
    // positions 3..6 with the state of position 2 broadcast as memory.
    let model = lrt_model(43, MemorySource::Previous(1));
    let (x, y) = seq(6, 44);
    let mut g = Graph::with_params(&model.params);
    let step = chunked_loss(&mut g, &model, &x, &y, 3).unwrap();
    let (logits, _) = {
        let first = model.forward(&mut g, ForwardInput::new(&x[..3], &[0, 1, 2])).unwrap();
        let state = g.value(first.source.unwrap()).row(2).to_vec();
        let mem = g.constant(Tensor::matrix(3, 16, [state.clone(), state.clone(), state].concat()).unwrap());
        let ctx = Context {
            positions: vec![0, 1, 2],
            hidden: Vec::new(),
            layers: first.kv.clone(),
        };
        let second = model
            .forward(&mut g, ForwardInput::new(&x[3..], &[3, 4, 5]).with_memory(Memory::Rows(mem)).with_context(&ctx))
            .unwrap();
        (g.value(second.logits).clone(), ())
    };
    let (init_logits, _) = model.forward_baseline(&x[..3]).unwrap();
    let mut want = 0.0;
    for t in 0..3 {
        want += ce(init_logits.row(t), y[t]);
        want += ce(logits.row(t), y[t + 3]);
    }
    assert!((g.value(step.combined).item() - want / 6.0).abs() < 1e-12);
}

#[test]
fn loss_average_and_forward_counts() {
    let model = lrt_model(45, MemorySource::Previous(1));
    let (x, y) = seq(8, 46);
    let mut g = Graph::with_params(&model.params);
    let part = partition_strided(8, 2).unwrap();
    let s = interleaved_loss(&mut g, &model, &x, &y, &part, Visibility::Fresh).unwrap();
    let parts: Vec<Real> = s.subsets.iter().map(|&v| g.value(v).item()).collect();
    let init = g.value(s.init).item();
    let want = (init + parts[0] + parts[1]) / 3.0;
    assert!((g.value(s.combined).item() - want).abs() < 1e-12);
    assert_eq!(s.token_forward_count, 16);

    let (bd, _) = batch_step(&model, &[(x.clone(), y.clone())], &TrainMode::Interleaved { stages: 2, visibility: Visibility::Fresh }).unwrap();
    assert!((bd.combined - bd.recombine()).abs() < 1e-12);
    assert_eq!(bd.subsets.len(), 2);
}

#[test]
fn interleaved_step_grad_check() {
    let model = lrt_model(47, MemorySource::Previous(1));
    let (x, y) = seq(8, 48);
    let part = partition_strided(8, 2).unwrap();
    let m = &model;
    let report = grad_check(
        |g| Ok(interleaved_loss(g, m, &x, &y, &part, Visibility::Fresh)?.combined),
        &model.params,
        &GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_entries: Some(12),
        },
    )
    .unwrap();
    assert_eq!(report.params.len(), model.params.len());
    for p in &report.params {
        assert!(p.max_rel_error < 1e-4, "{}: {}", p.name, p.max_rel_error);
    }
}

#[test]
fn steps_are_deterministic() {
    let run = || {
        let model = lrt_model(49, MemorySource::Previous(1));
        let batch = vec![seq(8, 50), seq(8, 51)];
        let mode = TrainMode::Interleaved {
            stages: 3,
            visibility: Visibility::Fresh,
        };
        let (bd, grads) = batch_step(&model, &batch, &mode).unwrap();
        (bd, grads.dense_params(&model.params))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn adamw_behaviour() {
    let model = lrt_model(52, MemorySource::Previous(1));
    let mut store = model.params.clone();
    let batch = vec![seq(8, 53)];
    let (_, grads) = batch_step(&model, &batch, &TrainMode::Baseline).unwrap();
    let mut opt = AdamW::new(&store);
    opt.step(&mut store, &grads, 1e-2).unwrap();
    assert_ne!(store.tensor(model.embed), model.params.tensor(model.embed));

    // Zero gradients and no decay leave parameters untouched.
    let mut g = Graph::with_params(&model.params);
    let e = g.param(model.embed);
    let z = g.scale(e, 0.0);
    let loss = g.sum(z);
    let zero = g.backward(loss).unwrap();
    let mut store = model.params.clone();
    let mut opt = AdamW::new(&store);
    opt.weight_decay = 0.0;
    opt.step(&mut store, &zero, 1e-2).unwrap();
    assert_eq!(store.tensor(model.embed), model.params.tensor(model.embed));
}

#[test]
fn adamw_rejects_non_finite_gradient() {
    let model = Model::init(ModelConfig::tiny(), 54).unwrap();
    let mut g = Graph::with_params(&model.params);
    let w = g.param(model.layers[0].wq);
    let zero = g.constant(Tensor::zeros(&[1]));
    let q = g.div(w, zero).unwrap();
    let loss = g.sum(q);
    let grads = g.backward(loss).unwrap();
    let mut store = model.params.clone();
    let mut opt = AdamW::new(&store);
    match opt.step(&mut store, &grads, 1e-3) {
        Err(lrt_core::Error::NonFinite(name)) => assert_eq!(name, "layers.1.wq"),
        other => panic!("{:?}", other.err()),
    }
    assert_eq!(&store, &model.params);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partitions_cover_once(len in 1usize..200, s in 1usize..200) {
        prop_assume!(s <= len);
        let p = partition_strided(len, s).unwrap();
        let mut all: Vec<usize> = p.subsets.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert!(PartitionSpec::new(len, p.subsets.clone()).is_ok());
    }

    #[test]
    fn interleaved_forward_count_is_twice_length(len in 2usize..9, s in 1usize..9) {
        prop_assume!(s <= len);
        let model = lrt_model(55, MemorySource::Previous(1));
        let (x, y) = seq(len, 56);
        let mut g = Graph::with_params(&model.params);
        let part = partition_strided(len, s).unwrap();
        let step = interleaved_loss(&mut g, &model, &x, &y, &part, Visibility::Fresh).unwrap();
        prop_assert_eq!(step.token_forward_count, 2 * len);
        let mode = TrainMode::Interleaved { stages: s, visibility: Visibility::Fresh };
        prop_assert_eq!(mode.token_forwards(len, None), 2 * len);
        prop_assert_eq!(TrainMode::Chunked { chunk: s }.token_forwards(len, None), len);
    }
}
