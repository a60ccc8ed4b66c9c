use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{DistanceScale, GeometryConfig, Norm};
use crate::models::{EmbeddingSpec, MlpSpec, ModelInput, NetworkSpec, TransformerSpec};

fn geo(a: f64, y: f64) -> GeometryConfig {
    GeometryConfig {
        a,
        y_star: y,
        norm: Norm::L1,
        distance_scale: DistanceScale::Literal,
    }
}

fn random_model(spec: NetworkSpec, seed: u64) -> Model {
    let mut m = Model::init(spec, geo(2.0, 0.1), seed, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in &mut m.params {
        p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    m
}

fn all_swaps() -> SwapConfig {
    SwapConfig {
        k: 1000,
        every: 1,
        allow_input_swaps: true,
        allow_output_swaps: true,
    }
}

fn modadd_like(vocab: usize) -> NetworkSpec {
    NetworkSpec::Mlp(MlpSpec {
        widths: vec![8, 6, vocab],
        layouts: None,
        embedding: Some(EmbeddingSpec {
            vocab,
            dim: 4,
            tokens: 2,
        }),
    })
}

#[test]
fn scores_examples() {
    let mut m = random_model(NetworkSpec::mlp(&[3, 4, 2]), 1);
    m.params.iter_mut().for_each(|p| *p = Tensor::zeros(p.rows(), p.cols()));
    assert!(neuron_scores(&m, 1).iter().all(|&s| s == 0.0));

    let params = vec![
        Tensor::column_vector(vec![1.0, -2.0]),
        Tensor::scalar(0.5),
        Tensor::scalar(3.0),
        Tensor::scalar(0.0),
    ];
    let m = Model::from_parts(NetworkSpec::mlp(&[2, 1, 1]), geo(2.0, 0.1), params, None).unwrap();
    assert_eq!(neuron_scores(&m, 1), vec![6.0]);
    assert_eq!(neuron_scores(&m, 0), vec![1.0, 2.0]);
    assert_eq!(neuron_scores(&m, 2), vec![3.0]);
}

#[test]
fn scores_match_row_and_column_sums() {
    let m = random_model(NetworkSpec::mlp(&[3, 5, 4, 2]), 2);
    let (w2, w3) = (m.param("W2").unwrap(), m.param("W3").unwrap());
    let s = neuron_scores(&m, 2);
    for j in 0..4 {
        let incoming: f64 = (0..5).map(|r| w2.get(r, j).abs()).sum();
        let outgoing: f64 = (0..2).map(|c| w3.get(j, c).abs()).sum();
        assert!((s[j] - incoming - outgoing).abs() < 1e-14);
    }
}

#[test]
fn symmetric_weights_propose_nothing() {
    let mut m = random_model(NetworkSpec::mlp(&[1, 3, 1]), 3);
    m.params[0] = Tensor::filled(1, 3, 0.7);
    m.params[2] = Tensor::filled(3, 1, 0.7);
    // every slot holds an identical neuron, so any swap is cost-neutral
    assert_eq!(swap_delta(&m, 1, 0, 2), 0.0);
    assert!(best_swap_for(&m, 1, 0).is_none());
}

#[test]
fn heavy_far_neuron_moves_near() {
    let params = vec![
        Tensor::row_vector(vec![0.0, 5.0]),
        Tensor::zeros(1, 2),
        Tensor::column_vector(vec![0.0, 5.0]),
        Tensor::scalar(0.0),
    ];
    let mut m = Model::from_parts(NetworkSpec::mlp(&[1, 2, 1]), geo(2.0, 0.1), params, None).unwrap();
    let before = connection_cost(&m);
    let (k, delta) = best_swap_for(&m, 1, 1).unwrap();
    assert_eq!(k, 0);
    // d_far = 2 * 1 + 0.1, d_near = 0.1 on both sides of the neuron
    let expected = 2.0 * 5.0 * (0.1 - 2.1);
    assert!((delta - expected).abs() < 1e-12);
    apply_swap(&mut m, 1, 1, 0, None).unwrap();
    assert!((connection_cost(&m) - before - expected).abs() < 1e-12);
    assert!(best_swap_for(&m, 1, 0).is_none());
}

#[test]
fn best_partner_matches_exhaustive_search() {
    for seed in 0..10 {
        let m = random_model(NetworkSpec::mlp(&[3, 6, 2]), 100 + seed);
        let base = connection_cost(&m);
        for j in 0..6 {
            let mut best: Option<(usize, f64)> = None;
            for k in (0..6).filter(|&k| k != j) {
                let mut c = m.clone();
                apply_swap(&mut c, 1, j, k, None).unwrap();
                let d = connection_cost(&c) - base;
                assert!((d - swap_delta(&m, 1, j, k)).abs() < 1e-12);
                if best.is_none_or(|(_, b)| d < b - 1e-13) {
                    best = Some((k, d));
                }
            }
            let oracle = best.filter(|&(_, d)| d < 0.0).map(|(k, _)| k);
            assert_eq!(best_swap_for(&m, 1, j).map(|(k, _)| k), oracle);
        }
    }
}

#[test]
fn incremental_delta_matches_recompute_everywhere() {
    let specs = [
        NetworkSpec::mlp(&[4, 7, 5, 3]),
        modadd_like(5),
        NetworkSpec::Transformer(TransformerSpec {
            d_model: 6,
            d_mlp: 8,
            ..TransformerSpec::default()
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (s, spec) in specs.into_iter().enumerate() {
        let m = random_model(spec, s as u64);
        let base = connection_cost(&m);
        for g in 0..m.topology.groups.len() {
            let n = m.topology.groups[g].size;
            for _ in 0..5 {
                let j = rng.random_range(0..n);
                let k = rng.random_range(0..n);
                if j == k {
                    continue;
                }
                let mut c = m.clone();
                apply_swap(&mut c, g, j, k, None).unwrap();
                let full = connection_cost(&c) - base;
                assert!((full - swap_delta(&m, g, j, k)).abs() < 1e-12, "group {g}");
            }
        }
    }
}

#[test]
fn swap_is_an_involution() {
    let m = random_model(modadd_like(7), 4);
    let mut c = m.clone();
    apply_swap(&mut c, 0, 1, 3, None).unwrap();
    assert_ne!(c.params, m.params);
    apply_swap(&mut c, 0, 1, 3, None).unwrap();
    assert_eq!(c.params, m.params);
    assert_eq!(c.perms, m.perms);
    assert!(apply_swap(&mut c, 0, 2, 2, None).is_err());
    assert!(apply_swap(&mut c, 0, 2, 9, None).is_err());
    assert!(apply_swap(&mut c, 99, 0, 1, None).is_err());
}

fn assert_function_preserved(m: &Model, input: &ModelInput, seed: u64) {
    let before = m.predict(input).unwrap();
    let mut c = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20 {
        let g = rng.random_range(0..c.topology.groups.len());
        let n = c.topology.groups[g].size;
        if n < 2 {
            continue;
        }
        let j = rng.random_range(0..n);
        let k = (j + rng.random_range(1..n)) % n;
        apply_swap(&mut c, g, j, k, None).unwrap();
    }
    let after = c.predict(input).unwrap();
    assert!(before.max_abs_diff(&after) < 1e-12, "{}", before.max_abs_diff(&after));
}

#[test]
fn swaps_preserve_mlp_function() {
    let m = random_model(NetworkSpec::mlp(&[5, 8, 6, 3]), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(100, 5, |_, _| rng.random_range(-2.0..2.0));
    assert_function_preserved(&m, &ModelInput::Dense(x), 11);
}

#[test]
fn embedding_swaps_exchange_table_columns() {
    let m = random_model(modadd_like(7), 6);
    let mut c = m.clone();
    apply_swap(&mut c, 0, 0, 2, None).unwrap();
    let (e0, e1) = (m.param("E").unwrap(), c.param("E").unwrap());
    assert_eq!(e0.column(0), e1.column(2));
    assert_eq!(e0.column(2), e1.column(0));
    let ids: Vec<usize> = (0..7).flat_map(|a| (0..7).flat_map(move |b| [a, b])).collect();
    let input = ModelInput::Tokens { ids, per_sample: 2 };
    let d = m.predict(&input).unwrap().max_abs_diff(&c.predict(&input).unwrap());
    assert!(d < 1e-12, "{d}");
    assert_function_preserved(&m, &input, 12);
}

#[test]
fn swaps_preserve_transformer_function() {
    let m = random_model(
        NetworkSpec::Transformer(TransformerSpec {
            d_model: 8,
            d_mlp: 10,
            ..TransformerSpec::default()
        }),
        7,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(30, 3, |_, _| rng.random_range(-1.0..1.0));
    assert_function_preserved(&m, &ModelInput::Dense(x), 13);
}

#[test]
fn adam_moments_follow_parameters() {
    let mut m = random_model(NetworkSpec::mlp(&[2, 4, 1]), 8);
    let mut adam = AdamState::new(Default::default(), &m.params);
    adam.m = m.params.clone();
    adam.v = m.params.iter().map(|p| p.map(|x| x * x)).collect();
    apply_swap(&mut m, 1, 0, 3, Some(&mut adam)).unwrap();
    assert_eq!(adam.m, m.params);
}

#[test]
fn k_zero_is_a_no_op() {
    let mut m = random_model(NetworkSpec::mlp(&[3, 6, 2]), 9);
    let before = m.params.clone();
    let cfg = SwapConfig { k: 0, ..all_swaps() };
    assert!(swap_step(&mut m, &cfg, None).unwrap().is_empty());
    assert_eq!(m.params, before);
}

/// 4-4-2 network whose hidden neuron i reads input i and writes output i / 2.
fn local_net() -> Model {
    let w1 = Tensor::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
    let w2 = Tensor::from_fn(4, 2, |r, c| if r / 2 == c { 1.0 } else { 0.0 });
    let params = vec![w1, Tensor::zeros(1, 4), w2, Tensor::zeros(1, 2)];
    Model::from_parts(NetworkSpec::mlp(&[4, 4, 2]), geo(2.0, 0.1), params, None).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Places hidden neuron `perm[s]` of `m` at slot `s`.
fn relabel_hidden(m: &Model, perm: &[usize]) -> Model {
    let mut c = m.clone();
    c.params[0] = m.params[0].select_cols(perm);
    c.params[1] = m.params[1].select_cols(perm);
    c.params[2] = m.params[2].select_rows(perm);
    c
}

#[test]
fn local_network_needs_no_swaps() {
    let mut m = local_net();
    let cfg = SwapConfig {
        k: 4,
        ..all_swaps()
    };
    assert!(swap_step(&mut m, &cfg, None).unwrap().is_empty());
}

#[test]
fn repeated_swaps_recover_near_optimal_layout() {
    let cfg = SwapConfig {
        k: 4,
        allow_input_swaps: false,
        allow_output_swaps: false,
        every: 1,
    };
    let base = local_net();
    let optimum = permutations(4)
        .iter()
        .map(|p| connection_cost(&relabel_hidden(&base, p)))
        .fold(f64::INFINITY, f64::min);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut rng);
        let mut m = relabel_hidden(&base, &perm);
        let probe = ModelInput::Dense(Tensor::from_fn(8, 4, |r, c| ((r * 4 + c) as f64).sin()));
        let out = m.predict(&probe).unwrap();
        for _ in 0..10 {
            let before = connection_cost(&m);
            let events = swap_step(&mut m, &cfg, None).unwrap();
            assert!(connection_cost(&m) <= before + 1e-12);
            if events.is_empty() {
                break;
            }
        }
        assert!(connection_cost(&m) <= 1.05 * optimum, "{} vs {optimum}", connection_cost(&m));
        assert!(m.predict(&probe).unwrap().max_abs_diff(&out) < 1e-12);
    }
}

#[test]
fn swap_step_never_increases_cost() {
    for seed in 0..20 {
        let mut m = random_model(NetworkSpec::mlp(&[4, 10, 8, 3]), 200 + seed);
        let before = connection_cost(&m);
        let events = swap_step(&mut m, &SwapConfig { k: 3, ..all_swaps() }, None).unwrap();
        let after = connection_cost(&m);
        assert!(after <= before + 1e-12);
        let predicted: f64 = events.iter().map(|e| e.delta_cost).sum();
        assert!((after - before - predicted).abs() < 1e-10);
        assert!(events.iter().all(|e| e.delta_cost < 0.0));
    }
}

#[test]
fn disabled_io_swaps_leave_io_groups_alone() {
    let mut m = random_model(NetworkSpec::mlp(&[6, 6, 6]), 31);
    let cfg = SwapConfig {
        k: 6,
        allow_input_swaps: false,
        allow_output_swaps: false,
        every: 1,
    };
    let events = swap_step(&mut m, &cfg, None).unwrap();
    assert!(events.iter().all(|e| e.group == "L1"));
    assert_eq!(m.perms[0], (0..6).collect::<Vec<_>>());
    assert_eq!(m.perms[2], (0..6).collect::<Vec<_>>());
}
