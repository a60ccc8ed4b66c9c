
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::silu_scalar as s;
use crate::geometry::{DistanceScale, Norm};

fn geo() -> GeometryConfig {
    GeometryConfig {
        a: 2.0,
        y_star: 0.1,
        norm: Norm::L1,
        distance_scale: DistanceScale::Literal,
    }
}

fn small_transformer() -> NetworkSpec {
    NetworkSpec::Transformer(TransformerSpec {
        d_model: 4,
        d_mlp: 6,
        ..TransformerSpec::default()
    })
}

fn randomize(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut model.params {
        p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let spec = NetworkSpec::mlp(&[100, 7, 3]);
    let a = Model::init(spec.clone(), geo(), 5, 0.0).unwrap();
    let b = Model::init(spec.clone(), geo(), 5, 0.0).unwrap();
    assert_eq!(a.params, b.params);
    let w1 = a.param("W1").unwrap();
    assert!(w1.data().iter().all(|v| v.abs() <= 0.1));
    assert!(a.param("b1").unwrap().data().iter().all(|&v| v == 0.0));
    let noisy = Model::init(spec.clone(), geo(), 5, 1e-6).unwrap();
    let diff = a
        .params
        .iter()
        .zip(&noisy.params)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max);
    assert!(diff > 0.0 && diff <= 5e-6, "{diff}");
    let other = Model::init(spec, geo(), 6, 0.0).unwrap();
    assert_ne!(a.params, other.params);
}

#[test]
fn embedding_init_is_standard_normal() {
    let spec = NetworkSpec::Mlp(MlpSpec {
        widths: vec![64, 10, 59],
        layouts: None,
        embedding: Some(EmbeddingSpec {
            vocab: 59,
            dim: 32,
            tokens: 2,
        }),
    });
    let m = Model::init(spec, geo(), 1, 0.0).unwrap();
    let e = m.param("E").unwrap();
    let n = e.len() as f64;
    let mean = e.sum() / n;
    let var = e.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1, "{mean} {var}");
}

#[test]
fn zero_network_outputs_zero() {
    let mut m = Model::init(NetworkSpec::mlp(&[3, 5, 2]), geo(), 0, 0.0).unwrap();
    m.params.iter_mut().for_each(|p| *p = Tensor::zeros(p.rows(), p.cols()));
    let out = m.predict(&ModelInput::Dense(Tensor::ones(4, 3))).unwrap();
    assert_eq!(out, Tensor::zeros(4, 2));
    assert!(m.predict(&ModelInput::Dense(Tensor::ones(4, 2))).is_err());
}

#[test]
fn hand_built_scalar_net() {
    let params = vec![
        Tensor::scalar(2.0),
        Tensor::scalar(0.0),
        Tensor::scalar(3.0),
        Tensor::scalar(0.0),
    ];
    let m = Model::from_parts(NetworkSpec::mlp(&[1, 1, 1]), geo(), params, None).unwrap();
    let y = m.predict(&ModelInput::Dense(Tensor::scalar(1.0))).unwrap();
    // 3 * 2 / (1 + e^-2)
    let trace = 3.0 * 2.0 / (1.0 + (-2.0f64).exp());
    assert!((y.item().unwrap() - trace).abs() < 1e-14);
}

/// The published two-moons network, with the skip term carried through a
/// SiLU held in its linear regime: `silu(z + 40) = z + 40` to double precision.
pub(crate) fn two_moon_formula_net() -> Model {
    let w1 = Tensor::from_rows(&[vec![0.0, 1.34, -3.29, 2.32], vec![1.44, 0.0, 0.0, 0.0]]).unwrap();
    let b1 = Tensor::row_vector(vec![1.43, 0.0, -0.17, -2.07]);
    let w2 = Tensor::from_rows(&[
        vec![-0.86, 1.0],
        vec![1.72, 0.0],
        vec![-2.47, 0.0],
        vec![1.99, 0.0],
    ])
    .unwrap();
    let b2 = Tensor::row_vector(vec![0.0, 40.0]);
    let w3 = Tensor::column_vector(vec![-6.36, 5.16]);
    let b3 = Tensor::scalar(-5.16 * 40.0);
    Model::from_parts(NetworkSpec::mlp(&[2, 4, 2, 1]), geo(), vec![w1, b1, w2, b2, w3, b3], None).unwrap()
}

#[test]
fn two_moon_formula_transcription() {
    let m = two_moon_formula_net();
    let formula = |x1: f64, x2: f64| {
        let a = s(1.44 * x2 + 1.43);
        5.16 * a - 6.36 * s(-0.86 * a + 1.72 * s(1.34 * x1) - 2.47 * s(-3.29 * x1 - 0.17) + 1.99 * s(2.32 * x1 - 2.07))
    };
    let at_origin = 5.16 * s(1.43) - 6.36 * s(-0.86 * s(1.43) + 1.72 * s(0.0) - 2.47 * s(-0.17) + 1.99 * s(-2.07));
    let y = m.predict(&ModelInput::Dense(Tensor::row_vector(vec![0.0, 0.0]))).unwrap();
    assert!((y.item().unwrap() - at_origin).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (x1, x2) = (rng.random_range(-1.5..2.5), rng.random_range(-1.0..1.5));
        let y = m.predict(&ModelInput::Dense(Tensor::row_vector(vec![x1, x2]))).unwrap();
        assert!((y.item().unwrap() - formula(x1, x2)).abs() < 1e-9);
    }
}

#[test]
fn knockout_semantics() {
    let m = two_moon_formula_net();
    assert_eq!(m.knockout(&[]).unwrap().params, m.params);
    let hidden = m.neurons_of(&[GroupKind::Hidden]);
    assert_eq!(hidden.len(), 6);
    let k = m.knockout(&hidden).unwrap();
    let x = ModelInput::Dense(Tensor::from_fn(5, 2, |r, c| r as f64 - c as f64));
    let y = k.predict(&x).unwrap();
    assert!(y.data().iter().all(|&v| v == -5.16 * 40.0));
    let once = m.knockout(&hidden[..2]).unwrap();
    let twice = once.knockout(&hidden[..2]).unwrap();
    assert_eq!(once.params, twice.params);
    assert_ne!(once.params, m.params);
    assert!(m.knockout(&["L9:0".parse().unwrap()]).is_err());
    assert!(m.knockout(&["L1:4".parse().unwrap()]).is_err());
}

#[test]
fn embedding_tokens_concatenate() {
    let spec = NetworkSpec::Mlp(MlpSpec {
        widths: vec![4, 1],
        layouts: None,
        embedding: Some(EmbeddingSpec {
            vocab: 3,
            dim: 2,
            tokens: 2,
        }),
    });
    let e = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    let w = Tensor::column_vector(vec![1.0, 10.0, 100.0, 1000.0]);
    let m = Model::from_parts(spec, geo(), vec![e, w, Tensor::scalar(0.0)], None).unwrap();
    let y = m
        .predict(&ModelInput::Tokens {
            ids: vec![2, 0],
            per_sample: 2,
        })
        .unwrap();
    assert_eq!(y.item().unwrap(), 5.0 + 60.0 + 100.0 + 2000.0);
    assert!(m.predict(&ModelInput::Tokens { ids: vec![3, 0], per_sample: 2 }).is_err());
}

#[test]
fn zero_transformer_predicts_zero() {
    let mut m = Model::init(small_transformer(), geo(), 0, 0.0).unwrap();
    m.params.iter_mut().for_each(|p| *p = Tensor::zeros(p.rows(), p.cols()));
    let x = ModelInput::Dense(Tensor::from_fn(3, 3, |r, c| (r + c) as f64 * 0.3));
    assert_eq!(m.predict(&x).unwrap(), Tensor::zeros(3, 1));
}

#[test]
fn zero_value_path_leaves_mlp_only() {
    let mut m = Model::init(small_transformer(), geo(), 0, 0.0).unwrap();
    randomize(&mut m, 4);
    for blk in 1..=2 {
        for name in ["Wv", "bv", "bo"] {
            let i = m.topology.tensor_index(&format!("b{blk}.{name}")).unwrap();
            let (r, c) = m.params[i].shape();
            m.params[i] = Tensor::zeros(r, c);
        }
    }
    let x = ModelInput::Dense(Tensor::from_fn(4, 3, |r, c| (r as f64 - c as f64) * 0.4));
    let mut no_proj = m.clone();
    for blk in 1..=2 {
        let i = m.topology.tensor_index(&format!("b{blk}.Wo")).unwrap();
        no_proj.params[i] = Tensor::zeros(4, 4);
    }
    assert_eq!(m.predict(&x).unwrap(), no_proj.predict(&x).unwrap());
}

#[test]
fn earlier_positions_ignore_later_tokens() {
    let mut m = Model::init(small_transformer(), geo(), 0, 0.0).unwrap();
    randomize(&mut m, 8);
    let base = Tensor::from_rows(&[vec![0.5, 1.0, -1.0]]).unwrap();
    let mut later = base.clone();
    later.set(0, 2, 0.9);
    let a = m.activations(&ModelInput::Dense(base)).unwrap();
    let b = m.activations(&ModelInput::Dense(later)).unwrap();
    for ((name, ta), (_, tb)) in a.iter().zip(&b) {
        assert_eq!(ta.row(0), tb.row(0), "{name}");
        assert_eq!(ta.row(1), tb.row(1), "{name}");
    }
    assert_ne!(a.last().unwrap().1.row(2), b.last().unwrap().1.row(2));
}

/// Reverse-mode gradient of the MSE of `model` vs central differences.
fn model_gradient_error(model: &Model, x: &ModelInput, target: &Tensor) -> f64 {
    model.gradient_error(x, target).unwrap()
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let mut m = Model::init(small_transformer(), geo(), 0, 0.0).unwrap();
    randomize(&mut m, 12);
    let x = Tensor::from_fn(3, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin());
    let target = Tensor::column_vector(vec![0.3, -0.2, 0.5]);
    let err = model_gradient_error(&m, &ModelInput::Dense(x), &target);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let mut m = Model::init(small_transformer(), geo(), 2, 0.0).unwrap();
    m.perms[0] = vec![1, 0];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    m.checkpoint(7).save(&path).unwrap();
    let c = Checkpoint::load(&path).unwrap();
    assert_eq!(c.step, 7);
    assert_eq!(c.version, CHECKPOINT_VERSION);
    let back = c.into_model().unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.perms, m.perms);
    let x = ModelInput::Dense(Tensor::from_fn(2, 3, |r, c| (r + c) as f64 * 0.1));
    assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());

    let mut bad = m.checkpoint(0);
    bad.tensors.remove("pos");
    assert!(bad.into_model().is_err());
    let mut bad = m.checkpoint(0);
    bad.permutations.insert("in".into(), vec![0, 0]);
    assert!(bad.into_model().is_err());
}
