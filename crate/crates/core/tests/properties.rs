//! Property tests for invariants that span modules.

use proptest::prelude::*;
use seqdistill_core::distill::{supervision_row, DistillationConfig, WeightMode};
use seqdistill_core::model::{init_model, Architecture, ModelConfig};
use seqdistill_core::numerics::{Graph, Tensor};
use seqdistill_core::teacher::{ScoreMatrix, Teacher, TeacherPanel, WEIGHT_SUM_TOL};

fn arch() -> impl Strategy<Value = Architecture> {
    prop_oneof![Just(Architecture::Attention), Just(Architecture::MeanPool)]
}

fn model_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 1usize..3, 1usize..3, 1usize..8, arch()).prop_map(|(half, heads, layers, max_len, architecture)| {
        ModelConfig {
            embedding_dim: 2 * half * heads,
            heads,
            layers,
            max_len,
            dropout: 0.1,
            architecture,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensors_reject_non_finite_entries(
        data in prop::collection::vec(-1e3f64..1e3, 1..20),
        pos in any::<prop::sample::Index>(),
        bad in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), Just(f64::NEG_INFINITY)],
    ) {
        let n = data.len();
        prop_assert!(Tensor::new(vec![n], data.clone()).is_ok());
        let mut poisoned = data;
        poisoned[pos.index(n)] = bad;
        prop_assert!(Tensor::new(vec![n], poisoned).is_err());
        prop_assert!(Tensor::new(vec![n + 1], vec![0.0; n]).is_err());
    }

    #[test]
    fn gradient_shapes_match_values(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new();
        let a = g.param("a", t()).unwrap();
        let b = g.param("b", t()).unwrap();
        let prod = g.matmul_nt(a, b).unwrap();
        let soft = g.log_softmax(prod).unwrap();
        let loss = g.mean(soft).unwrap();
        let grads = g.gradients(loss).unwrap();
        for name in ["a", "b"] {
            prop_assert_eq!(grads[name].dims(), &[rows, cols][..]);
            prop_assert!(grads[name].data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn parameter_count_is_a_function_of_vocab_and_config(cfg in model_config(), vocab in 1usize..30, seed in any::<u64>()) {
        let m = init_model(&cfg, vocab, seed).unwrap();
        prop_assert_eq!(m.param_count(), cfg.param_count(vocab));
        prop_assert_eq!(m.param_count(), init_model(&cfg, vocab, seed.wrapping_add(1)).unwrap().param_count());
        let d = cfg.embedding_dim;
        let expected = match cfg.architecture {
            Architecture::MeanPool => vocab * d,
            Architecture::Attention => vocab * d + cfg.max_len * d + cfg.layers * (6 * d * d + 9 * d) + 2 * d,
        };
        prop_assert_eq!(m.param_count(), expected);
        // Scores come from the same table that embeds the inputs.
        let u = m.encode_sequence(&[0], seqdistill_core::model::Mode::Eval).unwrap();
        let emb = m.item_embeddings();
        let direct: Vec<f64> = (0..vocab).map(|j| emb.row(j).iter().zip(&u).map(|(a, b)| a * b).sum()).collect();
        let scored = m.score_items(&u, &(0..vocab).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(scored, direct);
    }

    #[test]
    fn panel_weights_sum_to_one(strengths in prop::collection::vec(0.01f64..10.0, 1..6)) {
        let teachers = strengths.iter().map(|_| Teacher::Scores(ScoreMatrix::new(1, 2, vec![0.0, 1.0]).unwrap())).collect();
        let panel = TeacherPanel::with_strengths(teachers, &strengths).unwrap();
        prop_assert!((panel.weights().iter().sum::<f64>() - 1.0).abs() <= WEIGHT_SUM_TOL);
        prop_assert!(panel.weights().iter().all(|w| (0.0..=1.0).contains(w)));
    }

    #[test]
    fn supervision_rows_are_distributions(
        raw in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 6), 1..5),
        temperature in 0.01f64..10.0,
        epsilon in 0.0f64..1.0,
        fixed in any::<bool>(),
    ) {
        let k = raw.len();
        let config = DistillationConfig {
            temperature,
            epsilon,
            weight_mode: if fixed { WeightMode::Fixed } else { WeightMode::Consistency },
            ..Default::default()
        };
        let (w, q) = supervision_row(&raw, &vec![1.0 / k as f64; k], &config).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn score_matrices_reject_non_finite(n in 1usize..10, bad in prop_oneof![Just(f32::NAN), Just(f32::INFINITY)]) {
        let mut data = vec![0.5f32; n];
        prop_assert!(ScoreMatrix::new(1, n, data.clone()).is_ok());
        data[n - 1] = bad;
        prop_assert!(ScoreMatrix::new(1, n, data).is_err());
    }
}
