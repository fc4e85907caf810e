//! Property tests for the type invariants and metric identities.

use std::collections::HashSet;

use backchain::interp::patching::logit_difference;
use backchain::interp::scrub::{l_cs, scrub_key};
use backchain::interp::{
    direct_logit_attribution, qk_circuit_m0, qk_circuit_m1, subgoal_matrix_rp, train_linear_probe, FitOptions,
    Label, LabelKind,
};
use backchain::model::{
    adamw_step, forward, loss_and_grad, residual_decomposition_error, AdamWConfig, Batch, InterventionSpec,
    ModelConfig, Norm, OptimState, Parameters, Site,
};
use backchain::oracle::{ancestor_at, bfs_path, register_chain, unique_path};
use backchain::task::{encode_instance, generate_instance, EdgeOrder, Layout, Region, Vocabulary};
use backchain::{ActivationCache, TokenSequence};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn order() -> impl Strategy<Value = EdgeOrder> {
    prop_oneof![Just(EdgeOrder::Shuffled), Just(EdgeOrder::Backward), Just(EdgeOrder::Forward)]
}

fn small_model(seed: u64, norm: Norm) -> Parameters<f32> {
    Parameters::init(&ModelConfig {
        n_layers: 3,
        d_model: 16,
        d_head: 16,
        d_mlp: 32,
        context_len: Layout::new(5).unwrap().context_len(),
        norm,
        init_scale: 0.3,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn assert_attention_well_formed(cache: &ActivationCache<f32>) -> Result<(), TestCaseError> {
    for layer in &cache.layers {
        for pat in layer.pattern.outer_iter() {
            for (q, row) in pat.outer_iter().enumerate() {
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().skip(q + 1).all(|&w| w == 0.0), "mass above the diagonal at query {q}");
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trees_are_binary_connected_and_labeled(seed in any::<u64>(), n in 2usize..=16) {
        let tree = generate_instance(seed, n, EdgeOrder::Shuffled).unwrap().tree;
        let roots: Vec<_> = (0..n).filter(|&v| tree.parent(v).is_none()).collect();
        prop_assert_eq!(roots.len(), 1);
        prop_assert_eq!(tree.edges().len(), n - 1);
        for v in 0..n {
            prop_assert!(tree.children(v).len() <= 2);
            prop_assert!(tree.children(v).iter().all(|&c| c < n));
            // every node reaches the root through parent links
            prop_assert_eq!(tree.path_from_root(v)[0], roots[0]);
        }
    }

    #[test]
    fn instance_paths_are_the_unique_root_goal_path(seed in any::<u64>(), n in 2usize..=16, order in order()) {
        let inst = generate_instance(seed, n, order).unwrap();
        prop_assert!(inst.tree.is_leaf(inst.goal));
        prop_assert_ne!(inst.goal, inst.root());
        prop_assert_eq!(inst.path[0], inst.root());
        prop_assert_eq!(*inst.path.last().unwrap(), inst.goal);
        for w in inst.path.windows(2) {
            prop_assert_eq!(inst.tree.parent(w[1]), Some(w[0]));
        }
        prop_assert_eq!(&unique_path(&inst.tree, inst.root(), inst.goal), &inst.path);
        prop_assert_eq!(&bfs_path(&inst.tree, inst.root(), inst.goal), &inst.path);
        let mut edges = inst.edge_order.clone();
        edges.sort_unstable();
        prop_assert_eq!(edges, inst.tree.edges());
    }

    #[test]
    fn token_sequences_respect_the_layout(seed in any::<u64>(), n in 2usize..=16) {
        let inst = generate_instance(seed, n, EdgeOrder::Shuffled).unwrap();
        let seq: TokenSequence = encode_instance(&inst).unwrap();
        let layout = Layout::new(n).unwrap();
        prop_assert_eq!(seq.len(), 4 * n - 1);
        prop_assert_eq!(seq.len(), layout.context_len());
        prop_assert!(seq.tokens.iter().all(|&t| t < Vocabulary::SIZE as u32));
        prop_assert_eq!(seq.path_start, layout.path_start());
        let trained: Vec<usize> = (0..seq.len()).filter(|&i| seq.loss_mask[i]).collect();
        let expected: Vec<usize> = (seq.path_start..seq.path_start + inst.path.len() - 1).collect();
        prop_assert_eq!(&trained, &expected);
        for i in trained {
            prop_assert_eq!(seq.regions[i + 1], Region::Path);
        }
    }

    #[test]
    fn ancestors_and_scrub_keys_follow_the_path(seed in any::<u64>(), n in 2usize..=16) {
        let inst = generate_instance(seed, n, EdgeOrder::Shuffled).unwrap();
        let m = inst.path.len();
        for k in 0..m {
            prop_assert_eq!(ancestor_at(&inst.tree, inst.goal, k), Some(inst.path[m - 1 - k]));
            prop_assert_eq!(scrub_key(&inst, k), Some(inst.path[m - 1 - k]));
        }
        prop_assert_eq!(ancestor_at(&inst.tree, inst.goal, m), None);
    }

    #[test]
    fn register_chains_are_contiguous_ancestors(seed in any::<u64>(), n in 2usize..=16, node in 0usize..16, depth in 0usize..8) {
        let inst = generate_instance(seed, n, EdgeOrder::Shuffled).unwrap();
        let node = node % n;
        let chain = register_chain(&inst.tree, node, depth);
        prop_assert_eq!(chain[0], node);
        prop_assert!(chain.len() <= depth + 1);
        for w in chain.windows(2) {
            prop_assert_eq!(inst.tree.parent(w[0]), Some(w[1]));
        }
    }

    #[test]
    fn l_cs_is_affine_invariant(lm in 0.01f64..3.0, gap in 0.5f64..3.0, frac in 0.0f64..1.0, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let lr = lm + gap;
        let ls = lm + frac * gap;
        let base = l_cs(ls, lm, lr);
        prop_assert!((base - (1.0 - frac)).abs() < 1e-9);
        prop_assert!((l_cs(a * ls + b, a * lm + b, a * lr + b) - base).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_passes_decompose_and_stay_causal(seed in any::<u64>(), pre_ln in any::<bool>()) {
        let params = small_model(seed, if pre_ln { Norm::PreLn } else { Norm::None });
        let inst = generate_instance(seed, 5, EdgeOrder::Shuffled).unwrap();
        let tokens = encode_instance(&inst).unwrap().tokens;
        let cache = forward(&params, &tokens, None).unwrap();
        prop_assert!(residual_decomposition_error(&cache) <= 1e-5);
        assert_attention_well_formed(&cache)?;
    }

    #[test]
    fn interventions_never_leak_future_attention(seed in any::<u64>(), layer in 0usize..3, q in 1usize..19, k in 0usize..19, scale in -2.0f32..2.0) {
        let params = small_model(seed, Norm::None);
        let inst = generate_instance(seed, 5, EdgeOrder::Shuffled).unwrap();
        let tokens = encode_instance(&inst).unwrap().tokens;
        let k = k.min(q);
        let noise = Array2::from_shape_fn((1, 16), |(_, j)| scale * (j as f32 - 8.0) / 8.0);
        let spec = InterventionSpec::new()
            .add(layer, Site::ResidPre, vec![k], noise.clone())
            .replace(layer, Site::AttnOut, vec![q], noise.clone())
            .add(layer, Site::MlpOut, vec![k], noise)
            .block_scores(layer, vec![q], vec![k]);
        let cache = forward(&params, &tokens, Some(&spec)).unwrap();
        assert_attention_well_formed(&cache)?;
        if k < q {
            prop_assert_eq!(cache.layers[layer].pattern[[0, q, k]], 0.0);
        }
    }

    #[test]
    fn dla_rows_sum_to_the_head_output(seed in any::<u64>()) {
        let params = small_model(seed, Norm::PreLn);
        let inst = generate_instance(seed, 5, EdgeOrder::Shuffled).unwrap();
        let prompt = encode_instance(&inst).unwrap().prompt().to_vec();
        let cache = forward(&params, &prompt, None).unwrap();
        let table = direct_logit_attribution(&params, &cache, 0, prompt.len() - 1, Some(&[0, 1, 2])).unwrap();
        prop_assert!(table.max_linearity_error() <= 1e-4);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), step in any::<u64>()) {
        let params = small_model(seed, Norm::PreLn);
        let bytes = params.to_checkpoint_bytes(step).unwrap();
        let (back, s) = Parameters::<f32>::from_checkpoint_reader(bytes.as_slice()).unwrap();
        prop_assert_eq!(s, step);
        prop_assert_eq!(back.to_checkpoint_bytes(step).unwrap(), bytes);
        prop_assert_eq!(back.digest(), params.digest());
    }

    #[test]
    fn circuit_matrices_are_pure(seed in any::<u64>()) {
        let params = small_model(seed, Norm::None);
        prop_assert_eq!(qk_circuit_m0(&params, false).unwrap(), qk_circuit_m0(&params, false).unwrap());
        prop_assert_eq!(qk_circuit_m1(&params, false).unwrap(), qk_circuit_m1(&params, false).unwrap());
        prop_assert_eq!(subgoal_matrix_rp(&params, 0, false).unwrap(), subgoal_matrix_rp(&params, 0, false).unwrap());
    }

    #[test]
    fn adamw_keeps_shapes_and_finiteness(seed in any::<u64>()) {
        let mut params = small_model(seed, Norm::PreLn);
        let seqs: Vec<_> = (0..4).map(|i| encode_instance(&generate_instance(seed ^ i, 5, EdgeOrder::Shuffled).unwrap()).unwrap()).collect();
        let batch = Batch::from_sequences(&seqs.iter().collect::<Vec<_>>()).unwrap();
        let mut state = OptimState::new(&params, AdamWConfig::default());
        for _ in 0..3 {
            let g = loss_and_grad(&params, &batch).unwrap();
            adamw_step(&mut params, &g.grads, &mut state);
        }
        prop_assert_eq!(state.step, 3);
        prop_assert!(params.is_finite());
        let shapes = |p: &Parameters<f32>| p.tensors().iter().map(|t| t.data.len()).collect::<Vec<_>>();
        prop_assert_eq!(shapes(&state.m), shapes(&params));
        prop_assert_eq!(shapes(&state.v), shapes(&params));
    }

    #[test]
    fn probe_f1_is_a_fraction(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| {
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let x = Array2::from_shape_fn((n, 6), |(i, j)| if j == y[i] { 1.0 } else { 0.0 } + rng.random_range(-1.0..1.0));
            (x, y.into_iter().map(Label::Class).collect::<Vec<_>>())
        };
        let (xtr, ytr) = draw(120);
        let (xte, yte) = draw(60);
        if ytr.iter().collect::<HashSet<_>>().len() < 2 {
            return Ok(());
        }
        let opts = FitOptions { max_iter: 200, ..Default::default() };
        let (_, report) = train_linear_probe(LabelKind::GoalAtPath, 1, &xtr, &ytr, &xte, &yte, &opts, false, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&report.f1));
        prop_assert!((0.0..=1.0).contains(&report.baseline_f1));
    }
}

#[test]
fn vocabulary_is_a_bijection_of_35_symbols() {
    assert_eq!(Vocabulary::SIZE, 35);
    let symbols: HashSet<String> = (0..Vocabulary::SIZE as u32).map(Vocabulary::symbol).collect();
    assert_eq!(symbols.len(), 35);
    for node in 0..16 {
        assert_eq!(Vocabulary::node_of(Vocabulary::source(node)), Some(node));
        assert_eq!(Vocabulary::node_of(Vocabulary::target(node)), Some(node));
    }
}

#[test]
fn swapping_r_and_r_prime_negates_logit_difference() {
    let params = small_model(9, Norm::None);
    let inst = generate_instance(9, 5, EdgeOrder::Shuffled).unwrap();
    let prompt = encode_instance(&inst).unwrap().prompt().to_vec();
    let cache = forward(&params, &prompt, None).unwrap();
    let logits = cache.logits_at(0, prompt.len() - 1);
    for (r, rp) in [(0u32, 1u32), (3, 7), (16, 2)] {
        assert_eq!(logit_difference(logits, r, rp), -logit_difference(logits, rp, r));
    }
}

#[test]
fn interventions_out_of_range_are_rejected() {
    let params = small_model(1, Norm::None);
    let tokens = encode_instance(&generate_instance(1, 5, EdgeOrder::Shuffled).unwrap()).unwrap().tokens;
    let row = Array2::<f32>::zeros((1, 16));
    let bad = [
        InterventionSpec::new().replace(3, Site::AttnOut, vec![0], row.clone()),
        InterventionSpec::new().replace(0, Site::AttnOut, vec![19], row.clone()),
        InterventionSpec::new().replace(0, Site::AttnScores, vec![0], row),
        InterventionSpec::new().block_scores(0, vec![4], vec![40]),
    ];
    for spec in bad {
        assert!(forward(&params, &tokens, Some(&spec)).is_err());
    }
}
