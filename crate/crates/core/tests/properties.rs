use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csrep::container;
use csrep::rep_tdnn::{build_rep_tdnn, BlockConfig, RepTdnnConfig};
use csrep::reparam::{csrep_transform, merge_branches, pad_context, TransformOptions};
use csrep::runtime::conv1d;
use csrep::{Branch, Error, ModelGraph, Node, TdnnLayer, Tensor3};

fn layer(
    ni: usize,
    no: usize,
    ctx: usize,
    dil: usize,
    g: usize,
    seed: u64,
    zero_bias: bool,
) -> TdnnLayer<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor3::<f32>::random(&mut rng, 1, 1, no * (ni / g) * ctx).into_data();
    let b = if zero_bias {
        vec![0.0; no]
    } else {
        Tensor3::<f32>::random(&mut rng, 1, 1, no).into_data()
    };
    TdnnLayer::new(w, b, ni, no, ctx, dil, g).unwrap()
}

fn input(b: usize, n: usize, t: usize, seed: u64) -> Tensor3<f32> {
    Tensor3::random(&mut ChaCha8Rng::seed_from_u64(seed), b, n, t)
}

/// (in, out, context, dilation, groups)
fn conv_shape() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..=4, 1usize..=4, 1usize..=4, 0usize..=7, 1usize..=3)
        .prop_flat_map(|(g, ipg, opg, half, dil)| Just((g * ipg, g * opg, 2 * half + 1, dil, g)))
}

fn small_config() -> impl Strategy<Value = RepTdnnConfig> {
    let block = (
        prop::sample::select(vec![1usize, 3, 5]),
        0usize..=2,
        prop::sample::select(vec![1usize, 2, 4]),
    );
    (
        prop::collection::vec(block, 1..=3),
        prop::sample::select(vec![vec![3usize, 1], vec![5, 1], vec![3], vec![]]),
        any::<bool>(),
        1usize..=2,
        any::<u64>(),
    )
        .prop_map(
            |(blocks, branch_contexts, identity, dilation, seed)| RepTdnnConfig {
                input_channels: 4,
                channels: 8,
                blocks: blocks
                    .into_iter()
                    .map(|(head_context, layers, groups)| BlockConfig {
                        head_context,
                        head_groups: 1,
                        layers,
                        groups,
                    })
                    .collect(),
                identity_branch: identity || branch_contexts.is_empty(),
                branch_contexts,
                dilation,
                se_bottleneck: 3,
                fc_hidden: 6,
                embedding_dim: 5,
                seed,
                ..RepTdnnConfig::default()
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_input(
        (ni, no, ctx, dil, g) in conv_shape(),
        t in 1usize..=16,
        seed in any::<u64>(),
        alpha in -2.0f32..2.0,
        beta in -2.0f32..2.0,
    ) {
        let l = layer(ni, no, ctx, dil, g, seed, true);
        let (x, y) = (input(2, ni, t, seed ^ 1), input(2, ni, t, seed ^ 2));
        let combo = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let lhs = conv1d(&combo, &l).unwrap();
        let rhs = conv1d(&x, &l).unwrap().scale(alpha).add(&conv1d(&y, &l).unwrap().scale(beta)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5 * rhs.max_abs().max(1.0));
    }

    #[test]
    fn conv_is_additive_in_weights(
        (ni, no, ctx, dil, g) in conv_shape(),
        t in 1usize..=16,
        seed in any::<u64>(),
    ) {
        let (a, b) = (layer(ni, no, ctx, dil, g, seed, false), layer(ni, no, ctx, dil, g, seed ^ 9, false));
        let sum = merge_branches(&[a.clone(), b.clone()]).unwrap();
        let x = input(1, ni, t, seed);
        let separate = conv1d(&x, &a).unwrap().add(&conv1d(&x, &b).unwrap()).unwrap();
        prop_assert!(conv1d(&x, &sum).unwrap().max_abs_diff(&separate) <= 1e-5 * separate.max_abs().max(1.0));
        prop_assert_eq!(sum.param_count(), a.param_count());
    }

    #[test]
    fn same_padding_preserves_frames((ni, no, ctx, dil, g) in conv_shape(), t in 1usize..=20) {
        let y = conv1d(&input(1, ni, t, 0), &layer(ni, no, ctx, dil, g, 0, false)).unwrap();
        prop_assert_eq!(y.shape(), [1, no, t]);
    }

    #[test]
    fn padding_context_keeps_output(
        (ni, no, ctx, dil, g) in conv_shape(),
        extra in 0usize..=3,
        t in 1usize..=16,
        seed in any::<u64>(),
    ) {
        let l = layer(ni, no, ctx, dil, g, seed, false);
        let wide = pad_context(&l, ctx + 2 * extra).unwrap();
        let x = input(1, ni, t, seed);
        prop_assert!(conv1d(&x, &wide).unwrap().max_abs_diff(&conv1d(&x, &l).unwrap()) <= 1e-6);
    }

    #[test]
    fn branch_group_is_sum_of_branches(seed in any::<u64>(), t in 1usize..=12, identity in any::<bool>()) {
        let (a, b) = (layer(4, 4, 3, 1, 2, seed, false), layer(4, 4, 1, 1, 2, seed ^ 3, false));
        let mut branches = vec![Branch::conv(a.clone()), Branch::conv(b.clone())];
        if identity {
            branches.push(Branch::identity());
        }
        let x = input(2, 4, t, seed);
        let got = Node::BranchGroup(branches).forward(&x).unwrap();
        let mut want = conv1d(&x, &a).unwrap().add(&conv1d(&x, &b).unwrap()).unwrap();
        if identity {
            want = want.add(&x).unwrap();
        }
        prop_assert!(got.max_abs_diff(&want) <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn built_models_validate_and_run(config in small_config(), b in 1usize..=3, t in 1usize..=40) {
        let model = build_rep_tdnn::<f32>(&config).unwrap();
        prop_assert!(model.validate().is_empty());
        let emb = model.forward(&input(b, 4, t, config.seed)).unwrap();
        prop_assert_eq!((emb.rows(), emb.cols()), (b, 5));
        prop_assert!(emb.data().iter().all(|v| v.is_finite()));
        prop_assert_eq!(model.count_params(), config.training_param_count());
    }

    #[test]
    fn transform_is_lossless_and_plain(config in small_config(), b in 1usize..=4, t in 1usize..=60) {
        let model = build_rep_tdnn::<f64>(&config).unwrap();
        let (plain, report) = csrep_transform(&model, &TransformOptions::default()).unwrap();
        let layers: usize = config.blocks.iter().map(|b| b.layers).sum();
        prop_assert_eq!(report.merged_groups, layers);
        prop_assert_eq!(plain.branch_group_count(), 0);
        prop_assert_eq!(plain.conv_node_count(), config.blocks.len() + layers);
        prop_assert_eq!(plain.count_params(), config.plain_param_count());
        prop_assert!(plain.validate().is_empty());

        let x = Tensor3::<f64>::random(&mut ChaCha8Rng::seed_from_u64(config.seed), b, 4, t);
        let d = model.forward_frames(&x).unwrap().max_abs_diff(&plain.forward_frames(&x).unwrap());
        prop_assert!(d <= 1e-10, "deviation {}", d);

        let (again, second) = csrep_transform(&plain, &TransformOptions::default()).unwrap();
        prop_assert_eq!(second.rewrites(), 0);
        prop_assert_eq!(&again, &plain);
    }

    #[test]
    fn corrupted_containers_never_panic(config in small_config(), cut in any::<prop::sample::Index>(), flip in any::<prop::sample::Index>()) {
        let model = build_rep_tdnn::<f32>(&config).unwrap();
        let bytes = container::to_bytes(&model);
        let truncated = &bytes[..cut.index(bytes.len())];
        prop_assert!(container::from_bytes::<f32>(truncated).is_err());

        let mut mangled = bytes.clone();
        mangled[flip.index(bytes.len())] ^= 0x5a;
        if let Ok(m) = container::from_bytes::<f32>(&mangled) {
            // a flipped payload byte still yields a structurally valid model
            let m: ModelGraph<f32> = m;
            prop_assert!(m.validate().is_empty());
        }
    }
}

#[test]
fn training_flag_survives_container() {
    let mut model = build_rep_tdnn::<f32>(&RepTdnnConfig {
        channels: 4,
        input_channels: 2,
        se_bottleneck: 2,
        fc_hidden: 3,
        embedding_dim: 2,
        ..RepTdnnConfig::default()
    })
    .unwrap();
    model.meta.training = true;
    let back: ModelGraph<f32> = container::from_bytes(&container::to_bytes(&model)).unwrap();
    assert!(back.meta.training);
    assert!(matches!(
        csrep_transform(&back, &TransformOptions::default()),
        Err(Error::TrainingMode)
    ));
}
