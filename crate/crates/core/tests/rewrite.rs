use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use csrep::reparam::{
    cross_sequential_shift, csrep_transform, identity_to_conv, Step, TransformOptions,
};
use csrep::runtime::conv1d;
use csrep::{
    Activation, BatchNormParams, Branch, Error, LayerOrder, ModelGraph, Node, SequentialLayer,
    TdnnLayer, Tensor3,
};

fn conv(rng: &mut ChaCha8Rng, ni: usize, no: usize, ctx: usize) -> TdnnLayer<f64> {
    let w = (0..no * ni * ctx)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let b = (0..no).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TdnnLayer::new(w, b, ni, no, ctx, 1, 1).unwrap()
}

fn bn(rng: &mut ChaCha8Rng, n: usize) -> BatchNormParams<f64> {
    let mut v = |lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
    BatchNormParams::new(v(-1.0, 1.0), v(0.5, 2.0), v(0.5, 1.5), v(-0.5, 0.5), 1e-5).unwrap()
}

fn cab(rng: &mut ChaCha8Rng, first: Node<f64>, n: usize) -> SequentialLayer<f64> {
    SequentialLayer::new(
        LayerOrder::ConvActivationBn,
        vec![
            first,
            Node::Activation(Activation::Relu),
            Node::BatchNorm(bn(rng, n)),
        ],
    )
}

fn two_layer_chain(rng: &mut ChaCha8Rng) -> ModelGraph<f64> {
    let l1 = {
        let c = Node::Conv(conv(rng, 3, 4, 3));
        cab(rng, c, 4)
    };
    let l2 = {
        let c = Node::Conv(conv(rng, 4, 4, 3));
        cab(rng, c, 4)
    };
    ModelGraph::new("chain", vec![l1, l2], None)
}

#[test]
fn shift_moves_bn_into_next_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = two_layer_chain(&mut rng);
    let (shifted, report) = cross_sequential_shift(&model);

    assert_eq!(shifted.layers[0].nodes.len(), 2);
    assert_eq!(shifted.layers[0].order, LayerOrder::Plain);
    assert_eq!(shifted.layers[1].order, LayerOrder::BnConvActivation);
    assert_eq!(shifted.layers[1].nodes.len(), 4);
    assert!(matches!(shifted.layers[1].nodes[0], Node::BatchNorm(_)));
    assert!(matches!(shifted.layers[1].nodes[3], Node::BatchNorm(_)));

    // the trailing bn of the last layer stays and is reported
    assert_eq!(report.untransformed.len(), 1);
    assert_eq!(report.untransformed[0].layer, 1);
    assert!(
        report.untransformed[0].reason.contains("end of trunk"),
        "{}",
        report.untransformed[0].reason
    );

    for _ in 0..10 {
        let t = rng.gen_range(1..20);
        let x = Tensor3::<f64>::random(&mut rng, 2, 3, t);
        let (a, b) = (
            model.forward_frames(&x).unwrap(),
            shifted.forward_frames(&x).unwrap(),
        );
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn shift_copies_bn_to_every_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = {
        let c = Node::Conv(conv(&mut rng, 2, 4, 1));
        cab(&mut rng, c, 4)
    };
    let group = Node::BranchGroup(vec![
        Branch::conv(conv(&mut rng, 4, 4, 3)),
        Branch::conv(conv(&mut rng, 4, 4, 1)),
        Branch::identity(),
    ]);
    let body = cab(&mut rng, group, 4);
    let model = ModelGraph::new("branches", vec![head.clone(), body], None);
    let (shifted, _) = cross_sequential_shift(&model);

    let Node::BatchNorm(moved) = &head.nodes[2] else {
        unreachable!()
    };
    let Node::BranchGroup(branches) = &shifted.layers[1].nodes[0] else {
        panic!("expected a branch group")
    };
    assert_eq!(branches.len(), 3);
    for b in branches {
        assert_eq!(b.pre_bn.as_ref(), Some(moved));
    }
}

#[test]
fn full_transform_of_chain_is_plain_and_equivalent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = {
        let c = Node::Conv(conv(&mut rng, 2, 4, 1));
        cab(&mut rng, c, 4)
    };
    let group = Node::BranchGroup(vec![
        Branch::conv(conv(&mut rng, 4, 4, 3)),
        Branch::conv(conv(&mut rng, 4, 4, 1)),
        Branch::identity(),
    ]);
    let body = cab(&mut rng, group, 4);
    let model = ModelGraph::new("branches", vec![head, body], None);
    let (plain, report) = csrep_transform(&model, &TransformOptions::default()).unwrap();

    assert_eq!(report.merged_groups, 1);
    assert_eq!(plain.branch_group_count(), 0);
    assert_eq!(plain.conv_node_count(), 2);
    assert_eq!(plain.batchnorm_count(), 1);
    let Node::Conv(merged) = &plain.layers[1].nodes[0] else {
        panic!()
    };
    assert_eq!(merged.context(), 3);

    for _ in 0..10 {
        let t = rng.gen_range(1..30);
        let x = Tensor3::<f64>::random(&mut rng, 1, 2, t);
        let d = model
            .forward_frames(&x)
            .unwrap()
            .max_abs_diff(&plain.forward_frames(&x).unwrap());
        assert!(d <= 1e-12, "{d}");
    }
}

#[test]
fn stopping_early_keeps_intermediate_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let head = {
        let c = Node::Conv(conv(&mut rng, 2, 4, 1));
        cab(&mut rng, c, 4)
    };
    let group = Node::BranchGroup(vec![
        Branch::conv(conv(&mut rng, 4, 4, 3)),
        Branch::identity(),
    ]);
    let model = ModelGraph::new("m", vec![head, cab(&mut rng, group, 4)], None);
    let x = Tensor3::<f64>::random(&mut rng, 2, 2, 9);
    let reference = model.forward_frames(&x).unwrap();

    for (stop, groups, bns) in [(Step::FuseBatchNorm, 1, 1), (Step::AlignContext, 1, 1)] {
        let options = TransformOptions {
            stop_after: stop,
            self_check: None,
        };
        let (m, report) = csrep_transform(&model, &options).unwrap();
        assert_eq!(report.steps.last().unwrap().step, stop);
        assert_eq!(m.branch_group_count(), groups);
        assert_eq!(m.batchnorm_count(), bns);
        assert!(m.forward_frames(&x).unwrap().max_abs_diff(&reference) <= 1e-12);
    }
}

#[test]
fn training_mode_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = two_layer_chain(&mut rng);
    model.meta.training = true;
    assert!(matches!(
        csrep_transform(&model, &TransformOptions::default()),
        Err(Error::TrainingMode)
    ));
}

#[test]
fn plain_input_is_returned_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers = vec![
        SequentialLayer::new(
            LayerOrder::Plain,
            vec![
                Node::Conv(conv(&mut rng, 3, 3, 3)),
                Node::Activation(Activation::Relu),
            ],
        ),
        SequentialLayer::new(LayerOrder::Plain, vec![Node::Conv(conv(&mut rng, 3, 3, 1))]),
    ];
    let model = ModelGraph::new("plain", layers, None);
    let (out, report) = csrep_transform(&model, &TransformOptions::default()).unwrap();
    assert_eq!(report.rewrites(), 0);
    assert_eq!(out, model);
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor3::<f64>::random(&mut rng, 2, 5, 7);
    let id = identity_to_conv::<f64>(5);
    assert_eq!(id.param_count(), 5 * 5 + 5);
    assert_eq!(conv1d(&x, &id).unwrap(), x);
}

#[test]
fn unmergeable_group_is_left_and_reported() {
    // a shortcut whose bn has a zero scale cannot be folded into a padded kernel
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let head = SequentialLayer::new(
        LayerOrder::ConvActivationBn,
        vec![
            Node::Conv(conv(&mut rng, 2, 2, 1)),
            Node::Activation(Activation::Relu),
            Node::BatchNorm(
                BatchNormParams::new(
                    vec![0.1, 0.2],
                    vec![1.0, 1.0],
                    vec![0.0, 1.0],
                    vec![0.3, 0.0],
                    1e-5,
                )
                .unwrap(),
            ),
        ],
    );
    let group = Node::BranchGroup(vec![
        Branch::conv(conv(&mut rng, 2, 2, 3)),
        Branch::identity(),
    ]);
    let model = ModelGraph::new("m", vec![head, cab(&mut rng, group, 2)], None);
    let (out, report) = csrep_transform(&model, &TransformOptions::default()).unwrap();
    assert!(!report.untransformed.is_empty());
    assert!(report.untransformed.iter().all(|u| !u.reason.is_empty()));
    let x = Tensor3::<f64>::random(&mut rng, 1, 2, 6);
    let d = model
        .forward_frames(&x)
        .unwrap()
        .max_abs_diff(&out.forward_frames(&x).unwrap());
    assert!(d <= 1e-12, "{d}");
}
