use super::*;
use crate::tensor::gradcheck::GradcheckConfig;
use rand::Rng;

fn spec(block: BlockKind, upsample: UpsampleMode) -> NetworkSpec {
    NetworkSpec {
        block,
        upsample,
        patch_dims: [16, 32, 32],
        ..NetworkSpec::default()
    }
}

fn random(shape: [usize; 5], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

const ALL_VARIANTS: [(BlockKind, UpsampleMode); 4] = [
    (BlockKind::Plain, UpsampleMode::TransposedConv),
    (BlockKind::Plain, UpsampleMode::ConvTrilinear),
    (BlockKind::Residual, UpsampleMode::TransposedConv),
    (BlockKind::Residual, UpsampleMode::ConvTrilinear),
];

#[test]
fn every_variant_preserves_shape() {
    let x = random([1, 1, 16, 32, 32], 1);
    for (block, up) in ALL_VARIANTS {
        let net = Network::<f32>::build(&spec(block, up)).unwrap();
        let (y, taps) = net.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[1, 1, 16, 32, 32], "{block:?} {up:?}");
        assert_eq!(taps.len(), 2);
        assert_eq!(taps[0].shape(), &[1, 16, 8, 16, 16]);
        assert_eq!(taps[1].shape(), &[1, 8, 16, 32, 32]);
        assert!(y.all_finite());
    }
}

#[test]
fn taps_only_when_requested() {
    let net = Network::<f32>::build(&spec(BlockKind::Plain, UpsampleMode::TransposedConv)).unwrap();
    let (_, taps) = net.forward(&random([1, 1, 16, 32, 32], 2), false).unwrap();
    assert!(taps.is_empty());
    for levels in 2..=4 {
        let s = NetworkSpec {
            levels,
            base_channels: 2,
            patch_dims: [16, 16, 16],
            ..NetworkSpec::default()
        };
        assert_eq!(Network::<f32>::build(&s).unwrap().tap_count(), levels - 1);
    }
}

#[test]
fn residual_has_more_parameters() {
    let plain = Network::<f32>::build(&spec(BlockKind::Plain, UpsampleMode::TransposedConv)).unwrap();
    let res = Network::<f32>::build(&spec(BlockKind::Residual, UpsampleMode::TransposedConv)).unwrap();
    assert!(res.param_count() > plain.param_count());
}

#[test]
fn indivisible_patch_is_a_spec_error() {
    let s = NetworkSpec {
        patch_dims: [10, 12, 12],
        ..NetworkSpec::default()
    };
    assert!(matches!(Network::<f32>::build(&s), Err(Error::Spec(_))));
    let deeper = NetworkSpec {
        levels: 4,
        patch_dims: [12, 12, 12],
        ..NetworkSpec::default()
    };
    assert!(matches!(Network::<f32>::build(&deeper), Err(Error::Spec(_))));
    let net = Network::<f32>::build(&NetworkSpec::default()).unwrap();
    assert!(matches!(net.forward(&random([1, 1, 10, 16, 16], 0), false), Err(Error::Shape(_))));
}

#[test]
fn zero_head_gives_zero_output() {
    for (block, up) in ALL_VARIANTS {
        let mut net = Network::<f32>::build(&spec(block, up)).unwrap();
        net.zero_head();
        let (y, _) = net.forward(&random([1, 1, 16, 32, 32], 3), false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn global_skip_with_zero_head_is_identity() {
    let mut s = spec(BlockKind::Residual, UpsampleMode::TransposedConv);
    s.global_skip = true;
    let mut net = Network::<f32>::build(&s).unwrap();
    net.zero_head();
    let x = random([1, 1, 16, 32, 32], 4);
    assert_eq!(net.forward(&x, false).unwrap().0, x);
}

#[test]
fn zeroed_residual_block_is_its_skip_path() {
    let mut b = Builder::<f32> {
        names: Vec::new(),
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(0),
    };
    let block = b.block("b", 4, 4, 1, BlockKind::Residual);
    assert!(block.proj.is_none());
    let mut net = Network::<f32>::build(&spec(BlockKind::Residual, UpsampleMode::TransposedConv)).unwrap();
    net.names = b.names;
    net.params = b.params;
    net.encoder = vec![block.clone()];
    net.decoder.clear();
    net.zero_residual_tails();
    let x = random([1, 4, 6, 6, 6], 5);
    assert_eq!(net.block_forward(&block, &x).unwrap().out, x);

    let mut net = Network::<f32>::build(&spec(BlockKind::Residual, UpsampleMode::ConvTrilinear)).unwrap();
    net.zero_residual_tails();
    let x = random([1, 1, 16, 32, 32], 6);
    let pass = net.forward_train(&x).unwrap();
    for (l, b) in net.encoder.iter().enumerate() {
        let input = if l == 0 { &pass.input } else { &pass.encoder[l - 1].out };
        let skip = conv3d_forward(input, &net.conv_params(b.proj.as_ref().unwrap())).unwrap();
        assert_eq!(pass.encoder[l].out, skip);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.vxck");
    let x = random([1, 1, 16, 32, 32], 7);
    for (block, up) in ALL_VARIANTS {
        let net = Network::<f32>::build(&spec(block, up)).unwrap();
        net.to_checkpoint().save(&path).unwrap();
        let back = Network::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back.checksum(), net.checksum());
        assert_eq!(back.forward(&x, false).unwrap().0, net.forward(&x, false).unwrap().0);
    }
}

#[test]
fn build_is_deterministic_in_seed() {
    let s = spec(BlockKind::Plain, UpsampleMode::TransposedConv);
    let a = Network::<f32>::build(&s).unwrap();
    assert_eq!(a, Network::<f32>::build(&s).unwrap());
    let other = Network::<f32>::build(&NetworkSpec { seed: 9, ..s }).unwrap();
    assert_ne!(a.checksum(), other.checksum());
}

#[test]
fn segmentation_head_softmax_sums_to_one() {
    let s = NetworkSpec {
        head: HeadKind::Segmentation,
        ..spec(BlockKind::Plain, UpsampleMode::TransposedConv)
    };
    let net = Network::<f32>::build(&s).unwrap();
    let (y, _) = net.forward(&random([1, 1, 16, 32, 32], 8), false).unwrap();
    assert_eq!(y.shape()[1], 7);
    let p = softmax_channels(&y).unwrap();
    let inner = 16 * 32 * 32;
    for i in 0..inner {
        let s: f64 = (0..7).map(|k| p.data()[k * inner + i] as f64).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    let labels = argmax_channels(&y).unwrap();
    assert!(labels.iter().all(|&l| l < 7));
}

#[test]
fn backward_input_leaves_parameters_alone() {
    let net = Network::<f32>::build(&spec(BlockKind::Residual, UpsampleMode::TransposedConv)).unwrap();
    let before = net.clone();
    let x = random([1, 1, 16, 32, 32], 9);
    let pass = net.forward_train(&x).unwrap();
    let taps: Vec<Option<Tensor>> = pass.taps().iter().map(|t| Some(t.map(|_| 1.0))).collect();
    let gx = net.backward_input(&pass, None, &taps).unwrap();
    assert_eq!(gx.shape(), x.shape());
    assert!(gx.max_abs() > 0.0);
    assert_eq!(net, before);
}

#[test]
fn composite_network_gradcheck() {
    let cfg = GradcheckConfig {
        step: crate::suite::NETWORK_STEP,
        tolerance: 1e-4,
        ..GradcheckConfig::default()
    };
    for (block, up) in ALL_VARIANTS {
        let report = crate::suite::network_gradcheck(block, up, [8, 8, 8], &cfg).unwrap();
        assert!(report.passed(), "{report}\n{:#?}", report.tensors);
    }
}
