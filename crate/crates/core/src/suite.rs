//! Finite-difference gradient checks of every differentiable operation and
//! of composite networks, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{combined_loss, l1_loss, softmax_cross_entropy, AfpConfig};
use crate::network::{BlockKind, HeadKind, Network, NetworkSpec, UpsampleMode};
use crate::tensor::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::tensor::{
    add, concat_channels, conv3d_backward, conv3d_forward, instance_norm_backward, instance_norm_forward,
    leaky_relu_backward, leaky_relu_forward, split_channels, transposed_conv3d_backward, transposed_conv3d_forward,
    trilinear_upsample2x_backward, trilinear_upsample2x_forward, ConvParams, GradRequest, Tensor, DEFAULT_EPS,
    DEFAULT_SLOPE,
};

type T64 = Tensor<f64>;

/// Step for the composite network checks. Larger steps let perturbations
/// cross leaky-ReLU kinks; smaller ones drown tiny gradients in the
/// round-off of the loss.
pub const NETWORK_STEP: f64 = 2e-5;

pub const NETWORK_VARIANTS: [(BlockKind, UpsampleMode); 4] = [
    (BlockKind::Plain, UpsampleMode::TransposedConv),
    (BlockKind::Plain, UpsampleMode::ConvTrilinear),
    (BlockKind::Residual, UpsampleMode::TransposedConv),
    (BlockKind::Residual, UpsampleMode::ConvTrilinear),
];

/// Input shapes of the composite checks.
pub const NETWORK_SHAPES: [[usize; 3]; 3] = [[8, 8, 8], [4, 8, 6], [6, 4, 8]];

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub reports: Vec<GradcheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.reports.iter().fold(0.0, |m, r| m.max(r.max_rel_err))
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in &self.reports {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Uniform values with magnitude at least `margin`, keeping kinks out of
/// the finite-difference stencil.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> T64 {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(margin..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn named(items: Vec<(&str, T64)>) -> Vec<(String, T64)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn conv_checks(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, out: &mut Vec<GradcheckReport>) -> Result<()> {
    // (batch, cin, cout, dims, kernel, stride, pad)
    let cases = [
        (1, 2, 3, [4, 4, 4], 3, 1, 1),
        (2, 1, 2, [5, 4, 3], 3, 2, 1),
        (1, 3, 2, [4, 6, 4], 1, 2, 0),
    ];
    for (n, cin, cout, [z, y, x], k, s, p) in cases {
        let xin = random(&[n, cin, z, y, x], rng);
        let w = random(&[cout, cin, k, k, k], rng);
        let b = random(&[cout], rng);
        let probe_shape = conv3d_forward(&xin, &ConvParams::new(&w, Some(&b), s, p))?.shape().to_vec();
        let r = random(&probe_shape, rng);
        out.push(gradcheck(
            &format!("conv3d k{k} s{s} p{p}"),
            named(vec![("input", xin), ("weight", w), ("bias", b)]),
            |t| {
                let cp = ConvParams::new(&t[1], Some(&t[2]), s, p);
                let y = conv3d_forward(&t[0], &cp)?;
                let g = conv3d_backward(&t[0], &cp, &r, GradRequest::ALL)?;
                Ok((y.dot(&r)?, vec![g.input.unwrap(), g.weight.unwrap(), g.bias.unwrap()]))
            },
            cfg,
        )?);
    }
    let cases = [(1, 2, 2, [2, 2, 2]), (2, 1, 3, [3, 2, 2]), (1, 3, 1, [2, 3, 4])];
    for (n, cin, cout, [z, y, x]) in cases {
        let xin = random(&[n, cin, z, y, x], rng);
        let w = random(&[cin, cout, 2, 2, 2], rng);
        let b = random(&[cout], rng);
        let r = random(&[n, cout, 2 * z, 2 * y, 2 * x], rng);
        out.push(gradcheck(
            "transposed conv3d k2 s2",
            named(vec![("input", xin), ("weight", w), ("bias", b)]),
            |t| {
                let cp = ConvParams::new(&t[1], Some(&t[2]), 2, 0);
                let y = transposed_conv3d_forward(&t[0], &cp)?;
                let g = transposed_conv3d_backward(&t[0], &cp, &r, GradRequest::ALL)?;
                Ok((y.dot(&r)?, vec![g.input.unwrap(), g.weight.unwrap(), g.bias.unwrap()]))
            },
            cfg,
        )?);
    }
    Ok(())
}

fn elementwise_checks(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, out: &mut Vec<GradcheckReport>) -> Result<()> {
    let shapes = [[1, 2, 3, 3, 3], [2, 3, 2, 4, 3], [1, 1, 5, 2, 2]];
    for shape in shapes {
        let c = shape[1];
        let x = random(&shape, rng).scale(3.0);
        let gamma = random(&[c], rng);
        let beta = random(&[c], rng);
        let r = random(&shape, rng);
        // A quadratic probe exercises the second-order terms of the norm.
        out.push(gradcheck(
            "instance norm",
            named(vec![("input", x), ("gamma", gamma), ("beta", beta)]),
            |t| {
                let (y, cache) = instance_norm_forward(&t[0], &t[1], &t[2], DEFAULT_EPS)?;
                let gy = Tensor::from_fn(y.shape().to_vec(), |i| r.data()[i] + y.data()[i]);
                let loss = y.dot(&r)? + 0.5 * y.dot(&y)?;
                let g = instance_norm_backward(&cache, &t[1], &gy)?;
                Ok((loss, vec![g.input, g.gamma, g.beta]))
            },
            cfg,
        )?);

        let x = away_from_zero(&shape, 0.05, rng);
        let r = random(&shape, rng);
        out.push(gradcheck(
            "leaky relu",
            named(vec![("input", x)]),
            |t| {
                let y = leaky_relu_forward(&t[0], DEFAULT_SLOPE);
                Ok((y.dot(&r)?, vec![leaky_relu_backward(&t[0], &r, DEFAULT_SLOPE)?]))
            },
            cfg,
        )?);

        let x = random(&shape, rng);
        let up: Vec<usize> = shape.iter().enumerate().map(|(i, &d)| if i >= 2 { 2 * d } else { d }).collect();
        let r = random(&up, rng);
        out.push(gradcheck(
            "trilinear upsample 2x",
            named(vec![("input", x)]),
            |t| {
                let y = trilinear_upsample2x_forward(&t[0])?;
                Ok((y.dot(&r)?, vec![trilinear_upsample2x_backward(&r)?]))
            },
            cfg,
        )?);

        let (a, b) = (random(&shape, rng), random(&shape, rng));
        let r = random(&shape, rng);
        out.push(gradcheck(
            "add",
            named(vec![("a", a), ("b", b)]),
            |t| Ok((add(&t[0], &t[1])?.dot(&r)?, vec![r.clone(), r.clone()])),
            cfg,
        )?);

        let mut wide = shape;
        wide[1] = 2 * c;
        let (a, b) = (random(&shape, rng), random(&shape, rng));
        let r = random(&wide, rng);
        out.push(gradcheck(
            "concat/split channels",
            named(vec![("a", a), ("b", b)]),
            |t| {
                let y = concat_channels(&t[0], &t[1])?;
                let (ga, gb) = split_channels(&r, c)?;
                Ok((y.dot(&r)?, vec![ga, gb]))
            },
            cfg,
        )?);
    }
    Ok(())
}

fn loss_checks(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, out: &mut Vec<GradcheckReport>) -> Result<()> {
    let shapes = [[1, 1, 3, 3, 3], [2, 1, 4, 2, 3], [1, 1, 2, 5, 4]];
    for shape in shapes {
        let target = random(&shape, rng);
        let offset = away_from_zero(&shape, 0.05, rng);
        let pred = Tensor::from_fn(shape.to_vec(), |i| target.data()[i] + offset.data()[i]);
        out.push(gradcheck(
            "l1 loss",
            named(vec![("pred", pred)]),
            |t| l1_loss(&t[0], &target).map(|(v, g)| (v, vec![g])),
            cfg,
        )?);

        let mut logit_shape = shape;
        logit_shape[1] = HeadKind::Segmentation.out_channels();
        let logits = random(&logit_shape, rng).scale(3.0);
        let labels = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0..logit_shape[1]) as f64);
        out.push(gradcheck(
            "softmax cross-entropy",
            named(vec![("logits", logits)]),
            |t| softmax_cross_entropy(&t[0], &labels).map(|(v, g)| (v, vec![g])),
            cfg,
        )?);
    }

    let afp_cfg = GradcheckConfig {
        step: NETWORK_STEP,
        ..*cfg
    };
    for (i, dims) in [[4, 4, 4], [4, 8, 4], [8, 4, 6]].into_iter().enumerate() {
        let block = if i % 2 == 0 { BlockKind::Plain } else { BlockKind::Residual };
        let mut e = Network::<f64>::build(&NetworkSpec {
            levels: 2,
            base_channels: 2,
            block,
            head: HeadKind::Segmentation,
            patch_dims: dims,
            seed: 20 + i as u64,
            ..NetworkSpec::default()
        })?;
        e.freeze();
        let afp = AfpConfig::all_taps(&e);
        let shape = [1, 1, dims[0], dims[1], dims[2]];
        let x = random(&shape, rng);
        let y = random(&shape, rng);
        out.push(gradcheck(
            &format!("l1 + feature loss ({block:?} extractor)"),
            named(vec![("pred", x)]),
            |t| combined_loss(&t[0], &y, &afp).map(|c| (c.total, vec![c.grad])),
            &afp_cfg,
        )?);
    }
    Ok(())
}

/// Gradcheck of `<net(x), r> + <tap_0, s>` wrt the input and every parameter
/// of a 2-level network.
pub fn network_gradcheck(
    block: BlockKind,
    upsample: UpsampleMode,
    dims: [usize; 3],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let spec = NetworkSpec {
        levels: 2,
        base_channels: 2,
        channel_cap: 4,
        block,
        upsample,
        patch_dims: dims,
        seed: 3,
        ..NetworkSpec::default()
    };
    let net = Network::<f64>::build(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let [z, y, x] = dims;
    let input = random(&[1, 1, z, y, x], &mut rng);
    let r = random(&[1, 1, z, y, x], &mut rng);
    let tap_w = random(&[1, spec.channels(0), z, y, x], &mut rng);
    let mut inputs = vec![("input".to_string(), input)];
    inputs.extend(
        net.param_names()
            .iter()
            .cloned()
            .zip(net.params().iter().map(|p| p.value.clone())),
    );
    gradcheck(
        &format!("network {block:?}/{upsample:?} {dims:?}"),
        inputs,
        |t| {
            let mut n = net.clone();
            for (p, v) in n.params_mut().iter_mut().zip(&t[1..]) {
                p.value = v.clone();
            }
            let pass = n.forward_train(&t[0])?;
            let loss = pass.output().dot(&r)? + pass.taps()[0].dot(&tap_w)?;
            let (gx, grads) = n.backward_impl(&pass, Some(&r), &[Some(tap_w.clone())], true)?;
            let mut out = vec![gx.expect("input gradient")];
            out.extend(grads.into_iter().zip(&t[1..]).map(|(g, v)| g.unwrap_or_else(|| v.zeros_like())));
            Ok((loss, out))
        },
        cfg,
    )
}

/// Every operation on three random shapes, then every network variant on
/// [`NETWORK_SHAPES`].
pub fn run_suite(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    conv_checks(cfg, &mut rng, &mut reports)?;
    elementwise_checks(cfg, &mut rng, &mut reports)?;
    loss_checks(cfg, &mut rng, &mut reports)?;
    let net_cfg = GradcheckConfig {
        step: NETWORK_STEP,
        ..*cfg
    };
    for (block, up) in NETWORK_VARIANTS {
        for dims in NETWORK_SHAPES {
            reports.push(network_gradcheck(block, up, dims, &net_cfg)?);
        }
    }
    Ok(SuiteReport { reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operation_checks_pass() {
        let cfg = GradcheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reports = Vec::new();
        conv_checks(&cfg, &mut rng, &mut reports).unwrap();
        elementwise_checks(&cfg, &mut rng, &mut reports).unwrap();
        loss_checks(&cfg, &mut rng, &mut reports).unwrap();
        let s = SuiteReport { reports };
        assert!(s.passed(), "{s}");
        assert_eq!(s.reports.len(), 6 + 15 + 9);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 1, 2, 2, 2], &mut rng);
        let r = gradcheck(
            "wrong",
            named(vec![("x", x)]),
            |t| Ok((t[0].dot(&t[0])?, vec![t[0].clone()])),
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }
}
