//! U-Net and residual U-Net builders with explicit forward and backward
//! orchestration.
//!
//! Layout for `L` levels with `c_l = min(base * 2^l, cap)` channels:
//!
//! * encoder stage 0: `block(in -> c_0)`; stage `l >= 1`: `block(c_{l-1} -> c_l)`
//!   with stride 2 in its first convolution
//! * decoder stage for level `l = L-2 .. 0`: upsample `c_{l+1} -> c_l`,
//!   concatenate `[up, skip_l]`, `block(2 c_l -> c_l)`
//! * head: pointwise convolution to 1 (regression) or 7 (segmentation) channels
//!
//! A plain block is `conv3-IN-lrelu` twice. A residual block computes
//! `skip + IN(conv3(lrelu(IN(conv3(x)))))`, where `skip` is `x` or a strided
//! pointwise projection when the shape changes. Decoder stage outputs are the
//! feature taps.

mod labels;
mod seg;
mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{
    concat_channels, conv3d_backward, conv3d_forward, instance_norm_backward, instance_norm_forward,
    leaky_relu_backward, leaky_relu_forward, split_channels, transposed_conv3d_backward, transposed_conv3d_forward,
    trilinear_upsample2x_backward, trilinear_upsample2x_forward, ConvParams, GradRequest, InstanceNormCache, Param, Real,
    Tensor, DEFAULT_EPS, DEFAULT_SLOPE,
};

pub use labels::{
    class_id, merge_label_volume, merge_labels, LabelMapping, MergeReport, UnmappedPolicy, BACKGROUND, BONES, CARDIAC,
    CLASS_NAMES, MUSCLES, ORGANS, RIBS, VERTEBRAE,
};
pub use seg::{argmax_channels, softmax_channels};
pub use spec::{BlockKind, HeadKind, NetworkSpec, UpsampleMode};

/// Checkpoint metadata key holding the serialized spec.
pub const SPEC_KEY: &str = "network_spec";

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct NormLayer {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv1: ConvLayer,
    norm1: NormLayer,
    conv2: ConvLayer,
    norm2: NormLayer,
    residual: bool,
    proj: Option<ConvLayer>,
}

#[derive(Debug, Clone, PartialEq)]
enum Upsample {
    Transposed(ConvLayer),
    Trilinear(ConvLayer),
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderStage {
    level: usize,
    up: Upsample,
    block: Block,
}

#[derive(Debug, Clone)]
struct BlockCache<T: Real> {
    norm1: InstanceNormCache<T>,
    act1: Tensor<T>,
    norm2: InstanceNormCache<T>,
    out: Tensor<T>,
}

#[derive(Debug, Clone)]
struct DecoderCache<T: Real> {
    upsampled: Option<Tensor<T>>,
    concat: Tensor<T>,
    block: BlockCache<T>,
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T: Real = f32> {
    input: Tensor<T>,
    encoder: Vec<BlockCache<T>>,
    decoder: Vec<DecoderCache<T>>,
    output: Tensor<T>,
}

impl<T: Real> ForwardPass<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    /// Decoder stage outputs, coarsest first.
    pub fn taps(&self) -> Vec<&Tensor<T>> {
        self.decoder.iter().map(|d| &d.block.out).collect()
    }

    pub fn into_output(self) -> Tensor<T> {
        self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    spec: NetworkSpec,
    names: Vec<String>,
    params: Vec<Param<T>>,
    encoder: Vec<Block>,
    decoder: Vec<DecoderStage>,
    head: ConvLayer,
}

struct Builder<T: Real> {
    names: Vec<String>,
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(Param::new(value));
        self.params.len() - 1
    }

    /// He-normal weights with the given fan-in and an optional zero bias.
    fn conv(
        &mut self,
        name: &str,
        wshape: [usize; 5],
        bias: Option<usize>,
        fan_in: usize,
        stride: usize,
        pad: usize,
    ) -> ConvLayer {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let n: usize = wshape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::cast(normal.sample(&mut self.rng))).collect();
        let weight = self.push(format!("{name}.weight"), Tensor::new(wshape.to_vec(), data).expect("shape"));
        let bias = bias.map(|c| self.push(format!("{name}.bias"), Tensor::zeros([c])));
        ConvLayer {
            weight,
            bias,
            stride,
            pad,
        }
    }

    fn conv3(&mut self, name: &str, cin: usize, cout: usize, stride: usize, bias: bool) -> ConvLayer {
        self.conv(name, [cout, cin, 3, 3, 3], bias.then_some(cout), cin * 27, stride, 1)
    }

    fn norm(&mut self, name: &str, c: usize) -> NormLayer {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full([c], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros([c]));
        NormLayer { gamma, beta }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize, kind: BlockKind) -> Block {
        // Convolutions feeding a norm carry no bias: the norm cancels it.
        let conv1 = self.conv3(&format!("{name}.conv1"), cin, cout, stride, false);
        let norm1 = self.norm(&format!("{name}.norm1"), cout);
        let conv2 = self.conv3(&format!("{name}.conv2"), cout, cout, 1, false);
        let norm2 = self.norm(&format!("{name}.norm2"), cout);
        let residual = kind == BlockKind::Residual;
        let proj = (residual && (cin != cout || stride != 1))
            .then(|| self.conv(&format!("{name}.proj"), [cout, cin, 1, 1, 1], Some(cout), cin, stride, 0));
        Block {
            conv1,
            norm1,
            conv2,
            norm2,
            residual,
            proj,
        }
    }
}

impl<T: Real> Network<T> {
    /// Instantiates the architecture with deterministic initialization.
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        };
        let levels = spec.levels;
        let mut encoder = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 { spec.input_channels } else { spec.channels(l - 1) };
            let stride = if l == 0 { 1 } else { 2 };
            encoder.push(b.block(&format!("enc{l}"), cin, spec.channels(l), stride, spec.block));
        }
        let mut decoder = Vec::with_capacity(levels - 1);
        for l in (0..levels - 1).rev() {
            let (cin, c) = (spec.channels(l + 1), spec.channels(l));
            let up = match spec.upsample {
                UpsampleMode::TransposedConv => {
                    Upsample::Transposed(b.conv(&format!("dec{l}.up"), [cin, c, 2, 2, 2], Some(c), cin, 2, 0))
                }
                UpsampleMode::ConvTrilinear => Upsample::Trilinear(b.conv3(&format!("dec{l}.up"), cin, c, 1, true)),
            };
            let block = b.block(&format!("dec{l}"), 2 * c, c, 1, spec.block);
            decoder.push(DecoderStage { level: l, up, block });
        }
        let c0 = spec.channels(0);
        let out = spec.head.out_channels();
        let head = b.conv("head", [out, c0, 1, 1, 1], Some(out), c0, 1, 0);
        Ok(Network {
            spec: spec.clone(),
            names: b.names,
            params: b.params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn tap_count(&self) -> usize {
        self.decoder.len()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Freezes every parameter.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.requires_grad = false;
        }
    }

    /// FNV-1a over the bit patterns of all parameter values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for &v in p.value.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Zeroes the final layer so the output is zero (or the input with the
    /// global skip) for any input.
    pub fn zero_head(&mut self) {
        self.params[self.head.weight].value.fill(T::zero());
        if let Some(b) = self.head.bias {
            self.params[b].value.fill(T::zero());
        }
    }

    /// Zeroes the second convolution of every residual block, reducing each
    /// block to its skip path.
    pub fn zero_residual_tails(&mut self) {
        let blocks: Vec<ConvLayer> = self
            .encoder
            .iter()
            .chain(self.decoder.iter().map(|d| &d.block))
            .filter(|b| b.residual)
            .map(|b| b.conv2)
            .collect();
        for c in blocks {
            self.params[c.weight].value.fill(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    requires_grad: p.requires_grad,
                })
                .collect(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }

    fn conv_params(&self, c: &ConvLayer) -> ConvParams<'_, T> {
        ConvParams::new(
            &self.params[c.weight].value,
            c.bias.map(|b| &self.params[b].value),
            c.stride,
            c.pad,
        )
    }

    fn norm_forward(&self, x: &Tensor<T>, n: &NormLayer) -> Result<(Tensor<T>, InstanceNormCache<T>)> {
        instance_norm_forward(x, &self.params[n.gamma].value, &self.params[n.beta].value, DEFAULT_EPS)
    }

    fn block_forward(&self, b: &Block, x: &Tensor<T>) -> Result<BlockCache<T>> {
        let a1 = conv3d_forward(x, &self.conv_params(&b.conv1))?;
        let (h1, norm1) = self.norm_forward(&a1, &b.norm1)?;
        let act1 = leaky_relu_forward(&h1, DEFAULT_SLOPE);
        let a2 = conv3d_forward(&act1, &self.conv_params(&b.conv2))?;
        let (h2, norm2) = self.norm_forward(&a2, &b.norm2)?;
        let out = if b.residual {
            let mut out = match &b.proj {
                Some(p) => conv3d_forward(x, &self.conv_params(p))?,
                None => x.clone(),
            };
            out.add_assign(&h2)?;
            out
        } else {
            leaky_relu_forward(&h2, DEFAULT_SLOPE)
        };
        Ok(BlockCache {
            norm1,
            act1,
            norm2,
            out,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, z, y, w] = x.dims5()?;
        if c != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        self.spec.check_spatial([z, y, w]).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Forward pass retaining the activations needed by the backward pass.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<ForwardPass<T>> {
        self.check_input(x)?;
        let mut encoder: Vec<BlockCache<T>> = Vec::with_capacity(self.encoder.len());
        for b in &self.encoder {
            let input = encoder.last().map_or(x, |c| &c.out);
            let cache = self.block_forward(b, input)?;
            encoder.push(cache);
        }
        let mut decoder: Vec<DecoderCache<T>> = Vec::with_capacity(self.decoder.len());
        for stage in &self.decoder {
            let below = decoder.last().map_or(&encoder[encoder.len() - 1].out, |d| &d.block.out);
            let (upsampled, up) = match &stage.up {
                Upsample::Transposed(c) => (None, transposed_conv3d_forward(below, &self.conv_params(c))?),
                Upsample::Trilinear(c) => {
                    let u = trilinear_upsample2x_forward(below)?;
                    let y = conv3d_forward(&u, &self.conv_params(c))?;
                    (Some(u), y)
                }
            };
            let concat = concat_channels(&up, &encoder[stage.level].out)?;
            let block = self.block_forward(&stage.block, &concat)?;
            decoder.push(DecoderCache {
                upsampled,
                concat,
                block,
            });
        }
        let last = &decoder[decoder.len() - 1].block.out;
        let mut output = conv3d_forward(last, &self.conv_params(&self.head))?;
        if self.spec.global_skip {
            output.add_assign(x)?;
        }
        Ok(ForwardPass {
            input: x.clone(),
            encoder,
            decoder,
            output,
        })
    }

    /// Output, and the decoder-stage taps (coarsest first) when requested.
    pub fn forward(&self, x: &Tensor<T>, capture_taps: bool) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let pass = self.forward_train(x)?;
        let taps = if capture_taps {
            pass.decoder.iter().map(|d| d.block.out.clone()).collect()
        } else {
            Vec::new()
        };
        Ok((pass.output, taps))
    }

    /// Accumulates parameter gradients of `<output, grad_y>` into the
    /// parameters' gradient buffers and returns the input gradient.
    pub fn backward(&mut self, pass: &ForwardPass<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, grads) = self.backward_impl(pass, Some(grad_y), &[], true)?;
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let (true, Some(g)) = (p.requires_grad, g) {
                p.grad.add_assign(&g)?;
            }
        }
        Ok(gx.expect("input gradient"))
    }

    /// Input gradient only, leaving parameters untouched. `tap_grads[i]` is
    /// the gradient wrt tap `i`; missing entries count as zero.
    pub fn backward_input(
        &self,
        pass: &ForwardPass<T>,
        grad_y: Option<&Tensor<T>>,
        tap_grads: &[Option<Tensor<T>>],
    ) -> Result<Tensor<T>> {
        Ok(self
            .backward_impl(pass, grad_y, tap_grads, false)?
            .0
            .unwrap_or_else(|| pass.input.zeros_like()))
    }

    pub(crate) fn backward_impl(
        &self,
        pass: &ForwardPass<T>,
        grad_y: Option<&Tensor<T>>,
        tap_grads: &[Option<Tensor<T>>],
        want_params: bool,
    ) -> Result<(Option<Tensor<T>>, Vec<Option<Tensor<T>>>)> {
        if tap_grads.len() > self.decoder.len() {
            return Err(Error::Shape(format!(
                "{} tap gradients for {} taps",
                tap_grads.len(),
                self.decoder.len()
            )));
        }
        if let Some(g) = grad_y {
            pass.output.check_same_shape(g)?;
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let request = GradRequest {
            input: true,
            params: want_params,
        };

        let last = &pass.decoder[pass.decoder.len() - 1].block.out;
        let mut current = match grad_y {
            Some(g) => {
                let cg = conv3d_backward(last, &self.conv_params(&self.head), g, request)?;
                self.store_conv(&mut grads, &self.head, &cg.weight, &cg.bias);
                cg.input
            }
            None => None,
        };

        let mut enc_grads: Vec<Option<Tensor<T>>> = vec![None; self.encoder.len()];
        for j in (0..self.decoder.len()).rev() {
            let stage = &self.decoder[j];
            let cache = &pass.decoder[j];
            if let Some(Some(t)) = tap_grads.get(j) {
                accumulate(&mut current, t)?;
            }
            let Some(g) = current.take() else { continue };
            let g_cat = self
                .block_backward(&stage.block, &cache.concat, &cache.block, &g, want_params, true, &mut grads)?
                .expect("input gradient");
            let c = self.spec.channels(stage.level);
            let (g_up, g_skip) = split_channels(&g_cat, c)?;
            accumulate(&mut enc_grads[stage.level], &g_skip)?;
            let below = if j == 0 {
                &pass.encoder[pass.encoder.len() - 1].out
            } else {
                &pass.decoder[j - 1].block.out
            };
            current = match &stage.up {
                Upsample::Transposed(cl) => {
                    let cg = transposed_conv3d_backward(below, &self.conv_params(cl), &g_up, request)?;
                    self.store_conv(&mut grads, cl, &cg.weight, &cg.bias);
                    cg.input
                }
                Upsample::Trilinear(cl) => {
                    let u = cache.upsampled.as_ref().expect("upsampled activation");
                    let cg = conv3d_backward(u, &self.conv_params(cl), &g_up, request)?;
                    self.store_conv(&mut grads, cl, &cg.weight, &cg.bias);
                    Some(trilinear_upsample2x_backward(&cg.input.expect("input gradient"))?)
                }
            };
        }
        let bottom = enc_grads.len() - 1;
        if let Some(g) = current {
            accumulate(&mut enc_grads[bottom], &g)?;
        }

        let mut grad_input = None;
        for l in (0..self.encoder.len()).rev() {
            let Some(g) = enc_grads[l].take() else { continue };
            let x = if l == 0 { &pass.input } else { &pass.encoder[l - 1].out };
            let gx = self.block_backward(&self.encoder[l], x, &pass.encoder[l], &g, want_params, true, &mut grads)?;
            let gx = gx.expect("input gradient");
            if l == 0 {
                grad_input = Some(gx);
            } else {
                accumulate(&mut enc_grads[l - 1], &gx)?;
            }
        }
        if self.spec.global_skip {
            if let Some(g) = grad_y {
                accumulate(&mut grad_input, g)?;
            }
        }
        Ok((grad_input, grads))
    }

    fn store_conv(&self, grads: &mut [Option<Tensor<T>>], c: &ConvLayer, w: &Option<Tensor<T>>, b: &Option<Tensor<T>>) {
        if let Some(w) = w {
            grads[c.weight] = Some(w.clone());
        }
        if let (Some(i), Some(b)) = (c.bias, b) {
            grads[i] = Some(b.clone());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &Block,
        x: &Tensor<T>,
        cache: &BlockCache<T>,
        grad_out: &Tensor<T>,
        want_params: bool,
        want_input: bool,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<Option<Tensor<T>>> {
        let g_h2 = if b.residual {
            grad_out.clone()
        } else {
            leaky_relu_backward(&cache.out, grad_out, DEFAULT_SLOPE)?
        };
        let n2 = instance_norm_backward(&cache.norm2, &self.params[b.norm2.gamma].value, &g_h2)?;
        let inner = GradRequest {
            input: true,
            params: want_params,
        };
        let c2 = conv3d_backward(&cache.act1, &self.conv_params(&b.conv2), &n2.input, inner)?;
        let g_h1 = leaky_relu_backward(&cache.act1, &c2.input.expect("input gradient"), DEFAULT_SLOPE)?;
        let n1 = instance_norm_backward(&cache.norm1, &self.params[b.norm1.gamma].value, &g_h1)?;
        let outer = GradRequest {
            input: want_input,
            params: want_params,
        };
        let c1 = conv3d_backward(x, &self.conv_params(&b.conv1), &n1.input, outer)?;
        let mut gx = c1.input;
        if b.residual {
            match &b.proj {
                Some(p) => {
                    let cp = conv3d_backward(x, &self.conv_params(p), grad_out, outer)?;
                    if let Some(g) = &cp.input {
                        accumulate(&mut gx, g)?;
                    }
                    self.store_conv(grads, p, &cp.weight, &cp.bias);
                }
                None if want_input => accumulate(&mut gx, grad_out)?,
                None => {}
            }
        }
        if want_params {
            self.store_conv(grads, &b.conv1, &c1.weight, &c1.bias);
            self.store_conv(grads, &b.conv2, &c2.weight, &c2.bias);
            grads[b.norm1.gamma] = Some(n1.gamma);
            grads[b.norm1.beta] = Some(n1.beta);
            grads[b.norm2.gamma] = Some(n2.gamma);
            grads[b.norm2.beta] = Some(n2.beta);
        }
        Ok(gx)
    }

    /// Parameters as a checkpoint with the spec in its metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| (n.clone(), p.value.cast::<f32>()))
            .collect();
        Checkpoint::new(self.spec.seed, tensors).with_meta(SPEC_KEY, self.spec.to_toml())
    }

    /// Rebuilds a network from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text = ck
            .metadata
            .get(SPEC_KEY)
            .ok_or_else(|| Error::Corruption("checkpoint has no network spec".into()))?;
        let spec = NetworkSpec::from_toml(text)?;
        let mut net = Network::<T>::build(&spec)?;
        net.load_values(ck)?;
        Ok(net)
    }

    /// Copies parameter values from a checkpoint with matching names and shapes.
    pub fn load_values(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.tensors.len() != self.params.len() {
            return Err(Error::Corruption(format!(
                "checkpoint has {} tensors, network has {}",
                ck.tensors.len(),
                self.params.len()
            )));
        }
        for (name, p) in self.names.iter().zip(&mut self.params) {
            let t = ck
                .get(name)
                .ok_or_else(|| Error::Corruption(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Corruption(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: &Tensor<T>) -> Result<()> {
    match slot {
        Some(s) => s.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests;
