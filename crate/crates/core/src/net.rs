//! A miniature three-segment convolutional grid detector.
//!
//! The network keeps the backbone / neck / head split of full-size
//! single-stage detectors so that per-segment weight transfer and freezing
//! can be studied, but shrinks each role to its smallest useful form:
//!
//! * backbone: three strided 3x3 conv blocks, input 64x64x3 down to an
//!   8x8 feature map (leaky activation, slope 0.1);
//! * neck: one 1x1 lateral merge block (leaky);
//! * head: one linear 1x1 conv emitting B*(5+K) channels per grid cell.
//!
//! Forward caches layer inputs and pre-activations; `backward` consumes a
//! gradient with respect to the raw head output and populates parameter
//! gradients by reverse traversal. Frozen segments skip parameter gradient
//! accumulation entirely but still pass activation gradients through.
//!
//! The head output is raw (no activation); score and offset squashing
//! happens in the loss/decode layer so the same tensor serves training and
//! inference.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// max(x, 0.1 x)
    Leaky,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Leaky => {
                if x > 0.0 {
                    x
                } else {
                    0.1 * x
                }
            }
            Activation::Linear => x,
        }
    }

    #[inline]
    fn slope(self, pre: f32) -> f32 {
        match self {
            Activation::Leaky => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.1
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// A 2D convolution layer over height x width x channel tensors.
/// Weight layout is [out_c, k, k, in_c] so the innermost input-channel loop
/// is contiguous for both operands.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub act: Activation,
    vel_w: Vec<f32>,
    vel_b: Vec<f32>,
    cached_input: Option<Tensor>,
    cached_pre: Option<Tensor>,
}

impl Conv {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (k * k * in_c) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let mut weight = Tensor::zeros(&[out_c, k, k, in_c]);
        for v in weight.data.iter_mut() {
            *v = rng.uniform_range(-bound, bound) as f32;
        }
        let mut bias = Tensor::zeros(&[out_c]);
        for v in bias.data.iter_mut() {
            *v = rng.uniform_range(-bound, bound) as f32;
        }
        let (nw, nb) = (weight.numel(), bias.numel());
        Conv {
            weight,
            bias,
            stride,
            pad,
            act,
            vel_w: vec![0.0; nw],
            vel_b: vec![0.0; nb],
            cached_input: None,
            cached_pre: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[3]
    }

    fn out_extent(&self, n: usize) -> usize {
        let k = self.weight.shape[1];
        (n + 2 * self.pad - k) / self.stride + 1
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        if input.shape.len() != 3 || input.shape[2] != self.in_channels() {
            return Err(Error::config(format!(
                "conv expects HxWx{} input, got shape {:?}",
                self.in_channels(),
                input.shape
            )));
        }
        let (ih, iw) = (input.shape[0], input.shape[1]);
        let (oh, ow) = (self.out_extent(ih), self.out_extent(iw));
        let (oc, k, ic) = (
            self.weight.shape[0],
            self.weight.shape[1],
            self.weight.shape[3],
        );
        let mut pre = Tensor::zeros(&[oh, ow, oc]);
        for y in 0..oh {
            for x in 0..ow {
                for o in 0..oc {
                    let mut acc = self.bias.data[o];
                    for ky in 0..k {
                        let sy = (y * self.stride + ky) as isize - self.pad as isize;
                        if sy < 0 || sy >= ih as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = (x * self.stride + kx) as isize - self.pad as isize;
                            if sx < 0 || sx >= iw as isize {
                                continue;
                            }
                            let in_base = input.idx3(sy as usize, sx as usize, 0);
                            let w_base = self.weight.idx4(o, ky, kx, 0);
                            for c in 0..ic {
                                acc += input.data[in_base + c] * self.weight.data[w_base + c];
                            }
                        }
                    }
                    let at = pre.idx3(y, x, o);
                    pre.data[at] = acc;
                }
            }
        }
        let mut out = pre.clone();
        for v in out.data.iter_mut() {
            *v = self.act.apply(*v);
        }
        self.cached_input = Some(input.clone());
        self.cached_pre = Some(pre);
        Ok(out)
    }

    /// Backpropagate `dout` (gradient on this layer's activated output).
    /// Returns the gradient on the layer input. Parameter gradients are
    /// accumulated only when `accumulate_params` is set.
    pub fn backward(&mut self, dout: &Tensor, accumulate_params: bool) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::State("conv backward before forward".into()))?;
        let pre = self.cached_pre.as_ref().unwrap();
        if dout.shape != pre.shape {
            return Err(Error::config(format!(
                "gradient shape {:?} does not match layer output {:?}",
                dout.shape, pre.shape
            )));
        }
        let (ih, iw) = (input.shape[0], input.shape[1]);
        let (oh, ow, oc) = (pre.shape[0], pre.shape[1], pre.shape[2]);
        let (k, ic) = (self.weight.shape[1], self.weight.shape[3]);

        if accumulate_params {
            self.weight.ensure_grad();
            self.bias.ensure_grad();
        }
        let mut dinput = Tensor::zeros(&[ih, iw, ic]);
        for y in 0..oh {
            for x in 0..ow {
                for o in 0..oc {
                    let dpre =
                        dout.data[pre.idx3(y, x, o)] * self.act.slope(pre.data[pre.idx3(y, x, o)]);
                    if dpre == 0.0 {
                        continue;
                    }
                    if accumulate_params {
                        self.bias.grad.as_mut().unwrap()[o] += dpre;
                    }
                    for ky in 0..k {
                        let sy = (y * self.stride + ky) as isize - self.pad as isize;
                        if sy < 0 || sy >= ih as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = (x * self.stride + kx) as isize - self.pad as isize;
                            if sx < 0 || sx >= iw as isize {
                                continue;
                            }
                            let in_base = input.idx3(sy as usize, sx as usize, 0);
                            let w_base = self.weight.idx4(o, ky, kx, 0);
                            if accumulate_params {
                                let wg = self.weight.grad.as_mut().unwrap();
                                for c in 0..ic {
                                    wg[w_base + c] += dpre * input.data[in_base + c];
                                }
                            }
                            for c in 0..ic {
                                dinput.data[in_base + c] += dpre * self.weight.data[w_base + c];
                            }
                        }
                    }
                }
            }
        }
        Ok(dinput)
    }

    fn step(&mut self, lr: f32, momentum: f32) {
        if let Some(g) = self.weight.grad.as_ref() {
            momentum_update(&mut self.weight.data, &mut self.vel_w, g, lr, momentum);
        }
        if let Some(g) = self.bias.grad.as_ref() {
            momentum_update(&mut self.bias.data, &mut self.vel_b, g, lr, momentum);
        }
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// v <- momentum * v + g; w <- w - lr * v
pub fn momentum_update(w: &mut [f32], v: &mut [f32], g: &[f32], lr: f32, momentum: f32) {
    for i in 0..w.len() {
        v[i] = momentum * v[i] + g[i];
        w[i] -= lr * v[i];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentName {
    Backbone,
    Neck,
    Head,
}

impl SegmentName {
    pub const ALL: [SegmentName; 3] = [SegmentName::Backbone, SegmentName::Neck, SegmentName::Head];

    pub fn as_str(&self) -> &'static str {
        match self {
            SegmentName::Backbone => "backbone",
            SegmentName::Neck => "neck",
            SegmentName::Head => "head",
        }
    }
}

impl fmt::Display for SegmentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SegmentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(SegmentName::Backbone),
            "neck" => Ok(SegmentName::Neck),
            "head" => Ok(SegmentName::Head),
            other => Err(Error::config(format!(
                "unknown segment name {other:?} (expected backbone, neck or head)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: SegmentName,
    pub layers: Vec<Conv>,
    pub frozen: bool,
}

impl Segment {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut cur = input.clone();
        for layer in self.layers.iter_mut() {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, dout: &Tensor) -> Result<Tensor> {
        let accumulate = !self.frozen;
        let mut cur = dout.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur, accumulate)?;
        }
        Ok(cur)
    }

    /// Parameters in a fixed order: weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in self.layers.iter_mut() {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Conv::num_params).sum()
    }
}

/// Architecture hyperparameters. `input_size` must be a multiple of 8; the
/// grid is `input_size / 8` after the three stride-2 backbone blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub input_size: usize,
    pub backbone_channels: [usize; 3],
    pub neck_channels: usize,
    pub boxes_per_cell: usize,
    pub classes: usize,
}

impl NetConfig {
    pub fn default_for(classes: usize) -> Self {
        NetConfig {
            input_size: 64,
            backbone_channels: [8, 12, 16],
            neck_channels: 16,
            boxes_per_cell: 2,
            classes,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn head_channels(&self) -> usize {
        self.boxes_per_cell * (5 + self.classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return Err(Error::config(format!(
                "input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.classes == 0 || self.boxes_per_cell == 0 {
            return Err(Error::config("classes and boxes_per_cell must be positive"));
        }
        if self.backbone_channels.contains(&0) || self.neck_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DetectorNet {
    pub config: NetConfig,
    pub backbone: Segment,
    pub neck: Segment,
    pub head: Segment,
    forward_ran: bool,
}

impl DetectorNet {
    /// Build a freshly initialized network. Initialization draws are fully
    /// ordered (backbone, neck, head; weight before bias per layer), so one
    /// seed pins every parameter.
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let [c0, c1, c2] = config.backbone_channels;
        let backbone = Segment {
            name: SegmentName::Backbone,
            layers: vec![
                Conv::new(3, c0, 3, 2, 1, Activation::Leaky, &mut rng),
                Conv::new(c0, c1, 3, 2, 1, Activation::Leaky, &mut rng),
                Conv::new(c1, c2, 3, 2, 1, Activation::Leaky, &mut rng),
            ],
            frozen: false,
        };
        let neck = Segment {
            name: SegmentName::Neck,
            layers: vec![Conv::new(
                c2,
                config.neck_channels,
                1,
                1,
                0,
                Activation::Leaky,
                &mut rng,
            )],
            frozen: false,
        };
        let head = Segment {
            name: SegmentName::Head,
            layers: vec![Conv::new(
                config.neck_channels,
                config.head_channels(),
                1,
                1,
                0,
                Activation::Linear,
                &mut rng,
            )],
            frozen: false,
        };
        Ok(DetectorNet {
            config: config.clone(),
            backbone,
            neck,
            head,
            forward_ran: false,
        })
    }

    pub fn segments(&self) -> [&Segment; 3] {
        [&self.backbone, &self.neck, &self.head]
    }

    pub fn segments_mut(&mut self) -> [&mut Segment; 3] {
        [&mut self.backbone, &mut self.neck, &mut self.head]
    }

    pub fn segment_mut(&mut self, name: SegmentName) -> &mut Segment {
        match name {
            SegmentName::Backbone => &mut self.backbone,
            SegmentName::Neck => &mut self.neck,
            SegmentName::Head => &mut self.head,
        }
    }

    pub fn num_params(&self) -> usize {
        self.segments().iter().map(|s| s.num_params()).sum()
    }

    /// Raw prediction tensor of shape (S, S, B*(5+K)).
    pub fn forward(&mut self, image: &Tensor) -> Result<Tensor> {
        let expect = [self.config.input_size, self.config.input_size, 3];
        if image.shape != expect {
            return Err(Error::config(format!(
                "input shape {:?} does not match configured {:?}",
                image.shape, expect
            )));
        }
        let feat = self.backbone.forward(image)?;
        let merged = self.neck.forward(&feat)?;
        let out = self.head.forward(&merged)?;
        out.check_finite("detector forward output")?;
        self.forward_ran = true;
        Ok(out)
    }

    /// Accumulate parameter gradients from a gradient on the raw prediction
    /// tensor. Callable repeatedly to sum gradients over a batch.
    pub fn backward(&mut self, dout: &Tensor) -> Result<()> {
        if !self.forward_ran {
            return Err(Error::State("backward called before forward".into()));
        }
        let d_merged = self.head.backward(dout)?;
        let d_feat = self.neck.backward(&d_merged)?;
        let d_image = self.backbone.backward(&d_feat)?;
        d_image.check_finite("gradient at network input")?;
        Ok(())
    }

    /// Rescale all accumulated gradients so their global L2 norm does not
    /// exceed `max_norm`; returns the norm before clipping. The summed
    /// composite loss occasionally spikes two orders of magnitude through
    /// the box-term derivatives, and momentum turns a single such step into
    /// a runaway without this cap.
    pub fn clip_grads(&mut self, max_norm: f32) -> Result<f32> {
        if max_norm.is_nan() || max_norm <= 0.0 {
            return Err(Error::config(format!(
                "clip norm {max_norm} must be positive"
            )));
        }
        let mut sq = 0.0f64;
        for seg in self.segments_mut() {
            for p in seg.params_mut() {
                if let Some(g) = &p.grad {
                    sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                }
            }
        }
        let norm = sq.sqrt() as f32;
        if norm > max_norm {
            let scale = max_norm / norm;
            for seg in self.segments_mut() {
                for p in seg.params_mut() {
                    if let Some(g) = &mut p.grad {
                        for v in g.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
        }
        Ok(norm)
    }

    /// One SGD-with-momentum step over every non-frozen parameter; all
    /// gradients (frozen included) are reset to zero afterwards.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32) -> Result<()> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum {momentum} must lie in [0, 1)"
            )));
        }
        for seg in self.segments_mut() {
            if seg.frozen {
                for p in seg.params_mut() {
                    p.zero_grad();
                }
            } else {
                for layer in seg.layers.iter_mut() {
                    layer.step(lr, momentum);
                }
            }
        }
        Ok(())
    }

    pub fn set_frozen(&mut self, names: &[SegmentName], frozen: bool) {
        for &name in names {
            self.segment_mut(name).frozen = frozen;
        }
    }

    pub fn frozen_segments(&self) -> Vec<SegmentName> {
        self.segments()
            .iter()
            .filter(|s| s.frozen)
            .map(|s| s.name)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> NetConfig {
        NetConfig {
            input_size: 16,
            backbone_channels: [4, 6, 8],
            neck_channels: 8,
            boxes_per_cell: 2,
            classes: 2,
        }
    }

    fn image(size: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::zeros(&[size, size, 3]);
        for v in t.data.iter_mut() {
            *v = rng.uniform() as f32;
        }
        t
    }

    #[test]
    fn output_shape_default_config() {
        let cfg = NetConfig::default_for(7);
        let mut net = DetectorNet::new(&cfg, 1).unwrap();
        let out = net.forward(&image(64, 2)).unwrap();
        assert_eq!(out.shape, vec![8, 8, 24]);
    }

    #[test]
    fn zero_weight_network_outputs_zero() {
        let cfg = toy_config();
        let mut net = DetectorNet::new(&cfg, 1).unwrap();
        for seg in net.segments_mut() {
            for p in seg.params_mut() {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let out = net.forward(&image(16, 3)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = toy_config();
        let mut a = DetectorNet::new(&cfg, 42).unwrap();
        let mut b = DetectorNet::new(&cfg, 42).unwrap();
        let img = image(16, 5);
        assert_eq!(a.forward(&img).unwrap().data, b.forward(&img).unwrap().data);
    }

    #[test]
    fn forward_rejects_wrong_input_size() {
        let cfg = toy_config();
        let mut net = DetectorNet::new(&cfg, 1).unwrap();
        assert!(net.forward(&image(32, 1)).is_err());
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let cfg = toy_config();
        let mut net = DetectorNet::new(&cfg, 1).unwrap();
        let dout = Tensor::zeros(&[2, 2, 14]);
        match net.backward(&dout) {
            Err(Error::State(_)) => {}
            other => panic!("expected state error, got {other:?}"),
        }
    }

    #[test]
    fn toy_network_is_small() {
        let net = DetectorNet::new(&toy_config(), 1).unwrap();
        assert_eq!(net.num_params(), 972);
        assert!(net.num_params() <= 2000);
    }

    #[test]
    fn single_conv_gradcheck_against_finite_differences() {
        // One 3x3 conv, mean-square loss against a fixed target.
        let mut rng = Rng::new(9);
        let mut conv = Conv::new(2, 3, 3, 1, 1, Activation::Leaky, &mut rng);
        let mut input = Tensor::zeros(&[4, 4, 2]);
        for v in input.data.iter_mut() {
            *v = rng.uniform_range(-1.0, 1.0) as f32;
        }
        let mut target = Tensor::zeros(&[4, 4, 3]);
        for v in target.data.iter_mut() {
            *v = rng.uniform_range(-1.0, 1.0) as f32;
        }

        let loss_of = |c: &mut Conv| -> f64 {
            let out = c.forward(&input).unwrap();
            out.data
                .iter()
                .zip(&target.data)
                .map(|(&o, &t)| {
                    let d = (o - t) as f64;
                    d * d
                })
                .sum::<f64>()
                / out.numel() as f64
        };

        let out = conv.forward(&input).unwrap();
        let mut dout = Tensor::zeros(&out.shape);
        for i in 0..out.numel() {
            dout.data[i] = 2.0 * (out.data[i] - target.data[i]) / out.numel() as f32;
        }
        conv.backward(&dout, true).unwrap();
        let analytic_w: Vec<f32> = conv.weight.grad.clone().unwrap();
        let analytic_b: Vec<f32> = conv.bias.grad.clone().unwrap();

        let h = 1e-3f32;
        let mut checked = 0;
        for (idx, &g) in analytic_w.iter().enumerate() {
            let orig = conv.weight.data[idx];
            conv.weight.data[idx] = orig + h;
            let up = loss_of(&mut conv);
            conv.weight.data[idx] = orig - h;
            let down = loss_of(&mut conv);
            conv.weight.data[idx] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let rel = (g as f64 - fd).abs() / fd.abs().max(g.abs() as f64).max(1.0);
            assert!(rel < 1e-3, "weight {idx}: analytic {g} fd {fd}");
            checked += 1;
        }
        for (idx, &g) in analytic_b.iter().enumerate() {
            let orig = conv.bias.data[idx];
            conv.bias.data[idx] = orig + h;
            let up = loss_of(&mut conv);
            conv.bias.data[idx] = orig - h;
            let down = loss_of(&mut conv);
            conv.bias.data[idx] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let rel = (g as f64 - fd).abs() / fd.abs().max(g.abs() as f64).max(1.0);
            assert!(rel < 1e-3, "bias {idx}: analytic {g} fd {fd}");
            checked += 1;
        }
        assert_eq!(checked, conv.num_params());
    }

    #[test]
    fn unused_output_channel_has_zero_bias_grad() {
        let cfg = toy_config();
        let mut net = DetectorNet::new(&cfg, 4).unwrap();
        let out = net.forward(&image(16, 6)).unwrap();
        let mut dout = Tensor::zeros(&out.shape);
        // Only channel 0 carries gradient; head biases for other channels
        // cannot influence the loss.
        for y in 0..out.shape[0] {
            for x in 0..out.shape[1] {
                dout.data[out.idx3(y, x, 0)] = 1.0;
            }
        }
        net.backward(&dout).unwrap();
        let head_bias = &net.head.layers[0].bias;
        let g = head_bias.grad.as_ref().unwrap();
        assert!(g[0] != 0.0);
        for c in 1..g.len() {
            assert_eq!(g[c], 0.0, "channel {c}");
        }
    }

    #[test]
    fn momentum_update_arithmetic() {
        let mut w = [1.0f32];
        let mut v = [0.0f32];
        momentum_update(&mut w, &mut v, &[0.5], 0.1, 0.0);
        assert!((w[0] - 0.95).abs() < 1e-7);

        let mut w = [0.0f32];
        let mut v = [0.0f32];
        momentum_update(&mut w, &mut v, &[1.0], 0.1, 0.9);
        momentum_update(&mut w, &mut v, &[1.0], 0.1, 0.9);
        assert!((w[0] - (-0.29)).abs() < 1e-7, "w = {}", w[0]);
    }

    #[test]
    fn frozen_segment_never_moves() {
        let cfg = toy_config();
        let mut net = DetectorNet::new(&cfg, 8).unwrap();
        net.set_frozen(&[SegmentName::Backbone], true);
        let before: Vec<Vec<f32>> = net
            .backbone
            .params()
            .iter()
            .map(|p| p.data.clone())
            .collect();
        let head_before = net.head.layers[0].weight.data.clone();
        let img = image(16, 7);
        for _ in 0..10 {
            let out = net.forward(&img).unwrap();
            let mut dout = Tensor::zeros(&out.shape);
            for (i, v) in dout.data.iter_mut().enumerate() {
                *v = ((i % 7) as f32 - 3.0) * 0.01;
            }
            net.backward(&dout).unwrap();
            net.sgd_step(0.01, 0.9).unwrap();
        }
        let after: Vec<Vec<f32>> = net
            .backbone
            .params()
            .iter()
            .map(|p| p.data.clone())
            .collect();
        assert_eq!(before, after);
        // The unfrozen head must have moved under the same gradients.
        assert_ne!(head_before, net.head.layers[0].weight.data);
    }

    #[test]
    fn sgd_rejects_bad_hyperparameters() {
        let mut net = DetectorNet::new(&toy_config(), 1).unwrap();
        assert!(net.sgd_step(0.0, 0.9).is_err());
        assert!(net.sgd_step(-0.1, 0.9).is_err());
        assert!(net.sgd_step(0.1, 1.0).is_err());
    }

    #[test]
    fn clipping_rescales_to_the_cap_and_leaves_small_gradients_alone() {
        let mut net = DetectorNet::new(&toy_config(), 5).unwrap();
        let fill = |net: &mut DetectorNet, v: f32| {
            for seg in net.segments_mut() {
                for p in seg.params_mut() {
                    p.grad = Some(vec![v; p.data.len()]);
                }
            }
        };
        let norm = |net: &mut DetectorNet| -> f64 {
            let mut sq = 0.0f64;
            for seg in net.segments_mut() {
                for p in seg.params_mut() {
                    let g = p.grad.as_ref().unwrap();
                    sq += g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
                }
            }
            sq.sqrt()
        };

        fill(&mut net, 0.5);
        let before = norm(&mut net);
        let reported = net.clip_grads(1.0).unwrap() as f64;
        assert!((reported - before).abs() < 1e-3 * before);
        let after = norm(&mut net);
        assert!((after - 1.0).abs() < 1e-5, "clipped norm {after}");

        // Below the cap nothing moves.
        fill(&mut net, 1e-4);
        let small = norm(&mut net);
        net.clip_grads(1.0).unwrap();
        assert_eq!(norm(&mut net), small);

        assert!(net.clip_grads(0.0).is_err());
        assert!(net.clip_grads(-2.0).is_err());
    }

    #[test]
    fn segment_name_parsing() {
        assert_eq!(
            "backbone".parse::<SegmentName>().unwrap(),
            SegmentName::Backbone
        );
        assert_eq!("neck".parse::<SegmentName>().unwrap(), SegmentName::Neck);
        assert_eq!("head".parse::<SegmentName>().unwrap(), SegmentName::Head);
        assert!("stem".parse::<SegmentName>().is_err());
    }
}
