use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::batchnorm::{DualBatchNorm, Mode, NormPath};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Architecture of the temporal-shift video classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Output channels of each conv block.
    pub widths: Vec<usize>,
    /// Spatial stride of each conv block (1 or 2).
    pub strides: Vec<usize>,
    /// A `1/shift_div` share of input channels is shifted each way in time.
    pub shift_div: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 8,
            channels: 1,
            height: 32,
            width: 32,
            classes: 16,
            widths: vec![16, 32, 32, 64],
            strides: vec![2, 2, 1, 1],
            shift_div: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config("widths and strides must be non-empty and equal length".into()));
        }
        if self.frames == 0 || self.channels == 0 || self.classes == 0 || self.shift_div < 2 {
            return Err(Error::Config("frames, channels, classes must be positive and shift_div ≥ 2".into()));
        }
        let (mut h, mut w) = (self.height, self.width);
        for &s in &self.strides {
            match s {
                1 => {}
                2 if h % 2 == 0 && w % 2 == 0 => {
                    h /= 2;
                    w /= 2;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "stride {s} cannot be applied to a {h}×{w} map"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Spatial size `(h, w)` of the final feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        self.strides.iter().fold((self.height, self.width), |(h, w), &s| (h / s, w / s))
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// Stable 64-bit fingerprint of the architecture (FNV-1a over its fields).
    pub fn fingerprint(&self) -> u64 {
        let text = format!("{self:?}");
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<S: Scalar> {
    pub conv: Tensor<S>,
    pub bn: DualBatchNorm<S>,
    pub stride: usize,
    pub shift_fold: usize,
}

/// Graph handles of every parameter for one forward pass, in
/// [`VideoModel::params`] order.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, classes]`.
    pub logits: Var,
    /// Final conv activations `[B·T, C, h, w]`, before pooling.
    pub features: Var,
}

/// Temporal-shift CNN: conv blocks with dual normalization, global
/// spatio-temporal average pooling, and a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoModel<S: Scalar = f32> {
    config: ModelConfig,
    pub blocks: Vec<ConvBlock<S>>,
    pub fc_weight: Tensor<S>,
    pub fc_bias: Tensor<S>,
}

type StatUpdate<S> = (usize, Vec<S>, Vec<S>, usize);

impl<S: Scalar> VideoModel<S> {
    /// Kaiming-normal conv weights, unit/zero BN affine, uniform classifier.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut in_ch = config.channels;
        for (&out_ch, &stride) in config.widths.iter().zip(&config.strides) {
            let k = if stride == 2 { 4 } else { 3 };
            let fan_in = (in_ch * k * k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let conv = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| S::lit(normal.sample(&mut rng))).with_grad();
            blocks.push(ConvBlock {
                conv,
                bn: DualBatchNorm::new(out_ch, config.bn_momentum, config.bn_eps),
                stride,
                shift_fold: in_ch / config.shift_div,
            });
            in_ch = out_ch;
        }
        let bound = 1.0 / (in_ch as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound);
        let fc_weight =
            Tensor::from_fn(&[config.classes, in_ch], |_| S::lit(uniform.sample(&mut rng))).with_grad();
        let fc_bias = Tensor::zeros(&[config.classes]).with_grad();
        Ok(VideoModel {
            config,
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.blocks.len() {
            names.push(format!("blocks.{i}.conv.weight"));
            for p in ["clean", "adv"] {
                names.push(format!("blocks.{i}.bn.{p}.weight"));
                names.push(format!("blocks.{i}.bn.{p}.bias"));
            }
        }
        names.push("fc.weight".into());
        names.push("fc.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.conv);
            for p in [NormPath::Clean, NormPath::Adversarial] {
                let s = b.bn.path(p);
                out.push(&s.weight);
                out.push(&s.bias);
            }
        }
        out.push(&self.fc_weight);
        out.push(&self.fc_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv);
            let (clean, adv) = b.bn.paths_mut();
            out.push(&mut clean.weight);
            out.push(&mut clean.bias);
            out.push(&mut adv.weight);
            out.push(&mut adv.bias);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    pub fn buffer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.blocks.len() {
            for p in ["clean", "adv"] {
                names.push(format!("blocks.{i}.bn.{p}.running_mean"));
                names.push(format!("blocks.{i}.bn.{p}.running_var"));
            }
        }
        names
    }

    pub fn buffers(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for p in [NormPath::Clean, NormPath::Adversarial] {
                let s = b.bn.path(p);
                out.push(&s.running_mean);
                out.push(&s.running_var);
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            let (clean, adv) = b.bn.paths_mut();
            out.push(&mut clean.running_mean);
            out.push(&mut clean.running_var);
            out.push(&mut adv.running_mean);
            out.push(&mut adv.running_var);
        }
        out
    }

    /// Parameters followed by buffers, matching `param_names` ++ `buffer_names`.
    pub fn state_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for b in &mut self.blocks {
            params.push(&mut b.conv);
            let (clean, adv) = b.bn.paths_mut();
            for s in [clean, adv] {
                params.push(&mut s.weight);
                params.push(&mut s.bias);
                buffers.push(&mut s.running_mean);
                buffers.push(&mut s.running_var);
            }
        }
        params.push(&mut self.fc_weight);
        params.push(&mut self.fc_bias);
        params.extend(buffers);
        params
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Initializes the adversarial normalization path as an exact copy of
    /// the clean one.
    pub fn init_adversarial_path(&mut self) {
        for b in &mut self.blocks {
            b.bn.copy_clean_to_adversarial();
        }
    }

    /// Records every parameter on `g`; `track` controls gradient tracking.
    pub fn bind(&self, g: &mut Graph<S>, track: bool) -> Bindings {
        let vars = self
            .params()
            .into_iter()
            .map(|t| if track { g.leaf(t) } else { g.constant(t) })
            .collect();
        Bindings { vars }
    }

    /// Adds the gradients gathered at `bindings` into the parameters' buffers.
    pub fn accumulate_grads(&mut self, g: &Graph<S>, bindings: &Bindings) -> Result<()> {
        let vars = bindings.vars.clone();
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            if let Some(grad) = g.grad(v) {
                p.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Drops every gradient buffer, so a parameter no forward reached is
    /// left alone (weight decay included) by the next optimizer step.
    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::clear_grad);
    }

    /// Input shape expected for a batch of `clips` clips.
    pub fn input_shape(&self, clips: usize) -> [usize; 4] {
        let c = &self.config;
        [clips * c.frames, c.channels, c.height, c.width]
    }

    fn forward_impl(
        &self,
        g: &mut Graph<S>,
        bindings: &Bindings,
        input: Var,
        path: NormPath,
        mode: Mode,
    ) -> Result<(ForwardOutput, Vec<StatUpdate<S>>)> {
        let c = &self.config;
        let shape = g.shape(input).to_vec();
        if shape.len() != 4
            || shape[0] == 0
            || shape[0] % c.frames != 0
            || shape[1..] != [c.channels, c.height, c.width]
        {
            return Err(Error::Shape(format!(
                "input {shape:?} does not match clips of {} frames × {}×{}×{}",
                c.frames, c.channels, c.height, c.width
            )));
        }
        let clips = shape[0] / c.frames;
        let mut updates = Vec::new();
        let mut x = input;
        for (i, block) in self.blocks.iter().enumerate() {
            let base = i * 5;
            let v = &bindings.vars;
            if block.shift_fold > 0 {
                x = g.temporal_shift(x, c.frames, block.shift_fold)?;
            }
            let pad = 1;
            x = g.conv2d(x, v[base], block.stride, pad)?;
            let affine = match path {
                NormPath::Clean => (v[base + 1], v[base + 2]),
                NormPath::Adversarial => (v[base + 3], v[base + 4]),
            };
            let (y, stats) = block.bn.apply(g, x, affine, path, mode)?;
            if let Some((mean, var, count)) = stats {
                updates.push((i, mean, var, count));
            }
            x = g.relu(y);
        }
        let features = x;
        let fs = g.shape(features).to_vec();
        let pooled = g.reshape(features, &[clips, c.frames, fs[1], fs[2] * fs[3]])?;
        let pooled = g.mean(pooled, &[1, 3])?;
        let n = bindings.vars.len();
        let logits = g.linear(pooled, bindings.vars[n - 2], Some(bindings.vars[n - 1]))?;
        Ok((ForwardOutput { logits, features }, updates))
    }

    /// Switches every normalization layer to `path`.
    pub fn switch_path(&mut self, path: NormPath) {
        for b in &mut self.blocks {
            b.bn.set_active_path(path);
        }
    }

    /// Forward through the chosen normalization path. In train mode the
    /// path's running statistics are updated; the other path is untouched.
    pub fn forward(
        &mut self,
        g: &mut Graph<S>,
        bindings: &Bindings,
        input: Var,
        path: NormPath,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        self.switch_path(path);
        let (out, updates) = self.forward_impl(g, bindings, input, path, mode)?;
        for (i, mean, var, count) in updates {
            self.blocks[i].bn.record_batch(path, &mean, &var, count);
        }
        Ok(out)
    }

    /// Inference forward: always the clean path with running statistics.
    pub fn forward_inference(&self, g: &mut Graph<S>, bindings: &Bindings, input: Var) -> Result<ForwardOutput> {
        self.forward_impl(g, bindings, input, NormPath::Clean, Mode::Eval)
            .map(|(out, _)| out)
    }

    /// Clean-path eval logits for a batch given as a flat `[B·T, C, H, W]` buffer.
    pub fn predict_logits(&self, batch: &[S], clips: usize) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.input(&self.input_shape(clips), batch.to_vec(), false)?;
        let out = self.forward_inference(&mut g, &b, x)?;
        Ok(g.value(out.logits).to_vec())
    }

    /// Converts every parameter and buffer to another scalar type.
    pub fn cast<T: Scalar>(&self) -> VideoModel<T> {
        let mut out = VideoModel::<T>::new(self.config.clone(), 0).expect("config already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        for (dst, src) in out.buffers_mut().into_iter().zip(self.buffers()) {
            *dst = src.cast();
        }
        out
    }
}

/// Mean cross entropy of a logits batch.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = g.cross_entropy(logits, labels)?;
    g.mean_all(per)
}
