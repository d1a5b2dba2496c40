//! Per-frame gradient-weighted class activation maps and the temporal CAM loss.
//!
//! For every frame `i` of a clip and final feature map `F′(X_i)` of shape
//! `C×h×w`, the channel weights are the spatial mean of `∂L_ce(ŷ)/∂F′`, and
//! the raw map is the weighted channel sum. The stack of `T` raw maps is
//! normalized jointly as `(X − min) / max`, frames are ranked by the mass of
//! their normalized map, and the loss averages the `N` lowest-mass frames.
//!
//! The weight factor is a constant in the differentiable route
//! ([`cam_objective`]): gradients reach the clip only through `F′`.

use crate::error::{Error, Result};
use crate::nn::VideoModel;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Below this, a raw stack's max (or max − min) counts as flat.
pub const FLAT_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CamStack {
    /// Normalized maps `[T, h, w]`.
    pub maps: Tensor<f64>,
    /// Raw maps `[T, h, w]`.
    pub raw_maps: Tensor<f64>,
    /// Spatial sum of each normalized map.
    pub frame_mass: Vec<f64>,
    /// Frame indices in ascending `frame_mass` order.
    pub pi: Vec<usize>,
    pub target_label: usize,
    /// The raw stack was flat and `maps` is uniform.
    pub degenerate: bool,
}

impl CamStack {
    /// Normalizes and ranks a raw `[T, h, w]` stack.
    pub fn from_raw(raw_maps: Tensor<f64>, target_label: usize) -> Result<Self> {
        let (maps, degenerate) = normalize_stack(&raw_maps)?;
        let frame_mass = frame_mass(&maps);
        let pi = rank_frames(&frame_mass);
        Ok(CamStack { maps, raw_maps, frame_mass, pi, target_label, degenerate })
    }

    pub fn frames(&self) -> usize {
        self.maps.shape()[0]
    }

    /// Spatial mean of every normalized map.
    pub fn frame_means(&self) -> Vec<f64> {
        let hw = self.maps.numel() / self.frames();
        self.frame_mass.iter().map(|m| m / hw as f64).collect()
    }

    /// Entropy (nats) of `frame_mass` rescaled to a distribution.
    pub fn mass_entropy(&self) -> f64 {
        mass_entropy(&self.frame_mass)
    }
}

fn check_stack(raw: &Tensor<f64>) -> Result<()> {
    if raw.shape().len() != 3 || raw.numel() == 0 {
        return Err(Error::Shape(format!("CAM stack must be non-empty [T, h, w], got {:?}", raw.shape())));
    }
    Ok(())
}

fn is_flat(min: f64, max: f64) -> bool {
    max <= FLAT_EPS || max - min <= FLAT_EPS
}

/// Joint normalization `(X − min) / max` over all frames. A flat stack
/// yields uniform maps of value `1/(h·w·T)`; the flag reports it.
pub fn normalize_stack(raw: &Tensor<f64>) -> Result<(Tensor<f64>, bool)> {
    check_stack(raw)?;
    let d = raw.data();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if is_flat(min, max) {
        let u = 1.0 / raw.numel() as f64;
        return Ok((Tensor::full(raw.shape(), u), true));
    }
    let maps = Tensor::new(raw.shape(), d.iter().map(|&x| (x - min) / max).collect())?;
    Ok((maps, false))
}

/// Spatial sum of each `[h, w]` slice.
pub fn frame_mass(maps: &Tensor<f64>) -> Vec<f64> {
    let t = maps.shape()[0];
    let hw = maps.numel() / t.max(1);
    maps.data().chunks(hw).map(|c| c.iter().sum()).collect()
}

/// Ascending argsort; equal masses keep the lower frame index first.
pub fn rank_frames(frame_mass: &[f64]) -> Vec<usize> {
    let mut pi: Vec<usize> = (0..frame_mass.len()).collect();
    pi.sort_by(|&a, &b| frame_mass[a].total_cmp(&frame_mass[b]));
    pi
}

/// Mean over the `n` lowest-mass frames of each frame's spatial mean.
pub fn cam_loss(stack: &CamStack, n: usize) -> Result<f64> {
    let t = stack.frames();
    if n == 0 || n > t {
        return Err(Error::Domain(format!("N = {n} outside 1..={t}")));
    }
    let means = stack.frame_means();
    Ok(stack.pi[..n].iter().map(|&i| means[i]).sum::<f64>() / n as f64)
}

pub fn mass_entropy(mass: &[f64]) -> f64 {
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -mass
        .iter()
        .map(|&m| m / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Graph nodes and values produced by [`cam_objective`] for a batch.
#[derive(Debug)]
pub struct CamObjective {
    /// Logits `[B, classes]` of the eval forward.
    pub logits: Var,
    /// Per-clip `L_C` scalars; recorded as constants for flat stacks.
    pub losses: Vec<Var>,
    pub stacks: Vec<CamStack>,
}

/// Records the differentiable CAM loss for `clips` clips stacked in `input`
/// (`[B·T, C, H, W]`) on the clean eval path. `targets[b]` is the class used
/// to weight clip `b`'s maps. All gradients in `g` are cleared on return.
pub fn cam_objective<S: Scalar>(
    model: &VideoModel<S>,
    g: &mut Graph<S>,
    input: Var,
    targets: &[usize],
    n: usize,
) -> Result<CamObjective> {
    let frames = model.config().frames;
    if n == 0 || n > frames {
        return Err(Error::Domain(format!("N = {n} outside 1..={frames}")));
    }
    let bindings = model.bind(g, false);
    let out = model.forward_inference(g, &bindings, input)?;
    let clips = g.shape(out.logits)[0];
    if targets.len() != clips {
        return Err(Error::Shape(format!("{} targets for {clips} clips", targets.len())));
    }
    if !g.requires_grad(out.features) {
        return Err(Error::Contract("CAM input must track gradients".into()));
    }
    let ce = g.cross_entropy(out.logits, targets)?;
    let total = g.sum_all(ce)?;
    g.backward_to(total, out.features)?;
    let fshape = g.shape(out.features).to_vec();
    let (rows, c, h, w) = (fshape[0], fshape[1], fshape[2], fshape[3]);
    let hw = h * w;
    let dfeat = g.grad_or_zeros(out.features);
    g.zero_grad();
    let inv = S::lit(1.0 / hw as f64);
    let weights = Tensor::from_fn(&[rows, c], |k| dfeat[k * hw..(k + 1) * hw].iter().copied().sum::<S>() * inv);
    let wv = g.constant(&weights);
    let raw = g.weighted_channel_sum(out.features, wv)?;

    let mut losses = Vec::with_capacity(clips);
    let mut stacks = Vec::with_capacity(clips);
    for (b, &target) in targets.iter().enumerate() {
        let r = g.select_rows(raw, &(b * frames..(b + 1) * frames).collect::<Vec<_>>())?;
        let raw_t = Tensor::new(&[frames, h, w], g.value(r).iter().map(|x| x.as_f64()).collect())?;
        let stack = CamStack::from_raw(raw_t, target)?;
        let loss = if stack.degenerate {
            g.scalar(S::lit(cam_loss(&stack, n)?))
        } else {
            let mn = g.min_all(r)?;
            let mx = g.max_all(r)?;
            let shifted = g.sub(r, mn)?;
            let norm = g.div(shifted, mx)?;
            let means = g.mean(norm, &[1, 2])?;
            let picked = g.select_rows(means, &stack.pi[..n])?;
            g.mean_all(picked)?
        };
        losses.push(loss);
        stacks.push(stack);
    }
    Ok(CamObjective { logits: out.logits, losses, stacks })
}

/// CAM stack of one clip (`[T, C, H, W]` pixels) for class `label`.
pub fn compute_cam<S: Scalar>(model: &VideoModel<S>, clip: &Tensor<S>, label: usize) -> Result<CamStack> {
    let mut g = Graph::new();
    let x = g.input(&model.input_shape(1), clip.data().to_vec(), true)?;
    let frames = model.config().frames;
    let obj = cam_objective(model, &mut g, x, &[label], frames)?;
    Ok(obj.stacks.into_iter().next().expect("one clip"))
}

/// CAM stacks for several clips at once, one target per clip.
pub fn compute_cams<S: Scalar>(model: &VideoModel<S>, batch: &[S], targets: &[usize]) -> Result<Vec<CamStack>> {
    let mut g = Graph::new();
    let x = g.input(&model.input_shape(targets.len()), batch.to_vec(), true)?;
    let frames = model.config().frames;
    Ok(cam_objective(model, &mut g, x, targets, frames)?.stacks)
}
