#![allow(dead_code)]

//! Central-difference gradient checks shared by the integration tests and
//! the acceptance target.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taflab::nn::{Mode, ModelConfig, NormPath, VideoModel};
use taflab::tensor::{Graph, Tensor, Var};
use taflab::Result;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 50;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random instance of an op under test.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub struct GradCase {
    pub name: &'static str,
    pub sample: fn(&mut ChaCha8Rng) -> Instance,
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values kept at least 0.05 away from zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

/// Distinct values spaced at least 0.02 apart.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.5 + rng.gen_range(0.0..0.02)).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        *v = 0.5 + v.abs();
    }
    t
}

fn dims(rng: &mut ChaCha8Rng, max_rank: usize) -> Vec<usize> {
    let rank = rng.gen_range(1..=max_rank);
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn inst(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Instance {
    Instance { inputs, build: Box::new(build) }
}

fn binary_pair(rng: &mut ChaCha8Rng, denom: bool) -> (Tensor<f64>, Tensor<f64>) {
    let shape = dims(rng, 3);
    let a = normal(rng, &shape);
    let tail = &shape[rng.gen_range(0..shape.len())..];
    let b = if denom { positive(rng, tail) } else { normal(rng, tail) };
    (a, b)
}

fn reduce_case(rng: &mut ChaCha8Rng, which: u8) -> Instance {
    let shape = dims(rng, 3);
    let mut axes: Vec<usize> = (0..shape.len()).filter(|_| rng.gen_bool(0.5)).collect();
    if axes.is_empty() {
        axes.push(0);
    }
    let x = if which >= 2 { spread(rng, &shape) } else { normal(rng, &shape) };
    inst(vec![x], move |g, v| match which {
        0 => g.sum(v[0], &axes),
        1 => g.mean(v[0], &axes),
        2 => g.max(v[0], &axes),
        _ => g.min(v[0], &axes),
    })
}

fn conv_case(rng: &mut ChaCha8Rng) -> Instance {
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let k = if stride == 2 { 2 * rng.gen_range(1..=2) } else { rng.gen_range(1..=3) };
    let (n, c, f) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    // Input size with an exact output grid.
    let out = rng.gen_range(1..=3);
    let hw = ((out - 1) * stride + k) as isize - 2 * pad as isize;
    if hw < 1 {
        return conv_case(rng);
    }
    let hw = hw as usize;
    let x = normal(rng, &[n, c, hw, hw]);
    let w = normal(rng, &[f, c, k, k]);
    inst(vec![x, w], move |g, v| g.conv2d(v[0], v[1], stride, pad))
}

fn bn_case(rng: &mut ChaCha8Rng, train: bool) -> Instance {
    let (b, c, s) = (rng.gen_range(2..=4), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let x = normal(rng, &[b, c, s]);
    let gamma = normal(rng, &[c]);
    let beta = normal(rng, &[c]);
    let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
    inst(vec![x, gamma, beta], move |g, v| {
        if train {
            g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|r| r.0)
        } else {
            g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
        }
    })
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            sample: |r| {
                let (a, b) = binary_pair(r, false);
                inst(vec![a, b], |g, v| g.add(v[0], v[1]))
            },
        },
        GradCase {
            name: "sub",
            sample: |r| {
                let (a, b) = binary_pair(r, false);
                inst(vec![a, b], |g, v| g.sub(v[0], v[1]))
            },
        },
        GradCase {
            name: "mul",
            sample: |r| {
                let (a, b) = binary_pair(r, false);
                inst(vec![a, b], |g, v| g.mul(v[0], v[1]))
            },
        },
        GradCase {
            name: "div",
            sample: |r| {
                let (a, b) = binary_pair(r, true);
                inst(vec![a, b], |g, v| g.div(v[0], v[1]))
            },
        },
        GradCase {
            name: "neg",
            sample: |r| {
                let s = dims(r, 2);
                inst(vec![normal(r, &s)], |g, v| Ok(g.neg(v[0])))
            },
        },
        GradCase {
            name: "relu",
            sample: |r| {
                let s = dims(r, 2);
                inst(vec![off_zero(r, &s)], |g, v| Ok(g.relu(v[0])))
            },
        },
        GradCase {
            name: "exp",
            sample: |r| {
                let s = dims(r, 2);
                inst(vec![normal(r, &s)], |g, v| Ok(g.exp(v[0])))
            },
        },
        GradCase {
            name: "log",
            sample: |r| {
                let s = dims(r, 2);
                inst(vec![positive(r, &s)], |g, v| Ok(g.log(v[0])))
            },
        },
        GradCase {
            name: "scale",
            sample: |r| {
                let s = dims(r, 2);
                let c = r.gen_range(-2.0..2.0);
                inst(vec![normal(r, &s)], move |g, v| Ok(g.scale(v[0], c)))
            },
        },
        GradCase {
            name: "add_scalar",
            sample: |r| {
                let s = dims(r, 2);
                let c = r.gen_range(-2.0..2.0);
                inst(vec![normal(r, &s)], move |g, v| Ok(g.add_scalar(v[0], c)))
            },
        },
        GradCase {
            name: "reshape",
            sample: |r| {
                let s = [r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4)];
                let flat = [s[0] * s[1], s[2]];
                inst(vec![normal(r, &s)], move |g, v| g.reshape(v[0], &flat))
            },
        },
        GradCase { name: "sum", sample: |r| reduce_case(r, 0) },
        GradCase { name: "mean", sample: |r| reduce_case(r, 1) },
        GradCase { name: "max", sample: |r| reduce_case(r, 2) },
        GradCase { name: "min", sample: |r| reduce_case(r, 3) },
        GradCase { name: "conv2d", sample: conv_case },
        GradCase {
            name: "linear",
            sample: |r| {
                let (b, i, o) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
                let bias = r.gen_bool(0.5);
                let mut inputs = vec![normal(r, &[b, i]), normal(r, &[o, i])];
                if bias {
                    inputs.push(normal(r, &[o]));
                }
                inst(inputs, move |g, v| g.linear(v[0], v[1], v.get(2).copied()))
            },
        },
        GradCase { name: "batch_norm_train", sample: |r| bn_case(r, true) },
        GradCase { name: "batch_norm_eval", sample: |r| bn_case(r, false) },
        GradCase {
            name: "temporal_shift",
            sample: |r| {
                let (b, t, c, s) = (r.gen_range(1..=2), r.gen_range(2..=4), r.gen_range(2..=6), r.gen_range(1..=3));
                let fold = r.gen_range(1..=c / 2);
                inst(vec![normal(r, &[b * t, c, s])], move |g, v| g.temporal_shift(v[0], t, fold))
            },
        },
        GradCase {
            name: "cross_entropy",
            sample: |r| {
                let (b, k) = (r.gen_range(1..=4), r.gen_range(2..=5));
                let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
                let mut x = normal(r, &[b, k]);
                x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
                inst(vec![x], move |g, v| g.cross_entropy(v[0], &labels))
            },
        },
        GradCase {
            name: "weighted_channel_sum",
            sample: |r| {
                let (n, c, s) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
                inst(vec![normal(r, &[n, c, s, s]), normal(r, &[n, c])], |g, v| g.weighted_channel_sum(v[0], v[1]))
            },
        },
        GradCase {
            name: "select_rows",
            sample: |r| {
                let (n, s) = (r.gen_range(1..=5), r.gen_range(1..=3));
                let m = r.gen_range(1..=n + 2);
                let idx: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
                inst(vec![normal(r, &[n, s, s])], move |g, v| g.select_rows(v[0], &idx))
            },
        },
    ]
}

/// Scalar `Σ out ⊙ proj` for fixed `proj`.
fn project(g: &mut Graph<f64>, out: Var, proj: &Tensor<f64>) -> Result<Var> {
    let p = g.constant(proj);
    let m = g.mul(out, p)?;
    g.sum_all(m)
}

fn eval_instance(inst: &Instance, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.shape(), t.data().to_vec(), false)).collect::<Result<_>>()?;
    let out = (inst.build)(&mut g, &vars)?;
    let loss = project(&mut g, out, proj)?;
    Ok(g.scalar_value(loss))
}

/// Largest element-wise relative error between the tape gradient and the
/// central difference, over every input of the instance.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst
        .inputs
        .iter()
        .map(|t| g.input(t.shape(), t.data().to_vec(), true))
        .collect::<Result<_>>()?;
    let out = (inst.build)(&mut g, &vars)?;
    let proj = normal(rng, g.shape(out));
    let loss = project(&mut g, out, &proj)?;
    g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(v);
        for j in 0..inst.inputs[i].numel() {
            let mut plus = inst.inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inst.inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval_instance(inst, &plus, &proj)? - eval_instance(inst, &minus, &proj)?) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Runs `INSTANCES` random instances; returns the worst error seen.
pub fn check_case(case: &GradCase, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let inst = (case.sample)(&mut rng);
        worst = worst.max(check_instance(&inst, &mut rng)?);
    }
    Ok(worst)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        frames: 2,
        channels: 1,
        height: 4,
        width: 4,
        classes: 3,
        widths: vec![4, 4],
        strides: vec![2, 1],
        shift_div: 4,
        ..ModelConfig::default()
    }
}

fn model_loss(model: &mut VideoModel<f64>, x: &Tensor<f64>, labels: &[usize], path: NormPath, mode: Mode) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let input = g.input(x.shape(), x.data().to_vec(), true)?;
    let out = model.forward(&mut g, &b, input, path, mode)?;
    let ce = g.cross_entropy(out.logits, labels)?;
    let loss = g.sum_all(ce)?;
    g.backward(loss)?;
    let grads = b.vars().iter().map(|&v| g.grad_or_zeros(v)).collect();
    Ok((g.scalar_value(loss), g.grad_or_zeros(input), grads))
}

/// Checks the full model's gradient w.r.t. its input and every parameter,
/// with the model in `mode` on normalization `path`.
pub fn check_model_instance(seed: u64, path: NormPath, mode: Mode) -> Result<f64> {
    let cfg = tiny_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VideoModel::<f64>::new(cfg.clone(), seed)?;
    // Perturb BN affine params and running stats away from their init.
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    for b in model.buffers_mut() {
        for v in b.data_mut() {
            *v = v.abs() + rng.gen_range(0.1..0.5);
        }
    }
    let clips = 2;
    let x = normal(&mut rng, &model.input_shape(clips));
    let labels: Vec<usize> = (0..clips).map(|_| rng.gen_range(0..cfg.classes)).collect();
    let (_, gx, gp) = model_loss(&mut model.clone(), &x, &labels, path, mode)?;
    let f = |m: &VideoModel<f64>, x: &Tensor<f64>| -> Result<f64> { Ok(model_loss(&mut m.clone(), x, &labels, path, mode)?.0) };
    let mut worst: f64 = 0.0;
    for j in 0..x.numel() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[j] += H;
        m.data_mut()[j] -= H;
        worst = worst.max(rel_err(gx[j], (f(&model, &p)? - f(&model, &m)?) / (2.0 * H)));
    }
    for (k, grad) in gp.iter().enumerate() {
        for j in 0..grad.len() {
            let (mut p, mut m) = (model.clone(), model.clone());
            p.params_mut()[k].data_mut()[j] += H;
            m.params_mut()[k].data_mut()[j] -= H;
            worst = worst.max(rel_err(grad[j], (f(&p, &x)? - f(&m, &x)?) / (2.0 * H)));
        }
    }
    Ok(worst)
}

/// One-block model whose features equal its (non-negative) input: centre-tap
/// identity conv, unit eval normalization, no temporal shift. Logits are
/// `fc · mean(x) + bias`.
pub fn identity_feature_model(frames: usize, h: usize, w: usize, fc: &[f64], bias: &[f64]) -> VideoModel<f64> {
    let classes = bias.len();
    let cfg = ModelConfig {
        frames,
        channels: 1,
        height: h,
        width: w,
        classes,
        widths: vec![1],
        strides: vec![1],
        shift_div: 2,
        ..ModelConfig::default()
    };
    let cfg_eps = cfg.bn_eps;
    let mut m = VideoModel::<f64>::new(cfg, 0).unwrap();
    let block = &mut m.blocks[0];
    block.conv = Tensor::new(&[1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap().with_grad();
    for p in [NormPath::Clean, NormPath::Adversarial] {
        let s = block.bn.path_mut(p);
        s.weight.data_mut()[0] = 1.0;
        s.bias.data_mut()[0] = 0.0;
        s.running_mean.data_mut()[0] = 0.0;
        s.running_var.data_mut()[0] = 1.0 - cfg_eps;
    }
    m.fc_weight = Tensor::new(&[classes, 1], fc.to_vec()).unwrap().with_grad();
    m.fc_bias = Tensor::new(&[classes], bias.to_vec()).unwrap().with_grad();
    m
}

/// Independent re-implementation of the normalize → mass → rank → loss chain.
pub fn brute_force_cam(raw: &[f64], frames: usize, n: usize) -> (Vec<f64>, Vec<usize>, f64) {
    let hw = raw.len() / frames;
    let mn = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let mx = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flat = mx <= 1e-12 || mx - mn <= 1e-12;
    let maps: Vec<f64> = if flat {
        vec![1.0 / raw.len() as f64; raw.len()]
    } else {
        raw.iter().map(|v| (v - mn) / mx).collect()
    };
    let mass: Vec<f64> = maps.chunks(hw).map(|f| f.iter().sum()).collect();
    // Selection sort by (mass, index): picks the lowest remaining each time.
    let mut left: Vec<usize> = (0..frames).collect();
    let mut pi = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if mass[left[k]] < mass[left[best]] {
                best = k;
            }
        }
        pi.push(left.remove(best));
    }
    let loss = pi[..n].iter().map(|&t| mass[t] / hw as f64).sum::<f64>() / n as f64;
    (maps, pi, loss)
}

pub fn small_spec() -> taflab::data::SyntheticSpec {
    taflab::data::SyntheticSpec {
        n_classes: 4,
        frames: 4,
        height: 16,
        width: 16,
        sprite_size: 3,
        split_frame: 2,
        speed: 1,
        noise: 0.05,
        train_size: 48,
        val_size: 16,
        ..taflab::data::SyntheticSpec::default()
    }
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        frames: 4,
        height: 16,
        width: 16,
        classes: 4,
        widths: vec![4, 8],
        strides: vec![2, 1],
        ..ModelConfig::default()
    }
}

pub fn small_taf(epochs: usize, alpha: f64) -> taflab::taf::TafConfig {
    use taflab::taf::{LrSchedule, TafConfig, TrainConfig};
    TafConfig {
        alpha,
        train: TrainConfig {
            epochs,
            lr: LrSchedule { initial: 0.02, factor: 0.1, decay_every: 10 },
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        },
        attack: taflab::attack::AttackConfig { n_frames: 4, ..Default::default() },
    }
}

/// The tape gradient of `x ⊙ sg(x)` against the central difference of
/// `x ⊙ c`, with `c` frozen at the first pass's value of `x`.
pub fn check_stop_gradient(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let x = normal(&mut rng, &[3, 4]);
        let mut g = Graph::<f64>::new();
        let v = g.input(x.shape(), x.data().to_vec(), true)?;
        let s = g.stop_gradient(v);
        let y = g.mul(v, s)?;
        let l = g.sum_all(y)?;
        g.backward(l)?;
        let analytic = g.grad_or_zeros(v);
        let frozen = x.data().to_vec();
        let f = |t: &Tensor<f64>| t.data().iter().zip(&frozen).map(|(a, c)| a * c).sum::<f64>();
        for j in 0..x.numel() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[j] += H;
            m.data_mut()[j] -= H;
            worst = worst.max(rel_err(analytic[j], (f(&p) - f(&m)) / (2.0 * H)));
        }
    }
    Ok(worst)
}
