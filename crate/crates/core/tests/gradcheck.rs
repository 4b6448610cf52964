//! Finite-difference checks of every differentiable op and of a full UNet
//! noise-prediction loss, in both precisions over many seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdm_core::gradcheck::{grad_check, grad_check_at, Differentiable};
use tdm_core::unet::{AttnControl, AttnRecord, UNetArch, UNetParams};
use tdm_core::{Graph, Result, Scalar, Tensor, Var};

const SEEDS: u64 = 20;
const TOL_F32: f64 = 1e-3;
const TOL_F64: f64 = 1e-6;
const EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
enum Op {
    MatMul(bool, bool),
    BatchedMatMul(bool, bool),
    Conv2d,
    Add,
    Mul,
    Scale,
    Silu,
    Softmax,
    GroupNorm,
    Reshape,
    Concat(usize),
    AvgPool2,
    Upsample2,
    Mse,
}

/// `mse(op(inputs), target)` differentiated with respect to `inputs[which]`.
struct OpLoss {
    op: Op,
    inputs: Vec<Tensor<f64>>,
    which: usize,
    target: Tensor<f64>,
}

impl Differentiable for OpLoss {
    fn eval<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, t)| if i == self.which { x } else { g.constant(t.cast()) })
            .collect();
        let out = match self.op {
            Op::MatMul(ta, tb) | Op::BatchedMatMul(ta, tb) => g.matmul(vars[0], vars[1], ta, tb)?,
            Op::Conv2d => g.conv2d(vars[0], vars[1], vars[2])?,
            Op::Add => g.add(vars[0], vars[1])?,
            Op::Mul => g.mul(vars[0], vars[1])?,
            Op::Scale => g.scale(vars[0], -1.7)?,
            Op::Silu => g.silu(vars[0])?,
            Op::Softmax => g.softmax(vars[0])?,
            Op::GroupNorm => g.group_norm(vars[0], vars[1], vars[2], 2)?,
            Op::Reshape => g.reshape(vars[0], &[6, 4])?,
            Op::Concat(axis) => g.concat(&vars, axis)?,
            Op::AvgPool2 => g.avgpool2(vars[0])?,
            Op::Upsample2 => g.upsample2(vars[0])?,
            Op::Mse => return g.mse_loss(vars[0], vars[1]),
        };
        let t = g.constant(self.target.cast());
        g.mse_loss(out, t)
    }
}

fn shapes(op: Op) -> (Vec<Vec<usize>>, Vec<usize>) {
    match op {
        Op::MatMul(ta, tb) => {
            let a = if ta { vec![4, 3] } else { vec![3, 4] };
            let b = if tb { vec![5, 4] } else { vec![4, 5] };
            (vec![a, b], vec![3, 5])
        }
        Op::BatchedMatMul(ta, tb) => {
            let a = if ta { vec![2, 4, 3] } else { vec![2, 3, 4] };
            // shared rank-2 right operand
            let b = if tb { vec![5, 4] } else { vec![4, 5] };
            (vec![a, b], vec![2, 3, 5])
        }
        Op::Conv2d => (vec![vec![2, 2, 5, 4], vec![3, 2, 3, 3], vec![3]], vec![2, 3, 5, 4]),
        Op::Add | Op::Mul => (vec![vec![2, 3, 4], vec![1, 3, 1]], vec![2, 3, 4]),
        Op::Scale | Op::Silu | Op::Softmax => (vec![vec![3, 5]], vec![3, 5]),
        Op::GroupNorm => (vec![vec![2, 4, 3, 3], vec![4], vec![4]], vec![2, 4, 3, 3]),
        Op::Reshape => (vec![vec![2, 3, 4]], vec![6, 4]),
        Op::Concat(0) => (vec![vec![2, 3], vec![1, 3]], vec![3, 3]),
        Op::Concat(_) => (vec![vec![2, 2, 2], vec![2, 3, 2]], vec![2, 5, 2]),
        Op::AvgPool2 => (vec![vec![1, 2, 4, 6]], vec![1, 2, 2, 3]),
        Op::Upsample2 => (vec![vec![1, 2, 2, 3]], vec![1, 2, 4, 6]),
        Op::Mse => (vec![vec![3, 4], vec![3, 4]], vec![]),
    }
}

fn case(op: Op, seed: u64, which: usize) -> OpLoss {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ins, out) = shapes(op);
    let mut inputs: Vec<Tensor<f64>> = ins.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
    if let Op::GroupNorm = op {
        // affine scale away from zero keeps every gradient entry well scaled
        inputs[1] = inputs[1].map(|v| 1.0 + 0.3 * v);
    }
    let target = if out.is_empty() { Tensor::zeros(&[1]) } else { Tensor::randn(&out, 1.0, &mut rng) };
    OpLoss { op, inputs, which, target }
}

fn all_ops() -> Vec<Op> {
    let mut ops = Vec::new();
    for ta in [false, true] {
        for tb in [false, true] {
            ops.push(Op::MatMul(ta, tb));
            ops.push(Op::BatchedMatMul(ta, tb));
        }
    }
    ops.extend([
        Op::Conv2d,
        Op::Add,
        Op::Mul,
        Op::Scale,
        Op::Silu,
        Op::Softmax,
        Op::GroupNorm,
        Op::Reshape,
        Op::Concat(0),
        Op::Concat(1),
        Op::AvgPool2,
        Op::Upsample2,
        Op::Mse,
    ]);
    ops
}

/// Worst relative error over seeds and inputs, per precision.
fn worst_for(op: Op) -> (f64, f64) {
    let n_inputs = shapes(op).0.len();
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    for seed in 0..SEEDS {
        for which in 0..n_inputs {
            let c = case(op, seed * 31 + which as u64, which);
            let x = c.inputs[which].clone();
            w64 = w64.max(grad_check(&c, &x, EPS).unwrap());
            w32 = w32.max(grad_check(&c, &x.cast::<f32>(), EPS).unwrap());
        }
    }
    (w32, w64)
}

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for op in all_ops() {
        let (w32, w64) = worst_for(op);
        println!("{op:?}: max rel err f32 {w32:.2e}, f64 {w64:.2e}");
        if w32 > TOL_F32 || w64 > TOL_F64 {
            failures.push(format!("{op:?} f32 {w32:.2e} f64 {w64:.2e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

fn tiny_arch() -> UNetArch {
    UNetArch {
        in_channels: 1,
        resolution: 8,
        base_channels: 4,
        channel_mult: vec![1, 2],
        attn_resolutions: vec![8, 4],
        n_res_blocks: 1,
        time_dim: 8,
        cond_dim: 8,
        num_classes: 2,
        max_groups: 2,
    }
}

/// Noise-prediction loss of a tiny UNet with respect to one weight, or the
/// input latent when `weight` is `None`.
pub struct UNetLoss {
    params: UNetParams<f64>,
    weight: Option<String>,
    x: Tensor<f64>,
    target: Tensor<f64>,
}

impl UNetLoss {
    pub fn new(seed: u64, weight: Option<&str>) -> Self {
        let mut params = UNetParams::<f64>::init(tiny_arch(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        // the zero-initialized output conv would hide everything upstream, and
        // near-zero attention logits leave Q/K gradients below FD resolution
        for (name, w) in params.weights_mut().iter_mut() {
            let attn = ["to_q", "to_k", "to_v", "to_out.w", "to_out.b"].iter().any(|s| name.ends_with(s));
            if name.starts_with("out.conv") || attn {
                *w = Tensor::randn(w.shape(), 0.3, &mut rng);
            }
        }
        UNetLoss {
            params,
            weight: weight.map(String::from),
            x: Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng),
            target: Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng),
        }
    }

    pub fn point(&self) -> Tensor<f64> {
        match &self.weight {
            Some(n) => self.params.weight(n).unwrap().clone(),
            None => self.x.clone(),
        }
    }
}

impl Differentiable for UNetLoss {
    fn eval<S: Scalar>(&self, g: &mut Graph<S>, v: Var) -> Result<Var> {
        let params = self.params.cast::<S>();
        let mut w = params.bind(g, None, false)?;
        let x = match &self.weight {
            Some(n) => {
                w.insert(n.clone(), v);
                g.constant(self.x.cast())
            }
            None => v,
        };
        let onehot = g.constant(Tensor::new(&[2, 2], vec![S::one(), S::zero(), S::zero(), S::one()])?);
        let cond = g.matmul(onehot, w.get("cond.table")?, false, false)?;
        let pred = params.forward_graph(g, &w, x, &[37, 812], cond, &AttnControl::default(), &mut AttnRecord::new())?;
        let t = g.constant(self.target.cast());
        g.mse_loss(pred, t)
    }
}

#[test]
fn unet_loss_matches_finite_differences() {
    let arch = tiny_arch();
    let layer = arch.attn_layers()[0].name.clone();
    let targets: Vec<Option<String>> = vec![
        None,
        Some("cond.table".into()),
        Some(format!("{layer}.to_q")),
        Some(format!("{layer}.to_k")),
        Some(format!("{layer}.to_v")),
        Some("out.conv.w".into()),
    ];
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    for seed in 0..SEEDS {
        for t in &targets {
            let f = UNetLoss::new(seed, t.as_deref());
            let x = f.point();
            // a fixed spread of coordinates keeps the finite-difference cost bounded
            let idx: Vec<usize> = (0..x.numel()).step_by((x.numel() / 8).max(1)).collect();
            w64 = w64.max(grad_check_at(&f, &x, EPS, &idx).unwrap());
            w32 = w32.max(grad_check_at(&f, &x.cast::<f32>(), EPS, &idx).unwrap());
        }
    }
    println!("unet loss: max rel err f32 {w32:.2e}, f64 {w64:.2e}");
    assert!(w64 <= TOL_F64, "f64 {w64:.2e}");
    assert!(w32 <= TOL_F32, "f32 {w32:.2e}");
}
