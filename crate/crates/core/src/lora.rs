//! Low-rank adapters on the attention Q/K/V projections.
//!
//! An adapter stores factors `A [r, d_in]` and `B [d_out, r]`; its effective
//! residual is `ΔW = s·B·A`. Interpolation between two adapters operates on
//! those dense residuals.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffusion::{q_sample, Denoiser, DiffusionSchedule};
use crate::error::{shape_err, Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{AttnControl, AttnRecord, BoundWeights, ConditionVector, UNetParams};

/// Factor pair for one adapted weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

/// Per-image low-rank update `Δθ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta<S> {
    pub rank: usize,
    pub scale: f64,
    pub factors: BTreeMap<String, LoraFactors<S>>,
}

/// Dense `ΔW` per adapted weight.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveResiduals<S> {
    residuals: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> EffectiveResiduals<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.residuals.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.residuals.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.residuals.iter()
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    /// Zero residuals on every Q/K/V projection of `params`.
    pub fn zeros(params: &UNetParams<S>) -> Result<Self> {
        let mut residuals = BTreeMap::new();
        for name in params.arch.qkv_weight_names() {
            residuals.insert(name.clone(), Tensor::zeros(params.weight(&name)?.shape()));
        }
        Ok(EffectiveResiduals { residuals })
    }
}

/// `s·B·A` through the same kernel the fitting graph uses.
fn product<S: Scalar>(f: &LoraFactors<S>, scale: f64) -> Tensor<S> {
    let (dout, r) = (f.b.shape()[0], f.b.shape()[1]);
    let din = f.a.shape()[1];
    let mut out = vec![S::zero(); dout * din];
    S::gemm(false, false, dout, r, din, f.b.data(), f.a.data(), &mut out, false);
    let t = Tensor::new(&[dout, din], out).expect("gemm output sized by construction");
    t.scale(S::of(scale))
}

impl<S: Scalar> LoraDelta<S> {
    /// Dense residuals of this adapter.
    pub fn residuals(&self) -> EffectiveResiduals<S> {
        EffectiveResiduals {
            residuals: self
                .factors
                .iter()
                .map(|(k, f)| (k.clone(), product(f, self.scale)))
                .collect(),
        }
    }

    /// Flatten into named tensors (`<weight>.lora_a`, `<weight>.lora_b`).
    pub fn to_named(&self) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        for (k, f) in &self.factors {
            out.insert(format!("{k}.lora_a"), f.a.clone());
            out.insert(format!("{k}.lora_b"), f.b.clone());
        }
        out
    }

    pub fn from_named(rank: usize, scale: f64, named: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let mut a_parts = BTreeMap::new();
        let mut b_parts = BTreeMap::new();
        for (k, t) in named {
            if let Some(base) = k.strip_suffix(".lora_a") {
                a_parts.insert(base.to_string(), t);
            } else if let Some(base) = k.strip_suffix(".lora_b") {
                b_parts.insert(base.to_string(), t);
            } else {
                return Err(Error::UnknownName(format!("adapter tensor {k}")));
            }
        }
        let mut factors = BTreeMap::new();
        for (k, a) in a_parts {
            let b = b_parts
                .remove(&k)
                .ok_or_else(|| Error::UnknownName(format!("{k}.lora_b missing")))?;
            if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != rank || b.shape()[1] != rank {
                return Err(shape_err("lora", format!("{k}: A {:?}, B {:?}, rank {rank}", a.shape(), b.shape())));
            }
            factors.insert(k, LoraFactors { a, b });
        }
        if let Some(k) = b_parts.keys().next() {
            return Err(Error::UnknownName(format!("{k}.lora_a missing")));
        }
        Ok(LoraDelta { rank, scale, factors })
    }

    fn check_against(&self, params: &UNetParams<S>) -> Result<()> {
        for (name, f) in &self.factors {
            let w = params.weight(name)?;
            if w.shape() != [f.b.shape()[0], f.a.shape()[1]] {
                return Err(shape_err("lora", format!("{name}: weight {:?}", w.shape())));
            }
        }
        Ok(())
    }
}

/// Fresh adapter on every Q/K/V projection: `A ~ N(0, 0.02²)`, `B = 0`.
pub fn init_lora<S: Scalar>(params: &UNetParams<S>, rank: usize, seed: u64) -> Result<LoraDelta<S>> {
    if rank == 0 {
        return Err(Error::Invalid("LoRA rank must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors = BTreeMap::new();
    for name in params.arch.qkv_weight_names() {
        let w = params.weight(&name)?;
        let (dout, din) = (w.shape()[0], w.shape()[1]);
        if rank > dout.min(din) {
            return Err(Error::Invalid(format!(
                "rank {rank} exceeds min dimension of {name} ({dout}x{din})"
            )));
        }
        factors.insert(
            name,
            LoraFactors {
                a: Tensor::randn(&[rank, din], 0.02, &mut rng),
                b: Tensor::zeros(&[dout, rank]),
            },
        );
    }
    Ok(LoraDelta { rank, scale: 1.0, factors })
}

fn check_compatible<S: Scalar>(d0: &LoraDelta<S>, d1: &LoraDelta<S>) -> Result<()> {
    if d0.rank != d1.rank || d0.factors.len() != d1.factors.len() {
        return Err(shape_err("interp_lora", format!("ranks {} / {}", d0.rank, d1.rank)));
    }
    for ((k0, f0), (k1, f1)) in d0.factors.iter().zip(&d1.factors) {
        if k0 != k1 || f0.a.shape() != f1.a.shape() || f0.b.shape() != f1.b.shape() {
            return Err(shape_err("interp_lora", format!("adapter {k0} vs {k1}")));
        }
    }
    Ok(())
}

/// `ΔW_α = (1−α)·s₀B₀A₀ + α·s₁B₁A₁` per adapted weight.
pub fn interp_lora<S: Scalar>(d0: &LoraDelta<S>, d1: &LoraDelta<S>, alpha: f64) -> Result<EffectiveResiduals<S>> {
    check_compatible(d0, d1)?;
    check_ratio(alpha)?;
    let (r0, r1) = (d0.residuals(), d1.residuals());
    interp_residuals(&r0, &r1, alpha)
}

/// Interpolate two dense residual sets; exact copies at α ∈ {0, 1}.
pub fn interp_residuals<S: Scalar>(
    r0: &EffectiveResiduals<S>,
    r1: &EffectiveResiduals<S>,
    alpha: f64,
) -> Result<EffectiveResiduals<S>> {
    if r0.residuals.len() != r1.residuals.len() {
        return Err(shape_err("interp_lora", "different adapted weight sets"));
    }
    let mut residuals = BTreeMap::new();
    for ((k0, a), (k1, b)) in r0.residuals.iter().zip(&r1.residuals) {
        if k0 != k1 {
            return Err(shape_err("interp_lora", format!("{k0} vs {k1}")));
        }
        residuals.insert(k0.clone(), a.lerp(b, S::of(alpha))?);
    }
    Ok(EffectiveResiduals { residuals })
}

/// Alternative reading: interpolate the factors, then form `s·B_α·A_α`.
pub fn interp_lora_factors<S: Scalar>(d0: &LoraDelta<S>, d1: &LoraDelta<S>, alpha: f64) -> Result<EffectiveResiduals<S>> {
    check_compatible(d0, d1)?;
    check_ratio(alpha)?;
    let a = S::of(alpha);
    let scale = (1.0 - alpha) * d0.scale + alpha * d1.scale;
    let mut residuals = BTreeMap::new();
    for ((k, f0), f1) in d0.factors.iter().zip(d1.factors.values()) {
        let f = LoraFactors {
            a: f0.a.lerp(&f1.a, a)?,
            b: f0.b.lerp(&f1.b, a)?,
        };
        residuals.insert(k.clone(), product(&f, scale));
    }
    Ok(EffectiveResiduals { residuals })
}

fn check_ratio(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("interpolation ratio {alpha} outside [0, 1]")))
    }
}

/// Effective network `θ + ΔW` over a frozen base.
pub fn apply_lora<'a, S: Scalar>(base: &'a UNetParams<S>, residuals: &'a EffectiveResiduals<S>) -> Result<Denoiser<'a, S>> {
    for (name, d) in residuals.iter() {
        let w = base.weight(name)?;
        w.expect_same_shape(d, "apply_lora")?;
    }
    Ok(Denoiser {
        base,
        residuals: Some(residuals),
    })
}

/// Settings for single-image adapter fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Noisy copies of the image per step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            steps: 200,
            lr: 2e-4,
            weight_decay: 0.01,
            batch_size: 1,
            seed: 0,
        }
    }
}

/// Adapter plus the per-step loss trace.
pub struct LoraFit<S> {
    pub delta: LoraDelta<S>,
    pub losses: Vec<f64>,
}

/// One fitting batch: timesteps and noises for copies of the image.
#[derive(Clone, Debug)]
pub struct FitBatch<S> {
    pub timesteps: Vec<usize>,
    pub noises: Vec<Tensor<S>>,
}

impl<S: Scalar> FitBatch<S> {
    pub fn sample<R: Rng>(rng: &mut R, size: usize, shape: &[usize], sched: &DiffusionSchedule) -> Self {
        let mut timesteps = Vec::with_capacity(size);
        let mut noises = Vec::with_capacity(size);
        for _ in 0..size {
            timesteps.push(rng.random_range(1..=sched.num_steps()));
            noises.push(Tensor::randn(shape, 1.0, rng));
        }
        FitBatch { timesteps, noises }
    }
}

struct AdapterVars {
    a: crate::autodiff::Var,
    b: crate::autodiff::Var,
}

/// Bind the base frozen and replace each adapted weight by `W + s·B·A`.
fn bind_with_adapters<S: Scalar>(
    g: &mut Graph<S>,
    base: &UNetParams<S>,
    delta: &LoraDelta<S>,
    trainable: bool,
) -> Result<(BoundWeights, Vec<AdapterVars>)> {
    let mut w = base.bind(g, None, false)?;
    let mut vars = Vec::with_capacity(delta.factors.len());
    for (name, f) in &delta.factors {
        let a = g.leaf(f.a.clone(), trainable);
        let b = g.leaf(f.b.clone(), trainable);
        let ba = g.matmul(b, a, false, false)?;
        let d = g.scale(ba, delta.scale)?;
        let eff = g.add(w.get(name)?, d)?;
        w.insert(name.clone(), eff);
        vars.push(AdapterVars { a, b });
    }
    Ok((w, vars))
}

fn batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    base: &UNetParams<S>,
    w: &BoundWeights,
    z0: &Tensor<S>,
    cond: &ConditionVector<S>,
    batch: &FitBatch<S>,
    sched: &DiffusionSchedule,
) -> Result<crate::autodiff::Var> {
    let arch = &base.arch;
    let n = batch.timesteps.len();
    let r = arch.resolution;
    let mut x = Vec::with_capacity(n * z0.numel());
    let mut target = Vec::with_capacity(n * z0.numel());
    let mut conds = Vec::with_capacity(n * arch.cond_dim);
    for (&t, eps) in batch.timesteps.iter().zip(&batch.noises) {
        x.extend_from_slice(q_sample(z0, t, eps, sched)?.data());
        target.extend_from_slice(eps.data());
        conds.extend_from_slice(cond.embedding.data());
    }
    let shape = [n, arch.in_channels, r, r];
    let xv = g.constant(Tensor::new(&shape, x)?);
    let tv = g.constant(Tensor::new(&shape, target)?);
    let cv = g.constant(Tensor::new(&[n, arch.cond_dim], conds)?);
    let pred = base.forward_graph(g, w, xv, &batch.timesteps, cv, &AttnControl::default(), &mut AttnRecord::new())?;
    g.mse_loss(pred, tv)
}

/// Fitting loss of `delta` on a batch, evaluated through the factor graph.
pub fn lora_loss<S: Scalar>(
    z0: &Tensor<S>,
    cond: &ConditionVector<S>,
    base: &UNetParams<S>,
    delta: &LoraDelta<S>,
    batch: &FitBatch<S>,
    sched: &DiffusionSchedule,
) -> Result<f64> {
    let mut g = Graph::new();
    let (w, _) = bind_with_adapters(&mut g, base, delta, false)?;
    let l = batch_loss(&mut g, base, &w, z0, cond, batch, sched)?;
    Ok(g.value(l).item()?.as_f64())
}

/// The same loss evaluated with dense residuals on the effective network.
pub fn residual_loss<S: Scalar>(
    z0: &Tensor<S>,
    cond: &ConditionVector<S>,
    base: &UNetParams<S>,
    residuals: &EffectiveResiduals<S>,
    batch: &FitBatch<S>,
    sched: &DiffusionSchedule,
) -> Result<f64> {
    let mut g = Graph::new();
    let w = base.bind(&mut g, Some(residuals), false)?;
    let l = batch_loss(&mut g, base, &w, z0, cond, batch, sched)?;
    Ok(g.value(l).item()?.as_f64())
}

/// Fit an adapter to one image with the base frozen:
/// `min E_{ε,t} ‖ε − ε_{θ+Δθ}(√ᾱ_t z0 + √(1−ᾱ_t) ε, t, c)‖²` by AdamW on `A`, `B`.
pub fn fit_lora<S: Scalar>(
    z0: &Tensor<S>,
    cond: &ConditionVector<S>,
    base: &UNetParams<S>,
    sched: &DiffusionSchedule,
    cfg: &LoraConfig,
) -> Result<LoraFit<S>> {
    let arch = &base.arch;
    if z0.numel() != arch.in_channels * arch.resolution * arch.resolution {
        return Err(shape_err("fit_lora", format!("image {:?} vs resolution {}", z0.shape(), arch.resolution)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let z0 = z0.reshape(&[arch.in_channels, arch.resolution, arch.resolution])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delta = init_lora(base, cfg.rank, rng.random())?;
    delta.check_against(base)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        delta.factors.values().flat_map(|f| [&f.a, &f.b]),
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = FitBatch::sample(&mut rng, cfg.batch_size, z0.shape(), sched);
        let mut g = Graph::new();
        let (w, vars) = bind_with_adapters(&mut g, base, &delta, true)?;
        let loss = batch_loss(&mut g, base, &w, &z0, cond, &batch, sched)?;
        let lv = g.value(loss).item()?.as_f64();
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        g.backward(loss)?;
        let mut grads = Vec::with_capacity(vars.len() * 2);
        for v in &vars {
            for var in [v.a, v.b] {
                grads.push(g.take_grad(var).unwrap_or_else(|| Tensor::zeros(g.shape(var))));
            }
        }
        let mut ps: Vec<&mut Tensor<S>> = delta
            .factors
            .values_mut()
            .flat_map(|f| [&mut f.a, &mut f.b])
            .collect();
        let gs: Vec<&Tensor<S>> = grads.iter().collect();
        opt.step(&mut ps, &gs)?;
        losses.push(lv);
    }
    Ok(LoraFit { delta, losses })
}
