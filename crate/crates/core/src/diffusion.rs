//! Linear-β noise schedule, noise-prediction training, deterministic DDIM
//! sampling and DDIM inversion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{shape_err, Error, Result};
use crate::lora::EffectiveResiduals;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{predict_noise, AttnControl, AttnOverride, AttnRecord, ConditionVector, UNetParams};

/// `ᾱ_t` table for `t = 0..=T` (with `ᾱ_0 = 1`) and the DDIM sub-schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    ddim_timesteps: Vec<usize>,
}

/// Schedule parameters as stored in configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.num_steps, self.beta_start, self.beta_end, self.ddim_steps)
    }
}

/// Linear β schedule over `t = 1..=num_steps`, cumulative products in 64-bit,
/// and `ddim_steps` evenly strided sub-steps `⌊i·T/S⌋`, `i = 1..=S`.
pub fn make_schedule(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    ddim_steps: usize,
) -> Result<DiffusionSchedule> {
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Invalid(format!("beta range [{beta_start}, {beta_end}]")));
    }
    if num_steps == 0 || ddim_steps == 0 || ddim_steps > num_steps {
        return Err(Error::Invalid(format!(
            "ddim_steps {ddim_steps} must lie in 1..={num_steps}"
        )));
    }
    let betas: Vec<f64> = (0..num_steps)
        .map(|i| {
            if num_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(num_steps + 1);
    alpha_bars.push(1.0);
    let mut acc = 1.0f64;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    let ddim_timesteps = (1..=ddim_steps).map(|i| i * num_steps / ddim_steps).collect();
    Ok(DiffusionSchedule {
        num_steps,
        betas,
        alpha_bars,
        ddim_timesteps,
    })
}

impl DiffusionSchedule {
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("timestep {t} outside 0..={}", self.num_steps)))
    }

    /// Ascending DDIM timesteps.
    pub fn ddim_timesteps(&self) -> &[usize] {
        &self.ddim_timesteps
    }

    pub fn ddim_len(&self) -> usize {
        self.ddim_timesteps.len()
    }

    /// Denoising order: `(t, t_prev)` pairs from high to low noise, ending at 0.
    pub fn denoise_pairs(&self) -> Vec<(usize, usize)> {
        let ts = &self.ddim_timesteps;
        (0..ts.len())
            .rev()
            .map(|i| (ts[i], if i == 0 { 0 } else { ts[i - 1] }))
            .collect()
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<S: Scalar>(z0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &DiffusionSchedule) -> Result<Tensor<S>> {
    if t == 0 || t > sched.num_steps {
        return Err(Error::Invalid(format!("timestep {t} outside 1..={}", sched.num_steps)));
    }
    q_sample_with(z0, sched.alpha_bar(t)?, eps)
}

pub(crate) fn q_sample_with<S: Scalar>(z0: &Tensor<S>, alpha_bar: f64, eps: &Tensor<S>) -> Result<Tensor<S>> {
    let a = S::of(alpha_bar.sqrt());
    let b = S::of((1.0 - alpha_bar).sqrt());
    z0.zip_with(eps, "q_sample", |z, e| a * z + b * e)
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor<S: Scalar> {
    fn predict(
        &self,
        z: &Tensor<S>,
        t: usize,
        cond: &ConditionVector<S>,
        ctl: &AttnControl<S>,
    ) -> Result<(Tensor<S>, AttnRecord<S>)>;
}

/// Base network with optional dense LoRA residuals: the effective `θ + Δθ`.
#[derive(Clone, Copy)]
pub struct Denoiser<'a, S> {
    pub base: &'a UNetParams<S>,
    pub residuals: Option<&'a EffectiveResiduals<S>>,
}

impl<'a, S: Scalar> Denoiser<'a, S> {
    pub fn new(base: &'a UNetParams<S>) -> Self {
        Denoiser { base, residuals: None }
    }

    /// `W + ΔW` as used by forward passes.
    pub fn effective_weight(&self, name: &str) -> Result<Tensor<S>> {
        let w = self.base.weight(name)?;
        match self.residuals.and_then(|r| r.get(name)) {
            Some(d) => w.add(d),
            None => Ok(w.clone()),
        }
    }
}

impl<S: Scalar> NoisePredictor<S> for Denoiser<'_, S> {
    fn predict(
        &self,
        z: &Tensor<S>,
        t: usize,
        cond: &ConditionVector<S>,
        ctl: &AttnControl<S>,
    ) -> Result<(Tensor<S>, AttnRecord<S>)> {
        predict_noise(self.base, self.residuals, z, t, cond, ctl)
    }
}

/// What a controller asks of one denoising step.
pub struct StepPlan<S> {
    pub overrides: Option<AttnOverride<S>>,
    pub record: bool,
}

impl<S> StepPlan<S> {
    pub fn none() -> Self {
        StepPlan { overrides: None, record: false }
    }
}

/// Hook consulted once per denoising step (step 0 is the noisiest).
pub trait AttnController<S> {
    fn plan(&mut self, step: usize, t: usize) -> Result<StepPlan<S>>;

    /// Called after the step's forward pass with the latent it consumed.
    fn observe(&mut self, _step: usize, _t: usize, _z_t: &Tensor<S>, _record: AttnRecord<S>) -> Result<()> {
        Ok(())
    }
}

/// Result of a DDIM trajectory.
#[derive(Clone, Debug)]
pub struct DdimOutput<S> {
    pub z: Tensor<S>,
    /// Largest `|ẑ0|` seen at any step (diagnostic only, never clamped).
    pub x0_max_abs: f64,
}

fn check_step<S: Scalar>(z: &Tensor<S>, stage: &str, t: usize) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{stage} at t={t}")))
    }
}

/// One deterministic DDIM transition between noise levels `ᾱ_from → ᾱ_to`
/// using a fixed noise estimate. Returns the new latent and `ẑ0`.
pub fn ddim_step<S: Scalar>(z: &Tensor<S>, eps: &Tensor<S>, ab_from: f64, ab_to: f64) -> Result<(Tensor<S>, Tensor<S>)> {
    let sa = S::of(ab_from.sqrt());
    let sb = S::of((1.0 - ab_from).sqrt());
    let x0 = z.zip_with(eps, "ddim_step", |zv, ev| (zv - sb * ev) / sa)?;
    let next = q_sample_with(&x0, ab_to, eps)?;
    Ok((next, x0))
}

/// Deterministic (η = 0) DDIM sampling from `z_T` down to `z_0`.
pub fn ddim_sample<S: Scalar, N: NoisePredictor<S> + ?Sized>(
    z_t: &Tensor<S>,
    cond: &ConditionVector<S>,
    net: &N,
    sched: &DiffusionSchedule,
    mut controller: Option<&mut dyn AttnController<S>>,
) -> Result<DdimOutput<S>> {
    check_step(z_t, "ddim_denoise input", sched.num_steps)?;
    let mut z = z_t.clone();
    let mut x0_max = 0.0f64;
    for (step, (t, t_prev)) in sched.denoise_pairs().into_iter().enumerate() {
        let plan = match controller.as_deref_mut() {
            Some(c) => c.plan(step, t)?,
            None => StepPlan::none(),
        };
        let ctl = AttnControl {
            overrides: plan.overrides.as_ref(),
            record: plan.record,
        };
        let (eps, record) = net.predict(&z, t, cond, &ctl)?;
        if let Some(c) = controller.as_deref_mut() {
            c.observe(step, t, &z, record)?;
        }
        let (next, x0) = ddim_step(&z, &eps, sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?)?;
        x0_max = x0_max.max(x0.max_abs().as_f64());
        check_step(&next, "ddim_denoise", t_prev)?;
        z = next;
    }
    Ok(DdimOutput { z, x0_max_abs: x0_max })
}

/// [`ddim_sample`] returning only the clean latent.
pub fn ddim_denoise<S: Scalar, N: NoisePredictor<S> + ?Sized>(
    z_t: &Tensor<S>,
    cond: &ConditionVector<S>,
    net: &N,
    sched: &DiffusionSchedule,
) -> Result<Tensor<S>> {
    Ok(ddim_sample(z_t, cond, net, sched, None)?.z)
}

/// DDIM inversion: run the recurrence from `z_0` up to `z_T`, estimating the
/// noise of each transition `t_prev → t` as `ε(z_{t_prev}, t)`.
pub fn ddim_invert<S: Scalar, N: NoisePredictor<S> + ?Sized>(
    z0: &Tensor<S>,
    cond: &ConditionVector<S>,
    net: &N,
    sched: &DiffusionSchedule,
) -> Result<Tensor<S>> {
    check_step(z0, "ddim_invert input", 0)?;
    let mut z = z0.clone();
    for (t, t_prev) in sched.denoise_pairs().into_iter().rev() {
        let (eps, _) = net.predict(&z, t, cond, &AttnControl::default())?;
        let (next, _) = ddim_step(&z, &eps, sched.alpha_bar(t_prev)?, sched.alpha_bar(t)?)?;
        check_step(&next, "ddim_invert", t)?;
        z = next;
    }
    Ok(z)
}

/// Optimizer settings for noise-prediction training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Joint gradient-norm clip; `0` disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Labelled training images `[C, H, W]` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub images: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Trained network plus the per-step loss trace.
pub struct TrainOutcome<S> {
    pub params: UNetParams<S>,
    pub losses: Vec<f64>,
}

/// Pretrain the noise predictor with AdamW on `‖ε − ε_θ(√ᾱ_t z0 + √(1−ᾱ_t) ε, t, c)‖²`
/// with `t` uniform in `1..=T` and fresh `ε` per sample.
pub fn train_base<S: Scalar>(
    data: &Dataset<S>,
    params: UNetParams<S>,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome<S>> {
    if data.is_empty() || data.images.len() != data.labels.len() {
        return Err(Error::Invalid("training set is empty or unlabeled".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let arch = params.arch.clone();
    let per = arch.in_channels * arch.resolution * arch.resolution;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        if img.numel() != per {
            return Err(shape_err("train_base", format!("image {:?} vs resolution {}", img.shape(), arch.resolution)));
        }
        if label >= arch.num_classes {
            return Err(Error::Invalid(format!("label {label} out of range")));
        }
    }
    let mut params = params;
    let mut losses = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(TrainOutcome { params, losses });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = params.weights().keys().cloned().collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        params.weights().values(),
    );
    let b = cfg.batch_size;
    let r = arch.resolution;
    for step in 0..cfg.steps {
        let mut x = Vec::with_capacity(b * per);
        let mut noise = Vec::with_capacity(b * per);
        let mut onehot = vec![S::zero(); b * arch.num_classes];
        let mut ts = Vec::with_capacity(b);
        for i in 0..b {
            let idx = rng.random_range(0..data.len());
            let t = rng.random_range(1..=sched.num_steps);
            let eps = Tensor::<S>::randn(data.images[idx].shape(), 1.0, &mut rng);
            let zt = q_sample(&data.images[idx], t, &eps, sched)?;
            x.extend_from_slice(zt.data());
            noise.extend_from_slice(eps.data());
            onehot[i * arch.num_classes + data.labels[idx]] = S::one();
            ts.push(t);
        }
        let mut g = Graph::new();
        let w = params.bind(&mut g, None, true)?;
        let xv = g.constant(Tensor::new(&[b, arch.in_channels, r, r], x)?);
        let target = g.constant(Tensor::new(&[b, arch.in_channels, r, r], noise)?);
        let oh = g.constant(Tensor::new(&[b, arch.num_classes], onehot)?);
        let cond = g.matmul(oh, w.get("cond.table")?, false, false)?;
        let pred = params.forward_graph(&mut g, &w, xv, &ts, cond, &AttnControl::default(), &mut AttnRecord::new())?;
        let loss = g.mse_loss(pred, target)?;
        let lv = g.value(loss).item()?.as_f64();
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        g.backward(loss)?;
        let mut grads: Vec<Tensor<S>> = names
            .iter()
            .map(|n| {
                let v = w.get(n)?;
                Ok(g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            })
            .collect::<Result<_>>()?;
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, cfg.grad_clip);
        }
        let mut ps: Vec<&mut Tensor<S>> = params.weights_mut().values_mut().collect();
        let gs: Vec<&Tensor<S>> = grads.iter().collect();
        opt.step(&mut ps, &gs)?;
        losses.push(lv);
        progress(step, lv);
    }
    Ok(TrainOutcome { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::ConditionSource;

    struct ConstNoise<S>(Tensor<S>);

    impl<S: Scalar> NoisePredictor<S> for ConstNoise<S> {
        fn predict(&self, _z: &Tensor<S>, _t: usize, _c: &ConditionVector<S>, _ctl: &AttnControl<S>) -> Result<(Tensor<S>, AttnRecord<S>)> {
            Ok((self.0.clone(), AttnRecord::new()))
        }
    }

    fn cond<S: Scalar>() -> ConditionVector<S> {
        ConditionVector {
            embedding: Tensor::zeros(&[4]),
            source: ConditionSource::Class(0),
        }
    }

    #[test]
    fn schedule_terminal_alpha_bar() {
        let s = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
        // oracle: direct product of (1 - β_t)
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        let got = s.alpha_bar(1000).unwrap();
        assert_eq!(got, prod);
        assert!((got - 4.04e-5).abs() < 1e-6, "{got}");
        assert_eq!(s.ddim_timesteps().len(), 50);
        assert_eq!(s.ddim_timesteps()[0], 20);
        assert_eq!(*s.ddim_timesteps().last().unwrap(), 1000);
    }

    #[test]
    fn schedule_edge_cases() {
        let s = make_schedule(1, 1e-4, 0.02, 1).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 1e-4);
        let s = make_schedule(10, 1e-4, 0.02, 10).unwrap();
        assert_eq!(s.ddim_timesteps(), (1..=10).collect::<Vec<_>>().as_slice());
        assert!(make_schedule(10, 0.02, 1e-4, 5).is_err());
        assert!(make_schedule(10, 1e-4, 0.02, 11).is_err());
        assert!(make_schedule(10, 0.0, 0.02, 5).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn q_sample_closed_forms() {
        let s = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let z0 = Tensor::<f64>::from_fn(&[4], |i| i as f64);
        let eps = Tensor::<f64>::from_fn(&[4], |i| -(i as f64));
        assert!(q_sample_with(&z0, 1.0, &eps).unwrap().bit_eq(&z0));
        assert_eq!(q_sample_with(&z0, 0.0, &eps).unwrap().max_abs_diff(&eps).unwrap(), 0.0);
        let half = q_sample_with(&Tensor::zeros(&[3]), 0.75, &Tensor::<f64>::ones(&[3])).unwrap();
        assert!(half.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(q_sample(&z0, 0, &eps, &s).is_err());
        assert!(q_sample(&z0, 1001, &eps, &s).is_err());
    }

    #[test]
    fn zero_predictor_telescopes() {
        for ddim in [50, 1] {
            let s = make_schedule(1000, 1e-4, 0.02, ddim).unwrap();
            let zt = Tensor::<f64>::from_fn(&[6], |i| (i as f64 * 0.9).sin());
            let net = ConstNoise(Tensor::zeros(&[6]));
            let z0 = ddim_denoise(&zt, &cond(), &net, &s).unwrap();
            let want = zt.scale(1.0 / s.alpha_bar(1000).unwrap().sqrt());
            assert!(z0.max_abs_diff(&want).unwrap() < 1e-9 * want.max_abs());
        }
    }

    #[test]
    fn constant_predictor_round_trip() {
        let s = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let x = Tensor::<f64>::from_fn(&[8], |i| (i as f64 * 0.4).cos() * 0.8);
        let net = ConstNoise(Tensor::from_fn(&[8], |i| (i as f64).sin()));
        let zt = ddim_invert(&x, &cond(), &net, &s).unwrap();
        let back = ddim_denoise(&zt, &cond(), &net, &s).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-9);

        let x32 = x.cast::<f32>();
        let net32 = ConstNoise(net.0.cast::<f32>());
        let back32 = ddim_denoise(&ddim_invert(&x32, &cond(), &net32, &s).unwrap(), &cond(), &net32, &s).unwrap();
        assert!(back32.max_abs_diff(&x32).unwrap() < 1e-4);
    }

    #[test]
    fn zero_latent_inverts_to_zero() {
        let s = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let net = ConstNoise(Tensor::<f32>::zeros(&[5]));
        let zt = ddim_invert(&Tensor::zeros(&[5]), &cond(), &net, &s).unwrap();
        assert!(zt.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let s = make_schedule(100, 1e-4, 0.02, 10).unwrap();
        let net = ConstNoise(Tensor::<f32>::zeros(&[2]));
        let bad = Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(ddim_denoise(&bad, &cond(), &net, &s), Err(Error::NonFinite(_))));
        assert!(matches!(ddim_invert(&bad, &cond(), &net, &s), Err(Error::NonFinite(_))));
    }
}
