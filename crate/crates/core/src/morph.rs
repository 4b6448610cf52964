//! The morphing pipeline: per-image adapters, inversion, endpoint attention
//! capture, and frame generation with interpolated noise, condition, adapter
//! and key/value injection.

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_invert, ddim_sample, AttnController, DiffusionSchedule, StepPlan};
use crate::error::{shape_err, Error, Result};
use crate::lora::{apply_lora, fit_lora, interp_lora_factors, interp_residuals, EffectiveResiduals, LoraConfig, LoraDelta};
use crate::metrics::{adjacent_distances, reschedule, DistanceProfile, MultiScaleRms};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{AttnOverride, AttnRecord, ConditionSource, ConditionVector, KeyValue, UNetParams};

/// Channels with a standard deviation at or below this are rejected by AdaIN.
pub const ADAIN_EPS: f64 = 1e-5;

/// Below this angle (or this close to π) slerp degrades to lerp.
pub const SLERP_MIN_ANGLE: f64 = 1e-4;

/// Where AdaIN is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdainStage {
    /// Statistics of the inverted noises, applied to the slerped noise.
    #[default]
    InitialNoise,
    /// Statistics of the reconstructed endpoints, applied to the denoised latent.
    FinalLatent,
}

impl std::str::FromStr for AdainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial-noise" => Ok(AdainStage::InitialNoise),
            "final-latent" => Ok(AdainStage::FinalLatent),
            other => Err(Error::Config(format!("unknown AdaIN stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphConfig {
    /// Frame intervals; the sequence has `n + 1` frames.
    pub n: usize,
    /// Fraction of the earliest denoising steps that receive injected keys and values.
    pub lambda: f64,
    pub adain: bool,
    pub adain_stage: AdainStage,
    pub reschedule: bool,
    pub seed: u64,
    pub ddim_steps: usize,
    /// Also inject at the mid-block attention.
    pub inject_mid: bool,
    /// Interpolate adapter factors instead of their products.
    pub factor_interp: bool,
}

impl Default for MorphConfig {
    fn default() -> Self {
        MorphConfig {
            n: 16,
            lambda: 0.6,
            adain: true,
            adain_stage: AdainStage::InitialNoise,
            reschedule: true,
            seed: 0,
            ddim_steps: 50,
            inject_mid: false,
            factor_interp: false,
        }
    }
}

impl MorphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.ddim_steps == 0 {
            return Err(Error::Config("ddim_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of steps in the injection window: `⌈λ·S⌉`.
pub fn injection_steps(lambda: f64, steps: usize) -> usize {
    // absorb representation error such as 0.6 * 50 = 30.000000000000004
    let raw = (lambda * steps as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(steps)
}

/// Spherical interpolation of flattened tensors; lerp for (anti)parallel inputs.
pub fn slerp<S: Scalar>(za: &Tensor<S>, zb: &Tensor<S>, alpha: f64) -> Result<Tensor<S>> {
    za.expect_same_shape(zb, "slerp")?;
    let na = za.norm().as_f64();
    let nb = zb.norm().as_f64();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("slerp of a zero-norm tensor".into()));
    }
    if alpha == 0.0 {
        return Ok(za.clone());
    }
    if alpha == 1.0 {
        return Ok(zb.clone());
    }
    let dot: f64 = za.data().iter().zip(zb.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    let phi = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    if !(SLERP_MIN_ANGLE..=std::f64::consts::PI - SLERP_MIN_ANGLE).contains(&phi) {
        return za.lerp(zb, S::of(alpha));
    }
    let s = phi.sin();
    let wa = S::of(((1.0 - alpha) * phi).sin() / s);
    let wb = S::of((alpha * phi).sin() / s);
    za.zip_with(zb, "slerp", |a, b| wa * a + wb * b)
}

/// `(1−α)·c0 + α·c1`.
pub fn lerp_condition<S: Scalar>(c0: &ConditionVector<S>, c1: &ConditionVector<S>, alpha: f64) -> Result<ConditionVector<S>> {
    if c0.embedding.shape() != c1.embedding.shape() {
        return Err(shape_err(
            "lerp_condition",
            format!("{:?} vs {:?}", c0.embedding.shape(), c1.embedding.shape()),
        ));
    }
    if alpha == 0.0 {
        return Ok(c0.clone());
    }
    if alpha == 1.0 {
        return Ok(c1.clone());
    }
    Ok(ConditionVector {
        embedding: c0.embedding.lerp(&c1.embedding, S::of(alpha))?,
        source: ConditionSource::Interpolated {
            from: Box::new(c0.source.clone()),
            to: Box::new(c1.source.clone()),
            alpha,
        },
    })
}

/// `[C, H, W]` or `[1, C, H, W]` as (channels, pixels per channel).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, h * w)),
        [1, c, h, w] => Ok((*c, h * w)),
        _ => Err(shape_err("channel_stats", format!("expected [C,H,W] or [1,C,H,W], got {shape:?}"))),
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn of<S: Scalar>(z: &Tensor<S>) -> Result<Self> {
        let (c, inner) = channel_layout(z.shape())?;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in z.data().chunks(inner).take(c) {
            let mu = ch.iter().map(|v| v.as_f64()).sum::<f64>() / inner as f64;
            let var = ch.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / inner as f64;
            mean.push(mu);
            std.push(var.sqrt());
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Renormalize each channel of `z` to `μ_α = (1−α)μ0 + αμ1`, `σ_α = (1−α)σ0 + ασ1`.
pub fn adain_adjust<S: Scalar>(z: &Tensor<S>, s0: &ChannelStats, s1: &ChannelStats, alpha: f64) -> Result<Tensor<S>> {
    let own = ChannelStats::of(z)?;
    let c = own.channels();
    if s0.channels() != c || s1.channels() != c {
        return Err(shape_err(
            "adain_adjust",
            format!("latent has {c} channels, targets {} and {}", s0.channels(), s1.channels()),
        ));
    }
    let inner = z.numel() / c;
    let mut out = Vec::with_capacity(z.numel());
    for (ch, block) in z.data().chunks(inner).enumerate() {
        if own.std[ch] <= ADAIN_EPS {
            return Err(Error::Invalid(format!("channel {ch} has zero variance")));
        }
        let mu = (1.0 - alpha) * s0.mean[ch] + alpha * s1.mean[ch];
        let sd = (1.0 - alpha) * s0.std[ch] + alpha * s1.std[ch];
        let gain = sd / own.std[ch];
        out.extend(block.iter().map(|v| S::of(gain * (v.as_f64() - own.mean[ch]) + mu)));
    }
    Tensor::new(z.shape(), out)
}

/// `((1−α)K0 + αK1, (1−α)V0 + αV1)`.
pub fn interp_attention<S: Scalar>(
    k0: &Tensor<S>,
    v0: &Tensor<S>,
    k1: &Tensor<S>,
    v1: &Tensor<S>,
    alpha: f64,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let a = S::of(alpha);
    Ok((k0.lerp(k1, a)?, v0.lerp(v1, a)?))
}

/// Keys/values of both endpoint denoising runs at every step and injectable
/// layer, plus the latents each step consumed and the final latents.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnCache<S> {
    /// Timesteps in denoising order.
    pub timesteps: Vec<usize>,
    pub layers: Vec<String>,
    pub records: [Vec<AttnOverride<S>>; 2],
    /// `S + 1` latents per endpoint: each step's input, then `z_0`.
    pub trajectories: [Vec<Tensor<S>>; 2],
}

impl<S: Scalar> AttnCache<S> {
    pub fn final_latent(&self, endpoint: usize) -> &Tensor<S> {
        self.trajectories[endpoint].last().expect("trajectory holds at least z_0")
    }

    /// Number of stored (step, layer) entries of one endpoint.
    pub fn entries(&self, endpoint: usize) -> usize {
        self.records[endpoint].iter().map(|r| r.len()).sum()
    }

    pub fn check_against(&self, sched: &DiffusionSchedule) -> Result<()> {
        let want: Vec<usize> = sched.denoise_pairs().iter().map(|p| p.0).collect();
        if want != self.timesteps {
            return Err(Error::Invalid(format!(
                "attention cache covers {} steps, schedule has {}",
                self.timesteps.len(),
                want.len()
            )));
        }
        for e in 0..2 {
            if self.records[e].len() != want.len() || self.trajectories[e].len() != want.len() + 1 {
                return Err(Error::Invalid(format!("attention cache for endpoint {e} is incomplete")));
            }
            for rec in &self.records[e] {
                if rec.len() != self.layers.len() || !self.layers.iter().all(|l| rec.contains_key(l)) {
                    return Err(Error::Invalid(format!("attention cache for endpoint {e} misses a layer")));
                }
            }
        }
        Ok(())
    }
}

struct CaptureController<'l, S> {
    layers: &'l [String],
    records: Vec<AttnOverride<S>>,
    trajectory: Vec<Tensor<S>>,
}

impl<S: Scalar> AttnController<S> for CaptureController<'_, S> {
    fn plan(&mut self, _step: usize, _t: usize) -> Result<StepPlan<S>> {
        Ok(StepPlan { overrides: None, record: true })
    }

    fn observe(&mut self, _step: usize, t: usize, z_t: &Tensor<S>, mut record: AttnRecord<S>) -> Result<()> {
        let mut kept = AttnOverride::new();
        for name in self.layers {
            let kv = record
                .remove(name)
                .ok_or_else(|| Error::Invalid(format!("layer {name} was not recorded at t={t}")))?;
            kept.insert(name.clone(), kv);
        }
        self.records.push(kept);
        self.trajectory.push(z_t.clone());
        Ok(())
    }
}

/// Denoise both inverted noises with their own adapters and conditions,
/// recording keys/values at every injectable layer and step.
pub fn capture_endpoint_trajectories<S: Scalar>(
    z_t: [&Tensor<S>; 2],
    conds: [&ConditionVector<S>; 2],
    residuals: [&EffectiveResiduals<S>; 2],
    base: &UNetParams<S>,
    sched: &DiffusionSchedule,
    include_mid: bool,
) -> Result<AttnCache<S>> {
    let layers: Vec<String> = base.arch.injectable_layers(include_mid).into_iter().map(|l| l.name).collect();
    let mut records: [Vec<AttnOverride<S>>; 2] = Default::default();
    let mut trajectories: [Vec<Tensor<S>>; 2] = Default::default();
    for e in 0..2 {
        let net = apply_lora(base, residuals[e])?;
        let mut ctl = CaptureController {
            layers: &layers,
            records: Vec::with_capacity(sched.ddim_len()),
            trajectory: Vec::with_capacity(sched.ddim_len() + 1),
        };
        let out = ddim_sample(z_t[e], conds[e], &net, sched, Some(&mut ctl))?;
        ctl.trajectory.push(out.z);
        records[e] = ctl.records;
        trajectories[e] = ctl.trajectory;
    }
    Ok(AttnCache {
        timesteps: sched.denoise_pairs().iter().map(|p| p.0).collect(),
        layers,
        records,
        trajectories,
    })
}

/// Overrides the first `window` steps with interpolated endpoint keys/values.
pub struct InjectionController<'c, S> {
    cache: &'c AttnCache<S>,
    alpha: f64,
    window: usize,
    consultations: usize,
}

impl<'c, S: Scalar> InjectionController<'c, S> {
    pub fn new(cache: &'c AttnCache<S>, alpha: f64, lambda: f64) -> Self {
        InjectionController {
            cache,
            alpha,
            window: injection_steps(lambda, cache.timesteps.len()),
            consultations: 0,
        }
    }

    /// (step, layer) overrides handed out so far.
    pub fn consultations(&self) -> usize {
        self.consultations
    }
}

impl<S: Scalar> AttnController<S> for InjectionController<'_, S> {
    fn plan(&mut self, step: usize, t: usize) -> Result<StepPlan<S>> {
        if self.cache.timesteps.get(step) != Some(&t) {
            return Err(Error::Invalid(format!("attention cache has no entry for step {step} (t={t})")));
        }
        if step >= self.window {
            return Ok(StepPlan::none());
        }
        let (r0, r1) = (&self.cache.records[0][step], &self.cache.records[1][step]);
        let mut overrides = AttnOverride::new();
        for name in &self.cache.layers {
            let (a, b) = (&r0[name], &r1[name]);
            let (k, v) = interp_attention(&a.k, &a.v, &b.k, &b.v, self.alpha)?;
            overrides.insert(name.clone(), KeyValue { k, v });
            self.consultations += 1;
        }
        Ok(StepPlan { overrides: Some(overrides), record: false })
    }
}

/// Everything a frame needs from the two endpoints.
#[derive(Clone, Debug)]
pub struct MorphEndpoints<S> {
    pub z_t: [Tensor<S>; 2],
    pub conds: [ConditionVector<S>; 2],
    pub deltas: [LoraDelta<S>; 2],
    pub residuals: [EffectiveResiduals<S>; 2],
    /// Statistics for the configured AdaIN stage.
    pub stats: [ChannelStats; 2],
}

/// One generated frame.
#[derive(Clone, Debug)]
pub struct GeneratedFrame<S> {
    /// Decoded image in `[-1, 1]`.
    pub image: Tensor<S>,
    /// Denoised latent before decoding.
    pub latent: Tensor<S>,
    /// (step, layer) key/value overrides applied.
    pub injected: usize,
}

/// Clamp a pixel-space latent to the image range.
pub fn decode<S: Scalar>(z: &Tensor<S>) -> Tensor<S> {
    z.map(|v| v.max(-S::one()).min(S::one()))
}

/// Generate the frame at ratio `alpha`. At `α ∈ {0, 1}` every interpolant is
/// the endpoint itself, so AdaIN (whose target is then the endpoint's own
/// statistics) is skipped and the frame equals the endpoint reconstruction.
pub fn generate_frame<S: Scalar>(
    alpha: f64,
    cache: &AttnCache<S>,
    ep: &MorphEndpoints<S>,
    cfg: &MorphConfig,
    base: &UNetParams<S>,
    sched: &DiffusionSchedule,
) -> Result<GeneratedFrame<S>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("interpolation ratio {alpha} outside [0, 1]")));
    }
    cache.check_against(sched)?;
    let interior = alpha > 0.0 && alpha < 1.0;
    let mut z = slerp(&ep.z_t[0], &ep.z_t[1], alpha)?;
    if cfg.adain && interior && cfg.adain_stage == AdainStage::InitialNoise {
        z = adain_adjust(&z, &ep.stats[0], &ep.stats[1], alpha)?;
    }
    let residuals = if cfg.factor_interp {
        interp_lora_factors(&ep.deltas[0], &ep.deltas[1], alpha)?
    } else {
        interp_residuals(&ep.residuals[0], &ep.residuals[1], alpha)?
    };
    let cond = lerp_condition(&ep.conds[0], &ep.conds[1], alpha)?;
    let net = apply_lora(base, &residuals)?;
    let mut ctl = InjectionController::new(cache, alpha, cfg.lambda);
    let mut latent = ddim_sample(&z, &cond, &net, sched, Some(&mut ctl))?.z;
    if cfg.adain && interior && cfg.adain_stage == AdainStage::FinalLatent {
        latent = adain_adjust(&latent, &ep.stats[0], &ep.stats[1], alpha)?;
    }
    Ok(GeneratedFrame {
        image: decode(&latent),
        latent,
        injected: ctl.consultations(),
    })
}

/// One input image with its class and an optional pre-fitted adapter.
#[derive(Clone, Copy)]
pub struct EndpointInput<'a, S> {
    pub image: &'a Tensor<S>,
    pub class: usize,
    pub lora: Option<&'a LoraDelta<S>>,
}

/// Prepared endpoints and caches, shared read-only by all frames.
pub struct MorphSession<'a, S> {
    pub base: &'a UNetParams<S>,
    pub sched: &'a DiffusionSchedule,
    pub cfg: MorphConfig,
    pub endpoints: MorphEndpoints<S>,
    pub cache: AttnCache<S>,
}

impl<'a, S: Scalar> MorphSession<'a, S> {
    /// Fit (or take) both adapters, invert both images, capture the endpoint
    /// trajectories and collect AdaIN statistics.
    pub fn prepare(
        inputs: [EndpointInput<'_, S>; 2],
        base: &'a UNetParams<S>,
        sched: &'a DiffusionSchedule,
        cfg: &MorphConfig,
        lora_cfg: &LoraConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.ddim_steps != sched.ddim_len() {
            return Err(Error::Config(format!(
                "morph asks for {} DDIM steps, schedule has {}",
                cfg.ddim_steps,
                sched.ddim_len()
            )));
        }
        let arch = &base.arch;
        let want = [arch.in_channels, arch.resolution, arch.resolution];
        let mut prepared = Vec::with_capacity(2);
        for (i, input) in inputs.iter().enumerate() {
            let image = match input.image.shape() {
                [1, c, h, w] => input.image.reshape(&[*c, *h, *w])?,
                _ => input.image.clone(),
            };
            if image.shape() != want {
                return Err(shape_err("morph", format!("image {i} is {:?}, model expects {want:?}", image.shape())));
            }
            let cond = base.condition_embed(input.class)?;
            let delta = match input.lora {
                Some(d) => d.clone(),
                None => {
                    let lc = LoraConfig {
                        seed: endpoint_seed(cfg.seed, i),
                        ..lora_cfg.clone()
                    };
                    fit_lora(&image, &cond, base, sched, &lc)?.delta
                }
            };
            let residuals = delta.residuals();
            let z_t = ddim_invert(&image, &cond, &apply_lora(base, &residuals)?, sched)?;
            prepared.push((z_t, cond, delta, residuals));
        }
        let (z1, c1, d1, r1) = prepared.pop().expect("two endpoints");
        let (z0, c0, d0, r0) = prepared.pop().expect("two endpoints");
        let cache = capture_endpoint_trajectories([&z0, &z1], [&c0, &c1], [&r0, &r1], base, sched, cfg.inject_mid)?;
        let stats = match cfg.adain_stage {
            AdainStage::InitialNoise => [ChannelStats::of(&z0)?, ChannelStats::of(&z1)?],
            AdainStage::FinalLatent => [ChannelStats::of(cache.final_latent(0))?, ChannelStats::of(cache.final_latent(1))?],
        };
        Ok(MorphSession {
            base,
            sched,
            cfg: cfg.clone(),
            endpoints: MorphEndpoints {
                z_t: [z0, z1],
                conds: [c0, c1],
                deltas: [d0, d1],
                residuals: [r0, r1],
                stats,
            },
            cache,
        })
    }

    pub fn frame(&self, alpha: f64) -> Result<GeneratedFrame<S>> {
        generate_frame(alpha, &self.cache, &self.endpoints, &self.cfg, self.base, self.sched)
    }

    /// Frames for several ratios, spread over the available cores.
    pub fn frames(&self, alphas: &[f64]) -> Result<Vec<GeneratedFrame<S>>> {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(alphas.len().max(1));
        if workers <= 1 {
            return alphas.iter().map(|&a| self.frame(a)).collect();
        }
        let chunk = alphas.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = alphas
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&a| self.frame(a)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(alphas.len());
            for h in handles {
                out.extend(h.join().map_err(|_| Error::Invalid("frame worker panicked".into()))??);
            }
            Ok(out)
        })
    }

    /// Decoded reconstruction of an endpoint from the capture run.
    pub fn reconstruction(&self, endpoint: usize) -> Tensor<S> {
        decode(self.cache.final_latent(endpoint))
    }
}

fn endpoint_seed(seed: u64, endpoint: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(endpoint as u64 + 1)
}

/// Generated morph and its bookkeeping.
#[derive(Clone, Debug)]
pub struct FrameSequence<S> {
    pub frames: Vec<Tensor<S>>,
    pub alphas: Vec<f64>,
    pub config: MorphConfig,
    /// Adjacent distances of `frames`.
    pub distances: Vec<f64>,
    /// Adjacent distances of the uniform pass (equal to `distances` without reschedule).
    pub uniform_distances: Vec<f64>,
}

/// Uniform ratios `i/n`.
pub fn uniform_alphas(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Full morph between two images.
pub fn morph<S: Scalar>(
    inputs: [EndpointInput<'_, S>; 2],
    base: &UNetParams<S>,
    sched: &DiffusionSchedule,
    cfg: &MorphConfig,
    lora_cfg: &LoraConfig,
) -> Result<FrameSequence<S>> {
    let session = MorphSession::prepare(inputs, base, sched, cfg, lora_cfg)?;
    morph_with(&session)
}

/// Frame generation (and optional reschedule) on a prepared session.
pub fn morph_with<S: Scalar>(session: &MorphSession<'_, S>) -> Result<FrameSequence<S>> {
    let cfg = &session.cfg;
    let uniform = uniform_alphas(cfg.n);
    let mut frames: Vec<Tensor<S>> = session.frames(&uniform)?.into_iter().map(|f| f.image).collect();
    let uniform_distances = adjacent_distances(&frames, &MultiScaleRms)?;
    let mut alphas = uniform;
    let mut distances = uniform_distances.clone();
    if cfg.reschedule {
        let profile = DistanceProfile::new(uniform_distances.clone())?;
        // identical frames have nothing to even out
        if profile.total() > 0.0 {
            alphas = reschedule(&profile)?;
            let inner = session.frames(&alphas[1..cfg.n])?;
            let last = frames.pop().expect("n + 1 frames");
            frames.truncate(1);
            frames.extend(inner.into_iter().map(|f| f.image));
            frames.push(last);
            distances = adjacent_distances(&frames, &MultiScaleRms)?;
        }
    }
    Ok(FrameSequence {
        frames,
        alphas,
        config: cfg.clone(),
        distances,
        uniform_distances,
    })
}
