//! UNet noise predictor with residual blocks, self-attention at low
//! resolutions, sinusoidal timestep embedding and a learned class embedding.
//!
//! Attention is single-head with `d_k` equal to the channel count. Keys and
//! values are kept token-major (`[tokens, channels]`), which is also the
//! layout of [`AttnRecord`] entries and of injected overrides.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::lora::EffectiveResiduals;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape of the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetArch {
    pub in_channels: usize,
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    /// Spatial sizes at which self-attention runs.
    pub attn_resolutions: Vec<usize>,
    pub n_res_blocks: usize,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
    /// Condition embedding width `d_c`.
    pub cond_dim: usize,
    pub num_classes: usize,
    /// Upper bound on group-norm groups (the actual count divides the channels).
    pub max_groups: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        UNetArch {
            in_channels: 1,
            resolution: 32,
            base_channels: 32,
            channel_mult: vec![1, 2, 4],
            attn_resolutions: vec![16, 8],
            n_res_blocks: 1,
            time_dim: 64,
            cond_dim: 64,
            num_classes: 3,
            max_groups: 8,
        }
    }
}

/// Where an attention layer sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockPosition {
    Down,
    Mid,
    Up,
}

/// A self-attention layer of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayer {
    pub name: String,
    pub position: BlockPosition,
    pub channels: usize,
    pub tokens: usize,
}

/// Key and value matrices of one attention layer, each `[tokens, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyValue<S> {
    pub k: Tensor<S>,
    pub v: Tensor<S>,
}

/// Keys and values computed by one forward pass, per attention layer.
pub type AttnRecord<S> = BTreeMap<String, KeyValue<S>>;

/// Per-layer replacement keys and values.
pub type AttnOverride<S> = BTreeMap<String, KeyValue<S>>;

/// Origin of a condition vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConditionSource {
    Class(usize),
    Interpolated { from: Box<ConditionSource>, to: Box<ConditionSource>, alpha: f64 },
}

/// Condition embedding fed to the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector<S> {
    pub embedding: Tensor<S>,
    pub source: ConditionSource,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl UNetArch {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 || self.base_channels == 0 || self.in_channels == 0 || self.n_res_blocks == 0 {
            return Err(Error::Invalid("architecture has an empty dimension".into()));
        }
        if !self.resolution.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::Invalid(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution,
                levels - 1
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Invalid(format!("time_dim {} must be even", self.time_dim)));
        }
        if self.num_classes == 0 || self.cond_dim == 0 {
            return Err(Error::Invalid("condition embedding needs classes and width".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.resolution >> level
    }

    fn has_attn(&self, level: usize) -> bool {
        self.attn_resolutions.contains(&self.level_resolution(level))
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        gcd(self.max_groups.max(1), channels)
    }

    fn last_level(&self) -> usize {
        self.channel_mult.len() - 1
    }

    /// Every attention layer in execution order.
    pub fn attn_layers(&self) -> Vec<AttnLayer> {
        let mut out = Vec::new();
        let mk = |name: String, position, level: usize| {
            let r = self.level_resolution(level);
            AttnLayer {
                name,
                position,
                channels: self.channels(level),
                tokens: r * r,
            }
        };
        for l in 0..self.channel_mult.len() {
            if self.has_attn(l) {
                for i in 0..self.n_res_blocks {
                    out.push(mk(format!("down.{l}.attn.{i}"), BlockPosition::Down, l));
                }
            }
        }
        out.push(mk("mid.attn".into(), BlockPosition::Mid, self.last_level()));
        for l in (0..self.channel_mult.len()).rev() {
            if self.has_attn(l) {
                for i in 0..self.n_res_blocks {
                    out.push(mk(format!("up.{l}.attn.{i}"), BlockPosition::Up, l));
                }
            }
        }
        out
    }

    /// Layers that accept key/value injection: upsampling-block attention,
    /// plus the mid block when `include_mid` is set.
    pub fn injectable_layers(&self, include_mid: bool) -> Vec<AttnLayer> {
        self.attn_layers()
            .into_iter()
            .filter(|l| l.position == BlockPosition::Up || (include_mid && l.position == BlockPosition::Mid))
            .collect()
    }

    /// Names of the attention projection weights (`to_q`, `to_k`, `to_v`).
    pub fn qkv_weight_names(&self) -> Vec<String> {
        self.attn_layers()
            .iter()
            .flat_map(|l| ["to_q", "to_k", "to_v"].map(|p| format!("{}.{p}", l.name)))
            .collect()
    }

    /// Weight names and shapes with their initialization rule.
    fn weight_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut specs = Vec::new();
        let td = self.time_dim;
        let dc = self.cond_dim;
        specs.push(("cond.table".into(), vec![self.num_classes, dc], Init::Normal(1.0)));
        linear(&mut specs, "time.lin1", td, dc);
        linear(&mut specs, "time.lin2", dc, dc);
        conv(&mut specs, "conv_in", self.in_channels, self.channels(0));

        let mut ch = self.channels(0);
        let mut skip_ch = Vec::new();
        for l in 0..self.channel_mult.len() {
            let out = self.channels(l);
            for i in 0..self.n_res_blocks {
                res_block(&mut specs, &format!("down.{l}.res.{i}"), ch, out, dc);
                ch = out;
                if self.has_attn(l) {
                    attn(&mut specs, &format!("down.{l}.attn.{i}"), ch);
                }
            }
            skip_ch.push(ch);
        }
        res_block(&mut specs, "mid.res.0", ch, ch, dc);
        attn(&mut specs, "mid.attn", ch);
        res_block(&mut specs, "mid.res.1", ch, ch, dc);
        for l in (0..self.channel_mult.len()).rev() {
            let out = self.channels(l);
            for i in 0..self.n_res_blocks {
                let cin = if i == 0 { ch + skip_ch[l] } else { ch };
                res_block(&mut specs, &format!("up.{l}.res.{i}"), cin, out, dc);
                ch = out;
                if self.has_attn(l) {
                    attn(&mut specs, &format!("up.{l}.attn.{i}"), ch);
                }
            }
        }
        norm(&mut specs, "out.norm", ch);
        specs.push(("out.conv.w".into(), vec![self.in_channels, ch, 3, 3], Init::Zeros));
        specs.push(("out.conv.b".into(), vec![self.in_channels], Init::Zeros));
        specs
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    TruncNormal(f64),
}

fn linear(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, din: usize, dout: usize) {
    let std = 1.0 / (din as f64).sqrt();
    specs.push((format!("{name}.w"), vec![dout, din], Init::Normal(std)));
    specs.push((format!("{name}.b"), vec![dout], Init::Zeros));
}

fn conv(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, cin: usize, cout: usize) {
    let std = (1.0 / (cin * 9) as f64).sqrt();
    specs.push((format!("{name}.w"), vec![cout, cin, 3, 3], Init::Normal(std)));
    specs.push((format!("{name}.b"), vec![cout], Init::Zeros));
}

fn norm(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, ch: usize) {
    specs.push((format!("{name}.gamma"), vec![ch], Init::Ones));
    specs.push((format!("{name}.beta"), vec![ch], Init::Zeros));
}

fn res_block(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, cin: usize, cout: usize, dc: usize) {
    norm(specs, &format!("{name}.norm1"), cin);
    conv(specs, &format!("{name}.conv1"), cin, cout);
    linear(specs, &format!("{name}.emb"), dc, cout);
    norm(specs, &format!("{name}.norm2"), cout);
    conv(specs, &format!("{name}.conv2"), cout, cout);
    if cin != cout {
        let std = 1.0 / (cin as f64).sqrt();
        specs.push((format!("{name}.skip"), vec![cout, cin], Init::Normal(std)));
    }
}

fn attn(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, ch: usize) {
    norm(specs, &format!("{name}.norm"), ch);
    for p in ["to_q", "to_k", "to_v", "to_out"] {
        specs.push((format!("{name}.{p}"), vec![ch, ch], Init::TruncNormal(0.02)));
    }
    specs.push((format!("{name}.to_out.b"), vec![ch], Init::Zeros));
}

/// Sinusoidal embedding of an integer timestep: `[sin(t·f_i)…, cos(t·f_i)…]`
/// with `f_i = 10000^(-i/half)`.
pub fn timestep_embed<S: Scalar>(t: usize, dim: usize) -> Result<Tensor<S>> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::Invalid(format!("timestep embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut data = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[i] = S::of(arg.sin());
        data[half + i] = S::of(arg.cos());
    }
    Tensor::new(&[dim], data)
}

/// Named weights of the denoiser together with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams<S> {
    pub arch: UNetArch,
    weights: BTreeMap<String, Tensor<S>>,
}

/// Graph handles for every weight of a network.
pub struct BoundWeights {
    vars: BTreeMap<String, Var>,
}

impl BoundWeights {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName(format!("weight {name}")))
    }

    pub fn insert(&mut self, name: String, v: Var) {
        self.vars.insert(name, v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Attention interventions for one forward pass.
pub struct AttnControl<'a, S> {
    pub overrides: Option<&'a AttnOverride<S>>,
    pub record: bool,
}

impl<S> Default for AttnControl<'_, S> {
    fn default() -> Self {
        AttnControl {
            overrides: None,
            record: false,
        }
    }
}

impl<S: Scalar> UNetParams<S> {
    /// Freshly initialized network.
    pub fn init(arch: UNetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        for (name, shape, init) in arch.weight_specs() {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
                Init::TruncNormal(std) => Tensor::trunc_normal(&shape, std, &mut rng),
            };
            weights.insert(name, t);
        }
        Ok(UNetParams { arch, weights })
    }

    /// Rebuild from stored tensors, checking names and shapes against `arch`.
    pub fn from_weights(arch: UNetArch, mut weights: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        arch.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape, _) in arch.weight_specs() {
            let t = weights
                .remove(&name)
                .ok_or_else(|| Error::UnknownName(format!("missing weight {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err("from_weights", format!("{name}: {:?} vs {shape:?}", t.shape())));
            }
            out.insert(name, t);
        }
        if let Some(extra) = weights.keys().next() {
            return Err(Error::UnknownName(format!("unexpected weight {extra}")));
        }
        Ok(UNetParams { arch, weights: out })
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<S>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::UnknownName(format!("weight {name}")))
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.weights
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> UNetParams<T> {
        UNetParams {
            arch: self.arch.clone(),
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Learned embedding row of `class_id`.
    pub fn condition_embed(&self, class_id: usize) -> Result<ConditionVector<S>> {
        if class_id >= self.arch.num_classes {
            return Err(Error::Invalid(format!(
                "class {class_id} out of range (network has {} classes)",
                self.arch.num_classes
            )));
        }
        let table = self.weight("cond.table")?;
        let dc = self.arch.cond_dim;
        let row = table.data()[class_id * dc..(class_id + 1) * dc].to_vec();
        Ok(ConditionVector {
            embedding: Tensor::new(&[dc], row)?,
            source: ConditionSource::Class(class_id),
        })
    }

    /// Insert every weight as a graph leaf, adding `residuals` where given.
    pub fn bind(
        &self,
        g: &mut Graph<S>,
        residuals: Option<&EffectiveResiduals<S>>,
        requires_grad: bool,
    ) -> Result<BoundWeights> {
        if let Some(r) = residuals {
            for name in r.names() {
                if !self.weights.contains_key(name) {
                    return Err(Error::UnknownName(format!("residual for {name}")));
                }
            }
        }
        let mut vars = BTreeMap::new();
        for (name, w) in &self.weights {
            let value = match residuals.and_then(|r| r.get(name)) {
                Some(delta) => w.add(delta)?,
                None => w.clone(),
            };
            vars.insert(name.clone(), g.leaf(value, requires_grad));
        }
        Ok(BoundWeights { vars })
    }

    /// Batched forward pass on `x [B, C, H, W]` with timesteps `t` and
    /// conditions `cond [B, d_c]`, returning the noise prediction.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        w: &BoundWeights,
        x: Var,
        t: &[usize],
        cond: Var,
        ctl: &AttnControl<S>,
        record: &mut AttnRecord<S>,
    ) -> Result<Var> {
        let arch = &self.arch;
        let xs = g.shape(x).to_vec();
        let batch = xs[0];
        if xs.len() != 4
            || xs[1] != arch.in_channels
            || xs[2] != arch.resolution
            || xs[3] != arch.resolution
        {
            return Err(shape_err(
                "unet_forward",
                format!(
                    "input {xs:?}, network expects [B, {}, {r}, {r}]",
                    arch.in_channels,
                    r = arch.resolution
                ),
            ));
        }
        if t.len() != batch || g.shape(cond) != [batch, arch.cond_dim] {
            return Err(shape_err(
                "unet_forward",
                format!("{} timesteps and condition {:?} for batch {batch}", t.len(), g.shape(cond)),
            ));
        }
        if (ctl.record || ctl.overrides.is_some()) && batch != 1 {
            return Err(Error::Invalid("attention record/override needs batch size 1".into()));
        }
        if let Some(ov) = ctl.overrides {
            let known: BTreeSet<String> = arch.attn_layers().into_iter().map(|l| l.name).collect();
            for name in ov.keys() {
                if !known.contains(name) {
                    return Err(Error::UnknownName(format!("attention layer {name}")));
                }
                if name.starts_with("down.") {
                    return Err(Error::Invalid(format!(
                        "attention override on downsampling layer {name}"
                    )));
                }
            }
        }

        // timestep + condition embedding
        let mut temb = Vec::with_capacity(batch * arch.time_dim);
        for &ti in t {
            temb.extend_from_slice(timestep_embed::<S>(ti, arch.time_dim)?.data());
        }
        let temb = g.constant(Tensor::new(&[batch, arch.time_dim], temb)?);
        let e = self.linear(g, w, temb, "time.lin1")?;
        let e = g.add(e, cond)?;
        let e = g.silu(e)?;
        let e = self.linear(g, w, e, "time.lin2")?;
        let emb = g.silu(e)?;

        let mut h = g.conv2d(x, w.get("conv_in.w")?, w.get("conv_in.b")?)?;
        let mut skips = Vec::new();
        let last = arch.last_level();
        for l in 0..=last {
            for i in 0..arch.n_res_blocks {
                h = self.res_block(g, w, h, emb, &format!("down.{l}.res.{i}"))?;
                if arch.has_attn(l) {
                    h = self.attention(g, w, h, &format!("down.{l}.attn.{i}"), ctl, record)?;
                }
            }
            skips.push(h);
            if l != last {
                h = g.avgpool2(h)?;
            }
        }
        h = self.res_block(g, w, h, emb, "mid.res.0")?;
        h = self.attention(g, w, h, "mid.attn", ctl, record)?;
        h = self.res_block(g, w, h, emb, "mid.res.1")?;
        for l in (0..=last).rev() {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip], 1)?;
            for i in 0..arch.n_res_blocks {
                h = self.res_block(g, w, h, emb, &format!("up.{l}.res.{i}"))?;
                if arch.has_attn(l) {
                    h = self.attention(g, w, h, &format!("up.{l}.attn.{i}"), ctl, record)?;
                }
            }
            if l != 0 {
                h = g.upsample2(h)?;
            }
        }
        h = self.norm(g, w, h, "out.norm")?;
        h = g.silu(h)?;
        g.conv2d(h, w.get("out.conv.w")?, w.get("out.conv.b")?)
    }

    /// `x·Wᵀ + b` for `x [B, in]`.
    fn linear(&self, g: &mut Graph<S>, w: &BoundWeights, x: Var, name: &str) -> Result<Var> {
        let y = g.matmul(x, w.get(&format!("{name}.w"))?, false, true)?;
        let b = w.get(&format!("{name}.b"))?;
        let n = g.shape(b)[0];
        let b = g.reshape(b, &[1, n])?;
        g.add(y, b)
    }

    fn norm(&self, g: &mut Graph<S>, w: &BoundWeights, x: Var, name: &str) -> Result<Var> {
        let groups = self.arch.groups_for(g.shape(x)[1]);
        g.group_norm(
            x,
            w.get(&format!("{name}.gamma"))?,
            w.get(&format!("{name}.beta"))?,
            groups,
        )
    }

    fn res_block(&self, g: &mut Graph<S>, w: &BoundWeights, x: Var, emb: Var, name: &str) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let (b, cin, hh, ww) = (xs[0], xs[1], xs[2], xs[3]);
        let h = self.norm(g, w, x, &format!("{name}.norm1"))?;
        let h = g.silu(h)?;
        let h = g.conv2d(h, w.get(&format!("{name}.conv1.w"))?, w.get(&format!("{name}.conv1.b"))?)?;
        let cout = g.shape(h)[1];
        let e = self.linear(g, w, emb, &format!("{name}.emb"))?;
        let e = g.reshape(e, &[b, cout, 1, 1])?;
        let h = g.add(h, e)?;
        let h = self.norm(g, w, h, &format!("{name}.norm2"))?;
        let h = g.silu(h)?;
        let h = g.conv2d(h, w.get(&format!("{name}.conv2.w"))?, w.get(&format!("{name}.conv2.b"))?)?;
        let skip = if cin == cout {
            x
        } else {
            let flat = g.reshape(x, &[b, cin, hh * ww])?;
            let proj = g.matmul(w.get(&format!("{name}.skip"))?, flat, false, false)?;
            g.reshape(proj, &[b, cout, hh, ww])?
        };
        g.add(h, skip)
    }

    fn attention(
        &self,
        g: &mut Graph<S>,
        w: &BoundWeights,
        x: Var,
        name: &str,
        ctl: &AttnControl<S>,
        record: &mut AttnRecord<S>,
    ) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let (b, c, hh, ww) = (xs[0], xs[1], xs[2], xs[3]);
        let tokens = hh * ww;
        let h = self.norm(g, w, x, &format!("{name}.norm"))?;
        let h = g.reshape(h, &[b, c, tokens])?;
        // token-major projections: Xᵀ·Wᵀ -> [B, tokens, C]
        let q = g.matmul(h, w.get(&format!("{name}.to_q"))?, true, true)?;
        let (k, v) = match ctl.overrides.and_then(|o| o.get(name)) {
            Some(kv) => {
                for m in [&kv.k, &kv.v] {
                    if m.shape() != [tokens, c] {
                        return Err(shape_err(
                            "attention override",
                            format!("{name}: {:?} vs [{tokens}, {c}]", m.shape()),
                        ));
                    }
                }
                let k = g.constant(kv.k.reshape(&[1, tokens, c])?);
                let v = g.constant(kv.v.reshape(&[1, tokens, c])?);
                (k, v)
            }
            None => {
                let k = g.matmul(h, w.get(&format!("{name}.to_k"))?, true, true)?;
                let v = g.matmul(h, w.get(&format!("{name}.to_v"))?, true, true)?;
                if ctl.record {
                    record.insert(
                        name.to_string(),
                        KeyValue {
                            k: g.value(k).reshape(&[tokens, c])?,
                            v: g.value(v).reshape(&[tokens, c])?,
                        },
                    );
                }
                (k, v)
            }
        };
        let o = scaled_dot_attention(g, q, k, v)?;
        // back to channel-major: W_out·Oᵀ -> [B, C, tokens]
        let p = g.matmul(w.get(&format!("{name}.to_out"))?, o, false, true)?;
        let bias = w.get(&format!("{name}.to_out.b"))?;
        let bias = g.reshape(bias, &[1, c, 1])?;
        let p = g.add(p, bias)?;
        let p = g.reshape(p, &[b, c, hh, ww])?;
        g.add(x, p)
    }
}

/// `softmax(Q·Kᵀ/√d_k)·V` on token-major `[B, tokens, d]` operands.
pub fn scaled_dot_attention<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = *g.shape(q).last().ok_or_else(|| shape_err("attention", "rank 0 query"))?;
    let s = g.matmul(q, k, false, true)?;
    let s = g.scale(s, 1.0 / (dk as f64).sqrt())?;
    let a = g.softmax(s)?;
    g.matmul(a, v, false, false)
}

/// Single-sample noise prediction with optional residuals and attention control.
pub fn predict_noise<S: Scalar>(
    params: &UNetParams<S>,
    residuals: Option<&EffectiveResiduals<S>>,
    z: &Tensor<S>,
    t: usize,
    cond: &ConditionVector<S>,
    ctl: &AttnControl<S>,
) -> Result<(Tensor<S>, AttnRecord<S>)> {
    let arch = &params.arch;
    let r = arch.resolution;
    let z4 = match z.rank() {
        3 => z.reshape(&[1, z.shape()[0], r, r])?,
        _ => z.clone(),
    };
    if cond.embedding.numel() != arch.cond_dim {
        return Err(shape_err(
            "unet_forward",
            format!("condition has {} values, network expects {}", cond.embedding.numel(), arch.cond_dim),
        ));
    }
    let mut g = Graph::new();
    let w = params.bind(&mut g, residuals, false)?;
    let x = g.constant(z4);
    let c = g.constant(cond.embedding.reshape(&[1, arch.cond_dim])?);
    let mut record = AttnRecord::new();
    let out = params.forward_graph(&mut g, &w, x, &[t], c, ctl, &mut record)?;
    let eps = g.value(out).reshape(z.shape())?;
    Ok((eps, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_arch() -> UNetArch {
        UNetArch {
            in_channels: 1,
            resolution: 8,
            base_channels: 4,
            channel_mult: vec![1, 2],
            attn_resolutions: vec![4],
            n_res_blocks: 1,
            time_dim: 8,
            cond_dim: 8,
            num_classes: 2,
            max_groups: 2,
        }
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embed::<f32>(0, 16).unwrap();
        assert!(e.data()[..8].iter().all(|&v| v == 0.0));
        assert!(e.data()[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn timestep_embedding_is_deterministic_and_distinct() {
        let a = timestep_embed::<f32>(1, 128).unwrap();
        let b = timestep_embed::<f32>(1, 128).unwrap();
        assert!(a.bit_eq(&b));
        let c = timestep_embed::<f32>(2, 128).unwrap();
        assert!(a.max_abs_diff(&c).unwrap() > 1e-6);
        assert!(timestep_embed::<f32>(3, 7).is_err());
    }

    #[test]
    fn default_arch_shape_contract() {
        let p = UNetParams::<f32>::init(UNetArch::default(), 0).unwrap();
        let z = Tensor::randn(&[1, 1, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let c = p.condition_embed(0).unwrap();
        let (eps, _) = predict_noise(&p, None, &z, 500, &c, &AttnControl::default()).unwrap();
        assert_eq!(eps.shape(), &[1, 1, 32, 32]);
        // four Q/K/V/out projections per attention layer
        for l in p.arch.attn_layers() {
            for proj in ["to_q", "to_k", "to_v", "to_out"] {
                assert!(p.weight(&format!("{}.{proj}", l.name)).is_ok());
            }
        }
        let names: Vec<_> = p.arch.injectable_layers(false).into_iter().map(|l| l.name).collect();
        assert_eq!(names, vec!["up.2.attn.0", "up.1.attn.0"]);
    }

    #[test]
    fn condition_embed_contract() {
        let p = UNetParams::<f32>::init(tiny_arch(), 3).unwrap();
        let a = p.condition_embed(1).unwrap();
        assert_eq!(a, p.condition_embed(1).unwrap());
        assert_eq!(a.embedding.numel(), 8);
        assert_ne!(a.embedding, p.condition_embed(0).unwrap().embedding);
        assert!(p.condition_embed(2).is_err());
    }

    fn perturbed(seed: u64) -> UNetParams<f64> {
        // non-zero output conv so the prediction depends on everything
        let mut p = UNetParams::<f64>::init(tiny_arch(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (name, w) in p.weights_mut().iter_mut() {
            if name.starts_with("out.conv") {
                *w = Tensor::randn(w.shape(), 0.1, &mut rng);
            }
        }
        p
    }

    #[test]
    fn self_substitution_override_is_a_no_op() {
        let p = perturbed(5);
        let z = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let c = p.condition_embed(1).unwrap();
        let rec_ctl = AttnControl { overrides: None, record: true };
        let (base, rec) = predict_noise(&p, None, &z, 10, &c, &rec_ctl).unwrap();
        let up: AttnOverride<f64> = rec
            .into_iter()
            .filter(|(k, _)| k.starts_with("up."))
            .collect();
        assert!(!up.is_empty());
        let ctl = AttnControl { overrides: Some(&up), record: false };
        let (again, _) = predict_noise(&p, None, &z, 10, &c, &ctl).unwrap();
        assert!(again.bit_eq(&base));
    }

    #[test]
    fn override_changes_output_and_validates() {
        let p = perturbed(6);
        let z = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let c = p.condition_embed(0).unwrap();
        let (base, _) = predict_noise(&p, None, &z, 10, &c, &AttnControl::default()).unwrap();
        let layer = &p.arch.injectable_layers(false)[0];
        let mut ov = AttnOverride::new();
        let kv = KeyValue {
            k: Tensor::full(&[layer.tokens, layer.channels], 0.5),
            v: Tensor::full(&[layer.tokens, layer.channels], -0.5),
        };
        ov.insert(layer.name.clone(), kv.clone());
        let ctl = AttnControl { overrides: Some(&ov), record: true };
        let (out, rec) = predict_noise(&p, None, &z, 10, &c, &ctl).unwrap();
        assert!(out.max_abs_diff(&base).unwrap() > 0.0);
        // overridden layers are not recorded
        assert!(!rec.contains_key(&layer.name));

        let mut bad = AttnOverride::new();
        bad.insert("up.9.attn.0".into(), kv.clone());
        let ctl = AttnControl { overrides: Some(&bad), record: false };
        assert!(matches!(
            predict_noise(&p, None, &z, 10, &c, &ctl),
            Err(Error::UnknownName(_))
        ));
        let mut wrong = AttnOverride::new();
        wrong.insert(
            layer.name.clone(),
            KeyValue { k: Tensor::zeros(&[3, 3]), v: Tensor::zeros(&[3, 3]) },
        );
        let ctl = AttnControl { overrides: Some(&wrong), record: false };
        assert!(matches!(
            predict_noise(&p, None, &z, 10, &c, &ctl),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn attention_matches_explicit_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d) = (6, 4);
        let q = Tensor::<f32>::randn(&[1, n, d], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[1, n, d], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[1, n, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = scaled_dot_attention(&mut g, qv, kv, vv).unwrap();
        let got = g.value(o).clone();
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..d)
                        .map(|c| q.data()[i * d + c] as f64 * k.data()[j * d + c] as f64)
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for c in 0..d {
                let want: f64 = (0..n)
                    .map(|j| (scores[j] - m).exp() / z * v.data()[j * d + c] as f64)
                    .sum();
                assert!((got.data()[i * d + c] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn concurrent_forwards_match_serial() {
        let p = perturbed(7).cast::<f32>();
        let c = p.condition_embed(0).unwrap();
        let inputs: Vec<Tensor<f32>> = (0..3)
            .map(|s| Tensor::randn(&[1, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(s)))
            .collect();
        let serial: Vec<_> = inputs
            .iter()
            .map(|z| predict_noise(&p, None, z, 42, &c, &AttnControl::default()).unwrap().0)
            .collect();
        let parallel: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = inputs
                .iter()
                .map(|z| {
                    let (p, c) = (&p, &c);
                    s.spawn(move || predict_noise(p, None, z, 42, c, &AttnControl::default()).unwrap().0)
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (a, b) in serial.iter().zip(&parallel) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn from_weights_checks_names_and_shapes() {
        let p = UNetParams::<f32>::init(tiny_arch(), 1).unwrap();
        let mut w = p.weights().clone();
        assert_eq!(UNetParams::from_weights(tiny_arch(), w.clone()).unwrap(), p);
        w.insert("bogus".into(), Tensor::zeros(&[1]));
        assert!(UNetParams::from_weights(tiny_arch(), w).is_err());
    }
}
