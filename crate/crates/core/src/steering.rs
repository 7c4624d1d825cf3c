//! Steering adapters attached to a frozen backbone.
//!
//! Each selected injection site gets an independent adapter
//! `v = zero(act(fc2(act(fc1([emb(t), c])))))` whose last layer starts at
//! zero, and the site feature becomes `ĥ = h + w·v`. Adapters see only the
//! step index and the condition, never the noisy state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{DenoiserModel, ForwardTrace, SiteCategory, SiteId, SiteInfo};
use crate::conditions::Condition;
use crate::error::{Error, Result};
use crate::nn::{hconcat, timestep_embedding, Activation, Init, Linear, NamedTensor, ParamStore};

pub const STEERING_CHECKPOINT_VERSION: u32 = 1;

/// Which backbone stages receive steering features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum IntegrationMode {
    All,
    Emd,
    E,
    Em,
    D,
    Md,
    EdOnly,
    MeD,
    M,
}

impl IntegrationMode {
    pub const ALL_MODES: [IntegrationMode; 9] = [
        IntegrationMode::All,
        IntegrationMode::Emd,
        IntegrationMode::E,
        IntegrationMode::Em,
        IntegrationMode::D,
        IntegrationMode::Md,
        IntegrationMode::EdOnly,
        IntegrationMode::MeD,
        IntegrationMode::M,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IntegrationMode::All => "ALL",
            IntegrationMode::Emd => "EMD",
            IntegrationMode::E => "E",
            IntegrationMode::Em => "EM",
            IntegrationMode::D => "D",
            IntegrationMode::Md => "MD",
            IntegrationMode::EdOnly => "E-D",
            IntegrationMode::MeD => "ME-D",
            IntegrationMode::M => "M",
        }
    }
}

impl fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntegrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        let mode = match norm.as_str() {
            "ALL" => IntegrationMode::All,
            "EMD" => IntegrationMode::Emd,
            "E" => IntegrationMode::E,
            "EM" => IntegrationMode::Em,
            "D" => IntegrationMode::D,
            "MD" => IntegrationMode::Md,
            "E-D" | "ED" | "ED-ONLY" => IntegrationMode::EdOnly,
            "ME-D" => IntegrationMode::MeD,
            "M" => IntegrationMode::M,
            _ => return Err(Error::Parameter(format!("unknown integration mode {s:?}"))),
        };
        Ok(mode)
    }
}

impl From<IntegrationMode> for String {
    fn from(m: IntegrationMode) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for IntegrationMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Site categories selected by each mode.
pub fn mode_sites(mode: IntegrationMode) -> BTreeSet<SiteCategory> {
    use SiteCategory::*;
    let cats: &[SiteCategory] = match mode {
        IntegrationMode::All => &[E, MB, D, ED],
        IntegrationMode::Emd => &[E, MB, D],
        IntegrationMode::E => &[E],
        IntegrationMode::Em => &[E, MB],
        IntegrationMode::D => &[D],
        IntegrationMode::Md => &[MB, D],
        IntegrationMode::EdOnly => &[ED],
        IntegrationMode::MeD => &[MB, ED],
        IntegrationMode::M => &[MB],
    };
    cats.iter().copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    #[default]
    Uniform,
    /// Encoder and middle sites get `width/4`, decoder and skip sites 1.
    HeadHeavy,
}

pub fn default_weight_schedule(sites: &[SiteInfo], policy: WeightPolicy) -> BTreeMap<SiteId, f64> {
    sites
        .iter()
        .map(|s| {
            let w = match (policy, s.id.category) {
                (WeightPolicy::HeadHeavy, SiteCategory::E | SiteCategory::MB) => s.width as f64 / 4.0,
                _ => 1.0,
            };
            (s.id, w)
        })
        .collect()
}

/// `ĥ = h + w·v`.
pub fn steer_features(h: &[f64], v: &[f64], w: f64) -> Result<Vec<f64>> {
    if h.len() != v.len() {
        return Err(Error::shape(format!("adapter output of width {}", h.len()), v.len()));
    }
    Ok(h.iter().zip(v).map(|(h, v)| h + w * v).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub mode: IntegrationMode,
    pub condition_dim: usize,
    #[serde(default)]
    pub weight_policy: WeightPolicy,
    /// Adapter hidden width as a multiple of the site width.
    #[serde(default = "default_hidden_mult")]
    pub hidden_mult: usize,
    /// Feeds every adapter this fixed step instead of the true one.
    #[serde(default)]
    pub constant_time: Option<usize>,
}

fn default_hidden_mult() -> usize {
    2
}

impl SteeringConfig {
    pub fn new(mode: IntegrationMode, condition_dim: usize) -> Self {
        Self { mode, condition_dim, weight_policy: WeightPolicy::Uniform, hidden_mult: 2, constant_time: None }
    }
}

#[derive(Debug, Clone)]
struct Adapter {
    site: SiteId,
    position: usize,
    fc1: Linear,
    fc2: Linear,
    zero: Linear,
}

struct AdapterCache {
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
}

/// Adapter activations from one integrated pass.
pub struct SteeringTrace {
    input: Array2<f64>,
    caches: Vec<AdapterCache>,
}

#[derive(Debug, Clone)]
pub struct SteeringModule {
    config: SteeringConfig,
    time_embed_dim: usize,
    layout: Vec<SiteInfo>,
    adapters: Vec<Adapter>,
    weights: BTreeMap<SiteId, f64>,
    params: ParamStore,
    backbone_fingerprint: String,
}

pub fn build_steering_module(
    backbone: &DenoiserModel,
    mode: IntegrationMode,
    condition_dim: usize,
    weight_policy: WeightPolicy,
    seed: u64,
) -> Result<SteeringModule> {
    let cfg = SteeringConfig { weight_policy, ..SteeringConfig::new(mode, condition_dim) };
    build_steering_module_with(backbone, &cfg, seed)
}

pub fn build_steering_module_with(backbone: &DenoiserModel, cfg: &SteeringConfig, seed: u64) -> Result<SteeringModule> {
    if cfg.condition_dim == 0 {
        return Err(Error::Parameter("steering requires a condition (condition_dim >= 1)".into()));
    }
    if cfg.hidden_mult == 0 {
        return Err(Error::Parameter("adapter hidden_mult must be positive".into()));
    }
    let cats = mode_sites(cfg.mode);
    let temb = backbone.config().time_embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut adapters = Vec::new();
    for (position, site) in backbone.topology().iter().enumerate() {
        if !cats.contains(&site.id.category) {
            continue;
        }
        let hidden = cfg.hidden_mult * site.width;
        let name = format!("adapter.{}", site.id);
        adapters.push(Adapter {
            site: site.id,
            position,
            fc1: Linear::register(&mut params, &format!("{name}.fc1"), temb + cfg.condition_dim, hidden, Init::Uniform, &mut rng),
            fc2: Linear::register(&mut params, &format!("{name}.fc2"), hidden, hidden, Init::Uniform, &mut rng),
            zero: Linear::register(&mut params, &format!("{name}.zero"), hidden, site.width, Init::Zero, &mut rng),
        });
    }
    let selected: Vec<SiteInfo> = adapters.iter().map(|a| backbone.topology()[a.position]).collect();
    Ok(SteeringModule {
        config: cfg.clone(),
        time_embed_dim: temb,
        layout: backbone.topology().to_vec(),
        weights: default_weight_schedule(&selected, cfg.weight_policy),
        adapters,
        params,
        backbone_fingerprint: backbone.fingerprint(),
    })
}

impl SteeringModule {
    pub fn config(&self) -> &SteeringConfig {
        &self.config
    }

    pub fn mode(&self) -> IntegrationMode {
        self.config.mode
    }

    pub fn condition_dim(&self) -> usize {
        self.config.condition_dim
    }

    pub fn sites(&self) -> Vec<SiteId> {
        self.adapters.iter().map(|a| a.site).collect()
    }

    pub fn weights(&self) -> &BTreeMap<SiteId, f64> {
        &self.weights
    }

    pub fn set_weight(&mut self, site: SiteId, w: f64) -> Result<()> {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Parameter(format!("weight {w} for {site} must be finite and nonnegative")));
        }
        match self.weights.get_mut(&site) {
            Some(slot) => {
                *slot = w;
                Ok(())
            }
            None => Err(Error::Parameter(format!("no adapter at site {site}"))),
        }
    }

    /// Copy with every injection weight multiplied by `factor`.
    pub fn with_scaled_weights(&self, factor: f64) -> Result<SteeringModule> {
        let mut out = self.clone();
        for (site, w) in &self.weights {
            out.set_weight(*site, w * factor)?;
        }
        Ok(out)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone_fingerprint(&self) -> &str {
        &self.backbone_fingerprint
    }

    fn check_backbone(&self, backbone: &DenoiserModel) -> Result<()> {
        if backbone.topology() != self.layout.as_slice() || backbone.config().time_embed_dim != self.time_embed_dim {
            return Err(Error::Config("steering module was built for a different backbone topology".into()));
        }
        Ok(())
    }

    fn adapter_input(&self, ts: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        if cond.dim() != (ts.len(), self.config.condition_dim) {
            return Err(Error::shape(
                format!("condition of shape ({}, {})", ts.len(), self.config.condition_dim),
                format!("{:?}", cond.dim()),
            ));
        }
        let tsf: Vec<f64> = match self.config.constant_time {
            Some(c) => vec![c as f64; ts.len()],
            None => ts.iter().map(|&t| t as f64).collect(),
        };
        Ok(hconcat(timestep_embedding(&tsf, self.time_embed_dim).view(), cond))
    }

    /// Raw adapter outputs `v` (before weighting), one per adapter.
    pub fn adapter_outputs(&self, ts: &[usize], cond: ArrayView2<f64>) -> Result<Vec<(SiteId, Array2<f64>)>> {
        let (outs, _) = self.run_adapters(ts, cond)?;
        Ok(self.adapters.iter().map(|a| a.site).zip(outs).collect())
    }

    fn run_adapters(&self, ts: &[usize], cond: ArrayView2<f64>) -> Result<(Vec<Array2<f64>>, SteeringTrace)> {
        let input = self.adapter_input(ts, cond)?;
        let p = self.params.data();
        let act = Activation::Silu;
        let mut outs = Vec::with_capacity(self.adapters.len());
        let mut caches = Vec::with_capacity(self.adapters.len());
        for a in &self.adapters {
            let pre1 = a.fc1.forward(p, input.view());
            let act1 = act.apply(&pre1);
            let pre2 = a.fc2.forward(p, act1.view());
            let act2 = act.apply(&pre2);
            outs.push(a.zero.forward(p, act2.view()));
            caches.push(AdapterCache { pre1, act1, pre2, act2 });
        }
        Ok((outs, SteeringTrace { input, caches }))
    }

    /// Forward pass of the combined denoiser, keeping everything needed
    /// for [`SteeringModule::backward`].
    pub fn forward_trace(
        &self,
        backbone: &DenoiserModel,
        z: ArrayView2<f64>,
        ts: &[usize],
        cond: ArrayView2<f64>,
    ) -> Result<(ForwardTrace, SteeringTrace)> {
        self.check_backbone(backbone)?;
        let (outs, strace) = self.run_adapters(ts, cond)?;
        let mut deltas: Vec<Option<Array2<f64>>> = vec![None; self.layout.len()];
        for (a, v) in self.adapters.iter().zip(outs) {
            deltas[a.position] = Some(v * self.weights[&a.site]);
        }
        let trace = backbone.forward_trace(z, ts, None, &deltas)?;
        Ok((trace, strace))
    }

    /// Accumulates `∂L/∂φ` into `grads` given `d_out = ∂L/∂ε̄`.
    pub fn backward(
        &self,
        backbone: &DenoiserModel,
        trace: &ForwardTrace,
        strace: &SteeringTrace,
        d_out: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape(format!("{} gradient slots", self.params.len()), grads.len()));
        }
        let site_grads = backbone.backward(trace, d_out, None)?;
        let p = self.params.data();
        let act = Activation::Silu;
        for (a, c) in self.adapters.iter().zip(&strace.caches) {
            let dv = &site_grads[a.position] * self.weights[&a.site];
            let d2 = a.zero.backward(p, c.act2.view(), dv.view(), Some(&mut *grads));
            let d2 = act.backward(&c.pre2, d2.view());
            let d1 = a.fc2.backward(p, c.act1.view(), d2.view(), Some(&mut *grads));
            let d1 = act.backward(&c.pre1, d1.view());
            a.fc1.accumulate(grads, strace.input.view(), d1.view());
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> SteeringCheckpoint {
        SteeringCheckpoint {
            format_version: STEERING_CHECKPOINT_VERSION,
            config: self.config.clone(),
            weights: self.weights.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            tensors: self.params.to_named(),
            backbone_fingerprint: self.backbone_fingerprint.clone(),
        }
    }

    /// Rebuilds a module against `backbone`, refusing a fingerprint mismatch.
    pub fn from_checkpoint(ckpt: &SteeringCheckpoint, backbone: &DenoiserModel) -> Result<Self> {
        if ckpt.format_version != STEERING_CHECKPOINT_VERSION {
            return Err(Error::Version { found: ckpt.format_version, expected: STEERING_CHECKPOINT_VERSION });
        }
        if ckpt.backbone_fingerprint != backbone.fingerprint() {
            return Err(Error::Config("steering checkpoint was trained against a different backbone".into()));
        }
        let mut m = build_steering_module_with(backbone, &ckpt.config, 0)?;
        m.params.load_named(&ckpt.tensors)?;
        if ckpt.weights.len() != m.weights.len() {
            return Err(Error::Format("weight map does not match the adapter sites".into()));
        }
        for (k, w) in &ckpt.weights {
            m.set_weight(k.parse()?, *w)?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, backbone: &DenoiserModel) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?, backbone)
    }
}

/// `ε̄(z, t, c)` for a batch; `cond` holds one flattened condition per row.
pub fn integrated_denoise_batch(
    backbone: &DenoiserModel,
    module: &SteeringModule,
    z: ArrayView2<f64>,
    ts: &[usize],
    cond: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    Ok(module.forward_trace(backbone, z, ts, cond)?.0.output)
}

/// Same condition broadcast over every row of `z`.
pub fn integrated_denoise_shared(
    backbone: &DenoiserModel,
    module: &SteeringModule,
    z: ArrayView2<f64>,
    t: usize,
    c_add: &Condition,
) -> Result<Array2<f64>> {
    let n = z.nrows();
    let flat = c_add.flatten();
    let cond = Array2::from_shape_fn((n, flat.len()), |(_, j)| flat[j]);
    integrated_denoise_batch(backbone, module, z, &vec![t; n], cond.view())
}

/// `ε̄(z, t, c)` at a single point.
pub fn integrated_denoise(
    backbone: &DenoiserModel,
    module: &SteeringModule,
    z_t: &[f64],
    t: usize,
    c_add: &Condition,
) -> Result<Vec<f64>> {
    let zv = ArrayView2::from_shape((1, z_t.len()), z_t).map_err(|e| Error::shape(backbone.input_dim(), e))?;
    Ok(integrated_denoise_shared(backbone, module, zv, t, c_add)?.row(0).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringCheckpoint {
    pub format_version: u32,
    pub config: SteeringConfig,
    pub weights: BTreeMap<String, f64>,
    pub tensors: Vec<NamedTensor>,
    pub backbone_fingerprint: String,
}
