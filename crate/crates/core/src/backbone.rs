//! Toy U-Net denoiser for low-dimensional vector data.
//!
//! With `feature_dims = [f0, f1, …, fL]` the network has `L` encoder blocks
//! (`f_i → f_{i+1}`), a middle block at width `f_L`, and `L` decoder blocks
//! (`2·f_{i+1} → f_i`) that each take the previous decoder output concatenated
//! with the matching encoder output. Every block is a time-modulated residual
//! transform followed by a width-changing affine layer.
//!
//! Injection sites, indexed per category by resolution level `i` counted from
//! the input side:
//!
//! | site   | feature                                        | width      |
//! |--------|------------------------------------------------|------------|
//! | `E.i`  | output of encoder block `i`                    | `f_{i+1}`  |
//! | `MB.0` | output of the middle block                     | `f_L`      |
//! | `D.i`  | output of decoder block `i` (`D.0` is the head)| `f_i`      |
//! | `ED.i` | skip tensor from `E.i`, before concatenation   | `f_{i+1}`  |

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditions::Condition;
use crate::error::{Error, Result};
use crate::nn::{hconcat, timestep_embedding, Activation, Init, Linear, NamedTensor, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

fn default_expansion() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub input_dim: usize,
    pub feature_dims: Vec<usize>,
    pub time_embed_dim: usize,
    /// Width of a condition concatenated onto the input; 0 for the
    /// unconditional prior.
    #[serde(default)]
    pub condition_dim: usize,
    /// Hidden width of each residual transform, as a multiple of its input width.
    #[serde(default = "default_expansion")]
    pub residual_expansion: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            feature_dims: vec![2, 4, 8, 16, 32],
            time_embed_dim: 32,
            condition_dim: 0,
            residual_expansion: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.feature_dims.len() < 2 || self.feature_dims.contains(&0) {
            return Err(Error::Config("feature_dims needs at least two positive widths".into()));
        }
        if self.feature_dims[0] != self.input_dim {
            return Err(Error::Config(format!(
                "feature_dims[0] = {} must equal input_dim = {}",
                self.feature_dims[0], self.input_dim
            )));
        }
        if self.time_embed_dim < 2 || self.residual_expansion == 0 {
            return Err(Error::Config("time_embed_dim >= 2 and residual_expansion >= 1 required".into()));
        }
        Ok(())
    }

    /// Number of encoder (and decoder) blocks.
    pub fn levels(&self) -> usize {
        self.feature_dims.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SiteCategory {
    E,
    MB,
    D,
    ED,
}

impl SiteCategory {
    pub const ALL: [SiteCategory; 4] = [SiteCategory::E, SiteCategory::MB, SiteCategory::D, SiteCategory::ED];

    pub fn label(self) -> &'static str {
        match self {
            SiteCategory::E => "E",
            SiteCategory::MB => "MB",
            SiteCategory::D => "D",
            SiteCategory::ED => "ED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct SiteId {
    pub category: SiteCategory,
    pub index: usize,
}

impl SiteId {
    pub fn new(category: SiteCategory, index: usize) -> Self {
        Self { category, index }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.category.label(), self.index)
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (cat, idx) = s.split_once('.').ok_or_else(|| Error::Format(format!("bad site id {s:?}")))?;
        let category = match cat {
            "E" => SiteCategory::E,
            "MB" => SiteCategory::MB,
            "D" => SiteCategory::D,
            "ED" => SiteCategory::ED,
            _ => return Err(Error::Format(format!("bad site category in {s:?}"))),
        };
        let index = idx.parse().map_err(|_| Error::Format(format!("bad site index in {s:?}")))?;
        Ok(SiteId { category, index })
    }
}

impl From<SiteId> for String {
    fn from(s: SiteId) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for SiteId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub id: SiteId,
    pub width: usize,
}

/// Residual transform with scale-shift time modulation, then a width change:
///
/// `u = fc1(x)`, `v = u ⊙ (1 + scale) + shift`, `r = x + fc2(act(v))`, `y = out(r)`,
/// where `(scale, shift) = film(time features)`.
#[derive(Debug, Clone)]
struct Block {
    name: String,
    hidden: usize,
    fc1: Linear,
    film: Linear,
    fc2: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x: Array2<f64>,
    u: Array2<f64>,
    film: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    r: Array2<f64>,
}

impl Block {
    fn register(store: &mut ParamStore, name: &str, w_in: usize, w_out: usize, temb: usize, expansion: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = w_in * expansion;
        Self {
            name: name.to_string(),
            hidden,
            fc1: Linear::register(store, &format!("{name}.res.fc1"), w_in, hidden, Init::Uniform, rng),
            film: Linear::register(store, &format!("{name}.res.film"), temb, 2 * hidden, Init::Uniform, rng),
            fc2: Linear::register(store, &format!("{name}.res.fc2"), hidden, w_in, Init::Uniform, rng),
            out: Linear::register(store, &format!("{name}.out"), w_in, w_out, Init::Uniform, rng),
        }
    }

    fn forward(&self, p: &[f64], x: Array2<f64>, te: ArrayView2<f64>, act: Activation) -> (Array2<f64>, BlockCache) {
        let u = self.fc1.forward(p, x.view());
        let film = self.film.forward(p, te);
        let scale = film.slice(s![.., ..self.hidden]);
        let shift = film.slice(s![.., self.hidden..]);
        let v = &u * &scale.mapv(|s| 1.0 + s) + shift;
        let a = act.apply(&v);
        let r = &x + &self.fc2.forward(p, a.view());
        let y = self.out.forward(p, r.view());
        (y, BlockCache { x, u, film, v, a, r })
    }

    /// Returns `(dx, dte)`; `dte` only when parameter gradients are requested.
    fn backward(
        &self,
        p: &[f64],
        c: &BlockCache,
        te: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        mut grads: Option<&mut [f64]>,
        act: Activation,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let dr = self.out.backward(p, c.r.view(), dy, grads.as_deref_mut());
        let da = self.fc2.backward(p, c.a.view(), dr.view(), grads.as_deref_mut());
        let dv = act.backward(&c.v, da.view());
        let scale = c.film.slice(s![.., ..self.hidden]);
        let du = &dv * &scale.mapv(|s| 1.0 + s);
        let mut dx = dr;
        dx += &self.fc1.backward(p, c.x.view(), du.view(), grads.as_deref_mut());
        let dte = grads.map(|g| {
            let dfilm = hconcat((&dv * &c.u).view(), dv.view());
            self.film.backward(p, te, dfilm.view(), Some(g))
        });
        (dx, dte)
    }
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    ts: Vec<f64>,
    emb: Array2<f64>,
    time_pre: Array2<f64>,
    te: Array2<f64>,
    enc: Vec<BlockCache>,
    mid: BlockCache,
    dec: Vec<BlockCache>,
    /// Site features before any injected perturbation, in topology order.
    pub raw: Vec<Array2<f64>>,
    /// Site features after injection (equal to `raw` where nothing was added).
    pub steered: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// The denoiser `ε_θ(z_t, t)` with a flat parameter store and a site inventory.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: UNetConfig,
    activation: Activation,
    params: ParamStore,
    time_fc1: Linear,
    time_fc2: Linear,
    enc: Vec<Block>,
    mid: Block,
    dec: Vec<Block>,
    sites: Vec<SiteInfo>,
    frozen: bool,
}

pub fn build_toy_unet(cfg: &UNetConfig, seed: u64) -> Result<DenoiserModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let f = &cfg.feature_dims;
    let levels = cfg.levels();
    let temb = cfg.time_embed_dim;
    let time_fc1 = Linear::register(&mut store, "time.fc1", temb, temb, Init::Uniform, &mut rng);
    let time_fc2 = Linear::register(&mut store, "time.fc2", temb, temb, Init::Uniform, &mut rng);
    let enc = (0..levels)
        .map(|i| {
            let w_in = f[i] + if i == 0 { cfg.condition_dim } else { 0 };
            Block::register(&mut store, &format!("enc.{i}"), w_in, f[i + 1], temb, cfg.residual_expansion, &mut rng)
        })
        .collect();
    let mid = Block::register(&mut store, "mid", f[levels], f[levels], temb, cfg.residual_expansion, &mut rng);
    let dec = (0..levels)
        .map(|i| Block::register(&mut store, &format!("dec.{i}"), 2 * f[i + 1], f[i], temb, cfg.residual_expansion, &mut rng))
        .collect();

    let mut sites = Vec::with_capacity(3 * levels + 1);
    sites.extend((0..levels).map(|i| SiteInfo { id: SiteId::new(SiteCategory::E, i), width: f[i + 1] }));
    sites.push(SiteInfo { id: SiteId::new(SiteCategory::MB, 0), width: f[levels] });
    sites.extend((0..levels).map(|i| SiteInfo { id: SiteId::new(SiteCategory::D, i), width: f[i] }));
    sites.extend((0..levels).map(|i| SiteInfo { id: SiteId::new(SiteCategory::ED, i), width: f[i + 1] }));

    Ok(DenoiserModel {
        config: cfg.clone(),
        activation: Activation::Silu,
        params: store,
        time_fc1,
        time_fc2,
        enc,
        mid,
        dec,
        sites,
        frozen: false,
    })
}

fn check_finite(a: &Array2<f64>, location: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical { location: location.to_string() })
    }
}

impl DenoiserModel {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access to the parameters; refused once the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Config("backbone is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn topology(&self) -> &[SiteInfo] {
        &self.sites
    }

    pub fn site_position(&self, id: SiteId) -> Option<usize> {
        self.sites.iter().position(|s| s.id == id)
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Fingerprint of configuration plus parameter values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.params.checksum().as_bytes());
        hex::encode(h.finalize())
    }

    fn levels(&self) -> usize {
        self.enc.len()
    }

    fn pos(&self, cat: SiteCategory, i: usize) -> usize {
        let l = self.levels();
        match cat {
            SiteCategory::E => i,
            SiteCategory::MB => l,
            SiteCategory::D => l + 1 + i,
            SiteCategory::ED => 2 * l + 1 + i,
        }
    }

    /// Full forward pass with optional per-site additive perturbations
    /// (`deltas[k]` is added to site `topology()[k]`).
    pub fn forward_trace(
        &self,
        z: ArrayView2<f64>,
        ts: &[usize],
        cond: Option<ArrayView2<f64>>,
        deltas: &[Option<Array2<f64>>],
    ) -> Result<ForwardTrace> {
        let n = z.nrows();
        if z.ncols() != self.config.input_dim || ts.len() != n {
            return Err(Error::shape(
                format!("({n}, {}) with {n} steps", self.config.input_dim),
                format!("{:?} with {} steps", z.dim(), ts.len()),
            ));
        }
        if !deltas.is_empty() && deltas.len() != self.sites.len() {
            return Err(Error::shape(format!("{} site deltas", self.sites.len()), deltas.len()));
        }
        for (k, d) in deltas.iter().enumerate() {
            if let Some(d) = d {
                let want = (n, self.sites[k].width);
                if d.dim() != want {
                    return Err(Error::shape(format!("{want:?} at {}", self.sites[k].id), format!("{:?}", d.dim())));
                }
            }
        }
        let x0 = match (self.config.condition_dim, cond) {
            (0, None) => z.to_owned(),
            (0, Some(_)) => return Err(Error::Config("unconditional backbone was given a condition".into())),
            (c, Some(cv)) if cv.dim() == (n, c) => hconcat(z, cv),
            (c, other) => {
                return Err(Error::shape(format!("condition of shape ({n}, {c})"), format!("{:?}", other.map(|v| v.dim()))))
            }
        };
        let p = self.params.data();
        let act = self.activation;
        let delta = |k: usize| deltas.get(k).and_then(|d| d.as_ref());

        let tsf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let emb = timestep_embedding(&tsf, self.config.time_embed_dim);
        let time_pre = self.time_fc1.forward(p, emb.view());
        let te = self.time_fc2.forward(p, act.apply(&time_pre).view());
        check_finite(&te, "time embedding")?;

        let total = self.sites.len();
        let mut raw: Vec<Option<Array2<f64>>> = vec![None; total];
        let mut steered: Vec<Option<Array2<f64>>> = vec![None; total];
        let mut record = |k: usize, h: Array2<f64>| -> Array2<f64> {
            let out = match delta(k) {
                Some(d) => &h + d,
                None => h.clone(),
            };
            raw[k] = Some(h);
            steered[k] = Some(out.clone());
            out
        };

        let levels = self.levels();
        let mut h = x0;
        let mut enc_caches = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        for (i, block) in self.enc.iter().enumerate() {
            let (y, c) = block.forward(p, h, te.view(), act);
            check_finite(&y, &block.name)?;
            enc_caches.push(c);
            h = record(self.pos(SiteCategory::E, i), y);
            skips.push(record(self.pos(SiteCategory::ED, i), h.clone()));
        }
        let (y, mid_cache) = self.mid.forward(p, h, te.view(), act);
        check_finite(&y, &self.mid.name)?;
        h = record(self.pos(SiteCategory::MB, 0), y);
        let mut dec_caches: Vec<Option<BlockCache>> = vec![None; levels];
        for i in (0..levels).rev() {
            let input = hconcat(h.view(), skips[i].view());
            let (y, c) = self.dec[i].forward(p, input, te.view(), act);
            check_finite(&y, &self.dec[i].name)?;
            dec_caches[i] = Some(c);
            h = record(self.pos(SiteCategory::D, i), y);
        }
        check_finite(&h, "output")?;

        Ok(ForwardTrace {
            ts: tsf,
            emb,
            time_pre,
            te,
            enc: enc_caches,
            mid: mid_cache,
            dec: dec_caches.into_iter().map(|c| c.expect("every level ran")).collect(),
            raw: raw.into_iter().map(|r| r.expect("every site recorded")).collect(),
            steered: steered.into_iter().map(|r| r.expect("every site recorded")).collect(),
            output: h,
        })
    }

    /// Back-propagates `d_out = ∂L/∂output` through a recorded pass.
    ///
    /// Returns `∂L/∂(steered feature)` for every site in topology order. When
    /// `grads` is given (same length as the parameter store) parameter
    /// gradients are accumulated into it.
    pub fn backward(&self, trace: &ForwardTrace, d_out: ArrayView2<f64>, mut grads: Option<&mut [f64]>) -> Result<Vec<Array2<f64>>> {
        if d_out.dim() != trace.output.dim() {
            return Err(Error::shape(format!("{:?}", trace.output.dim()), format!("{:?}", d_out.dim())));
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::shape(format!("{} gradient slots", self.params.len()), g.len()));
            }
        }
        let p = self.params.data();
        let act = self.activation;
        let te = trace.te.view();
        let levels = self.levels();
        let mut site_grads: Vec<Option<Array2<f64>>> = vec![None; self.sites.len()];
        let mut dte_total: Option<Array2<f64>> = None;
        let mut add_dte = |d: Option<Array2<f64>>| {
            if let Some(d) = d {
                match dte_total.as_mut() {
                    Some(acc) => *acc += &d,
                    None => dte_total = Some(d),
                }
            }
        };

        let mut dh = d_out.to_owned();
        let mut dskips: Vec<Option<Array2<f64>>> = vec![None; levels];
        for i in 0..levels {
            site_grads[self.pos(SiteCategory::D, i)] = Some(dh.clone());
            let (din, dte) = self.dec[i].backward(p, &trace.dec[i], te, dh.view(), grads.as_deref_mut(), act);
            add_dte(dte);
            let w = self.config.feature_dims[i + 1];
            dh = din.slice(s![.., ..w]).to_owned();
            let dskip = din.slice(s![.., w..]).to_owned();
            site_grads[self.pos(SiteCategory::ED, i)] = Some(dskip.clone());
            dskips[i] = Some(dskip);
        }
        site_grads[self.pos(SiteCategory::MB, 0)] = Some(dh.clone());
        let (dx, dte) = self.mid.backward(p, &trace.mid, te, dh.view(), grads.as_deref_mut(), act);
        add_dte(dte);
        dh = dx;
        for i in (0..levels).rev() {
            dh += dskips[i].as_ref().expect("filled above");
            site_grads[self.pos(SiteCategory::E, i)] = Some(dh.clone());
            let (dx, dte) = self.enc[i].backward(p, &trace.enc[i], te, dh.view(), grads.as_deref_mut(), act);
            add_dte(dte);
            dh = dx;
        }
        if let (Some(g), Some(dte)) = (grads, dte_total) {
            let hidden = act.apply(&trace.time_pre);
            let dhid = self.time_fc2.backward(p, hidden.view(), dte.view(), Some(&mut *g));
            let dpre = act.backward(&trace.time_pre, dhid.view());
            self.time_fc1.accumulate(g, trace.emb.view(), dpre.view());
        }
        Ok(site_grads.into_iter().map(|g| g.expect("every site visited")).collect())
    }

    /// Batched noise prediction; `cond` rows are flattened conditions when
    /// the backbone was built with `condition_dim > 0`.
    pub fn denoise_batch(&self, z: ArrayView2<f64>, ts: &[usize], cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(z, ts, cond, &[])?.output)
    }

    /// Noise prediction at a single point.
    pub fn denoise(&self, z: &[f64], t: usize, condition: Option<&Condition>) -> Result<Vec<f64>> {
        let zv = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::shape(self.config.input_dim, e))?;
        let c = condition.map(|c| Array2::from_shape_vec((1, c.dim()), c.flatten()).expect("row"));
        Ok(self.denoise_batch(zv, &[t], c.as_ref().map(|c| c.view()))?.row(0).to_vec())
    }

    /// Every site's feature from one plain forward pass at a single point.
    pub fn hidden_features(&self, z: &[f64], t: usize) -> Result<BTreeMap<SiteId, Vec<f64>>> {
        let zv = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::shape(self.config.input_dim, e))?;
        let trace = self.forward_trace(zv, &[t], None, &[])?;
        Ok(self.sites.iter().zip(&trace.raw).map(|(s, f)| (s.id, f.row(0).to_vec())).collect())
    }

    pub fn to_checkpoint(&self) -> BackboneCheckpoint {
        BackboneCheckpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            activation: self.activation,
            tensors: self.params.to_named(),
        }
    }

    pub fn from_checkpoint(ckpt: &BackboneCheckpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: ckpt.format_version, expected: CHECKPOINT_VERSION });
        }
        let mut model = build_toy_unet(&ckpt.config, 0)?;
        model.activation = ckpt.activation;
        model.params.load_named(&ckpt.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.output.nrows()
    }

    pub fn steps(&self) -> &[f64] {
        &self.ts
    }
}

/// On-disk backbone record (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneCheckpoint {
    pub format_version: u32,
    pub config: UNetConfig,
    pub activation: Activation,
    pub tensors: Vec<NamedTensor>,
}
