//! Synthetic 2D ring mixtures and isotropic Gaussian mixtures.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

fn validate_weights(weights: &[f64], expected: usize) -> Result<()> {
    if weights.len() != expected || expected == 0 {
        return Err(Error::Parameter(format!("expected {expected} mixture weights, got {}", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Parameter("mixture weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::Parameter(format!("mixture weights sum to {total}, not 1")));
    }
    Ok(())
}

fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding gap above the last cumulative weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub center: [f64; 2],
    pub r_inner: f64,
    pub r_outer: f64,
}

impl Ring {
    pub fn radius_of(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1])
    }

    pub fn midline(&self) -> f64 {
        0.5 * (self.r_inner + self.r_outer)
    }

    /// Uniform draw over the annulus area: angle uniform, radius density ∝ r.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let theta = 2.0 * PI * rng.random::<f64>();
        let (ri2, ro2) = (self.r_inner * self.r_inner, self.r_outer * self.r_outer);
        let r = (ri2 + rng.random::<f64>() * (ro2 - ri2)).sqrt();
        // guard the closed interval against rounding in sqrt
        let r = r.clamp(self.r_inner, self.r_outer);
        [self.center[0] + r * theta.cos(), self.center[1] + r * theta.sin()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingMixtureSpec {
    pub rings: Vec<Ring>,
    pub weights: Vec<f64>,
}

impl Default for RingMixtureSpec {
    fn default() -> Self {
        default_ring_spec()
    }
}

impl RingMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        for (k, r) in self.rings.iter().enumerate() {
            if !(r.r_inner > 0.0 && r.r_inner < r.r_outer) {
                return Err(Error::Parameter(format!("ring {k}: need 0 < r_inner < r_outer")));
            }
        }
        validate_weights(&self.weights, self.rings.len())
    }

    pub fn classes(&self) -> usize {
        self.rings.len()
    }
}

/// Two equal rings at (0,0) and (5,0) with radii 0.6–1.0 and weights 0.7/0.3.
pub fn default_ring_spec() -> RingMixtureSpec {
    let ring = |x| Ring { center: [x, 0.0], r_inner: 0.6, r_outer: 1.0 };
    RingMixtureSpec { rings: vec![ring(0.0), ring(5.0)], weights: vec![0.7, 0.3] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    /// Per-coordinate variance of the isotropic component.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub components: Vec<GaussianComponent>,
    pub weights: Vec<f64>,
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        for (k, c) in self.components.iter().enumerate() {
            if !(c.variance > 0.0) {
                return Err(Error::Parameter(format!("component {k}: variance must be positive")));
            }
            if c.mean.len() != dim || dim == 0 {
                return Err(Error::Parameter(format!("component {k}: mean has dimension {}, expected {dim}", c.mean.len())));
            }
        }
        validate_weights(&self.weights, self.components.len())
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }
}

/// Points with integer labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(points: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if points.nrows() != labels.len() {
            return Err(Error::shape(format!("{} labels", points.nrows()), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Parameter(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self { points, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Rows `idx` as a new dataset.
    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        let points = self.points.select(ndarray::Axis(0), idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset { points, labels, classes: self.classes }
    }

    /// Text form: a `# d=<dim> k=<classes>` header, then one
    /// whitespace-separated `x_1 … x_d label` row per point.
    pub fn to_text(&self) -> String {
        let mut out = format!("# d={} k={}\n", self.dim(), self.classes);
        for (row, label) in self.points.rows().into_iter().zip(&self.labels) {
            for v in row {
                let _ = write!(out, "{v:e} ");
            }
            let _ = writeln!(out, "{label}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
        let mut dim = None;
        let mut classes = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("d", v)) => dim = v.parse::<usize>().ok(),
                Some(("k", v)) => classes = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (Some(dim), Some(classes)) = (dim, classes) else {
            return Err(Error::Format(format!("bad dataset header {header:?}")));
        };
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != dim + 1 {
                return Err(Error::Format(format!("row {}: expected {} fields", no + 2, dim + 1)));
            }
            for f in &fields[..dim] {
                values.push(f.parse::<f64>().map_err(|e| Error::Format(format!("row {}: {e}", no + 2)))?);
            }
            labels.push(fields[dim].parse::<usize>().map_err(|e| Error::Format(format!("row {}: {e}", no + 2)))?);
        }
        let points = Array2::from_shape_vec((labels.len(), dim), values).map_err(|e| Error::Format(e.to_string()))?;
        LabeledDataset::new(points, labels, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the text form, used for run provenance.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

pub fn sample_ring_mixture(spec: &RingMixtureSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = categorical(&spec.weights, &mut rng);
        let p = spec.rings[k].sample(&mut rng);
        points[[i, 0]] = p[0];
        points[[i, 1]] = p[1];
        labels.push(k);
    }
    LabeledDataset::new(points, labels, spec.classes())
}

/// `n` points from ring `k` alone, all labeled `k`.
pub fn sample_ring(spec: &RingMixtureSpec, k: usize, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let ring = spec.rings.get(k).ok_or(Error::Index { index: k, max: spec.classes().saturating_sub(1) })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array2::zeros((n, 2));
    for i in 0..n {
        let p = ring.sample(&mut rng);
        points[[i, 0]] = p[0];
        points[[i, 1]] = p[1];
    }
    LabeledDataset::new(points, vec![k; n], spec.classes())
}

pub fn sample_gaussian_mixture(spec: &GaussianMixtureSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let d = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = categorical(&spec.weights, &mut rng);
        let c = &spec.components[k];
        let sd = c.variance.sqrt();
        for j in 0..d {
            points[[i, j]] = c.mean[j] + sd * rng.sample::<f64, _>(StandardNormal);
        }
        labels.push(k);
    }
    LabeledDataset::new(points, labels, spec.components.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_values() {
        let s = default_ring_spec();
        assert_eq!(s.rings[0].center, [0.0, 0.0]);
        assert_eq!(s.rings[1].center, [5.0, 0.0]);
        assert_eq!(s.weights, vec![0.7, 0.3]);
        for r in &s.rings {
            assert_eq!((r.r_inner, r.r_outer), (0.6, 1.0));
        }
        s.validate().unwrap();
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = default_ring_spec();
        s.weights = vec![0.7, 0.4];
        assert!(s.validate().is_err());
        let mut s = default_ring_spec();
        s.rings[0].r_inner = 1.2;
        assert!(s.validate().is_err());
        let g = GaussianMixtureSpec {
            components: vec![GaussianComponent { mean: vec![0.0], variance: 0.0 }],
            weights: vec![1.0],
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn empty_draws() {
        assert!(sample_ring_mixture(&default_ring_spec(), 0, 1).unwrap().is_empty());
        let g = GaussianMixtureSpec {
            components: vec![GaussianComponent { mean: vec![1.0, 2.0], variance: 0.5 }],
            weights: vec![1.0],
        };
        assert!(sample_gaussian_mixture(&g, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn ring_samples_lie_in_their_annulus() {
        let s = default_ring_spec();
        let d = sample_ring_mixture(&s, 20_000, 3).unwrap();
        for (row, &k) in d.points.rows().into_iter().zip(&d.labels) {
            let r = s.rings[k].radius_of([row[0], row[1]]);
            assert!((0.6..=1.0).contains(&r), "radius {r}");
        }
    }

    #[test]
    fn seeded_determinism() {
        let s = default_ring_spec();
        assert_eq!(sample_ring_mixture(&s, 100, 5).unwrap(), sample_ring_mixture(&s, 100, 5).unwrap());
        assert_ne!(sample_ring_mixture(&s, 100, 5).unwrap(), sample_ring_mixture(&s, 100, 6).unwrap());
    }

    #[test]
    fn text_format_round_trip() {
        let d = sample_ring_mixture(&default_ring_spec(), 50, 11).unwrap();
        let back = LabeledDataset::from_text(&d.to_text()).unwrap();
        assert_eq!(back, d);
        assert!(LabeledDataset::from_text("# d=2 k=2\n1 2\n").is_err());
        assert!(LabeledDataset::from_text("# d=2 k=2\n1 2 5\n").is_err());
    }
}
