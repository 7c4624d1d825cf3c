//! Support-membership metrics, fine-tuning sweeps and plots.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use plotters::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::DenoiserModel;
use crate::conditions::{encode_ring_label, Condition};
use crate::datasets::{sample_ring, sample_ring_mixture, RingMixtureSpec};
use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::steering::{build_steering_module_with, integrated_denoise_shared, IntegrationMode, SteeringConfig, SteeringModule, WeightPolicy};
use crate::training::{finetune_with_hook, TrainConfig};

pub const DEFAULT_BAND: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub mode: IntegrationMode,
    pub n_labeled: usize,
    pub epoch: usize,
    pub seed: u64,
    pub target: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub band: f64,
    pub wall_time_s: f64,
}

/// Ring whose band `[r_inner − band, r_outer + band]` contains `p`.
///
/// When bands overlap the ring with the nearest midline wins.
pub fn ring_membership(p: [f64; 2], spec: &RingMixtureSpec, band: f64) -> Option<usize> {
    spec.rings
        .iter()
        .enumerate()
        .filter_map(|(k, ring)| {
            let r = ring.radius_of(p);
            (r >= ring.r_inner - band && r <= ring.r_outer + band).then(|| (k, (r - ring.midline()).abs()))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

/// `(accuracy, precision)`: the fraction of samples assigned to `target`,
/// and the same fraction among samples assigned to any ring (0 when none is).
pub fn support_accuracy(samples: ArrayView2<f64>, target: usize, spec: &RingMixtureSpec, band: f64) -> Result<(f64, f64)> {
    if samples.nrows() == 0 {
        return Err(Error::Parameter("no samples to score".into()));
    }
    if samples.ncols() != 2 {
        return Err(Error::shape(2, samples.ncols()));
    }
    if !(band >= 0.0) {
        return Err(Error::Parameter("band must be nonnegative".into()));
    }
    let (mut hit, mut any) = (0usize, 0usize);
    for row in samples.outer_iter() {
        if let Some(k) = ring_membership([row[0], row[1]], spec, band) {
            any += 1;
            hit += usize::from(k == target);
        }
    }
    let n = samples.nrows() as f64;
    Ok((hit as f64 / n, if any == 0 { 0.0 } else { hit as f64 / any as f64 }))
}

/// Logistic one-vs-rest classifier on raw coordinates.
///
/// Recipe: 10K points from the ring mixture, coordinates standardized,
/// 500 full-batch gradient steps at rate 0.5 on the mean log-loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub target: usize,
    pub mean: [f64; 2],
    pub scale: [f64; 2],
    pub weights: [f64; 3],
}

impl LinearClassifier {
    pub fn train(spec: &RingMixtureSpec, target: usize, seed: u64) -> Result<Self> {
        let data = sample_ring_mixture(spec, 10_000, seed)?;
        let n = data.len() as f64;
        let mut mean = [0.0; 2];
        let mut scale = [0.0; 2];
        for j in 0..2 {
            let col = data.points.column(j);
            mean[j] = col.sum() / n;
            scale[j] = (col.mapv(|v| (v - mean[j]).powi(2)).sum() / n).sqrt().max(1e-12);
        }
        let feats: Vec<[f64; 2]> = data
            .points
            .outer_iter()
            .map(|r| [(r[0] - mean[0]) / scale[0], (r[1] - mean[1]) / scale[1]])
            .collect();
        let ys: Vec<f64> = data.labels.iter().map(|&l| f64::from(u8::from(l == target))).collect();
        let mut w = [0.0; 3];
        for _ in 0..500 {
            let mut g = [0.0; 3];
            for (x, y) in feats.iter().zip(&ys) {
                let p = sigmoid(w[0] * x[0] + w[1] * x[1] + w[2]);
                let e = p - y;
                g[0] += e * x[0];
                g[1] += e * x[1];
                g[2] += e;
            }
            for j in 0..3 {
                w[j] -= 0.5 * g[j] / n;
            }
        }
        Ok(Self { target, mean, scale, weights: w })
    }

    pub fn predicts_target(&self, p: [f64; 2]) -> bool {
        let x = [(p[0] - self.mean[0]) / self.scale[0], (p[1] - self.mean[1]) / self.scale[1]];
        self.weights[0] * x[0] + self.weights[1] * x[1] + self.weights[2] > 0.0
    }

    /// Accuracy is the fraction classified as the target; precision is the
    /// same fraction among samples inside any ring band.
    pub fn score(&self, samples: ArrayView2<f64>, spec: &RingMixtureSpec, band: f64) -> Result<(f64, f64)> {
        if samples.nrows() == 0 {
            return Err(Error::Parameter("no samples to score".into()));
        }
        let (mut hit, mut any, mut hit_any) = (0usize, 0usize, 0usize);
        for row in samples.outer_iter() {
            let p = [row[0], row[1]];
            let t = self.predicts_target(p);
            hit += usize::from(t);
            if ring_membership(p, spec, band).is_some() {
                any += 1;
                hit_any += usize::from(t);
            }
        }
        let prec = if any == 0 { 0.0 } else { hit_any as f64 / any as f64 };
        Ok((hit as f64 / samples.nrows() as f64, prec))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// How generated samples are scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scorer {
    Analytic,
    Linear(LinearClassifier),
}

impl Scorer {
    pub fn score(&self, samples: ArrayView2<f64>, target: usize, spec: &RingMixtureSpec, band: f64) -> Result<(f64, f64)> {
        match self {
            Scorer::Analytic => support_accuracy(samples, target, spec, band),
            Scorer::Linear(c) => c.score(samples, spec, band),
        }
    }
}

/// Samples from the unsteered backbone.
pub fn generate_prior(backbone: &DenoiserModel, sched: &NoiseSchedule, n: usize, sampler: &SamplerConfig, seed: u64) -> Result<Array2<f64>> {
    sample(
        |z, t, _| backbone.denoise_batch(z, &vec![t; z.nrows()], None),
        sched,
        n,
        backbone.input_dim(),
        None,
        sampler,
        seed,
    )
}

/// Samples from the backbone steered by `module` under `condition`.
pub fn generate_steered(
    backbone: &DenoiserModel,
    module: &SteeringModule,
    sched: &NoiseSchedule,
    n: usize,
    condition: &Condition,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    sample(
        |z, t, c| integrated_denoise_shared(backbone, module, z, t, c.expect("condition is always passed")),
        sched,
        n,
        backbone.input_dim(),
        Some(condition),
        sampler,
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub modes: Vec<IntegrationMode>,
    pub n_labeled: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Epochs at which the module is evaluated; 0 scores the untrained module.
    pub checkpoints: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self { modes: IntegrationMode::ALL_MODES.to_vec(), n_labeled: vec![12], seeds: (0..5).collect(), checkpoints: vec![2500] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: IntegrationMode,
    pub n_labeled: usize,
    pub seed: u64,
}

impl SweepCell {
    pub fn run_id(&self, epoch: usize) -> String {
        format!("{}-n{}-s{}-e{}", self.mode.name(), self.n_labeled, self.seed, epoch)
    }
}

impl SweepGrid {
    /// Cells in mode-major, then n, then seed order.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &n_labeled in &self.n_labeled {
                for &seed in &self.seeds {
                    out.push(SweepCell { mode, n_labeled, seed });
                }
            }
        }
        out
    }

    pub fn sorted_checkpoints(&self) -> Vec<usize> {
        self.checkpoints.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Every run id the grid will produce, in execution order.
    pub fn run_ids(&self) -> Vec<String> {
        let cps = self.sorted_checkpoints();
        self.cells().iter().flat_map(|c| cps.iter().map(|&e| c.run_id(e)).collect::<Vec<_>>()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub spec: RingMixtureSpec,
    pub target: usize,
    /// Epoch count is taken from the largest checkpoint.
    pub finetune: TrainConfig,
    pub weight_policy: WeightPolicy,
    pub eval_samples: usize,
    pub sampler: SamplerConfig,
    pub band: f64,
    pub scorer: Scorer,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            spec: RingMixtureSpec::default(),
            target: 1,
            finetune: TrainConfig::finetune_default(),
            weight_policy: WeightPolicy::Uniform,
            eval_samples: 1000,
            sampler: SamplerConfig::ddim(50),
            band: DEFAULT_BAND,
            scorer: Scorer::Analytic,
        }
    }
}

/// Seed mixing so that the labeled set and the sampling noise depend on the
/// cell seed and `n` but not on the mode: modes are compared on common
/// random numbers.
fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Labeled fine-tuning set for a cell: `n` points from the target ring.
pub fn labeled_set(settings: &SweepSettings, cell: &SweepCell) -> Result<crate::datasets::LabeledDataset> {
    sample_ring(&settings.spec, settings.target, cell.n_labeled, derive_seed(cell.seed, 1 + cell.n_labeled as u64))
}

/// Fine-tunes one cell and scores it at every checkpoint.
pub fn run_cell(
    backbone: &DenoiserModel,
    sched: &NoiseSchedule,
    cell: &SweepCell,
    checkpoints: &[usize],
    settings: &SweepSettings,
) -> Result<Vec<MetricsRecord>> {
    let start = Instant::now();
    let classes = settings.spec.classes();
    let condition = encode_ring_label(settings.target, classes)?;
    let labeled = labeled_set(settings, cell)?;
    let mut scfg = SteeringConfig::new(cell.mode, condition.dim());
    scfg.weight_policy = settings.weight_policy;
    let mut module = build_steering_module_with(backbone, &scfg, cell.seed)?;
    let sample_seed = derive_seed(cell.seed, 0);
    let score = |m: &SteeringModule, epoch: usize| -> Result<MetricsRecord> {
        let s = generate_steered(backbone, m, sched, settings.eval_samples, &condition, &settings.sampler, sample_seed)?;
        let (accuracy, precision) = settings.scorer.score(s.view(), settings.target, &settings.spec, settings.band)?;
        Ok(MetricsRecord {
            run_id: cell.run_id(epoch),
            mode: cell.mode,
            n_labeled: cell.n_labeled,
            epoch,
            seed: cell.seed,
            target: settings.target,
            accuracy,
            precision,
            band: settings.band,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    };
    let mut cps: Vec<usize> = checkpoints.to_vec();
    cps.sort_unstable();
    cps.dedup();
    let mut out = Vec::with_capacity(cps.len());
    if cps.first() == Some(&0) {
        out.push(score(&module, 0)?);
    }
    let wanted: BTreeSet<usize> = cps.iter().copied().filter(|&e| e > 0).collect();
    let epochs = wanted.iter().next_back().copied().unwrap_or(0);
    if epochs > 0 {
        let cfg = TrainConfig { epochs, seed: cell.seed, ..settings.finetune.clone() };
        let mut hook = |epoch: usize, target: &crate::training::FinetuneTarget<'_>| -> Result<()> {
            if wanted.contains(&epoch) {
                out.push(score(target.module, epoch)?);
            }
            Ok(())
        };
        finetune_with_hook(backbone, &mut module, &labeled, sched, &cfg, &|k| encode_ring_label(k, classes), &mut hook)?;
    }
    Ok(out)
}

/// Reads records written by [`append_records`].
pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Appends records to a CSV file, writing the header if the file is new.
pub fn append_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every grid cell not already present in `sink`, appending each
/// finished cell's records. Returns the full record set in grid order.
pub fn run_sweep(
    backbone: &DenoiserModel,
    sched: &NoiseSchedule,
    grid: &SweepGrid,
    settings: &SweepSettings,
    sink: Option<&Path>,
) -> Result<Vec<MetricsRecord>> {
    if !backbone.is_frozen() {
        return Err(Error::Config("sweep requires a frozen pretrained backbone".into()));
    }
    let cps = grid.sorted_checkpoints();
    let mut done: BTreeMap<String, MetricsRecord> = BTreeMap::new();
    if let Some(path) = sink {
        for r in read_records(path)? {
            done.entry(r.run_id.clone()).or_insert(r);
        }
    }
    let todo: Vec<SweepCell> = grid
        .cells()
        .into_iter()
        .filter(|c| cps.iter().any(|&e| !done.contains_key(&c.run_id(e))))
        .collect();
    let writer = Mutex::new(());
    let fresh: Vec<Vec<MetricsRecord>> = todo
        .par_iter()
        .map(|cell| {
            let recs = run_cell(backbone, sched, cell, &cps, settings)?;
            if let Some(path) = sink {
                let missing: Vec<MetricsRecord> = recs.iter().filter(|r| !done.contains_key(&r.run_id)).cloned().collect();
                let _guard = writer.lock().expect("writer lock");
                append_records(path, &missing)?;
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    for r in fresh.into_iter().flatten() {
        done.entry(r.run_id.clone()).or_insert(r);
    }
    Ok(grid.run_ids().into_iter().filter_map(|id| done.remove(&id)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSweepRecord {
    pub factor: f64,
    pub accuracy: f64,
    pub precision: f64,
}

/// Scores a trained module with every injection weight multiplied by each
/// factor in turn.
pub fn run_weight_sweep(
    backbone: &DenoiserModel,
    module: &SteeringModule,
    sched: &NoiseSchedule,
    factors: &[f64],
    settings: &SweepSettings,
    seed: u64,
) -> Result<Vec<WeightSweepRecord>> {
    let condition = encode_ring_label(settings.target, settings.spec.classes())?;
    factors
        .iter()
        .map(|&factor| {
            let scaled = module.with_scaled_weights(factor)?;
            let s = generate_steered(backbone, &scaled, sched, settings.eval_samples, &condition, &settings.sampler, seed)?;
            let (accuracy, precision) = settings.scorer.score(s.view(), settings.target, &settings.spec, settings.band)?;
            Ok(WeightSweepRecord { factor, accuracy, precision })
        })
        .collect()
}

/// Mean accuracy per mode over all records at `epoch`.
pub fn mean_accuracy_by_mode(records: &[MetricsRecord], epoch: usize, n_labeled: usize) -> BTreeMap<IntegrationMode, f64> {
    let mut acc: BTreeMap<IntegrationMode, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.epoch == epoch && r.n_labeled == n_labeled) {
        let e = acc.entry(r.mode).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    acc.into_iter().map(|(m, (s, c))| (m, s / c as f64)).collect()
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot rendering failed: {e}"))
}

const PALETTE: [RGBColor; 9] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
    RGBColor(23, 190, 207),
];

fn mode_color(mode: IntegrationMode) -> RGBColor {
    let i = IntegrationMode::ALL_MODES.iter().position(|&m| m == mode).unwrap_or(0);
    PALETTE[i % PALETTE.len()]
}

/// Line chart with one series per mode.
fn line_chart(path: &Path, title: &str, x_label: &str, series: &BTreeMap<IntegrationMode, Vec<(f64, f64)>>) -> Result<()> {
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if x1 - x0 < 1e-9 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).y_desc("accuracy").draw().map_err(plot_err)?;
    for (&mode, pts) in series {
        let color = mode_color(mode);
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(mode.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Per-mode mean of `metric` keyed by `x`, over records passing `filter`.
fn mean_series(
    records: &[MetricsRecord],
    filter: impl Fn(&MetricsRecord) -> bool,
    x: impl Fn(&MetricsRecord) -> usize,
) -> BTreeMap<IntegrationMode, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<IntegrationMode, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in records.iter().filter(|r| filter(r)) {
        let e = acc.entry(r.mode).or_default().entry(x(r)).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(m, pts)| (m, pts.into_iter().map(|(x, (s, c))| (x as f64, s / c as f64)).collect()))
        .collect()
}

/// Writes accuracy plots, returning the paths written.
///
/// * `accuracy_vs_epoch_n{N}.svg` for every labeled-set size `N`, one line
///   per mode, averaged over seeds.
/// * `accuracy_vs_n.svg` at the last checkpoint, when more than one `N` is
///   present.
pub fn emit_plots(records: &[MetricsRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Parameter("no records to plot".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ns: BTreeSet<usize> = records.iter().map(|r| r.n_labeled).collect();
    let mut written = Vec::new();
    for &n in &ns {
        let path = out_dir.join(format!("accuracy_vs_epoch_n{n}.svg"));
        let series = mean_series(records, |r| r.n_labeled == n, |r| r.epoch);
        line_chart(&path, &format!("target accuracy, n = {n}"), "fine-tuning epoch", &series)?;
        written.push(path);
    }
    if ns.len() > 1 {
        let last = records.iter().map(|r| r.epoch).max().expect("nonempty");
        let path = out_dir.join("accuracy_vs_n.svg");
        let series = mean_series(records, |r| r.epoch == last, |r| r.n_labeled);
        line_chart(&path, &format!("target accuracy at epoch {last}"), "labeled samples", &series)?;
        written.push(path);
    }
    Ok(written)
}

/// Scatter plot of 2D samples over the ring outlines.
pub fn emit_scatter(samples: ArrayView2<f64>, spec: &RingMixtureSpec, title: &str, path: &Path) -> Result<()> {
    if samples.ncols() != 2 {
        return Err(Error::shape(2, samples.ncols()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for ring in &spec.rings {
        for j in 0..2 {
            lo[j] = lo[j].min(ring.center[j] - ring.r_outer - 1.0);
            hi[j] = hi[j].max(ring.center[j] + ring.r_outer + 1.0);
        }
    }
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(lo[0]..hi[0], lo[1]..hi[1])
        .map_err(plot_err)?;
    chart.configure_mesh().draw().map_err(plot_err)?;
    for ring in &spec.rings {
        for r in [ring.r_inner, ring.r_outer] {
            let pts = (0..=120).map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 120.0;
                (ring.center[0] + r * a.cos(), ring.center[1] + r * a.sin())
            });
            chart.draw_series(LineSeries::new(pts, BLACK.stroke_width(1))).map_err(plot_err)?;
        }
    }
    chart
        .draw_series(
            samples
                .outer_iter()
                .filter(|p| p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1])
                .map(|p| Circle::new((p[0], p[1]), 1, PALETTE[0].mix(0.6).filled())),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
