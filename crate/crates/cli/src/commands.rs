use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, ValueEnum};
use sha2::{Digest, Sha256};
use steerlab::backbone::{build_toy_unet, DenoiserModel};
use steerlab::conditions::{encode_layout as encode_boxes, encode_ring_label, parse_layout_boxes, Condition};
use steerlab::config::{ExperimentConfig, ScorerKind};
use steerlab::datasets::sample_ring_mixture;
use steerlab::diffusion::{sample as run_sampler, NoiseSchedule};
use steerlab::eval::{
    emit_plots, emit_scatter, generate_prior, generate_steered, labeled_set, mean_accuracy_by_mode, ring_membership, run_sweep,
    LinearClassifier, Scorer, SweepCell, SweepSettings,
};
use steerlab::oracle::run_oracle_suite;
use steerlab::steering::{build_steering_module_with, IntegrationMode, SteeringConfig, SteeringModule};
use steerlab::training::{append_loss_history, finetune_with_hook, pretrain_with_hook};
use steerlab::{Error, Result};

use crate::manifest::Manifest;
use crate::GlobalArgs;

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    dry_run: bool,
}

impl Context {
    fn load(global: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &global.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = global.seed {
            cfg.override_seed(seed);
        }
        if let Some(out) = &global.out {
            cfg.out_dir = out.clone();
        }
        let out = cfg.out_dir.clone();
        Ok(Self { cfg, out, dry_run: global.dry_run })
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::try_from(self.cfg.schedule)
    }

    fn sweep_settings(&self) -> Result<SweepSettings> {
        let scorer = match self.cfg.eval.scorer {
            ScorerKind::Analytic => Scorer::Analytic,
            ScorerKind::Linear => Scorer::Linear(LinearClassifier::train(&self.cfg.rings, self.cfg.steering.target, self.cfg.seed)?),
        };
        Ok(SweepSettings {
            spec: self.cfg.rings.clone(),
            target: self.cfg.steering.target,
            finetune: self.cfg.finetune.clone(),
            weight_policy: self.cfg.steering.weight_policy,
            eval_samples: self.cfg.eval.samples,
            sampler: self.cfg.eval.sampler,
            band: self.cfg.eval.band,
            scorer,
        })
    }

    fn backbone_path(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join("backbone.json"))
    }

    fn load_backbone(&self, explicit: &Option<PathBuf>) -> Result<DenoiserModel> {
        let path = self.backbone_path(explicit);
        if !path.exists() {
            return Err(Error::Config(format!("backbone checkpoint {} not found; run `pretrain` first", path.display())));
        }
        let mut model = DenoiserModel::load(&path)?;
        model.freeze();
        Ok(model)
    }

    fn target_condition(&self) -> Result<Condition> {
        encode_ring_label(self.cfg.steering.target, self.cfg.rings.classes())
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Overrides `pretrain.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Also saves `backbone-e{EPOCH}.json` every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Trains a conditional model from scratch on the labeled target set
    /// instead of the unconditional prior; writes `scratch.json`.
    #[arg(long)]
    scratch: bool,
}

pub fn pretrain(global: &GlobalArgs, args: PretrainArgs) -> Result<ExitCode> {
    let mut ctx = Context::load(global)?;
    if let Some(e) = args.epochs {
        ctx.cfg.pretrain.epochs = e;
    }
    let cfg = &ctx.cfg;
    let (data, name) = if args.scratch {
        let cell = SweepCell { mode: cfg.steering.mode, n_labeled: cfg.steering.n_labeled, seed: cfg.pretrain.seed };
        (labeled_set(&ctx.sweep_settings()?, &cell)?, "scratch")
    } else {
        (sample_ring_mixture(&cfg.rings, cfg.data.samples, cfg.data.seed)?, "backbone")
    };
    if ctx.dry_run {
        println!("pretrain {name}: {} points, {} epochs, batch {}", data.len(), cfg.pretrain.epochs, cfg.pretrain.batch_size);
        return Ok(ExitCode::SUCCESS);
    }
    ctx.ensure_out()?;
    let sched = ctx.schedule()?;
    let mut unet = cfg.unet.clone();
    let classes = cfg.rings.classes();
    let condition_fn = |k: usize| encode_ring_label(k, classes);
    if args.scratch {
        unet.condition_dim = classes;
    }
    let mut model = build_toy_unet(&unet, cfg.seed)?;
    let data_path = ctx.out.join(format!("{name}_data.txt"));
    data.save(&data_path)?;
    let out = ctx.out.clone();
    let every = args.checkpoint_every;
    let mut hook = |epoch: usize, t: &steerlab::training::PretrainTarget<'_>| -> Result<()> {
        if every > 0 && epoch.is_multiple_of(every) {
            t.model.save(&out.join(format!("{name}-e{epoch}.json")))?;
        }
        Ok(())
    };
    let cond: Option<&dyn Fn(usize) -> Result<Condition>> = if args.scratch { Some(&condition_fn) } else { None };
    let history = pretrain_with_hook(&data, &mut model, &sched, &cfg.pretrain, cond, &mut hook)?;
    model.save(&ctx.out.join(format!("{name}.json")))?;
    append_loss_history(&ctx.out.join("loss.csv"), &format!("pretrain-{name}-s{}", cfg.pretrain.seed), &history)?;
    Manifest::new("pretrain", cfg, cfg.seed)
        .input(data_path.display().to_string(), data.content_hash())
        .write(&ctx.out, name)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("pretrained {name}: loss {first:.4} -> {last:.4} over {} epochs", history.len());
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Backbone checkpoint; defaults to `OUT/backbone.json`.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Overrides `steering.mode` (ALL, EMD, E, EM, D, MD, E-D, ME-D, M).
    #[arg(long)]
    mode: Option<IntegrationMode>,
    /// Overrides `steering.n_labeled`.
    #[arg(long)]
    n_labeled: Option<usize>,
    /// Overrides `finetune.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Also saves `steering-{MODE}-e{EPOCH}.json` every this many epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

pub fn finetune(global: &GlobalArgs, args: FinetuneArgs) -> Result<ExitCode> {
    let mut ctx = Context::load(global)?;
    if let Some(m) = args.mode {
        ctx.cfg.steering.mode = m;
    }
    if let Some(n) = args.n_labeled {
        ctx.cfg.steering.n_labeled = n;
    }
    if let Some(e) = args.epochs {
        ctx.cfg.finetune.epochs = e;
    }
    let cfg = &ctx.cfg;
    let mode = cfg.steering.mode;
    if ctx.dry_run {
        println!(
            "finetune {}: {} labeled points from ring {}, {} epochs",
            mode.name(),
            cfg.steering.n_labeled,
            cfg.steering.target,
            cfg.finetune.epochs
        );
        return Ok(ExitCode::SUCCESS);
    }
    let backbone = ctx.load_backbone(&args.backbone)?;
    ctx.ensure_out()?;
    let sched = ctx.schedule()?;
    let cell = SweepCell { mode, n_labeled: cfg.steering.n_labeled, seed: cfg.finetune.seed };
    let labeled = labeled_set(&ctx.sweep_settings()?, &cell)?;
    let labeled_path = ctx.out.join(format!("labeled_n{}_s{}.txt", cell.n_labeled, cell.seed));
    labeled.save(&labeled_path)?;
    let classes = cfg.rings.classes();
    let mut scfg = SteeringConfig::new(mode, classes);
    scfg.weight_policy = cfg.steering.weight_policy;
    let mut module = build_steering_module_with(&backbone, &scfg, cfg.finetune.seed)?;
    let out = ctx.out.clone();
    let every = args.checkpoint_every;
    let mut hook = |epoch: usize, t: &steerlab::training::FinetuneTarget<'_>| -> Result<()> {
        if every > 0 && epoch.is_multiple_of(every) {
            t.module.save(&out.join(format!("steering-{}-e{epoch}.json", mode.name())))?;
        }
        Ok(())
    };
    let history = finetune_with_hook(&backbone, &mut module, &labeled, &sched, &cfg.finetune, &|k| encode_ring_label(k, classes), &mut hook)?;
    module.save(&ctx.out.join(format!("steering-{}.json", mode.name())))?;
    append_loss_history(&ctx.out.join("loss.csv"), &format!("finetune-{}", cell.run_id(cfg.finetune.epochs)), &history)?;
    Manifest::new("finetune", cfg, cfg.finetune.seed)
        .input(labeled_path.display().to_string(), labeled.content_hash())
        .input("backbone", backbone.fingerprint())
        .write(&ctx.out, &format!("finetune-{}", mode.name()))?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("fine-tuned {}: loss {first:.4} -> {last:.4} over {} epochs", mode.name(), history.len());
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Steering module checkpoint; omit to sample the prior.
    #[arg(long)]
    module: Option<PathBuf>,
    #[arg(long, short = 'n', default_value_t = 1000)]
    count: usize,
    /// Output CSV; defaults to `OUT/samples.csv`. A scatter plot is written
    /// next to it with the extension `.svg`.
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn sample(global: &GlobalArgs, args: SampleArgs) -> Result<ExitCode> {
    let ctx = Context::load(global)?;
    if ctx.dry_run {
        println!("sample {} points with {:?}", args.count, ctx.cfg.eval.sampler);
        return Ok(ExitCode::SUCCESS);
    }
    let backbone = ctx.load_backbone(&args.backbone)?;
    ctx.ensure_out()?;
    let sched = ctx.schedule()?;
    let sampler = ctx.cfg.eval.sampler;
    let cond = ctx.target_condition()?;
    let samples = match &args.module {
        Some(p) => {
            let module = SteeringModule::load(p, &backbone)?;
            generate_steered(&backbone, &module, &sched, args.count, &cond, &sampler, ctx.cfg.seed)?
        }
        None if backbone.config().condition_dim > 0 => run_sampler(
            |z, t, c| {
                let flat = c.expect("condition is always passed").flatten();
                let cm = ndarray::Array2::from_shape_fn((z.nrows(), flat.len()), |(_, j)| flat[j]);
                backbone.denoise_batch(z, &vec![t; z.nrows()], Some(cm.view()))
            },
            &sched,
            args.count,
            backbone.input_dim(),
            Some(&cond),
            &sampler,
            ctx.cfg.seed,
        )?,
        None => generate_prior(&backbone, &sched, args.count, &sampler, ctx.cfg.seed)?,
    };
    let path = args.output.unwrap_or_else(|| ctx.out.join("samples.csv"));
    let mut text = String::from("x,y,ring\n");
    for row in samples.outer_iter() {
        let ring = ring_membership([row[0], row[1]], &ctx.cfg.rings, ctx.cfg.eval.band).map_or(String::new(), |k| k.to_string());
        text.push_str(&format!("{:e},{:e},{ring}\n", row[0], row[1]));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    emit_scatter(samples.view(), &ctx.cfg.rings, "generated samples", &path.with_extension("svg"))?;
    let mut manifest = Manifest::new("sample", &ctx.cfg, ctx.cfg.seed).input("backbone", backbone.fingerprint());
    if let Some(p) = &args.module {
        manifest = manifest.input(p.display().to_string(), sha256_file(p)?);
    }
    manifest.write(&ctx.out, "sample")?;
    println!("wrote {} samples to {}", samples.nrows(), path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// CSV of generated points: `x,y` in the first two columns, optional header.
    #[arg(long)]
    samples: PathBuf,
    /// Overrides `steering.target`.
    #[arg(long)]
    target: Option<usize>,
}

fn read_points(path: &Path) -> Result<ndarray::Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut flat = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut cols = line.split(',').map(str::trim);
        let (Some(x), Some(y)) = (cols.next(), cols.next()) else { continue };
        match (x.parse::<f64>(), y.parse::<f64>()) {
            (Ok(x), Ok(y)) => flat.extend([x, y]),
            _ if i == 0 => {}
            _ => return Err(Error::Format(format!("{}:{}: expected two numbers", path.display(), i + 1))),
        }
    }
    Ok(ndarray::Array2::from_shape_vec((flat.len() / 2, 2), flat).expect("pairs"))
}

pub fn evaluate(global: &GlobalArgs, args: EvaluateArgs) -> Result<ExitCode> {
    let mut ctx = Context::load(global)?;
    if let Some(t) = args.target {
        ctx.cfg.steering.target = t;
        ctx.cfg.validate()?;
    }
    if ctx.dry_run {
        println!("evaluate {} against ring {}", args.samples.display(), ctx.cfg.steering.target);
        return Ok(ExitCode::SUCCESS);
    }
    let points = read_points(&args.samples)?;
    let settings = ctx.sweep_settings()?;
    let (accuracy, precision) = settings.scorer.score(points.view(), settings.target, &settings.spec, settings.band)?;
    let report = serde_json::json!({
        "samples": points.nrows(),
        "target": settings.target,
        "band": settings.band,
        "scorer": ctx.cfg.eval.scorer,
        "accuracy": accuracy,
        "precision": precision,
    });
    println!("{report}");
    ctx.ensure_out()?;
    let path = ctx.out.join("evaluation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Manifest::new("evaluate", &ctx.cfg, ctx.cfg.seed)
        .input(args.samples.display().to_string(), sha256_file(&args.samples)?)
        .write(&ctx.out, "evaluate")?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    backbone: Option<PathBuf>,
}

pub fn sweep(global: &GlobalArgs, args: SweepArgs) -> Result<ExitCode> {
    let ctx = Context::load(global)?;
    let grid = &ctx.cfg.sweep;
    if ctx.dry_run {
        let ids = grid.run_ids();
        let mut listing = format!("{} cells, {} records\n", grid.cells().len(), ids.len());
        for id in ids {
            listing.push_str(&id);
            listing.push('\n');
        }
        // A closed pipe (e.g. `| head`) is not an error for a listing.
        let _ = std::io::Write::write_all(&mut std::io::stdout().lock(), listing.as_bytes());
        return Ok(ExitCode::SUCCESS);
    }
    let backbone = ctx.load_backbone(&args.backbone)?;
    ctx.ensure_out()?;
    let sched = ctx.schedule()?;
    let settings = ctx.sweep_settings()?;
    let sink = ctx.out.join("metrics.csv");
    let records = run_sweep(&backbone, &sched, grid, &settings, Some(&sink))?;
    if !records.is_empty() {
        emit_plots(&records, &ctx.out.join("plots"))?;
    }
    Manifest::new("sweep", &ctx.cfg, ctx.cfg.seed).input("backbone", backbone.fingerprint()).write(&ctx.out, "sweep")?;
    let last = grid.sorted_checkpoints().last().copied().unwrap_or(0);
    for &n in &grid.n_labeled {
        let means = mean_accuracy_by_mode(&records, last, n);
        let line: Vec<String> = means.iter().map(|(m, a)| format!("{}={a:.3}", m.name())).collect();
        println!("n={n} epoch={last} band={} {}", settings.band, line.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Maximum absolute error accepted.
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
}

pub fn oracle_check(global: &GlobalArgs, args: OracleArgs) -> Result<ExitCode> {
    let ctx = Context::load(global)?;
    if ctx.dry_run {
        println!("oracle-check: 3 mixtures, 21x21 grid, tolerance {:e}", args.tolerance);
        return Ok(ExitCode::SUCCESS);
    }
    let reports = run_oracle_suite(&ctx.schedule()?)?;
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{}: {} points x {:?} -> max error {:e}", r.mixture, r.grid_points, r.timesteps, r.max_error);
        worst = worst.max(r.max_error);
    }
    println!("max error {worst:e} (tolerance {:e})", args.tolerance);
    ctx.ensure_out()?;
    Manifest::new("oracle-check", &ctx.cfg, ctx.cfg.seed).write(&ctx.out, "oracle-check")?;
    if worst <= args.tolerance {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: max error {worst:e} exceeds tolerance {:e}", args.tolerance);
        Ok(ExitCode::FAILURE)
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum LayoutFormat {
    Text,
    Json,
}

#[derive(Args, Debug)]
pub struct LayoutArgs {
    /// Box list, one `label x0 y0 x1 y1` per line (half-open pixel ranges).
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, value_enum, default_value_t = LayoutFormat::Text)]
    format: LayoutFormat,
}

fn render_layout(args: &LayoutArgs) -> Result<String> {
    let text = std::fs::read_to_string(&args.boxes).map_err(|e| Error::io(&args.boxes, e))?;
    let boxes = parse_layout_boxes(&text)?;
    let Condition::Layout(grid) = encode_boxes(&boxes, args.height, args.width)? else {
        unreachable!("encode_layout returns a layout")
    };
    Ok(match args.format {
        LayoutFormat::Json => serde_json::to_string(&grid)?,
        LayoutFormat::Text => {
            let mut s = String::new();
            for y in 0..grid.height() {
                let row: Vec<String> = (0..grid.width())
                    .map(|x| {
                        let (sum, count) = grid.at(x, y);
                        format!("{sum}/{count}")
                    })
                    .collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
            s
        }
    })
}

pub fn encode_layout(global: &GlobalArgs, args: LayoutArgs) -> Result<ExitCode> {
    let ctx = Context::load(global)?;
    if ctx.dry_run {
        println!("encode-layout {} on a {}x{} grid", args.boxes.display(), args.height, args.width);
        return Ok(ExitCode::SUCCESS);
    }
    print!("{}", render_layout(&args)?);
    ctx.ensure_out()?;
    Manifest::new("encode-layout", &ctx.cfg, ctx.cfg.seed)
        .input(args.boxes.display().to_string(), sha256_file(&args.boxes)?)
        .write(&ctx.out, "encode-layout")?;
    Ok(ExitCode::SUCCESS)
}
