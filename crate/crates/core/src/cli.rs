//! The `gzf` command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DatasetManifest;
use crate::error::{config_err, Error, Result};
use crate::model::{FusionKind, GazeEncoderKind, ModelConfig};
use crate::nd::EPS_RANGE;
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::{
    evaluate, load_checkpoint, save_checkpoint, write_json, write_metrics, DataSplits,
    TrainConfig, TrainSummary, Trainer,
};
use crate::verify;

/// Every tunable of a run. Config files are partial JSON objects of this
/// shape, merged over a preset; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 64×64 images, small encoders, tuned for one CPU core.
    Desk,
    /// Full-size encoders and the reference optimization recipe.
    Full,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        match self {
            Preset::Desk => RunConfig {
                synth: SynthConfig::default(),
                model: ModelConfig::desk(),
                train: TrainConfig {
                    base_lr: 0.05,
                    epochs: 20,
                    grad_clip: Some(1.0),
                    ..TrainConfig::default()
                },
            },
            Preset::Full => RunConfig {
                synth: SynthConfig {
                    image_size: 224,
                    num_classes: 10,
                    glyph_size: 32,
                    marker_size: 16,
                    ..SynthConfig::default()
                },
                model: ModelConfig::default(),
                train: TrainConfig::default(),
            },
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Loads `path` (if any) over `preset`. Any read or parse failure, including
/// a missing file, is a config error.
pub fn load_run_config(path: Option<&Path>, preset: Preset) -> Result<RunConfig> {
    let mut value = serde_json::to_value(preset.config()).expect("presets serialize");
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| config_err!("{}: {e}", path.display()))?;
        if !patch.is_object() {
            return Err(config_err!("{}: config must be a JSON object", path.display()));
        }
        merge(&mut value, patch);
    }
    serde_json::from_value(value).map_err(|e| match path {
        Some(p) => config_err!("{}: {e}", p.display()),
        None => config_err!("{e}"),
    })
}

#[derive(Debug, Parser)]
#[command(name = "gzf", version, about = "Gaze-guided image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON config merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
struct TrainFlags {
    /// Write 0 instead of wall-clock seconds, so metrics compare byte for byte.
    #[arg(long)]
    no_timing: bool,
    /// Train everything except the image encoder.
    #[arg(long)]
    freeze_image_encoder: bool,
    /// Overrides the schedule length.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic shortcut-bias dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gaze: Option<String>,
        #[arg(long)]
        fusion: Option<String>,
        /// Continue from a checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs and write a checkpoint.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Accuracy of a checkpoint on a dataset split, as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        /// Which parameters of the checkpoint to use.
        #[arg(long, value_enum, default_value = "best")]
        params: ParamGroup,
    },
    /// Run a grid of variants over one or more seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds, counted up from the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Finite-difference check of every module's gradients.
    Gradcheck {
        #[arg(long, default_value_t = verify::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ParamGroup {
    Best,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// DSGE, MLP, and no gaze, each with the fusion layer.
    Gaze,
    /// The five fusion ablation rows.
    Table3,
    /// Gaze-encoder width × depth grid.
    Table2,
}

fn apply_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
}

fn apply_flags(cfg: &mut RunConfig, flags: &TrainFlags) {
    if flags.no_timing {
        cfg.train.record_wall_clock = false;
    }
    if flags.freeze_image_encoder {
        cfg.train.freeze_image_encoder = true;
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Fits the model config to a dataset: class count and image size come from
/// the manifest.
pub fn adapt_to_dataset(model: &mut ModelConfig, manifest: &DatasetManifest) -> Result<()> {
    let [w, h] = manifest.image_extent;
    if w != h {
        return Err(config_err!("images must be square, dataset has {w}x{h}"));
    }
    if model.vit.image_size != w {
        log::info!("image encoder input size set to {w} from the dataset");
        model.vit.image_size = w;
    }
    model.num_classes = manifest.num_classes();
    Ok(())
}

/// Trains `cfg` on `data` and writes every artifact under `out`. Shared by
/// `train` and `ablate`, so a grid cell and a standalone run of its resolved
/// config produce identical files.
pub fn run_training(cfg: &RunConfig, data: &DataSplits, out: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    write_json(out.join("config.resolved.json"), cfg)?;
    let mut trainer = Trainer::new(&cfg.model, &cfg.train, data)?;
    trainer.run()?;
    finish_training(&trainer, out)
}

fn finish_training(trainer: &Trainer, out: &Path) -> Result<TrainSummary> {
    let summary = trainer.summary()?;
    write_metrics(out, &trainer.state().records, &summary)?;
    save_checkpoint(&trainer.checkpoint(), out.join("checkpoint.gzf"))?;
    Ok(summary)
}

fn load_data(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<DataSplits> {
    DataSplits::from_manifest(manifest, &cfg.train, cfg.model.dsge.seq_len)
}

fn cmd_synth(common: &Common, out: &Path) -> Result<()> {
    let mut cfg = load_run_config(common.config.as_deref(), common.preset)?;
    apply_seed(&mut cfg, common.seed);
    create_dir(out)?;
    let manifest = generate_dataset(&cfg.synth, out)?;
    println!("{}", out.join("manifest.json").display());
    log::info!("wrote {} samples", manifest.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: &Common,
    flags: &TrainFlags,
    data: &Path,
    out: &Path,
    gaze: Option<&str>,
    fusion: Option<&str>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let mut trainer_holder;
    let splits;
    let cfg = if let Some(ckpt_path) = resume {
        let ckpt = load_checkpoint(ckpt_path)?;
        let cfg = RunConfig {
            synth: SynthConfig::default(),
            model: ckpt.model.clone(),
            train: ckpt.train.clone(),
        };
        if common.config.is_some() || gaze.is_some() || fusion.is_some() {
            log::warn!("resuming: the checkpoint's stored config is used");
        }
        splits = load_data(&manifest, &cfg)?;
        trainer_holder = Trainer::resume(ckpt, &splits)?;
        cfg
    } else {
        let mut cfg = load_run_config(common.config.as_deref(), common.preset)?;
        apply_seed(&mut cfg, common.seed);
        apply_flags(&mut cfg, flags);
        if let Some(g) = gaze {
            cfg.model.gaze = g.parse()?;
        }
        if let Some(f) = fusion {
            cfg.model.fusion = f.parse()?;
        }
        adapt_to_dataset(&mut cfg.model, &manifest)?;
        cfg.model.set_dropout(cfg.train.dropout);
        cfg.model.validate()?;
        cfg.train.validate()?;
        splits = load_data(&manifest, &cfg)?;
        create_dir(out)?;
        write_json(out.join("config.resolved.json"), &cfg)?;
        trainer_holder = Trainer::new(&cfg.model, &cfg.train, &splits)?;
        cfg
    };
    let trainer = &mut trainer_holder;
    create_dir(out)?;
    let resolved = out.join("config.resolved.json");
    if resume.is_some() && !resolved.exists() {
        write_json(resolved, &cfg)?;
    }
    while !trainer.is_finished() {
        if stop_after.is_some_and(|n| trainer.state().epoch >= n) {
            save_checkpoint(&trainer.checkpoint(), out.join("checkpoint.gzf"))?;
            println!("stopped after epoch {}; checkpoint written", trainer.state().epoch);
            return Ok(());
        }
        trainer.run_epoch()?;
    }
    let summary = finish_training(trainer, out)?;
    println!(
        "{}: test accuracy {:.4} (train {:.4}, best val {:.4} at epoch {})",
        summary.variant, summary.test_acc, summary.train_acc, summary.best_val_acc, summary.best_epoch
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: EvalSplit, group: ParamGroup) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::load(data)?;
    let (model, store) = ckpt.model(match group {
        ParamGroup::Best => "best",
        ParamGroup::Last => "param",
    })?;
    if manifest.num_classes() != ckpt.model.num_classes {
        return Err(config_err!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.model.num_classes,
            manifest.num_classes()
        ));
    }
    let splits = DataSplits::from_manifest(&manifest, &ckpt.train, ckpt.model.dsge.seq_len)?;
    let samples = match split {
        EvalSplit::Train => splits.train,
        EvalSplit::Val => splits.val,
        EvalSplit::Test => splits.test,
        EvalSplit::All => [splits.train, splits.val, splits.test].concat(),
    };
    let report = evaluate(&model, &store, &samples)?;
    let per_class: Vec<Value> = report
        .per_class
        .iter()
        .zip(&report.class_counts)
        .zip(&manifest.classes)
        .map(|((acc, n), name)| serde_json::json!({"class": name, "accuracy": acc, "samples": n}))
        .collect();
    let out = serde_json::json!({
        "split": format!("{split:?}").to_lowercase(),
        "accuracy": report.accuracy,
        "samples": report.samples,
        "per_class": per_class,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json value"));
    Ok(())
}

/// One grid cell: a name and the config edits that define it.
#[derive(Clone, Debug)]
pub struct Cell {
    pub name: String,
    pub gaze: GazeEncoderKind,
    pub fusion: FusionKind,
    pub dsge_hidden: Option<usize>,
    pub dsge_layers: Option<usize>,
}

impl Cell {
    fn variant(name: &str, gaze: GazeEncoderKind, fusion: FusionKind) -> Self {
        Cell {
            name: name.into(),
            gaze,
            fusion,
            dsge_hidden: None,
            dsge_layers: None,
        }
    }

    pub fn apply(&self, model: &mut ModelConfig) {
        model.gaze = self.gaze;
        model.fusion = self.fusion;
        if let Some(h) = self.dsge_hidden {
            model.dsge.hidden = h;
        }
        if let Some(l) = self.dsge_layers {
            model.dsge.layers = l;
        }
    }
}

/// Widths swept on the table2 axis, relative to the configured width.
pub const TABLE2_WIDTH_FACTORS: [f64; 3] = [0.5, 1.0, 2.0];
pub const TABLE2_LAYERS: [usize; 3] = [4, 6, 8];

pub fn axis_cells(axis: Axis, base: &ModelConfig) -> Vec<Cell> {
    use FusionKind as F;
    use GazeEncoderKind as G;
    match axis {
        Axis::Gaze => vec![
            Cell::variant("dsge", G::Dsge, F::Layer),
            Cell::variant("mlp", G::Mlp, F::Layer),
            Cell::variant("none", G::None, F::Layer),
        ],
        Axis::Table3 => vec![
            Cell::variant("wo", G::None, F::Layer),
            Cell::variant("dsge", G::Dsge, F::Add),
            Cell::variant("dsge+ca", G::Dsge, F::Ca),
            Cell::variant("dsge+ca+fusion", G::Dsge, F::CaLayer),
            Cell::variant("dsge+fusion", G::Dsge, F::Layer),
        ],
        Axis::Table2 => {
            let mut cells = Vec::new();
            for &l in &TABLE2_LAYERS {
                for &f in &TABLE2_WIDTH_FACTORS {
                    let h = (base.dsge.hidden as f64 * f).round() as usize;
                    cells.push(Cell {
                        name: format!("h{h}-l{l}"),
                        gaze: G::Dsge,
                        fusion: F::Layer,
                        dsge_hidden: Some(h),
                        dsge_layers: Some(l),
                    });
                }
            }
            cells
        }
    }
}

fn cmd_ablate(
    common: &Common,
    flags: &TrainFlags,
    axis: Axis,
    data: &Path,
    out: &Path,
    seeds: u64,
) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let mut base = load_run_config(common.config.as_deref(), common.preset)?;
    apply_seed(&mut base, common.seed);
    apply_flags(&mut base, flags);
    for c in run_ablation(&base, axis, &manifest, out, seeds)? {
        println!("{:<16} mean test accuracy {:.4} (train {:.4})", c.cell, c.mean_test_acc, c.mean_train_acc);
    }
    Ok(())
}

/// Seed-averaged outcome of one ablation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: String,
    pub mean_train_acc: f64,
    pub mean_test_acc: f64,
    pub runs: Vec<TrainSummary>,
}

/// Trains every cell of `axis` for `seeds` consecutive seeds starting at
/// `base.train.seed`. Each run lands in `out/<cell>/seed-<s>/` and is exactly
/// reproducible from its own `config.resolved.json`.
pub fn run_ablation(
    base: &RunConfig,
    axis: Axis,
    manifest: &DatasetManifest,
    out: &Path,
    seeds: u64,
) -> Result<Vec<CellOutcome>> {
    if seeds == 0 {
        return Err(config_err!("--seeds must be at least 1"));
    }
    let mut base = base.clone();
    adapt_to_dataset(&mut base.model, manifest)?;
    base.model.set_dropout(base.train.dropout);
    let cells = axis_cells(axis, &base.model);
    for cell in &cells {
        let mut m = base.model.clone();
        cell.apply(&mut m);
        m.validate()?;
    }
    create_dir(out)?;
    let first_seed = base.train.seed;
    let mut results = String::from(
        "axis,cell,gaze,fusion,dsge_hidden,dsge_layers,seed,epochs_run,best_epoch,best_val_acc,train_acc,test_acc\n",
    );
    let mut outcomes = Vec::new();
    for cell in &cells {
        let mut runs = Vec::new();
        for k in 0..seeds {
            let mut cfg = base.clone();
            cell.apply(&mut cfg.model);
            cfg.train.seed = first_seed + k;
            let splits = load_data(manifest, &cfg)?;
            let dir = out.join(&cell.name).join(format!("seed-{}", cfg.train.seed));
            let s = run_training(&cfg, &splits, &dir)?;
            log::info!("{} seed {}: test {:.4}", cell.name, cfg.train.seed, s.test_acc);
            writeln!(
                results,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                axis_name(axis),
                cell.name,
                cfg.model.gaze,
                cfg.model.fusion,
                cfg.model.dsge.hidden,
                cfg.model.dsge.layers,
                cfg.train.seed,
                s.epochs_run,
                s.best_epoch,
                s.best_val_acc,
                s.train_acc,
                s.test_acc
            )
            .expect("writing to a String");
            runs.push(s);
        }
        let mean = |f: fn(&TrainSummary) -> f64| runs.iter().map(f).sum::<f64>() / seeds as f64;
        outcomes.push(CellOutcome {
            cell: cell.name.clone(),
            mean_train_acc: mean(|s| s.train_acc),
            mean_test_acc: mean(|s| s.test_acc),
            runs,
        });
    }
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("results.csv", &results)?;

    let mut summary = String::from("cell,gaze,fusion,dsge_hidden,dsge_layers,seeds,mean_train_acc,mean_test_acc\n");
    for (cell, o) in cells.iter().zip(&outcomes) {
        let mut m = base.model.clone();
        cell.apply(&mut m);
        writeln!(
            summary,
            "{},{},{},{},{},{seeds},{},{}",
            cell.name, m.gaze, m.fusion, m.dsge.hidden, m.dsge.layers, o.mean_train_acc, o.mean_test_acc
        )
        .expect("writing to a String");
    }
    write("summary.csv", &summary)?;

    if axis == Axis::Table2 {
        let widths: Vec<usize> = TABLE2_WIDTH_FACTORS
            .iter()
            .map(|f| (base.model.dsge.hidden as f64 * f).round() as usize)
            .collect();
        let mut grid = String::from("layers");
        for h in &widths {
            write!(grid, ",h{h}").expect("writing to a String");
        }
        grid.push('\n');
        for (r, l) in TABLE2_LAYERS.iter().enumerate() {
            write!(grid, "{l}").expect("writing to a String");
            for c in 0..widths.len() {
                write!(grid, ",{}", outcomes[r * widths.len() + c].mean_test_acc).expect("writing to a String");
            }
            grid.push('\n');
        }
        write("grid.csv", &grid)?;
    }
    Ok(outcomes)
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Gaze => "gaze",
        Axis::Table3 => "table3",
        Axis::Table2 => "table2",
    }
}

fn cmd_gradcheck(eps: f64, fault: bool) -> Result<()> {
    let (lo, hi) = EPS_RANGE;
    let eps = if !(lo..=hi).contains(&eps) || eps.is_nan() {
        let clamped = if eps.is_nan() { verify::DEFAULT_EPS } else { eps.clamp(lo, hi) };
        eprintln!("warning: --eps {eps:e} is outside [{lo:e}, {hi:e}]; using {clamped:e}");
        clamped
    } else {
        eps
    };
    let checks = verify::check_all(eps, fault)?;
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<16} max relative error {:.3e} over {} coordinates  {verdict}",
            c.module, c.report.max_rel_error, c.report.coordinates
        );
        if !c.passed() {
            failed.push(format!("{}: worst at {}", c.module, c.worst_description()));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        for f in &failed {
            println!("{f}");
        }
        Err(Error::Verification(format!(
            "{} module(s) exceed relative error {:e}",
            failed.len(),
            verify::TOLERANCE
        )))
    }
}

/// Caps the global worker pool from `GZF_THREADS` (default 1).
fn init_threads() -> Result<()> {
    let n = match std::env::var("GZF_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| config_err!("GZF_THREADS must be a positive integer, got {v:?}"))?,
        Err(_) => 1,
    };
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Synth { common, out } => cmd_synth(&common, &out),
        Command::Train {
            common,
            flags,
            data,
            out,
            gaze,
            fusion,
            resume,
            stop_after,
        } => cmd_train(
            &common,
            &flags,
            &data,
            &out,
            gaze.as_deref(),
            fusion.as_deref(),
            resume.as_deref(),
            stop_after,
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
            params,
        } => cmd_eval(&checkpoint, &data, split, params),
        Command::Ablate {
            common,
            flags,
            axis,
            data,
            out,
            seeds,
        } => cmd_ablate(&common, &flags, axis, &data, &out, seeds),
        Command::Gradcheck { eps, inject_fault } => cmd_gradcheck(eps, inject_fault),
    }
}

/// Parses `args` (program name first), runs the subcommand, and returns the
/// process exit code. Errors go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
