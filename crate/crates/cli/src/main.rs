mod resolve;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvbrain::atlas::{load_atlas, synth_atlas, Atlas, AtlasRegistry};
use mvbrain::checkpoint::Checkpoint;
use mvbrain::config::ModelConfig;
use mvbrain::connectome::{load_dataset, save_dataset, synth_generate, Dataset, SynthConfig};
use mvbrain::head::evaluate;
use mvbrain::interpret::{salient_rois, top_bias_edges, write_edges_csv, write_saliency_csv, SaliencyLayer};
use mvbrain::io::{write_atomic, write_json_atomic};
use mvbrain::model::ModelState;
use mvbrain::train::{
    finetune, finetune_grid, pretrain, LossReport, Phase, TrainConfig, TrainState, FINETUNE_LR_GRID,
};
use serde::Serialize;
use serde_json::json;

use resolve::{layer, Preset, RunFile, CONFIG_KEYS};

#[derive(Parser)]
#[command(
    name = "mvbrain",
    version,
    about = "Multi-view brain network model: synthesis, pretraining, fine-tuning, evaluation, interpretation",
    after_long_help = CONFIG_KEYS
)]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Atlas utilities.
    #[command(subcommand)]
    Atlas(AtlasCmd),
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCmd),
    /// Joint multi-view pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint with a linear head.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned model on a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Interpretability exports.
    #[command(subcommand)]
    Interpret(InterpretCmd),
    /// Run the gradient-check and invariant suite on toy configurations.
    Verify,
    /// Report the parameter count of a configuration.
    Params(ParamsArgs),
    /// Print the resolved model and training configuration.
    Config(ConfigArgs),
}

#[derive(Subcommand)]
enum AtlasCmd {
    /// Load and validate an atlas file or a directory of atlas files.
    Validate { path: PathBuf },
    /// Write a random atlas inside a brain-sized ellipsoid.
    Synth {
        #[arg(long)]
        id: String,
        #[arg(long)]
        rois: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate a synthetic multi-view dataset.
    Synth {
        /// SynthConfig JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Atlas files or directories. With none, every atlas id in the
        /// config is generated as a random atlas; `--atlas-rois` sets sizes.
        #[arg(long = "atlas-dir")]
        atlas_dirs: Vec<PathBuf>,
        /// `id=N` sizes for generated atlases (default 16 ROIs).
        #[arg(long = "atlas-rois", value_delimiter = ',')]
        atlas_rois: Vec<String>,
    },
}

#[derive(Args)]
struct AtlasSource {
    /// Extra atlas files or directories (each dataset's `atlases/` folder
    /// and checkpoint atlases are always included).
    #[arg(long = "atlas-dir")]
    atlas_dirs: Vec<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directories (repeatable).
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Restrict pretraining to these atlas ids (default: every view present).
    #[arg(long, value_delimiter = ',')]
    atlases: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Use the published hyperparameters as the base layer.
    #[arg(long)]
    paper_defaults: bool,
    /// Continue from an existing checkpoint at `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    entropy_sign: Option<f64>,
    /// Metrics file (default `<out>.metrics.jsonl`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    src: AtlasSource,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Atlas ids used at fine-tuning; several ids sum their embeddings.
    #[arg(long, value_delimiter = ',', required = true)]
    atlas: Vec<String>,
    /// `grid` or a single learning rate.
    #[arg(long, default_value = "grid")]
    lr: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[command(flatten)]
    src: AtlasSource,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fine-tuned model directory (or checkpoint file).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    atlas: Vec<String>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    src: AtlasSource,
}

#[derive(Subcommand)]
enum InterpretCmd {
    /// Top-k ROI pairs by learned distance bias, per layer and head.
    Edges {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        atlas: String,
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Only this layer (default: all).
        #[arg(long)]
        layer: Option<usize>,
        /// Only this head (default: all).
        #[arg(long)]
        head: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        src: AtlasSource,
    },
    /// Top-k ROIs by received attention, per subject.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        atlas: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value_t = LayerChoice::Last)]
        layer: LayerChoice,
        /// Only these subject ids (default: all).
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        src: AtlasSource,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerChoice {
    Last,
    MeanAll,
}

#[derive(Args)]
struct ParamsArgs {
    /// Atlas files or directories; each atlas gets a projection and decoder.
    #[arg(long = "atlas-dir", required = true)]
    atlas_dirs: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    paper_defaults: bool,
    /// Override the embedding width.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    paper_defaults: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Atlas(AtlasCmd::Validate { path }) => atlas_validate(&path),
        Command::Atlas(AtlasCmd::Synth { id, rois, seed, out }) => {
            let a = synth_atlas(&id, rois, seed)?;
            a.save(&out)?;
            println!("wrote atlas `{id}` ({rois} ROIs) to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Data(DataCmd::Synth {
            config,
            seed,
            out,
            atlas_dirs,
            atlas_rois,
        }) => data_synth(&config, seed, &out, &atlas_dirs, &atlas_rois),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Interpret(c) => run_interpret(c),
        Command::Verify => run_verify(),
        Command::Params(a) => run_params(a),
        Command::Config(a) => {
            let preset = Preset::from_flag(a.paper_defaults);
            let file = RunFile::load(a.config.as_deref())?;
            let resolved = json!({
                "preset": preset,
                "model": layer(&preset.model(), file.model.as_ref(), "model")?,
                "pretrain": layer(&preset.pretrain(a.seed), file.pretrain.as_ref(), "pretrain")?,
                "finetune": layer(&preset.finetune(a.seed), file.finetune.as_ref(), "finetune")?,
            });
            println!("{}", serde_json::to_string_pretty(&resolved)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn atlas_validate(path: &Path) -> Result<ExitCode> {
    let reg = AtlasRegistry::load(path)?;
    for a in reg.iter() {
        println!("{}\t{} ROIs\tdis_max {:.3} mm", a.id(), a.roi_count(), a.dis_max());
    }
    println!("ok: {} atlas(es) valid", reg.len());
    Ok(ExitCode::SUCCESS)
}

fn data_synth(config: &Path, seed: u64, out: &Path, atlas_dirs: &[PathBuf], atlas_rois: &[String]) -> Result<ExitCode> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: SynthConfig = serde_json::from_str(&text).with_context(|| format!("synth config {}", config.display()))?;
    let mut reg = AtlasRegistry::new();
    for d in atlas_dirs {
        reg.load_into(d)?;
    }
    let mut sizes = std::collections::BTreeMap::new();
    for s in atlas_rois {
        let (id, n) = s
            .split_once('=')
            .with_context(|| format!("--atlas-rois expects id=N, got `{s}`"))?;
        sizes.insert(id.to_string(), n.parse::<usize>().with_context(|| format!("ROI count in `{s}`"))?);
    }
    for (i, id) in cfg.atlases.iter().enumerate() {
        if reg.get(id).is_none() {
            if !atlas_dirs.is_empty() && !sizes.contains_key(id) {
                bail!("atlas `{id}` is not in --atlas-dir and has no --atlas-rois size");
            }
            let n = sizes.get(id).copied().unwrap_or(16);
            reg.insert(synth_atlas(id, n, seed.wrapping_add(i as u64))?)?;
        }
    }
    let ds = synth_generate(&cfg, seed, &reg)?;
    save_dataset(&ds, out)?;
    for id in &cfg.atlases {
        reg.require(id)?.save(&out.join("atlases").join(format!("{id}.json")))?;
    }
    write_json_atomic(&out.join("synth_config.json"), &json!({ "seed": seed, "config": cfg }))?;
    println!(
        "wrote {} subjects x {} views to {}",
        ds.len(),
        cfg.atlases.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Registry from `--atlas-dir` entries, the datasets' `atlases/` folders and
/// extra atlases (e.g. from a checkpoint).
fn build_registry(src: &AtlasSource, data_dirs: &[&Path], extra: &[Atlas]) -> Result<AtlasRegistry> {
    let mut reg = AtlasRegistry::new();
    let add = |reg: &mut AtlasRegistry, p: &Path| -> Result<()> {
        for a in AtlasRegistry::load(p)?.iter() {
            reg.absorb(a.clone())?;
        }
        Ok(())
    };
    for d in &src.atlas_dirs {
        add(&mut reg, d)?;
    }
    for d in data_dirs {
        let p = d.join("atlases");
        if p.is_dir() {
            add(&mut reg, &p)?;
        }
    }
    for a in extra {
        reg.absorb(a.clone())?;
    }
    Ok(reg)
}

fn write_jsonl(path: &Path, rows: &[LossReport]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_pretrain(a: PretrainArgs) -> Result<ExitCode> {
    let preset = Preset::from_flag(a.paper_defaults);
    let file = RunFile::load(a.config.as_deref())?;
    let mut model_cfg: ModelConfig = layer(&preset.model(), file.model.as_ref(), "model")?;
    let mut cfg: TrainConfig = layer(&preset.pretrain(a.seed), file.pretrain.as_ref(), "pretrain")?;
    cfg.phase = Phase::Pretrain;
    cfg.seed = a.seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.dropout {
        cfg.dropout = v;
    }
    if a.checkpoint_every.is_some() {
        cfg.checkpoint_every = a.checkpoint_every;
    }
    if let Some(v) = a.mask_ratio {
        model_cfg.objective.mask_ratio = v;
    }
    if let Some(v) = a.entropy_sign {
        model_cfg.objective.entropy_sign = v;
    }
    model_cfg.validate()?;
    cfg.validate()?;

    let dirs: Vec<&Path> = a.data.iter().map(PathBuf::as_path).collect();
    let registry = build_registry(&a.src, &dirs, &[])?;
    let mut datasets: Vec<Dataset> = a
        .data
        .iter()
        .map(|d| load_dataset(d, &registry).with_context(|| format!("dataset {}", d.display())))
        .collect::<Result<_>>()?;
    if !a.atlases.is_empty() {
        let keep: Vec<&str> = a.atlases.iter().map(String::as_str).collect();
        for id in &keep {
            registry.require(id)?;
        }
        datasets = datasets.iter().map(|d| d.restrict_atlases(&keep)).collect();
    }
    let mut ids: Vec<String> = datasets.iter().flat_map(|d| d.atlas_ids.iter().cloned()).collect();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        bail!("no atlas views to pretrain on");
    }

    let mut state = if a.resume && a.out.exists() {
        let ck = Checkpoint::load(&a.out)?;
        if ck.model.config != model_cfg {
            bail!("--resume: checkpoint config differs from the resolved config");
        }
        log::info!("resuming from epoch {}", ck.epoch);
        TrainState::from_checkpoint(ck, cfg.adam)
    } else {
        let atlases: Vec<&Atlas> = ids.iter().map(|id| registry.require(id)).collect::<mvbrain::Result<_>>()?;
        TrainState::new(ModelState::new(model_cfg.clone(), atlases, a.seed)?, cfg.adam)
    };
    log::info!(
        "pretraining {} parameters on {} subjects, atlases {:?}",
        state.model.param_count(),
        datasets.iter().map(Dataset::len).sum::<usize>(),
        ids
    );

    let resolved = json!({
        "command": "pretrain",
        "preset": preset,
        "data": a.data,
        "atlases": ids,
        "model": model_cfg,
        "pretrain": cfg,
        "param_count": state.model.param_count(),
    });
    write_json_atomic(&with_suffix(&a.out, ".resolved.json"), &resolved)?;

    let metrics = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl"));
    let mut rows = state.history.clone();
    let mut io_err = None;
    let refs: Vec<&Dataset> = datasets.iter().collect();
    pretrain(&mut state, &refs, &registry, &cfg, Some(&a.out), &mut |r| {
        println!("{}", serde_json::to_string(r).expect("report serializes"));
        rows.push(r.clone());
        if let Err(e) = write_jsonl(&metrics, &rows) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.context("writing metrics"));
    }
    if state.history.len() == rows.len() && rows.is_empty() {
        log::warn!("checkpoint already at epoch {}; nothing to do", state.epoch);
    }
    state.checkpoint(&registry).save(&a.out)?;
    log::info!("checkpoint written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GridLog {
    lr: f64,
    best_val_auc: Option<f64>,
    best_epoch: usize,
    selected: bool,
}

fn run_finetune(a: FinetuneArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.ckpt).with_context(|| format!("checkpoint {}", a.ckpt.display()))?;
    let registry = build_registry(&a.src, &[a.data.as_path()], &ck.atlases)?;
    let dataset = load_dataset(&a.data, &registry).with_context(|| format!("dataset {}", a.data.display()))?;
    let file = RunFile::load(a.config.as_deref())?;
    if file.model.is_some() {
        log::warn!("finetune: ignoring the config file's `model` section; the checkpoint defines the model");
    }
    let mut cfg: TrainConfig = layer(&Preset::Desk.finetune(a.seed), file.finetune.as_ref(), "finetune")?;
    cfg.phase = Phase::Finetune;
    cfg.seed = a.seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = a.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(v) = a.dropout {
        cfg.dropout = v;
    }
    let grid: Vec<f64> = if a.lr == "grid" {
        FINETUNE_LR_GRID.to_vec()
    } else {
        vec![a
            .lr
            .parse::<f64>()
            .with_context(|| format!("--lr expects `grid` or a number, got `{}`", a.lr))?]
    };
    cfg.base_lr = grid[0];
    cfg.validate()?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let resolved = json!({
        "command": "finetune",
        "checkpoint": a.ckpt,
        "data": a.data,
        "atlas_subset": a.atlas,
        "lr_grid": grid,
        "finetune": cfg,
        "model": ck.model.config,
    });
    write_json_atomic(&a.out.join("resolved_config.json"), &resolved)?;

    let (runs, selected, outcome) = if grid.len() == 1 {
        let o = finetune(ck.model, &dataset, &registry, &a.atlas, &cfg)?;
        let run = mvbrain::train::GridRun {
            lr: grid[0],
            best_val_auc: o.best_val_auc,
            best_epoch: o.best_epoch,
        };
        (vec![run], 0, o)
    } else {
        finetune_grid(&ck.model, &dataset, &registry, &a.atlas, &cfg, &grid)?
    };
    let logs: Vec<GridLog> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| GridLog {
            lr: r.lr,
            best_val_auc: r.best_val_auc,
            best_epoch: r.best_epoch,
            selected: i == selected,
        })
        .collect();
    for l in &logs {
        println!("{}", serde_json::to_string(l)?);
    }
    write_json_atomic(&a.out.join("lr_runs.json"), &logs)?;
    write_jsonl(&a.out.join("metrics.jsonl"), &outcome.history)?;

    let atlases: Vec<Atlas> = a.atlas.iter().map(|id| registry.require(id).cloned()).collect::<mvbrain::Result<_>>()?;
    let mut all_atlases = ck.atlases.clone();
    for x in atlases {
        if !all_atlases.iter().any(|y| y.id() == x.id()) {
            all_atlases.push(x);
        }
    }
    Checkpoint {
        model: outcome.model,
        atlases: all_atlases,
        adam: None,
        epoch: outcome.best_epoch,
        loss_history: outcome.history,
    }
    .save(&a.out.join("model.ckpt"))?;
    log::info!(
        "selected lr {:e} (val auc {}); model written to {}",
        runs[selected].lr,
        runs[selected].best_val_auc.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
        a.out.join("model.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.ckpt")
    } else {
        p.to_path_buf()
    }
}

fn run_evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let path = model_path(&a.model);
    let ck = Checkpoint::load(&path).with_context(|| format!("model {}", path.display()))?;
    let registry = build_registry(&a.src, &[a.data.as_path()], &ck.atlases)?;
    let dataset = load_dataset(&a.data, &registry).with_context(|| format!("dataset {}", a.data.display()))?;
    let report = evaluate(&ck.model, &dataset, &a.atlas, &registry)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &a.out {
        write_json_atomic(out, &report)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_interpret(c: InterpretCmd) -> Result<ExitCode> {
    match c {
        InterpretCmd::Edges {
            model,
            atlas,
            k,
            layer: only_layer,
            head: only_head,
            out,
            src,
        } => {
            let path = model_path(&model);
            let ck = Checkpoint::load(&path).with_context(|| format!("model {}", path.display()))?;
            let registry = build_registry(&src, &[], &ck.atlases)?;
            let at = registry.require(&atlas)?;
            let e = &ck.model.config.encoder;
            let layers: Vec<usize> = only_layer.map_or_else(|| (0..e.layers).collect(), |l| vec![l]);
            let heads: Vec<usize> = only_head.map_or_else(|| (0..e.heads).collect(), |h| vec![h]);
            let mut rankings = Vec::new();
            for &l in &layers {
                for &h in &heads {
                    let r = top_bias_edges(&ck.model, at, l, h, k)?;
                    println!("layer {l} head {h}: mean distance of top {} edges {:.2} mm", r.edges.len(), r.mean_distance_mm);
                    rankings.push(r);
                }
            }
            write_edges_csv(&out, &rankings)?;
        }
        InterpretCmd::Saliency {
            model,
            data,
            atlas,
            k,
            layer: which,
            subjects,
            out,
            src,
        } => {
            let path = model_path(&model);
            let ck = Checkpoint::load(&path).with_context(|| format!("model {}", path.display()))?;
            let registry = build_registry(&src, &[data.as_path()], &ck.atlases)?;
            let dataset = load_dataset(&data, &registry)?;
            let at = registry.require(&atlas)?;
            let m = ck.model;
            if !m.has_projection(&atlas) {
                bail!("model has no projection for atlas `{atlas}`; fine-tune on it first");
            }
            m.check_atlas(at)?;
            let which = match which {
                LayerChoice::Last => SaliencyLayer::Last,
                LayerChoice::MeanAll => SaliencyLayer::MeanAll,
            };
            let mut reports = Vec::new();
            for s in &dataset.samples {
                if !subjects.is_empty() && !subjects.contains(&s.subject_id) {
                    continue;
                }
                let Some(view) = s.views.get(&atlas) else {
                    continue;
                };
                reports.push(salient_rois(&m, view, at, k, which)?);
            }
            if reports.is_empty() {
                bail!("no subject has a view for atlas `{atlas}`");
            }
            write_saliency_csv(&out, &reports)?;
            println!("wrote saliency for {} subjects to {}", reports.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_verify() -> Result<ExitCode> {
    let results = mvbrain::verify::run_all();
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed);
        println!("{tag}  {:<width$}  {:>6.2}s  {}", r.name, r.seconds, r.detail);
    }
    println!("{} passed, {} failed", results.len() - failed, failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run_params(a: ParamsArgs) -> Result<ExitCode> {
    let preset = Preset::from_flag(a.paper_defaults);
    let file = RunFile::load(a.config.as_deref())?;
    let mut cfg: ModelConfig = layer(&preset.model(), file.model.as_ref(), "model")?;
    if let Some(d) = a.dim {
        cfg.encoder.dim = d;
    }
    let mut atlases = Vec::new();
    for p in &a.atlas_dirs {
        if p.is_dir() {
            atlases.extend(AtlasRegistry::load(p)?.iter().cloned());
        } else {
            atlases.push(load_atlas(p)?);
        }
    }
    let m = ModelState::new(cfg.clone(), &atlases, 0)?;
    let out = json!({
        "preset": preset,
        "dim": cfg.encoder.dim,
        "atlases": atlases.iter().map(|x| json!({"id": x.id(), "rois": x.roi_count()})).collect::<Vec<_>>(),
        "param_count": m.param_count(),
        "breakdown": m.param_breakdown(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}
