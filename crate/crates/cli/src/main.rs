use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s3mamba::data::{assign_splits, generate_dataset, load_manifest, stratify, write_dataset, write_manifest, Split};
use s3mamba::harness::{
    ablation_table_csv, ablation_variants, dump_attention, evaluate, load_checkpoint, plot_loss_curves,
    prepare_data, run_ablation, save_checkpoint, train, write_metrics_csv, write_run_outputs, Ablation,
    AblationRow, EpochRecord, ExperimentConfig, RunRecord,
};
use s3mamba::{Error, Result};

#[derive(Parser)]
#[command(name = "s3mamba", version, about = "Small-lesion segmentation: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PNG images, PNG masks, JSONL manifest).
    GenData(Common),
    /// Assign size bins and train/test splits to a manifest.
    Stratify(Common),
    /// Train a model and write the checkpoint, metrics and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Combine finished runs into an ablation table and loss plot.
    Report(ReportArgs),
    /// Train every ablation variant over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; flags below override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Experiment seed (for gen-data: the data seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Components to disable, comma-separated: encf, tcma, cl.
    #[arg(long)]
    ablation: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dataset manifest to use instead of the configured data source.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of synthetic samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Test images whose attention maps are dumped as TIFF.
    #[arg(long, default_value_t = 1)]
    attention_samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, each holding a run.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Repeat seeds, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Configuration from file (or defaults) with command-line overrides applied.
fn resolve_config(c: &Common, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = match (&c.config, base) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(cfg)) => cfg,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(list) = &c.ablation {
        cfg.ablation = Ablation::disabling(list)?;
    }
    if let Some(m) = &c.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(n) = c.samples {
        cfg.data.num_samples = n;
    }
    if let Some(e) = c.epochs {
        cfg.optim.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn log_epoch(prefix: &str, e: &EpochRecord) {
    eprintln!(
        "{prefix}epoch {:>4}  lr {:.2e}  loss {:.5}  (unweighted {:.5})",
        e.epoch, e.learning_rate, e.weighted_loss, e.unweighted_loss
    );
}

fn gen_data(c: &Common) -> Result<()> {
    let mut cfg = resolve_config(c, None)?;
    if let Some(seed) = c.seed {
        cfg.data.seed = seed;
    }
    let ds = generate_dataset(cfg.data.num_samples, &cfg.data.synth, cfg.data.seed)?;
    let manifest = write_dataset(&c.out, &ds)?;
    eprintln!("wrote {} samples, manifest {}", ds.len(), manifest.display());
    Ok(())
}

fn stratify_cmd(c: &Common) -> Result<()> {
    let cfg = resolve_config(c, None)?;
    let Some(source) = cfg.data.manifest.clone() else {
        return Err(Error::Config("stratify needs --manifest or data.manifest".into()));
    };
    let mut ds = load_manifest(&source, cfg.model.num_classes)?;
    let bins = stratify(&ds)?;
    assign_splits(&mut ds, &bins, cfg.data.test_fraction, cfg.data.split_seed)?;
    ds.apply_bins(&bins);
    create_out(&c.out)?;
    // keep image paths valid when the manifest moves to another directory
    let base = source.parent().unwrap_or(Path::new("."));
    let same_dir = fs::canonicalize(base).ok() == fs::canonicalize(&c.out).ok();
    let mut records = ds.manifest.clone();
    if !same_dir {
        let abs = fs::canonicalize(base).map_err(io_err(base))?;
        for r in &mut records {
            r.image = abs.join(&r.image).to_string_lossy().into_owned();
            r.mask = abs.join(&r.mask).to_string_lossy().into_owned();
        }
    }
    write_manifest(&c.out.join("manifest.jsonl"), &records)?;
    let summary = serde_json::to_string_pretty(&bins)?;
    write_text(&c.out.join("bins.json"), &summary)?;
    let [s, m, l] = bins.counts();
    eprintln!("q30 {:.6} q60 {:.6}  S/M/L = {s}/{m}/{l}", bins.q30, bins.q60);
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.common, None)?;
    let out = &a.common.out;
    create_out(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml_string())?;
    let data = prepare_data(&cfg)?;
    let (model, record) = train(&cfg, &data, &mut |e| log_epoch("", e))?;
    save_checkpoint(&out.join("model.ckpt"), &model, Some(serde_json::to_value(&cfg)?))?;
    write_run_outputs(out, &record)?;
    let test = data.test_indices();
    let pick: Vec<usize> = test.iter().copied().take(a.attention_samples).collect();
    for (n, &i) in pick.iter().enumerate() {
        let images = data.dataset.image_batch(&[i])?;
        dump_attention(&out.join(format!("attention/{n:02}_{}", data.dataset.samples[i].id)), &model, &images)?;
    }
    eprintln!("{}", record.final_report.to_csv_string());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let stored = ckpt
        .experiment
        .map(serde_json::from_value::<ExperimentConfig>)
        .transpose()?;
    let mut cfg = resolve_config(&a.common, stored)?;
    cfg.model = ckpt.model.config.clone();
    let data = prepare_data(&cfg)?;
    let indices = match a.split {
        SplitArg::Train => data.dataset.split_indices(Split::Train),
        SplitArg::Test => data.dataset.split_indices(Split::Test),
        SplitArg::All => (0..data.dataset.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let report = evaluate(&ckpt.model, &data.dataset, &indices, &data.bins, cfg.optim.batch_size)?;
    create_out(&a.common.out)?;
    write_metrics_csv(&a.common.out.join("metrics.csv"), &report)?;
    print!("{}", report.to_csv_string());
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let runs = a
        .runs
        .iter()
        .map(|d| RunRecord::load(&d.join("run.json")))
        .collect::<Result<Vec<_>>>()?;
    let mut groups: Vec<(String, Vec<RunRecord>)> = Vec::new();
    for r in runs.iter().cloned() {
        match groups.iter_mut().find(|(v, _)| *v == r.variant) {
            Some((_, g)) => g.push(r),
            None => groups.push((r.variant.clone(), vec![r])),
        }
    }
    let rows: Vec<AblationRow> = groups.iter().map(|(v, g)| AblationRow::from_runs(v.clone(), g)).collect();
    create_out(&a.out)?;
    let table = ablation_table_csv(&rows)?;
    write_text(&a.out.join("ablation.csv"), &table)?;
    plot_loss_curves(&a.out.join("loss.svg"), &runs)?;
    print!("{table}");
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let cfg = resolve_config(&a.common, None)?;
    if a.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let out = &a.common.out;
    create_out(out)?;
    let outcome = run_ablation(&cfg, &a.seeds, &ablation_variants(), &mut |variant, seed, e| {
        log_epoch(&format!("[{variant} seed {seed}] "), e)
    })?;
    for r in &outcome.runs {
        write_run_outputs(&out.join(format!("{}_seed{}", r.variant, r.config.seed)), r)?;
    }
    let table = ablation_table_csv(&outcome.rows)?;
    write_text(&out.join("ablation.csv"), &table)?;
    plot_loss_curves(&out.join("loss.svg"), &outcome.runs)?;
    print!("{table}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Stratify(c) => stratify_cmd(c),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
