//! `occlusim`: synthetic occlusion datasets, two-branch model training,
//! per-image test-time adaptation sweeps, and evaluation reports.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use occlusim_core::adaptation::{adapt_and_infer, evaluate_with_adaptation, AdaptConfig};
use occlusim_core::data::{
    bases::synthetic_base_image, from_model_range, generate_dataset, load_pairs_where,
    to_model_range, PairedSample, Split,
};
use occlusim_core::eval::{
    emit_grid, evaluate, records_to_csv, records_to_json, summary_markdown, MetricRecord,
};
use occlusim_core::imaging::OccluderKind;
use occlusim_core::losses::LossConfig;
use occlusim_core::network::{forward_primary, load_checkpoint, NetworkConfig, ParamSet};
use occlusim_core::training::{train, train_primary_only};
use occlusim_core::ImageTensor;

use config::{resolve_seed, RunConfigFile};

#[derive(Parser)]
#[command(
    name = "occlusim",
    about = "Occlusion simulation, restoration-model training and test-time-adaptation evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired degraded/clean dataset from base images.
    Synth(SynthArgs),
    /// Train the two-branch model on a dataset's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally sweeping adaptation depths.
    Eval(EvalArgs),
    /// Tiny end-to-end run: bases, dataset, training, evaluation, grid.
    Demo(DemoArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of base scene images (PNG/JPEG).
    #[arg(long)]
    base_images: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset seed; overrides the config file and OCCLUSIM_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Pairs per occluder kind; overrides the config file.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and training report.
    #[arg(long)]
    out: PathBuf,
    /// Train the primary branch alone; the auxiliary head stays at init.
    #[arg(long)]
    primary_only: bool,
    /// Comma-separated occluder kinds to train on (default: all).
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate (single-model mode).
    #[arg(long, required_unless_present = "ablation")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
    /// Adaptation depths to sweep, comma separated (0 = no adaptation).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    adapt_n: Vec<usize>,
    /// Evaluate every sample of this held-out kind instead of the test split.
    #[arg(long)]
    test_kind: Option<String>,
    /// Label attached to emitted records.
    #[arg(long, default_value = "model")]
    variant: String,
    /// Write a qualitative mosaic of the first N samples.
    #[arg(long)]
    grid: Option<usize>,
    /// Ablation mode: evaluate the five canonical variant rows.
    #[arg(long, requires_all = ["primary_ckpt", "joint_ckpt", "mask_ckpt"])]
    ablation: bool,
    /// Primary-only checkpoint for --ablation.
    #[arg(long)]
    primary_ckpt: Option<PathBuf>,
    /// Jointly trained checkpoint for --ablation.
    #[arg(long)]
    joint_ckpt: Option<PathBuf>,
    /// Mask-enabled jointly trained checkpoint for --ablation.
    #[arg(long)]
    mask_ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Output directory for the whole demo run.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Demo(args) => cmd_demo(args),
    };
    if let Err(err) = result {
        // One line, machine parsable.
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfigFile> {
    match path {
        Some(p) => RunConfigFile::load(p),
        None => Ok(RunConfigFile {
            schema_version: config::SCHEMA_VERSION,
            ..RunConfigFile::default()
        }),
    }
}

fn parse_kinds(names: &[String]) -> Result<Vec<OccluderKind>> {
    names
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| OccluderKind::parse(s).map_err(Into::into))
        .collect()
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let seed = resolve_seed(args.seed, cfg.train.seed)?;
    let count = args.count.unwrap_or(cfg.data.count_per_kind);
    if !args.base_images.is_dir() {
        bail!(
            "base image directory {} not found",
            args.base_images.display()
        );
    }
    let specs = cfg.degradation_specs(seed)?;
    let manifest = generate_dataset(
        &args.base_images,
        &specs,
        count,
        &args.out,
        seed,
        &cfg.data.to_core(),
    )?;
    println!(
        "synth: {} pairs ({} train / {} test) at {}x{} in {}",
        manifest.samples.len(),
        manifest.ids_in(Split::Train).len(),
        manifest.ids_in(Split::Test).len(),
        manifest.resolution.0,
        manifest.resolution.1,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let seed = resolve_seed(args.seed, cfg.train.seed)?;
    let kinds = parse_kinds(&args.kinds)?;
    let pairs = load_pairs_where(&args.data, |meta, split| {
        split == Split::Train && (kinds.is_empty() || kinds.contains(&meta.kind))
    })?;
    println!(
        "train: {} samples, {} iterations, batch {}{}",
        pairs.len(),
        cfg.train.iterations,
        cfg.train.batch_size,
        if args.primary_only {
            ", primary only"
        } else {
            ""
        }
    );
    let train_cfg = cfg.train_config(seed);
    let (_, report) = if args.primary_only {
        train_primary_only(&pairs, &train_cfg, Some(&args.out))?
    } else {
        train(&pairs, &train_cfg, Some(&args.out))?
    };
    println!(
        "train: joint loss {:.4} -> {:.4} in {:.1}s; checkpoint {}",
        report.joint.first().copied().unwrap_or(0.0),
        report.joint.last().copied().unwrap_or(0.0),
        report.wall_seconds,
        report.final_checkpoint.as_deref().unwrap_or("-")
    );
    Ok(())
}

fn load_eval_split(data: &Path, test_kind: &Option<String>) -> Result<Vec<PairedSample>> {
    let pairs = match test_kind {
        Some(name) => {
            let kind = OccluderKind::parse(name)?;
            load_pairs_where(data, move |meta, _| meta.kind == kind)?
        }
        None => load_pairs_where(data, |_, split| split == Split::Test)?,
    };
    if pairs.is_empty() {
        bail!("no evaluation samples selected from {}", data.display());
    }
    Ok(pairs)
}

fn infer_base(
    img: &ImageTensor,
    params: &ParamSet,
    net: &NetworkConfig,
) -> occlusim_core::Result<ImageTensor> {
    let out = forward_primary(&to_model_range(img)?, params, net)?;
    from_model_range(&out)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    if args.ablation {
        return cmd_eval_ablation(&args);
    }
    let cfg = load_config(&args.config)?;
    let ckpt_path = args.checkpoint.as_ref().expect("enforced by clap");
    let (params, net) = load_checkpoint(ckpt_path)?;
    let pairs = load_eval_split(&args.data, &args.test_kind)?;
    let adapt = AdaptConfig {
        ..cfg.adapt.clone()
    };

    let table = evaluate_with_adaptation(&pairs, &params, &net, &cfg.loss, &adapt, &args.adapt_n)?;
    write(&args.out.join("sweep.csv"), &table.to_csv())?;
    let mut per_image = String::from("sample_id,n_updates,psnr_db,ssim\n");
    for (id, n, p, s) in &table.per_image {
        per_image.push_str(&format!("{id},{n},{p:.6},{s:.6}\n"));
    }
    write(&args.out.join("per_image.csv"), &per_image)?;
    let traces =
        serde_json::to_string_pretty(&table.traces).context("serializing adaptation traces")?;
    write(&args.out.join("traces.json"), &traces)?;

    // Markdown summary, one row per depth.
    let mut md = format!(
        "### {} on {} images\n\n| n updates | PSNR (dB) | SSIM |\n|---|---|---|\n",
        args.variant,
        pairs.len()
    );
    for row in &table.rows {
        md.push_str(&format!(
            "| {} | {:.2} | {:.4} |\n",
            row.n_updates, row.mean_psnr_db, row.mean_ssim
        ));
    }
    write(&args.out.join("summary.md"), &md)?;

    // Per-kind records at the best depth.
    let best = table
        .rows
        .iter()
        .max_by(|a, b| a.mean_psnr_db.total_cmp(&b.mean_psnr_db))
        .expect("at least one row");
    let adapt_best = AdaptConfig {
        n_updates: best.n_updates,
        ..adapt.clone()
    };
    let (records, summary) = evaluate(
        &pairs,
        |p| {
            if best.n_updates == 0 {
                infer_base(&p.degraded, &params, &net)
            } else {
                let (out, _) =
                    adapt_and_infer(&p.degraded, None, &params, &net, &cfg.loss, &adapt_best)?;
                Ok(out)
            }
        },
        &format!("{}-n{}", args.variant, best.n_updates),
    )?;
    write(&args.out.join("records.csv"), &records_to_csv(&records))?;
    write(&args.out.join("records.json"), &records_to_json(&records)?)?;
    write(
        &args.out.join("by_kind.md"),
        &summary_markdown(
            &format!("{} (n={})", args.variant, best.n_updates),
            &summary,
        ),
    )?;

    if let Some(n_grid) = args.grid {
        let take = n_grid.min(pairs.len());
        let subset = &pairs[..take];
        let outputs: Vec<ImageTensor> = subset
            .iter()
            .map(|p| {
                if best.n_updates == 0 {
                    infer_base(&p.degraded, &params, &net)
                } else {
                    Ok(
                        adapt_and_infer(&p.degraded, None, &params, &net, &cfg.loss, &adapt_best)?
                            .0,
                    )
                }
            })
            .collect::<occlusim_core::Result<_>>()?;
        emit_grid(subset, &outputs, &args.out.join("grid.png"))?;
    }

    for row in &table.rows {
        println!(
            "eval: n={} PSNR {:.2} dB SSIM {:.4} over {} images",
            row.n_updates, row.mean_psnr_db, row.mean_ssim, row.images
        );
    }
    Ok(())
}

/// The five canonical variant rows: primary-only, joint, joint + adaptation,
/// joint + mask, and joint + mask + adaptation.
fn cmd_eval_ablation(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let pairs = load_eval_split(&args.data, &args.test_kind)?;
    let n_update = *args.adapt_n.iter().max().unwrap_or(&cfg.adapt.n_updates);

    let load = |p: &Option<PathBuf>| -> Result<(ParamSet, NetworkConfig)> {
        load_checkpoint(p.as_ref().expect("enforced by clap")).map_err(Into::into)
    };
    let (primary_p, primary_n) = load(&args.primary_ckpt)?;
    let (joint_p, joint_n) = load(&args.joint_ckpt)?;
    let (mask_p, mask_n) = load(&args.mask_ckpt)?;

    let mut all_records: Vec<MetricRecord> = Vec::new();
    let mut md = String::from(
        "### Ablation\n\n| variant | PSNR (dB) | SSIM | images |\n|---|---|---|---|\n",
    );
    let mut run = |label: &str, params: &ParamSet, net: &NetworkConfig, n: usize| -> Result<()> {
        let adapt = AdaptConfig {
            n_updates: n,
            ..cfg.adapt.clone()
        };
        let (records, summary) = evaluate(
            &pairs,
            |p| {
                if n == 0 {
                    infer_base(&p.degraded, params, net)
                } else {
                    let (out, _) =
                        adapt_and_infer(&p.degraded, None, params, net, &cfg.loss, &adapt)?;
                    Ok(out)
                }
            },
            label,
        )?;
        let overall = summary
            .iter()
            .find(|r| r.label == "overall")
            .expect("non-empty split");
        md.push_str(&format!(
            "| {label} | {:.2} | {:.4} | {} |\n",
            overall.mean_psnr_db, overall.mean_ssim, overall.count
        ));
        println!(
            "eval: {label}: PSNR {:.2} dB SSIM {:.4}",
            overall.mean_psnr_db, overall.mean_ssim
        );
        all_records.extend(records);
        Ok(())
    };

    run("primary", &primary_p, &primary_n, 0)?;
    run("primary+auxiliary", &joint_p, &joint_n, 0)?;
    run("primary+auxiliary+update", &joint_p, &joint_n, n_update)?;
    run("primary+auxiliary+mask", &mask_p, &mask_n, 0)?;
    run("primary+auxiliary+update+mask", &mask_p, &mask_n, n_update)?;

    write(&args.out.join("ablation.md"), &md)?;
    write(
        &args.out.join("ablation.csv"),
        &records_to_csv(&all_records),
    )?;
    Ok(())
}

fn cmd_demo(args: DemoArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, None)?;
    let out = &args.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    // Base scenes.
    let bases_dir = out.join("bases");
    std::fs::create_dir_all(&bases_dir)?;
    for i in 0..6u64 {
        let img = synthetic_base_image(seed.wrapping_add(i), 96, 96);
        occlusim_core::data::save_rgb8(&bases_dir.join(format!("base_{i}.png")), &img)
            .context("writing demo base image")?;
    }
    println!("demo: wrote 6 base scenes");

    // Dataset.
    let mut cfg = RunConfigFile {
        schema_version: config::SCHEMA_VERSION,
        ..RunConfigFile::default()
    };
    cfg.data.resolution = [48, 48];
    cfg.data.train_fraction = 0.75;
    cfg.data.count_per_kind = 6;
    cfg.network = NetworkConfig {
        scales: 2,
        base_channels: 8,
        ..NetworkConfig::default()
    };
    cfg.loss = LossConfig {
        msssim_levels: 2,
        ..LossConfig::default()
    };
    cfg.train.iterations = 150;
    cfg.train.batch_size = 4;

    let data_dir = out.join("dataset");
    let specs = cfg.degradation_specs(seed)?;
    let manifest = generate_dataset(&bases_dir, &specs, 6, &data_dir, seed, &cfg.data.to_core())?;
    println!(
        "demo: dataset with {} pairs ({} test)",
        manifest.samples.len(),
        manifest.ids_in(Split::Test).len()
    );

    // Training.
    let pairs = load_pairs_where(&data_dir, |_, split| split == Split::Train)?;
    let model_dir = out.join("model");
    let (params, report) = train(&pairs, &cfg.train_config(seed), Some(&model_dir))?;
    println!(
        "demo: trained {} iterations, joint loss {:.4} -> {:.4}",
        cfg.train.iterations,
        report.joint.first().copied().unwrap_or(0.0),
        report.joint.last().copied().unwrap_or(0.0)
    );

    // Evaluation with a small adaptation sweep.
    let test = load_pairs_where(&data_dir, |_, split| split == Split::Test)?;
    let table =
        evaluate_with_adaptation(&test, &params, &cfg.network, &cfg.loss, &cfg.adapt, &[0, 2])?;
    let eval_dir = out.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    write(&eval_dir.join("sweep.csv"), &table.to_csv())?;
    for row in &table.rows {
        println!(
            "demo: n={} PSNR {:.2} dB SSIM {:.4}",
            row.n_updates, row.mean_psnr_db, row.mean_ssim
        );
    }

    // Qualitative grid from the base model.
    let take = test.len().min(4);
    let outputs: Vec<ImageTensor> = test[..take]
        .iter()
        .map(|p| infer_base(&p.degraded, &params, &cfg.network))
        .collect::<occlusim_core::Result<_>>()?;
    emit_grid(&test[..take], &outputs, &eval_dir.join("grid.png"))?;
    println!("demo: outputs in {}", out.display());
    Ok(())
}
