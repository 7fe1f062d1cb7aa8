use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use styleless::config::RunConfig;
use styleless::content_transfer::{
    gate_transfer, input_transfer, output_transfer, tail_instance_count, transfer_mask,
    TransferPolicy,
};
use styleless::datamodel::{
    argmax_class, BinaryMask, ClassCatalog, Domain, DomainTag, Image, IndexMap,
};
use styleless::metrics::EvalReport;
use styleless::networks::{Direction, Networks};
use styleless::pseudolabel::generate_pseudo_label;
use styleless::synthdata::{
    compute_stats, load_images, load_labeled_dataset, read_index_png, read_rgb_png, write_dataset,
    write_index_png, write_rgb_png,
};
use styleless::trainer::{evaluate, run_training};

/// Domain adaptation for semantic segmentation on a procedural twin-domain dataset.
#[derive(Parser, Debug)]
#[command(name = "styleless", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Both,
    Source,
    Target,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labeled source and/or target datasets.
    GenData {
        /// Output directory; datasets go to <out>/source and <out>/target.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes per domain.
        #[arg(long, default_value_t = 200)]
        count: u64,
        /// First scene seed; scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image size in pixels (even, at least 8).
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Which domains to write.
        #[arg(long, value_enum, default_value_t = DomainArg::Both)]
        domain: DomainArg,
    },
    /// Train from a TOML run configuration.
    Train {
        /// Run configuration with [data], [networks], [losses] and [trainer] sections.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the log, checkpoint, config snapshot and metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root containing images/ and labels/.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for eval.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write thresholded pseudo labels as indexed PNGs (255 = rejected).
    Pseudo {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root containing images/.
        #[arg(long)]
        images: PathBuf,
        /// Output directory for <stem>.png label maps.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run content transfer on one source/target pair and write its intermediates.
    TransferDemo {
        /// Source image PNG inside a dataset (its label is read from ../labels/).
        #[arg(long)]
        source_item: PathBuf,
        /// Target image PNG.
        #[arg(long)]
        target_item: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Gate threshold; defaults to the median over the source item's dataset.
        #[arg(long)]
        min_tail_instances: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute pixel counts and the tail-instance median of a labeled dataset.
    Stats {
        /// Dataset root containing images/ and labels/.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for stats.json.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<styleless::Error>() {
        Some(e) if e.is_internal() => 2,
        _ => 1,
    }
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::GenData {
            out,
            count,
            seed,
            resolution,
            domain,
        } => gen_data(&out, count, seed, resolution, domain),
        Command::Train { config, out } => train(&config, &out),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => eval(&checkpoint, &data, &out),
        Command::Pseudo {
            checkpoint,
            images,
            out,
        } => pseudo(&checkpoint, &images, &out),
        Command::TransferDemo {
            source_item,
            target_item,
            checkpoint,
            min_tail_instances,
            out,
        } => transfer_demo(
            &source_item,
            &target_item,
            &checkpoint,
            min_tail_instances,
            &out,
        ),
        Command::Stats { data, out } => stats(&data, &out),
    }
}

fn gen_data(
    out: &Path,
    count: u64,
    seed: u64,
    resolution: usize,
    domain: DomainArg,
) -> Result<String> {
    let domains: &[Domain] = match domain {
        DomainArg::Both => &[Domain::Source, Domain::Target],
        DomainArg::Source => &[Domain::Source],
        DomainArg::Target => &[Domain::Target],
    };
    for &d in domains {
        let name = match d {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        write_dataset(
            &out.join(name),
            seed..seed + count,
            resolution,
            resolution,
            d,
        )?;
    }
    Ok(format!(
        "wrote {count} scene(s) per domain at {resolution}x{resolution} under {}",
        out.display()
    ))
}

fn train(config: &Path, out: &Path) -> Result<String> {
    let mut cfg = RunConfig::from_path(config)?;
    if let Ok(v) = std::env::var("STYLELESS_SEED") {
        cfg.trainer.seed = v
            .parse()
            .with_context(|| format!("STYLELESS_SEED must be an integer, got {v:?}"))?;
    }
    let summary = run_training(&cfg, out)?;
    let last = summary.history.last().map(|m| &m.report);
    Ok(format!(
        "trained {} step(s); target mIoU {}; tail mIoU {}; checkpoint {}",
        summary.steps,
        fmt_opt(last.and_then(|r| r.miou)),
        fmt_opt(last.and_then(|r| r.miou_tail)),
        summary.checkpoint.display()
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn load_nets(checkpoint: &Path) -> Result<Networks> {
    Ok(Networks::load_checkpoint(checkpoint)?.0)
}

fn eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<String> {
    let nets = load_nets(checkpoint)?;
    let catalog = ClassCatalog::toy();
    let items = load_labeled_dataset(data, &catalog, DomainTag::Target)?;
    if items.is_empty() {
        return Err(styleless::Error::EmptyDataset.into());
    }
    let cm = evaluate(&nets, &items)?;
    let report = EvalReport::from_matrix(&cm, catalog.names(), catalog.tail_set());
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(format!(
        "mIoU {} mIoU_tail {} over {} pixels",
        fmt_opt(report.miou),
        fmt_opt(report.miou_tail),
        report.num_pixels
    ))
}

fn pseudo(checkpoint: &Path, images: &Path, out: &Path) -> Result<String> {
    let nets = load_nets(checkpoint)?;
    let items = load_images(images, DomainTag::Target)?;
    std::fs::create_dir_all(out)?;
    for (stem, img) in &items {
        let y = generate_pseudo_label(&nets.predict(img)?);
        write_index_png(&y.to_index_map(), &out.join(format!("{stem}.png")))?;
    }
    Ok(format!(
        "wrote {} pseudo label(s) to {}",
        items.len(),
        out.display()
    ))
}

fn dataset_root(item: &Path) -> Result<&Path> {
    match item.parent() {
        Some(dir) if dir.file_name().is_some_and(|n| n == "images") => {
            Ok(dir.parent().unwrap_or(Path::new(".")))
        }
        _ => bail!(
            "source item {} must live in a dataset's images/ directory",
            item.display()
        ),
    }
}

fn side_by_side(images: &[&Image]) -> Result<Image> {
    let h = images[0].height();
    let widths: Vec<usize> = images.iter().map(|i| i.width()).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(3 * h * total);
    for c in 0..3 {
        for r in 0..h {
            for img in images {
                data.extend((0..img.width()).map(|x| img.get(c, r, x)));
            }
        }
    }
    Ok(Image::new(h, total, data, DomainTag::Target)?)
}

fn mask_png(m: &BinaryMask) -> Result<IndexMap> {
    Ok(IndexMap::new(
        m.height(),
        m.width(),
        m.bits().iter().map(|&b| b * 255).collect(),
    )?)
}

fn transfer_demo(
    source_item: &Path,
    target_item: &Path,
    checkpoint: &Path,
    min_tail_instances: Option<usize>,
    out: &Path,
) -> Result<String> {
    let catalog = ClassCatalog::toy();
    let root = dataset_root(source_item)?;
    let label_path = root.join("labels").join(
        source_item
            .file_name()
            .context("source item has no file name")?,
    );
    let i_s = read_rgb_png(source_item, DomainTag::Source)?;
    let y_s = styleless::datamodel::onehot_encode(&read_index_png(&label_path)?, &catalog)?;
    let i_t = read_rgb_png(target_item, DomainTag::Target)?;
    if (i_s.height(), i_s.width()) != (i_t.height(), i_t.width()) {
        bail!("source and target items differ in size");
    }
    let median = match min_tail_instances {
        Some(m) => m,
        None => {
            let all = load_labeled_dataset(root, &catalog, DomainTag::Source)?;
            compute_stats(all.iter().map(|(_, y)| y), &catalog)?.tail_instance_median
        }
    };
    let policy = TransferPolicy::toy(median);
    let count = tail_instance_count(&y_s, &policy);
    if !gate_transfer(&y_s, &policy) {
        return Ok(format!(
            "gate: not fired ({count} tail instance(s), threshold {median}); nothing written"
        ));
    }
    let nets = load_nets(checkpoint)?;
    let y_t = generate_pseudo_label(&nets.predict(&i_t)?);
    let i_s2t = nets.translate(&i_s, &i_t, Direction::S2T)?;
    let m = transfer_mask(&y_s, &y_t, &catalog, &policy)?;
    let i_t_ct = input_transfer(&i_s2t, &i_t, &m)?;
    let y_t_ct = generate_pseudo_label(&nets.predict(&i_t_ct)?);
    let refined = output_transfer(&y_s, &y_t_ct, &m)?;

    std::fs::create_dir_all(out)?;
    write_rgb_png(
        &side_by_side(&[&i_t, &i_s2t, &i_t_ct])?,
        &out.join("triptych.png"),
    )?;
    write_index_png(&mask_png(&m)?, &out.join("mask.png"))?;
    write_index_png(&refined.to_index_map(), &out.join("label.png"))?;
    write_index_png(
        &argmax_class(&nets.predict(&i_t_ct)?),
        &out.join("prediction.png"),
    )?;
    Ok(format!(
        "gate: fired ({count} tail instance(s), threshold {median}); transferred {} pixel(s)",
        m.count()
    ))
}

fn stats(data: &Path, out: &Path) -> Result<String> {
    let catalog = ClassCatalog::toy();
    let items = load_labeled_dataset(data, &catalog, DomainTag::Source)?;
    let stats = compute_stats(items.iter().map(|(_, y)| y), &catalog)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("stats.json"),
        serde_json::to_string_pretty(&stats)?,
    )?;
    Ok(format!(
        "{} image(s); tail-instance median {}",
        items.len(),
        stats.tail_instance_median
    ))
}
