//! Command-line entry points: train, predict, eval, dump-features.
//!
//! Every command is reproducible given (config, seed, inputs); failures
//! print one machine-parsable line `error: class=<class> msg="..."` and
//! exit nonzero.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use gl_dmnet::config::RunConfig;
use gl_dmnet::data::{build_manifest, export_manifest, prepare_pair, Split};
use gl_dmnet::error::{Error, Result};
use gl_dmnet::metrics::evaluate_dataset;
use gl_dmnet::train::{model_from_checkpoint, train, write_map_u8};

#[derive(Parser)]
#[command(name = "gl-dmnet", about = "RGB-D salient object detection", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a dataset root.
    Train {
        /// Flat dotted-key config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value overrides applied after the config file.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Run directory (default: $GL_DMNET_RUN_ROOT/run-<stamp> or ./runs/run-<stamp>).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Resume from a checkpoint (config hash must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict saliency maps for an input directory with RGB/ and depth/.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Score a directory of predicted maps against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Key-value report destination.
        #[arg(long)]
        report: PathBuf,
        /// 256-row threshold,precision,recall,fmeasure CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
        /// Print one benchmark-table row (E S F MAE) to stdout.
        #[arg(long)]
        table: bool,
    },
    /// Dump per-channel grayscale slices of the fusion products at a stage.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        /// Stage index 1..4.
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn default_run_dir() -> PathBuf {
    let root = std::env::var("GL_DMNET_RUN_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("runs"));
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    root.join(format!("run-{stamp}"))
}

fn cmd_train(
    config: Option<PathBuf>,
    overrides: Vec<String>,
    run_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(&path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&overrides)?;
    cfg.validate()?;
    let root = cfg
        .data_root
        .clone()
        .ok_or_else(|| Error::Config("data.root must be set for training".into()))?;
    let manifest = build_manifest(&root, Split::Train)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    let run_dir = run_dir.unwrap_or_else(default_run_dir);
    std::fs::create_dir_all(&run_dir)?;
    export_manifest(&manifest, &run_dir.join("manifest.jsonl"))?;
    let outcome = train(&cfg, &manifest.records, &run_dir, resume.as_deref())?;
    println!(
        "trained {} steps; final checkpoint {}",
        outcome.steps,
        outcome.final_checkpoint.display()
    );
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn image_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let exts = ["png", "jpg", "jpeg", "bmp"];
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if ok {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn cmd_predict(checkpoint: &Path, input_dir: &Path, output_dir: &Path) -> Result<()> {
    let rgb_dir = input_dir.join("RGB");
    let depth_dir = input_dir.join("depth");
    if !rgb_dir.is_dir() || !depth_dir.is_dir() {
        return Err(Error::Data(format!(
            "input dir {} must contain RGB/ and depth/ subdirectories",
            input_dir.display()
        )));
    }
    let rgbs = image_stems(&rgb_dir)?;
    if rgbs.is_empty() {
        return Err(Error::Data(format!("no images in {}", rgb_dir.display())));
    }
    let depths = image_stems(&depth_dir)?;
    let (model, cfg) = model_from_checkpoint(checkpoint)?;
    std::fs::create_dir_all(output_dir)?;
    let device = candle_core::Device::Cpu;
    for (stem, rgb_path) in &rgbs {
        let depth_path = depths
            .get(stem)
            .ok_or_else(|| Error::MissingFile(depth_dir.join(format!("{stem}.*"))))?;
        let (rgb, depth, (oh, ow)) = prepare_pair(rgb_path, depth_path, cfg.data_image_size)?;
        let s1 = model.predict(&rgb.to_tensor(&device)?, &depth.to_tensor(&device)?)?;
        let (_, _, h, w) = s1.dims4()?;
        let values = s1.flatten_all()?.to_vec1::<f32>()?;
        let map = gl_dmnet::data::ImageBuf::new(1, h, w, values)?.resize_bilinear(oh, ow);
        write_map_u8(&output_dir.join(format!("{stem}.png")), &map.data, oh, ow)?;
    }
    println!("wrote {} maps to {}", rgbs.len(), output_dir.display());
    Ok(())
}

fn cmd_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    report_path: &Path,
    pr_csv: Option<&Path>,
    table: bool,
) -> Result<()> {
    let report = evaluate_dataset(pred_dir, gt_dir)?;
    report.write_report(report_path)?;
    if let Some(csv) = pr_csv {
        report.write_pr_csv(csv)?;
    }
    if table {
        println!("{}", report.table_row());
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn cmd_dump_features(
    checkpoint: &Path,
    rgb: &Path,
    depth: &Path,
    stage: usize,
    out_dir: &Path,
) -> Result<()> {
    if !(1..=4).contains(&stage) {
        return Err(Error::Config(format!("stage must be in 1..4, got {stage}")));
    }
    let (model, cfg) = model_from_checkpoint(checkpoint)?;
    let (rgb_buf, depth_buf, _) = prepare_pair(rgb, depth, cfg.data_image_size)?;
    let device = candle_core::Device::Cpu;
    let (rgb_stages, depth_stages) = model.encode(
        &rgb_buf.to_tensor(&device)?,
        &depth_buf.to_tensor(&device)?,
        false,
    )?;
    let idx = stage - 1;
    let parts = model
        .fusion()
        .stage(idx)
        .forward_parts(&rgb_stages[idx], &depth_stages[idx], false)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = 0usize;
    for (tag, tensor) in [("pmf", parts.pmf.as_ref()), ("cmf", parts.cmf.as_ref())] {
        let Some(t) = tensor else { continue };
        let (_, c, h, w) = t.dims4()?;
        for ch in 0..c {
            let slice = t.narrow(1, ch, 1)?.flatten_all()?.to_vec1::<f32>()?;
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in &slice {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let range = hi - lo;
            let norm: Vec<f32> = if range <= 1e-12 {
                // constant channel renders mid-gray
                vec![0.5; slice.len()]
            } else {
                slice.iter().map(|&v| (v - lo) / range).collect()
            };
            write_map_u8(&out_dir.join(format!("{tag}_c{ch:03}.png")), &norm, h, w)?;
            written += 1;
        }
    }
    if written == 0 {
        return Err(Error::Config(
            "this fusion mode produces neither PMF nor CMF features".into(),
        ));
    }
    println!("wrote {written} channel slices to {}", out_dir.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, overrides, run_dir, resume } => {
            cmd_train(config, overrides, run_dir, resume)
        }
        Command::Predict { checkpoint, input_dir, output_dir } => {
            cmd_predict(&checkpoint, &input_dir, &output_dir)
        }
        Command::Eval { pred_dir, gt_dir, report, pr_csv, table } => {
            cmd_eval(&pred_dir, &gt_dir, &report, pr_csv.as_deref(), table)
        }
        Command::DumpFeatures { checkpoint, rgb, depth, stage, out_dir } => {
            cmd_dump_features(&checkpoint, &rgb, &depth, stage, &out_dir)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: class={} msg={:?}", e.class(), e.to_string());
        std::process::exit(1);
    }
}
