//! Command-line surface: train, evaluate, cross-evaluate, ablate, profile,
//! saliency, synth-data, split-preview, alpha-sweep.
//!
//! Every run echoes its effective configuration into the output directory
//! and writes metric files there; failures leave a machine-readable
//! `error.json`. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration failure.

use crate::config::{RunConfig, SynthLayout};
use crate::data::sampler::balance_sampler;
use crate::data::synth::{export_to_folder, synth_generate};
use crate::data::{ingest_folder, Dataset, ImageSample};
use crate::engine::{history_csv, load_checkpoint, save_checkpoint, train};
use crate::error::{Error, Result};
use crate::evaluation::profile::{profile, LatencyOpts};
use crate::evaluation::saliency::{saliency_map, save_heatmap};
use crate::evaluation::{ablation_run, cross_evaluate, evaluate, ConfusionMatrix};
use crate::model::CmNet;
use clap::{Args, Parser, Subcommand};
use ndarray::Array3;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cmnet",
    about = "Cross-modal facial expression network: training, evaluation, ablation, profiling and saliency tools",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides applied after the file, e.g. `model.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults under $CMNET_OUT_ROOT or ./cmnet-runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on the configured dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Initialize from an existing checkpoint (fine-tuning). The head is
        /// reinitialized when class counts differ.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: accuracy plus confusion matrix.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on a foreign dataset through a label map.
    CrossEvaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Total injection from foreign labels to model classes, e.g. `0:0,1:2`.
        #[arg(long)]
        label_map: String,
    },
    /// Train and evaluate ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Rows to run: `a..i` or a comma list like `a,c,h`.
        #[arg(long, default_value = "a..i")]
        rows: String,
    },
    /// Parameter count, FLOPs, and optional latency for a configuration.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
        /// Also measure wall-clock latency (batch of 32, median of 5).
        #[arg(long)]
        latency: bool,
    },
    /// Grad-CAM++ saliency map for one image.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file; omitted means a sample from the configured synthetic
        /// dataset.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Index into the synthetic dataset when no image file is given.
        #[arg(long, default_value_t = 0)]
        synth_index: usize,
        /// Target class for the saliency score.
        #[arg(long)]
        class: usize,
    },
    /// Generate a synthetic dataset as a directory-per-class PNG tree.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Samples per class.
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        asymmetry: f64,
        #[arg(long, value_enum, default_value_t = LayoutArg::Faces)]
        layout: LayoutArg,
    },
    /// Split one image into halves and write them out.
    SplitPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mirror_right: bool,
    },
    /// Train one model per α in {0.0, 0.1, …, 1.0} and tabulate accuracy.
    AlphaSweep {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum LayoutArg {
    Faces,
    Quadrants,
}

impl From<LayoutArg> for SynthLayout {
    fn from(v: LayoutArg) -> Self {
        match v {
            LayoutArg::Faces => SynthLayout::Faces,
            LayoutArg::Quadrants => SynthLayout::Quadrants,
        }
    }
}

/// Raise glibc's malloc thresholds so large tensor buffers are recycled in
/// the heap instead of being re-mapped (and re-zeroed) every step.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    }
}

fn out_dir(common: &Common, sub: &str) -> PathBuf {
    match &common.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var("CMNET_OUT_ROOT").unwrap_or_else(|_| "cmnet-runs".into());
            Path::new(&root).join(sub)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path, &common.overrides)?,
        None => {
            let text = RunConfig::default().to_toml();
            RunConfig::from_toml_with_overrides(&text, &common.overrides)?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        crate::config::DataSource::Synth => synth_generate(
            cfg.train.seed,
            cfg.data.n_per_class,
            cfg.data.classes,
            cfg.data.asymmetry,
            cfg.model.input_size,
            cfg.data.layout,
        ),
        crate::config::DataSource::Folder => {
            if cfg.data.path.is_empty() {
                return Err(Error::Config(
                    "data.source = \"folder\" requires data.path".into(),
                ));
            }
            ingest_folder(Path::new(&cfg.data.path))
        }
    }
}

fn load_image(path: &Path) -> Result<ImageSample> {
    let img = image::open(path)?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = Array3::from_shape_vec((h, w, 3), img.into_raw()).expect("decoded dims");
    Ok(ImageSample {
        pixels,
        label: 0,
        path: Some(path.to_path_buf()),
    })
}

fn confusion_outputs(
    dir: &Path,
    acc: f64,
    matrix: &ConfusionMatrix,
    class_names: &[String],
) -> Result<()> {
    #[derive(Serialize)]
    struct Metrics {
        accuracy: f64,
        samples: u64,
    }
    write_json(
        &dir.join("metrics.json"),
        &Metrics {
            accuracy: acc,
            samples: matrix.total(),
        },
    )?;
    std::fs::write(dir.join("confusion.csv"), matrix.to_csv(class_names))?;
    matrix.render_png(&dir.join("confusion.png"))?;
    Ok(())
}

fn parse_rows(spec: &str) -> Result<Vec<char>> {
    if spec == "a..i" {
        return Ok(('a'..='i').collect());
    }
    let mut rows = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        let mut chars = part.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if ('a'..='i').contains(&c) => rows.push(c),
            _ => {
                return Err(Error::Config(format!(
                    "bad row `{part}` (expected letters a..i or `a..i`)"
                )))
            }
        }
    }
    Ok(rows)
}

fn parse_label_map(spec: &str) -> Result<Vec<(usize, usize)>> {
    let mut map = Vec::new();
    for pair in spec.split(',') {
        let (from, to) = pair
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad label-map entry `{pair}`")))?;
        let from = from
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad foreign label `{from}`")))?;
        let to = to
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad target label `{to}`")))?;
        map.push((from, to));
    }
    Ok(map)
}

/// Run one invocation. The returned value is the process exit code.
pub fn run(cli: Cli) -> i32 {
    tune_allocator();
    let (dir, result) = dispatch(cli);
    match result {
        Ok(()) => 0,
        Err(e) => {
            #[derive(Serialize)]
            struct ErrorRecord {
                error: String,
                usage: bool,
            }
            if let Some(dir) = &dir {
                let _ = std::fs::create_dir_all(dir);
                let _ = write_json(
                    &dir.join("error.json"),
                    &ErrorRecord {
                        error: e.to_string(),
                        usage: e.is_usage(),
                    },
                );
            }
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> (Option<PathBuf>, Result<()>) {
    match cli.cmd {
        Cmd::Train { common, init_from } => {
            let dir = out_dir(&common, "train");
            let r = cmd_train(&common, &dir, init_from.as_deref());
            (Some(dir), r)
        }
        Cmd::Evaluate { common, checkpoint } => {
            let dir = out_dir(&common, "evaluate");
            let r = cmd_evaluate(&common, &dir, &checkpoint);
            (Some(dir), r)
        }
        Cmd::CrossEvaluate {
            common,
            checkpoint,
            label_map,
        } => {
            let dir = out_dir(&common, "cross-evaluate");
            let r = cmd_cross_evaluate(&common, &dir, &checkpoint, &label_map);
            (Some(dir), r)
        }
        Cmd::Ablate { common, rows } => {
            let dir = out_dir(&common, "ablate");
            let r = cmd_ablate(&common, &dir, &rows);
            (Some(dir), r)
        }
        Cmd::Profile {
            common,
            input_size,
            latency,
        } => {
            let dir = out_dir(&common, "profile");
            let r = cmd_profile(&common, &dir, input_size, latency);
            (Some(dir), r)
        }
        Cmd::Saliency {
            common,
            checkpoint,
            image,
            synth_index,
            class,
        } => {
            let dir = out_dir(&common, "saliency");
            let r = cmd_saliency(&common, &dir, &checkpoint, image.as_deref(), synth_index, class);
            (Some(dir), r)
        }
        Cmd::SynthData {
            common,
            seed,
            classes,
            n,
            size,
            asymmetry,
            layout,
        } => {
            let dir = out_dir(&common, "synth-data");
            let r = cmd_synth_data(&common, &dir, seed, classes, n, size, asymmetry, layout.into());
            (Some(dir), r)
        }
        Cmd::SplitPreview {
            common,
            image,
            mirror_right,
        } => {
            let dir = out_dir(&common, "split-preview");
            let r = cmd_split_preview(&common, &dir, &image, mirror_right);
            (Some(dir), r)
        }
        Cmd::AlphaSweep { common } => {
            let dir = out_dir(&common, "alpha-sweep");
            let r = cmd_alpha_sweep(&common, &dir);
            (Some(dir), r)
        }
    }
}

fn cmd_train(common: &Common, dir: &Path, init_from: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    echo_config(dir, &cfg)?;
    let dataset = load_dataset(&cfg)?;
    dataset.export_manifest(&dir.join("manifest.csv"))?;
    let (train_ds, val_ds) = dataset.split_val(cfg.data.val_fraction);

    let model_cfg = cfg.effective_model()?;
    let mut model = match init_from {
        None => CmNet::<f32>::build(&model_cfg, cfg.train.seed)?,
        Some(path) => {
            let loaded = load_checkpoint::<f32>(path)?;
            let mut model = loaded.model;
            if model.cfg.num_classes != train_ds.num_classes() {
                log::info!(
                    "replacing head: checkpoint has {} classes, dataset has {}",
                    model.cfg.num_classes,
                    train_ds.num_classes()
                );
                model.replace_head(train_ds.num_classes(), cfg.train.seed);
            }
            model
        }
    };
    if model.cfg.num_classes != train_ds.num_classes() {
        return Err(Error::Config(format!(
            "model.num_classes = {} but the dataset has {} classes",
            model.cfg.num_classes,
            train_ds.num_classes()
        )));
    }

    let history = train(&mut model, &train_ds, val_ds.as_ref(), &cfg, |_| {})?;
    std::fs::write(dir.join("history.csv"), history_csv(&history))?;
    save_checkpoint(
        &dir.join("checkpoint.safetensors"),
        &model,
        &cfg,
        history.len(),
        &history,
        &train_ds.class_names,
    )?;

    let (train_acc, matrix) = evaluate(&mut model, &train_ds, cfg.train.batch_size)?;
    confusion_outputs(dir, train_acc, &matrix, &train_ds.class_names)?;
    println!("train accuracy {train_acc:.4} over {} samples", train_ds.len());
    Ok(())
}

fn cmd_evaluate(common: &Common, dir: &Path, checkpoint: &Path) -> Result<()> {
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    // dataset settings may be overridden; model table comes from the
    // checkpoint
    let mut cfg = loaded.cfg.clone();
    if common.config.is_some() || !common.overrides.is_empty() {
        let file_cfg = load_config(common)?;
        cfg.data = file_cfg.data;
        cfg.train.batch_size = file_cfg.train.batch_size;
    }
    echo_config(dir, &cfg)?;
    let dataset = load_dataset(&cfg)?;
    let mut model = loaded.model;
    let (acc, matrix) = evaluate(&mut model, &dataset, cfg.train.batch_size)?;
    confusion_outputs(dir, acc, &matrix, &dataset.class_names)?;
    println!("accuracy {acc:.4} over {} samples", dataset.len());
    Ok(())
}

fn cmd_cross_evaluate(
    common: &Common,
    dir: &Path,
    checkpoint: &Path,
    label_map: &str,
) -> Result<()> {
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    let mut cfg = loaded.cfg.clone();
    if common.config.is_some() || !common.overrides.is_empty() {
        let file_cfg = load_config(common)?;
        cfg.data = file_cfg.data;
        cfg.train.batch_size = file_cfg.train.batch_size;
    }
    echo_config(dir, &cfg)?;
    let foreign = load_dataset(&cfg)?;
    let map = parse_label_map(label_map)?;
    let mut model = loaded.model;
    let (acc, matrix) = cross_evaluate(&mut model, &foreign, &map, cfg.train.batch_size)?;
    let names: Vec<String> = (0..model.cfg.num_classes)
        .map(|c| format!("class{c}"))
        .collect();
    confusion_outputs(dir, acc, &matrix, &names)?;
    println!("cross accuracy {acc:.4} over {} samples", foreign.len());
    Ok(())
}

fn cmd_ablate(common: &Common, dir: &Path, rows: &str) -> Result<()> {
    let cfg = load_config(common)?;
    echo_config(dir, &cfg)?;
    let rows = parse_rows(rows)?;
    let dataset = load_dataset(&cfg)?;
    let (train_ds, val_ds) = dataset.split_val(cfg.data.val_fraction);
    let eval_ds = val_ds.as_ref().unwrap_or(&train_ds);
    let results = ablation_run::<f32>(&cfg, &rows, &train_ds, eval_ds)?;
    let mut csv = String::from("row,accuracy\n");
    for (row, acc) in &results {
        csv.push_str(&format!("{row},{acc:.6}\n"));
        println!("row {row}: accuracy {acc:.4}");
    }
    std::fs::write(dir.join("ablation.csv"), csv)?;
    Ok(())
}

fn cmd_profile(common: &Common, dir: &Path, input_size: usize, latency: bool) -> Result<()> {
    let cfg = load_config(common)?;
    echo_config(dir, &cfg)?;
    let model_cfg = cfg.effective_model()?;
    let opts = latency.then(LatencyOpts::default);
    let report = profile(&model_cfg, input_size, cfg.train.seed, opts)?;
    write_json(&dir.join("profile.json"), &report)?;
    println!(
        "parameters {} ({:.2} M)  flops {} ({:.3} G){}",
        report.parameter_count,
        report.parameter_count as f64 / 1e6,
        report.flops,
        report.flops as f64 / 1e9,
        report
            .latency_ms
            .map(|l| format!("  latency {l:.2} ms (batch {})", report.latency_batch))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_saliency(
    common: &Common,
    dir: &Path,
    checkpoint: &Path,
    image: Option<&Path>,
    synth_index: usize,
    class: usize,
) -> Result<()> {
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    let mut cfg = loaded.cfg.clone();
    if common.config.is_some() || !common.overrides.is_empty() {
        cfg.data = load_config(common)?.data;
    }
    echo_config(dir, &cfg)?;
    let sample = match image {
        Some(path) => load_image(path)?,
        None => {
            let ds = load_dataset(&cfg)?;
            if synth_index >= ds.len() {
                return Err(Error::Config(format!(
                    "synth index {synth_index} out of range for {} samples",
                    ds.len()
                )));
            }
            ds.samples[synth_index].clone()
        }
    };
    let mut model = loaded.model;
    let sal = saliency_map(&mut model, &sample, class)?;
    save_heatmap(&dir.join("saliency.png"), &sal.heatmap)?;
    #[derive(Serialize)]
    struct SaliencyInfo {
        class: usize,
        degenerate: bool,
    }
    write_json(
        &dir.join("saliency.json"),
        &SaliencyInfo {
            class,
            degenerate: sal.degenerate,
        },
    )?;
    println!(
        "saliency map written{}",
        if sal.degenerate { " (degenerate)" } else { "" }
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth_data(
    common: &Common,
    dir: &Path,
    seed: u64,
    classes: usize,
    n: usize,
    size: usize,
    asymmetry: f64,
    layout: SynthLayout,
) -> Result<()> {
    let cfg = load_config(common)?;
    let mut cfg = cfg;
    cfg.train.seed = seed;
    cfg.data.classes = classes;
    cfg.data.n_per_class = n;
    cfg.data.asymmetry = asymmetry;
    cfg.data.layout = layout;
    cfg.model.input_size = size;
    echo_config(dir, &cfg)?;
    let ds = synth_generate(seed, n, classes, asymmetry, size, layout)?;
    export_to_folder(&ds, &dir.join("images"))?;
    // manifest points at the exported files
    let mut manifest = String::from("path,label\n");
    let mut per_class = vec![0usize; classes];
    for s in &ds.samples {
        manifest.push_str(&format!(
            "images/class{}/{:05}.png,{}\n",
            s.label, per_class[s.label], s.label
        ));
        per_class[s.label] += 1;
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    // a balancing plan for reproducibility checks
    let plan = balance_sampler(&ds, cfg.data.sampler, seed)?;
    let plan_csv: String = plan
        .epoch_indices
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(dir.join("epoch_plan.csv"), plan_csv + "\n")?;
    println!("wrote {} samples across {} classes", ds.len(), classes);
    Ok(())
}

fn cmd_split_preview(common: &Common, dir: &Path, image_path: &Path, mirror: bool) -> Result<()> {
    let cfg = load_config(common)?;
    echo_config(dir, &cfg)?;
    let sample = load_image(image_path)?;
    let (left, right) = crate::cmem::split_face(&sample.pixels, mirror)?;
    for (name, half) in [("left.png", &left), ("right.png", &right)] {
        let (h, w, _) = half.dim();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (half[[y, x, 0]] * 255.0).round().clamp(0.0, 255.0) as u8,
                        (half[[y, x, 1]] * 255.0).round().clamp(0.0, 255.0) as u8,
                        (half[[y, x, 2]] * 255.0).round().clamp(0.0, 255.0) as u8,
                    ]),
                );
            }
        }
        buf.save(dir.join(name))?;
    }
    println!(
        "left {}x{}, right {}x{}",
        left.dim().1,
        left.dim().0,
        right.dim().1,
        right.dim().0
    );
    Ok(())
}

fn cmd_alpha_sweep(common: &Common, dir: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    echo_config(dir, &cfg)?;
    let dataset = load_dataset(&cfg)?;
    let (train_ds, val_ds) = dataset.split_val(cfg.data.val_fraction);
    let eval_ds = val_ds.as_ref().unwrap_or(&train_ds);

    let mut csv = String::from("alpha,accuracy\n");
    for step in 0..=10u32 {
        let alpha = f64::from(step) / 10.0;
        let mut run_cfg = cfg.clone();
        run_cfg.model.alpha = alpha;
        let model_cfg = run_cfg.effective_model()?;
        let mut model = CmNet::<f32>::build(&model_cfg, run_cfg.train.seed)?;
        train(&mut model, &train_ds, None, &run_cfg, |_| {})?;
        let (acc, _) = evaluate(&mut model, eval_ds, run_cfg.train.batch_size)?;
        println!("alpha {alpha:.1}: accuracy {acc:.4}");
        csv.push_str(&format!("{alpha:.1},{acc:.6}\n"));
    }
    std::fs::write(dir.join("alpha_sweep.csv"), csv)?;
    Ok(())
}
