use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use weatherbias::dataset::{read_manifest, write_manifest, ClassSet};
use weatherbias::detector::{load_model, save_model, train, Architecture, ModelState, TrainConfig};
use weatherbias::evaluation::{
    evaluate, read_detection_dump, render_report_table, ApMethod, DetectionSource, EvalConfig, EvalReport, TableFormat,
};
use weatherbias::imaging::{corrupt_dataset, CorruptionChain};
use weatherbias::ingest::{parse_coco_json, read_voc_files};
use weatherbias::pipeline::{parse_stage_list, read_config, read_summary, render_tables, run_experiment};
use weatherbias::scenegen::{generate_dataset, SceneSpec};

#[derive(Parser)]
#[command(name = "weatherbias", version, about = "Good-weather bias identification and mitigation for a small detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Voc,
    Coco,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

impl From<Format> for TableFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Markdown => TableFormat::Markdown,
            Format::Csv => TableFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Voc,
    Coco,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene dataset.
    Generate {
        #[arg(long, value_enum, default_value = "voc")]
        family: Family,
        /// TOML scene spec; overrides --family.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a corruption chain to every image of a dataset.
    Corrupt {
        #[arg(long)]
        manifest: PathBuf,
        /// e.g. `fog:density=0.5,airlight=0.7+rain:streaks=40,length=6,alpha=0.5`
        #[arg(long)]
        chain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh model, or fine-tune one given with --init.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate a checkpoint or a detection dump on a dataset.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
        model: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value = "11point")]
        method: ApMethod,
        #[arg(long, default_value = "eval")]
        label: String,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the full bias identification and mitigation procedure.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of stage1,stage2,stage3,stage4,tech1,tech2.
        #[arg(long)]
        stages: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_cache: bool,
    },
    /// Print the tables and checks of a finished run.
    Report {
        /// Run output directory or its summary.json.
        path: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
    /// Convert VOC XML or COCO JSON annotations to a native manifest.
    Ingest {
        #[arg(long, value_enum)]
        source: Source,
        /// VOC XML files, or one COCO JSON file.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_report(report: &EvalReport, format: Format) -> Result<(), AnyError> {
    print!("{}", render_report_table(std::slice::from_ref(report), &report.classes, format.into())?);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<bool, AnyError> {
    match cmd {
        Command::Generate { family, spec, seed, count, out } => {
            let spec = match spec {
                Some(path) => toml::from_str::<SceneSpec>(&std::fs::read_to_string(&path)?)?,
                None => match family {
                    Family::Voc => SceneSpec::voc_like(seed),
                    Family::Coco => SceneSpec::coco_like(seed),
                },
            };
            let m = generate_dataset(&spec, count, &out)?;
            eprintln!("wrote {} images to {}", m.len(), out.display());
        }
        Command::Corrupt { manifest, chain, out } => {
            let chain: CorruptionChain = chain.parse()?;
            let m = corrupt_dataset(&read_manifest(&manifest)?, &chain, &out.join("images"))?;
            write_manifest(&m, &out.join("manifest.tsv"))?;
            eprintln!("wrote {} images to {}", m.len(), out.display());
        }
        Command::Train { manifest, out, init, seed, steps, lr, batch_size } => {
            let data = read_manifest(&manifest)?;
            let (model, base) = match &init {
                Some(path) => (load_model(path)?, TrainConfig::default().fine_tune_default()),
                None => {
                    let arch = Architecture::desk_scale(data.class_set.len());
                    (ModelState::init(arch, data.class_set.clone(), seed)?, TrainConfig::default())
                }
            };
            let cfg = TrainConfig {
                learning_rate: lr.unwrap_or(base.learning_rate),
                steps: steps.unwrap_or(base.steps),
                batch_size: batch_size.unwrap_or(base.batch_size),
                seed,
                ..base
            };
            let outcome = train(&model, &data, &cfg)?;
            save_model(&outcome.model, &out)?;
            if let Some(last) = outcome.loss_trace.last() {
                eprintln!("trained {} steps, final batch loss {last:.4}", cfg.steps);
            }
        }
        Command::Eval { manifest, model, detections, iou, method, label, format, json } => {
            let test = read_manifest(&manifest)?;
            let cfg = EvalConfig { iou_threshold: iou, method, ..EvalConfig::default() };
            let report = match (model, detections) {
                (Some(path), _) => evaluate(DetectionSource::Model(&load_model(&path)?), &test, &cfg, &label)?,
                (None, Some(path)) => evaluate(DetectionSource::Dump(&read_detection_dump(&path)?), &test, &cfg, &label)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            print_report(&report, format)?;
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            }
        }
        Command::Run { config, seed, stages, out, no_cache } => {
            let mut cfg = read_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(list) = stages {
                cfg.stages = parse_stage_list(&list)?;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if no_cache {
                cfg.cache = false;
            }
            let summary = run_experiment(&cfg, &mut |line| eprintln!("{line}"))?;
            println!("{}", render_tables(&summary, TableFormat::Markdown)?);
            for c in &summary.checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(summary.passed);
        }
        Command::Report { path, format } => {
            let path = if path.is_dir() { path.join("summary.json") } else { path };
            let summary = read_summary(&path)?;
            println!("{}", render_tables(&summary, format.into())?);
            if let Some(gap) = summary.bias.bias_gap {
                println!("bias gap: {gap:.2}");
            }
            for m in &summary.bias.mitigations {
                println!("{}: mAP {:.2}, delta {:+.2}, ratio {}", m.technique, m.map, m.delta_map, serde_json::to_string(&m.ratio)?);
            }
            for c in &summary.checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(summary.passed);
        }
        Command::Ingest { source, inputs, images, out } => {
            let classes = ClassSet::canonical();
            let (m, dropped) = match source {
                Source::Voc => read_voc_files(&inputs, &images, &classes)?,
                Source::Coco => {
                    let [path] = inputs.as_slice() else {
                        return Err("COCO ingestion takes exactly one JSON file".into());
                    };
                    let import = parse_coco_json(&std::fs::read(path)?, &classes, &images)?;
                    (import.manifest, import.dropped)
                }
            };
            write_manifest(&m, &out)?;
            eprintln!("wrote {} records to {} ({dropped} annotations outside the class set dropped)", m.len(), out.display());
            if m.is_empty() {
                eprintln!("warning: {} has no records", Path::new(&out).display());
            }
        }
    }
    Ok(true)
}
