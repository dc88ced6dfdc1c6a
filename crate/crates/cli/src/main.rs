use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use autolabel_core::eval::{evaluate, ClassPreset, EvalReport};
use autolabel_core::ingest::{aggregate_sweeps, load_scene, write_scene, LoadOptions};
use autolabel_core::pipeline::{run_label, PipelineConfig};
use autolabel_core::plot::{render_bev, BevLayer};
use autolabel_core::results::Results;
use autolabel_core::synth::{clean_scene_spec, generate, noisy_scene_spec, single_mover_spec, SceneSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "autolabel", version, about = "Zero-shot 3D box labeling from lidar sweeps and 2D instance masks")]
struct Cli {
    /// Worker threads for per-frame stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set stages.denoise=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Bad command-line input detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o).map_err(|e| UsageError(format!("--set {o}: {e}")))?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthPreset {
    Clean,
    Noisy,
    Mover,
}

#[derive(Subcommand)]
enum Command {
    /// Label a scene directory and write a results file.
    Label {
        #[arg(long)]
        scene: PathBuf,
        /// Results path (default: `output.results` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a results file against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Directory receiving the JSON and CSV reports.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Class preset: 1, 3 or 8 (overrides `eval.preset`).
        #[arg(long)]
        preset: Option<String>,
        /// Score every prediction with confidence 1.
        #[arg(long)]
        unit_confidence: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic scene with ground truth.
    Synth {
        /// Scene spec JSON.
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// Built-in scene when no spec file is given.
        #[arg(long, value_enum)]
        preset: Option<SynthPreset>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one frame of a results file as a bird's-eye-view SVG.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Scene directory to draw the frame's lidar points from.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Ground-truth results drawn as a second layer.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Half-width of the view in meters.
        #[arg(long, default_value_t = 40.0)]
        range: f64,
    },
    /// Print the fully defaulted configuration.
    DumpConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                return ExitCode::from(EXIT_USAGE);
            }
            match e.downcast_ref::<autolabel_core::Error>() {
                Some(core) if core.is_data_error() => ExitCode::from(EXIT_DATA),
                _ => ExitCode::from(EXIT_INTERNAL),
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        builder = builder.num_threads(jobs.max(1));
    }
    let pool = builder.build().context("building worker pool")?;
    pool.install(|| dispatch(cli.command))
}

fn missing_frame(frame: usize) -> autolabel_core::Error {
    autolabel_core::Error::schema(Some(frame), "frames", "frame not present")
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Label { scene, out, config } => {
            let cfg = config.resolve()?;
            let results = run_label(&scene, &cfg)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output.results));
            results.write(&out)?;
            let n: usize = results.frames.iter().map(|f| f.boxes.len()).sum();
            println!("wrote {n} boxes over {} frames to {}", results.frames.len(), out.display());
        }
        Command::Eval {
            results,
            gt,
            out_dir,
            preset,
            unit_confidence,
            config,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(p) = preset {
                cfg.eval.preset = ClassPreset::parse(&p)
                    .ok_or_else(|| UsageError(format!("unknown preset {p:?}; expected 1, 3 or 8")))?;
            }
            cfg.eval.unit_confidence |= unit_confidence;
            let preds = Results::read(&results)?.to_eval_boxes()?;
            let truth = Results::read(&gt)?.to_eval_boxes()?;
            let report = evaluate(&preds, &truth, &cfg.eval)?;
            write_report(&report, &out_dir, &cfg)?;
            print_report(&report);
        }
        Command::Synth { spec, preset, seed, out } => {
            let mut spec = match (spec, preset) {
                (Some(path), _) => SceneSpec::load(&path)?,
                (None, Some(SynthPreset::Noisy)) => noisy_scene_spec(),
                (None, Some(SynthPreset::Mover)) => single_mover_spec(4.0),
                (None, _) => clean_scene_spec(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let output = generate(&spec)?;
            write_scene(&output.scene, &out)?;
            output.ground_truth.to_results(&output.scene).write(&out.join("ground_truth.json"))?;
            println!(
                "wrote scene {} ({} frames, {} objects) to {}",
                output.scene.scene_id,
                output.scene.frames.len(),
                spec.objects.len(),
                out.display()
            );
        }
        Command::Plot {
            results,
            frame,
            out,
            scene,
            gt,
            range,
        } => {
            let results = Results::read(&results)?;
            let boxes = frame_boxes(&results, frame)?;
            let truth = match gt {
                Some(path) => frame_boxes(&Results::read(&path)?, frame)?,
                None => Vec::new(),
            };
            let points = match scene {
                Some(dir) => {
                    let scene = load_scene(&dir, &LoadOptions::default())?;
                    let idx = scene.frames.iter().position(|f| f.frame_index == frame).ok_or_else(|| missing_frame(frame))?;
                    aggregate_sweeps(&scene, idx, 1)?.cloud.points().to_vec()
                }
                None => Vec::new(),
            };
            let svg = render_bev(
                &points,
                &[
                    BevLayer { boxes: &truth, stroke: "#2ca02c" },
                    BevLayer { boxes: &boxes, stroke: "#1f77b4" },
                ],
                range,
            );
            write_file(&out, &svg)?;
            println!("wrote {}", out.display());
        }
        Command::DumpConfig { config } => print!("{}", config.resolve()?.canonical_json()),
    }
    Ok(())
}

fn frame_boxes(results: &Results, frame: usize) -> anyhow::Result<Vec<autolabel_core::scene::Box3D>> {
    let f = results
        .frame(frame)
        .ok_or_else(|| missing_frame(frame))?;
    Ok(f.boxes.iter().map(|b| b.to_box()).collect::<Result<_, _>>()?)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(report: &EvalReport, dir: &Path, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(report)? + "\n";
    write_file(&dir.join(&cfg.output.report_json), &json)?;
    write_file(&dir.join(&cfg.output.report_csv), &report.to_csv())
}

fn print_report(report: &EvalReport) {
    let pct = |x: f64| 100.0 * x;
    for c in &report.classes {
        println!(
            "{:<12} gt {:>5} pred {:>5} AP {:>6.2}",
            c.class_name,
            c.n_gt,
            c.n_pred,
            pct(c.mean_ap)
        );
    }
    println!(
        "mAP {:.2}  mATE {:.4}  mASE {:.4}  mAOE {:.4}  mAVE {:.4}  mAAE {:.4}  NDS {:.2}",
        pct(report.mean_ap),
        report.errors.ate,
        report.errors.ase,
        report.errors.aoe,
        report.errors.ave,
        report.maae,
        pct(report.nds)
    );
}
