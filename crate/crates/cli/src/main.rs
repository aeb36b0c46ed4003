//! `dwm` command line: dataset generation, training, evaluation, and
//! conditioned generation.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 undefined metric.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dwm_core::config::{Precision, RunConfig};
use dwm_core::evalsuite::{evaluate, EvalReport};
use dwm_core::numerics::Scalar;
use dwm_core::pipeline::Pipeline;
use dwm_core::ply::write_ply;
use dwm_core::toyworld::{
    generate_scene, make_dataset, read_dataset, render_views, write_dataset, CameraSpec, Dataset,
    PROMPT as PROMPT_DEFAULT,
};
use dwm_core::trainer::{
    load_checkpoint, restore_pipeline, save_checkpoint, train_joint, train_phase_a, AdamW,
    TrainPhase,
};
use dwm_core::worldlink::EgoMotion;

#[derive(Parser)]
#[command(name = "dwm", version, about = "Toy unified driving world model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    A,
    Joint,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset of procedural scenes.
    MakeData {
        /// Run configuration JSON (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train: phase A (tokenizer+render), then the joint phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoints, metrics.csv, resolved config).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run only one phase.
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
        /// Stop (and checkpoint) after this many optimizer steps of the
        /// active phase; the schedule still follows the configured totals.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint: per-horizon Chamfer vs Copy&Paste + captions.
    Eval {
        /// Overrides the eval section of the checkpoint's config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write generated/ground-truth clouds as ASCII PLY.
        #[arg(long)]
        dump_ply: bool,
        /// Do not fail on scenes with undefined Chamfer.
        #[arg(long)]
        allow_empty: bool,
    },
    /// Decode a caption and generate future clouds for an ego plan.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        /// Ego plan: "dx,dy,dyaw;dx,dy,dyaw;..." (one triple per frame).
        #[arg(long)]
        ego: String,
        #[arg(long, default_value = PROMPT_DEFAULT)]
        prompt: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    MetricUndefined(Vec<usize>),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::MetricUndefined(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::MetricUndefined(scenes) => {
                write!(f, "undefined chamfer metric for scenes {scenes:?} (use --allow-empty to tolerate)")
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| CliError::Config(e.to_string()))
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Resolved config written next to every output for provenance.
fn write_resolved_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::write(dir.join("config.json"), cfg.to_json())
        .map_err(|e| CliError::Io(e.to_string()))
}

fn parse_ego_plan(text: &str, delta_t: usize) -> Result<Vec<EgoMotion>, CliError> {
    let motions: Result<Vec<EgoMotion>, CliError> = text
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|triple| {
            let parts: Vec<&str> = triple.split(',').map(|s| s.trim()).collect();
            if parts.len() != 3 {
                return Err(CliError::Config(format!("ego triple `{triple}` must be dx,dy,dyaw")));
            }
            let nums: Result<Vec<f64>, _> = parts.iter().map(|p| p.parse::<f64>()).collect();
            let nums = nums.map_err(|e| CliError::Config(format!("ego triple `{triple}`: {e}")))?;
            Ok(EgoMotion { dx: nums[0], dy: nums[1], dyaw: nums[2] })
        })
        .collect();
    let motions = motions?;
    if motions.len() != delta_t {
        return Err(CliError::Config(format!(
            "ego plan has {} triples, model expects {delta_t}",
            motions.len()
        )));
    }
    Ok(motions)
}

fn cmd_make_data(config: Option<&Path>, out: &Path, scenes: usize, seed: u64) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let ds = make_dataset(seed, scenes, &cfg.world, cfg.model.delta_t)
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_dataset(&ds, out).map_err(|e| CliError::Io(e.to_string()))?;
    // human-readable manifest beside the binary container
    let manifest = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    std::fs::write(out.with_extension("manifest.json"), manifest)
        .map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            write_resolved_config(dir, &cfg)?;
        }
    }
    println!("wrote {} scenes to {}", scenes, out.display());
    Ok(())
}

struct TrainArgs<'a> {
    config: &'a Path,
    data: &'a Path,
    out: &'a Path,
    resume: Option<&'a Path>,
    phase: Option<PhaseArg>,
    max_steps: Option<usize>,
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(Some(args.config))?;
    let dataset = read_dataset(args.data).map_err(|e| CliError::Io(e.to_string()))?;
    ensure_dir(args.out)?;
    write_resolved_config(args.out, &cfg)?;
    match cfg.train.precision {
        Precision::F32 => train_generic::<f32>(&cfg, &dataset, args),
        Precision::F64 => train_generic::<f64>(&cfg, &dataset, args),
    }
}

fn train_generic<S: Scalar>(cfg: &RunConfig, dataset: &Dataset, args: &TrainArgs) -> Result<(), CliError> {
    let (mut pipe, mut opt, mut phase, mut step) = match args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(|e| CliError::Io(e.to_string()))?;
            if &ckpt.config != cfg {
                return Err(CliError::Config(
                    "resume checkpoint was trained with a different config".into(),
                ));
            }
            let (pipe, opt) = restore_pipeline::<S>(&ckpt).map_err(|e| CliError::Io(e.to_string()))?;
            let opt = opt.ok_or_else(|| {
                CliError::Config("checkpoint has no optimizer state; cannot resume".into())
            })?;
            (pipe, opt, ckpt.train_state.phase, ckpt.train_state.step)
        }
        None => {
            let pipe = Pipeline::<S>::init(cfg);
            let opt = AdamW::new(&pipe.store);
            (pipe, opt, TrainPhase::Init, 0)
        }
    };

    let metrics_path = args.out.join("metrics.csv");
    let only = args.phase;

    // phase A
    let run_a = match (only, phase) {
        (Some(PhaseArg::Joint), _) => false,
        (_, TrainPhase::Joint) => false,
        _ => true,
    };
    if run_a {
        let start = if phase == TrainPhase::PhaseA { step } else { 0 };
        let target = cfg.train.steps_phase_a.min(start.saturating_add(args.max_steps.unwrap_or(usize::MAX)));
        let report = train_phase_a(&mut pipe, dataset, &mut opt, start, target);
        report.metrics.append_csv(&metrics_path).map_err(|e| CliError::Io(e.to_string()))?;
        phase = TrainPhase::PhaseA;
        step = target;
        save_checkpoint(&args.out.join("phase_a.ckpt"), &pipe.store, cfg, &pipe.vocab, Some(&opt), phase, step)
            .map_err(|e| CliError::Io(e.to_string()))?;
        println!("phase A: {} steps, final depth L1 {:.4}", target.saturating_sub(start), report.final_l_d);
        if target < cfg.train.steps_phase_a {
            return Ok(()); // interrupted by --max-steps
        }
    }

    // joint phase
    if !matches!(only, Some(PhaseArg::A)) {
        let start = if phase == TrainPhase::Joint { step } else { 0 };
        let target = cfg.train.steps_joint.min(start.saturating_add(args.max_steps.unwrap_or(usize::MAX)));
        let report = train_joint(&mut pipe, dataset, &mut opt, start, target, None);
        report.metrics.append_csv(&metrics_path).map_err(|e| CliError::Io(e.to_string()))?;
        save_checkpoint(
            &args.out.join("model.ckpt"),
            &pipe.store,
            cfg,
            &pipe.vocab,
            Some(&opt),
            TrainPhase::Joint,
            target,
        )
        .map_err(|e| CliError::Io(e.to_string()))?;
        println!("joint: {} steps, final depth L1 {:.4}", target.saturating_sub(start), report.final_l_d);
    }
    Ok(())
}

fn cmd_eval(
    config: Option<&Path>,
    data: &Path,
    ckpt_path: &Path,
    out: &Path,
    dump_ply: bool,
    allow_empty: bool,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path).map_err(|e| CliError::Io(e.to_string()))?;
    let mut cfg = ckpt.config.clone();
    if let Some(path) = config {
        let over = load_config(Some(path))?;
        cfg.eval = over.eval;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let dataset = read_dataset(data).map_err(|e| CliError::Io(e.to_string()))?;
    ensure_dir(out)?;
    write_resolved_config(out, &cfg)?;
    let report = match cfg.train.precision {
        Precision::F32 => eval_generic::<f32>(&ckpt, &cfg, &dataset, out, dump_ply)?,
        Precision::F64 => eval_generic::<f64>(&ckpt, &cfg, &dataset, out, dump_ply)?,
    };
    report
        .write_csv(&out.join("eval_report.csv"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    for h in report.horizons() {
        println!(
            "horizon {h}s: model CD {:?}, copy&paste CD {:?}",
            report.mean_model_cd(h),
            report.mean_copy_paste_cd(h)
        );
    }
    println!("rouge-l {:.4}, exact match {:.2}", report.mean_rouge(), report.exact_match_rate());
    let undefined = report.undefined_scenes();
    if !undefined.is_empty() && !allow_empty {
        return Err(CliError::MetricUndefined(undefined));
    }
    Ok(())
}

fn eval_generic<S: Scalar>(
    ckpt: &dwm_core::trainer::Checkpoint,
    cfg: &RunConfig,
    dataset: &Dataset,
    out: &Path,
    dump_ply: bool,
) -> Result<EvalReport, CliError> {
    let (mut pipe, _) = restore_pipeline::<S>(ckpt).map_err(|e| CliError::Io(e.to_string()))?;
    pipe.cfg.eval = cfg.eval.clone();
    let report = evaluate(&pipe, dataset);
    if dump_ply {
        let ply_dir = out.join("ply");
        ensure_dir(&ply_dir)?;
        for (scene, sample) in dataset.samples.iter().enumerate() {
            let ego: Vec<EgoMotion> = sample
                .ego_motion
                .iter()
                .map(|m| EgoMotion { dx: m[0] as f64, dy: m[1] as f64, dyaw: m[2] as f64 })
                .collect();
            let gen = pipe.generate(sample, &ego, PROMPT_DEFAULT);
            for (h, cloud) in gen.clouds.iter().enumerate() {
                write_ply(&ply_dir.join(format!("scene{scene}_gen_{h}s.ply")), cloud)
                    .map_err(|e| CliError::Io(e.to_string()))?;
                let gt: Vec<[f64; 3]> = sample.clouds[h]
                    .iter()
                    .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
                    .collect();
                write_ply(&ply_dir.join(format!("scene{scene}_gt_{h}s.ply")), &gt)
                    .map_err(|e| CliError::Io(e.to_string()))?;
            }
        }
    }
    Ok(report)
}

fn cmd_generate(ckpt_path: &Path, scene_seed: u64, ego: &str, prompt: &str, out: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path).map_err(|e| CliError::Io(e.to_string()))?;
    let cfg = ckpt.config.clone();
    let motions = parse_ego_plan(ego, cfg.model.delta_t)?;
    ensure_dir(out)?;
    match cfg.train.precision {
        Precision::F32 => generate_generic::<f32>(&ckpt, &cfg, scene_seed, &motions, prompt, out),
        Precision::F64 => generate_generic::<f64>(&ckpt, &cfg, scene_seed, &motions, prompt, out),
    }
}

fn generate_generic<S: Scalar>(
    ckpt: &dwm_core::trainer::Checkpoint,
    cfg: &RunConfig,
    scene_seed: u64,
    motions: &[EgoMotion],
    prompt: &str,
    out: &Path,
) -> Result<(), CliError> {
    let (pipe, _) = restore_pipeline::<S>(ckpt).map_err(|e| CliError::Io(e.to_string()))?;
    let scene = generate_scene(scene_seed, &cfg.world, cfg.model.delta_t)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let cams = CameraSpec::from_world(&cfg.world);
    let images = render_views(&scene, 0, &cams, scene.ego[0]);
    let sample = dwm_core::toyworld::FrameSample {
        images,
        clouds: vec![Vec::new(); cfg.model.delta_t + 1],
        ego_motion: motions.iter().map(|m| [m.dx as f32, m.dy as f32, m.dyaw as f32]).collect(),
        prompt: prompt.to_string(),
        answer: String::new(),
    };
    let gen = pipe.generate(&sample, motions, prompt);
    println!("{}", gen.answer);
    for (h, cloud) in gen.clouds.iter().enumerate() {
        let path = out.join(format!("gen_{h}s.ply"));
        write_ply(&path, cloud).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::MakeData { config, out, scenes, seed } => {
            cmd_make_data(config.as_deref(), out, *scenes, *seed)
        }
        Cmd::Train { config, data, out, resume, phase, max_steps } => cmd_train(&TrainArgs {
            config,
            data,
            out,
            resume: resume.as_deref(),
            phase: *phase,
            max_steps: *max_steps,
        }),
        Cmd::Eval { config, data, ckpt, out, dump_ply, allow_empty } => {
            cmd_eval(config.as_deref(), data, ckpt, out, *dump_ply, *allow_empty)
        }
        Cmd::Generate { ckpt, scene_seed, ego, prompt, out } => {
            cmd_generate(ckpt, *scene_seed, ego, prompt, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
