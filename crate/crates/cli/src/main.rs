use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use muc_core::body::{export_obj, lbs_forward, make_toy_asset_with, BodyModelAsset, ParamSet};
use muc_core::metrics::{evaluate_body, write_metric_csv};
use muc_core::pipeline::{evaluate_scenes, run_eval_sweep, run_gradcheck, run_training, write_sweep_csv, FusionMode, FusionModel, RunConfig};
use muc_core::synth::{filter_split, generate_dataset, read_dataset_checked, write_dataset, SceneSample, Split};
use muc_core::{MucError, Result};

#[derive(Parser)]
#[command(name = "muc", version, about = "Multi-view body estimate fusion on synthetic scenes")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Views per scene for gen-data, train and eval (sweeps k = 1..=n); views fused for fuse.
    #[arg(long, global = true)]
    cameras: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Benchmark,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test scenes into the dataset file.
    GenData,
    /// Train both networks; writes checkpoints and the loss log to the run directory.
    Train,
    /// Fuse one scene and write its mesh and parameters.
    Fuse {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene id; first test scene when omitted.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long, value_enum, default_value_t = Mode::Full)]
        mode: Mode,
    },
    /// Camera-count sweep over the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every network block.
    Gradcheck {
        /// Scale the backward of this graph op (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a mesh as OBJ: the rest pose, or a scene's ground truth with --scene.
    Export {
        #[arg(long)]
        scene: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    JrnOnly,
    Uniform,
}

impl From<Mode> for FusionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => FusionMode::Full,
            Mode::JrnOnly => FusionMode::JrnOnly,
            Mode::Uniform => FusionMode::Uniform,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => match cli.preset {
            Preset::Default => RunConfig::default(),
            Preset::Benchmark => RunConfig::benchmark(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.dataset {
        cfg.paths.dataset = d.clone();
    }
    let sets_views = matches!(cli.command, Command::GenData | Command::Train | Command::Eval { .. });
    if let (Some(n), true) = (cli.cameras, sets_views) {
        cfg.data.scene.n_cameras = n;
        cfg.eval.k_list = (1..=n).collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MucError::Io { path: dir.to_path_buf(), source: e })
}

fn load_scenes(cfg: &RunConfig, asset: &BodyModelAsset) -> Result<Vec<SceneSample>> {
    read_dataset_checked(&cfg.paths.dataset, asset)
}

fn load_model(cfg: &RunConfig, checkpoint: Option<PathBuf>, run_dir: &Path) -> Result<FusionModel> {
    let mut model = FusionModel::from_config(cfg)?;
    let path = checkpoint.unwrap_or_else(|| run_dir.join(muc_core::pipeline::train::BEST_CHECKPOINT));
    model.load_weights(&path)?;
    Ok(model)
}

fn find_scene(scenes: &[SceneSample], id: Option<&str>) -> Result<SceneSample> {
    let found = match id {
        Some(id) => scenes.iter().find(|s| s.scene_id == id),
        None => scenes.iter().find(|s| s.split == Split::Test).or(scenes.first()),
    };
    found.cloned().ok_or_else(|| MucError::InvalidArgument(format!("scene {} not in dataset", id.unwrap_or("<first test>"))))
}

fn params_csv(p: &ParamSet) -> String {
    let mut s = String::from("group,index,x,y,z\n");
    for (name, rows) in [("body", &p.p_body), ("hand", &p.p_hand)] {
        for (i, r) in rows.iter().enumerate() {
            writeln!(s, "{name},{i},{:?},{:?},{:?}", r[0], r[1], r[2]).unwrap();
        }
    }
    for (name, c) in [("shape", &p.p_shape), ("face", &p.p_face)] {
        for (i, x) in c.iter().enumerate() {
            writeln!(s, "{name},{i},{x:?},,").unwrap();
        }
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let run_dir = out_dir(&cli, &cfg);
    match cli.command {
        Command::GenData => {
            let path = cli.out.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
            let asset = make_toy_asset_with(cfg.asset)?;
            let scenes = generate_dataset(&asset, &cfg.data, cfg.seed)?;
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_dataset(&path, &asset, &scenes)?;
            println!("wrote {} scenes to {}", scenes.len(), path.display());
        }
        Command::Train => {
            let asset = make_toy_asset_with(cfg.asset)?;
            let scenes = load_scenes(&cfg, &asset)?;
            let out = run_training(&cfg, &filter_split(&scenes, Split::Train), &filter_split(&scenes, Split::Val), &run_dir)?;
            for r in &out.log {
                println!("epoch {:3}  total {:.5}  val PA-MPJPE {:.3} mm", r.epoch, r.total, r.val_pa_mpjpe);
            }
            println!(
                "best epoch {} ({:.3} mm, untrained {:.3} mm); checkpoint {}",
                out.best_epoch,
                out.best_val_pa_mpjpe,
                out.initial_val_pa_mpjpe,
                out.best_checkpoint.display()
            );
        }
        Command::Fuse { checkpoint, scene, mode } => {
            let model = load_model(&cfg, checkpoint, &run_dir)?;
            let scenes = load_scenes(&cfg, &model.asset)?;
            let scene = find_scene(&scenes, scene.as_deref())?;
            let k = cli.cameras.unwrap_or(scene.n_cameras());
            let fused = model.infer(&scene, k, mode.into())?;
            let gt = lbs_forward(&model.asset, &scene.gt_params)?;
            let report = evaluate_body(&fused.body, &gt, &model.asset, cfg.eval.procrustes)?;
            create_dir(&run_dir)?;
            let stem = format!("{}_k{k}", scene.scene_id);
            let obj = run_dir.join(format!("{stem}.obj"));
            export_obj(&fused.body, &model.asset.faces, &obj)?;
            let csv = run_dir.join(format!("{stem}_params.csv"));
            std::fs::write(&csv, params_csv(&fused.params)).map_err(|e| MucError::Io { path: csv.clone(), source: e })?;
            println!("{}: k={k} PA-MPJPE {:.3} mm, PA-MPVPE {:.3} mm; wrote {} and {}", scene.scene_id, report.pa_mpjpe, report.pa_mpvpe, obj.display(), csv.display());
        }
        Command::Eval { checkpoint } => {
            let model = load_model(&cfg, checkpoint, &run_dir)?;
            let scenes = load_scenes(&cfg, &model.asset)?;
            let test = filter_split(&scenes, Split::Test);
            let rows = run_eval_sweep(&model, &test, &cfg.eval.k_list, cfg.eval.procrustes)?;
            create_dir(&run_dir)?;
            write_sweep_csv(&run_dir.join("sweep.csv"), &rows)?;
            let mut per_scene = Vec::new();
            for &k in &cfg.eval.k_list {
                per_scene.extend(evaluate_scenes(&model, &test, k, FusionMode::Full, cfg.eval.procrustes)?);
            }
            write_metric_csv(&run_dir.join("scene_metrics.csv"), &per_scene)?;
            println!("  k  full PA-MPJPE  jrn-only  uniform  full PA-MPVPE");
            for r in &rows {
                println!("{:3}  {:13.3}  {:8.3}  {:7.3}  {:13.3}", r.k, r.full.pa_mpjpe, r.jrn_only.pa_mpjpe, r.uniform.pa_mpjpe, r.full.pa_mpvpe);
            }
            println!("wrote {}", run_dir.join("sweep.csv").display());
        }
        Command::Gradcheck { corrupt } => {
            let op: Option<&'static str> = corrupt.map(|s| &*Box::leak(s.into_boxed_str()));
            let report = run_gradcheck(&cfg, op)?;
            let path = cli.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("gradcheck.csv"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            report.write_csv(&path)?;
            for r in &report.results {
                println!("{:20} {:.3e}  {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
            }
            if !report.passed() {
                return Err(MucError::NumericFailure { batch: 0, detail: "gradient check failed".into() });
            }
        }
        Command::Export { scene } => {
            let asset = make_toy_asset_with(cfg.asset)?;
            let params = match scene {
                Some(id) => find_scene(&load_scenes(&cfg, &asset)?, Some(&id))?.gt_params,
                None => ParamSet::zeros_for(&asset),
            };
            let body = lbs_forward(&asset, &params)?;
            let path = cli.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("body.obj"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            export_obj(&body, &asset.faces, &path)?;
            println!("wrote {} ({} vertices, {} faces)", path.display(), body.vertices.len(), asset.faces.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
