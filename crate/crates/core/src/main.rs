use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pagnerf::config::TrainConfig;
use pagnerf::dataset::{export_dataset, load_dataset, read_pose, write_rgb_png, write_u16_png, NoiseConfig};
use pagnerf::metrics::write_metrics_csv;
use pagnerf::scene::{generate, ScenePreset};
use pagnerf::trainer::{
    ablate, num_windows, write_ablation_csv, write_ablation_svg, AblationAxis, DatasetReport, TrainData, TrainState, WindowReport,
};
use pagnerf::types::Image;
use pagnerf::{Error, Result};

#[derive(Parser)]
#[command(name = "pagnerf", about = "Panoptic radiance fields on permutohedral hash grids")]
struct Cli {
    /// Worker threads; 1 gives bit-identical runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory.
    Generate {
        #[arg(long, default_value = "desk")]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        frames: Option<usize>,
        /// Odometry translation noise, m.
        #[arg(long, default_value_t = 0.0)]
        noise_t: f64,
        /// Odometry rotation noise, degrees.
        #[arg(long, default_value_t = 0.0)]
        noise_r: f64,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        /// Keep detection IDs equal to the ground truth.
        #[arg(long)]
        no_shuffle: bool,
        #[arg(long, default_value_t = 0.0)]
        conf_noise: f64,
    },
    /// Train one model per window.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Train only this window.
        #[arg(long)]
        window: Option<usize>,
        /// Extra `key=value` settings applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Continue from the window's checkpoint if present.
        #[arg(long)]
        resume: bool,
        /// Save a checkpoint every this many epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Render a frame from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// A pose file, or the dataset index of a frame in the window.
        #[arg(long)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against its dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Sweep grid sizes, train per value, and tabulate quality and size.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated; capacities are given as log2.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        /// Dataset to train on; generated from `--scene` when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        scene: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    for kv in sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Usage(format!("expected KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &WindowReport) {
    print!("window {}: psnr {:.3} dB", r.window, r.psnr);
    if let Some(pq) = &r.pq {
        print!(", pq {:.4}", pq.pq);
    }
    if let Some(m) = r.miou {
        print!(", miou {:.4}", m);
    }
    if let Some(c) = r.id_consistency {
        print!(", id consistency {:.4}", c);
    }
    if let Some(p) = &r.pose_error {
        print!(", pose error {:.4} m / {:.3} deg (init {:.4} m / {:.3} deg)", p.translation, p.rotation_deg, p.init_translation, p.init_rotation_deg);
    }
    println!(", {:.1} ms per image", r.infer_seconds * 1e3);
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            scene,
            out,
            seed,
            frames,
            noise_t,
            noise_r,
            dropout,
            no_shuffle,
            conf_noise,
        } => {
            let mut preset = ScenePreset::by_name(&scene)?;
            if let Some(n) = frames {
                preset = preset.with_frames(n);
            }
            let noise = NoiseConfig {
                sigma_t: noise_t,
                sigma_r_deg: noise_r,
                dropout,
                shuffle_ids: !no_shuffle,
                conf_noise,
            };
            let ds = generate(&preset, &noise, seed)?;
            export_dataset(&ds, &out)?;
            println!("wrote {} frames to {}", ds.frames.len(), out.display());
        }
        Command::Train {
            data,
            config,
            out,
            window,
            sets,
            resume,
            checkpoint_every,
        } => {
            let cfg = load_config(config.as_deref(), &sets)?;
            let ds = load_dataset(&data)?;
            mkdir(&out)?;
            let windows: Vec<usize> = match window {
                Some(w) => vec![w],
                None => (0..num_windows(&ds)).collect(),
            };
            let mut reports = Vec::new();
            for w in windows {
                let td = TrainData::from_window(&ds, w, &cfg)?;
                let ckpt = out.join(format!("window_{w}.ckpt"));
                let mut state = if resume && ckpt.exists() {
                    let s = TrainState::load(&ckpt)?;
                    eprintln!("resuming window {w} at epoch {}", s.epoch);
                    s
                } else {
                    TrainState::new(cfg.clone(), &td)?
                };
                let total = state.config.epochs;
                let every = checkpoint_every.unwrap_or(total).max(1);
                while state.epoch < total {
                    let until = ((state.epoch / every) + 1) * every;
                    state.train_until(&td, until, |l| {
                        if (l.epoch + 1) % 50 == 0 {
                            eprintln!("window {w} epoch {:>4}: loss {:.6} (color {:.6})", l.epoch + 1, l.total, l.parts.color);
                        }
                    })?;
                    if state.epoch < total {
                        state.save(&ckpt)?;
                    }
                }
                if state.config.register_validation {
                    state.register_validation(&td)?;
                }
                state.save(&ckpt)?;
                state.write_log_csv(&out.join(format!("window_{w}_log.csv")))?;
                let r = state.evaluate(&td)?;
                print_report(&r);
                reports.push(r);
            }
            let rep = DatasetReport::from_windows(reports);
            write_metrics_csv(&out.join("metrics.csv"), &rep.frame_rows())?;
            println!("mean psnr {:.3} dB, pq {:?}, miou {:?}", rep.psnr, rep.pq, rep.miou);
        }
        Command::Render { ckpt, pose, out } => {
            let state = TrainState::load(&ckpt)?;
            let (pose, name) = match pose.parse::<usize>() {
                Ok(id) => {
                    let pos = state
                        .frame_position(id)
                        .ok_or_else(|| Error::Usage(format!("frame {id} is not in the checkpoint's window {:?}", state.frame_ids)))?;
                    (state.pose(pos)?, format!("{id:06}"))
                }
                Err(_) => (read_pose(Path::new(&pose))?, "pose".to_string()),
            };
            mkdir(&out)?;
            let r = state.render(&pose)?;
            write_rgb_png(&out.join(format!("{name}_rgb.png")), &r.rgb)?;
            let depth_mm: Vec<u16> = r.depth.data.iter().map(|d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16).collect();
            write_u16_png(&out.join(format!("{name}_depth.png")), &Image::from_vec(r.depth.width, r.depth.height, depth_mm)?)?;
            write_u16_png(&out.join(format!("{name}_sem.png")), &r.semantic)?;
            write_u16_png(&out.join(format!("{name}_inst.png")), &r.instance)?;
            println!("wrote {name}_{{rgb,depth,sem,inst}}.png to {}", out.display());
        }
        Command::Eval { ckpt, data, out } => {
            let state = TrainState::load(&ckpt)?;
            let ds = load_dataset(&data)?;
            let td = TrainData::from_window(&ds, state.window, &state.config)?;
            let r = state.evaluate(&td)?;
            print_report(&r);
            write_metrics_csv(&out, &r.frames)?;
        }
        Command::Ablate {
            axis,
            values,
            data,
            scene,
            config,
            sets,
            out,
        } => {
            let axis: AblationAxis = axis.parse()?;
            if values.is_empty() {
                return Err(Error::Usage("--values needs at least one value".into()));
            }
            let cfg = load_config(config.as_deref(), &sets)?;
            let ds = match data {
                Some(d) => load_dataset(&d)?,
                None => generate(&ScenePreset::by_name(&scene)?, &NoiseConfig::default(), cfg.seed)?,
            };
            mkdir(&out)?;
            let rows = ablate(&ds, &cfg, axis, &values)?;
            for r in &rows {
                println!(
                    "{} = {}: params {} ({} total), psnr {:.3} dB, pq {:?}, {:.1} ms per image",
                    axis.name(),
                    r.value,
                    r.param_count,
                    r.total_params,
                    r.psnr,
                    r.pq,
                    r.infer_seconds * 1e3
                );
            }
            write_ablation_csv(&out.join(format!("{}.csv", axis.name())), axis, &rows)?;
            write_ablation_svg(&out.join(format!("{}.svg", axis.name())), axis, &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
