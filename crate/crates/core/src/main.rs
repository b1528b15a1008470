use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hmdcap::capture::{
    self, bench_pipeline, eval_eye, eval_face, export_avatar, held_out_eye_frames, process_frame, render_face_frame,
    retarget, AvatarState, BenchFrame, CaptureRig, EyeInputGeometry, PoseProvider,
};
use hmdcap::dataset::{read_labels, DatasetManifest, FaceLabel, Split};
use hmdcap::error::{Error, Result};
use hmdcap::face_model::{read_basis, write_basis, FaceBasis, FaceParams, Mesh};
use hmdcap::inverse_fit::{fit_identity_expression, FitConfig, FitOutput, LandmarkObservations};
use hmdcap::nets::{
    eye_frame_scale, eye_training_samples, face_training_samples, train, LossWeights, Model, ModelKind, Network,
    NetworkSpec, TrainConfig,
};
use hmdcap::synth_eye::{gen_eye_dataset, render_frame, EyeDataConfig};
use hmdcap::synth_face::{
    frame_pose, gen_basis, gen_face_dataset, render_unmasked, mask_hmd, subject_params, FaceDataConfig, HmdProxy,
    SyntheticBasisSpec,
};
use hmdcap::dataset::SampleImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossKind {
    Full,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Synthetic data, training, evaluation and capture for headset face and
/// eye tracking.
#[derive(Debug, Parser)]
#[command(name = "hmdcap", version)]
struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// JSON file overriding fields of the preset configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic morphable-model basis (`basis.feb`).
    GenBasis,
    /// Render a face corpus.
    GenFaceData {
        /// Basis file; generated from the seed when omitted.
        #[arg(long)]
        basis: Option<PathBuf>,
    },
    /// Render an eye corpus.
    GenEyeData,
    /// Fit shared identity and per-frame expression/pose to 2D landmarks.
    FitIdentity {
        #[arg(long)]
        basis: PathBuf,
        /// `{"<frame>": [[vertex, x, y], ...]}`.
        #[arg(long)]
        landmarks: PathBuf,
        /// JSON array of albedo coefficients passed through to the output.
        #[arg(long)]
        albedo: Option<PathBuf>,
    },
    /// Train the facial expression network.
    TrainFace {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = LossKind::Full)]
        loss: LossKind,
    },
    /// Train the eye network.
    TrainEye {
        #[arg(long)]
        data: PathBuf,
    },
    /// Lower-face landmark error of a facial network.
    EvalFace {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Gaze error and latency of an eye network against the pupil baseline.
    EvalEye {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Maximum number of held-out frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Run the capture pipeline over a face corpus.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        face_model: PathBuf,
        #[arg(long)]
        eye_model: PathBuf,
        /// Eye corpus supplying the eye frames (cycled).
        #[arg(long)]
        eye_data: PathBuf,
        /// Poses JSON; ground-truth poses from the corpus when omitted.
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Params JSON (as written by `fit-identity`) replacing each subject's identity.
        #[arg(long)]
        identity: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Export OBJ + gaze JSON for the first N frames.
        #[arg(long, default_value_t = 0)]
        obj: usize,
    },
    /// Transfer captured motion to another identity.
    Retarget {
        /// AvatarState JSON lines.
        #[arg(long)]
        states: PathBuf,
        /// Params JSON with `x_id` and optional `x_alb`.
        #[arg(long)]
        identity: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, default_value_t = 0)]
        obj: usize,
    },
    /// Per-stage timings with a comparison table.
    Bench {
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        face_model: Option<PathBuf>,
        #[arg(long)]
        eye_model: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    match &cli.command {
        Command::GenBasis => {
            let spec: SyntheticBasisSpec = with_overrides(basis_spec(cli), cli.config.as_deref())?;
            let basis = gen_basis(&spec)?;
            let path = cli.out.join("basis.feb");
            write_basis(&path, &basis, spec.seed, preset_name(cli.preset))?;
            println!("wrote {} ({} vertices)", path.display(), basis.n_vertices());
        }
        Command::GenFaceData { basis } => {
            let cfg: FaceDataConfig = with_overrides(
                match cli.preset {
                    Preset::Desk => FaceDataConfig::desk(),
                    Preset::Paper => FaceDataConfig::paper(),
                },
                cli.config.as_deref(),
            )?;
            let (basis, basis_ref) = match basis {
                Some(p) => (read_basis(p)?, p.display().to_string()),
                None => {
                    let b = gen_basis(&basis_spec(cli))?;
                    let p = cli.out.join("basis.feb");
                    write_basis(&p, &b, cli.seed, preset_name(cli.preset))?;
                    (b, "basis.feb".to_string())
                }
            };
            let m = gen_face_dataset(&basis, &basis_ref, &cfg, &HmdProxy::default(), &cli.out, cli.seed)?;
            println!("wrote {} face samples to {}", m.sample_count, cli.out.display());
        }
        Command::GenEyeData => {
            let cfg: EyeDataConfig = with_overrides(
                match cli.preset {
                    Preset::Desk => EyeDataConfig::desk(),
                    Preset::Paper => EyeDataConfig::paper(),
                },
                cli.config.as_deref(),
            )?;
            let m = gen_eye_dataset(&cfg, &cli.out, cli.seed)?;
            println!("wrote {} eye samples to {}", m.sample_count, cli.out.display());
        }
        Command::FitIdentity {
            basis,
            landmarks,
            albedo,
        } => {
            let basis = read_basis(basis)?;
            let cfg: FitConfig = with_overrides(FitConfig::default(), cli.config.as_deref())?;
            let obs = LandmarkObservations::read_json(landmarks)?;
            let result = fit_identity_expression(&obs, &basis, &cfg)?;
            let x_alb = albedo.as_deref().map(read_json::<Vec<f64>>).transpose()?;
            let path = cli.out.join("params.json");
            FitOutput::from_result(&result, x_alb).write(&path)?;
            println!(
                "fitted {} frames in {} iterations (converged: {}), reprojection rms {:.4} px -> {}",
                obs.frames.len(),
                result.iterations,
                result.converged,
                result.reprojection_rms(&basis, &obs)?,
                path.display()
            );
        }
        Command::TrainFace { data, basis, loss } => {
            let manifest = DatasetManifest::load(data)?;
            let basis = load_basis(basis.as_deref(), data, &manifest)?;
            let mut cfg: TrainConfig = with_overrides(
                TrainConfig {
                    seed: cli.seed,
                    ..match cli.preset {
                        Preset::Desk => TrainConfig::facial_desk(),
                        Preset::Paper => TrainConfig::facial_paper(),
                    }
                },
                cli.config.as_deref(),
            )?;
            if *loss == LossKind::L2 {
                cfg.loss_weights = LossWeights::L2_ONLY;
            }
            let occluders: Vec<Mesh> = vec![HmdProxy::default().posed_mesh()];
            let samples = face_training_samples(data, &manifest, &basis, &occluders, cfg.loss_weights, Split::Train)?;
            let spec = match cli.preset {
                Preset::Desk => NetworkSpec::facial_desk(basis.dim_exp(), cli.seed),
                Preset::Paper => NetworkSpec::facial_paper(basis.dim_exp(), 64, cli.seed),
            };
            let mut net = Network::new(spec)?;
            let history = train_logged(&mut net, &samples, &cfg, &cli.out.join("face_train.jsonl"))?;
            let mut model = Model::new(net, ModelKind::Facial);
            model.meta.train_config = Some(cfg);
            let path = cli.out.join("face.fen");
            model.write(&path)?;
            report_training("facial", &history, &path);
        }
        Command::TrainEye { data } => {
            let manifest = DatasetManifest::load(data)?;
            let cfg: TrainConfig = with_overrides(
                TrainConfig {
                    seed: cli.seed,
                    loss_weights: LossWeights::L2_ONLY,
                    ..match cli.preset {
                        Preset::Desk => TrainConfig::eye_desk(),
                        Preset::Paper => TrainConfig::eye_paper(),
                    }
                },
                cli.config.as_deref(),
            )?;
            let (samples, norm) = eye_training_samples(data, &manifest, Split::Train)?;
            let spec = match cli.preset {
                Preset::Desk => NetworkSpec::eye_desk(cli.seed),
                Preset::Paper => NetworkSpec::eye_paper(cli.seed),
            };
            let mut net = Network::new(spec)?;
            let history = train_logged(&mut net, &samples, &cfg, &cli.out.join("eye_train.jsonl"))?;
            let mut model = Model::new(net, ModelKind::Eye);
            let (sy, sx) = eye_frame_scale(&manifest)?;
            model.meta.target_norm = Some(norm);
            model.meta.frame_scale = Some([sy, sx]);
            model.meta.train_config = Some(cfg);
            let path = cli.out.join("eye.fen");
            model.write(&path)?;
            report_training("eye", &history, &path);
        }
        Command::EvalFace {
            data,
            basis,
            model,
            split,
        } => {
            let manifest = DatasetManifest::load(data)?;
            let basis = load_basis(basis.as_deref(), data, &manifest)?;
            let model = Model::read(model)?;
            let report = eval_face(data, &manifest, &basis, &model.net, (*split).into())?;
            write_json(&cli.out.join("eval_face.json"), &report)?;
            println!(
                "{} samples: mean landmark error {:.3} px (neutral expression: {:.3} px)",
                report.samples, report.mean_landmark_error_px, report.neutral_landmark_error_px
            );
        }
        Command::EvalEye { data, model, frames } => {
            let manifest = DatasetManifest::load(data)?;
            let model = Model::read(model)?;
            let frames = held_out_eye_frames(&manifest, *frames)?;
            let report = eval_eye(&model, eye_geometry(&manifest)?, &frames)?;
            write_json(&cli.out.join("eval_eye.json"), &report)?;
            println!(
                "{} frames: network {:.2}° ({:.3} ms/frame), baseline {:.2}° ({:.3} ms/frame, {} tracker failures)",
                report.frames,
                report.net_gaze_error_deg,
                report.net_timing.mean_ms,
                report.baseline_gaze_error_deg,
                report.baseline_timing.mean_ms,
                report.baseline_failures
            );
        }
        Command::Infer {
            data,
            basis,
            face_model,
            eye_model,
            eye_data,
            poses,
            identity,
            split,
            obj,
        } => infer(cli, data, basis.as_deref(), face_model, eye_model, eye_data, poses.as_deref(), identity.as_deref(), (*split).into(), *obj)?,
        Command::Retarget {
            states,
            identity,
            basis,
            obj,
        } => {
            let basis = read_basis(basis)?;
            let target: IdentityFile = read_json(identity)?;
            let path = cli.out.join("retargeted.jsonl");
            let mut w = create(&path)?;
            for (k, s) in read_states(states)?.iter().enumerate() {
                let x_alb = target.x_alb.clone().unwrap_or_else(|| s.x_alb.clone());
                let r = retarget(s, &target.x_id, &x_alb)?;
                write_line(&mut w, &path, &r)?;
                if k < *obj {
                    export_avatar(&r, &basis, &cli.out.join(format!("retarget_{:06}.obj", r.frame)))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            println!("wrote {}", path.display());
        }
        Command::Bench {
            frames,
            basis,
            face_model,
            eye_model,
        } => bench(cli, *frames, basis.as_deref(), face_model.as_deref(), eye_model.as_deref())?,
    }
    Ok(())
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Desk => "desk",
        Preset::Paper => "paper",
    }
}

fn basis_spec(cli: &Cli) -> SyntheticBasisSpec {
    match cli.preset {
        Preset::Desk => SyntheticBasisSpec::desk(cli.seed),
        Preset::Paper => SyntheticBasisSpec::paper(cli.seed),
    }
}

/// Applies the top-level keys of a JSON object file on top of `preset`.
fn with_overrides<T: Serialize + DeserializeOwned>(preset: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(preset) };
    let overrides: serde_json::Value = read_json(path)?;
    let serde_json::Value::Object(fields) = overrides else {
        return Err(Error::format("config", format!("{}: expected a JSON object", path.display())));
    };
    let mut value = serde_json::to_value(preset).map_err(|e| Error::json(path, e))?;
    let obj = value.as_object_mut().expect("configs serialise to objects");
    for (k, v) in fields {
        if !obj.contains_key(&k) {
            return Err(Error::format("config", format!("{}: unknown field {k:?}", path.display())));
        }
        obj.insert(k, v);
    }
    serde_json::from_value(value).map_err(|e| Error::json(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn read_states(path: &Path) -> Result<Vec<AvatarState>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

#[derive(Debug, Deserialize)]
struct IdentityFile {
    x_id: Vec<f64>,
    #[serde(default)]
    x_alb: Option<Vec<f64>>,
}

/// The basis named by `--basis`, else the one recorded in the manifest
/// (relative paths resolve against the corpus directory).
fn load_basis(explicit: Option<&Path>, data: &Path, manifest: &DatasetManifest) -> Result<FaceBasis> {
    if let Some(p) = explicit {
        return read_basis(p);
    }
    let recorded = PathBuf::from(&manifest.face_meta()?.basis);
    read_basis(&if recorded.is_absolute() { recorded } else { data.join(recorded) })
}

fn eye_geometry(manifest: &DatasetManifest) -> Result<EyeInputGeometry> {
    let cfg = capture::eye_config(manifest)?;
    Ok(EyeInputGeometry {
        downscale_rows: cfg.downscale_rows,
        downscale_cols: cfg.downscale_cols,
        crop_rows: cfg.crop_rows,
        crop_cols: cfg.crop_cols,
    })
}

fn train_logged(
    net: &mut Network,
    samples: &[hmdcap::nets::TrainSample],
    cfg: &TrainConfig,
    log_path: &Path,
) -> Result<Vec<hmdcap::nets::EpochRecord>> {
    let mut log = create(log_path)?;
    let history = train(net, samples, cfg, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(log_path, e))?;
    Ok(history)
}

fn report_training(what: &str, history: &[hmdcap::nets::EpochRecord], path: &Path) {
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "trained {what} network for {} epochs: loss {:.4e} -> {:.4e}; wrote {}",
            history.len(),
            first.loss,
            last.loss,
            path.display()
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn infer(
    cli: &Cli,
    data: &Path,
    basis: Option<&Path>,
    face_model: &Path,
    eye_model: &Path,
    eye_data: &Path,
    poses: Option<&Path>,
    identity: Option<&Path>,
    split: Split,
    obj: usize,
) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let basis = load_basis(basis, data, &manifest)?;
    let face = Model::read(face_model)?;
    let eyes = Model::read(eye_model)?;
    let eye_manifest = DatasetManifest::load(eye_data)?;
    let eye_frames = held_out_eye_frames(&eye_manifest, None)?;
    let geometry = eye_geometry(&eye_manifest)?;
    let poses = match poses {
        Some(p) => PoseProvider::read_json(p)?,
        None => PoseProvider::from_manifest(data, &manifest)?,
    };
    let override_identity = identity.map(read_json::<IdentityFile>).transpose()?;
    let labels: Vec<FaceLabel> = read_labels(data, &manifest)?;
    let mut seen = std::collections::BTreeSet::new();
    let frames: Vec<&FaceLabel> = manifest
        .split_indices(split)
        .into_iter()
        .map(|i| &labels[i])
        .filter(|l| seen.insert(l.frame))
        .collect();
    let mut identities: BTreeMap<usize, FaceParams> = BTreeMap::new();
    let path = cli.out.join("avatar_states.jsonl");
    let mut w = create(&path)?;
    let (mut written, mut skipped) = (0usize, 0usize);
    for (k, label) in frames.iter().enumerate() {
        let subject = manifest.face_subject(label.subject)?;
        let ident = match identities.get(&label.subject) {
            Some(p) => p.clone(),
            None => {
                let p = match &override_identity {
                    Some(o) => FaceParams::new(
                        o.x_id.clone(),
                        vec![0.0; basis.dim_exp()],
                        o.x_alb.clone().unwrap_or_else(|| subject.x_alb.clone()),
                    )?,
                    None => FaceParams::new(subject.x_id.clone(), vec![0.0; basis.dim_exp()], subject.x_alb.clone())?,
                };
                identities.insert(label.subject, p.clone());
                p
            }
        };
        let image = render_face_frame(&manifest, &basis, label)?;
        let left = &eye_frames[(2 * k) % eye_frames.len()];
        let right = &eye_frames[(2 * k + 1) % eye_frames.len()];
        let rig = CaptureRig {
            basis: &basis,
            identity: &ident,
            face: &face.net,
            eyes: &eyes,
            eye_geometry: geometry,
        };
        match process_frame(&rig, label.frame, &image, [&left.image, &right.image], poses.get(label.frame))? {
            Some(state) => {
                write_line(&mut w, &path, &state)?;
                if written < obj {
                    export_avatar(&state, &basis, &cli.out.join(format!("avatar_{:06}.obj", state.frame)))?;
                }
                written += 1;
            }
            None => skipped += 1,
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("wrote {written} avatar states to {} ({skipped} frames without pose)", path.display());
    Ok(())
}

fn bench(
    cli: &Cli,
    frames: usize,
    basis: Option<&Path>,
    face_model: Option<&Path>,
    eye_model: Option<&Path>,
) -> Result<()> {
    let basis = match basis {
        Some(p) => read_basis(p)?,
        None => gen_basis(&basis_spec(cli))?,
    };
    let face_net = match face_model {
        Some(p) => Model::read(p)?.net,
        None => Network::new(match cli.preset {
            Preset::Desk => NetworkSpec::facial_desk(basis.dim_exp(), cli.seed),
            Preset::Paper => NetworkSpec::facial_paper(basis.dim_exp(), 64, cli.seed),
        })?,
    };
    let eye = match eye_model {
        Some(p) => Model::read(p)?,
        None => {
            let mut m = Model::new(
                Network::new(match cli.preset {
                    Preset::Desk => NetworkSpec::eye_desk(cli.seed),
                    Preset::Paper => NetworkSpec::eye_paper(cli.seed),
                })?,
                ModelKind::Eye,
            );
            let (sy, sx) = EyeDataConfig::desk().scale();
            m.meta.frame_scale = Some([sy, sx]);
            m
        }
    };
    let face_cfg = FaceDataConfig::desk();
    let eye_cfg = EyeDataConfig::desk();
    let identity = subject_params(&basis, &face_cfg, cli.seed, 0);
    let hmd = HmdProxy::default();
    let mut preloaded = Vec::with_capacity(frames);
    for f in 0..frames {
        let pose = frame_pose(&face_cfg, cli.seed, f)?;
        let params = identity.with_expression(hmdcap::synth_face::frame_expression(&basis, &face_cfg, cli.seed, f).as_slice());
        let face = match render_unmasked(&basis, &params, &pose, &face_cfg)? {
            SampleImage::Gray(g) => SampleImage::Gray(mask_hmd(&g, &hmd, &pose)),
            other => other,
        };
        let (_, _, left) = render_frame(&eye_cfg, cli.seed, (2 * f) % eye_cfg.frames)?;
        let (_, _, right) = render_frame(&eye_cfg, cli.seed, (2 * f + 1) % eye_cfg.frames)?;
        preloaded.push(BenchFrame {
            frame: f,
            face,
            eyes: [left.image, right.image.flip_horizontal()],
            pose,
        });
    }
    let rig = CaptureRig {
        basis: &basis,
        identity: &identity,
        face: &face_net,
        eyes: &eye,
        eye_geometry: EyeInputGeometry::default(),
    };
    let report = bench_pipeline(&rig, &eye, &preloaded)?;
    write_json(&cli.out.join("bench.json"), &report)?;
    print!("{}", report.comparison_table());
    Ok(())
}
