//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::adapt::{run_online, AdaptConfig};
use crate::dce::{compute_masks, MaskConfig};
use crate::error::{Error, Result};
use crate::formats::{
    decode_depth, decode_seg, encode_depth, encode_mask, fmt9, format_loss_log, format_tum, frame_path, parse_sparse,
    parse_tum, read_sequence, trajectory_to_tum, tum_to_trajectory, write_sequence, Sequence,
};
use crate::gradcheck;
use crate::metrics::{depth_metrics, evaluate_depth, trajectory_metrics, DepthMetrics, DEFAULT_MAX_DEPTH};
use crate::net::{predict_depth, read_net, write_net, ToyDepthNet};
use crate::oracle;
use crate::raster::MaskMap;
use crate::sdd::{densify, GridSpec, DEFAULT_GRID_DIVISIONS};
use crate::synth::{mean_abs_rel_on, DomainShift, pretrain_on, MatchSampling, PretrainConfig, Scene, SceneSpec};

#[derive(Parser, Debug)]
#[command(name = "depthadapt", version, about = "Online adaptation of a toy monocular depth network")]
pub struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Pre-train a toy depth net on rendered source-domain frames.
    Pretrain(PretrainArgs),
    /// Run the online adaptation loop over a frame directory.
    Adapt(AdaptArgs),
    /// Densify a sparse depth file using a segmentation map.
    Densify(DensifyArgs),
    /// Compute consistency masks for a frame directory and trajectory.
    Mask(MaskArgs),
    /// Depth or trajectory metrics.
    Eval(EvalArgs),
    /// Finite-difference check of the refiner gradient.
    Gradcheck(GradcheckArgs),
    /// Compare against slow reference implementations.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Street,
    ShiftedStreet,
    MovingBox,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene description (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in scene instead of a spec file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Frame count for presets.
    #[arg(long, default_value_t = 120)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scene seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Correspondences sampled per consecutive pair.
    #[arg(long, default_value_t = 300)]
    pub matches: usize,
    /// Pixel noise added to the matched pixels.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// A frame directory, or a directory of frame directories.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use every n-th frame.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub net: PathBuf,
    /// Adaptation config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Never update the refiners.
    #[arg(long)]
    pub no_learning: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DensifyArgs {
    #[arg(long)]
    pub sparse: PathBuf,
    #[arg(long)]
    pub seg: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID_DIVISIONS)]
    pub grid: usize,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[arg(long)]
    pub frames: PathBuf,
    /// Camera-to-world trajectory (TUM).
    #[arg(long)]
    pub pose: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Predict depth with this net instead of reading depth files.
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub what: EvalCommand,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Depth error measures for a file or a directory of depth files.
    Depth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Apply mean-ratio scale alignment per frame.
        #[arg(long)]
        align: bool,
        #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
        max_depth: f64,
    },
    /// ATE and segment drift between two TUM trajectories.
    Traj {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Segment lengths in meters.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        lengths: Vec<f64>,
    },
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OracleKind {
    Densify,
    Triangulate,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(value_enum)]
    pub kind: OracleKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli.command, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Executes one command; `Ok(false)` means the command ran but its check
/// failed.
pub fn run(command: Command, out: &mut dyn Write) -> Result<bool> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Pretrain(a) => pretrain(a, out),
        Command::Adapt(a) => adapt(a, out),
        Command::Densify(a) => densify_cmd(a, out),
        Command::Mask(a) => mask(a, out),
        Command::Eval(a) => match a.what {
            EvalCommand::Depth {
                pred,
                gt,
                align,
                max_depth,
            } => eval_depth(&pred, &gt, align, max_depth, out),
            EvalCommand::Traj { pred, gt, lengths } => eval_traj(&pred, &gt, &lengths, out),
        },
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Oracle(a) => oracle_cmd(a, out),
    }
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn load_net(path: &Path) -> Result<ToyDepthNet> {
    read_net(fs::File::open(path)?)
}

fn save_net(net: &ToyDepthNet, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_net(net, &mut f)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<bool> {
    let seed = a.seed.unwrap_or(0);
    let spec = match (&a.spec, a.preset) {
        (Some(p), _) => {
            let mut spec = SceneSpec::from_toml(&read_text(p)?)?;
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            spec
        }
        (None, Some(Preset::Street)) => SceneSpec::street(seed, a.frames),
        (None, Some(Preset::ShiftedStreet)) => SceneSpec::street(seed, a.frames).with_shift(DomainShift::standard()),
        (None, Some(Preset::MovingBox)) => SceneSpec::moving_box(seed, a.frames),
        (None, None) => return Err(Error::InvalidArgument("either --spec or --preset is required".into())),
    };
    let scene = Scene::new(&spec)?;
    let frames = scene.render_all();
    let sampling = MatchSampling {
        count: a.matches,
        noise_sigma: a.noise,
        ..MatchSampling::default()
    };
    let seq = scene.to_sequence(&frames, Some(&sampling), spec.seed)?;
    write_sequence(&a.out, &seq)?;
    fs::write(a.out.join("spec.toml"), spec.to_toml()?)?;
    for f in &frames {
        let dynamic: Vec<f64> = f.dynamic.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let (w, h) = f.image.dims();
        fs::write(frame_path(&a.out, "dynamic", f.index), encode_mask(&MaskMap::new(w, h, dynamic)?))?;
    }
    writeln!(out, "frames {}", frames.len())?;
    Ok(true)
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("camera.toml").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("camera.toml").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyInput("scene directories"));
    }
    Ok(dirs)
}

fn pretrain(a: PretrainArgs, out: &mut dyn Write) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => PretrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let mut seqs = Vec::new();
    for dir in sequence_dirs(&a.scenes)? {
        seqs.push(read_sequence(&dir)?);
    }
    let pairs: Vec<_> = seqs
        .iter()
        .flat_map(|s| s.frames.iter().step_by(a.stride.max(1)))
        .filter_map(|f| f.depth.as_ref().map(|d| (&f.image, d)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyInput("frames with ground-truth depth"));
    }
    let trained = pretrain_on(pairs.iter().copied(), &cfg)?;
    save_net(&trained.net, &a.out)?;
    for (epoch, loss) in trained.loss_curve.iter().enumerate() {
        writeln!(out, "epoch {epoch} loss {}", fmt9(*loss))?;
    }
    writeln!(out, "train_abs_rel {}", fmt9(mean_abs_rel_on(&trained.net, pairs.iter().copied())?))?;
    Ok(true)
}

fn sequence_abs_rel(net: &ToyDepthNet, seq: &Sequence) -> Option<f64> {
    let pairs: Vec<_> = seq.frames.iter().filter_map(|f| f.depth.as_ref().map(|d| (&f.image, d))).collect();
    if pairs.is_empty() {
        return None;
    }
    mean_abs_rel_on(net, pairs).ok()
}

fn adapt(a: AdaptArgs, out: &mut dyn Write) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => AdaptConfig::from_toml(&read_text(p)?)?,
        None => AdaptConfig::default(),
    };
    if a.no_learning {
        cfg.learning = false;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let seq = read_sequence(&a.frames)?;
    let net = load_net(&a.net)?;
    let run = run_online(&seq, &net, &cfg)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("loss_log.csv"), format_loss_log(&run.log))?;
    fs::write(a.out.join("trajectory.tum"), format_tum(&trajectory_to_tum(&run.trajectory)))?;
    save_net(&run.net, &a.out.join("net.bin"))?;
    let depth_dir = a.out.join("depth");
    fs::create_dir_all(&depth_dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        fs::write(frame_path(&depth_dir, "depth", i), encode_depth(&predict_depth(&f.image, &run.net)))?;
    }
    writeln!(out, "frames {}", seq.frames.len())?;
    writeln!(out, "learning_steps {}", run.learning_steps)?;
    match run.stopped_at {
        Some(s) => writeln!(out, "stopped_at {s}")?,
        None => writeln!(out, "stopped_at none")?,
    }
    let mut summary = String::new();
    if let (Some(before), Some(after)) = (sequence_abs_rel(&net, &seq), sequence_abs_rel(&run.net, &seq)) {
        summary.push_str(&format!("initial_abs_rel {}\nfinal_abs_rel {}\n", fmt9(before), fmt9(after)));
    }
    if let Some(gt) = &seq.poses {
        let gt = crate::metrics::Trajectory::new(seq.stamps(), gt.clone())?;
        if let Ok(m) = trajectory_metrics(&run.trajectory, &gt, &[1.0, 2.0, 4.0]) {
            summary.push_str(&format!("ate_rmse {}\nt_rel {}\n", fmt9(m.ate_rmse), fmt9(m.t_rel)));
        }
    }
    fs::write(a.out.join("summary.txt"), &summary)?;
    out.write_all(summary.as_bytes())?;
    Ok(true)
}

fn densify_cmd(a: DensifyArgs, out: &mut dyn Write) -> Result<bool> {
    let seg = decode_seg(&fs::read(&a.seg)?)?;
    let (w, h) = seg.dims();
    let sparse = parse_sparse(&read_text(&a.sparse)?, w, h)?;
    let grid = GridSpec::new(a.grid, w, h)?;
    let dense = densify(&sparse, &seg, &grid, None)?;
    fs::write(&a.out, encode_depth(&dense))?;
    let filled = dense.values().iter().filter(|&&d| d > 0.0).count();
    writeln!(out, "filled {filled} of {}", w * h)?;
    Ok(true)
}

fn mask(a: MaskArgs, out: &mut dyn Write) -> Result<bool> {
    let cfg: MaskConfig = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => MaskConfig::default(),
    };
    let seq = read_sequence(&a.frames)?;
    let traj = tum_to_trajectory(&parse_tum(&read_text(&a.pose)?)?)?;
    if traj.len() != seq.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {} poses for {} frames",
            traj.len(),
            seq.frames.len()
        )));
    }
    let net = a.net.as_deref().map(load_net).transpose()?;
    let depths = seq
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| match (&net, &f.depth) {
            (Some(n), _) => Ok(predict_depth(&f.image, n)),
            (None, Some(d)) => Ok(d.clone()),
            (None, None) => Err(Error::InvalidArgument(format!("frame {i} has no depth file; pass --net"))),
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out)?;
    let k = seq.camera.intrinsics;
    let mut masked = 0usize;
    for t in 1..seq.frames.len() {
        let t_prev_cur = traj.poses[t - 1].inverse().compose(&traj.poses[t]);
        let m = compute_masks(
            &depths[t],
            &depths[t - 1],
            &seq.frames[t].seg,
            &seq.frames[t - 1].seg,
            t as u64,
            &t_prev_cur,
            &k,
            &cfg,
        )?;
        fs::write(frame_path(&a.out, "mask", t), encode_mask(&m.combined))?;
        fs::write(frame_path(&a.out, "msc", t), encode_mask(&m.msc))?;
        fs::write(frame_path(&a.out, "mgc", t), encode_mask(&m.mgc))?;
        masked += m.combined.values().iter().filter(|&&v| v < 0.5).count();
    }
    writeln!(out, "pairs {}", seq.frames.len() - 1)?;
    writeln!(out, "masked_pixels {masked}")?;
    Ok(true)
}

fn depth_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("depth_") && n.ends_with(".dpf"))
        .collect();
    names.sort();
    Ok(names)
}

fn eval_depth(pred: &Path, gt: &Path, align: bool, max_depth: f64, out: &mut dyn Write) -> Result<bool> {
    let pairs: Vec<(PathBuf, PathBuf)> = if pred.is_dir() {
        depth_files(pred)?
            .into_iter()
            .filter(|n| gt.join(n).exists())
            .map(|n| (pred.join(&n), gt.join(&n)))
            .collect()
    } else {
        vec![(pred.to_path_buf(), gt.to_path_buf())]
    };
    if pairs.is_empty() {
        return Err(Error::EmptyInput("matching depth files"));
    }
    let mut all = Vec::with_capacity(pairs.len());
    for (p, g) in &pairs {
        let p = decode_depth(&fs::read(p)?)?;
        let g = decode_depth(&fs::read(g)?)?;
        all.push(if align {
            evaluate_depth(&p, &g, max_depth)?.0
        } else {
            depth_metrics(&p, &g, max_depth)?
        });
    }
    let n = all.len() as f64;
    let mean = |f: fn(&DepthMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    let m = DepthMetrics {
        abs_rel: mean(|m| m.abs_rel),
        sq_rel: mean(|m| m.sq_rel),
        rmse: mean(|m| m.rmse),
        delta1: mean(|m| m.delta1),
        delta2: mean(|m| m.delta2),
        delta3: mean(|m| m.delta3),
        count: all.iter().map(|m| m.count).sum(),
    };
    writeln!(out, "frames = {}", all.len())?;
    out.write_all(m.report().as_bytes())?;
    Ok(true)
}

fn eval_traj(pred: &Path, gt: &Path, lengths: &[f64], out: &mut dyn Write) -> Result<bool> {
    let est = tum_to_trajectory(&parse_tum(&read_text(pred)?)?)?;
    let gt = tum_to_trajectory(&parse_tum(&read_text(gt)?)?)?;
    let m = trajectory_metrics(&est, &gt, lengths)?;
    out.write_all(m.report().as_bytes())?;
    Ok(true)
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let reports = gradcheck::run_suite(a.seed, a.count)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        writeln!(
            out,
            "seed {} detach_ws {} params {} max_rel_err {}",
            r.seed,
            r.detach_ws as u8,
            r.parameters,
            fmt9(r.max_relative_error)
        )?;
        worst = worst.max(r.max_relative_error);
    }
    let ok = reports.iter().all(|r| r.passed());
    writeln!(out, "max_rel_err {} {}", fmt9(worst), if ok { "PASS" } else { "FAIL" })?;
    Ok(ok)
}

fn oracle_cmd(a: OracleArgs, out: &mut dyn Write) -> Result<bool> {
    match a.kind {
        OracleKind::Densify => {
            let reports = oracle::run_densify_suite(a.seed, a.count)?;
            for r in &reports {
                writeln!(out, "seed {} samples {} grid {} mismatches {}", r.seed, r.samples, r.divisions, r.mismatches)?;
            }
            let ok = reports.iter().all(|r| r.mismatches == 0);
            writeln!(out, "{}", if ok { "PASS" } else { "FAIL" })?;
            Ok(ok)
        }
        OracleKind::Triangulate => {
            let reports = oracle::run_triangulation_suite(a.seed, a.count)?;
            let mut ok = true;
            for r in &reports {
                writeln!(
                    out,
                    "seed {} points {} truth_err {} disagreement {}",
                    r.seed,
                    r.points,
                    fmt9(r.max_truth_error),
                    fmt9(r.max_relative_disagreement)
                )?;
                ok &= r.max_truth_error < 1e-9 && r.max_relative_disagreement < 1e-9;
            }
            writeln!(out, "{}", if ok { "PASS" } else { "FAIL" })?;
            Ok(ok)
        }
    }
}
