use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, ensure, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use opae::experiment::{
    self, aggregate, load_dataset, load_run, run_dir_name, train_run, SweepConfig,
};
use opae::geometry_recon::{
    reconstruct_subvolume, rmsd, stitch_volume, write_xyz, BranchPolicy, CoordinateSet,
};
use opae::graph_repr::{
    build_dataset, canonical_members, canonicalize, distance_matrix, write_dataset, Branch,
    Dataset, LJParams,
};
use opae::neural::{Checkpoint, Matrix};
use opae::operator_model::{OperatorAEModel, ReconTarget, TrainConfig};
use opae::subvolume::{knn_subvolumes, SamplingConfig};
use opae::trajectory_io::{
    generate_synthetic_trajectory, parse_lammps_dump, truncate_boundary, write_lammps_dump,
    SynthConfig, Trajectory, TruncationConfig,
};

#[derive(Debug, Parser)]
#[command(name = "opae", version, about = "Graph-potential operator autoencoder pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a strained diamond-lattice trajectory as a LAMMPS dump.
    Synth(SynthArgs),
    /// Trajectory dump -> scaled pair dataset.
    Preprocess(PreprocessArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train over a grid of latent dimensions and seeds.
    Sweep(SweepArgs),
    /// Decode feature vectors back to XYZ coordinates.
    Reconstruct(ReconstructArgs),
    /// Multi-step rollout error of a trained model.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    cells: usize,
    #[arg(long, default_value_t = 3.567)]
    lattice_constant: f64,
    /// Strain added along x per frame.
    #[arg(long, default_value_t = 0.005)]
    strain: f64,
    #[arg(long, default_value_t = 0.1)]
    poisson: f64,
    /// Gaussian positional noise, Å.
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 1000)]
    timestep_interval: i64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PreprocessArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Boundary truncation per axis, percent of the box edge.
    #[arg(long, default_value_t = 5.0)]
    percent: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.7)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.45)]
    sigma: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ReconArg {
    Both,
    First,
}

#[derive(Debug, Clone, Args, Serialize)]
struct HyperArgs {
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 20.0)]
    alpha: f64,
    /// Epochs before the operator starts training.
    #[arg(long, default_value_t = 50)]
    delay: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1500)]
    epochs: usize,
    #[arg(long, value_enum, default_value_t = ReconArg::Both)]
    recon: ReconArg,
    /// Linear encoder output instead of ReLU.
    #[arg(long)]
    linear_latent: bool,
}

impl HyperArgs {
    fn config(&self, latent_dim: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            alpha: self.alpha,
            operator_delay_epochs: self.delay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            rng_seed: seed,
            latent_dim,
            recon_target: match self.recon {
                ReconArg::Both => ReconTarget::Both,
                ReconArg::First => ReconTarget::First,
            },
            latent_relu: !self.linear_latent,
        }
    }

    fn to_cli(&self) -> Vec<String> {
        let mut v = vec![
            format!("--lr={}", self.lr),
            format!("--alpha={}", self.alpha),
            format!("--delay={}", self.delay),
            format!("--batch-size={}", self.batch_size),
            format!("--epochs={}", self.epochs),
            format!(
                "--recon={}",
                match self.recon {
                    ReconArg::Both => "both",
                    ReconArg::First => "first",
                }
            ),
        ];
        if self.linear_latent {
            v.push("--linear-latent".into());
        }
        v
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Run directory: curve.csv, model.ckpt, config.json, run.json.
    #[arg(long, short)]
    out: PathBuf,
    /// Do not stream the per-epoch CSV to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Isolation {
    Process,
    InProcess,
}

#[derive(Debug, Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128, 256, 512, 1024, 2048, 4096])]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0])]
    seeds: Vec<u64>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, value_enum, default_value_t = Isolation::Process)]
    isolation: Isolation,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Source {
    /// Features stored in the dataset.
    Data,
    /// Model reconstruction of the stored features.
    Decoded,
    /// Model prediction `steps` frames ahead.
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum BranchArg {
    /// Attractive branch for negative potentials.
    Auto,
    Attractive,
    Repulsive,
    /// Branch of the true distance in the reference frame (needs --dump).
    Reference,
}

#[derive(Debug, Args, Serialize)]
struct ReconstructArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Required unless --source data.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Trajectory the dataset came from; enables stitching and rmsd.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Truncation used when the dataset was built.
    #[arg(long, default_value_t = 5.0)]
    percent: f64,
    /// Frame whose features are decoded.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// One subvolume only; all of them are stitched otherwise.
    #[arg(long)]
    center: Option<u64>,
    #[arg(long, value_enum, default_value_t = Source::Data)]
    source: Source,
    #[arg(long, value_enum, default_value_t = BranchArg::Auto)]
    branch: BranchArg,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Largest rollout horizon.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, short)]
    out: PathBuf,
}

fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn write_echo(path: &Path, command: &str, args: &impl Serialize) -> anyhow::Result<()> {
    let v = serde_json::json!({ "command": command, "args": args });
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(&v)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn write_out(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_dump(path: &Path) -> anyhow::Result<Trajectory> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_lammps_dump(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_model(path: &Path) -> anyhow::Result<(OperatorAEModel, serde_json::Value)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let model = OperatorAEModel::from_checkpoint(&ck)?;
    Ok((model, ck.meta))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        cells_per_axis: a.cells,
        lattice_constant: a.lattice_constant,
        strain_per_step: a.strain,
        poisson_ratio: a.poisson,
        noise_std: a.noise,
        num_frames: a.frames,
        timestep_interval: a.timestep_interval,
        rng_seed: a.seed,
    };
    let traj = generate_synthetic_trajectory(&cfg)?;
    write_out(&a.out, write_lammps_dump(&traj))?;
    write_echo(&echo_path(&a.out), "synth", &a)?;
    println!("atoms={} frames={} out={}", traj.num_atoms(), traj.num_frames(), a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> anyhow::Result<()> {
    let traj = read_dump(&a.dump)?;
    let interior = truncate_boundary(&traj, &TruncationConfig::new(a.percent)?)?;
    let ds = build_dataset(&traj, &interior, &SamplingConfig { k: a.k }, &LJParams::new(a.epsilon, a.sigma)?)?;
    write_out(&a.out, write_dataset(&ds))?;
    write_echo(&echo_path(&a.out), "preprocess", &a)?;
    println!(
        "centers={} pairs={} feature_dim={} scaler=[{}, {}] out={}",
        ds.centers.len(),
        ds.len(),
        ds.feature_dim(),
        ds.scaler.lo,
        ds.scaler.hi,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let cfg = a.hyper.config(a.latent_dim, a.seed);
    write_echo(&a.out.join("cli.config.json"), "train", &a)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    if !a.quiet {
        writeln!(lock, "{}", experiment::CURVE_HEADER)?;
    }
    let summary = train_run(&ds, &cfg, &a.out, |r| {
        if !a.quiet {
            let _ = writeln!(lock, "{},{},{},{}", r.epoch, r.loss_ae, r.loss_op, r.alpha_scaled_ae);
        }
    })?;
    drop(lock);
    if !summary.status.is_completed() {
        bail!("run did not complete: {:?}", summary.status);
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let cfg = SweepConfig {
        latent_dims: a.dims.clone(),
        seeds: a.seeds.clone(),
        train: a.hyper.config(1, 0),
        dataset: a.dataset.clone(),
        output_dir: a.out.clone(),
    };
    cfg.validate()?;
    write_echo(&a.out.join("cli.config.json"), "sweep", &a)?;
    let table = match a.isolation {
        Isolation::InProcess => experiment::run_sweep_observed(&cfg, |d, s, r| {
            if r.epoch % 50 == 0 {
                eprintln!("d={d} seed={s} epoch={} loss_ae={:.6} loss_op={:.6}", r.epoch, r.loss_ae, r.loss_op);
            }
        })?,
        Isolation::Process => {
            let ds = load_dataset(&a.dataset)?;
            experiment::write_sweep_echo(&cfg, &ds)?;
            let exe = std::env::current_exe().context("locating the opae executable")?;
            let mut runs = Vec::new();
            for &d in &cfg.latent_dims {
                for &seed in &cfg.seeds {
                    let dir = cfg.output_dir.join("runs").join(run_dir_name(d, seed));
                    eprintln!("d={d} seed={seed} -> {}", dir.display());
                    let status = Command::new(&exe)
                        .arg("train")
                        .arg("--dataset")
                        .arg(&a.dataset)
                        .arg(format!("--latent-dim={d}"))
                        .arg(format!("--seed={seed}"))
                        .args(a.hyper.to_cli())
                        .arg("--quiet")
                        .arg("--out")
                        .arg(&dir)
                        .status()
                        .context("spawning training run")?;
                    let summary = match load_run(&dir, cfg.train.operator_delay_epochs) {
                        Ok(s) => s,
                        Err(e) => experiment::summarize_run(
                            d,
                            seed,
                            cfg.train.operator_delay_epochs,
                            experiment::RunStatus::Panicked(format!("{status}: {e}")),
                            Vec::new(),
                        ),
                    };
                    runs.push(summary);
                }
            }
            let table = aggregate(&cfg.latent_dims, runs);
            experiment::write_sweep_outputs(&cfg, &table)?;
            table
        }
    };
    print!("{}", experiment::table_csv(&table));
    Ok(())
}

/// Frames of one center in order: `u_0 .. u_{T-1}`.
fn center_series(ds: &Dataset) -> BTreeMap<u64, Vec<Vec<f64>>> {
    let mut out: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
    for p in &ds.pairs {
        let s = out.entry(p.center_id).or_default();
        if s.is_empty() {
            s.push(p.u_t.clone());
        }
        s.push(p.u_t1.clone());
    }
    out
}

fn reconstruct(a: ReconstructArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let series = center_series(&ds);
    ensure!(a.frame < ds.num_frames, "frame {} out of range (dataset has {})", a.frame, ds.num_frames);
    let model = match (a.source, &a.checkpoint) {
        (Source::Data, _) => None,
        (_, Some(p)) => Some(read_model(p)?.0),
        (_, None) => bail!("--source {:?} needs --checkpoint", a.source),
    };
    let target_frame = if a.source == Source::Predicted { a.frame + a.steps } else { a.frame };
    ensure!(target_frame < ds.num_frames, "prediction runs past the last frame");

    let centers: Vec<u64> = match a.center {
        Some(c) => {
            ensure!(series.contains_key(&c), "center {c} is not in the dataset");
            vec![c]
        }
        None => series.keys().copied().collect(),
    };
    let rows: Vec<&[f64]> = centers.iter().map(|c| series[c][a.frame].as_slice()).collect();
    let input = Matrix::from_rows(&rows);
    let features = match (&model, a.source) {
        (None, _) => input,
        (Some(m), Source::Decoded) => m.decode(&m.encode(&input)?)?,
        (Some(m), _) => m.predict_next(&input, a.steps)?,
    };

    let traj = a.dump.as_deref().map(read_dump).transpose()?;
    let subs = match &traj {
        Some(t) => {
            let interior = truncate_boundary(t, &TruncationConfig::new(a.percent)?)?;
            let wanted: BTreeSet<u64> = centers.iter().copied().collect();
            ensure!(wanted.is_subset(&interior), "dataset centers do not match this dump and --percent");
            knn_subvolumes(t, &wanted, &SamplingConfig { k: ds.k })?
        }
        None => {
            ensure!(a.branch != BranchArg::Reference, "--branch reference needs --dump");
            ensure!(a.center.is_some(), "stitching every center needs --dump; pass --center otherwise");
            Vec::new()
        }
    };

    let mut parts = Vec::with_capacity(centers.len());
    let mut clamped = 0;
    for (i, c) in centers.iter().enumerate() {
        let policy = match a.branch {
            BranchArg::Auto => BranchPolicy::AttractiveWhenNegative,
            BranchArg::Attractive => BranchPolicy::Always(Branch::Attractive),
            BranchArg::Repulsive => BranchPolicy::Always(Branch::Repulsive),
            BranchArg::Reference => {
                let t = traj.as_ref().expect("checked above");
                let (canon, _) = canonicalize(&distance_matrix(&subs[i], t, target_frame));
                let k = canon.k();
                let r_min = ds.lj.r_min();
                let mut b = Vec::new();
                for p in 0..k {
                    for q in p + 1..k {
                        b.push(if canon.get(p, q) < r_min { Branch::Repulsive } else { Branch::Attractive });
                    }
                }
                BranchPolicy::Explicit(b)
            }
        };
        let rec = reconstruct_subvolume(features.row(i), &ds.scaler, &ds.lj, &policy)
            .with_context(|| format!("center {c}"))?;
        clamped += rec.clamped;
        let coords = match &traj {
            Some(t) => rec.coords.with_ids(canonical_members(&subs[i], t, target_frame)),
            None => rec.coords,
        };
        parts.push(coords);
    }

    let (set, report) = match &traj {
        Some(t) if a.center.is_none() => {
            let f = t.frame(target_frame);
            let reference: BTreeMap<u64, [f64; 3]> =
                f.ids.iter().copied().zip(f.positions.iter().copied()).collect();
            let set = stitch_volume(&parts, &reference, None)?;
            let ids = set.ids.clone().unwrap_or_default();
            let truth = CoordinateSet::from_points(&ids.iter().map(|id| reference[id]).collect::<Vec<_>>());
            let err = rmsd(&set.coords, &truth.coords);
            (set, format!("atoms={} rmsd={err:.6e} clamped={clamped}", ids.len()))
        }
        _ => {
            let set = parts.into_iter().next().expect("at least one center");
            let report = format!("atoms={} clamped={clamped}", set.len());
            (set, report)
        }
    };
    write_out(
        &a.out,
        write_xyz(&set, &format!("frame={target_frame} source={:?}", a.source)),
    )?;
    write_echo(&echo_path(&a.out), "reconstruct", &a)?;
    println!("{report} out={}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let (model, _) = read_model(&a.checkpoint)?;
    ensure!(a.steps >= 1, "--steps must be at least 1");
    let series = center_series(&ds);
    let mut report = String::from("steps,samples,mse_rollout,mse_persistence\n");
    for steps in 1..=a.steps.min(ds.num_frames - 1) {
        let mut from = Vec::new();
        let mut to = Vec::new();
        for s in series.values() {
            for t in 0..s.len() - steps {
                from.push(s[t].as_slice());
                to.push(s[t + steps].as_slice());
            }
        }
        let x = Matrix::from_rows(&from);
        let y = Matrix::from_rows(&to);
        let pred = model.predict_next(&x, steps)?;
        let mse = opae::neural::mse(&pred, &y)?;
        let base = opae::neural::mse(&x, &y)?;
        report.push_str(&format!("{steps},{},{mse},{base}\n", from.len()));
    }
    write_out(&a.out, &report)?;
    write_echo(&echo_path(&a.out), "eval", &a)?;
    print!("{report}");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Cmd::Synth(a) => synth(a),
        Cmd::Preprocess(a) => preprocess(a),
        Cmd::Train(a) => train(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Reconstruct(a) => reconstruct(a),
        Cmd::Eval(a) => eval(a),
    }
}
