//! `voldiff` command-line front end.
//!
//! Exit codes: 0 ok, 2 config, 3 I/O or data, 4 numeric, 5 shape.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voldiff::config::RunConfig;
use voldiff::diffusion::mc_sample;
use voldiff::losses::suvr_map;
use voldiff::metrics::{
    centiloid, ctx_mean_suvr, evaluate_pair, metrics_csv, parse_manifest, CentiloidAnchors,
};
use voldiff::model::checkpoint::{Checkpoint, Section};
use voldiff::model::UNet;
use voldiff::phantom::generate_pair_at;
use voldiff::schedule::NoiseSchedule;
use voldiff::trainer::{
    condition_tensor, curve_csv, ConditionMode, LossMode, Sample, TrainConfig, Trainer,
};
use voldiff::volume::{
    read_mask, read_volume, write_mask, write_volume, NormTarget, RangeTag, Volume3,
};
use voldiff::Error;

#[derive(Parser)]
#[command(
    name = "voldiff",
    version,
    about = "Conditional 3D diffusion: train, sample, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on paired `<id>_mri.fvol` / `<id>_pet.fvol` files
    Train(TrainArgs),
    /// Synthesize a volume from a condition
    Sample(SampleArgs),
    /// PSNR / SSIM / MAE / NMI report as CSV on stdout
    Metrics(MetricsArgs),
    /// CTX SUVr and Centiloid of an SUV volume
    Centiloid(CentiloidArgs),
    /// Write a synthetic paired dataset
    Phantom(PhantomArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// extra `key=value` settings, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data_dir: PathBuf,
    /// output directory for checkpoint.fckpt, loss.csv and config.txt
    #[arg(long)]
    out: PathBuf,
    /// ficd, ddpm or ficd-s
    #[arg(long)]
    loss_mode: Option<LossMode>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    condition: PathBuf,
    /// Monte-Carlo repeats
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long, requires = "truth", conflicts_with = "pairs")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    truth: Option<PathBuf>,
    /// manifest of `id,pred,truth` lines; paths relative to the manifest
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Args)]
struct CentiloidArgs {
    #[arg(long)]
    suv: PathBuf,
    #[arg(long)]
    cereb: PathBuf,
    #[arg(long)]
    ctx: PathBuf,
    /// young-control and AD anchor SUVr
    #[arg(long, value_name = "YC,AD")]
    anchors: Option<String>,
}

#[derive(Args)]
struct PhantomArgs {
    /// key = value file with `phantom.*` keys
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

const CONFIG: u8 = 2;
const IO: u8 = 3;
const NUMERIC: u8 = 4;
const SHAPE: u8 = 5;

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => CONFIG,
        Error::Io(_) | Error::Format(_) => IO,
        Error::Numeric(_) => NUMERIC,
        Error::Shape { .. } => SHAPE,
        Error::Timestep { source, .. } => code_of(source),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: code_of(&e),
            msg: e.to_string(),
        }
    }
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure {
        code,
        msg: msg.into(),
    }
}

/// Errors while reading inputs count as data errors whatever their kind,
/// except shape mismatches.
fn data<T>(path: &Path, r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(|e| {
        let code = if matches!(e, Error::Shape { .. }) {
            SHAPE
        } else {
            IO
        };
        fail(code, format!("{}: {e}", path.display()))
    })
}

fn write_out(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| fail(IO, format!("{}: {e}", path.display())))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut rc = RunConfig::default();
    if let Some(p) = &args.config {
        let text = fs::read_to_string(p).map_err(|e| fail(IO, format!("{}: {e}", p.display())))?;
        rc.apply_text(&text)
            .map_err(|e| fail(CONFIG, format!("{}: {e}", p.display())))?;
    }
    rc.apply_overrides(&args.overrides)
        .map_err(|e| fail(CONFIG, e.to_string()))?;
    Ok(rc)
}

fn finish_config(rc: &RunConfig) -> Result<(), Failure> {
    rc.validate().map_err(|e| fail(CONFIG, e.to_string()))?;
    eprintln!("# resolved config\n{}", rc.resolved());
    Ok(())
}

/// Paired ids in the data directory, sorted.
fn pair_ids(dir: &Path) -> Result<Vec<String>, Failure> {
    let entries =
        fs::read_dir(dir).map_err(|e| fail(IO, format!("data dir {}: {e}", dir.display())))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| fail(IO, e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_mri.fvol") {
            if !dir.join(format!("{id}_pet.fvol")).is_file() {
                return Err(fail(IO, format!("{id}: missing {id}_pet.fvol")));
            }
            ids.push(id.to_string());
        }
    }
    if ids.is_empty() {
        return Err(fail(
            IO,
            format!("no <id>_mri.fvol files in {}", dir.display()),
        ));
    }
    ids.sort();
    Ok(ids)
}

fn load_sample(dir: &Path, id: &str, rc: &RunConfig) -> Result<Sample, Failure> {
    let read = |suffix: &str| {
        let p = dir.join(format!("{id}_{suffix}.fvol"));
        data(&p, read_volume(&p))
    };
    let (mri, pet) = (read("mri")?, read("pet")?);
    let mode = rc.condition;
    if rc.train.loss_mode == LossMode::FicdS {
        let mask = |suffix: &str| {
            let p = dir.join(format!("{id}_{suffix}.fvol"));
            data(&p, read_mask(&p))
        };
        let (cereb, ctx) = (mask("cereb")?, mask("ctx")?);
        data(
            &dir.join(id),
            Sample::suvr_from_volumes(&mri, &pet, &cereb, &ctx, mode),
        )
    } else {
        data(&dir.join(id), Sample::from_volumes(&mri, &pet, mode))
    }
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut rc = load_config(&a.cfg)?;
    if let Some(m) = a.loss_mode {
        rc.train.loss_mode = m;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    finish_config(&rc)?;
    let ids = pair_ids(&a.data_dir)?;
    if rc.heldout >= ids.len() {
        return Err(fail(
            CONFIG,
            format!(
                "train.heldout = {} leaves no training pairs out of {}",
                rc.heldout,
                ids.len()
            ),
        ));
    }
    let samples = ids
        .iter()
        .map(|id| load_sample(&a.data_dir, id, &rc))
        .collect::<Result<Vec<_>, _>>()?;
    let (train_set, heldout) = samples.split_at(ids.len() - rc.heldout);
    let dims = train_set[0].condition.shape().to_vec();
    rc.model
        .check_input(&dims, &dims)
        .map_err(|e| fail(SHAPE, e.to_string()))?;

    fs::create_dir_all(&a.out).map_err(|e| fail(IO, format!("{}: {e}", a.out.display())))?;
    write_out(&a.out.join("config.txt"), rc.resolved())?;
    let net = UNet::new(rc.model.clone(), rc.model_seed)?;
    let mut trainer = Trainer::new(net, rc.schedule()?, rc.train.clone())?;
    let ckpt = a.out.join("checkpoint.fckpt");
    let rows = trainer.run(train_set, heldout, Some(&ckpt))?;
    write_out(&a.out.join("loss.csv"), curve_csv(&rows))?;
    eprintln!(
        "trained {} steps on {} pairs",
        trainer.step,
        train_set.len()
    );
    Ok(())
}

fn load_denoiser(path: &Path) -> Result<(UNet, NoiseSchedule), Failure> {
    let c = data(path, Checkpoint::load(path))?;
    if c.section != Section::Denoiser {
        return Err(fail(
            IO,
            format!("{}: not a denoiser checkpoint", path.display()),
        ));
    }
    let t = data(path, Trainer::from_checkpoint(&c, TrainConfig::default()))?;
    Ok((t.net, t.sched))
}

fn condition_mode(channels: usize) -> Result<ConditionMode, Failure> {
    match channels {
        1 => Ok(ConditionMode::Mri),
        2 => Ok(ConditionMode::MriGradient),
        n => Err(fail(
            SHAPE,
            format!("checkpoint expects {n} condition channels"),
        )),
    }
}

fn sample(a: SampleArgs) -> Result<(), Failure> {
    let mut rc = load_config(&a.cfg)?;
    if let Some(n) = a.mc {
        rc.sample.mc_repeats = n;
    }
    if let Some(s) = a.seed {
        rc.sample.seed = s;
    }
    finish_config(&rc)?;
    let (net, sched) = load_denoiser(&a.checkpoint)?;
    let mri = data(&a.condition, read_volume(&a.condition))?;
    let d = net.spec.divisor();
    if mri.dims().as_array().iter().any(|n| n % d != 0) {
        return Err(fail(
            SHAPE,
            format!(
                "condition dims {:?} must be divisible by {d}",
                mri.dims().as_array()
            ),
        ));
    }
    let mode = condition_mode(net.spec.cond_channels)?;
    let extrema = data(&a.condition, mri.normalize(NormTarget::Train))?.extrema();
    let cond = data(&a.condition, condition_tensor(&mri, mode))?;
    let out = mc_sample(&net, &cond, &sched, &rc.sample)?;
    let vol = train_to_eval(Volume3::from_tensor(&out, RangeTag::Raw, extrema)?)?;
    data(&a.out, write_volume(&a.out, &vol))
}

/// Clips a sampled train-range volume and maps it to the eval range.
fn train_to_eval(v: Volume3) -> Result<Volume3, Failure> {
    Ok(v.clamp_to(NormTarget::Train).normalize(NormTarget::Eval)?)
}

/// Eval-range view of a metrics input: eval volumes as stored, train volumes
/// converted, raw volumes kept when already inside [0, 1] and min/max
/// normalized otherwise.
fn as_eval(v: Volume3) -> Result<Volume3, Error> {
    match v.range() {
        RangeTag::Eval => Ok(v),
        RangeTag::Train => v.normalize(NormTarget::Eval),
        RangeTag::Raw => {
            if v.voxels().iter().all(|x| (0.0..=1.0).contains(x)) {
                let (d, e) = (v.dims(), v.extrema());
                Volume3::with_range(d, v.into_voxels(), RangeTag::Eval, e)
            } else {
                v.normalize(NormTarget::Eval)
            }
        }
    }
}

fn metrics(a: MetricsArgs) -> Result<(), Failure> {
    let load = |p: &Path| data(p, read_volume(p).and_then(as_eval));
    let mut rows = Vec::new();
    match (a.pred, a.truth, a.pairs) {
        (Some(pred), Some(truth), None) => {
            let id = pred
                .file_stem()
                .map_or("pair".into(), |s| s.to_string_lossy().into_owned());
            rows.push(evaluate_pair(id, &load(&pred)?, &load(&truth)?)?);
        }
        (None, None, Some(manifest)) => {
            let text = fs::read_to_string(&manifest)
                .map_err(|e| fail(IO, format!("{}: {e}", manifest.display())))?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            for e in parse_manifest(&text)? {
                let (p, t) = (base.join(&e.pred), base.join(&e.truth));
                rows.push(evaluate_pair(e.id, &load(&p)?, &load(&t)?)?);
            }
        }
        _ => return Err(fail(CONFIG, "give either --pred and --truth, or --pairs")),
    }
    print!("{}", metrics_csv(&rows));
    Ok(())
}

fn parse_anchors(s: &str) -> Result<CentiloidAnchors, Failure> {
    let bad = || fail(CONFIG, format!("--anchors: expected YC,AD, got {s:?}"));
    let (yc, ad) = s.split_once(',').ok_or_else(bad)?;
    let yc: f64 = yc.trim().parse().map_err(|_| bad())?;
    let ad: f64 = ad.trim().parse().map_err(|_| bad())?;
    CentiloidAnchors::new(yc, ad).map_err(|e| fail(CONFIG, e.to_string()))
}

fn centiloid_cmd(a: CentiloidArgs) -> Result<(), Failure> {
    let anchors = match &a.anchors {
        Some(s) => parse_anchors(s)?,
        None => CentiloidAnchors::default(),
    };
    let suv = data(&a.suv, read_volume(&a.suv))?;
    let cereb = data(&a.cereb, read_mask(&a.cereb))?;
    let ctx = data(&a.ctx, read_mask(&a.ctx))?;
    let suvr = data(&a.suv, suvr_map(&suv, &cereb))?;
    let ctx_suvr = ctx_mean_suvr(&suvr, &ctx)?;
    println!("anchors = {},{}", anchors.suvr_yc, anchors.suvr_ad);
    println!("ctx_suvr = {ctx_suvr}");
    println!("centiloid = {}", centiloid(ctx_suvr, anchors));
    Ok(())
}

fn phantom(a: PhantomArgs) -> Result<(), Failure> {
    let mut rc = RunConfig::default();
    if let Some(p) = &a.spec {
        let text = fs::read_to_string(p).map_err(|e| fail(IO, format!("{}: {e}", p.display())))?;
        rc.apply_text(&text)
            .map_err(|e| fail(CONFIG, format!("{}: {e}", p.display())))?;
    }
    let spec = rc.phantom;
    spec.validate().map_err(|e| fail(CONFIG, e.to_string()))?;
    if a.n == 0 {
        return Err(fail(CONFIG, "--n must be at least 1"));
    }
    eprint!("# resolved phantom spec\n{}", spec.to_sidecar());
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| fail(IO, format!("{}: {e}", a.out_dir.display())))?;
    write_out(&a.out_dir.join("phantom.cfg"), spec.to_sidecar())?;
    for i in 0..a.n {
        let pair = generate_pair_at(&spec, i as u64)?;
        let path = |s: &str| a.out_dir.join(format!("{i:04}_{s}.fvol"));
        data(&path("mri"), write_volume(path("mri"), &pair.mri))?;
        data(&path("pet"), write_volume(path("pet"), &pair.pet))?;
        if let (Some(c), Some(x)) = (&pair.cerebellum, &pair.ctx) {
            data(&path("cereb"), write_mask(path("cereb"), c))?;
            data(&path("ctx"), write_mask(path("ctx"), x))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Metrics(a) => metrics(a),
        Command::Centiloid(a) => centiloid_cmd(a),
        Command::Phantom(a) => phantom(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
