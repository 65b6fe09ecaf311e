use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pfs_kd::data::{generate, load_split, DatasetSpec, Split};
use pfs_kd::pfs::{export_heatmap, write_ppm};
use pfs_kd::tensor::load_tensor;
use pfs_kd::trainer::{
    class_names, distill, evaluate_checkpoint, load_checkpoint_any, train_teacher, DistillMode, Precision, RunSummary,
    TrainConfig, EVAL_FILE,
};
use pfs_kd::verify::{gradcheck_suite, oracle_suite};
use pfs_kd::{Error, Tensor};

#[derive(Parser)]
#[command(name = "pfs-kd", version, about = "Pixel-wise feature similarity distillation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData(Common),
    /// Train the teacher with cross-entropy only.
    TrainTeacher(TrainArgs),
    /// Train a student against a frozen teacher.
    Distill(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite; writes gradcheck.csv.
    Gradcheck(Common),
    /// Export PFS rows of chosen pixels as heatmaps.
    PfsDump(DumpArgs),
    /// Compare kernels and losses against loop implementations; writes oracle.csv.
    OracleCheck(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Teacher checkpoint (distill only).
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, value_enum)]
    dtype: Option<DType>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample index in the dataset split.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    index: Option<usize>,
    /// A `[3,H,W]` PFST image instead of a dataset sample.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Input pixel as `row,col`; repeatable.
    #[arg(long = "pixel", required = true, allow_hyphen_values = true)]
    pixels: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DType {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

/// Config for `gradcheck` and `oracle-check`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VerifyConfig {
    seed: u64,
    /// Random cases per oracle.
    instances: usize,
    out_dir: PathBuf,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 200,
            out_dir: PathBuf::from("verify"),
        }
    }
}

fn invalid(key: &str, detail: impl Into<String>) -> anyhow::Error {
    Error::Config {
        key: key.into(),
        detail: detail.into(),
    }
    .into()
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| invalid(&path.display().to_string(), e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| invalid(&path.display().to_string(), e.to_string()))
}

fn reject_flags(c: &Common, command: &str, allowed: &[&str]) -> anyhow::Result<()> {
    let given = [
        ("mode", c.mode.is_some()),
        ("epochs", c.epochs.is_some()),
        ("lambda", c.lambda.is_some()),
        ("mu", c.mu.is_some()),
        ("temperature", c.temperature.is_some()),
    ];
    for (flag, set) in given {
        if set && !allowed.contains(&flag) {
            return Err(invalid(flag, format!("--{flag} has no effect on {command}")));
        }
    }
    Ok(())
}

fn train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let c = &args.common;
    let mut cfg: TrainConfig = read_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = &c.mode {
        cfg.mode = DistillMode::parse(m)?;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if let Some(l) = c.lambda {
        cfg.loss.lambda = l;
    }
    if let Some(m) = c.mu {
        cfg.loss.mu = m;
    }
    if let Some(t) = c.temperature {
        cfg.loss.temperature = t;
    }
    if let Some(d) = &args.data {
        cfg.data_dir = d.clone();
    }
    if let Some(t) = &args.teacher {
        cfg.teacher_checkpoint = Some(t.clone());
    }
    if let Some(d) = args.dtype {
        cfg.dtype = match d {
            DType::F32 => Precision::F32,
            DType::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn verify_config(c: &Common, command: &str) -> anyhow::Result<VerifyConfig> {
    reject_flags(c, command, &[])?;
    let mut cfg: VerifyConfig = read_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if cfg.instances == 0 {
        return Err(invalid("instances", "must be >= 1"));
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn print_summary(s: &RunSummary, out: &Path) {
    println!(
        "{} ({}) seed {}: best val mIoU {:.4} at epoch {}, final {:.4}; {}",
        s.role,
        s.mode,
        s.seed,
        s.best_val_miou,
        s.best_epoch,
        s.final_val_miou,
        out.display()
    );
}

fn gen_data(c: &Common) -> anyhow::Result<()> {
    reject_flags(c, "gen-data", &[])?;
    let mut spec: DatasetSpec = read_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let m = generate(&spec, &out)?;
    println!(
        "wrote {} train and {} val samples to {}",
        m.train_count,
        m.val_count,
        out.display()
    );
    Ok(())
}

fn train(args: &TrainArgs, teacher: bool) -> anyhow::Result<()> {
    if teacher {
        reject_flags(&args.common, "train-teacher", &["epochs"])?;
    }
    let cfg = train_config(args)?;
    let summary = match (teacher, cfg.dtype) {
        (true, Precision::F32) => train_teacher::<f32>(&cfg)?,
        (true, Precision::F64) => train_teacher::<f64>(&cfg)?,
        (false, Precision::F32) => distill::<f32>(&cfg)?,
        (false, Precision::F64) => distill::<f64>(&cfg)?,
    };
    print_summary(&summary, &cfg.out_dir);
    Ok(())
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    reject_flags(&args.train.common, "eval", &[])?;
    let cfg = train_config(&args.train)?;
    let split = Split::from(args.split);
    let (bs, ignore) = (cfg.eval_batch_size, cfg.loss.ignore_index);
    let metrics = match cfg.dtype {
        Precision::F32 => evaluate_checkpoint::<f32>(&args.checkpoint, &cfg.data_dir, split, bs, ignore)?,
        Precision::F64 => evaluate_checkpoint::<f64>(&args.checkpoint, &cfg.data_dir, split, bs, ignore)?,
    };
    let names = class_names(metrics.per_class_iou.len());
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(EVAL_FILE);
    fs::write(&path, metrics.csv(&names)).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", metrics.table(&names));
    Ok(())
}

fn gradcheck(c: &Common) -> anyhow::Result<bool> {
    let cfg = verify_config(c, "gradcheck")?;
    let reports = gradcheck_suite(cfg.seed)?;
    let mut csv = String::from("op_name,shape,max_rel_err,pass\n");
    for r in &reports {
        for row in r.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("gradcheck.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    for r in &failed {
        eprintln!("FAIL {} max rel err {:.3e}", r.name, r.max_rel_err());
    }
    println!(
        "{} of {} gradient checks passed; {}",
        reports.len() - failed.len(),
        reports.len(),
        path.display()
    );
    Ok(failed.is_empty())
}

fn oracle_check(c: &Common) -> anyhow::Result<bool> {
    let cfg = verify_config(c, "oracle-check")?;
    let reports = oracle_suite(cfg.instances, cfg.seed)?;
    let mut csv = String::from("name,instances,max_abs_err,tolerance,pass\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{:.3e},{:e},{}\n",
            r.name,
            r.instances,
            r.max_abs_err,
            r.tolerance,
            r.passed()
        ));
        println!("{:<20} {:>9.3e} {}", r.name, r.max_abs_err, if r.passed() { "ok" } else { "FAIL" });
    }
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("oracle.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(reports.iter().all(|r| r.passed()))
}

fn parse_pixel(s: &str) -> anyhow::Result<(i64, i64)> {
    let bad = || invalid("pixel", format!("expected `row,col`, got `{s}`"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

fn marked_image(image: &Tensor<f32>, row: usize, col: usize) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut rgb = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.get(&[ch, y, x]).clamp(0.0, 1.0);
                rgb[3 * (y * w + x) + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    let arm = 3i64;
    for d in -arm..=arm {
        for (y, x) in [(row as i64 + d, col as i64), (row as i64, col as i64 + d)] {
            if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                let at = 3 * (y as usize * w + x as usize);
                rgb[at..at + 3].copy_from_slice(&[255, 0, 0]);
            }
        }
    }
    rgb
}

fn pfs_dump(args: &DumpArgs) -> anyhow::Result<()> {
    reject_flags(&args.train.common, "pfs-dump", &[])?;
    let cfg = train_config(&args.train)?;
    let net = load_checkpoint_any::<f64>(&args.checkpoint)?;
    let (image, stem) = match (&args.image, args.index) {
        (Some(path), _) => {
            let img = load_tensor::<f32>(path)?;
            let stem = path
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.trim_end_matches(".pfst").replace('.', "_"))
                .unwrap_or_else(|| "image".into());
            (img, stem)
        }
        (None, Some(index)) => {
            let set = load_split(&cfg.data_dir, args.split.into())?;
            let img = set
                .images
                .get(index)
                .cloned()
                .ok_or_else(|| invalid("index", format!("{index} out of range for {} samples", set.len())))?;
            (img, format!("{}_{index:05}", Split::from(args.split).name()))
        }
        (None, None) => bail!(invalid("index", "give --index or --image")),
    };
    let [c, h, w] = *image.shape() else {
        return Err(invalid("image", format!("expected [3,H,W], got {:?}", image.shape())));
    };
    let batch = image.cast::<f64>().reshape(&[1, c, h, w])?;
    net.check_input(batch.shape())?;
    let pfs = net
        .infer(&batch)?
        .pfs
        .ok_or_else(|| invalid("checkpoint", "network has no PFS layer"))?;
    let stride = net.spec().output_stride();
    let (fh, fw) = (pfs.height(), pfs.width());

    let mut targets = Vec::new();
    for p in &args.pixels {
        let (row, col) = parse_pixel(p)?;
        if row < 0 || col < 0 || row as usize / stride >= fh || col as usize / stride >= fw {
            return Err(invalid(
                "pixel",
                format!("({row},{col}) outside the {h}x{w} input (feature map {fh}x{fw}, stride {stride})"),
            ));
        }
        targets.push((row as usize, col as usize));
    }

    create_dir(&cfg.out_dir)?;
    for (row, col) in targets {
        let loc = (row / stride) * fw + col / stride;
        let name = format!("{stem}_r{row}_c{col}");
        let files = export_heatmap(&pfs.row_map(0, loc)?, &cfg.out_dir, &name)?;
        let ppm = cfg.out_dir.join(format!("{name}.marked.ppm"));
        write_ppm(&ppm, w, h, &marked_image(&image, row, col))?;
        println!(
            "({row},{col}) -> location {loc}: {} [{:.4e}, {:.4e}]",
            files.pgm.display(),
            files.range.min,
            files.range.max
        );
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::GenData(c) => gen_data(c)?,
        Command::TrainTeacher(a) => train(a, true)?,
        Command::Distill(a) => train(a, false)?,
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(c) => return gradcheck(c),
        Command::PfsDump(a) => pfs_dump(a)?,
        Command::OracleCheck(c) => return oracle_check(c),
    }
    Ok(true)
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_validation))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
