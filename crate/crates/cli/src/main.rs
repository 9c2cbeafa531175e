use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use echoreflect_core::checkpoint::Checkpoint;
use echoreflect_core::data::{self, PhantomSpec};
use echoreflect_core::metrics::evaluate;
use echoreflect_core::network::{self, NetworkParams};
use echoreflect_core::trainer::{self, SessionOptions};
use echoreflect_core::{validate_config, Error, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "echoreflect", version, about = "Semi-supervised echocardiography segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student/teacher pair on a dataset root.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one image.
    Predict(PredictArgs),
    /// Write synthetic echo phantoms in the dataset layout.
    Synth(SynthArgs),
}

/// Overrides for `TrainConfig`; names match the config keys.
#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    in_channels: Option<usize>,
    #[arg(long)]
    k_fg: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    ema_lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    n_choices: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_iters: Option<u64>,
    #[arg(long)]
    warmup_iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    labeled_ratio: Option<f64>,
    #[arg(long)]
    val_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    log_interval: Option<u64>,
    #[arg(long)]
    canny_low: Option<f64>,
    #[arg(long)]
    canny_high: Option<f64>,
    #[arg(long)]
    gaussian_sigma: Option<f64>,
    #[arg(long)]
    dilation_radius: Option<usize>,
    #[arg(long)]
    s1_confidence_threshold: Option<f64>,
    #[arg(long)]
    labeled_only: bool,
    #[arg(long)]
    disable_ers: bool,
    #[arg(long)]
    disable_mms: bool,
    #[arg(long)]
    disable_s1: bool,
    #[arg(long)]
    disable_s2: bool,
    #[arg(long)]
    disable_aux_sketch: bool,
    #[arg(long)]
    fixed_n: Option<usize>,
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        set!(
            image_size, in_channels, k_fg, widths, alpha, beta, ema_lambda, n_choices, lr, momentum,
            weight_decay, max_iters, warmup_iters, seed, labeled_ratio, val_interval, checkpoint_interval, log_interval,
            canny_low, canny_high, gaussian_sigma, dilation_radius, s1_confidence_threshold
        );
        macro_rules! flag {
            ($($f:ident),*) => {$(
                cfg.$f |= self.$f;
            )*};
        }
        flag!(labeled_only, disable_ers, disable_mms, disable_s1, disable_s2, disable_aux_sketch);
        if self.fixed_n.is_some() {
            cfg.fixed_n = self.fixed_n;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "ECHOREFLECT_DATA")]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// No progress output on standard error.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// Annotated frames of unlabeled patients.
    Val,
    /// Frames of labeled patients.
    Labeled,
    /// Every annotated frame.
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "ECHOREFLECT_DATA")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// Directory for the CSV reports; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    use_teacher: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output mask raster (class indices).
    #[arg(long)]
    out: PathBuf,
    /// Optional color overlay raster.
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long)]
    use_teacher: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    frames_per_patient: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    chambers: usize,
    #[arg(long, default_value_t = 0.25)]
    contrast: f64,
    #[arg(long, default_value_t = 0.3)]
    speckle_strength: f64,
    #[arg(long, default_value_t = 1.5)]
    blur_sigma: f64,
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    args.flags.apply(&mut cfg);
    let cfg = validate_config(cfg)?;

    let index = data::index_dataset(&args.data, cfg.labeled_ratio, cfg.seed)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    index.save(&args.out.join("split.json"))?;
    let train_data = data::load_train_data(&index, &cfg)?;
    if !args.quiet {
        eprintln!(
            "{} labeled / {} unlabeled patients, {} labeled / {} unlabeled / {} validation frames, variant {}",
            index.labeled.len(),
            index.unlabeled.len(),
            train_data.labeled.len(),
            train_data.unlabeled.len(),
            train_data.val.len(),
            trainer::ablation_mode(&cfg)?.name()
        );
    }
    let summary = trainer::run_session(
        &cfg,
        &train_data,
        &SessionOptions {
            out_dir: args.out.clone(),
            resume: args.resume.clone(),
            progress: !args.quiet,
        },
    )?;
    if let Some(report) = &summary.final_report {
        print!("{}", report.render());
    }
    println!("trained {} iterations; outputs in {}", summary.iters, args.out.display());
    Ok(())
}

fn pick_params(ck: Checkpoint, use_teacher: bool) -> NetworkParams {
    if use_teacher {
        ck.teacher
    } else {
        ck.student
    }
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = ck.config.clone();
    let index = data::index_dataset(&args.data, cfg.labeled_ratio, cfg.seed)?;
    let frames: Vec<&data::Frame> = match args.split {
        Split::Val => index.unlabeled.iter().flat_map(|p| &p.frames).collect(),
        Split::Labeled => index.labeled.iter().flat_map(|p| &p.frames).collect(),
        Split::All => index.labeled.iter().chain(&index.unlabeled).flat_map(|p| &p.frames).collect(),
    };
    let params = pick_params(ck, args.use_teacher);
    let mut cases = Vec::new();
    for f in frames {
        let Some(mask_path) = &f.mask else { continue };
        let img = data::load_image(&index.root.join(&f.image), cfg.image_size, cfg.in_channels)?;
        let gt = data::load_mask(&index.root.join(mask_path), cfg.image_size, cfg.k_fg)?;
        let pred = network::argmax_labels(&network::forward_seg(&params, &img)?);
        let id = f.image.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
        cases.push((id, pred, gt));
    }
    if cases.is_empty() {
        return Err(Error::Dataset("the selected split has no annotated frames".into()).into());
    }
    let report = evaluate(&cases, cfg.k_fg)?;
    let out = match args.out {
        Some(dir) => dir,
        None => args.checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    std::fs::create_dir_all(&out)?;
    report.write_summary_csv(&out.join("eval_report.csv"))?;
    report.write_cases_csv(&out.join("eval_cases.csv"))?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = ck.config.clone();
    let (w, h) = image::image_dimensions(&args.image).map_err(|e| Error::Data {
        path: args.image.clone(),
        message: e.to_string(),
    })?;
    let color = image::open(&args.image)
        .map_err(|e| Error::Data {
            path: args.image.clone(),
            message: e.to_string(),
        })?
        .color();
    let raster_channels = if color.has_color() { 3 } else { 1 };
    if raster_channels != cfg.in_channels {
        return Err(Error::Data {
            path: args.image.clone(),
            message: format!(
                "{raster_channels}-channel raster, checkpoint expects {} channels",
                cfg.in_channels
            ),
        }
        .into());
    }
    let img = data::load_image(&args.image, cfg.image_size, cfg.in_channels)?;
    let params = pick_params(ck, args.use_teacher);
    let mask = network::argmax_labels(&network::forward_seg(&params, &img)?);
    data::save_mask(&mask, &args.out)?;
    if let Some(overlay) = &args.overlay {
        data::save_overlay(&img, &mask, overlay)?;
    }
    let counts: Vec<String> = (0..=cfg.k_fg as u8).map(|c| format!("{c}:{}", mask.count(c))).collect();
    println!(
        "{}x{} input -> {}x{} mask, class pixels {}",
        w,
        h,
        cfg.image_size,
        cfg.image_size,
        counts.join(" ")
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let spec = PhantomSpec {
        size: args.size,
        chambers: args.chambers,
        contrast: args.contrast,
        speckle_strength: args.speckle_strength,
        blur_sigma: args.blur_sigma,
        seed: args.seed,
    };
    if args.count == 0 {
        bail!(Error::InvalidValue("count must be positive".into()));
    }
    let manifest = data::synth_dataset(&args.out, args.count, args.seed, args.frames_per_patient, &spec)?;
    println!(
        "wrote {} phantom pairs for {} patients to {}",
        manifest.entries.len(),
        manifest.count.div_ceil(args.frames_per_patient),
        args.out.display()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidValue(_)) => EXIT_USAGE,
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "echoreflect", "train", "--data", "d", "--out", "o", "--lr", "0.5", "--fixed-n", "4", "--disable-s2",
            "--widths", "8,16",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let mut cfg = TrainConfig::default();
        a.flags.apply(&mut cfg);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.fixed_n, Some(4));
        assert!(cfg.disable_s2 && !cfg.disable_s1);
        assert_eq!(cfg.widths, vec![8, 16]);
        assert_eq!(cfg.alpha, 0.01);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into()).into()), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Dataset("x".into()).into()), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::Divergence { iter: 3, message: "nan".into() }.into()),
            EXIT_DIVERGENCE
        );
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_DATA);
    }
}
