//! `gridhaze`: synthesize hazy data, train and finetune, dehaze, evaluate and
//! run the comparison studies.
//!
//! Settings come from built-in defaults, then the `--config` TOML file, then
//! flags; later sources win.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gridhaze::error::Error;
use gridhaze::experiments::{self, Comparison, ExperimentConfig};
use gridhaze::haze::{make_dataset, DatasetSpec, HazeSample};
use gridhaze::io::{self, JsonLines};
use gridhaze::network::{build, VariantSpec};
use gridhaze::training::{
    evaluate, load_checkpoint, run, save_checkpoint, CheckpointBundle, RunHooks, StepRecord,
    Teacher, TrainConfig, TrainMode,
};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "GRIDHAZE_OUT";

#[derive(Parser)]
#[command(name = "gridhaze", version, about = "Grid dehazing network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data synthesis.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (defaults to `$GRIDHAZE_OUT/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Apply the domain-shift proxy to the hazy images.
        #[arg(long)]
        translated: bool,
        /// Number of samples (overrides the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pretrain on a synthetic dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from an epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<VariantSpec>,
    },
    /// Finetune a pretrained checkpoint on translated data.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint, the distillation teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Finetune without the distillation term.
        #[arg(long)]
        no_itkt: bool,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Dehaze PNG images of any size.
    Dehaze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Also write the pre-processing feature maps as gray PNGs.
        #[arg(long)]
        dump_learned_inputs: bool,
        /// PNG files or directories of PNG files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a checkpoint on a paired dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and compare several arms under identical data and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Study::Variants)]
        study: Study,
        /// Variants to compare (repeatable; all when omitted).
        #[arg(long = "variant", value_parser = parse_variant)]
        variants: Vec<VariantSpec>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    /// Architecture variants.
    Variants,
    /// Direct against indirect estimation.
    Heads,
    /// Pretrained only, finetuned without and with distillation.
    Itkt,
}

fn parse_variant(s: &str) -> Result<VariantSpec, String> {
    VariantSpec::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| {
            let names: Vec<_> = VariantSpec::ALL.iter().map(|v| v.name()).collect();
            format!(
                "unknown variant `{s}`; expected one of {}",
                names.join(", ")
            )
        })
}

impl Common {
    /// Defaults, then the file, then flags.
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, command: &str) -> Result<PathBuf> {
        let dir = match &self.out {
            Some(d) => d.clone(),
            None => std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("gridhaze-out"))
                .join(command),
        };
        fs::create_dir_all(&dir)
            .map_err(Error::from)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(dir)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 configuration, 3 input data, 4 file system, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) | Error::Parameter(_) | Error::Fingerprint { .. } => 2,
                Error::Input(_) | Error::Format(_) | Error::Image(_) | Error::Json(_) => 3,
                Error::Io(_) => 4,
                Error::NonFiniteLoss { .. } => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            translated,
            n,
        } => synth(&common, translated, n),
        Command::Train {
            common,
            data,
            resume,
            variant,
        } => train(&common, &data, resume, variant),
        Command::Finetune {
            common,
            data,
            teacher,
            no_itkt,
            resume,
        } => finetune(&common, &data, teacher, no_itkt, resume),
        Command::Dehaze {
            common,
            ckpt,
            dump_learned_inputs,
            inputs,
        } => dehaze(&common, &ckpt, dump_learned_inputs, &inputs),
        Command::Eval { common, ckpt, data } => eval(&common, &ckpt, &data),
        Command::Ablate {
            common,
            study,
            variants,
        } => ablate(&common, study, variants),
    }
}

fn synth(common: &Common, translated: bool, n: Option<usize>) -> Result<()> {
    let cfg = common.experiment()?;
    let out = common.out_dir("synth")?;
    let spec = DatasetSpec {
        n: n.unwrap_or(cfg.data.n),
        domain_shift: translated.then_some(cfg.shift),
        ..cfg.data.clone()
    };
    let samples = make_dataset(&spec, cfg.workers)?;
    io::write_dataset(&out, &samples)?;
    let manifest = fs::read(out.join(io::MANIFEST)).map_err(Error::from)?;
    println!(
        "wrote {} samples to {} (beta {:?}, airlight {:?}, domain {}, manifest sha256 {})",
        samples.len(),
        out.display(),
        spec.beta_range,
        spec.airlight_range,
        if translated {
            "translated"
        } else {
            "synthetic"
        },
        gridhaze::util::sha256_hex(&manifest)
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<Vec<HazeSample>> {
    io::read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

/// Runs `bundle` to completion, checkpointing every epoch into `out`.
fn train_to(
    bundle: CheckpointBundle,
    data: &[HazeSample],
    cfg: &ExperimentConfig,
    teacher: Option<&Teacher>,
    out: &Path,
) -> Result<CheckpointBundle> {
    let ext = cfg.extractor()?;
    let log_path = out.join("train_log.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(Error::from)?;
    let mut log = JsonLines::new(std::io::BufWriter::new(file));
    let mut on_step = |r: &StepRecord| log.write(r);
    let mut on_epoch = |b: &CheckpointBundle| {
        save_checkpoint(b, &out.join(format!("epoch-{:03}.ckpt", b.state.epoch)))
    };
    let hooks = RunHooks {
        on_step: Some(&mut on_step),
        on_epoch: Some(&mut on_epoch),
        stop_after_epoch: None,
    };
    let result = run(bundle, data, &ext, teacher, hooks);
    log.flush()?;
    let done = match result {
        Ok(done) => done,
        Err(Error::NonFiniteLoss {
            step,
            epoch,
            detail,
            last_good,
        }) => {
            let path = out.join("last_good.ckpt");
            save_checkpoint(&last_good, &path)?;
            let err = Error::NonFiniteLoss {
                step,
                epoch,
                detail,
                last_good,
            };
            return Err(anyhow::Error::new(err).context(format!(
                "training diverged; the last finite state is in {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&done, &out.join("final.ckpt"))?;
    println!(
        "{} steps over {} epochs, final epoch loss {:.6}; checkpoint {}",
        done.state.step,
        done.state.epoch,
        done.state.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.join("final.ckpt").display()
    );
    Ok(done)
}

fn write_effective_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(Error::from)?;
    Ok(())
}

fn train(
    common: &Common,
    data: &Path,
    resume: Option<PathBuf>,
    variant: Option<VariantSpec>,
) -> Result<()> {
    let mut cfg = common.experiment()?;
    if let Some(v) = variant {
        cfg.grid.variant = v;
    }
    let out = common.out_dir("train")?;
    let data = load_data(data)?;
    let bundle = match resume {
        Some(path) => load_checkpoint(&path)?,
        None => {
            let (model, params) = build(cfg.grid.clone(), cfg.seed)?;
            let train = TrainConfig {
                mode: TrainMode::Pretrain,
                ..cfg.pretrain.clone()
            };
            CheckpointBundle::fresh(model.config().clone(), train, params)
        }
    };
    if bundle.train.mode != TrainMode::Pretrain {
        return Err(Error::Config(format!("checkpoint is a {} run", bundle.train.mode)).into());
    }
    write_effective_config(&cfg, &out)?;
    train_to(bundle, &data, &cfg, None, &out)?;
    Ok(())
}

fn finetune(
    common: &Common,
    data: &Path,
    teacher: Option<PathBuf>,
    no_itkt: bool,
    resume: Option<PathBuf>,
) -> Result<()> {
    let cfg = common.experiment()?;
    let out = common.out_dir("finetune")?;
    let data = load_data(data)?;
    let Some(teacher_path) = teacher else {
        return Err(
            Error::Config("finetuning needs --teacher <pretrained checkpoint>".into()).into(),
        );
    };
    let pretrained = load_checkpoint(&teacher_path)
        .with_context(|| format!("loading teacher {}", teacher_path.display()))?;
    let teacher = Teacher::new(pretrained.model()?, pretrained.params.clone())?;
    let mode = if no_itkt {
        TrainMode::FinetunePlain
    } else {
        TrainMode::FinetuneItkt
    };
    let bundle = match resume {
        Some(path) => load_checkpoint(&path)?,
        None => {
            let train = TrainConfig {
                mode,
                ..cfg.finetune.clone()
            };
            CheckpointBundle::fresh(pretrained.grid.clone(), train, pretrained.params.clone())
        }
    };
    if bundle.train.mode != mode {
        return Err(Error::Config(format!(
            "checkpoint is a {} run but this is a {mode} run",
            bundle.train.mode
        ))
        .into());
    }
    bundle.expect_grid(&pretrained.grid)?;
    write_effective_config(&cfg, &out)?;
    let teacher = (!no_itkt).then_some(&teacher);
    train_to(bundle, &data, &cfg, teacher, &out)?;
    Ok(())
}

fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(io::list_pngs(p)?);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn dehaze(common: &Common, ckpt: &Path, dump: bool, inputs: &[PathBuf]) -> Result<()> {
    let bundle = load_checkpoint(ckpt)?;
    let model = bundle.model()?;
    let out = common.out_dir("dehaze")?;
    let files = collect_pngs(inputs)?;
    let mut written = 0;
    for file in &files {
        let stem = file
            .file_stem()
            .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let img = match io::load_rgb(file) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", file.display());
                continue;
            }
        };
        let (pred, _) = model.forward(&bundle.params, &img, false)?;
        io::save_rgb(&out.join(format!("{stem}.png")), &pred)?;
        if dump {
            let dir = out.join(format!("{stem}_learned"));
            fs::create_dir_all(&dir).map_err(Error::from)?;
            let maps = model.learned_inputs(&bundle.params, &img)?;
            for c in 0..maps.channels() {
                io::save_gray(&dir.join(format!("{c:02}.png")), &maps, c, true)?;
            }
        }
        written += 1;
    }
    println!(
        "dehazed {written} of {} images into {}",
        files.len(),
        out.display()
    );
    if written == 0 {
        return Err(Error::Input("no input image could be read".into()).into());
    }
    Ok(())
}

fn eval(common: &Common, ckpt: &Path, data: &Path) -> Result<()> {
    let bundle = load_checkpoint(ckpt)?;
    let model = bundle.model()?;
    let data = load_data(data)?;
    let report = evaluate(&model, &bundle.params, &data)?;
    let out = common.out_dir("eval")?;
    let path = out.join("report.jsonl");
    report.write_jsonl(fs::File::create(&path).map_err(Error::from)?)?;
    for s in &report.images {
        println!("{}\t{:.4}\t{:.5}", s.id, s.psnr, s.ssim);
    }
    println!(
        "mean PSNR {:.4} dB, mean SSIM {:.5} over {} images; report {}",
        report.mean_psnr,
        report.mean_ssim,
        report.images.len(),
        path.display()
    );
    Ok(())
}

fn ablate(common: &Common, study: Study, variants: Vec<VariantSpec>) -> Result<()> {
    let cfg = common.experiment()?;
    let out = common.out_dir("ablate")?;
    let (name, table): (&str, Comparison) = match study {
        Study::Variants => {
            let variants = if variants.is_empty() {
                VariantSpec::ALL.to_vec()
            } else {
                variants
            };
            ("variants", experiments::variant_table(&cfg, &variants)?)
        }
        Study::Heads => ("heads", experiments::head_comparison(&cfg)?),
        Study::Itkt => ("itkt", experiments::itkt_study(&cfg)?),
    };
    let text = table.to_markdown();
    print!("{text}");
    fs::write(out.join(format!("{name}.md")), &text).map_err(Error::from)?;
    let json = serde_json::to_string_pretty(&table).map_err(Error::from)?;
    fs::write(out.join(format!("{name}.json")), json).map_err(Error::from)?;
    Ok(())
}
