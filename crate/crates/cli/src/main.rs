use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use anyface_core::ablation::{run_ablation, AblationSpec};
use anyface_core::dataset::Dataset;
use anyface_core::encoders::{
    contrastive_pretrain, EncoderConfig, Encoders, PretrainConfig, RETRIEVAL_TARGET,
};
use anyface_core::gradsuite::{self, SuiteConfig, SUITE_TOLERANCE};
use anyface_core::metrics::{evaluate, EvalConfig, Evaluator};
use anyface_core::model::{CheckpointHeader, Model};
use anyface_core::ppm;
use anyface_core::tensor::Tensor;
use anyface_core::trainer::{train, TrainConfig};
use anyface_core::world::{
    Caption, LatentCode, ToyImage, Vocabulary, World, WorldConfig, CAPTIONS_PER_SAMPLE,
};
use anyface_core::Error;

mod plot;

const THREADS_VAR: &str = "ANYFACE_LAB_THREADS";

/// A failure with a specific exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

#[derive(Parser)]
#[command(
    name = "anyface-lab",
    version,
    about = "Two-stream text-to-face synthesis on a synthetic face world"
)]
struct Cli {
    /// Print the caption vocabulary and exit.
    #[arg(long)]
    list_vocab: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and paired samples.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastively pretrain the frozen text and image encoders.
    PretrainEncoders {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train both streams from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Synthesize a face from 1–10 captions.
    Synth {
        #[command(flatten)]
        ctx: CheckpointArgs,
        /// Caption as space- or comma-separated vocabulary words; repeat for more captions.
        #[arg(long = "caption", required = true)]
        captions: Vec<String>,
        #[arg(long, default_value_t = 0)]
        style_seed: u64,
        /// Output PPM; the latent goes next to it with a `.tns` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit an image: keep its coarse rows, take the last m rows from the captions.
    Manipulate {
        #[command(flatten)]
        ctx: CheckpointArgs,
        /// Source image (`.ppm`) or latent (`.tns`).
        #[arg(long)]
        source: PathBuf,
        #[arg(long = "caption", required = true)]
        captions: Vec<String>,
        #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
        m_split: Option<usize>,
        /// Write one image per split 0..=L into the `--out` directory.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Toy-FID, RFRR and diversity for a checkpoint.
    Eval {
        #[command(flatten)]
        ctx: CheckpointArgs,
        /// Evaluate on the last N samples; defaults to the checkpoint's holdout.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every (variant, seed) pair from a spec file.
    Ablate {
        #[arg(long)]
        configs: PathBuf,
    },
    /// Finite-difference check of every loss and forward.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Checkpoint plus the frozen artifacts it was trained against.
#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one in the checkpoint's config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Encoder directory; defaults to the one in the checkpoint's config.
    #[arg(long)]
    encoders: Option<PathBuf>,
}

struct Loaded {
    header: CheckpointHeader,
    model: Model,
    world: World,
    encoders: Encoders,
    data_dir: PathBuf,
}

impl CheckpointArgs {
    fn load(&self) -> anyhow::Result<Loaded> {
        let (model, header) = Model::load(&self.checkpoint)?;
        let data_dir = self
            .data
            .clone()
            .unwrap_or_else(|| header.config.dataset.clone());
        let (_, world) = Dataset::read_world(&data_dir)?;
        let enc_dir = self.encoders.as_ref().unwrap_or(&header.config.encoders);
        let (encoders, _) = Encoders::load(enc_dir, world.vocab())?;
        Model::verify_frozen(&header, &world, &encoders)?;
        Ok(Loaded {
            header,
            model,
            world,
            encoders,
            data_dir,
        })
    }
}

fn parse_captions(vocab: &Vocabulary, raw: &[String]) -> anyhow::Result<Vec<Caption>> {
    if raw.is_empty() || raw.len() > CAPTIONS_PER_SAMPLE {
        return Err(Exit(
            2,
            format!("need 1..={CAPTIONS_PER_SAMPLE} captions, got {}", raw.len()),
        )
        .into());
    }
    raw.iter()
        .map(|c| vocab.parse(c).with_context(|| format!("caption {c:?}")))
        .collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    let json = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, json).with_context(|| path.display().to_string())
}

fn read_source(path: &Path, world: &World) -> anyhow::Result<ToyImage> {
    if path.extension().is_some_and(|e| e == "tns") {
        let file = fs::File::open(path).with_context(|| path.display().to_string())?;
        let t = Tensor::read_tns(&mut std::io::BufReader::new(file))?;
        let cfg = world.config();
        let w = LatentCode::new(t, cfg.layers, cfg.latent_dim)?;
        return Ok(world.decode(&w)?);
    }
    let img = ppm::read(path)?;
    let expected = [
        world.config().image_height,
        world.config().image_width,
        world.config().image_channels,
    ];
    if img.tensor().shape() != expected {
        bail!(Exit(
            2,
            format!(
                "source is {:?}, world images are {expected:?}",
                img.tensor().shape()
            )
        ));
    }
    Ok(img)
}

fn cmd_gen_data(seed: u64, count: usize, out: &Path) -> anyhow::Result<()> {
    if count == 0 {
        bail!(Exit(2, "count must be positive".into()));
    }
    let data = Dataset::generate(seed, count, WorldConfig::default())?;
    data.write(out)?;
    println!(
        "wrote {count} samples to {} (manifest {})",
        out.display(),
        Dataset::manifest_hash(out)?
    );
    Ok(())
}

fn cmd_pretrain(data: &Path, out: &Path, seed: u64, epochs: Option<usize>) -> anyhow::Result<()> {
    let data = Dataset::read(data)?;
    let mut cfg = PretrainConfig {
        seed,
        ..Default::default()
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let (enc, report) = contrastive_pretrain(
        &data.samples,
        data.world.vocab(),
        EncoderConfig::default(),
        &cfg,
    )?;
    if report.accuracy < RETRIEVAL_TARGET {
        return Err(Error::Pretraining {
            accuracy: report.accuracy,
            target: RETRIEVAL_TARGET,
        }
        .into());
    }
    enc.save(
        out,
        &enc.meta(Some(report.accuracy), cfg.batch_size, report.held_out_ids),
    )?;
    println!(
        "held-out retrieval accuracy {:.4}; encoders written to {}",
        report.accuracy,
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(config).with_context(|| config.display().to_string())?;
    let cfg: TrainConfig =
        serde_json::from_str(&text).map_err(|e| Exit(2, format!("{}: {e}", config.display())))?;
    let out = train(&cfg)?;
    let last = out.history.last();
    println!(
        "trained {} steps; final L_S {:.4} L_T {:.4}; {} checkpoints in {}",
        cfg.steps,
        last.map_or(f64::NAN, |r| r.synthesis.total),
        last.map_or(f64::NAN, |r| r.reconstruction.total),
        out.checkpoints.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_synth(
    ctx: &CheckpointArgs,
    captions: &[String],
    style_seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let l = ctx.load()?;
    let caps = parse_captions(l.world.vocab(), captions)?;
    let refs: Vec<&Caption> = caps.iter().collect();
    let (image, latent) = l
        .model
        .synthesize(&l.world, &l.encoders, &refs, style_seed)?;
    ppm::write(out, &image)?;
    let latent_path = out.with_extension("tns");
    let file = fs::File::create(&latent_path).with_context(|| latent_path.display().to_string())?;
    latent.tensor().write_tns(&mut BufWriter::new(file))?;
    println!("wrote {} and {}", out.display(), latent_path.display());
    Ok(())
}

fn cmd_manipulate(
    ctx: &CheckpointArgs,
    source: &Path,
    captions: &[String],
    m_split: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let l = ctx.load()?;
    let layers = l.world.layers();
    if let Some(m) = m_split.filter(|&m| m > layers) {
        bail!(Exit(2, format!("--m-split {m} is outside 0..={layers}")));
    }
    let caps = parse_captions(l.world.vocab(), captions)?;
    let refs: Vec<&Caption> = caps.iter().collect();
    let src = read_source(source, &l.world)?;
    match m_split {
        Some(m) => {
            ppm::write(
                out,
                &l.model.manipulate(&l.world, &l.encoders, &src, &refs, m)?,
            )?;
            println!("wrote {}", out.display());
        }
        None => {
            for m in 0..=layers {
                let img = l.model.manipulate(&l.world, &l.encoders, &src, &refs, m)?;
                ppm::write(&out.join(format!("split_{m}.ppm")), &img)?;
            }
            println!("wrote {} images to {}", layers + 1, out.display());
        }
    }
    Ok(())
}

fn cmd_eval(
    ctx: &CheckpointArgs,
    samples: Option<usize>,
    seed: u64,
    report: &Path,
) -> anyhow::Result<()> {
    let l = ctx.load()?;
    let data = Dataset::read(&l.data_dir)?;
    let n = samples
        .unwrap_or(l.header.config.holdout)
        .min(data.samples.len());
    let held_out = if n == 0 {
        &data.samples[..]
    } else {
        &data.samples[data.samples.len() - n..]
    };
    let cfg = EvalConfig {
        seed,
        ..Default::default()
    };
    let r = evaluate(
        &Evaluator::new(&l.world, &l.encoders),
        &l.model,
        held_out,
        &cfg,
    )?;
    write_json(report, &r)?;
    println!(
        "fid {:.4}  rfrr {:.3} (chance {:.3} ± {:.3})  diversity {:.4}",
        r.fid, r.rfrr, r.rfrr_chance, r.rfrr_sigma, r.diversity
    );
    Ok(())
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            Exit(
                2,
                format!("{THREADS_VAR} must be a positive integer, got {v:?}"),
            )
            .into()
        }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn cmd_ablate(configs: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(configs).with_context(|| configs.display().to_string())?;
    let spec: AblationSpec =
        serde_json::from_str(&text).map_err(|e| Exit(2, format!("{}: {e}", configs.display())))?;
    let variants = spec
        .resolve_variants()
        .map_err(|e| Exit(2, e.to_string()))?;
    let data = Dataset::read(&spec.base.dataset)?;
    let (encoders, _) = Encoders::load(&spec.base.encoders, data.world.vocab())?;
    let report = run_ablation(
        &variants,
        &data.world,
        &encoders,
        &data.samples,
        &spec,
        threads()?,
    )?;
    report.write(&spec.out_dir)?;

    let mut series = Vec::new();
    for v in &variants {
        let mut mean: Vec<(f64, f64)> = Vec::new();
        for &seed in &spec.seeds {
            let curve = report.curve(&v.name, seed);
            if mean.is_empty() {
                mean = curve.iter().map(|&(s, _)| (s as f64, 0.0)).collect();
            }
            for (m, (_, f)) in mean.iter_mut().zip(curve) {
                m.1 += f / spec.seeds.len() as f64;
            }
        }
        ppm::write(
            &spec.out_dir.join(format!("fid_{}.ppm", v.name)),
            &plot::line_plot(
                &spec
                    .seeds
                    .iter()
                    .map(|&s| {
                        report
                            .curve(&v.name, s)
                            .into_iter()
                            .map(|(x, y)| (x as f64, y))
                            .collect()
                    })
                    .collect::<Vec<_>>(),
                320,
                200,
            ),
        )?;
        series.push(mean);
    }
    ppm::write(
        &spec.out_dir.join("fid_curves.ppm"),
        &plot::line_plot(&series, 320, 200),
    )?;
    for (name, s) in &report.variants {
        println!(
            "{name:>12}: fid {:.4}  rfrr {:.3}  diversity {:.4}  cos(w_t, w_bar) {:.3}",
            s.fid, s.rfrr, s.diversity, s.cos_to_average
        );
    }
    println!("report written to {}", spec.out_dir.display());
    Ok(())
}

fn cmd_gradcheck(points: usize, seed: u64) -> anyhow::Result<()> {
    let started = std::time::Instant::now();
    let entries = gradsuite::run(&SuiteConfig {
        points,
        seed,
        ..Default::default()
    })
    .map_err(|e| Exit(2, e.to_string()))?;
    let mut failed = Vec::new();
    for e in &entries {
        let ok = e.passed(SUITE_TOLERANCE);
        println!(
            "{:<28} {} max_rel_error {:.3e}  checked {:>5}  kinks {}",
            e.name,
            if ok { "ok  " } else { "FAIL" },
            e.max_rel_error,
            e.checked,
            e.kinks
        );
        if !ok {
            failed.push(format!("{} ({:.3e})", e.name, e.max_rel_error));
        }
    }
    println!("{} operations in {:.1?}", entries.len(), started.elapsed());
    if !failed.is_empty() {
        bail!(Exit(
            6,
            format!("gradient check failed: {}", failed.join(", "))
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.list_vocab {
        let vocab = Vocabulary::new(WorldConfig::default().attributes);
        for (i, w) in vocab.words.iter().enumerate() {
            println!("{i:>3} {w}");
        }
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!(Exit(2, "no command given (see --help)".into()));
    };
    match command {
        Command::GenData { seed, count, out } => cmd_gen_data(seed, count, &out),
        Command::PretrainEncoders {
            data,
            out,
            seed,
            epochs,
        } => cmd_pretrain(&data, &out, seed, epochs),
        Command::Train { config } => cmd_train(&config),
        Command::Synth {
            ctx,
            captions,
            style_seed,
            out,
        } => cmd_synth(&ctx, &captions, style_seed, &out),
        Command::Manipulate {
            ctx,
            source,
            captions,
            m_split,
            sweep: _,
            out,
        } => cmd_manipulate(&ctx, &source, &captions, m_split, &out),
        Command::Eval {
            ctx,
            samples,
            seed,
            report,
        } => cmd_eval(&ctx, samples, seed, &report),
        Command::Ablate { configs } => cmd_ablate(&configs),
        Command::Gradcheck { points, seed } => cmd_gradcheck(points, seed),
    }
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Pretraining { .. } => 3,
        Error::Divergence { .. } => 4,
        Error::Range { .. } => 5,
        Error::Variant { source, .. } => core_code(source),
        _ => 2,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Exit(code, _)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
