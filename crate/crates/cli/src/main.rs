use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meshalign::checkpoint;
use meshalign::config::Config;
use meshalign::correlation::{cl_regress, flops_estimate, fsc_regress, FlopDims, FlopVariant, FscHead, HeadSpec, HeadVariant};
use meshalign::eval::evaluate;
use meshalign::gradcheck::{run_checks, DEFAULT_SEEDS};
use meshalign::imaging::{average_fusion, load_image, save_image, to_luma, Image};
use meshalign::jnd::jnd_map;
use meshalign::nn::Params;
use meshalign::synth::{gen_pair, load_dataset, procedural_texture, save_dataset, Difficulty, PairOptions};
use meshalign::tensor::{NdArray, Tape};
use meshalign::train::{self, prepare, training_pairs, Trainer, LOSS_LOG_HEADER};

const THREADS_ENV: &str = "MESHALIGN_THREADS";

#[derive(Parser)]
#[command(name = "meshalign", version, about = "Mesh-based image alignment: train, align, evaluate.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Align one target image onto a reference image.
    Align {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        tar: PathBuf,
        #[arg(long)]
        out_warped: PathBuf,
        #[arg(long)]
        out_fused: PathBuf,
        #[arg(long)]
        out_mask: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write the average fusion of every pair here.
        #[arg(long)]
        fusion_dir: Option<PathBuf>,
    },
    /// Write the JND threshold map of an image.
    Jnd {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// FLOP estimate and measured time of one correlation head.
    Bench {
        #[arg(long, value_enum)]
        variant: Variant,
        /// Comma-separated `key=value` sizes over the defaults
        /// c=256,h1=32,w1=32,h2=32,w2=32,c_r=64,hidden=128,out=8.
        #[arg(long, default_value = "")]
        dims: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
    },
    /// Generate a synthetic pair dataset.
    Gen {
        /// Directory of PNG/PPM/PGM source images; procedural textures
        /// when omitted.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        difficulty: Difficulty,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Cl,
    Ccl,
    Fsc,
}

impl From<Variant> for FlopVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Cl => FlopVariant::Cl,
            Variant::Ccl => FlopVariant::Ccl,
            Variant::Fsc => FlopVariant::Fsc,
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
    if n == 0 {
        bail!("{THREADS_ENV} must be positive");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = Config::load(config)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.config.model()? != cfg.model()? {
                bail!("{} was trained with a different architecture than {}", path.display(), config.display());
            }
            let mut t = Trainer::from_checkpoint(ck)?;
            // Schedule and output come from the config file; the model,
            // optimizer and sampler state from the checkpoint.
            t.config.steps = cfg.steps;
            t.config.checkpoint_every = cfg.checkpoint_every;
            t.config.out = cfg.out.clone();
            t
        }
        None => Trainer::new(cfg)?,
    };
    let pairs = training_pairs(&trainer.config)?;
    let data = prepare(&pairs)?;
    let out = trainer.config.out.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), trainer.config.to_text())?;
    let log_path = out.join("loss.csv");
    let fresh = resume.is_none() || !log_path.exists();
    let file = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&log_path)?;
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "{LOSS_LOG_HEADER}")?;
    }
    eprintln!(
        "training {} pairs from step {} to {} -> {}",
        data.len(),
        trainer.step,
        trainer.config.steps,
        out.display()
    );
    let started = Instant::now();
    let last = train::run(&mut trainer, &data, &mut log)?;
    println!("wrote {} after {:.1}s", last.display(), started.elapsed().as_secs_f64());
    Ok(())
}

fn read_rgb_or_gray(path: &Path, channels: usize) -> Result<Image> {
    let img = load_image(path)?;
    Ok(match (img.channels(), channels) {
        (a, b) if a == b => img,
        (3, 1) => to_luma(&img),
        (1, 3) => Image::from_fn(img.height(), img.width(), 3, |_, y, x| img.get(0, y, x))?,
        (a, b) => bail!("{}: cannot convert {a} channels to {b}", path.display()),
    })
}

fn cmd_align(ckpt: &Path, reference: &Path, tar: &Path, warped: &Path, fused: &Path, mask: Option<&Path>) -> Result<()> {
    let (cfg, model) = checkpoint::load_model(ckpt)?;
    let r = read_rgb_or_gray(reference, cfg.channels)?;
    let t = read_rgb_or_gray(tar, cfg.channels)?;
    let a = model.align(&r, &t)?;
    if a.degenerate {
        eprintln!("warning: predicted corners were degenerate; used the identity homography");
    }
    save_image(&a.warped, warped)?;
    save_image(&average_fusion(&r, &a.warped)?, fused)?;
    if let Some(m) = mask {
        save_image(&a.mask.to_image(), m)?;
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, report: &Path, fusion_dir: Option<&Path>) -> Result<()> {
    let (cfg, model) = checkpoint::load_model(ckpt)?;
    let pairs = load_dataset(data)?;
    for (i, p) in pairs.iter().enumerate() {
        let s = (p.reference.channels(), p.reference.height(), p.reference.width());
        if s != (cfg.channels, cfg.size, cfg.size) {
            bail!(
                "pair {i} is {}x{}x{} but the checkpoint expects {}x{}x{}",
                s.0,
                s.1,
                s.2,
                cfg.channels,
                cfg.size,
                cfg.size
            );
        }
    }
    let r = evaluate(&model, &pairs, fusion_dir)?;
    fs::write(report, r.to_csv())?;
    print!("{}", r.summary_csv());
    Ok(())
}

fn cmd_jnd(input: &Path, out: &Path) -> Result<()> {
    let map = jnd_map(&load_image(input)?)?;
    save_image(&map.to_image(), out)?;
    Ok(())
}

fn parse_dims(s: &str) -> Result<FlopDims> {
    let mut d = FlopDims {
        c: 256,
        h1: 32,
        w1: 32,
        h2: 32,
        w2: 32,
        c_r: 64,
        hidden: 128,
        output_dim: 8,
    };
    for kv in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let (k, v) = kv.split_once('=').with_context(|| format!("expected key=value, got {kv:?}"))?;
        let v: u64 = v.trim().parse().with_context(|| format!("{k}: not a number"))?;
        if v == 0 {
            bail!("{k} must be positive");
        }
        match k.trim() {
            "c" => d.c = v,
            "h1" => d.h1 = v,
            "w1" => d.w1 = v,
            "h2" => d.h2 = v,
            "w2" => d.w2 = v,
            "c_r" => d.c_r = v,
            "hidden" => d.hidden = v,
            "out" => d.output_dim = v,
            other => bail!("unknown dimension {other:?}"),
        }
    }
    Ok(d)
}

fn cmd_bench(variant: Variant, dims: &str, repeats: usize) -> Result<()> {
    let d = parse_dims(dims)?;
    let flops = flops_estimate(variant.into(), &d);
    println!(
        "variant={} c={} h1={} w1={} h2={} w2={} c_r={} hidden={} out={}",
        match variant {
            Variant::Cl => "cl",
            Variant::Ccl => "ccl",
            Variant::Fsc => "fsc",
        },
        d.c,
        d.h1,
        d.w1,
        d.h2,
        d.w2,
        d.c_r,
        d.hidden,
        d.output_dim
    );
    println!("flops={flops} ({:.3} GFLOPs)", flops as f64 / 1e9);
    let head_variant = match variant {
        Variant::Fsc => HeadVariant::Fsc,
        Variant::Cl => HeadVariant::Cl,
        Variant::Ccl => {
            println!("wall_ms=n/a (contextual correlation is modeled in the estimator only)");
            return Ok(());
        }
    };
    let u = |v: u64| v as usize;
    let spec = HeadSpec {
        variant: head_variant,
        h1: u(d.h1),
        w1: u(d.w1),
        h2: u(d.h2),
        w2: u(d.w2),
        c_r: u(d.c_r),
        hidden: u(d.hidden),
        output_dim: u(d.output_dim),
    };
    let mut params = Params::new();
    let head = FscHead::register(&mut params, 0, "bench", spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut random = |shape: &[usize]| NdArray::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let fr = random(&[u(d.c), u(d.h1), u(d.w1)]);
    let ft = random(&[u(d.c), u(d.h2), u(d.w2)]);
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let tape = Tape::new();
        let p = params.bind_constant(&tape);
        let (a, b) = (tape.constant(fr.clone()), tape.constant(ft.clone()));
        let t0 = Instant::now();
        match variant {
            Variant::Fsc => fsc_regress(&p, &a, &b, &head)?,
            _ => cl_regress(&p, &a, &b, &head)?,
        };
        best = best.min(t0.elapsed().as_secs_f64() * 1e3);
    }
    println!("wall_ms={best:.3} (best of {})", repeats.max(1));
    Ok(())
}

fn cmd_gradcheck(op: Option<&str>, seeds: u64) -> Result<bool> {
    let started = Instant::now();
    let mut ok = true;
    for r in run_checks(op, seeds)? {
        let pass = r.passed();
        ok &= pass;
        println!(
            "{} {:<16} worst_rel_err={:.3e} tol={:.0e} seeds={}",
            if pass { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.tolerance,
            r.seeds
        );
    }
    println!("{:.2}s", started.elapsed().as_secs_f64());
    Ok(ok)
}

fn source_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG/PPM/PGM images in {}", dir.display());
    }
    Ok(files)
}

fn cmd_gen(source: Option<&Path>, out: &Path, count: usize, difficulty: Difficulty, size: usize, channels: usize, seed: u64) -> Result<()> {
    if channels != 1 && channels != 3 {
        bail!("channels must be 1 or 3");
    }
    let opts = PairOptions::new(size, difficulty);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let files = source.map(source_images).transpose()?;
    let side = size + 2 * opts.margin();
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let src = match &files {
            Some(f) => read_rgb_or_gray(&f[i % f.len()], channels)?,
            None => procedural_texture(&mut rng, side, side, channels)?,
        };
        pairs.push(gen_pair(&mut rng, &src, &opts)?);
    }
    fs::create_dir_all(out)?;
    save_dataset(out, &pairs)?;
    println!("wrote {count} {difficulty} pairs to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref())?,
        Command::Align {
            ckpt,
            reference,
            tar,
            out_warped,
            out_fused,
            out_mask,
        } => cmd_align(&ckpt, &reference, &tar, &out_warped, &out_fused, out_mask.as_deref())?,
        Command::Eval {
            ckpt,
            data,
            report,
            fusion_dir,
        } => cmd_eval(&ckpt, &data, &report, fusion_dir.as_deref())?,
        Command::Jnd { input, out } => cmd_jnd(&input, &out)?,
        Command::Bench { variant, dims, repeats } => cmd_bench(variant, &dims, repeats)?,
        Command::Gradcheck { op, seeds } => {
            if !cmd_gradcheck(op.as_deref(), seeds)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Gen {
            source,
            out,
            count,
            difficulty,
            size,
            channels,
            seed,
        } => cmd_gen(source.as_deref(), &out, count, difficulty, size, channels, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
