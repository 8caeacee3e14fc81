//! The `sdic` command-line binary: deterministic data generation, two-stage
//! training, inversion, editing, direction discovery, evaluation, ablations,
//! gradient checking, and contact-sheet rendering. All state flows through
//! flags and config files; exit codes are 0 (success), 1 (usage error),
//! 2 (bad input or file), 3 (check/assertion failure).

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use sdic::checkpoint;
use sdic::config::{Precision, RunConfig, Variant};
use sdic::dataset::{sample_seed, SampleSet};
use sdic::dicn::{edit as edit_image, invert, SdicModels};
use sdic::editing::{pca_directions, EditDirection};
use sdic::evalsuite::{
    ablation_suite, evaluate, factor_hyperplane, heldout_code_corpus,
};
use sdic::imageio::quantize;
use sdic::losses::FeatureNet;
use sdic::ntf::{self, NtfScalar};
use sdic::toygen::{sample_synthetic, Generator};
use sdic::trainer::{
    grad_check_with, pretrain_encoder, train_pipeline, Corruption, GRAD_STEP_32, GRAD_STEP_64,
    GRAD_TOL_32, GRAD_TOL_64,
};
use sdic::{Error, Image, Result};
use std::path::{Path, PathBuf};
use tapegrad::Scalar;

#[derive(Parser)]
#[command(
    name = "sdic",
    version,
    about = "Desk-scale GAN inversion with discrepancy compensation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoAtt,
    NoSc,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoAtt => Variant::NoAtt,
            VariantArg::NoSc => Variant::NoSc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Pca,
    Hyperplane,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bits {
    #[value(name = "32")]
    B32,
    #[value(name = "64")]
    B64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a deterministic synthetic dataset as PNG files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Stage 1: train the inversion encoder against the frozen generator.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Both stages: pretrain, then train the prediction + compensation
    /// networks; saves a full checkpoint and the loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<VariantArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert one PNG through a trained checkpoint.
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the predicted discrepancy map as an NTF tensor.
        #[arg(long)]
        dump_discrepancy: Option<PathBuf>,
    },
    /// Apply an edit direction with strength alpha to one PNG.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discover an edit direction from the held-out code corpus.
    Directions {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        method: Method,
        /// Principal component index (pca method only).
        #[arg(long, default_value_t = 0)]
        component: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split (baseline + refined rows).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train/evaluate the three variants and three injection layers and
    /// check both orderings. Exit 3 if an ordering is violated.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory of reusable trained checkpoints.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Compare analytic joint-loss gradients against central differences.
    GradCheck {
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_enum, default_value = "64")]
        bits: Bits,
    },
    /// Render a contact sheet (original / initial / refined columns).
    Plot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(match e {
                Error::CheckFailed(_) => 3,
                _ => 2,
            });
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse_ini(&std::fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.model.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::GenData {
            config,
            out,
            count,
            seed,
        } => {
            let cfg = load_config(&config)?;
            with_precision!(cfg, gen_data(&cfg, &out, count, seed))
        }
        Cmd::Pretrain { config, out } => {
            let cfg = load_config(&config)?;
            with_precision!(cfg, pretrain_cmd(&cfg, &out))
        }
        Cmd::Train {
            config,
            variant,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = variant {
                cfg.train.variant = v.into();
            }
            with_precision!(cfg, train_cmd(&cfg, &out))
        }
        Cmd::Invert {
            ckpt,
            image,
            out,
            dump_discrepancy,
        } => {
            let (cfg, _) = checkpoint::load_meta(&ckpt)?;
            with_precision!(cfg, invert_cmd(&ckpt, &image, &out, dump_discrepancy.as_deref()))
        }
        Cmd::Edit {
            ckpt,
            image,
            direction,
            alpha,
            out,
        } => {
            let (cfg, _) = checkpoint::load_meta(&ckpt)?;
            with_precision!(cfg, edit_cmd(&ckpt, &image, &direction, alpha, &out))
        }
        Cmd::Directions {
            ckpt,
            method,
            component,
            out,
        } => {
            let (cfg, _) = checkpoint::load_meta(&ckpt)?;
            with_precision!(cfg, directions_cmd(&ckpt, method, component, &out))
        }
        Cmd::Eval { ckpt, out } => {
            let (cfg, _) = checkpoint::load_meta(&ckpt)?;
            with_precision!(cfg, eval_cmd(&ckpt, &out))
        }
        Cmd::Ablate { config, out, cache } => {
            let cfg = load_config(&config)?;
            with_precision!(cfg, ablate_cmd(&cfg, &out, cache.as_deref()))
        }
        Cmd::GradCheck { tol, bits } => match bits {
            Bits::B64 => {
                let tol = tol.unwrap_or(GRAD_TOL_64);
                let report = grad_check_with::<f64>(tol, GRAD_STEP_64, Corruption::None)?;
                print!("{}", report.render());
                Ok(if report.pass { 0 } else { 3 })
            }
            Bits::B32 => {
                let tol = tol.unwrap_or(GRAD_TOL_32);
                let report = grad_check_with::<f32>(tol, GRAD_STEP_32, Corruption::None)?;
                print!("{}", report.render());
                Ok(if report.pass { 0 } else { 3 })
            }
        },
        Cmd::Plot { ckpt, count, out } => {
            let (cfg, _) = checkpoint::load_meta(&ckpt)?;
            with_precision!(cfg, plot_cmd(&ckpt, count, &out))
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

fn save_full<S: NtfScalar>(dir: &Path, cfg: &RunConfig, step: usize, m: &SdicModels<S>) -> Result<()> {
    checkpoint::save_params::<S>(dir, cfg, step, |f| {
        m.generator.visit(f);
        m.encoder.visit(f);
        m.dipn.visit(f);
        m.dicn.visit(f);
    })
}

fn load_full<S: NtfScalar>(dir: &Path) -> Result<(RunConfig, SdicModels<S>)> {
    let (cfg, _) = checkpoint::load_meta(dir)?;
    let mut models: SdicModels<S> = SdicModels::new(&cfg.model, cfg.train.variant);
    checkpoint::load_params::<S>(dir, |f| {
        models.generator.visit_mut(f);
        models.encoder.visit_mut(f);
        models.dipn.visit_mut(f);
        models.dicn.visit_mut(f);
    })?;
    Ok((cfg, models))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn gen_data<S: Scalar>(cfg: &RunConfig, out: &Path, count: usize, seed: u64) -> Result<i32> {
    std::fs::create_dir_all(out)?;
    let gen: Generator<S> = Generator::new(&cfg.model, cfg.model.seed);
    for i in 0..count {
        let (img, _) = sample_synthetic(&gen, sample_seed(seed, 1, i as u64), true)?;
        img.save_png(&out.join(format!("img_{i:04}.png")))?;
    }
    println!("wrote {count} images to {}", out.display());
    Ok(0)
}

fn pretrain_cmd<S: NtfScalar>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let gen: Generator<S> = Generator::new(&cfg.model, cfg.model.seed);
    let mut enc = sdic::toygen::Encoder::new(&cfg.model, cfg.model.seed.wrapping_add(1));
    let curve = pretrain_encoder(cfg, &gen, &mut enc)?;
    checkpoint::save_params::<S>(out, cfg, cfg.train.pretrain_steps, |f| {
        gen.visit(f);
        enc.visit(f);
    })?;
    let mut csv = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(out.join("pretrain_curve.csv"), csv)?;
    println!(
        "pretrained encoder: loss {} -> {} over {} steps",
        curve.first().unwrap_or(&f64::NAN),
        curve.last().unwrap_or(&f64::NAN),
        curve.len()
    );
    Ok(0)
}

fn train_cmd<S: NtfScalar>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let (models, _, curve, log) = train_pipeline::<S>(cfg, cfg.train.variant)?;
    save_full(out, cfg, cfg.train.steps, &models)?;
    let mut csv = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(out.join("pretrain_curve.csv"), csv)?;
    std::fs::write(out.join("train_log.csv"), log.to_csv())?;
    if let Some((step, b)) = log.rows.last() {
        println!("trained {} steps; joint loss {} at step {step}", cfg.train.steps, b.joint);
    }
    Ok(0)
}

fn invert_cmd<S: NtfScalar>(
    ckpt: &Path,
    image: &Path,
    out: &Path,
    dump: Option<&Path>,
) -> Result<i32> {
    let (_, models) = load_full::<S>(ckpt)?;
    let img: Image<S> = Image::load_png(image)?;
    let (r_f, art) = invert(&models, &img)?;
    r_f.save_png(out)?;
    if let Some(path) = dump {
        ntf::write(path, &art.d)?;
    }
    Ok(0)
}

/// Direction sidecar: one `label=...` line and one `rows=all|i,j,...` line.
fn write_sidecar(path: &Path, label: &str, mask: &Option<Vec<usize>>) -> Result<()> {
    let rows = match mask {
        None => "all".to_string(),
        Some(m) => m
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(","),
    };
    std::fs::write(path, format!("label={label}\nrows={rows}\n"))?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<(String, Option<Vec<usize>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut label = String::new();
    let mut mask = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("label=") {
            label = v.to_string();
        } else if let Some(v) = line.strip_prefix("rows=") {
            if v != "all" {
                let rows: std::result::Result<Vec<usize>, _> =
                    v.split(',').map(|r| r.trim().parse()).collect();
                mask = Some(rows.map_err(|_| Error::Format(format!("bad rows list '{v}'")))?);
            }
        }
    }
    Ok((label, mask))
}

fn sidecar_path(direction: &Path) -> PathBuf {
    direction.with_extension("txt")
}

fn load_direction<S: Scalar>(path: &Path) -> Result<EditDirection<S>> {
    let tensor = ntf::read(path)?;
    let vector = tensor.to_f64().mapv(|v| S::lit(v));
    let (label, mask) = if sidecar_path(path).exists() {
        read_sidecar(&sidecar_path(path))?
    } else {
        ("unnamed".to_string(), None)
    };
    EditDirection::from_vector(vector, mask, &label)
}

fn edit_cmd<S: NtfScalar>(
    ckpt: &Path,
    image: &Path,
    direction: &Path,
    alpha: f64,
    out: &Path,
) -> Result<i32> {
    let (_, models) = load_full::<S>(ckpt)?;
    let img: Image<S> = Image::load_png(image)?;
    let dir = load_direction::<S>(direction)?;
    let edited = edit_image(&models, &img, &dir, alpha)?;
    edited.save_png(out)?;
    Ok(0)
}

fn directions_cmd<S: NtfScalar>(
    ckpt: &Path,
    method: Method,
    component: usize,
    out: &Path,
) -> Result<i32> {
    let (cfg, models) = load_full::<S>(ckpt)?;
    let dir = match method {
        Method::Hyperplane => factor_hyperplane(&models, &cfg.data)?,
        Method::Pca => {
            let (corpus, _) = heldout_code_corpus(&models, &cfg.data)?;
            let mut dirs = pca_directions(&corpus, component + 1)?;
            let (dir, ratio) = dirs.swap_remove(component);
            println!("component {component}: explained variance ratio {ratio:.4}");
            dir
        }
    };
    ntf::write(out, &dir.vector)?;
    write_sidecar(&sidecar_path(out), &dir.label, &dir.row_mask)?;
    println!("wrote direction '{}' to {}", dir.label, out.display());
    Ok(0)
}

fn eval_cmd<S: NtfScalar>(ckpt: &Path, out: &Path) -> Result<i32> {
    let (cfg, models) = load_full::<S>(ckpt)?;
    let feat: FeatureNet<S> = FeatureNet::new(cfg.loss.feature_seed);
    let report = evaluate(&models, &feat, &cfg.data)?;
    std::fs::write(out, report.to_csv())?;
    println!(
        "baseline l2 {:.6}  refined l2 {:.6}  (psnr {:.2} -> {:.2} dB)",
        report.baseline.l2, report.sdic.l2, report.baseline.psnr_db, report.sdic.psnr_db
    );
    Ok(0)
}

fn ablate_cmd<S: NtfScalar>(cfg: &RunConfig, out: &Path, cache: Option<&Path>) -> Result<i32> {
    let outcome = ablation_suite::<S>(cfg, cache)?;
    std::fs::write(out, outcome.to_csv())?;
    println!("{}", outcome.to_csv().trim_end());
    if !outcome.variant_ordering_ok {
        eprintln!("variant ordering violated (want full <= no-att <= no-sc on l2)");
    }
    if !outcome.layer_ordering_ok {
        eprintln!("layer ordering violated (want l2 non-increasing over layers 1..3)");
    }
    Ok(if outcome.ok() { 0 } else { 3 })
}

fn plot_cmd<S: NtfScalar>(ckpt: &Path, count: usize, out: &Path) -> Result<i32> {
    let (cfg, models) = load_full::<S>(ckpt)?;
    let set = SampleSet::held_out(&cfg.data);
    let n = count.min(set.len());
    if n == 0 {
        return Err(Error::Degenerate("no images to plot".into()));
    }
    let h = cfg.model.image_size;
    let mut sheet = image::RgbImage::new((3 * h) as u32, (n * h) as u32);
    for i in 0..n {
        let (img, _) = set.materialize(&models.generator, i)?;
        let w = models.encoder.encode_arrays(&img)?;
        let (r_o, _) = models.generator.synthesize_arrays(&w, None)?;
        let (r_f, _) = invert(&models, &img)?;
        for (col, pane) in [&img, &r_o, &r_f].into_iter().enumerate() {
            for y in 0..h {
                for x in 0..h {
                    let px = image::Rgb([
                        quantize(pane.0[[0, y, x]].to_f64_lossy()),
                        quantize(pane.0[[1, y, x]].to_f64_lossy()),
                        quantize(pane.0[[2, y, x]].to_f64_lossy()),
                    ]);
                    sheet.put_pixel((col * h + x) as u32, (i * h + y) as u32, px);
                }
            }
        }
    }
    sheet
        .save(out)
        .map_err(|e| Error::Format(format!("png write failed: {e}")))?;
    println!("wrote {n}x3 contact sheet to {}", out.display());
    Ok(0)
}
