use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sert_core::degradation::{HsiImage, Recipe};
use sert_core::io::{load_hsi, save_hsi, Checkpoint, Dtype, HsiMeta};
use sert_core::metrics::{render_table, MetricReport};
use sert_core::model::{flops_estimate, param_count, ModelConfig};
use sert_core::numerics::Tensor;
use sert_core::train::{gradcheck_model, group_errors, synth_texture, Dataset, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "sert", version, about = "Hyperspectral denoising with rectangle attention and spectral enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt a clean cube with a noise recipe.
    Synth {
        /// An .hsr file or `texture:HxWxB[:INDEX]`.
        #[arg(long)]
        clean: String,
        /// A recipe file or inline `variant,key=value,...`.
        #[arg(long)]
        noise: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the clean cube here.
        #[arg(long)]
        clean_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
    },
    /// Train a model on clean cubes with synthetic noise.
    Train {
        /// Model configuration file (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of clean .hsr files, or `texture:COUNTxHxWxB`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        epochs: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Square crop size; whole images when omitted.
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long, default_value = "gaussian_iid,sigma=50")]
        noise: String,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the loss every N steps.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Run a trained model on a noisy cube.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare estimates against references.
    Eval {
        #[arg(long = "ref", required = true)]
        reference: Vec<PathBuf>,
        #[arg(long = "test", required = true)]
        test: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Finite-difference check of a whole network.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "8x8")]
        hw: String,
        /// Perturb at most this many entries per tensor.
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Parameter and multiply-accumulate breakdown.
    Stats {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "512x512")]
        hw: String,
    },
    /// Write every SE block's per-patch low-rank vectors as a TSV table.
    DumpZl {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Table,
    Kv,
}

fn parse_dims<const N: usize>(s: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("cannot parse `{s}` as dimensions"))?;
    match parts.try_into() {
        Ok(a) => Ok(a),
        Err(_) => bail!("expected {N} dimensions separated by `x`, got `{s}`"),
    }
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ModelConfig::from_kv(&text).with_context(|| format!("in {}", p.display()))?)
        }
    }
}

fn load_recipe(spec: &str, seed: u64) -> Result<Recipe> {
    let text = if Path::new(spec).is_file() {
        fs::read_to_string(spec)?
    } else {
        let mut parts = spec.split(',');
        let variant = parts.next().unwrap_or_default().trim();
        let mut text = format!("version = 1\nvariant = {variant}\n");
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("expected key=value in noise spec, got `{kv}`"))?;
            text.push_str(&format!("{} = {}\n", k.trim(), v.trim().replace(';', ",")));
        }
        text
    };
    let mut recipe = Recipe::from_text(&text).context("invalid noise recipe")?;
    recipe.seed = seed;
    Ok(recipe)
}

fn clean_source(spec: &str, seed: u64) -> Result<(HsiImage, String)> {
    if let Some(rest) = spec.strip_prefix("texture:") {
        let (dims, index) = match rest.split_once(':') {
            Some((d, i)) => (d, i.parse().context("texture index")?),
            None => (rest, 0),
        };
        let [h, w, b] = parse_dims(dims)?;
        Ok((HsiImage::new(synth_texture(h, w, b, seed, index))?, spec.to_string()))
    } else {
        Ok((load_hsi(spec).with_context(|| format!("loading {spec}"))?.image, spec.to_string()))
    }
}

fn load_dataset(spec: &str, seed: u64) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("texture:") {
        let [count, h, w, b] = parse_dims(rest)?;
        return Ok(Dataset::synthetic(count, h, w, b, seed));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(spec)
        .with_context(|| format!("reading directory {spec}"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "hsr"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .hsr files in {spec}");
    }
    let images = paths
        .iter()
        .map(|p| Ok(load_hsi(p).with_context(|| format!("loading {}", p.display()))?.image.data))
        .collect::<Result<Vec<Tensor>>>()?;
    Ok(Dataset::new(images)?)
}

fn synth(clean: &str, noise: &str, seed: u64, out: &Path, clean_out: Option<&Path>, dtype: Dtype) -> Result<()> {
    let (image, source) = clean_source(clean, seed)?;
    let recipe = load_recipe(noise, seed)?;
    let (noisy, _) = recipe.apply(&image.data)?;
    let mut noisy_img = HsiImage::new(noisy)?;
    noisy_img.wavelengths = image.wavelengths.clone();
    let meta = HsiMeta {
        seed: Some(seed),
        recipe: Some(recipe),
        source: Some(source.clone()),
    };
    save_hsi(out, &noisy_img, dtype, &meta)?;
    if let Some(p) = clean_out {
        let meta = HsiMeta {
            seed: Some(seed),
            recipe: None,
            source: Some(source),
        };
        save_hsi(p, &image, dtype, &meta)?;
    }
    println!("wrote {} ({}x{}x{})", out.display(), image.height(), image.width(), image.bands());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    data: &str,
    epochs: u64,
    seed: u64,
    ckpt: &Path,
    batch: usize,
    lr: f64,
    patch: Option<usize>,
    noise: &str,
    resume: Option<&Path>,
    log_every: u64,
) -> Result<()> {
    let cfg = load_config(config)?;
    let data = load_dataset(data, seed)?;
    if data.bands() != cfg.bands {
        bail!("the data has {} bands but the model expects {}", data.bands(), cfg.bands);
    }
    let (steps, lr_drop_step) = TrainConfig::epochs(epochs, data.len(), batch);
    let tc = TrainConfig {
        steps,
        batch,
        lr,
        lr_drop_step,
        noise: load_recipe(noise, seed)?.spec,
        patch: patch.map(|p| (p, p)),
        seed,
    };
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.config != cfg {
                return Err(sert_core::Error::ConfigConflict(format!(
                    "{} was written for a different model configuration",
                    p.display()
                ))
                .into());
            }
            Trainer::resume(&ck, tc)?
        }
        None => Trainer::new(sert_core::model::SertModel::init(&cfg, seed)?, seed, tc),
    };
    println!("training {steps} steps ({epochs} epochs, {} images)", data.len());
    let every = log_every.max(1);
    trainer.run(&data, |step, loss| {
        if step % every == 0 || step == steps {
            println!("step {step} loss {loss:.6}");
        }
    })?;
    trainer.checkpoint().save(ckpt)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn denoise(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = Checkpoint::load(ckpt)?.to_model()?;
    let file = load_hsi(input).with_context(|| format!("loading {}", input.display()))?;
    let mut image = HsiImage::new(model.denoise(&file.image.data)?)?;
    image.wavelengths = file.image.wavelengths;
    let meta = HsiMeta {
        seed: file.meta.seed,
        recipe: file.meta.recipe,
        source: Some(format!("denoised:{}", ckpt.display())),
    };
    save_hsi(out, &image, file.dtype, &meta)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(reference: &[PathBuf], test: &[PathBuf], format: Format) -> Result<()> {
    if reference.len() != test.len() {
        bail!("{} references but {} test images", reference.len(), test.len());
    }
    let mut reports = Vec::new();
    for (r, t) in reference.iter().zip(test) {
        let x = load_hsi(r).with_context(|| format!("loading {}", r.display()))?;
        let y = load_hsi(t).with_context(|| format!("loading {}", t.display()))?;
        let label = t.file_name().map_or_else(|| t.display().to_string(), |n| n.to_string_lossy().into_owned());
        reports.push(MetricReport::compute(label, &y.image.data, &x.image.data)?);
    }
    if reports.len() > 1 {
        reports.extend(MetricReport::average(&reports));
    }
    match format {
        Format::Table => print!("{}", render_table(&reports)),
        Format::Kv => {
            for (i, r) in reports.iter().enumerate() {
                if i > 0 {
                    println!();
                }
                print!("{}", r.to_kv());
            }
        }
    }
    Ok(())
}

fn gradcheck(config: Option<&Path>, seed: u64, hw: &str, max_entries: Option<usize>, tol: f64) -> Result<()> {
    let cfg = match config {
        Some(_) => load_config(config)?,
        None => ModelConfig::toy(4, 8, 2, &[(4, 2)], 2),
    };
    let [h, w] = parse_dims(hw)?;
    let report = gradcheck_model(&cfg, seed, h, w, max_entries)?;
    let groups = group_errors(&report);
    let width = groups.iter().map(|(g, _)| g.len()).max().unwrap_or(0);
    let mut worst: f64 = 0.0;
    for (g, e) in &groups {
        println!("{g:<width$}  {e:.3e}");
        worst = worst.max(*e);
    }
    println!("max relative error {worst:.3e} (tolerance {tol:e})");
    if worst >= tol {
        bail!("gradient check failed");
    }
    Ok(())
}

fn stats(config: Option<&Path>, hw: &str) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let [h, w] = parse_dims(hw)?;
    let params = param_count(&cfg);
    let macs = flops_estimate(&cfg, h, w);
    println!("parameters");
    println!("{params}");
    println!("assumed components {}", params.assumed_total());
    println!();
    println!("multiply-accumulates at {h}x{w}x{}", cfg.bands);
    println!("{macs}");
    println!(
        "GFLOPs (2 x MACs) {:.3}, assumed components {:.3}",
        2.0 * macs.total() as f64 / 1e9,
        2.0 * macs.assumed_total() as f64 / 1e9
    );
    Ok(())
}

fn dump_zl(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = Checkpoint::load(ckpt)?.to_model()?;
    let file = load_hsi(input).with_context(|| format!("loading {}", input.display()))?;
    let (_, traces) = model.denoise_traced(&file.image.data)?;
    let rank = model.config().rank;
    let mut s = String::from("layer\tblock\tpatch\tgrid_row\tgrid_col");
    for k in 0..rank {
        s.push_str(&format!("\tz{k}"));
    }
    s.push('\n');
    for t in &traces {
        for (p, row) in t.low_rank.data().chunks(rank).enumerate() {
            s.push_str(&format!("{}\t{}\t{p}\t{}\t{}", t.layer, t.block, p / t.grid_w, p % t.grid_w));
            for v in row {
                s.push_str(&format!("\t{v:e}"));
            }
            s.push('\n');
        }
    }
    let mut f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    f.write_all(s.as_bytes())?;
    println!("wrote {} rows to {}", s.lines().count() - 1, out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            clean,
            noise,
            seed,
            out,
            clean_out,
            dtype,
        } => {
            let dtype = match dtype {
                DtypeArg::F32 => Dtype::F32,
                DtypeArg::F64 => Dtype::F64,
            };
            synth(&clean, &noise, seed, &out, clean_out.as_deref(), dtype)
        }
        Command::Train {
            config,
            data,
            epochs,
            seed,
            ckpt,
            batch,
            lr,
            patch,
            noise,
            resume,
            log_every,
        } => train(
            config.as_deref(),
            &data,
            epochs,
            seed,
            &ckpt,
            batch,
            lr,
            patch,
            &noise,
            resume.as_deref(),
            log_every,
        ),
        Command::Denoise { ckpt, input, out } => denoise(&ckpt, &input, &out),
        Command::Eval {
            reference,
            test,
            format,
        } => eval(&reference, &test, format),
        Command::Gradcheck {
            config,
            seed,
            hw,
            max_entries,
            tol,
        } => gradcheck(config.as_deref(), seed, &hw, max_entries, tol),
        Command::Stats { config, hw } => stats(config.as_deref(), &hw),
        Command::DumpZl { ckpt, input, out } => dump_zl(&ckpt, &input, &out),
    }
}
