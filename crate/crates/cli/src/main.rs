//! `childpredictor`: synthesize data, train the four steps, predict children,
//! evaluate, and render latent walks.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use childpredictor::data::synth::{synth_dataset, ChildCountLaw, SynthConfig};
use childpredictor::data::{self, Split, DEFAULT_RESOLUTION};
use childpredictor::eval::{self, EmbedderConfig, IdentityEmbedder, Metric, PAPER_GROUPS};
use childpredictor::train::{derive_rng, derive_seed, latent_walk, WalkFactor};
use childpredictor::{predict_children, run_all, run_step, Checkpoint, Error, ExternalMode, LossEntry, NetworkBundle, TrainConfig};

/// Name of the child attribute sidecar looked up next to the father image.
const SIDECAR: &str = "child_attrs.json";

#[derive(Parser, Debug)]
#[command(name = "childpredictor", version, about = "Parent-to-child face prediction with disentangled factors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Toy,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic family dataset (PNG images plus manifest JSON).
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        families: u64,
        #[arg(long, default_value = "uniform:1-4")]
        children_law: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
        /// Children without parents, used by the child-domain steps.
        #[arg(long, default_value_t = 0)]
        unpaired: usize,
        /// Also write a disjoint validation split to `val.json`.
        #[arg(long, default_value_t = 0)]
        val_families: usize,
    },
    /// Run one training step, or all four in order.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset used when no config file is given.
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        /// 1, 2, 3, 4 or all.
        #[arg(long)]
        step: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate child faces for one couple.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        father: PathBuf,
        #[arg(long)]
        mother: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// gt (attributes from the sidecar) or random.
        #[arg(long, default_value = "random")]
        external: String,
        /// Child attribute sidecar; defaults to `child_attrs.json` next to the father image.
        #[arg(long)]
        attrs: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions on a validation manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = PAPER_GROUPS)]
        groups: usize,
        #[arg(long, default_value = "cos,fid,lpips")]
        metrics: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vary one child-domain factor and tile the frames into a grid.
    LatentWalk {
        #[arg(long)]
        ckpt: PathBuf,
        /// genetic, external or variety.
        #[arg(long)]
        factor: String,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Dependency(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> childpredictor::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Argument(format!("cannot create {}: {e}", dir.display())))
}

fn synth(
    families: usize,
    law: &str,
    seed: u64,
    out: &Path,
    resolution: usize,
    unpaired: usize,
    val_families: usize,
) -> childpredictor::Result<()> {
    let law = ChildCountLaw::parse(law)?;
    create_dir(out)?;
    let cfg = SynthConfig {
        resolution,
        unpaired_children: unpaired,
        ..SynthConfig::default()
    };
    let train = synth_dataset(&cfg, families, seed, law)?;
    data::write_manifest(&train, &out.join("manifest.json"))?;
    if val_families > 0 {
        let val_cfg = SynthConfig {
            split: Split::Val,
            unpaired_children: 0,
            ..cfg
        };
        let val = synth_dataset(&val_cfg, val_families, derive_seed(seed, "val"), law)?;
        data::check_disjoint(&train, &val)?;
        data::write_manifest(&val, &out.join("val.json"))?;
    }
    println!("wrote {families} families to {}", out.display());
    Ok(())
}

fn load_config(config: Option<&Path>, preset: Preset) -> childpredictor::Result<TrainConfig> {
    match (config, preset) {
        (Some(p), _) => TrainConfig::load(p),
        (None, Preset::Toy) => Ok(TrainConfig::toy()),
        (None, Preset::Paper) => Ok(TrainConfig::paper()),
    }
}

struct LossLog {
    file: std::io::BufWriter<fs::File>,
    error: Option<std::io::Error>,
}

impl LossLog {
    fn create(path: &Path) -> childpredictor::Result<Self> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(file, "step,epoch,iter,loss,value")?;
        Ok(Self { file, error: None })
    }

    fn record(&mut self, e: &LossEntry) {
        if self.error.is_none() {
            if let Err(err) = writeln!(self.file, "{},{},{},{},{}", e.step, e.epoch, e.iter, e.name, e.value) {
                self.error = Some(err);
            }
        }
    }

    fn finish(mut self) -> childpredictor::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.file.flush()?;
        Ok(())
    }
}

fn write_checkpoint(ckpt: &Checkpoint, out: &Path) -> childpredictor::Result<PathBuf> {
    let path = out.join(format!("step{}.ckpt", ckpt.step));
    ckpt.save(&path)?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn train(
    config: Option<&Path>,
    preset: Preset,
    step: &str,
    manifest: &Path,
    resume: Option<&Path>,
    out: &Path,
) -> childpredictor::Result<()> {
    let cfg = load_config(config, preset)?;
    let steps: Option<u8> = match step {
        "all" => None,
        s => match s.parse::<u8>() {
            Ok(n @ 1..=4) => Some(n),
            _ => return Err(Error::Argument(format!("--step must be 1, 2, 3, 4 or all, got '{s}'"))),
        },
    };
    if steps.is_none() && resume.is_some() {
        return Err(Error::Argument("--resume applies to a single step".into()));
    }
    let resume = resume.map(Checkpoint::load).transpose()?;
    let manifest = data::load_manifest(manifest, cfg.arch.resolution)?;
    create_dir(out)?;
    let mut log = LossLog::create(&out.join("losses.csv"))?;
    let result = match steps {
        Some(n) => run_step(n, &cfg, &manifest, resume.as_ref(), &mut |e| log.record(e))
            .and_then(|c| write_checkpoint(&c, out).map(|_| ())),
        None => run_all(&cfg, &manifest, &mut |e| log.record(e), &mut |c| write_checkpoint(c, out).map(|_| ())).map(|_| ()),
    };
    log.finish()?;
    if let Err(Error::Divergence {
        last_good: Some(ref good), ..
    }) = result
    {
        let path = out.join(format!("step{}-last-good.ckpt", good.step));
        good.save(&path)?;
        eprintln!("last good checkpoint: {}", path.display());
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn predict(
    ckpt: &Path,
    father: &Path,
    mother: &Path,
    n: usize,
    external: &str,
    attrs: Option<&Path>,
    seed: u64,
    out: &Path,
) -> childpredictor::Result<()> {
    let mode: ExternalMode = external.parse()?;
    let sidecar = attrs
        .map(Path::to_path_buf)
        .unwrap_or_else(|| father.parent().unwrap_or(Path::new(".")).join(SIDECAR));
    let child_attrs = match mode {
        ExternalMode::GroundTruth => {
            if !sidecar.exists() {
                return Err(Error::Argument(format!(
                    "--external gt needs the attribute sidecar {}",
                    sidecar.display()
                )));
            }
            Some(data::load_child_attrs(&sidecar)?)
        }
        ExternalMode::Random => None,
    };
    let bundle = NetworkBundle::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let r = bundle.arch().resolution;
    let father = data::load_png(father, r)?;
    let mother = data::load_png(mother, r)?;
    let mut rng = derive_rng(seed, "predict", 0);
    let faces = predict_children(&bundle, &father, &mother, n, mode, child_attrs.as_ref(), &mut rng)?;
    create_dir(out)?;
    for (i, f) in faces.iter().enumerate() {
        data::save_png(f, &out.join(format!("child_{i:03}.png")))?;
    }
    data::save_grid(&faces, data::grid_columns(faces.len()), &out.join("grid.png"))?;
    println!("wrote {n} children and grid.png to {}", out.display());
    Ok(())
}

fn evaluate(ckpt: &Path, manifest: &Path, groups: usize, metrics: &str, seed: u64, out: &Path) -> childpredictor::Result<()> {
    let metrics = Metric::parse_list(metrics)?;
    let bundle = NetworkBundle::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let manifest = data::load_manifest(manifest, bundle.arch().resolution)?;
    if manifest.split != Split::Val {
        return Err(Error::Argument("evaluation needs a validation-split manifest".into()));
    }
    let extractor = IdentityEmbedder::cached(&EmbedderConfig::default())?;
    let report = eval::evaluate(&bundle, &manifest, &extractor, groups, &metrics, seed)?;
    fs::write(out, report.to_json())?;
    print!("{}", report.table());
    Ok(())
}

fn walk(ckpt: &Path, factor: &str, steps: usize, seed: u64, out: &Path) -> childpredictor::Result<()> {
    let factor: WalkFactor = factor.parse()?;
    if steps < 2 {
        return Err(Error::Argument("--steps must be at least 2".into()));
    }
    let bundle = NetworkBundle::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let mut rng = derive_rng(seed, "latent-walk", 0);
    let frames = latent_walk(&bundle, factor, steps, &mut rng)?;
    data::save_grid(&frames, frames.len(), out)?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> childpredictor::Result<()> {
    match cli.command {
        Command::Synth {
            families,
            children_law,
            seed,
            out,
            resolution,
            unpaired,
            val_families,
        } => synth(families as usize, &children_law, seed, &out, resolution, unpaired, val_families),
        Command::Train {
            config,
            preset,
            step,
            manifest,
            resume,
            out,
        } => train(config.as_deref(), preset, &step, &manifest, resume.as_deref(), &out),
        Command::Predict {
            ckpt,
            father,
            mother,
            n,
            external,
            attrs,
            seed,
            out,
        } => predict(&ckpt, &father, &mother, n, &external, attrs.as_deref(), seed, &out),
        Command::Eval {
            ckpt,
            manifest,
            groups,
            metrics,
            seed,
            out,
        } => evaluate(&ckpt, &manifest, groups, &metrics, seed, &out),
        Command::LatentWalk {
            ckpt,
            factor,
            steps,
            seed,
            out,
        } => walk(&ckpt, &factor, steps, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
