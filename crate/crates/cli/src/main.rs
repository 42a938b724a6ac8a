//! `lsf`: corpus synthesis, training, generation and evaluation.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O or
//! integrity error, 4 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lsf_core::ablation::run_ablation;
use lsf_core::config::RunConfig;
use lsf_core::corpus::{Corpus, CorpusSynth};
use lsf_core::features::load_shape;
use lsf_core::flame::{synth_model, BlendshapeModel, RegionMasks};
use lsf_core::metrics::{aggregate, heatmap_csv, heatmap_stats, Evaluator};
use lsf_core::motion::MotionSequence;
use lsf_core::numerics::checkpoint;
use lsf_core::pipeline::{load_pipeline, load_stage1, train_stage2, SamplerConfig, SieInput};
use lsf_core::train::TrainLog;
use lsf_core::vqvae::{train_stage1, VqVae};
use lsf_core::{Error, Result};

const CHECKPOINT: &str = "checkpoint.lsfc";
const TRAIN_LOG: &str = "train_log.json";
const BLENDSHAPE: &str = "blendshape.lsfb";

#[derive(Parser)]
#[command(name = "lsf", version, about = "Label-free speech-driven facial animation")]
struct Cli {
    /// Print the default JSON configuration and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, its blendshape model and region masks.
    SynthCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the motion VQ-VAE (stage 1).
    TrainVqvae {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the feature encoder against a frozen stage-1 checkpoint (stage 2).
    TrainEncoder {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vqvae: Option<PathBuf>,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate motion samples for one corpus item.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Stage-2 checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        item: String,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        temp: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted samples against the corpus ground truth.
    Eval {
        /// Directory of `<item>.sNN.lsfm` files.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        blendshape: PathBuf,
        /// Directory holding lip.json and upper_face.json; defaults to the
        /// blendshape file's directory.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Per-vertex adjacent-frame displacement statistics as CSV.
    Heatmap {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        blendshape: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every configured variant for every seed.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Shared stage-1 checkpoint; trained from the config when absent.
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        blendshape: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::State(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Integrity(_) | Error::Shape(_) | Error::Json(_) => 3,
        Error::NonFinite(_) => 4,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given by flag or config paths")))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        Error::Shape(m) => Error::Shape(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn write_training(out: &Path, tensors: &BTreeMap<String, lsf_core::Tensor32>, log: &TrainLog) -> Result<()> {
    std::fs::create_dir_all(out)?;
    checkpoint::save(&out.join(CHECKPOINT), tensors)?;
    std::fs::write(out.join(TRAIN_LOG), log.to_json()?)?;
    let best = log.best();
    eprintln!(
        "{}: best epoch {} of {}, val loss {:.6e}",
        log.stage,
        log.best_epoch,
        log.epochs.len() - 1,
        best.val_loss
    );
    Ok(())
}

fn sample_name(key: &str, k: usize) -> String {
    format!("{key}.s{k:02}.lsfm")
}

fn run(cli: Cli) -> Result<()> {
    if cli.dump_defaults {
        println!("{}", RunConfig::default().to_json()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no command given; see --help".into()));
    };
    match command {
        Command::SynthCorpus { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = CorpusSynth::new(cfg.corpus.clone())?.build()?;
            corpus.write(&out)?;
            let (model, masks) = synth_model(cfg.blendshape.seed, cfg.blendshape.vertices)?;
            model.save(&out.join(BLENDSHAPE))?;
            masks.save(&out)?;
            eprintln!("wrote {} items for {} subjects", corpus.items.len(), corpus.subjects.len());
        }
        Command::TrainVqvae { config, corpus, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = pick(corpus, &cfg.paths.corpus, "corpus")?;
            let corpus = Corpus::read(&dir)?;
            let (_, ps, log) = train_stage1(&corpus, &cfg.vqvae, &cfg.stage1)?;
            write_training(&out, &VqVae::tensors(&ps), &log)?;
        }
        Command::TrainEncoder {
            config,
            corpus,
            vqvae,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dir = pick(corpus, &cfg.paths.corpus, "corpus")?;
            let ckpt = pick(vqvae, &cfg.paths.vqvae, "stage-1 checkpoint")?;
            let corpus = Corpus::read(&dir)?;
            let (vq, ps) = with_path(&ckpt, load_stage1(&cfg.vqvae, &ckpt))?;
            let (pipeline, log) = train_stage2(&corpus, vq, ps, &cfg.encoder, &cfg.stage2)?;
            write_training(&out, &pipeline.tensors(), &log)?;
        }
        Command::Generate {
            config,
            corpus,
            ckpt,
            item,
            samples,
            temp,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let sampler = SamplerConfig {
                temperature: temp.unwrap_or(cfg.sampler.temperature),
                samples: samples.unwrap_or(cfg.sampler.samples),
                seed: seed.unwrap_or(cfg.sampler.seed),
            };
            sampler.validate()?;
            let dir = pick(corpus, &cfg.paths.corpus, "corpus")?;
            let ckpt = pick(ckpt, &cfg.paths.encoder, "stage-2 checkpoint")?;
            let corpus = Corpus::read(&dir)?;
            let it = corpus
                .item(&item)
                .ok_or_else(|| Error::Input(format!("corpus has no item '{item}'")))?;
            let shape = &corpus
                .subject(it.subject)
                .ok_or_else(|| Error::Integrity(format!("item {item} has unknown subject")))?
                .shape;
            let pipeline = with_path(&ckpt, load_pipeline(&cfg.vqvae, &cfg.encoder, &ckpt))?;
            let seqs = pipeline.generate(&SieInput::from_item(it, shape)?, &sampler)?;
            std::fs::create_dir_all(&out)?;
            for (k, s) in seqs.iter().enumerate() {
                if s.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("sample {k} of {item}")));
                }
                s.save(&out.join(sample_name(&item, k)))?;
            }
        }
        Command::Eval {
            pred,
            corpus,
            blendshape,
            masks,
            report,
        } => {
            let corpus = Corpus::read(&corpus)?;
            let model = with_path(&blendshape, BlendshapeModel::load(&blendshape))?;
            let mask_dir = masks.unwrap_or_else(|| blendshape.parent().unwrap_or(Path::new(".")).to_path_buf());
            let masks = with_path(&mask_dir, RegionMasks::load(&mask_dir))?;
            let evaluator = Evaluator::new(&model, masks)?;
            let mut groups: BTreeMap<String, Vec<(usize, PathBuf)>> = BTreeMap::new();
            for entry in std::fs::read_dir(&pred)? {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let Some(stem) = name.strip_suffix(".lsfm") else { continue };
                let (key, k) = stem
                    .rsplit_once(".s")
                    .and_then(|(key, k)| Some((key.to_string(), k.parse::<usize>().ok()?)))
                    .ok_or_else(|| Error::Input(format!("{}: expected <item>.sNN.lsfm", path.display())))?;
                groups.entry(key).or_default().push((k, path));
            }
            if groups.is_empty() {
                return Err(Error::Input(format!("{}: no prediction files", pred.display())));
            }
            let mut per_item = Vec::new();
            for (key, mut files) in groups {
                files.sort();
                let it = corpus
                    .item(&key)
                    .ok_or_else(|| Error::Integrity(format!("prediction for unknown item '{key}'")))?;
                let shape = &corpus
                    .subject(it.subject)
                    .ok_or_else(|| Error::Integrity(format!("item {key} has unknown subject")))?
                    .shape;
                let seqs = files
                    .iter()
                    .map(|(_, p)| with_path(p, MotionSequence::load(p)))
                    .collect::<Result<Vec<_>>>()?;
                let m = evaluator.item(&key, shape, &it.motion_gt, &seqs[0], &seqs);
                per_item.push(with_path(&files[0].1, m)?);
            }
            std::fs::write(&report, aggregate(per_item)?.to_json()?)?;
        }
        Command::Heatmap {
            seq,
            blendshape,
            shape,
            out,
        } => {
            let model = with_path(&blendshape, BlendshapeModel::load(&blendshape))?;
            let shape = with_path(&shape, load_shape(&shape))?;
            let motion = with_path(&seq, MotionSequence::load(&seq))?;
            let verts = model.cast::<f64>().decode_frames(&shape, &motion.data)?;
            std::fs::write(&out, heatmap_csv(&with_path(&seq, heatmap_stats(&verts))?))?;
        }
        Command::Ablation {
            config,
            corpus,
            vqvae,
            blendshape,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dir = pick(corpus, &cfg.paths.corpus, "corpus")?;
            let corpus = Corpus::read(&dir)?;
            let bs = blendshape.unwrap_or_else(|| dir.join(BLENDSHAPE));
            let model = with_path(&bs, BlendshapeModel::load(&bs))?;
            let mask_dir = bs.parent().unwrap_or(Path::new(".")).to_path_buf();
            let evaluator = Evaluator::new(&model, with_path(&mask_dir, RegionMasks::load(&mask_dir))?)?;
            std::fs::create_dir_all(&out)?;
            let (vq, ps) = match vqvae.or(cfg.paths.vqvae.clone()) {
                Some(ckpt) => with_path(&ckpt, load_stage1(&cfg.vqvae, &ckpt))?,
                None => {
                    let (vq, ps, log) = train_stage1(&corpus, &cfg.vqvae, &cfg.ablation.stage1)?;
                    write_training(&out.join("stage1"), &VqVae::tensors(&ps), &log)?;
                    (vq, ps)
                }
            };
            let report = run_ablation(&corpus, &vq, &ps, &evaluator, &cfg.ablation)?;
            std::fs::write(out.join("ablation.json"), report.to_json()?)?;
            std::fs::write(out.join("ablation.csv"), report.to_csv())?;
            for m in &report.means {
                eprintln!("{:>18}  mve {:.4}  lve {:.4}  fdd {:.4}", m.variant, m.mve, m.lve, m.fdd);
            }
        }
    }
    Ok(())
}

fn threads() -> Result<usize> {
    match std::env::var("LSF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("LSF_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads().and_then(|n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(e.to_string()))?;
        run(cli)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lsf: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
