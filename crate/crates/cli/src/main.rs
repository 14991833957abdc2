use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mbtensor::optimizer_steps;
use multibooth::concept::ConceptModule;
use multibooth::denoiser::{Denoiser, DenoiserConfig, NoiseSchedule};
use multibooth::encoders::dataset::{save_png, write_dataset};
use multibooth::encoders::{generate_dataset, ImageEncoder, LatentCodec, SyntheticConcept, Vocabulary};
use multibooth::eval::{bench, evaluate, reference_features, synthetic_modules, EvalReport, Pipeline};
use multibooth::rcm::{load_layout, OverlapMode};
use multibooth::sampler::{SampleConfig, SamplerVariant};
use multibooth::trainer::{pretrain_base, train_concept, Frozen, PretrainConfig, TrainConfig};
use multibooth::{assets, Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "multibooth", version, about = "Train single-concept modules and compose them by region")]
struct Cli {
    /// Seed for every stochastic choice of the command.
    #[arg(long, global = true, env = "MULTIBOOTH_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BaseArg {
    /// Base checkpoint; the embedded one when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, default_value_t = multibooth::sampler::DEFAULT_SAMPLE_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = multibooth::sampler::DEFAULT_GUIDANCE)]
    guidance: f64,
    /// Blend overlaps as `(1/η) Σ w_i f̂_i` with raw weights instead of the
    /// renormalized weighted mean.
    #[arg(long)]
    overlap_literal: bool,
    #[arg(long, value_enum, default_value_t = Sampler::DdimClipped)]
    sampler: Sampler,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Ddim,
    DdimClipped,
}

impl SampleArgs {
    fn config(&self, seed: u64) -> SampleConfig {
        SampleConfig {
            steps: self.steps,
            guidance: self.guidance,
            seed,
            variant: match self.sampler {
                Sampler::Ddim => SamplerVariant::Ddim,
                Sampler::DdimClipped => SamplerVariant::DdimClipped,
            },
        }
    }

    fn overlap(&self) -> OverlapMode {
        if self.overlap_literal {
            OverlapMode::Literal
        } else {
            OverlapMode::WeightedMean
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a base denoiser on captioned synthetic renderings.
    PretrainBase {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = PretrainConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = PretrainConfig::default().batch)]
        batch: usize,
        #[arg(long, default_value_t = PretrainConfig::default().lr)]
        lr: f64,
    },
    /// Render a synthetic concept dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        concepts: usize,
        #[arg(long, default_value_t = 5)]
        images: usize,
    },
    /// Learn one concept module against the frozen base.
    Train {
        /// Dataset root written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        concept: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = multibooth::trainer::DEFAULT_PLACEHOLDER)]
        placeholder: String,
        #[arg(long, default_value_t = multibooth::trainer::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = multibooth::trainer::DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = multibooth::trainer::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = multibooth::denoiser::DEFAULT_RANK)]
        rank: usize,
        /// Per-step loss log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        base: BaseArg,
    },
    /// List or inspect module files.
    Modules {
        #[command(subcommand)]
        action: ModulesCmd,
    },
    /// Sample one image from a layout file.
    Generate {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sample: SampleArgs,
        #[command(flatten)]
        base: BaseArg,
    },
    /// Score region crops of generated images against concept references.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        layout: Vec<PathBuf>,
        /// Dataset root holding the reference images.
        #[arg(long)]
        data: PathBuf,
        /// Number of sampling seeds, starting at `--seed`.
        #[arg(long, default_value_t = 16)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sample: SampleArgs,
        #[command(flatten)]
        base: BaseArg,
    },
    /// Time one denoiser pass and count attention ops per concept count.
    Bench {
        /// Concept counts, as `a..b`, `a..=b`, a list `1,2,4` or one number.
        #[arg(long, default_value = "1..4")]
        concepts: String,
        /// Modules to place; random stand-ins when omitted.
        #[arg(long, num_args = 1..)]
        module: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        base: BaseArg,
    },
}

#[derive(Subcommand)]
enum ModulesCmd {
    /// Summarize every `.mbcm` file in a directory.
    List { dir: PathBuf },
    /// Print the full metadata of one module.
    Inspect { path: PathBuf },
}

/// `1..4` and `1..=4` are both inclusive, matching how counts are spoken.
fn parse_counts(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse concept counts {s:?}"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let v: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<Result<_>>()?
    };
    if v.is_empty() || v.contains(&0) {
        return Err(bad());
    }
    Ok(v)
}

fn load_base(arg: &BaseArg) -> Result<Denoiser> {
    match &arg.base {
        Some(p) => Denoiser::load(p),
        None => assets::base_denoiser(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(report: &EvalReport, out: Option<&Path>) -> Result<Value> {
    let v = serde_json::to_value(report).map_err(|e| Error::Parse(e.to_string()))?;
    if let Some(p) = out {
        write_text(p, &serde_json::to_string_pretty(&v).expect("json"))?;
    }
    Ok(v)
}

fn module_summary(path: &Path, m: &ConceptModule) -> Value {
    json!({
        "path": path.display().to_string(),
        "placeholder": m.placeholder,
        "class_noun": m.class_noun,
        "concept_id": m.meta.concept_id,
        "rank": m.rank(),
        "params": m.num_params(),
        "bytes": std::fs::metadata(path).map(|x| x.len()).unwrap_or(0),
        "final_norm": m.final_norm(),
        "raw_norm": m.raw_norm(),
    })
}

fn run(cli: Cli) -> Result<Value> {
    let vocab = Vocabulary::standard();
    let codec = LatentCodec::new();
    let schedule = NoiseSchedule::standard();
    let dims = DenoiserConfig::default().cross_dims();
    match cli.command {
        Command::PretrainBase { out, steps, batch, lr } => {
            let cfg = PretrainConfig {
                steps,
                batch,
                lr,
                seed: cli.seed,
                ..Default::default()
            };
            let mut net = Denoiser::init(DenoiserConfig::default(), cli.seed)?;
            let mut window = Vec::new();
            pretrain_base(&mut net, &cfg, &vocab, &codec, &schedule, |step, loss| {
                window.push(loss);
                if (step + 1) % 250 == 0 || step + 1 == steps {
                    let mean = window.iter().sum::<f64>() / window.len() as f64;
                    eprintln!("step {:>5}  loss {mean:.5}", step + 1);
                    window.clear();
                }
            })?;
            net.save(&out, json!({ "pretrain": cfg }))?;
            let sha = multibooth::container::sha256_hex(&std::fs::read(&out).map_err(|e| Error::io(&out, e))?);
            Ok(json!({ "out": out.display().to_string(), "sha256": sha, "params": net.num_params() }))
        }
        Command::GenData { out, concepts, images } => {
            let set = generate_dataset(cli.seed, concepts, images)?;
            write_dataset(&out, &set, &vocab)?;
            Ok(json!({ "out": out.display().to_string(), "concepts": set.iter().map(|c| c.meta()).collect::<Vec<_>>() }))
        }
        Command::Train {
            data,
            concept,
            out,
            placeholder,
            steps,
            lr,
            lambda,
            rank,
            log,
            base,
        } => {
            let net = load_base(&base)?;
            let before = net.weights_sha256();
            let c = SyntheticConcept::load(&data.join("concepts").join(&concept))?;
            let cfg = TrainConfig {
                steps,
                lr,
                lambda,
                rank,
                seed: cli.seed,
                placeholder,
                ..Default::default()
            };
            let encoder = ImageEncoder::standard();
            let fz = Frozen {
                base: &net,
                vocab: &vocab,
                encoder: &encoder,
                codec: &codec,
                schedule: &schedule,
            };
            let (module, tlog) = train_concept(&c, &cfg, &fz, |l| {
                if (l.step + 1) % 100 == 0 {
                    eprintln!("step {:>5}  loss {:.5}  |v| {:.4}", l.step + 1, l.total, l.v_norm);
                }
            })?;
            if net.weights_sha256() != before {
                return Err(Error::Checksum {
                    what: "base weights after training".into(),
                    expected: before,
                    found: net.weights_sha256(),
                });
            }
            module.save(&out)?;
            if let Some(p) = log {
                write_text(&p, &serde_json::to_string(&tlog).expect("json"))?;
            }
            Ok(json!({
                "module": module_summary(&out, &module),
                "early_loss": tlog.early_loss,
                "late_loss": tlog.late_loss,
            }))
        }
        Command::Modules { action } => match action {
            ModulesCmd::List { dir } => {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                    .map_err(|e| Error::io(&dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "mbcm"))
                    .collect();
                paths.sort();
                let rows = paths
                    .iter()
                    .map(|p| Ok(module_summary(p, &ConceptModule::load(p, &vocab, Some(&dims))?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Value::Array(rows))
            }
            ModulesCmd::Inspect { path } => {
                let m = ConceptModule::load(&path, &vocab, Some(&dims))?;
                let (raw, fin, target) = m.norm_report(&vocab)?;
                let mut v = module_summary(&path, &m);
                v["meta"] = serde_json::to_value(&m.meta).expect("json");
                v["layers"] = json!(m.layer_dims());
                v["norms"] = json!({ "raw": raw, "final": fin, "class_noun": target });
                Ok(v)
            }
        },
        Command::Generate { layout, out, sample, base } => {
            let net = load_base(&base)?;
            let lay = load_layout(&layout, &vocab, &dims)?;
            let pipe = Pipeline {
                net: &net,
                vocab: &vocab,
                codec: &codec,
                schedule: &schedule,
            };
            let prepared = pipe.prepare(&lay, sample.overlap())?;
            let steps_before = optimizer_steps();
            let g = pipe.generate(&prepared, &sample.config(cli.seed))?;
            save_png(&g.image, &out)?;
            Ok(json!({
                "out": out.display().to_string(),
                "seed": cli.seed,
                "regions": prepared.regions.iter().map(|r| r.placeholder.clone()).collect::<Vec<_>>(),
                "flops": multibooth::eval::FlopRow::from(&g.flops),
                "optimizer_steps": optimizer_steps() - steps_before,
            }))
        }
        Command::Eval {
            layout,
            data,
            seeds,
            out,
            sample,
            base,
        } => {
            let net = load_base(&base)?;
            let encoder = ImageEncoder::standard();
            let mut layouts = Vec::new();
            let mut references = BTreeMap::new();
            for p in &layout {
                let lay = load_layout(p, &vocab, &dims)?;
                for r in &lay.regions {
                    let id = &r.module.meta.concept_id;
                    if !references.contains_key(id) {
                        let c = SyntheticConcept::load(&data.join("concepts").join(id))?;
                        references.insert(id.clone(), reference_features(&encoder, &c.images)?);
                    }
                }
                layouts.push((p.display().to_string(), lay));
            }
            let pipe = Pipeline {
                net: &net,
                vocab: &vocab,
                codec: &codec,
                schedule: &schedule,
            };
            let seeds: Vec<u64> = (cli.seed..cli.seed + seeds).collect();
            let cfg = sample.config(cli.seed);
            let mut report = evaluate(&pipe, &encoder, &layouts, &references, &seeds, &cfg, sample.overlap())?;
            let counts: Vec<usize> = (1..=layouts.iter().map(|(_, l)| l.regions.len()).max().unwrap_or(1)).collect();
            let mut modules: Vec<Arc<ConceptModule>> = Vec::new();
            for (_, l) in &layouts {
                for r in l.sorted_regions() {
                    if !modules.iter().any(|m| m.placeholder == r.module.placeholder) {
                        modules.push(r.module.clone());
                    }
                }
            }
            let counts: Vec<usize> = counts.into_iter().filter(|&n| n <= modules.len().min(4)).collect();
            let timing = bench(&pipe, &modules, &counts, 3, cli.seed)?;
            report.timing = timing.timing;
            for (k, v) in timing.flops {
                report.flops.insert(format!("concepts={k}"), v);
            }
            emit(&report, out.as_deref())
        }
        Command::Bench {
            concepts,
            module,
            repeats,
            out,
            base,
        } => {
            let counts = parse_counts(&concepts)?;
            let need = counts.iter().copied().max().unwrap_or(1);
            let net = load_base(&base)?;
            let modules = if module.is_empty() {
                synthetic_modules(&vocab, &dims, need, multibooth::denoiser::DEFAULT_RANK, cli.seed)?
            } else {
                module
                    .iter()
                    .map(|p| ConceptModule::load(p, &vocab, Some(&dims)).map(Arc::new))
                    .collect::<Result<_>>()?
            };
            let pipe = Pipeline {
                net: &net,
                vocab: &vocab,
                codec: &codec,
                schedule: &schedule,
            };
            let report = bench(&pipe, &modules, &counts, repeats, cli.seed)?;
            emit(&report, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
