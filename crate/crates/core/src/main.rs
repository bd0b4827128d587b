use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lse_core::audio::wav::{read_wav, write_wav};
use lse_core::checkpoint::{file_hash, write_atomic, Checkpoint};
use lse_core::config::CliConfig;
use lse_core::data::{build_manifest, Manifest, Split};
use lse_core::dcl::{run_training, DevRecord, TrainInputs, TrainRecord};
use lse_core::enhance::{FrontEnd, Pipeline, RtfReport};
use lse_core::eval::{evaluate_set, EvalReport};
use lse_core::plot;
use lse_core::vae::{load_mel_set, train_vae, Vae};
use lse_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lse", version, about = "Latent diffusion speech enhancement toolkit")]
struct Cli {
    /// TOML configuration file; see `lse config` for every key and its default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.batch_size=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Accept checkpoints whose fingerprint or VAE hash does not match.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the corpus and write the split manifests.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the mel VAE on a corpus directory.
    TrainVae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional latent diffusion model with both contexts.
    TrainCldm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enhance one noisy WAV file.
    Enhance(GenerateArgs),
    /// Estimate the background noise of one noisy WAV file.
    EstimateNoise(GenerateArgs),
    /// Enhance and score every item of a split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test-seen")]
        split: String,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Real-time factor for a list of step counts.
    Rtf {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
        steps: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render figures from training logs, evaluation reports and RTF tables.
    Plot {
        #[arg(long)]
        train_log: Option<PathBuf>,
        #[arg(long)]
        dev_log: Option<PathBuf>,
        #[arg(long = "report")]
        reports: Vec<PathBuf>,
        #[arg(long)]
        rtf: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// cLDM checkpoint or `best.ckpt` pointer.
    #[arg(long)]
    ckpt: PathBuf,
    /// VAE checkpoint; defaults to the one recorded in the cLDM checkpoint.
    #[arg(long)]
    vae: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SamplingArgs {
    /// Reverse diffusion steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Skip the JSON side-file next to the output.
    #[arg(long)]
    no_side_file: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn overrides(cli: &Cli, extra: &[(&str, Option<String>)]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set {s}: expected KEY=VALUE")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            out.push((k.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn resolve(cli: &Cli, extra: &[(&str, Option<String>)]) -> Result<CliConfig, Failure> {
    let cfg = CliConfig::resolve(cli.config.as_deref(), std::env::vars(), &overrides(cli, extra)?)
        .map_err(|e| Failure::Usage(format!("{e} (config file: {:?})", cli.config)))?;
    cfg.validate().map_err(|e| Failure::Usage(format!("{e} (config file: {:?})", cli.config)))?;
    Ok(cfg)
}

fn runtime(context: &str) -> impl Fn(Error) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Usage(m) => Failure::Usage(format!("{context}: {m}")),
        Failure::Runtime(m) => Failure::Runtime(format!("{context}: {m}")),
    }
}

fn load_split(data: &Path, split: Split) -> Result<Manifest, Failure> {
    Manifest::load(&data.join(split.file_name())).map_err(runtime("loading manifest"))
}

fn front_end(m: &Manifest) -> FrontEnd {
    FrontEnd {
        sample_rate: m.header.sample_rate,
        frame: m.header.frame,
        mel: m.header.mel,
    }
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Config => {
            let cfg = resolve(&cli, &[])?;
            print!("{}", cfg.to_toml());
            println!("# fingerprint {}", cfg.fingerprint());
            Ok(())
        }
        Command::MakeData { out, seed } => {
            let cfg = resolve(&cli, &[("corpus.seed", seed.map(|s| s.to_string()))])?;
            let t0 = Instant::now();
            let ms = build_manifest(&cfg.corpus, &cfg.frame, &cfg.mel, out).map_err(runtime("make-data"))?;
            write_atomic(&out.join("config.json"), &run_json(&cfg))
                .map_err(runtime("make-data"))?;
            log::info!(
                "wrote {} train / {} dev / {} test-seen / {} test-unseen pairs to {} in {:.1}s",
                ms.train.entries.len(),
                ms.dev.entries.len(),
                ms.test_seen.entries.len(),
                ms.test_unseen.entries.len(),
                out.display(),
                t0.elapsed().as_secs_f64()
            );
            Ok(())
        }
        Command::TrainVae { data, out } => {
            let cfg = resolve(&cli, &[])?;
            let train = load_split(data, Split::Train)?;
            let dev = load_split(data, Split::Dev)?;
            let train_mels = load_mel_set(&train).map_err(runtime("reading training audio"))?;
            let dev_mels = load_mel_set(&dev).map_err(runtime("reading dev audio"))?;
            let (vae, report) =
                train_vae(&cfg.vae, &cfg.vae_train, &train_mels, &dev_mels, Some(out)).map_err(runtime("train-vae"))?;
            let ck = vae.to_checkpoint(
                report.best_step,
                json!({
                    "vae_train": cfg.vae_train,
                    "front_end": front_end(&train),
                    "config": cfg.to_json(),
                    "fingerprint": cfg.fingerprint(),
                }),
            );
            let path = out.join("vae.ckpt");
            ck.write(&path).map_err(runtime("writing vae checkpoint"))?;
            log::info!(
                "best dev loss {:.5} at step {}; latent scale {:.4}; wrote {}",
                report.best_dev_loss,
                report.best_step,
                report.latent_scale,
                path.display()
            );
            Ok(())
        }
        Command::TrainCldm { data, vae, out, steps, seed } => {
            let cfg = resolve(
                &cli,
                &[("train.steps", steps.map(|s| s.to_string())), ("train.seed", seed.map(|s| s.to_string()))],
            )?;
            let train = load_split(data, Split::Train)?;
            let dev = load_split(data, Split::Dev)?;
            let vae_ck = Checkpoint::read(vae).map_err(runtime("reading vae checkpoint"))?;
            let vae_model = Vae::from_checkpoint(vae_ck, Some(&cfg.vae), cli.force).map_err(runtime("loading vae"))?;
            let vae_path = std::fs::canonicalize(vae).map_err(|e| Failure::Runtime(format!("{}: {e}", vae.display())))?;
            let inputs = TrainInputs {
                train: &train,
                dev: &dev,
                vae: &vae_model,
                model: cfg.denoiser.clone(),
                schedule: cfg.schedule,
                vae_hash: file_hash(vae).map_err(runtime("hashing vae"))?,
                run: json!({
                    "front_end": front_end(&train),
                    "vae_path": vae_path,
                    "config": cfg.to_json(),
                    "fingerprint": cfg.fingerprint(),
                }),
            };
            let outcome = run_training(&inputs, &cfg.train, Some(out)).map_err(runtime("train-cldm"))?;
            log::info!(
                "best dev loss at step {}; best checkpoint {:?}",
                outcome.best_step,
                outcome.best_checkpoint
            );
            Ok(())
        }
        Command::Enhance(args) | Command::EstimateNoise(args) => {
            let noise = matches!(cli.command, Command::EstimateNoise(_));
            let cfg = resolve(&cli, &sampling_overrides(&args.sampling))?;
            let (pipeline, source) = load_pipeline(&cli, &args.model)?;
            let input = read_wav(&args.input).map_err(runtime("reading input"))?;
            let t0 = Instant::now();
            let out = if noise {
                pipeline.estimate_noise(&input, &cfg.enhance)
            } else {
                pipeline.enhance(&input, &cfg.enhance)
            }
            .map_err(runtime(if noise { "estimate-noise" } else { "enhance" }))?;
            let wall = t0.elapsed().as_secs_f64();
            write_wav(&args.out, &out).map_err(runtime("writing output"))?;
            if !args.no_side_file {
                let side = json!({
                    "seed": cfg.enhance.seed,
                    "steps": cfg.enhance.steps,
                    "instruction": if noise { "INSTRUCT_B" } else { "INSTRUCT_A" },
                    "checkpoint": source.cldm_path,
                    "checkpoint_hash": source.cldm_hash,
                    "vae_hash": source.vae_hash,
                    "audio_seconds": input.duration_s(),
                    "rtf": wall / input.duration_s(),
                    "fingerprint": cfg.fingerprint(),
                    "config": cfg.to_json(),
                });
                write_atomic(&side_file(&args.out), &serde_json::to_vec_pretty(&side).expect("side file serializes"))
                    .map_err(runtime("writing side-file"))?;
            }
            log::info!("wrote {} ({:.2}x real time)", args.out.display(), wall / input.duration_s());
            Ok(())
        }
        Command::Evaluate { data, split, model, sampling, out } => {
            let cfg = resolve(&cli, &sampling_overrides(sampling))?;
            let split = Split::parse(split).map_err(|e| Failure::Usage(e.to_string()))?;
            let manifest = load_split(data, split)?;
            let (pipeline, _) = load_pipeline(&cli, model)?;
            let report = evaluate_set(&pipeline, &manifest, &cfg.enhance, cfg.fingerprint(), cfg.to_json())
                .map_err(runtime("evaluate"))?;
            report.write(out).map_err(runtime("writing report"))?;
            print_report(&report);
            Ok(())
        }
        Command::Rtf { input, model, steps, seed, runs, out } => {
            let cfg = resolve(&cli, &[("enhance.seed", seed.map(|s| s.to_string()))])?;
            let (pipeline, _) = load_pipeline(&cli, model)?;
            let w = read_wav(input).map_err(runtime("reading input"))?;
            let reports = pipeline.measure_rtf(&w, steps, *runs, &cfg.enhance).map_err(runtime("rtf"))?;
            println!("{:>6} {:>10} {:>10} {:>8}", "K", "audio_s", "wall_s", "rtf");
            for r in &reports {
                println!("{:>6} {:>10.3} {:>10.3} {:>8.3}", r.steps, r.audio_seconds, r.wall_seconds, r.rtf);
            }
            if let Some(path) = out {
                let doc = json!({ "fingerprint": cfg.fingerprint(), "reports": reports });
                write_atomic(path, &serde_json::to_vec_pretty(&doc).expect("rtf serializes")).map_err(runtime("writing rtf table"))?;
            }
            Ok(())
        }
        Command::Plot { train_log, dev_log, reports, rtf, out } => {
            let cfg = resolve(&cli, &[])?;
            let fp = cfg.fingerprint();
            let mut written = Vec::new();
            if train_log.is_some() || dev_log.is_some() {
                let train: Vec<TrainRecord> = match train_log {
                    Some(p) => plot::read_jsonl(p).map_err(runtime("reading train log"))?,
                    None => Vec::new(),
                };
                let dev: Vec<DevRecord> = match dev_log {
                    Some(p) => plot::read_jsonl(p).map_err(runtime("reading dev log"))?,
                    None => Vec::new(),
                };
                written.push(plot::write_figure(&plot::loss_figure(&train, &dev, &fp), out, "loss").map_err(runtime("plot"))?);
            }
            if !reports.is_empty() {
                let rs = reports
                    .iter()
                    .map(|p| EvalReport::read(p))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(runtime("reading reports"))?;
                written.push(plot::write_figure(&plot::si_sdr_figure(&rs, &fp), out, "si_sdr_vs_steps").map_err(runtime("plot"))?);
            }
            if let Some(p) = rtf {
                let text = std::fs::read(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
                let doc: serde_json::Value =
                    serde_json::from_slice(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
                let rs: Vec<RtfReport> = serde_json::from_value(doc["reports"].clone())
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
                written.push(plot::write_figure(&plot::rtf_figure(&rs, &fp), out, "rtf_vs_steps").map_err(runtime("plot"))?);
            }
            if written.is_empty() {
                return Err(Failure::Usage("nothing to plot: pass --train-log, --dev-log, --report or --rtf".into()));
            }
            for (data, svg) in written {
                log::info!("wrote {} and {}", data.display(), svg.display());
            }
            Ok(())
        }
    }
}

fn sampling_overrides(m: &SamplingArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("enhance.steps", m.steps.map(|s| s.to_string())),
        ("enhance.seed", m.seed.map(|s| s.to_string())),
    ]
}

fn load_pipeline(cli: &Cli, m: &ModelArgs) -> Result<(Pipeline, lse_core::enhance::PipelineSource), Failure> {
    Pipeline::load(&m.ckpt, m.vae.as_deref(), cli.force).map_err(runtime("loading models"))
}

fn side_file(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn run_json(cfg: &CliConfig) -> Vec<u8> {
    serde_json::to_vec_pretty(&json!({ "fingerprint": cfg.fingerprint(), "config": cfg.to_json() })).expect("config serializes")
}

fn print_report(r: &EvalReport) {
    let s = &r.summary;
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    println!("{} split, K={}, seed {}, fingerprint {}", s.split, s.steps, s.seed, s.fingerprint);
    println!("{:<22} {:>5} {:>9} {:>9} {:>9} {:>8}", "noise kind", "n", "sisdr_in", "sisdr_out", "lsd_out", "improved");
    for (kind, a) in s.per_noise_kind.iter().map(|(k, a)| (k.as_str(), a)).chain([("ALL", &s.overall)]) {
        println!(
            "{:<22} {:>5} {:>9} {:>9} {:>9} {:>8}",
            kind,
            a.items,
            f(a.si_sdr_noisy_mean),
            f(a.si_sdr_enhanced_mean),
            f(a.lsd_enhanced_mean),
            f(a.improved_fraction)
        );
    }
    if !s.incomplete.is_empty() {
        println!("incomplete rows: {}", s.incomplete.join(", "));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
