//! Command-line front end. Every command writes its outputs and a manifest
//! with the resolved configuration into `--out-dir`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Manifest, PipelineConfig};
use super::{compare, curvature_vs_xte, write_scatter, BenchError, ExperimentPlan, TrackEntry, VariantEntry};
use crate::learn::{
    collect_demos, finetune, load_demos_file, normalize_inputs, save_demos_file, train_bc, BatchMetrics, LossHistory,
};
use crate::mpc::WarmStartSource;
use crate::policy::{new_policy, new_value_net, MlpParams, LOOKAHEAD};
use crate::trackgeom::{synth, write_track_file, Track};

pub const DEMOS_FILE: &str = "demos.json";
pub const BC_POLICY_FILE: &str = "policy_bc.json";
pub const BC_LOSS_FILE: &str = "bc_loss.csv";
pub const FT_POLICY_FILE: &str = "policy_ft.json";
pub const FT_VALUE_FILE: &str = "value_ft.json";
pub const FT_METRICS_FILE: &str = "finetune_metrics.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Parser)]
#[command(name = "warmstart", version, about = "Learned warm starts for racetrack MPC")]
struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic tracks in the loader's format.
    GenTracks,
    /// Record expert demonstrations on the training tracks.
    Collect {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Behavior cloning on a demonstration file.
    TrainBc {
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// PPO with imitation against the realtime controller.
    Finetune {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare warm-start variants on every configured track.
    Evaluate,
    /// Curvature versus cross-track error along one track.
    Analyze {
        #[arg(long, default_value = "s_curve")]
        track: String,
        /// Variant name from the evaluate section.
        #[arg(long, default_value = "finetuned")]
        variant: String,
    },
    /// collect, train-bc, finetune and evaluate in sequence.
    Pipeline,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}

fn execute(cli: Cli) -> Result<(), BenchError> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let config = config.resolved();
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out)?;
    let (name, outputs) = match cli.command {
        Command::GenTracks => ("gen-tracks", gen_tracks(out)?),
        Command::Collect { n } => ("collect", collect(&config, out, n)?),
        Command::TrainBc { demos } => ("train-bc", train(&config, out, demos)?),
        Command::Finetune { policy, steps } => ("finetune", tune(&config, out, policy, steps)?),
        Command::Evaluate => ("evaluate", evaluate(&config, out)?),
        Command::Analyze { track, variant } => ("analyze", analyze(&config, out, &track, &variant)?),
        Command::Pipeline => {
            let mut all = collect(&config, out, None)?;
            all.extend(train(&config, out, None)?);
            all.extend(tune(&config, out, None, None)?);
            all.extend(evaluate(&config, out)?);
            ("pipeline", all)
        }
    };
    let manifest = Manifest::new(name, &config, outputs);
    let path = manifest.write(out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn gen_tracks(out: &Path) -> Result<Vec<String>, BenchError> {
    let mut written = Vec::new();
    for name in synth::NAMES {
        let track = synth::by_name(name, synth::DEFAULT_SPACING).expect("listed name")?;
        let path = out.join(format!("{name}.csv"));
        write_track_file(&track, &path)?;
        written.push(display(&path));
    }
    Ok(written)
}

fn load_tracks<'a>(entries: impl Iterator<Item = &'a TrackEntry>) -> Result<Vec<Track>, BenchError> {
    let tracks = entries.map(TrackEntry::load).collect::<Result<Vec<_>, _>>()?;
    if tracks.is_empty() {
        return Err(BenchError::InvalidPlan("no training tracks configured".into()));
    }
    Ok(tracks)
}

fn collect(config: &PipelineConfig, out: &Path, n: Option<usize>) -> Result<Vec<String>, BenchError> {
    let tracks = load_tracks(config.training_tracks())?;
    let n = n.unwrap_or(config.collect.n);
    let demos = collect_demos(&tracks, &config.expert, n, &config.collect.options)?;
    let path = out.join(DEMOS_FILE);
    save_demos_file(&demos, &path)?;
    log::info!("collected {} demonstrations", demos.len());
    Ok(vec![display(&path)])
}

fn write_loss_history(h: &LossHistory, path: &Path) -> Result<(), BenchError> {
    let mut text = String::from("epoch,train,validation\n");
    for (i, (t, v)) in h.train.iter().zip(&h.validation).enumerate() {
        text.push_str(&format!("{i},{t},{v}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn train(config: &PipelineConfig, out: &Path, demos: Option<PathBuf>) -> Result<Vec<String>, BenchError> {
    let demos = load_demos_file(demos.unwrap_or_else(|| out.join(DEMOS_FILE)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = new_policy(LOOKAHEAD, config.realtime.horizon, config.policy.log_std_init, &mut rng)?;
    normalize_inputs(&mut policy, &demos)?;
    let (policy, history) = train_bc(&policy, &demos, &config.bc)?;
    let (p, l) = (out.join(BC_POLICY_FILE), out.join(BC_LOSS_FILE));
    policy.save_file(&p)?;
    write_loss_history(&history, &l)?;
    Ok(vec![display(&p), display(&l)])
}

fn tune(
    config: &PipelineConfig,
    out: &Path,
    policy: Option<PathBuf>,
    steps: Option<usize>,
) -> Result<Vec<String>, BenchError> {
    let tracks = load_tracks(config.finetune_tracks())?;
    let policy = MlpParams::load_file(policy.unwrap_or_else(|| out.join(BC_POLICY_FILE)))?;
    // Offset so the value net's draws differ from the policy's.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let value_net = new_value_net(LOOKAHEAD, &mut rng)?;
    let steps = steps.unwrap_or(config.finetune.total_steps);
    let outcome = finetune(&policy, &value_net, &tracks, &config.realtime, &config.finetune.options, steps)?;
    let (p, v, m) = (out.join(FT_POLICY_FILE), out.join(FT_VALUE_FILE), out.join(FT_METRICS_FILE));
    outcome.policy.save_file(&p)?;
    outcome.value_net.save_file(&v)?;
    BatchMetrics::write_csv(&outcome.log, std::fs::File::create(&m)?)?;
    Ok(vec![display(&p), display(&v), display(&m)])
}

fn resolve_variant(v: &VariantEntry, out: &Path) -> VariantEntry {
    let mut v = v.clone();
    v.checkpoint = v.checkpoint.map(|c| if c.is_absolute() { c } else { out.join(c) });
    v
}

/// The evaluation plan for a configuration, with checkpoints under `out`.
pub fn evaluation_plan(config: &PipelineConfig, out: &Path) -> ExperimentPlan {
    ExperimentPlan {
        tracks: config.tracks.clone(),
        variants: config.evaluate.variants.iter().map(|v| resolve_variant(v, out)).collect(),
        seeds: config.evaluate.seeds.clone(),
        max_steps: config.evaluate.max_steps,
        controller: config.realtime,
        improvement: config.evaluate.improvement.clone(),
    }
}

fn evaluate(config: &PipelineConfig, out: &Path) -> Result<Vec<String>, BenchError> {
    let report = compare(&evaluation_plan(config, out))?;
    let (r, s) = (out.join(REPORT_FILE), out.join(SUMMARY_FILE));
    report.write_csv(std::fs::File::create(&r)?)?;
    let summary = report.summary();
    std::fs::write(&s, &summary)?;
    print!("{summary}");
    Ok(vec![display(&r), display(&s)])
}

fn analyze(config: &PipelineConfig, out: &Path, track: &str, variant: &str) -> Result<Vec<String>, BenchError> {
    let entry = config
        .tracks
        .iter()
        .find(|t| t.name == track)
        .ok_or_else(|| BenchError::InvalidPlan(format!("unknown track {track:?}")))?;
    let v = config
        .evaluate
        .variants
        .iter()
        .find(|v| v.name == variant)
        .map(|v| resolve_variant(v, out))
        .ok_or_else(|| BenchError::InvalidPlan(format!("unknown variant {variant:?}")))?;
    let policy = match (v.warm_start, &v.checkpoint) {
        (WarmStartSource::Policy, None) => return Err(BenchError::MissingPolicy(v.warm_start)),
        (WarmStartSource::Policy, Some(p)) => {
            Some(MlpParams::load_file(p).map_err(|source| BenchError::Checkpoint {
                variant: v.name.clone(),
                path: display(p),
                source,
            })?)
        }
        _ => None,
    };
    let records =
        curvature_vs_xte(&entry.load()?, &config.realtime, v.warm_start, policy.as_ref(), config.evaluate.max_steps)?;
    let path = out.join(format!("scatter_{track}_{variant}.csv"));
    write_scatter(&records, std::fs::File::create(&path)?)?;
    Ok(vec![display(&path)])
}
