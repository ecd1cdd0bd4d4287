//! Multi-episode comparisons and the curvature scatter.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{run_episode, BenchError, EpisodeMetrics};
use crate::mpc::{MpcConfig, WarmStartSource};
use crate::policy::MlpParams;
use crate::trackgeom::{load_track_file, synth, Track};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackSet {
    Training,
    /// Rollout track for fine-tuning only; no demonstrations are drawn from it.
    FineTuning,
    HoldoutComplex,
    HoldoutSimple,
}

/// A track by synthetic name or by file in the loader's format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub name: String,
    pub set: TrackSet,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl TrackEntry {
    pub fn synthetic(name: &str, set: TrackSet) -> Self {
        TrackEntry { name: name.to_string(), set, path: None, scale: 1.0 }
    }

    pub fn load(&self) -> Result<Track, BenchError> {
        match &self.path {
            Some(p) => Ok(load_track_file(p, self.scale)?),
            None => match synth::by_name(&self.name, synth::DEFAULT_SPACING) {
                Some(t) => Ok(t?),
                None => Err(BenchError::InvalidPlan(format!("unknown synthetic track {:?}", self.name))),
            },
        }
    }
}

/// A warm-start source, with the checkpoint it needs when it is a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEntry {
    pub name: String,
    pub warm_start: WarmStartSource,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub tracks: Vec<TrackEntry>,
    pub variants: Vec<VariantEntry>,
    pub seeds: Vec<u64>,
    pub max_steps: usize,
    pub controller: MpcConfig,
    /// `(baseline, candidate)` variant names whose relative improvement is reported.
    #[serde(default)]
    pub improvement: Option<(String, String)>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.tracks.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            return Err(BenchError::InvalidPlan("tracks, variants and seeds must be non-empty".into()));
        }
        if self.max_steps == 0 {
            return Err(BenchError::InvalidPlan("max_steps must be >= 1".into()));
        }
        if let Some((a, b)) = &self.improvement {
            for name in [a, b] {
                if !self.variants.iter().any(|v| &v.name == name) {
                    return Err(BenchError::InvalidPlan(format!("improvement names unknown variant {name:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Aggregate over seeds for one (track, variant) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub track: String,
    pub set: TrackSet,
    pub variant: String,
    pub episodes: usize,
    pub laps_completed: usize,
    pub mean_iterations: f64,
    pub std_iterations: f64,
    pub mean_xte: f64,
    pub std_xte: f64,
    pub max_xte: f64,
    pub mean_steps: f64,
    /// Wall-clock; excluded from the CSV so reruns compare byte for byte.
    pub mean_solve_time: f64,
}

/// Relative reduction of the candidate over the baseline on one track, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub track: String,
    pub baseline: String,
    pub candidate: String,
    pub iterations_pct: f64,
    pub xte_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub improvements: Vec<Improvement>,
}

pub const REPORT_HEADER: &str =
    "track,set,variant,episodes,laps_completed,mean_iterations,std_iterations,mean_xte,std_xte,max_xte,mean_steps";

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl Report {
    pub fn row(&self, track: &str, variant: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.track == track && r.variant == variant)
    }

    pub fn write_csv<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        writeln!(sink, "{REPORT_HEADER}")?;
        for r in &self.rows {
            let set = serde_json::to_value(r.set).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            writeln!(
                sink,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.track,
                set,
                r.variant,
                r.episodes,
                r.laps_completed,
                r.mean_iterations,
                r.std_iterations,
                r.mean_xte,
                r.std_xte,
                r.max_xte,
                r.mean_steps
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<14} {:>6} {:>14} {:>16} {:>12}",
            "track", "variant", "laps", "iterations", "mean xte (m)", "solve (ms)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:<14} {:>3}/{:<2} {:>7.2} ± {:<5.2} {:>8.4} ± {:<6.4} {:>10.3}",
                r.track,
                r.variant,
                r.laps_completed,
                r.episodes,
                r.mean_iterations,
                r.std_iterations,
                r.mean_xte,
                r.std_xte,
                1e3 * r.mean_solve_time
            );
        }
        for i in &self.improvements {
            let _ = writeln!(
                s,
                "{}: {} over {}: iterations {:+.1}%, xte {:+.1}%",
                i.track, i.candidate, i.baseline, i.iterations_pct, i.xte_pct
            );
        }
        s
    }
}

fn load_variant_policy(v: &VariantEntry) -> Result<Option<MlpParams>, BenchError> {
    match (v.warm_start, &v.checkpoint) {
        (WarmStartSource::Policy, None) => Err(BenchError::MissingPolicy(v.warm_start)),
        (WarmStartSource::Policy, Some(path)) => MlpParams::load_file(path).map(Some).map_err(|source| {
            BenchError::Checkpoint { variant: v.name.clone(), path: path.display().to_string(), source }
        }),
        _ => Ok(None),
    }
}

/// Runs every (track, variant, seed) episode and aggregates over seeds.
pub fn compare(plan: &ExperimentPlan) -> Result<Report, BenchError> {
    plan.validate()?;
    let policies = plan.variants.iter().map(load_variant_policy).collect::<Result<Vec<_>, _>>()?;
    let mut report = Report::default();
    for entry in &plan.tracks {
        let track = entry.load()?;
        for (variant, policy) in plan.variants.iter().zip(&policies) {
            let mut runs: Vec<EpisodeMetrics> = Vec::with_capacity(plan.seeds.len());
            for &seed in &plan.seeds {
                let (m, _) =
                    run_episode(&track, &plan.controller, variant.warm_start, policy.as_ref(), seed, plan.max_steps)?;
                runs.push(m);
            }
            let its: Vec<f64> = runs.iter().map(|m| m.mean_iterations).collect();
            let xtes: Vec<f64> = runs.iter().map(|m| m.mean_xte).collect();
            let steps: Vec<f64> = runs.iter().map(|m| m.steps as f64).collect();
            let times: Vec<f64> = runs.iter().map(|m| m.mean_solve_time).collect();
            let (mi, si) = mean_std(&its);
            let (mx, sx) = mean_std(&xtes);
            report.rows.push(ReportRow {
                track: entry.name.clone(),
                set: entry.set,
                variant: variant.name.clone(),
                episodes: runs.len(),
                laps_completed: runs.iter().filter(|m| m.completed_lap).count(),
                mean_iterations: mi,
                std_iterations: si,
                mean_xte: mx,
                std_xte: sx,
                max_xte: runs.iter().map(|m| m.max_xte).fold(0.0, f64::max),
                mean_steps: mean_std(&steps).0,
                mean_solve_time: mean_std(&times).0,
            });
        }
        if let Some((base, cand)) = &plan.improvement {
            let b = report.row(&entry.name, base).expect("validated").clone();
            let c = report.row(&entry.name, cand).expect("validated").clone();
            report.improvements.push(Improvement {
                track: entry.name.clone(),
                baseline: base.clone(),
                candidate: cand.clone(),
                iterations_pct: 100.0 * (b.mean_iterations - c.mean_iterations) / b.mean_iterations,
                xte_pct: 100.0 * (b.mean_xte - c.mean_xte) / b.mean_xte,
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterRecord {
    pub curvature: f64,
    pub xte: f64,
}

/// One `(curvature at the vehicle, xte)` record per executed step.
pub fn curvature_vs_xte(
    track: &Track,
    controller: &MpcConfig,
    warm_start: WarmStartSource,
    policy: Option<&MlpParams>,
    max_steps: usize,
) -> Result<Vec<ScatterRecord>, BenchError> {
    let (_, trace) = run_episode(track, controller, warm_start, policy, 0, max_steps)?;
    Ok(trace.iter().map(|r| ScatterRecord { curvature: r.curvature, xte: r.xte }).collect())
}

pub fn write_scatter<W: Write>(records: &[ScatterRecord], mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "curvature,xte")?;
    for r in records {
        writeln!(sink, "{},{}", r.curvature, r.xte)?;
    }
    Ok(())
}
