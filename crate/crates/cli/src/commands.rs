use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::Serialize;
use vgpo_core::config::{read_config, Overrides};
use vgpo_core::diagnostics::{attention_allocation, RatioAccumulator, RatioReport, Selector};
use vgpo_core::synth::{generate_corpus, run_experiment, ExperimentReport};
use vgpo_core::trace::{shaped_line, write_report, write_trace, TraceReader};
use vgpo_core::{shape_group, ShapedAdvantages};

use crate::args::{DiagnoseArgs, ShapeArgs, SynthArgs, TrainArgs};
use crate::Failure;

const DEFAULT_GROUPS: usize = 100;
const DEFAULT_STEPS: usize = 300;
const DEFAULT_SEEDS: usize = 5;

fn merged(flags: Overrides, config: Option<&Path>) -> Result<Overrides, Failure> {
    match config {
        Some(path) => {
            let file = read_config(path).with_context(|| format!("config {}", path.display()))?;
            Ok(flags.or(file))
        }
        None => Ok(flags),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// `out/report.json` -> `out/report.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

/// Runs `body`, deleting `outputs` if it fails.
fn cleanup_on_error(outputs: &[&Path], body: impl FnOnce() -> Result<(), Failure>) -> Result<(), Failure> {
    let result = body();
    if result.is_err() {
        for p in outputs {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

#[derive(Default)]
struct ShapeSummary {
    groups: usize,
    trajectories: usize,
    degenerate: usize,
    tokens: usize,
    abs_sum: f64,
}

impl ShapeSummary {
    fn add(&mut self, s: &ShapedAdvantages) {
        self.groups += 1;
        self.trajectories += s.trajectories.len();
        self.degenerate += s.degenerate_group as usize;
        for t in &s.trajectories {
            self.tokens += t.shaped_adv.len();
            self.abs_sum += t.shaped_adv.iter().map(|a| a.abs()).sum::<f64>();
        }
    }
}

pub fn shape(a: ShapeArgs) -> Result<(), Failure> {
    let o = merged(a.shaping.overrides(), a.config.as_deref())?;
    let cfg = o.shaping()?;
    let chunk_size = a.chunk.max(1);
    let mut reader = TraceReader::new(open(&a.input)?);
    let mut summary = ShapeSummary::default();

    cleanup_on_error(&[&a.output], || {
        let mut out = create(&a.output)?;
        loop {
            let mut chunk = Vec::with_capacity(chunk_size);
            while chunk.len() < chunk_size {
                match reader.next_with_line() {
                    None => break,
                    Some((_, Err(e))) => return Err(anyhow!(e).context(a.input.display().to_string()).into()),
                    Some((line, Ok(g))) => chunk.push((line, g)),
                }
            }
            if chunk.is_empty() {
                break;
            }
            let shaped: Vec<Result<ShapedAdvantages, Failure>> = chunk
                .par_iter()
                .map(|(line, g)| {
                    let s = shape_group(g, &cfg).map_err(|e| Failure::Input(anyhow!("line {line}: {e}")))?;
                    s.check_invariants()
                        .map_err(|m| Failure::Invariant(format!("line {line} (group {}): {m}", g.group_id)))?;
                    Ok(s)
                })
                .collect();
            for s in shaped {
                let s = s?;
                summary.add(&s);
                writeln!(out, "{}", shaped_line(&s))?;
            }
        }
        out.flush()?;
        Ok(())
    })?;

    let mean_abs = if summary.tokens > 0 {
        summary.abs_sum / summary.tokens as f64
    } else {
        0.0
    };
    println!("groups: {}", summary.groups);
    println!("trajectories: {}", summary.trajectories);
    println!("degenerate groups: {}", summary.degenerate);
    println!("mean |shaped advantage|: {mean_abs:.6}");
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseReport {
    selector: Selector,
    split_point: f64,
    groups: usize,
    trajectories: usize,
    /// Mean over every defined ratio, regardless of outcome.
    mean_ratio: Option<f64>,
    undefined: usize,
    ratios: RatioReport,
}

pub fn diagnose(a: DiagnoseArgs) -> Result<(), Failure> {
    let flags = Overrides {
        split_point: a.split_point,
        selector: a.selector.clone(),
        epsilon: a.epsilon,
        ..Overrides::default()
    };
    let o = merged(flags, a.config.as_deref())?;
    let selector = o.selector()?;
    let split_point = o.split_point()?;
    let eps = o.shaping()?.epsilon_smooth;

    let ratios_path = sibling(&a.output, "ratios.csv");
    let alloc_path = sibling(&a.output, "allocation.csv");
    let mut reader = TraceReader::new(open(&a.input)?);

    cleanup_on_error(&[&a.output, &ratios_path, &alloc_path], || {
        let mut alloc = csv::Writer::from_writer(create(&alloc_path)?);
        alloc.write_record([
            "group_id",
            "trajectory",
            "step",
            "image",
            "query",
            "history",
            "zero_mass",
        ])?;
        let mut acc = RatioAccumulator::new(selector, split_point, eps);
        let mut missing = Vec::new();
        let mut groups = 0;

        while let Some((line, group)) = reader.next_with_line() {
            let g = group.map_err(|e| anyhow!(e).context(a.input.display().to_string()))?;
            groups += 1;
            let lacking: Vec<usize> = g
                .trajectories
                .iter()
                .enumerate()
                .filter(|(_, t)| !selector.available(t))
                .map(|(i, _)| i)
                .collect();
            if !lacking.is_empty() {
                missing.push(format!("line {line} (group {}, trajectories {lacking:?})", g.group_id));
                continue;
            }
            acc.push(&g).map_err(|e| anyhow!("line {line}: {e}"))?;
            for (i, t) in g.trajectories.iter().enumerate() {
                let Some(split) = t.attn_split.as_deref() else {
                    continue;
                };
                let curve = attention_allocation(Some(split)).map_err(|e| anyhow!("line {line}: {e}"))?;
                for (step, (row, zero)) in curve.steps.iter().zip(&curve.zero_mass).enumerate() {
                    alloc.write_record([
                        g.group_id.clone(),
                        i.to_string(),
                        (step + 1).to_string(),
                        row[0].to_string(),
                        row[1].to_string(),
                        row[2].to_string(),
                        zero.to_string(),
                    ])?;
                }
            }
        }
        if !missing.is_empty() {
            return Err(anyhow!(
                "selector {} needs attn_split, missing in {} record(s): {}",
                selector.name(),
                missing.len(),
                missing.join("; ")
            )
            .into());
        }
        alloc.flush()?;

        let ratios = acc.finish();
        let mut table = csv::Writer::from_writer(create(&ratios_path)?);
        table.write_record(["group_id", "trajectory", "reward", "outcome", "ratio"])?;
        for e in &ratios.entries {
            let outcome = if e.reward > 0.0 { "correct" } else { "incorrect" };
            table.write_record([
                e.group_id.clone(),
                e.trajectory.to_string(),
                e.reward.to_string(),
                outcome.to_string(),
                e.ratio.map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
        table.flush()?;

        let defined: Vec<f64> = ratios.entries.iter().filter_map(|e| e.ratio).collect();
        let report = DiagnoseReport {
            selector,
            split_point,
            groups,
            trajectories: ratios.entries.len(),
            mean_ratio: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            undefined: ratios.entries.len() - defined.len(),
            ratios,
        };
        write_report(&report, create(&a.output)?)?;

        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!("trajectories: {} ({} undefined)", report.trajectories, report.undefined);
        println!("mean {} ratio: {}", selector.name(), fmt(report.mean_ratio));
        println!(
            "correct: {}  incorrect: {}",
            fmt(report.ratios.correct.as_ref().and_then(|p| p.mean)),
            fmt(report.ratios.incorrect.as_ref().and_then(|p| p.mean)),
        );
        Ok(())
    })
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let flags = Overrides {
        groups: a.groups,
        ..a.lab.overrides()
    };
    let o = merged(flags, a.config.as_deref())?;
    let cfg = o.synth()?;
    let n = o.groups.unwrap_or(DEFAULT_GROUPS);
    let corpus = generate_corpus(&cfg, n)?;
    cleanup_on_error(&[&a.output], || {
        write_trace(&corpus, create(&a.output)?)?;
        Ok(())
    })?;
    println!("wrote {n} groups to {}", a.output.display());
    Ok(())
}

fn write_curves(report: &ExperimentReport, path: &Path) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["algo", "seed", "step", "mean_reward", "rho_ratio", "mean_objective"])?;
    for run in &report.runs {
        for m in &run.curve {
            w.write_record([
                report.algo.name().to_string(),
                run.seed.to_string(),
                m.step.to_string(),
                m.mean_reward.to_string(),
                m.rho_ratio.to_string(),
                m.mean_objective.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn train_toy(a: TrainArgs) -> Result<(), Failure> {
    let shaping_flags = a.shaping.overrides();
    let lab_flags = a.lab.overrides();
    let flags = Overrides {
        algo: a.algo.clone(),
        steps: a.steps,
        seeds: a.seeds,
        ..shaping_flags.or(lab_flags)
    };
    let o = merged(flags, a.config.as_deref())?;
    let shaping = o.shaping()?;
    let synth = o.synth()?;
    let algo = o.algo()?;
    let loss_agg = o.loss_agg()?;
    let steps = o.steps.unwrap_or(DEFAULT_STEPS);
    let seeds: Vec<u64> = (0..o.seeds.unwrap_or(DEFAULT_SEEDS) as u64)
        .map(|k| synth.seed.wrapping_add(k))
        .collect();

    let report = run_experiment(&synth, &shaping, algo, loss_agg, steps, &seeds)?;
    let curves_path = sibling(&a.output, "curves.csv");
    cleanup_on_error(&[&a.output, &curves_path], || {
        write_curves(&report, &curves_path)?;
        write_report(&report, create(&a.output)?)?;
        Ok(())
    })?;

    println!("{} over {steps} steps", algo.name());
    for run in &report.runs {
        println!(
            "seed {}: reward {:.4} -> {:.4}, rho ratio {:.4} -> {:.4}",
            run.seed, run.initial.mean_reward, run.final_reward, run.initial.rho_ratio, run.final_rho_ratio
        );
    }
    println!(
        "mean final: reward {:.4}, rho ratio {:.4}",
        report.mean_final_reward(),
        report.mean_final_rho_ratio()
    );
    Ok(())
}
