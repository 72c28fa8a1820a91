//! Evaluation: task metrics (classification accuracy; strict exact-solve
//! for segmentation), per-sample halting records, difficulty/halting
//! correlation statistics, and the extrapolation protocol that evaluates
//! a checkpoint on harder data with a larger inference budget than it
//! was trained with.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::shard::Shard;
use crate::error::{AdrnnError, Result};
use crate::model::{eval_batch, HaltMode, Model, TaskKind};

/// Percent of classification logits whose sign matches the binary label.
pub fn accuracy_pathfinder(logits: &[f32], labels: &[f32]) -> f64 {
    assert_eq!(logits.len(), labels.len(), "logits vs labels");
    if logits.is_empty() {
        return 0.0;
    }
    let correct = logits
        .iter()
        .zip(labels.iter())
        .filter(|(&z, &y)| (z > 0.0) == (y > 0.5))
        .count();
    100.0 * correct as f64 / logits.len() as f64
}

/// Percent of mazes solved exactly: every pixel of the thresholded
/// prediction (logit > 0) must equal the mask. No partial credit.
pub fn exact_solve_mazes(pred_logits: &ArrayD<f32>, masks: &ArrayD<f32>) -> f64 {
    assert_eq!(pred_logits.shape(), masks.shape(), "prediction vs mask");
    let n = pred_logits.shape()[0];
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    for i in 0..n {
        let p = pred_logits.index_axis(ndarray::Axis(0), i);
        let m = masks.index_axis(ndarray::Axis(0), i);
        if p.iter().zip(m.iter()).all(|(&z, &y)| (z > 0.0) == (y > 0.5)) {
            correct += 1;
        }
    }
    100.0 * correct as f64 / n as f64
}

/// One evaluated sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    /// Difficulty level parameter (grid size or path length).
    pub level: u32,
    /// Per-sample difficulty proxy used for correlations: solution
    /// length in pixels for mazes, the level itself for classification.
    pub difficulty: f64,
    pub t_halt: usize,
    pub halted: bool,
    pub correct: bool,
    /// Final cumulative halting score (1.0 for non-adaptive modes).
    pub p_final: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: HaltMode,
    pub budget: usize,
    pub count: usize,
    pub accuracy: f64,
    pub per_level_accuracy: BTreeMap<u32, f64>,
    pub per_level_mean_t_halt: BTreeMap<u32, f64>,
    /// level -> counts of t_halt in bins 1..=budget.
    pub halting_histogram: BTreeMap<u32, Vec<usize>>,
    pub unhalted_fraction: f64,
    pub spearman_rho: f64,
    pub pearson_r: f64,
}

/// Evaluate a model over shards; returns the report plus per-sample rows.
pub fn evaluate_shards(
    model: &Model,
    shards: &[Shard],
    mode: HaltMode,
    budget: usize,
) -> Result<(EvalReport, Vec<SampleRecord>)> {
    let mut records = Vec::new();
    let mut next_id = 0usize;
    for shard in shards {
        let n = shard.count();
        for start in (0..n).step_by(16) {
            let rows: Vec<usize> = (start..(start + 16).min(n)).collect();
            let (xs, ys) = gather(shard, &rows);
            let out = eval_batch(model, &xs, mode, budget)?;
            for (i, &r) in rows.iter().enumerate() {
                let level = shard.difficulty[r] as u32;
                let (correct, difficulty) = match model.config.task {
                    TaskKind::Pathfinder => {
                        let z = out.logits[[i]];
                        let y = ys[[i]];
                        ((z > 0.0) == (y > 0.5), level as f64)
                    }
                    TaskKind::Mazes => {
                        let p = out.logits.index_axis(ndarray::Axis(0), i);
                        let m = ys.index_axis(ndarray::Axis(0), i);
                        let ok =
                            p.iter().zip(m.iter()).all(|(&z, &y)| (z > 0.0) == (y > 0.5));
                        // Solution length in pixels from the mask.
                        (ok, m.iter().filter(|&&v| v > 0.5).count() as f64)
                    }
                };
                let p_final = match &out.traces {
                    Some(tr) => *tr[i].cum.last().unwrap_or(&1.0),
                    None => 1.0,
                };
                records.push(SampleRecord {
                    sample_id: next_id,
                    level,
                    difficulty,
                    t_halt: out.t_halt[i],
                    halted: out.halted[i],
                    correct,
                    p_final,
                });
                next_id += 1;
            }
        }
    }
    let report = summarize(&records, mode, budget);
    Ok((report, records))
}

fn gather(shard: &Shard, rows: &[usize]) -> (ArrayD<f32>, ArrayD<f32>) {
    let ishape = shard.images.shape();
    let lshape = shard.labels.shape();
    let mut xs = ArrayD::<f32>::zeros(ndarray::IxDyn(&[&[rows.len()], &ishape[1..]].concat()));
    let mut ys = ArrayD::<f32>::zeros(ndarray::IxDyn(&[&[rows.len()], &lshape[1..]].concat()));
    for (i, &r) in rows.iter().enumerate() {
        xs.index_axis_mut(ndarray::Axis(0), i)
            .assign(&shard.images.index_axis(ndarray::Axis(0), r));
        ys.index_axis_mut(ndarray::Axis(0), i)
            .assign(&shard.labels.index_axis(ndarray::Axis(0), r));
    }
    (xs, ys)
}

/// Aggregate per-sample records into a report.
pub fn summarize(records: &[SampleRecord], mode: HaltMode, budget: usize) -> EvalReport {
    let count = records.len();
    let mut per_level: BTreeMap<u32, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        per_level.entry(r.level).or_default().push(r);
    }
    let accuracy = if count == 0 {
        0.0
    } else {
        100.0 * records.iter().filter(|r| r.correct).count() as f64 / count as f64
    };
    let mut per_level_accuracy = BTreeMap::new();
    let mut per_level_mean_t_halt = BTreeMap::new();
    let mut halting_histogram = BTreeMap::new();
    for (&lvl, rs) in &per_level {
        let n = rs.len() as f64;
        per_level_accuracy.insert(lvl, 100.0 * rs.iter().filter(|r| r.correct).count() as f64 / n);
        per_level_mean_t_halt.insert(lvl, rs.iter().map(|r| r.t_halt as f64).sum::<f64>() / n);
        let mut bins = vec![0usize; budget];
        for r in rs {
            let b = r.t_halt.clamp(1, budget);
            bins[b - 1] += 1;
        }
        halting_histogram.insert(lvl, bins);
    }
    let x: Vec<f64> = records.iter().map(|r| r.difficulty).collect();
    let y: Vec<f64> = records.iter().map(|r| r.t_halt as f64).collect();
    EvalReport {
        mode,
        budget,
        count,
        accuracy,
        per_level_accuracy,
        per_level_mean_t_halt,
        halting_histogram,
        unhalted_fraction: if count == 0 {
            0.0
        } else {
            records.iter().filter(|r| !r.halted).count() as f64 / count as f64
        },
        spearman_rho: spearman(&x, &y),
        pearson_r: pearson(&x, &y),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    pub t_train: usize,
    pub t_inference: usize,
    /// Full-budget run at t_inference.
    pub full: EvalReport,
    /// Comparison run truncated to the training budget.
    pub truncated: EvalReport,
}

/// Evaluate a checkpoint on (typically harder) shards at an inference
/// budget at least as large as its training budget, alongside a
/// truncated run at the training budget for comparison.
pub fn run_extrapolation(
    model: &Model,
    shards: &[Shard],
    t_inference: usize,
    mode: HaltMode,
) -> Result<(ExtrapolationReport, Vec<SampleRecord>)> {
    let t_train = model.config.halting.t_train;
    if t_inference < t_train {
        return Err(AdrnnError::Config(format!(
            "t_inference {t_inference} below the checkpoint's training budget {t_train}"
        )));
    }
    let (full, records) = evaluate_shards(model, shards, mode, t_inference)?;
    let (truncated, _) = evaluate_shards(model, shards, mode, t_train)?;
    Ok((
        ExtrapolationReport {
            t_train,
            t_inference,
            full,
            truncated,
        },
        records,
    ))
}

// ---- statistics ----

/// Pearson correlation coefficient; 0 when degenerate.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks, ties shared.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("NaN in rank input"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    pearson(&ranks(x), &ranks(y))
}

/// One-sided Welch t-test p-value for mean(b) > mean(a).
pub fn welch_one_sided_p(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if na < 2.0 || nb < 2.0 {
        return 1.0;
    }
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (nb - 1.0);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return if mb > ma { 0.0 } else { 1.0 };
    }
    let t = (mb - ma) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("t distribution");
    1.0 - dist.cdf(t)
}

// ---- artifacts ----

/// Write `halting.csv`: sample_id, level, difficulty, t_halt, halted,
/// correct, p_final.
pub fn write_halting_csv(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = String::from("sample_id,level,difficulty,t_halt,halted,correct,p_final\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sample_id, r.level, r.difficulty, r.t_halt, r.halted as u8, r.correct as u8, r.p_final
        ));
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_halting_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(AdrnnError::ShardFormat(format!(
                "halting.csv line {} has {} fields, expected 7",
                ln + 1,
                f.len()
            )));
        }
        let parse_err = |what: &str| {
            AdrnnError::ShardFormat(format!("halting.csv line {}: bad {what}", ln + 1))
        };
        out.push(SampleRecord {
            sample_id: f[0].parse().map_err(|_| parse_err("sample_id"))?,
            level: f[1].parse().map_err(|_| parse_err("level"))?,
            difficulty: f[2].parse().map_err(|_| parse_err("difficulty"))?,
            t_halt: f[3].parse().map_err(|_| parse_err("t_halt"))?,
            halted: f[4] == "1",
            correct: f[5] == "1",
            p_final: f[6].parse().map_err(|_| parse_err("p_final"))?,
        });
    }
    Ok(out)
}

pub fn write_report<S: Serialize>(path: &Path, report: &S) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(report)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
