//! Learning curves, the score/real-DSC scatter and a text summary.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use dsal_core::metrics::spearman_rank;

use crate::csv_io::{read_metrics, read_scores, MetricsRow, ScoreRow, FULL_POLICY};
use crate::run::SCORES_FILE;
use crate::svg::{learning_curves, scatter, BandPoint, Series};
use crate::CliError;

pub const CURVE_FILE: &str = "learning_curve.svg";
pub const SCATTER_FILE: &str = "correlation.svg";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Round whose pool scores the scatter shows when available.
pub const SCATTER_ROUND: usize = 2;

/// Seed-aggregated test DSC of one policy, ordered by label count.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub policy: String,
    pub points: Vec<BandPoint>,
}

/// Policies in order of first appearance, `full` excluded.
pub fn curves(rows: &[MetricsRow]) -> Vec<Curve> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_policy: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.policy != FULL_POLICY) {
        if !order.contains(&r.policy.as_str()) {
            order.push(&r.policy);
        }
        by_policy
            .entry(&r.policy)
            .or_default()
            .entry(r.labels_used)
            .or_default()
            .push(r.test_dsc);
    }
    order
        .into_iter()
        .map(|p| Curve {
            policy: p.to_owned(),
            points: by_policy[p]
                .iter()
                .map(|(&x, v)| BandPoint {
                    x: x as f64,
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                })
                .collect(),
        })
        .collect()
}

/// Seed-mean test DSC of the full-annotation rows and their label count.
pub fn full_reference(rows: &[MetricsRow]) -> Option<(f64, usize)> {
    let full: Vec<&MetricsRow> = rows.iter().filter(|r| r.policy == FULL_POLICY).collect();
    if full.is_empty() {
        return None;
    }
    let mean = full.iter().map(|r| r.test_dsc).sum::<f64>() / full.len() as f64;
    Some((mean, full.iter().map(|r| r.labels_used).max().unwrap_or(0)))
}

/// Smallest label count at which the curve's seed mean reaches `target`.
pub fn labels_to_reach(curve: &Curve, target: f64) -> Option<usize> {
    curve.points.iter().find(|p| p.mean >= target).map(|p| p.x as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    pub policy: String,
    pub round: usize,
    pub points: Vec<(f64, f64)>,
    pub rho: Option<f64>,
}

/// Pool scores of one round of one policy, pooled over seeds. Prefers
/// `consistency_high`, then the first policy; prefers [`SCATTER_ROUND`],
/// then the middle round.
pub fn correlation(scores: &[ScoreRow]) -> Option<Correlation> {
    let with_truth: Vec<&ScoreRow> = scores.iter().filter(|s| s.r_dsc.is_some()).collect();
    let policy = with_truth
        .iter()
        .find(|s| s.policy == "consistency_high")
        .or(with_truth.first())?
        .policy
        .clone();
    let rounds: Vec<usize> = {
        let mut r: Vec<usize> = with_truth.iter().filter(|s| s.policy == policy).map(|s| s.round).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    let round = if rounds.contains(&SCATTER_ROUND) {
        SCATTER_ROUND
    } else {
        rounds[rounds.len() / 2]
    };
    let points: Vec<(f64, f64)> = with_truth
        .iter()
        .filter(|s| s.policy == policy && s.round == round)
        .map(|s| (s.mean_score, s.r_dsc.expect("filtered")))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let rho = spearman_rank(&xs, &ys).ok().flatten();
    Some(Correlation {
        policy,
        round,
        points,
        rho,
    })
}

fn fmt_rho(rho: Option<f64>) -> String {
    rho.map_or_else(|| "undefined".to_owned(), |r| format!("{r:.3}"))
}

pub fn summary(rows: &[MetricsRow], correlation: Option<&Correlation>) -> String {
    let mut out = String::new();
    let curves = curves(rows);
    let seeds = |p: &str| {
        let mut s: Vec<u64> = rows.iter().filter(|r| r.policy == p).map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    match full_reference(rows) {
        Some((dsc, pool)) => {
            let target = 0.95 * dsc;
            let _ = writeln!(
                out,
                "full-annotation test DSC: {dsc:.4} ({pool} labels, {} seeds); 95% target {target:.4}",
                seeds(FULL_POLICY)
            );
            for c in &curves {
                match labels_to_reach(c, target) {
                    Some(n) => {
                        let _ = writeln!(
                            out,
                            "{}: reaches 95% of full-annotation DSC at {n} labels ({:.1}% of the pool)",
                            c.policy,
                            100.0 * n as f64 / pool.max(1) as f64
                        );
                    }
                    None => {
                        let _ = writeln!(out, "{}: never reaches 95% of full-annotation DSC", c.policy);
                    }
                }
            }
        }
        None => {
            let _ = writeln!(out, "no full-annotation rows; 95% label counts not available");
        }
    }
    for c in &curves {
        let _ = writeln!(out, "{} ({} seeds) mean test DSC by labels:", c.policy, seeds(&c.policy));
        for p in &c.points {
            let _ = writeln!(out, "  {:>4} {:.4} [{:.4}, {:.4}]", p.x, p.mean, p.min, p.max);
        }
    }
    let mut rhos: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(rho) = r.spearman {
            rhos.entry((&r.policy, r.round)).or_default().push(rho);
        }
    }
    if !rhos.is_empty() {
        let _ = writeln!(out, "per-round Spearman(score, real DSC), seed mean:");
        for ((p, round), v) in &rhos {
            let _ = writeln!(
                out,
                "  {p} round {round}: {:.3} over {} seeds",
                v.iter().sum::<f64>() / v.len() as f64,
                v.len()
            );
        }
    }
    if let Some(c) = correlation {
        let _ = writeln!(
            out,
            "scatter: {} round {}, {} pooled samples, rho {}",
            c.policy,
            c.round,
            c.points.len(),
            fmt_rho(c.rho)
        );
    }
    out
}

/// Files written by [`report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutput {
    pub curve: PathBuf,
    pub scatter: Option<PathBuf>,
    pub summary: PathBuf,
    pub text: String,
}

/// Reads `metrics.csv` (and `scores.csv` beside it, when present) and writes
/// the plots and summary into `out_dir`.
pub fn report(metrics: &Path, out_dir: &Path) -> Result<ReportOutput, CliError> {
    let rows = read_metrics(metrics)?;
    let scores_path = metrics.with_file_name(SCORES_FILE);
    let corr = if scores_path.exists() {
        correlation(&read_scores(&scores_path)?)
    } else {
        log::warn!("{} not found; skipping the scatter plot", scores_path.display());
        None
    };
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir.display()))?;
    let write = |name: &str, text: &str| -> Result<PathBuf, CliError> {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(CliError::io(path.display()))?;
        Ok(path)
    };

    let series: Vec<Series> = curves(&rows)
        .into_iter()
        .map(|c| Series {
            name: c.policy,
            points: c.points,
        })
        .collect();
    let full = full_reference(&rows);
    let curve = write(
        CURVE_FILE,
        &learning_curves(
            "Test DSC vs labels (seed mean, min–max band)",
            "labeled samples",
            "test DSC",
            &series,
            full.map(|(d, _)| ("full annotation", d)),
        ),
    )?;
    let scatter_path = match &corr {
        Some(c) => Some(write(
            SCATTER_FILE,
            &scatter(
                &format!("{} round {}: consistency vs real DSC", c.policy, c.round),
                "mean consistency score",
                "real DSC",
                &c.points,
                &format!("Spearman rho = {}", fmt_rho(c.rho)),
            ),
        )?),
        None => None,
    };
    let text = summary(&rows, corr.as_ref());
    let summary_path = write(SUMMARY_FILE, &text)?;
    Ok(ReportOutput {
        curve,
        scatter: scatter_path,
        summary: summary_path,
        text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(policy: &str, seed: u64, labels: usize, dsc: f64) -> MetricsRow {
        MetricsRow {
            policy: policy.into(),
            seed,
            round: labels / 10 - 1,
            labels_used: labels,
            test_dsc: dsc,
            val_dsc: dsc,
            mean_pool_score: None,
            spearman: None,
        }
    }

    #[test]
    fn curves_average_seeds() {
        let rows = vec![
            row("a", 0, 10, 0.2),
            row("a", 1, 10, 0.4),
            row("a", 0, 20, 0.9),
            row("a", 1, 20, 0.7),
            row(FULL_POLICY, 0, 100, 0.9),
            row(FULL_POLICY, 1, 100, 0.8),
        ];
        let c = &curves(&rows)[0];
        assert_eq!(c.points.len(), 2);
        assert!((c.points[0].mean - 0.3).abs() < 1e-12);
        assert_eq!((c.points[1].min, c.points[1].max), (0.7, 0.9));
        let (full, pool) = full_reference(&rows).unwrap();
        assert!((full - 0.85).abs() < 1e-12);
        assert_eq!(pool, 100);
        assert_eq!(labels_to_reach(c, 0.95 * full), None);
        assert_eq!(labels_to_reach(c, 0.75), Some(20));
    }

    #[test]
    fn perfectly_correlated_scores_give_rho_one() {
        let scores: Vec<ScoreRow> = (0..10)
            .map(|i| ScoreRow {
                policy: "random".into(),
                seed: 0,
                round: 1,
                sample_id: format!("s{i}"),
                l_dsc: 0.0,
                m_dsc: 0.0,
                mean_score: i as f64 / 10.0,
                r_dsc: Some(i as f64 / 20.0),
            })
            .collect();
        let c = correlation(&scores).unwrap();
        assert_eq!((c.round, c.points.len()), (1, 10));
        assert_eq!(c.rho, Some(1.0));
        assert!(summary(&[row("random", 0, 10, 0.5)], Some(&c)).contains("rho 1.000"));
    }
}
