//! Seed-level summary tables, significance matrices and plot-ready series.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::rank_test::{significance_matrix, Method, PairwiseTest};
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub round: usize,
    pub client_id: usize,
    pub sq_distance: f64,
}

/// What the report needs from one finished experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub algorithm: String,
    pub seed: u64,
    pub selected_round: usize,
    pub test_metrics: BTreeMap<String, f64>,
    pub elapsed_secs: f64,
    pub distances: Vec<DistanceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

/// Mean and sample (n − 1) standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

/// Per algorithm and metric: mean ± std over seeds. Wall-clock time is
/// reported as the metric `elapsed_secs`.
pub fn summary_table(records: &[SeedRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        for (metric, &v) in &r.test_metrics {
            groups
                .entry((r.algorithm.clone(), metric.clone()))
                .or_default()
                .push(v);
        }
        groups
            .entry((r.algorithm.clone(), "elapsed_secs".to_string()))
            .or_default()
            .push(r.elapsed_secs);
    }
    groups
        .into_iter()
        .map(|((algorithm, metric), vals)| {
            let (mean, std) = mean_std(&vals);
            SummaryRow {
                algorithm,
                metric,
                mean,
                std,
                n_seeds: vals.len(),
            }
        })
        .collect()
}

/// Test metric values per algorithm, in seed order.
pub fn seed_values(records: &[SeedRecord], metric: &str) -> Vec<(String, Vec<f64>)> {
    let mut by_alg: BTreeMap<&str, Vec<(u64, f64)>> = BTreeMap::new();
    for r in records {
        if let Some(&v) = r.test_metrics.get(metric) {
            by_alg.entry(&r.algorithm).or_default().push((r.seed, v));
        }
    }
    by_alg
        .into_iter()
        .map(|(alg, mut vs)| {
            vs.sort_by_key(|&(s, _)| s);
            (alg.to_string(), vs.into_iter().map(|(_, v)| v).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceSpec {
    pub metric: String,
    pub method: Method,
    pub one_sided: bool,
    pub higher_is_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub summary: Vec<SummaryRow>,
    pub significance: Vec<PairwiseTest>,
    pub records: Vec<SeedRecord>,
}

pub fn assemble_report(
    records: &[SeedRecord],
    sig: Option<&SignificanceSpec>,
) -> Result<ReportBundle> {
    let significance = match sig {
        Some(s) => {
            let vals = seed_values(records, &s.metric);
            if vals.len() >= 2 {
                significance_matrix(&vals, s.method, s.one_sided, s.higher_is_better)?
            } else {
                Vec::new()
            }
        }
        None => Vec::new(),
    };
    Ok(ReportBundle {
        summary: summary_table(records),
        significance,
        records: records.to_vec(),
    })
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let out = w
        .write_record(header)
        .and_then(|_| fill(&mut w))
        .and_then(|_| w.flush().map_err(csv::Error::from));
    out.map_err(|e| Error::SchemaMismatch(format!("csv encoding: {e}")))?;
    w.into_inner()
        .map_err(|e| Error::SchemaMismatch(format!("csv encoding: {e}")))
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    csv_bytes(&["algorithm", "metric", "mean", "std", "n_seeds"], |w| {
        for r in rows {
            w.write_record([
                r.algorithm.clone(),
                r.metric.clone(),
                r.mean.to_string(),
                r.std.to_string(),
                r.n_seeds.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn significance_csv(tests: &[PairwiseTest]) -> Result<Vec<u8>> {
    csv_bytes(&["alg_a", "alg_b", "u", "p", "label"], |w| {
        for t in tests {
            w.write_record([
                t.alg_a.clone(),
                t.alg_b.clone(),
                t.test.u_statistic.to_string(),
                t.test.p_value.to_string(),
                t.verdict.as_str().to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn distance_csv(rows: &[DistanceRow]) -> Result<Vec<u8>> {
    csv_bytes(&["round", "client_id", "sq_distance"], |w| {
        for r in rows {
            w.write_record([
                r.round.to_string(),
                r.client_id.to_string(),
                r.sq_distance.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn elapsed_csv(records: &[SeedRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &["algorithm", "seed", "elapsed_secs", "elapsed_hours"],
        |w| {
            for r in records {
                w.write_record([
                    r.algorithm.clone(),
                    r.seed.to_string(),
                    r.elapsed_secs.to_string(),
                    (r.elapsed_secs / 3600.0).to_string(),
                ])?;
            }
            Ok(())
        },
    )
}

/// Markdown table with one row per algorithm and one `mean ± std` column per metric.
pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let metrics: Vec<&str> = {
        let mut m: Vec<&str> = rows.iter().map(|r| r.metric.as_str()).collect();
        m.sort();
        m.dedup();
        m
    };
    let mut algs: Vec<&str> = rows.iter().map(|r| r.algorithm.as_str()).collect();
    algs.dedup();
    let mut out = format!("| algorithm | {} |\n", metrics.join(" | "));
    out.push_str(&format!("|---|{}\n", "---|".repeat(metrics.len())));
    for alg in algs {
        let cells: Vec<String> = metrics
            .iter()
            .map(|m| {
                rows.iter()
                    .find(|r| r.algorithm == alg && r.metric == *m)
                    .map(|r| format_mean_std(r.mean, r.std))
                    .unwrap_or_else(|| "-".to_string())
            })
            .collect();
        out.push_str(&format!("| {alg} | {} |\n", cells.join(" | ")));
    }
    out
}

/// Writes the bundle under `dir` and returns the files written.
pub fn write_report(dir: &Path, bundle: &ReportBundle) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    put("summary.csv".into(), summary_csv(&bundle.summary)?)?;
    put(
        "summary.md".into(),
        summary_markdown(&bundle.summary).into_bytes(),
    )?;
    put("elapsed.csv".into(), elapsed_csv(&bundle.records)?)?;
    if !bundle.significance.is_empty() {
        put(
            "significance.csv".into(),
            significance_csv(&bundle.significance)?,
        )?;
    }
    for r in &bundle.records {
        put(
            format!("distances_{}_seed{}.csv", r.algorithm, r.seed),
            distance_csv(&r.distances)?,
        )?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(alg: &str, seed: u64, auroc: f64) -> SeedRecord {
        SeedRecord {
            algorithm: alg.into(),
            seed,
            selected_round: 1,
            test_metrics: BTreeMap::from([("auroc".to_string(), auroc)]),
            elapsed_secs: 1.0,
            distances: vec![DistanceRow {
                round: 1,
                client_id: 0,
                sq_distance: 0.5,
            }],
        }
    }

    #[test]
    fn sample_std_convention() {
        let (m, s) = mean_std(&[70.0, 72.0, 74.0]);
        assert_eq!(format_mean_std(m, s), "72.00 ± 2.00");
        let (m, s) = mean_std(&[0.7]);
        assert_eq!(format_mean_std(m, s), "0.70 ± 0.00");
    }

    #[test]
    fn summary_and_files() {
        let records = vec![
            rec("fedavg", 0, 0.7),
            rec("fedavg", 1, 0.72),
            rec("fedbn", 0, 0.8),
            rec("fedbn", 1, 0.81),
        ];
        let spec = SignificanceSpec {
            metric: "auroc".into(),
            method: Method::Exact,
            one_sided: false,
            higher_is_better: true,
        };
        let bundle = assemble_report(&records, Some(&spec)).unwrap();
        let auroc = bundle
            .summary
            .iter()
            .find(|r| r.algorithm == "fedavg" && r.metric == "auroc")
            .unwrap();
        assert_eq!(auroc.n_seeds, 2);
        assert!((auroc.mean - 0.71).abs() < 1e-12);
        assert_eq!(bundle.significance.len(), 4);

        let dir = tempfile::tempdir().unwrap();
        let files = write_report(dir.path(), &bundle).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(csv.starts_with("algorithm,metric,mean,std,n_seeds\n"));
        assert!(files
            .iter()
            .any(|p| p.ends_with("distances_fedbn_seed1.csv")));
        let md = std::fs::read_to_string(dir.path().join("summary.md")).unwrap();
        assert!(md.contains("| fedbn |"));
    }
}
