//! Subcommand implementations.

use std::path::{Path, PathBuf};

use fedsim_core::config::{
    default_search_space, parse_and_validate_config, GridSpec, SelectionMetric,
};
use fedsim_core::data::write_partition;
use fedsim_core::io::write_atomic;
use fedsim_core::metrics::report::{significance_csv, summary_markdown, write_report};
use fedsim_core::metrics::{assemble_report, SignificanceSpec};
use fedsim_core::orchestrator::{find_result_dirs, read_result};
use fedsim_core::{
    compare_results, presets, run_experiment, Error, ExperimentConfig, ExperimentResult,
    PartitionSpec, Result,
};
use log::{info, warn};
use rayon::prelude::*;

use crate::{
    Benchmark, Command, CompareArgs, InitArgs, PartitionArgs, ReportArgs, RunArgs,
    SignificanceArgs, SweepArgs,
};

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Partition(a) => partition(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
        Command::Init(a) => init(a),
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::SchemaMismatch(format!("csv encoding: {e}"))
}

fn echo_source(config: &Path, out: &Path, overrides: &[String]) -> Result<()> {
    let text = std::fs::read(config).map_err(|e| Error::io(config, e))?;
    write_atomic(&out.join("config.source.toml"), &text)?;
    let inv = serde_json::json!({ "config": config, "overrides": overrides });
    write_atomic(
        &out.join("invocation.json"),
        &serde_json::to_vec_pretty(&inv)?,
    )
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = parse_and_validate_config(&a.config.config, &a.config.overrides)?;
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds.clone();
    }
    if a.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::config("out_dir", "pass --out or set out_dir in the config"))?;
    echo_source(&a.config.config, &out, &a.config.overrides)?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let r = run_experiment(&cfg, seed, Some(&out.join(format!("seed_{seed}"))))?;
        println!(
            "{} seed {seed}: selected round {}, validation {} {}, {:.1} s",
            r.algorithm,
            r.selected_round,
            r.selection_metric.name(),
            r.best_mean_val.map_or("n/a".into(), |v| format!("{v:.4}")),
            r.elapsed_secs
        );
        records.push(r.seed_record());
    }
    let bundle = assemble_report(&records, None)?;
    write_report(&out, &bundle)?;
    print!("{}", summary_markdown(&bundle.summary));
    Ok(())
}

struct Point {
    settings: Vec<String>,
    cfg: ExperimentConfig,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sweep(a: SweepArgs) -> Result<()> {
    let base = parse_and_validate_config(&a.config.config, &a.config.overrides)?;
    let grid = match &a.grid {
        Some(p) => GridSpec::from_path(p)?,
        None => default_search_space(base.strategy.algorithm),
    };
    let seeds = if a.seeds.is_empty() {
        base.seeds.clone()
    } else {
        a.seeds.clone()
    };

    // every point must validate before anything runs
    let mut points = Vec::new();
    for combo in grid.expand() {
        let mut settings: Vec<String> = combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
        if let Some(b) = grid.budget {
            settings.push(format!("total_budget={b}"));
        }
        let all: Vec<String> = a
            .config
            .overrides
            .iter()
            .cloned()
            .chain(settings.iter().cloned())
            .collect();
        let cfg = parse_and_validate_config(&a.config.config, &all)?;
        points.push(Point { settings, cfg });
    }
    echo_source(&a.config.config, &a.out, &a.config.overrides)?;
    write_atomic(
        &a.out.join("grid.toml"),
        toml::to_string(&grid)
            .map_err(|e| Error::config("grid", e.to_string()))?
            .as_bytes(),
    )?;
    info!("sweep: {} points x {} seeds", points.len(), seeds.len());

    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Option<ExperimentResult>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let dir = a
                .out
                .join(format!("point_{i:03}"))
                .join(format!("seed_{seed}"));
            match run_experiment(&points[i].cfg, seed, Some(&dir)) {
                Ok(r) => Ok(Some(r)),
                Err(Error::AllClientsDiverged(t)) => {
                    warn!("point {i} seed {seed}: every client diverged in round {t}");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let metric = base.selection_metric;
    let mut w = csv::Writer::from_writer(Vec::new());
    let test_cols = ["auroc", "auprc", "accuracy", "loss"];
    let mut header = vec![
        "point".to_string(),
        "settings".into(),
        "seed".into(),
        "local_epochs".into(),
        "rounds".into(),
    ];
    header.extend([
        "completed".into(),
        "selected_round".into(),
        format!("val_{}", metric.name()),
    ]);
    header.extend(test_cols.iter().map(|c| format!("test_{c}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut per_point: Vec<Vec<f64>> = vec![Vec::new(); points.len()];
    for (&(i, seed), r) in jobs.iter().zip(&results) {
        let p = &points[i];
        let mut row = vec![
            i.to_string(),
            p.settings.join(";"),
            seed.to_string(),
            p.cfg.local_epochs.to_string(),
            p.cfg.rounds.to_string(),
        ];
        match r {
            Some(r) => {
                let val = r.best_mean_val.unwrap_or(f64::NAN);
                per_point[i].push(val);
                row.extend([
                    r.completed.to_string(),
                    r.selected_round.to_string(),
                    val.to_string(),
                ]);
                row.extend(
                    test_cols
                        .iter()
                        .map(|c| r.mean_test.get(*c).map_or(String::new(), f64::to_string)),
                );
            }
            None => {
                per_point[i].push(f64::NAN);
                row.extend(["false".to_string(), String::new(), String::new()]);
                row.extend(test_cols.iter().map(|_| String::new()));
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    write_atomic(
        &a.out.join("sweep.csv"),
        &w.into_inner()
            .map_err(|e| Error::SchemaMismatch(e.to_string()))?,
    )?;

    let best = per_point
        .iter()
        .enumerate()
        .filter(|(_, v)| v.iter().all(|x| x.is_finite()))
        .map(|(i, v)| (i, mean(v)))
        .reduce(|b, c| if metric.better(c.1, b.1) { c } else { b })
        .ok_or_else(|| Error::config("grid", "no grid point finished on every seed"))?;
    let chosen = &points[best.0];
    write_atomic(&a.out.join("best.toml"), chosen.cfg.to_toml()?.as_bytes())?;
    println!(
        "best point {} ({}): mean validation {} {:.4} over {} seeds",
        best.0,
        chosen.settings.join(", "),
        metric.name(),
        best.1,
        seeds.len()
    );
    Ok(())
}

fn partition(a: PartitionArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| Error::io(&a.spec, e))?;
    let spec: PartitionSpec =
        toml::from_str(&text).map_err(|e| Error::config("spec", e.message().to_string()))?;
    let manifest = write_partition(&a.out, &spec)?;
    println!(
        "wrote {} clients to {}",
        manifest.clients.len(),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn significance_spec(s: &SignificanceArgs) -> Result<SignificanceSpec> {
    let m = SelectionMetric::parse(&s.metric)
        .ok_or_else(|| Error::config("metric", format!("unknown metric `{}`", s.metric)))?;
    Ok(SignificanceSpec {
        metric: m.name().to_string(),
        method: s.method(),
        one_sided: s.one_sided,
        higher_is_better: m.higher_is_better(),
    })
}

fn compare(a: CompareArgs) -> Result<()> {
    let spec = significance_spec(&a.sig)?;
    let tests = compare_results(&a.results, &spec)?;
    let bytes = significance_csv(&tests)?;
    if let Some(out) = &a.out {
        write_atomic(&out.join("significance.csv"), &bytes)?;
    }
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn curves_csv(results: &[ExperimentResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "algorithm",
        "seed",
        "round",
        "mean_val",
        "mean_train_loss",
        "mean_sq_distance",
    ])
    .map_err(csv_err)?;
    let avg = |v: &[Option<f64>]| {
        let x: Vec<f64> = v.iter().flatten().copied().collect();
        if x.is_empty() {
            String::new()
        } else {
            mean(&x).to_string()
        }
    };
    for r in results {
        for rec in &r.rounds {
            w.write_record([
                r.algorithm.name().to_string(),
                r.seed.to_string(),
                rec.round.to_string(),
                rec.mean_val.map_or(String::new(), |v| v.to_string()),
                avg(&rec.train_loss),
                avg(&rec.sq_distance),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<memory>", e))?;
    w.into_inner()
        .map_err(|e| Error::SchemaMismatch(e.to_string()))
}

fn report(a: ReportArgs) -> Result<()> {
    let dirs: Vec<PathBuf> = find_result_dirs(&a.results)?;
    if dirs.is_empty() {
        return Err(Error::SchemaMismatch(format!(
            "no summary.json under {}",
            a.results.display()
        )));
    }
    let results: Vec<ExperimentResult> = dirs
        .iter()
        .map(|d| Ok(read_result(d)?.1))
        .collect::<Result<_>>()?;
    let records: Vec<_> = results.iter().map(ExperimentResult::seed_record).collect();
    let spec = significance_spec(&a.sig)?;
    let bundle = assemble_report(&records, Some(&spec))?;
    let mut written = write_report(&a.out, &bundle)?;
    let curves = a.out.join("curves.csv");
    write_atomic(&curves, &curves_csv(&results)?)?;
    written.push(curves);
    print!("{}", summary_markdown(&bundle.summary));
    for p in written {
        info!("wrote {}", p.display());
    }
    Ok(())
}

fn init(a: InitArgs) -> Result<()> {
    let cfg = match a.benchmark {
        Benchmark::FeatureShift => presets::feature_shift_benchmark(a.algorithm),
        Benchmark::LabelSkew => presets::label_skew_benchmark(a.algorithm),
    };
    print!("{}", cfg.to_toml()?);
    Ok(())
}
