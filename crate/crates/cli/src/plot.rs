//! `report`: CSV tables and SVG line plots from eval reports and sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Deserialize;

use ercforge_core::evaluation::{decimal_to_f64, robustness_summary};
use ercforge_core::{EvalReport, SampleRatio};

use crate::commands::{require_file, SweepSummary};
use crate::failure::{Failure, IoContext};
use crate::run::RunDir;
use crate::ReportArgs;

enum Input {
    Report(EvalReport),
    Sweep(SweepSummary),
}

fn read_input(path: &Path) -> Result<Vec<(String, Input)>, Failure> {
    require_file(path)?;
    if path.is_dir() {
        let mut found = Vec::new();
        for name in ["report.json", "sweep.json"] {
            let p = path.join(name);
            if p.is_file() {
                found.extend(read_input(&p)?);
            }
        }
        if found.is_empty() {
            return Err(Failure::usage(format!(
                "no report.json or sweep.json in {}",
                path.display()
            )));
        }
        return Ok(found);
    }
    let text = std::fs::read_to_string(path).at(path)?;
    let source = path.display().to_string();
    if let Ok(s) = serde_json::from_str::<SweepSummary>(&text) {
        return Ok(vec![(source, Input::Sweep(s))]);
    }
    let r: EvalReport = serde_json::from_str(&text)
        .map_err(|e| Failure::data(format!("{}: neither an eval report nor a sweep: {e}", path.display())))?;
    Ok(vec![(source, Input::Report(r))])
}

/// A published score that this tool cannot regenerate.
#[derive(Debug, Deserialize)]
struct ExternalScore {
    name: String,
    corpus_id: String,
    weighted_f1: f64,
}

fn read_external(path: &Path) -> Result<Vec<ExternalScore>, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<ExternalScore>, _>>()
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, Failure> {
    csv::Writer::from_path(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::data(e.to_string())
}

pub fn sweep_csv(s: &SweepSummary) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["param", "value", "corpus_id", "mean", "std", "seeds", "report"])
        .expect("in-memory csv");
    for c in &s.cells {
        w.write_record([
            s.param.as_str(),
            c.value.as_str(),
            c.corpus_id.as_str(),
            &format!("{:.6}", c.mean),
            &format!("{:.6}", c.std),
            &c.seeds.to_string(),
            c.report.as_str(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// x coordinate of a numeric sweep value.
fn numeric(param: &str, value: &str) -> Option<f64> {
    match param {
        "window" => value.parse().ok(),
        "ratio" => value.parse::<SampleRatio>().ok().map(|r| r.as_f64()),
        _ => None,
    }
}

fn plot_sweep(s: &SweepSummary, path: &Path) -> Result<(), Failure> {
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for c in &s.cells {
        if let Some(x) = numeric(&s.param, &c.value) {
            series.entry(c.corpus_id.as_str()).or_default().push((x, c.mean));
        }
    }
    for points in series.values_mut() {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let xs = series.values().flatten().map(|p| p.0);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let ys = series.values().flatten().map(|p| p.1);
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if !x0.is_finite() {
        return Err(Failure::data(format!("sweep over {} has no numeric values", s.param)));
    }
    let pad = ((y1 - y0) * 0.1).max(0.01);
    let xpad = ((x1 - x0) * 0.05).max(0.01);
    let draw = || -> Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("weighted-F1 vs {} ({})", s.param, s.mode), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d((x0 - xpad)..(x1 + xpad), (y0 - pad)..(y1 + pad))?;
        chart
            .configure_mesh()
            .x_desc(s.param.as_str())
            .y_desc("weighted-F1")
            .draw()?;
        for (i, (name, points)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn register_inputs(run: &mut RunDir, path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        for name in ["report.json", "sweep.json"] {
            let p = path.join(name);
            if p.is_file() {
                run.input(&p)?;
            }
        }
        Ok(())
    } else {
        run.input(path)
    }
}

pub fn report(mut run: RunDir, a: ReportArgs) -> Result<PathBuf, Failure> {
    let mut reports = Vec::new();
    let mut sweeps = Vec::new();
    for p in &a.inputs {
        register_inputs(&mut run, p)?;
        for (source, input) in read_input(p)? {
            match input {
                Input::Report(r) => reports.push((source, r)),
                Input::Sweep(s) => sweeps.push((source, s)),
            }
        }
    }

    let path = run.join("results.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "source",
        "corpus_id",
        "lineage",
        "runs",
        "mean",
        "std",
        "accuracy",
        "macro_f1",
        "unknown_rate",
        "baseline",
        "p_value",
        "reproduced",
    ])
    .map_err(csv_err)?;
    for (source, r) in &reports {
        let sig = r.significance.first();
        w.write_record([
            source.clone(),
            r.corpus_id.clone(),
            r.lineage.clone(),
            r.seed_scores.len().to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.std),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.macro_f1),
            format!("{:.6}", r.unknown_rate),
            sig.map(|s| s.baseline.clone()).unwrap_or_default(),
            sig.map(|s| format!("{:.6e}", s.p_value)).unwrap_or_default(),
            "true".into(),
        ])
        .map_err(csv_err)?;
    }
    if let Some(ext) = &a.external {
        run.input(ext)?;
        for row in read_external(ext)? {
            let mut record = vec![String::new(); 12];
            record[0] = format!("external:{}", row.name);
            record[1] = row.corpus_id;
            record[2] = "external (not reproduced)".into();
            record[4] = format!("{:.6}", row.weighted_f1);
            record[11] = "false".into();
            w.write_record(&record).map_err(csv_err)?;
        }
    }
    w.flush().at(&path)?;
    run.output("results.csv")?;

    let path = run.join("per_class.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["source", "corpus_id", "label", "precision", "recall", "f1", "support"])
        .map_err(csv_err)?;
    for (source, r) in &reports {
        for label in &r.confusion.labels {
            let m = &r.per_class[label];
            w.write_record([
                source.clone(),
                r.corpus_id.clone(),
                label.clone(),
                format!("{:.6}", m.precision),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.f1),
                m.support.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().at(&path)?;
    run.output("per_class.csv")?;

    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (_, s) in &sweeps {
        let n = seen.entry(s.param.clone()).or_default();
        *n += 1;
        let stem = if *n == 1 {
            format!("sweep-{}", s.param)
        } else {
            format!("sweep-{}-{n}", s.param)
        };
        std::fs::write(run.join(&format!("{stem}.csv")), sweep_csv(s)).at(&run.path)?;
        run.output(&format!("{stem}.csv"))?;
        if a.plots && numeric(&s.param, &s.cells.first().map(|c| c.value.clone()).unwrap_or_default()).is_some() {
            plot_sweep(s, &run.join(&format!("{stem}.svg")))?;
            run.output(&format!("{stem}.svg"))?;
        } else if a.plots {
            log::info!("no plot for categorical sweep over {}", s.param);
        }
    }

    if !a.single.is_empty() {
        robustness(&mut run, &a.single, &sweeps)?;
    }
    let n_reports = reports.len();
    let n_sweeps = sweeps.len();
    let path = run.finish()?;
    println!(
        "tabulated {n_reports} report(s) and {n_sweeps} sweep(s) -> {}",
        path.display()
    );
    Ok(path)
}

fn robustness(run: &mut RunDir, single: &[PathBuf], sweeps: &[(String, SweepSummary)]) -> Result<(), Failure> {
    let mut single_scores = BTreeMap::new();
    for p in single {
        for (_, input) in read_input(p)? {
            match input {
                Input::Report(r) => {
                    single_scores.insert(r.corpus_id.clone(), r.mean);
                }
                Input::Sweep(_) => {
                    return Err(Failure::usage(format!(
                        "--single expects eval reports: {}",
                        p.display()
                    )))
                }
            }
        }
        register_inputs(run, p)?;
    }
    let mut mixed = BTreeMap::new();
    let mut ratios = BTreeSet::new();
    for (_, s) in sweeps.iter().filter(|(_, s)| s.param == "ratio") {
        for c in &s.cells {
            let r: SampleRatio = c.value.parse()?;
            ratios.insert(r);
            mixed.insert((c.corpus_id.clone(), r), c.mean);
        }
    }
    if ratios.is_empty() {
        return Err(Failure::usage("--single needs a ratio sweep among the inputs"));
    }
    let ratios: Vec<SampleRatio> = ratios.into_iter().collect();
    let gaps = robustness_summary(&single_scores, &mixed, &ratios)?;

    let path = run.join("robustness.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["corpus_id".to_string(), "single".to_string()];
    header.extend(ratios.iter().map(|r| format!("mixed@{r}")));
    header.push("avg_gap".into());
    w.write_record(&header).map_err(csv_err)?;
    for (corpus, gap) in &gaps {
        let mut row = vec![corpus.clone(), format!("{:.6}", single_scores[corpus])];
        row.extend(ratios.iter().map(|r| format!("{:.6}", mixed[&(corpus.clone(), *r)])));
        row.push(gap.to_string());
        w.write_record(&row).map_err(csv_err)?;
        log::info!("{corpus}: avg gap {:.4}", decimal_to_f64(*gap));
    }
    w.flush().at(&path)?;
    run.output("robustness.csv")?;
    Ok(())
}
