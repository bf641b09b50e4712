//! Static SVG charts and a text summary from logs, reports and sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use wilson::metrics::MetricReport;
use wilson::train_log::TrainLog;
use wilson::Error;

use crate::sweep::{Sweep, FILE_NAME};
use crate::Failure;

const LOG_NAME: &str = "train_log.csv";
const REPORT_NAME: &str = "metrics.toml";
const COLOURS: [RGBColor; 6] = [BLACK, RED, BLUE, GREEN, MAGENTA, CYAN];

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Log,
    Report,
    Sweep,
}

fn classify(path: &Path) -> Kind {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name == FILE_NAME {
        Kind::Sweep
    } else if path.extension().is_some_and(|e| e == "csv") {
        Kind::Log
    } else {
        Kind::Report
    }
}

/// Explicit files are taken as given; directories contribute only files
/// with the names the trainer writes.
fn collect(path: &Path, explicit: bool, found: &mut Vec<(Kind, PathBuf)>) -> Result<(), Error> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        let mut entries = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<Vec<_>, _>>()?;
        entries.sort();
        for entry in entries {
            collect(&entry, false, found)?;
        }
    } else {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if explicit || [LOG_NAME, REPORT_NAME, FILE_NAME].contains(&name) {
            found.push((classify(path), path.to_path_buf()));
        }
    }
    Ok(())
}

fn chart_error(e: impl std::fmt::Display) -> Error {
    Error::Format {
        what: "chart",
        msg: e.to_string(),
    }
}

fn span(values: impl Iterator<Item = f64>) -> Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    if hi - lo < 1e-9 {
        return lo - 0.5..hi + 0.5;
    }
    let pad = 0.05 * (hi - lo);
    lo - pad..hi + pad
}

type Series = (String, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, x_label: &str, series: &[Series]) -> Result<(), Error> {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(chart_error)?;
    let xs = span(series.iter().flat_map(|(_, p)| p.iter().map(|v| v.0)));
    let ys = span(series.iter().flat_map(|(_, p)| p.iter().map(|v| v.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(xs, ys)
        .map_err(chart_error)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .draw()
        .map_err(chart_error)?;
    for (k, (name, points)) in series.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        chart
            .draw_series(LineSeries::new(points.iter().copied(), colour.stroke_width(2)))
            .map_err(chart_error)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], colour.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, colour.filled())))
            .map_err(chart_error)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(chart_error)?;
    root.present().map_err(chart_error)
}

fn bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<(), Error> {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(chart_error)?;
    let n = bars.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5..n as f64 - 0.5, 0.0..100.0)
        .map_err(chart_error)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                bars.get(i as usize).map(|b| b.0.clone()).unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("IoU (%)")
        .draw()
        .map_err(chart_error)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            Rectangle::new([(i as f64 - 0.35, 0.0), (i as f64 + 0.35, *v)], BLUE.mix(0.7).filled())
        }))
        .map_err(chart_error)?;
    root.present().map_err(chart_error)
}

fn pct(v: Option<f64>) -> String {
    v.map_or("undef".into(), |v| format!("{:.2}", 100.0 * v))
}

fn plot_log(log: &TrainLog, path: &Path, title: &str) -> Result<(), Error> {
    let pick: [(&str, fn(&wilson::train_log::LogRow) -> f64); 6] = [
        ("total", |r| r.total),
        ("cls", |r| r.cls),
        ("loc", |r| r.loc),
        ("enc", |r| r.enc),
        ("sss", |r| r.sss),
        ("seg", |r| r.seg),
    ];
    let series: Vec<Series> = pick
        .iter()
        .filter(|(name, f)| *name == "total" || log.rows.iter().any(|r| f(r) != 0.0))
        .map(|(name, f)| {
            let points = log.rows.iter().enumerate().map(|(i, r)| (i as f64, f(r))).collect();
            (name.to_string(), points)
        })
        .collect();
    line_chart(path, title, "iteration", &series)
}

pub fn plot(inputs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let mut found = Vec::new();
    for input in inputs {
        collect(input, true, &mut found)?;
    }
    if found.is_empty() {
        return Err(Failure::Usage("no logs or reports among the inputs".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut summary = String::new();
    let mut sweeps: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let (mut logs, mut reports) = (0, 0);
    for (kind, path) in &found {
        let label = path.display().to_string();
        match kind {
            Kind::Log => {
                let log = TrainLog::load(path)?;
                let file = out.join(format!("loss_{logs}.svg"));
                plot_log(&log, &file, &label)?;
                let last = log.rows.last().map_or("none".into(), |r| format!("{:.4}", r.total));
                let _ = writeln!(summary, "log {label}: {} rows, final total {last} -> {}", log.rows.len(), file.display());
                logs += 1;
            }
            Kind::Report => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let report = MetricReport::from_toml(&text)?;
                let bars: Vec<(String, f64)> = report
                    .per_class
                    .iter()
                    .map(|(c, v)| (c.to_string(), 100.0 * v.unwrap_or(0.0)))
                    .collect();
                let file = out.join(format!("classes_{reports}.svg"));
                bar_chart(&file, &label, &bars)?;
                let _ = writeln!(
                    summary,
                    "report {label}: old {} new {} all {} -> {}",
                    pct(report.old),
                    pct(report.new),
                    pct(report.all),
                    file.display()
                );
                reports += 1;
            }
            Kind::Sweep => {
                for run in Sweep::load(path)?.run {
                    if let Some(all) = run.all {
                        sweeps.entry(run.protocol.clone()).or_default().push((run.alpha, 100.0 * all));
                    }
                    let _ = writeln!(
                        summary,
                        "sweep {label}: {} alpha {} old {} new {} all {}",
                        run.protocol,
                        run.alpha,
                        pct(run.old),
                        pct(run.new),
                        pct(run.all)
                    );
                }
            }
        }
    }
    if !sweeps.is_empty() {
        let series: Vec<Series> = sweeps
            .into_iter()
            .map(|(protocol, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                (protocol, points)
            })
            .collect();
        let file = out.join("alpha_sweep.svg");
        line_chart(&file, "mIoU (all classes) against alpha", "alpha", &series)?;
        let _ = writeln!(summary, "alpha sweep -> {}", file.display());
    }
    let path = out.join("summary.txt");
    std::fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    print!("{summary}");
    Ok(())
}
