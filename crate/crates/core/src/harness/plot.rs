//! SVG convergence plots from summary CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::coord::ranged1d::{Ranged, ValueFormatter};
use plotters::coord::types::RangedCoordf64;
use plotters::prelude::*;

use super::HarnessError;

/// Columns plotted by default: objective gap and aggregated max integer.
pub fn plot_columns() -> Vec<String> {
    vec!["gap_median".into(), "max_int_median".into()]
}

/// One curve: `(iteration, value)` points for one algorithm.
type Curve = (String, Vec<(f64, f64)>);

/// Everything plotted into one file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub dataset: String,
    pub column: String,
    pub curves: Vec<Curve>,
}

impl PlotSpec {
    /// Log scale whenever there is data and every value is positive.
    pub fn log_y(&self) -> bool {
        let mut values = self.curves.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)).peekable();
        values.peek().is_some() && values.all(|v| v > 0.0)
    }
}

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

fn read_curves(
    path: &Path,
    columns: &[String],
    out: &mut BTreeMap<(String, String), Vec<Curve>>,
) -> Result<(), HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Csv { path: path.display().to_string(), message: e.to_string() };
    let fallback = path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.is_empty() {
        // An empty file has neither rows nor columns to check.
        for c in columns {
            out.entry(("summary".into(), c.clone())).or_default();
        }
        return Ok(());
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let iteration = find("iteration").ok_or_else(|| HarnessError::MissingColumn("iteration".into()))?;
    let wanted = columns
        .iter()
        .map(|c| find(c).ok_or_else(|| HarnessError::MissingColumn(c.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let (alg_col, ds_col) = (find("algorithm"), find("dataset"));

    let mut per_key: BTreeMap<(String, String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    let mut seen_dataset = None;
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let alg = alg_col.and_then(|i| rec.get(i)).unwrap_or(&fallback).to_string();
        let ds = ds_col.and_then(|i| rec.get(i)).unwrap_or("summary").to_string();
        seen_dataset.get_or_insert_with(|| ds.clone());
        let x: f64 = match rec.get(iteration).and_then(|v| v.parse().ok()) {
            Some(x) => x,
            None => continue,
        };
        for (k, &col) in wanted.iter().enumerate() {
            if let Some(y) = rec.get(col).and_then(|v| v.parse::<f64>().ok()).filter(|y| y.is_finite()) {
                per_key.entry((ds.clone(), alg.clone(), k)).or_default().push((x, y));
            }
        }
    }
    let ds = seen_dataset.unwrap_or_else(|| "summary".into());
    for c in columns {
        out.entry((ds.clone(), c.clone())).or_default();
    }
    for ((ds, alg, k), pts) in per_key {
        out.entry((ds, columns[k].clone())).or_default().push((alg, pts));
    }
    Ok(())
}

/// Writes `<dataset>_<column>.svg` into `out_dir` for every dataset found in
/// `summaries` and every requested column, one curve per algorithm.
pub fn emit_plots(summaries: &[PathBuf], out_dir: &Path, columns: &[String]) -> Result<Vec<PathBuf>, HarnessError> {
    let mut grouped = BTreeMap::new();
    for path in summaries {
        read_curves(path, columns, &mut grouped)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::Io { path: out_dir.display().to_string(), source: e })?;
    let mut written = Vec::new();
    for ((dataset, column), curves) in grouped {
        let spec = PlotSpec { dataset, column, curves };
        let path = out_dir.join(format!("{}_{}.svg", spec.dataset, spec.column));
        render(&spec, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn bounds(spec: &PlotSpec) -> ((f64, f64), (f64, f64)) {
    let pts = spec.curves.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (1.0, 10.0));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = if y0 > 0.0 { y0 * 10.0 } else { y0 + 1.0 };
    }
    ((x0, x1), (y0, y1))
}

/// Renders one plot; the y axis is logarithmic when [`PlotSpec::log_y`] holds.
pub fn render(spec: &PlotSpec, path: &Path) -> Result<(), HarnessError> {
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let ((x0, x1), (y0, y1)) = bounds(spec);
    let caption = format!("{}: {}", spec.dataset, spec.column);
    let mut builder = ChartBuilder::on(&root);
    builder.caption(caption, ("sans-serif", 22)).margin(12).x_label_area_size(40).y_label_area_size(70);
    if spec.log_y() {
        let chart = builder.build_cartesian_2d(x0..x1, (y0..y1).log_scale()).map_err(plot_err)?;
        draw_curves(chart, spec)?;
    } else {
        let chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(plot_err)?;
        draw_curves(chart, spec)?;
    }
    root.present().map_err(plot_err)
}

fn draw_curves<'a, 'b, Y>(
    mut chart: ChartContext<'a, SVGBackend<'b>, Cartesian2d<RangedCoordf64, Y>>,
    spec: &PlotSpec,
) -> Result<(), HarnessError>
where
    'b: 'a,
    Y: Ranged<ValueType = f64> + ValueFormatter<f64>,
{
    chart.configure_mesh().x_desc("iteration").y_desc(spec.column.as_str()).draw().map_err(plot_err)?;
    for (i, (name, pts)) in spec.curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    if !spec.curves.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    Ok(())
}
