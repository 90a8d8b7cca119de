//! SVG rendering of sweep and ROC CSVs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};

const SIZE: (u32, u32) = (640, 480);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Sweep,
    Roc,
}

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Err(Error::Schema(format!("{}: no data rows", path.display())));
        }
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    }

    fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.column(name)?;
        self.rows
            .iter()
            .map(|r| {
                r[i].parse::<f64>()
                    .map_err(|_| Error::Schema(format!("column {name:?}: {:?} is not a number", &r[i])))
            })
            .collect()
    }
}

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn sweep_series(t: &Table) -> Result<(String, Series)> {
    let axis = t.column("axis")?;
    let objective = t.column("objective")?;
    let ood = t.column("ood_dataset")?;
    let x = t.floats("value")?;
    let y = t.floats("auroc")?;
    let mut series = Series::new();
    for (i, r) in t.rows.iter().enumerate() {
        series.entry(format!("{} / {}", &r[objective], &r[ood])).or_default().push((x[i], y[i]));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok((t.rows[0][axis].to_string(), series))
}

fn roc_series(t: &Table) -> Result<Series> {
    let x = t.floats("false_positive_rate")?;
    let y = t.floats("true_positive_rate")?;
    t.column("threshold")?;
    Ok(Series::from([("roc".to_string(), x.into_iter().zip(y).collect())]))
}

fn bounds(series: &Series) -> (f64, f64) {
    let xs = series.values().flatten().map(|p| p.0);
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
    if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn render(out: &Path, caption: &str, x_label: &str, y_label: &str, x: (f64, f64), series: &Series) -> Result<()> {
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(out, SIZE).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(caption, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(x.0..x.1, 0.0..1.0)?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Schema(format!("rendering {}: {e}", out.display())))
}

/// Renders one CSV into an SVG next to it (or into `out_dir`), choosing the
/// plot type from the header.
pub fn plot_csv(path: &Path, out_dir: Option<&Path>) -> Result<(PlotKind, PathBuf)> {
    let t = Table::read(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let out = out_dir.unwrap_or_else(|| path.parent().unwrap_or(Path::new("."))).join(format!("{stem}.svg"));
    if t.header.iter().any(|h| h == "false_positive_rate") {
        let s = roc_series(&t)?;
        render(&out, stem, "false positive rate", "true positive rate", (0.0, 1.0), &s)?;
        Ok((PlotKind::Roc, out))
    } else {
        let (axis, s) = sweep_series(&t)?;
        let x_label = if axis == "test_psnr" { "test PSNR (dB)" } else { "latent dimension" };
        render(&out, stem, x_label, "AUROC", bounds(&s), &s)?;
        Ok((PlotKind::Sweep, out))
    }
}
