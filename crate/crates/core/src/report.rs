//! Comparison tables and training curves rendered to files.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::io::{file_err, read_jsonl};
use crate::{Error, Result};

/// One configuration of an ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub use_contrastive: bool,
    pub use_uncertainty: bool,
    pub use_adapter: bool,
    /// Held-out AUC per seed.
    pub aucs: Vec<f64>,
}

impl AblationRow {
    pub fn mean_auc(&self) -> f64 {
        self.aucs.iter().sum::<f64>() / self.aucs.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let tick = |b: bool| if b { "✓" } else { "" };
        let mut out = String::from("| config | semantic | uncertainty | adapter | AUC (%) | seeds |\n|---|:-:|:-:|:-:|--:|--:|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.2} | {} |",
                r.name,
                tick(r.use_contrastive),
                tick(r.use_uncertainty),
                tick(r.use_adapter),
                100.0 * r.mean_auc(),
                r.aucs.len()
            );
        }
        out
    }
}

/// A named series of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Pulls `(x_key, y_key)` pairs out of a JSONL metrics log, skipping lines lacking either.
pub fn series_from_log(path: &Path, name: &str, x_key: &str, y_key: &str) -> Result<Series> {
    let lines: Vec<Value> = read_jsonl(path)?;
    let points = lines
        .iter()
        .filter_map(|l| Some((l.get(x_key)?.as_f64()?, l.get(y_key)?.as_f64()?)))
        .collect();
    Ok(Series {
        name: name.to_string(),
        points,
    })
}

/// Line chart of several series as an SVG file.
pub fn plot_series(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::Degenerate(format!("nothing to plot for `{title}`")));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in &pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Config(format!("plotting {}: {e}", path.display())))
}

/// Writes `ablation.md` and `ablation.json` into `dir`.
pub fn write_ablation_table(dir: &Path, table: &AblationTable) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(file_err(dir))?;
    let md = dir.join("ablation.md");
    std::fs::write(&md, table.to_markdown()).map_err(file_err(&md))?;
    crate::io::write_json(&dir.join("ablation.json"), table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markdown_has_one_line_per_row() {
        let t = AblationTable {
            rows: vec![
                AblationRow {
                    name: "none".into(),
                    use_contrastive: false,
                    use_uncertainty: false,
                    use_adapter: false,
                    aucs: vec![0.9, 0.8],
                },
                AblationRow {
                    name: "full".into(),
                    use_contrastive: true,
                    use_uncertainty: true,
                    use_adapter: true,
                    aucs: vec![0.95],
                },
            ],
        };
        let md = t.to_markdown();
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("| none |  |  |  | 85.00 | 2 |"));
    }

    #[test]
    fn plots_a_log_to_svg() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("m.jsonl");
        std::fs::write(
            &log,
            "{\"step\":0,\"loss_total\":1.0}\n{\"step\":1,\"loss_total\":0.5}\n{\"epoch\":0}\n",
        )
        .unwrap();
        let s = series_from_log(&log, "run", "step", "loss_total").unwrap();
        assert_eq!(s.points, vec![(0.0, 1.0), (1.0, 0.5)]);
        let svg = dir.path().join("loss.svg");
        plot_series(&svg, "loss", "step", "loss", &[s]).unwrap();
        assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
        assert!(plot_series(&svg, "x", "x", "y", &[]).is_err());
    }
}
