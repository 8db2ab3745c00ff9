//! CSV tables and the PCS-curve plot.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{PeyeError, Result};
use crate::metrics::{MaskedScores, MetricsSummary, PcsCurve, SampleMetrics, REPORT_EPSILONS, REPORT_MASK_FRACTIONS};
use crate::train::{AblationRow, Evaluation};

pub type CsvWriter = csv::Writer<BufWriter<File>>;

pub fn csv_writer(path: &Path) -> Result<CsvWriter> {
    let f = File::create(path).map_err(|e| PeyeError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

pub fn write_row<I: IntoIterator<Item = String>>(w: &mut CsvWriter, path: &Path, row: I) -> Result<()> {
    w.write_record(row.into_iter().collect::<Vec<_>>())
        .map_err(|e| PeyeError::io(path, e.into()))
}

/// `undefined` for a missing value (empty effective area).
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), fmt_f64)
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

fn pct(x: f64) -> String {
    format!("{:02}", (x * 100.0).round() as u32)
}

fn masked_header() -> Vec<String> {
    let mut h = Vec::new();
    for frac in REPORT_MASK_FRACTIONS {
        h.push(format!("mse_efs_m{}", pct(frac)));
        for eps in REPORT_EPSILONS {
            h.push(format!("pcs_efs{eps}_m{}", pct(frac)));
        }
    }
    h
}

fn masked_cells(masked: &[MaskedScores]) -> Vec<String> {
    let mut row = Vec::new();
    for m in masked {
        row.push(fmt_opt(m.mse_efs));
        row.extend(m.pcs_efs.iter().map(|&v| fmt_opt(v)));
    }
    row
}

/// One row per sample followed by a `mean` row. Masks are suffixed `_m05` /
/// `_m10` for the 5% and 10% effective-area thresholds.
pub fn write_metrics_table(path: &Path, samples: &[SampleMetrics], summary: &MetricsSummary) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(masked_header());
    header.extend(["psnr".to_string(), "ssim".to_string()]);
    write_row(&mut w, path, header)?;
    for s in samples {
        let mut row = vec![s.sample_id.clone()];
        row.extend(masked_cells(&s.masked));
        row.extend([fmt_f64(s.psnr), fmt_f64(s.ssim)]);
        write_row(&mut w, path, row)?;
    }
    let mut row = vec!["mean".to_string()];
    row.extend(masked_cells(&summary.masked));
    row.extend([fmt_f64(summary.psnr), fmt_f64(summary.ssim)]);
    write_row(&mut w, path, row)?;
    w.flush().map_err(|e| PeyeError::io(path, e))
}

/// `epsilon` column plus one PCS column per curve.
pub fn write_curves_csv(path: &Path, curves: &[(String, &PcsCurve)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["epsilon".to_string()];
    header.extend(curves.iter().map(|(n, _)| n.clone()));
    write_row(&mut w, path, header)?;
    if let Some((_, first)) = curves.first() {
        for (i, eps) in first.epsilons().iter().enumerate() {
            let mut row = vec![fmt_f64(*eps)];
            row.extend(curves.iter().map(|(_, c)| fmt_f64(c.pcs()[i])));
            write_row(&mut w, path, row)?;
        }
    }
    w.flush().map_err(|e| PeyeError::io(path, e))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line plot of PCS against tolerance as a standalone SVG.
pub fn pcs_plot_svg(curves: &[(String, &PcsCurve)]) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let x_max = curves
        .iter()
        .flat_map(|(_, c)| c.epsilons().iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let sx = |x: f64| m + x / x_max * (w - 2.0 * m);
    let sy = |y: f64| h - m - y * (h - 2.0 * m);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{y0}\" x2=\"{m}\" y2=\"{m}\" stroke=\"black\"/>\n\
         <text x=\"{xc}\" y=\"{yl}\" text-anchor=\"middle\">error tolerance</text>\n\
         <text x=\"14\" y=\"{yc}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {yc})\">PCS</text>\n",
        y0 = h - m,
        x1 = w - m,
        xc = w / 2.0,
        yl = h - 10.0,
        yc = h / 2.0,
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.1}</text>\n",
            m - 6.0,
            sy(v) + 4.0
        ));
        let x = v * x_max;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x:.2}</text>\n",
            sx(x),
            h - m + 16.0
        ));
    }
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c.points().map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = m + 16.0 * i as f64;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\" text-anchor=\"end\">{name}</text>\n",
            w - m
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn named_curves(eval: &Evaluation) -> Vec<(String, &PcsCurve)> {
    eval.curves
        .iter()
        .filter_map(|(frac, c)| c.as_ref().map(|c| (format!("pcs_m{}", pct(*frac)), c)))
        .collect()
}

/// Writes `metrics.csv`, `pcs_curves.csv` and, with `plot`, `pcs_curves.svg`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation, plot: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PeyeError::io(dir, e))?;
    write_metrics_table(&dir.join("metrics.csv"), &eval.samples, &eval.summary)?;
    let curves = named_curves(eval);
    write_curves_csv(&dir.join("pcs_curves.csv"), &curves)?;
    if plot {
        let p = dir.join("pcs_curves.svg");
        std::fs::write(&p, pcs_plot_svg(&curves)).map_err(|e| PeyeError::io(&p, e))?;
    }
    Ok(())
}

/// One row per configuration with the aggregate scores.
pub fn write_ablation_table(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["config".to_string()];
    header.extend(masked_header());
    header.extend(["psnr".to_string(), "ssim".to_string()]);
    write_row(&mut w, path, header)?;
    for r in rows {
        let mut row = vec![r.config.to_string()];
        row.extend(masked_cells(&r.summary.masked));
        row.extend([fmt_f64(r.summary.psnr), fmt_f64(r.summary.ssim)]);
        write_row(&mut w, path, row)?;
    }
    w.flush().map_err(|e| PeyeError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pcs_curve;
    use crate::types::Grid;

    #[test]
    fn metrics_table_layout() {
        let gt = Grid::new(2, 2, vec![1.0, 0.0, 0.5, 0.2]).unwrap();
        let pred = Grid::new(2, 2, vec![0.9, 0.0, 0.5, 0.9]).unwrap();
        let s = SampleMetrics::compute(
            "s0_p0",
            &pred,
            &gt,
            &crate::losses::SsimConfig {
                window: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let summary = MetricsSummary::from_samples(std::slice::from_ref(&s)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_table(&p, &[s], &summary).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("sample_id,mse_efs_m05,pcs_efs0.05_m05,pcs_efs0.1_m05,pcs_efs0.2_m05,mse_efs_m10"));
        assert!(lines[2].starts_with("mean,"));
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }

    #[test]
    fn curve_csv_and_plot() {
        let gt = Grid::new(1, 3, vec![1.0, 0.5, 0.2]).unwrap();
        let c = pcs_curve(&gt, &gt, 0.05, &[0.1, 0.2]).unwrap().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_curves_csv(&p, &[("pcs".into(), &c)]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epsilon,pcs\n0.1,1\n0.2,1\n");
        let svg = pcs_plot_svg(&[("pcs".into(), &c)]);
        assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
    }

    #[test]
    fn sentinels_are_spelled_out() {
        assert_eq!(fmt_opt(None), "undefined");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(0.25), "0.25");
    }
}
