//! Evaluation reports, the aggregated results table, plots and overlays.
//!
//! IoU is shown in percent with two decimals in every human-readable output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::tensor_to_rgb;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, Aggregate};
use crate::tensor::Tensor;
use crate::training::StepRecord;

pub const VACUOUS_NOTE: &str =
    "Note: a class absent from both prediction and ground truth is scored IoU = 100.00.";

/// Result of evaluating one checkpoint on one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Domain that was evaluated.
    pub dataset: String,
    pub holdout: Option<String>,
    pub fold: Option<usize>,
    pub seed: u64,
    pub checkpoint: String,
    pub images: usize,
    /// Per-class IoU as a fraction.
    pub iou: Vec<f64>,
    pub miou: f64,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.method);
        let _ = writeln!(s, "dataset: {}", self.dataset);
        if let Some(h) = &self.holdout {
            let _ = writeln!(s, "held-out domain: {h}");
        }
        if let Some(f) = self.fold {
            let _ = writeln!(s, "fold: {f}");
        }
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "checkpoint: {}", self.checkpoint);
        let _ = writeln!(s, "images: {}", self.images);
        for (k, v) in self.iou.iter().enumerate() {
            let _ = writeln!(s, "IoU class {k}: {}", pct(*v));
        }
        let _ = writeln!(s, "mIoU: {}", pct(self.miou));
        let _ = writeln!(s, "{VACUOUS_NOTE}");
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let p = dir.join("report.json");
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.txt");
        fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}

/// All runs of one method on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub method: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub folds: Vec<usize>,
    pub aggregate: Aggregate,
}

/// Group reports by method and dataset, sorted by both.
pub fn summarize(reports: &[EvalReport]) -> Result<Vec<Summary>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to summarize".into()));
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((&r.method, &r.dataset)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, dataset), runs)| {
            let per_run: Vec<Vec<f64>> = runs.iter().map(|r| r.iou.clone()).collect();
            let aggregate = aggregate_runs(&per_run)
                .map_err(|e| Error::InvalidArgument(format!("{method} on {dataset}: {e}")))?;
            let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let mut folds: Vec<usize> = runs.iter().filter_map(|r| r.fold).collect();
            folds.sort_unstable();
            folds.dedup();
            Ok(Summary {
                method: method.into(),
                dataset: dataset.into(),
                seeds,
                folds,
                aggregate,
            })
        })
        .collect()
}

pub fn summary_text(summaries: &[Summary]) -> String {
    let mut s = String::new();
    for m in summaries {
        let a = &m.aggregate;
        let seeds: Vec<String> = m.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "{} on {} ({} runs, seeds {})", m.method, m.dataset, a.runs, seeds.join(","));
        for (k, (mean, std)) in a.mean.iter().zip(&a.std).enumerate() {
            let _ = writeln!(s, "  IoU class {k}: {} ± {}", pct(*mean), pct(*std));
        }
        let _ = writeln!(s, "  mIoU: {} ± {}", pct(a.miou_mean), pct(a.miou_std));
    }
    let _ = writeln!(s, "{VACUOUS_NOTE}");
    s
}

/// One row per method and dataset; IoU columns in percent.
pub fn write_table(path: &Path, summaries: &[Summary]) -> Result<()> {
    let k = summaries.iter().map(|m| m.aggregate.mean.len()).max().unwrap_or(0);
    let csv_err = |e: csv::Error| Error::data(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["method".to_string(), "dataset".into(), "runs".into(), "seeds".into()];
    for c in 0..k {
        header.push(format!("iou{c}_mean"));
        header.push(format!("iou{c}_std"));
    }
    header.extend(["miou_mean".into(), "miou_std".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for m in summaries {
        let a = &m.aggregate;
        let seeds: Vec<String> = m.seeds.iter().map(u64::to_string).collect();
        let mut row = vec![m.method.clone(), m.dataset.clone(), a.runs.to_string(), seeds.join(" ")];
        for c in 0..k {
            match (a.mean.get(c), a.std.get(c)) {
                (Some(mean), Some(std)) => row.extend([pct(*mean), pct(*std)]),
                _ => row.extend([String::new(), String::new()]),
            }
        }
        row.extend([pct(a.miou_mean), pct(a.miou_std)]);
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::data(path, format!("plot: {e}"))
}

/// Epoch-mean total loss per run, one line each.
pub fn plot_loss_curves(path: &Path, runs: &[(String, Vec<StepRecord>)]) -> Result<()> {
    let points: Vec<(usize, f64)> = runs
        .iter()
        .flat_map(|(_, log)| log.iter().map(|r| (r.epoch, r.losses.total)))
        .collect();
    if points.is_empty() {
        return Err(Error::InvalidArgument("no log records to plot".into()));
    }
    let max_epoch = points.iter().map(|p| p.0).max().unwrap_or(1).max(2);
    let lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1e-9);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("total loss per epoch", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(70)
        .build_cartesian_2d(1..max_epoch, (lo - pad)..(hi + pad))
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, (name, log)) in runs.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(log.iter().map(|r| (r.epoch, r.losses.total)), color))
            .map_err(|e| plot_err(path, e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Mean mIoU per method and dataset with a ±std whisker.
pub fn plot_iou_bars(path: &Path, summaries: &[Summary]) -> Result<()> {
    if summaries.is_empty() {
        return Err(Error::InvalidArgument("no summaries to plot".into()));
    }
    let n = summaries.len();
    let root = SVGBackend::new(path, (160 + 90 * n as u32, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("mIoU (%)", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(60)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n as f64, 0.0..100.0)
        .map_err(|e| plot_err(path, e))?;
    let labels: Vec<String> = summaries.iter().map(|m| format!("{}/{}", m.method, m.dataset)).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            labels.get(i).cloned().unwrap_or_default()
        })
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let mut methods: Vec<&str> = summaries.iter().map(|m| m.method.as_str()).collect();
    methods.dedup();
    for (i, m) in summaries.iter().enumerate() {
        let color = Palette99::pick(methods.iter().position(|x| *x == m.method).unwrap_or(0));
        let (mean, std) = (100.0 * m.aggregate.miou_mean, 100.0 * m.aggregate.miou_std);
        let x = i as f64;
        chart
            .draw_series([Rectangle::new([(x + 0.15, 0.0), (x + 0.85, mean)], color.filled())])
            .map_err(|e| plot_err(path, e))?;
        chart
            .draw_series([PathElement::new(
                vec![(x + 0.5, (mean - std).max(0.0)), (x + 0.5, (mean + std).min(100.0))],
                BLACK,
            )])
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Image with predicted foreground classes tinted; class 0 is left as is.
pub fn overlay(image: &Tensor, labels: &[usize], categories: usize) -> Result<RgbImage> {
    let mut img = tensor_to_rgb(image)?;
    if labels.len() != (img.width() * img.height()) as usize {
        return Err(Error::Shape(format!(
            "{} labels for a {}x{} image",
            labels.len(),
            img.width(),
            img.height()
        )));
    }
    for (px, &k) in img.pixels_mut().zip(labels) {
        if k >= categories {
            return Err(Error::InvalidArgument(format!("label {k} >= {categories} categories")));
        }
        if k == 0 {
            continue;
        }
        let (r, g, b) = Palette99::pick(k - 1).rgb();
        for (c, t) in px.0.iter_mut().zip([r, g, b]) {
            *c = ((*c as u16 + t as u16) / 2) as u8;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LossBundle;

    fn report(method: &str, seed: u64, iou: Vec<f64>) -> EvalReport {
        EvalReport {
            method: method.into(),
            dataset: "d0".into(),
            holdout: Some("d0".into()),
            fold: Some(0),
            seed,
            checkpoint: "best.dgq".into(),
            images: 4,
            miou: iou.iter().sum::<f64>() / iou.len() as f64,
            iou,
        }
    }

    #[test]
    fn text_report_is_percent_with_note() {
        let t = report("dgquant", 1, vec![0.5, 0.123456]).to_text();
        assert!(t.contains("IoU class 1: 12.35"), "{t}");
        assert!(t.contains("mIoU: 31.17"), "{t}");
        assert!(t.contains(VACUOUS_NOTE));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = report("baseline", 3, vec![0.9, 0.1]);
        r.write(dir.path()).unwrap();
        assert_eq!(EvalReport::read(&dir.path().join("report.json")).unwrap(), r);
    }

    #[test]
    fn one_row_per_method_and_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![
            report("dgquant", 0, vec![0.4, 0.6]),
            report("baseline", 0, vec![0.5, 0.5]),
            report("dgquant", 1, vec![0.6, 0.4]),
        ];
        let s = summarize(&reports).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].method, "dgquant");
        assert_eq!(s[1].aggregate.mean, vec![0.5, 0.5]);
        assert!((s[1].aggregate.std[0] - 0.1).abs() < 1e-12);
        let p = dir.path().join("table.csv");
        write_table(&p, &s).unwrap();
        let mut rd = csv::Reader::from_path(&p).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[1][0], "dgquant");
        assert_eq!(&rows[1][4], "50.00");
        assert_eq!(&rows[1][5], "10.00");
        assert!(summary_text(&s).contains("mIoU: 50.00 ± 0.00"));
    }

    #[test]
    fn ragged_reports_are_rejected() {
        let reports = vec![report("dgquant", 0, vec![0.4, 0.6]), report("dgquant", 1, vec![0.4, 0.6, 0.1])];
        assert!(summarize(&reports).is_err());
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn plots_are_svg() {
        let dir = tempfile::tempdir().unwrap();
        let log: Vec<StepRecord> = (1..=3)
            .map(|epoch| StepRecord {
                epoch,
                step: epoch as u64,
                losses: LossBundle {
                    total: -(epoch as f64),
                    ..Default::default()
                },
                var_gamma: None,
                tau: None,
                mean_max_prob: None,
                val_miou: None,
            })
            .collect();
        let p = dir.path().join("loss.svg");
        plot_loss_curves(&p, &[("run".into(), log)]).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("<svg"));
        let s = summarize(&[report("dgquant", 0, vec![0.4, 0.6])]).unwrap();
        let p = dir.path().join("iou.svg");
        plot_iou_bars(&p, &s).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("<rect"));
    }

    #[test]
    fn overlay_tints_foreground_only() {
        let img = Tensor::from_fn(&[3, 2, 2], |_| 0.0);
        let out = overlay(&img, &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(out.get_pixel(0, 0).0, [0, 0, 0]);
        assert_ne!(out.get_pixel(1, 0).0, [0, 0, 0]);
        assert!(overlay(&img, &[0, 2, 0, 0], 2).is_err());
        assert!(overlay(&img, &[0, 1], 2).is_err());
    }
}
