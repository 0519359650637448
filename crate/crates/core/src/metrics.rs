//! Per-class IoU, mIoU and multi-run aggregation.
//!
//! A class absent from both prediction and ground truth scores 1.

use serde::{Deserialize, Serialize};

use crate::batch::LabelBatch;
use crate::error::{Error, Result};

/// Intersection and union pixel counts per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(categories: usize) -> Self {
        Self {
            intersection: vec![0; categories],
            union: vec![0; categories],
        }
    }

    pub fn categories(&self) -> usize {
        self.intersection.len()
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.categories();
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= k || g >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {} >= {k} categories",
                    p.max(g)
                )));
            }
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn add_batch(&mut self, pred: &LabelBatch, gt: &LabelBatch) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        self.add(pred.as_slice(), gt.as_slice())
    }

    pub fn iou(&self) -> Vec<f64> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
            .collect()
    }
}

pub fn iou_per_class(pred: &LabelBatch, gt: &LabelBatch, categories: usize) -> Result<Vec<f64>> {
    let mut acc = IouAccumulator::new(categories);
    acc.add_batch(pred, gt)?;
    Ok(acc.iou())
}

pub fn mean_iou(per_class: &[f64]) -> f64 {
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub runs: usize,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation per class and for mIoU.
pub fn aggregate_runs(per_run: &[Vec<f64>]) -> Result<Aggregate> {
    let first = per_run
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to aggregate".into()))?;
    if first.is_empty() {
        return Err(Error::InvalidArgument("runs hold no classes".into()));
    }
    if let Some(r) = per_run.iter().find(|r| r.len() != first.len()) {
        return Err(Error::Shape(format!(
            "run with {} classes among runs with {}",
            r.len(),
            first.len()
        )));
    }
    let (mean, std) = (0..first.len())
        .map(|k| mean_std(per_run.iter().map(move |r| r[k])))
        .unzip();
    let (miou_mean, miou_std) = mean_std(per_run.iter().map(|r| mean_iou(r)));
    Ok(Aggregate {
        mean,
        std,
        miou_mean,
        miou_std,
        runs: per_run.len(),
    })
}
