//! Pixelwise accuracy, intersection over union and temporal flicker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[gt * k + pred]`: rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel at `(gt, pred)`. Pixels whose ground truth
    /// equals `ignore` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "accumulate",
                format!("{} predictions for {} labels", pred.len(), gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::Invalid(format!(
                    "class index {} out of range for {} classes",
                    p.max(g),
                    self.k
                )));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Invalid(format!(
                "cannot merge {}-class and {}-class matrices",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn nonempty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::Invalid("confusion matrix is empty".into())),
            t => Ok(t),
        }
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.nonempty()?;
        let trace: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Per-class IoU, `None` for classes absent from both ground truth and
    /// prediction, and the mean over the present classes.
    pub fn mean_iou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        self.nonempty()?;
        let per_class: Vec<Option<f64>> = (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlickerReport {
    pub pair_fractions: Vec<f64>,
    pub mean: f64,
    pub pairs: usize,
}

impl FlickerReport {
    pub fn percent(&self) -> f64 {
        100.0 * self.mean
    }
}

/// Fraction of pixels whose predicted class changes between consecutive
/// frames, averaged over the frame pairs of one sequence.
pub fn mfip(preds: &[Vec<u8>]) -> Result<FlickerReport> {
    if preds.len() < 2 {
        return Err(Error::Invalid(format!(
            "flicker needs at least 2 frames, got {}",
            preds.len()
        )));
    }
    let n = preds[0].len();
    if n == 0 || preds.iter().any(|p| p.len() != n) {
        return Err(Error::shape("mfip", "frames must be non-empty with equal extents"));
    }
    let pair_fractions: Vec<f64> = preds
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count() as f64 / n as f64)
        .collect();
    let mean = pair_fractions.iter().sum::<f64>() / pair_fractions.len() as f64;
    Ok(FlickerReport {
        pairs: pair_fractions.len(),
        pair_fractions,
        mean,
    })
}

/// Evaluation summary as written to disk. IoU values are fractions; flicker
/// is in percent so that it reads like the usual tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    #[serde(rename = "mFIP_percent")]
    pub mfip_percent: Option<f64>,
}

impl Metrics {
    /// `flicker` holds one report per sequence; the overall value is their mean.
    pub fn from_parts(cm: &ConfusionMatrix, flicker: &[FlickerReport]) -> Result<Self> {
        let (miou, per_class_iou) = cm.mean_iou()?;
        let mfip_percent = (!flicker.is_empty())
            .then(|| flicker.iter().map(FlickerReport::percent).sum::<f64>() / flicker.len() as f64);
        Ok(Metrics {
            accuracy: cm.pixel_accuracy()?,
            miou,
            per_class_iou,
            mfip_percent,
        })
    }
}
