//! Confusion-matrix based segmentation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore_index: u8,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_acc: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_index: u8) -> Self {
        Self {
            classes,
            ignore_index,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &Tensor<u8>, gt: &Tensor<u8>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape(
                "confusion accumulate",
                format!("prediction {:?} vs labels {:?}", pred.shape(), gt.shape()),
            ));
        }
        let c = self.classes;
        let check = |v: u8| {
            if v as usize >= c {
                Err(Error::LabelOutOfRange {
                    label: v,
                    classes: c,
                })
            } else {
                Ok(v as usize)
            }
        };
        let mut delta = vec![0u64; c * c];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == self.ignore_index {
                continue;
            }
            delta[check(g)? * c + check(p)?] += 1;
        }
        for (a, d) in self.counts.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "confusion merge",
                format!("{} vs {} classes", self.classes, other.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<SegMetrics> {
        let c = self.classes;
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("confusion matrix has no counted pixels".into()));
        }
        let mut trace = 0u64;
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let diag = self.get(k, k);
                trace += diag;
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|j| self.get(j, k)).sum();
                let union = row + col - diag;
                (union > 0).then(|| diag as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        Ok(SegMetrics {
            mean_iou: present.iter().sum::<f64>() / present.len() as f64,
            pixel_acc: trace as f64 / total as f64,
            per_class_iou,
        })
    }

    pub fn miou(&self) -> Result<f64> {
        Ok(self.metrics()?.mean_iou)
    }
}

impl SegMetrics {
    pub fn csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("class,iou\n");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(k).copied().unwrap_or("?");
            match iou {
                Some(v) => writeln!(out, "{name},{v:.6}").unwrap(),
                None => writeln!(out, "{name},").unwrap(),
            }
        }
        writeln!(out, "mean_iou,{:.6}", self.mean_iou).unwrap();
        writeln!(out, "pixel_acc,{:.6}", self.pixel_acc).unwrap();
        out
    }

    pub fn table(&self, class_names: &[&str]) -> String {
        let mut out = format!("{:<12} {:>8}\n", "class", "IoU");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(k).copied().unwrap_or("?");
            match iou {
                Some(v) => writeln!(out, "{name:<12} {v:>8.4}").unwrap(),
                None => writeln!(out, "{name:<12} {:>8}", "-").unwrap(),
            }
        }
        writeln!(out, "{:<12} {:>8.4}", "mIoU", self.mean_iou).unwrap();
        writeln!(out, "{:<12} {:>8.4}", "pixel acc", self.pixel_acc).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[u8]) -> Tensor<u8> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let labels = Tensor::from_fn(&[100], |i| (i % 3) as u8);
        let mut cm = ConfusionMatrix::new(3, 255);
        cm.accumulate(&labels, &labels).unwrap();
        assert_eq!((0..3).map(|k| cm.get(k, k)).sum::<u64>(), 100);
        let m = cm.metrics().unwrap();
        assert_eq!((m.mean_iou, m.pixel_acc), (1.0, 1.0));
    }

    #[test]
    fn all_wrong_binary() {
        let mut cm = ConfusionMatrix::new(2, 255);
        cm.accumulate(&t(&[4], &[1, 1, 0, 0]), &t(&[4], &[0, 0, 1, 1])).unwrap();
        assert_eq!(cm.miou().unwrap(), 0.0);
    }

    #[test]
    fn hand_matrix() {
        let mut cm = ConfusionMatrix::new(2, 255);
        // three right and one wrong in each row
        cm.accumulate(
            &t(&[8], &[0, 0, 0, 1, 1, 1, 1, 0]),
            &t(&[8], &[0, 0, 0, 0, 1, 1, 1, 1]),
        )
        .unwrap();
        let m = cm.metrics().unwrap();
        assert_eq!(m.per_class_iou, vec![Some(0.6), Some(0.6)]);
        assert!((m.mean_iou - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ignored_and_empty() {
        let mut cm = ConfusionMatrix::new(2, 255);
        cm.accumulate(&t(&[2], &[0, 1]), &t(&[2], &[255, 255])).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.metrics(), Err(Error::Empty(_))));
        assert!(cm.accumulate(&t(&[1], &[2]), &t(&[1], &[0])).is_err());
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3, 255);
        cm.accumulate(&t(&[2], &[0, 1]), &t(&[2], &[0, 1])).unwrap();
        let m = cm.metrics().unwrap();
        assert_eq!(m.per_class_iou[2], None);
        assert_eq!(m.mean_iou, 1.0);
        assert!(m.table(&["a", "b", "c"]).contains("mIoU"));
        assert!(m.csv(&["a", "b", "c"]).starts_with("class,iou\na,1.000000"));
    }
}
