//! Confusion-matrix evaluation: class-wise F1, mean F1 and mean IoU with the
//! background class excluded, plus head/tail stratified reports.

use serde::Serialize;

use crate::data::{ClassInfo, ClassKind};
use crate::error::{Error, Result};
use crate::objective::LabelMask;

/// `counts[g][p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape(
                "confusion",
                format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
            ));
        }
        pred.validate(self.n)?;
        gt.validate(self.n)?;
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            self.counts[g as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum; the result is independent of merge order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape(
                "confusion",
                format!("merging {} classes into {}", other.n, self.n),
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.n..(i + 1) * self.n].iter().sum()
    }

    fn col_sum(&self, i: usize) -> u64 {
        (0..self.n).map(|g| self.get(g, i)).sum()
    }

    /// Per-class scores; `None` for a class absent from both prediction and
    /// ground truth.
    pub fn class_scores(&self) -> Vec<Option<ClassScore>> {
        (0..self.n)
            .map(|i| {
                let tp = self.get(i, i);
                let (row, col) = (self.row_sum(i), self.col_sum(i));
                if row == 0 && col == 0 {
                    return None;
                }
                if tp == 0 {
                    return Some(ClassScore { f1: 0.0, iou: 0.0 });
                }
                let precision = tp as f64 / col as f64;
                let recall = tp as f64 / row as f64;
                Some(ClassScore {
                    f1: 2.0 * precision * recall / (precision + recall),
                    iou: tp as f64 / (row + col - tp) as f64,
                })
            })
            .collect()
    }

    pub fn f1_per_class(&self) -> Vec<Option<f64>> {
        self.class_scores().iter().map(|s| s.map(|s| s.f1)).collect()
    }

    /// Mean F1 over present foreground classes; `None` if there are none.
    pub fn mean_f1(&self) -> Option<f64> {
        mean(self.class_scores().iter().skip(1).filter_map(|s| s.map(|s| s.f1)))
    }

    pub fn mean_iou(&self) -> Option<f64> {
        mean(self.class_scores().iter().skip(1).filter_map(|s| s.map(|s| s.iou)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub f1: f64,
    pub iou: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassRow {
    pub id: usize,
    pub name: String,
    pub kind: ClassKind,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LongTailReport {
    pub classes: Vec<ClassRow>,
    pub mean_f1: Option<f64>,
    pub mean_iou: Option<f64>,
    pub head_mean_f1: Option<f64>,
    /// `None` when the catalog has no tail class or none was present.
    pub tail_mean_f1: Option<f64>,
}

/// Head/tail stratified scores. Background is listed but never averaged.
pub fn longtail_report(cm: &ConfusionMatrix, catalog: &[ClassInfo]) -> Result<LongTailReport> {
    if catalog.len() != cm.num_classes() {
        return Err(Error::Validation(format!(
            "catalog lists {} classes, confusion matrix has {}",
            catalog.len(),
            cm.num_classes()
        )));
    }
    let scores = cm.class_scores();
    let classes: Vec<ClassRow> = catalog
        .iter()
        .zip(&scores)
        .map(|(c, s)| ClassRow {
            id: c.id,
            name: c.name.clone(),
            kind: c.kind,
            f1: s.map(|s| s.f1),
            iou: s.map(|s| s.iou),
        })
        .collect();
    let group = |kind: ClassKind| {
        mean(
            classes
                .iter()
                .filter(|r| r.id != 0 && r.kind == kind)
                .filter_map(|r| r.f1),
        )
    };
    Ok(LongTailReport {
        mean_f1: cm.mean_f1(),
        mean_iou: cm.mean_iou(),
        head_mean_f1: group(ClassKind::Head),
        tail_mean_f1: group(ClassKind::Tail),
        classes,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl LongTailReport {
    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
        let mut out = format!("{:>3}  {:<width$}  {:<4}  {:>6}  {:>6}\n", "id", "class", "kind", "F1", "IoU");
        for c in &self.classes {
            let kind = match c.kind {
                ClassKind::Head => "head",
                ClassKind::Tail => "tail",
            };
            out += &format!(
                "{:>3}  {:<width$}  {:<4}  {:>6}  {:>6}\n",
                c.id,
                c.name,
                kind,
                fmt_opt(c.f1),
                fmt_opt(c.iou)
            );
        }
        out += &format!("mean F1 {}  mean IoU {}\n", fmt_opt(self.mean_f1), fmt_opt(self.mean_iou));
        out += &format!(
            "head mean F1 {}  tail mean F1 {}\n",
            fmt_opt(self.head_mean_f1),
            fmt_opt(self.tail_mean_f1)
        );
        out
    }

    /// Machine-readable record in the metrics-log format.
    pub fn to_record(&self) -> serde_json::Value {
        let per_class: serde_json::Map<String, serde_json::Value> = self
            .classes
            .iter()
            .map(|c| (c.name.clone(), serde_json::json!(c.f1)))
            .collect();
        serde_json::json!({
            "event": "eval",
            "f1": per_class,
            "mean_f1": self.mean_f1,
            "mean_iou": self.mean_iou,
            "head_mean_f1": self.head_mean_f1,
            "tail_mean_f1": self.tail_mean_f1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, ids: &[u8]) -> LabelMask {
        LabelMask::new(1, h, w, ids.to_vec()).unwrap()
    }

    fn catalog(kinds: &[ClassKind]) -> Vec<ClassInfo> {
        kinds
            .iter()
            .enumerate()
            .map(|(id, &kind)| ClassInfo {
                id,
                name: format!("c{id}"),
                kind,
                p: 1.0,
            })
            .collect()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let m = mask(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&m, &m).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p) > 0, g == p && [1, 2, 1][g] > 0);
            }
        }
        assert_eq!(cm.mean_f1(), Some(1.0));
        assert_eq!(cm.mean_iou(), Some(1.0));
    }

    #[test]
    fn empty_masks_leave_counts() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&mask(0, 0, &[]), &mask(0, 0, &[])).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
        assert_eq!(cm.mean_f1(), None);
    }

    #[test]
    fn two_by_two_counts() {
        let gt = mask(2, 2, &[0, 1, 1, 2]);
        let pred = mask(2, 2, &[0, 1, 2, 2]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(1, 2), cm.get(2, 2)), (1, 1, 1, 1));
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn never_predicted_class_scores_zero() {
        let gt = mask(1, 3, &[0, 1, 2]);
        let pred = mask(1, 3, &[0, 1, 1]);
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &gt).unwrap();
        let f1 = cm.f1_per_class();
        assert_eq!(f1[2], Some(0.0));
        assert_eq!(f1[3], None);
        // Class 1: P = 1/2, R = 1, F1 = 2/3; class 2: 0; class 3 skipped.
        assert!((cm.mean_f1().unwrap() - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn four_by_four_two_class() {
        // Foreground gt: 6 pixels; predicted: 5, of which 4 overlap.
        #[rustfmt::skip]
        let gt = [1, 1, 1, 0,
                  1, 1, 1, 0,
                  0, 0, 0, 0,
                  0, 0, 0, 0];
        #[rustfmt::skip]
        let pred = [0, 1, 1, 0,
                    0, 1, 1, 1,
                    0, 0, 0, 0,
                    0, 0, 0, 0];
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&mask(4, 4, &pred), &mask(4, 4, &gt)).unwrap();
        let f1 = 2.0 * 4.0 / (6.0 + 5.0);
        let iou = 4.0 / 7.0;
        assert!((cm.mean_f1().unwrap() - f1).abs() < 1e-15);
        assert!((cm.mean_iou().unwrap() - iou).abs() < 1e-15);
    }

    #[test]
    fn merge_mismatch_rejected() {
        let mut a = ConfusionMatrix::new(3);
        assert!(a.merge(&ConfusionMatrix::new(4)).is_err());
    }

    #[test]
    fn all_head_catalog_has_no_tail_mean() {
        let m = mask(1, 3, &[0, 1, 2]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&m, &m).unwrap();
        let r = longtail_report(&cm, &catalog(&[ClassKind::Head; 3])).unwrap();
        assert_eq!(r.tail_mean_f1, None);
        assert_eq!(r.head_mean_f1, Some(1.0));
        assert!(r.to_table().contains("tail mean F1 -"));
        assert!(r.to_record()["tail_mean_f1"].is_null());
    }

    #[test]
    fn perfect_tail_imperfect_head() {
        let gt = mask(1, 4, &[0, 1, 2, 1]);
        let pred = mask(1, 4, &[0, 0, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        let r = longtail_report(&cm, &catalog(&[ClassKind::Head, ClassKind::Head, ClassKind::Tail])).unwrap();
        assert_eq!(r.tail_mean_f1, Some(1.0));
        assert!(r.head_mean_f1.unwrap() < 1.0);
        let f1 = cm.f1_per_class();
        assert_eq!(r.classes.iter().map(|c| c.f1).collect::<Vec<_>>(), f1);
    }
}
