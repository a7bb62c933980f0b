//! Confusion matrix, per-class IoU and F1, mean IoU.
//!
//! Classes that appear in neither the truth nor the prediction have no
//! defined IoU or F1; they are reported as absent and left out of the means.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelMap;
use crate::error::{Error, Result};

/// `counts[i * classes + j]` = pixels with truth `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, predicted: &LabelMap, truth: &LabelMap) -> Result<()> {
        if predicted.width() != truth.width() || predicted.height() != truth.height() {
            return Err(Error::Validation(format!(
                "prediction is {}x{} but truth is {}x{}",
                predicted.width(),
                predicted.height(),
                truth.width(),
                truth.height()
            )));
        }
        predicted.check_classes(self.classes)?;
        truth.check_classes(self.classes)?;
        for (&p, &t) in predicted.data().iter().zip(truth.data()) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Validation(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    /// Predicted as `class` but something else in truth.
    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.classes)
            .filter(|&t| t != class)
            .map(|t| self.get(t, class))
            .sum()
    }

    /// `class` in truth but predicted as something else.
    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.classes)
            .filter(|&p| p != class)
            .map(|p| self.get(class, p))
            .sum()
    }

    /// IoU as an exact fraction `(tp, tp + fp + fn)`; `None` when the class
    /// is absent from both maps.
    pub fn iou_ratio(&self, class: usize) -> Option<(u64, u64)> {
        let tp = self.true_positives(class);
        let den = tp + self.false_positives(class) + self.false_negatives(class);
        (den > 0).then_some((tp, den))
    }

    /// F1 as an exact fraction `(2 tp, 2 tp + fp + fn)`.
    pub fn f1_ratio(&self, class: usize) -> Option<(u64, u64)> {
        let tp = self.true_positives(class);
        let den = 2 * tp + self.false_positives(class) + self.false_negatives(class);
        (den > 0).then_some((2 * tp, den))
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        self.iou_ratio(class).map(|(n, d)| n as f64 / d as f64)
    }

    pub fn f1(&self, class: usize) -> Option<f64> {
        self.f1_ratio(class).map(|(n, d)| n as f64 / d as f64)
    }

    /// Classes with a defined IoU.
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.classes)
            .filter(|&c| self.iou_ratio(c).is_some())
            .collect()
    }

    /// Mean IoU over present classes; `None` when nothing was accumulated.
    pub fn miou(&self) -> Option<f64> {
        mean((0..self.classes).filter_map(|c| self.iou(c)))
    }

    /// F1 averaged over present classes.
    pub fn macro_f1(&self) -> Option<f64> {
        mean((0..self.classes).filter_map(|c| self.f1(c)))
    }

    /// Fraction of pixels on the diagonal.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| diag as f64 / total as f64)
    }

    pub fn report(&self, names: &[String]) -> MetricsReport {
        let per_class = (0..self.classes)
            .map(|c| ClassScore {
                name: names
                    .get(c)
                    .cloned()
                    .unwrap_or_else(|| format!("class {c}")),
                iou: self.iou(c),
                f1: self.f1(c),
            })
            .collect();
        MetricsReport {
            per_class,
            miou: self.miou(),
            macro_f1: self.macro_f1(),
            // binary tasks quote the foreground class alone
            foreground_f1: if self.classes == 2 { self.f1(1) } else { None },
            pixel_accuracy: self.pixel_accuracy(),
            pixels: self.total(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScore>,
    pub miou: Option<f64>,
    pub macro_f1: Option<f64>,
    pub foreground_f1: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub pixels: u64,
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self
            .per_class
            .iter()
            .map(|c| c.name.len())
            .chain(["class".len(), "macro F1".len()])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let mut line = |a: &str, b: String, c: String| {
            writeln!(s, "{a:<width$}  {b:>8}  {c:>8}").expect("writing to a string");
        };
        line("class", "IoU".into(), "F1".into());
        for c in &self.per_class {
            line(&c.name, fmt_score(c.iou), fmt_score(c.f1));
        }
        line("mIoU", fmt_score(self.miou), String::new());
        line("macro F1", String::new(), fmt_score(self.macro_f1));
        if self.foreground_f1.is_some() {
            line("fg F1", String::new(), fmt_score(self.foreground_f1));
        }
        let absent: Vec<&str> = self
            .per_class
            .iter()
            .filter(|c| c.iou.is_none())
            .map(|c| c.name.as_str())
            .collect();
        if !absent.is_empty() {
            writeln!(s, "excluded from means (absent): {}", absent.join(", "))
                .expect("writing to a string");
        }
        s
    }

    /// `key=value` lines: `iou.<class>`, `f1.<class>`, `miou`, `macro_f1`.
    /// Absent classes get the value `absent`.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let key = |name: &str| name.replace([' ', '='], "_");
        for c in &self.per_class {
            writeln!(s, "iou.{}={}", key(&c.name), kv(c.iou)).expect("writing to a string");
        }
        for c in &self.per_class {
            writeln!(s, "f1.{}={}", key(&c.name), kv(c.f1)).expect("writing to a string");
        }
        writeln!(s, "miou={}", kv(self.miou)).expect("writing to a string");
        writeln!(s, "macro_f1={}", kv(self.macro_f1)).expect("writing to a string");
        if self.foreground_f1.is_some() {
            writeln!(s, "foreground_f1={}", kv(self.foreground_f1)).expect("writing to a string");
        }
        writeln!(s, "pixel_accuracy={}", kv(self.pixel_accuracy)).expect("writing to a string");
        writeln!(s, "pixels={}", self.pixels).expect("writing to a string");
        s
    }
}

fn kv(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| v.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: usize, d: &[u8]) -> LabelMap {
        LabelMap::new(w, d.len() / w, d.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_counts() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(2, &[0, 1, 1, 1]), &map(2, &[0, 0, 1, 1])).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 2));
        // class 0: tp 1, fn 1 -> 1/2; class 1: tp 2, fp 1 -> 2/3
        assert_eq!(cm.iou_ratio(0), Some((1, 2)));
        assert_eq!(cm.iou_ratio(1), Some((2, 3)));
    }

    #[test]
    fn perfect_and_disjoint() {
        let m = map(3, &[0, 1, 2, 2, 1, 0]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&m, &m).unwrap();
        for c in 0..3 {
            assert_eq!(cm.iou(c), Some(1.0));
            assert_eq!(cm.f1(c), Some(1.0));
        }
        assert_eq!(cm.miou(), Some(1.0));
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(2, &[1, 1]), &map(2, &[0, 0])).unwrap();
        assert_eq!(cm.iou(0), Some(0.0));
        assert_eq!(cm.f1(1), Some(0.0));
    }

    #[test]
    fn formula_examples() {
        // tp 3, fp 1, fn 0 for class 1
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(4, &[1, 1, 1, 1]), &map(4, &[1, 1, 1, 0])).unwrap();
        assert_eq!(cm.iou(1), Some(0.75));
        // tp 3, fp 1, fn 1
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(5, &[1, 1, 1, 1, 0]), &map(5, &[1, 1, 1, 0, 1])).unwrap();
        assert_eq!(cm.f1(1), Some(0.75));
    }

    #[test]
    fn miou_is_plain_mean() {
        assert_eq!(mean([1.0, 0.5].into_iter()), Some(0.75));
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&map(3, &[0, 1, 1]), &map(3, &[0, 1, 2])).unwrap();
        // class 0: 1/1, class 1: 1/2, class 2: 0/1
        assert_eq!(cm.miou(), Some((1.0 + 0.5 + 0.0) / 3.0));
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(3, &[0, 1, 1]), &map(3, &[0, 1, 0])).unwrap();
        // class 0: 1/2, class 1: 1/2
        assert_eq!(cm.miou(), Some(0.5));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&map(2, &[1, 1]), &map(2, &[1, 1])).unwrap();
        assert_eq!(cm.iou(0), None);
        assert_eq!(cm.miou(), Some(1.0));
        assert_eq!(cm.present_classes(), vec![1]);
        let r = cm.report(&[]);
        assert!(r.to_table().contains("excluded from means (absent): class 0, class 2, class 3"));
        assert!(r.to_key_value().contains("iou.class_0=absent"));
    }

    #[test]
    fn empty_maps_leave_matrix() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&map(1, &[2]), &map(1, &[0])).unwrap();
        let before = cm.clone();
        let empty = LabelMap::new(0, 0, vec![]).unwrap();
        cm.accumulate(&empty, &empty).unwrap();
        assert_eq!(cm, before);
        assert_eq!(ConfusionMatrix::new(3).miou(), None);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&map(2, &[0, 0]), &map(1, &[0, 0])),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            cm.accumulate(&map(2, &[0, 2]), &map(2, &[0, 0])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn table_is_aligned() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(2, &[0, 1]), &map(2, &[0, 1])).unwrap();
        let t = cm.report(&["background".into(), "building".into()]).to_table();
        let widths: Vec<usize> = t.lines().take(3).map(|l| l.len()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{t}");
        assert!(t.contains("fg F1"));
    }

    fn pair(classes: u8) -> impl Strategy<Value = (LabelMap, LabelMap)> {
        (
            proptest::collection::vec(0..classes, 16),
            proptest::collection::vec(0..classes, 16),
        )
            .prop_map(|(a, b)| (map(4, &a), map(4, &b)))
    }

    proptest! {
        #[test]
        fn f1_is_monotone_in_iou((p, t) in pair(4)) {
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&p, &t).unwrap();
            for c in 0..4 {
                if let (Some(i), Some(f)) = (cm.iou(c), cm.f1(c)) {
                    prop_assert!(f >= i);
                    prop_assert!((f - 2.0 * i / (1.0 + i)).abs() < 1e-12);
                    prop_assert_eq!(f == i, i == 0.0 || i == 1.0);
                }
            }
        }

        #[test]
        fn relabeling_permutes_scores((p, t) in pair(4), perm in Just([2u8, 0, 3, 1]).prop_shuffle()) {
            let relabel = |m: &LabelMap| LabelMap::new(4, 4, m.data().iter().map(|&c| perm[c as usize]).collect()).unwrap();
            let mut a = ConfusionMatrix::new(4);
            a.accumulate(&p, &t).unwrap();
            let mut b = ConfusionMatrix::new(4);
            b.accumulate(&relabel(&p), &relabel(&t)).unwrap();
            for c in 0..4 {
                prop_assert_eq!(a.iou_ratio(c), b.iou_ratio(perm[c] as usize));
            }
            let (ma, mb) = (a.miou().unwrap(), b.miou().unwrap());
            prop_assert!((ma - mb).abs() < 1e-12);
        }

        #[test]
        fn accumulation_is_additive((p1, t1) in pair(3), (p2, t2) in pair(3)) {
            let mut both = ConfusionMatrix::new(3);
            both.accumulate(&p1, &t1).unwrap();
            both.accumulate(&p2, &t2).unwrap();
            let mut a = ConfusionMatrix::new(3);
            a.accumulate(&p1, &t1).unwrap();
            let mut b = ConfusionMatrix::new(3);
            b.accumulate(&p2, &t2).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(a, both);
        }
    }
}
