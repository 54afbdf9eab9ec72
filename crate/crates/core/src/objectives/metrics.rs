use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Pixel counts for one class treated as foreground.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Per-class confusion counts over a mask pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            classes: vec![ClassCounts::default(); num_classes],
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(b);
        }
    }
}

pub type Exact = Ratio<u128>;

fn ratio(num: u64, den: u64) -> Exact {
    Ratio::new(num as u128, den as u128)
}

fn to_f64(r: Exact) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Per-class counts; `num_classes` includes background.
pub fn confusion(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::dim(
            "confusion",
            format!("{} predicted vs {} reference pixels", pred.len(), gt.len()),
        ));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v as usize >= num_classes) {
        return Err(Error::dim("confusion", format!("label {bad} with {num_classes} classes")));
    }
    let mut counts = ConfusionCounts::new(num_classes);
    for (c, cc) in counts.classes.iter_mut().enumerate() {
        for (&p, &g) in pred.iter().zip(gt) {
            match (p as usize == c, g as usize == c) {
                (true, true) => cc.tp += 1,
                (true, false) => cc.fp += 1,
                (false, true) => cc.fn_ += 1,
                (false, false) => cc.tn += 1,
            }
        }
    }
    Ok(counts)
}

/// F1 from precision and recall, in exact arithmetic. Both masks empty → 1.
pub fn f1_exact(c: &ClassCounts) -> Exact {
    if c.both_empty() {
        return Exact::from_integer(1);
    }
    if c.tp == 0 {
        return Exact::from_integer(0);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Exact::from_integer(2) * precision * recall / (precision + recall)
}

/// `|P∩G| / |P∪G|` in exact arithmetic. Both masks empty → 1.
pub fn iou_exact(c: &ClassCounts) -> Exact {
    if c.both_empty() {
        return Exact::from_integer(1);
    }
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// `2|P∩G| / (|P| + |G|)` in exact arithmetic. Both masks empty → 1.
pub fn dsc_exact(c: &ClassCounts) -> Exact {
    if c.both_empty() {
        return Exact::from_integer(1);
    }
    ratio(2 * c.tp, (c.tp + c.fp) + (c.tp + c.fn_))
}

pub fn f1(c: &ClassCounts) -> f64 {
    to_f64(f1_exact(c))
}

pub fn iou(c: &ClassCounts) -> f64 {
    to_f64(iou_exact(c))
}

pub fn dsc(c: &ClassCounts) -> f64 {
    to_f64(dsc_exact(c))
}

/// Mean per-class DSC, over classes `1..K` when `exclude_background`.
pub fn mean_dice_from_counts(counts: &ConfusionCounts, exclude_background: bool) -> f64 {
    let skip = usize::from(exclude_background && counts.classes.len() > 1);
    let scores: Vec<f64> = counts.classes[skip..].iter().map(dsc).collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn mean_dice(pred: &[u8], gt: &[u8], num_classes: usize, exclude_background: bool) -> Result<f64> {
    Ok(mean_dice_from_counts(&confusion(pred, gt, num_classes)?, exclude_background))
}

/// Hard labels from `N×K×H×W` logits: logit > 0 (probability > 0.5) for a
/// single channel, argmax (first on ties) otherwise. Returns `N·H·W` labels.
pub fn logits_to_labels<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        for p in 0..hw {
            if k == 1 {
                out.push(u8::from(d[i * hw + p] > T::zero()));
            } else {
                let mut best = 0;
                for c in 1..k {
                    if d[(i * k + c) * hw + p] > d[(i * k + best) * hw + p] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    out
}

/// Number of label values a head with `num_logits` channels produces.
pub fn label_classes(num_logits: usize) -> usize {
    num_logits.max(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fg(pred: &[u8], gt: &[u8]) -> ClassCounts {
        confusion(pred, gt, 2).unwrap().classes[1]
    }

    #[test]
    fn identical_masks() {
        let m = [0, 1, 1, 0, 1, 0];
        let counts = confusion(&m, &m, 2).unwrap();
        for c in &counts.classes {
            assert_eq!((c.fp, c.fn_), (0, 0));
        }
        let c = counts.classes[1];
        assert_eq!((f1(&c), iou(&c), dsc(&c)), (1.0, 1.0, 1.0));
    }

    #[test]
    fn complement_masks() {
        let p = [0, 1, 1, 0];
        let g = [1, 0, 0, 1];
        for c in confusion(&p, &g, 2).unwrap().classes {
            assert_eq!((c.tp, c.tn), (0, 0));
            assert_eq!((f1(&c), iou(&c), dsc(&c)), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn two_two_one_case() {
        let c = fg(&[1, 1, 0, 0], &[0, 1, 1, 0]);
        assert_eq!(iou_exact(&c), Exact::new(1, 3));
        assert_eq!(dsc_exact(&c), Exact::new(1, 2));
        assert_eq!(f1_exact(&c), Exact::new(1, 2));
    }

    #[test]
    fn both_empty_is_perfect() {
        let c = fg(&[0, 0, 0], &[0, 0, 0]);
        assert_eq!((f1(&c), iou(&c), dsc(&c)), (1.0, 1.0, 1.0));
    }

    #[test]
    fn four_by_four_hand_case() {
        #[rustfmt::skip]
        let pred = [0, 0, 1, 1,
                    0, 1, 1, 1,
                    0, 0, 1, 0,
                    0, 0, 0, 0];
        #[rustfmt::skip]
        let gt = [0, 0, 0, 1,
                  0, 1, 1, 1,
                  0, 1, 1, 1,
                  0, 0, 0, 0];
        let c = fg(&pred, &gt);
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (5, 1, 2, 8));
        assert_eq!(c.total(), 16);
        assert_eq!(iou_exact(&c), Exact::new(5, 8));
        assert_eq!(dsc_exact(&c), Exact::new(10, 13));
    }

    #[test]
    fn three_class_mean_dice() {
        let pred = [0, 1, 1, 2, 2, 2, 0, 1];
        let gt = [0, 1, 2, 2, 2, 1, 0, 1];
        // class 1: tp 2, fp 1, fn 1 → 4/6; class 2: tp 2, fp 1, fn 1 → 4/6
        let v = mean_dice(&pred, &gt, 3, true).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        let with_bg = mean_dice(&pred, &gt, 3, false).unwrap();
        assert!((with_bg - (1.0 + 4.0 / 6.0 + 4.0 / 6.0) / 3.0).abs() < 1e-15);
        assert_eq!(mean_dice(&gt, &gt, 3, true).unwrap(), 1.0);
    }

    #[test]
    fn single_foreground_mean_is_dsc() {
        let p = [1, 0, 1, 1, 0];
        let g = [1, 1, 0, 1, 0];
        assert_eq!(mean_dice(&p, &g, 2, true).unwrap(), dsc(&fg(&p, &g)));
    }

    #[test]
    fn confusion_errors() {
        assert!(confusion(&[0, 1], &[0], 2).is_err());
        assert!(confusion(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn labels_from_logits() {
        let binary = Tensor::new(&[1, 1, 1, 3], vec![-0.5f32, 0.0, 0.2]).unwrap();
        assert_eq!(logits_to_labels(&binary), vec![0, 0, 1]);
        let multi = Tensor::new(&[1, 3, 1, 2], vec![1.0f64, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(logits_to_labels(&multi), vec![0, 1]);
        assert_eq!(label_classes(1), 2);
        assert_eq!(label_classes(4), 4);
    }

    proptest! {
        #[test]
        fn counts_partition_pixels(pred in prop::collection::vec(0u8..3, 1..64), seed in any::<u64>()) {
            let gt: Vec<u8> = pred.iter().enumerate().map(|(i, &p)| ((p as u64 + seed.rotate_left(i as u32)) % 3) as u8).collect();
            for c in confusion(&pred, &gt, 3).unwrap().classes {
                prop_assert_eq!(c.total(), pred.len() as u64);
            }
        }

        #[test]
        fn dsc_iou_f1_identities(pairs in prop::collection::vec((0u8..2, 0u8..2), 0..80)) {
            let (p, g): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let c = fg(&p, &g);
            let j = iou_exact(&c);
            let one = Exact::from_integer(1);
            prop_assert_eq!(dsc_exact(&c), Exact::from_integer(2) * j / (one + j));
            prop_assert_eq!(f1_exact(&c), dsc_exact(&c));
        }
    }
}
