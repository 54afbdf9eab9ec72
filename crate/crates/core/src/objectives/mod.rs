//! Training losses (hybrid CE + Dice, BCE + Focal) and segmentation metrics
//! (F1, IoU, DSC, mean Dice).

mod losses;
mod metrics;

pub use losses::{
    bce, bce_focal, cross_entropy, dice_loss, focal, hybrid_loss, loss, one_hot, soft_dice, LossConfig, LossMode,
};
pub use metrics::{
    confusion, dsc, dsc_exact, f1, f1_exact, iou, iou_exact, label_classes, logits_to_labels, mean_dice,
    mean_dice_from_counts, ClassCounts, ConfusionCounts, Exact,
};
