use std::fmt;

use serde::{Deserialize, Serialize};

/// Patch-label rule for the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelCriterion {
    /// Cancer iff at least 51% of the patch is tumour.
    #[serde(rename = "CL1")]
    Cl1,
    /// Cancer iff any pixel is tumour.
    #[serde(rename = "CL2")]
    Cl2,
}

impl fmt::Display for LabelCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelCriterion::Cl1 => "CL1",
            LabelCriterion::Cl2 => "CL2",
        })
    }
}

impl LabelCriterion {
    pub fn assign(self, mask: &[u8]) -> u8 {
        match self {
            LabelCriterion::Cl1 => assign_label_cl1(mask),
            LabelCriterion::Cl2 => assign_label_cl2(mask),
        }
    }
}

fn positives(mask: &[u8]) -> usize {
    mask.iter().filter(|&&v| v != 0).count()
}

/// 1 iff the positive fraction is ≥ 0.51, evaluated in integers.
pub fn assign_label_cl1(mask: &[u8]) -> u8 {
    u8::from(!mask.is_empty() && 100 * positives(mask) >= 51 * mask.len())
}

/// 1 iff at least one pixel is positive.
pub fn assign_label_cl2(mask: &[u8]) -> u8 {
    u8::from(mask.iter().any(|&v| v != 0))
}
