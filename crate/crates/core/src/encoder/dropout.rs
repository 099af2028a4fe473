//! Counter-based dropout masks.
//!
//! A keep/drop decision is a pure function of `(seed, layer, role, element)`,
//! so masks do not depend on evaluation order or thread count, and a backward
//! pass can regenerate exactly the masks its forward pass used.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Independent masks for every pass.
    #[default]
    Fresh,
    /// Both passes of a positive pair share one mask.
    Fixed,
    /// No dropout at all.
    None,
}

/// Which activation a mask applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum MaskRole {
    AttentionProbs = 1,
    FeedForwardHidden = 2,
}

/// Dropout mode plus the seed that keys every mask of one encoder call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DropoutPlan {
    pub mode: DropoutMode,
    pub seed: u64,
}

impl DropoutPlan {
    pub const fn none() -> Self {
        Self {
            mode: DropoutMode::None,
            seed: 0,
        }
    }

    pub const fn new(mode: DropoutMode, seed: u64) -> Self {
        Self { mode, seed }
    }

    /// Plan for pass `pass` of training step `step`.
    ///
    /// Fresh plans get a distinct seed per pass; fixed plans share one seed
    /// across the passes of a step.
    pub fn for_pass(mode: DropoutMode, base_seed: u64, step: u64, pass: u64) -> Self {
        let pass_key = match mode {
            DropoutMode::Fixed => 0,
            _ => pass + 1,
        };
        let seed = mix(mix(base_seed ^ 0x5EED_D50F_0000_0000) ^ step.wrapping_mul(GOLDEN))
            ^ mix(pass_key.wrapping_mul(0xD1B5_4A32_D192_ED03));
        Self { mode, seed }
    }

    pub fn is_active(&self) -> bool {
        self.mode != DropoutMode::None
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` for one mask element.
#[inline]
pub fn uniform(seed: u64, layer: usize, role: MaskRole, element: u64) -> f64 {
    let key = mix(seed ^ mix(((layer as u64) << 8) | role as u64));
    let bits = mix(key ^ element.wrapping_mul(GOLDEN));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Multiplier applied to an activation: `0` when dropped, `1/(1-p)` when kept.
#[inline]
pub fn mask_scale(plan: &DropoutPlan, p: f64, layer: usize, role: MaskRole, element: u64) -> f64 {
    if !plan.is_active() || p == 0.0 {
        return 1.0;
    }
    if uniform(plan.seed, layer, role, element) < p {
        0.0
    } else {
        1.0 / (1.0 - p)
    }
}
