use serde::{Deserialize, Serialize};

/// Convex, nonincreasing surrogate for the 0-1 loss `1(t < 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateLoss {
    /// `max(1 - t, 0)`.
    Hinge,
    /// `max(1 - t, 0)^2`, differentiable everywhere.
    #[default]
    SmoothHinge,
}

impl SurrogateLoss {
    #[inline]
    pub fn value(self, t: f64) -> f64 {
        let gap = (1.0 - t).max(0.0);
        match self {
            SurrogateLoss::Hinge => gap,
            SurrogateLoss::SmoothHinge => gap * gap,
        }
    }

    /// Derivative (a subgradient at the kink for the hinge).
    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            SurrogateLoss::Hinge => {
                if t < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            SurrogateLoss::SmoothHinge => -2.0 * (1.0 - t).max(0.0),
        }
    }
}
