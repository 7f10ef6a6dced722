//! Classifier-free guidance and per-view guidance-scale schedules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `mu_uncond + gamma * (mu_cond - mu_uncond)`
pub fn combine_cfg<T: Scalar>(mu_cond: &Tensor<T>, mu_uncond: &Tensor<T>, gamma: T) -> Result<Tensor<T>> {
    mu_uncond.zip_map(mu_cond, "combine_cfg", |u, c| u + gamma * (c - u))
}

/// The empty image prompt: zeros with the shape of the real prompt.
pub fn empty_prompt<T: Scalar>(like: &Tensor<T>) -> Tensor<T> {
    Tensor::zeros(like.shape())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfgMode {
    Constant,
    /// Linear from the front view to the back view and back again.
    Triangular,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfgSchedule {
    pub mode: CfgMode,
    pub gamma_front: f64,
    pub gamma_back: f64,
}

impl CfgSchedule {
    pub fn constant(gamma: f64) -> Self {
        Self {
            mode: CfgMode::Constant,
            gamma_front: gamma,
            gamma_back: gamma,
        }
    }

    pub fn triangular(gamma_front: f64, gamma_back: f64) -> Self {
        Self {
            mode: CfgMode::Triangular,
            gamma_front,
            gamma_back,
        }
    }

    /// Guidance scale for view `view_index` out of `num_views`.
    ///
    /// The back view sits at `floor(num_views / 2)`; the triangle is
    /// symmetric, so `gamma(i) == gamma(num_views - i)`.
    pub fn gamma_at_view(&self, view_index: usize, num_views: usize) -> Result<f64> {
        if view_index >= num_views {
            return Err(Error::Argument(format!(
                "view index {view_index} out of range for {num_views} views"
            )));
        }
        match self.mode {
            CfgMode::Constant => Ok(self.gamma_front),
            CfgMode::Triangular => {
                if num_views < 2 {
                    return Err(Error::Argument(
                        "triangular guidance needs at least two views".into(),
                    ));
                }
                let n = num_views as f64;
                let back = (num_views / 2) as f64;
                // distance travelled around the orbit, folded at the back view
                let pos = view_index as f64;
                let d = pos.min(n - pos);
                // for odd counts the folded distance at the back view is
                // back + 0.5 on one side; clamp so the apex is attained
                let frac = (d / back).min(1.0);
                Ok(self.gamma_front + frac * (self.gamma_back - self.gamma_front))
            }
        }
    }

    /// All per-view scales.
    pub fn gammas(&self, num_views: usize) -> Result<Vec<f64>> {
        (0..num_views).map(|v| self.gamma_at_view(v, num_views)).collect()
    }

    pub fn min_gamma(&self) -> f64 {
        self.gamma_front.min(self.gamma_back)
    }

    pub fn describe(&self) -> String {
        match self.mode {
            CfgMode::Constant => format!("constant {}", self.gamma_front),
            CfgMode::Triangular => {
                format!("triangular {} -> {} -> {}", self.gamma_front, self.gamma_back, self.gamma_front)
            }
        }
    }
}
