use crate::error::{Error, Result};

/// Uniform time grid `t_j = j·T/n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    step: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
        }
        Ok(Self {
            horizon,
            n_steps,
            step: horizon / n_steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Node `t_j`; the last node is exactly `T`.
    pub fn node(&self, j: usize) -> f64 {
        if j >= self.n_steps {
            self.horizon
        } else {
            j as f64 * self.step
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|j| self.node(j)).collect()
    }

    /// Index `j` of the step `(t_j, t_{j+1}]` that contains `tau`.
    pub fn step_containing(&self, tau: f64) -> usize {
        let j = (tau / self.step).ceil() as usize;
        j.saturating_sub(1).min(self.n_steps - 1)
    }

    /// Last node index with `t_j ≤ t` (with a small relative slack).
    pub fn last_node_at_or_before(&self, t: f64) -> usize {
        let j = (t / self.step * (1.0 + 1e-12) + 1e-12).floor() as usize;
        j.min(self.n_steps)
    }
}
