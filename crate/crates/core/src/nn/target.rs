use crate::error::{Error, Result};

use super::Mlp;

/// Slowly tracking shadow of an online network.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCopy {
    pub net: Mlp,
}

impl TargetCopy {
    pub fn of(online: &Mlp) -> Self {
        Self { net: online.clone() }
    }

    /// `shadow <- (1 - rho) * shadow + rho * online`.
    pub fn update(&mut self, online: &Mlp, rho: f64) -> Result<()> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidConfig(format!("EMA rate must lie in (0, 1], got {rho}")));
        }
        if online.sizes() != self.net.sizes() {
            return Err(Error::ShapeMismatch {
                expected: self.net.num_params(),
                got: online.num_params(),
            });
        }
        for (s, &o) in self.net.params_mut().iter_mut().zip(online.params()) {
            *s = (1.0 - rho) * *s + rho * o;
        }
        Ok(())
    }
}
