use crate::error::{Error, Result};

/// Asymmetric squared loss `|tau - 1(u < 0)| * u^2` and its derivative in `u`.
pub fn expectile_loss(u: f64, tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("expectile must lie in (0, 1), got {tau}")));
    }
    Ok(expectile_loss_unchecked(u, tau))
}

#[inline]
pub fn expectile_loss_unchecked(u: f64, tau: f64) -> (f64, f64) {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    (w * u * u, 2.0 * w * u)
}
