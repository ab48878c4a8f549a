//! Number formatting for CSV artifacts.

/// Seventeen significant digits: enough to read back the exact double.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}
