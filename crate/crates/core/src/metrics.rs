//! Error statistics for evaluation reports.

/// Summary of a list of errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    pub count: usize,
    /// Midpoint of the two middle values for even counts.
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ErrorStats {
    /// `None` for an empty list.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Some(Self { count: n, median, mean: s.iter().sum::<f64>() / n as f64, min: s[0], max: s[n - 1] })
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    ErrorStats::of(values).map(|s| s.median)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    ErrorStats::of(values).map(|s| s.mean)
}
