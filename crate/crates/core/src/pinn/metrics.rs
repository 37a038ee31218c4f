/// Values at or below this are reported as this floor, in dB.
pub const NMSE_FLOOR_DB: f64 = -100.0;

/// Mean NMSE over a set of samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmseSummary {
    pub mean: f64,
    pub mean_db: f64,
    /// Standard error of the dB mean (delta method).
    pub stderr_db: f64,
    pub count: usize,
}

pub fn to_db(x: f64) -> f64 {
    if x > 0.0 {
        (10.0 * x.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    }
}

/// Summarizes per-sample linear NMSE values; `None` for an empty slice.
pub fn summarize_nmse(values: &[f64]) -> Option<NmseSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let se = (var / n).sqrt();
    let stderr_db = if mean > 0.0 {
        10.0 / std::f64::consts::LN_10 * se / mean
    } else {
        0.0
    };
    Some(NmseSummary {
        mean,
        mean_db: to_db(mean),
        stderr_db,
        count: values.len(),
    })
}
