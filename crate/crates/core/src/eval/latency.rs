use serde::{Deserialize, Serialize};

/// Summary of wall-clock samples, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    /// Population standard deviation.
    pub std_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_seconds(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return LatencyStats::default();
        }
        let ms: Vec<f64> = samples.iter().map(|s| s * 1e3).collect();
        let mean = ms.iter().sum::<f64>() / n as f64;
        let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        LatencyStats {
            count: n,
            mean_ms: mean,
            std_ms: var.sqrt(),
            median_ms: super::median(ms.iter().copied()),
            max_ms: ms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// `mean ± std` with three decimals.
    pub fn display(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean_ms, self.std_ms)
    }
}
