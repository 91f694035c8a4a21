use serde::{Deserialize, Serialize};

use super::closed_loop::TrialRecord;
use crate::units::SAMPLE_TIME;

/// Glucose band edges [mmol/L]; every band is closed on the left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlycemicBands {
    pub severe_hypo: f64,
    pub hypo: f64,
    pub hyper: f64,
    pub severe_hyper: f64,
}

impl Default for GlycemicBands {
    fn default() -> Self {
        Self {
            severe_hypo: 3.0,
            hypo: 3.9,
            hyper: 10.0,
            severe_hyper: 13.9,
        }
    }
}

impl GlycemicBands {
    /// Band index 0..5: severe hypo, hypo, normo, hyper, severe hyper.
    pub fn classify(&self, g: f64) -> usize {
        if g < self.severe_hypo {
            0
        } else if g < self.hypo {
            1
        } else if g < self.hyper {
            2
        } else if g < self.severe_hyper {
            3
        } else {
            4
        }
    }

    /// Percentage of samples in each band.
    pub fn percentages(&self, glucose: &[f64]) -> [f64; 5] {
        let mut counts = [0usize; 5];
        for &g in glucose {
            counts[self.classify(g)] += 1;
        }
        let n = glucose.len().max(1) as f64;
        counts.map(|c| 100.0 * c as f64 / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TirStats {
    /// Percent of samples: [< 3, [3, 3.9), [3.9, 10), [10, 13.9), >= 13.9].
    pub bands: [f64; 5],
    pub mean_glucose: f64,
    pub samples: usize,
    /// [U/day]
    pub basal_per_day: f64,
    /// [U/day]
    pub bolus_per_day: f64,
    /// [ug/day]
    pub glucagon_per_day: f64,
}

impl TirStats {
    pub fn normoglycemia(&self) -> f64 {
        self.bands[2]
    }

    pub fn below_range(&self) -> f64 {
        self.bands[0] + self.bands[1]
    }
}

/// Band percentages of the true plasma glucose on the sampling grid plus
/// daily insulin and glucagon totals.
pub fn tir_stats(record: &TrialRecord, bands: &GlycemicBands) -> TirStats {
    let glucose: alloc::vec::Vec<f64> = record.intervals.iter().map(|r| r.g).collect();
    let n = glucose.len();
    let days = (n as f64 * SAMPLE_TIME / 1440.0).max(f64::MIN_POSITIVE);
    let (mut basal, mut bolus, mut glucagon) = (0.0, 0.0, 0.0);
    for r in &record.intervals {
        basal += r.uba * SAMPLE_TIME / 1000.0;
        bolus += r.ubo * SAMPLE_TIME / 1000.0;
        glucagon += r.ug * SAMPLE_TIME;
    }
    TirStats {
        bands: bands.percentages(&glucose),
        mean_glucose: if n > 0 { glucose.iter().sum::<f64>() / n as f64 } else { 0.0 },
        samples: n,
        basal_per_day: basal / days,
        bolus_per_day: bolus / days,
        glucagon_per_day: glucagon / days,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn constant_normal_glucose() {
        assert_eq!(GlycemicBands::default().percentages(&[6.0; 10]), [0.0, 0.0, 100.0, 0.0, 0.0]);
    }

    #[test]
    fn half_severe_half_normal() {
        let mut g = vec![2.5; 8];
        g.extend([6.0; 8]);
        assert_eq!(GlycemicBands::default().percentages(&g), [50.0, 0.0, 50.0, 0.0, 0.0]);
    }

    #[test]
    fn edges_are_closed_on_the_left() {
        let b = GlycemicBands::default();
        assert_eq!(b.classify(3.0), 1);
        assert_eq!(b.classify(3.9), 2);
        assert_eq!(b.classify(10.0), 3);
        assert_eq!(b.classify(13.9), 4);
        assert_eq!(b.classify(2.999), 0);
    }

    #[test]
    fn percentages_sum_to_one_hundred() {
        let g: alloc::vec::Vec<f64> = (0..997).map(|i| 1.0 + 0.017 * i as f64).collect();
        let total: f64 = GlycemicBands::default().percentages(&g).iter().sum();
        assert!((total - 100.0).abs() < 1e-9);
    }
}
