use serde::{Deserialize, Serialize};

use super::FeaturePanel;

/// Width of the winsorization band around the cross-sectional median `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WinsorRule {
    /// `[m - k|m|, m + k|m|]`. Collapses the slice onto `m` when `m = 0`.
    #[default]
    Literal,
    /// `[m - k·MAD, m + k·MAD]`, MAD being the median absolute deviation.
    Mad,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessStats {
    /// Slices with no observed value, passed through untouched.
    pub all_nan_slices: usize,
    /// Slices with zero dispersion, zeroed by standardization.
    pub zero_std_slices: usize,
    pub winsorized_values: usize,
    pub clipped_values: usize,
    pub filled_nans: usize,
}

/// Visits each cross-section (one day, offset, feature) as a list of flat
/// indices over instruments.
fn for_each_slice(panel: &FeaturePanel, mut f: impl FnMut(&[usize])) {
    let [t, n, w, nf] = panel.dims();
    let mut idx = vec![0; n];
    for day in 0..t {
        for off in 0..w {
            for feat in 0..nf {
                for (i, slot) in idx.iter_mut().enumerate() {
                    *slot = panel.index(day, i, off, feat);
                }
                f(&idx);
            }
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn winsorize(panel: &FeaturePanel, k: f64, rule: WinsorRule, stats: &mut PreprocessStats) -> FeaturePanel {
    let mut out = panel.clone();
    let mut buf = Vec::new();
    for_each_slice(panel, |idx| {
        buf.clear();
        buf.extend(idx.iter().map(|&i| panel.data()[i]).filter(|v| !v.is_nan()));
        if buf.is_empty() {
            stats.all_nan_slices += 1;
            return;
        }
        let m = median(&mut buf);
        let half = match rule {
            WinsorRule::Literal => k * m.abs(),
            WinsorRule::Mad => {
                for v in buf.iter_mut() {
                    *v = (*v - m).abs();
                }
                k * median(&mut buf)
            }
        };
        let (lo, hi) = (m - half, m + half);
        let data = out.data_mut();
        for &i in idx {
            let v = data[i];
            if v.is_nan() {
                continue;
            }
            let c = v.clamp(lo, hi);
            if c != v {
                stats.winsorized_values += 1;
                data[i] = c;
            }
        }
    });
    out
}

/// Cross-sectional z-scores (sample std), clipped to `±clip_bound`, with
/// missing values filled by 0.
pub fn standardize(panel: &FeaturePanel, clip_bound: f64, stats: &mut PreprocessStats) -> FeaturePanel {
    let mut out = panel.clone();
    for_each_slice(panel, |idx| {
        let src = panel.data();
        let obs: Vec<f64> = idx.iter().map(|&i| src[i]).filter(|v| !v.is_nan()).collect();
        let count = obs.len();
        let (mean, sd) = if count >= 2 {
            let mean = obs.iter().sum::<f64>() / count as f64;
            let ss: f64 = obs.iter().map(|v| (v - mean) * (v - mean)).sum();
            (mean, (ss / (count - 1) as f64).sqrt())
        } else {
            (0.0, 0.0)
        };
        let data = out.data_mut();
        if sd == 0.0 || !sd.is_finite() {
            if count > 0 {
                stats.zero_std_slices += 1;
            }
            for &i in idx {
                if src[i].is_nan() {
                    stats.filled_nans += 1;
                }
                data[i] = 0.0;
            }
            return;
        }
        for &i in idx {
            let v = src[i];
            if v.is_nan() {
                stats.filled_nans += 1;
                data[i] = 0.0;
                continue;
            }
            let z = (v - mean) / sd;
            let c = z.clamp(-clip_bound, clip_bound);
            if c != z {
                stats.clipped_values += 1;
            }
            data[i] = c;
        }
    });
    out
}

/// Winsorize, standardize, fill missing values, then round to storage
/// precision so the in-memory result equals what a panel file holds.
pub fn preprocess(panel: &FeaturePanel, k: f64, rule: WinsorRule, clip_bound: f64) -> (FeaturePanel, PreprocessStats) {
    let mut stats = PreprocessStats::default();
    let w = winsorize(panel, k, rule, &mut stats);
    let mut z = standardize(&w, clip_bound, &mut stats);
    z.round_to_storage();
    (z, stats)
}
