use rand::seq::index::sample;
use rand::Rng;

use super::{DataError, DayRange, FeaturePanel, ReturnPanel};
use crate::tensor::Tensor;

const MAX_DAY_RETRIES: usize = 100;

/// Instruments tradable on at least this share of a window's days may fill
/// a window subset when too few are tradable throughout.
const WIDEN_SHARE: f64 = 0.9;

/// One sub-sampled cross-section.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionBatch {
    pub day: usize,
    pub day_id: i64,
    /// Selected instruments, ascending.
    pub indices: Vec<usize>,
    /// (n × W × F)
    pub features: Tensor,
    pub labels: Vec<f64>,
}

/// A run of consecutive days over one fixed instrument subset.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub start: usize,
    pub day_ids: Vec<i64>,
    pub indices: Vec<usize>,
    /// (T' × n × W × F)
    pub features: Tensor,
    /// (T' × n)
    pub labels: Tensor,
    /// (T' × n), false where the instrument was not tradable that day.
    pub mask: Vec<bool>,
}

impl WindowBatch {
    pub fn horizon(&self) -> usize {
        self.day_ids.len()
    }

    pub fn width(&self) -> usize {
        self.indices.len()
    }

    /// Equal-weight mean of the subset's returns per day.
    pub fn subset_benchmark(&self) -> Vec<f64> {
        let n = self.width();
        self.labels.data().chunks(n).map(|row| row.iter().sum::<f64>() / n as f64).collect()
    }

    /// Returns the batch with its instrument axis reordered so that new
    /// position `j` holds old instrument `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> WindowBatch {
        let (t, n) = (self.horizon(), self.width());
        let block = self.features.numel() / (t * n);
        let mut feats = Vec::with_capacity(self.features.numel());
        let mut labels = Vec::with_capacity(t * n);
        let mut mask = Vec::with_capacity(t * n);
        for d in 0..t {
            for &p in perm {
                let src = (d * n + p) * block;
                feats.extend_from_slice(&self.features.data()[src..src + block]);
                labels.push(self.labels.data()[d * n + p]);
                mask.push(self.mask[d * n + p]);
            }
        }
        WindowBatch {
            start: self.start,
            day_ids: self.day_ids.clone(),
            indices: perm.iter().map(|&p| self.indices[p]).collect(),
            features: Tensor::new(self.features.shape().to_vec(), feats).expect("same size"),
            labels: Tensor::new(vec![t, n], labels).expect("same size"),
            mask,
        }
    }
}

/// `⌈ratio · count⌉`, tolerant of representation error in `ratio`.
fn subset_size(ratio: f64, count: usize) -> usize {
    ((ratio * count as f64) - 1e-9).ceil().max(1.0) as usize
}

fn check_ratio(ratio: f64) -> Result<(), DataError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DataError::Config(format!("sampling ratio must lie in (0, 1], got {ratio}")));
    }
    Ok(())
}

fn check_range(panel: &FeaturePanel, range: DayRange) -> Result<(), DataError> {
    if range.is_empty() || range.end > panel.n_days() {
        return Err(DataError::Config(format!(
            "day range {}..{} is empty or exceeds the panel's {} days",
            range.start,
            range.end,
            panel.n_days()
        )));
    }
    Ok(())
}

/// Picks a random day in `range` and a random `ratio` share of the
/// instruments tradable on it.
pub fn sample_day<R: Rng + ?Sized>(
    panel: &FeaturePanel,
    returns: &ReturnPanel,
    range: DayRange,
    ratio: f64,
    rng: &mut R,
) -> Result<CrossSectionBatch, DataError> {
    check_ratio(ratio)?;
    check_range(panel, range)?;
    for _ in 0..MAX_DAY_RETRIES {
        let day = rng.random_range(range.start..range.end);
        let tradable = panel.tradable_on(day);
        if tradable.len() < 2 {
            continue;
        }
        let k = subset_size(ratio, tradable.len());
        let mut indices: Vec<usize> = sample(rng, tradable.len(), k).into_iter().map(|j| tradable[j]).collect();
        indices.sort_unstable();
        return cross_section_at(panel, returns, day, indices);
    }
    Err(DataError::Sampling(format!(
        "no day with at least 2 tradable instruments after {MAX_DAY_RETRIES} draws"
    )))
}

/// Deterministic cross-section of the given instruments on one day.
pub fn cross_section_at(
    panel: &FeaturePanel,
    returns: &ReturnPanel,
    day: usize,
    indices: Vec<usize>,
) -> Result<CrossSectionBatch, DataError> {
    let [_, _, w, f] = panel.dims();
    let mut feats = Vec::with_capacity(indices.len() * w * f);
    for &i in &indices {
        feats.extend_from_slice(panel.block(day, i));
    }
    Ok(CrossSectionBatch {
        day,
        day_id: panel.day_ids()[day],
        labels: indices.iter().map(|&i| returns.get(day, i)).collect(),
        features: Tensor::new(vec![indices.len(), w, f], feats).expect("block sizes"),
        indices,
    })
}

/// Picks `horizon` consecutive days inside `range` and `⌈ratio·N⌉`
/// instruments, preferring ones tradable on every day of the window.
pub fn sample_window<R: Rng + ?Sized>(
    panel: &FeaturePanel,
    returns: &ReturnPanel,
    range: DayRange,
    horizon: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<WindowBatch, DataError> {
    check_ratio(ratio)?;
    check_range(panel, range)?;
    if horizon == 0 || horizon > range.len() {
        return Err(DataError::Config(format!(
            "window horizon {horizon} does not fit in {} days",
            range.len()
        )));
    }
    let start = rng.random_range(range.start..=range.end - horizon);
    let n = panel.n_instruments();
    let k = subset_size(ratio, n);

    let tradable_days = |i: usize| (start..start + horizon).filter(|&d| panel.is_tradable(d, i)).count();
    let mut full = Vec::new();
    let mut partial = Vec::new();
    for i in 0..n {
        let c = tradable_days(i);
        if c == horizon {
            full.push(i);
        } else if c as f64 >= WIDEN_SHARE * horizon as f64 {
            partial.push(i);
        }
    }

    let mut indices: Vec<usize> = if full.len() >= k {
        sample(rng, full.len(), k).into_iter().map(|j| full[j]).collect()
    } else {
        let extra = (k - full.len()).min(partial.len());
        let mut picked = full.clone();
        picked.extend(sample(rng, partial.len(), extra).into_iter().map(|j| partial[j]));
        picked
    };
    if indices.is_empty() {
        return Err(DataError::Sampling(format!(
            "no instrument is tradable on {:.0}% of days {start}..{}",
            WIDEN_SHARE * 100.0,
            start + horizon
        )));
    }
    indices.sort_unstable();
    window_at(panel, returns, start, horizon, &indices)
}

/// Deterministic window over the given days and instruments.
pub fn window_at(
    panel: &FeaturePanel,
    returns: &ReturnPanel,
    start: usize,
    horizon: usize,
    indices: &[usize],
) -> Result<WindowBatch, DataError> {
    let [t, _, w, f] = panel.dims();
    if horizon == 0 || start + horizon > t || indices.is_empty() {
        return Err(DataError::Config(format!(
            "window {start}..{} over {} instruments is outside the panel",
            start + horizon,
            indices.len()
        )));
    }
    let n = indices.len();
    let mut feats = Vec::with_capacity(horizon * n * w * f);
    let mut labels = Vec::with_capacity(horizon * n);
    let mut mask = Vec::with_capacity(horizon * n);
    for d in start..start + horizon {
        for &i in indices {
            feats.extend_from_slice(panel.block(d, i));
            labels.push(returns.get(d, i));
            mask.push(panel.is_tradable(d, i));
        }
    }
    Ok(WindowBatch {
        start,
        day_ids: panel.day_ids()[start..start + horizon].to_vec(),
        indices: indices.to_vec(),
        features: Tensor::new(vec![horizon, n, w, f], feats).expect("block sizes"),
        labels: Tensor::new(vec![horizon, n], labels).expect("label sizes"),
        mask,
    })
}
