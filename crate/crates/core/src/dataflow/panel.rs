use serde::{Deserialize, Serialize};

use super::DataError;

/// Half-open range of day indices `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRange {
    pub start: usize,
    pub end: usize,
}

impl DayRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, day: usize) -> bool {
        (self.start..self.end).contains(&day)
    }
}

/// Features over (day, instrument, lookback offset, feature), row-major.
/// Offset `w - 1` is the most recent observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePanel {
    dims: [usize; 4],
    data: Vec<f64>,
    day_ids: Vec<i64>,
    tradable: Vec<bool>,
    nan_mask: Vec<bool>,
}

impl FeaturePanel {
    pub fn new(dims: [usize; 4], data: Vec<f64>, day_ids: Vec<i64>, tradable: Vec<bool>) -> Result<Self, DataError> {
        let [t, n, w, f] = dims;
        if dims.iter().any(|&d| d == 0) {
            return Err(DataError::Config(format!("panel dimensions must be positive, got {dims:?}")));
        }
        check_len("feature data", &[t, n, w, f], data.len())?;
        check_len("day ids", &[t], day_ids.len())?;
        check_len("tradable mask", &[t, n], tradable.len())?;
        let nan_mask = data.iter().map(|v| v.is_nan()).collect();
        Ok(Self { dims, data, day_ids, tradable, nan_mask })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n_days(&self) -> usize {
        self.dims[0]
    }

    pub fn n_instruments(&self) -> usize {
        self.dims[1]
    }

    pub fn lookback(&self) -> usize {
        self.dims[2]
    }

    pub fn n_features(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn day_ids(&self) -> &[i64] {
        &self.day_ids
    }

    pub fn tradable(&self) -> &[bool] {
        &self.tradable
    }

    pub fn nan_mask(&self) -> &[bool] {
        &self.nan_mask
    }

    pub fn is_tradable(&self, day: usize, inst: usize) -> bool {
        self.tradable[day * self.dims[1] + inst]
    }

    pub fn index(&self, day: usize, inst: usize, offset: usize, feat: usize) -> usize {
        let [_, n, w, f] = self.dims;
        ((day * n + inst) * w + offset) * f + feat
    }

    pub fn get(&self, day: usize, inst: usize, offset: usize, feat: usize) -> f64 {
        self.data[self.index(day, inst, offset, feat)]
    }

    /// The contiguous (W × F) block of one instrument on one day.
    pub fn block(&self, day: usize, inst: usize) -> &[f64] {
        let [_, _, w, f] = self.dims;
        let start = self.index(day, inst, 0, 0);
        &self.data[start..start + w * f]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rounds every value to 32-bit precision, the panel file's storage type.
    pub fn round_to_storage(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn tradable_on(&self, day: usize) -> Vec<usize> {
        (0..self.dims[1]).filter(|&i| self.is_tradable(day, i)).collect()
    }
}

/// Realized 1-day forward returns, aligned day-for-day with a [`FeaturePanel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    n_instruments: usize,
    returns: Vec<f64>,
    benchmark: Vec<f64>,
    day_ids: Vec<i64>,
}

impl ReturnPanel {
    pub fn new(n_instruments: usize, returns: Vec<f64>, benchmark: Vec<f64>, day_ids: Vec<i64>) -> Result<Self, DataError> {
        let t = day_ids.len();
        check_len("returns", &[t, n_instruments], returns.len())?;
        check_len("benchmark", &[t], benchmark.len())?;
        if returns.iter().chain(&benchmark).any(|v| !v.is_finite()) {
            return Err(DataError::Returns("returns must be finite".into()));
        }
        Ok(Self { n_instruments, returns, benchmark, day_ids })
    }

    pub fn n_days(&self) -> usize {
        self.day_ids.len()
    }

    pub fn n_instruments(&self) -> usize {
        self.n_instruments
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn day(&self, day: usize) -> &[f64] {
        &self.returns[day * self.n_instruments..(day + 1) * self.n_instruments]
    }

    pub fn get(&self, day: usize, inst: usize) -> f64 {
        self.returns[day * self.n_instruments + inst]
    }

    pub fn benchmark(&self) -> &[f64] {
        &self.benchmark
    }

    pub fn day_ids(&self) -> &[i64] {
        &self.day_ids
    }

    /// Checks that both panels cover the same calendar and universe.
    pub fn check_aligned(&self, features: &FeaturePanel) -> Result<(), DataError> {
        if self.day_ids != features.day_ids() || self.n_instruments != features.n_instruments() {
            return Err(DataError::Shape {
                what: "returns vs features",
                expected: vec![features.n_days(), features.n_instruments()],
                actual: vec![self.n_days(), self.n_instruments],
            });
        }
        Ok(())
    }
}

fn check_len(what: &'static str, shape: &[usize], len: usize) -> Result<(), DataError> {
    if shape.iter().product::<usize>() != len {
        return Err(DataError::Shape {
            what,
            expected: shape.to_vec(),
            actual: vec![len],
        });
    }
    Ok(())
}
