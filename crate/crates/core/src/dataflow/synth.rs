use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, FeaturePanel, ReturnPanel};

/// Parameters of the synthetic factor market.
///
/// Returns are `r = βᵀf + s + η`. Feature column 0 at the latest lookback
/// offset is `ρ·ŝ + √(1−ρ²)·ε`, where `ŝ` is the cross-sectionally
/// standardized `βᵀf + s`, so its correlation with next-day returns is `ρ`
/// up to the `η` component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_instruments: usize,
    pub n_days: usize,
    pub lookback: usize,
    pub n_features: usize,
    pub n_factors: usize,
    pub planted_ic: f64,
    /// Scale of `η` relative to the cross-sectional spread of `βᵀf + s`.
    pub noise_scale: f64,
    pub factor_vol: f64,
    pub idio_vol: f64,
    pub nontradable_rate: f64,
    /// Share of missing entries in the non-planted feature columns.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_instruments: 50,
            n_days: 500,
            lookback: 10,
            n_features: 16,
            n_factors: 3,
            planted_ic: 0.3,
            noise_scale: 0.1,
            factor_vol: 0.01,
            idio_vol: 0.02,
            nontradable_rate: 0.02,
            missing_rate: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Config(msg));
        if !(0.0..=1.0).contains(&self.planted_ic) {
            return bad(format!("planted_ic must lie in [0, 1], got {}", self.planted_ic));
        }
        if self.n_instruments < 2 || self.n_days == 0 || self.lookback == 0 || self.n_features == 0 {
            return bad("need at least 2 instruments and positive days, lookback and features".into());
        }
        for (name, v) in [("nontradable_rate", self.nontradable_rate), ("missing_rate", self.missing_rate)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [("noise_scale", self.noise_scale), ("factor_vol", self.factor_vol), ("idio_vol", self.idio_vol)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn standardized(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Feature layout: `[planted, exposures (n_factors), lagged return, noise…]`,
/// truncated to `n_features`. Values are rounded to 32-bit precision.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(FeaturePanel, ReturnPanel), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t, n, w, nf, k) = (cfg.n_days, cfg.n_instruments, cfg.lookback, cfg.n_features, cfg.n_factors);
    // underlying day u = panel day + w - 1, so every panel day has a full lookback
    let days = t + w - 1;
    let rho = cfg.planted_ic;
    let mix = (1.0 - rho * rho).sqrt();

    let beta: Vec<f64> = (0..n * k).map(|_| normal(&mut rng)).collect();
    let mut ret = vec![0.0; days * n];
    let mut planted = vec![0.0; days * n];
    for u in 0..days {
        let f: Vec<f64> = (0..k).map(|_| cfg.factor_vol * normal(&mut rng)).collect();
        let base: Vec<f64> = (0..n)
            .map(|i| {
                let common: f64 = (0..k).map(|j| beta[i * k + j] * f[j]).sum();
                common + cfg.idio_vol * normal(&mut rng)
            })
            .collect();
        let s_hat = standardized(&base);
        let mean = base.iter().sum::<f64>() / n as f64;
        let spread = (base.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
        for i in 0..n {
            let eta = cfg.noise_scale * spread * normal(&mut rng);
            ret[u * n + i] = base[i] + eta;
            planted[u * n + i] = rho * s_hat[i] + mix * normal(&mut rng);
        }
    }

    let noise_cols = nf.saturating_sub(k + 2);
    let col_scale: Vec<f64> = (0..noise_cols).map(|_| normal(&mut rng).exp()).collect();
    let col_shift: Vec<f64> = (0..noise_cols).map(|_| normal(&mut rng)).collect();

    let mut data = Vec::with_capacity(t * n * w * nf);
    for d in 0..t {
        for i in 0..n {
            for off in 0..w {
                let u = d + off;
                for c in 0..nf {
                    let v = if c == 0 {
                        planted[u * n + i]
                    } else if c <= k {
                        beta[i * k + c - 1] + 0.1 * normal(&mut rng)
                    } else if c == k + 1 {
                        if u == 0 {
                            f64::NAN
                        } else {
                            ret[(u - 1) * n + i]
                        }
                    } else {
                        let j = c - k - 2;
                        col_shift[j] + col_scale[j] * normal(&mut rng)
                    };
                    let missing = c > 0 && cfg.missing_rate > 0.0 && rng.random::<f64>() < cfg.missing_rate;
                    data.push(if missing { f64::NAN } else { v as f32 as f64 });
                }
            }
        }
    }

    let tradable: Vec<bool> = (0..t * n).map(|_| rng.random::<f64>() >= cfg.nontradable_rate).collect();
    let returns: Vec<f64> = ret[(w - 1) * n..].to_vec();
    let benchmark = (0..t)
        .map(|d| {
            let (sum, count) = (0..n)
                .filter(|&i| tradable[d * n + i])
                .fold((0.0, 0usize), |(s, c), i| (s + returns[d * n + i], c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect();
    let day_ids: Vec<i64> = (0..t as i64).collect();
    let panel = FeaturePanel::new([t, n, w, nf], data, day_ids.clone(), tradable)?;
    let returns = ReturnPanel::new(n, returns, benchmark, day_ids)?;
    Ok((panel, returns))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    fn mean_daily_ic(p: &FeaturePanel, r: &ReturnPanel) -> f64 {
        let (t, n, w) = (p.n_days(), p.n_instruments(), p.lookback());
        (0..t)
            .map(|d| {
                let x: Vec<f64> = (0..n).map(|i| p.get(d, i, w - 1, 0)).collect();
                pearson(&x, r.day(d))
            })
            .sum::<f64>()
            / t as f64
    }

    #[test]
    fn planted_column_hits_target_ic() {
        let cfg = SynthConfig { planted_ic: 0.1, seed: 3, ..Default::default() };
        let (p, r) = generate_synthetic(&cfg).unwrap();
        let ic = mean_daily_ic(&p, &r);
        assert!((ic - 0.1).abs() < 0.03, "{ic}");
    }

    #[test]
    fn zero_ic_column_is_noise() {
        let cfg = SynthConfig { planted_ic: 0.0, seed: 4, ..Default::default() };
        let (p, r) = generate_synthetic(&cfg).unwrap();
        assert!(mean_daily_ic(&p, &r).abs() < 0.03);
    }

    #[test]
    fn unit_ic_without_noise_is_exact() {
        let cfg = SynthConfig { planted_ic: 1.0, noise_scale: 0.0, seed: 5, ..Default::default() };
        let (p, r) = generate_synthetic(&cfg).unwrap();
        // only the 32-bit storage rounding separates the column from ŝ
        assert!((mean_daily_ic(&p, &r) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn benchmark_is_tradable_equal_weight_mean() {
        let (p, r) = generate_synthetic(&SynthConfig { n_days: 40, ..Default::default() }).unwrap();
        for d in 0..40 {
            let idx = p.tradable_on(d);
            let mean = idx.iter().map(|&i| r.get(d, i)).sum::<f64>() / idx.len() as f64;
            assert_eq!(r.benchmark()[d], mean);
        }
    }

    #[test]
    fn invalid_rho_is_rejected() {
        let cfg = SynthConfig { planted_ic: 1.5, ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(DataError::Config(_))));
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let cfg: SynthConfig = serde_json::from_str(r#"{"planted_ic": 0.3, "seed": 9}"#).unwrap();
        assert_eq!(cfg.n_instruments, 50);
        let back: SynthConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
