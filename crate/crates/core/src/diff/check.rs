use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, Graph, NodeId, ParamStore};

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    #[default]
    Central,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`. Its O(h⁴)
    /// truncation error allows a larger `h`, which keeps rounding noise
    /// below the relative-error floor for deep graphs with O(1) losses.
    Central5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    #[serde(default)]
    pub stencil: Stencil,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: 256,
            seed: 0,
            stencil: Stencil::Central,
        }
    }
}

impl GradCheckOptions {
    /// Five-point stencil with h = 1e-3, for whole-model losses.
    pub fn five_point() -> Self {
        Self {
            eps: 1e-3,
            stencil: Stencil::Central5,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub eps: f64,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, parameter by parameter.
pub fn grad_check<F, E>(build: F, params: &ParamStore, opts: GradCheckOptions) -> Result<GradReport, E>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId), E>,
    E: From<DiffError>,
{
    let eval = |p: &ParamStore| -> Result<f64, E> {
        let (mut g, root) = build(p)?;
        Ok(g.forward_scalar(root)?)
    };

    let (mut g, root) = build(params)?;
    let first = g.forward_scalar(root)?;
    let analytic = g.grad_backward(root, params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(DiffError::NonDeterministic { first, second }.into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut tensors = Vec::new();
    for (name, t) in params.iter() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(name).expect("every parameter has a gradient");
        let mut max_err: f64 = 0.0;
        let mut worst = None;
        for &c in &coords {
            let orig = t.data()[c];
            let mut at = |step: f64| -> Result<f64, E> {
                probe.get_mut(name).expect("cloned store").data_mut()[c] = orig + step;
                eval(&probe)
            };
            let h = opts.eps;
            let numeric = match opts.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::Central5 => {
                    let d1 = at(h)? - at(-h)?;
                    let d2 = at(2.0 * h)? - at(-2.0 * h)?;
                    (8.0 * d1 - d2) / (12.0 * h)
                }
            };
            probe.get_mut(name).expect("cloned store").data_mut()[c] = orig;
            let a = grad.data()[c];
            let err = rel_err(a, numeric);
            if worst.is_none() || err > max_err {
                max_err = err;
                worst = Some((c, a, numeric));
            }
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: max_err,
            worst,
            passed: max_err <= opts.tol,
        });
    }
    let passed = tensors.iter().all(|t| t.passed);
    Ok(GradReport {
        eps: opts.eps,
        tol: opts.tol,
        tensors,
        passed,
    })
}
