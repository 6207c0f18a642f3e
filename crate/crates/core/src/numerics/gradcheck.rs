//! Central finite-difference check of reverse-mode gradients.

use rand::Rng;

use crate::numerics::{ParamId, ParamSet, Real};

/// One scalar inside one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct CoordResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub results: Vec<CoordResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordResult> {
        self.results.iter().filter(move |r| r.rel_err >= self.tol)
    }

    /// Names of the parameters that had at least one coordinate checked.
    pub fn params_covered(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.results.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Relative tolerance.
    pub tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

/// At least one coordinate from every parameter, then uniform draws until
/// `count` coordinates are chosen.
pub fn sample_coords<T: Real, R: Rng>(
    params: &ParamSet<T>,
    count: usize,
    rng: &mut R,
) -> Vec<Coord> {
    let mut coords: Vec<Coord> = params
        .ids()
        .map(|id| Coord {
            param: id,
            index: rng.gen_range(0..params.get(id).numel()),
        })
        .collect();
    let total = params.numel();
    let count = count.min(total);
    while coords.len() < count {
        let mut flat = rng.gen_range(0..total);
        for id in params.ids() {
            let n = params.get(id).numel();
            if flat < n {
                let c = Coord {
                    param: id,
                    index: flat,
                };
                if !coords.contains(&c) {
                    coords.push(c);
                }
                break;
            }
            flat -= n;
        }
    }
    coords
}

/// Compares `analytic[param][index]` against `(f(θ+h) − f(θ−h)) / 2h` at
/// each coordinate. `params` is restored before returning.
pub fn finite_diff_gradcheck<T: Real>(
    params: &mut ParamSet<T>,
    analytic: &[Vec<f64>],
    coords: &[Coord],
    opts: GradcheckOptions,
    mut f: impl FnMut(&ParamSet<T>) -> f64,
) -> GradcheckReport {
    let mut results = Vec::with_capacity(coords.len());
    let mut max_rel_err = 0.0f64;
    for c in coords {
        let orig = params.get(c.param).tensor.data()[c.index];
        params.get_mut(c.param).tensor.data_mut()[c.index] = orig + T::lit(opts.h);
        let plus = f(params);
        params.get_mut(c.param).tensor.data_mut()[c.index] = orig - T::lit(opts.h);
        let minus = f(params);
        params.get_mut(c.param).tensor.data_mut()[c.index] = orig;

        let numeric = (plus - minus) / (2.0 * opts.h);
        let a = analytic[c.param.index()][c.index];
        let denom = a.abs().max(numeric.abs()).max(opts.floor);
        let rel_err = if denom == 0.0 {
            0.0
        } else {
            (a - numeric).abs() / denom
        };
        max_rel_err = max_rel_err.max(rel_err);
        results.push(CoordResult {
            name: params.get(c.param).name.clone(),
            index: c.index,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    GradcheckReport {
        checked: results.len(),
        max_rel_err,
        tol: opts.tol,
        results,
    }
}
