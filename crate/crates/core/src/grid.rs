//! Quantization grid, cubes, the piecewise-constant class, and the
//! `ε ↦ (δ, δ*)` parameter selection.

use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand::Rng;
use serde::Serialize;

use crate::expsum::{rational_from_f64, ExpSum};
use crate::reshape::{HolderTarget, ReshapePlan};
use crate::seq::SeqMatrix;
use crate::Error;

/// Cell width `δ`, separation `δ*`, `M = ⌊1/(δ+δ*)⌋` levels per dimension.
///
/// Per coordinate the grid levels are `k(δ+δ*)` for `k = 0..M`, and the cube
/// of a level is the closed interval `[k(δ+δ*), k(δ+δ*) + δ]`. Widths are
/// taken as exact rationals equal to their double values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    pub delta: f64,
    pub delta_star: f64,
    pub m: usize,
    pub d: usize,
    pub l: usize,
    pub d0: usize,
}

pub fn build_grid(delta: f64, delta_star: f64, d: usize, l: usize) -> Result<GridSpec, Error> {
    let valid = delta > 0.0 && delta_star > 0.0 && delta < 1.0 && delta_star < 1.0;
    if !valid || !(delta + delta_star < 1.0) {
        return Err(Error::Config(format!("invalid widths δ={delta}, δ*={delta_star}")));
    }
    if d == 0 || l == 0 {
        return Err(Error::Config(format!("need d, L >= 1, got d={d}, L={l}")));
    }
    let step = rational_from_f64(delta) + rational_from_f64(delta_star);
    let m = step.recip().floor().to_integer().to_usize().unwrap_or(usize::MAX);
    Ok(GridSpec { delta, delta_star, m, d, l, d0: d * l })
}

impl GridSpec {
    pub fn delta_q(&self) -> BigRational {
        rational_from_f64(self.delta)
    }

    pub fn delta_star_q(&self) -> BigRational {
        rational_from_f64(self.delta_star)
    }

    /// `δ + δ*` exactly.
    pub fn step_q(&self) -> BigRational {
        self.delta_q() + self.delta_star_q()
    }

    pub fn step(&self) -> f64 {
        self.delta + self.delta_star
    }

    pub fn level_q(&self, k: usize) -> BigRational {
        BigRational::from_integer(k.into()) * self.step_q()
    }

    pub fn level(&self, k: usize) -> f64 {
        self.level_q(k).to_f64().unwrap_or(f64::NAN)
    }

    /// `M^{d0}`, or `None` when it does not fit in `usize`.
    pub fn point_count(&self) -> Option<usize> {
        self.m.checked_pow(self.d0 as u32)
    }

    /// Level of every entry of grid point `index`, row-major over `(i, j)`
    /// with the first entry most significant.
    pub fn digits(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.d0];
        let mut rest = index;
        for slot in out.iter_mut().rev() {
            *slot = rest % self.m;
            rest /= self.m;
        }
        out
    }

    pub fn index_of(&self, digits: &[usize]) -> Option<usize> {
        digits.iter().try_fold(0usize, |acc, &k| acc.checked_mul(self.m)?.checked_add(k))
    }

    fn matrix_from_digits<T: crate::Scalar>(&self, digits: &[usize], mut f: impl FnMut(usize) -> T) -> SeqMatrix<T> {
        let mut g = SeqMatrix::zeros(self.d, self.l);
        for i in 0..self.d {
            for j in 0..self.l {
                g.set(i, j, f(digits[i * self.l + j]));
            }
        }
        g
    }

    pub fn point(&self, index: usize) -> SeqMatrix<f64> {
        self.matrix_from_digits(&self.digits(index), |k| self.level(k))
    }

    pub fn point_exact(&self, index: usize) -> SeqMatrix<ExpSum> {
        self.matrix_from_digits(&self.digits(index), |k| ExpSum::from_rational(self.level_q(k)))
    }

    /// `E = 1_d [1, …, L]^T`.
    pub fn positional<T: crate::Scalar>(&self) -> SeqMatrix<T> {
        let mut e = SeqMatrix::zeros(self.d, self.l);
        for i in 0..self.d {
            for j in 0..self.l {
                e.set(i, j, T::from_usize(j + 1));
            }
        }
        e
    }

    /// Level whose closed cube interval contains `u`, decided exactly.
    pub fn cube_digit(&self, u: f64) -> Option<usize> {
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let uq = rational_from_f64(u);
        let step = self.step_q();
        let k = (&uq / &step).floor().to_integer().to_usize()?;
        if k >= self.m {
            return None;
        }
        let lo = self.level_q(k);
        (uq <= lo + self.delta_q()).then_some(k)
    }

    /// Per-entry levels of the cube containing `x`, if any.
    pub fn cube_digits(&self, x: &SeqMatrix<f64>) -> Option<Vec<usize>> {
        let mut digits = vec![0; self.d0];
        for i in 0..self.d {
            for j in 0..self.l {
                digits[i * self.l + j] = self.cube_digit(*x.get(i, j))?;
            }
        }
        Some(digits)
    }

    pub fn cube_of(&self, x: &SeqMatrix<f64>) -> Option<usize> {
        self.index_of(&self.cube_digits(x)?)
    }

    fn sample_entry(&self, k: usize, rng: &mut impl Rng) -> f64 {
        loop {
            let u = self.level(k) + rng.gen::<f64>() * self.delta;
            if self.cube_digit(u) == Some(k) {
                return u;
            }
        }
    }

    /// Uniform sample inside the cube with the given levels.
    pub fn sample_in_cube_digits(&self, digits: &[usize], rng: &mut impl Rng) -> SeqMatrix<f64> {
        self.matrix_from_digits(digits, |k| self.sample_entry(k, rng))
    }

    pub fn sample_in_cube(&self, index: usize, rng: &mut impl Rng) -> SeqMatrix<f64> {
        self.sample_in_cube_digits(&self.digits(index), rng)
    }

    /// Uniform sample on the union of cubes (all cubes have equal volume).
    pub fn sample_in_cubes(&self, rng: &mut impl Rng) -> (Vec<usize>, SeqMatrix<f64>) {
        let digits: Vec<usize> = (0..self.d0).map(|_| rng.gen_range(0..self.m)).collect();
        let x = self.sample_in_cube_digits(&digits, rng);
        (digits, x)
    }

    /// Uniform sample on `[0,1]^{d×L}` minus the cubes, by rejection.
    pub fn sample_in_gaps(&self, rng: &mut impl Rng) -> SeqMatrix<f64> {
        loop {
            let data: Vec<f64> = (0..self.d0).map(|_| rng.gen()).collect();
            let x = SeqMatrix::new(self.d, self.l, data).expect("shape");
            if self.cube_digits(&x).is_none() {
                return x;
            }
        }
    }

    /// Lebesgue measure of the union of cubes, `(Mδ)^{d0}`.
    pub fn union_measure(&self) -> f64 {
        (self.m as f64 * self.delta).powi(self.d0 as i32)
    }

    /// Lebesgue measure of the gaps, `1 − (Mδ)^{d0}`.
    pub fn complement_measure(&self) -> f64 {
        1.0 - self.union_measure()
    }

    /// `(1 − Mδ)^{d0}`, the gap expression used by the textbook error bound.
    /// It is smaller than the true gap measure whenever `d0 > 1`.
    pub fn gap_term(&self) -> f64 {
        (1.0 - self.m as f64 * self.delta).max(0.0).powi(self.d0 as i32)
    }
}

/// Result of the `ε ↦ (δ, δ*)` selection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSelection {
    pub epsilon: f64,
    pub alpha: f64,
    pub k: f64,
    pub d0: usize,
    /// `ε^{1/α} d0^{−(α+1)/(2α)} (2K)^{−1/α}`.
    pub delta_max: f64,
    /// `√d0 K`, the cube error constant.
    pub c1: f64,
    /// `(ε/(2√d0 K))^{2/d0}`.
    pub c2: f64,
    /// `(ε/(4√d0(4d0+K)))^{2/d0}`, from the network-level error budget.
    pub c3: f64,
    /// `(c2 − δ)δ/2`.
    pub delta_star_max: f64,
    /// `(c3 − δ)δ/2`.
    pub delta_star_max_c3: f64,
    /// Headroom factor applied to the caps.
    pub factor: f64,
    pub delta: f64,
    pub delta_star: f64,
    /// Which cap bound `δ`: `delta_max`, `c2` or `c3`.
    pub delta_binding: &'static str,
    /// Which cap bound `δ*`: `c2` or `c3`.
    pub delta_star_binding: &'static str,
}

impl ParamSelection {
    pub fn grid(&self, d: usize, l: usize) -> Result<GridSpec, Error> {
        build_grid(self.delta, self.delta_star, d, l)
    }
}

/// Chooses `δ = factor·min(δ_max, c2, c3)` and
/// `δ* = factor·min((c2−δ)δ/2, (c3−δ)δ/2)`.
///
/// Capping `δ` by `c2` and `c3` as well as `δ_max` keeps both `δ*` caps
/// positive; without it the `c3` cap is negative in the small-`d0` regime.
pub fn select_parameters(eps: f64, alpha: f64, k: f64, d: usize, l: usize) -> Result<ParamSelection, Error> {
    select_parameters_with(eps, alpha, k, d, l, 0.9)
}

pub fn select_parameters_with(
    eps: f64,
    alpha: f64,
    k: f64,
    d: usize,
    l: usize,
    factor: f64,
) -> Result<ParamSelection, Error> {
    let d0 = d * l;
    if !(eps > 0.0) || !(k > 0.0) || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("need ε > 0, K > 0, α ∈ (0,1]; got ε={eps}, K={k}, α={alpha}")));
    }
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::Config(format!("headroom factor {factor} not in (0,1)")));
    }
    if (d0 as f64) <= 2.0 * alpha {
        return Err(Error::Config(format!("requires d0 > 2α (d0={d0}, α={alpha})")));
    }
    let n = d0 as f64;
    let delta_max = eps.powf(1.0 / alpha) * n.powf(-(alpha + 1.0) / (2.0 * alpha)) * (2.0 * k).powf(-1.0 / alpha);
    let c1 = n.sqrt() * k;
    let c2 = (eps / (2.0 * n.sqrt() * k)).powf(2.0 / n);
    let c3 = (eps / (4.0 * n.sqrt() * (4.0 * n + k))).powf(2.0 / n);
    let (cap, delta_binding) = [(delta_max, "delta_max"), (c2, "c2"), (c3, "c3")]
        .into_iter()
        .fold((f64::INFINITY, ""), |acc, x| if x.0 < acc.0 { x } else { acc });
    let delta = factor * cap;
    let star2 = (c2 - delta) * delta / 2.0;
    let star3 = (c3 - delta) * delta / 2.0;
    let (star_cap, delta_star_binding) = if star2 <= star3 { (star2, "c2") } else { (star3, "c3") };
    let delta_star = factor * star_cap;
    if !(delta + delta_star < 1.0) {
        return Err(Error::Config(format!("ε={eps} too large: δ+δ* = {} ≥ 1", delta + delta_star)));
    }
    Ok(ParamSelection {
        epsilon: eps,
        alpha,
        k,
        d0,
        delta_max,
        c1,
        c2,
        c3,
        delta_star_max: (c2 - delta_max) * delta_max / 2.0,
        delta_star_max_c3: (c3 - delta_max) * delta_max / 2.0,
        factor,
        delta,
        delta_star,
        delta_binding,
        delta_star_binding,
    })
}

/// The piecewise-constant function `Σ_G Y_G 1{X ∈ S_G}`.
#[derive(Clone, Debug, Serialize)]
pub struct PiecewiseConstantFn {
    pub grid: GridSpec,
    pub plan: ReshapePlan,
    /// `Y_G` indexed by grid point.
    pub table: Vec<SeqMatrix<f64>>,
}

impl PiecewiseConstantFn {
    pub fn new(grid: GridSpec, plan: ReshapePlan, table: Vec<SeqMatrix<f64>>) -> Result<Self, Error> {
        if Some(table.len()) != grid.point_count() {
            return Err(Error::Shape(format!("{} table entries for {:?} grid points", table.len(), grid.point_count())));
        }
        Ok(PiecewiseConstantFn { grid, plan, table })
    }

    pub fn eval(&self, x: &SeqMatrix<f64>) -> SeqMatrix<f64> {
        match self.grid.cube_of(x) {
            Some(idx) => self.table[idx].clone(),
            None => SeqMatrix::zeros(self.grid.d, self.grid.l),
        }
    }
}

/// Embeds a `d_y`-dimensional output into the first coordinates of `R^{d0}`
/// and reshapes it.
pub fn embed_output(plan: &ReshapePlan, y: &[f64]) -> Result<SeqMatrix<f64>, Error> {
    if y.len() > plan.d0 {
        return Err(Error::Shape(format!("output dimension {} exceeds d0={}", y.len(), plan.d0)));
    }
    let mut v = vec![0.0; plan.d0];
    v[..y.len()].copy_from_slice(y);
    plan.reshape(&v)
}

/// `Y_G = f̄(G)` for every grid point.
pub fn quantize_target(
    target: &HolderTarget,
    grid: &GridSpec,
    plan: &ReshapePlan,
) -> Result<PiecewiseConstantFn, Error> {
    if target.d_x != plan.d0 || grid.d != plan.d || grid.l != plan.l {
        return Err(Error::Shape(format!(
            "target on R^{} with a {}x{} plan and {}x{} grid",
            target.d_x, plan.d, plan.l, grid.d, grid.l
        )));
    }
    let count = grid
        .point_count()
        .ok_or_else(|| Error::Config(format!("M^d0 = {}^{} grid points do not fit in memory", grid.m, grid.d0)))?;
    let table = (0..count)
        .map(|idx| {
            let x = plan.flatten(&grid.point(idx))?;
            embed_output(plan, &target.eval(&x))
        })
        .collect::<Result<Vec<_>, _>>()?;
    PiecewiseConstantFn::new(grid.clone(), *plan, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = build_grid(0.2, 0.1, 1, 2).unwrap();
        assert_eq!(g.m, 3);
        assert!((g.level(1) - 0.3).abs() < 1e-15);
        assert_eq!(g.point_count(), Some(9));
        let x = SeqMatrix::from_f64_rows(&[&[0.05, 0.35]]).unwrap();
        assert_eq!(g.cube_digits(&x), Some(vec![0, 1]));
        assert!((g.gap_term() - 0.16).abs() < 1e-12 || g.d0 != 2);
    }

    #[test]
    fn invalid_widths() {
        assert!(build_grid(0.0, 0.1, 1, 1).is_err());
        assert!(build_grid(0.6, 0.5, 1, 1).is_err());
    }

    #[test]
    fn boundary_belongs_to_cube() {
        let g = build_grid(0.25, 0.25, 1, 1).unwrap();
        assert_eq!(g.cube_digit(0.25), Some(0));
        assert_eq!(g.cube_digit(0.3), None);
        assert_eq!(g.cube_digit(0.5), Some(1));
        assert_eq!(g.cube_digit(1.0), None);
    }

    #[test]
    fn selection_rejects_small_d0() {
        assert!(select_parameters(0.7, 1.0, 1.0, 1, 2).is_err());
    }
}
