//! Statistical-error calculators and a plug-in regression demo.
//!
//! All `≲` bounds are evaluated with constant 1; the values are bound
//! shapes, not certified inequalities. Logarithms are natural.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::assemble::{build_for_table, build_on_grid, estimate_l2_error, Approximator, ErrorEstimate, SampleBudget};
use crate::expsum::ExpSum;
use crate::grid::{build_grid, select_parameters, GridSpec, PiecewiseConstantFn};
use crate::reshape::{HolderTarget, ReshapePlan};
use crate::seeds;
use crate::Error;

fn check_positive(pairs: &[(&str, f64)]) -> Result<(), Error> {
    for (name, v) in pairs {
        if !(*v > 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(())
}

/// `D⁴ ln(eKN D^{−4}/μ)`, the log covering-number bound of the depth-`D`
/// class on `N` samples at radius `μ`. Monotone in `N`, `D` and `μ` only
/// while `KN/μ > D⁴`.
pub fn log_cover(mu: f64, d_blocks: f64, n: f64, k: f64) -> Result<f64, Error> {
    check_positive(&[("μ", mu), ("D", d_blocks), ("N", n), ("K", k)])?;
    let d4 = d_blocks.powi(4);
    Ok(d4 * (std::f64::consts::E * k * n / (d4 * mu)).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatBound {
    /// `(16K+8)(D⁴ ln(eKN D^{−4}/μ) + 1)/N + 3μ`.
    pub e_sta: f64,
    pub log_cover: f64,
    /// `N < D⁴`: outside the regime where the covering bound applies.
    pub small_sample: bool,
    pub warning: Option<String>,
}

pub fn statistical_bound(d_blocks: f64, k: f64, n: f64, mu: f64) -> Result<StatBound, Error> {
    let lc = log_cover(mu, d_blocks, n, k)?;
    let small_sample = n < d_blocks.powi(4);
    Ok(StatBound {
        e_sta: (16.0 * k + 8.0) * (lc + 1.0) / n + 3.0 * mu,
        log_cover: lc,
        small_sample,
        warning: small_sample.then(|| format!("N < D⁴ regime (N={n}, D⁴={})", d_blocks.powi(4))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExcessRate {
    /// `α/(2d0+α)`.
    pub exponent: f64,
    /// `D(N) = N^{d0/(4d0+2α)}`.
    pub d_blocks: f64,
    /// `μ(N) = D^{−2α/d0}`.
    pub mu: f64,
    /// `N^{−α/(2d0+α)}(ln N + 1)`.
    pub rate: f64,
}

pub fn excess_risk_rate(alpha: f64, d0: usize, n: f64) -> Result<ExcessRate, Error> {
    if !(alpha > 0.0 && alpha <= 1.0) || d0 == 0 || !(n >= 2.0) {
        return Err(Error::Config(format!("need α ∈ (0,1], d0 ≥ 1, N ≥ 2; got α={alpha}, d0={d0}, N={n}")));
    }
    let d0f = d0 as f64;
    let exponent = alpha / (2.0 * d0f + alpha);
    let d_blocks = n.powf(d0f / (4.0 * d0f + 2.0 * alpha));
    Ok(ExcessRate {
        exponent,
        d_blocks,
        mu: d_blocks.powf(-2.0 * alpha / d0f),
        rate: n.powf(-exponent) * (n.ln() + 1.0),
    })
}

/// Bound-side quantities for one setting.
#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    #[serde(rename = "D")]
    pub d_blocks: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "N")]
    pub n: f64,
    pub mu: f64,
    pub stat: StatBound,
    pub rate: Option<ExcessRate>,
    /// `(E_sta, E_app², τ)`.
    pub decomposition: (f64, f64, f64),
}

pub fn bound_report(d_blocks: f64, k: f64, n: f64, mu: f64, e_app: f64, rate: Option<ExcessRate>) -> Result<BoundReport, Error> {
    let stat = statistical_bound(d_blocks, k, n, mu)?;
    Ok(BoundReport { d_blocks, k, n, mu, decomposition: (stat.e_sta, e_app * e_app, 0.0), stat, rate })
}

/// How the demo's grid is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum GridChoice {
    /// `(δ, δ*)` from the approximation target `ε`.
    Eps(f64),
    Widths { delta: f64, delta_star: f64 },
}

#[derive(Clone, Debug)]
pub struct RegressionSetup {
    /// Scalar target on `[0,1]^{d0}`.
    pub target: HolderTarget,
    pub n: usize,
    /// Noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegressionReport {
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub noise: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub cells: usize,
    pub empty_cells: usize,
    pub warning: Option<String>,
    /// Training points that fell in a cube.
    pub train_in_cubes: usize,
    pub test_size: usize,
    /// `L̂_test(f̂) − L̂_test(f*)` on the held-out set.
    pub excess_risk: f64,
    /// Same, over held-out points inside the cubes.
    pub excess_risk_cubes: f64,
    /// Mean of `(f̂ − f*)²` over held-out points inside the cubes.
    pub mse_cubes: f64,
    pub e_app: f64,
    pub bounds: BoundReport,
    /// `excess_risk ≤ E_sta + 2E_app² + 2τ`; `None` when `N < D⁴`, where the
    /// covering bound goes negative and says nothing.
    pub within_bound: Option<bool>,
}

/// Network outputs cached per quantizer output, so each grid point is
/// mapped once.
struct CachedNet<'a> {
    approx: &'a Approximator,
    cache: Mutex<HashMap<Vec<ExpSum>, f64>>,
}

impl<'a> CachedNet<'a> {
    fn new(approx: &'a Approximator) -> Self {
        CachedNet { approx, cache: Mutex::new(HashMap::new()) }
    }

    fn eval(&self, x: &[f64]) -> Result<f64, Error> {
        let net = &self.approx.network;
        let h = net.quantizer.forward_fast(&net.plan.reshape(x)?)?;
        let key = h.data().to_vec();
        if let Some(v) = self.cache.lock().expect("cache").get(&key) {
            return Ok(*v);
        }
        let out = net.forward_quantized(&h)?;
        let v = net.plan.flatten(&out)?[0].to_f64();
        self.cache.lock().expect("cache").insert(key, v);
        Ok(v)
    }
}

/// The plug-in estimator on a fixed grid: the approximator network with
/// each `Y_G` replaced by the mean response over training points in the
/// cube of `G`. Cells without data get `Y_G = 0`.
#[derive(Clone, Debug)]
pub struct RegressionDemo {
    pub target: HolderTarget,
    pub grid: GridSpec,
    pub noise: f64,
    pub test_size: usize,
    /// The oracle approximator with `Y_G = f*(G)`.
    pub oracle: Approximator,
    pub e_app: ErrorEstimate,
}

fn uniform_point(d0: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d0).map(|_| rng.gen()).collect()
}

impl RegressionDemo {
    pub fn new(
        target: HolderTarget,
        choice: GridChoice,
        noise: f64,
        test_size: usize,
        budget: SampleBudget,
        seed: u64,
    ) -> Result<Self, Error> {
        if target.d_y != 1 {
            return Err(Error::Config(format!("regression needs a scalar target, got d_y={}", target.d_y)));
        }
        if !(noise >= 0.0) || test_size == 0 {
            return Err(Error::Config("need noise ≥ 0 and a non-empty test set".into()));
        }
        // Sequences of length 2 with d = d0/2 when possible, else d = 1.
        let (d, l) = if target.d_x % 2 == 0 && target.d_x > 2 { (target.d_x / 2, 2) } else { (1, target.d_x) };
        let grid = match choice {
            GridChoice::Eps(eps) => select_parameters(eps, target.alpha, target.k, d, l)?.grid(d, l)?,
            GridChoice::Widths { delta, delta_star } => build_grid(delta, delta_star, d, l)?,
        };
        let oracle = build_on_grid(&target, &grid, seeds::derive(seed, "regression-oracle", 0), None)?;
        let e_app = estimate_l2_error(&oracle, &target, budget, seeds::derive(seed, "regression-eapp", 0))?;
        Ok(RegressionDemo { target, grid, noise, test_size, oracle, e_app })
    }

    /// Fits on `n` fresh samples and scores on a held-out set that depends
    /// only on `seed`.
    pub fn run(&self, n: usize, seed: u64) -> Result<RegressionReport, Error> {
        let grid = &self.grid;
        let plan = ReshapePlan::new(grid.d, grid.l)?;
        let d0 = grid.d0;
        let cells = grid.point_count().ok_or_else(|| Error::Config("grid too large".into()))?;
        let mut sums = vec![0.0; cells];
        let mut counts = vec![0usize; cells];
        let mut rng = seeds::stream(seed, "regression-train", n as u64);
        for _ in 0..n {
            let x = uniform_point(d0, &mut rng);
            let noise: f64 = rng.sample(StandardNormal);
            let y = self.target.eval(&x)[0] + self.noise * noise;
            if let Some(idx) = grid.cube_of(&plan.reshape(&x)?) {
                sums[idx] += y;
                counts[idx] += 1;
            }
        }
        let empty_cells = counts.iter().filter(|&&c| c == 0).count();
        let table = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| {
                let mean = if c == 0 { 0.0 } else { (s / c as f64).clamp(-self.target.k, self.target.k) };
                crate::grid::embed_output(&plan, &[mean])
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pw = PiecewiseConstantFn::new(grid.clone(), plan, table)?;
        let fitted = build_for_table("plug-in", self.target.k, pw, seeds::derive(seed, "regression-build", n as u64), None)?;
        let net = CachedNet::new(&fitted);

        let test: Vec<(Vec<f64>, f64, bool)> = {
            let mut rng = seeds::stream(seed, "regression-test", 0);
            (0..self.test_size)
                .map(|_| {
                    let x = uniform_point(d0, &mut rng);
                    let e: f64 = rng.sample(StandardNormal);
                    let inside = grid.cube_of(&plan.reshape(&x).expect("shape")).is_some();
                    (x, self.noise * e, inside)
                })
                .collect()
        };
        // (excess term, squared error, inside) per test point.
        let terms = test
            .par_iter()
            .map(|(x, e, inside)| -> Result<(f64, f64, bool), Error> {
                let f = self.target.eval(x)[0];
                let fh = net.eval(x)?;
                let y = f + e;
                Ok(((y - fh).powi(2) - (y - f).powi(2), (fh - f).powi(2), *inside))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mean = |it: &mut dyn Iterator<Item = f64>| {
            let (s, c) = it.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if c == 0 {
                0.0
            } else {
                s / c as f64
            }
        };
        let excess_risk = mean(&mut terms.iter().map(|t| t.0));
        let excess_risk_cubes = mean(&mut terms.iter().filter(|t| t.2).map(|t| t.0));
        let mse_cubes = mean(&mut terms.iter().filter(|t| t.2).map(|t| t.1));

        let d_blocks = fitted.network.block_count() as f64;
        let mu = d_blocks.powf(-2.0 * self.target.alpha / d0 as f64);
        let rate = excess_risk_rate(self.target.alpha, d0, (n as f64).max(2.0)).ok();
        let e_app = self.e_app.err_total;
        let bounds = bound_report(d_blocks, self.target.k, n as f64, mu, e_app, rate)?;
        let bound_side = bounds.decomposition.0 + 2.0 * bounds.decomposition.1 + 2.0 * bounds.decomposition.2;
        Ok(RegressionReport {
            n,
            seed,
            noise: self.noise,
            m: grid.m,
            cells,
            empty_cells,
            warning: (empty_cells > 0).then(|| format!("{empty_cells} of {cells} cells had no data; set to 0")),
            train_in_cubes: counts.iter().sum(),
            test_size: self.test_size,
            excess_risk,
            excess_risk_cubes,
            mse_cubes,
            e_app,
            within_bound: (!bounds.stat.small_sample).then_some(excess_risk <= bound_side),
            bounds,
        })
    }

    /// Runs every `(N, seed)` pair in parallel.
    pub fn sweep(&self, ns: &[usize], seeds: &[u64]) -> Result<Vec<RegressionReport>, Error> {
        let pairs: Vec<(usize, u64)> = ns.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
        pairs.par_iter().map(|&(n, s)| self.run(n, s)).collect()
    }
}

/// One run of the plug-in demo.
pub fn plugin_regression_demo(setup: &RegressionSetup, choice: GridChoice, test_size: usize) -> Result<RegressionReport, Error> {
    let demo = RegressionDemo::new(
        setup.target.clone(),
        choice,
        setup.noise,
        test_size,
        SampleBudget::split(2000),
        setup.seed,
    )?;
    demo.run(setup.n, setup.seed)
}

/// Median excess risk per `N`, in increasing `N`.
pub fn median_excess_by_n(reports: &[RegressionReport]) -> Vec<(usize, f64)> {
    let mut ns: Vec<usize> = reports.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let mut v: Vec<f64> = reports.iter().filter(|r| r.n == n).map(|r| r.excess_risk).collect();
            v.sort_by(f64::total_cmp);
            let mid = v.len() / 2;
            let med = if v.len() % 2 == 0 { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] };
            (n, med)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistical_bound_example() {
        let b = statistical_bound(2.0, 1.0, 1000.0, 0.01).unwrap();
        let by_hand = 24.0 * (16.0 * (std::f64::consts::E * 1000.0 / 0.16).ln() + 1.0) / 1000.0 + 0.03;
        assert!((b.e_sta - by_hand).abs() / by_hand < 1e-12);
        assert!((b.e_sta - 3.794).abs() < 1e-3);
        assert!(!b.small_sample);
        assert!(statistical_bound(2.0, 1.0, 10.0, 0.01).unwrap().small_sample);
        assert!(statistical_bound(0.0, 1.0, 10.0, 0.01).is_err());
    }

    #[test]
    fn rate_exponents() {
        let r = excess_risk_rate(1.0, 4, 100.0).unwrap();
        assert_eq!(r.exponent, 1.0 / 9.0);
        let r = excess_risk_rate(1.0, 2, 1e5).unwrap();
        assert!((r.d_blocks - 1e5f64.powf(0.2)).abs() < 1e-12);
        assert!(excess_risk_rate(0.5, 2, 1.0).is_err());
    }
}
