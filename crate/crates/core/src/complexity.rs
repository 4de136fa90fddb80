//! Operation and parameter counts, the VC-dimension bound they feed, and the
//! bump-function family used for the matching lower bound.
//!
//! Operations follow the taxonomy of the VC argument: exponentials,
//! arithmetic (`+ − × /`), and comparison jumps (one per ReLU). The
//! instrumented counter executes each part as an explicit program on
//! [`Counted`] scalars and checks that the program computes exactly what the
//! literal network computes.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::assemble::{build_for_table, TransformerNetwork};
use crate::expsum::ExpSum;
use crate::grid::{build_grid, GridSpec, PiecewiseConstantFn};
use crate::reshape::ReshapePlan;
use crate::scalar::{take_tally, Counted, Scalar, Tally};
use crate::seeds;
use crate::seq::SeqMatrix;
use crate::value::Cleanup;
use crate::Error;

pub const PART_POSITIONAL: &str = "positional encoding";
pub const PART_QUANTIZER: &str = "quantizer";
pub const PART_CONTEXTUAL: &str = "contextual attention";
pub const PART_VALUE: &str = "value pairs";
pub const PART_EXTRA: &str = "extra layer";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PartCount {
    pub part: &'static str,
    pub ops: u128,
    pub params: u128,
    pub exponentials: u128,
    pub jumps: u128,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CountReport {
    pub d: usize,
    pub l: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub parts: Vec<PartCount>,
    pub t: u128,
    pub omega: u128,
    pub exponentials: u128,
    pub arithmetic: u128,
    pub jumps: u128,
    /// The final sign output.
    pub outputs: u128,
}

impl CountReport {
    fn from_parts(d: usize, l: usize, m: usize, parts: Vec<PartCount>) -> Self {
        let t = parts.iter().map(|p| p.ops).sum();
        let exponentials = parts.iter().map(|p| p.exponentials).sum();
        let jumps = parts.iter().map(|p| p.jumps).sum();
        CountReport {
            d,
            l,
            m,
            omega: parts.iter().map(|p| p.params).sum(),
            arithmetic: t - exponentials - jumps,
            parts,
            t,
            exponentials,
            jumps,
            outputs: 1,
        }
    }

    pub fn part(&self, name: &str) -> Option<&PartCount> {
        self.parts.iter().find(|p| p.part == name)
    }
}

/// Per-part counts from the closed-form expressions, and the totals
/// `t = (25dL+6d+5L)LM^{dL} + 13d²L²M + 8d²L + 4dL² + 2L² + 5LM − 2dL − L + 17`,
/// `ω = 2dLM^{dL} + 4d² + M + 10`.
pub fn count_closed_form(d: usize, l: usize, m: usize) -> CountReport {
    let (d, l, m) = (d as u128, l as u128, m as u128);
    let units = l * m.saturating_pow((d * l) as u32);
    let parts = vec![
        PartCount { part: PART_POSITIONAL, ops: d * l, params: 0, exponentials: 0, jumps: 0 },
        PartCount {
            part: PART_QUANTIZER,
            ops: 13 * d * d * l * l * m + 5 * l * m + 3,
            params: m + 4,
            exponentials: 0,
            jumps: 3 * d * l * d * l * m,
        },
        PartCount {
            part: PART_CONTEXTUAL,
            ops: d * l * (8 * d + 4 * l - 4) + 2 * l * l - l,
            params: 4 * d * d,
            exponentials: l * l,
            jumps: 0,
        },
        PartCount {
            part: PART_VALUE,
            ops: (13 * d * l + 4 * d) * units + 7 + (12 * d * l + 5 * l + 2 * d) * units + 7,
            params: 2 * d * units + 6,
            exponentials: 0,
            jumps: (6 * d * l + 2 * l) * units,
        },
        PartCount { part: PART_EXTRA, ops: d * l, params: 0, exponentials: 0, jumps: 0 },
    ];
    CountReport::from_parts(d as usize, l as usize, m as usize, parts)
}

/// The closed-form totals as printed, for cross-checking the per-part sum.
pub fn closed_form_totals(d: usize, l: usize, m: usize) -> (u128, u128) {
    let (d, l, m) = (d as u128, l as u128, m as u128);
    let p = m.saturating_pow((d * l) as u32);
    let t = (25 * d * l + 6 * d + 5 * l) * l * p + 13 * d * d * l * l * m + 8 * d * d * l + 4 * d * l * l + 2 * l * l + 5 * l * m
        - 2 * d * l
        - l
        + 17;
    (t, 2 * d * l * p + 4 * d * d + m + 10)
}

type C = Counted<ExpSum>;

fn k(x: &ExpSum) -> C {
    Counted::new(x.clone())
}

fn tally_part(part: &'static str, params: u128, tally: Tally) -> PartCount {
    PartCount {
        part,
        ops: tally.total() as u128,
        params,
        exponentials: tally.exponentials as u128,
        jumps: tally.jumps as u128,
    }
}

/// Matrix product computing every entry in full, `d` products and `d − 1`
/// sums per entry.
fn dense_matmul(a: &SeqMatrix<C>, b: &SeqMatrix<C>) -> SeqMatrix<C> {
    let mut out = SeqMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = a.get(i, 0).clone() * b.get(0, j).clone();
            for p in 1..a.cols() {
                acc = acc + a.get(i, p).clone() * b.get(p, j).clone();
            }
            out.set(i, j, acc);
        }
    }
    out
}

fn counted(m: &SeqMatrix<ExpSum>) -> SeqMatrix<C> {
    m.map(|v| k(v))
}

/// Executes the network as explicit per-part programs on counted scalars
/// and tallies every operation. Uses the ungated final layer, which adds
/// `r + K` everywhere, and checks the result against the literal forward
/// pass of the same network.
pub fn count_instrumented(net: &TransformerNetwork<ExpSum>, x: &SeqMatrix<f64>) -> Result<CountReport, Error> {
    let grid = &net.grid;
    let (d, l, m) = (grid.d, grid.l, grid.m);
    let q = &net.quantizer;
    let mut parts = Vec::new();
    take_tally();

    // Positional encoding.
    let mut h: SeqMatrix<C> = SeqMatrix::zeros(d, l);
    for i in 0..d {
        for j in 0..l {
            h.set(i, j, k(&ExpSum::from_f64(*x.get(i, j))) + k(&ExpSum::from_usize(j + 1)));
        }
    }
    parts.push(tally_part(PART_POSITIONAL, 0, take_tally()));

    // Quantizer: three ground operations, five per (column, level) for the
    // biases, then every layer touches every entry.
    let mut params = BTreeSet::new();
    params.insert("-1".to_string());
    params.extend((0..=m).map(|v| v.to_string()));
    params.extend(["delta".to_string(), "delta_star".to_string()]);
    let (delta, delta_star) = (k(&q.delta), k(&q.delta_star));
    let step = delta.clone() + delta_star.clone();
    let down = delta.clone() / delta_star.clone();
    let up = step.clone() / delta_star.clone();
    let mut biases = vec![Vec::with_capacity(m); l];
    for (j, row) in biases.iter_mut().enumerate() {
        for lvl in 0..m {
            let g = k(&ExpSum::from_usize(lvl)) * step.clone() + k(&ExpSum::from_usize(j + 1));
            let neg = -g;
            row.push([neg.clone(), neg.clone() - delta.clone(), neg - step.clone()]);
        }
    }
    for idx in 0..q.layer_count() {
        let (li, lj, lk) = q.layer_coords(idx);
        let b = &biases[lj][lk];
        for i in 0..d {
            let mask = k(&ExpSum::from_usize(usize::from(i == li)));
            for j in 0..l {
                let xv = h.get(i, j).clone();
                let h0 = (xv.clone() + b[0].clone()).relu();
                let h1 = (xv.clone() + b[1].clone()).relu();
                let h2 = (xv.clone() + b[2].clone()).relu();
                let inc = -h0 + up.clone() * h1 - down.clone() * h2;
                h.set(i, j, xv + mask.clone() * inc);
            }
        }
    }
    parts.push(tally_part(PART_QUANTIZER, params.len() as u128, take_tally()));

    // Contextual attention, softmax without max subtraction.
    let head = net.context.head();
    let kx = dense_matmul(&counted(&head.w_k), &h);
    let qx = dense_matmul(&counted(&head.w_q), &h);
    let vx = dense_matmul(&counted(&head.w_v), &h);
    let scores = dense_matmul(&kx.transpose(), &qx);
    let mut probs: SeqMatrix<C> = SeqMatrix::zeros(l, l);
    for c in 0..l {
        let exps: Vec<C> = (0..l).map(|r| scores.get(r, c).exp()).collect();
        let mut sum = exps[0].clone();
        for e in &exps[1..] {
            sum = sum + e.clone();
        }
        for (r, e) in exps.into_iter().enumerate() {
            probs.set(r, c, e / sum.clone());
        }
    }
    let ov = dense_matmul(&counted(&head.w_o), &vx);
    let attn = dense_matmul(&ov, &probs);
    for i in 0..d {
        for j in 0..l {
            let v = h.get(i, j).clone() + attn.get(i, j).clone();
            h.set(i, j, v);
        }
    }
    parts.push(tally_part(PART_CONTEXTUAL, (4 * d * d) as u128, take_tally()));

    // Value mapping: fourteen preparation operations, then subunit pairs.
    let v = &net.value;
    let p = &v.params;
    let (g1, g2, r, kk, dd, s) = (k(&p.gamma1), k(&p.gamma2), k(&p.r), k(&p.k), k(&ExpSum::from_usize(d)), k(&p.sqrt_d));
    let two = k(&ExpSum::from_int(2));
    let dr = dd.clone() * r.clone();
    let slope = dr.clone() * two.clone() / g2.clone();
    let two_s = two * s.clone();
    let inner = g1.clone() / two_s.clone();
    let outer = (g1 + g2.clone()) / two_s;
    let label = dr / s;
    let dlabel = dd * label.clone();
    let shift = r + kk;
    let inv_g2 = k(&ExpSum::from_int(1)) / g2.clone();
    let step3 = label.clone() * inv_g2.clone();
    let dlabel_hi = dlabel.clone() + g2.clone();
    let low3 = g2 - label.clone();
    let one = k(&ExpSum::from_int(1));
    for u in 0..v.subunit_count() {
        let a: Vec<C> = v.anchor(u).iter().map(k).collect();
        let y: Vec<C> = v.target(u).iter().map(k).collect();
        // Label layer.
        let consts: Vec<[C; 4]> = a
            .iter()
            .map(|ai| {
                [
                    outer.clone() - ai.clone(),
                    inner.clone() - ai.clone(),
                    ai.clone() + inner.clone(),
                    ai.clone() + outer.clone(),
                ]
            })
            .collect();
        for i in 0..d {
            for j in 0..l {
                let xv = h.get(i, j).clone();
                let c = &consts[i];
                let r0 = (xv.clone() + c[0].clone()).relu();
                let r1 = (xv.clone() + c[1].clone()).relu();
                let r2 = (xv.clone() - c[2].clone()).relu();
                let r3 = (xv.clone() - c[3].clone()).relu();
                h.set(i, j, xv + slope.clone() * (r0 - r1 - r2 + r3));
            }
        }
        // Anchor layer.
        let mut gates = Vec::with_capacity(l);
        for j in 0..l {
            let mut sum = one.clone() * h.get(0, j).clone();
            for i in 1..d {
                sum = sum + one.clone() * h.get(i, j).clone();
            }
            let t0 = (sum.clone() - dlabel.clone()).relu();
            let t1 = (sum - dlabel_hi.clone()).relu();
            gates.push((t0 - t1) * inv_g2.clone());
        }
        let vec: Vec<C> = y.iter().zip(&a).map(|(yi, ai)| yi.clone() - shift.clone() - ai.clone()).collect();
        for i in 0..d {
            for (j, gate) in gates.iter().enumerate() {
                let z = h.get(i, j).clone();
                let add = vec[i].clone() * gate.clone();
                let s0 = (z.clone() + low3.clone()).relu();
                let s1 = (z.clone() - label.clone()).relu();
                let z3 = step3.clone() * s0 - step3.clone() * s1;
                h.set(i, j, z + add - z3);
            }
        }
    }
    let value_params = (2 * d * v.subunit_count() + 6) as u128;
    parts.push(tally_part(PART_VALUE, value_params, take_tally()));

    for i in 0..d {
        for j in 0..l {
            let vv = h.get(i, j).clone() + shift.clone();
            h.set(i, j, vv);
        }
    }
    parts.push(tally_part(PART_EXTRA, 0, take_tally()));

    let mut literal_net = net.clone();
    literal_net.cleanup = Cleanup::Ungated;
    let literal = literal_net.forward_literal(x)?;
    let mismatch = (0..d * l).find(|&n| h.data()[n].0 != literal.data()[n]);
    if let Some(n) = mismatch {
        return Err(Error::Collision(format!(
            "instrumented program disagrees with the network at entry {n}: {} vs {}",
            h.data()[n].0,
            literal.data()[n]
        )));
    }
    Ok(CountReport::from_parts(d, l, m, parts))
}

/// `t² ω (ω + 19 log₂(9ω))`.
pub fn vc_upper_bound(t: f64, omega: f64) -> f64 {
    t * t * omega * (omega + 19.0 * (9.0 * omega).log2())
}

/// Natural log of [`vc_upper_bound`], finite for any positive inputs.
pub fn ln_vc_upper_bound(t: f64, omega: f64) -> f64 {
    2.0 * t.ln() + omega.ln() + (omega + 19.0 * (9.0 * omega).log2()).ln()
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// `M = ⌊(9ε/2)^{−1/α}⌋`, the level count of the lower-bound family.
pub fn lower_bound_levels(eps: f64, alpha: f64) -> usize {
    (4.5 * eps).powf(-1.0 / alpha).floor() as usize
}

/// Signed sums of pyramid bumps on the `M^{d0}` cubes of side `1/M`.
#[derive(Clone, Debug, Serialize)]
pub struct ShatterFamily {
    #[serde(rename = "M")]
    pub m: usize,
    pub d0: usize,
    pub alpha: f64,
    /// Side length `l = 1/M`.
    pub side: f64,
}

pub fn build_shatter_family(m: usize, d0: usize, alpha: f64) -> Result<ShatterFamily, Error> {
    if m == 0 || d0 == 0 || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("need M, d0 >= 1 and α ∈ (0,1]; got M={m}, d0={d0}, α={alpha}")));
    }
    Ok(ShatterFamily { m, d0, alpha, side: 1.0 / m as f64 })
}

impl ShatterFamily {
    pub fn cube_count(&self) -> usize {
        self.m.pow(self.d0 as u32)
    }

    pub fn theta(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.d0];
        let mut rest = index;
        for slot in out.iter_mut().rev() {
            *slot = rest % self.m;
            rest /= self.m;
        }
        out
    }

    pub fn center(&self, index: usize) -> Vec<f64> {
        self.theta(index).iter().map(|&t| (t as f64 + 0.5) * self.side).collect()
    }

    /// `(l/2)^α / 2`.
    pub fn peak(&self) -> f64 {
        (self.side / 2.0).powf(self.alpha) / 2.0
    }

    /// Bump of cube `index`: the peak at the center, zero on and outside
    /// the boundary, linear along every ray from the center.
    pub fn bump(&self, index: usize, x: &[f64]) -> f64 {
        let c = self.center(index);
        let r = c.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        self.peak() * (1.0 - r / (self.side / 2.0)).max(0.0)
    }

    /// `f_φ(x) = Σ_θ φ(θ) ζ_θ(x)`, with `φ` read from the bits of `pattern`
    /// (bit set means `+1`).
    pub fn eval(&self, pattern: u64, x: &[f64]) -> f64 {
        // Only the cube containing x can contribute.
        let idx = x.iter().fold(0usize, |acc, &v| {
            acc * self.m + ((v * self.m as f64).floor() as usize).min(self.m - 1)
        });
        let mut total = 0.0;
        for cand in self.neighbours(idx) {
            let sign = if pattern >> cand & 1 == 1 { 1.0 } else { -1.0 };
            total += sign * self.bump(cand, x);
        }
        total
    }

    fn neighbours(&self, idx: usize) -> Vec<usize> {
        // The cube of x, plus the adjacent ones in case x lies on a face.
        let theta = self.theta(idx);
        let mut out = vec![idx];
        for k in 0..self.d0 {
            for delta in [-1i64, 1] {
                let t = theta[k] as i64 + delta;
                if t >= 0 && (t as usize) < self.m {
                    let mut th = theta.clone();
                    th[k] = t as usize;
                    out.push(th.iter().fold(0, |acc, &v| acc * self.m + v));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PatternResult {
    pub pattern: u64,
    pub family_signs_ok: bool,
    pub network_signs_ok: bool,
    /// `(θ, f_φ(x̂_θ), g_φ(x̂_θ))` for every mismatched center.
    pub mismatches: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ShatterReport {
    pub family: ShatterFamily,
    pub points: usize,
    pub patterns: usize,
    pub results: Vec<PatternResult>,
    pub shattered_by_family: bool,
    pub shattered_by_networks: bool,
}

/// Grid used for the networks `g_φ`: widths `δ = 0.16`, `δ* = 0.04`.
pub fn default_network_grid(d: usize, l: usize) -> Result<GridSpec, Error> {
    build_grid(0.16, 0.04, d, l)
}

/// Checks every sign pattern on the cube centers, for `f_φ` and for the
/// network built from it. Networks use `d = 1, L = d0`.
pub fn verify_shattering(family: &ShatterFamily, grid: &GridSpec, seed: u64, max_points: usize) -> Result<ShatterReport, Error> {
    let points = family.cube_count();
    if points > max_points || points > 20 {
        return Err(Error::Config(format!("{points} points exceed the enumeration cap {max_points}")));
    }
    if grid.d0 != family.d0 {
        return Err(Error::Shape(format!("grid d0={} for a family on d0={}", grid.d0, family.d0)));
    }
    let plan = ReshapePlan::new(grid.d, grid.l)?;
    let count = grid.point_count().ok_or_else(|| Error::Config("grid too large".into()))?;
    let patterns = 1u64 << points;
    let results = (0..patterns)
        .into_par_iter()
        .map(|pattern| -> Result<PatternResult, Error> {
            let table = (0..count)
                .map(|idx| {
                    let x = plan.flatten(&grid.point(idx))?;
                    crate::grid::embed_output(&plan, &[family.eval(pattern, &x)])
                })
                .collect::<Result<Vec<_>, _>>()?;
            let pw = PiecewiseConstantFn::new(grid.clone(), plan, table)?;
            let approx = build_for_table("shatter", 1.0, pw, seeds::derive(seed, "shatter", pattern), None)?;
            let mut mismatches = Vec::new();
            let mut family_ok = true;
            for theta in 0..points {
                let c = family.center(theta);
                let want = if pattern >> theta & 1 == 1 { 1.0 } else { -1.0 };
                let f = family.eval(pattern, &c);
                let g = approx.network.apply(&c)?[0];
                family_ok &= f * want > 0.0;
                if g * want <= 0.0 || f * want <= 0.0 {
                    mismatches.push((theta, f, g));
                }
            }
            Ok(PatternResult {
                pattern,
                family_signs_ok: family_ok,
                network_signs_ok: mismatches.iter().all(|m| m.2 * m.1 > 0.0) && mismatches.is_empty(),
                mismatches,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ShatterReport {
        family: family.clone(),
        points,
        patterns: patterns as usize,
        shattered_by_family: results.iter().all(|r| r.family_signs_ok),
        shattered_by_networks: results.iter().all(|r| r.network_signs_ok),
        results,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HolderSampleCheck {
    pub pairs: usize,
    pub violations: usize,
    pub max_ratio: f64,
}

/// Samples pairs, half uniform and half within one cube side of each
/// other, and checks `|f_φ(x) − f_φ(y)| ≤ ‖x − y‖^α`.
pub fn check_family_holder(family: &ShatterFamily, pattern: u64, pairs: usize, seed: u64) -> HolderSampleCheck {
    use rand::Rng;
    let mut rng = seeds::stream(seed, "family-holder", pattern);
    let mut out = HolderSampleCheck { pairs, violations: 0, max_ratio: 0.0 };
    for n in 0..pairs {
        let x: Vec<f64> = (0..family.d0).map(|_| rng.gen()).collect();
        let y: Vec<f64> = if n % 2 == 0 {
            (0..family.d0).map(|_| rng.gen()).collect()
        } else {
            x.iter().map(|v| (v + (rng.gen::<f64>() - 0.5) * family.side).clamp(0.0, 1.0)).collect()
        };
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let diff = (family.eval(pattern, &x) - family.eval(pattern, &y)).abs();
        if dist > 0.0 {
            out.max_ratio = out.max_ratio.max(diff / dist.powf(family.alpha));
        }
        if diff > dist.powf(family.alpha) * (1.0 + 1e-12) + 1e-15 {
            out.violations += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_spot_values() {
        let c = count_closed_form(2, 2, 2);
        assert_eq!(c.omega, 156);
        assert_eq!(c.part(PART_CONTEXTUAL).unwrap().params, 16);
        assert_eq!(c.part(PART_CONTEXTUAL).unwrap().ops, 86);
        for (d, l, m) in [(1, 2, 2), (2, 2, 2), (3, 2, 5), (1, 4, 3)] {
            let c = count_closed_form(d, l, m);
            assert_eq!((c.t, c.omega), closed_form_totals(d, l, m));
        }
    }

    #[test]
    fn vc_bound_example() {
        let v = vc_upper_bound(100.0, 10.0);
        let want = 1e5 * (10.0 + 19.0 * 90f64.log2());
        assert!((v - want).abs() / want < 1e-12);
        assert!((v - 1.334e7).abs() / 1.334e7 < 1e-3);
        assert!((ln_vc_upper_bound(100.0, 10.0) - v.ln()).abs() < 1e-12);
    }

    #[test]
    fn bump_values() {
        let f = build_shatter_family(2, 2, 1.0).unwrap();
        assert!((f.peak() - 0.125).abs() < 1e-15);
        assert!((f.bump(0, &[0.25, 0.25]) - 0.125).abs() < 1e-15);
        assert_eq!(f.bump(0, &[0.5, 0.25]), 0.0);
        assert!((f.bump(0, &[0.375, 0.25]) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn lower_bound_levels_example() {
        assert_eq!(lower_bound_levels(0.1, 1.0), 2);
        assert_eq!(lower_bound_levels(0.05, 0.5), 19);
    }
}
