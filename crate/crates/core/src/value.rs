//! Value mapping: a stack of feed-forward subunits sending each contextual
//! id to its target column.
//!
//! Subunit `u = (G, k)` has anchor `a` (the id of column `k` of grid point
//! `G`) and target `y = Y_G[:, k]`. Its first layer adds the plateau
//! `σζ1(x − a)` entrywise, labelling entries within `γ1/(2s)` of the anchor
//! with `ℓ`. Its second layer fires `σζ2(1^T Z − dℓ)` only on columns where
//! every entry was labelled, replacing such a column with `y − (r+K)1`, and
//! removes partial labels elsewhere with `σζ3(Z − ℓ)`. Anchored columns end
//! up at or below `−r`, out of reach of every later subunit; a final layer
//! adds `r + K` back.
//!
//! Here `s` is a rational lower approximation of `√d` (exact for square `d`)
//! and `ℓ = d r / s ≥ √d r`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::Serialize;

use crate::context::{ContextualIds, SeparationCert};
use crate::expsum::{rational_from_f64, ExpSum};
use crate::grid::PiecewiseConstantFn;
use crate::scalar::Scalar;
use crate::seq::{block_forward, BlockSpec, FeedForward, SeqMatrix};
use crate::Error;

/// How the final layer removes the `r + K` offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Cleanup {
    /// Adds `r + K` only to entries at or below `−r`, via
    /// `(r+K)(σ(−x) − σ(−x−r))/r`. Entries above zero pass through.
    Gated,
    /// Adds `r + K` to every entry.
    Ungated,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValueMapParams {
    pub gamma: ExpSum,
    pub gamma1: ExpSum,
    pub gamma2: ExpSum,
    /// Rational `s ≤ √d`.
    pub sqrt_d: ExpSum,
    pub r: ExpSum,
    pub k: ExpSum,
    /// Plateau height `ℓ = d r / s`.
    pub label: ExpSum,
    /// `r + K`
    pub shift: ExpSum,
    /// Plateau half-width `γ1/(2s)`.
    pub inner: ExpSum,
    /// Support half-width `(γ1+γ2)/(2s)`.
    pub outer: ExpSum,
    /// `2 d r / γ2`
    pub slope: ExpSum,
    pub anchors: usize,
}

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Largest multiple of `2^-40` whose square is at most `d`.
fn sqrt_lower(d: usize) -> BigRational {
    let scale = BigInt::from(1u64 << 40);
    let mut n = BigInt::from(((d as f64).sqrt() * (1u64 << 40) as f64).floor() as u64);
    let target = BigInt::from(d) * &scale * &scale;
    while &n * &n > target {
        n -= 1;
    }
    while (&n + 1) * (&n + 1) <= target {
        n += 1;
    }
    BigRational::new(n, scale)
}

impl ValueMapParams {
    pub fn new(gamma: &ExpSum, split: (BigRational, BigRational), r: BigRational, k: BigRational, d: usize, anchors: usize) -> Result<Self, Error> {
        if gamma.signum_i8() <= 0 {
            return Err(Error::Separation(format!("measured separation {gamma} is not positive")));
        }
        let (f1, f2) = split;
        if !f1.is_positive() || !f2.is_positive() || &f1 + &f2 >= BigRational::one() {
            return Err(Error::Separation(format!("γ1 + γ2 = ({f1} + {f2})·γ must lie in (0, γ)")));
        }
        let gamma1 = gamma * &ExpSum::from_rational(f1);
        let gamma2 = gamma * &ExpSum::from_rational(f2);
        let s = sqrt_lower(d);
        let dq = BigRational::from_integer(BigInt::from(d));
        let label = ExpSum::from_rational(&dq * &r / &s);
        let two_s = ExpSum::from_rational(&s * BigRational::from_integer(2.into()));
        Ok(ValueMapParams {
            inner: &gamma1 / &two_s,
            outer: &(&gamma1 + &gamma2) / &two_s,
            slope: &ExpSum::from_rational(BigRational::from_integer(2.into()) * &dq * &r) / &gamma2,
            shift: ExpSum::from_rational(&r + &k),
            gamma: gamma.clone(),
            gamma1,
            gamma2,
            sqrt_d: ExpSum::from_rational(s),
            r: ExpSum::from_rational(r),
            k: ExpSum::from_rational(k),
            label,
            anchors,
        })
    }

    pub fn cast<T: Scalar>(&self) -> GadgetConsts<T> {
        GadgetConsts {
            inner: T::from_exact(&self.inner),
            outer: T::from_exact(&self.outer),
            slope: T::from_exact(&self.slope),
            gamma2: T::from_exact(&self.gamma2),
            inv_gamma2: T::from_exact(&self.gamma2.recip()),
            label: T::from_exact(&self.label),
            step3: T::from_exact(&(&self.label / &self.gamma2)),
        }
    }
}

/// Gadget constants in a working scalar type.
#[derive(Clone, Debug)]
pub struct GadgetConsts<T> {
    pub inner: T,
    pub outer: T,
    pub slope: T,
    pub gamma2: T,
    pub inv_gamma2: T,
    pub label: T,
    /// `ℓ / γ2`
    pub step3: T,
}

/// Plateau: `ℓ` on `[−inner, inner]`, linear down to zero at `±outer`.
pub fn sigma_zeta1<T: Scalar>(t: &T, c: &GadgetConsts<T>) -> T {
    let r = |x: T| x.relu();
    c.slope.clone()
        * (r(t.clone() + c.outer.clone()) - r(t.clone() + c.inner.clone()) - r(t.clone() - c.inner.clone())
            + r(t.clone() - c.outer.clone()))
}

/// Step from 0 at `t ≤ 0` to 1 at `t ≥ γ2`.
pub fn sigma_zeta2<T: Scalar>(t: &T, c: &GadgetConsts<T>) -> T {
    (t.relu() - (t.clone() - c.gamma2.clone()).relu()) * c.inv_gamma2.clone()
}

/// Step from 0 at `t ≤ −γ2` to `ℓ` at `t ≥ 0`.
pub fn sigma_zeta3<T: Scalar>(t: &T, c: &GadgetConsts<T>) -> T {
    c.step3.clone() * ((t.clone() + c.gamma2.clone()).relu() - t.relu())
}

#[derive(Clone, Debug)]
pub struct ValueModule {
    pub params: ValueMapParams,
    pub d: usize,
    pub l: usize,
    anchors: Vec<Vec<ExpSum>>,
    targets: Vec<Vec<ExpSum>>,
    /// Per coordinate, `(anchor value, subunit)` sorted by value.
    index: Vec<Vec<(f64, usize)>>,
}

/// Builds the value mapping with `γ1 = γ/2`, `γ2 = γ/4` from the measured
/// separation `γ` and the offset `r + K`.
pub fn build_value_mapper(
    ids: &ContextualIds,
    targets: &PiecewiseConstantFn,
    cert: &SeparationCert,
    k: f64,
) -> Result<ValueModule, Error> {
    build_value_mapper_with(ids, targets, cert, k, (ratio(1, 2), ratio(1, 4)))
}

/// As [`build_value_mapper`] with `(γ1, γ2) = (f1 γ, f2 γ)`.
pub fn build_value_mapper_with(
    ids: &ContextualIds,
    targets: &PiecewiseConstantFn,
    cert: &SeparationCert,
    k: f64,
    split: (BigRational, BigRational),
) -> Result<ValueModule, Error> {
    let gamma = cert
        .gamma_emp
        .clone()
        .ok_or_else(|| Error::Separation("ids have not been verified".into()))?;
    let (d, l) = (targets.grid.d, targets.grid.l);
    if ids.outputs.len() != targets.table.len() {
        return Err(Error::Shape(format!("{} id tables for {} grid points", ids.outputs.len(), targets.table.len())));
    }
    if let Some(y) = targets.table.iter().flat_map(|t| t.data()).find(|y| f64::abs(**y) > k) {
        return Err(Error::Config(format!("target value {y} exceeds K = {k}")));
    }
    let n = targets.table.len() * l;
    let params = ValueMapParams::new(&gamma, split, rational_from_f64(cert.r), rational_from_f64(k), d, n)?;
    let mut anchors = Vec::with_capacity(n);
    let mut tgts = Vec::with_capacity(n);
    for (g, y) in targets.table.iter().enumerate() {
        for c in 0..l {
            anchors.push(ids.id(g, c));
            tgts.push(y.column(c).iter().map(|v| ExpSum::from_f64(*v)).collect());
        }
    }
    Ok(ValueModule::new(params, d, l, anchors, tgts))
}

impl ValueModule {
    pub fn new(params: ValueMapParams, d: usize, l: usize, anchors: Vec<Vec<ExpSum>>, targets: Vec<Vec<ExpSum>>) -> Self {
        let mut index = vec![Vec::with_capacity(anchors.len()); d];
        for (u, a) in anchors.iter().enumerate() {
            for (i, v) in a.iter().enumerate() {
                index[i].push((v.to_f64(), u));
            }
        }
        for col in &mut index {
            col.sort_by(|x, y| x.0.total_cmp(&y.0));
        }
        ValueModule { params, d, l, anchors, targets, index }
    }

    pub fn subunit_count(&self) -> usize {
        self.anchors.len()
    }

    /// `2·(subunits) + 1`.
    pub fn layer_count(&self) -> usize {
        2 * self.subunit_count() + 1
    }

    pub fn anchor(&self, u: usize) -> &[ExpSum] {
        &self.anchors[u]
    }

    pub fn target(&self, u: usize) -> &[ExpSum] {
        &self.targets[u]
    }

    fn anchored_vector(&self, u: usize) -> Vec<ExpSum> {
        self.targets[u]
            .iter()
            .zip(&self.anchors[u])
            .map(|(y, a)| &(y - &self.params.shift) - a)
            .collect()
    }

    /// First layer of subunit `u`: `4d` neurons.
    pub fn label_block(&self, u: usize) -> BlockSpec<ExpSum> {
        let d = self.d;
        let p = &self.params;
        let offsets = [p.outer.clone(), p.inner.clone(), -&p.inner, -&p.outer];
        let signs = [1i64, -1, -1, 1];
        let mut w1 = SeqMatrix::zeros(4 * d, d);
        let mut w2 = SeqMatrix::zeros(d, 4 * d);
        let mut b1 = Vec::with_capacity(4 * d);
        for i in 0..d {
            for n in 0..4 {
                w1.set(4 * i + n, i, ExpSum::one());
                b1.push(&offsets[n] - &self.anchors[u][i]);
                w2.set(i, 4 * i + n, &p.slope * &ExpSum::from_int(signs[n]));
            }
        }
        BlockSpec::feed_forward(FeedForward { w1, b1, w2, b2: vec![ExpSum::zero(); d] })
    }

    /// Second layer of subunit `u`: `2 + 2d` neurons.
    pub fn anchor_block(&self, u: usize) -> BlockSpec<ExpSum> {
        let d = self.d;
        let p = &self.params;
        let dl = &ExpSum::from_int(d as i64) * &p.label;
        let inv = p.gamma2.recip();
        let step3 = &p.label * &inv;
        let v = self.anchored_vector(u);
        let mut w1 = SeqMatrix::zeros(2 + 2 * d, d);
        let mut w2 = SeqMatrix::zeros(d, 2 + 2 * d);
        let mut b1 = vec![-&dl, -&(&dl + &p.gamma2)];
        for i in 0..d {
            w1.set(0, i, ExpSum::one());
            w1.set(1, i, ExpSum::one());
            w2.set(i, 0, &v[i] * &inv);
            w2.set(i, 1, -&(&v[i] * &inv));
        }
        for i in 0..d {
            w1.set(2 + 2 * i, i, ExpSum::one());
            w1.set(3 + 2 * i, i, ExpSum::one());
            b1.push(&p.gamma2 - &p.label);
            b1.push(-&p.label);
            w2.set(i, 2 + 2 * i, -&step3);
            w2.set(i, 3 + 2 * i, step3.clone());
        }
        BlockSpec::feed_forward(FeedForward { w1, b1, w2, b2: vec![ExpSum::zero(); d] })
    }

    pub fn cleanup_block(&self, mode: Cleanup) -> BlockSpec<ExpSum> {
        let d = self.d;
        let p = &self.params;
        match mode {
            Cleanup::Ungated => BlockSpec::feed_forward(FeedForward {
                w1: SeqMatrix::zeros(0, d),
                b1: Vec::new(),
                w2: SeqMatrix::zeros(d, 0),
                b2: vec![p.shift.clone(); d],
            }),
            Cleanup::Gated => {
                let scale = &p.shift / &p.r;
                let mut w1 = SeqMatrix::zeros(2 * d, d);
                let mut w2 = SeqMatrix::zeros(d, 2 * d);
                let mut b1 = Vec::with_capacity(2 * d);
                for i in 0..d {
                    w1.set(2 * i, i, -ExpSum::one());
                    w1.set(2 * i + 1, i, -ExpSum::one());
                    b1.push(ExpSum::zero());
                    b1.push(-&p.r);
                    w2.set(i, 2 * i, scale.clone());
                    w2.set(i, 2 * i + 1, -&scale);
                }
                BlockSpec::feed_forward(FeedForward { w1, b1, w2, b2: vec![ExpSum::zero(); d] })
            }
        }
    }

    /// Layer `n` in order `(label 0, anchor 0, label 1, …, cleanup)`.
    pub fn block(&self, n: usize, mode: Cleanup) -> BlockSpec<ExpSum> {
        if n == 2 * self.subunit_count() {
            self.cleanup_block(mode)
        } else if n % 2 == 0 {
            self.label_block(n / 2)
        } else {
            self.anchor_block(n / 2)
        }
    }

    /// Literal pass through every layer.
    pub fn forward_literal(&self, x: &SeqMatrix<ExpSum>, mode: Cleanup) -> Result<SeqMatrix<ExpSum>, Error> {
        let mut h = x.clone();
        for n in 0..self.layer_count() {
            h = block_forward(&self.block(n, mode), &h)?;
        }
        Ok(h)
    }

    /// Literal pass through subunits only, without the cleanup layer.
    pub fn forward_subunits_literal(&self, x: &SeqMatrix<ExpSum>) -> Result<SeqMatrix<ExpSum>, Error> {
        let mut h = x.clone();
        for u in 0..self.subunit_count() {
            h = block_forward(&self.label_block(u), &h)?;
            h = block_forward(&self.anchor_block(u), &h)?;
        }
        Ok(h)
    }

    /// Subunit `u` applied to one column.
    pub fn apply_subunit(&self, u: usize, col: &[ExpSum]) -> Vec<ExpSum> {
        let c = self.params.cast::<ExpSum>();
        let a = &self.anchors[u];
        let z: Vec<ExpSum> = col
            .iter()
            .zip(a)
            .map(|(x, ai)| x + &sigma_zeta1(&(x - ai), &c))
            .collect();
        let sum = z.iter().fold(ExpSum::zero(), |acc, v| &acc + v);
        let dl = &ExpSum::from_int(self.d as i64) * &c.label;
        let gate = sigma_zeta2(&(&sum - &dl), &c);
        let v = self.anchored_vector(u);
        z.iter()
            .zip(&v)
            .map(|(zi, vi)| &(zi + &(vi * &gate)) - &sigma_zeta3(&(zi - &c.label), &c))
            .collect()
    }

    pub fn apply_cleanup(&self, col: &[ExpSum], mode: Cleanup) -> Vec<ExpSum> {
        let p = &self.params;
        match mode {
            Cleanup::Ungated => col.iter().map(|x| x + &p.shift).collect(),
            Cleanup::Gated => {
                let scale = &p.shift / &p.r;
                col.iter()
                    .map(|x| {
                        let g = &(-x).relu() - &(&(-x) - &p.r).relu();
                        x + &(&scale * &g)
                    })
                    .collect()
            }
        }
    }

    /// No subunit without a labelled entry can move `col`.
    fn is_cold(&self, col: &[ExpSum]) -> bool {
        let p = &self.params;
        let top = &p.label - &p.gamma2;
        let dl = &ExpSum::from_int(self.d as i64) * &p.label;
        let sum = col.iter().fold(ExpSum::zero(), |acc, v| &acc + v);
        sum <= dl && col.iter().all(|x| *x <= top)
    }

    /// Subunits `≥ from` with some anchor coordinate strictly within the
    /// plateau support of `col`, ascending.
    fn near_subunits(&self, col: &[ExpSum], from: usize) -> Vec<usize> {
        let outer = &self.params.outer;
        let width = outer.to_f64();
        let mut out = Vec::new();
        for (i, x) in col.iter().enumerate() {
            let xf = x.to_f64();
            let w = width + 1e-12 * xf.abs().max(1.0);
            let idx = &self.index[i];
            let lo = idx.partition_point(|e| e.0 < xf - w);
            let hi = idx.partition_point(|e| e.0 <= xf + w);
            for &(_, u) in &idx[lo..hi] {
                if u >= from && (x - &self.anchors[u][i]).abs() < *outer {
                    out.push(u);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Subunits applied to one column, visiting only those that can act.
    /// Equal to the literal pass in exact arithmetic.
    pub fn forward_column(&self, col: &[ExpSum]) -> Vec<ExpSum> {
        let mut x = col.to_vec();
        let mut from = 0;
        'outer: loop {
            if !self.is_cold(&x) {
                for u in from..self.subunit_count() {
                    x = self.apply_subunit(u, &x);
                }
                return x;
            }
            for u in self.near_subunits(&x, from) {
                let next = self.apply_subunit(u, &x);
                from = u + 1;
                if next != x {
                    x = next;
                    continue 'outer;
                }
            }
            return x;
        }
    }

    /// Fast equivalent of [`ValueModule::forward_literal`].
    pub fn forward(&self, x: &SeqMatrix<ExpSum>, mode: Cleanup) -> Result<SeqMatrix<ExpSum>, Error> {
        if x.rows() != self.d {
            return Err(Error::Shape(format!("value mapping for d={} applied to d={}", self.d, x.rows())));
        }
        let mut out = x.clone();
        for c in 0..x.cols() {
            let col = self.forward_column(&x.column(c));
            out.set_column(c, &self.apply_cleanup(&col, mode));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(d: usize) -> ValueMapParams {
        let gamma = ExpSum::term(ratio(1, 1), BigRational::from_integer(50.into()));
        ValueMapParams::new(&gamma, (ratio(1, 2), ratio(1, 4)), ratio(3, 1), ratio(1, 1), d, 1).unwrap()
    }

    #[test]
    fn gadget_breakpoints() {
        let p = params(1);
        let c = p.cast::<ExpSum>();
        assert_eq!(sigma_zeta1(&ExpSum::zero(), &c), p.label);
        assert_eq!(sigma_zeta1(&p.outer, &c), ExpSum::zero());
        assert_eq!(sigma_zeta1(&p.inner, &c), p.label);
        assert_eq!(sigma_zeta2(&ExpSum::zero(), &c), ExpSum::zero());
        assert_eq!(sigma_zeta2(&p.gamma2, &c), ExpSum::one());
        assert_eq!(sigma_zeta2(&ExpSum::from_int(5), &c), ExpSum::one());
        assert_eq!(sigma_zeta3(&ExpSum::zero(), &c), p.label);
        assert_eq!(sigma_zeta3(&-&p.gamma2, &c), ExpSum::zero());
    }

    #[test]
    fn label_at_square_dimension() {
        let p = params(4);
        assert_eq!(p.sqrt_d, ExpSum::from_int(2));
        assert_eq!(p.label, ExpSum::from_int(6));
    }

    #[test]
    fn sqrt_lower_is_below() {
        for d in 1..20 {
            let s = sqrt_lower(d);
            assert!(&s * &s <= BigRational::from_integer(d.into()));
            assert!((crate::expsum::ratio_to_f64(&s) - (d as f64).sqrt()).abs() < 1e-11);
        }
    }

    #[test]
    fn insufficient_budget() {
        let gamma = ExpSum::from_f64(0.1);
        let err = ValueMapParams::new(&gamma, (ratio(1, 2), ratio(1, 2)), ratio(3, 1), ratio(1, 1), 1, 1);
        assert!(matches!(err, Err(Error::Separation(_))));
        let err = ValueMapParams::new(&ExpSum::zero(), (ratio(1, 2), ratio(1, 4)), ratio(3, 1), ratio(1, 1), 1, 1);
        assert!(matches!(err, Err(Error::Separation(_))));
    }
}
