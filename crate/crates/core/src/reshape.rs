//! Vector/sequence reshaping and concrete Hölder targets.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::scalar::Scalar;
use crate::seeds;
use crate::seq::SeqMatrix;
use crate::Error;

/// Column-major reshape between `R^{d0}` and `R^{d×L}`: coordinate `k`
/// (0-based) goes to row `k mod d`, column `k / d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ReshapePlan {
    pub d0: usize,
    pub d: usize,
    pub l: usize,
}

impl ReshapePlan {
    pub fn new(d: usize, l: usize) -> Result<Self, Error> {
        if d == 0 || l == 0 {
            return Err(Error::Config(format!("need d, L >= 1, got d={d}, L={l}")));
        }
        Ok(ReshapePlan { d0: d * l, d, l })
    }

    /// 1-based `(i(k), j(k))` for 1-based `k`.
    pub fn index_map(&self, k: usize) -> (usize, usize) {
        ((k - 1) % self.d + 1, (k - 1) / self.d + 1)
    }

    pub fn reshape<T: Scalar>(&self, x: &[T]) -> Result<SeqMatrix<T>, Error> {
        if x.len() != self.d0 {
            return Err(Error::Shape(format!("vector of length {} for d0={}", x.len(), self.d0)));
        }
        let mut m = SeqMatrix::zeros(self.d, self.l);
        for (k, v) in x.iter().enumerate() {
            m.set(k % self.d, k / self.d, v.clone());
        }
        Ok(m)
    }

    pub fn flatten<T: Scalar>(&self, x: &SeqMatrix<T>) -> Result<Vec<T>, Error> {
        if x.shape() != (self.d, self.l) {
            return Err(Error::Shape(format!(
                "{:?} matrix for a {}x{} plan",
                x.shape(),
                self.d,
                self.l
            )));
        }
        Ok((0..self.d0).map(|k| x.get(k % self.d, k / self.d).clone()).collect())
    }
}

type Evaluator = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A member of the Hölder class `H^α([0,1]^{d_x}, K)` with values in
/// `R^{d_y}`: each component is bounded by `K` and `K`-Hölder of order `α`.
#[derive(Clone)]
pub struct HolderTarget {
    pub id: String,
    pub alpha: f64,
    pub k: f64,
    pub d_x: usize,
    pub d_y: usize,
    eval: Evaluator,
}

impl fmt::Debug for HolderTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HolderTarget")
            .field("id", &self.id)
            .field("alpha", &self.alpha)
            .field("k", &self.k)
            .field("d_x", &self.d_x)
            .field("d_y", &self.d_y)
            .finish()
    }
}

impl HolderTarget {
    pub fn new(
        id: impl Into<String>,
        alpha: f64,
        k: f64,
        d_x: usize,
        d_y: usize,
        f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        HolderTarget { id: id.into(), alpha, k, d_x, d_y, eval: Arc::new(f) }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.eval)(x)
    }

    /// `√d_y · K`, the constant in `‖f(x) − f(y)‖ ≤ √d_y K ‖x − y‖^α`.
    pub fn smoothness_constant(&self) -> f64 {
        (self.d_y as f64).sqrt() * self.k
    }

    pub fn constant(c: f64, alpha: f64, k: f64, d_x: usize) -> Self {
        Self::new(format!("constant:{c}"), alpha, k, d_x, 1, move |_| vec![c])
    }

    /// `K·|x_1 − 1/2|^α`.
    pub fn bump(alpha: f64, k: f64, d_x: usize) -> Self {
        Self::new("bump", alpha, k, d_x, 1, move |x| vec![k * (x[0] - 0.5).abs().powf(alpha)])
    }

    /// `K·d0^{α/2−1}·Π_k |x_k − 1/2|^α`. Each factor is 1-Hölder and at most
    /// one, so the product is `Σ_k |x_k − y_k|^α ≤ d0^{1−α/2}‖x − y‖^α`-Hölder;
    /// the prefactor brings the constant back to `K`.
    pub fn product(alpha: f64, k: f64, d_x: usize) -> Self {
        let scale = k * (d_x as f64).powf(alpha / 2.0 - 1.0);
        Self::new("product", alpha, k, d_x, 1, move |x| {
            vec![scale * x.iter().map(|v| (v - 0.5).abs().powf(alpha)).product::<f64>()]
        })
    }
}

/// Catalog members at the given `(α, K)` on `[0,1]^{d0}`.
pub fn holder_catalog(alpha: f64, k: f64, d0: usize) -> Vec<HolderTarget> {
    vec![
        HolderTarget::constant(0.0, alpha, k, d0),
        HolderTarget::constant(k / 2.0, alpha, k, d0),
        HolderTarget::bump(alpha, k, d0),
        HolderTarget::product(alpha, k, d0),
    ]
}

/// Looks up a catalog member by id: `bump`, `product`, `zero`, `constant`
/// (value `K/2`) or `constant:<c>` with `|c| ≤ K`.
pub fn catalog_target(id: &str, alpha: f64, k: f64, d0: usize) -> Result<HolderTarget, Error> {
    match id {
        "bump" => Ok(HolderTarget::bump(alpha, k, d0)),
        "product" => Ok(HolderTarget::product(alpha, k, d0)),
        "zero" => Ok(HolderTarget::constant(0.0, alpha, k, d0)),
        "constant" => Ok(HolderTarget::constant(k / 2.0, alpha, k, d0)),
        other => {
            let c: f64 = other
                .strip_prefix("constant:")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("unknown target '{id}'")))?;
            if c.abs() > k {
                return Err(Error::Config(format!("constant {c} exceeds K={k}")));
            }
            Ok(HolderTarget::constant(c, alpha, k, d0))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HolderCheck {
    pub pairs: usize,
    pub smoothness_violations: usize,
    pub bound_violations: usize,
    /// Largest `‖f(x) − f(y)‖ / ‖x − y‖^α` seen.
    pub max_ratio: f64,
}

impl HolderCheck {
    pub fn passed(&self) -> bool {
        self.smoothness_violations == 0 && self.bound_violations == 0
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Samples uniform pairs and checks the Hölder inequality with constant
/// `√d_y K` and the bound `|f_i| ≤ K`.
pub fn check_holder(target: &HolderTarget, pairs: usize, seed: u64) -> HolderCheck {
    let mut rng = seeds::stream(seed, "holder-pairs", 0);
    let c = target.smoothness_constant();
    let mut out = HolderCheck { pairs, smoothness_violations: 0, bound_violations: 0, max_ratio: 0.0 };
    for _ in 0..pairs {
        let x: Vec<f64> = (0..target.d_x).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..target.d_x).map(|_| rng.gen()).collect();
        let (fx, fy) = (target.eval(&x), target.eval(&y));
        let lhs = dist(&fx, &fy);
        let h = dist(&x, &y).powf(target.alpha);
        if h > 0.0 {
            out.max_ratio = out.max_ratio.max(lhs / h);
        }
        if lhs > c * h * (1.0 + 1e-12) + 1e-15 {
            out.smoothness_violations += 1;
        }
        if fx.iter().chain(&fy).any(|v| v.abs() > target.k * (1.0 + 1e-12)) {
            out.bound_violations += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_examples() {
        let p = ReshapePlan::new(2, 2).unwrap();
        let m = p.reshape(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(p.index_map(3), (1, 2));
        assert_eq!(p.flatten(&m).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let one = ReshapePlan::new(1, 1).unwrap();
        assert_eq!(one.reshape(&[7.0]).unwrap().data(), &[7.0]);
    }

    #[test]
    fn length_mismatch() {
        let p = ReshapePlan::new(2, 2).unwrap();
        assert!(p.reshape(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn catalog_lookup() {
        assert_eq!(catalog_target("bump", 0.5, 1.0, 2).unwrap().id, "bump");
        assert!(catalog_target("constant:2", 0.5, 1.0, 2).is_err());
        assert!(catalog_target("nope", 0.5, 1.0, 2).is_err());
        assert_eq!(catalog_target("constant:0.25", 0.5, 1.0, 2).unwrap().eval(&[0.1, 0.2]), vec![0.25]);
    }
}
