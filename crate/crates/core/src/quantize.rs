//! The quantization module: positional encoding followed by `d·L·M` ReLU
//! ramp layers.
//!
//! Layer `(i, j, k)` acts on row `i` of every column with
//! `t = x − (j + k(δ+δ*))` and adds
//! `−σ(t) + ((δ+δ*)/δ*)σ(t−δ) − (δ/δ*)σ(t−δ−δ*)`:
//! `−t` on `[0, δ]`, a ramp back to zero on `[δ, δ+δ*]`, and exactly zero
//! elsewhere. An input entry in cube level `k` of column `j` is therefore
//! moved onto its grid value `j + k(δ+δ*)` by exactly one layer.

use serde::Serialize;

use crate::expsum::ExpSum;
use crate::grid::GridSpec;
use crate::scalar::Scalar;
use crate::seq::{block_forward, BlockSpec, FeedForward, SeqMatrix};
use crate::Error;

#[derive(Clone, Debug, Serialize)]
pub struct QuantizeModule<T> {
    pub grid: GridSpec,
    pub delta: T,
    pub delta_star: T,
    /// `δ + δ*`
    pub step: T,
    /// `(δ+δ*)/δ*`
    pub up: T,
    /// `δ/δ*`
    pub down: T,
    pub positional: SeqMatrix<T>,
}

/// Builds the module with exact weights.
pub fn build_quantizer(grid: &GridSpec) -> QuantizeModule<ExpSum> {
    let delta = ExpSum::from_rational(grid.delta_q());
    let delta_star = ExpSum::from_rational(grid.delta_star_q());
    let step = &delta + &delta_star;
    QuantizeModule {
        grid: grid.clone(),
        up: &step / &delta_star,
        down: &delta / &delta_star,
        delta,
        delta_star,
        step,
        positional: grid.positional(),
    }
}

impl QuantizeModule<ExpSum> {
    pub fn cast<U: Scalar>(&self) -> QuantizeModule<U> {
        QuantizeModule {
            grid: self.grid.clone(),
            delta: U::from_exact(&self.delta),
            delta_star: U::from_exact(&self.delta_star),
            step: U::from_exact(&self.step),
            up: U::from_exact(&self.up),
            down: U::from_exact(&self.down),
            positional: self.positional.cast(),
        }
    }
}

impl<T: Scalar> QuantizeModule<T> {
    pub fn layer_count(&self) -> usize {
        self.grid.d * self.grid.l * self.grid.m
    }

    /// 0-based `(row i, column j, level k)` of layer `idx`; layers run over
    /// `i`, then `j`, then `k`.
    pub fn layer_coords(&self, idx: usize) -> (usize, usize, usize) {
        let m = self.grid.m;
        let l = self.grid.l;
        (idx / (l * m), (idx / m) % l, idx % m)
    }

    /// Grid value `(j+1) + k(δ+δ*)` that layer `(·, j, k)` snaps to.
    pub fn anchor(&self, j: usize, k: usize) -> T {
        T::from_usize(j + 1) + T::from_usize(k) * self.step.clone()
    }

    fn biases(&self, j: usize, k: usize) -> [T; 3] {
        let g = self.anchor(j, k);
        [-g.clone(), -(g.clone() + self.delta.clone()), -(g + self.step.clone())]
    }

    pub fn layer(&self, idx: usize) -> BlockSpec<T> {
        let (i, j, k) = self.layer_coords(idx);
        let d = self.grid.d;
        let mut w1 = SeqMatrix::zeros(3, d);
        let mut w2 = SeqMatrix::zeros(d, 3);
        for n in 0..3 {
            w1.set(n, i, T::one());
        }
        w2.set(i, 0, -T::one());
        w2.set(i, 1, self.up.clone());
        w2.set(i, 2, -self.down.clone());
        BlockSpec::feed_forward(FeedForward {
            w1,
            b1: self.biases(j, k).to_vec(),
            w2,
            b2: vec![T::zero(); d],
        })
    }

    /// All ramps side by side in one layer of `3·d·L·M` neurons. Valid
    /// because each entry is moved by at most one ramp.
    pub fn merged_layer(&self) -> BlockSpec<T> {
        let layers: Vec<_> = (0..self.layer_count()).map(|idx| self.layer(idx)).collect();
        crate::assemble::stack_feed_forward(&layers, self.grid.d)
    }

    /// `X + E` after checking `X ∈ [0,1]^{d×L}`.
    pub fn embed(&self, x: &SeqMatrix<f64>) -> Result<SeqMatrix<T>, Error> {
        if x.shape() != (self.grid.d, self.grid.l) {
            return Err(Error::Shape(format!("{:?} input for a {}x{} grid", x.shape(), self.grid.d, self.grid.l)));
        }
        if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("entry {v} outside [0,1]")));
        }
        x.map(|&v| T::from_f64(v)).add(&self.positional)
    }

    /// Literal evaluation through every layer.
    pub fn forward(&self, x: &SeqMatrix<f64>) -> Result<SeqMatrix<T>, Error> {
        let mut h = self.embed(x)?;
        for idx in 0..self.layer_count() {
            h = block_forward(&self.layer(idx), &h)?;
        }
        Ok(h)
    }

    /// The increment layer `(·, j, k)` adds to an entry `x`, computed in the
    /// same order as the dense layer.
    pub fn ramp(&self, x: &T, j: usize, k: usize) -> T {
        let [b0, b1, b2] = self.biases(j, k);
        let h = [(x.clone() + b0).relu(), (x.clone() + b1).relu(), (x.clone() + b2).relu()];
        let w = [-T::one(), self.up.clone(), -self.down.clone()];
        let mut acc = T::zero();
        for (wn, hn) in w.into_iter().zip(h) {
            if !hn.is_zero() {
                acc = acc + wn * hn;
            }
        }
        acc
    }

    /// The one layer that can move entry `x`, i.e. with `t ∈ (0, δ+δ*)`.
    pub fn active_layer(&self, x: &T) -> Option<(usize, usize)> {
        let xf = x.to_f64();
        let step = self.step.to_f64();
        let j0 = xf.floor() as i64 - 1;
        for j in [j0 - 1, j0, j0 + 1] {
            if j < 0 || j as usize >= self.grid.l {
                continue;
            }
            let j = j as usize;
            let k0 = ((xf - (j + 1) as f64) / step).floor() as i64;
            for k in [k0 - 1, k0, k0 + 1] {
                if k < 0 || k as usize >= self.grid.m {
                    continue;
                }
                let t = x.clone() - self.anchor(j, k as usize);
                if t > T::zero() && t < self.step {
                    return Some((j, k as usize));
                }
            }
        }
        None
    }

    /// Same map as [`QuantizeModule::forward`], applying only the layer that
    /// acts on each entry. Identical in exact arithmetic.
    pub fn forward_fast(&self, x: &SeqMatrix<f64>) -> Result<SeqMatrix<T>, Error> {
        let mut h = self.embed(x)?;
        for i in 0..self.grid.d {
            for c in 0..self.grid.l {
                let v = h.get(i, c).clone();
                if let Some((j, k)) = self.active_layer(&v) {
                    let inc = self.ramp(&v, j, k);
                    h.set(i, c, v + inc);
                }
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn single_layer_examples() {
        let grid = build_grid(0.2, 0.1, 1, 2).unwrap();
        let q = build_quantizer(&grid).cast::<f64>();
        // Layer (i=1, j=1, k=1) in 1-based indexing.
        let idx = 1;
        assert_eq!(q.layer_coords(idx), (0, 0, 1));
        let run = |v: f64| {
            let x = SeqMatrix::from_f64_rows(&[&[v, 2.0]]).unwrap();
            *block_forward(&q.layer(idx), &x).unwrap().get(0, 0)
        };
        assert!((run(1.35) - 1.30).abs() < 1e-12);
        assert!((run(1.3) - 1.3).abs() < 1e-12);
        assert!((run(1.6) - 1.6).abs() < 1e-12);
        assert!((run(1.65) - 1.65).abs() < 1e-12);
        // Ramp segment: t = 0.25 ∈ [δ, δ+δ*] gives (δ/δ*)t − δ(δ+δ*)/δ*.
        let t: f64 = 0.25;
        assert!((run(1.3 + t) - (1.3 + t + 2.0 * t - 0.6)).abs() < 1e-12);
    }

    #[test]
    fn exact_quantization_of_a_cube_sample() {
        let grid = build_grid(0.2, 0.1, 1, 2).unwrap();
        let q = build_quantizer(&grid);
        let x = SeqMatrix::from_f64_rows(&[&[0.05, 0.35]]).unwrap();
        let out = q.forward(&x).unwrap();
        let expect = grid.point_exact(grid.cube_of(&x).unwrap()).add(&grid.positional()).unwrap();
        assert_eq!(out, expect);
        assert_eq!(q.forward_fast(&x).unwrap(), expect);
    }

    #[test]
    fn out_of_domain() {
        let grid = build_grid(0.2, 0.1, 1, 2).unwrap();
        let q = build_quantizer(&grid).cast::<f64>();
        let x = SeqMatrix::from_f64_rows(&[&[1.5, 0.35]]).unwrap();
        assert!(matches!(q.forward(&x), Err(Error::Domain(_))));
    }
}
