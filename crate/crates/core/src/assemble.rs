//! The full approximator `g = flatten ∘ f_T ∘ reshape` with
//! `f_T = f_T3 ∘ f_T2 ∘ f_T1`, its Monte Carlo error, and the depth-width
//! transform that runs additive feed-forward layers side by side.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;

use crate::context::{
    build_context_layer, contextual_forward_exact, verify_contextual_ids, ContextWeights, SeparationCert,
};
use crate::expsum::ExpSum;
use crate::grid::{embed_output, quantize_target, select_parameters, GridSpec, ParamSelection, PiecewiseConstantFn};
use crate::quantize::{build_quantizer, QuantizeModule};
use crate::reshape::{HolderTarget, ReshapePlan};
use crate::scalar::Scalar;
use crate::seeds;
use crate::seq::{block_forward, BlockSpec, FeedForward, Precision, SeqMatrix};
use crate::value::{build_value_mapper, Cleanup, ValueModule};
use crate::Error;

/// Runs every layer of `layers` side by side on the same input and sums
/// their increments: neurons are concatenated and output biases added.
pub fn stack_feed_forward<T: Scalar>(layers: &[BlockSpec<T>], d: usize) -> BlockSpec<T> {
    let total: usize = layers.iter().map(|b| b.ff.neurons()).sum();
    let mut w1 = SeqMatrix::zeros(total, d);
    let mut w2 = SeqMatrix::zeros(d, total);
    let mut b1 = Vec::with_capacity(total);
    let mut b2 = vec![T::zero(); d];
    let mut off = 0;
    for b in layers {
        for n in 0..b.ff.neurons() {
            for i in 0..d {
                w1.set(off + n, i, b.ff.w1.get(n, i).clone());
                w2.set(i, off + n, b.ff.w2.get(i, n).clone());
            }
            b1.push(b.ff.b1[n].clone());
        }
        for (acc, v) in b2.iter_mut().zip(&b.ff.b2) {
            *acc = acc.clone() + v.clone();
        }
        off += b.ff.neurons();
    }
    BlockSpec::feed_forward(FeedForward { w1, b1, w2, b2 })
}

/// Which part of the network a block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum BlockRole {
    Quantizer,
    Contextual,
    ValueLabel,
    ValueAnchor,
    Cleanup,
}

/// The approximator network. Blocks are generated on demand from compact
/// module descriptions; [`TransformerNetwork::block`] materializes one.
#[derive(Clone, Debug)]
pub struct TransformerNetwork<T> {
    pub plan: ReshapePlan,
    pub grid: GridSpec,
    pub quantizer: QuantizeModule<T>,
    pub context: ContextWeights,
    pub value: ValueModule,
    pub cleanup: Cleanup,
}

impl TransformerNetwork<ExpSum> {
    pub fn cast<U: Scalar>(&self) -> TransformerNetwork<U> {
        TransformerNetwork {
            plan: self.plan,
            grid: self.grid.clone(),
            quantizer: self.quantizer.cast(),
            context: self.context.clone(),
            value: self.value.clone(),
            cleanup: self.cleanup,
        }
    }

    /// `f_T3 ∘ f_T2` applied to a quantizer output, visiting only value
    /// subunits that can act.
    pub fn forward_quantized(&self, h: &SeqMatrix<ExpSum>) -> Result<SeqMatrix<ExpSum>, Error> {
        let c = contextual_forward_exact(&self.context, h)?;
        self.value.forward(&c, self.cleanup)
    }

    /// `f_T(X)`, exact. Equal to [`TransformerNetwork::forward_literal`].
    pub fn forward(&self, x: &SeqMatrix<f64>) -> Result<SeqMatrix<ExpSum>, Error> {
        let h = self.quantizer.forward_fast(x)?;
        self.forward_quantized(&h)
    }

    /// `g(x) = flatten(f_T(reshape(x)))` rounded to double.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, Error> {
        let out = self.forward(&self.plan.reshape(x)?)?;
        Ok(self.plan.flatten(&out)?.iter().map(ExpSum::to_f64).collect())
    }
}

impl<T: Scalar> TransformerNetwork<T> {
    /// `D = d0·M + 2·L·M^{d0} + 2`.
    pub fn block_count(&self) -> usize {
        self.quantizer.layer_count() + 1 + self.value.layer_count()
    }

    pub fn role(&self, n: usize) -> BlockRole {
        let q = self.quantizer.layer_count();
        let last = self.block_count() - 1;
        match n {
            n if n < q => BlockRole::Quantizer,
            n if n == q => BlockRole::Contextual,
            n if n == last => BlockRole::Cleanup,
            n if (n - q - 1) % 2 == 0 => BlockRole::ValueLabel,
            _ => BlockRole::ValueAnchor,
        }
    }

    pub fn block(&self, n: usize) -> BlockSpec<T> {
        let q = self.quantizer.layer_count();
        if n < q {
            self.quantizer.layer(n)
        } else if n == q {
            self.context.block().map(T::from_exact)
        } else {
            self.value.block(n - q - 1, self.cleanup).map(T::from_exact)
        }
    }

    /// Widest feed-forward layer, in neurons.
    pub fn width(&self) -> usize {
        let d = self.grid.d;
        let value = if self.value.subunit_count() > 0 { (4 * d).max(2 + 2 * d) } else { 0 };
        let cleanup = if self.cleanup == Cleanup::Gated { 2 * d } else { 0 };
        3.max(value).max(cleanup)
    }

    /// Positional encoding followed by every block in order.
    pub fn forward_literal(&self, x: &SeqMatrix<f64>) -> Result<SeqMatrix<T>, Error> {
        let mut h = self.quantizer.embed(x)?;
        for n in 0..self.block_count() {
            h = block_forward(&self.block(n), &h)?;
        }
        Ok(h)
    }
}

/// Network description and constants of a build.
#[derive(Clone, Debug, Serialize)]
pub struct BuildReport {
    pub target: String,
    pub d: usize,
    pub l: usize,
    pub d0: usize,
    #[serde(rename = "D")]
    pub blocks: usize,
    /// `d0·M + 2·L·M^{d0} + 2`, in floating point.
    pub blocks_formula: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub delta: f64,
    pub delta_star: f64,
    pub selection: Option<ParamSelection>,
    pub cert: SeparationCert,
    pub gamma_emp: String,
    pub gamma1: String,
    pub gamma2: String,
    pub label: f64,
    pub shift: f64,
    pub cleanup: Cleanup,
}

/// A built network with the piecewise-constant function it reproduces.
#[derive(Clone, Debug)]
pub struct Approximator {
    pub network: TransformerNetwork<ExpSum>,
    pub piecewise: PiecewiseConstantFn,
    pub report: BuildReport,
}

/// `d0·M + 2·L·M^{d0} + 2`.
pub fn block_count_formula(d: usize, l: usize, m: usize) -> f64 {
    let d0 = (d * l) as f64;
    d0 * m as f64 + 2.0 * l as f64 * (m as f64).powf(d0) + 2.0
}

/// Builds the ε-approximator of `target`, choosing `(δ, δ*)` from `ε`.
pub fn build_approximator(
    target: &HolderTarget,
    eps: f64,
    alpha: f64,
    k: f64,
    d: usize,
    l: usize,
    seed: u64,
) -> Result<Approximator, Error> {
    let sel = select_parameters(eps, alpha, k, d, l).map_err(Error::at("select_parameters"))?;
    let grid = sel.grid(d, l).map_err(Error::at("build_grid"))?;
    build_on_grid(target, &grid, seed, Some(sel))
}

/// Builds the network for a given grid.
pub fn build_on_grid(
    target: &HolderTarget,
    grid: &GridSpec,
    seed: u64,
    selection: Option<ParamSelection>,
) -> Result<Approximator, Error> {
    let plan = ReshapePlan::new(grid.d, grid.l).map_err(Error::at("build_grid"))?;
    if grid.l < 2 {
        return Err(Error::at("build_grid")(Error::Config("need L >= 2".into())));
    }
    let piecewise = quantize_target(target, grid, &plan).map_err(Error::at("quantize_target"))?;
    build_for_table(&target.id, target.k, piecewise, seed, selection)
}

/// Builds the network reproducing an arbitrary table `Y_G` bounded by `k`.
pub fn build_for_table(
    name: &str,
    k: f64,
    piecewise: PiecewiseConstantFn,
    seed: u64,
    selection: Option<ParamSelection>,
) -> Result<Approximator, Error> {
    let grid = piecewise.grid.clone();
    let quantizer = build_quantizer(&grid);
    let (weights, cert) = build_context_layer(&grid, seed).map_err(Error::at("build_context_layer"))?;
    let (cert, ids) = verify_contextual_ids(&weights, &grid, &cert, Precision::extended(64)?)
        .map_err(Error::at("verify_contextual_ids"))?;
    let value = build_value_mapper(&ids, &piecewise, &cert, k).map_err(Error::at("build_value_mapper"))?;
    let network = TransformerNetwork {
        plan: piecewise.plan,
        grid: grid.clone(),
        quantizer,
        context: weights,
        value,
        cleanup: Cleanup::Gated,
    };
    let p = &network.value.params;
    let report = BuildReport {
        target: name.to_string(),
        d: grid.d,
        l: grid.l,
        d0: grid.d0,
        blocks: network.block_count(),
        blocks_formula: block_count_formula(grid.d, grid.l, grid.m),
        m: grid.m,
        delta: grid.delta,
        delta_star: grid.delta_star,
        selection,
        gamma_emp: p.gamma.to_sci_string(),
        gamma1: p.gamma1.to_sci_string(),
        gamma2: p.gamma2.to_sci_string(),
        label: p.label.to_f64(),
        shift: p.shift.to_f64(),
        cert,
        cleanup: network.cleanup,
    };
    Ok(Approximator { network, piecewise, report })
}

/// Monte Carlo sample counts per stratum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SampleBudget {
    pub cube: usize,
    pub gap: usize,
}

impl SampleBudget {
    /// Four fifths on the cubes, the rest on the gaps.
    pub fn split(total: usize) -> Self {
        let cube = (total * 4).div_ceil(5);
        SampleBudget { cube, gap: total - cube }
    }
}

/// Stratified estimate of `‖f − g‖_2` on `[0,1]^{d0}`.
#[derive(Clone, Debug, Serialize)]
pub struct ErrorEstimate {
    /// `‖f − g‖` restricted to the union of cubes.
    pub err_cubes: f64,
    pub err_cubes_ci: (f64, f64),
    /// `‖f − g‖` restricted to the gaps.
    pub err_gaps: f64,
    pub err_total: f64,
    /// 95% interval for `err_total`.
    pub ci: (f64, f64),
    pub union_measure: f64,
    pub cube_samples: usize,
    pub gap_samples: usize,
    /// `√d0 K (√d0 δ)^α`.
    pub cube_bound: f64,
    /// Largest pointwise error seen on the cubes.
    pub max_cube_error: f64,
}

impl ErrorEstimate {
    pub fn cube_ci_width(&self) -> f64 {
        self.err_cubes_ci.1 - self.err_cubes_ci.0
    }
}

const Z95: f64 = 1.959_963_984_540_054;

struct Moments {
    mean: f64,
    var_of_mean: f64,
    max_abs: f64,
}

fn moments(sq: &[f64]) -> Moments {
    let n = sq.len();
    if n == 0 {
        return Moments { mean: 0.0, var_of_mean: 0.0, max_abs: 0.0 };
    }
    let mean = sq.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let max_abs = sq.iter().cloned().fold(0.0, f64::max).sqrt();
    Moments { mean, var_of_mean: var / n as f64, max_abs }
}

fn sqrt_interval(mean: f64, var_of_mean: f64) -> (f64, f64) {
    let h = Z95 * var_of_mean.sqrt();
    ((mean - h).max(0.0).sqrt(), (mean + h).sqrt())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Stratified Monte Carlo of `‖reference − candidate‖_2`. Sample `i` of a
/// stratum uses its own derived stream, so results do not depend on the
/// thread count.
pub fn stratified_l2(
    grid: &GridSpec,
    plan: &ReshapePlan,
    reference: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    candidate: &(dyn Fn(&SeqMatrix<f64>) -> Result<Vec<f64>, Error> + Sync),
    budget: SampleBudget,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let run = |label: &'static str, n: usize, cube: bool| -> Result<Vec<f64>, Error> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = seeds::stream(seed, label, i as u64);
                let x = if cube { grid.sample_in_cubes(&mut rng).1 } else { grid.sample_in_gaps(&mut rng) };
                let flat = plan.flatten(&x)?;
                Ok(dist2(&reference(&flat), &candidate(&x)?))
            })
            .collect()
    };
    let cube = run("error-cubes", budget.cube, true)?;
    let gap = if grid.complement_measure() > 0.0 { run("error-gaps", budget.gap, false)? } else { Vec::new() };
    Ok((cube, gap))
}

fn summarize(grid: &GridSpec, cube: &[f64], gap: &[f64], cube_bound: f64) -> ErrorEstimate {
    let wc = grid.union_measure();
    let wg = 1.0 - wc;
    let (mc, mg) = (moments(cube), moments(gap));
    let total_mean = wc * mc.mean + wg * mg.mean;
    let total_var = wc * wc * mc.var_of_mean + wg * wg * mg.var_of_mean;
    ErrorEstimate {
        err_cubes: (wc * mc.mean).sqrt(),
        err_cubes_ci: sqrt_interval(wc * mc.mean, wc * wc * mc.var_of_mean),
        err_gaps: (wg * mg.mean).sqrt(),
        err_total: total_mean.sqrt(),
        ci: sqrt_interval(total_mean, total_var),
        union_measure: wc,
        cube_samples: cube.len(),
        gap_samples: gap.len(),
        cube_bound,
        max_cube_error: mc.max_abs,
    }
}

fn cube_bound(grid: &GridSpec, target: &HolderTarget) -> f64 {
    let n = grid.d0 as f64;
    n.sqrt() * target.k * (n.sqrt() * grid.delta).powf(target.alpha)
}

/// Estimates `‖f − g‖_2` for the built network. Outputs of the network are
/// cached per quantizer output, so each grid point's contextual and value
/// passes run once.
pub fn estimate_l2_error(
    approx: &Approximator,
    target: &HolderTarget,
    budget: SampleBudget,
    seed: u64,
) -> Result<ErrorEstimate, Error> {
    let net = &approx.network;
    let plan = net.plan;
    let cache: Mutex<HashMap<Vec<ExpSum>, Vec<f64>>> = Mutex::new(HashMap::new());
    let reference = |x: &[f64]| {
        let y = target.eval(x);
        let m = embed_output(&plan, &y).expect("output fits");
        plan.flatten(&m).expect("shape")
    };
    let candidate = |x: &SeqMatrix<f64>| -> Result<Vec<f64>, Error> {
        let h = net.quantizer.forward_fast(x)?;
        let key = h.data().to_vec();
        if let Some(v) = cache.lock().expect("cache").get(&key) {
            return Ok(v.clone());
        }
        let out = net.forward_quantized(&h)?;
        let flat: Vec<f64> = plan.flatten(&out)?.iter().map(ExpSum::to_f64).collect();
        cache.lock().expect("cache").insert(key, flat.clone());
        Ok(flat)
    };
    let (cube, gap) = stratified_l2(&net.grid, &plan, &reference, &candidate, budget, seed)?;
    Ok(summarize(&net.grid, &cube, &gap, cube_bound(&net.grid, target)))
}

/// Error of the piecewise-constant function `f_δ` itself against `target`.
pub fn estimate_piecewise_error(
    piecewise: &PiecewiseConstantFn,
    target: &HolderTarget,
    budget: SampleBudget,
    seed: u64,
) -> Result<ErrorEstimate, Error> {
    let plan = piecewise.plan;
    let reference = |x: &[f64]| {
        let m = embed_output(&plan, &target.eval(x)).expect("output fits");
        plan.flatten(&m).expect("shape")
    };
    let candidate = |x: &SeqMatrix<f64>| plan.flatten(&piecewise.eval(x));
    let (cube, gap) = stratified_l2(&piecewise.grid, &plan, &reference, &candidate, budget, seed)?;
    Ok(summarize(&piecewise.grid, &cube, &gap, cube_bound(&piecewise.grid, target)))
}

/// One step of a widened network.
#[derive(Clone, Debug)]
pub enum WideStage {
    /// `X ↦ [X; X; …; X]` with `copies` copies. Copy 0 carries `X` unchanged.
    Replicate { copies: usize },
    /// `X̃ ↦ Σ_{j≥1} X̃_j − (copies − 2)·X̃_0`: the increments of every
    /// channel added to one copy of `X`.
    Aggregate { copies: usize },
    Block(BlockSpec<ExpSum>),
}

/// A network whose additive feed-forward segments run `n` original layers
/// per layer, in parallel channels with block-diagonal weights.
#[derive(Clone, Debug)]
pub struct WideNetwork {
    pub base: TransformerNetwork<ExpSum>,
    /// Replication factor `n`.
    pub n: usize,
}

/// Block-diagonal layer running `layers[j]` in channel `j + 1` of
/// `channels` channels of width `d`. Channel 0 and any unused channels get
/// no neurons.
pub fn block_diagonal(layers: &[BlockSpec<ExpSum>], d: usize, channels: usize) -> BlockSpec<ExpSum> {
    let total: usize = layers.iter().map(|b| b.ff.neurons()).sum();
    let width = d * channels;
    let mut w1 = SeqMatrix::zeros(total, width);
    let mut w2 = SeqMatrix::zeros(width, total);
    let mut b1 = Vec::with_capacity(total);
    let mut b2 = vec![ExpSum::default(); width];
    let mut off = 0;
    for (j, b) in layers.iter().enumerate() {
        let base = (j + 1) * d;
        for nrn in 0..b.ff.neurons() {
            for i in 0..d {
                w1.set(off + nrn, base + i, b.ff.w1.get(nrn, i).clone());
                w2.set(base + i, off + nrn, b.ff.w2.get(i, nrn).clone());
            }
            b1.push(b.ff.b1[nrn].clone());
        }
        for i in 0..d {
            b2[base + i] = b.ff.b2[i].clone();
        }
        off += b.ff.neurons();
    }
    BlockSpec::feed_forward(FeedForward { w1, b1, w2, b2 })
}

impl WideNetwork {
    fn q_layers(&self) -> usize {
        self.base.quantizer.layer_count()
    }

    fn value_units(&self) -> usize {
        self.base.value.subunit_count()
    }

    /// Blocks plus embedding stages.
    pub fn depth(&self) -> usize {
        wide_depth(self.q_layers(), self.value_units(), self.n, self.base.block_count())
    }

    /// Widest layer, in neurons.
    pub fn width(&self) -> usize {
        let d = self.base.grid.d;
        let q = 3 * self.n.min(self.q_layers());
        let v = (4 * d).max(2 + 2 * d) * self.n.min(self.value_units());
        let cleanup = if self.base.cleanup == Cleanup::Gated { 2 * d } else { 0 };
        q.max(v).max(cleanup)
    }

    pub fn stages(&self) -> Vec<WideStage> {
        let net = &self.base;
        let (d, n) = (net.grid.d, self.n);
        if n == 1 {
            return (0..net.block_count()).map(|b| WideStage::Block(net.block(b))).collect();
        }
        let copies = n + 1;
        let mut out = vec![WideStage::Replicate { copies }];
        let q: Vec<_> = (0..self.q_layers()).map(|i| net.quantizer.layer(i)).collect();
        for chunk in q.chunks(n) {
            out.push(WideStage::Block(block_diagonal(chunk, d, copies)));
        }
        out.push(WideStage::Aggregate { copies });
        out.push(WideStage::Block(net.context.block()));
        out.push(WideStage::Replicate { copies });
        let units: Vec<usize> = (0..self.value_units()).collect();
        for chunk in units.chunks(n) {
            let label: Vec<_> = chunk.iter().map(|&u| net.value.label_block(u)).collect();
            let anchor: Vec<_> = chunk.iter().map(|&u| net.value.anchor_block(u)).collect();
            out.push(WideStage::Block(block_diagonal(&label, d, copies)));
            out.push(WideStage::Block(block_diagonal(&anchor, d, copies)));
        }
        out.push(WideStage::Aggregate { copies });
        out.push(WideStage::Block(net.value.cleanup_block(net.cleanup)));
        out
    }

    pub fn forward(&self, x: &SeqMatrix<f64>) -> Result<SeqMatrix<ExpSum>, Error> {
        let d = self.base.grid.d;
        let mut h = self.base.quantizer.embed(x)?;
        for stage in self.stages() {
            h = match stage {
                WideStage::Block(b) => block_forward(&b, &h)?,
                WideStage::Replicate { copies } => {
                    let mut out = SeqMatrix::zeros(d * copies, h.cols());
                    for c in 0..copies {
                        for i in 0..d {
                            for j in 0..h.cols() {
                                out.set(c * d + i, j, h.get(i, j).clone());
                            }
                        }
                    }
                    out
                }
                WideStage::Aggregate { copies } => {
                    let mut out = SeqMatrix::zeros(d, h.cols());
                    let carried = ExpSum::from_int(copies as i64 - 2);
                    for i in 0..d {
                        for j in 0..h.cols() {
                            let mut acc = -&(&carried * h.get(i, j));
                            for c in 1..copies {
                                acc = &acc + h.get(c * d + i, j);
                            }
                            out.set(i, j, acc);
                        }
                    }
                    out
                }
            };
        }
        Ok(h)
    }
}

/// Parallelizes the feed-forward segments with replication factor `n`.
pub fn widen_by(net: &TransformerNetwork<ExpSum>, n: usize) -> Result<WideNetwork, Error> {
    if n == 0 {
        return Err(Error::Config("replication factor must be positive".into()));
    }
    Ok(WideNetwork { base: net.clone(), n })
}

/// Depth of the widened network for `q` quantizer layers and `u` value
/// subunits; `base` is the unwidened block count.
fn wide_depth(q: usize, u: usize, n: usize, base: usize) -> usize {
    if n == 1 {
        base
    } else {
        q.div_ceil(n) + 2 * u.div_ceil(n) + 6
    }
}

/// Smallest replication factor whose depth is at most `target_depth`.
pub fn widen(net: &TransformerNetwork<ExpSum>, target_depth: usize) -> Result<WideNetwork, Error> {
    let (q, u, base) = (net.quantizer.layer_count(), net.value.subunit_count(), net.block_count());
    let max_n = q.max(u).max(2);
    let floor = wide_depth(q, u, max_n, base).min(base);
    if target_depth < floor {
        return Err(Error::Config(format!("depth {target_depth} below the structural minimum {floor}")));
    }
    if base <= target_depth {
        return widen_by(net, 1);
    }
    // Depth is non-increasing in n for n >= 2.
    let (mut lo, mut hi) = (2, max_n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if wide_depth(q, u, mid, base) <= target_depth {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    widen_by(net, lo)
}
