//! Single-head softmax attention that assigns every (sequence, column) of
//! the positional grid a distinct contextual id.
//!
//! With a unit direction `v`, `s = v^T X` and `a = β/(4 r_max)`, the layer is
//!
//! ```text
//! ID_k = X_k + a e_1 Σ_l s_l softmax_l(c s_l s_k)
//! ```
//!
//! i.e. `W_K = c e_1 v^T`, `W_Q = W_V = e_1 v^T`, `W_O = a e_1 e_1^T`. The
//! scale `c` makes the softmax nearly one-hot, so ids sharing a token differ
//! only by exponentially small amounts. They are computed and compared
//! exactly with [`ExpSum`].

use std::collections::HashMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand_distr::{Distribution, StandardNormal};
use serde::{Serialize, Serializer};

use crate::expsum::{rational_from_f64, ExpSum};
use crate::grid::GridSpec;
use crate::scalar::Scalar;
use crate::seeds;
use crate::seq::{attention_forward, softmax, BlockSpec, Head, Precision, PrecisionMode, SeqMatrix};
use crate::Error;

/// Draw limit for the direction search.
pub const MAX_DIRECTION_DRAWS: usize = 1_000_000;
/// Largest id count for which cross-token distances are computed pairwise;
/// above it they are bounded through token distances and head norms.
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContextWeights {
    pub d: usize,
    /// Unit direction, exact.
    #[serde(serialize_with = "ser_rationals")]
    pub v: Vec<BigRational>,
    /// `u^T u'`: `u = c e_1`, `u' = u'' = e_1`.
    #[serde(serialize_with = "ser_rational")]
    pub c: BigRational,
    /// Only nonzero entry of `W_O`, `β/(4 r_max)`.
    #[serde(serialize_with = "ser_rational")]
    pub out_scale: BigRational,
}

fn ser_rational<S: Serializer>(q: &BigRational, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&q.to_string())
}

fn ser_rationals<S: Serializer>(q: &[BigRational], s: S) -> Result<S::Ok, S::Error> {
    q.iter().map(|x| x.to_string()).collect::<Vec<_>>().serialize(s)
}

fn ser_opt_sci<S: Serializer>(x: &Option<ExpSum>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(v) => s.serialize_str(&v.to_sci_string()),
        None => s.serialize_none(),
    }
}

impl ContextWeights {
    /// Weights whose head output is identically zero.
    pub fn zero(d: usize) -> Self {
        let mut v = vec![BigRational::zero(); d];
        v[0] = BigRational::one();
        ContextWeights { d, v, c: BigRational::zero(), out_scale: BigRational::zero() }
    }

    pub fn head(&self) -> Head<ExpSum> {
        let d = self.d;
        let row = |scale: &BigRational| {
            let mut m = SeqMatrix::zeros(d, d);
            for (j, vj) in self.v.iter().enumerate() {
                m.set(0, j, ExpSum::from_rational(scale * vj));
            }
            m
        };
        let mut w_o = SeqMatrix::zeros(d, d);
        w_o.set(0, 0, ExpSum::from_rational(self.out_scale.clone()));
        Head { w_k: row(&self.c), w_q: row(&BigRational::one()), w_v: row(&BigRational::one()), w_o }
    }

    pub fn block(&self) -> BlockSpec<ExpSum> {
        BlockSpec::attention(self.d, vec![self.head()])
    }

    /// `v^T x` for an exact column.
    pub fn project(&self, col: &[ExpSum]) -> ExpSum {
        self.v
            .iter()
            .zip(col)
            .fold(ExpSum::zero(), |acc, (vj, x)| &acc + &(x * &ExpSum::from_rational(vj.clone())))
    }
}

/// Constants and measured quantities of the contextual mapping.
#[derive(Clone, Debug, Serialize)]
pub struct SeparationCert {
    pub r_min: f64,
    pub r_max: f64,
    pub beta: f64,
    /// `r_max + β/4`
    pub r: f64,
    /// `2 ln L + 3`
    pub delta0: f64,
    pub kappa: f64,
    /// `ln δ1 = 2 ln ln L − 2κ`
    pub log_delta1: f64,
    /// `ln γ` from the general constants `(r_min, r_max, β, |V|)`.
    pub log_gamma_theory: f64,
    /// `ln γ` from the grid-specialized closed form.
    pub log_gamma_closed_form: f64,
    /// `ln γ1`, `ln γ2` of the textbook value mapping (δ² and δ*² numerators).
    pub log_gamma1_textbook: f64,
    pub log_gamma2_textbook: f64,
    /// `|V| = L M^{d0}` as used in the constants.
    pub vocab_size: f64,
    /// Distinct tokens actually present, `L M^d`.
    pub distinct_tokens: usize,
    /// Measured minimum pairwise id distance (exact lower bound).
    #[serde(serialize_with = "ser_opt_sci")]
    pub gamma_emp: Option<ExpSum>,
    pub log_gamma_emp: Option<f64>,
    /// Minimum id distance over pairs with different tokens.
    pub min_cross_token_distance: Option<f64>,
    /// Minimum distance between distinct tokens, when few enough to enumerate.
    pub min_token_distance: Option<f64>,
    pub max_id_norm: Option<f64>,
    pub min_id_norm: Option<f64>,
    pub max_head_norm: Option<f64>,
    pub ids_checked: usize,
    pub direction_draws: usize,
}

impl SeparationCert {
    pub fn gamma_emp_positive(&self) -> bool {
        self.gamma_emp.as_ref().is_some_and(|g| g.signum_i8() > 0)
    }
}

/// Distinct tokens `(level + j + 1)_{i}` of column `j`, exact.
pub fn grid_tokens(grid: &GridSpec) -> Result<Vec<(usize, Vec<BigRational>)>, Error> {
    let per_col = grid
        .m
        .checked_pow(grid.d as u32)
        .filter(|n| *n <= 1 << 20)
        .ok_or_else(|| Error::Config("too many distinct tokens to enumerate".into()))?;
    let mut out = Vec::with_capacity(per_col * grid.l);
    for j in 0..grid.l {
        for t in 0..per_col {
            let mut rest = t;
            let mut tok = vec![BigRational::zero(); grid.d];
            for slot in tok.iter_mut().rev() {
                *slot = grid.level_q(rest % grid.m) + BigRational::from_integer(BigInt::from(j + 1));
                rest /= grid.m;
            }
            out.push((j, tok));
        }
    }
    Ok(out)
}

fn sandwich_holds(v: &[BigRational], vocab: &[Vec<BigRational>], factor: &BigRational) -> bool {
    // (v^T Δ)^2 (|V|+1)^4 d ≥ ‖Δ‖^2 over all pairs of V ∪ {0}
    let zero = vec![BigRational::zero(); v.len()];
    let with_zero: Vec<&Vec<BigRational>> = vocab.iter().chain(std::iter::once(&zero)).collect();
    for (n, a) in with_zero.iter().enumerate() {
        for b in &with_zero[n + 1..] {
            let diff: Vec<BigRational> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
            let dot: BigRational = v.iter().zip(&diff).map(|(x, y)| x * y).sum();
            let norm2: BigRational = diff.iter().map(|x| x * x).sum();
            if &dot * &dot * factor < norm2 {
                return false;
            }
        }
    }
    true
}

/// A unit vector with exact rational entries near the given direction,
/// via inverse stereographic projection.
fn rational_unit(u: &[f64]) -> Option<Vec<BigRational>> {
    let d = u.len();
    let denom = 1.0 - u[d - 1];
    if denom.abs() < 1e-9 {
        return None;
    }
    let y: Vec<BigRational> = u[..d - 1].iter().map(|x| rational_from_f64(x / denom)).collect();
    let s: BigRational = y.iter().map(|x| x * x).sum();
    let one = BigRational::one();
    let two = BigRational::from_integer(2.into());
    let mut v: Vec<BigRational> = y.iter().map(|x| &two * x / (&s + &one)).collect();
    v.push((&s - &one) / (&s + &one));
    Some(v)
}

/// Builds the contextual attention weights for `grid` and the constant part
/// of the certificate.
pub fn build_context_layer(grid: &GridSpec, seed: u64) -> Result<(ContextWeights, SeparationCert), Error> {
    let (d, l) = (grid.d, grid.l);
    if l < 2 {
        return Err(Error::Config("contextual mapping needs L >= 2".into()));
    }
    let vocab_size = l as f64 * (grid.m as f64).powi(grid.d0 as i32);
    let tokens = grid_tokens(grid)?;
    let vocab: Vec<Vec<BigRational>> = tokens.iter().map(|(_, t)| t.clone()).collect();

    let (v, draws) = if d == 1 {
        (vec![BigRational::one()], 1)
    } else {
        let vocab_plus_one: BigInt = BigInt::from(l) * BigInt::from(grid.m).pow(grid.d0 as u32) + 1;
        let factor = BigRational::from_integer(vocab_plus_one.pow(4) * BigInt::from(d));
        let mut rng = seeds::stream(seed, "context-direction", 0);
        let mut found = None;
        for draw in 1..=MAX_DIRECTION_DRAWS {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let u: Vec<f64> = g.iter().map(|x| x / norm).collect();
            let Some(v) = rational_unit(&u) else { continue };
            if sandwich_holds(&v, &vocab, &factor) {
                found = Some((v, draw));
                break;
            }
        }
        found.ok_or(Error::DirectionNotFound(MAX_DIRECTION_DRAWS))?
    };

    let df = d as f64;
    let step = grid.step();
    let ln_l = (l as f64).ln();
    let delta0 = 2.0 * ln_l + 3.0;
    let r_min = df.sqrt();
    let r_max = df.sqrt() * (l as f64 + 1.0);
    let beta = df.sqrt() * step;
    let ln_v4 = 4.0 * (vocab_size + 1.0).ln();
    let c = (ln_v4 + (df * delta0 / (beta * r_min)).ln()).exp();
    let kappa = c * r_max * r_max;
    let log_delta1 = 2.0 * ln_l.ln() - 2.0 * kappa;
    let log_gamma_theory = r_min.ln() + 2.0 * (beta * ln_l).ln()
        - (4.0 * df * r_max * r_max * delta0).ln()
        - ln_v4
        - 2.0 * kappa;
    let closed = |num: f64| {
        (num * num * ln_l * ln_l).ln()
            - (4.0 * df.sqrt() * delta0 * (l as f64 + 1.0).powi(2)).ln()
            - ln_v4
            - (ln_v4.exp() * 2.0 * df * delta0 * (l as f64 + 1.0).powi(2) / step)
    };
    let out_scale = grid.step_q() / BigRational::from_integer(BigInt::from(4 * (l + 1)));
    let weights = ContextWeights { d, v, c: rational_from_f64(c), out_scale };
    let cert = SeparationCert {
        r_min,
        r_max,
        beta,
        r: r_max + beta / 4.0,
        delta0,
        kappa,
        log_delta1,
        log_gamma_theory,
        log_gamma_closed_form: closed(step),
        log_gamma1_textbook: closed(grid.delta),
        log_gamma2_textbook: closed(grid.delta_star),
        vocab_size,
        distinct_tokens: tokens.len(),
        gamma_emp: None,
        log_gamma_emp: None,
        min_cross_token_distance: None,
        min_token_distance: None,
        max_id_norm: None,
        min_id_norm: None,
        max_head_norm: None,
        ids_checked: 0,
        direction_draws: draws,
    };
    Ok((weights, cert))
}

/// Exact forward pass of the contextual layer.
pub fn contextual_forward_exact(weights: &ContextWeights, x: &SeqMatrix<ExpSum>) -> Result<SeqMatrix<ExpSum>, Error> {
    attention_forward(&[weights.head()], x)
}

/// Forward pass at the requested precision, returned in double precision.
pub fn contextual_forward(
    weights: &ContextWeights,
    x: &SeqMatrix<f64>,
    precision: Precision,
) -> Result<SeqMatrix<f64>, Error> {
    precision.validate()?;
    if !x.all_finite() {
        return Err(Error::NonFinite);
    }
    match (precision.mode, precision.log_space) {
        (PrecisionMode::Extended { .. }, _) => {
            let exact = x.map(|&v| ExpSum::from_f64(v));
            Ok(contextual_forward_exact(weights, &exact)?.to_f64())
        }
        (PrecisionMode::Standard, log_space) => {
            let v: Vec<f64> = weights.v.iter().map(crate::expsum::ratio_to_f64).collect();
            let c = crate::expsum::ratio_to_f64(&weights.c);
            let a = crate::expsum::ratio_to_f64(&weights.out_scale);
            let s: Vec<f64> =
                (0..x.cols()).map(|j| x.column(j).iter().zip(&v).map(|(p, q)| p * q).sum()).collect();
            let mut out = x.clone();
            for k in 0..x.cols() {
                let scores: Vec<f64> = s.iter().map(|sl| c * sl * s[k]).collect();
                let probs = if log_space {
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + scores.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                    scores.iter().map(|z| (z - lse).exp()).collect::<Vec<_>>()
                } else {
                    if let Some(z) = scores.iter().find(|z| z.abs() > 700.0) {
                        return Err(Error::Precision(format!("attention score {z:e} overflows double")));
                    }
                    softmax(&scores)
                };
                let head: f64 = s.iter().zip(&probs).map(|(sl, p)| sl * p).sum();
                out.set(0, k, x.get(0, k) + a * head);
            }
            Ok(out)
        }
    }
}

/// `a^T softmax(a)`.
pub fn boltz<T: Scalar>(a: &[T]) -> T {
    softmax(a).into_iter().zip(a).fold(T::zero(), |acc, (p, x)| acc + p * x.clone())
}

/// Contextual ids of every grid sequence, indexed like the grid.
#[derive(Clone, Debug)]
pub struct ContextualIds {
    pub outputs: Vec<SeqMatrix<ExpSum>>,
}

impl ContextualIds {
    pub fn id(&self, grid_index: usize, column: usize) -> Vec<ExpSum> {
        self.outputs[grid_index].column(column)
    }
}

fn norm_f64(col: &[ExpSum]) -> f64 {
    col.iter().map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt()
}

fn dist_f64(a: &[ExpSum], b: &[ExpSum]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).to_f64().powi(2)).sum::<f64>().sqrt()
}

/// Computes every contextual id of the grid, checks injectivity, the norm
/// bound `‖ID‖ ≤ r` and the head bound `‖ID − X‖ ≤ β/4`, and records the
/// measured separation.
pub fn verify_contextual_ids(
    weights: &ContextWeights,
    grid: &GridSpec,
    cert: &SeparationCert,
    precision: Precision,
) -> Result<(SeparationCert, ContextualIds), Error> {
    precision.validate()?;
    let count = grid
        .point_count()
        .ok_or_else(|| Error::Config("grid too large to enumerate".into()))?;
    if !precision.is_extended() {
        // Double precision cannot separate the ids; report the first failure.
        let mut seen: HashMap<Vec<u64>, (usize, usize)> = HashMap::new();
        for idx in 0..count {
            let x = grid.point(idx).add(&grid.positional())?;
            let out = contextual_forward(weights, &x, precision)?;
            for k in 0..grid.l {
                let key: Vec<u64> = out.column(k).iter().map(|v| v.to_bits()).collect();
                if let Some(prev) = seen.insert(key, (idx, k)) {
                    return Err(Error::Collision(format!(
                        "grid points {} and {idx} share id in double precision (columns {} and {k})",
                        prev.0, prev.1
                    )));
                }
            }
        }
        return Err(Error::Precision("double precision ids carry no exact separation certificate".into()));
    }

    let pe = grid.positional::<ExpSum>();
    let slack = 1e-12;
    let mut outputs = Vec::with_capacity(count);
    let (mut max_norm, mut min_norm, mut max_head) = (0.0f64, f64::INFINITY, 0.0f64);
    // token key -> (grid index, column)
    let mut groups: HashMap<Vec<BigRational>, Vec<(usize, usize)>> = HashMap::new();
    let mut head_by_token: HashMap<Vec<BigRational>, f64> = HashMap::new();
    for idx in 0..count {
        let x = grid.point_exact(idx).add(&pe)?;
        let out = contextual_forward_exact(weights, &x)?;
        for k in 0..grid.l {
            let id = out.column(k);
            let tok = x.column(k);
            let n = norm_f64(&id);
            let h = dist_f64(&id, &tok);
            max_norm = max_norm.max(n);
            min_norm = min_norm.min(n);
            max_head = max_head.max(h);
            if n > cert.r * (1.0 + slack) {
                return Err(Error::Collision(format!("id norm {n} exceeds r = {}", cert.r)));
            }
            if h > cert.beta / 4.0 * (1.0 + slack) {
                return Err(Error::Collision(format!("head norm {h} exceeds β/4 = {}", cert.beta / 4.0)));
            }
            let key: Vec<BigRational> = tok.iter().map(ExpSum::main_part).collect();
            let hm = head_by_token.entry(key.clone()).or_insert(0.0);
            *hm = hm.max(h);
            groups.entry(key).or_default().push((idx, k));
        }
        outputs.push(out);
    }
    let ids = ContextualIds { outputs };

    // Ids sharing a token differ only in the first row.
    let mut same_min: Option<ExpSum> = None;
    for (tok, members) in &groups {
        let mut firsts = Vec::with_capacity(members.len());
        for &(idx, k) in members {
            let id = ids.outputs[idx].column(k);
            for (row, (v, t)) in id.iter().zip(tok).enumerate().skip(1) {
                if v != &ExpSum::from_rational(t.clone()) {
                    return Err(Error::Collision(format!("row {row} moved by the head at grid point {idx}")));
                }
            }
            firsts.push((id[0].clone(), idx, k));
        }
        firsts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("total order"));
        for w in firsts.windows(2) {
            let gap = &w[1].0 - &w[0].0;
            if gap.is_zero_value() {
                return Err(Error::Collision(format!(
                    "grid points {} and {} share the id of column {}",
                    w[0].1, w[1].1, w[0].2
                )));
            }
            let lb = gap.lower_bound_abs();
            if same_min.as_ref().map_or(true, |m| lb < *m) {
                same_min = Some(lb);
            }
        }
    }

    // Pairs with different tokens.
    let total = count * grid.l;
    let cross_min = if total <= EXHAUSTIVE_PAIR_LIMIT {
        let all: Vec<(Vec<BigRational>, Vec<ExpSum>)> = (0..count)
            .flat_map(|idx| (0..grid.l).map(move |k| (idx, k)))
            .map(|(idx, k)| {
                let id = ids.outputs[idx].column(k);
                let tok = grid.point_exact(idx).add(&pe).expect("shape").column(k);
                (tok.iter().map(ExpSum::main_part).collect(), id)
            })
            .collect();
        let mut best = f64::INFINITY;
        for (n, a) in all.iter().enumerate() {
            for b in &all[n + 1..] {
                if a.0 != b.0 {
                    best = best.min(dist_f64(&a.1, &b.1));
                }
            }
        }
        best
    } else {
        let toks: Vec<(&Vec<BigRational>, f64)> = head_by_token.iter().map(|(t, h)| (t, *h)).collect();
        let mut best = f64::INFINITY;
        for (n, a) in toks.iter().enumerate() {
            for b in &toks[n + 1..] {
                let td: f64 = a
                    .0
                    .iter()
                    .zip(b.0.iter())
                    .map(|(x, y)| crate::expsum::ratio_to_f64(&(x - y)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(td - a.1 - b.1);
            }
        }
        best
    };
    let cross_lb = if cross_min.is_finite() {
        Some(ExpSum::from_f64(cross_min * (1.0 - 1e-9)))
    } else {
        None
    };
    let gamma = match (same_min, cross_lb) {
        (Some(a), Some(b)) => Some(if a < b { a } else { b }),
        (a, b) => a.or(b),
    };
    let tokens: Vec<&Vec<BigRational>> = head_by_token.keys().collect();
    let min_token = (tokens.len() <= EXHAUSTIVE_PAIR_LIMIT).then(|| {
        let mut best = f64::INFINITY;
        for (n, a) in tokens.iter().enumerate() {
            for b in &tokens[n + 1..] {
                let td = a.iter().zip(b.iter()).map(|(x, y)| crate::expsum::ratio_to_f64(&(x - y)).powi(2)).sum::<f64>();
                best = best.min(td.sqrt());
            }
        }
        best
    });
    let mut out = cert.clone();
    out.min_token_distance = min_token.filter(|v| v.is_finite());
    out.log_gamma_emp = gamma.as_ref().map(ExpSum::ln_abs);
    out.gamma_emp = gamma;
    out.min_cross_token_distance = cross_min.is_finite().then_some(cross_min);
    out.max_id_norm = Some(max_norm);
    out.min_id_norm = Some(min_norm);
    out.max_head_norm = Some(max_head);
    out.ids_checked = total;
    Ok((out, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn constants_at_desk_scale() {
        let grid = build_grid(0.25, 0.25, 1, 2).unwrap();
        let (_, cert) = build_context_layer(&grid, 1).unwrap();
        assert!((cert.r - 3.125).abs() < 1e-12);
        assert_eq!(cert.vocab_size, 8.0);
        assert!((cert.delta0 - (2.0 * 2f64.ln() + 3.0)).abs() < 1e-12);
        let kappa = 9f64.powi(4) * cert.delta0 * 9.0 / 0.5;
        assert!((cert.kappa - kappa).abs() / kappa < 1e-12);
        assert!((cert.log_gamma_theory - cert.log_gamma_closed_form).abs() / cert.log_gamma_closed_form.abs() < 1e-9);
    }

    #[test]
    fn boltz_examples() {
        assert_eq!(boltz(&[0.0, 0.0]), 0.0);
        let b = boltz(&[std::f64::consts::LN_2, 0.0]);
        assert!((b - std::f64::consts::LN_2 * 2.0 / 3.0).abs() < 1e-15);
        assert!((boltz(&[1.5, 1.5, 1.5]) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn rational_unit_vectors_are_unit() {
        let v = rational_unit(&[0.6, 0.0, 0.8]).unwrap();
        let n: BigRational = v.iter().map(|x| x * x).sum();
        assert_eq!(n, BigRational::one());
    }

    #[test]
    fn standard_precision_overflows() {
        let grid = build_grid(0.25, 0.25, 1, 2).unwrap();
        let (w, _) = build_context_layer(&grid, 1).unwrap();
        let x = grid.point(0).add(&grid.positional()).unwrap();
        assert!(matches!(contextual_forward(&w, &x, Precision::STANDARD), Err(Error::Precision(_))));
    }
}
