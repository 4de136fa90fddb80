//! Run configuration, the command pipelines, and report emission.
//!
//! Every run writes `<command>.json` (schema 1, embedding the resolved
//! configuration and seed) and any curves as `<command>-<name>.csv` into
//! the output directory: `--out`, else `$TFAPPROX_OUT`, else
//! `tfapprox-out`. Exit codes: 0 when every check passes, 1 for usage
//! errors, 2 when a check fails.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::assemble::{build_on_grid, estimate_l2_error, estimate_piecewise_error, widen_by, Approximator, SampleBudget};
use crate::bounds::{median_excess_by_n, GridChoice, RegressionDemo};
use crate::complexity::{
    build_shatter_family, check_family_holder, closed_form_totals, count_closed_form, count_instrumented,
    default_network_grid, ln_vc_upper_bound, slope, verify_shattering,
};
use crate::context::verify_contextual_ids;
use crate::expsum::ExpSum;
use crate::grid::{build_grid, select_parameters, GridSpec, ParamSelection};
use crate::reshape::{catalog_target, HolderTarget};
use crate::seeds;
use crate::seq::{Precision, SeqMatrix};
use crate::Error;

pub const SCHEMA: u32 = 1;
pub const OUT_ENV: &str = "TFAPPROX_OUT";
pub const DEFAULT_OUT: &str = "tfapprox-out";

/// ε values of the block-count and VC sweeps.
pub const SWEEP_EPS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Build,
    Verify,
    ApproxError,
    Count,
    VcBound,
    Shatter,
    Tradeoff,
    Regression,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Build,
        Command::Verify,
        Command::ApproxError,
        Command::Count,
        Command::VcBound,
        Command::Shatter,
        Command::Tradeoff,
        Command::Regression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Build => "build",
            Command::Verify => "verify",
            Command::ApproxError => "approx-error",
            Command::Count => "count",
            Command::VcBound => "vc-bound",
            Command::Shatter => "shatter",
            Command::Tradeoff => "tradeoff",
            Command::Regression => "regression",
        }
    }

    /// Commands whose result depends on random draws.
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Command::Count | Command::VcBound)
    }

    fn needs_grid(self) -> bool {
        matches!(self, Command::Build | Command::Verify | Command::ApproxError | Command::Tradeoff | Command::Regression)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command '{s}'")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub alpha: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub d: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub delta_star: Option<f64>,
    /// Level count for `count`, `vc-bound` and `shatter`.
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub target: String,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub precision_bits: Option<u32>,
    /// Noise level of the regression demo.
    pub noise: f64,
    /// Repetitions per sample size in the regression demo.
    pub reps: usize,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            alpha: 0.5,
            k: 1.0,
            d: 1,
            l: 2,
            eps: None,
            delta: None,
            delta_star: None,
            m: None,
            target: "bump".into(),
            seed: None,
            samples: None,
            precision_bits: None,
            noise: 0.1,
            reps: 10,
            out: None,
        }
    }

    pub fn d0(&self) -> usize {
        self.d * self.l
    }

    fn grid_modes(&self) -> usize {
        usize::from(self.eps.is_some()) + usize::from(self.delta.is_some() || self.delta_star.is_some())
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.d == 0 || self.l < 2 {
            return Err(Error::Config(format!("need d >= 1 and L >= 2, got d={}, L={}", self.d, self.l)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.k > 0.0) {
            return Err(Error::Config(format!("need α ∈ (0,1] and K > 0, got α={}, K={}", self.alpha, self.k)));
        }
        if self.delta.is_some() != self.delta_star.is_some() {
            return Err(Error::Config("--delta and --delta-star go together".into()));
        }
        if self.grid_modes() > 1 {
            return Err(Error::Config("give either --eps or --delta/--delta-star, not both".into()));
        }
        if self.m.is_some() && self.grid_modes() > 0 {
            return Err(Error::Config("give either --M or a grid, not both".into()));
        }
        let c = self.command;
        if c.needs_grid() && self.grid_modes() != 1 {
            return Err(Error::Config(format!("{c} needs --eps or --delta/--delta-star")));
        }
        if matches!(c, Command::Count | Command::VcBound) && self.m.is_none() && self.grid_modes() != 1 {
            return Err(Error::Config(format!("{c} needs --M, --eps or --delta/--delta-star")));
        }
        if c.is_stochastic() && self.seed.is_none() {
            return Err(Error::Config(format!("{c} is stochastic and needs --seed")));
        }
        if self.samples == Some(0) || self.reps == 0 {
            return Err(Error::Config("--samples and --reps must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn precision(&self) -> Result<Precision, Error> {
        match self.precision_bits {
            Some(bits) if bits < 64 => Ok(Precision::STANDARD),
            Some(bits) => Precision::extended(bits),
            None => Precision::extended(64),
        }
    }

    /// The grid and, when chosen from ε, the selection behind it.
    pub fn grid(&self) -> Result<(GridSpec, Option<ParamSelection>), Error> {
        if let Some(eps) = self.eps {
            let sel = select_parameters(eps, self.alpha, self.k, self.d, self.l)?;
            Ok((sel.grid(self.d, self.l)?, Some(sel)))
        } else if let (Some(delta), Some(delta_star)) = (self.delta, self.delta_star) {
            Ok((build_grid(delta, delta_star, self.d, self.l)?, None))
        } else if let Some(m) = self.m {
            Ok((grid_with_levels(m, self.d, self.l)?, None))
        } else {
            Err(Error::Config("no grid given".into()))
        }
    }

    pub fn target(&self) -> Result<HolderTarget, Error> {
        catalog_target(&self.target, self.alpha, self.k, self.d0())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    fn seed_or_zero(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// A grid with exactly `m` levels: `δ = 0.8/(m+½)`, `δ* = 0.2/(m+½)`.
pub fn grid_with_levels(m: usize, d: usize, l: usize) -> Result<GridSpec, Error> {
    if m == 0 {
        return Err(Error::Config("need M >= 1".into()));
    }
    let step = 1.0 / (m as f64 + 0.5);
    build_grid(0.8 * step, 0.2 * step, d, l)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl CurvePoint {
    pub fn exact(x: f64, y: f64) -> Self {
        CurvePoint { x, y, ci_lo: y, ci_hi: y }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Curve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

/// Writes `x,y,ci_lo,ci_hi` rows. Needs at least two points.
pub fn emit_curves(path: &Path, points: &[CurvePoint]) -> Result<(), Error> {
    if points.len() < 2 {
        return Err(Error::Config(format!("a curve needs at least 2 points, got {}", points.len())));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "ci_lo", "ci_hi"])?;
    for p in points {
        w.write_record([p.x, p.y, p.ci_lo, p.ci_hi].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back a curve written by [`emit_curves`].
pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>, Error> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let (x, y, ci_lo, ci_hi): (f64, f64, f64, f64) = rec?;
        out.push(CurvePoint { x, y, ci_lo, ci_hi });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub code: i32,
    pub report: Value,
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
    pub message: Option<String>,
}

impl RunOutcome {
    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

struct Output {
    result: Value,
    checks: Vec<Check>,
    curves: Vec<Curve>,
}

fn usage(config: &RunConfig, e: Error) -> RunOutcome {
    RunOutcome {
        code: 1,
        report: json!({ "schema": SCHEMA, "command": config.command, "error": e.to_string() }),
        checks: Vec::new(),
        files: Vec::new(),
        message: Some(e.to_string()),
    }
}

/// Runs the configured pipeline and writes its report and curves.
pub fn run(config: &RunConfig) -> RunOutcome {
    if let Err(e) = config.validate() {
        return usage(config, e);
    }
    let (out, error) = match execute(config) {
        Ok(out) => (out, None),
        Err(Error::Config(msg)) => return usage(config, Error::Config(msg)),
        Err(e) => {
            let name = match &e {
                Error::Stage { stage, .. } => stage.to_string(),
                _ => config.command.name().to_string(),
            };
            let check = Check::new(name, false, e.to_string());
            (Output { result: Value::Null, checks: vec![check], curves: Vec::new() }, Some(e.to_string()))
        }
    };
    let passed = out.checks.iter().all(|c| c.passed);
    let report = json!({
        "schema": SCHEMA,
        "command": config.command,
        "config": config,
        "seed": config.seed,
        "passed": passed,
        "checks": out.checks,
        "error": error,
        "result": out.result,
    });
    let mut outcome = RunOutcome {
        code: if passed { 0 } else { 2 },
        report,
        checks: out.checks,
        files: Vec::new(),
        message: error,
    };
    if let Err(e) = write_outputs(config, &outcome.report, &out.curves, &mut outcome.files) {
        outcome.code = 1;
        outcome.message = Some(format!("writing reports: {e}"));
    }
    outcome
}

fn write_outputs(config: &RunConfig, report: &Value, curves: &[Curve], files: &mut Vec<PathBuf>) -> Result<(), Error> {
    let dir = config.out_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.json", config.command));
    std::fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
    files.push(path);
    for c in curves {
        let path = dir.join(format!("{}-{}.csv", config.command, c.name));
        emit_curves(&path, &c.points)?;
        files.push(path);
    }
    Ok(())
}

fn execute(config: &RunConfig) -> Result<Output, Error> {
    match config.command {
        Command::Build => run_build(config),
        Command::Verify => run_verify(config),
        Command::ApproxError => run_approx_error(config),
        Command::Count => run_count(config),
        Command::VcBound => run_vc_bound(config),
        Command::Shatter => run_shatter(config),
        Command::Tradeoff => run_tradeoff(config),
        Command::Regression => run_regression(config),
    }
}

fn build(config: &RunConfig) -> Result<(Approximator, HolderTarget), Error> {
    let target = config.target()?;
    let (grid, sel) = config.grid()?;
    let approx = build_on_grid(&target, &grid, config.seed_or_zero(), sel)?;
    Ok((approx, target))
}

fn run_build(config: &RunConfig) -> Result<Output, Error> {
    let (approx, _) = build(config)?;
    let r = &approx.report;
    let checks = vec![Check::new(
        "block-count",
        r.blocks as f64 == r.blocks_formula,
        format!("D = {} (formula {})", r.blocks, r.blocks_formula),
    )];
    Ok(Output { result: serde_json::to_value(r)?, checks, curves: Vec::new() })
}

fn matrix_exact(m: &SeqMatrix<f64>) -> SeqMatrix<ExpSum> {
    m.map(|v| ExpSum::from_f64(*v))
}

/// Quantization, contextual and value-mapping checks.
pub fn verify_network(approx: &Approximator, per_cube: usize, precision: Precision, seed: u64) -> Result<(Vec<Check>, Value), Error> {
    let net = &approx.network;
    let grid = &net.grid;
    let count = grid.point_count().ok_or_else(|| Error::Config("grid too large".into()))?;
    let pe = grid.positional::<ExpSum>();
    let mut checks = Vec::new();

    // Quantization: every cube when there are few, else uniform cube draws.
    let cube_list: Vec<usize> = if count <= 4096 { (0..count).collect() } else { vec![usize::MAX; 4096] };
    let q64 = net.quantizer.cast::<f64>();
    let quant = cube_list
        .par_iter()
        .enumerate()
        .map(|(n, &idx)| -> Result<(usize, f64, usize), Error> {
            let mut rng = seeds::stream(seed, "verify-quantizer", n as u64);
            let (mut exact_bad, mut worst, mut gap_bad) = (0, 0.0f64, 0);
            for _ in 0..per_cube {
                let (idx, x) = if idx == usize::MAX {
                    let (digits, x) = grid.sample_in_cubes(&mut rng);
                    (grid.index_of(&digits).expect("index"), x)
                } else {
                    (idx, grid.sample_in_cube(idx, &mut rng))
                };
                let want = grid.point_exact(idx).add(&pe)?;
                if net.quantizer.forward_fast(&x)? != want {
                    exact_bad += 1;
                }
                worst = worst.max(q64.forward_fast(&x)?.max_abs_diff(&want.to_f64()));
                let g = grid.sample_in_gaps(&mut rng);
                let out = net.quantizer.forward_fast(&g)?;
                for j in 0..grid.l {
                    for i in 0..grid.d {
                        let v = out.get(i, j).to_f64();
                        if !(1.0..=(grid.l + 1) as f64).contains(&v) {
                            gap_bad += 1;
                        }
                    }
                }
            }
            Ok((exact_bad, worst, gap_bad))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let samples = cube_list.len() * per_cube;
    let exact_bad: usize = quant.iter().map(|q| q.0).sum();
    let worst = quant.iter().map(|q| q.1).fold(0.0, f64::max);
    let gap_bad: usize = quant.iter().map(|q| q.2).sum();
    checks.push(Check::new(
        "quantization-exact",
        exact_bad == 0 && worst <= 1e-10,
        format!("{samples} cube samples: {exact_bad} not mapped to G+E exactly; double-precision max deviation {worst:e}"),
    ));
    checks.push(Check::new(
        "quantization-gaps",
        gap_bad == 0,
        format!("{samples} gap samples: {gap_bad} entries outside [1, L+1]"),
    ));

    // Literal layer-by-layer pass agrees with the fast path.
    if net.block_count() <= 400 {
        let mut rng = seeds::stream(seed, "verify-literal", 0);
        let mut bad = 0;
        for _ in 0..4 {
            let (_, x) = grid.sample_in_cubes(&mut rng);
            if net.forward_literal(&x)? != net.forward(&x)? {
                bad += 1;
            }
        }
        checks.push(Check::new("literal-agrees", bad == 0, format!("{bad} of 4 inputs differ")));
    }

    // Contextual mapping.
    let cert = &approx.report.cert;
    let precision_check = match verify_contextual_ids(&net.context, grid, cert, precision) {
        Ok((c, _)) => Check::new("contextual-precision", c.gamma_emp_positive(), format!("ln γ_emp = {:?} at {:?}", c.log_gamma_emp, precision.mode)),
        Err(e) => Check::new("contextual-precision", false, e.to_string()),
    };
    checks.push(precision_check);
    checks.push(Check::new(
        "contextual-distinct",
        cert.gamma_emp_positive(),
        format!("{} ids, ln γ_emp = {:?}", cert.ids_checked, cert.log_gamma_emp),
    ));
    let max_norm = cert.max_id_norm.unwrap_or(f64::INFINITY);
    checks.push(Check::new("contextual-norms", max_norm <= cert.r * (1.0 + 1e-12), format!("max ‖id‖ = {max_norm}, r = {}", cert.r)));
    let head = cert.max_head_norm.unwrap_or(f64::INFINITY);
    checks.push(Check::new("contextual-head", head <= cert.beta / 4.0 * (1.0 + 1e-12), format!("max head norm {head}, β/4 = {}", cert.beta / 4.0)));
    if let Some(t) = cert.min_token_distance {
        checks.push(Check::new("token-separation", t >= cert.beta / 2.0 * (1.0 - 1e-12), format!("min token distance {t}, β/2 = {}", cert.beta / 2.0)));
    }
    let rel = ((cert.log_gamma_theory - cert.log_gamma_closed_form) / cert.log_gamma_closed_form).abs();
    checks.push(Check::new(
        "gamma-closed-form",
        rel <= 1e-9,
        format!("ln γ theory {} vs closed form {} (rel {rel:e})", cert.log_gamma_theory, cert.log_gamma_closed_form),
    ));

    // Value mapping on grid points.
    let points: Vec<usize> = if count <= 4096 {
        (0..count).collect()
    } else {
        let mut rng = seeds::stream(seed, "verify-value", 0);
        (0..1024).map(|_| rand::Rng::gen_range(&mut rng, 0..count)).collect()
    };
    let value = points
        .par_iter()
        .map(|&idx| -> Result<(bool, f64), Error> {
            let h = grid.point_exact(idx).add(&pe)?;
            let out = net.forward_quantized(&h)?;
            let want = &approx.piecewise.table[idx];
            let exact = out == matrix_exact(want);
            Ok((exact, out.to_f64().max_abs_diff(want)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let not_exact = value.iter().filter(|v| !v.0).count();
    let worst = value.iter().map(|v| v.1).fold(0.0, f64::max);
    checks.push(Check::new(
        "value-mapping",
        worst <= 1e-8,
        format!("{} grid points: max |f(G+E) − Y_G| = {worst:e}; {not_exact} not bit-exact", points.len()),
    ));
    let detail = json!({ "cube_samples": samples, "value_points": points.len(), "cert": cert });
    Ok((checks, detail))
}

fn run_verify(config: &RunConfig) -> Result<Output, Error> {
    let (approx, _) = build(config)?;
    let per_cube = config.samples.unwrap_or(100);
    let (checks, detail) = verify_network(&approx, per_cube, config.precision()?, config.seed_or_zero())?;
    let result = json!({ "build": approx.report, "verification": detail });
    Ok(Output { result, checks, curves: Vec::new() })
}

fn run_approx_error(config: &RunConfig) -> Result<Output, Error> {
    let (approx, target) = build(config)?;
    let budget = SampleBudget::split(config.samples.unwrap_or(10_000));
    let seed = config.seed_or_zero();
    let est = estimate_l2_error(&approx, &target, budget, seeds::derive(seed, "approx-error", 0))?;
    let pw = estimate_piecewise_error(&approx.piecewise, &target, budget, seeds::derive(seed, "approx-error", 0))?;
    let mut checks = vec![Check::new(
        "cube-error-bound",
        est.err_cubes <= est.cube_bound + 3.0 * est.cube_ci_width(),
        format!("cube error {} vs bound {} + 3·CI {}", est.err_cubes, est.cube_bound, est.cube_ci_width()),
    )];
    if let Some(eps) = config.eps {
        checks.push(Check::new("error-below-eps", est.ci.1 < eps, format!("‖f − g‖ = {} (95% upper {}) vs ε = {eps}", est.err_total, est.ci.1)));
    }
    let result = json!({ "build": approx.report, "network": est, "piecewise": pw });
    Ok(Output { result, checks, curves: Vec::new() })
}

/// Network for instrumented counting; small grids only.
const INSTRUMENT_LIMIT: usize = 20_000;

fn run_count(config: &RunConfig) -> Result<Output, Error> {
    let (grid, _) = config.grid()?;
    let (d, l, m) = (grid.d, grid.l, grid.m);
    let closed = count_closed_form(d, l, m);
    let (t, omega) = closed_form_totals(d, l, m);
    let mut checks = vec![Check::new(
        "closed-form-parts",
        (closed.t, closed.omega) == (t, omega),
        format!("per-part sums t={} ω={} vs totals t={t} ω={omega}", closed.t, closed.omega),
    )];
    let units = grid.point_count().map(|p| p * l);
    let instrumented = if units.is_some_and(|u| u <= INSTRUMENT_LIMIT) {
        let target = config.target()?;
        let approx = build_on_grid(&target, &grid, config.seed_or_zero(), None)?;
        let mut rng = seeds::stream(config.seed_or_zero(), "count-inputs", 0);
        let (_, x1) = grid.sample_in_cubes(&mut rng);
        let x2 = grid.sample_in_gaps(&mut rng);
        let a = count_instrumented(&approx.network, &x1)?;
        let b = count_instrumented(&approx.network, &x2)?;
        checks.push(Check::new("instrumented-t", a.t == t, format!("instrumented t={} vs closed form {t}", a.t)));
        checks.push(Check::new("instrumented-omega", a.omega == omega, format!("instrumented ω={} vs closed form {omega}", a.omega)));
        checks.push(Check::new("input-independent", a == b, "tallies on a cube input and a gap input".to_string()));
        Some(a)
    } else {
        None
    };
    let result = json!({ "closed_form": closed, "instrumented": instrumented, "t": t.to_string(), "omega": omega.to_string() });
    Ok(Output { result, checks, curves: Vec::new() })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub eps: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "D")]
    pub d_blocks: f64,
    pub t: f64,
    pub omega: f64,
    pub ln_vc: f64,
}

/// Block count and VC bound along an ε sweep.
pub fn vc_sweep(eps: &[f64], alpha: f64, k: f64, d: usize, l: usize) -> Result<Vec<SweepPoint>, Error> {
    eps.iter()
        .map(|&e| {
            let sel = select_parameters(e, alpha, k, d, l)?;
            let grid = sel.grid(d, l)?;
            let m = grid.m;
            let d0 = (d * l) as f64;
            let p = (m as f64).powf(d0);
            let (df, lf, mf) = (d as f64, l as f64, m as f64);
            let t = (25.0 * df * lf + 6.0 * df + 5.0 * lf) * lf * p + 13.0 * df * df * lf * lf * mf + 8.0 * df * df * lf
                + 4.0 * df * lf * lf
                + 2.0 * lf * lf
                + 5.0 * lf * mf
                - 2.0 * df * lf
                - lf
                + 17.0;
            let omega = 2.0 * df * lf * p + 4.0 * df * df + mf + 10.0;
            Ok(SweepPoint {
                eps: e,
                m,
                d_blocks: crate::assemble::block_count_formula(d, l, m),
                t,
                omega,
                ln_vc: ln_vc_upper_bound(t, omega),
            })
        })
        .collect()
}

fn run_vc_bound(config: &RunConfig) -> Result<Output, Error> {
    let (grid, _) = config.grid()?;
    let (t, omega) = closed_form_totals(grid.d, grid.l, grid.m);
    let ln_vc = ln_vc_upper_bound(t as f64, omega as f64);
    let sweep = vc_sweep(&SWEEP_EPS, config.alpha, config.k, config.d, config.l)?;
    let ln_d: Vec<f64> = sweep.iter().map(|p| p.d_blocks.ln()).collect();
    let ln_inv_eps: Vec<f64> = sweep.iter().map(|p| (1.0 / p.eps).ln()).collect();
    let vc_slope = slope(&ln_d, &sweep.iter().map(|p| p.ln_vc).collect::<Vec<_>>());
    let rate_slope = slope(&ln_inv_eps, &ln_d);
    let expected = config.d0() as f64 / config.alpha;
    let checks = vec![
        Check::new("vc-slope", (vc_slope - 4.0).abs() <= 0.3, format!("ln VC vs ln D slope {vc_slope}")),
        Check::new(
            "rate-slope",
            (rate_slope - expected).abs() <= 0.15 * expected,
            format!("ln D vs ln(1/ε) slope {rate_slope}, d0/α = {expected}"),
        ),
    ];
    let curves = vec![
        Curve { name: "vc".into(), points: sweep.iter().map(|p| CurvePoint::exact(p.d_blocks, p.ln_vc.exp())).collect() },
        Curve { name: "blocks".into(), points: sweep.iter().map(|p| CurvePoint::exact(1.0 / p.eps, p.d_blocks)).collect() },
    ];
    let result = json!({
        "M": grid.m, "t": t.to_string(), "omega": omega.to_string(), "ln_vc": ln_vc, "vc": ln_vc.exp(),
        "sweep": sweep, "vc_slope": vc_slope, "rate_slope": rate_slope,
    });
    Ok(Output { result, checks, curves })
}

fn run_shatter(config: &RunConfig) -> Result<Output, Error> {
    let m = config.m.unwrap_or(2);
    let family = build_shatter_family(m, config.d0(), config.alpha)?;
    let grid = default_network_grid(1, config.d0())?;
    let seed = config.seed_or_zero();
    let report = verify_shattering(&family, &grid, seed, 16)?;
    let pairs = config.samples.unwrap_or(100_000);
    let holder: Vec<_> = (0..report.patterns as u64).into_par_iter().map(|p| check_family_holder(&family, p, pairs, seed)).collect();
    let violations: usize = holder.iter().map(|h| h.violations).sum();
    let checks = vec![
        Check::new("family-shatters", report.shattered_by_family, format!("{} patterns on {} centers", report.patterns, report.points)),
        Check::new(
            "networks-shatter",
            report.shattered_by_networks,
            format!("{} patterns with mismatches", report.results.iter().filter(|r| !r.network_signs_ok).count()),
        ),
        Check::new("family-holder", violations == 0, format!("{violations} violations over {pairs} pairs per pattern")),
    ];
    Ok(Output { result: json!({ "shatter": report, "holder": holder }), checks, curves: Vec::new() })
}

fn run_tradeoff(config: &RunConfig) -> Result<Output, Error> {
    let (approx, _) = build(config)?;
    let net = &approx.network;
    let inputs = config.samples.unwrap_or(100);
    let mut rng = seeds::stream(config.seed_or_zero(), "tradeoff-inputs", 0);
    let xs: Vec<SeqMatrix<f64>> = (0..inputs).map(|_| net.grid.sample_in_cubes(&mut rng).1).collect();
    let reference: Vec<SeqMatrix<ExpSum>> = xs.iter().map(|x| net.forward(x)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for n in [1usize, 2, 4] {
        let wide = widen_by(net, n)?;
        let worst = xs
            .par_iter()
            .zip(&reference)
            .map(|(x, r)| wide.forward(x).map(|o| o.to_f64().max_abs_diff(&r.to_f64())))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(0.0, f64::max);
        checks.push(Check::new(format!("widen-{n}"), worst <= 1e-9, format!("n={n}: max deviation {worst:e} on {inputs} inputs")));
        rows.push(json!({ "n": n, "depth": wide.depth(), "width": wide.width(), "max_deviation": worst }));
    }
    let curve = Curve {
        name: "depth-width".into(),
        points: rows
            .iter()
            .map(|r| CurvePoint::exact(r["width"].as_f64().unwrap_or(0.0), r["depth"].as_f64().unwrap_or(0.0)))
            .collect(),
    };
    Ok(Output { result: json!({ "build": approx.report, "widened": rows }), checks, curves: vec![curve] })
}

/// Sample sizes of the regression sweep.
pub const REGRESSION_N: [usize; 3] = [100, 1_000, 10_000];

fn run_regression(config: &RunConfig) -> Result<Output, Error> {
    let target = config.target()?;
    let choice = match (config.eps, config.delta, config.delta_star) {
        (Some(eps), _, _) => GridChoice::Eps(eps),
        (None, Some(delta), Some(delta_star)) => GridChoice::Widths { delta, delta_star },
        _ => return Err(Error::Config("regression needs a grid".into())),
    };
    let seed = config.seed_or_zero();
    let test_size = config.samples.unwrap_or(5_000);
    let demo = RegressionDemo::new(target, choice, config.noise, test_size, SampleBudget::split(2_000), seed)?;
    let seeds: Vec<u64> = (0..config.reps as u64).map(|i| seeds::derive(seed, "regression-rep", i)).collect();
    let reports = demo.sweep(&REGRESSION_N, &seeds)?;
    let medians = median_excess_by_n(&reports);
    let monotone = medians.windows(2).all(|w| w[1].1 < w[0].1);
    let applicable: Vec<bool> = reports.iter().filter_map(|r| r.within_bound).collect();
    let mut checks = vec![Check::new("median-excess-decreasing", monotone, format!("{medians:?}"))];
    if !applicable.is_empty() {
        checks.push(Check::new(
            "within-bound-shape",
            applicable.iter().all(|&b| b),
            format!("excess risk ≤ E_sta + 2E_app² + 2τ on {} runs with N ≥ D⁴", applicable.len()),
        ));
    }
    let regime = format!("{} of {} runs have N ≥ D⁴; the bound shape is only compared there", applicable.len(), reports.len());
    let curve = Curve {
        name: "excess".into(),
        points: medians
            .iter()
            .map(|&(n, med)| {
                let runs = reports.iter().filter(|r| r.n == n).map(|r| r.excess_risk);
                let (lo, hi) = runs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                CurvePoint { x: n as f64, y: med, ci_lo: lo, ci_hi: hi }
            })
            .collect(),
    };
    let result = json!({ "M": demo.grid.m, "e_app": demo.e_app, "medians": medians, "bound_regime": regime, "runs": reports });
    Ok(Output { result, checks, curves: vec![curve] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("train".parse::<Command>().is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::new(Command::ApproxError);
        c.eps = Some(0.5);
        assert!(c.validate().is_err());
        c.seed = Some(1);
        assert!(c.validate().is_ok());
        c.delta = Some(0.1);
        c.delta_star = Some(0.1);
        assert!(c.validate().is_err());
        let mut c = RunConfig::new(Command::Count);
        c.m = Some(2);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn levels_grid() {
        for m in [1, 2, 3, 7, 50] {
            assert_eq!(grid_with_levels(m, 1, 2).unwrap().m, m);
        }
    }
}
