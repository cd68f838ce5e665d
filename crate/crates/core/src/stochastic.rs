//! Exact continuous-time Markov chains driven by `-H`, Feynman-Kac Monte
//! Carlo, Kato-class moduli and Kas'minskii certificates.
//!
//! Paths are sampled exactly: exponential holding times, jumps chosen in
//! proportion to the rates, and path integrals of piecewise-constant
//! potentials accumulated segment by segment. Weights live in log space
//! until aggregation, which shifts by the largest log weight.
//!
//! Sample `i` started at vertex `x` draws from a ChaCha8 stream whose key
//! is `(seed, x)` and whose stream id is `i`, so estimates do not depend on
//! thread count or scheduling.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_len, Error, Result};
use crate::heat::HeatOperator;
use crate::variation::least_squares_slope;

/// Off-diagonal generator entries below this multiple of the diagonal
/// count as zero when checking rate signs.
const RATE_SIGN_TOLERANCE: f64 = 1e-12;

/// Killing applied to a walk: per-vertex exponential kill rates and/or
/// cemetery vertices that kill the walk on entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Killing {
    pub rates: Option<Vec<f64>>,
    pub cemetery: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct WalkModel {
    jumps: Vec<Vec<(usize, f64)>>,
    total_rate: Vec<f64>,
    kill_rate: Vec<f64>,
    cemetery: Vec<bool>,
    // Flat sampling tables: per vertex, `1 / (lambda + kappa)` and the
    // cumulative rates (killing first) over `offsets[x]..offsets[x + 1]`.
    inv_rate: Vec<f64>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    cumulative: Vec<f64>,
}

impl WalkModel {
    /// Chain with jump rates `q(x -> y) = -H_{xy}`.
    pub fn build(hop: &HeatOperator, killing: &Killing) -> Result<Self> {
        let n = hop.manifold().n_vertices();
        let mut rows = vec![Vec::new(); n];
        for (x, row) in rows.iter_mut().enumerate() {
            let diag = hop.generator_entry(x, x).abs();
            for (y, k) in hop.stiffness().row(x) {
                if y == x {
                    continue;
                }
                let q = -k / hop.manifold().volumes()[x];
                if q < -RATE_SIGN_TOLERANCE * diag {
                    return Err(Error::Validation(format!(
                        "negative jump rate {q:e} from vertex {x} to {y}: the Laplacian has a \
                         positive off-diagonal entry (non-Delaunay mesh); use graph mode or an \
                         intrinsic Delaunay triangulation"
                    )));
                }
                if q > RATE_SIGN_TOLERANCE * diag {
                    row.push((y, q));
                }
            }
        }
        Self::from_rates(rows, killing)
    }

    /// Chain with the given `(target, rate)` lists per vertex.
    pub fn from_rates(jumps: Vec<Vec<(usize, f64)>>, killing: &Killing) -> Result<Self> {
        let n = jumps.len();
        for (x, row) in jumps.iter().enumerate() {
            for &(y, q) in row {
                if y >= n || y == x {
                    return Err(Error::Validation(format!("invalid jump {x} -> {y}")));
                }
                if !(q >= 0.0) || !q.is_finite() {
                    return Err(Error::Validation(format!("jump rate {x} -> {y} must be >= 0 (got {q})")));
                }
            }
        }
        let kill_rate = match &killing.rates {
            Some(r) => {
                check_len("kill rates", n, r.len())?;
                if let Some(x) = r.iter().position(|k| !(*k >= 0.0) || !k.is_finite()) {
                    return Err(Error::Validation(format!("kill rate at vertex {x} must be >= 0")));
                }
                r.clone()
            }
            None => vec![0.0; n],
        };
        let mut cemetery = vec![false; n];
        for &z in &killing.cemetery {
            if z >= n {
                return Err(Error::Validation(format!("cemetery vertex {z} out of range")));
            }
            cemetery[z] = true;
        }
        let total_rate: Vec<f64> = jumps.iter().map(|r| r.iter().map(|j| j.1).sum()).collect();
        let mut inv_rate = Vec::with_capacity(n);
        let mut offsets = vec![0];
        let (mut targets, mut cumulative) = (Vec::new(), Vec::new());
        for x in 0..n {
            let rate = total_rate[x] + kill_rate[x];
            inv_rate.push(if rate > 0.0 { 1.0 / rate } else { 0.0 });
            let mut acc = kill_rate[x];
            for &(y, r) in &jumps[x] {
                acc += r;
                targets.push(y);
                cumulative.push(acc);
            }
            offsets.push(targets.len());
        }
        Ok(Self {
            jumps,
            total_rate,
            kill_rate,
            cemetery,
            inv_rate,
            offsets,
            targets,
            cumulative,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.jumps.len()
    }

    pub fn jumps(&self, x: usize) -> &[(usize, f64)] {
        &self.jumps[x]
    }

    /// Total jump rate out of `x`, killing excluded.
    pub fn total_rate(&self, x: usize) -> f64 {
        self.total_rate[x]
    }

    pub fn kill_rate(&self, x: usize) -> f64 {
        self.kill_rate[x]
    }

    pub fn is_cemetery(&self, x: usize) -> bool {
        self.cemetery[x]
    }

    /// Sub-Markov generator: `Q_{xy} = q(x -> y)`, `Q_{xx} = -lambda(x) -
    /// kappa(x)`, with jumps into cemetery vertices kept as lost mass.
    /// Rows and columns of cemetery vertices are zero; a walk started there
    /// is dead at time zero.
    pub fn generator(&self) -> DMatrix<f64> {
        let n = self.n_vertices();
        let mut q = DMatrix::zeros(n, n);
        for x in (0..n).filter(|&x| !self.cemetery[x]) {
            q[(x, x)] = -self.total_rate[x] - self.kill_rate[x];
            for &(y, r) in &self.jumps[x] {
                if !self.cemetery[y] {
                    q[(x, y)] += r;
                }
            }
        }
        q
    }

    /// Exact path on `[0, t]`.
    pub fn sample_path(&self, x: usize, t: f64, rng: &mut impl Rng) -> PathSample {
        let mut path = PathSample {
            start: x,
            jump_times: Vec::new(),
            vertices: vec![x],
            lifetime: f64::INFINITY,
        };
        self.walk(x, t, rng, |_, _, _| {}, |time, y| {
            path.jump_times.push(time);
            path.vertices.push(y);
        }, |time| path.lifetime = time);
        path
    }

    /// Runs one path to time `t`, calling `segment(vertex, from, to)` for
    /// each holding interval, `jump(time, target)` after each jump and
    /// `kill(time)` on death. Returns the vertex occupied at `t`, or `None`
    /// if the walk died first.
    fn walk(
        &self,
        x: usize,
        t: f64,
        rng: &mut impl Rng,
        mut segment: impl FnMut(usize, f64, f64),
        mut jump: impl FnMut(f64, usize),
        mut kill: impl FnMut(f64),
    ) -> Option<usize> {
        if self.cemetery[x] {
            kill(0.0);
            return None;
        }
        let mut time = 0.0;
        let mut at = x;
        loop {
            let inv = self.inv_rate[at];
            let hold = if inv > 0.0 {
                let e: f64 = rng.sample(Exp1);
                e * inv
            } else {
                f64::INFINITY
            };
            let next = time + hold;
            if next >= t {
                segment(at, time, t);
                return Some(at);
            }
            segment(at, time, next);
            time = next;
            let kill_rate = self.kill_rate[at];
            let u = rng.random::<f64>() / inv;
            let (lo, hi) = (self.offsets[at], self.offsets[at + 1]);
            if u < kill_rate || lo == hi {
                kill(time);
                return None;
            }
            let cum = &self.cumulative[lo..hi];
            let k = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
            at = self.targets[lo + k];
            jump(time, at);
            if self.cemetery[at] {
                kill(time);
                return None;
            }
        }
    }
}

/// One sampled trajectory. `lifetime` is infinite when the walk is still
/// alive at the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub start: usize,
    pub jump_times: Vec<f64>,
    pub vertices: Vec<usize>,
    pub lifetime: f64,
}

impl PathSample {
    /// Vertex occupied at time `s`, or `None` after death.
    pub fn position(&self, s: f64) -> Option<usize> {
        if s >= self.lifetime {
            return None;
        }
        let k = self.jump_times.partition_point(|&tau| tau <= s);
        Some(self.vertices[k])
    }
}

/// How paths killed before the horizon contribute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KilledPaths {
    /// Weight zero: the indicator `1_{t < zeta}`.
    #[default]
    Drop,
    /// Keep `exp(integral up to death)`: the potential is extended by zero
    /// at the cemetery point and the terminal value there is one.
    Keep,
}

/// `E_x[exp(int_0^t v(X_s) ds) g(X_t)]` with the given treatment of
/// killed paths. `g` must be nonnegative; `None` means `g = 1`.
#[derive(Clone, Debug)]
pub struct Functional<'a> {
    pub potential: &'a [f64],
    pub terminal: Option<&'a [f64]>,
    pub killed: KilledPaths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloParams {
    pub samples: usize,
    pub seed: u64,
    /// Family-wise confidence level of the reported intervals.
    pub confidence: f64,
    /// Start vertices for suprema on manifolds with more than
    /// [`ALL_STARTS_LIMIT`] vertices. The argmax of the deterministic
    /// modulus is always added.
    pub starts: Vec<usize>,
    /// Bootstrap resamples used when the sample mean is too skewed for
    /// the log-normal interval.
    pub bootstrap_resamples: usize,
}

impl Default for MonteCarloParams {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0,
            confidence: 0.99,
            starts: Vec::new(),
            bootstrap_resamples: 400,
        }
    }
}

/// Suprema over start vertices use every vertex up to this size.
pub const ALL_STARTS_LIMIT: usize = 200;

/// Relative slack added to interval ends so that degenerate samples (all
/// weights equal) still cover values that agree up to rounding.
const ROUNDING_SLACK: f64 = 1e-12;

/// `upper <= bound` up to the rounding slack carried by the intervals.
pub fn below_bound(upper: f64, bound: f64) -> bool {
    upper <= bound * (1.0 + 2.0 * ROUNDING_SLACK)
}

/// Skewness of the sample mean above which the interval falls back to a
/// bootstrap.
const SKEW_LIMIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    LogNormal,
    Bootstrap,
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub start: usize,
    pub mean: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    /// Confidence of this single interval after the family correction.
    pub confidence: f64,
    pub samples: usize,
    pub interval: IntervalMethod,
    /// Log of the largest path weight; with `overflow` set the weights
    /// exceed the float range and `mean` is infinite.
    pub max_log_weight: f64,
    pub overflow: bool,
}

/// Two-sided normal quantile for `comparisons` simultaneous intervals at
/// family-wise level `confidence`.
pub fn bonferroni_z(confidence: f64, comparisons: usize) -> f64 {
    let alpha = (1.0 - confidence) / comparisons.max(1) as f64;
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

fn stream_rng(seed: u64, start: usize, sample: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(start as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(sample);
    rng
}

/// Log weights of `samples` independent paths from `x`.
fn log_weights(w: &WalkModel, f: &Functional, x: usize, t: f64, mc: &MonteCarloParams) -> Vec<f64> {
    log_weights_at(w, f, x, &[t], mc).pop().unwrap_or_default()
}

/// Log weights at each of the ascending `times`, all read off the same
/// paths. Returns one vector per time.
fn log_weights_at(w: &WalkModel, f: &Functional, x: usize, times: &[f64], mc: &MonteCarloParams) -> Vec<Vec<f64>> {
    let horizon = times.last().copied().unwrap_or(0.0);
    let per_path: Vec<Vec<f64>> = (0..mc.samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(mc.seed, x, i);
            // Checkpoints are passed in order; `next` is the first not yet
            // reached. Unreached ones keep the integral up to death.
            let mut total = 0.0;
            let mut next = 0;
            let mut snap = vec![(0.0, None); times.len()];
            w.walk(
                x,
                horizon,
                &mut rng,
                |v, a, b| {
                    let pv = f.potential[v];
                    while next < times.len() && (times[next] < b || b == horizon) {
                        snap[next] = (total + pv * (times[next] - a), Some(v));
                        next += 1;
                    }
                    total += pv * (b - a);
                },
                |_, _| {},
                |_| {},
            );
            for s in &mut snap[next..] {
                s.0 = total;
            }
            (0..times.len())
                .map(|k| match snap[k] {
                    (integral, Some(y)) => match f.terminal {
                        Some(g) if g[y] > 0.0 => integral + g[y].ln(),
                        Some(_) => f64::NEG_INFINITY,
                        None => integral,
                    },
                    (integral, None) => match f.killed {
                        KilledPaths::Drop => f64::NEG_INFINITY,
                        KilledPaths::Keep => integral,
                    },
                })
                .collect()
        })
        .collect();
    (0..times.len()).map(|k| per_path.iter().map(|lw| lw[k]).collect()).collect()
}

/// Monte Carlo estimate of the functional started at `x`, with an interval
/// that is one of `comparisons` simultaneous intervals.
pub fn estimate(
    w: &WalkModel,
    f: &Functional,
    x: usize,
    t: f64,
    mc: &MonteCarloParams,
    comparisons: usize,
) -> Result<Estimate> {
    validate(w, f, x, &[t], mc)?;
    let lw = log_weights(w, f, x, t, mc);
    Ok(aggregate(x, &lw, mc, comparisons))
}

/// Estimates at several ascending times from one set of paths run to the
/// last time. Each interval counts as one of `comparisons`.
pub fn estimate_at_times(
    w: &WalkModel,
    f: &Functional,
    x: usize,
    times: &[f64],
    mc: &MonteCarloParams,
    comparisons: usize,
) -> Result<Vec<Estimate>> {
    validate(w, f, x, times, mc)?;
    if times.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::InvalidArgument("times must be ascending".into()));
    }
    Ok(log_weights_at(w, f, x, times, mc)
        .iter()
        .map(|lw| aggregate(x, lw, mc, comparisons))
        .collect())
}

fn validate(w: &WalkModel, f: &Functional, x: usize, times: &[f64], mc: &MonteCarloParams) -> Result<()> {
    let n = w.n_vertices();
    check_len("potential", n, f.potential.len())?;
    if let Some(g) = f.terminal {
        check_len("terminal function", n, g.len())?;
        if g.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("terminal function must be >= 0".into()));
        }
    }
    if f.potential.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("potential must be finite".into()));
    }
    if mc.samples == 0 {
        return Err(Error::InvalidArgument("Monte Carlo sample budget is zero".into()));
    }
    if !(mc.confidence > 0.0 && mc.confidence < 1.0) {
        return Err(Error::InvalidArgument("confidence must lie in (0, 1)".into()));
    }
    if x >= n {
        return Err(Error::InvalidArgument(format!("start vertex {x} out of range")));
    }
    if let Some(t) = times.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("time must be >= 0 (got {t})")));
    }
    Ok(())
}

fn aggregate(start: usize, lw: &[f64], mc: &MonteCarloParams, comparisons: usize) -> Estimate {
    let n = lw.len() as f64;
    let z = bonferroni_z(mc.confidence, comparisons);
    let confidence = 1.0 - (1.0 - mc.confidence) / comparisons.max(1) as f64;
    let shift = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let overflow = shift > f64::MAX.ln();
    let mut out = Estimate {
        start,
        mean: 0.0,
        std_error: 0.0,
        lower: 0.0,
        upper: 0.0,
        confidence,
        samples: lw.len(),
        interval: IntervalMethod::Degenerate,
        max_log_weight: shift,
        overflow,
    };
    if shift == f64::NEG_INFINITY {
        return out;
    }
    if overflow {
        out.mean = f64::INFINITY;
        out.std_error = f64::INFINITY;
        out.upper = f64::INFINITY;
        return out;
    }
    // Shifted moments, exact summation order for reproducibility.
    let scaled: Vec<f64> = lw.iter().map(|l| (l - shift).exp()).collect();
    let m1 = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|s| (s - m1).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let m3 = scaled.iter().map(|s| (s - m1).powi(3)).sum::<f64>() / n;
    let scale = shift.exp();
    out.mean = m1 * scale;
    out.std_error = (var / n).sqrt() * scale;
    if var.sqrt() <= ROUNDING_SLACK * m1 {
        out.lower = out.mean * (1.0 - ROUNDING_SLACK);
        out.upper = out.mean * (1.0 + ROUNDING_SLACK);
        return out;
    }
    let skew_of_mean = m3 / var.powf(1.5) / n.sqrt();
    if skew_of_mean.abs() <= SKEW_LIMIT {
        // Delta method on log(mean).
        let rel = z * (var / n).sqrt() / m1;
        out.lower = out.mean * (-rel).exp() * (1.0 - ROUNDING_SLACK);
        out.upper = out.mean * rel.exp() * (1.0 + ROUNDING_SLACK);
        out.interval = IntervalMethod::LogNormal;
    } else {
        let (lo, hi) = bootstrap_interval(&scaled, mc, start, 1.0 - confidence);
        out.lower = lo * scale * (1.0 - ROUNDING_SLACK);
        out.upper = hi * scale * (1.0 + ROUNDING_SLACK);
        out.interval = IntervalMethod::Bootstrap;
    }
    out
}

/// Percentile bootstrap of the mean.
fn bootstrap_interval(x: &[f64], mc: &MonteCarloParams, start: usize, alpha: f64) -> (f64, f64) {
    let b = mc.bootstrap_resamples.max(20);
    let mut means: Vec<f64> = (0..b as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(mc.seed ^ 0x9e37_79b9_7f4a_7c15, start, r);
            let s: f64 = (0..x.len()).map(|_| x[rng.random_range(0..x.len())]).sum();
            s / x.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (b - 1) as f64).round() as usize).min(b - 1)];
    (q(alpha / 2.0), q(1.0 - alpha / 2.0))
}

/// `E_x[exp(int_0^t |v(X_s)| ds) 1_{t < zeta}]`.
pub fn feynman_kac(
    w: &WalkModel,
    v: &[f64],
    x: usize,
    t: f64,
    mc: &MonteCarloParams,
    comparisons: usize,
) -> Result<Estimate> {
    let abs: Vec<f64> = v.iter().map(|a| a.abs()).collect();
    let f = Functional {
        potential: &abs,
        terminal: None,
        killed: KilledPaths::Drop,
    };
    estimate(w, &f, x, t, mc, comparisons)
}

/// Start vertices for Monte Carlo suprema: all of them on small
/// manifolds, otherwise the configured set plus `argmax`.
pub fn start_set(n: usize, argmax: usize, mc: &MonteCarloParams) -> Vec<usize> {
    if n <= ALL_STARTS_LIMIT {
        return (0..n).collect();
    }
    let mut s: Vec<usize> = mc.starts.iter().copied().filter(|&x| x < n).collect();
    s.push(argmax);
    s.sort_unstable();
    s.dedup();
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KatoReport {
    pub t_grid: Vec<f64>,
    /// `D(w, t) = sup_x int_0^t sum_y p(s,x,y) |w(y)| vol_y ds`.
    pub modulus: Vec<f64>,
    pub argmax: Vec<usize>,
    /// Fitted `gamma` in `D(w, t) ~ t^gamma` over grid points with
    /// `t >= h^2`.
    pub decay_exponent: Option<f64>,
}

fn integrated_kernel_weight(lambda: f64, t: f64) -> f64 {
    if lambda == 0.0 {
        t
    } else {
        -(-lambda * t).exp_m1() / lambda
    }
}

/// Anything that can produce `D(w, t)` for the walk being certified.
pub trait KatoSource {
    fn n_vertices(&self) -> usize;
    fn kato(&self, w: &[f64], t_grid: &[f64]) -> Result<KatoReport>;
}

impl KatoSource for HeatOperator {
    fn n_vertices(&self) -> usize {
        self.manifold().n_vertices()
    }

    fn kato(&self, w: &[f64], t_grid: &[f64]) -> Result<KatoReport> {
        kato_modulus(self, w, t_grid)
    }
}

/// Dense route for small walks, killing included: `int_0^t e^{sQ} ds` is
/// the upper right block of `exp(t [[Q, I], [0, 0]])`.
impl KatoSource for WalkModel {
    fn n_vertices(&self) -> usize {
        WalkModel::n_vertices(self)
    }

    fn kato(&self, w: &[f64], t_grid: &[f64]) -> Result<KatoReport> {
        let n = WalkModel::n_vertices(self);
        check_len("potential", n, w.len())?;
        let abs = nalgebra::DVector::from_iterator(n, w.iter().map(|a| a.abs()));
        let q = self.generator();
        let mut block = DMatrix::zeros(2 * n, 2 * n);
        block.view_mut((0, 0), (n, n)).copy_from(&q);
        block.view_mut((0, n), (n, n)).fill_with_identity();
        let rows = t_grid
            .iter()
            .map(|&t| {
                check_time(t)?;
                let e = (&block * t).exp();
                let mut row: Vec<f64> = (e.view((0, n), (n, n)) * &abs).iter().copied().collect();
                for (x, r) in row.iter_mut().enumerate() {
                    if self.is_cemetery(x) {
                        *r = 0.0;
                    }
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(kato_report(t_grid, rows, 0.0))
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("time must be >= 0 (got {t})")));
    }
    Ok(())
}

/// Sup over start vertices per grid time, with the decay fit over times at
/// or above `fit_floor`.
fn kato_report(t_grid: &[f64], rows: Vec<Vec<f64>>, fit_floor: f64) -> KatoReport {
    let mut modulus = Vec::with_capacity(rows.len());
    let mut argmax = Vec::with_capacity(rows.len());
    for row in rows {
        let (i, d) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        modulus.push(d.max(0.0));
        argmax.push(i);
    }
    let pts: Vec<(f64, f64)> = t_grid
        .iter()
        .zip(&modulus)
        .filter(|(t, d)| **t > 0.0 && **t >= fit_floor && **d > 0.0)
        .map(|(t, d)| (t.ln(), d.ln()))
        .collect();
    KatoReport {
        t_grid: t_grid.to_vec(),
        modulus,
        argmax,
        decay_exponent: least_squares_slope(&pts),
    }
}

/// Exact Kato modulus from the eigen-expansion of the kernel.
pub fn kato_modulus(hop: &HeatOperator, w: &[f64], t_grid: &[f64]) -> Result<KatoReport> {
    let sd = hop.spectral().ok_or_else(|| {
        Error::Unsupported(format!(
            "the Kato modulus requires the spectral heat strategy (have {})",
            hop.strategy()
        ))
    })?;
    check_len("potential", hop.manifold().n_vertices(), w.len())?;
    let abs: Vec<f64> = w.iter().map(|a| a.abs()).collect();
    let rows = t_grid
        .iter()
        .map(|&t| {
            check_time(t)?;
            Ok(sd.apply_function(&abs, |l| integrated_kernel_weight(l, t)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(kato_report(t_grid, rows, hop.manifold().mesh_size().powi(2)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KasminskiiParams {
    pub delta: f64,
    /// Candidate `s` values; the largest admissible one is used.
    pub s_grid: Vec<f64>,
    pub test_times: Vec<f64>,
    pub mc: MonteCarloParams,
}

impl Default for KasminskiiParams {
    fn default() -> Self {
        Self {
            delta: 2.0,
            s_grid: (0..40).map(|k| 0.5f64.powi(k)).collect(),
            test_times: vec![0.5, 1.0, 2.0],
            mc: MonteCarloParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub t: f64,
    /// `delta * exp(t C)`.
    pub bound: f64,
    /// Largest estimate over the start set.
    pub sup_estimate: f64,
    /// Largest upper confidence limit over the start set.
    pub sup_upper: f64,
    pub argmax: usize,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KhasminskiiCheck {
    pub s: f64,
    /// Upper confidence limit of `sup_x E_x[exp(int_0^s |v|)]`.
    pub sup_upper: f64,
    pub sup_estimate: f64,
    /// `1 / (1 - D(v, s))`.
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KasminskiiCertificate {
    pub delta: f64,
    /// `1 - 1/delta`.
    pub threshold: f64,
    pub s: f64,
    pub d_at_s: f64,
    /// `log(1 / (1 - D(v, s))) / s`.
    pub c: f64,
    pub rows: Vec<CertificateRow>,
    pub khasminskii: KhasminskiiCheck,
    pub starts: Vec<usize>,
    pub samples: usize,
    pub confidence: f64,
    pub valid: bool,
}

impl KasminskiiCertificate {
    /// `delta * exp(t C)`.
    pub fn bound(&self, t: f64) -> f64 {
        self.delta * (t * self.c).exp()
    }
}

/// Picks `s` from the Kato modulus of `v`, derives `C(v, delta)` and checks
/// by Monte Carlo that `sup_x E_x[exp(int_0^t |v|) 1_{t < zeta}] <= delta
/// exp(t C)` at every test time, and that `sup_x E_x[exp(int_0^s |v|)] <=
/// 1 / (1 - D(v, s))`.
pub fn kasminskii_certify(
    w: &WalkModel,
    source: &dyn KatoSource,
    v: &[f64],
    p: &KasminskiiParams,
) -> Result<KasminskiiCertificate> {
    if !(p.delta > 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be > 1 (got {})", p.delta)));
    }
    if v.iter().any(|x| *x < 0.0) {
        return Err(Error::InvalidArgument("Kas'minskii certification needs v >= 0".into()));
    }
    check_len("walk vertices", source.n_vertices(), w.n_vertices())?;
    let threshold = 1.0 - 1.0 / p.delta;
    let kato = source.kato(v, &p.s_grid)?;
    let pick = p
        .s_grid
        .iter()
        .zip(&kato.modulus)
        .enumerate()
        .filter(|(_, (s, d))| **s > 0.0 && **d < threshold)
        .max_by(|a, b| a.1 .0.total_cmp(b.1 .0))
        .map(|(i, _)| i);
    let Some(i) = pick else {
        let smallest = kato.modulus.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::Solver(format!(
            "no s on the grid has D(v, s) < 1 - 1/delta = {threshold} (smallest D on the grid is {smallest})"
        )));
    };
    let (s, d) = (p.s_grid[i], kato.modulus[i]);
    let c = (1.0 / (1.0 - d)).ln() / s;
    let starts = start_set(w.n_vertices(), kato.argmax[i], &p.mc);
    let comparisons = starts.len() * (p.test_times.len() + 1);

    // Suprema over starts, per time; the test times share paths.
    let sup = |times: &[f64], killed: KilledPaths| -> Result<Vec<(f64, f64, usize)>> {
        let f = Functional {
            potential: v,
            terminal: None,
            killed,
        };
        let mut best = vec![(f64::NEG_INFINITY, f64::NEG_INFINITY, 0); times.len()];
        for &x in &starts {
            let es = estimate_at_times(w, &f, x, times, &p.mc, comparisons)?;
            for (b, e) in best.iter_mut().zip(es) {
                b.0 = b.0.max(e.mean);
                if e.upper > b.1 {
                    b.1 = e.upper;
                    b.2 = x;
                }
            }
        }
        Ok(best)
    };

    let mut order: Vec<usize> = (0..p.test_times.len()).collect();
    order.sort_by(|&a, &b| p.test_times[a].total_cmp(&p.test_times[b]));
    let sorted: Vec<f64> = order.iter().map(|&k| p.test_times[k]).collect();
    let sups = sup(&sorted, KilledPaths::Drop)?;
    let mut rows = Vec::with_capacity(p.test_times.len());
    for (k, &t) in p.test_times.iter().enumerate() {
        let (est, upper, argmax) = sups[order.iter().position(|&o| o == k).unwrap()];
        let bound = p.delta * (t * c).exp();
        rows.push(CertificateRow {
            t,
            bound,
            sup_estimate: est,
            sup_upper: upper,
            argmax,
            holds: below_bound(upper, bound),
        });
    }
    let (est, upper, _) = sup(&[s], KilledPaths::Keep)?[0];
    let kbound = 1.0 / (1.0 - d);
    let khasminskii = KhasminskiiCheck {
        s,
        sup_upper: upper,
        sup_estimate: est,
        bound: kbound,
        holds: below_bound(upper, kbound),
    };
    let valid = rows.iter().all(|r| r.holds) && khasminskii.holds;
    Ok(KasminskiiCertificate {
        delta: p.delta,
        threshold,
        s,
        d_at_s: d,
        c,
        rows,
        khasminskii,
        starts,
        samples: p.mc.samples,
        confidence: p.mc.confidence,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;
    use crate::heat::HeatParams;
    use std::sync::Arc;

    fn op(m: crate::DiscreteManifold) -> HeatOperator {
        HeatOperator::build(Arc::new(m), &HeatParams::spectral()).unwrap()
    }

    fn mc(samples: usize, seed: u64) -> MonteCarloParams {
        MonteCarloParams {
            samples,
            seed,
            ..MonteCarloParams::default()
        }
    }

    #[test]
    fn two_vertex_rates() {
        let hop = op(builtin::two_vertex());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        assert_eq!(w.jumps(0), &[(1, 0.5)]);
        assert_eq!(w.jumps(1), &[(0, 0.5)]);
    }

    #[test]
    fn generator_matches_heat() {
        let hop = op(builtin::random_graph(30, 1, 4).unwrap());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let q = w.generator();
        let h = hop.generator_dense();
        assert!((q + h).amax() < 1e-12);
    }

    #[test]
    fn rejects_negative_rates() {
        // Two flat obtuse triangles glued along their long edge: the cotangent
        // weight of that edge is negative.
        let m = crate::DiscreteManifold::mesh_from_positions(
            &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.05, 0.0], [0.5, -0.05, 0.0]],
            &[[0, 1, 2], [0, 3, 1]],
        )
        .unwrap();
        let hop = op(m);
        assert!(matches!(
            WalkModel::build(&hop, &Killing::default()),
            Err(Error::Validation(_))
        ));
        assert!(WalkModel::from_rates(vec![vec![(1, -1.0)], vec![]], &Killing::default()).is_err());
    }

    #[test]
    fn paths_are_well_formed() {
        let hop = op(builtin::cycle(8).unwrap());
        let w = WalkModel::build(&hop, &Killing {
            rates: Some(vec![0.5; 8]),
            cemetery: vec![],
        })
        .unwrap();
        let mut rng = stream_rng(1, 0, 0);
        for _ in 0..200 {
            let p = w.sample_path(0, 1.0, &mut rng);
            assert!(p.jump_times.windows(2).all(|x| x[0] < x[1]));
            assert!(p.jump_times.iter().all(|&t| t > 0.0 && t < 1.0));
            assert_eq!(p.vertices.len(), p.jump_times.len() + 1);
            if p.lifetime.is_finite() {
                assert!(p.position(p.lifetime).is_none());
            }
            assert_eq!(p.position(0.0), Some(0));
        }
    }

    #[test]
    fn constant_potential_is_exact() {
        let hop = op(builtin::cycle(6).unwrap());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let v = vec![1.3; 6];
        let e = feynman_kac(&w, &v, 2, 0.7, &mc(2000, 3), 1).unwrap();
        let exact = (1.3f64 * 0.7).exp();
        assert!(e.lower <= exact && exact <= e.upper, "{e:?}");
        assert_eq!(e.interval, IntervalMethod::Degenerate);
    }

    #[test]
    fn survival_probability_with_kill_rate() {
        let hop = op(builtin::cycle(5).unwrap());
        let w = WalkModel::build(&hop, &Killing {
            rates: Some(vec![0.8; 5]),
            cemetery: vec![],
        })
        .unwrap();
        let e = feynman_kac(&w, &[0.0; 5], 0, 1.5, &mc(50_000, 9), 1).unwrap();
        let exact = (-0.8f64 * 1.5).exp();
        assert!(e.lower <= exact && exact <= e.upper, "{e:?}");
    }

    #[test]
    fn feynman_kac_matches_matrix_exponential() {
        let hop = op(builtin::two_vertex());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let v = vec![1.0, 0.0];
        let t = 1.2;
        let a = (-(hop.generator_dense() - DMatrix::from_diagonal(&nalgebra::DVector::from_vec(v.clone())))
            * t)
            .exp();
        for x in 0..2 {
            let exact: f64 = a.row(x).sum();
            let e = feynman_kac(&w, &v, x, t, &mc(100_000, 5), 2).unwrap();
            assert!(e.lower <= exact && exact <= e.upper, "{x}: {exact} vs {e:?}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let hop = op(builtin::cycle(10).unwrap());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let v: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let a = feynman_kac(&w, &v, 3, 0.5, &mc(5000, 42), 1).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| feynman_kac(&w, &v, 3, 0.5, &mc(5000, 42), 1).unwrap());
        assert_eq!(a, b);
        let c = feynman_kac(&w, &v, 3, 0.5, &mc(5000, 43), 1).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn overflow_is_flagged() {
        let hop = op(builtin::two_vertex());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let e = feynman_kac(&w, &[1e6, 1e6], 0, 1.0, &mc(10, 1), 1).unwrap();
        assert!(e.overflow && e.mean.is_infinite());
        assert!(e.max_log_weight.is_finite());
    }

    #[test]
    fn zero_budget_is_an_error() {
        let hop = op(builtin::two_vertex());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        assert!(feynman_kac(&w, &[0.0, 0.0], 0, 1.0, &mc(0, 1), 1).is_err());
    }

    fn occupation(w: &WalkModel, x: usize, t: f64, p: &MonteCarloParams) -> Vec<Estimate> {
        let n = w.n_vertices();
        let zero = vec![0.0; n];
        (0..n)
            .map(|y| {
                let mut g = vec![0.0; n];
                g[y] = 1.0;
                let f = Functional {
                    potential: &zero,
                    terminal: Some(&g),
                    killed: KilledPaths::Drop,
                };
                estimate(w, &f, x, t, p, n).unwrap()
            })
            .collect()
    }

    #[test]
    fn occupation_matches_kernel() {
        let hop = op(builtin::cycle(6).unwrap());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let t = 0.004;
        let row = hop.kernel_row(t, 1).unwrap();
        for (y, e) in occupation(&w, 1, t, &mc(100_000, 17)).iter().enumerate() {
            let exact = row[y] * hop.manifold().volumes()[y];
            assert!(e.lower <= exact && exact <= e.upper, "{y}: {exact} vs {e:?}");
        }
    }

    #[test]
    fn occupation_chapman_kolmogorov() {
        let hop = op(builtin::cycle(5).unwrap());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let (s, t) = (0.003, 0.005);
        let p = mc(100_000, 23);
        let early = occupation(&w, 0, s, &p);
        let late = occupation(&w, 0, s + t, &p);
        let slack = early.iter().map(|e| e.upper - e.lower).fold(0.0, f64::max);
        for y in 0..5 {
            let pushed: f64 = (0..5)
                .map(|z| early[z].mean * hop.kernel_row(t, z).unwrap()[y] * hop.manifold().volumes()[y])
                .sum();
            assert!(late[y].lower - slack <= pushed && pushed <= late[y].upper + slack);
        }
    }

    #[test]
    fn cemetery_survival_matches_killed_kernel() {
        let hop = op(builtin::cycle(6).unwrap());
        let z = 4;
        let w = WalkModel::build(&hop, &Killing {
            rates: None,
            cemetery: vec![z],
        })
        .unwrap();
        let keep: Vec<usize> = (0..6).filter(|&y| y != z).collect();
        let h = hop.generator_dense().select_rows(&keep).select_columns(&keep);
        let t = 0.01;
        let pt = (-h * t).exp();
        for (i, &x) in keep.iter().enumerate() {
            let exact: f64 = pt.row(i).sum();
            let e = feynman_kac(&w, &[0.0; 6], x, t, &mc(100_000, 31), keep.len()).unwrap();
            assert!(e.lower <= exact && exact <= e.upper, "{x}: {exact} vs {e:?}");
        }
        let dead = feynman_kac(&w, &[0.0; 6], z, t, &mc(10, 1), 1).unwrap();
        assert_eq!(dead.mean, 0.0);
    }

    #[test]
    fn kato_constant_and_scaling() {
        let hop = op(builtin::cycle(12).unwrap());
        let grid = [0.0, 0.01, 0.1, 1.0];
        let r = kato_modulus(&hop, &[2.5; 12], &grid).unwrap();
        for (t, d) in grid.iter().zip(&r.modulus) {
            assert!((d - 2.5 * t).abs() < 1e-10);
        }
        let w: Vec<f64> = builtin::random_field(12, 1).real_parts();
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let a = kato_modulus(&hop, &w, &grid).unwrap();
        let b = kato_modulus(&hop, &w2, &grid).unwrap();
        for (x, y) in a.modulus.iter().zip(&b.modulus) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        assert!(a.modulus.windows(2).all(|p| p[0] <= p[1]));
        let max = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(grid.iter().zip(&a.modulus).all(|(t, d)| *d <= t * max + 1e-12));
    }

    #[test]
    fn kato_two_vertex_closed_form() {
        // Integrated kernel row of vertex 0 against the indicator of vertex
        // 0: (t + (1 - e^{-t})) / 2 from eigenvalues {0, 1}.
        let hop = op(builtin::two_vertex());
        for t in [0.1, 1.0, 3.0] {
            let r = kato_modulus(&hop, &[1.0, 0.0], &[t]).unwrap();
            let exact = 0.5 * (t + 1.0 - (-t).exp());
            assert!((r.modulus[0] - exact).abs() < 1e-12);
            assert_eq!(r.argmax[0], 0);
        }
    }

    #[test]
    fn dense_walk_modulus_matches_spectral() {
        let hop = op(builtin::random_graph(12, 1, 2).unwrap());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let v = builtin::random_field(12, 5).real_parts();
        let grid = [0.0, 0.05, 0.5, 2.0];
        let a = kato_modulus(&hop, &v, &grid).unwrap();
        let b = w.kato(&v, &grid).unwrap();
        for (x, y) in a.modulus.iter().zip(&b.modulus) {
            assert!((x - y).abs() < 1e-10 * (1.0 + x));
        }
    }

    #[test]
    fn killed_walk_modulus_is_smaller() {
        let hop = op(builtin::cycle(6).unwrap());
        let free = WalkModel::build(&hop, &Killing::default()).unwrap();
        let killed = WalkModel::build(&hop, &Killing {
            rates: Some(vec![3.0; 6]),
            cemetery: vec![0],
        })
        .unwrap();
        let a = free.kato(&[1.0; 6], &[1.0]).unwrap();
        let b = killed.kato(&[1.0; 6], &[1.0]).unwrap();
        assert!((a.modulus[0] - 1.0).abs() < 1e-10);
        // Kill rate 3 alone caps the expected lifetime at 1/3.
        assert!(b.modulus[0] < (1.0 - (-3.0f64).exp()) / 3.0 + 1e-12);
    }

    #[test]
    fn kato_requires_spectral() {
        let hop = HeatOperator::build(Arc::new(builtin::cycle(8).unwrap()), &HeatParams::stepper(8)).unwrap();
        assert!(matches!(kato_modulus(&hop, &[0.0; 8], &[0.1]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn zero_potential_certificate() {
        let hop = op(builtin::cycle(6).unwrap());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let p = KasminskiiParams {
            mc: mc(200, 1),
            ..KasminskiiParams::default()
        };
        let cert = kasminskii_certify(&w, &hop, &[0.0; 6], &p).unwrap();
        assert_eq!(cert.c, 0.0);
        assert!(cert.valid);
    }

    #[test]
    fn certificate_refused_when_potential_too_large() {
        let hop = op(builtin::cycle(6).unwrap());
        let w = WalkModel::build(&hop, &Killing::default()).unwrap();
        let p = KasminskiiParams {
            s_grid: vec![1.0, 0.5],
            mc: mc(10, 1),
            ..KasminskiiParams::default()
        };
        let err = kasminskii_certify(&w, &hop, &[10.0; 6], &p).unwrap_err().to_string();
        assert!(err.contains("0.5"), "{err}");
    }

    #[test]
    fn start_sets() {
        let p = MonteCarloParams {
            starts: vec![3, 999, 3],
            ..MonteCarloParams::default()
        };
        assert_eq!(start_set(5, 2, &p).len(), 5);
        assert_eq!(start_set(500, 7, &p), vec![3, 7]);
    }

    #[test]
    fn bonferroni_quantiles() {
        assert!((bonferroni_z(0.95, 1) - 1.959964).abs() < 1e-5);
        assert!((bonferroni_z(0.99, 1) - 2.575829).abs() < 1e-5);
        assert!(bonferroni_z(0.99, 10) > bonferroni_z(0.99, 1));
    }
}
