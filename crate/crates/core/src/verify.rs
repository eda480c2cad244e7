//! Independent checks: Monte-Carlo propagation, finite differences and
//! convergence-rate fits.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::discretize::{NewtonConfig, PhysicalDel};
use crate::error::{Error, Result};
use crate::gpc::{Distribution, GpcModel};
use crate::models::{Dynamics, Mechanical};

/// Samples processed per reduction chunk. Fixed so results do not depend on
/// the thread count.
const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McIntegrator {
    Rk4,
    Euler,
    /// Classical DEL step on the physical system.
    Del,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub integrator: McIntegrator,
    /// Integration substeps per control interval.
    pub substeps: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
            integrator: McIntegrator::Rk4,
            substeps: 10,
        }
    }
}

/// Sample moments per step (`K_f + 1` entries) and per state.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<DVector<f64>>,
    /// Unbiased sample variance.
    pub variance: Vec<DVector<f64>>,
    pub third: Vec<DVector<f64>>,
    pub se_mean: Vec<DVector<f64>>,
    pub se_variance: Vec<DVector<f64>>,
    pub se_third: Vec<DVector<f64>>,
    /// Samples that entered the statistics.
    pub n_samples: usize,
    pub failed: usize,
    pub seed: u64,
}

impl McEstimate {
    /// `mean ± 3σ` of state `i` at step `k`.
    pub fn band(&self, k: usize, i: usize) -> (f64, f64) {
        let s = self.variance[k][i].max(0.0).sqrt();
        (self.mean[k][i] - 3.0 * s, self.mean[k][i] + 3.0 * s)
    }
}

/// Random inputs of one realization: ξ per uncertain input, in the order
/// parameters then initial states.
fn sample_xi(dists: &[&Distribution], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    dists
        .iter()
        .map(|d| match d {
            Distribution::Gaussian { .. } => StandardNormal.sample(rng),
            Distribution::Uniform { .. } => unit.sample(rng),
            Distribution::Deterministic(_) => 0.0,
        })
        .collect()
}

/// Power sums of `x − shift` up to order 6, per step and state.
#[derive(Clone)]
struct PowerSums {
    n: usize,
    sums: Vec<[DVector<f64>; 6]>,
}

impl PowerSums {
    fn new(steps: usize, dim: usize) -> Self {
        Self {
            n: 0,
            sums: (0..steps).map(|_| std::array::from_fn(|_| DVector::zeros(dim))).collect(),
        }
    }

    fn add(&mut self, traj: &[DVector<f64>], shift: &[DVector<f64>]) {
        self.n += 1;
        for (k, x) in traj.iter().enumerate() {
            let y = x - &shift[k];
            let mut p = y.clone();
            for o in 0..6 {
                self.sums[k][o] += &p;
                if o < 5 {
                    p.component_mul_assign(&y);
                }
            }
        }
    }

    fn merge(&mut self, other: &PowerSums) {
        self.n += other.n;
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for o in 0..6 {
                a[o] += &b[o];
            }
        }
    }
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn estimate(ps: &PowerSums, shift: &[DVector<f64>], failed: usize, seed: u64) -> McEstimate {
    let n = ps.n as f64;
    let mut out = McEstimate {
        mean: vec![],
        variance: vec![],
        third: vec![],
        se_mean: vec![],
        se_variance: vec![],
        se_third: vec![],
        n_samples: ps.n,
        failed,
        seed,
    };
    for (k, s) in ps.sums.iter().enumerate() {
        let dim = s[0].len();
        let mut mean = DVector::zeros(dim);
        let mut var = DVector::zeros(dim);
        let mut third = DVector::zeros(dim);
        let mut se_m = DVector::zeros(dim);
        let mut se_v = DVector::zeros(dim);
        let mut se_t = DVector::zeros(dim);
        for i in 0..dim {
            // raw moments of the shifted variable
            let raw: Vec<f64> = std::iter::once(1.0).chain((0..6).map(|o| s[o][i] / n)).collect();
            let m1 = raw[1];
            let central = |order: usize| -> f64 {
                (0..=order)
                    .map(|j| binom(order, j) * raw[j] * (-m1).powi((order - j) as i32))
                    .sum()
            };
            let (c2, c3, c4, c6) = (central(2).max(0.0), central(3), central(4), central(6));
            mean[i] = shift[k][i] + m1;
            var[i] = if ps.n > 1 { c2 * n / (n - 1.0) } else { 0.0 };
            third[i] = c3;
            se_m[i] = (c2 / n).sqrt();
            se_v[i] = ((c4 - c2 * c2).max(0.0) / n).sqrt();
            se_t[i] = ((c6 - c3 * c3 - 6.0 * c4 * c2 + 9.0 * c2 * c2 * c2).max(0.0) / n).sqrt();
        }
        out.mean.push(mean);
        out.variance.push(var);
        out.third.push(third);
        out.se_mean.push(se_m);
        out.se_variance.push(se_v);
        out.se_third.push(se_t);
    }
    out
}

fn rk4<M: Dynamics>(model: &M, x: &DVector<f64>, u: &[f64], t: f64, h: f64, p: &[f64]) -> DVector<f64> {
    let f = |x: &DVector<f64>, t: f64| DVector::from_vec(model.rhs::<f64>(x.as_slice(), u, t, p));
    let k1 = f(x, t);
    let k2 = f(&(x + &k1 * (h / 2.0)), t + h / 2.0);
    let k3 = f(&(x + &k2 * (h / 2.0)), t + h / 2.0);
    let k4 = f(&(x + &k3 * h), t + h);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Propagates one physical realization under zero-order-hold controls with
/// RK4 or explicit Euler. Returns `None` on blow-up.
pub fn propagate_sample<M: Dynamics>(
    model: &M,
    params: &[f64],
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    dt: f64,
    substeps: usize,
    integrator: McIntegrator,
) -> Option<Vec<DVector<f64>>> {
    let h = dt / substeps as f64;
    let mut x = x0.clone();
    let mut out = vec![x.clone()];
    for (k, u) in controls.iter().enumerate() {
        for s in 0..substeps {
            let t = k as f64 * dt + s as f64 * h;
            x = match integrator {
                McIntegrator::Rk4 => rk4(model, &x, u.as_slice(), t, h, params),
                McIntegrator::Euler => {
                    let f = DVector::from_vec(model.rhs::<f64>(x.as_slice(), u.as_slice(), t, params));
                    &x + f * h
                }
                McIntegrator::Del => return None,
            };
            if !x.iter().all(|v| v.is_finite()) || model.validate_state(x.as_slice()).is_err() {
                return None;
            }
        }
        out.push(x.clone());
    }
    Some(out)
}

/// Same as [`propagate_sample`] with the classical DEL step; the returned
/// trajectory is in `(q, v)` with `v` recovered from the momenta.
pub fn propagate_sample_del<M: Mechanical>(
    model: &M,
    params: &[f64],
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    dt: f64,
    substeps: usize,
) -> Option<Vec<DVector<f64>>> {
    let nq = model.config_dim();
    let h = dt / substeps as f64;
    let del = PhysicalDel {
        mech: model,
        params: params.to_vec(),
        dt: h,
        newton: NewtonConfig::default(),
    };
    let mut q = x0.rows(0, nq).into_owned();
    let mut p = del.momentum(q.as_slice(), x0.rows(nq, nq).into_owned().as_slice());
    let to_state = |q: &DVector<f64>, p: &DVector<f64>| -> Option<DVector<f64>> {
        let v = crate::models::mass_matrix(model, q.as_slice(), &vec![0.0; nq], params)
            .lu()
            .solve(p)?;
        Some(DVector::from_iterator(2 * nq, q.iter().chain(v.iter()).copied()))
    };
    let mut out = vec![x0.clone()];
    for u in controls {
        for _ in 0..substeps {
            let (q1, p1) = del.step(q.as_slice(), p.as_slice(), u.as_slice()).ok()?;
            q = q1;
            p = p1;
        }
        let x = to_state(&q, &p)?;
        if !x.iter().all(|v| v.is_finite()) || model.validate_state(x.as_slice()).is_err() {
            return None;
        }
        out.push(x);
    }
    Some(out)
}

fn run_mc<M: Dynamics>(
    model: &M,
    controls: &[DVector<f64>],
    config: &McConfig,
    propagate: impl Fn(&[f64], &DVector<f64>) -> Option<Vec<DVector<f64>>> + Sync,
) -> Result<McEstimate> {
    if config.n_samples < 2 {
        return Err(Error::InvalidArgument(format!("n_samples must be at least 2, got {}", config.n_samples)));
    }
    if config.substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be positive".into()));
    }
    let params = model.param_distributions();
    let inits = model.initial_distributions();
    for d in params.iter().chain(&inits) {
        d.validate()?;
    }
    let all: Vec<&Distribution> = params.iter().chain(&inits).collect();
    let realize = |xi: &[f64]| -> (Vec<f64>, DVector<f64>) {
        let p: Vec<f64> = params.iter().zip(xi).map(|(d, &z)| d.at(z)).collect();
        let x0 = DVector::from_iterator(inits.len(), inits.iter().zip(&xi[params.len()..]).map(|(d, &z)| d.at(z)));
        (p, x0)
    };
    let (p_nom, x_nom) = realize(&vec![0.0; all.len()]);
    let shift = propagate(&p_nom, &x_nom).ok_or(Error::NonFinite("nominal Monte-Carlo trajectory"))?;
    let steps = controls.len() + 1;
    let dim = x_nom.len();

    let n_chunks = config.n_samples.div_ceil(CHUNK);
    let chunks: Vec<(PowerSums, usize)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut ps = PowerSums::new(steps, dim);
            let mut failed = 0;
            for s in c * CHUNK..((c + 1) * CHUNK).min(config.n_samples) {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(s as u64);
                let xi = sample_xi(&all, &mut rng);
                let (p, x0) = realize(&xi);
                match propagate(&p, &x0) {
                    Some(traj) => ps.add(&traj, &shift),
                    None => failed += 1,
                }
            }
            (ps, failed)
        })
        .collect();
    let mut total = PowerSums::new(steps, dim);
    let mut failed = 0;
    for (ps, f) in &chunks {
        total.merge(ps);
        failed += f;
    }
    if failed * 100 > config.n_samples {
        return Err(Error::SampleBlowUp {
            failed,
            total: config.n_samples,
        });
    }
    if total.n < 2 {
        return Err(Error::InsufficientData("fewer than two successful samples".into()));
    }
    Ok(estimate(&total, &shift, failed, config.seed))
}

/// Monte-Carlo moments of the physical system under the model's input
/// distributions and zero-order-hold `controls`. [`McIntegrator::Del`]
/// requires [`mc_propagate_mechanical`].
pub fn mc_propagate<M: Dynamics>(model: &M, controls: &[DVector<f64>], dt: f64, config: &McConfig) -> Result<McEstimate> {
    if config.integrator == McIntegrator::Del {
        return Err(Error::InvalidArgument("DEL sampling needs a mechanical model".into()));
    }
    run_mc(model, controls, config, |p, x0| {
        propagate_sample(model, p, x0, controls, dt, config.substeps, config.integrator)
    })
}

/// [`mc_propagate`] for mechanical models, also accepting the DEL integrator.
pub fn mc_propagate_mechanical<M: Mechanical>(
    model: &M,
    controls: &[DVector<f64>],
    dt: f64,
    config: &McConfig,
) -> Result<McEstimate> {
    match config.integrator {
        McIntegrator::Del => run_mc(model, controls, config, |p, x0| {
            propagate_sample_del(model, p, x0, controls, dt, config.substeps)
        }),
        _ => mc_propagate(model, controls, dt, config),
    }
}

/// Replays zero-order-hold `controls` on the projected coefficient ODE with
/// RK4 at `dt / substeps`, returning the coefficients at every control step.
pub fn gpc_replay<M: Dynamics>(
    gpc: &GpcModel<M>,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    dt: f64,
    substeps: usize,
) -> Result<Vec<DVector<f64>>> {
    if substeps == 0 || !(dt > 0.0) {
        return Err(Error::InvalidArgument("replay needs positive dt and substeps".into()));
    }
    let h = dt / substeps as f64;
    let mut x = x0.clone();
    let mut out = vec![x.clone()];
    for (k, u) in controls.iter().enumerate() {
        for s in 0..substeps {
            let t = k as f64 * dt + s as f64 * h;
            let k1 = gpc.galerkin_rhs(&x, u, t)?;
            let k2 = gpc.galerkin_rhs(&(&x + &k1 * (h / 2.0)), u, t + h / 2.0)?;
            let k3 = gpc.galerkin_rhs(&(&x + &k2 * (h / 2.0)), u, t + h / 2.0)?;
            let k4 = gpc.galerkin_rhs(&(&x + &k3 * h), u, t + h)?;
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gPC replay"));
        }
        out.push(x.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finite differences

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// `‖A − B‖_max / ‖B‖_max` at the best step.
    pub max_rel_error: f64,
    pub step: f64,
}

/// Default step sweep for central differences.
pub const FD_STEPS: [f64; 5] = [1e-3, 3e-4, 1e-4, 3e-5, 1e-5];

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Picks the step (plain central difference or its Richardson extrapolation)
/// with the smallest relative error.
fn sweep(analytic: &[f64], steps: &[f64], numeric: impl Fn(f64) -> Vec<f64>) -> FdReport {
    let mut best = FdReport {
        max_rel_error: f64::INFINITY,
        step: f64::NAN,
    };
    for &h in steps {
        let d1 = numeric(h);
        let d2 = numeric(h / 2.0);
        let rich: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| (4.0 * b - a) / 3.0).collect();
        for cand in [&d1, &rich] {
            let e = rel_error(analytic, cand);
            if e < best.max_rel_error {
                best = FdReport { max_rel_error: e, step: h };
            }
        }
    }
    best
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian(f: &impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let y = f(x);
    let mut j = DMatrix::zeros(y.len(), x.len());
    for a in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[a] += h;
        xm[a] -= h;
        j.set_column(a, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

pub fn check_jacobian(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    analytic: &DMatrix<f64>,
    steps: &[f64],
) -> FdReport {
    sweep(analytic.as_slice(), steps, |h| fd_jacobian(&f, x, h).as_slice().to_vec())
}

/// Hessian of a scalar function via central differences of second order.
pub fn fd_hessian(f: &impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hm = DMatrix::zeros(n, n);
    let at = |da: usize, sa: f64, db: usize, sb: f64| {
        let mut y = x.clone();
        y[da] += sa;
        y[db] += sb;
        f(&y)
    };
    for a in 0..n {
        for b in a..n {
            let v = (at(a, h, b, h) - at(a, h, b, -h) - at(a, -h, b, h) + at(a, -h, b, -h)) / (4.0 * h * h);
            hm[(a, b)] = v;
            hm[(b, a)] = v;
        }
    }
    hm
}

pub fn check_hessian(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, analytic: &DMatrix<f64>, steps: &[f64]) -> FdReport {
    sweep(analytic.as_slice(), steps, |h| fd_hessian(&f, x, h).as_slice().to_vec())
}

/// Second directional derivative `d²/ds² f(x + s d)` at `s = 0` against an
/// analytic value, e.g. `Σ_ab T[:, a, b] d_a d_b`.
pub fn check_directional_second(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    d: &DVector<f64>,
    analytic: &DVector<f64>,
    steps: &[f64],
) -> FdReport {
    let f0 = f(x);
    sweep(analytic.as_slice(), steps, |h| {
        ((f(&(x + d * h)) - &f0 * 2.0 + f(&(x - d * h))) / (h * h))
            .as_slice()
            .to_vec()
    })
}

// ---------------------------------------------------------------------------
// Convergence rate

/// Values at or below this are treated as converged to rounding.
pub const RATE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub exponent: f64,
    /// Pairs `(e_{l−1}, e_l)` used in the fit.
    pub pairs: usize,
}

/// Least-squares slope of `log e_l` against `log e_{l−1}` over consecutive
/// entries above [`RATE_FLOOR`]. With `tail = Some(w)`, only the last `w`
/// such pairs are used.
pub fn convergence_rate(history: &[f64], tail: Option<usize>) -> Result<RateFit> {
    let usable: Vec<f64> = history
        .iter()
        .copied()
        .take_while(|e| e.is_finite() && *e > RATE_FLOOR)
        .collect();
    if usable.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 history points above {RATE_FLOOR:e}, got {}",
            usable.len()
        )));
    }
    let mut pairs: Vec<(f64, f64)> = usable.windows(2).map(|w| (w[0].ln(), w[1].ln())).collect();
    if let Some(w) = tail {
        let w = w.max(2);
        if pairs.len() > w {
            pairs.drain(..pairs.len() - w);
        }
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("degenerate history".into()));
    }
    Ok(RateFit {
        exponent: sxy / sxx,
        pairs: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearDecay;

    #[test]
    fn rates_of_synthetic_sequences() {
        let mut q = vec![0.5];
        while *q.last().unwrap() > 1e-14 {
            let e = q.last().unwrap();
            q.push(e * e);
        }
        assert!((convergence_rate(&q, None).unwrap().exponent - 2.0).abs() < 0.01);
        let lin: Vec<f64> = (0..30).map(|l| 0.5f64.powi(l)).collect();
        assert!((convergence_rate(&lin, None).unwrap().exponent - 1.0).abs() < 0.01);
        assert!(convergence_rate(&[1e-3, 1e-13], None).is_err());
    }

    #[test]
    fn quadratic_function_derivatives_are_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = |x: &DVector<f64>| 0.5 * x.dot(&(&a * x)) + x[0];
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert!(check_hessian(f, &x, &a, &FD_STEPS).max_rel_error < 1e-9);
        let g = |x: &DVector<f64>| &a * x;
        assert!(check_jacobian(g, &x, &a, &FD_STEPS).max_rel_error < 1e-9);
    }

    #[test]
    fn deterministic_model_has_zero_variance() {
        let m = LinearDecay {
            lambda: Distribution::Deterministic(2.0),
            x0: Distribution::Deterministic(1.0),
        };
        let us = vec![DVector::from_vec(vec![0.1]); 5];
        let est = mc_propagate(&m, &us, 0.1, &McConfig { n_samples: 10, ..Default::default() }).unwrap();
        assert!(est.variance.iter().all(|v| v[0] == 0.0));
        assert!(est.se_mean.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn seeds_reproduce() {
        let m = LinearDecay {
            lambda: Distribution::Gaussian { mean: 1.0, std: 0.2 },
            x0: Distribution::Uniform { min: 0.5, max: 1.5 },
        };
        let us = vec![DVector::zeros(1); 4];
        let cfg = McConfig {
            n_samples: 1500,
            seed: 7,
            ..Default::default()
        };
        let a = mc_propagate(&m, &us, 0.1, &cfg).unwrap();
        let b = mc_propagate(&m, &us, 0.1, &cfg).unwrap();
        assert_eq!(a, b);
        let c = mc_propagate(&m, &us, 0.1, &McConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.mean, c.mean);
        for k in 0..5 {
            let (lo, hi) = a.band(k, 0);
            assert!(lo <= a.mean[k][0] && a.mean[k][0] <= hi);
        }
        assert!(mc_propagate(&m, &us, 0.1, &McConfig { n_samples: 1, ..cfg }).is_err());
    }
}
