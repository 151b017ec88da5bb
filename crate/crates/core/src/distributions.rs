//! Forecast-distribution kernels and the proper scores used as training
//! losses: the (lower-)truncated logistic with its closed-form CRPS, and the
//! Bernstein-polynomial quantile function with the quantile (pinball) loss.

use serde::{Deserialize, Serialize};

use crate::domain::{ProbabilityForecast, ThresholdSet};
use crate::error::{Error, Result};

/// Bisection tolerance (in probability) for inverting a Bernstein quantile function.
pub const BISECTION_TOL: f64 = 1e-8;
pub const DEFAULT_BERNSTEIN_DEGREE: usize = 12;

// Below this standardized truncation point the truncation mass is < 1e-17
// and the untruncated formulas are used.
const NEGLIGIBLE_TRUNCATION: f64 = -40.0;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 35.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// ln(1 + q) - q / (1 + q), accurate for small q.
fn log1p_minus_ratio(q: f64) -> f64 {
    if q < 0.05 {
        // sum_{k>=2} (-1)^k (k-1)/k q^k
        let mut term = q * q;
        let mut acc = 0.0;
        for k in 2..40 {
            let c = (k as f64 - 1.0) / k as f64;
            let t = c * term;
            acc += if k % 2 == 0 { t } else { -t };
            if t < 1e-18 * acc.abs() {
                break;
            }
            term *= q;
        }
        acc
    } else {
        q.ln_1p() - q / (1.0 + q)
    }
}

/// Logistic distribution truncated from below at `lower_bound`.
/// `lower_bound = -inf` gives the plain logistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedLogistic {
    pub location: f64,
    pub scale: f64,
    pub lower_bound: f64,
}

/// CRPS value together with its partial derivatives in location and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrpsGrad {
    pub crps: f64,
    pub d_location: f64,
    pub d_scale: f64,
    /// Observation lay below the truncation point and was scored at the bound.
    pub censored: bool,
}

impl TruncatedLogistic {
    pub fn new(location: f64, scale: f64, lower_bound: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        if !location.is_finite() || lower_bound.is_nan() || lower_bound == f64::INFINITY {
            return Err(Error::InvalidArgument("non-finite logistic parameters".into()));
        }
        Ok(TruncatedLogistic {
            location,
            scale,
            lower_bound,
        })
    }

    /// Zero-truncated logistic, the gust forecast distribution.
    pub fn zero_truncated(location: f64, scale: f64) -> Result<Self> {
        Self::new(location, scale, 0.0)
    }

    fn std_lower(&self) -> f64 {
        (self.lower_bound - self.location) / self.scale
    }

    /// P(X > x).
    pub fn sf(&self, x: f64) -> f64 {
        if x <= self.lower_bound {
            return 1.0;
        }
        let z = (x - self.location) / self.scale;
        let a = self.std_lower();
        // S(z) / S(a) with S(u) = exp(-softplus(u))
        (softplus(a) - softplus(z)).exp().min(1.0)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lower_bound {
            return 0.0;
        }
        let sf = self.sf(x);
        if sf < 0.5 {
            return 1.0 - sf;
        }
        let z = (x - self.location) / self.scale;
        let a = self.std_lower();
        let fa = if a == f64::NEG_INFINITY { 0.0 } else { sigmoid(a) };
        ((sigmoid(z) - fa) / sigmoid(-a)).clamp(0.0, 1.0)
    }

    pub fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return self.lower_bound;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        let a = self.std_lower();
        let s = (1.0 - p) * (-softplus(a)).exp();
        let z = (-s).ln_1p() - s.ln();
        self.location + self.scale * z
    }

    /// Closed-form CRPS. Observations below the bound are scored at the bound.
    pub fn crps(&self, y: f64) -> f64 {
        self.crps_grad(y).crps
    }

    pub fn crps_grad(&self, y: f64) -> CrpsGrad {
        let censored = y < self.lower_bound;
        let y = if censored { self.lower_bound } else { y };
        let s = self.scale;
        let w = (y - self.location) / s;
        let a = self.std_lower();
        let (h, hw, ha) = if a < NEGLIGIBLE_TRUNCATION {
            let h = w + 2.0 * softplus(-w) - 1.0;
            (h, 2.0 * sigmoid(w) - 1.0, 0.0)
        } else {
            // mass above the bound and its complement
            let p = sigmoid(-a);
            let one_minus_p = sigmoid(a);
            let spa = softplus(-a);
            let spw = softplus(-w);
            let d = if a < 0.0 {
                spa - p
            } else {
                log1p_minus_ratio((-a).exp())
            };
            let tail = spa - spw;
            let h = (w - a) - 2.0 * tail / p + d / (p * p);
            let hw = 1.0 - 2.0 * sigmoid(-w) / p;
            let ha = 2.0 * one_minus_p * (d / (p * p) - tail / p);
            (h, hw, ha)
        };
        CrpsGrad {
            crps: s * h.max(0.0),
            d_location: -(hw + ha),
            d_scale: if ha == 0.0 { h - w * hw } else { h - w * hw - a * ha },
            censored,
        }
    }
}

/// Quantile function Q(tau) = sum_j alpha_j C(d,j) tau^j (1-tau)^(d-j) with
/// nondecreasing coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernsteinQuantile {
    coefficients: Vec<f64>,
}

impl BernsteinQuantile {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() < 2 {
            return Err(Error::InvalidArgument("Bernstein degree must be at least 1".into()));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Bernstein coefficient".into()));
        }
        if coefficients.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(
                "Bernstein coefficients must be nondecreasing".into(),
            ));
        }
        Ok(BernsteinQuantile { coefficients })
    }

    /// Builds alpha_0 = `first`, alpha_j = alpha_{j-1} + softplus(raw_j).
    pub fn from_increments(first: f64, raw_increments: &[f64]) -> Result<Self> {
        let mut coefficients = Vec::with_capacity(raw_increments.len() + 1);
        let mut acc = first;
        coefficients.push(acc);
        for &r in raw_increments {
            acc += softplus(r);
            coefficients.push(acc);
        }
        Self::new(coefficients)
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn quantile(&self, tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
        }
        Ok(self.eval(tau))
    }

    pub(crate) fn eval(&self, tau: f64) -> f64 {
        bernstein_basis(self.degree(), tau)
            .iter()
            .zip(&self.coefficients)
            .map(|(b, a)| b * a)
            .sum()
    }

    /// 1 - inf{tau : Q(tau) >= t}.
    pub fn exceedance(&self, threshold: f64) -> f64 {
        let d = self.degree();
        if self.coefficients[0] >= threshold {
            return 1.0;
        }
        if self.coefficients[d] < threshold {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) >= threshold {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        1.0 - hi
    }

    pub fn pinball_loss_mean(&self, y: f64, tau_grid: &[f64]) -> Result<f64> {
        check_tau_grid(tau_grid)?;
        let total: f64 = tau_grid.iter().map(|&t| pinball(y - self.eval(t), t)).sum();
        Ok(total / tau_grid.len() as f64)
    }
}

fn check_tau_grid(tau_grid: &[f64]) -> Result<()> {
    if tau_grid.is_empty() {
        return Err(Error::InvalidArgument("empty quantile-level grid".into()));
    }
    if tau_grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::InvalidArgument("quantile levels must lie in (0, 1)".into()));
    }
    Ok(())
}

/// rho_tau(u) = u (tau - 1{u < 0}).
#[inline]
pub fn pinball(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Bernstein basis values b_{j,d}(tau), j = 0..=d.
pub fn bernstein_basis(degree: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; degree + 1];
    bernstein_basis_into(degree, tau, &mut out);
    out
}

pub(crate) fn bernstein_basis_into(degree: usize, tau: f64, out: &mut [f64]) {
    // de Casteljau-style triangular build keeps every entry a convex weight
    out[0] = 1.0;
    for k in 1..=degree {
        let mut prev = 0.0;
        for j in 0..k {
            let cur = out[j];
            out[j] = prev + (1.0 - tau) * cur;
            prev = tau * cur;
        }
        out[k] = prev;
    }
}

/// Equidistant quantile levels 1/(n+1), ..., n/(n+1).
pub fn tau_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

pub fn default_tau_grid() -> Vec<f64> {
    tau_grid(99)
}

/// Precomputed basis matrix for a fixed tau grid, used in BQN training.
#[derive(Debug, Clone)]
pub struct PinballBasis {
    pub taus: Vec<f64>,
    pub degree: usize,
    /// `taus.len() x (degree + 1)`, row-major.
    pub basis: Vec<f64>,
}

impl PinballBasis {
    pub fn new(taus: Vec<f64>, degree: usize) -> Result<Self> {
        check_tau_grid(&taus)?;
        if degree < 1 {
            return Err(Error::InvalidArgument("Bernstein degree must be at least 1".into()));
        }
        let mut basis = vec![0.0; taus.len() * (degree + 1)];
        for (i, &t) in taus.iter().enumerate() {
            bernstein_basis_into(degree, t, &mut basis[i * (degree + 1)..(i + 1) * (degree + 1)]);
        }
        Ok(PinballBasis { taus, degree, basis })
    }

    /// Mean pinball loss of coefficients `alpha` at `y`; accumulates
    /// d loss / d alpha_j into `grad`.
    pub fn loss_grad(&self, alpha: &[f64], y: f64, grad: &mut [f64]) -> f64 {
        let m = self.degree + 1;
        let n = self.taus.len() as f64;
        let mut total = 0.0;
        for (i, &tau) in self.taus.iter().enumerate() {
            let row = &self.basis[i * m..(i + 1) * m];
            let q: f64 = row.iter().zip(alpha).map(|(b, a)| b * a).sum();
            let u = y - q;
            total += pinball(u, tau);
            let slope = if u < 0.0 { tau - 1.0 } else { tau };
            let g = -slope / n;
            for (gj, b) in grad.iter_mut().zip(row) {
                *gj += g * b;
            }
        }
        total / n
    }
}

/// Forecast distribution emitted by any distribution-based method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictiveDistribution {
    TruncatedLogistic(TruncatedLogistic),
    Bernstein(BernsteinQuantile),
    EnsembleEmpirical {
        members: Vec<f64>,
    },
    /// Ensemble mean plus a logistic bias distribution, truncated at zero.
    BiasShiftedLogistic {
        ensemble_mean: f64,
        bias_location: f64,
        bias_scale: f64,
    },
}

impl PredictiveDistribution {
    pub fn sf(&self, t: f64) -> f64 {
        match self {
            PredictiveDistribution::TruncatedLogistic(d) => d.sf(t),
            PredictiveDistribution::Bernstein(b) => b.exceedance(t),
            PredictiveDistribution::EnsembleEmpirical { members } => {
                members.iter().filter(|&&m| m > t).count() as f64 / members.len() as f64
            }
            PredictiveDistribution::BiasShiftedLogistic {
                ensemble_mean,
                bias_location,
                bias_scale,
            } => TruncatedLogistic {
                location: ensemble_mean + bias_location,
                scale: *bias_scale,
                lower_bound: 0.0,
            }
            .sf(t),
        }
    }

    /// The zero-truncated logistic equivalent of a bias-shifted forecast.
    pub fn as_truncated_logistic(&self) -> Option<TruncatedLogistic> {
        match self {
            PredictiveDistribution::TruncatedLogistic(d) => Some(*d),
            PredictiveDistribution::BiasShiftedLogistic {
                ensemble_mean,
                bias_location,
                bias_scale,
            } => Some(TruncatedLogistic {
                location: ensemble_mean + bias_location,
                scale: *bias_scale,
                lower_bound: 0.0,
            }),
            _ => None,
        }
    }
}

pub fn exceedance_prob(dist: &PredictiveDistribution, thresholds: &ThresholdSet) -> ProbabilityForecast {
    let mut probabilities: Vec<f64> = thresholds.as_slice().iter().map(|&t| dist.sf(t)).collect();
    // bisection noise can break ties by < tol; enforce the exact ordering
    for i in 1..probabilities.len() {
        if probabilities[i] > probabilities[i - 1] {
            probabilities[i] = probabilities[i - 1];
        }
    }
    ProbabilityForecast { probabilities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ---- independent oracles ---------------------------------------------

    fn logistic_cdf_ref(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    fn tl_cdf_ref(loc: f64, scale: f64, l: f64, x: f64) -> f64 {
        if x <= l {
            return 0.0;
        }
        let fl = logistic_cdf_ref((l - loc) / scale);
        (logistic_cdf_ref((x - loc) / scale) - fl) / (1.0 - fl)
    }

    fn simpson<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }

    fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        simpson(&f, a, b, fa, fm, fb, whole, tol, 30)
    }

    /// CRPS by quadrature of the Brier-integral definition.
    fn crps_quadrature(loc: f64, scale: f64, l: f64, y: f64) -> f64 {
        let lower = (loc - 60.0 * scale).max(l);
        let upper = loc.max(y) + 60.0 * scale;
        let mut total = 0.0;
        // tile the range so the adaptive rule sees the structure
        let knots = 64;
        let below: Vec<f64> = (0..=knots)
            .map(|i| lower + (y - lower) * i as f64 / knots as f64)
            .collect();
        let above: Vec<f64> = (0..=knots).map(|i| y + (upper - y) * i as f64 / knots as f64).collect();
        if y > lower {
            for w in below.windows(2) {
                total += adaptive_simpson(|x| tl_cdf_ref(loc, scale, l, x).powi(2), w[0], w[1], 1e-11);
            }
        }
        for w in above.windows(2) {
            total += adaptive_simpson(|x| (1.0 - tl_cdf_ref(loc, scale, l, x)).powi(2), w[0], w[1], 1e-11);
        }
        total
    }

    fn bernstein_bruteforce(alpha: &[f64], tau: f64) -> f64 {
        let d = alpha.len() - 1;
        let binom = |n: usize, k: usize| -> f64 { (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64) };
        (0..=d)
            .map(|j| alpha[j] * binom(d, j) * tau.powi(j as i32) * (1.0 - tau).powi((d - j) as i32))
            .sum()
    }

    // ---- truncated logistic --------------------------------------------

    #[test]
    fn cdf_at_truncation_point_is_zero() {
        let d = TruncatedLogistic::new(0.0, 1.0, 0.0).unwrap();
        assert_eq!(d.cdf(0.0), 0.0);
        assert_eq!(d.sf(-1.0), 1.0);
    }

    #[test]
    fn cdf_symmetry_without_truncation() {
        let d = TruncatedLogistic::new(0.0, 1.0, -1e9).unwrap();
        assert_abs_diff_eq!(d.cdf(0.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn cdf_matches_ratio_formula() {
        // frozen from the reference ratio evaluated above
        let d = TruncatedLogistic::new(10.0, 3.0, 0.0).unwrap();
        let expect = tl_cdf_ref(10.0, 3.0, 0.0, 25.0);
        assert_abs_diff_eq!(expect, 0.993_068_388_356_368_1, epsilon = 1e-12);
        assert_abs_diff_eq!(d.cdf(25.0), expect, epsilon = 1e-14);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let d = TruncatedLogistic::new(rng.random_range(-5.0..30.0), rng.random_range(0.2..8.0), 0.0).unwrap();
            let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            let x = d.quantile(p);
            assert_abs_diff_eq!(d.cdf(x), p, epsilon = 1e-9);
        }
    }

    #[test]
    fn exceedance_monte_carlo() {
        let d = TruncatedLogistic::new(20.0, 5.0, 0.0).unwrap();
        let p = d.sf(25.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        // rejection sampling from the untruncated logistic
        let mut hits = 0usize;
        let mut kept = 0usize;
        while kept < n {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let x = 20.0 + 5.0 * (u / (1.0 - u)).ln();
            if x <= 0.0 {
                continue;
            }
            kept += 1;
            if x > 25.0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * se, "{freq} vs {p}");
    }

    #[test]
    fn crps_point_forecast_limit() {
        let d = TruncatedLogistic::new(12.0, 1e-9, 0.0).unwrap();
        assert!(d.crps(12.0) < 1e-8);
    }

    #[test]
    fn crps_standard_case_matches_quadrature() {
        let d = TruncatedLogistic::new(0.0, 1.0, 0.0).unwrap();
        let oracle = crps_quadrature(0.0, 1.0, 0.0, 1.0);
        assert_abs_diff_eq!(d.crps(1.0), oracle, epsilon = 1e-8);
    }

    #[test]
    fn crps_random_grid_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let loc = rng.random_range(-10.0..40.0);
            let scale = rng.random_range(0.3..8.0);
            let l = rng.random_range(-5.0..5.0);
            let y = l + rng.random_range(0.0..40.0);
            let d = TruncatedLogistic::new(loc, scale, l).unwrap();
            let oracle = crps_quadrature(loc, scale, l, y);
            assert!(
                (d.crps(y) - oracle).abs() < 1e-6,
                "loc {loc} scale {scale} l {l} y {y}: {} vs {oracle}",
                d.crps(y)
            );
        }
    }

    #[test]
    fn crps_far_truncation_stays_accurate() {
        // bound deep in the upper tail: mass above the bound ~ e^-12
        let d = TruncatedLogistic::new(-30.0, 2.5, 0.0).unwrap();
        let oracle = crps_quadrature(-30.0, 2.5, 0.0, 1.0);
        assert!((d.crps(1.0) - oracle).abs() < 1e-6);
    }

    #[test]
    fn crps_censors_below_bound() {
        let d = TruncatedLogistic::new(5.0, 2.0, 0.0).unwrap();
        let g = d.crps_grad(-3.0);
        assert!(g.censored);
        assert_eq!(g.crps, d.crps(0.0));
    }

    #[test]
    fn crps_gradient_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let loc = rng.random_range(-8.0..30.0);
            let scale = rng.random_range(0.3..6.0);
            let l = if rng.random_bool(0.2) { f64::NEG_INFINITY } else { 0.0 };
            let y = rng.random_range(0.0..40.0);
            let g = TruncatedLogistic::new(loc, scale, l).unwrap().crps_grad(y);
            let h = 1e-6;
            let f = |m: f64, s: f64| TruncatedLogistic::new(m, s, l).unwrap().crps(y);
            let dm = (f(loc + h, scale) - f(loc - h, scale)) / (2.0 * h);
            let ds = (f(loc, scale + h) - f(loc, scale - h)) / (2.0 * h);
            assert!(
                (g.d_location - dm).abs() < 1e-6 * (1.0 + dm.abs()),
                "dmu {} vs {dm}",
                g.d_location
            );
            assert!(
                (g.d_scale - ds).abs() < 1e-6 * (1.0 + ds.abs()),
                "dsigma {} vs {ds}",
                g.d_scale
            );
        }
    }

    proptest! {
        #[test]
        fn crps_translation_equivariant(loc in -10.0f64..30.0, scale in 0.2f64..6.0, dy in 0.0f64..30.0, c in -20.0f64..20.0) {
            let a = TruncatedLogistic::new(loc, scale, 0.0).unwrap().crps(dy);
            let b = TruncatedLogistic::new(loc + c, scale, c).unwrap().crps(dy + c);
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
        }

        #[test]
        fn crps_nonnegative(loc in -10.0f64..30.0, scale in 0.05f64..6.0, y in 0.0f64..50.0) {
            prop_assert!(TruncatedLogistic::new(loc, scale, 0.0).unwrap().crps(y) >= 0.0);
        }
    }

    #[test]
    fn nonpositive_scale_rejected() {
        assert!(TruncatedLogistic::new(1.0, 0.0, 0.0).is_err());
        assert!(TruncatedLogistic::new(1.0, -1.0, 0.0).is_err());
    }

    // ---- Bernstein -------------------------------------------------------

    #[test]
    fn bernstein_reproduces_linear() {
        let d = 7;
        let q = BernsteinQuantile::new((0..=d).map(|j| j as f64 / d as f64).collect()).unwrap();
        for i in 0..=20 {
            let tau = i as f64 / 20.0;
            assert_abs_diff_eq!(q.quantile(tau).unwrap(), tau, epsilon = 1e-14);
        }
    }

    #[test]
    fn bernstein_endpoints() {
        let q = BernsteinQuantile::new(vec![1.0, 2.0, 2.0, 5.0, 9.0]).unwrap();
        assert_eq!(q.quantile(0.0).unwrap(), 1.0);
        assert_eq!(q.quantile(1.0).unwrap(), 9.0);
    }

    #[test]
    fn bernstein_matches_binomial_sum() {
        let alpha = [1.0, 2.0, 2.0, 5.0, 9.0];
        let expect = bernstein_bruteforce(&alpha, 0.3);
        // 1*.2401 + 2*.4116 + 2*.2646 + 5*.0756 + 9*.0081
        assert_abs_diff_eq!(expect, 2.0434, epsilon = 1e-12);
        let q = BernsteinQuantile::new(alpha.to_vec()).unwrap();
        assert_abs_diff_eq!(q.quantile(0.3).unwrap(), expect, epsilon = 1e-13);
    }

    #[test]
    fn bernstein_rejects_bad_tau_and_decreasing() {
        let q = BernsteinQuantile::new(vec![0.0, 1.0]).unwrap();
        assert!(q.quantile(1.5).is_err());
        assert!(q.quantile(-0.1).is_err());
        assert!(BernsteinQuantile::new(vec![2.0, 1.0]).is_err());
        assert!(BernsteinQuantile::new(vec![2.0]).is_err());
    }

    #[test]
    fn degenerate_bernstein_exceedance() {
        let q = PredictiveDistribution::Bernstein(BernsteinQuantile::new(vec![30.0; 13]).unwrap());
        let p = exceedance_prob(&q, &ThresholdSet::new(vec![25.0, 33.0]).unwrap());
        assert_eq!(p.probabilities, vec![1.0, 0.0]);
    }

    #[test]
    fn threshold_below_support_gives_one() {
        let t = ThresholdSet::new(vec![-1.0, 5.0]).unwrap();
        let tl = PredictiveDistribution::TruncatedLogistic(TruncatedLogistic::new(3.0, 1.0, 0.0).unwrap());
        assert_eq!(exceedance_prob(&tl, &t).probabilities[0], 1.0);
        let bq = PredictiveDistribution::Bernstein(BernsteinQuantile::new(vec![0.0, 4.0, 9.0]).unwrap());
        assert_eq!(exceedance_prob(&bq, &t).probabilities[0], 1.0);
    }

    #[test]
    fn bernstein_exceedance_inverts_quantile() {
        let q = BernsteinQuantile::new(vec![3.0, 8.0, 12.0, 20.0, 40.0]).unwrap();
        for &tau in &[0.05, 0.3, 0.5, 0.9] {
            let t = q.quantile(tau).unwrap();
            assert_abs_diff_eq!(q.exceedance(t), 1.0 - tau, epsilon = 2e-8);
        }
    }

    #[test]
    fn pinball_median() {
        let q = BernsteinQuantile::new(vec![0.0, 1.0, 2.0]).unwrap();
        let med = q.quantile(0.5).unwrap();
        assert_abs_diff_eq!(
            q.pinball_loss_mean(3.0, &[0.5]).unwrap(),
            0.5 * (3.0 - med).abs(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn pinball_zero_for_point_mass_at_obs() {
        let q = BernsteinQuantile::new(vec![14.0; 5]).unwrap();
        assert!(q.pinball_loss_mean(14.0, &default_tau_grid()).unwrap() < 1e-12);
    }

    #[test]
    fn pinball_hand_computed() {
        // alpha (0,1,2) -> Q(tau) = 2 tau; y = 1.5
        // tau .25: u = 1.0  -> .25
        // tau .5 : u = .5   -> .25
        // tau .75: u = 0    -> 0
        let q = BernsteinQuantile::new(vec![0.0, 1.0, 2.0]).unwrap();
        let v = q.pinball_loss_mean(1.5, &[0.25, 0.5, 0.75]).unwrap();
        assert_abs_diff_eq!(v, 0.5 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn pinball_empty_grid_is_error() {
        let q = BernsteinQuantile::new(vec![0.0, 1.0]).unwrap();
        assert!(q.pinball_loss_mean(1.0, &[]).is_err());
    }

    #[test]
    fn pinball_basis_agrees_with_direct() {
        let q = BernsteinQuantile::new(vec![1.0, 3.0, 4.0, 9.0]).unwrap();
        let basis = PinballBasis::new(default_tau_grid(), 3).unwrap();
        let mut g = vec![0.0; 4];
        let a = basis.loss_grad(q.coefficients(), 4.2, &mut g);
        let b = q.pinball_loss_mean(4.2, &default_tau_grid()).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-13);
    }

    #[test]
    fn random_distributions_give_monotone_exceedance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let thresholds = ThresholdSet::default();
        for i in 0..1000 {
            let dist = if i % 2 == 0 {
                PredictiveDistribution::TruncatedLogistic(
                    TruncatedLogistic::new(rng.random_range(-5.0..60.0), rng.random_range(0.1..15.0), 0.0).unwrap(),
                )
            } else {
                let raw: Vec<f64> = (0..12).map(|_| rng.random_range(-4.0..3.0)).collect();
                PredictiveDistribution::Bernstein(
                    BernsteinQuantile::from_increments(rng.random_range(0.0..40.0), &raw).unwrap(),
                )
            };
            assert!(exceedance_prob(&dist, &thresholds).is_nonincreasing());
        }
    }

    proptest! {
        #[test]
        fn bernstein_monotone(first in -10.0f64..40.0, raw in proptest::collection::vec(-6.0f64..4.0, 1..16), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let q = BernsteinQuantile::from_increments(first, &raw).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(q.quantile(lo).unwrap() <= q.quantile(hi).unwrap() + 1e-12);
        }
    }
}
