//! Kernel verification suite.
//!
//! Three groups of executable checks back the positional-encoding design:
//!
//! 1. The encoding kernel identity: with psi(x) = [sin(2 pi w_i . x)...,
//!    cos(2 pi w_i . x)...], the dot product psi(x1) . psi(x2) collapses
//!    termwise (sin a sin b + cos a cos b = cos(a - b)) to
//!    sum_i cos(2 pi w_i . (x1 - x2)), which depends on x1 - x2 only.
//! 2. Random Fourier features: frequencies drawn from the kernel's spectral
//!    distribution make (1/L) psi(x1) . psi(x2) an unbiased estimate of a
//!    shift-invariant kernel, with sup-error shrinking as 1/sqrt(L).
//!
//!    Spectral std for the Gaussian kernel under the 2 pi phase convention:
//!    for w ~ N(0, s^2 I_d), E[cos(2 pi w . delta)] is the characteristic
//!    function of w at 2 pi delta, i.e. exp(-(2 pi)^2 s^2 |delta|^2 / 2).
//!    Matching exp(-|delta|^2 / (2 sigma^2)) forces
//!    (2 pi)^2 s^2 = 1 / sigma^2, so s = 1 / (2 pi sigma). The unbiasedness
//!    check below validates this constant empirically.
//! 3. Empirical NTK: for a small MLP on unit-sphere inputs, the expected
//!    parameter-gradient inner product is symmetric, nonnegative on the
//!    diagonal, and - composed with the encoding - increasingly a function
//!    of x1 - x2 alone as width grows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{gaussian, Parameter};
use crate::rng::{stream, substream};
use crate::tensor::Tensor;

const TAU: f64 = std::f64::consts::TAU;

// Local RNG stream salts.
const STREAM_BANK: u64 = 11;
const STREAM_PAIRS: u64 = 12;
const STREAM_REPS: u64 = 13;
const STREAM_INITS: u64 = 14;

#[derive(Debug, Clone, Copy)]
pub struct KernelSpec {
    /// Gaussian bandwidth sigma.
    pub sigma: f64,
    pub dim: usize,
}

impl KernelSpec {
    pub fn new(sigma: f64, dim: usize) -> Result<Self> {
        if sigma <= 0.0 || dim == 0 {
            return Err(Error::Config("kernel needs sigma > 0 and dim >= 1".into()));
        }
        Ok(KernelSpec { sigma, dim })
    }

    /// exp(-|delta|^2 / (2 sigma^2)).
    pub fn eval(&self, delta: &[f64]) -> f64 {
        let sq: f64 = delta.iter().map(|d| d * d).sum();
        (-sq / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Spectral standard deviation (see module docs).
    pub fn spectral_std(&self) -> f64 {
        1.0 / (TAU * self.sigma)
    }
}

/// A frequency bank; rows are the L frequency vectors of dimension `dim`.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub freqs: Vec<f64>,
    pub len_l: usize,
    pub dim: usize,
}

impl FeatureBank {
    pub fn from_gaussian(std: f64, len_l: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let freqs = gaussian::<f64>(vec![len_l, dim], 0.0, std, rng)
            .data()
            .to_vec();
        FeatureBank { freqs, len_l, dim }
    }

    fn phase(&self, i: usize, x: &[f64]) -> f64 {
        let row = &self.freqs[i * self.dim..(i + 1) * self.dim];
        TAU * row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    /// psi(x): [sin(2 pi w_1 . x), ..., sin(2 pi w_L . x), cos(...), ...].
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.len_l);
        for i in 0..self.len_l {
            out.push(self.phase(i, x).sin());
        }
        for i in 0..self.len_l {
            out.push(self.phase(i, x).cos());
        }
        out
    }

    /// Raw dot-product form psi(x1) . psi(x2).
    pub fn dot_form(&self, x1: &[f64], x2: &[f64]) -> f64 {
        self.features(x1)
            .iter()
            .zip(self.features(x2))
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Cosine-sum form sum_i cos(2 pi w_i . (x1 - x2)).
    pub fn cos_sum_form(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let delta: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
        (0..self.len_l).map(|i| self.phase(i, &delta).cos()).sum()
    }

    /// Kernel estimate (1/L) psi(x1) . psi(x2).
    pub fn kappa_hat(&self, x1: &[f64], x2: &[f64]) -> f64 {
        self.dot_form(x1, x2) / self.len_l as f64
    }
}

/// Frequencies drawn from the Gaussian kernel's spectral distribution.
pub fn sample_rff(spec: &KernelSpec, len_l: usize, rng: &mut ChaCha8Rng) -> FeatureBank {
    FeatureBank::from_gaussian(spec.spectral_std(), len_l, spec.dim, rng)
}

/// Largest deviation between the two kernel forms and under joint
/// translation, over `n_draws` random (bank, x1, x2, shift) draws.
pub struct IdentityReport {
    pub max_form_dev: f64,
    pub max_shift_dev: f64,
    pub diag_exact: bool,
}

pub fn pe_identity_check(len_l: usize, n_draws: usize, seed: u64) -> IdentityReport {
    let mut rng = stream(seed, STREAM_BANK);
    let mut max_form_dev = 0.0f64;
    let mut max_shift_dev = 0.0f64;
    let mut diag_exact = true;
    for _ in 0..n_draws {
        let bank = FeatureBank::from_gaussian(rng.random_range(0.2..3.0), len_l, 2, &mut rng);
        let x1 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let x2 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let d = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let dot = bank.dot_form(&x1, &x2);
        let cs = bank.cos_sum_form(&x1, &x2);
        max_form_dev = max_form_dev.max((dot - cs).abs());
        let shifted = bank.cos_sum_form(
            &[x1[0] + d[0], x1[1] + d[1]],
            &[x2[0] + d[0], x2[1] + d[1]],
        );
        max_shift_dev = max_shift_dev.max((shifted - cs).abs());
        // x1 = x2: every cosine term is 1, so the kernel equals L exactly.
        if bank.cos_sum_form(&x1, &x1) != len_l as f64 {
            diag_exact = false;
        }
    }
    IdentityReport {
        max_form_dev,
        max_shift_dev,
        diag_exact,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ErrorCurveRow {
    pub len_l: usize,
    pub err_median: f64,
    pub err_max: f64,
    pub reps: usize,
}

/// Sup-error estimates |kappa_hat - kappa| over sampled pairs, repeated with
/// independent banks; one row per L.
pub fn rff_error_curve(
    spec: &KernelSpec,
    l_list: &[usize],
    n_pairs: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<ErrorCurveRow>> {
    if l_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("L list must be strictly ascending".into()));
    }
    if n_pairs == 0 {
        return Ok(Vec::new());
    }
    let mut rows = Vec::with_capacity(l_list.len());
    for (li, &len_l) in l_list.iter().enumerate() {
        let sups = exec::map_indexed(reps, |r| {
            let mut rng = substream(seed, STREAM_REPS, (li * reps + r) as u64);
            let bank = sample_rff(spec, len_l, &mut rng);
            let mut sup = 0.0f64;
            for _ in 0..n_pairs {
                let x1: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x2: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let delta: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
                let err = (bank.kappa_hat(&x1, &x2) - spec.eval(&delta)).abs();
                sup = sup.max(err);
            }
            sup
        });
        let mut sorted = sups.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(ErrorCurveRow {
            len_l,
            err_median: crate::metrics::percentile_sorted(&sorted, 0.5),
            err_max: *sorted.last().unwrap(),
            reps,
        });
    }
    Ok(rows)
}

pub fn write_error_curve_csv(path: impl AsRef<std::path::Path>, rows: &[ErrorCurveRow]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("L,err_median,err_max,reps\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.len_l, r.err_median, r.err_max, r.reps
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub struct UnbiasednessReport {
    pub mean: f64,
    pub target: f64,
    pub std_err: f64,
    pub pass: bool,
}

/// Mean of kappa_hat over many independent banks at one fixed pair must sit
/// within 3 standard errors of the closed-form kernel. `std_override`
/// substitutes a wrong spectral std (negative control).
pub fn unbiasedness_check(
    spec: &KernelSpec,
    len_l: usize,
    n_banks: usize,
    x1: &[f64],
    x2: &[f64],
    seed: u64,
    std_override: Option<f64>,
) -> UnbiasednessReport {
    let std = std_override.unwrap_or_else(|| spec.spectral_std());
    let estimates = exec::map_indexed(n_banks, |b| {
        let mut rng = substream(seed, STREAM_BANK, b as u64);
        let bank = FeatureBank::from_gaussian(std, len_l, spec.dim, &mut rng);
        bank.kappa_hat(x1, x2)
    });
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);
    let std_err = (var / n).sqrt();
    let delta: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
    let target = spec.eval(&delta);
    UnbiasednessReport {
        mean,
        target,
        std_err,
        pass: (mean - target).abs() <= 3.0 * std_err,
    }
}

/// Width-`width` MLP under NTK parameterization: each layer computes
/// relu(W h) / sqrt(fan_in) with W ~ N(0, 1), ending in a scalar readout.
struct NtkMlp {
    weights: Vec<Parameter<f64>>,
}

impl NtkMlp {
    fn new(dim_in: usize, width: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        debug_assert!(depth >= 1 && depth <= 3);
        let mut dims = vec![dim_in];
        for _ in 0..depth - 1 {
            dims.push(width);
        }
        dims.push(1);
        let weights = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                Parameter::new(
                    format!("ntk.{i}"),
                    gaussian::<f64>(vec![pair[1], pair[0]], 0.0, 1.0, rng),
                )
            })
            .collect();
        NtkMlp { weights }
    }

    /// Flattened parameter gradient of the scalar output at input x.
    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::<f64>::new();
        let mut h = tape.input(Tensor::from_vec(vec![x.len(), 1], x.to_vec())?)?;
        let last = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            let wv = w.on(&tape)?;
            let fan_in = tape.shape(h)[0] as f64;
            h = tape.matmul(wv, h)?;
            h = tape.scale(h, 1.0 / fan_in.sqrt())?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        let mut grads = tape.backward(h)?;
        let mut flat = Vec::new();
        for w in &self.weights {
            match grads.take(w.id()) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat(0.0).take(w.numel())),
            }
        }
        Ok(flat)
    }
}

/// Monte-Carlo empirical NTK: mean over `n_inits` initializations of the
/// parameter-gradient inner product at (x1, x2).
pub fn empirical_ntk(
    width: usize,
    depth: usize,
    x1: &[f64],
    x2: &[f64],
    n_inits: usize,
    seed: u64,
) -> Result<f64> {
    let vals = ntk_per_init(width, depth, &[(x1.to_vec(), x2.to_vec())], n_inits, seed)?;
    Ok(vals.iter().map(|row| row[0]).sum::<f64>() / n_inits as f64)
}

/// NTK values for every (pair, init): result[init][pair]. Initializations
/// are independent substreams, so results are deterministic and parallel
/// over inits.
pub fn ntk_per_init(
    width: usize,
    depth: usize,
    pairs: &[(Vec<f64>, Vec<f64>)],
    n_inits: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if pairs.is_empty() {
        return Ok(vec![Vec::new(); n_inits]);
    }
    let dim_in = pairs[0].0.len();
    let rows = exec::map_indexed(n_inits, |init| -> Result<Vec<f64>> {
        let mut rng = substream(seed, STREAM_INITS, init as u64);
        let mlp = NtkMlp::new(dim_in, width, depth, &mut rng);
        pairs
            .iter()
            .map(|(x1, x2)| {
                let g1 = mlp.grad(x1)?;
                let g2 = mlp.grad(x2)?;
                Ok(g1.iter().zip(&g2).map(|(a, b)| a * b).sum())
            })
            .collect()
    });
    rows.into_iter().collect()
}

pub struct ShiftInvarianceReport {
    pub widths: Vec<usize>,
    /// Median (over inits) coefficient of variation of the NTK across pairs
    /// sharing one coordinate difference.
    pub median_spread: Vec<f64>,
}

impl ShiftInvarianceReport {
    pub fn monotone_decreasing(&self) -> bool {
        self.median_spread.windows(2).all(|w| w[1] < w[0])
    }
}

/// Spread of the composed encoding-then-MLP empirical NTK over point pairs
/// with identical difference delta, per width. Frequencies are frozen across
/// pairs; inputs are the encodings scaled to the unit sphere (psi . psi on
/// the diagonal is exactly L, so the scale is 1/sqrt(L)).
pub fn shift_invariance_deviation(
    widths: &[usize],
    pe_len: usize,
    depth: usize,
    n_pairs: usize,
    n_inits: usize,
    delta: (f64, f64),
    seed: u64,
) -> Result<ShiftInvarianceReport> {
    let mut rng = stream(seed, STREAM_PAIRS);
    let bank = FeatureBank::from_gaussian(1.0, pe_len, 2, &mut rng);
    let norm = 1.0 / (pe_len as f64).sqrt();
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let x1 = [
            rng.random_range((-1.0 + delta.0.abs())..1.0),
            rng.random_range((-1.0 + delta.1.abs())..1.0),
        ];
        let x2 = [x1[0] - delta.0, x1[1] - delta.1];
        let u1: Vec<f64> = bank.features(&x1).iter().map(|v| v * norm).collect();
        let u2: Vec<f64> = bank.features(&x2).iter().map(|v| v * norm).collect();
        pairs.push((u1, u2));
    }

    let mut median_spread = Vec::with_capacity(widths.len());
    for (wi, &width) in widths.iter().enumerate() {
        let per_init = ntk_per_init(width, depth, &pairs, n_inits, seed ^ ((wi as u64 + 1) << 24))?;
        let mut spreads: Vec<f64> = per_init
            .iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                var.sqrt() / mean.abs().max(1e-12)
            })
            .collect();
        spreads.sort_by(|a, b| a.partial_cmp(b).unwrap());
        median_spread.push(crate::metrics::percentile_sorted(&spreads, 0.5));
    }
    Ok(ShiftInvarianceReport {
        widths: widths.to_vec(),
        median_spread,
    })
}
