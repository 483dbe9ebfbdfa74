//! Point-wise refinement: uncertainty-driven point selection, trainable
//! sinusoidal position encoding, a per-point rendering head, and stitching
//! rendered logits back into the dense map.
//!
//! Coordinate convention: a point is (x, y) with x the column in [0, W-1]
//! and y the row in [0, H-1]; normalization maps x over W and y over H to
//! [-1, 1).

use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Mlp, Parameter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IarConfig {
    /// Number of trainable frequency pairs; the encoding has 2L rows.
    pub pe_len: usize,
    /// Std of the Gaussian frequency initialization.
    pub pe_init_std: f64,
    /// Hidden width of the 3-layer rendering head.
    pub head_hidden: usize,
    pub n_points_train: usize,
    pub n_points_test: usize,
    /// Candidate oversampling factor k_p.
    pub k_candidates: usize,
    /// Fraction of points taken from the uncertainty ranking.
    pub rho: f64,
}

impl Default for IarConfig {
    fn default() -> Self {
        IarConfig {
            pe_len: 128,
            pe_init_std: 1.0,
            head_hidden: 256,
            n_points_train: 2048,
            n_points_test: 8192,
            k_candidates: 3,
            rho: 0.75,
        }
    }
}

impl IarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pe_len == 0 || self.head_hidden == 0 {
            return Err(Error::Config("pe_len and head_hidden must be positive".into()));
        }
        if self.k_candidates < 1 {
            return Err(Error::Config("k_candidates must be >= 1".into()));
        }
        if !(self.rho > 0.5 && self.rho < 1.0) {
            return Err(Error::Config(format!(
                "rho must satisfy 0.5 < rho < 1; got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointOrigin {
    Uncertain,
    Uniform,
}

/// Selected refinement pixels with provenance flags.
#[derive(Debug, Clone)]
pub struct PointSet {
    /// (x, y) pixel coordinates, uncertain subset first.
    pub coords: Vec<(u32, u32)>,
    pub origins: Vec<PointOrigin>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn count_uncertain(&self) -> usize {
        self.origins
            .iter()
            .filter(|o| **o == PointOrigin::Uncertain)
            .count()
    }

    /// Continuous coordinates for feature sampling.
    pub fn continuous(&self) -> Vec<(f64, f64)> {
        self.coords
            .iter()
            .map(|&(x, y)| (x as f64, y as f64))
            .collect()
    }
}

/// Margin uncertainty per pixel: SecondLargest(v) - max(v) over the logit
/// vector v. Always <= 0; zero means the top two classes tie.
pub fn uncertainty_map<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape().len() != 3 || logits.shape()[0] < 2 {
        return Err(Error::ShapeMismatch {
            op: "uncertainty_map",
            detail: format!("expected [k >= 2, h, w], got {:?}", logits.shape()),
        });
    }
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let src = logits.data();
    let mut out = vec![T::zero(); h * w];
    crate::exec::fill_slice(&mut out, |i| {
        let (mut top, mut second) = if src[i] >= src[h * w + i] {
            (src[i], src[h * w + i])
        } else {
            (src[h * w + i], src[i])
        };
        for c in 2..k {
            let v = src[c * h * w + i];
            if v > top {
                second = top;
                top = v;
            } else if v > second {
                second = v;
            }
        }
        second - top
    });
    Tensor::from_vec(vec![h, w], out)
}

/// Three-stage point selection over the coarse logit map:
/// 1. draw distinct candidate pixels uniformly (k_candidates * n_points,
///    capped at the pixel count),
/// 2. keep the round(rho * n_points) candidates with the highest uncertainty
///    (ties broken by row-major pixel index),
/// 3. fill the rest uniformly from all pixels not yet selected.
pub fn select_points<T: Scalar>(
    logits: &Tensor<T>,
    n_points: usize,
    k_candidates: usize,
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PointSet> {
    let (h, w) = (logits.shape()[1], logits.shape()[2]);
    let hw = h * w;
    if n_points > hw {
        return Err(Error::Config(format!(
            "cannot select {n_points} distinct pixels from a {h}x{w} map"
        )));
    }
    if n_points == 0 {
        return Ok(PointSet {
            coords: Vec::new(),
            origins: Vec::new(),
        });
    }
    let uncertainty = uncertainty_map(logits)?;
    let u = uncertainty.data();

    let n_cand = (k_candidates * n_points).min(hw);
    let mut candidates: Vec<usize> = index_sample(rng, hw, n_cand).into_iter().collect();
    candidates.sort_by(|&a, &b| {
        u[b].partial_cmp(&u[a])
            .expect("uncertainty values are finite")
            .then(a.cmp(&b))
    });

    let n_uncertain = ((rho * n_points as f64).round() as usize).min(n_points);
    let mut taken = vec![false; hw];
    let mut coords = Vec::with_capacity(n_points);
    let mut origins = Vec::with_capacity(n_points);
    for &idx in candidates.iter().take(n_uncertain) {
        taken[idx] = true;
        coords.push(((idx % w) as u32, (idx / w) as u32));
        origins.push(PointOrigin::Uncertain);
    }

    let n_uniform = n_points - n_uncertain;
    if n_uniform > 0 {
        let pool: Vec<usize> = (0..hw).filter(|&i| !taken[i]).collect();
        for pick in index_sample(rng, pool.len(), n_uniform) {
            let idx = pool[pick];
            coords.push(((idx % w) as u32, (idx / w) as u32));
            origins.push(PointOrigin::Uniform);
        }
    }

    Ok(PointSet { coords, origins })
}

/// Trainable frequency bank realizing the sinusoidal position encoding
/// psi(x, y) = [sin(2 pi (w_i x~ + v_i y~)), ..., cos(...)] with
/// x~ = 2x/W - 1 and y~ = 2y/H - 1.
pub struct PosEnc<T: Scalar> {
    pub freqs: Parameter<T>,
    pub len_l: usize,
}

impl<T: Scalar> PosEnc<T> {
    pub fn new(pe_len: usize, init_std: f64, rng: &mut ChaCha8Rng) -> Self {
        PosEnc {
            freqs: Parameter::new("pe.freqs", gaussian(vec![pe_len, 2], 0.0, init_std, rng)),
            len_l: pe_len,
        }
    }

    /// Encode pixel coordinates into a [2L, n] feature matrix.
    pub fn encode(
        &self,
        tape: &Tape<T>,
        coords: &[(u32, u32)],
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let n = coords.len();
        let mut data = Vec::with_capacity(2 * n);
        for &(x, _) in coords {
            data.push(T::from_f64(2.0 * x as f64 / w as f64 - 1.0));
        }
        for &(_, y) in coords {
            data.push(T::from_f64(2.0 * y as f64 / h as f64 - 1.0));
        }
        let norm = tape.input(Tensor::from_vec(vec![2, n], data)?)?;
        let freqs = self.freqs.on(tape)?;
        let phase = tape.matmul(freqs, norm)?;
        let phase = tape.scale(phase, std::f64::consts::TAU)?;
        let s = tape.sin(phase)?;
        let c = tape.cos(phase)?;
        tape.concat0(&[s, c])
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.freqs]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.freqs]
    }
}

/// Per-point 3-layer MLP mapping [2L + feature_dim, n] to class logits [K, n].
pub struct RenderHead<T: Scalar> {
    mlp: Mlp<T>,
}

impl<T: Scalar> RenderHead<T> {
    pub fn new(
        pe_len: usize,
        feature_dim: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        RenderHead {
            mlp: Mlp::new(
                "render_head",
                &[2 * pe_len + feature_dim, hidden, hidden, num_classes],
                rng,
            ),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, pe_feats: Var, point_feats: Var) -> Result<Var> {
        let cat = tape.concat0(&[pe_feats, point_feats])?;
        self.mlp.forward(tape, cat)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.mlp.params_mut()
    }
}

/// Mean cross-entropy of rendered point logits against hard labels.
pub fn render_loss<T: Scalar>(tape: &Tape<T>, point_logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy_mean(point_logits, labels)
}

/// Replace the logit vector at each selected pixel with its rendered logits;
/// every other pixel is untouched.
pub fn stitch<T: Scalar>(
    coarse: &Tensor<T>,
    points: &PointSet,
    point_logits: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (k, h, w) = (coarse.shape()[0], coarse.shape()[1], coarse.shape()[2]);
    if point_logits.shape() != [k, points.len()] {
        return Err(Error::ShapeMismatch {
            op: "stitch",
            detail: format!(
                "point logits {:?} for {} points of {} classes",
                point_logits.shape(),
                points.len(),
                k
            ),
        });
    }
    let mut out = coarse.clone();
    let data = out.data_mut();
    let pl = point_logits.data();
    for (j, &(x, y)) in points.coords.iter().enumerate() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..k {
            data[c * h * w + y * w + x] = pl[c * points.len() + j];
        }
    }
    Ok(out)
}
