//! Stochastic mixture-of-experts fusion.
//!
//! The gating network concatenates all expert features and produces one
//! logit map per expert; the softmax runs over the active experts only, so
//! active weights always sum to one and masked experts get weight exactly
//! zero. Masking happens before the softmax rather than by zeroing after,
//! which keeps the normalization unconditional; no inference-time rescaling
//! is needed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Parameter, PixelMlp};
use crate::segnet::BackboneConfig;
use crate::tensor::Scalar;

/// Which experts participate in one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertMask {
    pub active: Vec<bool>,
}

impl ExpertMask {
    pub fn all_active(n: usize) -> Self {
        ExpertMask {
            active: vec![true; n],
        }
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Independent Bernoulli drop per expert with probability `alpha`. All-dropped
/// draws are rejected and resampled (bounded retries, then one expert forced
/// uniformly), so the result follows the Bernoulli product conditioned on at
/// least one active expert.
pub fn sample_mask(n: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<ExpertMask> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "expert drop probability must be in [0, 1); got {alpha}"
        )));
    }
    const MAX_RETRIES: usize = 64;
    for _ in 0..MAX_RETRIES {
        let active: Vec<bool> = (0..n).map(|_| !rng.random_bool(alpha)).collect();
        if active.iter().any(|&a| a) {
            return Ok(ExpertMask { active });
        }
    }
    let mut active = vec![false; n];
    active[rng.random_range(0..n)] = true;
    Ok(ExpertMask { active })
}

/// Gating network: a four-layer convolution stack over the concatenated
/// expert features followed by a masked softmax over the expert axis.
pub struct GateNet<T: Scalar> {
    convs: Vec<Conv2d<T>>,
}

impl<T: Scalar> GateNet<T> {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.expert_count;
        let g = cfg.gate_hidden;
        let dims = [cfg.expert_dim * n, g, g, g, n];
        let convs = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| Conv2d::new(&format!("gate.{i}"), pair[0], pair[1], 3, rng))
            .collect();
        GateNet { convs }
    }

    /// Per-pixel convex weights over experts, [n, h, w]; inactive experts
    /// receive weight exactly zero.
    pub fn gate_weights(
        &self,
        tape: &Tape<T>,
        experts: &[Var],
        mask: &ExpertMask,
    ) -> Result<Var> {
        let n = experts.len();
        if mask.active.len() != n {
            return Err(Error::ShapeMismatch {
                op: "gate_weights",
                detail: format!("mask of {} for {} experts", mask.active.len(), n),
            });
        }
        let active = mask.active_indices();
        if active.is_empty() {
            return Err(Error::Config("all experts masked".into()));
        }
        let mut x = tape.concat0(experts)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = if i != last {
                conv.forward_relu(tape, x)?
            } else {
                conv.forward(tape, x)?
            };
        }
        if active.len() == n {
            return tape.softmax(x, 0);
        }
        let sel = tape.select_rows0(x, &active)?;
        let sm = tape.softmax(sel, 0)?;
        tape.scatter_rows0(sm, &active, n)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// Weighted per-pixel sum of the active expert features (the pre-MLP fused
/// feature). Inactive experts are skipped outright, so no gradient reaches
/// them through the fusion path.
pub fn fuse_weighted_sum<T: Scalar>(
    tape: &Tape<T>,
    experts: &[Var],
    weights: Var,
    mask: &ExpertMask,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &f) in experts.iter().enumerate() {
        if !mask.active[i] {
            continue;
        }
        let w_i = tape.select_rows0(weights, &[i])?;
        let term = tape.mul_bcast0(f, w_i)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Config("all experts masked".into()))
}

/// Gate plus fusion MLP; `forward` returns (x_out, gate weights).
pub struct Smoe<T: Scalar> {
    pub gate: GateNet<T>,
    pub fusion: PixelMlp<T>,
}

impl<T: Scalar> Smoe<T> {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let gate = GateNet::new(cfg, rng);
        let fusion = PixelMlp::new(
            "fusion",
            &[cfg.expert_dim, cfg.mlp_hidden, cfg.mlp_hidden, cfg.expert_dim],
            rng,
        );
        Smoe { gate, fusion }
    }

    pub fn forward(
        &self,
        tape: &Tape<T>,
        experts: &[Var],
        mask: &ExpertMask,
    ) -> Result<(Var, Var)> {
        let weights = self.gate.gate_weights(tape, experts, mask)?;
        let summed = fuse_weighted_sum(tape, experts, weights, mask)?;
        let x_out = self.fusion.forward(tape, summed)?;
        Ok((x_out, weights))
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.gate.params();
        p.extend(self.fusion.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.gate.params_mut();
        p.extend(self.fusion.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn alpha_zero_keeps_every_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let m = sample_mask(5, 0.0, &mut rng).unwrap();
            assert_eq!(m.count_active(), 5);
        }
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(3, 1.0, &mut rng).is_err());
        assert!(sample_mask(3, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_sequence_is_reproducible() {
        let a: Vec<ExpertMask> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..32).map(|_| sample_mask(4, 0.6, &mut rng).unwrap()).collect()
        };
        let b: Vec<ExpertMask> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..32).map(|_| sample_mask(4, 0.6, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn keep_frequency_matches_truncated_bernoulli() {
        // Bernoulli(alpha)^n conditioned on >= 1 active: per-expert keep
        // probability is (1 - alpha) / (1 - alpha^n).
        let (n, alpha, draws) = (5usize, 0.7f64, 100_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut keeps = vec![0usize; n];
        for _ in 0..draws {
            let m = sample_mask(n, alpha, &mut rng).unwrap();
            for (k, &a) in keeps.iter_mut().zip(&m.active) {
                if a {
                    *k += 1;
                }
            }
        }
        let p = (1.0 - alpha) / (1.0 - alpha.powi(n as i32));
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for (i, &k) in keeps.iter().enumerate() {
            let freq = k as f64 / draws as f64;
            assert!(
                (freq - p).abs() < 3.0 * sigma,
                "expert {i}: freq {freq:.5} vs p {p:.5} (3 sigma {:.5})",
                3.0 * sigma
            );
        }
    }
}
