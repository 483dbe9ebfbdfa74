//! End-to-end optimization: the supervised loss, the rendering-loss ramp,
//! model assembly for every ablation arm, the training loop, and evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::iar::{
    select_points, uncertainty_map, IarConfig, PointSet, PosEnc, RenderHead,
};
use crate::metrics::{compute_metrics, Mask, MetricsReport};
use crate::nn::{Conv2d, Parameter};
use crate::optim::{poly_lr, AdamW};
use crate::rng::{stream, substream, STREAM_EVAL, STREAM_INIT, STREAM_MASK, STREAM_ORDER, STREAM_POINTS};
use crate::segnet::{BackboneConfig, SegNet};
use crate::smoe::{sample_mask, ExpertMask, Smoe};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeMode {
    /// Plain backbone head, no experts.
    None,
    /// All experts active at train and test time.
    Dense,
    /// Experts dropped independently during training.
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmConfig {
    pub moe: MoeMode,
    pub iar: bool,
}

impl ArmConfig {
    pub const MORSE: ArmConfig = ArmConfig {
        moe: MoeMode::Stochastic,
        iar: true,
    };
    pub const BASELINE: ArmConfig = ArmConfig {
        moe: MoeMode::None,
        iar: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.moe, self.iar) {
            (MoeMode::None, false) => "baseline",
            (MoeMode::Dense, false) => "moe",
            (MoeMode::Stochastic, false) => "smoe",
            (MoeMode::None, true) => "iar",
            (MoeMode::Dense, true) => "iar+moe",
            (MoeMode::Stochastic, true) => "morse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AwaMode {
    /// Rendering loss off for the first half, then a linear ramp.
    Adaptive,
    /// Constant rendering-loss weight from iteration zero.
    FromScratch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub lambda_rend: f64,
    /// Expert drop probability during stochastic training.
    pub alpha: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub awa: AwaMode,
    /// Checkpoint interval in iterations; 0 disables intermediate saves.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 2000,
            lr0: 5e-4,
            poly_power: 0.9,
            lambda_rend: 0.1,
            alpha: 0.7,
            batch_size: 4,
            weight_decay: 0.0,
            awa: AwaMode::Adaptive,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1); got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_rend: f64,
    pub lambda_t: f64,
    pub l_total: f64,
}

/// Rendering-loss weight at iteration t: zero through T/2, then a linear
/// ramp reaching lambda_rend / 2 at t = T.
pub fn awa_lambda(t: usize, total: usize, lambda_rend: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Config(format!(
            "iteration {t} beyond total {total}"
        )));
    }
    let (t, total) = (t as f64, total as f64);
    if t > total / 2.0 {
        Ok(lambda_rend * (t - total / 2.0) / total)
    } else {
        Ok(0.0)
    }
}

/// Equal combination of cross-entropy and soft Dice on softmax probabilities,
/// with Dice averaged over the classes present in the label map.
pub fn supervised_loss<T: Scalar>(tape: &Tape<T>, logits: Var, gt: &Mask) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 3 || shape[1] != gt.h || shape[2] != gt.w {
        return Err(Error::ShapeMismatch {
            op: "supervised_loss",
            detail: format!("logits {:?} vs label {}x{}", shape, gt.h, gt.w),
        });
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let labels: Vec<usize> = gt.data().iter().map(|&v| v as usize).collect();

    let flat = tape.reshape(logits, vec![k, h * w])?;
    let ce = tape.cross_entropy_mean(flat, &labels)?;

    let probs = tape.softmax(logits, 0)?;
    let mut present: Vec<usize> = labels.clone();
    present.sort_unstable();
    present.dedup();

    let mut dice_sum: Option<Var> = None;
    for &c in &present {
        let p_c = tape.select_rows0(probs, &[c])?;
        let g_count = labels.iter().filter(|&&l| l == c).count() as f64;
        let g_mask: Vec<T> = labels
            .iter()
            .map(|&l| if l == c { T::one() } else { T::zero() })
            .collect();
        let g_mask = Tensor::from_vec(vec![1, h, w], g_mask)?;
        let inter = tape.sum_all(tape.mul_const(p_c, &g_mask)?)?;
        let p_sum = tape.sum_all(p_c)?;
        let numer = tape.scale(inter, 2.0)?;
        let denom = tape.add_scalar(p_sum, g_count)?;
        let ratio = tape.div(numer, denom)?;
        dice_sum = Some(match dice_sum {
            None => ratio,
            Some(acc) => tape.add(acc, ratio)?,
        });
    }
    let dice_mean = tape.scale(dice_sum.expect("at least one class present"), 1.0 / present.len() as f64)?;
    let dice_loss = tape.add_scalar(tape.scale(dice_mean, -1.0)?, 1.0)?;

    tape.add(tape.scale(ce, 0.5)?, tape.scale(dice_loss, 0.5)?)
}

/// The full model for one ablation arm. Optional stages are present exactly
/// when the arm uses them; construction order is fixed so arms sharing a
/// prefix of stages draw identical initializations from the same seed.
pub struct MorseModel<T: Scalar> {
    pub backbone_cfg: BackboneConfig,
    pub iar_cfg: IarConfig,
    pub arm: ArmConfig,
    pub backbone: SegNet<T>,
    pub experts: Option<crate::segnet::ExpertBank<T>>,
    pub smoe: Option<Smoe<T>>,
    pub fused_head: Option<Conv2d<T>>,
    pub pe: Option<PosEnc<T>>,
    pub render: Option<RenderHead<T>>,
}

pub struct DenseForward {
    pub coarse_logits: Var,
    /// Feature map points are sampled from (x_out when experts run, the
    /// final decoder tap otherwise).
    pub point_source: Var,
    pub gate_weights: Option<Var>,
}

impl<T: Scalar> MorseModel<T> {
    pub fn new(
        backbone_cfg: BackboneConfig,
        iar_cfg: IarConfig,
        arm: ArmConfig,
        seed: u64,
    ) -> Result<Self> {
        backbone_cfg.validate()?;
        iar_cfg.validate()?;
        let mut rng = stream(seed, STREAM_INIT);
        let backbone = SegNet::new(backbone_cfg.clone(), &mut rng)?;
        let (experts, smoe, fused_head) = if arm.moe != MoeMode::None {
            let bank = crate::segnet::ExpertBank::new(&backbone_cfg, &mut rng);
            let smoe = Smoe::new(&backbone_cfg, &mut rng);
            let head = Conv2d::new(
                "fused_head",
                backbone_cfg.expert_dim,
                backbone_cfg.num_classes,
                1,
                &mut rng,
            );
            (Some(bank), Some(smoe), Some(head))
        } else {
            (None, None, None)
        };
        let (pe, render) = if arm.iar {
            let feature_dim = if arm.moe != MoeMode::None {
                backbone_cfg.expert_dim
            } else {
                backbone_cfg.base_channels
            };
            let pe = PosEnc::new(iar_cfg.pe_len, iar_cfg.pe_init_std, &mut rng);
            let head = RenderHead::new(
                iar_cfg.pe_len,
                feature_dim,
                iar_cfg.head_hidden,
                backbone_cfg.num_classes,
                &mut rng,
            );
            (Some(pe), Some(head))
        } else {
            (None, None)
        };
        Ok(MorseModel {
            backbone_cfg,
            iar_cfg,
            arm,
            backbone,
            experts,
            smoe,
            fused_head,
            pe,
            render,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.backbone.params();
        if let Some(e) = &self.experts {
            p.extend(e.params());
        }
        if let Some(s) = &self.smoe {
            p.extend(s.params());
        }
        if let Some(h) = &self.fused_head {
            p.extend(h.params());
        }
        if let Some(pe) = &self.pe {
            p.extend(pe.params());
        }
        if let Some(r) = &self.render {
            p.extend(r.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.backbone.params_mut();
        if let Some(e) = &mut self.experts {
            p.extend(e.params_mut());
        }
        if let Some(s) = &mut self.smoe {
            p.extend(s.params_mut());
        }
        if let Some(h) = &mut self.fused_head {
            p.extend(h.params_mut());
        }
        if let Some(pe) = &mut self.pe {
            p.extend(pe.params_mut());
        }
        if let Some(r) = &mut self.render {
            p.extend(r.params_mut());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Dense stage: backbone, then expert fusion when the arm has experts.
    pub fn forward_dense(
        &self,
        tape: &Tape<T>,
        image: Var,
        mask: &ExpertMask,
    ) -> Result<DenseForward> {
        let shape = tape.shape(image);
        let (h, w) = (shape[1], shape[2]);
        let coarse = self.backbone.forward_coarse(tape, image)?;
        match (&self.experts, &self.smoe, &self.fused_head) {
            (Some(bank), Some(smoe), Some(head)) => {
                let feats = bank.forward(tape, &coarse.block_features, h, w)?;
                let (x_out, weights) = smoe.forward(tape, &feats, mask)?;
                let logits = head.forward(tape, x_out)?;
                Ok(DenseForward {
                    coarse_logits: logits,
                    point_source: x_out,
                    gate_weights: Some(weights),
                })
            }
            _ => Ok(DenseForward {
                coarse_logits: coarse.logits,
                point_source: *coarse
                    .block_features
                    .last()
                    .expect("backbone exposes at least one tap"),
                gate_weights: None,
            }),
        }
    }
}

pub struct Trainer<T: Scalar> {
    pub model: MorseModel<T>,
    pub cfg: TrainConfig,
    opt: AdamW,
    mask_rng: ChaCha8Rng,
    point_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: MorseModel<T>, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            opt: AdamW::new(cfg.weight_decay),
            cfg,
            mask_rng: stream(seed, STREAM_MASK),
            point_rng: stream(seed, STREAM_POINTS),
            order_rng: stream(seed, STREAM_ORDER),
        })
    }

    fn mask_for_sample(&mut self) -> Result<ExpertMask> {
        let n = self.model.backbone_cfg.expert_count;
        match self.model.arm.moe {
            MoeMode::Stochastic => sample_mask(n, self.cfg.alpha, &mut self.mask_rng),
            _ => Ok(ExpertMask::all_active(n)),
        }
    }

    /// One optimization step over a batch. Only parameters that took part in
    /// this step's graph are updated, so stages with zero loss weight see
    /// exactly zero parameter movement.
    pub fn train_step(
        &mut self,
        batch: &[&(Tensor<T>, Mask)],
        t: usize,
    ) -> Result<LossBreakdown> {
        let lambda_t = match self.cfg.awa {
            AwaMode::Adaptive => awa_lambda(t, self.cfg.total_iters, self.cfg.lambda_rend)?,
            AwaMode::FromScratch => self.cfg.lambda_rend,
        };
        let render_active = self.model.arm.iar && lambda_t > 0.0;

        let tape = Tape::new();
        let mut sup_acc: Option<Var> = None;
        let mut rend_acc: Option<Var> = None;
        let inv_b = 1.0 / batch.len() as f64;

        let step = |r: Result<LossBreakdown>| match r {
            Err(Error::NonFinite { op, .. }) => Err(Error::Diverged {
                iter: t,
                detail: format!("non-finite value in {op}"),
            }),
            other => other,
        };

        let run = (|| -> Result<LossBreakdown> {
            for (image, gt) in batch.iter() {
                let mask = self.mask_for_sample()?;
                let img = tape.input(image.clone())?;
                let fw = self.model.forward_dense(&tape, img, &mask)?;
                let l_sup = supervised_loss(&tape, fw.coarse_logits, gt)?;
                sup_acc = Some(match sup_acc {
                    None => l_sup,
                    Some(acc) => tape.add(acc, l_sup)?,
                });

                if render_active {
                    let coarse_vals = tape.value(fw.coarse_logits);
                    let pts = select_points(
                        &coarse_vals,
                        self.model.iar_cfg.n_points_train,
                        self.model.iar_cfg.k_candidates,
                        self.model.iar_cfg.rho,
                        &mut self.point_rng,
                    )?;
                    if !pts.is_empty() {
                        let l_rend = self.render_branch(&tape, &fw, &pts, gt)?;
                        rend_acc = Some(match rend_acc {
                            None => l_rend,
                            Some(acc) => tape.add(acc, l_rend)?,
                        });
                    }
                }
            }

            let l_sup = tape.scale(sup_acc.expect("non-empty batch"), inv_b)?;
            let (l_total, l_rend_val) = match rend_acc {
                Some(acc) => {
                    let l_rend = tape.scale(acc, inv_b)?;
                    let weighted = tape.scale(l_rend, lambda_t)?;
                    (tape.add(l_sup, weighted)?, tape.value(l_rend).item().to_f64_lossy())
                }
                None => (l_sup, 0.0),
            };

            let breakdown = LossBreakdown {
                l_sup: tape.value(l_sup).item().to_f64_lossy(),
                l_rend: l_rend_val,
                lambda_t,
                l_total: tape.value(l_total).item().to_f64_lossy(),
            };

            let mut grads = tape.backward(l_total)?;
            let lr = poly_lr(t, self.cfg.total_iters, self.cfg.lr0, self.cfg.poly_power);
            let mut stepped: Vec<&mut Parameter<T>> = Vec::new();
            for p in self.model.params_mut() {
                if let Some(g) = grads.take(p.id()) {
                    p.grad = Some(g);
                    stepped.push(p);
                }
            }
            self.opt.step(&mut stepped, lr)?;
            Ok(breakdown)
        })();
        step(run)
    }

    fn render_branch(
        &self,
        tape: &Tape<T>,
        fw: &DenseForward,
        pts: &PointSet,
        gt: &Mask,
    ) -> Result<Var> {
        let pe = self.model.pe.as_ref().expect("iar arm has an encoder");
        let head = self.model.render.as_ref().expect("iar arm has a head");
        let pe_feats = pe.encode(tape, &pts.coords, gt.h, gt.w)?;
        let pfeats = tape.point_sample(fw.point_source, &pts.continuous())?;
        let logits_p = head.forward(tape, pe_feats, pfeats)?;
        let labels: Vec<usize> = pts
            .coords
            .iter()
            .map(|&(x, y)| gt.get(y as usize, x as usize) as usize)
            .collect();
        crate::iar::render_loss(tape, logits_p, &labels)
    }

    /// Full loop over `total_iters` with uniformly drawn batches. The
    /// callback sees every step's breakdown (for logging / checkpointing).
    pub fn run(
        &mut self,
        data: &[(Tensor<T>, Mask)],
        mut on_step: impl FnMut(usize, &LossBreakdown, &MorseModel<T>) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        for t in 0..self.cfg.total_iters {
            let batch: Vec<&(Tensor<T>, Mask)> = (0..self.cfg.batch_size)
                .map(|_| &data[self.order_rng.random_range(0..data.len())])
                .collect();
            let breakdown = self.train_step(&batch, t)?;
            on_step(t, &breakdown, &self.model)?;
        }
        Ok(())
    }
}

/// Per-sample evaluation products.
pub struct SampleEval {
    pub coarse: MetricsReport,
    pub refined: MetricsReport,
    pub coarse_mask: Mask,
    pub refined_mask: Mask,
    pub points: PointSet,
    pub point_uncertainty: Vec<f64>,
}

/// Inference with every expert active and a single refinement pass of
/// `n_points` rendered pixels per sample. Samples evaluate independently in
/// parallel against the frozen model.
pub fn evaluate<T: Scalar>(
    model: &MorseModel<T>,
    samples: &[(Tensor<T>, Mask)],
    n_points: usize,
    seed: u64,
) -> Result<Vec<SampleEval>> {
    let k = model.backbone_cfg.num_classes;
    let results = crate::exec::map_indexed(samples.len(), |i| -> Result<SampleEval> {
        let (image, gt) = &samples[i];
        let tape = Tape::new();
        let mask = ExpertMask::all_active(model.backbone_cfg.expert_count);
        let img = tape.input(image.clone())?;
        let fw = model.forward_dense(&tape, img, &mask)?;
        let coarse_logits = tape.value(fw.coarse_logits);
        let coarse_mask = Mask::from_argmax(&coarse_logits)?;
        let coarse = compute_metrics(&coarse_mask, gt, k)?;

        let mut rng = substream(seed, STREAM_EVAL, i as u64);
        let (refined_logits, points) = if model.arm.iar && n_points > 0 {
            let pts = select_points(
                &coarse_logits,
                n_points.min(gt.h * gt.w),
                model.iar_cfg.k_candidates,
                model.iar_cfg.rho,
                &mut rng,
            )?;
            let pe = model.pe.as_ref().expect("iar arm has an encoder");
            let head = model.render.as_ref().expect("iar arm has a head");
            let pe_feats = pe.encode(&tape, &pts.coords, gt.h, gt.w)?;
            let pfeats = tape.point_sample(fw.point_source, &pts.continuous())?;
            let logits_p = head.forward(&tape, pe_feats, pfeats)?;
            let stitched = crate::iar::stitch(&coarse_logits, &pts, &tape.value(logits_p))?;
            (stitched, pts)
        } else {
            (
                coarse_logits.clone(),
                PointSet {
                    coords: Vec::new(),
                    origins: Vec::new(),
                },
            )
        };
        let refined_mask = Mask::from_argmax(&refined_logits)?;
        let refined = compute_metrics(&refined_mask, gt, k)?;

        let umap = uncertainty_map(&coarse_logits)?;
        let point_uncertainty = points
            .coords
            .iter()
            .map(|&(x, y)| umap.data()[y as usize * gt.w + x as usize].to_f64_lossy())
            .collect();

        Ok(SampleEval {
            coarse,
            refined,
            coarse_mask,
            refined_mask,
            points,
            point_uncertainty,
        })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn awa_schedule_values() {
        // Indicator boundary: exactly zero at t = T/2.
        assert_eq!(awa_lambda(1000, 2000, 0.1).unwrap(), 0.0);
        assert_eq!(awa_lambda(0, 2000, 0.1).unwrap(), 0.0);
        // Endpoint: lambda_rend / 2.
        assert!((awa_lambda(2000, 2000, 0.1).unwrap() - 0.05).abs() < 1e-15);
        // Three-quarter point: lambda_rend / 4.
        assert!((awa_lambda(1500, 2000, 0.1).unwrap() - 0.025).abs() < 1e-15);
        assert!(awa_lambda(3, 2, 0.1).is_err());
    }

    #[test]
    fn awa_monotone_nondecreasing() {
        let total = 777;
        let mut prev = 0.0;
        for t in 0..=total {
            let v = awa_lambda(t, total, 0.1).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!((prev - 0.05).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_closed_forms() {
        // Uniform logits on a balanced 2-class map: CE = ln 2 and soft Dice
        // per class is (2 * 0.5 * n_c) / (0.5 * n + n_c) = 0.5, so the loss
        // is 0.5 * ln 2 + 0.5 * (1 - 0.5).
        let (h, w) = (4, 4);
        let mut gt = Mask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if (y * w + x) % 2 == 0 {
                    gt.set(y, x, 1);
                }
            }
        }
        let tape = Tape::<f64>::new();
        let logits = tape.input(Tensor::zeros(vec![2, h, w])).unwrap();
        let loss = supervised_loss(&tape, logits, &gt).unwrap();
        let expected = 0.5 * (2.0f64).ln() + 0.5 * 0.5;
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_vanishes_for_confident_correct_prediction() {
        let (h, w) = (6, 6);
        let mut gt = Mask::zeros(h, w);
        for y in 0..3 {
            for x in 0..w {
                gt.set(y, x, 1);
            }
        }
        let mut data = vec![0.0f64; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let c = gt.get(y, x) as usize;
                data[c * h * w + y * w + x] = 60.0;
            }
        }
        let tape = Tape::<f64>::new();
        let logits = tape.input(Tensor::from_vec(vec![2, h, w], data).unwrap()).unwrap();
        let loss = supervised_loss(&tape, logits, &gt).unwrap();
        assert!(tape.value(loss).item() < 1e-9);
    }

    #[test]
    fn supervised_loss_matches_scalar_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (k, h, w) = (3usize, 5usize, 6usize);
        let logits_t = crate::nn::gaussian::<f64>(vec![k, h, w], 0.0, 1.5, &mut rng);
        let mut gt = Mask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                gt.set(y, x, rng.random_range(0..k as u8));
            }
        }
        let tape = Tape::<f64>::new();
        let lv = tape.input(logits_t.clone()).unwrap();
        let loss = supervised_loss(&tape, lv, &gt).unwrap();

        // Scalar re-derivation, one pixel at a time.
        let n = h * w;
        let mut ce = 0.0;
        let mut probs = vec![0.0f64; k * n];
        for i in 0..n {
            let v: Vec<f64> = (0..k).map(|c| logits_t.data()[c * n + i]).collect();
            let m = v.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
            for c in 0..k {
                probs[c * n + i] = (v[c] - m).exp() / z;
            }
            ce -= (probs[gt.data()[i] as usize * n + i]).ln();
        }
        ce /= n as f64;
        let mut dice = 0.0;
        let mut classes = 0.0;
        for c in 0..k {
            let g_count = gt.data().iter().filter(|&&l| l as usize == c).count() as f64;
            if g_count == 0.0 {
                continue;
            }
            classes += 1.0;
            let inter: f64 = (0..n)
                .filter(|&i| gt.data()[i] as usize == c)
                .map(|i| probs[c * n + i])
                .sum();
            let p_sum: f64 = (0..n).map(|i| probs[c * n + i]).sum();
            dice += 2.0 * inter / (p_sum + g_count);
        }
        let expected = 0.5 * ce + 0.5 * (1.0 - dice / classes);
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }
}
