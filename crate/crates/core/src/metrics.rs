//! Segmentation masks and overlap/boundary metrics.
//!
//! Distances use the exact two-pass squared Euclidean distance transform, so
//! they agree bit-for-bit with an all-pairs oracle. 95HD takes the 95th
//! percentile over the pooled union of both directed boundary-distance
//! multisets; ASD is the mean of the same pool.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Scalar, Tensor};

/// Dense label grid with values in [0, num_classes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "mask",
                detail: format!("{}x{} grid needs {} labels, got {}", h, w, h * w, data.len()),
            });
        }
        Ok(Mask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Per-pixel argmax over the class axis of logits [k,h,w]; ties go to the
    /// lowest class index.
    pub fn from_argmax<T: Scalar>(logits: &Tensor<T>) -> Result<Self> {
        if logits.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "argmax_mask",
                detail: format!("expected [k,h,w], got {:?}", logits.shape()),
            });
        }
        let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        let src = logits.data();
        let mut data = vec![0u8; h * w];
        exec::fill_slice(&mut data, |i| {
            let mut best = src[i];
            let mut arg = 0u8;
            for c in 1..k {
                let v = src[c * h * w + i];
                if v > best {
                    best = v;
                    arg = c as u8;
                }
            }
            arg
        });
        Ok(Mask { h, w, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

/// Per-class metrics plus foreground means (class 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    fn foreground(&self) -> &[ClassMetrics] {
        if self.per_class.len() > 1 {
            &self.per_class[1..]
        } else {
            &self.per_class
        }
    }

    pub fn mean_dsc(&self) -> f64 {
        mean(self.foreground().iter().map(|c| c.dsc))
    }

    pub fn mean_jaccard(&self) -> f64 {
        mean(self.foreground().iter().map(|c| c.jaccard))
    }

    pub fn mean_hd95(&self) -> f64 {
        mean(self.foreground().iter().map(|c| c.hd95))
    }

    pub fn mean_asd(&self) -> f64 {
        mean(self.foreground().iter().map(|c| c.asd))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Pixels of `class_id` with at least one four-connected neighbor of another
/// class or outside the frame. Returned in row-major order.
pub fn extract_boundary(mask: &Mask, class_id: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.h, mask.w);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != class_id {
                continue;
            }
            let on_frame = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let differs = (y > 0 && mask.get(y - 1, x) != class_id)
                || (y + 1 < h && mask.get(y + 1, x) != class_id)
                || (x > 0 && mask.get(y, x - 1) != class_id)
                || (x + 1 < w && mask.get(y, x + 1) != class_id);
            if on_frame || differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                // The only parabola so far is at infinity: replace it.
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
pub fn distance_transform_sq(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for (i, &s) in seeds.iter().enumerate() {
        if s {
            grid[i] = 0.0;
        }
    }
    // Rows first.
    let mut rows = vec![0.0f64; h * w];
    exec::fill_chunks(&mut rows, w, |y, piece| {
        let mut v = vec![0usize; w];
        let mut z = vec![0.0f64; w + 1];
        dt_1d(&grid[y * w..(y + 1) * w], piece, &mut v, &mut z);
    });
    // Then columns of the row result.
    let mut cols = vec![0.0f64; h * w];
    exec::fill_chunks(&mut cols, h, |x, piece| {
        let mut f = vec![0.0f64; h];
        for y in 0..h {
            f[y] = rows[y * w + x];
        }
        let mut v = vec![0usize; h];
        let mut z = vec![0.0f64; h + 1];
        dt_1d(&f, piece, &mut v, &mut z);
    });
    // cols is column-major [x][y]; transpose back.
    let mut out = vec![0.0f64; h * w];
    for x in 0..w {
        for y in 0..h {
            out[y * w + x] = cols[x * h + y];
        }
    }
    out
}

/// Linear-interpolation percentile of a sorted slice, q in [0, 1].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn class_metrics(pred: &Mask, gt: &Mask, class_id: u8) -> ClassMetrics {
    let n = pred.data().len();
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    let mut inter = 0usize;
    for i in 0..n {
        let p = pred.data()[i] == class_id;
        let g = gt.data()[i] == class_id;
        p_count += p as usize;
        g_count += g as usize;
        inter += (p && g) as usize;
    }

    let diag = (((pred.h - 1).pow(2) + (pred.w - 1).pow(2)) as f64).sqrt();
    if p_count == 0 && g_count == 0 {
        return ClassMetrics {
            dsc: 1.0,
            jaccard: 1.0,
            hd95: 0.0,
            asd: 0.0,
        };
    }
    if p_count == 0 || g_count == 0 {
        return ClassMetrics {
            dsc: 0.0,
            jaccard: 0.0,
            hd95: diag,
            asd: diag,
        };
    }

    let dsc = 2.0 * inter as f64 / (p_count + g_count) as f64;
    let jaccard = inter as f64 / (p_count + g_count - inter) as f64;

    let pb = extract_boundary(pred, class_id);
    let gb = extract_boundary(gt, class_id);
    let (h, w) = (pred.h, pred.w);
    let mut g_seeds = vec![false; h * w];
    for &(y, x) in &gb {
        g_seeds[y * w + x] = true;
    }
    let mut p_seeds = vec![false; h * w];
    for &(y, x) in &pb {
        p_seeds[y * w + x] = true;
    }
    let dt_g = distance_transform_sq(&g_seeds, h, w);
    let dt_p = distance_transform_sq(&p_seeds, h, w);

    let mut pooled: Vec<f64> = Vec::with_capacity(pb.len() + gb.len());
    pooled.extend(pb.iter().map(|&(y, x)| dt_g[y * w + x].sqrt()));
    pooled.extend(gb.iter().map(|&(y, x)| dt_p[y * w + x].sqrt()));
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let hd95 = percentile_sorted(&pooled, 0.95);
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;

    ClassMetrics {
        dsc,
        jaccard,
        hd95,
        asd,
    }
}

/// Overlap and boundary metrics for every class in [0, num_classes).
pub fn compute_metrics(pred: &Mask, gt: &Mask, num_classes: usize) -> Result<MetricsReport> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            detail: format!("{}x{} vs {}x{}", pred.h, pred.w, gt.h, gt.w),
        });
    }
    let per_class = exec::map_indexed(num_classes, |c| class_metrics(pred, gt, c as u8));
    Ok(MetricsReport { per_class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(gy, gx)| {
                        let dy = y as f64 - gy as f64;
                        let dx = x as f64 - gx as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn identical_masks_are_perfect() {
        let mut m = Mask::zeros(8, 8);
        for y in 2..5 {
            for x in 3..6 {
                m.set(y, x, 1);
            }
        }
        let r = compute_metrics(&m, &m, 2).unwrap();
        for c in &r.per_class {
            assert_eq!(c.dsc, 1.0);
            assert_eq!(c.jaccard, 1.0);
            assert_eq!(c.hd95, 0.0);
            assert_eq!(c.asd, 0.0);
        }
    }

    #[test]
    fn disjoint_equal_squares_have_zero_overlap() {
        let mut a = Mask::zeros(16, 16);
        let mut b = Mask::zeros(16, 16);
        for y in 0..4 {
            for x in 0..4 {
                a.set(y, x, 1);
                b.set(y + 8, x + 8, 1);
            }
        }
        let r = compute_metrics(&a, &b, 2).unwrap();
        assert_eq!(r.per_class[1].dsc, 0.0);
        assert_eq!(r.per_class[1].jaccard, 0.0);
    }

    #[test]
    fn boundary_of_filled_square_is_perimeter() {
        let mut m = Mask::zeros(20, 20);
        for y in 5..15 {
            for x in 5..15 {
                m.set(y, x, 1);
            }
        }
        // 10x10 square: 4*10 - 4 = 36 perimeter pixels.
        assert_eq!(extract_boundary(&m, 1).len(), 36);
    }

    #[test]
    fn boundary_degenerate_cases() {
        let m = Mask::zeros(6, 7);
        // Full-frame class: boundary is the frame border.
        assert_eq!(extract_boundary(&m, 0).len(), 2 * 6 + 2 * 7 - 4);
        let mut m = Mask::zeros(5, 5);
        m.set(2, 3, 1);
        assert_eq!(extract_boundary(&m, 1), vec![(2, 3)]);
    }

    #[test]
    fn offset_squares_match_all_pairs_oracle() {
        let mut a = Mask::zeros(64, 64);
        let mut b = Mask::zeros(64, 64);
        for y in 10..30 {
            for x in 10..30 {
                a.set(y, x, 1);
                b.set(y + 3, x + 3, 1);
            }
        }
        let r = compute_metrics(&a, &b, 2).unwrap();
        let pb = extract_boundary(&a, 1);
        let gb = extract_boundary(&b, 1);
        let mut pooled = brute_force_directed(&pb, &gb);
        pooled.extend(brute_force_directed(&gb, &pb));
        pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let hd95 = percentile_sorted(&pooled, 0.95);
        let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
        assert_eq!(r.per_class[1].hd95, hd95);
        assert_eq!(r.per_class[1].asd, asd);
    }

    #[test]
    fn distance_transform_matches_brute_force_on_random_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (h, w) = (rng.random_range(3..20), rng.random_range(3..20));
            let mut seeds = vec![false; h * w];
            for s in seeds.iter_mut() {
                *s = rng.random_bool(0.1);
            }
            if !seeds.iter().any(|&s| s) {
                seeds[0] = true;
            }
            let dt = distance_transform_sq(&seeds, h, w);
            for y in 0..h {
                for x in 0..w {
                    let mut best = f64::INFINITY;
                    for sy in 0..h {
                        for sx in 0..w {
                            if seeds[sy * w + sx] {
                                let d = ((y as f64 - sy as f64).powi(2)
                                    + (x as f64 - sx as f64).powi(2))
                                    as f64;
                                best = best.min(d);
                            }
                        }
                    }
                    assert_eq!(dt[y * w + x], best, "at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn swapping_arguments_leaves_distances_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = Mask::zeros(32, 32);
        let mut b = Mask::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                a.set(y, x, rng.random_range(0..3));
                b.set(y, x, rng.random_range(0..3));
            }
        }
        let ab = compute_metrics(&a, &b, 3).unwrap();
        let ba = compute_metrics(&b, &a, 3).unwrap();
        for (x, y) in ab.per_class.iter().zip(&ba.per_class) {
            assert_eq!(x.hd95, y.hd95);
            assert_eq!(x.asd, y.asd);
            assert_eq!(x.dsc, y.dsc);
        }
    }

    #[test]
    fn jaccard_dice_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut a = Mask::zeros(24, 24);
            let mut b = Mask::zeros(24, 24);
            for y in 0..24 {
                for x in 0..24 {
                    a.set(y, x, rng.random_range(0..4));
                    b.set(y, x, rng.random_range(0..4));
                }
            }
            let r = compute_metrics(&a, &b, 4).unwrap();
            for c in &r.per_class {
                assert!((c.jaccard - c.dsc / (2.0 - c.dsc)).abs() < 1e-9);
                assert!(c.jaccard <= c.dsc + 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_class_policy() {
        let a = Mask::zeros(10, 12);
        let mut b = Mask::zeros(10, 12);
        // Class 1 absent in both.
        let r = compute_metrics(&a, &b, 2).unwrap();
        assert_eq!(r.per_class[1].dsc, 1.0);
        assert_eq!(r.per_class[1].hd95, 0.0);
        // Class 1 present only in gt.
        b.set(5, 5, 1);
        let r = compute_metrics(&a, &b, 2).unwrap();
        let diag = ((9.0f64).powi(2) + (11.0f64).powi(2)).sqrt();
        assert_eq!(r.per_class[1].dsc, 0.0);
        assert_eq!(r.per_class[1].hd95, diag);
        assert_eq!(r.per_class[1].asd, diag);
    }
}
