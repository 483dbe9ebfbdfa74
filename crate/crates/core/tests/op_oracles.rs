//! Forward-value oracles for the tensor ops: every numeric kernel is checked
//! against an independent closed-form or brute-force re-computation.

use morse_core::autodiff::Tape;
use morse_core::iar::PosEnc;
use morse_core::nn::gaussian;
use morse_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

mod conv {
    use super::*;

    /// Direct nested-loop convolution with zero padding.
    fn conv_oracle(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        cin: usize,
        cout: usize,
        h: usize,
        wd: usize,
        k: usize,
    ) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; cout * h * wd];
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as isize + dy as isize - pad;
                                let sx = xx as isize + dx as isize - pad;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                    acc += x[i * h * wd + sy as usize * wd + sx as usize]
                                        * w[((o * cin + i) * k + dy) * k + dx];
                                }
                            }
                        }
                    }
                    out[o * h * wd + y * wd + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let tape = Tape::<f64>::new();
        let x = tape
            .input(Tensor::from_vec(vec![1, 1, 1], vec![7.25]).unwrap())
            .unwrap();
        // Center weight 1, rest 0, bias 0.
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = tape.input(Tensor::from_vec(vec![1, 1, 3, 3], w).unwrap()).unwrap();
        let b = tape.input(Tensor::zeros(vec![1])).unwrap();
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[7.25]);

        // Larger input, same identity kernel.
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..30).map(|i| i as f64 * 0.3 - 4.0).collect();
        let x = tape
            .input(Tensor::from_vec(vec![1, 5, 6], data.clone()).unwrap())
            .unwrap();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = tape.input(Tensor::from_vec(vec![1, 1, 3, 3], w).unwrap()).unwrap();
        let b = tape.input(Tensor::zeros(vec![1])).unwrap();
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn zero_weights_give_constant_bias_output() {
        let tape = Tape::<f32>::new();
        let x = tape
            .input(gaussian::<f32>(vec![3, 6, 4], 0.0, 1.0, &mut rng(1)))
            .unwrap();
        let w = tape.input(Tensor::zeros(vec![2, 3, 3, 3])).unwrap();
        let b = tape
            .input(Tensor::from_vec(vec![2], vec![1.5, -2.0]).unwrap())
            .unwrap();
        let y = tape.conv2d(x, w, b).unwrap();
        let v = tape.value(y);
        for (i, &val) in v.data().iter().enumerate() {
            assert_eq!(val, if i < 24 { 1.5 } else { -2.0 });
        }
    }

    #[test]
    fn random_cases_match_loop_oracle() {
        let mut r = rng(2);
        for _ in 0..10 {
            let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
            let (h, w) = (r.random_range(1..7), r.random_range(1..7));
            let k = if r.random_bool(0.5) { 3 } else { 1 };
            let x = gaussian::<f64>(vec![cin, h, w], 0.0, 1.0, &mut r);
            let wt = gaussian::<f64>(vec![cout, cin, k, k], 0.0, 1.0, &mut r);
            let b = gaussian::<f64>(vec![cout], 0.0, 1.0, &mut r);
            let expected = conv_oracle(x.data(), wt.data(), b.data(), cin, cout, h, w, k);

            let tape = Tape::<f64>::new();
            let xv = tape.input(x).unwrap();
            let wv = tape.input(wt).unwrap();
            let bv = tape.input(b).unwrap();
            let y = tape.conv2d(xv, wv, bv).unwrap();
            for (got, want) in tape.value(y).data().iter().zip(&expected) {
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn shape_mismatch_names_offending_axis() {
        let tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(vec![3, 4, 4])).unwrap();
        let w = tape.input(Tensor::zeros(vec![2, 5, 3, 3])).unwrap();
        let b = tape.input(Tensor::zeros(vec![2])).unwrap();
        let err = tape.conv2d(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input-channel axis is 5"), "{msg}");
    }
}

mod upsample {
    use super::*;

    /// Independent per-output-pixel bilinear formula (align-corners-false,
    /// source coordinate clamped at zero, taps clamped to the grid).
    fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
            let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo.min(n_in - 1), hi, s - s.floor())
        };
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            let (y0, y1, ty) = coord(y, oh, h);
            for x in 0..ow {
                let (x0, x1, tx) = coord(x, ow, w);
                out[y * ow + x] = (1.0 - ty) * (1.0 - tx) * src[y0 * w + x0]
                    + (1.0 - ty) * tx * src[y0 * w + x1]
                    + ty * (1.0 - tx) * src[y1 * w + x0]
                    + ty * tx * src[y1 * w + x1];
            }
        }
        out
    }

    #[test]
    fn constant_map_stays_constant() {
        let tape = Tape::<f32>::new();
        let x = tape.input(Tensor::full(vec![2, 3, 5], 0.37f32)).unwrap();
        let y = tape.upsample(x, 11, 17).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.37);
        }
    }

    #[test]
    fn same_size_is_identity() {
        let x = gaussian::<f64>(vec![2, 4, 6], 0.0, 1.0, &mut rng(3));
        let tape = Tape::<f64>::new();
        let xv = tape.input(x.clone()).unwrap();
        let y = tape.upsample(xv, 4, 6).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn ramp_matches_closed_form() {
        let tape = Tape::<f64>::new();
        let x = tape
            .input(Tensor::from_vec(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let y = tape.upsample(x, 4, 4).unwrap();
        let expected = bilinear_oracle(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        for (got, want) in tape.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        // Spot-check the hand-computed first row.
        assert_eq!(&tape.value(y).data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn random_maps_match_closed_form() {
        let mut r = rng(4);
        for _ in 0..8 {
            let (h, w) = (r.random_range(1..6), r.random_range(1..6));
            let (oh, ow) = (h + r.random_range(0..9), w + r.random_range(0..9));
            let x = gaussian::<f64>(vec![1, h, w], 0.0, 1.0, &mut r);
            let expected = bilinear_oracle(x.data(), h, w, oh, ow);
            let tape = Tape::<f64>::new();
            let xv = tape.input(x).unwrap();
            let y = tape.upsample(xv, oh, ow).unwrap();
            for (got, want) in tape.value(y).data().iter().zip(&expected) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shrinking_is_an_error() {
        let tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(vec![1, 4, 4])).unwrap();
        assert!(tape.upsample(x, 3, 4).is_err());
    }
}

mod point_sample {
    use super::*;

    #[test]
    fn integer_coordinates_are_exact_lookups() {
        let x = gaussian::<f64>(vec![3, 5, 7], 0.0, 1.0, &mut rng(5));
        let tape = Tape::<f64>::new();
        let xv = tape.input(x.clone()).unwrap();
        let pts: Vec<(f64, f64)> = vec![(0.0, 0.0), (6.0, 4.0), (3.0, 2.0)];
        let y = tape.point_sample(xv, &pts).unwrap();
        let v = tape.value(y);
        for (j, &(px, py)) in pts.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(
                    v.data()[c * 3 + j],
                    x.data()[c * 35 + py as usize * 7 + px as usize]
                );
            }
        }
    }

    #[test]
    fn midpoint_on_ramp_is_the_mean() {
        let tape = Tape::<f64>::new();
        let xv = tape
            .input(Tensor::from_vec(vec![1, 1, 2], vec![2.0, 6.0]).unwrap())
            .unwrap();
        let y = tape.point_sample(xv, &[(0.5, 0.0)]).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn random_points_match_four_neighbor_formula() {
        let mut r = rng(6);
        let (c, h, w) = (2, 6, 9);
        let x = gaussian::<f64>(vec![c, h, w], 0.0, 1.0, &mut r);
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|_| {
                (
                    r.random_range(0.0..(w - 1) as f64),
                    r.random_range(0.0..(h - 1) as f64),
                )
            })
            .collect();
        let tape = Tape::<f64>::new();
        let xv = tape.input(x.clone()).unwrap();
        let y = tape.point_sample(xv, &pts).unwrap();
        let v = tape.value(y);
        for (j, &(px, py)) in pts.iter().enumerate() {
            let (x0, y0) = (px.floor() as usize, py.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (px - px.floor(), py - py.floor());
            for ch in 0..c {
                let f = |yy: usize, xx: usize| x.data()[ch * h * w + yy * w + xx];
                let want = (1.0 - ty) * (1.0 - tx) * f(y0, x0)
                    + (1.0 - ty) * tx * f(y0, x1)
                    + ty * (1.0 - tx) * f(y1, x0)
                    + ty * tx * f(y1, x1);
                let got = v.data()[ch * pts.len() + j];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_point_reports_its_index() {
        let tape = Tape::<f32>::new();
        let xv = tape.input(Tensor::zeros(vec![1, 4, 4])).unwrap();
        let err = tape
            .point_sample(xv, &[(1.0, 1.0), (3.5, 0.0)])
            .unwrap_err();
        assert!(err.to_string().contains("point 1"), "{err}");
    }
}

mod softmax {
    use super::*;

    #[test]
    fn uniform_and_log_integer_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap()).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let tape = Tape::<f64>::new();
        let x = tape
            .input(
                Tensor::from_vec(vec![3], vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]).unwrap(),
            )
            .unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        for (got, want) in v.data().iter().zip(&[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        // Adding the constant already rounds the inputs, so agreement is to
        // float precision rather than bitwise.
        let x = gaussian::<f64>(vec![5], 0.0, 2.0, &mut rng(7));
        let tape = Tape::<f64>::new();
        let a = tape.input(x.clone()).unwrap();
        let b = tape.input(x.map(|v| v + 100.0)).unwrap();
        let ya = tape.softmax(a, 0).unwrap();
        let yb = tape.softmax(b, 0).unwrap();
        for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one_on_random_inputs_any_axis() {
        let mut r = rng(8);
        for _ in 0..20 {
            let shape = vec![
                r.random_range(1..5usize),
                r.random_range(1..5usize),
                r.random_range(1..5usize),
            ];
            let axis = r.random_range(0..3usize);
            let x = gaussian::<f64>(shape.clone(), 0.0, 3.0, &mut r);
            let tape = Tape::<f64>::new();
            let xv = tape.input(x).unwrap();
            let y = tape.softmax(xv, axis).unwrap();
            let v = tape.value(y);
            let (outer, k, inner): (usize, usize, usize) = (
                shape[..axis].iter().product(),
                shape[axis],
                shape[axis + 1..].iter().product(),
            );
            for o in 0..outer {
                for i in 0..inner {
                    let sum: f64 = (0..k).map(|j| v.data()[(o * k + j) * inner + i]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    for j in 0..k {
                        let p = v.data()[(o * k + j) * inner + i];
                        assert!(p > 0.0 && p < 1.0 + 1e-12);
                    }
                }
            }
        }
    }
}

mod positional_encoding {
    use super::*;

    #[test]
    fn zero_frequencies_give_zero_sines_unit_cosines() {
        let mut r = rng(9);
        let mut pe = PosEnc::<f64>::new(4, 1.0, &mut r);
        pe.freqs.value = Tensor::zeros(vec![4, 2]);
        let tape = Tape::<f64>::new();
        let out = pe.encode(&tape, &[(3, 7), (0, 0)], 16, 16).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[8, 2]);
        for i in 0..4 {
            for j in 0..2 {
                assert_eq!(v.data()[i * 2 + j], 0.0);
                assert_eq!(v.data()[(4 + i) * 2 + j], 1.0);
            }
        }
    }

    #[test]
    fn sin_cos_pairing_identity() {
        let mut r = rng(10);
        let pe = PosEnc::<f64>::new(16, 1.5, &mut r);
        let coords: Vec<(u32, u32)> = (0..10)
            .map(|_| (r.random_range(0..32), r.random_range(0..24)))
            .collect();
        let tape = Tape::<f64>::new();
        let out = pe.encode(&tape, &coords, 24, 32).unwrap();
        let v = tape.value(out);
        for i in 0..16 {
            for j in 0..coords.len() {
                let s = v.data()[i * coords.len() + j];
                let c = v.data()[(16 + i) * coords.len() + j];
                assert!((s * s + c * c - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_direct_scalar_evaluation() {
        let mut r = rng(11);
        let pe = PosEnc::<f64>::new(8, 2.0, &mut r);
        let (h, w) = (20usize, 30usize);
        let coords: Vec<(u32, u32)> = (0..15)
            .map(|_| (r.random_range(0..w as u32), r.random_range(0..h as u32)))
            .collect();
        let tape = Tape::<f64>::new();
        let out = pe.encode(&tape, &coords, h, w).unwrap();
        let v = tape.value(out);
        let freqs = pe.freqs.value.data();
        for (j, &(x, y)) in coords.iter().enumerate() {
            let xt = 2.0 * x as f64 / w as f64 - 1.0;
            let yt = 2.0 * y as f64 / h as f64 - 1.0;
            for i in 0..8 {
                let phase = std::f64::consts::TAU * (freqs[2 * i] * xt + freqs[2 * i + 1] * yt);
                let s = v.data()[i * coords.len() + j];
                let c = v.data()[(8 + i) * coords.len() + j];
                assert!((s - phase.sin()).abs() < 1e-12);
                assert!((c - phase.cos()).abs() < 1e-12);
            }
        }
    }
}
