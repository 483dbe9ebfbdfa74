//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every helper assigns each output slot to exactly one closure invocation, so
//! results are bit-identical whether the `parallel` feature is enabled or not,
//! and independent of the rayon thread count. Reductions stay sequential at
//! call sites for the same reason.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many elements the parallel dispatchers fall through to the
/// sequential path; rayon setup costs more than the work itself.
const PAR_MIN_LEN: usize = 4096;

/// Fill `out[i] = f(i)` for every index.
pub fn fill_slice_seq<T, F: Fn(usize) -> T>(out: &mut [T], f: F) {
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

#[cfg(feature = "parallel")]
pub fn fill_slice<T: Send, F: Fn(usize) -> T + Sync + Send>(out: &mut [T], f: F) {
    if out.len() < PAR_MIN_LEN {
        fill_slice_seq(out, f);
    } else {
        out.par_iter_mut()
            .enumerate()
            .for_each(|(i, slot)| *slot = f(i));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn fill_slice<T, F: Fn(usize) -> T>(out: &mut [T], f: F) {
    fill_slice_seq(out, f);
}

/// Fill `out` split into `chunk`-sized pieces; `f(c, piece)` writes piece `c`.
pub fn fill_chunks_seq<T, F: Fn(usize, &mut [T])>(out: &mut [T], chunk: usize, f: F) {
    for (c, piece) in out.chunks_mut(chunk).enumerate() {
        f(c, piece);
    }
}

#[cfg(feature = "parallel")]
pub fn fill_chunks<T: Send, F: Fn(usize, &mut [T]) + Sync + Send>(out: &mut [T], chunk: usize, f: F) {
    if out.len() < PAR_MIN_LEN {
        fill_chunks_seq(out, chunk, f);
    } else {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(c, piece)| f(c, piece));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn fill_chunks<T, F: Fn(usize, &mut [T])>(out: &mut [T], chunk: usize, f: F) {
    fill_chunks_seq(out, chunk, f);
}

/// Collect `f(0), f(1), ..., f(n-1)` in index order.
pub fn map_indexed_seq<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indexed<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
    map_indexed_seq(n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let n = 10_000;
        let mut a = vec![0.0f64; n];
        let mut b = vec![0.0f64; n];
        let f = |i: usize| (i as f64).sin() * 3.25 + 1.0 / (i as f64 + 1.0);
        fill_slice(&mut a, f);
        fill_slice_seq(&mut b, f);
        assert_eq!(a, b);

        let g = |c: usize, piece: &mut [f64]| {
            for (j, v) in piece.iter_mut().enumerate() {
                *v = (c * 31 + j) as f64;
            }
        };
        fill_chunks(&mut a, 17, g);
        fill_chunks_seq(&mut b, 17, g);
        assert_eq!(a, b);

        let h = |i: usize| i * i;
        assert_eq!(map_indexed(5000, h), map_indexed_seq(5000, h));
    }
}
