//! First-order, time-varying, channel-wise linear recurrence
//!
//! ```text
//! h_t = A_t * h_{t-1} + u_t,    h_{-1} = 0
//! ```
//!
//! evaluated either step by step ([`scan_sequential`], the oracle) or in the
//! cumulative-retention form `h_t = P_t * sum_{j<=t} u_j / P_j` with
//! `P_t = prod_{i<=t} A_i` ([`scan_chunked`]). The global form divides by
//! products that underflow after a few hundred steps, so the sequence is cut
//! into fixed-length chunks: each chunk evaluates the ratio-sum form with a
//! local product, and the state at each chunk boundary is carried into the
//! next chunk as `h_t += P_t^local * h_carry`.
//!
//! Tensors are `[L, D]`: sequence length by state channels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Element, Tensor};

pub const DEFAULT_CHUNK: usize = 64;

fn check_pair<T: Element>(gates: &Tensor<T>, drive: &Tensor<T>, op: &'static str) -> Result<[usize; 2]> {
    let dims = gates.dims2(op)?;
    if gates.shape() != drive.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: gates.shape().to_vec(),
            rhs: drive.shape().to_vec(),
        });
    }
    Ok(dims)
}

/// Step-by-step evaluation of the recurrence. This is the reference every
/// other evaluation strategy is checked against.
pub fn scan_sequential<T: Element>(gates: &Tensor<T>, drive: &Tensor<T>) -> Result<Tensor<T>> {
    let [len, d] = check_pair(gates, drive, "scan_sequential")?;
    let (a, u) = (gates.data(), drive.data());
    let mut h = vec![T::zero(); len * d];
    let mut prev = vec![T::zero(); d];
    for t in 0..len {
        for c in 0..d {
            let v = a[t * d + c] * prev[c] + u[t * d + c];
            h[t * d + c] = v;
            prev[c] = v;
        }
    }
    Tensor::from_op(vec![len, d], h, "scan_sequential")
}

/// Chunk-local pass: writes the zero-carry state into `h` and the local
/// cumulative retention into `p`. Channels whose ratio form leaves the normal
/// floating-point range are recomputed sequentially.
fn local_chunk<T: Element>(a: &[T], u: &[T], d: usize, h: &mut [T], p: &mut [T], fallbacks: &mut usize) {
    let rows = a.len() / d;
    let mut prod = vec![T::one(); d];
    let mut ratio_sum = vec![T::zero(); d];
    let mut healthy = vec![true; d];
    for t in 0..rows {
        for c in 0..d {
            let k = t * d + c;
            prod[c] = prod[c] * a[k];
            p[k] = prod[c];
            if !healthy[c] {
                continue;
            }
            if prod[c] < T::min_positive_value() {
                healthy[c] = false;
                continue;
            }
            ratio_sum[c] = ratio_sum[c] + u[k] / prod[c];
            if !ratio_sum[c].is_finite() {
                healthy[c] = false;
                continue;
            }
            h[k] = prod[c] * ratio_sum[c];
        }
    }
    for c in (0..d).filter(|&c| !healthy[c]) {
        *fallbacks += 1;
        let mut prev = T::zero();
        for t in 0..rows {
            let k = t * d + c;
            prev = a[k] * prev + u[k];
            h[k] = prev;
        }
    }
}

/// Cumulative-retention evaluation in chunks of `chunk_len` steps.
///
/// Intra-chunk work runs in parallel across chunks, the boundary carry is a
/// sequential pass over `L / chunk_len` boundaries, and the recombination is
/// parallel again. Every output element is produced by the same arithmetic
/// regardless of the worker count.
pub fn scan_chunked<T: Element>(gates: &Tensor<T>, drive: &Tensor<T>, chunk_len: usize) -> Result<Tensor<T>> {
    scan_chunked_counted(gates, drive, chunk_len).map(|(h, _)| h)
}

/// [`scan_chunked`] that also reports how many (chunk, channel) lanes fell
/// back to sequential evaluation.
pub fn scan_chunked_counted<T: Element>(
    gates: &Tensor<T>,
    drive: &Tensor<T>,
    chunk_len: usize,
) -> Result<(Tensor<T>, usize)> {
    let [len, d] = check_pair(gates, drive, "scan_chunked")?;
    if chunk_len == 0 {
        return Err(Error::config("chunk_len", "must be positive"));
    }
    if len == 0 || d == 0 {
        return Ok((Tensor::zeros(vec![len, d]), 0));
    }
    let (a, u) = (gates.data(), drive.data());
    let block = chunk_len * d;
    let mut h = vec![T::zero(); len * d];
    let mut p = vec![T::zero(); len * d];

    let fallbacks: usize = h
        .par_chunks_mut(block)
        .zip(p.par_chunks_mut(block))
        .enumerate()
        .map(|(k, (hc, pc))| {
            let span = k * block..k * block + hc.len();
            let mut n = 0;
            local_chunk(&a[span.clone()], &u[span], d, hc, pc, &mut n);
            n
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();

    // State entering each chunk.
    let chunks = len.div_ceil(chunk_len);
    let mut carries = vec![T::zero(); chunks * d];
    for k in 1..chunks {
        let end = (k * chunk_len - 1) * d;
        for c in 0..d {
            carries[k * d + c] = h[end + c] + p[end + c] * carries[(k - 1) * d + c];
        }
    }

    h.par_chunks_mut(block)
        .zip(p.par_chunks(block))
        .enumerate()
        .skip(1)
        .for_each(|(k, (hc, pc))| {
            let carry = &carries[k * d..(k + 1) * d];
            for (t, (hv, &pv)) in hc.iter_mut().zip(pc).enumerate() {
                *hv = *hv + pv * carry[t % d];
            }
        });

    if fallbacks > 0 {
        log::debug!("scan_chunked: {fallbacks} chunk lanes evaluated sequentially");
    }
    Ok((Tensor::from_op(vec![len, d], h, "scan_chunked")?, fallbacks))
}

/// Adjoints of the recurrence given its output `h` and upstream gradient.
///
/// The state adjoint obeys the reversed recurrence
/// `lambda_t = g_t + A_{t+1} * lambda_{t+1}`, which is itself evaluated with
/// [`scan_chunked`] on the reversed sequence. Then `dL/du_t = lambda_t` and
/// `dL/dA_t = lambda_t * h_{t-1}`.
pub fn scan_backward<T: Element>(
    gates: &Tensor<T>,
    h: &Tensor<T>,
    grad: &Tensor<T>,
    chunk_len: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [len, d] = check_pair(gates, grad, "scan_backward")?;
    let (a, g, hs) = (gates.data(), grad.data(), h.data());
    let mut rev_gates = vec![T::one(); len * d];
    let mut rev_grad = vec![T::zero(); len * d];
    for s in 0..len {
        let t = len - 1 - s;
        rev_grad[s * d..(s + 1) * d].copy_from_slice(&g[t * d..(t + 1) * d]);
        if s > 0 {
            rev_gates[s * d..(s + 1) * d].copy_from_slice(&a[(t + 1) * d..(t + 2) * d]);
        }
    }
    let rev_gates = Tensor::from_parts(vec![len, d], rev_gates);
    let rev_grad = Tensor::from_parts(vec![len, d], rev_grad);
    let lambda_rev = scan_chunked(&rev_gates, &rev_grad, chunk_len)?;
    let lr = lambda_rev.data();

    let mut g_drive = vec![T::zero(); len * d];
    let mut g_gates = vec![T::zero(); len * d];
    for t in 0..len {
        let s = len - 1 - t;
        for c in 0..d {
            let lam = lr[s * d + c];
            g_drive[t * d + c] = lam;
            if t > 0 {
                g_gates[t * d + c] = lam * hs[(t - 1) * d + c];
            }
        }
    }
    Ok((
        Tensor::from_op(vec![len, d], g_gates, "scan_backward")?,
        Tensor::from_op(vec![len, d], g_drive, "scan_backward")?,
    ))
}

/// Per-step projections driving the recurrence: `B_t`, `C_t` and `Delta_t`
/// are `[L, d_state]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequences<T: Element = f64> {
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub delta: Tensor<T>,
}

impl<T: Element> ScanSequences<T> {
    pub fn new(b: Tensor<T>, c: Tensor<T>, delta: Tensor<T>) -> Result<Self> {
        let [len, _] = b.dims2("scan_sequences")?;
        for other in [&c, &delta] {
            if other.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "scan_sequences",
                    lhs: b.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
        if len == 0 {
            return Err(Error::Invalid("scan sequences must have at least one step".into()));
        }
        Ok(Self { b, c, delta })
    }

    pub fn len(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_state(&self) -> usize {
        self.b.shape()[1]
    }
}

/// Intermediate quantities of one scan, exposed for inspection.
#[derive(Debug, Clone)]
pub struct ScanState<T: Element = f64> {
    /// Exogenous drive `u_t = B_t * C_t`.
    pub drive: Tensor<T>,
    /// Transition gates `A_t = sigmoid(A + Delta_t)`, strictly inside (0, 1).
    pub gates: Tensor<T>,
    /// Cumulative retention `P_t` over the whole sequence (may underflow).
    pub retention: Tensor<T>,
    pub hidden: Tensor<T>,
}

fn drive_and_gates<T: Element>(seq: &ScanSequences<T>, a: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = seq.d_state();
    if a.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "scan_parallel",
            lhs: seq.b.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let (b, c, delta, av) = (seq.b.data(), seq.c.data(), seq.delta.data(), a.data());
    let drive: Vec<T> = b.iter().zip(c).map(|(&x, &y)| x * y).collect();
    let gates: Vec<T> = delta
        .iter()
        .enumerate()
        .map(|(k, &dl)| sigmoid(av[k % d] + dl))
        .collect();
    let shape = seq.b.shape().to_vec();
    Ok((
        Tensor::from_op(shape.clone(), drive, "scan_drive")?,
        Tensor::from_op(shape, gates, "scan_gates")?,
    ))
}

/// Gated scan from projections with the default chunk length.
pub fn scan_parallel<T: Element>(seq: &ScanSequences<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    scan_parallel_with_chunk(seq, a, DEFAULT_CHUNK)
}

pub fn scan_parallel_with_chunk<T: Element>(seq: &ScanSequences<T>, a: &Tensor<T>, chunk_len: usize) -> Result<Tensor<T>> {
    let (drive, gates) = drive_and_gates(seq, a)?;
    scan_chunked(&gates, &drive, chunk_len)
}

/// Full intermediate state, with retention from one global cumulative product.
pub fn scan_state<T: Element>(seq: &ScanSequences<T>, a: &Tensor<T>) -> Result<ScanState<T>> {
    let (drive, gates) = drive_and_gates(seq, a)?;
    let retention = crate::reduce::reduce(crate::reduce::ReduceOp::CumProd, &gates, 0)?;
    let hidden = scan_chunked(&gates, &drive, DEFAULT_CHUNK)?;
    Ok(ScanState {
        drive,
        gates,
        retention,
        hidden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, d: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(vec![len, d], |_| rng.random_range(lo..hi)).unwrap()
    }

    #[test]
    fn single_step_is_the_drive() {
        let a = Tensor::new(vec![1, 3], vec![0.3, 0.9, 0.5]).unwrap();
        let u = Tensor::new(vec![1, 3], vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(scan_chunked(&a, &u, 64).unwrap(), u);
        assert_eq!(scan_sequential(&a, &u).unwrap(), u);
    }

    #[test]
    fn half_gates_follow_geometric_series() {
        let len = 64;
        let a = Tensor::full(vec![len, 1], 0.5);
        let u = Tensor::ones(vec![len, 1]);
        let seq = scan_sequential(&a, &u).unwrap();
        let par = scan_chunked(&a, &u, 16).unwrap();
        for t in 1..=len {
            let closed = 2.0 * (1.0 - 0.5f64.powi(t as i32));
            assert!((seq.data()[t - 1] - closed).abs() <= 1e-10);
            assert!((par.data()[t - 1] - closed).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_drive_gives_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(300, 4, 0.01, 0.99, &mut rng);
        let h = scan_chunked(&a, &Tensor::zeros(vec![300, 4]), 64).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunk_length_does_not_change_result_beyond_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(1000, 5, 0.05, 0.999, &mut rng);
        let u = random(1000, 5, -1.0, 1.0, &mut rng);
        let oracle = scan_sequential(&a, &u).unwrap();
        for chunk in [1, 3, 64, 999, 1000, 5000] {
            let h = scan_chunked(&a, &u, chunk).unwrap();
            let err = crate::tensor::max_relative_error(h.data(), oracle.data(), 1e-30);
            assert!(err < 1e-9, "chunk {chunk}: {err}");
        }
    }

    #[test]
    fn tiny_gates_trigger_sequential_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::full(vec![256, 2], 1e-12);
        let u = random(256, 2, -1.0, 1.0, &mut rng);
        let (h, fallbacks) = scan_chunked_counted(&a, &u, 64).unwrap();
        assert!(fallbacks > 0);
        let oracle = scan_sequential(&a, &u).unwrap();
        assert!(crate::tensor::max_relative_error(h.data(), oracle.data(), 1e-30) < 1e-12);
    }

    #[test]
    fn f32_mode_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a64 = random(512, 3, 0.5, 0.99, &mut rng);
        let u64_ = random(512, 3, 0.1, 1.0, &mut rng);
        let (a, u) = (a64.cast::<f32>().unwrap(), u64_.cast::<f32>().unwrap());
        let h = scan_chunked(&a, &u, 64).unwrap();
        let oracle = scan_sequential(&a, &u).unwrap();
        assert!(crate::tensor::max_relative_error(h.data(), oracle.data(), 1e-30) < 1e-4);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = Tensor::<f64>::zeros(vec![4, 2]);
        let u = Tensor::<f64>::zeros(vec![4, 3]);
        assert!(matches!(scan_chunked(&a, &u, 8), Err(Error::ShapeMismatch { .. })));
        assert!(scan_chunked(&a, &a, 0).is_err());
    }

    #[test]
    fn retention_is_monotone_and_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = ScanSequences::new(
            random(200, 4, -1.0, 1.0, &mut rng),
            random(200, 4, -1.0, 1.0, &mut rng),
            random(200, 4, -2.0, 2.0, &mut rng),
        )
        .unwrap();
        let a = Tensor::new(vec![4], vec![3.0, 1.0, 0.0, -1.0]).unwrap();
        let st = scan_state(&seq, &a).unwrap();
        assert!(st.gates.data().iter().all(|&g| g > 0.0 && g < 1.0));
        for c in 0..4 {
            let mut prev = 1.0;
            for t in 0..200 {
                let p = st.retention.at(&[t, c]);
                assert!(p <= prev && (0.0..=1.0).contains(&p));
                prev = p;
            }
        }
    }
}
