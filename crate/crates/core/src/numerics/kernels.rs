use super::{Mat, Scalar};
use crate::error::{contract, Result};

/// `a * b`.
///
/// Loop order is i-k-j with the accumulator held in `T`; every output
/// element receives its `k` terms in ascending order, so results are
/// bit-reproducible.
pub fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols() != b.rows() {
        return contract("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
    }
    let (m, n, p) = (a.rows(), a.cols(), b.cols());
    let mut out = Mat::zeros(m, p);
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &a.data()[i * n..(i + 1) * n];
        let orow = &mut od[i * p..(i + 1) * p];
        // Column blocks stay in registers across the whole k sweep.
        let mut j0 = 0;
        while j0 + BLOCK <= p {
            let mut acc = [T::zero(); BLOCK];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                let bblk = &bd[k * p + j0..k * p + j0 + BLOCK];
                for (o, &bkj) in acc.iter_mut().zip(bblk) {
                    *o += aik * bkj;
                }
            }
            orow[j0..j0 + BLOCK].copy_from_slice(&acc);
            j0 += BLOCK;
        }
        if j0 < p {
            let tail = &mut orow[j0..];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                for (o, &bkj) in tail.iter_mut().zip(&bd[k * p + j0..(k + 1) * p]) {
                    *o += aik * bkj;
                }
            }
        }
    }
    Ok(out)
}

const BLOCK: usize = 16;

/// `aᵀ * b` without materialising the transpose. Rows of `a` and `b` are
/// consumed in ascending order.
pub fn matmul_at_b<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.rows() != b.rows() {
        return contract("matmul_at_b", format!("{:?}ᵀ x {:?}", a.shape(), b.shape()));
    }
    let (n, p) = (a.cols(), b.cols());
    let mut out = Mat::zeros(n, p);
    let od = out.data_mut();
    for r in 0..a.rows() {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ari) in arow.iter().enumerate() {
            if ari == T::zero() {
                continue;
            }
            let orow = &mut od[i * p..(i + 1) * p];
            for (o, &brj) in orow.iter_mut().zip(brow) {
                *o += ari * brj;
            }
        }
    }
    Ok(out)
}

/// `a * bᵀ`. Each output entry accumulates its `k` terms in ascending
/// order from zero, exactly as a plain dot product would; the i-k-j sweep
/// over the transposed `b` only lets the inner loop vectorise.
pub fn matmul_a_bt<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols() != b.cols() {
        return contract("matmul_a_bt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape()));
    }
    let bt = b.transpose();
    let p = b.rows();
    let mut out = Mat::zeros(a.rows(), p);
    let btd = bt.data();
    let od = out.data_mut();
    for i in 0..a.rows() {
        let orow = &mut od[i * p..(i + 1) * p];
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (o, &y) in orow.iter_mut().zip(&btd[k * p..(k + 1) * p]) {
                *o += aik * y;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction. The normaliser is accumulated
/// in `f64`.
pub fn softmax_rows<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if !max.is_finite() {
        // fully masked row: leave as zeros
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Per-row normalisation statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormStats<T> {
    /// Normalised input before the affine transform.
    pub xhat: Mat<T>,
    pub rstd: Vec<T>,
}

/// Layer normalisation over the last axis. Mean and variance are
/// accumulated in `f64`.
pub fn layer_norm<T: Scalar>(m: &Mat<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<Mat<T>> {
    layer_norm_with_stats(m, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats<T: Scalar>(
    m: &Mat<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Mat<T>, LayerNormStats<T>)> {
    let d = m.cols();
    if gamma.len() != d || beta.len() != d {
        return contract("layer_norm", format!("gamma/beta lengths {}/{} for width {d}", gamma.len(), beta.len()));
    }
    let mut xhat = Mat::zeros(m.rows(), d);
    let mut y = Mat::zeros(m.rows(), d);
    let mut rstd = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(T::from_f64(rs));
        for c in 0..d {
            let xh = T::from_f64((row[c].as_f64() - mean) * rs);
            xhat.set(r, c, xh);
            y.set(r, c, xh * gamma[c] + beta[c]);
        }
    }
    Ok((y, LayerNormStats { xhat, rstd }))
}

/// Gradient of layer normalisation with respect to its input.
pub fn layer_norm_backward<T: Scalar>(dy: &Mat<T>, gamma: &[T], stats: &LayerNormStats<T>) -> Mat<T> {
    let d = dy.cols();
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = Mat::zeros(dy.rows(), d);
    for r in 0..dy.rows() {
        let xh = stats.xhat.row(r);
        let g: Vec<T> = dy.row(r).iter().zip(gamma).map(|(&a, &b)| a * b).collect();
        let mean_g = g.iter().copied().sum::<T>() * inv_d;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        let rs = stats.rstd[r];
        for c in 0..d {
            dx.set(r, c, rs * (g[c] - mean_g - xh[c] * mean_gx));
        }
    }
    dx
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    m.map(gelu_scalar)
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inner = T::from_f64(SQRT_2_OVER_PI) * (x + T::from_f64(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of [`gelu`] evaluated at the pre-activation `m`.
pub fn gelu_grad<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    m.map(|x| {
        let half = T::from_f64(0.5);
        let c = T::from_f64(SQRT_2_OVER_PI);
        let a = T::from_f64(GELU_CUBIC);
        let t = (c * (x + a * x * x * x)).tanh();
        half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
    })
}

/// Cosine similarity, accumulated in `f64` and clamped to `[-1, 1]`.
pub fn cosine_sim<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return contract("cosine_sim", format!("lengths {} and {}", u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return contract("cosine_sim", "zero-norm vector");
    }
    Ok(T::from_f64((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    /// Textbook i-j-k triple loop, used as the matmul oracle.
    fn naive(a: &Mat<f32>, b: &Mat<f32>) -> Vec<f32> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f32;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut rng = Rng::new(0);
        let m = Mat::<f32>::randn(3, 4, 1.0, &mut rng);
        assert_eq!(matmul(&Mat::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Mat::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0f32], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = Rng::new(11);
        let a = Mat::<f32>::randn(8, 8, 1.0, &mut rng);
        let b = Mat::<f32>::randn(8, 8, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(naive(&a, &b)) {
            assert!((g - w).abs() <= 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_is_bitwise_ascending_k_across_block_edges() {
        let mut rng = Rng::new(12);
        for p in [1, 15, 16, 17, 37] {
            let a = Mat::<f32>::randn(3, 11, 1.0, &mut rng);
            let b = Mat::<f32>::randn(11, p, 1.0, &mut rng);
            let got = matmul(&a, &b).unwrap();
            for i in 0..3 {
                for j in 0..p {
                    let want = (0..11).fold(0.0f32, |acc, k| acc + a.get(i, k) * b.get(k, j));
                    assert_eq!(got.get(i, j).to_bits(), want.to_bits(), "p={p} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Mat::<f32>::zeros(2, 3);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = Rng::new(5);
        let a = Mat::<f64>::randn(5, 3, 1.0, &mut rng);
        let b = Mat::<f64>::randn(5, 4, 1.0, &mut rng);
        let c = Mat::<f64>::randn(6, 3, 1.0, &mut rng);
        let x = matmul_at_b(&a, &b).unwrap();
        let y = matmul(&a.transpose(), &b).unwrap();
        assert!(super::super::max_relative_diff(x.data(), y.data()) < 1e-14);
        let x = matmul_a_bt(&a, &c).unwrap();
        let y = matmul(&a, &c.transpose()).unwrap();
        assert!(super::super::max_relative_diff(x.data(), y.data()) < 1e-14);
    }

    #[test]
    fn a_bt_is_bitwise_a_dot_product() {
        let mut rng = Rng::new(8);
        let a = Mat::<f32>::randn(7, 13, 1.0, &mut rng);
        let b = Mat::<f32>::randn(9, 13, 1.0, &mut rng);
        let x = matmul_a_bt(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..9 {
                let dot = a.row(i).iter().zip(b.row(j)).fold(0.0f32, |acc, (&p, &q)| acc + p * q);
                assert_eq!(x.get(i, j).to_bits(), dot.to_bits());
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let m = Mat::from_rows(&[vec![0.0f32, 0.0, 0.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&m);
        for c in 0..3 {
            assert!((s.get(0, c) - 1.0 / 3.0).abs() < 1e-7);
        }
        // direct scalar evaluation of e^i / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (c, want) in [0.09003f64, 0.24473, 0.66524].iter().enumerate() {
            assert!((s.get(1, c) as f64 - want).abs() < 1e-4);
            assert!((s.get(1, c) as f64 - ((c + 1) as f64).exp() / z).abs() < 1e-6);
        }
        let big = softmax_rows(&Mat::from_rows(&[vec![1000.0f32, 0.0]]).unwrap());
        assert_eq!(big.get(0, 0), 1.0);
        assert!(big.get(0, 1) >= 0.0 && big.get(0, 1) < 1e-30);
    }

    #[test]
    fn layer_norm_examples() {
        let g = vec![1.0f32; 4];
        let b = vec![0.0f32; 4];
        let c = layer_norm(&Mat::from_rows(&[vec![2.5f32; 4]]).unwrap(), &g, &b, 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let y = layer_norm(&Mat::from_rows(&[vec![1.0f32, -1.0]]).unwrap(), &g[..2], &b[..2], 1e-5).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-4 && (y.get(0, 1) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_random_row_against_direct_formula() {
        let mut rng = Rng::new(2);
        let m = Mat::<f32>::randn(1, 32, 3.0, &mut rng);
        let y = layer_norm(&m, &[1.0; 32], &[0.0; 32], 1e-5).unwrap();
        let mean = y.row(0).iter().map(|&v| v as f64).sum::<f64>() / 32.0;
        let var = y.row(0).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
        // direct formula per entry
        let xm = m.row(0).iter().map(|&v| v as f64).sum::<f64>() / 32.0;
        let xv = m.row(0).iter().map(|&v| (v as f64 - xm).powi(2)).sum::<f64>() / 32.0;
        for (a, &b) in y.row(0).iter().zip(m.row(0)) {
            assert!((*a as f64 - (b as f64 - xm) / (xv + 1e-5).sqrt()).abs() < 1e-5);
        }
        assert!(layer_norm(&m, &[1.0; 3], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let x = Mat::<f64>::randn(2, 6, 1.0, &mut rng);
        let g: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.1).collect();
        let b = vec![0.1; 6];
        let w = Mat::<f64>::randn(2, 6, 1.0, &mut rng);
        let loss = |x: &Mat<f64>| -> f64 {
            let y = layer_norm(x, &g, &b, 1e-5).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, stats) = layer_norm_with_stats(&x, &g, &b, 1e-5).unwrap();
        let dx = layer_norm_backward(&w, &g, &stats);
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "{fd} vs {}", dx.data()[i]);
        }
    }

    #[test]
    fn gelu_values_and_derivative() {
        let m = Mat::from_rows(&[vec![0.0f64, 1.0, -2.0, 3.5]]).unwrap();
        let y = gelu(&m);
        assert_eq!(y.get(0, 0), 0.0);
        assert!((y.get(0, 1) - 0.841_192).abs() < 1e-5);
        let d = gelu_grad(&m);
        let h = 1e-6;
        for c in 0..4 {
            let x = m.get(0, c);
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - d.get(0, c)).abs() < 1e-8);
        }
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0f32, 2.0, -0.5];
        let u2 = [2.0f32, 4.0, -1.0];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-7);
        assert!((cosine_sim(&u, &u2).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine_sim(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_sim(&[0.0f32, 0.0], &[0.0, 1.0]).is_err());
    }

    fn small_mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat<f64>> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matmul_is_associative(a in small_mat(3, 4), b in small_mat(4, 2), c in small_mat(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * scale);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f32..1e4, 1..40)) {
            let m = Mat::from_vec(1, row.len(), row).unwrap();
            let s = softmax_rows(&m);
            let total: f64 = s.data().iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }

        #[test]
        fn cosine_is_scale_invariant(
            u in proptest::collection::vec(-5.0f32..5.0, 6),
            v in proptest::collection::vec(-5.0f32..5.0, 6),
            alpha in 0.01f32..100.0,
            beta in 0.01f32..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let su: Vec<f32> = u.iter().map(|x| x * alpha).collect();
            let sv: Vec<f32> = v.iter().map(|x| x * beta).collect();
            let a = cosine_sim(&u, &v).unwrap();
            let b = cosine_sim(&su, &sv).unwrap();
            prop_assert!((a - b).abs() <= 1e-6);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn kernels_are_bit_reproducible(a in small_mat(4, 5), b in small_mat(5, 3)) {
            let a = a.cast::<f32>();
            let b = b.cast::<f32>();
            prop_assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
            prop_assert_eq!(softmax_rows(&a), softmax_rows(&a));
            prop_assert_eq!(gelu(&a), gelu(&a));
            let g = vec![1.0f32; 5];
            let z = vec![0.0f32; 5];
            prop_assert_eq!(layer_norm(&a, &g, &z, 1e-5).unwrap(), layer_norm(&a, &g, &z, 1e-5).unwrap());
        }
    }
}
