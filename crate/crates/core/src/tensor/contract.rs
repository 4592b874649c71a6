use super::{numel, DenseTensor};
use crate::error::{Error, Result};

/// `c = alpha * a·b + beta * c` for row-major matrices given with explicit strides.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n` and contiguous.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
) {
    gemm_strided(m, k, n, alpha, a, a_rs, a_cs, b, b_rs, b_cs, beta, c, n, 1)
}

/// [`gemm`] writing into a strided view of `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
    c_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > (m - 1) * c_rs + (n - 1) * c_cs);
    if k == 0 {
        for r in 0..m {
            for q in 0..n {
                c[r * c_rs + q * c_cs] *= beta;
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
    assert!(b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    // SAFETY: bounds of a, b and c are checked above for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

fn check_pairs(a: &DenseTensor, b: &DenseTensor, pairs: &[(usize, usize)]) -> Result<()> {
    let mut used_a = vec![false; a.order()];
    let mut used_b = vec![false; b.order()];
    for &(la, lb) in pairs {
        if la >= a.order() {
            return Err(Error::UnknownLeg {
                leg: la,
                order: a.order(),
            });
        }
        if lb >= b.order() {
            return Err(Error::UnknownLeg {
                leg: lb,
                order: b.order(),
            });
        }
        if std::mem::replace(&mut used_a[la], true) || std::mem::replace(&mut used_b[lb], true) {
            return Err(Error::shape(format!("leg pair ({la}, {lb}) reuses a leg")));
        }
        if a.shape()[la] != b.shape()[lb] {
            return Err(Error::shape(format!(
                "leg pair ({la}, {lb}): lengths {} and {} differ",
                a.shape()[la],
                b.shape()[lb]
            )));
        }
    }
    Ok(())
}

/// Sums over the paired legs of `a` and `b`.
///
/// The result carries the unpaired legs of `a` in order, followed by the
/// unpaired legs of `b` in order.
pub fn contract_pair(
    a: &DenseTensor,
    b: &DenseTensor,
    pairs: &[(usize, usize)],
) -> Result<DenseTensor> {
    check_pairs(a, b, pairs)?;
    let free_a: Vec<usize> = (0..a.order())
        .filter(|l| !pairs.iter().any(|p| p.0 == *l))
        .collect();
    let free_b: Vec<usize> = (0..b.order())
        .filter(|l| !pairs.iter().any(|p| p.1 == *l))
        .collect();

    let order_a: Vec<usize> = free_a
        .iter()
        .copied()
        .chain(pairs.iter().map(|p| p.0))
        .collect();
    let order_b: Vec<usize> = pairs
        .iter()
        .map(|p| p.1)
        .chain(free_b.iter().copied())
        .collect();
    let pa = a.permute(&order_a)?;
    let pb = b.permute(&order_b)?;

    let out_shape: Vec<usize> = free_a
        .iter()
        .map(|&l| a.shape()[l])
        .chain(free_b.iter().map(|&l| b.shape()[l]))
        .collect();
    let m = numel(&free_a.iter().map(|&l| a.shape()[l]).collect::<Vec<_>>());
    let n = numel(&free_b.iter().map(|&l| b.shape()[l]).collect::<Vec<_>>());
    let k = numel(&pairs.iter().map(|p| a.shape()[p.0]).collect::<Vec<_>>());

    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        pa.data(),
        k,
        1,
        pb.data(),
        n,
        1,
        0.0,
        &mut out,
    );
    DenseTensor::new(out_shape, out)
}
