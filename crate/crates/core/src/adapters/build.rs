use std::collections::BTreeMap;

use super::{AdapterDims, AdapterKind, AdapterState, ConvKernelDims};
use crate::error::{Error, Result};
use crate::tensor::{factorize_channels, DenseTensor, Edge, LegRef, TensorNetwork};

fn check_rank(r: usize) -> Result<()> {
    if r == 0 {
        Err(Error::InvalidRank(r))
    } else {
        Ok(())
    }
}

fn network(
    cores: &[(&str, Vec<usize>)],
    edges: &[((&str, usize), (&str, usize))],
    open: &[(&str, usize)],
) -> Result<TensorNetwork> {
    let cores: BTreeMap<String, DenseTensor> = cores
        .iter()
        .map(|(n, s)| (n.to_string(), DenseTensor::zeros(s)))
        .collect();
    let edges = edges.iter().map(|&(a, b)| Edge::new(a, b)).collect();
    let open = open.iter().map(|&(c, l)| LegRef::new(c, l)).collect();
    TensorNetwork::new(cores, edges, open)
}

const KERNEL_LEGS: [(&str, usize); 9] = [
    ("B1", 0),
    ("B1", 1),
    ("B2", 0),
    ("A1", 0),
    ("A1", 1),
    ("A2", 0),
    ("Kd", 0),
    ("Kh", 0),
    ("Kw", 0),
];

/// Closed-form parameter count for the layered variant.
pub fn tenvoo_l_count(d: &ConvKernelDims, r: usize) -> usize {
    let [o1, o2, o3] = d.o;
    let [i1, i2, i3] = d.i;
    (i1 * i2 + o1 * o2) * r.pow(2) + (i3 + o3 + d.k_d + d.k_h + d.k_w + 1) * r.pow(3) + 2 * r.pow(4)
}

/// Closed-form parameter count for the gated variant.
pub fn tenvoo_q_count(d: &ConvKernelDims, r: usize) -> usize {
    let [o1, o2, o3] = d.o;
    let [i1, i2, i3] = d.i;
    (i1 * i2 + o1 * o2 + d.k_h) * r.pow(2) + (i3 + o3 + d.k_d + d.k_w) * r.pow(3) + 3 * r.pow(4)
}

pub fn build_tenvoo_l(dims: &ConvKernelDims, r: usize) -> Result<AdapterState> {
    check_rank(r)?;
    dims.validate()?;
    let [o1, o2, o3] = dims.o;
    let [i1, i2, i3] = dims.i;
    let net = network(
        &[
            ("A1", vec![i1, i2, r, r]),
            ("A2", vec![i3, r, r, r]),
            ("B1", vec![o1, o2, r, r]),
            ("B2", vec![o3, r, r, r]),
            ("Kd", vec![dims.k_d, r, r, r]),
            ("Kh", vec![dims.k_h, r, r, r]),
            ("Kw", vec![dims.k_w, r, r, r]),
            ("M", vec![r, r, r]),
            ("D1", vec![r, r, r, r]),
            ("D2", vec![r, r, r, r]),
        ],
        &[
            (("A1", 2), ("A2", 1)),
            (("A1", 3), ("D1", 0)),
            (("A2", 2), ("D1", 1)),
            (("A2", 3), ("Kd", 1)),
            (("B1", 2), ("B2", 1)),
            (("B1", 3), ("D2", 0)),
            (("B2", 2), ("D2", 1)),
            (("B2", 3), ("Kw", 1)),
            (("D1", 2), ("Kh", 1)),
            (("D2", 2), ("Kh", 2)),
            (("D1", 3), ("M", 0)),
            (("D2", 3), ("M", 1)),
            (("M", 2), ("Kh", 3)),
            (("Kd", 2), ("Kw", 2)),
            (("Kd", 3), ("Kw", 3)),
        ],
        &KERNEL_LEGS,
    )?;
    Ok(AdapterState::from_parts(
        AdapterKind::TenvooL,
        r,
        AdapterDims::Conv3d(dims.clone()),
        dims.kernel_shape(),
        net,
        Vec::new(),
    ))
}

pub fn build_tenvoo_q(dims: &ConvKernelDims, r: usize) -> Result<AdapterState> {
    check_rank(r)?;
    dims.validate()?;
    let [o1, o2, o3] = dims.o;
    let [i1, i2, i3] = dims.i;
    let net = network(
        &[
            ("A1", vec![i1, i2, r, r]),
            ("B1", vec![o1, o2, r, r]),
            ("Kh", vec![dims.k_h, r, r]),
            ("A2", vec![i3, r, r, r]),
            ("B2", vec![o3, r, r, r]),
            ("Kd", vec![dims.k_d, r, r, r]),
            ("Kw", vec![dims.k_w, r, r, r]),
            ("G1", vec![r, r, r, r]),
            ("G2", vec![r, r, r, r]),
            ("G3", vec![r, r, r, r]),
        ],
        &[
            (("A1", 2), ("G1", 0)),
            (("A1", 3), ("G1", 1)),
            (("A2", 1), ("G1", 2)),
            (("A2", 2), ("G2", 0)),
            (("A2", 3), ("Kd", 1)),
            (("G1", 3), ("G2", 1)),
            (("Kd", 2), ("G2", 2)),
            (("Kd", 3), ("G3", 0)),
            (("G2", 3), ("G3", 1)),
            (("Kh", 1), ("G3", 2)),
            (("G3", 3), ("B1", 2)),
            (("Kh", 2), ("B2", 1)),
            (("Kw", 1), ("B1", 3)),
            (("Kw", 2), ("B2", 2)),
            (("Kw", 3), ("B2", 3)),
        ],
        &KERNEL_LEGS,
    )?;
    Ok(AdapterState::from_parts(
        AdapterKind::TenvooQ,
        r,
        AdapterDims::Conv3d(dims.clone()),
        dims.kernel_shape(),
        net,
        Vec::new(),
    ))
}

/// `ΔW[o,i,h,w] = Σ_j B[o,w,j] A[j,i,h]`.
pub fn build_lora2d(
    c_out: usize,
    c_in: usize,
    k_h: usize,
    k_w: usize,
    r: usize,
) -> Result<AdapterState> {
    check_rank(r)?;
    let net = network(
        &[("A", vec![r, c_in, k_h]), ("B", vec![c_out, k_w, r])],
        &[(("A", 0), ("B", 2))],
        &[("B", 0), ("A", 1), ("A", 2), ("B", 1)],
    )?;
    Ok(AdapterState::from_parts(
        AdapterKind::Lora2d,
        r,
        AdapterDims::Conv2d {
            c_out,
            c_in,
            k_h,
            k_w,
        },
        vec![c_out, c_in, k_h, k_w],
        net,
        Vec::new(),
    ))
}

/// `ΔW[o,i,d,h,w] = Σ_j B[o,j] A[j,i,d,h,w]`.
pub fn build_lora3d(dims: &ConvKernelDims, r: usize) -> Result<AdapterState> {
    check_rank(r)?;
    dims.validate()?;
    let net = network(
        &[
            ("A", vec![r, dims.c_in, dims.k_d, dims.k_h, dims.k_w]),
            ("B", vec![dims.c_out, r]),
        ],
        &[(("A", 0), ("B", 1))],
        &[("B", 0), ("A", 1), ("A", 2), ("A", 3), ("A", 4)],
    )?;
    Ok(AdapterState::from_parts(
        AdapterKind::Lora3d,
        r,
        AdapterDims::Conv3d(dims.clone()),
        dims.kernel_shape(),
        net,
        Vec::new(),
    ))
}

/// Three-core chain `U1[m1,n1,r] - U2[m2,n2,r,r] - U3[m3,n3,r]`.
pub fn build_quanta_linear(d_out: usize, d_in: usize, r: usize) -> Result<AdapterState> {
    check_rank(r)?;
    if d_out == 0 || d_in == 0 {
        return Err(Error::Factorization("zero-width linear layer".into()));
    }
    let (m1, m2, m3) = factorize_channels(d_out);
    let (n1, n2, n3) = factorize_channels(d_in);
    let net = network(
        &[
            ("U1", vec![m1, n1, r]),
            ("U2", vec![m2, n2, r, r]),
            ("U3", vec![m3, n3, r]),
        ],
        &[(("U1", 2), ("U2", 2)), (("U2", 3), ("U3", 2))],
        &[
            ("U1", 0),
            ("U2", 0),
            ("U3", 0),
            ("U1", 1),
            ("U2", 1),
            ("U3", 1),
        ],
    )?;
    Ok(AdapterState::from_parts(
        AdapterKind::QuantaLinear,
        r,
        AdapterDims::Linear {
            d_out,
            d_in,
            m: [m1, m2, m3],
            n: [n1, n2, n3],
        },
        vec![d_out, d_in],
        net,
        Vec::new(),
    ))
}
