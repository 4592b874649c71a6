use std::ops::Range;

use crate::error::{Error, Result};
use crate::nn::{conv3d_backward, ConvGeometry};
use crate::tensor::{contract_pair, gemm, numel, DenseTensor};

pub(super) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBroadcast(Range<usize>),
    MulBroadcast(Range<usize>),
    Contract(Vec<(usize, usize)>),
    Reshape,
    Permute(Vec<usize>),
    Conv3d(ConvGeometry),
    Silu,
    GroupNorm {
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    Softmax,
    Concat,
    Upsample2x,
    Bmm,
    Sum,
    Mean,
    Mse,
}

type Grads = Vec<Option<DenseTensor>>;

pub(super) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// (outer, mid, inner) extents for broadcasting over `axes`.
fn split(shape: &[usize], axes: &Range<usize>) -> (usize, usize, usize) {
    (
        numel(&shape[..axes.start]),
        numel(&shape[axes.clone()]),
        numel(&shape[axes.end..]),
    )
}

pub(super) fn broadcast_apply(
    x: &DenseTensor,
    v: &DenseTensor,
    axes: &Range<usize>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseTensor> {
    if axes.end > x.order() || v.shape() != &x.shape()[axes.clone()] {
        return Err(Error::shape(format!(
            "cannot broadcast {:?} over axes {axes:?} of {:?}",
            v.shape(),
            x.shape()
        )));
    }
    let (outer, mid, inner) = split(x.shape(), axes);
    let mut out = x.clone();
    let (d, vd) = (out.data_mut(), v.data());
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            for val in &mut d[base..base + inner] {
                *val = f(*val, vd[m]);
            }
        }
    }
    Ok(out)
}

/// Sums `g` (shaped like x) down to the broadcast axes, optionally weighted by `w`.
fn broadcast_reduce(g: &DenseTensor, w: Option<&DenseTensor>, axes: &Range<usize>) -> DenseTensor {
    let (outer, mid, inner) = split(g.shape(), axes);
    let mut acc = vec![0.0; mid];
    for o in 0..outer {
        for (m, a) in acc.iter_mut().enumerate() {
            let base = (o * mid + m) * inner;
            *a += match w {
                Some(w) => g.data()[base..base + inner]
                    .iter()
                    .zip(&w.data()[base..base + inner])
                    .map(|(x, y)| x * y)
                    .sum::<f64>(),
                None => g.data()[base..base + inner].iter().sum::<f64>(),
            };
        }
    }
    DenseTensor::new(g.shape()[axes.clone()].to_vec(), acc).expect("broadcast shape")
}

pub(super) fn group_norm_forward(
    x: &DenseTensor,
    gamma: &DenseTensor,
    beta: &DenseTensor,
    groups: usize,
    eps: f64,
) -> Result<(DenseTensor, Vec<(f64, f64)>)> {
    let s = x.shape();
    if s.len() < 2 || groups == 0 || !s[1].is_multiple_of(groups) {
        return Err(Error::shape(format!(
            "group norm with {groups} groups on {s:?}"
        )));
    }
    let c = s[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "group norm affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let spatial = numel(&s[2..]);
    let per_group = c / groups * spatial;
    let mut out = x.clone();
    let mut stats = Vec::with_capacity(s[0] * groups);
    for (gi, chunk) in out.data_mut().chunks_mut(per_group).enumerate() {
        let mean = chunk.iter().sum::<f64>() / per_group as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let g = gi % groups;
        for (k, ch) in chunk.chunks_mut(spatial).enumerate() {
            let ci = g * (c / groups) + k;
            let (ga, be) = (gamma.data()[ci], beta.data()[ci]);
            for v in ch {
                *v = (*v - mean) * rstd * ga + be;
            }
        }
        stats.push((mean, rstd));
    }
    Ok((out, stats))
}

fn group_norm_backward(
    x: &DenseTensor,
    gamma: &DenseTensor,
    g: &DenseTensor,
    groups: usize,
    stats: &[(f64, f64)],
) -> (DenseTensor, DenseTensor, DenseTensor) {
    let s = x.shape();
    let c = s[1];
    let spatial = numel(&s[2..]);
    let cpg = c / groups;
    let per_group = cpg * spatial;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (gi, &(mean, rstd)) in stats.iter().enumerate() {
        let base = gi * per_group;
        let grp = gi % groups;
        let xs = &x.data()[base..base + per_group];
        let gs = &g.data()[base..base + per_group];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for k in 0..cpg {
            let ci = grp * cpg + k;
            let ga = gamma.data()[ci];
            for j in 0..spatial {
                let idx = k * spatial + j;
                let xhat = (xs[idx] - mean) * rstd;
                dgamma[ci] += gs[idx] * xhat;
                dbeta[ci] += gs[idx];
                let dxhat = gs[idx] * ga;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        let m = per_group as f64;
        for k in 0..cpg {
            let ga = gamma.data()[grp * cpg + k];
            for j in 0..spatial {
                let idx = k * spatial + j;
                let xhat = (xs[idx] - mean) * rstd;
                let dxhat = gs[idx] * ga;
                dx[base + idx] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    (
        DenseTensor::new(s.to_vec(), dx).expect("shape"),
        DenseTensor::new(vec![c], dgamma).expect("shape"),
        DenseTensor::new(vec![c], dbeta).expect("shape"),
    )
}

pub(super) fn softmax_forward(x: &DenseTensor) -> Result<DenseTensor> {
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax of a scalar"))?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(last) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

pub(super) fn concat_forward(parts: &[&DenseTensor]) -> Result<DenseTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of nothing"))?
        .shape();
    if first.len() < 2 {
        return Err(Error::shape("concat needs rank >= 2"));
    }
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
            return Err(Error::shape(format!("concat of {:?} with {:?}", first, s)));
        }
        channels += s[1];
    }
    let inner = numel(&first[2..]);
    let mut data = Vec::with_capacity(first[0] * channels * inner);
    for b in 0..first[0] {
        for p in parts {
            let chunk = p.shape()[1] * inner;
            data.extend_from_slice(&p.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[1] = channels;
    DenseTensor::new(shape, data)
}

pub(super) fn upsample_forward(x: &DenseTensor) -> Result<DenseTensor> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::shape(format!("upsample expects rank 5, got {s:?}")));
    }
    let (d, h, w) = (s[2], s[3], s[4]);
    let out_shape = vec![s[0], s[1], 2 * d, 2 * h, 2 * w];
    let mut out = Vec::with_capacity(numel(&out_shape));
    for plane in x.data().chunks(d * h * w) {
        for z in 0..2 * d {
            for y in 0..2 * h {
                let row = &plane[((z / 2) * h + y / 2) * w..][..w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    DenseTensor::new(out_shape, out)
}

fn upsample_backward(g: &DenseTensor, input_shape: &[usize]) -> DenseTensor {
    let (d, h, w) = (input_shape[2], input_shape[3], input_shape[4]);
    let mut out = vec![0.0; numel(input_shape)];
    let big = 8 * d * h * w;
    for (p, plane) in g.data().chunks(big).enumerate() {
        let dst = &mut out[p * d * h * w..(p + 1) * d * h * w];
        for z in 0..2 * d {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[((z / 2) * h + y / 2) * w + x / 2] += plane[(z * 2 * h + y) * 2 * w + x];
                }
            }
        }
    }
    DenseTensor::new(input_shape.to_vec(), out).expect("shape")
}

/// `op(a) · op(b)` per batch, where `op` optionally transposes the last two axes.
pub(super) fn bmm_forward(
    a: &DenseTensor,
    b: &DenseTensor,
    ta: bool,
    tb: bool,
) -> Result<DenseTensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(Error::shape(format!("bmm of {sa:?} and {sb:?}")));
    }
    let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    if k != k2 {
        return Err(Error::shape(format!(
            "bmm inner dimensions {k} and {k2} differ"
        )));
    }
    let batch = sa[0];
    let mut out = vec![0.0; batch * m * n];
    let (a_rs, a_cs) = if ta { (1, sa[2]) } else { (sa[2], 1) };
    let (b_rs, b_cs) = if tb { (1, sb[2]) } else { (sb[2], 1) };
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            1.0,
            &a.data()[i * sa[1] * sa[2]..],
            a_rs,
            a_cs,
            &b.data()[i * sb[1] * sb[2]..],
            b_rs,
            b_cs,
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    DenseTensor::new(vec![batch, m, n], out)
}

/// Gradient of `contract_pair(a, b, pairs)` with respect to `a`.
fn contract_grad_a(
    a: &DenseTensor,
    b: &DenseTensor,
    g: &DenseTensor,
    pairs: &[(usize, usize)],
) -> Result<DenseTensor> {
    let free_a: Vec<usize> = (0..a.order())
        .filter(|l| !pairs.iter().any(|p| p.0 == *l))
        .collect();
    let free_b: Vec<usize> = (0..b.order())
        .filter(|l| !pairs.iter().any(|p| p.1 == *l))
        .collect();
    let gp: Vec<(usize, usize)> = free_b
        .iter()
        .enumerate()
        .map(|(q, &lb)| (free_a.len() + q, lb))
        .collect();
    // legs: free_a, then b's paired legs in ascending b order
    let raw = contract_pair(g, b, &gp)?;
    let mut legs: Vec<usize> = free_a.clone();
    let mut paired_b: Vec<(usize, usize)> = pairs.iter().map(|&(x, y)| (y, x)).collect();
    paired_b.sort();
    legs.extend(paired_b.iter().map(|&(_, la)| la));
    let order: Vec<usize> = (0..a.order())
        .map(|ax| legs.iter().position(|&l| l == ax).expect("leg"))
        .collect();
    raw.permute(&order)
}

fn contract_grad_b(
    a: &DenseTensor,
    b: &DenseTensor,
    g: &DenseTensor,
    pairs: &[(usize, usize)],
) -> Result<DenseTensor> {
    let free_a: Vec<usize> = (0..a.order())
        .filter(|l| !pairs.iter().any(|p| p.0 == *l))
        .collect();
    let free_b: Vec<usize> = (0..b.order())
        .filter(|l| !pairs.iter().any(|p| p.1 == *l))
        .collect();
    let gp: Vec<(usize, usize)> = free_a.iter().enumerate().map(|(q, &la)| (la, q)).collect();
    // legs: a's paired legs in ascending a order (as b legs), then free_b
    let raw = contract_pair(a, g, &gp)?;
    let mut paired_a: Vec<(usize, usize)> = pairs.to_vec();
    paired_a.sort();
    let mut legs: Vec<usize> = paired_a.iter().map(|&(_, lb)| lb).collect();
    legs.extend(free_b);
    let order: Vec<usize> = (0..b.order())
        .map(|ax| legs.iter().position(|&l| l == ax).expect("leg"))
        .collect();
    raw.permute(&order)
}

impl Op {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBroadcast(_) => "add_broadcast",
            Op::MulBroadcast(_) => "mul_broadcast",
            Op::Contract(_) => "contract",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Conv3d(_) => "conv3d",
            Op::Silu => "silu",
            Op::GroupNorm { .. } => "group_norm",
            Op::Softmax => "softmax",
            Op::Concat => "concat",
            Op::Upsample2x => "upsample2x",
            Op::Bmm => "bmm",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Mse => "mse",
        }
    }

    /// Input gradients given the output gradient `g`; entries are `None` when not needed.
    pub(super) fn backward(
        &self,
        inputs: &[&DenseTensor],
        out: &DenseTensor,
        g: &DenseTensor,
        need: &[bool],
    ) -> Result<Grads> {
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        Ok(match self {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            Op::Mul => vec![
                want(0)
                    .then(|| g.zip_map(inputs[1], |a, b| a * b))
                    .transpose()?,
                want(1)
                    .then(|| g.zip_map(inputs[0], |a, b| a * b))
                    .transpose()?,
            ],
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::AddBroadcast(axes) => vec![
                Some(g.clone()),
                want(1).then(|| broadcast_reduce(g, None, axes)),
            ],
            Op::MulBroadcast(axes) => vec![
                want(0)
                    .then(|| broadcast_apply(g, inputs[1], axes, |a, b| a * b))
                    .transpose()?,
                want(1).then(|| broadcast_reduce(g, Some(inputs[0]), axes)),
            ],
            Op::Contract(pairs) => vec![
                want(0)
                    .then(|| contract_grad_a(inputs[0], inputs[1], g, pairs))
                    .transpose()?,
                want(1)
                    .then(|| contract_grad_b(inputs[0], inputs[1], g, pairs))
                    .transpose()?,
            ],
            Op::Reshape => vec![Some(g.reshape(inputs[0].shape())?)],
            Op::Permute(order) => {
                let mut inv = vec![0; order.len()];
                for (k, &a) in order.iter().enumerate() {
                    inv[a] = k;
                }
                vec![Some(g.permute(&inv)?)]
            }
            Op::Conv3d(geom) => {
                let (dx, dw) = conv3d_backward(inputs[0], inputs[1], g, geom, want(0), want(1))?;
                let mut v = vec![dx, dw];
                if inputs.len() == 3 {
                    v.push(want(2).then(|| broadcast_reduce(g, None, &(1..2))));
                }
                v
            }
            Op::Silu => vec![Some(g.zip_map(inputs[0], |gv, x| {
                let s = sigmoid(x);
                gv * s * (1.0 + x * (1.0 - s))
            })?)],
            Op::GroupNorm { groups, stats } => {
                let (dx, dg, db) = group_norm_backward(inputs[0], inputs[1], g, *groups, stats);
                vec![Some(dx), Some(dg), Some(db)]
            }
            Op::Softmax => {
                let last = *out.shape().last().expect("rank");
                let mut dx = g.clone();
                for (row, y) in dx.data_mut().chunks_mut(last).zip(out.data().chunks(last)) {
                    let dot: f64 = row.iter().zip(y).map(|(a, b)| a * b).sum();
                    for (r, &yv) in row.iter_mut().zip(y) {
                        *r = yv * (*r - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::Concat => {
                let inner = numel(&g.shape()[2..]);
                let total = g.shape()[1] * inner;
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for inp in inputs {
                    let chunk = inp.shape()[1] * inner;
                    let mut data = Vec::with_capacity(inp.len());
                    for b in 0..g.shape()[0] {
                        data.extend_from_slice(&g.data()[b * total + offset..][..chunk]);
                    }
                    offset += chunk;
                    grads.push(Some(DenseTensor::new(inp.shape().to_vec(), data)?));
                }
                grads
            }
            Op::Upsample2x => vec![Some(upsample_backward(g, inputs[0].shape()))],
            Op::Bmm => vec![
                want(0)
                    .then(|| bmm_forward(g, inputs[1], false, true))
                    .transpose()?,
                want(1)
                    .then(|| bmm_forward(inputs[0], g, true, false))
                    .transpose()?,
            ],
            Op::Sum => vec![Some(DenseTensor::full(inputs[0].shape(), g.item()))],
            Op::Mean => vec![Some(DenseTensor::full(
                inputs[0].shape(),
                g.item() / inputs[0].len() as f64,
            ))],
            Op::Mse => {
                let n = inputs[0].len() as f64;
                let c = 2.0 * g.item() / n;
                let da = inputs[0].zip_map(inputs[1], |a, b| c * (a - b))?;
                let db = want(1).then(|| da.scale(-1.0));
                vec![Some(da), db]
            }
        })
    }
}
