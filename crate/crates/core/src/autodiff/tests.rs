use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::*;
use crate::nn::ConvGeometry;
use crate::tensor::{Edge, LegRef, TensorNetwork};

const SEEDS: u64 = 50;
const TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

fn store(seed: u64, shapes: &[Vec<usize>]) -> ParamStore {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (k, shape) in shapes.iter().enumerate() {
        s.insert(Parameter::new(
            format!("p{k}"),
            DenseTensor::randn(shape, 1.0, &mut rng),
        ));
    }
    s
}

/// Loss `sum(op(params) * R)` for a fixed random weighting `R`.
fn weighted_loss(m: &ParamStore, seed: u64, build: &Build) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = m.iter().map(|p| g.param(p)).collect();
    let out = build(&mut g, &ids)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = DenseTensor::randn(g.value(out).shape(), 1.0, &mut rng);
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod);
    Ok((g, loss))
}

fn check_op(name: &str, shapes: &[Vec<usize>], build: &Build) {
    for seed in 0..SEEDS {
        let m = store(seed, shapes);
        for k in 0..shapes.len() {
            let err = finite_diff_check(
                &m,
                |m| weighted_loss(m, seed, build),
                &format!("p{k}"),
                1e-6,
                None,
            )
            .unwrap();
            assert!(
                err <= TOL,
                "{name}: seed {seed}, input {k}: relative error {err}"
            );
        }
    }
}

#[test]
fn fd_elementwise() {
    let s = vec![vec![2, 3], vec![2, 3]];
    check_op("add", &s, &|g, p| g.add(p[0], p[1]));
    check_op("sub", &s, &|g, p| g.sub(p[0], p[1]));
    check_op("mul", &s, &|g, p| g.mul(p[0], p[1]));
    check_op("scale", &s[..1], &|g, p| Ok(g.scale(p[0], -1.7)));
    check_op("silu", &s[..1], &|g, p| Ok(g.silu(p[0])));
}

#[test]
fn fd_broadcast() {
    let s = vec![vec![2, 3, 4], vec![3]];
    check_op("add_broadcast", &s, &|g, p| {
        g.add_broadcast(p[0], p[1], 1..2)
    });
    check_op("mul_broadcast", &s, &|g, p| {
        g.mul_broadcast(p[0], p[1], 1..2)
    });
    let s = vec![vec![2, 3, 4], vec![2, 3]];
    check_op("mul_broadcast_prefix", &s, &|g, p| {
        g.mul_broadcast(p[0], p[1], 0..2)
    });
}

#[test]
fn fd_layout() {
    let s = vec![vec![2, 3, 4]];
    check_op("reshape", &s, &|g, p| g.reshape(p[0], &[4, 6]));
    check_op("permute", &s, &|g, p| g.permute(p[0], &[2, 0, 1]));
    let s = vec![vec![1, 2, 2, 2, 2], vec![1, 3, 2, 2, 2]];
    check_op("concat", &s, &|g, p| g.concat_channels(&[p[0], p[1]]));
    check_op("upsample", &s[..1], &|g, p| g.upsample2x(p[0]));
}

#[test]
fn fd_contractions() {
    let s = vec![vec![2, 3, 4], vec![4, 2, 5]];
    check_op("contract", &s, &|g, p| {
        g.contract(p[0], p[1], &[(2, 0), (0, 1)])
    });
    let s = vec![vec![2, 3, 4], vec![2, 4, 5]];
    check_op("bmm", &s, &|g, p| g.bmm(p[0], p[1]));

    let shapes = vec![vec![2, 3], vec![3, 4, 2], vec![4, 2]];
    let net = TensorNetwork::new(
        ["a", "b", "c"]
            .iter()
            .zip(&shapes)
            .map(|(n, s)| (n.to_string(), DenseTensor::zeros(s)))
            .collect(),
        vec![Edge::new(("a", 1), ("b", 0)), Edge::new(("b", 1), ("c", 0))],
        vec![
            LegRef::new("c", 1),
            LegRef::new("a", 0),
            LegRef::new("b", 2),
        ],
    )
    .unwrap();
    let plan = net.plan().unwrap();
    check_op("contract_plan", &shapes, &move |g, p| {
        g.contract_plan(&plan, p)
    });
}

#[test]
fn fd_reductions() {
    let s = vec![vec![3, 4], vec![3, 4]];
    check_op("sum", &s[..1], &|g, p| Ok(g.sum(p[0])));
    check_op("mean", &s[..1], &|g, p| Ok(g.mean(p[0])));
    check_op("mse", &s, &|g, p| g.mse(p[0], p[1]));
    check_op("softmax", &s[..1], &|g, p| g.softmax(p[0]));
}

#[test]
fn fd_conv3d() {
    let s = vec![vec![1, 2, 4, 3, 3], vec![3, 2, 3, 2, 3], vec![3]];
    check_op("conv3d", &s, &|g, p| {
        g.conv3d(p[0], p[1], Some(p[2]), ConvGeometry::same([3, 3, 3]))
    });
    let s = vec![vec![2, 1, 5, 5, 4], vec![2, 1, 3, 3, 3]];
    check_op("conv3d_strided", &s, &|g, p| {
        g.conv3d(p[0], p[1], None, ConvGeometry::strided(2, 1))
    });
}

#[test]
fn fd_group_norm() {
    let s = vec![vec![2, 4, 2, 2, 3], vec![4], vec![4]];
    check_op("group_norm", &s, &|g, p| {
        g.group_norm(p[0], p[1], p[2], 2, 1e-5)
    });
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let p = g.leaf(
        "p",
        DenseTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
        true,
    );
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads["p"], DenseTensor::ones(&[3]));
}

#[test]
fn mse_of_contraction_matches_finite_differences() {
    let m = store(42, &[vec![2, 2], vec![2, 2]]);
    let target = DenseTensor::new(vec![2, 2], vec![0.3, -0.1, 0.7, 0.2]).unwrap();
    let forward = |m: &ParamStore| {
        let mut g = Graph::new();
        let a = g.param(m.get("p0").unwrap());
        let b = g.param(m.get("p1").unwrap());
        let c = g.contract(a, b, &[(1, 0)])?;
        let t = g.constant(target.clone());
        let l = g.mse(c, t)?;
        Ok((g, l))
    };
    for p in ["p0", "p1"] {
        assert!(finite_diff_check(&m, forward, p, 1e-6, None).unwrap() <= 1e-4);
    }
}

#[test]
fn linear_function_is_exact() {
    // dyadic values and step keep every perturbed evaluation exact
    let mut m = ParamStore::new();
    m.insert(Parameter::new(
        "p0",
        DenseTensor::new(vec![5], vec![0.5, -1.25, 2.0, 0.125, -3.0]).unwrap(),
    ));
    let w = DenseTensor::new(vec![5], vec![1.0, -2.0, 3.0, 0.5, 0.25]).unwrap();
    let forward = |m: &ParamStore| {
        let mut g = Graph::new();
        let p = g.param(m.get("p0").unwrap());
        let c = g.constant(w.clone());
        let prod = g.mul(p, c)?;
        let l = g.sum(prod);
        Ok((g, l))
    };
    let err = finite_diff_check(&m, forward, "p0", 2f64.powi(-20), None).unwrap();
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut s = store(3, &[vec![2, 2]]);
    s.insert(Parameter::frozen("frozen", DenseTensor::ones(&[2, 2])));
    let mut g = Graph::new();
    let ids: Vec<NodeId> = s.iter().map(|p| g.param(p)).collect();
    let prod = g.mul(ids[0], ids[1]).unwrap();
    let l = g.sum(prod);
    let grads = g.backward(l).unwrap();
    let trainable = s.trainable_names();
    assert!(grads.keys().all(|k| trainable.contains(k)));
    assert!(!grads.contains_key("frozen"));
}

#[test]
fn backward_is_deterministic() {
    let m = store(9, &[vec![1, 2, 4, 4, 4], vec![2, 2, 3, 3, 3]]);
    let (g, l) = weighted_loss(&m, 9, &|g, p| {
        let c = g.conv3d(p[0], p[1], None, ConvGeometry::same([3, 3, 3]))?;
        Ok(g.silu(c))
    })
    .unwrap();
    assert_eq!(g.backward(l).unwrap(), g.backward(l).unwrap());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let p = g.leaf("p", DenseTensor::ones(&[2]), true);
    assert!(matches!(g.backward(p), Err(Error::Gradient(_))));
}

#[test]
fn finite_diff_rejects_non_positive_step() {
    let m = store(0, &[vec![1]]);
    let f = |m: &ParamStore| {
        let mut g = Graph::new();
        let p = g.param(m.get("p0").unwrap());
        let l = g.sum(p);
        Ok((g, l))
    };
    assert!(finite_diff_check(&m, f, "p0", 0.0, None).is_err());
}

#[test]
fn constants_do_not_require_grad() {
    let mut g = Graph::new();
    let c = g.constant(DenseTensor::ones(&[2]));
    let p = g.leaf("p", DenseTensor::ones(&[2]), true);
    let s = g.silu(c);
    assert!(!g.requires_grad(s));
    let t = g.add(s, p).unwrap();
    assert!(g.requires_grad(t));
}
