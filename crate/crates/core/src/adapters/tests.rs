use proptest::prelude::*;

use super::*;
use crate::nn::{conv3d, ConvGeometry};

fn dims(c: usize, k: usize) -> ConvKernelDims {
    ConvKernelDims::new(c, c, [k, k, k])
}

fn dims222() -> ConvKernelDims {
    ConvKernelDims::with_factors(8, 8, [3, 3, 3], [2, 2, 2], [2, 2, 2]).unwrap()
}

/// Sums the product of all cores over every assignment of every leg.
fn brute_force(net: &TensorNetwork) -> DenseTensor {
    let cores = net.cores();
    let mut labels: BTreeMap<(String, usize), usize> = BTreeMap::new();
    let mut extents = Vec::new();
    for l in net.open_legs() {
        labels.insert((l.core.clone(), l.leg), extents.len());
        extents.push(cores[&l.core].shape()[l.leg]);
    }
    let n_open = extents.len();
    for e in net.edges() {
        let id = extents.len();
        extents.push(cores[&e.a.core].shape()[e.a.leg]);
        labels.insert((e.a.core.clone(), e.a.leg), id);
        labels.insert((e.b.core.clone(), e.b.leg), id);
    }
    let out_shape = extents[..n_open].to_vec();
    let mut out = DenseTensor::zeros(&out_shape);
    let total: usize = extents.iter().product();
    let mut assign = vec![0usize; extents.len()];
    for mut flat in 0..total {
        for k in (0..extents.len()).rev() {
            assign[k] = flat % extents[k];
            flat /= extents[k];
        }
        let mut prod = 1.0;
        for (name, t) in cores {
            let idx: Vec<usize> = (0..t.order())
                .map(|leg| assign[labels[&(name.clone(), leg)]])
                .collect();
            prod *= t.get(&idx);
        }
        let o = out.offset(&assign[..n_open]);
        out.data_mut()[o] += prod;
    }
    out
}

#[test]
fn tenvoo_counts_match_hand_arithmetic() {
    let d = dims222();
    assert_eq!(build_tenvoo_l(&d, 2).unwrap().param_count(), 176);
    assert_eq!(build_tenvoo_l(&d, 1).unwrap().param_count(), 24);
    assert_eq!(build_tenvoo_q(&d, 2).unwrap().param_count(), 172);
    assert_eq!(build_tenvoo_q(&d, 1).unwrap().param_count(), 24);
    let d64 = ConvKernelDims::with_factors(64, 64, [3, 3, 3], [4, 4, 4], [4, 4, 4]).unwrap();
    assert_eq!(build_tenvoo_l(&d64, 4).unwrap().param_count(), 2176);
}

#[test]
fn baseline_counts() {
    assert_eq!(build_lora2d(4, 4, 3, 3, 2).unwrap().param_count(), 48);
    assert_eq!(build_lora3d(&dims(8, 3), 2).unwrap().param_count(), 448);
    assert_eq!(build_quanta_linear(8, 8, 1).unwrap().param_count(), 12);
}

#[test]
fn count_grid_is_exact() {
    for r in [1usize, 2, 4, 6] {
        for c in [8usize, 16, 64] {
            for k in [1usize, 3, 5] {
                let d = dims(c, k);
                let (i1, i2, i3) = (d.i[0], d.i[1], d.i[2]);
                let (o1, o2, o3) = (d.o[0], d.o[1], d.o[2]);
                let pl = (i1 * i2 + o1 * o2) * r * r
                    + (i3 + o3 + 3 * k + 1) * r * r * r
                    + 2 * r * r * r * r;
                let pq = (i1 * i2 + o1 * o2 + k) * r * r
                    + (i3 + o3 + 2 * k) * r * r * r
                    + 3 * r * r * r * r;
                assert_eq!(build_tenvoo_l(&d, r).unwrap().param_count(), pl);
                assert_eq!(build_tenvoo_q(&d, r).unwrap().param_count(), pq);
            }
        }
    }
}

#[test]
fn counts_grow_with_rank() {
    for c in [8usize, 16, 64] {
        let d = dims(c, 3);
        let mut prev = (0, 0);
        for r in 1..=8 {
            let now = (
                build_tenvoo_l(&d, r).unwrap().param_count(),
                build_tenvoo_q(&d, r).unwrap().param_count(),
            );
            assert!(now.0 >= prev.0 && now.1 >= prev.1);
            prev = now;
        }
    }
}

#[test]
fn zero_rank_and_bad_factors_are_rejected() {
    assert!(matches!(
        build_tenvoo_l(&dims222(), 0),
        Err(Error::InvalidRank(0))
    ));
    assert!(build_lora2d(2, 2, 3, 3, 0).is_err());
    assert!(build_quanta_linear(8, 8, 0).is_err());
    assert!(matches!(
        ConvKernelDims::with_factors(8, 8, [3, 3, 3], [2, 2, 3], [2, 2, 2]),
        Err(Error::Factorization(_))
    ));
}

#[test]
fn materialized_shapes() {
    let mut l = build_tenvoo_l(&dims222(), 2).unwrap();
    let mut q = build_tenvoo_q(&dims222(), 2).unwrap();
    let mut lin = build_quanta_linear(8, 8, 2).unwrap();
    l.init(0).unwrap();
    q.init(0).unwrap();
    lin.init(0).unwrap();
    assert_eq!(l.materialize_delta().unwrap().shape(), &[8, 8, 3, 3, 3]);
    assert_eq!(q.materialize_delta().unwrap().shape(), &[8, 8, 3, 3, 3]);
    assert_eq!(lin.materialize_delta().unwrap().shape(), &[8, 8]);
}

#[test]
fn uninitialized_adapter_refuses_to_materialize() {
    let s = build_tenvoo_l(&dims222(), 2).unwrap();
    assert!(matches!(
        s.materialize_delta(),
        Err(Error::UninitializedAdapter)
    ));
}

fn all_kinds(seed: u64) -> Vec<AdapterState> {
    vec![
        adapter_for_kernel(AdapterKind::TenvooL, &[6, 4, 3, 3, 3], 2, seed).unwrap(),
        adapter_for_kernel(AdapterKind::TenvooQ, &[6, 4, 3, 3, 3], 2, seed).unwrap(),
        adapter_for_kernel(AdapterKind::Lora3d, &[6, 4, 3, 3, 3], 2, seed).unwrap(),
        adapter_for_kernel(AdapterKind::Lora2d, &[6, 4, 1, 3, 3], 2, seed).unwrap(),
        adapter_for_kernel(AdapterKind::QuantaLinear, &[12, 8], 2, seed).unwrap(),
    ]
}

#[test]
fn delta_is_exactly_zero_at_init() {
    for s in all_kinds(7) {
        let d = s.materialize_delta().unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0), "{}", s.kind);
        assert!(s.trainable_kernel().unwrap().max_abs() > 0.0);
    }
}

#[test]
fn init_is_deterministic() {
    assert_eq!(all_kinds(3), all_kinds(3));
    assert_ne!(all_kinds(3)[0], all_kinds(4)[0]);
}

#[test]
fn frozen_copy_matches_trainable_at_init() {
    for s in all_kinds(11) {
        assert_eq!(s.trainable_net(), s.frozen_net());
    }
}

#[test]
fn init_variance_follows_rank_legs() {
    let mut s = build_tenvoo_l(&ConvKernelDims::new(64, 64, [3, 3, 3]), 6).unwrap();
    s.init(1).unwrap();
    // D1 has 4 rank legs: variance 6^-4
    let d1 = s.trainable_net().core("D1").unwrap();
    let var = d1.data().iter().map(|v| v * v).sum::<f64>() / d1.len() as f64;
    let expected = 6f64.powi(-4);
    assert!((var / expected - 1.0).abs() < 0.15, "{var} vs {expected}");
}

#[test]
fn tenvoo_contractions_match_brute_force() {
    for kind in [AdapterKind::TenvooL, AdapterKind::TenvooQ] {
        let d = ConvKernelDims::with_factors(2, 4, [1, 2, 1], [1, 1, 2], [1, 2, 2]).unwrap();
        let mut s = match kind {
            AdapterKind::TenvooL => build_tenvoo_l(&d, 2),
            _ => build_tenvoo_q(&d, 2),
        }
        .unwrap();
        s.init(5).unwrap();
        let oracle = brute_force(s.trainable_net())
            .reshape(&[2, 4, 1, 2, 1])
            .unwrap();
        let got = s.trainable_kernel().unwrap();
        assert!(got.max_rel_diff(&oracle) < 1e-12, "{kind}");
    }
}

#[test]
fn lora2d_matches_loops() {
    let mut s = build_lora2d(2, 2, 2, 2, 1).unwrap();
    s.init(9).unwrap();
    let a = s.trainable_net().core("A").unwrap().clone();
    let b = s.trainable_net().core("B").unwrap().clone();
    let got = s.trainable_kernel().unwrap();
    for o in 0..2 {
        for i in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let v: f64 = (0..1).map(|j| b.get(&[o, w, j]) * a.get(&[j, i, h])).sum();
                    assert!((got.get(&[o, i, h, w]) - v).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn lora2d_scalar_case() {
    let mut s = build_lora2d(1, 1, 1, 1, 1).unwrap();
    s.init(2).unwrap();
    let a = s.trainable_net().core("A").unwrap().item();
    let b = s.trainable_net().core("B").unwrap().item();
    assert_eq!(s.trainable_kernel().unwrap().item(), a * b);
}

#[test]
fn lora3d_matches_loops() {
    let d = ConvKernelDims::new(3, 2, [2, 1, 2]);
    let mut s = build_lora3d(&d, 2).unwrap();
    s.init(4).unwrap();
    let a = s.trainable_net().core("A").unwrap().clone();
    let b = s.trainable_net().core("B").unwrap().clone();
    let oracle = DenseTensor::from_fn(&[3, 2, 2, 1, 2], |x| {
        (0..2)
            .map(|j| b.get(&[x[0], j]) * a.get(&[j, x[1], x[2], x[3], x[4]]))
            .sum()
    });
    assert!(s.trainable_kernel().unwrap().max_rel_diff(&oracle) < 1e-14);
}

#[test]
fn quanta_chain_matches_loops() {
    let mut s = build_quanta_linear(8, 8, 2).unwrap();
    s.init(6).unwrap();
    let net = s.trainable_net();
    let (u1, u2, u3) = (
        net.core("U1").unwrap(),
        net.core("U2").unwrap(),
        net.core("U3").unwrap(),
    );
    let oracle = DenseTensor::from_fn(&[8, 8], |x| {
        let (m, n) = (x[0], x[1]);
        let (m1, m2, m3) = (m / 4, (m / 2) % 2, m % 2);
        let (n1, n2, n3) = (n / 4, (n / 2) % 2, n % 2);
        let mut acc = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                acc += u1.get(&[m1, n1, a]) * u2.get(&[m2, n2, a, b]) * u3.get(&[m3, n3, b]);
            }
        }
        acc
    });
    assert!(s.trainable_kernel().unwrap().max_rel_diff(&oracle) < 1e-13);
}

#[test]
fn single_core_perturbation_is_linear() {
    let mut s = build_tenvoo_l(&dims222(), 2).unwrap();
    s.init(13).unwrap();
    let eps = 1e-3;
    let core = "Kh";
    let shape = s.trainable_net().core(core).unwrap().shape().to_vec();
    let mut e = DenseTensor::zeros(&shape);
    e.set(&[1, 0, 1, 0], 1.0);
    let frozen = s.trainable_net().core(core).unwrap().clone();
    s.set_core(core, frozen.add(&e.scale(eps)).unwrap())
        .unwrap();
    let delta = s.materialize_delta().unwrap();

    let mut net = s.trainable_net().clone();
    net.set_core(core, e).unwrap();
    // A different contraction order from the greedy one used by the adapter.
    let order = ["Kw", "Kd", "A2", "A1", "D1", "M", "Kh", "D2", "B2", "B1"];
    let plan = crate::tensor::ContractionPlan::sequential(&net, &order).unwrap();
    let oracle = net
        .contract_with(&plan)
        .unwrap()
        .reshape(&[8, 8, 3, 3, 3])
        .unwrap()
        .scale(eps);
    let err = delta.sub(&oracle).unwrap().max_abs();
    assert!(err < 1e-12 * oracle.max_abs().max(1.0), "{err}");
}

#[test]
fn scaling_applies_to_delta() {
    let mut s = adapter_for_kernel(AdapterKind::Lora3d, &[4, 4, 3, 3, 3], 2, 1).unwrap();
    let b = s.trainable_net().core("B").unwrap().scale(1.5);
    s.set_core("B", b).unwrap();
    let d1 = s.materialize_delta().unwrap();
    s.scaling = 0.25;
    let d2 = s.materialize_delta().unwrap();
    assert!(d2.max_rel_diff(&d1.scale(0.25)) < 1e-15);
}

#[test]
fn merge_roundtrip_and_init_identity() {
    let mut rng = <rand_xoshiro::Xoshiro256PlusPlus as rand::SeedableRng>::seed_from_u64(1);
    for mut s in all_kinds(21) {
        let shape: Vec<usize> = if s.kind == AdapterKind::QuantaLinear {
            vec![12, 8]
        } else if s.kind == AdapterKind::Lora2d {
            vec![6, 4, 1, 3, 3]
        } else {
            vec![6, 4, 3, 3, 3]
        };
        let w = DenseTensor::randn(&shape, 1.0, &mut rng);
        assert_eq!(s.merge(&w).unwrap(), w);
        let names: Vec<String> = s
            .trainable_net()
            .cores()
            .keys()
            .filter(|n| s.is_trainable_core(n))
            .cloned()
            .collect();
        for n in names {
            let t = s.trainable_net().core(&n).unwrap().map(|v| v * 1.1 + 0.01);
            s.set_core(&n, t).unwrap();
        }
        let merged = s.merge(&w).unwrap();
        assert!(merged.sub(&w).unwrap().max_abs() > 0.0);
        let back = s.unmerge(&merged).unwrap();
        assert!(back.sub(&w).unwrap().max_abs() < 1e-12);
    }
}

#[test]
fn merged_kernel_matches_two_pass_conv() {
    let mut rng = <rand_xoshiro::Xoshiro256PlusPlus as rand::SeedableRng>::seed_from_u64(8);
    for kind in [
        AdapterKind::TenvooL,
        AdapterKind::TenvooQ,
        AdapterKind::Lora3d,
    ] {
        let mut s = adapter_for_kernel(kind, &[4, 4, 3, 3, 3], 2, 2).unwrap();
        for n in s
            .trainable_net()
            .cores()
            .keys()
            .cloned()
            .collect::<Vec<_>>()
        {
            let t = s.trainable_net().core(&n).unwrap().map(|v| v * 1.3);
            s.set_core(&n, t).unwrap();
        }
        let w = DenseTensor::randn(&[4, 4, 3, 3, 3], 0.2, &mut rng);
        let x = DenseTensor::randn(&[2, 4, 5, 5, 5], 1.0, &mut rng);
        let g = ConvGeometry::same([3, 3, 3]);
        let merged = conv3d(&x, &s.merge(&w).unwrap(), None, &g).unwrap();
        let base = conv3d(&x, &w, None, &g).unwrap();
        let update = conv3d(&x, &s.materialize_delta().unwrap(), None, &g).unwrap();
        let two_pass = base.add(&update).unwrap();
        assert!(merged.max_rel_diff(&two_pass) < 1e-10, "{kind}");
    }
}

#[test]
fn degenerate_drops_kh_terms() {
    let d = dims222();
    for r in [1, 2, 3] {
        let mut s = build_tenvoo_l(&d, r).unwrap();
        s.init(1).unwrap();
        let flat = s.degenerate_to_2d().unwrap();
        assert_eq!(s.param_count() - flat.param_count(), 3 * r * r * r);
        assert_eq!(flat.materialize_delta().unwrap().shape(), &[8, 8, 3, 3]);
        let open: Vec<String> = flat
            .trainable_net()
            .open_legs()
            .iter()
            .map(|l| l.to_string())
            .collect();
        assert_eq!(
            open,
            ["B1.0", "B1.1", "B2.0", "A1.0", "A1.1", "A2.0", "Kd.0", "Kw.0"]
        );
    }
}

#[test]
fn degenerate_matches_unit_height_kernel_with_copy_core() {
    let r = 2;
    let d = ConvKernelDims::with_factors(8, 8, [3, 1, 3], [2, 2, 2], [2, 2, 2]).unwrap();
    let mut s = build_tenvoo_l(&d, r).unwrap();
    s.init(17).unwrap();
    let copy = DenseTensor::from_fn(&[1, r, r, r], |i| {
        if i[1] == i[2] && i[2] == i[3] {
            1.0
        } else {
            0.0
        }
    });
    s.set_core("Kh", copy).unwrap();
    let flat = s.degenerate_to_2d().unwrap();
    let a = s.trainable_kernel().unwrap().squeeze();
    let b = flat.trainable_kernel().unwrap();
    assert_eq!(a.shape(), b.shape());
    assert!(a.max_rel_diff(&b) < 1e-13);
}

#[test]
fn degenerate_rejects_other_kinds() {
    let s = build_tenvoo_q(&dims222(), 2).unwrap();
    assert!(matches!(
        s.degenerate_to_2d(),
        Err(Error::WrongAdapterKind { .. })
    ));
}

#[test]
fn topology_roundtrips_through_json() {
    for s in all_kinds(5) {
        let topo = s.topology();
        let json = serde_json::to_string(&topo).unwrap();
        let back: AdapterTopology = serde_json::from_str(&json).unwrap();
        assert_eq!(back, topo);
        let rebuilt = AdapterState::from_topology(
            &back,
            s.trainable_net().cores().clone(),
            s.frozen_net().cores().clone(),
        )
        .unwrap();
        assert_eq!(
            rebuilt.materialize_delta().unwrap(),
            s.materialize_delta().unwrap()
        );
    }
}

#[test]
fn rank_legs_have_length_r() {
    for s in all_kinds(1) {
        for e in s.trainable_net().edges() {
            let len = s.trainable_net().core(&e.a.core).unwrap().shape()[e.a.leg];
            assert_eq!(len, s.rank);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scaling_one_core_scales_the_contraction(
        seed in any::<u64>(),
        c in -3.0f64..3.0,
        core_idx in 0usize..10,
        quanta in any::<bool>(),
    ) {
        let kind = if quanta { AdapterKind::TenvooQ } else { AdapterKind::TenvooL };
        let mut s = adapter_for_kernel(kind, &[8, 4, 3, 3, 3], 2, seed).unwrap();
        let name = s.trainable_net().cores().keys().nth(core_idx).unwrap().clone();
        let before = s.trainable_kernel().unwrap();
        let t = s.trainable_net().core(&name).unwrap().scale(c);
        s.set_core(&name, t).unwrap();
        let after = s.trainable_kernel().unwrap();
        let diff = after.sub(&before.scale(c)).unwrap().max_abs();
        prop_assert!(diff <= 1e-12 * before.max_abs().max(1e-300) * c.abs().max(1.0));
    }

    #[test]
    fn counts_follow_the_polynomial(
        r in 1usize..7,
        c_out in 1usize..80,
        c_in in 1usize..80,
        kd in 1usize..6, kh in 1usize..6, kw in 1usize..6,
    ) {
        let d = ConvKernelDims::new(c_out, c_in, [kd, kh, kw]);
        let [o1, o2, o3] = d.o;
        let [i1, i2, i3] = d.i;
        let pl = (i1 * i2 + o1 * o2) * r.pow(2) + (i3 + o3 + kd + kh + kw + 1) * r.pow(3) + 2 * r.pow(4);
        let pq = (i1 * i2 + o1 * o2 + kh) * r.pow(2) + (i3 + o3 + kd + kw) * r.pow(3) + 3 * r.pow(4);
        prop_assert_eq!(build_tenvoo_l(&d, r).unwrap().param_count(), pl);
        prop_assert_eq!(build_tenvoo_q(&d, r).unwrap().param_count(), pq);
    }
}
