use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{contract_pair, numel, DenseTensor};
use crate::error::{Error, Result};

/// One leg of one named core.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LegRef {
    pub core: String,
    pub leg: usize,
}

impl LegRef {
    pub fn new(core: impl Into<String>, leg: usize) -> Self {
        Self {
            core: core.into(),
            leg,
        }
    }
}

impl std::fmt::Display for LegRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.core, self.leg)
    }
}

/// A summed index shared by two legs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub a: LegRef,
    pub b: LegRef,
}

impl Edge {
    pub fn new(a: (&str, usize), b: (&str, usize)) -> Self {
        Self {
            a: LegRef::new(a.0, a.1),
            b: LegRef::new(b.0, b.1),
        }
    }
}

/// Named cores joined by edges; `open_legs` fixes the axis order of the contracted result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorNetwork {
    cores: BTreeMap<String, DenseTensor>,
    edges: Vec<Edge>,
    open_legs: Vec<LegRef>,
}

impl TensorNetwork {
    pub fn new(
        cores: BTreeMap<String, DenseTensor>,
        edges: Vec<Edge>,
        open_legs: Vec<LegRef>,
    ) -> Result<Self> {
        let net = Self {
            cores,
            edges,
            open_legs,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cores.is_empty() {
            return Err(Error::InvalidNetwork("network has no cores".into()));
        }
        let mut coverage: BTreeMap<LegRef, usize> = BTreeMap::new();
        let leg_len = |r: &LegRef| -> Result<usize> {
            let core = self
                .cores
                .get(&r.core)
                .ok_or_else(|| Error::InvalidNetwork(format!("unknown core {:?}", r.core)))?;
            core.shape().get(r.leg).copied().ok_or(Error::UnknownLeg {
                leg: r.leg,
                order: core.order(),
            })
        };
        for e in &self.edges {
            let (la, lb) = (leg_len(&e.a)?, leg_len(&e.b)?);
            if e.a.core == e.b.core {
                return Err(Error::InvalidNetwork(format!(
                    "self edge {} - {} is not supported",
                    e.a, e.b
                )));
            }
            if la != lb {
                return Err(Error::shape(format!(
                    "edge {} - {}: lengths {la} and {lb} differ",
                    e.a, e.b
                )));
            }
            *coverage.entry(e.a.clone()).or_default() += 1;
            *coverage.entry(e.b.clone()).or_default() += 1;
        }
        for r in &self.open_legs {
            leg_len(r)?;
            *coverage.entry(r.clone()).or_default() += 1;
        }
        for (name, core) in &self.cores {
            for leg in 0..core.order() {
                let r = LegRef::new(name.clone(), leg);
                match coverage.get(&r).copied().unwrap_or(0) {
                    1 => {}
                    0 => return Err(Error::DanglingLeg(r.to_string())),
                    n => return Err(Error::InvalidNetwork(format!("leg {r} is used {n} times"))),
                }
            }
        }
        // connectivity
        let names: Vec<&String> = self.cores.keys().collect();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut stack = vec![names[0].as_str()];
        while let Some(c) = stack.pop() {
            if !seen.insert(c) {
                continue;
            }
            for e in &self.edges {
                if e.a.core == c && !seen.contains(e.b.core.as_str()) {
                    stack.push(&e.b.core);
                }
                if e.b.core == c && !seen.contains(e.a.core.as_str()) {
                    stack.push(&e.a.core);
                }
            }
        }
        if seen.len() != self.cores.len() {
            let missing: Vec<&str> = names
                .iter()
                .map(|s| s.as_str())
                .filter(|n| !seen.contains(n))
                .collect();
            return Err(Error::DisconnectedNetwork(format!(
                "cores {missing:?} are not reachable from {:?}",
                names[0]
            )));
        }
        Ok(())
    }

    pub fn cores(&self) -> &BTreeMap<String, DenseTensor> {
        &self.cores
    }

    pub fn core(&self, name: &str) -> Option<&DenseTensor> {
        self.cores.get(name)
    }

    /// Replaces a core's values; the shape must not change.
    pub fn set_core(&mut self, name: &str, value: DenseTensor) -> Result<()> {
        let slot = self
            .cores
            .get_mut(name)
            .ok_or_else(|| Error::InvalidNetwork(format!("unknown core {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "core {name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn open_legs(&self) -> &[LegRef] {
        &self.open_legs
    }

    /// Shape of the contracted result.
    pub fn output_shape(&self) -> Vec<usize> {
        self.open_legs
            .iter()
            .map(|r| self.cores[&r.core].shape()[r.leg])
            .collect()
    }

    pub fn num_entries(&self) -> usize {
        self.cores.values().map(DenseTensor::len).sum()
    }

    pub fn plan(&self) -> Result<ContractionPlan> {
        ContractionPlan::greedy(self)
    }

    pub fn contract(&self) -> Result<DenseTensor> {
        let plan = self.plan()?;
        self.contract_with(&plan)
    }

    pub fn contract_with(&self, plan: &ContractionPlan) -> Result<DenseTensor> {
        let inputs: Vec<&DenseTensor> = plan.core_order.iter().map(|n| &self.cores[n]).collect();
        plan.execute(inputs, contract_pair, |t, order| t.permute(order))
    }
}

/// Contract the legs `pairs` of working slots `left` and `right`.
///
/// Both slots are removed (higher index first) and the result is appended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStep {
    pub left: usize,
    pub right: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// Pairwise contraction schedule derived from a network's shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractionPlan {
    pub core_order: Vec<String>,
    pub steps: Vec<PlanStep>,
    pub final_permutation: Vec<usize>,
}

#[derive(Clone)]
struct Slot {
    legs: Vec<usize>,
    dims: Vec<usize>,
}

/// Leg ids: one per edge, one per open leg.
fn label_legs(net: &TensorNetwork) -> (Vec<String>, Vec<Slot>, Vec<usize>) {
    let core_order: Vec<String> = net.cores.keys().cloned().collect();
    let mut label: BTreeMap<LegRef, usize> = BTreeMap::new();
    for (id, e) in net.edges.iter().enumerate() {
        label.insert(e.a.clone(), id);
        label.insert(e.b.clone(), id);
    }
    let open_ids: Vec<usize> = (0..net.open_legs.len())
        .map(|k| net.edges.len() + k)
        .collect();
    for (k, r) in net.open_legs.iter().enumerate() {
        label.insert(r.clone(), open_ids[k]);
    }
    let slots = core_order
        .iter()
        .map(|name| {
            let t = &net.cores[name];
            Slot {
                legs: (0..t.order())
                    .map(|l| label[&LegRef::new(name.clone(), l)])
                    .collect(),
                dims: t.shape().to_vec(),
            }
        })
        .collect();
    (core_order, slots, open_ids)
}

fn merge_slots(a: &Slot, b: &Slot) -> (Vec<(usize, usize)>, Slot) {
    let mut pairs = Vec::new();
    for (la, id) in a.legs.iter().enumerate() {
        if let Some(lb) = b.legs.iter().position(|x| x == id) {
            pairs.push((la, lb));
        }
    }
    let mut legs = Vec::new();
    let mut dims = Vec::new();
    for (l, id) in a.legs.iter().enumerate() {
        if !pairs.iter().any(|p| p.0 == l) {
            legs.push(*id);
            dims.push(a.dims[l]);
        }
    }
    for (l, id) in b.legs.iter().enumerate() {
        if !pairs.iter().any(|p| p.1 == l) {
            legs.push(*id);
            dims.push(b.dims[l]);
        }
    }
    (pairs, Slot { legs, dims })
}

fn finish(slot: &Slot, open_ids: &[usize]) -> Vec<usize> {
    open_ids
        .iter()
        .map(|id| slot.legs.iter().position(|x| x == id).expect("open leg"))
        .collect()
}

impl ContractionPlan {
    /// Repeatedly contracts the connected pair with the smallest intermediate.
    pub fn greedy(net: &TensorNetwork) -> Result<Self> {
        net.validate()?;
        let (core_order, mut slots, open_ids) = label_legs(net);
        let mut steps = Vec::new();
        while slots.len() > 1 {
            let mut best: Option<(usize, usize, usize)> = None;
            for i in 0..slots.len() {
                for j in (i + 1)..slots.len() {
                    let (pairs, merged) = merge_slots(&slots[i], &slots[j]);
                    if pairs.is_empty() {
                        continue;
                    }
                    let size = numel(&merged.dims);
                    if best.is_none_or(|(s, _, _)| size < s) {
                        best = Some((size, i, j));
                    }
                }
            }
            let (_, i, j) = best.ok_or_else(|| {
                Error::DisconnectedNetwork("no shared legs between remaining cores".into())
            })?;
            let (pairs, merged) = merge_slots(&slots[i], &slots[j]);
            slots.remove(j);
            slots.remove(i);
            slots.push(merged);
            steps.push(PlanStep {
                left: i,
                right: j,
                pairs,
            });
        }
        let final_permutation = finish(&slots[0], &open_ids);
        Ok(Self {
            core_order,
            steps,
            final_permutation,
        })
    }

    /// Folds cores in the given order into a single accumulator, left to right.
    pub fn sequential(net: &TensorNetwork, order: &[&str]) -> Result<Self> {
        net.validate()?;
        let (core_order, slots, open_ids) = label_legs(net);
        let names: BTreeSet<&str> = order.iter().copied().collect();
        if order.len() != core_order.len() || names.len() != order.len() {
            return Err(Error::InvalidNetwork(format!(
                "order {order:?} is not a permutation of the cores"
            )));
        }
        let pos = |n: &str| -> Result<usize> {
            core_order
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::InvalidNetwork(format!("unknown core {n:?}")))
        };
        // reorder slots to follow `order`; core_order follows suit
        let mut ordered = Vec::with_capacity(order.len());
        let mut ordered_names = Vec::with_capacity(order.len());
        for n in order {
            let p = pos(n)?;
            ordered.push(slots[p].clone());
            ordered_names.push(core_order[p].clone());
        }
        let mut slots: Vec<Slot> = ordered;
        let mut steps = Vec::new();
        // after the first step the accumulator is always the last slot
        while slots.len() > 1 {
            let j = if steps.is_empty() { 1 } else { slots.len() - 1 };
            let (pairs, merged) = merge_slots(&slots[0], &slots[j]);
            slots.remove(j);
            slots.remove(0);
            slots.push(merged);
            steps.push(PlanStep {
                left: 0,
                right: j,
                pairs,
            });
        }
        let final_permutation = finish(&slots[0], &open_ids);
        Ok(Self {
            core_order: ordered_names,
            steps,
            final_permutation,
        })
    }

    /// Runs the schedule with caller-supplied contraction and permutation kernels.
    pub fn execute<T, C, P>(&self, inputs: Vec<&T>, mut contract: C, mut permute: P) -> Result<T>
    where
        C: FnMut(&T, &T, &[(usize, usize)]) -> Result<T>,
        P: FnMut(&T, &[usize]) -> Result<T>,
    {
        enum Work<'a, T> {
            Input(&'a T),
            Owned(T),
        }
        impl<T> Work<'_, T> {
            fn get(&self) -> &T {
                match self {
                    Work::Input(t) => t,
                    Work::Owned(t) => t,
                }
            }
        }
        let mut work: Vec<Work<T>> = inputs.into_iter().map(Work::Input).collect();
        for step in &self.steps {
            let out = contract(work[step.left].get(), work[step.right].get(), &step.pairs)?;
            work.remove(step.right);
            work.remove(step.left);
            work.push(Work::Owned(out));
        }
        let last = work.pop().expect("plan leaves one slot");
        permute(last.get(), &self.final_permutation)
    }
}
