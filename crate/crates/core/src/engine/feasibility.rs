//! Promise checking as bipartite capacity matching.
//!
//! Every active predicate becomes a demand node weighted by its amount.
//! Supply nodes are the untaken instances (weight 1 each) and the pure
//! pools (weight = quantity on hand). An edge joins a demand to each supply
//! unit that could honour it. The set of predicates is satisfiable exactly
//! when the maximum flow from demands to supplies saturates every demand,
//! which is the "rearrange tentative allocations" step done implicitly: the
//! solver is free to re-bind every property predicate on each check.

use std::collections::VecDeque;

use crate::catalog::{AvailabilityView, InstanceStatus};
use crate::predicate::{satisfies, InstanceId, Predicate, ResourceTypeId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SupplyUnit {
    Pool(ResourceTypeId),
    Instance(InstanceId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Supply {
    pub unit: SupplyUnit,
    pub capacity: u64,
}

/// The bipartite demand/supply structure for one feasibility question.
#[derive(Clone, Debug, Default)]
pub struct FeasibilityProblem {
    /// Demand weight per predicate, in input order.
    pub demands: Vec<u64>,
    /// Pools first (by type name), then instances in lexicographic id order.
    pub supplies: Vec<Supply>,
    /// `(demand, supply)` pairs.
    pub edges: Vec<(usize, usize)>,
}

/// How a feasible problem was solved: for each demand, the supply units it
/// drew from and how many units each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub per_demand: Vec<Vec<(SupplyUnit, u64)>>,
}

impl Assignment {
    /// Instances bound to demand `i`, in supply order.
    pub fn instances_for(&self, i: usize) -> Vec<InstanceId> {
        self.per_demand[i]
            .iter()
            .filter_map(|(u, _)| match u {
                SupplyUnit::Instance(id) => Some(id.clone()),
                SupplyUnit::Pool(_) => None,
            })
            .collect()
    }
}

impl FeasibilityProblem {
    pub fn build<'a, I>(predicates: I, view: &AvailabilityView) -> Self
    where
        I: IntoIterator<Item = &'a Predicate>,
    {
        let predicates: Vec<&Predicate> = predicates.into_iter().collect();
        let mut problem = FeasibilityProblem {
            demands: predicates.iter().map(|p| p.amount()).collect(),
            ..Default::default()
        };

        let mut pool_types: Vec<&ResourceTypeId> = predicates
            .iter()
            .map(|p| p.resource_type())
            .filter(|t| view.is_pure_pool(t))
            .collect();
        pool_types.sort();
        pool_types.dedup();
        for ty in pool_types {
            problem.supplies.push(Supply {
                unit: SupplyUnit::Pool(ty.clone()),
                capacity: view.quantity_on_hand(ty).unwrap_or(0),
            });
        }

        let mut instance_types: Vec<&ResourceTypeId> = predicates
            .iter()
            .map(|p| p.resource_type())
            .filter(|t| !view.is_pure_pool(t))
            .collect();
        instance_types.sort();
        instance_types.dedup();
        for ty in instance_types {
            for rec in view.instances_of(ty) {
                if rec.status != InstanceStatus::Taken {
                    problem.supplies.push(Supply {
                        unit: SupplyUnit::Instance(rec.id.clone()),
                        capacity: 1,
                    });
                }
            }
        }

        for (d, p) in predicates.iter().enumerate() {
            for (s, supply) in problem.supplies.iter().enumerate() {
                let usable = match (&supply.unit, p) {
                    (SupplyUnit::Pool(ty), Predicate::Quantity { resource_type, .. }) => {
                        ty == resource_type
                    }
                    (SupplyUnit::Pool(_), _) => false,
                    (SupplyUnit::Instance(id), Predicate::Quantity { resource_type, .. }) => {
                        &id.resource_type == resource_type
                    }
                    (SupplyUnit::Instance(id), p) => view
                        .instance(id)
                        .is_some_and(|rec| satisfies(rec, p, view.schema()).unwrap_or(false)),
                };
                if usable {
                    problem.edges.push((d, s));
                }
            }
            debug_assert!(
                !matches!(p, Predicate::Named { .. })
                    || problem.edges.iter().filter(|(x, _)| *x == d).count() <= 1
            );
        }
        problem
    }

    pub fn total_demand(&self) -> u128 {
        self.demands.iter().map(|&d| d as u128).sum()
    }

    pub fn total_supply(&self) -> u128 {
        self.supplies.iter().map(|s| s.capacity as u128).sum()
    }

    pub fn is_satisfiable(&self) -> bool {
        self.solve().is_some()
    }

    /// Solves by max flow; `None` when some demand cannot be fully met.
    pub fn solve(&self) -> Option<Assignment> {
        if self.total_demand() > self.total_supply() {
            return None;
        }
        let nd = self.demands.len();
        let ns = self.supplies.len();
        let source = 0;
        let sink = 1;
        let demand_node = |d: usize| 2 + d;
        let supply_node = |s: usize| 2 + nd + s;
        let mut net = FlowNetwork::new(2 + nd + ns);
        for (d, &w) in self.demands.iter().enumerate() {
            net.add_edge(source, demand_node(d), w);
        }
        let mut matching_edges = Vec::with_capacity(self.edges.len());
        for &(d, s) in &self.edges {
            let e = net.add_edge(demand_node(d), supply_node(s), u64::MAX);
            matching_edges.push((d, s, e));
        }
        for (s, supply) in self.supplies.iter().enumerate() {
            net.add_edge(supply_node(s), sink, supply.capacity);
        }
        let flow = net.max_flow(source, sink);
        if flow != self.total_demand() {
            return None;
        }
        let mut per_demand = vec![Vec::new(); nd];
        for (d, s, e) in matching_edges {
            let used = net.flow_on(e);
            if used > 0 {
                per_demand[d].push((self.supplies[s].unit.clone(), used));
            }
        }
        Some(Assignment { per_demand })
    }
}

/// True iff every predicate can be given its full amount from disjoint
/// supply in `view`.
pub fn check_satisfiable<'a, I>(predicates: I, view: &AvailabilityView) -> bool
where
    I: IntoIterator<Item = &'a Predicate>,
{
    FeasibilityProblem::build(predicates, view).is_satisfiable()
}

/// Dinic's algorithm on an adjacency-list residual graph.
struct FlowNetwork {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<u64>,
    original: Vec<u64>,
}

impl FlowNetwork {
    fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            to: Vec::new(),
            cap: Vec::new(),
            original: Vec::new(),
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: u64) -> usize {
        let e = self.to.len();
        self.to.push(to);
        self.cap.push(cap);
        self.original.push(cap);
        self.adj[from].push(e);
        self.to.push(from);
        self.cap.push(0);
        self.original.push(0);
        self.adj[to].push(e + 1);
        e
    }

    fn flow_on(&self, e: usize) -> u64 {
        self.original[e] - self.cap[e]
    }

    fn max_flow(&mut self, s: usize, t: usize) -> u128 {
        let n = self.adj.len();
        let mut total: u128 = 0;
        loop {
            let mut level = vec![usize::MAX; n];
            level[s] = 0;
            let mut queue = VecDeque::from([s]);
            while let Some(v) = queue.pop_front() {
                for &e in &self.adj[v] {
                    let w = self.to[e];
                    if self.cap[e] > 0 && level[w] == usize::MAX {
                        level[w] = level[v] + 1;
                        queue.push_back(w);
                    }
                }
            }
            if level[t] == usize::MAX {
                return total;
            }
            let mut next = vec![0usize; n];
            loop {
                let pushed = self.augment(s, t, u64::MAX, &level, &mut next);
                if pushed == 0 {
                    break;
                }
                total += pushed as u128;
            }
        }
    }

    // Layered graph depth is at most four (source, demand, supply, sink), so
    // recursion stays shallow.
    fn augment(&mut self, v: usize, t: usize, limit: u64, level: &[usize], next: &mut [usize]) -> u64 {
        if v == t {
            return limit;
        }
        while next[v] < self.adj[v].len() {
            let e = self.adj[v][next[v]];
            let w = self.to[e];
            if self.cap[e] > 0 && level[w] == level[v] + 1 {
                let pushed = self.augment(w, t, limit.min(self.cap[e]), level, next);
                if pushed > 0 {
                    self.cap[e] -= pushed;
                    self.cap[e ^ 1] += pushed;
                    return pushed;
                }
            }
            next[v] += 1;
        }
        0
    }
}
