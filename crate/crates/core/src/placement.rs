//! Placement of atomic modules on data-parallel ranks.
//!
//! Each rank updates the modules it owns and the results are gathered in rank
//! order. Three policies are modeled: size-sorted ping-pong (zigzag), greedy
//! least-loaded, and declaration-order round robin.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::Registry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkItem {
    pub module_name: String,
    pub cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Pingpong,
    Greedy,
    #[serde(rename = "roundrobin")]
    RoundRobin,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Pingpong, Policy::Greedy, Policy::RoundRobin];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Pingpong => "pingpong",
            Policy::Greedy => "greedy",
            Policy::RoundRobin => "roundrobin",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub policy: Policy,
    pub ranks: usize,
    pub assignment: BTreeMap<String, usize>,
    pub per_rank_load: Vec<f64>,
    /// `(max - min) / mean` of the per-rank loads.
    pub imbalance: f64,
    /// Modules per rank in the order each rank processes them.
    pub gather_order: Vec<Vec<String>>,
}

fn validate(items: &[WorkItem], ranks: usize) -> Result<()> {
    if ranks == 0 {
        return Err(Error::ConfigInvalid("ranks must be at least 1".into()));
    }
    if items.is_empty() {
        return Err(Error::ConfigInvalid("workload is empty".into()));
    }
    if let Some(bad) = items.iter().find(|i| !(i.cost > 0.0 && i.cost.is_finite())) {
        return Err(Error::ConfigInvalid(format!(
            "cost of `{}` must be positive and finite, got {}",
            bad.module_name, bad.cost
        )));
    }
    let mut names: Vec<&str> = items.iter().map(|i| i.module_name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::ConfigInvalid(format!("duplicate module `{}`", w[0])));
    }
    Ok(())
}

/// Cost descending, ties broken by name.
fn size_sorted(items: &[WorkItem]) -> Vec<&WorkItem> {
    let mut sorted: Vec<&WorkItem> = items.iter().collect();
    sorted.sort_by(|a, b| b.cost.total_cmp(&a.cost).then_with(|| a.module_name.cmp(&b.module_name)));
    sorted
}

fn report(policy: Policy, ranks: usize, placed: Vec<(&WorkItem, usize)>) -> PlacementReport {
    let mut per_rank_load = vec![0.0; ranks];
    let mut gather_order = vec![Vec::new(); ranks];
    let mut assignment = BTreeMap::new();
    for (item, rank) in placed {
        per_rank_load[rank] += item.cost;
        gather_order[rank].push(item.module_name.clone());
        assignment.insert(item.module_name.clone(), rank);
    }
    let max = per_rank_load.iter().cloned().fold(f64::MIN, f64::max);
    let min = per_rank_load.iter().cloned().fold(f64::MAX, f64::min);
    let mean = per_rank_load.iter().sum::<f64>() / ranks as f64;
    PlacementReport {
        policy,
        ranks,
        assignment,
        per_rank_load,
        imbalance: (max - min) / mean,
        gather_order,
    }
}

/// Zigzag rank for the `i`-th item: `0, 1, .., R-1, R-1, .., 1, 0, 0, 1, ..`.
pub fn zigzag_rank(i: usize, ranks: usize) -> usize {
    let pos = i % (2 * ranks);
    if pos < ranks {
        pos
    } else {
        2 * ranks - 1 - pos
    }
}

pub fn place_pingpong(items: &[WorkItem], ranks: usize) -> Result<PlacementReport> {
    validate(items, ranks)?;
    let placed = size_sorted(items)
        .into_iter()
        .enumerate()
        .map(|(i, item)| (item, zigzag_rank(i, ranks)))
        .collect();
    Ok(report(Policy::Pingpong, ranks, placed))
}

pub fn place_greedy(items: &[WorkItem], ranks: usize) -> Result<PlacementReport> {
    validate(items, ranks)?;
    let mut load = vec![0.0f64; ranks];
    let placed = size_sorted(items)
        .into_iter()
        .map(|item| {
            let (rank, _) = load
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |best, (r, &l)| if l < best.1 { (r, l) } else { best });
            load[rank] += item.cost;
            (item, rank)
        })
        .collect();
    Ok(report(Policy::Greedy, ranks, placed))
}

pub fn place_round_robin(items: &[WorkItem], ranks: usize) -> Result<PlacementReport> {
    validate(items, ranks)?;
    let placed = items.iter().enumerate().map(|(i, item)| (item, i % ranks)).collect();
    Ok(report(Policy::RoundRobin, ranks, placed))
}

pub fn place(items: &[WorkItem], ranks: usize, policy: Policy) -> Result<PlacementReport> {
    match policy {
        Policy::Pingpong => place_pingpong(items, ranks),
        Policy::Greedy => place_greedy(items, ranks),
        Policy::RoundRobin => place_round_robin(items, ranks),
    }
}

/// Work items for every module of a registry, costed by element count. With a
/// seed, each cost is multiplied by a uniform draw in `[1, 1.5)` standing in
/// for the variable number of solver iterations.
pub fn work_items(registry: &Registry, solver_depth_seed: Option<u64>) -> Vec<WorkItem> {
    let mut rng = solver_depth_seed.map(ChaCha8Rng::seed_from_u64);
    registry
        .modules
        .iter()
        .map(|m| {
            let base = (m.d_out * m.d_in) as f64;
            let mult = rng.as_mut().map_or(1.0, |r| r.random_range(1.0..1.5));
            WorkItem {
                module_name: m.name.clone(),
                cost: base * mult,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granularity::{init_registry, ArchConfig, InitOptions};

    fn items(costs: &[f64]) -> Vec<WorkItem> {
        costs
            .iter()
            .enumerate()
            .map(|(i, &c)| WorkItem {
                module_name: format!("m{i}"),
                cost: c,
            })
            .collect()
    }

    #[test]
    fn zigzag_pattern() {
        let r: Vec<usize> = (0..10).map(|i| zigzag_rank(i, 3)).collect();
        assert_eq!(r, vec![0, 1, 2, 2, 1, 0, 0, 1, 2, 2]);
    }

    #[test]
    fn pingpong_worked_example() {
        let rep = place_pingpong(&items(&[9., 8., 7., 6., 5., 4., 3., 2.]), 4).unwrap();
        assert_eq!(rep.per_rank_load, vec![11.0; 4]);
        assert_eq!(rep.imbalance, 0.0);
        assert_eq!(rep.gather_order[0], vec!["m0", "m7"]);
    }

    #[test]
    fn single_rank_takes_everything() {
        let it = items(&[3., 1., 2.]);
        for p in Policy::ALL {
            let rep = place(&it, 1, p).unwrap();
            assert!(rep.assignment.values().all(|&r| r == 0));
            assert_eq!(rep.per_rank_load, vec![6.0]);
        }
    }

    #[test]
    fn pingpong_equal_costs_balance() {
        let rep = place_pingpong(&items(&[2.0; 12]), 3).unwrap();
        assert_eq!(rep.imbalance, 0.0);
    }

    #[test]
    fn greedy_examples() {
        let rep = place_greedy(&items(&[9., 8., 7., 6., 5., 4., 3., 2.]), 4).unwrap();
        assert_eq!(rep.per_rank_load, vec![11.0; 4]);
        assert_eq!(place_greedy(&items(&[4.0]), 3).unwrap().assignment["m0"], 0);
        let rep = place_greedy(&items(&[10., 1., 1., 1.]), 2).unwrap();
        assert_eq!(rep.per_rank_load, vec![10.0, 3.0]);
    }

    #[test]
    fn round_robin_examples() {
        assert_eq!(place_round_robin(&items(&[1.0; 8]), 4).unwrap().imbalance, 0.0);
        let rep = place_round_robin(&items(&[9., 1., 9., 1.]), 2).unwrap();
        assert_eq!(rep.per_rank_load, vec![18.0, 2.0]);
        let rep2 = place_round_robin(&items(&[9., 9., 1., 1.]), 2).unwrap();
        assert_eq!(rep2.per_rank_load, vec![10.0, 10.0]);
    }

    #[test]
    fn ties_break_by_name() {
        let it = vec![
            WorkItem { module_name: "b".into(), cost: 1.0 },
            WorkItem { module_name: "a".into(), cost: 1.0 },
        ];
        let rep = place_pingpong(&it, 2).unwrap();
        assert_eq!(rep.assignment["a"], 0);
        assert_eq!(rep.assignment["b"], 1);
    }

    #[test]
    fn invalid_workloads() {
        assert!(place_pingpong(&[], 2).is_err());
        assert!(place_pingpong(&items(&[1.0]), 0).is_err());
        assert!(place_greedy(&items(&[1.0, -1.0]), 2).is_err());
        let dup = vec![
            WorkItem { module_name: "a".into(), cost: 1.0 },
            WorkItem { module_name: "a".into(), cost: 2.0 },
        ];
        assert!(place_round_robin(&dup, 2).is_err());
    }

    #[test]
    fn registry_work_items() {
        let arch = ArchConfig::Transformer {
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            d_ff: 32,
            seq_len: 4,
            split_qkv: true,
            split_gate_up: true,
        };
        let reg = init_registry(&arch, &InitOptions::default()).unwrap();
        let plain = work_items(&reg, None);
        assert_eq!(plain.len(), reg.modules.len());
        assert_eq!(plain.iter().find(|w| w.module_name == "layer0.attn.q.head0").unwrap().cost, 128.0);
        let noisy = work_items(&reg, Some(3));
        assert_eq!(noisy, work_items(&reg, Some(3)));
        for (a, b) in plain.iter().zip(&noisy) {
            assert!(b.cost >= a.cost && b.cost < 1.5 * a.cost);
        }
    }
}
