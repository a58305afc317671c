use proptest::prelude::*;
use spectral_sphere::placement::{place, Policy, WorkItem};

fn items(costs: &[u32]) -> Vec<WorkItem> {
    costs
        .iter()
        .enumerate()
        .map(|(i, &c)| WorkItem { module_name: format!("m{i:03}"), cost: c as f64 })
        .collect()
}

proptest! {
    #[test]
    fn loads_sum_to_total_cost(costs in prop::collection::vec(1u32..10_000, 1..60), ranks in 1usize..9) {
        let work = items(&costs);
        let total: f64 = costs.iter().map(|&c| c as f64).sum();
        for policy in Policy::ALL {
            let rep = place(&work, ranks, policy).unwrap();
            prop_assert_eq!(rep.per_rank_load.iter().sum::<f64>(), total);
            prop_assert_eq!(rep.assignment.len(), work.len());
            prop_assert_eq!(rep.gather_order.iter().map(Vec::len).sum::<usize>(), work.len());
            for (r, names) in rep.gather_order.iter().enumerate() {
                for n in names {
                    prop_assert_eq!(rep.assignment[n], r);
                }
            }
        }
    }

    #[test]
    fn placement_is_deterministic(costs in prop::collection::vec(1u32..50, 1..40), ranks in 1usize..6) {
        // Small cost range forces many ties.
        let work = items(&costs);
        for policy in Policy::ALL {
            prop_assert_eq!(place(&work, ranks, policy).unwrap(), place(&work, ranks, policy).unwrap());
        }
    }

    #[test]
    fn sorted_policies_ignore_input_order(costs in prop::collection::vec(1u32..10_000, 1..40), ranks in 1usize..6) {
        let work = items(&costs);
        let mut reversed = work.clone();
        reversed.reverse();
        for policy in [Policy::Pingpong, Policy::Greedy] {
            prop_assert_eq!(place(&work, ranks, policy).unwrap(), place(&reversed, ranks, policy).unwrap());
        }
    }
}

#[test]
fn round_robin_follows_input_order() {
    let work = items(&[10, 1, 10, 1]);
    let rep = place(&work, 2, Policy::RoundRobin).unwrap();
    assert_eq!(rep.per_rank_load, vec![20.0, 2.0]);
    let mut reversed = work.clone();
    reversed.reverse();
    let rep = place(&reversed, 2, Policy::RoundRobin).unwrap();
    assert_eq!(rep.per_rank_load, vec![2.0, 20.0]);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(place(&[], 2, Policy::Pingpong).is_err());
    assert!(place(&items(&[1]), 0, Policy::Greedy).is_err());
    let neg = vec![WorkItem { module_name: "a".into(), cost: -1.0 }];
    assert!(place(&neg, 1, Policy::RoundRobin).is_err());
}
