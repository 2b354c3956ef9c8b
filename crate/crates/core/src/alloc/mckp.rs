//! Multiple-choice knapsack: at most one item per group, integer weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::JobId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MckpItem {
    /// Flexible workers granted by this choice.
    pub flex_workers: u32,
    /// GPUs consumed beyond the base grant.
    pub weight: u32,
    /// Reduction in running time, seconds.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MckpGroup {
    pub job: JobId,
    pub items: Vec<MckpItem>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MckpInstance {
    pub groups: Vec<MckpGroup>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MckpSolution {
    pub value: f64,
    pub weight: u32,
    /// Chosen item index per group; groups left out take nothing.
    pub choices: BTreeMap<usize, usize>,
}

impl MckpSolution {
    pub fn flex_grants<'a>(&'a self, inst: &'a MckpInstance) -> impl Iterator<Item = (JobId, u32)> + 'a {
        self.choices
            .iter()
            .map(|(&g, &i)| (inst.groups[g].job, inst.groups[g].items[i].flex_workers))
    }
}

impl MckpInstance {
    pub fn total_value(&self, choices: &BTreeMap<usize, usize>) -> f64 {
        // summed in group order, the same order the solvers use
        choices
            .iter()
            .fold(0.0, |acc, (&g, &i)| acc + self.groups[g].items[i].value)
    }

    pub fn total_weight(&self, choices: &BTreeMap<usize, usize>) -> u32 {
        choices.iter().map(|(&g, &i)| self.groups[g].items[i].weight).sum()
    }
}

/// Exact optimum by dynamic programming over exact total weight.
///
/// Among optimal selections the one with the smallest total weight wins;
/// remaining ties prefer taking nothing (then the lighter item) from later
/// groups.
pub fn mckp_dp(inst: &MckpInstance, capacity: u32) -> MckpSolution {
    let reach: u64 = inst
        .groups
        .iter()
        .map(|g| u64::from(g.items.iter().map(|i| i.weight).max().unwrap_or(0)))
        .sum();
    let cap = (u64::from(capacity).min(reach)) as usize;
    let n = inst.groups.len();
    let width = cap + 1;
    // table[g * width + c]: best value over the first g groups at exact weight c
    let mut table = vec![f64::NEG_INFINITY; (n + 1) * width];
    table[0] = 0.0;
    for (g, group) in inst.groups.iter().enumerate() {
        let (prev, next) = table.split_at_mut((g + 1) * width);
        let prev = &prev[g * width..];
        let next = &mut next[..width];
        next.copy_from_slice(prev);
        for item in &group.items {
            let w = item.weight as usize;
            if w > cap {
                continue;
            }
            for c in w..=cap {
                let cand = prev[c - w] + item.value;
                if cand > next[c] {
                    next[c] = cand;
                }
            }
        }
    }

    let last = &table[n * width..];
    let best = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let Some(mut c) = last.iter().position(|v| *v == best) else {
        return MckpSolution::default();
    };
    let weight = c as u32;
    let mut choices = BTreeMap::new();
    for g in (0..n).rev() {
        let here = table[(g + 1) * width + c];
        let prev = &table[g * width..(g + 1) * width];
        if prev[c] == here {
            continue;
        }
        let (idx, item) = inst.groups[g]
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| (it.weight as usize) <= c)
            .find(|(_, it)| prev[c - it.weight as usize] + it.value == here)
            .expect("dp table is consistent");
        choices.insert(g, idx);
        c -= item.weight as usize;
    }
    MckpSolution {
        value: best,
        weight,
        choices,
    }
}
