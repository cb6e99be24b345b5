//! Symmetry augmentations of instances.
//!
//! Two families: the eight isometries of the unit square (rotations and
//! reflections about the centre), which leave every tour length unchanged,
//! and demand permutations within the routes of a known-feasible solution,
//! which leave route loads and hence feasibility and objective unchanged.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::instance::{CvrpInstance, CvrpSolution};
use crate::rng::{indexed_label, substream};

/// Number of distinct unit-square isometries.
pub const TRANSFORM_COUNT: usize = 8;

/// Apply one of the eight unit-square isometries (indexed 0..=7):
/// 0 identity; 1..=3 rotations by 90/180/270 degrees about the centre;
/// 4..=7 reflections across the horizontal, vertical, main-diagonal and
/// anti-diagonal axes.
pub fn geometric_transform(instance: &CvrpInstance, id: usize) -> Result<CvrpInstance> {
    if id >= TRANSFORM_COUNT {
        return Err(Error::InvalidArgument(format!(
            "transform id {id} out of range 0..{TRANSFORM_COUNT}"
        )));
    }
    let map = |p: [f64; 2]| -> [f64; 2] {
        let [x, y] = p;
        match id {
            0 => [x, y],
            1 => [1.0 - y, x],
            2 => [1.0 - x, 1.0 - y],
            3 => [y, 1.0 - x],
            4 => [x, 1.0 - y],
            5 => [1.0 - x, y],
            6 => [y, x],
            _ => [1.0 - y, 1.0 - x],
        }
    };
    CvrpInstance::new(
        map(instance.depot),
        instance.coords.iter().map(|&p| map(p)).collect(),
        instance.demands.clone(),
        instance.capacity,
    )
}

/// All eight isometric variants of an instance, identity first.
pub fn augment8(instance: &CvrpInstance) -> Vec<CvrpInstance> {
    (0..TRANSFORM_COUNT)
        .map(|id| geometric_transform(instance, id).expect("valid id"))
        .collect()
}

/// How to redistribute demands along each route of a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemandPermutation {
    /// Reverse the demand sequence along the visit order.
    Inversion,
    /// Seeded uniform shuffle of each route's demands.
    RandomReassignment,
    /// Shift every demand to the next customer in visit order (last wraps
    /// to first): demands [2,3,4] become [4,2,3].
    CyclicCw,
    /// Inverse shift: demands [2,3,4] become [3,4,2].
    CyclicCcw,
}

/// Permute demands within each route of `solution`, returning a new instance
/// with identical coordinates.  Because every route keeps the same demand
/// multiset, `solution` stays feasible with an unchanged objective.  The
/// seed only matters for `RandomReassignment`.
pub fn demand_permute(
    instance: &CvrpInstance,
    solution: &CvrpSolution,
    strategy: DemandPermutation,
    seed: u64,
) -> Result<CvrpInstance> {
    instance.check_feasible(solution)?;
    let mut demands = instance.demands.clone();
    for (r, route) in solution.routes.iter().enumerate() {
        let old: Vec<u32> = route.iter().map(|&c| instance.demands[c - 1]).collect();
        let k = route.len();
        let new: Vec<u32> = match strategy {
            DemandPermutation::Inversion => old.iter().rev().copied().collect(),
            DemandPermutation::CyclicCw => (0..k).map(|i| old[(i + k - 1) % k]).collect(),
            DemandPermutation::CyclicCcw => (0..k).map(|i| old[(i + 1) % k]).collect(),
            DemandPermutation::RandomReassignment => {
                let mut rng = substream(seed, &indexed_label("demand-permute", r));
                let mut shuffled = old.clone();
                shuffled.shuffle(&mut rng);
                shuffled
            }
        };
        for (i, &c) in route.iter().enumerate() {
            demands[c - 1] = new[i];
        }
    }
    CvrpInstance::new(instance.depot, instance.coords.clone(), demands, instance.capacity)
}
