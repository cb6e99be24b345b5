//! Problem instances and candidate solutions.
//!
//! An instance places one depot and `n` customers in the unit square; every
//! customer carries an integer demand and all vehicles share one capacity.
//! Node index 0 always refers to the depot and customers are numbered 1..=n,
//! a convention kept by every module in the crate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_label, substream};

/// Capacitated vehicle routing instance on the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvrpInstance {
    /// Depot coordinates, node index 0.
    pub depot: [f64; 2],
    /// Customer coordinates; entry `i` is node index `i + 1`.
    pub coords: Vec<[f64; 2]>,
    /// Customer demands aligned with `coords`.
    pub demands: Vec<u32>,
    /// Shared vehicle capacity.
    pub capacity: u32,
}

/// A set of routes; each route lists customer indices (1..=n) in visit order
/// and implicitly starts and ends at the depot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvrpSolution {
    pub routes: Vec<Vec<usize>>,
}

impl CvrpInstance {
    /// Build an instance after validating every structural invariant.
    pub fn new(
        depot: [f64; 2],
        coords: Vec<[f64; 2]>,
        demands: Vec<u32>,
        capacity: u32,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInstance("instance has no customers".into()));
        }
        if coords.len() != demands.len() {
            return Err(Error::InvalidInstance(format!(
                "{} coordinates but {} demands",
                coords.len(),
                demands.len()
            )));
        }
        for (idx, p) in std::iter::once(&depot).chain(coords.iter()).enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::InvalidInstance(format!(
                    "node {idx} has non-finite coordinates"
                )));
            }
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::InvalidInstance(format!(
                    "node {idx} at ({}, {}) lies outside the unit square",
                    p[0], p[1]
                )));
            }
        }
        for (i, &d) in demands.iter().enumerate() {
            if d == 0 {
                return Err(Error::InvalidInstance(format!(
                    "customer {} has zero demand",
                    i + 1
                )));
            }
            if d > capacity {
                return Err(Error::InvalidInstance(format!(
                    "customer {} demand {} exceeds capacity {}",
                    i + 1,
                    d,
                    capacity
                )));
            }
        }
        Ok(CvrpInstance {
            depot,
            coords,
            demands,
            capacity,
        })
    }

    /// Number of customers (excludes the depot).
    pub fn customer_count(&self) -> usize {
        self.coords.len()
    }

    /// Number of nodes including the depot.
    pub fn node_count(&self) -> usize {
        self.coords.len() + 1
    }

    /// Coordinates of node `i`, where 0 is the depot.
    pub fn coord(&self, i: usize) -> [f64; 2] {
        if i == 0 {
            self.depot
        } else {
            self.coords[i - 1]
        }
    }

    /// Demand of node `i`; the depot demands nothing.
    pub fn demand(&self, i: usize) -> u32 {
        if i == 0 {
            0
        } else {
            self.demands[i - 1]
        }
    }

    /// Euclidean distance between nodes `i` and `j` (0 = depot).
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = self.coord(i);
        let b = self.coord(j);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    /// Total Euclidean length of all routes, each closed through the depot.
    /// An empty route list has length 0.  Indices must lie in 1..=n.
    pub fn tour_length(&self, solution: &CvrpSolution) -> f64 {
        let mut total = 0.0;
        for route in &solution.routes {
            let mut prev = 0;
            for &c in route {
                total += self.distance(prev, c);
                prev = c;
            }
            total += self.distance(prev, 0);
        }
        total
    }

    /// Sum of demands along one route.
    pub fn route_load(&self, route: &[usize]) -> u64 {
        route.iter().map(|&c| self.demand(c) as u64).sum()
    }

    /// Verify that a solution serves every customer exactly once with no
    /// route exceeding capacity; errors carry a concrete witness.
    pub fn check_feasible(&self, solution: &CvrpSolution) -> Result<()> {
        let n = self.customer_count();
        let mut seen = vec![false; n + 1];
        for (r, route) in solution.routes.iter().enumerate() {
            if route.is_empty() {
                return Err(Error::InfeasibleSolution(format!("route {r} is empty")));
            }
            for &c in route {
                if c == 0 || c > n {
                    return Err(Error::InfeasibleSolution(format!(
                        "route {r} visits invalid node {c}"
                    )));
                }
                if seen[c] {
                    return Err(Error::InfeasibleSolution(format!(
                        "customer {c} is visited more than once"
                    )));
                }
                seen[c] = true;
            }
            let load = self.route_load(route);
            if load > self.capacity as u64 {
                return Err(Error::InfeasibleSolution(format!(
                    "route {r} carries load {load} over capacity {}",
                    self.capacity
                )));
            }
        }
        for c in 1..=n {
            if !seen[c] {
                return Err(Error::InfeasibleSolution(format!(
                    "customer {c} is never visited"
                )));
            }
        }
        Ok(())
    }
}

/// Capacity assigned to randomly generated instances of a given size.
pub fn capacity_for_size(n: usize) -> u32 {
    if n <= 20 {
        30
    } else if n <= 50 {
        40
    } else {
        50
    }
}

/// Sample one instance: uniform coordinates in the unit square and uniform
/// integer demands in 1..=9, with capacity set by `capacity_for_size`.
pub fn generate_instance(n: usize, seed: u64) -> Result<CvrpInstance> {
    generate_with(n, &mut substream(seed, "instance"))
}

/// Sample `count` instances under one seed; instance `i` draws from its own
/// substream so the batch is stable under reordering or partial generation.
pub fn generate_batch(n: usize, count: usize, seed: u64) -> Result<Vec<CvrpInstance>> {
    (0..count)
        .map(|i| generate_with(n, &mut substream(seed, &indexed_label("instance", i))))
        .collect()
}

fn generate_with(n: usize, rng: &mut impl Rng) -> Result<CvrpInstance> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot generate an instance with zero customers".into(),
        ));
    }
    let depot = [rng.gen::<f64>(), rng.gen::<f64>()];
    let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
    let demands: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=9)).collect();
    CvrpInstance::new(depot, coords, demands, capacity_for_size(n))
}
