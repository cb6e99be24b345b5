//! Reference solvers: exact dynamic programming for small instances and two
//! classical constructive baselines.
//!
//! The exact solver prices every capacity-feasible customer subset with a
//! Held-Karp tour DP, then covers the full customer set by a partition DP
//! over subsets.  The savings solver follows the parallel Clarke-Wright
//! merge scheme and polishes the result with 2-opt and relocate moves; the
//! nearest-neighbour solver greedily extends routes while capacity lasts.
//! All three are fully deterministic.

use crate::error::{Error, Result};
use crate::instance::{CvrpInstance, CvrpSolution};

/// Largest customer count the exact solver accepts (subset DP is 2^n).
pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Exact minimum-length solution via subset dynamic programming.
///
/// Feasible only for `n <= BRUTE_FORCE_LIMIT`.  Ties are broken
/// deterministically, and the returned routes are canonicalised: each route
/// uses the lexicographically smaller of its two orientations and routes are
/// sorted by their smallest customer.
pub fn brute_force_solve(instance: &CvrpInstance) -> Result<CvrpSolution> {
    let n = instance.customer_count();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "exact solver limited to {BRUTE_FORCE_LIMIT} customers, got {n}"
        )));
    }
    check_demands(instance)?;
    let full = (1u32 << n) - 1;

    // Load per subset, to prune infeasible routes up front.
    let mut load = vec![0u64; 1 << n];
    for mask in 1..=full {
        let i = mask.trailing_zeros() as usize;
        load[mask as usize] = load[(mask & (mask - 1)) as usize] + instance.demands[i] as u64;
    }

    // Held-Karp over each subset: tsp[mask][j] = shortest depot-start path
    // visiting exactly `mask`, ending at customer j (0-based bit j).
    let size = 1usize << n;
    let mut tsp = vec![f64::INFINITY; size * n];
    let mut tsp_parent = vec![usize::MAX; size * n];
    for j in 0..n {
        tsp[(1 << j) * n + j] = instance.distance(0, j + 1);
    }
    for mask in 1..size {
        for j in 0..n {
            let cur = tsp[mask * n + j];
            if !cur.is_finite() {
                continue;
            }
            let mut rest = full as usize & !mask;
            while rest != 0 {
                let k = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                let next = mask | (1 << k);
                let cand = cur + instance.distance(j + 1, k + 1);
                if cand < tsp[next * n + k] {
                    tsp[next * n + k] = cand;
                    tsp_parent[next * n + k] = j;
                }
            }
        }
    }

    // Closed-route cost per feasible subset, with the deterministic best end
    // node recorded for reconstruction.
    let cap = instance.capacity as u64;
    let mut route_cost = vec![f64::INFINITY; size];
    let mut route_end = vec![usize::MAX; size];
    for mask in 1..size {
        if load[mask] > cap {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 {
                continue;
            }
            let cand = tsp[mask * n + j] + instance.distance(j + 1, 0);
            if cand < route_cost[mask] {
                route_cost[mask] = cand;
                route_end[mask] = j;
            }
        }
    }

    // Partition DP: cover `mask` by feasible subsets; pinning the lowest set
    // bit into the chosen subset enumerates each partition exactly once.
    let mut best = vec![f64::INFINITY; size];
    let mut parent = vec![0usize; size];
    best[0] = 0.0;
    for mask in 1..size {
        let low = 1usize << mask.trailing_zeros();
        let mut sub = mask;
        while sub != 0 {
            if sub & low != 0 && route_cost[sub].is_finite() {
                let rest = best[mask & !sub];
                if rest.is_finite() {
                    let cand = route_cost[sub] + rest;
                    if cand < best[mask] {
                        best[mask] = cand;
                        parent[mask] = sub;
                    }
                }
            }
            sub = (sub - 1) & mask;
        }
    }
    if !best[full as usize].is_finite() {
        return Err(Error::InvalidInstance(
            "no capacity-feasible partition of the customers exists".into(),
        ));
    }

    // Reconstruct routes, then canonicalise orientation and order.
    let mut routes = Vec::new();
    let mut mask = full as usize;
    while mask != 0 {
        let sub = parent[mask];
        let mut seq = Vec::new();
        let mut m = sub;
        let mut j = route_end[sub];
        while j != usize::MAX {
            seq.push(j + 1);
            let pj = tsp_parent[m * n + j];
            m &= !(1 << j);
            j = pj;
        }
        seq.reverse();
        routes.push(seq);
        mask &= !sub;
    }
    Ok(canonicalize(routes))
}

/// Orient each route lexicographically and sort routes by smallest customer.
fn canonicalize(mut routes: Vec<Vec<usize>>) -> CvrpSolution {
    for route in &mut routes {
        let reversed: Vec<usize> = route.iter().rev().copied().collect();
        if reversed < *route {
            *route = reversed;
        }
    }
    routes.sort_by_key(|r| r.iter().min().copied().unwrap_or(usize::MAX));
    CvrpSolution { routes }
}

/// Clarke-Wright parallel savings construction followed by 2-opt and
/// relocate local search.  Deterministic: savings ties break on index order.
pub fn savings_solve(instance: &CvrpInstance) -> Result<CvrpSolution> {
    check_demands(instance)?;
    let n = instance.customer_count();
    let cap = instance.capacity as u64;

    // One route per customer to start.
    let mut routes: Vec<Vec<usize>> = (1..=n).map(|c| vec![c]).collect();
    let mut route_of: Vec<usize> = (0..n).map(|i| i).collect(); // customer c -> routes index
    let mut loads: Vec<u64> = instance.demands.iter().map(|&d| d as u64).collect();

    let mut savings: Vec<(f64, usize, usize)> = Vec::new();
    for i in 1..=n {
        for j in (i + 1)..=n {
            let s = instance.distance(0, i) + instance.distance(0, j) - instance.distance(i, j);
            savings.push((s, i, j));
        }
    }
    savings.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    for &(s, i, j) in &savings {
        if s <= 0.0 {
            break;
        }
        let (ri, rj) = (route_of[i - 1], route_of[j - 1]);
        if ri == rj || routes[ri].is_empty() || routes[rj].is_empty() {
            continue;
        }
        if loads[ri] + loads[rj] > cap {
            continue;
        }
        // Merge only when i and j sit at joinable route ends.
        let i_first = routes[ri][0] == i;
        let i_last = *routes[ri].last().unwrap() == i;
        let j_first = routes[rj][0] == j;
        let j_last = *routes[rj].last().unwrap() == j;
        if !(i_first || i_last) || !(j_first || j_last) {
            continue;
        }
        let mut left = std::mem::take(&mut routes[ri]);
        let mut right = std::mem::take(&mut routes[rj]);
        if i_first && !i_last {
            left.reverse(); // put i at the tail of the left part
        }
        if j_last && !j_first {
            right.reverse(); // put j at the head of the right part
        }
        for &c in &right {
            route_of[c - 1] = ri;
        }
        left.extend(right);
        routes[ri] = left;
        loads[ri] += loads[rj];
        loads[rj] = 0;
    }

    let mut routes: Vec<Vec<usize>> = routes.into_iter().filter(|r| !r.is_empty()).collect();
    local_search(instance, &mut routes);
    let solution = canonicalize(routes);
    instance.check_feasible(&solution)?;
    Ok(solution)
}

/// First-improvement 2-opt (within routes) and relocate (across routes),
/// iterated to a local optimum.  The improvement threshold avoids cycling on
/// floating-point noise.
fn local_search(instance: &CvrpInstance, routes: &mut Vec<Vec<usize>>) {
    const EPS: f64 = 1e-12;
    let cap = instance.capacity as u64;
    let mut improved = true;
    let mut sweeps = 0;
    while improved && sweeps < 10_000 {
        improved = false;
        sweeps += 1;

        // 2-opt: reverse route[a..=b] when it shortens the closed tour.
        for route in routes.iter_mut() {
            let k = route.len();
            'outer: for a in 0..k {
                for b in (a + 1)..k {
                    let prev = if a == 0 { 0 } else { route[a - 1] };
                    let next = if b == k - 1 { 0 } else { route[b + 1] };
                    let delta = instance.distance(prev, route[b])
                        + instance.distance(route[a], next)
                        - instance.distance(prev, route[a])
                        - instance.distance(route[b], next);
                    if delta < -EPS {
                        route[a..=b].reverse();
                        improved = true;
                        break 'outer;
                    }
                }
            }
        }

        // Relocate: move one customer into another route at its best slot.
        let loads: Vec<u64> = routes.iter().map(|r| instance.route_load(r)).collect();
        'relocate: for src in 0..routes.len() {
            for pos in 0..routes[src].len() {
                let c = routes[src][pos];
                let demand = instance.demand(c) as u64;
                let prev = if pos == 0 { 0 } else { routes[src][pos - 1] };
                let next = if pos == routes[src].len() - 1 {
                    0
                } else {
                    routes[src][pos + 1]
                };
                let removal_gain = instance.distance(prev, c) + instance.distance(c, next)
                    - instance.distance(prev, next);
                for dst in 0..routes.len() {
                    if dst == src || loads[dst] + demand > cap {
                        continue;
                    }
                    for slot in 0..=routes[dst].len() {
                        let before = if slot == 0 { 0 } else { routes[dst][slot - 1] };
                        let after = if slot == routes[dst].len() {
                            0
                        } else {
                            routes[dst][slot]
                        };
                        let insert_cost = instance.distance(before, c)
                            + instance.distance(c, after)
                            - instance.distance(before, after);
                        if insert_cost - removal_gain < -EPS {
                            routes[src].remove(pos);
                            routes[dst].insert(slot, c);
                            routes.retain(|r| !r.is_empty());
                            improved = true;
                            break 'relocate;
                        }
                    }
                }
            }
        }
    }
}

/// Greedy nearest-neighbour construction: extend the current route to the
/// closest unvisited customer that still fits, else return to the depot and
/// open a new route.  Ties pick the lowest customer index.
pub fn nearest_neighbor_solve(instance: &CvrpInstance) -> Result<CvrpSolution> {
    check_demands(instance)?;
    let n = instance.customer_count();
    let cap = instance.capacity as u64;
    let mut visited = vec![false; n + 1];
    let mut remaining = n;
    let mut routes = Vec::new();

    while remaining > 0 {
        let mut route = Vec::new();
        let mut load = 0u64;
        let mut at = 0usize;
        loop {
            let mut pick = None;
            let mut pick_dist = f64::INFINITY;
            for c in 1..=n {
                if visited[c] || load + instance.demand(c) as u64 > cap {
                    continue;
                }
                let d = instance.distance(at, c);
                if d < pick_dist {
                    pick_dist = d;
                    pick = Some(c);
                }
            }
            match pick {
                Some(c) => {
                    visited[c] = true;
                    load += instance.demand(c) as u64;
                    route.push(c);
                    at = c;
                    remaining -= 1;
                }
                None => break,
            }
        }
        routes.push(route);
    }
    let solution = CvrpSolution { routes };
    instance.check_feasible(&solution)?;
    Ok(solution)
}

fn check_demands(instance: &CvrpInstance) -> Result<()> {
    for (i, &d) in instance.demands.iter().enumerate() {
        if d as u64 > instance.capacity as u64 {
            return Err(Error::InvalidInstance(format!(
                "customer {} demand {} exceeds capacity {}",
                i + 1,
                d,
                instance.capacity
            )));
        }
    }
    Ok(())
}
