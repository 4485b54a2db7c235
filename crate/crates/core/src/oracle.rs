//! Exact Pareto sets for tiny instances by exhaustive enumeration, and a
//! Monte-Carlo hypervolume estimate.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{HvContext, ParetoArchive};
use crate::problems::{objective_vector, Instance, ProblemKind};

pub const MAX_TSP_NODES: usize = 10;
pub const MAX_CVRP_CUSTOMERS: usize = 7;
pub const MAX_KP_ENUM_ITEMS: usize = 20;
/// Scale applied to knapsack weights to index the DP table.
pub const KP_WEIGHT_SCALE: f64 = 1e3;
const MAX_KP_BUCKETS: usize = 10_000_000;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub archive: ParetoArchive,
    /// Archive tags index into this list.
    pub solutions: Vec<Vec<usize>>,
    /// Candidate solutions evaluated.
    pub count: u64,
    pub elapsed: Duration,
}

impl OracleResult {
    /// Sequence of every archive member, in archive order.
    pub fn pareto_solutions(&self) -> Vec<&[usize]> {
        self.archive
            .tags()
            .iter()
            .map(|t| self.solutions[t.expect("oracle tags every point")].as_slice())
            .collect()
    }
}

#[derive(Default)]
struct Collector {
    archive: ParetoArchive,
    solutions: Vec<Vec<usize>>,
}

impl Collector {
    fn offer(&mut self, point: Vec<f64>, seq: impl FnOnce() -> Vec<usize>) -> Result<()> {
        let tag = self.solutions.len();
        if self.archive.insert(point, Some(tag))? {
            self.solutions.push(seq());
        }
        Ok(())
    }

    fn finish(self, count: u64, started: Instant) -> OracleResult {
        // Drop sequences whose points were later evicted and renumber tags.
        let mut archive = ParetoArchive::new();
        let mut solutions = Vec::with_capacity(self.archive.len());
        for (p, t) in self.archive.points().iter().zip(self.archive.tags()) {
            archive
                .insert(p.clone(), Some(solutions.len()))
                .expect("members share a dimension");
            solutions.push(self.solutions[t.expect("tagged")].clone());
        }
        OracleResult {
            archive,
            solutions,
            count,
            elapsed: started.elapsed(),
        }
    }
}

/// `(n−1)!/2` for `n ≥ 3`, otherwise 1.
pub fn tsp_tour_count(n: usize) -> u64 {
    if n < 3 {
        1
    } else {
        (1..n as u64).product::<u64>() / 2
    }
}

/// Bell number: set partitions of `n` labelled items.
pub fn bell_number(n: usize) -> u64 {
    let mut row = vec![1u64];
    for _ in 0..n {
        let mut next = vec![*row.last().expect("nonempty")];
        for &v in &row {
            next.push(next.last().expect("nonempty") + v);
        }
        row = next;
    }
    row[0]
}

/// Advances to the next lexicographic permutation; false after the last.
fn next_permutation(a: &mut [usize]) -> bool {
    if a.len() < 2 {
        return false;
    }
    let Some(i) = (0..a.len() - 1).rev().find(|&i| a[i] < a[i + 1]) else {
        return false;
    };
    let j = (i + 1..a.len()).rev().find(|&j| a[j] > a[i]).expect("successor exists");
    a.swap(i, j);
    a[i + 1..].reverse();
    true
}

/// All distinct tours (node 0 fixed first, one direction per cycle).
pub fn enumerate_pareto_tsp(inst: &Instance) -> Result<OracleResult> {
    if !inst.kind.is_tsp() {
        return Err(Error::InvalidArgument(format!("TSP oracle called on {}", inst.kind)));
    }
    if inst.n > MAX_TSP_NODES {
        return Err(Error::SizeLimit(format!(
            "TSP enumeration supports n <= {MAX_TSP_NODES}, got {}",
            inst.n
        )));
    }
    let started = Instant::now();
    let mut col = Collector::default();
    let mut rest: Vec<usize> = (1..inst.n).collect();
    let mut count = 0u64;
    let mut tour = vec![0usize; inst.n];
    loop {
        if rest.len() < 2 || rest[0] < rest[rest.len() - 1] {
            tour[1..].copy_from_slice(&rest);
            count += 1;
            col.offer(objective_vector(inst, &tour)?, || tour.clone())?;
        }
        if !next_permutation(&mut rest) {
            break;
        }
    }
    Ok(col.finish(count, started))
}

/// Shortest order of each customer subset (bitmask over customers 1..=n),
/// or `None` when its demand exceeds capacity.
fn best_routes(inst: &Instance) -> Vec<Option<(f64, Vec<usize>)>> {
    let n = inst.n;
    let mut table = vec![None; 1 << n];
    table[0] = Some((0.0, Vec::new()));
    for mask in 1usize..(1 << n) {
        let mut nodes: Vec<usize> = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect();
        let load: f64 = nodes.iter().map(|&j| inst.demand(j)).sum();
        if load > inst.capacity * (1.0 + 1e-12) {
            continue;
        }
        let mut best: Option<(f64, Vec<usize>)> = None;
        loop {
            let mut len = inst.dist(0, nodes[0], 0) + inst.dist(nodes[nodes.len() - 1], 0, 0);
            for w in nodes.windows(2) {
                len += inst.dist(w[0], w[1], 0);
            }
            if best.as_ref().is_none_or(|(b, _)| len < *b) {
                best = Some((len, nodes.clone()));
            }
            if !next_permutation(&mut nodes) {
                break;
            }
        }
        table[mask] = best;
    }
    table
}

/// All set partitions of the customers into routes, each route in its
/// shortest order. Both objectives (total and longest route length) are
/// monotone in every route's length, so per-route optimization is exact.
pub fn enumerate_pareto_cvrp(inst: &Instance) -> Result<OracleResult> {
    if inst.kind != ProblemKind::BiCvrp {
        return Err(Error::InvalidArgument(format!("CVRP oracle called on {}", inst.kind)));
    }
    if inst.n > MAX_CVRP_CUSTOMERS {
        return Err(Error::SizeLimit(format!(
            "CVRP enumeration supports n <= {MAX_CVRP_CUSTOMERS}, got {}",
            inst.n
        )));
    }
    let started = Instant::now();
    let routes = best_routes(inst);
    let n = inst.n;
    let mut col = Collector::default();
    let mut count = 0u64;
    // Restricted growth strings: block[i] <= 1 + max(block[..i]).
    let mut block = vec![0usize; n];
    loop {
        count += 1;
        let blocks = block.iter().max().map_or(0, |m| m + 1);
        let mut masks = vec![0usize; blocks];
        for (i, &b) in block.iter().enumerate() {
            masks[b] |= 1 << i;
        }
        if masks.iter().all(|&m| routes[m].is_some()) {
            let (mut total, mut longest) = (0.0, 0.0f64);
            for &m in &masks {
                let len = routes[m].as_ref().expect("checked").0;
                total += len;
                longest = longest.max(len);
            }
            col.offer(vec![total, longest], || {
                let mut seq = Vec::new();
                for &m in &masks {
                    seq.extend(&routes[m].as_ref().expect("checked").1);
                    seq.push(0);
                }
                seq
            })?;
        }
        // Next restricted growth string.
        let mut i = n;
        loop {
            if i <= 1 {
                return Ok(col.finish(count, started));
            }
            i -= 1;
            let cap = block[..i].iter().max().map_or(0, |m| m + 1);
            if block[i] < cap {
                block[i] += 1;
                block[i + 1..].iter_mut().for_each(|b| *b = 0);
                break;
            }
        }
    }
}

/// Every subset of items (`2^n` of them).
pub fn enumerate_pareto_kp(inst: &Instance) -> Result<OracleResult> {
    check_kp(inst)?;
    if inst.n > MAX_KP_ENUM_ITEMS {
        return Err(Error::SizeLimit(format!(
            "knapsack enumeration supports n <= {MAX_KP_ENUM_ITEMS}, got {}",
            inst.n
        )));
    }
    let started = Instant::now();
    let mut col = Collector::default();
    let mut count = 0u64;
    for subset in 0u32..(1 << inst.n) {
        count += 1;
        let items = || (0..inst.n).filter(|&i| subset >> i & 1 == 1).collect::<Vec<_>>();
        let w: f64 = (0..inst.n).filter(|&i| subset >> i & 1 == 1).map(|i| inst.weight(i)).sum();
        if w > inst.capacity * (1.0 + 1e-12) {
            continue;
        }
        col.offer(objective_vector(inst, &items())?, items)?;
    }
    Ok(col.finish(count, started))
}

fn check_kp(inst: &Instance) -> Result<()> {
    if inst.kind != ProblemKind::BiKp {
        return Err(Error::InvalidArgument(format!("knapsack oracle called on {}", inst.kind)));
    }
    Ok(())
}

#[derive(Clone)]
struct KpState {
    weight: f64,
    profit: [f64; 2],
    items: Vec<usize>,
}

fn kp_dominates(a: &KpState, b: &KpState) -> bool {
    a.weight <= b.weight && a.profit[0] >= b.profit[0] && a.profit[1] >= b.profit[1]
}

/// Dynamic program over capacity. Weights are bucketed at
/// [`KP_WEIGHT_SCALE`]; each bucket keeps states non-dominated in
/// (exact weight, profit 1, profit 2), so rounding never changes the result.
pub fn kp_pareto_dp(inst: &Instance) -> Result<OracleResult> {
    check_kp(inst)?;
    let started = Instant::now();
    let buckets = (inst.capacity * KP_WEIGHT_SCALE).round() as usize + 1;
    if buckets > MAX_KP_BUCKETS {
        return Err(Error::SizeLimit(format!("knapsack DP needs {buckets} capacity buckets")));
    }
    if (0..inst.n).any(|i| {
        let s = inst.weight(i) * KP_WEIGHT_SCALE;
        (s - s.round()).abs() > 1e-9
    }) {
        log::debug!("knapsack weights are not multiples of 1/{KP_WEIGHT_SCALE}; buckets are approximate");
    }
    let bucket = |w: f64| ((w * KP_WEIGHT_SCALE).round() as usize).min(buckets - 1);
    let mut table: Vec<Vec<KpState>> = vec![Vec::new(); buckets];
    table[0].push(KpState {
        weight: 0.0,
        profit: [0.0, 0.0],
        items: Vec::new(),
    });
    let mut count = 1u64;
    for i in 0..inst.n {
        let row = &inst.features[i];
        let mut added: Vec<KpState> = Vec::new();
        for states in &table {
            for s in states {
                let w = s.weight + row[0];
                if w > inst.capacity * (1.0 + 1e-12) {
                    continue;
                }
                let mut items = s.items.clone();
                items.push(i);
                added.push(KpState {
                    weight: w,
                    profit: [s.profit[0] + row[1], s.profit[1] + row[2]],
                    items,
                });
            }
        }
        count += added.len() as u64;
        for s in added {
            let b = &mut table[bucket(s.weight)];
            if b.iter().any(|o| kp_dominates(o, &s)) {
                continue;
            }
            b.retain(|o| !kp_dominates(&s, o));
            b.push(s);
        }
    }
    let mut col = Collector::default();
    for s in table.into_iter().flatten() {
        col.offer(vec![-s.profit[0], -s.profit[1]], || s.items.clone())?;
    }
    Ok(col.finish(count, started))
}

/// Exact archive by the method suited to the problem.
pub fn exact_pareto(inst: &Instance) -> Result<OracleResult> {
    match inst.kind {
        ProblemKind::BiTsp | ProblemKind::TriTsp => enumerate_pareto_tsp(inst),
        ProblemKind::BiCvrp => enumerate_pareto_cvrp(inst),
        ProblemKind::BiKp if inst.n <= MAX_KP_ENUM_ITEMS => enumerate_pareto_kp(inst),
        ProblemKind::BiKp => kp_pareto_dp(inst),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Fraction of uniform samples in the normalized box dominated by some
/// normalized point, with its binomial standard error.
pub fn mc_hypervolume(points: &[Vec<f64>], ctx: &HvContext, samples: usize, seed: u64) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("at least one sample is required".into()));
    }
    let k = ctx.kappa();
    if let Some(p) = points.iter().find(|p| p.len() != k) {
        return Err(Error::Dimension {
            expected: k,
            got: p.len(),
        });
    }
    let pts: Vec<Vec<f64>> = points.iter().map(|p| ctx.normalize(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = vec![0.0; k];
    let mut hits = 0usize;
    for _ in 0..samples {
        u.iter_mut().for_each(|x| *x = rng.random::<f64>());
        if pts.iter().any(|p| p.iter().zip(&u).all(|(a, b)| a <= b)) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    Ok(McEstimate {
        value: p,
        std_error: (p * (1.0 - p) / samples as f64).sqrt(),
    })
}

/// Whether some archive member weakly dominates `point`.
pub fn weakly_covered(archive: &ParetoArchive, point: &[f64], tol: f64) -> bool {
    archive.points().iter().any(|a| a.iter().zip(point).all(|(x, y)| *x <= y + tol))
}
