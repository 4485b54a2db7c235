//! Problem environments: instance generation, step-wise feasibility,
//! objective evaluation, augmentation and instance files.
//!
//! All objectives are minimized. Knapsack profits are stored negated and
//! flipped back by [`ProblemKind::report_objectives`].

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProblemKind {
    BiTsp,
    TriTsp,
    BiCvrp,
    BiKp,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [Self::BiTsp, Self::TriTsp, Self::BiCvrp, Self::BiKp];

    pub fn kappa(self) -> usize {
        match self {
            Self::TriTsp => 3,
            _ => 2,
        }
    }

    pub fn feature_width(self) -> usize {
        match self {
            Self::BiTsp => 4,
            Self::TriTsp => 6,
            Self::BiCvrp | Self::BiKp => 3,
        }
    }

    pub fn is_tsp(self) -> bool {
        matches!(self, Self::BiTsp | Self::TriTsp)
    }

    pub fn has_capacity(self) -> bool {
        matches!(self, Self::BiCvrp | Self::BiKp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BiTsp => "BiTSP",
            Self::TriTsp => "TriTSP",
            Self::BiCvrp => "BiCVRP",
            Self::BiKp => "BiKP",
        }
    }

    /// Converts internal (minimized) objectives to the reported scale.
    pub fn report_objectives(self, f: &[f64]) -> Vec<f64> {
        match self {
            Self::BiKp => f.iter().map(|v| -v).collect(),
            _ => f.to_vec(),
        }
    }

    /// Inverse of [`Self::report_objectives`].
    pub fn internal_objectives(self, f: &[f64]) -> Vec<f64> {
        self.report_objectives(f)
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.to_ascii_lowercase().as_str() {
            "bitsp" => Ok(Self::BiTsp),
            "tritsp" => Ok(Self::TriTsp),
            "bicvrp" => Ok(Self::BiCvrp),
            "bikp" => Ok(Self::BiKp),
            _ => Err(Error::InvalidArgument(format!("unknown problem kind `{s}`"))),
        }
    }
}

/// One problem instance. `features` holds one row per node: for BiCVRP the
/// depot is row 0 followed by the `n` customers, so there are `n + 1` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub kind: ProblemKind,
    pub n: usize,
    pub features: Vec<Vec<f64>>,
    pub capacity: f64,
    pub id: String,
}

impl Instance {
    pub fn new(kind: ProblemKind, features: Vec<Vec<f64>>, capacity: f64, id: impl Into<String>) -> Result<Self> {
        let rows = features.len();
        let n = match kind {
            ProblemKind::BiCvrp => rows.saturating_sub(1),
            _ => rows,
        };
        let inst = Self {
            kind,
            n,
            features,
            capacity,
            id: id.into(),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn kappa(&self) -> usize {
        self.kind.kappa()
    }

    /// Rows the policy chooses among (depot included for BiCVRP).
    pub fn num_nodes(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("{}: {msg}", self.id)));
        let min_n = if self.kind == ProblemKind::BiKp { 1 } else { 2 };
        if self.n < min_n {
            return bad(format!("{} needs n >= {min_n}, got {}", self.kind, self.n));
        }
        let w = self.kind.feature_width();
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != w {
                return bad(format!("row {i} has {} features, expected {w}", row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return bad(format!("row {i} is not finite"));
            }
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        match self.kind {
            ProblemKind::BiTsp | ProblemKind::TriTsp => {
                if self.features.iter().flatten().any(|&v| !in_unit(v)) {
                    return bad("coordinates outside [0,1]".into());
                }
            }
            ProblemKind::BiCvrp => {
                if !(self.capacity > 0.0) {
                    return bad("capacity must be positive".into());
                }
                if self.features[0][2] != 0.0 {
                    return bad("depot demand must be 0".into());
                }
                for (i, row) in self.features.iter().enumerate() {
                    if !in_unit(row[0]) || !in_unit(row[1]) {
                        return bad(format!("node {i} coordinates outside [0,1]"));
                    }
                    if i > 0 && !(row[2] > 0.0 && row[2] <= self.capacity) {
                        return bad(format!("customer {i} demand {} not in (0, capacity]", row[2]));
                    }
                }
            }
            ProblemKind::BiKp => {
                if !(self.capacity > 0.0) {
                    return bad("capacity must be positive".into());
                }
                for (i, row) in self.features.iter().enumerate() {
                    if !(row[0] > 0.0) || row[1] < 0.0 || row[2] < 0.0 {
                        return bad(format!("item {i} needs positive weight and nonnegative profits"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Coordinates of node `i` under objective `obj` (routing problems only).
    pub fn coord(&self, i: usize, obj: usize) -> (f64, f64) {
        let row = &self.features[i];
        match self.kind {
            ProblemKind::BiCvrp => (row[0], row[1]),
            _ => (row[2 * obj], row[2 * obj + 1]),
        }
    }

    pub fn dist(&self, a: usize, b: usize, obj: usize) -> f64 {
        let (xa, ya) = self.coord(a, obj);
        let (xb, yb) = self.coord(b, obj);
        (xa - xb).hypot(ya - yb)
    }

    pub fn demand(&self, i: usize) -> f64 {
        self.features[i][2]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.features[i][0]
    }

    /// The same instance with node rows reordered: row `i` of the result is
    /// row `perm[i]` of `self`. The BiCVRP depot must stay at row 0.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rows = self.num_nodes();
        let mut seen = vec![false; rows];
        if perm.len() != rows || perm.iter().any(|&p| p >= rows || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("not a permutation of the node rows".into()));
        }
        if self.kind == ProblemKind::BiCvrp && perm[0] != 0 {
            return Err(Error::InvalidArgument("depot must stay at row 0".into()));
        }
        let features = perm.iter().map(|&p| self.features[p].clone()).collect();
        Instance::new(self.kind, features, self.capacity, self.id.clone())
    }
}

/// Vehicle capacity scale used to turn integer demands into fractions.
pub fn cvrp_capacity(n: usize) -> u32 {
    match n {
        0..=20 => 30,
        21..=50 => 40,
        _ => 50,
    }
}

/// Knapsack capacity for generated instances.
pub fn kp_capacity(n: usize) -> f64 {
    (n as f64 / 4.0).clamp(1.0, 25.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOptions {
    /// Integer demands are drawn from `1..=demand_max`.
    pub demand_max: u32,
    /// Overrides [`cvrp_capacity`].
    pub cvrp_capacity: Option<u32>,
    /// Overrides [`kp_capacity`].
    pub kp_capacity: Option<f64>,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            demand_max: 9,
            cvrp_capacity: None,
            kp_capacity: None,
        }
    }
}

pub fn generate_instance(kind: ProblemKind, n: usize, seed: u64) -> Result<Instance> {
    generate_instance_with(kind, n, seed, &GenOptions::default())
}

/// Uniform random instance, deterministic in `(kind, n, seed, opts)`.
///
/// BiCVRP demands are `k / Q` with `k` uniform on `1..=demand_max`, so the
/// stored vehicle capacity is `1.0`.
pub fn generate_instance_with(kind: ProblemKind, n: usize, seed: u64, opts: &GenOptions) -> Result<Instance> {
    let min_n = if kind == ProblemKind::BiKp { 1 } else { 2 };
    if n < min_n {
        return Err(Error::InvalidArgument(format!("{kind} needs n >= {min_n}, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = format!("{kind}-{n}-{seed}");
    match kind {
        ProblemKind::BiTsp | ProblemKind::TriTsp => {
            let w = kind.feature_width();
            let features = (0..n).map(|_| (0..w).map(|_| rng.random::<f64>()).collect()).collect();
            Instance::new(kind, features, 0.0, id)
        }
        ProblemKind::BiCvrp => {
            let q = opts.cvrp_capacity.unwrap_or_else(|| cvrp_capacity(n));
            if opts.demand_max == 0 || opts.demand_max > q {
                return Err(Error::InvalidArgument(format!(
                    "demand range 1..={} incompatible with capacity {q}",
                    opts.demand_max
                )));
            }
            let mut features = Vec::with_capacity(n + 1);
            features.push(vec![rng.random::<f64>(), rng.random::<f64>(), 0.0]);
            for _ in 0..n {
                let (x, y) = (rng.random::<f64>(), rng.random::<f64>());
                let k = rng.random_range(1..=opts.demand_max);
                features.push(vec![x, y, f64::from(k) / f64::from(q)]);
            }
            Instance::new(kind, features, 1.0, id)
        }
        ProblemKind::BiKp => {
            let features = (0..n)
                .map(|_| {
                    vec![
                        rng.sample(rand::distr::Open01),
                        rng.sample(rand::distr::Open01),
                        rng.sample(rand::distr::Open01),
                    ]
                })
                .collect();
            let cap = opts.kp_capacity.unwrap_or_else(|| kp_capacity(n));
            Instance::new(kind, features, cap, id)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub sequence: Vec<usize>,
    pub objectives: Vec<f64>,
    pub feasible: bool,
}

impl Solution {
    /// Validates and evaluates `sequence`.
    pub fn evaluate(inst: &Instance, sequence: Vec<usize>) -> Result<Self> {
        let objectives = objective_vector(inst, &sequence)?;
        Ok(Self {
            sequence,
            objectives,
            feasible: true,
        })
    }
}

fn infeasible(msg: impl Into<String>) -> Error {
    Error::Infeasible(msg.into())
}

fn tour_length(inst: &Instance, tour: &[usize], obj: usize) -> f64 {
    let n = tour.len();
    (0..n).map(|i| inst.dist(tour[i], tour[(i + 1) % n], obj)).sum()
}

fn route_length(inst: &Instance, route: &[usize]) -> f64 {
    if route.is_empty() {
        return 0.0;
    }
    let mut len = inst.dist(0, route[0], 0) + inst.dist(route[route.len() - 1], 0, 0);
    for w in route.windows(2) {
        len += inst.dist(w[0], w[1], 0);
    }
    len
}

/// Splits a flat BiCVRP sequence on the depot index.
pub fn cvrp_routes(sequence: &[usize]) -> Vec<&[usize]> {
    sequence.split(|&v| v == 0).filter(|r| !r.is_empty()).collect()
}

/// Objective vector of a feasible sequence, or an error naming the violated
/// constraint.
pub fn objective_vector(inst: &Instance, sequence: &[usize]) -> Result<Vec<f64>> {
    let rows = inst.num_nodes();
    if let Some(&bad) = sequence.iter().find(|&&v| v >= rows) {
        return Err(infeasible(format!("index {bad} out of range for {rows} nodes")));
    }
    match inst.kind {
        ProblemKind::BiTsp | ProblemKind::TriTsp => {
            let mut seen = vec![false; inst.n];
            for &v in sequence {
                if std::mem::replace(&mut seen[v], true) {
                    return Err(infeasible(format!("node {v} visited twice")));
                }
            }
            if sequence.len() != inst.n {
                return Err(infeasible(format!("tour visits {} of {} nodes", sequence.len(), inst.n)));
            }
            Ok((0..inst.kappa()).map(|o| tour_length(inst, sequence, o)).collect())
        }
        ProblemKind::BiCvrp => {
            let mut seen = vec![false; rows];
            for &v in sequence.iter().filter(|&&v| v != 0) {
                if std::mem::replace(&mut seen[v], true) {
                    return Err(infeasible(format!("customer {v} visited twice")));
                }
            }
            if let Some(missing) = (1..rows).find(|&j| !seen[j]) {
                return Err(infeasible(format!("customer {missing} not visited")));
            }
            let mut total = 0.0;
            let mut longest: f64 = 0.0;
            for route in cvrp_routes(sequence) {
                let load: f64 = route.iter().map(|&j| inst.demand(j)).sum();
                if load > inst.capacity * (1.0 + 1e-12) {
                    return Err(infeasible(format!("route load {load} exceeds capacity {}", inst.capacity)));
                }
                let len = route_length(inst, route);
                total += len;
                longest = longest.max(len);
            }
            Ok(vec![total, longest])
        }
        ProblemKind::BiKp => {
            let mut seen = vec![false; rows];
            let (mut w, mut p1, mut p2) = (0.0, 0.0, 0.0);
            for &v in sequence {
                if std::mem::replace(&mut seen[v], true) {
                    return Err(infeasible(format!("item {v} selected twice")));
                }
                let row = &inst.features[v];
                w += row[0];
                p1 += row[1];
                p2 += row[2];
            }
            if w > inst.capacity * (1.0 + 1e-12) {
                return Err(infeasible(format!("total weight {w} exceeds capacity {}", inst.capacity)));
            }
            Ok(vec![-p1, -p2])
        }
    }
}

/// Mutable decoding state. For BiCVRP the vehicle starts at the depot
/// (`current == Some(0)`); `visited[0]` is never set.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutState {
    pub visited: Vec<bool>,
    pub current: Option<usize>,
    pub first: Option<usize>,
    pub remaining: f64,
    pub t: usize,
    pub sequence: Vec<usize>,
    pub log_probs: Vec<f64>,
    served: usize,
}

impl RolloutState {
    pub fn new(inst: &Instance) -> Self {
        Self {
            visited: vec![false; inst.num_nodes()],
            current: (inst.kind == ProblemKind::BiCvrp).then_some(0),
            first: None,
            remaining: inst.capacity,
            t: 0,
            sequence: Vec::new(),
            log_probs: Vec::new(),
            served: 0,
        }
    }

    /// Remaining capacity as a fraction of the full capacity.
    pub fn remaining_fraction(&self, inst: &Instance) -> f64 {
        if inst.capacity > 0.0 {
            self.remaining / inst.capacity
        } else {
            0.0
        }
    }

    fn raw_mask(&self, inst: &Instance) -> Vec<bool> {
        match inst.kind {
            ProblemKind::BiTsp | ProblemKind::TriTsp => self.visited.iter().map(|v| !v).collect(),
            ProblemKind::BiCvrp => {
                let mut m: Vec<bool> = (0..inst.num_nodes())
                    .map(|j| j > 0 && !self.visited[j] && inst.demand(j) <= self.remaining)
                    .collect();
                m[0] = self.current != Some(0) && self.served < inst.n;
                m
            }
            ProblemKind::BiKp => (0..inst.n)
                .map(|j| !self.visited[j] && inst.weight(j) <= self.remaining)
                .collect(),
        }
    }

    pub fn is_done(&self, inst: &Instance) -> bool {
        match inst.kind {
            ProblemKind::BiTsp | ProblemKind::TriTsp => self.t == inst.n,
            ProblemKind::BiCvrp => self.served == inst.n,
            ProblemKind::BiKp => !self.raw_mask(inst).iter().any(|&b| b),
        }
    }

    /// In-place form of [`step`].
    pub fn apply(&mut self, inst: &Instance, action: usize) -> Result<()> {
        let mask = feasible_mask(inst, self)?;
        if action >= mask.len() || !mask[action] {
            return Err(Error::InfeasibleAction {
                action,
                reason: if action >= mask.len() {
                    "out of range".into()
                } else {
                    "masked".into()
                },
            });
        }
        match inst.kind {
            ProblemKind::BiCvrp if action == 0 => self.remaining = inst.capacity,
            ProblemKind::BiCvrp => {
                self.remaining -= inst.demand(action);
                self.served += 1;
                self.visited[action] = true;
            }
            ProblemKind::BiKp => {
                self.remaining -= inst.weight(action);
                self.visited[action] = true;
            }
            _ => self.visited[action] = true,
        }
        if self.first.is_none() {
            self.first = Some(action);
        }
        self.current = Some(action);
        self.sequence.push(action);
        self.t += 1;
        Ok(())
    }

    pub fn into_solution(self, inst: &Instance) -> Result<Solution> {
        if !self.is_done(inst) {
            return Err(infeasible("rollout not finished"));
        }
        Solution::evaluate(inst, self.sequence)
    }
}

/// Feasible actions (true = selectable). A finished rollout yields an
/// all-false mask; an unfinished one with no feasible action is an error.
pub fn feasible_mask(inst: &Instance, state: &RolloutState) -> Result<Vec<bool>> {
    let m = state.raw_mask(inst);
    if !m.iter().any(|&b| b) && !state.is_done(inst) {
        return Err(Error::NoFeasibleNode);
    }
    Ok(m)
}

pub fn step(inst: &Instance, state: &RolloutState, action: usize) -> Result<RolloutState> {
    let mut next = state.clone();
    next.apply(inst, action)?;
    Ok(next)
}

/// The eight symmetries of the unit square, identity first.
pub const SQUARE_MAPS: [fn(f64, f64) -> (f64, f64); 8] = [
    |x, y| (x, y),
    |x, y| (y, x),
    |x, y| (x, 1.0 - y),
    |x, y| (y, 1.0 - x),
    |x, y| (1.0 - x, y),
    |x, y| (1.0 - y, x),
    |x, y| (1.0 - x, 1.0 - y),
    |x, y| (1.0 - y, 1.0 - x),
];

/// All `8^s` combinations of square symmetries, one per coordinate set
/// (`s` = κ for MOTSP, 1 for BiCVRP). The original instance comes first.
pub fn augment(inst: &Instance) -> Result<Vec<Instance>> {
    let sets = match inst.kind {
        ProblemKind::BiKp => return Err(Error::AugmentationUndefined(inst.kind.to_string())),
        ProblemKind::BiCvrp => 1,
        _ => inst.kappa(),
    };
    let total = 8usize.pow(sets as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut features = inst.features.clone();
        let mut c = code;
        for s in (0..sets).rev() {
            let map = SQUARE_MAPS[c % 8];
            c /= 8;
            for row in &mut features {
                let (x, y) = map(row[2 * s], row[2 * s + 1]);
                row[2 * s] = x;
                row[2 * s + 1] = y;
            }
        }
        out.push(Instance {
            kind: inst.kind,
            n: inst.n,
            features,
            capacity: inst.capacity,
            id: format!("{}#aug{code}", inst.id),
        });
    }
    Ok(out)
}

pub fn write_instances<W: Write>(mut w: W, instances: &[Instance]) -> Result<()> {
    for inst in instances {
        writeln!(w, "MOCOP {} {} {}", inst.kind, inst.n, inst.kappa())?;
        for row in &inst.features {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(" "))?;
        }
        if inst.kind.has_capacity() {
            writeln!(w, "CAPACITY {}", inst.capacity)?;
        }
    }
    Ok(())
}

pub fn save_instances(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let mut buf = Vec::new();
    write_instances(&mut buf, instances)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_instances<R: BufRead>(r: R) -> Result<Vec<Instance>> {
    let lines: Vec<(usize, String)> = r
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l.trim().to_string())))
        .collect::<std::io::Result<_>>()?;
    let mut it = lines.into_iter().filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
    let mut out = Vec::new();
    while let Some((ln, header)) = it.next() {
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "MOCOP" {
            return Err(parse_err(ln, format!("expected `MOCOP <kind> <n> <kappa>`, got `{header}`")));
        }
        let kind: ProblemKind = parts[1].parse().map_err(|e: Error| parse_err(ln, e.to_string()))?;
        let n: usize = parts[2].parse().map_err(|_| parse_err(ln, format!("bad n `{}`", parts[2])))?;
        let kappa: usize = parts[3]
            .parse()
            .map_err(|_| parse_err(ln, format!("bad kappa `{}`", parts[3])))?;
        if kappa != kind.kappa() {
            return Err(parse_err(ln, format!("{kind} has kappa {}, header says {kappa}", kind.kappa())));
        }
        let rows = if kind == ProblemKind::BiCvrp { n + 1 } else { n };
        let mut features = Vec::with_capacity(rows);
        for _ in 0..rows {
            let (ln, line) = it.next().ok_or_else(|| parse_err(ln, "unexpected end of file".into()))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| parse_err(ln, format!("bad number `{t}`"))))
                .collect::<Result<_>>()?;
            if row.len() != kind.feature_width() {
                return Err(parse_err(ln, format!("expected {} values, got {}", kind.feature_width(), row.len())));
            }
            features.push(row);
        }
        let mut capacity = 0.0;
        if kind.has_capacity() {
            let (ln, line) = it.next().ok_or_else(|| parse_err(ln, "missing CAPACITY line".into()))?;
            capacity = line
                .strip_prefix("CAPACITY")
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| parse_err(ln, format!("expected `CAPACITY <value>`, got `{line}`")))?;
        }
        let id = format!("{kind}-{n}-#{}", out.len());
        out.push(Instance::new(kind, features, capacity, id).map_err(|e| parse_err(ln, e.to_string()))?);
    }
    Ok(out)
}

pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let f = std::fs::File::open(path)?;
    read_instances(std::io::BufReader::new(f))
}

/// Coordinates from a TSPLIB `NODE_COORD_SECTION`.
pub fn parse_tsplib(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut coords = Vec::new();
    let mut in_section = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with("NODE_COORD_SECTION") {
            in_section = true;
            continue;
        }
        if !in_section {
            continue;
        }
        if line == "EOF" || line.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad coordinate `{s}`"),
            })
        };
        if parts.len() < 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `<id> <x> <y>`, got `{line}`"),
            });
        }
        coords.push((num(parts[1])?, num(parts[2])?));
    }
    if !in_section {
        return Err(Error::Parse {
            line: 0,
            msg: "no NODE_COORD_SECTION".into(),
        });
    }
    Ok(coords)
}

/// Pairs two (or three) single-objective coordinate files into one MOTSP
/// instance. Node counts must agree. All coordinates share one affine
/// rescaling, `(v - lo) / (hi - lo)` with `lo = min(0, min v)` and
/// `hi = max v`, so each objective stays a scaled Euclidean length.
pub fn tsplib_instance(files: &[Vec<(f64, f64)>], id: impl Into<String>) -> Result<Instance> {
    let kind = match files.len() {
        2 => ProblemKind::BiTsp,
        3 => ProblemKind::TriTsp,
        k => return Err(Error::InvalidArgument(format!("need 2 or 3 coordinate files, got {k}"))),
    };
    let n = files[0].len();
    if let Some(f) = files.iter().find(|f| f.len() != n) {
        return Err(Error::InvalidArgument(format!(
            "coordinate files differ in node count ({n} vs {})",
            f.len()
        )));
    }
    let all = files.iter().flatten().flat_map(|&(x, y)| [x, y]);
    let lo = all.clone().fold(0.0f64, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let features = (0..n)
        .map(|i| {
            files
                .iter()
                .flat_map(|f| [(f[i].0 - lo) / span, (f[i].1 - lo) / span])
                .collect()
        })
        .collect();
    Instance::new(kind, features, 0.0, id)
}

pub fn load_tsplib_instance(paths: &[impl AsRef<Path>]) -> Result<Instance> {
    let files = paths
        .iter()
        .map(|p| parse_tsplib(&std::fs::read_to_string(p)?))
        .collect::<Result<Vec<_>>>()?;
    let id = paths
        .iter()
        .map(|p| {
            p.as_ref()
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join("+");
    tsplib_instance(&files, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_tsp() -> Instance {
        let c = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let features = c.iter().map(|&(x, y)| vec![x, y, x, y]).collect();
        Instance::new(ProblemKind::BiTsp, features, 0.0, "square").unwrap()
    }

    #[test]
    fn feature_widths() {
        let a = generate_instance(ProblemKind::BiTsp, 20, 1).unwrap();
        assert_eq!((a.features.len(), a.features[0].len()), (20, 4));
        let b = generate_instance(ProblemKind::TriTsp, 5, 1).unwrap();
        assert_eq!((b.features.len(), b.features[0].len()), (5, 6));
        let c = generate_instance(ProblemKind::BiCvrp, 7, 1).unwrap();
        assert_eq!((c.n, c.features.len(), c.features[0].len()), (7, 8, 3));
        let d = generate_instance(ProblemKind::BiKp, 1, 1).unwrap();
        assert_eq!(d.features.len(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in ProblemKind::ALL {
            let a = generate_instance(kind, 12, 99).unwrap();
            let b = generate_instance(kind, 12, 99).unwrap();
            assert_eq!(a, b);
            let c = generate_instance(kind, 12, 100).unwrap();
            assert_ne!(a.features, c.features);
        }
    }

    #[test]
    fn generation_rejects_small_n() {
        assert!(generate_instance(ProblemKind::BiTsp, 1, 0).is_err());
        assert!(generate_instance(ProblemKind::BiCvrp, 0, 0).is_err());
        assert!(generate_instance(ProblemKind::BiKp, 0, 0).is_err());
    }

    #[test]
    fn cvrp_demands_follow_integer_grid() {
        let inst = generate_instance(ProblemKind::BiCvrp, 50, 3).unwrap();
        assert_eq!(inst.features[0][2], 0.0);
        for row in &inst.features[1..] {
            let k = row[2] * 40.0;
            assert!((k - k.round()).abs() < 1e-9 && (1.0..=9.0).contains(&k.round()));
        }
    }

    #[test]
    fn square_perimeter() {
        let f = objective_vector(&square_tsp(), &[0, 1, 2, 3]).unwrap();
        assert_eq!(f, vec![4.0, 4.0]);
    }

    #[test]
    fn empty_knapsack_is_zero() {
        let inst = generate_instance(ProblemKind::BiKp, 5, 2).unwrap();
        let f = objective_vector(&inst, &[]).unwrap();
        assert_eq!(ProblemKind::BiKp.report_objectives(&f), vec![0.0, 0.0]);
    }

    #[test]
    fn infeasible_sequences_name_the_constraint() {
        let sq = square_tsp();
        let e = objective_vector(&sq, &[0, 1, 1, 3]).unwrap_err().to_string();
        assert!(e.contains("twice"), "{e}");
        let e = objective_vector(&sq, &[0, 1, 2]).unwrap_err().to_string();
        assert!(e.contains("visits 3 of 4"), "{e}");
        let kp = Instance::new(ProblemKind::BiKp, vec![vec![0.6, 1.0, 1.0], vec![0.6, 1.0, 1.0]], 1.0, "kp").unwrap();
        let e = objective_vector(&kp, &[0, 1]).unwrap_err().to_string();
        assert!(e.contains("capacity"), "{e}");
        let cv = Instance::new(
            ProblemKind::BiCvrp,
            vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 0.6], vec![1.0, 1.0, 0.6]],
            1.0,
            "cv",
        )
        .unwrap();
        let e = objective_vector(&cv, &[1, 2]).unwrap_err().to_string();
        assert!(e.contains("capacity"), "{e}");
        let e = objective_vector(&cv, &[1]).unwrap_err().to_string();
        assert!(e.contains("not visited"), "{e}");
        assert!(objective_vector(&cv, &[1, 0, 2]).is_ok());
    }

    #[test]
    fn kp_mask_uses_remaining_capacity() {
        let kp = Instance::new(ProblemKind::BiKp, vec![vec![0.4, 1.0, 1.0], vec![0.6, 1.0, 1.0]], 0.5, "kp").unwrap();
        let st = RolloutState::new(&kp);
        assert_eq!(feasible_mask(&kp, &st).unwrap(), vec![true, false]);
    }

    #[test]
    fn tsp_mask_and_completion() {
        let inst = generate_instance(ProblemKind::TriTsp, 6, 4).unwrap();
        let mut st = RolloutState::new(&inst);
        assert!(feasible_mask(&inst, &st).unwrap().iter().all(|&b| b));
        for a in [3, 0, 5, 1, 2, 4] {
            st.apply(&inst, a).unwrap();
        }
        assert!(st.visited.iter().all(|&v| v));
        assert!(st.is_done(&inst));
        assert_eq!(st.first, Some(3));
        assert!(st.apply(&inst, 0).is_err());
    }

    #[test]
    fn cvrp_depot_refills_and_is_masked_after_visit() {
        let inst = generate_instance(ProblemKind::BiCvrp, 5, 8).unwrap();
        let st = RolloutState::new(&inst);
        let m = feasible_mask(&inst, &st).unwrap();
        assert!(!m[0]);
        assert!(step(&inst, &st, 0).is_err());
        let st = step(&inst, &st, 2).unwrap();
        assert!(st.remaining < inst.capacity);
        assert!(feasible_mask(&inst, &st).unwrap()[0]);
        let st = step(&inst, &st, 0).unwrap();
        assert_eq!(st.remaining, inst.capacity);
        assert!(!feasible_mask(&inst, &st).unwrap()[0]);
    }

    #[test]
    fn step_rejects_masked_action() {
        let inst = square_tsp();
        let st = step(&inst, &RolloutState::new(&inst), 1).unwrap();
        assert!(matches!(step(&inst, &st, 1), Err(Error::InfeasibleAction { action: 1, .. })));
        assert!(step(&inst, &st, 9).is_err());
    }

    #[test]
    fn augmentation_counts_and_identity_first() {
        let tsp = generate_instance(ProblemKind::BiTsp, 5, 1).unwrap();
        let aug = augment(&tsp).unwrap();
        assert_eq!(aug.len(), 64);
        assert_eq!(aug[0].features, tsp.features);
        assert_eq!(augment(&generate_instance(ProblemKind::TriTsp, 4, 1).unwrap()).unwrap().len(), 512);
        assert_eq!(augment(&generate_instance(ProblemKind::BiCvrp, 4, 1).unwrap()).unwrap().len(), 8);
        assert!(matches!(
            augment(&generate_instance(ProblemKind::BiKp, 4, 1).unwrap()),
            Err(Error::AugmentationUndefined(_))
        ));
    }

    #[test]
    fn augmented_copies_are_distinct_and_in_unit_square() {
        let tsp = generate_instance(ProblemKind::BiTsp, 5, 2).unwrap();
        let aug = augment(&tsp).unwrap();
        for (i, a) in aug.iter().enumerate() {
            a.validate().unwrap();
            for b in &aug[i + 1..] {
                assert_ne!(a.features, b.features);
            }
        }
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let insts: Vec<Instance> = ProblemKind::ALL
            .iter()
            .map(|&k| generate_instance(k, 6, 5).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_instances(&mut buf, &insts).unwrap();
        let back = read_instances(buf.as_slice()).unwrap();
        assert_eq!(back.len(), insts.len());
        for (a, b) in insts.iter().zip(&back) {
            assert_eq!((a.kind, a.n, &a.features, a.capacity), (b.kind, b.n, &b.features, b.capacity));
        }
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let text = "MOCOP BiTSP 2 2\n0.1 0.2 0.3 0.4\n0.5 x 0.7 0.8\n";
        match read_instances(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(read_instances("MOCOP BiTSP 2 3\n".as_bytes()).is_err());
        assert!(read_instances("MOCOP BiKP 1 2\n0.1 0.2 0.3\n".as_bytes()).is_err());
    }

    #[test]
    fn tsplib_pairing() {
        let a = "NAME: a\nTYPE: TSP\nNODE_COORD_SECTION\n1 0 0\n2 100 0\n3 0 50\nEOF\n";
        let b = "NODE_COORD_SECTION\n1 10 10\n2 200 200\n3 5 5\nEOF\n";
        let inst = tsplib_instance(&[parse_tsplib(a).unwrap(), parse_tsplib(b).unwrap()], "ab").unwrap();
        assert_eq!(inst.kind, ProblemKind::BiTsp);
        assert_eq!(inst.features[1], vec![0.5, 0.0, 1.0, 1.0]);
        let c = "NODE_COORD_SECTION\n1 1 1\n2 2 2\nEOF\n";
        assert!(tsplib_instance(&[parse_tsplib(a).unwrap(), parse_tsplib(c).unwrap()], "ac").is_err());
        assert!(parse_tsplib("NAME: x\n").is_err());
    }

    #[test]
    fn permuted_reorders_rows() {
        let inst = generate_instance(ProblemKind::BiTsp, 4, 3).unwrap();
        let p = inst.permuted(&[2, 0, 3, 1]).unwrap();
        assert_eq!(p.features[0], inst.features[2]);
        assert!(inst.permuted(&[0, 0, 1, 2]).is_err());
        let cv = generate_instance(ProblemKind::BiCvrp, 3, 3).unwrap();
        assert!(cv.permuted(&[1, 0, 2, 3]).is_err());
    }
}
