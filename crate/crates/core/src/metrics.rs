//! Decomposition and front quality: weight lattices, scalarization,
//! Pareto dominance and normalized hypervolume.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::problems::ProblemKind;

/// Nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("weights must be nonnegative: {values:?}")));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {s}, not 1")));
        }
        Ok(Self(values))
    }

    /// Scales nonnegative values onto the simplex.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let s: f64 = values.iter().sum();
        if !(s > 0.0) || values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("cannot normalize {values:?}")));
        }
        let mut v: Vec<f64> = values.iter().map(|x| x / s).collect();
        let head: f64 = v[..v.len() - 1].iter().sum();
        let last = v.len() - 1;
        v[last] = (1.0 - head).max(0.0);
        Self::new(v)
    }

    pub fn kappa(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl fmt::Display for WeightVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Simplex lattice with entries `m / h`, lexicographically ordered by the
/// leading entries. The last entry is computed from the integer remainder,
/// so each vector sums to one up to one rounding of the final term.
pub fn das_dennis_weights(kappa: usize, h: usize) -> Result<Vec<WeightVector>> {
    if kappa < 1 || h < 1 {
        return Err(Error::InvalidArgument(format!("lattice needs kappa >= 1 and H >= 1, got ({kappa}, {h})")));
    }
    let mut out = Vec::new();
    let mut counts = vec![0usize; kappa];
    fn rec(pos: usize, left: usize, h: usize, counts: &mut Vec<usize>, out: &mut Vec<WeightVector>) {
        let k = counts.len();
        if pos == k - 1 {
            counts[pos] = left;
            let mut v: Vec<f64> = counts.iter().map(|&m| m as f64 / h as f64).collect();
            let head: f64 = v[..k - 1].iter().sum();
            v[k - 1] = if left == 0 { 0.0 } else { 1.0 - head };
            out.push(WeightVector(v));
            return;
        }
        for m in 0..=left {
            counts[pos] = m;
            rec(pos + 1, left - m, h, counts, out);
        }
    }
    rec(0, h, h, &mut counts, &mut out);
    Ok(out)
}

/// Number of lattice points, `C(h + κ - 1, κ - 1)`.
pub fn lattice_size(kappa: usize, h: usize) -> usize {
    let (n, k) = (h + kappa - 1, kappa - 1);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension { expected: a, got: b });
    }
    Ok(())
}

pub fn scalarize_ws(f: &[f64], w: &WeightVector) -> Result<f64> {
    check_dims(w.kappa(), f.len())?;
    Ok(f.iter().zip(w.as_slice()).map(|(a, b)| a * b).sum())
}

/// Weighted Tchebycheff, `max_j λ_j |F_j − z_j|`.
pub fn scalarize_tch(f: &[f64], w: &WeightVector, z: &[f64]) -> Result<f64> {
    check_dims(w.kappa(), f.len())?;
    check_dims(f.len(), z.len())?;
    Ok(f.iter()
        .zip(z)
        .zip(w.as_slice())
        .map(|((fj, zj), l)| l * (fj - zj).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decomposition {
    WeightedSum,
    /// Tchebycheff with the given ideal point.
    Tchebycheff(Vec<f64>),
}

impl Decomposition {
    pub fn scalarize(&self, f: &[f64], w: &WeightVector) -> Result<f64> {
        match self {
            Self::WeightedSum => scalarize_ws(f, w),
            Self::Tchebycheff(z) => scalarize_tch(f, w, z),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::WeightedSum => "ws",
            Self::Tchebycheff(_) => "tch",
        }
    }
}

/// `a` dominates `b` under minimization.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    check_dims(a.len(), b.len())?;
    Ok(dominates_unchecked(a, b))
}

pub(crate) fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a != b
}

/// Mutually non-dominated objective vectors, each optionally tagged with
/// the index of the solution that produced it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParetoArchive {
    points: Vec<Vec<f64>>,
    tags: Vec<Option<usize>>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts unless dominated by or equal to a member. Members the new
    /// point dominates are evicted. Returns whether the point was kept.
    pub fn insert(&mut self, point: Vec<f64>, tag: Option<usize>) -> Result<bool> {
        if let Some(first) = self.points.first() {
            check_dims(first.len(), point.len())?;
        }
        if self.points.iter().any(|p| p == &point || dominates_unchecked(p, &point)) {
            return Ok(false);
        }
        let keep: Vec<bool> = self.points.iter().map(|p| !dominates_unchecked(&point, p)).collect();
        let mut k = keep.iter();
        self.tags.retain(|_| *k.next().expect("same length"));
        let mut k = keep.iter();
        self.points.retain(|_| *k.next().expect("same length"));
        self.points.push(point);
        self.tags.push(tag);
        Ok(true)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn tags(&self) -> &[Option<usize>] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Members sorted lexicographically, for stable output.
    pub fn sorted_points(&self) -> Vec<Vec<f64>> {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        pts
    }
}

/// Non-dominated subset of `points`; exact duplicates collapse to the first
/// occurrence, whose index becomes the tag.
pub fn pareto_filter(points: &[Vec<f64>]) -> Result<ParetoArchive> {
    let mut archive = ParetoArchive::new();
    for (i, p) in points.iter().enumerate() {
        archive.insert(p.clone(), Some(i))?;
    }
    Ok(archive)
}

/// Reference point `r*` and ideal point `z` bounding the normalized box.
#[derive(Clone, Debug, PartialEq)]
pub struct HvContext {
    pub reference: Vec<f64>,
    pub ideal: Vec<f64>,
}

impl HvContext {
    pub fn new(reference: Vec<f64>, ideal: Vec<f64>) -> Result<Self> {
        check_dims(reference.len(), ideal.len())?;
        if reference.iter().zip(&ideal).any(|(r, z)| !(r > z)) {
            return Err(Error::InvalidArgument(format!(
                "reference {reference:?} must exceed ideal {ideal:?} in every coordinate"
            )));
        }
        Ok(Self { reference, ideal })
    }

    /// Built-in points for the standard benchmark sizes. Knapsack values
    /// are given on the maximization scale and negated here.
    pub fn for_problem(kind: ProblemKind, n: usize) -> Result<Self> {
        let missing = || Error::MissingReference {
            problem: kind.to_string(),
            n,
        };
        let (r, z): (Vec<f64>, Vec<f64>) = match kind {
            ProblemKind::BiTsp => {
                let r = match n {
                    20 => 20.0,
                    50 => 35.0,
                    100 => 65.0,
                    150 => 85.0,
                    200 => 115.0,
                    500 => 250.0,
                    1000 => 450.0,
                    _ => return Err(missing()),
                };
                (vec![r, r], vec![0.0, 0.0])
            }
            ProblemKind::TriTsp => {
                let r = match n {
                    20 => 20.0,
                    50 => 35.0,
                    100 => 65.0,
                    _ => return Err(missing()),
                };
                (vec![r; 3], vec![0.0; 3])
            }
            ProblemKind::BiCvrp => {
                let r = match n {
                    20 => 30.0,
                    50 => 45.0,
                    100 => 80.0,
                    _ => return Err(missing()),
                };
                (vec![r, 4.0], vec![0.0, 0.0])
            }
            ProblemKind::BiKp => {
                let (r, z) = match n {
                    50 => (5.0, 30.0),
                    100 => (20.0, 50.0),
                    200 => (30.0, 75.0),
                    500 => (90.0, 150.0),
                    1000 => (130.0, 260.0),
                    _ => return Err(missing()),
                };
                (vec![-r, -r], vec![-z, -z])
            }
        };
        Self::new(r, z)
    }

    pub fn kappa(&self) -> usize {
        self.reference.len()
    }

    /// Maps a point into the unit box, clipping to `[z, r*]`.
    pub fn normalize(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.ideal.iter().zip(&self.reference))
            .map(|(&v, (&z, &r))| (v.clamp(z, r) - z) / (r - z))
            .collect()
    }
}

/// Area dominated by unit-box points w.r.t. reference (1, 1).
fn hv2(points: &mut [(f64, f64)]) -> f64 {
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    let mut best_y = 1.0;
    for &(x, y) in points.iter() {
        if y < best_y {
            area += (1.0 - x) * (best_y - y);
            best_y = y;
        }
    }
    area
}

/// Normalized hypervolume in `[0, 1]` for κ = 2 or 3.
pub fn hypervolume(points: &[Vec<f64>], ctx: &HvContext) -> Result<f64> {
    let k = ctx.kappa();
    if let Some(p) = points.iter().find(|p| p.len() != k) {
        return Err(Error::Dimension {
            expected: k,
            got: p.len(),
        });
    }
    let pts: Vec<Vec<f64>> = points.iter().map(|p| ctx.normalize(p)).collect();
    let hv = match k {
        2 => hv2(&mut pts.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>()),
        3 => {
            let mut sorted = pts;
            sorted.sort_by(|a, b| a[2].total_cmp(&b[2]));
            let mut vol = 0.0;
            let mut slice: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
            for i in 0..sorted.len() {
                slice.push((sorted[i][0], sorted[i][1]));
                let top = sorted.get(i + 1).map_or(1.0, |p| p[2]);
                let depth = top - sorted[i][2];
                if depth > 0.0 {
                    vol += hv2(&mut slice) * depth;
                }
            }
            vol
        }
        _ => {
            return Err(Error::InvalidArgument(format!("hypervolume supports 2 or 3 objectives, got {k}")));
        }
    };
    Ok(hv.clamp(0.0, 1.0))
}

/// `(hv_ref − hv) / hv_ref × 100`.
pub fn hv_gap(hv: f64, hv_ref: f64) -> Result<f64> {
    if !(hv_ref > 0.0) {
        return Err(Error::InvalidArgument(format!("reference HV must be positive, got {hv_ref}")));
    }
    Ok((hv_ref - hv) / hv_ref * 100.0)
}

impl FromStr for Decomposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ws" => Ok(Self::WeightedSum),
            "tch" => Ok(Self::Tchebycheff(Vec::new())),
            _ => Err(Error::InvalidArgument(format!("unknown decomposition `{s}` (ws|tch)"))),
        }
    }
}

/// Writes points as CSV with an `f1,f2[,f3]` header, one point per line.
pub fn write_points<W: Write>(mut w: W, points: &[Vec<f64>]) -> Result<()> {
    let k = points.first().map_or(2, Vec::len);
    let header: Vec<String> = (1..=k).map(|i| format!("f{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for p in points {
        check_dims(k, p.len())?;
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads the format of [`write_points`]. Blank lines and `#` comments are
/// skipped; a header line is optional.
pub fn read_points<R: BufRead>(r: R) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with('f') {
            continue;
        }
        let p = t
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("`{v}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = out.first() {
            check_dims(first.len(), p.len())?;
        }
        out.push(p);
    }
    Ok(out)
}
