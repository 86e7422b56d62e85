//! Candidate approximations of the feasible region: MMPS sublevel sets,
//! unions of ellipsoids and intersections of second-order cones.
//!
//! Each region has a boundary function that is negative inside, zero on the
//! boundary and positive outside. The `*Layout` types give the flat parameter
//! encodings used by the fitting code, together with gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridgen::Grid;
use crate::mmps::{AffineTerm, MmpsFunction, MmpsLayout};
use crate::vehicle::Bounds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegionError {
    #[error("grid has no {0} points")]
    DegenerateGrid(&'static str),
    #[error("grid carries no feasibility labels")]
    Unlabeled,
    #[error("cholesky factor needs a strictly positive diagonal")]
    NonPositiveDiagonal,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("a region needs at least one member")]
    Empty,
}

/// Index of `(i, j)`, `j <= i`, in a row-major packed lower triangle.
#[inline]
pub fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

pub fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Pairwise summation; the result does not depend on thread scheduling.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// `{z : (z - c)^T L L^T (z - c) <= 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vec<f64>,
    /// Lower triangle of `L`, packed by rows.
    pub chol: Vec<f64>,
}

impl Ellipsoid {
    pub fn new(center: Vec<f64>, chol: Vec<f64>) -> Result<Self, RegionError> {
        let d = center.len();
        if chol.len() != tri_len(d) {
            return Err(RegionError::DimensionMismatch(format!(
                "packed factor has {} entries, expected {}",
                chol.len(),
                tri_len(d)
            )));
        }
        if (0..d).any(|i| !(chol[tri_index(i, i)] > 0.0)) {
            return Err(RegionError::NonPositiveDiagonal);
        }
        Ok(Self { center, chol })
    }

    /// Ball of radius `radius` around `center`.
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self, RegionError> {
        let d = center.len();
        let mut chol = vec![0.0; tri_len(d)];
        for i in 0..d {
            chol[tri_index(i, i)] = 1.0 / radius;
        }
        Self::new(center, chol)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        ellipsoid_value(&self.center, &self.chol, z)
    }

    /// `Q = L L^T` as a dense row-major matrix.
    pub fn shape_matrix(&self) -> Vec<f64> {
        let d = self.dim();
        let l = |i: usize, j: usize| if j <= i { self.chol[tri_index(i, j)] } else { 0.0 };
        let mut q = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                q[i * d + j] = (0..d).map(|k| l(i, k) * l(j, k)).sum();
            }
        }
        q
    }
}

fn ellipsoid_value(center: &[f64], chol: &[f64], z: &[f64]) -> f64 {
    let d = center.len();
    let mut acc = 0.0;
    for j in 0..d {
        let mut w = 0.0;
        for i in j..d {
            w += chol[tri_index(i, j)] * (z[i] - center[i]);
        }
        acc += w * w;
    }
    acc - 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidUnion {
    pub members: Vec<Ellipsoid>,
}

impl EllipsoidUnion {
    pub fn new(members: Vec<Ellipsoid>) -> Result<Self, RegionError> {
        if members.is_empty() {
            return Err(RegionError::Empty);
        }
        Ok(Self { members })
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.members.iter().map(|e| e.value(z)).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmpsRegion {
    pub boundary: MmpsFunction,
}

/// `{z : |P (z - z0)| <= q^T z + r}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    /// Row-major `d x d`.
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    pub z0: Vec<f64>,
    pub q: Vec<f64>,
    pub r: f64,
}

impl Cone {
    pub fn value(&self, z: &[f64]) -> f64 {
        let d = z.len();
        let mut norm2 = 0.0;
        for a in 0..d {
            let row = &self.p[a * d..(a + 1) * d];
            let y: f64 = row.iter().zip(z.iter().zip(&self.z0)).map(|(p, (z, c))| p * (z - c)).sum();
            norm2 += y * y;
        }
        let lin: f64 = self.q.iter().zip(z).map(|(q, z)| q * z).sum();
        norm2.sqrt() - lin - self.r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSet {
    pub cones: Vec<Cone>,
}

impl ConeSet {
    pub fn new(cones: Vec<Cone>) -> Result<Self, RegionError> {
        if cones.is_empty() {
            return Err(RegionError::Empty);
        }
        Ok(Self { cones })
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.cones.iter().map(|c| c.value(z)).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Region {
    Mmps(MmpsRegion),
    Ellipsoids(EllipsoidUnion),
    Cones(ConeSet),
}

impl Region {
    pub fn boundary_value(&self, z: &[f64]) -> f64 {
        match self {
            Region::Mmps(r) => r.boundary.eval(z),
            Region::Ellipsoids(u) => u.value(z),
            Region::Cones(c) => c.value(z),
        }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        self.boundary_value(z) <= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Misclassification {
    pub inclusion: f64,
    pub violation: f64,
}

impl Misclassification {
    pub fn sum(&self) -> f64 {
        self.inclusion + self.violation
    }
}

/// Inclusion and violation fractions from a membership predicate.
pub fn misclassification_by<F: Fn(&[f64]) -> bool>(
    contains: F,
    grid: &Grid,
) -> Result<Misclassification, RegionError> {
    let mask = grid.feasible_mask().ok_or(RegionError::Unlabeled)?;
    let (mut n_feas, mut n_infeas, mut missed, mut covered) = (0usize, 0usize, 0usize, 0usize);
    for (z, &feasible) in grid.points().zip(mask) {
        let inside = contains(z);
        if feasible {
            n_feas += 1;
            missed += usize::from(!inside);
        } else {
            n_infeas += 1;
            covered += usize::from(inside);
        }
    }
    if n_feas == 0 {
        return Err(RegionError::DegenerateGrid("feasible"));
    }
    if n_infeas == 0 {
        return Err(RegionError::DegenerateGrid("infeasible"));
    }
    Ok(Misclassification {
        inclusion: missed as f64 / n_feas as f64,
        violation: covered as f64 / n_infeas as f64,
    })
}

pub fn misclassification(region: &Region, grid: &Grid) -> Result<Misclassification, RegionError> {
    misclassification_by(|z| region.contains(z), grid)
}

/// `gamma_c * inclusion + (1 - gamma_c) * violation`.
pub fn region_objective(m: &Misclassification, gamma_c: f64) -> f64 {
    gamma_c * m.inclusion + (1.0 - gamma_c) * m.violation
}

/// Mean of `|G - g| / (|G| + eps_0)` over points with a defined `G`.
pub fn boundary_objective<F: Fn(&[f64]) -> f64>(
    g: F,
    grid: &Grid,
    eps_0: f64,
) -> Result<f64, RegionError> {
    let gv = grid.g_values().ok_or(RegionError::Unlabeled)?;
    let terms: Vec<f64> = grid
        .points()
        .zip(gv)
        .filter(|(_, big_g)| big_g.is_finite())
        .map(|(z, big_g)| (big_g - g(z)).abs() / (big_g.abs() + eps_0))
        .collect();
    if terms.is_empty() {
        return Err(RegionError::DegenerateGrid("labeled"));
    }
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

/// Flat encoding of `n_e` ellipsoids: per member the center followed by the
/// packed lower-triangular factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EllipsoidLayout {
    pub dim: usize,
    pub n_e: usize,
}

impl EllipsoidLayout {
    pub fn stride(&self) -> usize {
        self.dim + tri_len(self.dim)
    }

    pub fn n_params(&self) -> usize {
        self.n_e * self.stride()
    }

    fn member<'a>(&self, theta: &'a [f64], e: usize) -> (&'a [f64], &'a [f64]) {
        let s = &theta[e * self.stride()..(e + 1) * self.stride()];
        s.split_at(self.dim)
    }

    /// `(min value, argmin member)`, lowest index on ties.
    pub fn eval_active(&self, theta: &[f64], z: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for e in 0..self.n_e {
            let (c, l) = self.member(theta, e);
            let v = ellipsoid_value(c, l, z);
            if v < best.0 || e == 0 {
                best = (v, e);
            }
        }
        best
    }

    /// Appends `scale * d value_e / d theta` of member `e` to `out`.
    pub fn push_gradient(&self, theta: &[f64], z: &[f64], e: usize, scale: f64, out: &mut Vec<(usize, f64)>) {
        let d = self.dim;
        let (c, l) = self.member(theta, e);
        let base = e * self.stride();
        let dz: Vec<f64> = z.iter().zip(c).map(|(a, b)| a - b).collect();
        let w: Vec<f64> = (0..d)
            .map(|j| (j..d).map(|i| l[tri_index(i, j)] * dz[i]).sum())
            .collect();
        for k in 0..d {
            let lw: f64 = (0..=k).map(|j| l[tri_index(k, j)] * w[j]).sum();
            out.push((base + k, -2.0 * scale * lw));
        }
        for i in 0..d {
            for j in 0..=i {
                out.push((base + d + tri_index(i, j), 2.0 * scale * w[j] * dz[i]));
            }
        }
    }

    /// Builds the union in physical coordinates from parameters fitted on
    /// `[0, 1]`-normalized points.
    pub fn to_region(&self, theta: &[f64], bounds: &Bounds) -> Result<EllipsoidUnion, RegionError> {
        let members = (0..self.n_e)
            .map(|e| {
                let (c, l) = self.member(theta, e);
                let center = bounds.denormalize(c);
                let mut chol = l.to_vec();
                for i in 0..self.dim {
                    for j in 0..=i {
                        chol[tri_index(i, j)] /= bounds.width(i);
                    }
                }
                Ellipsoid::new(center, chol)
            })
            .collect::<Result<Vec<_>, _>>()?;
        EllipsoidUnion::new(members)
    }

    /// Flips factor columns so every diagonal entry is nonnegative; the shape
    /// matrix is unchanged.
    pub fn canonicalize(&self, theta: &mut [f64]) {
        let d = self.dim;
        for e in 0..self.n_e {
            let off = e * self.stride() + d;
            for j in 0..d {
                if theta[off + tri_index(j, j)] < 0.0 {
                    for i in j..d {
                        theta[off + tri_index(i, j)] *= -1.0;
                    }
                }
            }
        }
    }
}

/// Flat encoding of `n_c` cones: per cone `P` (row-major), `z0`, `q`, `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConeLayout {
    pub dim: usize,
    pub n_c: usize,
}

impl ConeLayout {
    pub fn stride(&self) -> usize {
        self.dim * self.dim + 2 * self.dim + 1
    }

    pub fn n_params(&self) -> usize {
        self.n_c * self.stride()
    }

    fn cone_value(&self, theta: &[f64], j: usize, z: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let s = &theta[j * self.stride()..(j + 1) * self.stride()];
        let (p, rest) = s.split_at(d * d);
        let (z0, rest) = rest.split_at(d);
        let (q, r) = rest.split_at(d);
        let y: Vec<f64> = (0..d)
            .map(|a| (0..d).map(|b| p[a * d + b] * (z[b] - z0[b])).sum())
            .collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lin: f64 = q.iter().zip(z).map(|(q, z)| q * z).sum();
        (norm - lin - r[0], y)
    }

    /// `(max value, argmax cone)`, lowest index on ties.
    pub fn eval_active(&self, theta: &[f64], z: &[f64]) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 0..self.n_c {
            let v = self.cone_value(theta, j, z).0;
            if v > best.0 || j == 0 {
                best = (v, j);
            }
        }
        best
    }

    pub fn push_gradient(&self, theta: &[f64], z: &[f64], j: usize, scale: f64, out: &mut Vec<(usize, f64)>) {
        let d = self.dim;
        let base = j * self.stride();
        let s = &theta[base..base + self.stride()];
        let (p, rest) = s.split_at(d * d);
        let z0 = &rest[..d];
        let (_, y) = self.cone_value(theta, j, z);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for a in 0..d {
                for b in 0..d {
                    out.push((base + a * d + b, scale * y[a] * (z[b] - z0[b]) / norm));
                }
            }
            for b in 0..d {
                let pty: f64 = (0..d).map(|a| p[a * d + b] * y[a]).sum();
                out.push((base + d * d + b, -scale * pty / norm));
            }
        }
        for b in 0..d {
            out.push((base + d * d + d + b, -scale * z[b]));
        }
        out.push((base + d * d + 2 * d, -scale));
    }

    pub fn to_region(&self, theta: &[f64], bounds: &Bounds) -> Result<ConeSet, RegionError> {
        let d = self.dim;
        let cones = (0..self.n_c)
            .map(|j| {
                let s = &theta[j * self.stride()..(j + 1) * self.stride()];
                let mut p = s[..d * d].to_vec();
                for a in 0..d {
                    for b in 0..d {
                        p[a * d + b] /= bounds.width(b);
                    }
                }
                let z0 = bounds.denormalize(&s[d * d..d * d + d]);
                let q: Vec<f64> = (0..d).map(|b| s[d * d + d + b] / bounds.width(b)).collect();
                let r = s[d * d + 2 * d] - q.iter().zip(&bounds.lower).map(|(q, l)| q * l).sum::<f64>();
                Cone { p, z0, q, r }
            })
            .collect();
        ConeSet::new(cones)
    }
}

/// MMPS function in physical coordinates from parameters fitted on
/// `[0, 1]`-normalized points.
pub fn mmps_from_normalized(
    layout: &MmpsLayout,
    theta: &[f64],
    n: usize,
    bounds: &Bounds,
    output_scale: f64,
) -> Result<MmpsFunction, crate::mmps::MmpsError> {
    let d = layout.dim;
    let s = layout.stride();
    let mut phys = Vec::with_capacity(theta.len());
    for row in theta.chunks_exact(s) {
        let mut h = row[d];
        for k in 0..d {
            let a = row[k] / bounds.width(k);
            phys.push(output_scale * a);
            h -= a * bounds.lower[k];
        }
        phys.push(output_scale * h);
    }
    MmpsFunction::unflatten(n, d - n, layout.p_plus, layout.p_minus, &phys)
}

/// Region built from an MMPS boundary, kept for symmetry with the other kinds.
pub fn mmps_region(boundary: MmpsFunction) -> Region {
    Region::Mmps(MmpsRegion { boundary })
}

/// Halfspace `w . z + h <= 0` as an MMPS region with a zero minus term.
pub fn halfspace(w: Vec<f64>, h: f64, n: usize) -> Region {
    let d = w.len();
    let plus = AffineTerm::new(w[..n].to_vec(), w[n..].to_vec(), h);
    let minus = AffineTerm::new(vec![0.0; n], vec![0.0; d - n], 0.0);
    mmps_region(MmpsFunction::new(n, d - n, vec![plus], vec![minus]).expect("valid terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridgen::GridKind;

    fn unit_ball(center: Vec<f64>) -> Region {
        Region::Ellipsoids(EllipsoidUnion::new(vec![Ellipsoid::ball(center, 1.0).unwrap()]).unwrap())
    }

    #[test]
    fn ball_center_and_boundary() {
        let r = unit_ball(vec![0.0, 0.0]);
        assert_eq!(r.boundary_value(&[0.0, 0.0]), -1.0);
        assert_eq!(r.boundary_value(&[1.0, 0.0]), 0.0);
        assert!(r.contains(&[1.0, 0.0]));
        assert!(!r.contains(&[3.0, 3.0]));
    }

    #[test]
    fn union_takes_minimum() {
        let u = EllipsoidUnion::new(vec![
            Ellipsoid::ball(vec![0.0, 0.0], 1.0).unwrap(),
            Ellipsoid::ball(vec![5.0, 0.0], 1.0).unwrap(),
        ])
        .unwrap();
        let z = [5.5, 0.0];
        assert_eq!(u.value(&z), u.members[1].value(&z));
        assert!(u.value(&z) < 0.0);
    }

    #[test]
    fn factor_must_have_positive_diagonal() {
        assert_eq!(
            Ellipsoid::new(vec![0.0, 0.0], vec![1.0, 0.3, 0.0]),
            Err(RegionError::NonPositiveDiagonal)
        );
    }

    fn labeled(points: &[Vec<f64>], feasible: &[bool]) -> Grid {
        Grid::from_points(GridKind::R, 2, points, 0)
            .with_labels(vec![0.0; points.len()], feasible.to_vec())
    }

    #[test]
    fn whole_and_empty_regions() {
        let g = labeled(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]], &[true, false, true]);
        let whole = halfspace(vec![0.0, 0.0], -1.0, 1);
        let m = misclassification(&whole, &g).unwrap();
        assert_eq!((m.inclusion, m.violation), (0.0, 1.0));
        assert!((region_objective(&m, 0.4) - 0.6).abs() < 1e-15);
        let empty = halfspace(vec![0.0, 0.0], 1.0, 1);
        let m = misclassification(&empty, &g).unwrap();
        assert_eq!((m.inclusion, m.violation), (1.0, 0.0));
        assert!((region_objective(&m, 0.4) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ten_point_count() {
        // ball of radius 1 at the origin against hand labels
        let pts: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![0.5, 0.5],
            vec![0.9, 0.0],
            vec![2.0, 0.0],
            vec![0.0, -0.99],
            vec![1.5, 1.5],
            vec![-0.2, 0.1],
            vec![3.0, -3.0],
            vec![0.8, 0.8],
            vec![-1.0, 0.0],
        ];
        let feasible = [true, true, false, true, true, false, false, false, true, true];
        // inside: 0,1,2,4,6,9 ; feasible outside: 3,8 -> 2/6 ; infeasible inside: 2,6 -> 2/4
        let m = misclassification(&unit_ball(vec![0.0, 0.0]), &labeled(&pts, &feasible)).unwrap();
        assert_eq!(m.inclusion, 2.0 / 6.0);
        assert_eq!(m.violation, 2.0 / 4.0);
    }

    #[test]
    fn degenerate_grid() {
        let g = labeled(&[vec![0.0, 0.0]], &[true]);
        assert_eq!(
            misclassification(&unit_ball(vec![0.0, 0.0]), &g),
            Err(RegionError::DegenerateGrid("infeasible"))
        );
    }

    #[test]
    fn objective_arithmetic() {
        let m = Misclassification {
            inclusion: 0.2,
            violation: 0.1,
        };
        assert!((region_objective(&m, 0.5) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn boundary_objective_single_point() {
        let g = Grid::from_points(GridKind::R, 1, &[vec![0.0]], 0).with_labels(vec![1.0], vec![false]);
        let v = boundary_objective(|_| 0.0, &g, 0.01).unwrap();
        assert!((v - 1.0 / 1.01).abs() < 1e-15);
        assert_eq!(boundary_objective(|_| 1.0, &g, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn ellipsoid_layout_export_preserves_values() {
        let b = Bounds::new(vec![0.0, -2.0], vec![4.0, 2.0]).unwrap();
        let layout = EllipsoidLayout { dim: 2, n_e: 2 };
        let theta = vec![0.3, 0.6, 2.0, 0.5, 3.0, 0.7, 0.2, 1.5, -0.4, 2.5];
        let region = layout.to_region(&theta, &b).unwrap();
        for z in [[1.0, 0.0], [3.0, 1.5], [0.2, -1.9]] {
            let s = b.normalize(&z);
            assert!((layout.eval_active(&theta, &s).0 - region.value(&z)).abs() < 1e-12);
        }
    }

    #[test]
    fn cone_layout_export_preserves_values() {
        let b = Bounds::new(vec![0.0, -2.0], vec![4.0, 2.0]).unwrap();
        let layout = ConeLayout { dim: 2, n_c: 2 };
        let theta: Vec<f64> = (0..layout.n_params()).map(|k| ((k * 37) % 11) as f64 / 5.0 - 1.0).collect();
        let set = layout.to_region(&theta, &b).unwrap();
        for z in [[1.0, 0.0], [3.0, 1.5], [0.2, -1.9]] {
            let s = b.normalize(&z);
            assert!((layout.eval_active(&theta, &s).0 - set.value(&z)).abs() < 1e-12);
        }
    }

    #[test]
    fn canonicalize_keeps_shape() {
        let layout = EllipsoidLayout { dim: 2, n_e: 1 };
        let mut theta = vec![0.0, 0.0, -2.0, 0.5, -3.0];
        let before = layout.eval_active(&theta, &[0.3, -0.2]).0;
        layout.canonicalize(&mut theta);
        assert!(theta[2] > 0.0 && theta[4] > 0.0);
        assert!((layout.eval_active(&theta, &[0.3, -0.2]).0 - before).abs() < 1e-14);
    }

    #[test]
    fn region_json_is_tagged() {
        let r = unit_ball(vec![1.0, 2.0]);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["kind"], "ellipsoids");
        let back: Region = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }
}
