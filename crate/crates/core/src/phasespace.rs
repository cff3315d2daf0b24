//! Phase-plane grids, domain masks and the maximum Nyquist density.
//!
//! Nodes sit at the centres of square cells of side h, symmetric about
//! the origin. A mask stores the node-centre raster and, for each node,
//! the fraction of its cell covered by Ω. For disk unions and radial
//! shadows the coverage is exact up to rounding; Ω-integrals use
//! [`DomainMask::quadrature`], which places one point at the centroid of
//! every partially covered (sub)cell so that boundary cells contribute at
//! second order.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid of n×n cell centres covering [−L, L]².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseGrid {
    half_width: f64,
    spacing: f64,
    n: usize,
}

impl Default for PhaseGrid {
    fn default() -> Self {
        Self::new(6.0, 0.02).expect("default grid")
    }
}

impl PhaseGrid {
    pub fn new(half_width: f64, spacing: f64) -> Result<Self> {
        if !(half_width.is_finite() && spacing.is_finite() && half_width > 0.0 && spacing > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "grid needs L > 0 and h > 0, got L = {half_width}, h = {spacing}"
            )));
        }
        let n = ((2.0 * half_width / spacing) - 1e-9).ceil().max(1.0) as usize;
        Ok(Self {
            half_width,
            spacing,
            n,
        })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Nodes per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Quadrature weight h² of one node.
    pub fn weight(&self) -> f64 {
        self.spacing * self.spacing
    }

    /// Coordinate of the i-th node along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - 0.5 * (self.n as f64 - 1.0)) * self.spacing
    }

    /// Node position for flat index `iy * n + ix`.
    pub fn node(&self, idx: usize) -> (f64, f64) {
        (self.coord(idx % self.n), self.coord(idx / self.n))
    }

    /// Fractional axis index of coordinate `x` (nodes at integers).
    pub fn axis_position(&self, x: f64) -> f64 {
        x / self.spacing + 0.5 * (self.n as f64 - 1.0)
    }

    /// The same window at half the spacing.
    pub fn refined(&self) -> Self {
        Self::new(self.half_width, 0.5 * self.spacing).expect("refined grid")
    }
}

/// A closed disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Disk {
    pub fn new(cx: f64, cy: f64, r: f64) -> Self {
        Self { cx, cy, r }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// Analytic description of Ω.
#[derive(Debug, Clone, PartialEq)]
pub enum Descriptor {
    DiskList(Vec<Disk>),
    /// Rotation-invariant set {z : |z| ∈ ∪ [r0, r1]}; intervals sorted and disjoint.
    RadialShadow(Vec<(f64, f64)>),
    /// The whole grid window.
    Full,
}

impl Descriptor {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Descriptor::DiskList(d) => d.iter().any(|d| d.contains(x, y)),
            Descriptor::RadialShadow(iv) => {
                let r = x.hypot(y);
                iv.iter().any(|&(a, b)| r >= a && r <= b)
            }
            Descriptor::Full => true,
        }
    }
}

/// Area and first moments of a planar region.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub area: f64,
    pub mx: f64,
    pub my: f64,
}

impl Moments {
    fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let area = (x1 - x0) * (y1 - y0);
        Self {
            area,
            mx: area * 0.5 * (x0 + x1),
            my: area * 0.5 * (y0 + y1),
        }
    }

    fn add(&mut self, o: Moments, sign: f64) {
        self.area += sign * o.area;
        self.mx += sign * o.mx;
        self.my += sign * o.my;
    }

    /// Centroid, or `fallback` for an empty region.
    pub fn centroid(&self, fallback: (f64, f64)) -> (f64, f64) {
        if self.area > 0.0 {
            (self.mx / self.area, self.my / self.area)
        } else {
            fallback
        }
    }
}

/// Moments of D((cx, cy), r) ∩ [x0, x1] × [y0, y1], in closed form.
///
/// The x-range is split where the circle crosses the horizontal edges;
/// on each piece the vertical extent is bounded by a constant or by
/// ±√(r²−u²), both of which have elementary antiderivatives.
pub fn disk_rect_moments(disk: &Disk, x0: f64, x1: f64, y0: f64, y1: f64) -> Moments {
    let r = disk.r;
    let (cx, cy) = (disk.cx, disk.cy);
    let (ya, yb) = (y0 - cy, y1 - cy);
    let a = (x0 - cx).max(-r);
    let b = (x1 - cx).min(r);
    if a >= b || ya >= r || yb <= -r {
        return Moments::default();
    }
    let r2 = r * r;
    let mut cuts = vec![a, b];
    for yv in [ya, yb] {
        if yv.abs() < r {
            let u = (r2 - yv * yv).sqrt();
            for c in [-u, u] {
                if c > a && c < b {
                    cuts.push(c);
                }
            }
        }
    }
    cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let s = |u: f64| (r2 - u * u).max(0.0).sqrt();
    let arc = |u: f64| 0.5 * (u * s(u) + r2 * (u / r).clamp(-1.0, 1.0).asin());
    let cube = |u: f64| (r2 - u * u).max(0.0).powf(1.5);
    let sq = |u: f64| r2 * u - u * u * u / 3.0;
    let mut out = Moments::default();
    for w in cuts.windows(2) {
        let (u0, u1) = (w[0], w[1]);
        if u1 <= u0 {
            continue;
        }
        let sm = s(0.5 * (u0 + u1));
        let hi_const = yb < sm;
        let lo_const = ya > -sm;
        if yb.min(sm) <= ya.max(-sm) {
            continue;
        }
        let du = u1 - u0;
        let du2 = 0.5 * (u1 * u1 - u0 * u0);
        let (i_hi, m_hi, q_hi) = if hi_const {
            (yb * du, yb * du2, yb * yb * du)
        } else {
            (arc(u1) - arc(u0), -(cube(u1) - cube(u0)) / 3.0, sq(u1) - sq(u0))
        };
        let (i_lo, m_lo, q_lo) = if lo_const {
            (ya * du, ya * du2, ya * ya * du)
        } else {
            (-(arc(u1) - arc(u0)), (cube(u1) - cube(u0)) / 3.0, sq(u1) - sq(u0))
        };
        let area = i_hi - i_lo;
        out.area += area;
        out.mx += m_hi - m_lo + cx * area;
        out.my += 0.5 * (q_hi - q_lo) + cy * area;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    Outside,
    Inside,
    Cut,
}

fn disk_relation(d: &Disk, x0: f64, x1: f64, y0: f64, y1: f64) -> Relation {
    let nx = (x0 - d.cx).max(0.0).max(d.cx - x1);
    let ny = (y0 - d.cy).max(0.0).max(d.cy - y1);
    let r2 = d.r * d.r;
    if nx * nx + ny * ny >= r2 {
        return Relation::Outside;
    }
    let fx = (x0 - d.cx).abs().max((x1 - d.cx).abs());
    let fy = (y0 - d.cy).abs().max((y1 - d.cy).abs());
    if fx * fx + fy * fy <= r2 {
        Relation::Inside
    } else {
        Relation::Cut
    }
}

const MAX_SPLIT_DEPTH: usize = 3;

/// Moments of Ω ∩ rectangle.
fn region_moments(desc: &Descriptor, x0: f64, x1: f64, y0: f64, y1: f64, depth: usize) -> Moments {
    match desc {
        Descriptor::Full => Moments::rect(x0, x1, y0, y1),
        Descriptor::RadialShadow(iv) => {
            let mut m = Moments::default();
            for &(a, b) in iv {
                m.add(disk_rect_moments(&Disk::new(0.0, 0.0, b), x0, x1, y0, y1), 1.0);
                if a > 0.0 {
                    m.add(disk_rect_moments(&Disk::new(0.0, 0.0, a), x0, x1, y0, y1), -1.0);
                }
            }
            m.area = m.area.max(0.0);
            m
        }
        Descriptor::DiskList(disks) => {
            let mut cut: Option<&Disk> = None;
            let mut ncut = 0;
            for d in disks {
                match disk_relation(d, x0, x1, y0, y1) {
                    Relation::Inside => return Moments::rect(x0, x1, y0, y1),
                    Relation::Cut => {
                        ncut += 1;
                        cut = Some(d);
                    }
                    Relation::Outside => {}
                }
            }
            match (ncut, cut) {
                (0, _) => Moments::default(),
                (1, Some(d)) => disk_rect_moments(d, x0, x1, y0, y1),
                _ if depth < MAX_SPLIT_DEPTH => {
                    let mut m = Moments::default();
                    let k = 4;
                    let (dx, dy) = ((x1 - x0) / k as f64, (y1 - y0) / k as f64);
                    for i in 0..k {
                        for j in 0..k {
                            let (a0, b0) = (x0 + i as f64 * dx, y0 + j as f64 * dy);
                            m.add(region_moments(desc, a0, a0 + dx, b0, b0 + dy, depth + 1), 1.0);
                        }
                    }
                    m
                }
                _ => {
                    let (xc, yc) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
                    if desc.contains(xc, yc) {
                        Moments::rect(x0, x1, y0, y1)
                    } else {
                        Moments::default()
                    }
                }
            }
        }
    }
}

/// Points and weights of a quadrature rule.
#[derive(Debug, Clone, Default)]
pub struct QuadratureRule {
    pub points: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn push(&mut self, p: (f64, f64), w: f64) {
        self.points.push(p);
        self.weights.push(w);
    }
}

/// Default number of subcells per axis used by [`DomainMask::quadrature`].
pub const DEFAULT_SUBDIVISION: usize = 4;

/// Ω on a grid: node-centre raster, per-node coverage fraction and the
/// optional analytic descriptor.
#[derive(Debug, Clone)]
pub struct DomainMask {
    grid: PhaseGrid,
    raster: Vec<bool>,
    coverage: Vec<f64>,
    descriptor: Option<Descriptor>,
}

impl DomainMask {
    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn raster(&self) -> &[bool] {
        &self.raster
    }

    /// Fraction of each node's cell lying in Ω.
    pub fn coverage(&self) -> &[f64] {
        &self.coverage
    }

    pub fn descriptor(&self) -> Option<&Descriptor> {
        self.descriptor.as_ref()
    }

    /// Empty domain.
    pub fn empty(grid: PhaseGrid) -> Self {
        Self {
            grid,
            raster: vec![false; grid.len()],
            coverage: vec![0.0; grid.len()],
            descriptor: Some(Descriptor::DiskList(Vec::new())),
        }
    }

    /// The whole window.
    pub fn full(grid: PhaseGrid) -> Self {
        Self {
            grid,
            raster: vec![true; grid.len()],
            coverage: vec![1.0; grid.len()],
            descriptor: Some(Descriptor::Full),
        }
    }

    /// Mask from a raster alone; coverage equals the raster.
    pub fn from_raster(grid: PhaseGrid, raster: Vec<bool>) -> Result<Self> {
        if raster.len() != grid.len() {
            return Err(Error::InvalidConfig(format!(
                "raster has {} nodes, grid has {}",
                raster.len(),
                grid.len()
            )));
        }
        let coverage = raster.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            grid,
            raster,
            coverage,
            descriptor: None,
        })
    }

    fn from_descriptor(grid: PhaseGrid, desc: Descriptor) -> Self {
        let n = grid.n();
        let h = grid.spacing();
        let (lo, hi) = descriptor_index_range(&grid, &desc);
        let mut raster = vec![false; grid.len()];
        let mut coverage = vec![0.0; grid.len()];
        raster
            .par_chunks_mut(n)
            .zip(coverage.par_chunks_mut(n))
            .enumerate()
            .for_each(|(iy, (rrow, crow))| {
                if iy < lo.1 || iy > hi.1 {
                    return;
                }
                let y = grid.coord(iy);
                for ix in lo.0..=hi.0 {
                    let x = grid.coord(ix);
                    rrow[ix] = desc.contains(x, y);
                    let m = region_moments(&desc, x - 0.5 * h, x + 0.5 * h, y - 0.5 * h, y + 0.5 * h, 0);
                    crow[ix] = (m.area / (h * h)).clamp(0.0, 1.0);
                }
            });
        Self {
            grid,
            raster,
            coverage,
            descriptor: Some(desc),
        }
    }

    /// Lebesgue measure of Ω: h² times the summed coverage (the raster
    /// count for masks without a descriptor).
    pub fn measure(&self) -> f64 {
        self.grid.weight() * self.coverage.iter().sum::<f64>()
    }

    /// Measure by the node-centre rule, h² × #{raster nodes}.
    pub fn raster_measure(&self) -> f64 {
        self.grid.weight() * self.raster.iter().filter(|&&b| b).count() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.coverage.iter().all(|&c| c == 0.0)
    }

    /// Bounding box (x0, x1, y0, y1) of the covered cells, or `None`.
    pub fn bounding_box(&self) -> Option<(f64, f64, f64, f64)> {
        let n = self.grid.n();
        let h = self.grid.spacing();
        let (mut ix0, mut ix1, mut iy0, mut iy1) = (usize::MAX, 0, usize::MAX, 0);
        for (idx, &c) in self.coverage.iter().enumerate() {
            if c > 0.0 {
                let (ix, iy) = (idx % n, idx / n);
                ix0 = ix0.min(ix);
                ix1 = ix1.max(ix);
                iy0 = iy0.min(iy);
                iy1 = iy1.max(iy);
            }
        }
        if ix0 == usize::MAX {
            return None;
        }
        Some((
            self.grid.coord(ix0) - 0.5 * h,
            self.grid.coord(ix1) + 0.5 * h,
            self.grid.coord(iy0) - 0.5 * h,
            self.grid.coord(iy1) + 0.5 * h,
        ))
    }

    /// Quadrature rule for ∫_Ω f.
    ///
    /// Each covered cell is split into `subdivision`² subcells. Fully
    /// covered subcells contribute their midpoint, partially covered ones
    /// the centroid of the covered part weighted by its area. Without a
    /// descriptor the rule is the plain node-centre Riemann sum.
    pub fn quadrature(&self, subdivision: usize) -> QuadratureRule {
        let mut rule = QuadratureRule::default();
        let h = self.grid.spacing();
        let desc = match &self.descriptor {
            None => {
                for (idx, &b) in self.raster.iter().enumerate() {
                    if b {
                        rule.push(self.grid.node(idx), h * h);
                    }
                }
                return rule;
            }
            Some(d) => d,
        };
        let s = subdivision.max(1);
        let hs = h / s as f64;
        let parts: Vec<QuadratureRule> = self
            .coverage
            .par_iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(|(idx, &c)| {
                let mut local = QuadratureRule::default();
                let (x, y) = self.grid.node(idx);
                let (x0, y0) = (x - 0.5 * h, y - 0.5 * h);
                for i in 0..s {
                    for j in 0..s {
                        let (a0, b0) = (x0 + i as f64 * hs, y0 + j as f64 * hs);
                        let mid = (a0 + 0.5 * hs, b0 + 0.5 * hs);
                        if c >= 1.0 {
                            local.push(mid, hs * hs);
                            continue;
                        }
                        let m = region_moments(desc, a0, a0 + hs, b0, b0 + hs, 0);
                        if m.area > 0.0 {
                            local.push(m.centroid(mid), m.area);
                        }
                    }
                }
                local
            })
            .collect();
        for p in parts {
            rule.points.extend(p.points);
            rule.weights.extend(p.weights);
        }
        rule
    }
}

/// Quadrature rule for the disk D(center, r) on the cells of `grid`.
///
/// Same construction as [`DomainMask::quadrature`] without building a
/// full-grid mask; the disk must lie inside the window.
pub fn disk_rule(grid: &PhaseGrid, center: (f64, f64), r: f64, subdivision: usize) -> Result<QuadratureRule> {
    let l = grid.half_width();
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Precondition(format!("disk radius must be positive, got {r}")));
    }
    if center.0.abs() + r > l || center.1.abs() + r > l {
        return Err(Error::WindowTooSmall(format!(
            "disk at ({}, {}) with radius {r} leaves the window of half-width {l}",
            center.0, center.1
        )));
    }
    let desc = Descriptor::DiskList(vec![Disk::new(center.0, center.1, r)]);
    let ((ix0, iy0), (ix1, iy1)) = descriptor_index_range(grid, &desc);
    let h = grid.spacing();
    let s = subdivision.max(1);
    let hs = h / s as f64;
    let mut rule = QuadratureRule::default();
    for iy in iy0..=iy1 {
        let y = grid.coord(iy);
        for ix in ix0..=ix1 {
            let x = grid.coord(ix);
            for i in 0..s {
                for j in 0..s {
                    let (a0, b0) = (x - 0.5 * h + i as f64 * hs, y - 0.5 * h + j as f64 * hs);
                    let m = region_moments(&desc, a0, a0 + hs, b0, b0 + hs, 0);
                    if m.area > 0.0 {
                        rule.push(m.centroid((a0 + 0.5 * hs, b0 + 0.5 * hs)), m.area);
                    }
                }
            }
        }
    }
    Ok(rule)
}

fn descriptor_index_range(grid: &PhaseGrid, desc: &Descriptor) -> ((usize, usize), (usize, usize)) {
    let n = grid.n();
    let ext = match desc {
        Descriptor::Full => None,
        Descriptor::DiskList(d) if d.is_empty() => return ((1, 1), (0, 0)),
        Descriptor::DiskList(d) => Some(d.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |acc, d| {
                (
                    acc.0.min(d.cx - d.r),
                    acc.1.max(d.cx + d.r),
                    acc.2.min(d.cy - d.r),
                    acc.3.max(d.cy + d.r),
                )
            },
        )),
        Descriptor::RadialShadow(iv) => {
            let r = iv.iter().map(|p| p.1).fold(0.0, f64::max);
            Some((-r, r, -r, r))
        }
    };
    match ext {
        None => ((0, 0), (n - 1, n - 1)),
        Some((x0, x1, y0, y1)) => {
            let clamp = |v: f64| v.max(0.0).min((n - 1) as f64) as usize;
            let ix0 = clamp(grid.axis_position(x0).floor() - 1.0);
            let ix1 = clamp(grid.axis_position(x1).ceil() + 1.0);
            let iy0 = clamp(grid.axis_position(y0).floor() - 1.0);
            let iy1 = clamp(grid.axis_position(y1).ceil() + 1.0);
            ((ix0, iy0), (ix1, iy1))
        }
    }
}

/// Union of disks D(centers[i], radii[i]).
pub fn make_disk_union(centers: &[(f64, f64)], radii: &[f64], grid: PhaseGrid) -> Result<DomainMask> {
    if centers.len() != radii.len() {
        return Err(Error::InvalidConfig(format!(
            "{} centres but {} radii",
            centers.len(),
            radii.len()
        )));
    }
    let l = grid.half_width();
    let mut disks = Vec::with_capacity(radii.len());
    for (&(cx, cy), &r) in centers.iter().zip(radii) {
        if !(r > 0.0 && r.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "disk ({cx}, {cy}) needs a positive finite radius, got {r}"
            )));
        }
        if cx.abs() + r > l || cy.abs() + r > l {
            return Err(Error::OutOfWindow {
                cx,
                cy,
                r,
                half_width: l,
            });
        }
        disks.push(Disk::new(cx, cy, r));
    }
    Ok(DomainMask::from_descriptor(grid, Descriptor::DiskList(disks)))
}

/// Random union of `count` disks with centres in [−extent, extent]² and
/// radii in [r_min, r_max]; no disk contains another (centre distance at
/// least the larger radius).
pub fn random_disk_union<R: rand::Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    extent: f64,
    radii: (f64, f64),
    grid: PhaseGrid,
) -> Result<DomainMask> {
    let (r_min, r_max) = radii;
    if count == 0 || !(r_min > 0.0 && r_max >= r_min) || extent + r_max > grid.half_width() {
        return Err(Error::InvalidConfig(format!(
            "random disk union needs count >= 1, 0 < r_min <= r_max and extent + r_max <= L, got {count}, {r_min}, {r_max}, {extent}"
        )));
    }
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(count);
    let mut rs: Vec<f64> = Vec::with_capacity(count);
    let mut tries = 0;
    while centers.len() < count {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::InvalidConfig("could not place non-nested disks".into()));
        }
        let c = (rng.gen_range(-extent..=extent), rng.gen_range(-extent..=extent));
        let r = rng.gen_range(r_min..=r_max);
        let ok = centers
            .iter()
            .zip(&rs)
            .all(|(&(x, y), &q)| ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt() >= r.max(q));
        if ok {
            centers.push(c);
            rs.push(r);
        }
    }
    make_disk_union(&centers, &rs, grid)
}

/// Radial shadow {z : |z| ∈ ∪ [r0, r1]}; overlapping intervals are merged.
pub fn make_radial_shadow(intervals: &[(f64, f64)], grid: PhaseGrid) -> Result<DomainMask> {
    let mut iv: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
    for &(a, b) in intervals {
        if !(a >= 0.0 && b > a && b.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "radial interval [{a}, {b}] must satisfy 0 <= r0 < r1 < inf"
            )));
        }
        if b > grid.half_width() {
            return Err(Error::OutOfWindow {
                cx: 0.0,
                cy: 0.0,
                r: b,
                half_width: grid.half_width(),
            });
        }
        iv.push((a, b));
    }
    iv.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (a, b) in iv {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    Ok(DomainMask::from_descriptor(grid, Descriptor::RadialShadow(merged)))
}

/// The R-sparse chain: `count` disks of radius R/2 with centres spaced 2R
/// along the x-axis, centred on the origin.
pub fn make_rsparse(r: f64, count: usize, grid: PhaseGrid) -> Result<DomainMask> {
    let centers: Vec<(f64, f64)> = (0..count)
        .map(|k| ((2.0 * k as f64 - (count as f64 - 1.0)) * r, 0.0))
        .collect();
    make_disk_union(&centers, &vec![0.5 * r; count], grid)
}

/// Result of a maximum Nyquist density computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NyquistReport {
    /// ν(Ω, R) in area units.
    pub value: f64,
    pub argmax_center: (f64, f64),
    pub radius: f64,
    /// Grid-restriction allowance 2πRh for the supremum over ℝ².
    pub error_bar: f64,
}

/// How a kernel is correlated with the coverage field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvolutionMethod {
    /// Sliding-window sum over the kernel support.
    Direct,
    /// Zero-padded FFT convolution.
    Fft,
}

/// ν(Ω, R) = sup_z |Ω ∩ D_R(z)| over grid nodes.
pub fn nyquist_density(mask: &DomainMask, r: f64) -> Result<NyquistReport> {
    nyquist_density_with(mask, r, ConvolutionMethod::Fft)
}

pub fn nyquist_density_with(mask: &DomainMask, r: f64, method: ConvolutionMethod) -> Result<NyquistReport> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Precondition(format!("Nyquist radius must be positive, got {r}")));
    }
    let grid = *mask.grid();
    let h = grid.spacing();
    let error_bar = 2.0 * PI * r * h;
    let bbox = match mask.bounding_box() {
        None => {
            return Ok(NyquistReport {
                value: 0.0,
                argmax_center: (0.0, 0.0),
                radius: r,
                error_bar,
            })
        }
        Some(b) => b,
    };
    let l = grid.half_width();
    let reach = (grid.n() as f64) * 0.5 * h;
    let need = bbox.0.abs().max(bbox.1.abs()).max(bbox.2.abs()).max(bbox.3.abs()) + r;
    let whole = matches!(mask.descriptor(), Some(Descriptor::Full));
    if !whole && need > reach.max(l) + 1e-12 {
        return Err(Error::WindowTooSmall(format!(
            "bounding box of Ω inflated by R = {r} reaches {need}, window half-width {l}"
        )));
    }
    let rc = (r / h).ceil() as i64 + 1;
    let disk = Disk::new(0.0, 0.0, r);
    let kernel = |dx: i64, dy: i64| {
        let (x, y) = (dx as f64 * h, dy as f64 * h);
        disk_rect_moments(&disk, x - 0.5 * h, x + 0.5 * h, y - 0.5 * h, y + 0.5 * h).area / (h * h)
    };
    let (best, idx) = match method {
        ConvolutionMethod::Direct => correlate_direct_max(mask, rc, &kernel),
        ConvolutionMethod::Fft => correlate_fft_max(mask, Some(rc), &kernel),
    };
    Ok(NyquistReport {
        value: best * h * h,
        argmax_center: grid.node(idx),
        radius: r,
        error_bar,
    })
}

/// max_c Σ_p coverage(p) k(p − c) by direct summation over offsets |o|∞ ≤ rc.
pub(crate) fn correlate_direct_max(
    mask: &DomainMask,
    rc: i64,
    kernel: &(dyn Fn(i64, i64) -> f64 + Sync),
) -> (f64, usize) {
    let n = mask.grid().n() as i64;
    let side = (2 * rc + 1) as usize;
    let mut ktab = vec![0.0; side * side];
    for dy in -rc..=rc {
        for dx in -rc..=rc {
            ktab[((dy + rc) as usize) * side + (dx + rc) as usize] = kernel(dx, dy);
        }
    }
    let cov = mask.coverage();
    (0..n * n)
        .into_par_iter()
        .map(|c| {
            let (cx, cy) = (c % n, c / n);
            let mut s = 0.0;
            for dy in -rc..=rc {
                let py = cy + dy;
                if py < 0 || py >= n {
                    continue;
                }
                let krow = &ktab[((dy + rc) as usize) * side..];
                let crow = &cov[(py * n) as usize..((py + 1) * n) as usize];
                let xa = (cx - rc).max(0);
                let xb = (cx + rc).min(n - 1);
                for px in xa..=xb {
                    s += crow[px as usize] * krow[(px - cx + rc) as usize];
                }
            }
            (s, c as usize)
        })
        .reduce(|| (f64::NEG_INFINITY, 0), pick_max)
}

fn pick_max(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Full correlation field Σ_p coverage(p) k(p − c) for every node c, by FFT.
/// `support` limits the kernel to |o|∞ ≤ support (in cells).
pub(crate) fn correlate_fft(
    mask: &DomainMask,
    support: Option<i64>,
    kernel: &(dyn Fn(i64, i64) -> f64 + Sync),
) -> Vec<f64> {
    let n = mask.grid().n();
    let reach = support.unwrap_or(n as i64 - 1).min(n as i64 - 1);
    let p = fast_len(n + reach as usize);
    let mut a = vec![Complex64::new(0.0, 0.0); p * p];
    for (idx, &c) in mask.coverage().iter().enumerate() {
        if c != 0.0 {
            a[(idx / n) * p + idx % n] = Complex64::new(c, 0.0);
        }
    }
    let mut k = vec![Complex64::new(0.0, 0.0); p * p];
    k.par_chunks_mut(p).enumerate().for_each(|(row, chunk)| {
        let dy = if row as i64 <= reach {
            row as i64
        } else if (p - row) as i64 <= reach {
            -((p - row) as i64)
        } else {
            return;
        };
        for (col, v) in chunk.iter_mut().enumerate() {
            let dx = if col as i64 <= reach {
                col as i64
            } else if (p - col) as i64 <= reach {
                -((p - col) as i64)
            } else {
                continue;
            };
            // correlation: value at offset o = p − c is stored at −o
            *v = Complex64::new(kernel(-dx, -dy), 0.0);
        }
    });
    fft2(&mut a, p, false);
    fft2(&mut k, p, false);
    a.par_iter_mut().zip(k.par_iter()).for_each(|(x, y)| *x *= y);
    fft2(&mut a, p, true);
    let scale = 1.0 / (p * p) as f64;
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(iy, row)| {
        for (ix, o) in row.iter_mut().enumerate() {
            *o = a[iy * p + ix].re * scale;
        }
    });
    out
}

pub(crate) fn correlate_fft_max(
    mask: &DomainMask,
    support: Option<i64>,
    kernel: &(dyn Fn(i64, i64) -> f64 + Sync),
) -> (f64, usize) {
    let field = correlate_fft(mask, support, kernel);
    field
        .iter()
        .enumerate()
        .fold((f64::NEG_INFINITY, 0), |acc, (i, &v)| pick_max(acc, (v, i)))
}

/// Smallest 2^a 3^b 5^c ≥ m.
fn fast_len(m: usize) -> usize {
    let mut best = usize::MAX;
    let mut p2 = 1usize;
    while p2 < 2 * m {
        let mut p3 = p2;
        while p3 < 2 * m {
            let mut p5 = p3;
            while p5 < 2 * m {
                if p5 >= m && p5 < best {
                    best = p5;
                }
                p5 *= 5;
            }
            p3 *= 3;
        }
        p2 *= 2;
    }
    best
}

fn fft2(data: &mut [Complex64], p: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft: Arc<dyn rustfft::Fft<f64>> = if inverse {
        planner.plan_fft_inverse(p)
    } else {
        planner.plan_fft_forward(p)
    };
    data.par_chunks_mut(p).for_each(|row| fft.process(row));
    let mut t = vec![Complex64::new(0.0, 0.0); p * p];
    transpose(data, &mut t, p);
    t.par_chunks_mut(p).for_each(|row| fft.process(row));
    transpose(&t, data, p);
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], p: usize) {
    dst.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = src[j * p + i];
        }
    });
}

/// `{"L": .., "h": ..}`
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "L")]
    pub half_width: f64,
    pub h: f64,
}

impl GridSpec {
    pub fn build(&self) -> Result<PhaseGrid> {
        PhaseGrid::new(self.half_width, self.h)
    }
}

/// JSON domain descriptor: `{"grid":{..},"disks":[{"cx","cy","r"}]}` or
/// `{"grid":{..},"radial_shadow":[[r0,r1],..]}`; the grid is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disks: Option<Vec<Disk>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radial_shadow: Option<Vec<[f64; 2]>>,
}

impl DomainSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("domain JSON: {e}")))
    }

    /// The grid from the document, or the default one.
    pub fn grid(&self) -> Result<PhaseGrid> {
        match &self.grid {
            Some(g) => g.build(),
            None => Ok(PhaseGrid::default()),
        }
    }

    /// Builds the mask on `grid`, or on the document's own grid.
    pub fn build(&self, grid: Option<PhaseGrid>) -> Result<DomainMask> {
        let grid = match grid {
            Some(g) => g,
            None => self.grid()?,
        };
        match (&self.disks, &self.radial_shadow) {
            (Some(d), None) => {
                let centers: Vec<(f64, f64)> = d.iter().map(|d| (d.cx, d.cy)).collect();
                let radii: Vec<f64> = d.iter().map(|d| d.r).collect();
                make_disk_union(&centers, &radii, grid)
            }
            (None, Some(s)) => {
                let iv: Vec<(f64, f64)> = s.iter().map(|p| (p[0], p[1])).collect();
                make_radial_shadow(&iv, grid)
            }
            _ => Err(Error::InvalidConfig(
                "domain needs exactly one of \"disks\" or \"radial_shadow\"".into(),
            )),
        }
    }
}
