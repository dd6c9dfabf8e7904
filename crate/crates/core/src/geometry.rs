//! Exact 2-D convex-set arithmetic over (position, speed) space.
//!
//! Regions carry a dual representation: a halfplane list (`a . x <= b`) and,
//! when bounded, a CCW vertex list. The only Minkowski-type operations ever
//! needed are sums and Pontryagin differences with position-axis segments
//! `{(delta, 0) : |delta| <= d}`, for which the halfplane arithmetic is exact:
//! each `a . x <= b` maps to `a . x <= b -/+ d |a_s|`.

use crate::lp::{self, Max2d};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for halfplane tightness at vertices.
pub const TIGHT_TOL: f64 = 1e-9;
/// Default absolute tolerance for membership tests.
pub const MEMBER_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("empty point set")]
    EmptyPointSet,
    #[error("empty region list")]
    EmptyRegionList,
    #[error("halfplane has zero normal")]
    ZeroNormal,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("lp failure: {0}")]
    Lp(#[from] lp::LpError),
}

/// A point in (position [m], speed [m/s]) space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub s: f64,
    pub v: f64,
}

impl Point2 {
    pub fn new(s: f64, v: f64) -> Self {
        Point2 { s, v }
    }
}

/// Closed halfplane `a . x <= b` with `x = (s, v)`.
#[derive(Debug, Clone, Copy)]
pub struct HalfPlane {
    pub a: [f64; 2],
    pub b: f64,
}

impl HalfPlane {
    pub fn new(a: [f64; 2], b: f64) -> Self {
        HalfPlane { a, b }
    }

    #[inline]
    pub fn satisfies(&self, p: Point2, tol: f64) -> bool {
        self.a[0] * p.s + self.a[1] * p.v <= self.b + tol
    }

    fn normalized(&self) -> Option<HalfPlane> {
        let n = (self.a[0] * self.a[0] + self.a[1] * self.a[1]).sqrt();
        if !n.is_finite() || n < 1e-12 || !self.b.is_finite() {
            return None;
        }
        Some(HalfPlane {
            a: [self.a[0] / n, self.a[1] / n],
            b: self.b / n,
        })
    }
}

/// Closed position interval `[lo, hi]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SInterval {
    pub lo: f64,
    pub hi: f64,
}

impl SInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, GeometryError> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if lo > hi {
            return Err(GeometryError::EmptyPointSet);
        }
        Ok(SInterval { lo, hi })
    }

    pub fn symmetric(half_width: f64) -> Self {
        SInterval {
            lo: -half_width.abs(),
            hi: half_width.abs(),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

/// Convex subset of (s, v) space.
///
/// Unbounded regions carry halfplanes only; bounded regions also carry their
/// CCW vertex list. The empty set is a first-class value (`is_empty`).
#[derive(Debug, Clone)]
pub struct ConvexRegion2 {
    halfplanes: Vec<HalfPlane>,
    vertices: Option<Vec<Point2>>,
    empty: bool,
}

impl ConvexRegion2 {
    /// Builds a region from halfplanes: normalizes, drops redundant rows,
    /// detects emptiness and computes vertices when bounded.
    pub fn from_halfplanes(hps: Vec<HalfPlane>) -> Result<Self, GeometryError> {
        let mut rows = Vec::with_capacity(hps.len());
        for h in &hps {
            match h.normalized() {
                Some(n) => rows.push(n),
                None => return Err(GeometryError::ZeroNormal),
            }
        }
        Self::derive(rows)
    }

    fn derive(rows: Vec<HalfPlane>) -> Result<Self, GeometryError> {
        let as_rows: Vec<([f64; 2], f64)> = rows.iter().map(|h| (h.a, h.b)).collect();
        if !lp::feasible_2d(&as_rows)? {
            return Ok(ConvexRegion2 {
                halfplanes: rows,
                vertices: Some(Vec::new()),
                empty: true,
            });
        }
        let rows = remove_redundant(rows)?;
        let bounded = normals_positively_span(&rows);
        let vertices = if bounded {
            let verts = vertices_from_halfplanes(&rows);
            if verts.is_empty() {
                // Numerically collapsed; treat as empty.
                return Ok(ConvexRegion2 {
                    halfplanes: rows,
                    vertices: Some(Vec::new()),
                    empty: true,
                });
            }
            Some(verts)
        } else {
            None
        };
        Ok(ConvexRegion2 {
            halfplanes: rows,
            vertices,
            empty: false,
        })
    }

    /// The halfspace `s <= s_tl` (region before a traffic light).
    pub fn before_position(s_tl: f64) -> Self {
        ConvexRegion2 {
            halfplanes: vec![HalfPlane::new([1.0, 0.0], s_tl)],
            vertices: None,
            empty: false,
        }
    }

    /// The halfspace `s >= s_tl` (region past a traffic light).
    pub fn after_position(s_tl: f64) -> Self {
        ConvexRegion2 {
            halfplanes: vec![HalfPlane::new([-1.0, 0.0], -s_tl)],
            vertices: None,
            empty: false,
        }
    }

    /// The speed band `0 <= v <= v_max` (unbounded in position).
    pub fn speed_band(v_max: f64) -> Self {
        ConvexRegion2 {
            halfplanes: vec![
                HalfPlane::new([0.0, 1.0], v_max),
                HalfPlane::new([0.0, -1.0], 0.0),
            ],
            vertices: None,
            empty: false,
        }
    }

    pub fn halfplanes(&self) -> &[HalfPlane] {
        &self.halfplanes
    }

    pub fn vertices(&self) -> Option<&[Point2]> {
        self.vertices.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }

    pub fn is_bounded(&self) -> bool {
        !self.empty && self.vertices.is_some()
    }

    /// Membership within absolute tolerance `tol`.
    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        !self.empty && self.halfplanes.iter().all(|h| h.satisfies(p, tol))
    }

    /// Membership in `self` eroded along the position axis by `d`, without
    /// materializing the eroded region. Hot path of the set recursions.
    #[inline]
    pub fn contains_with_margin(&self, p: Point2, d: f64, tol: f64) -> bool {
        !self.empty
            && self.halfplanes.iter().all(|h| {
                h.a[0] * p.s + h.a[1] * p.v <= h.b - d * h.a[0].abs() + tol
            })
    }

    /// Pontryagin difference with the segment `{(delta, 0) : |delta| <= d}`.
    pub fn erode_s(&self, d: f64) -> Self {
        assert!(d >= 0.0, "erosion distance must be nonnegative");
        if self.empty {
            return self.clone();
        }
        let rows: Vec<HalfPlane> = self
            .halfplanes
            .iter()
            .map(|h| HalfPlane::new(h.a, h.b - d * h.a[0].abs()))
            .collect();
        // Erosion cannot create an unbounded set from a bounded one, but it
        // can empty the region; re-derive.
        Self::derive(rows).unwrap_or_else(|_| ConvexRegion2 {
            halfplanes: Vec::new(),
            vertices: Some(Vec::new()),
            empty: true,
        })
    }

    /// Minkowski sum with the segment `{(delta, 0) : |delta| <= d}`.
    ///
    /// Bounded regions are dilated on vertices and re-hulled (exact).
    /// Halfplane-only regions are dilated by shifting offsets, which is exact
    /// whenever each offset is support-tight (true for all regions built by
    /// this crate: halfspaces and boxes).
    pub fn dilate_s(&self, d: f64) -> Self {
        assert!(d >= 0.0, "dilation distance must be nonnegative");
        if self.empty {
            return self.clone();
        }
        match &self.vertices {
            Some(verts) => {
                let mut pts = Vec::with_capacity(verts.len() * 2);
                for p in verts {
                    pts.push(Point2::new(p.s - d, p.v));
                    pts.push(Point2::new(p.s + d, p.v));
                }
                convex_hull(&pts).expect("dilation of nonempty region")
            }
            None => {
                let rows = self
                    .halfplanes
                    .iter()
                    .map(|h| HalfPlane::new(h.a, h.b + d * h.a[0].abs()))
                    .collect();
                ConvexRegion2 {
                    halfplanes: rows,
                    vertices: None,
                    empty: false,
                }
            }
        }
    }

    /// Maximum of `dir . x` over the region, or `None` when unbounded in that
    /// direction. Empty regions return `Some(-inf)`.
    pub fn support(&self, dir: [f64; 2]) -> Result<Option<f64>, GeometryError> {
        if self.empty {
            return Ok(Some(f64::NEG_INFINITY));
        }
        if let Some(verts) = &self.vertices {
            return Ok(verts
                .iter()
                .map(|p| dir[0] * p.s + dir[1] * p.v)
                .fold(None, |acc: Option<f64>, v| {
                    Some(acc.map_or(v, |a| a.max(v)))
                }));
        }
        let rows: Vec<([f64; 2], f64)> = self.halfplanes.iter().map(|h| (h.a, h.b)).collect();
        match lp::maximize_2d(dir, &rows)? {
            Max2d::Infeasible => Ok(Some(f64::NEG_INFINITY)),
            Max2d::Unbounded => Ok(None),
            Max2d::Value { max, .. } => Ok(Some(max)),
        }
    }

    /// Smallest position coordinate attained in the region (`None` if
    /// unbounded below in position).
    pub fn min_s(&self) -> Result<Option<f64>, GeometryError> {
        Ok(self.support([-1.0, 0.0])?.map(|m| -m))
    }

    pub fn max_s(&self) -> Result<Option<f64>, GeometryError> {
        self.support([1.0, 0.0])
    }
}

/// Convex hull of a nonempty point set, as CCW vertices plus halfplanes.
/// Degenerate hulls (single point, collinear segment) are represented with
/// paired opposing halfplanes.
pub fn convex_hull(points: &[Point2]) -> Result<ConvexRegion2, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    if points.iter().any(|p| !(p.s.is_finite() && p.v.is_finite())) {
        return Err(GeometryError::NonFinite);
    }
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| {
        a.s.partial_cmp(&b.s)
            .unwrap()
            .then(a.v.partial_cmp(&b.v).unwrap())
    });
    pts.dedup_by(|a, b| (a.s - b.s).abs() < 1e-12 && (a.v - b.v).abs() < 1e-12);

    if pts.len() == 1 {
        return Ok(point_region(pts[0]));
    }
    let hull = monotone_chain(&pts);
    if hull.len() == 2 {
        return Ok(segment_region(hull[0], hull[1]));
    }
    // General polygon: halfplane per CCW edge, outward normal (dv, -ds).
    let mut rows = Vec::with_capacity(hull.len());
    for k in 0..hull.len() {
        let p = hull[k];
        let q = hull[(k + 1) % hull.len()];
        let e = [q.s - p.s, q.v - p.v];
        let h = HalfPlane::new([e[1], -e[0]], e[1] * p.s - e[0] * p.v);
        rows.push(h.normalized().ok_or(GeometryError::ZeroNormal)?);
    }
    Ok(ConvexRegion2 {
        halfplanes: rows,
        vertices: Some(hull),
        empty: false,
    })
}

/// Intersection of one or more regions: union of halfplane lists with
/// redundancy removed; vertices recomputed when bounded. May be empty.
pub fn intersect(regions: &[&ConvexRegion2]) -> Result<ConvexRegion2, GeometryError> {
    if regions.is_empty() {
        return Err(GeometryError::EmptyRegionList);
    }
    if regions.iter().any(|r| r.is_empty()) {
        return Ok(ConvexRegion2 {
            halfplanes: Vec::new(),
            vertices: Some(Vec::new()),
            empty: true,
        });
    }
    let rows: Vec<HalfPlane> = regions
        .iter()
        .flat_map(|r| r.halfplanes.iter().copied())
        .collect();
    ConvexRegion2::derive(rows)
}

fn point_region(p: Point2) -> ConvexRegion2 {
    ConvexRegion2 {
        halfplanes: vec![
            HalfPlane::new([1.0, 0.0], p.s),
            HalfPlane::new([-1.0, 0.0], -p.s),
            HalfPlane::new([0.0, 1.0], p.v),
            HalfPlane::new([0.0, -1.0], -p.v),
        ],
        vertices: Some(vec![p]),
        empty: false,
    }
}

fn segment_region(p: Point2, q: Point2) -> ConvexRegion2 {
    let e = [q.s - p.s, q.v - p.v];
    let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
    let e = [e[0] / len, e[1] / len];
    let n = [e[1], -e[0]];
    let halfplanes = vec![
        HalfPlane::new(n, n[0] * p.s + n[1] * p.v),
        HalfPlane::new([-n[0], -n[1]], -(n[0] * p.s + n[1] * p.v)),
        HalfPlane::new(e, e[0] * q.s + e[1] * q.v),
        HalfPlane::new([-e[0], -e[1]], -(e[0] * p.s + e[1] * p.v)),
    ];
    ConvexRegion2 {
        halfplanes,
        vertices: Some(vec![p, q]),
        empty: false,
    }
}

#[inline]
fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.s - o.s) * (b.v - o.v) - (a.v - o.v) * (b.s - o.s)
}

/// Andrew's monotone chain on sorted, deduped points. Returns >= 2 vertices
/// in CCW order with collinear boundary points removed.
fn monotone_chain(pts: &[Point2]) -> Vec<Point2> {
    let turn_tol = 1e-10;
    let mut lower: Vec<Point2> = Vec::with_capacity(pts.len());
    for &p in pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= turn_tol {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= turn_tol {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// True iff the normal directions positively span the plane, i.e. the region
/// has no recession direction. Criterion: max angular gap between sorted
/// normal angles strictly below pi.
fn normals_positively_span(rows: &[HalfPlane]) -> bool {
    if rows.len() < 3 {
        return false;
    }
    let mut angles: Vec<f64> = rows.iter().map(|h| h.a[1].atan2(h.a[0])).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut max_gap: f64 = 0.0;
    for i in 1..angles.len() {
        max_gap = max_gap.max(angles[i] - angles[i - 1]);
    }
    max_gap = max_gap.max(angles[0] + 2.0 * std::f64::consts::PI - angles[angles.len() - 1]);
    max_gap < std::f64::consts::PI - 1e-12
}

/// Drops halfplanes implied by the rest, one at a time, via LP.
fn remove_redundant(mut rows: Vec<HalfPlane>) -> Result<Vec<HalfPlane>, GeometryError> {
    if rows.len() <= 1 {
        return Ok(rows);
    }
    let mut i = 0;
    while i < rows.len() && rows.len() > 1 {
        let others: Vec<([f64; 2], f64)> = rows
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, h)| (h.a, h.b))
            .collect();
        let redundant = match lp::maximize_2d(rows[i].a, &others)? {
            Max2d::Value { max, .. } => max <= rows[i].b + TIGHT_TOL,
            _ => false,
        };
        if redundant {
            rows.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(rows)
}

/// Enumerates vertices of a bounded region by pairwise boundary intersection
/// plus feasibility filtering; result sorted CCW.
fn vertices_from_halfplanes(rows: &[HalfPlane]) -> Vec<Point2> {
    let m = rows.len();
    let mut verts: Vec<Point2> = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            let (h1, h2) = (rows[i], rows[j]);
            let det = h1.a[0] * h2.a[1] - h1.a[1] * h2.a[0];
            if det.abs() < 1e-10 {
                continue;
            }
            let s = (h1.b * h2.a[1] - h2.b * h1.a[1]) / det;
            let v = (h1.a[0] * h2.b - h2.a[0] * h1.b) / det;
            let p = Point2::new(s, v);
            if rows.iter().all(|h| h.satisfies(p, MEMBER_TOL))
                && !verts
                    .iter()
                    .any(|q| (q.s - p.s).abs() < 1e-8 && (q.v - p.v).abs() < 1e-8)
            {
                verts.push(p);
            }
        }
    }
    if verts.len() > 2 {
        let cs = verts.iter().map(|p| p.s).sum::<f64>() / verts.len() as f64;
        let cv = verts.iter().map(|p| p.v).sum::<f64>() / verts.len() as f64;
        verts.sort_by(|a, b| {
            let aa = (a.v - cv).atan2(a.s - cs);
            let bb = (b.v - cv).atan2(b.s - cs);
            aa.partial_cmp(&bb).unwrap()
        });
    }
    verts
}

// ---------------------------------------------------------------------------
// Serialization: {"halfplanes":[[a_s,a_v,b],...], "vertices":[[s,v],...]|null}
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RegionRepr {
    halfplanes: Vec<[f64; 3]>,
    vertices: Option<Vec<[f64; 2]>>,
}

impl Serialize for ConvexRegion2 {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        RegionRepr {
            halfplanes: self
                .halfplanes
                .iter()
                .map(|h| [h.a[0], h.a[1], h.b])
                .collect(),
            vertices: self
                .vertices
                .as_ref()
                .map(|vs| vs.iter().map(|p| [p.s, p.v]).collect()),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for ConvexRegion2 {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let repr = RegionRepr::deserialize(de)?;
        let halfplanes: Vec<HalfPlane> = repr
            .halfplanes
            .iter()
            .map(|r| HalfPlane::new([r[0], r[1]], r[2]))
            .collect();
        let vertices: Option<Vec<Point2>> = repr
            .vertices
            .map(|vs| vs.iter().map(|p| Point2::new(p[0], p[1])).collect());
        let empty = matches!(&vertices, Some(v) if v.is_empty());
        Ok(ConvexRegion2 {
            halfplanes,
            vertices,
            empty,
        })
    }
}
