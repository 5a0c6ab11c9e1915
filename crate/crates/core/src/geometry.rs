//! Free-boundary extraction and metric audits of the extracted curve.
//!
//! All routines here are two-dimensional.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{vec2, Ball, Grid, Point, ScalarField};
use crate::problem::{AlmostMinParams, WeightField};
use crate::solver::{energy, harmonic_replace, Indicator, Region};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub pos: Point,
    /// Unit normal pointing into `{u > 0}`.
    pub normal: Point,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub vertices: Vec<Vertex>,
    /// For closed polylines the last vertex repeats the first.
    pub closed: bool,
}

impl Polyline {
    pub fn length(&self) -> f64 {
        self.vertices.windows(2).map(|w| vec2::dist(w[0].pos, w[1].pos)).sum()
    }
}

/// Zero contour of `u` at level `0⁺`, oriented with `{u > 0}` on the left.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreeBoundary {
    pub polylines: Vec<Polyline>,
}

impl FreeBoundary {
    pub fn is_empty(&self) -> bool {
        self.polylines.iter().all(|p| p.vertices.len() < 2)
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.polylines
            .iter()
            .flat_map(|p| p.vertices.windows(2).map(|w| (w[0].pos, w[1].pos)))
    }

    pub fn length(&self) -> f64 {
        self.polylines.iter().map(Polyline::length).sum()
    }

    pub fn vertices(&self) -> impl Iterator<Item = &Vertex> + '_ {
        self.polylines.iter().flat_map(|p| p.vertices.iter())
    }
}

fn require_rank2(u: &ScalarField) -> Result<()> {
    if u.grid().rank() != 2 {
        return Err(Error::param("geometry routines need a rank-2 field"));
    }
    Ok(())
}

/// Edge keys: `2k` for the edge from node `k` to its +x neighbor, `2k + 1`
/// for the edge to its +y neighbor.
///
/// Where the nonpositive endpoint is exactly zero (the usual situation for
/// one-phase fields) the crossing is extrapolated from the positive side
/// along the edge line: quadratically through three positive samples when
/// available, linearly through two otherwise. Interpolating towards the zero
/// sample would pin the contour to grid nodes, and linear extrapolation
/// misplaces crossings on edges nearly tangent to the boundary, where the
/// field is convex along the edge.
pub(crate) fn edge_crossing(u: &ScalarField, edge: usize) -> Point {
    let g = u.grid();
    let k = edge / 2;
    let (i, j) = (k % g.nx(), k / g.nx());
    let (stride, along, n_along) = if edge % 2 == 0 { (1, i, g.nx()) } else { (g.nx(), j, g.ny()) };
    let (a, b) = (k, k + stride);
    let (ua, ub) = (u.values()[a], u.values()[b]);
    let v = |m: usize| u.values()[m];
    let mut t = ua / (ua - ub);
    if ub == 0.0 && ua > 0.0 && along > 0 {
        let beyond = (along > 1).then(|| v(a - 2 * stride));
        if let Some(s) = extrapolated_root(ua, v(a - stride), beyond) {
            t = s;
        }
    } else if ua == 0.0 && ub > 0.0 && along + 2 < n_along {
        let beyond = (along + 3 < n_along).then(|| v(b + 2 * stride));
        if let Some(s) = extrapolated_root(ub, v(b + stride), beyond) {
            t = 1.0 - s;
        }
    }
    let p = g.node2(i, j);
    let h = g.spacing();
    if edge % 2 == 0 {
        [p[0] + t * h, p[1]]
    } else {
        [p[0], p[1] + t * h]
    }
}

/// Zero in `(0, 1]` of the extrapolant through `f0` at 0, `f1` at −1 and
/// `f2` at −2 (in cells, pointing away from the zero node); falls back to the
/// linear extrapolant when `f2` is missing or no quadratic root qualifies.
fn extrapolated_root(f0: f64, f1: f64, f2: Option<f64>) -> Option<f64> {
    if let Some(f2) = f2.filter(|&f2| f1 > 0.0 && f2 > 0.0) {
        let a = 0.5 * (f2 - 2.0 * f1 + f0);
        let b = a - (f1 - f0);
        let root = if a.abs() < 1e-14 * (f0 + f1 + f2) {
            (b < 0.0).then(|| -f0 / b)
        } else {
            let disc = b * b - 4.0 * a * f0;
            (disc >= 0.0).then(|| {
                let sq = disc.sqrt();
                let (r1, r2) = ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a));
                [r1, r2].into_iter().filter(|&r| r > 0.0).fold(f64::INFINITY, f64::min)
            })
        };
        if let Some(r) = root.filter(|&r| r > 0.0 && r <= 1.0) {
            return Some(r);
        }
    }
    let slope = f1 - f0;
    (slope > 0.0).then(|| (f0 / slope).min(1.0))
}

/// Gradient of the bilinear interpolant inside cell `(i, j)` at local
/// coordinates `(fx, fy)`.
fn cell_gradient(u: &ScalarField, i: usize, j: usize, fx: f64, fy: f64) -> Point {
    let h = u.grid().spacing();
    let (a, b, c, d) = (u.at2(i, j), u.at2(i + 1, j), u.at2(i, j + 1), u.at2(i + 1, j + 1));
    [
        ((b - a) * (1.0 - fy) + (d - c) * fy) / h,
        ((c - a) * (1.0 - fx) + (d - b) * fx) / h,
    ]
}

/// Unit normal at a boundary point: least-squares gradient of
/// `u(x) ≈ g·(x − z)` over the positive nodes within `3h` of `z`, falling back
/// to the interpolated gradient across the edge. The interpolant's gradient
/// in a cut cell mixes in clipped corners and can be off by tens of degrees.
fn vertex_normal(u: &ScalarField, edge: usize, z: Point) -> Option<Point> {
    let g = u.grid();
    let h = g.spacing();
    let reach = 3.0 * h;
    let (i0, i1) = g.node_range(0, z[0] - reach, z[0] + reach);
    let (j0, j1) = g.node_range(1, z[1] - reach, z[1] + reach);
    let (mut a, mut b, mut c, mut rx, mut ry, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0);
    for j in j0..=j1 {
        for i in i0..=i1 {
            let v = u.at2(i, j);
            let d = vec2::sub(g.node2(i, j), z);
            if v > 0.0 && vec2::norm(d) <= reach {
                a += d[0] * d[0];
                b += d[0] * d[1];
                c += d[1] * d[1];
                rx += d[0] * v;
                ry += d[1] * v;
                n += 1;
            }
        }
    }
    let det = a * c - b * b;
    if n >= 3 && det > 1e-6 * (a * c).max(f64::MIN_POSITIVE) {
        if let Some(nu) = vec2::unit([(c * rx - b * ry) / det, (a * ry - b * rx) / det]) {
            return Some(nu);
        }
    }
    edge_normal(u, edge, z)
}

/// Gradient at an edge crossing, averaged over the cells sharing the edge.
fn edge_normal(u: &ScalarField, edge: usize, pos: Point) -> Option<Point> {
    let g = u.grid();
    let k = edge / 2;
    let (i, j) = (k % g.nx(), k / g.nx());
    let h = g.spacing();
    let o = g.origin();
    let mut sum = [0.0, 0.0];
    if edge % 2 == 0 {
        let fx = ((pos[0] - o[0]) / h - i as f64).clamp(0.0, 1.0);
        if j > 0 {
            sum = vec2::add(sum, cell_gradient(u, i, j - 1, fx, 1.0));
        }
        if j + 1 < g.ny() {
            sum = vec2::add(sum, cell_gradient(u, i, j, fx, 0.0));
        }
    } else {
        let fy = ((pos[1] - o[1]) / h - j as f64).clamp(0.0, 1.0);
        if i > 0 {
            sum = vec2::add(sum, cell_gradient(u, i - 1, j, 1.0, fy));
        }
        if i + 1 < g.nx() {
            sum = vec2::add(sum, cell_gradient(u, i, j, 0.0, fy));
        }
    }
    vec2::unit(sum)
}

/// Marching squares on the sign of `u > 0`.
///
/// Each cell contributes segments directed from the crossing where the
/// counter-clockwise cell boundary leaves `{u > 0}` to the crossing where it
/// re-enters, so the positive side lies to the left. Saddle cells are split
/// according to the sign of the mean of the four corners.
pub fn extract_boundary(u: &ScalarField) -> Result<FreeBoundary> {
    require_rank2(u)?;
    let g = u.grid();
    let nx = g.nx();
    let pos = |k: usize| u.values()[k] > 0.0;
    let mut next: BTreeMap<usize, usize> = BTreeMap::new();
    for j in 0..g.ny() - 1 {
        for i in 0..nx - 1 {
            let c = [g.index2(i, j), g.index2(i + 1, j), g.index2(i + 1, j + 1), g.index2(i, j + 1)];
            let s = c.map(pos);
            // cell edges in counter-clockwise order, each with its global key
            let edges = [2 * c[0], 2 * c[1] + 1, 2 * c[3], 2 * c[0] + 1];
            let mut exits = Vec::with_capacity(2);
            let mut enters = Vec::with_capacity(2);
            for e in 0..4 {
                let (from, to) = (s[e], s[(e + 1) % 4]);
                if from && !to {
                    exits.push(e);
                } else if !from && to {
                    enters.push(e);
                }
            }
            match exits.len() {
                0 => {}
                1 => {
                    next.insert(edges[exits[0]], edges[enters[0]]);
                }
                _ => {
                    let mean = c.iter().map(|&k| u.values()[k]).sum::<f64>() / 4.0;
                    for &e in &exits {
                        let partner = if mean > 0.0 { (e + 1) % 4 } else { (e + 3) % 4 };
                        next.insert(edges[e], edges[partner]);
                    }
                }
            }
        }
    }
    let has_incoming: HashSet<usize> = next.values().copied().collect();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut chains: Vec<(Vec<usize>, bool)> = Vec::new();
    let starts: Vec<usize> = next.keys().copied().filter(|e| !has_incoming.contains(e)).collect();
    for start in starts {
        let mut chain = vec![start];
        visited.insert(start);
        let mut cur = start;
        while let Some(&n) = next.get(&cur) {
            chain.push(n);
            if !visited.insert(n) {
                break;
            }
            cur = n;
        }
        chains.push((chain, false));
    }
    let keys: Vec<usize> = next.keys().copied().collect();
    for start in keys {
        if visited.contains(&start) {
            continue;
        }
        let mut chain = vec![start];
        visited.insert(start);
        let mut cur = start;
        loop {
            let n = next[&cur];
            chain.push(n);
            if n == start || !visited.insert(n) {
                break;
            }
            cur = n;
        }
        chains.push((chain, true));
    }

    let mut polylines = Vec::with_capacity(chains.len());
    for (chain, closed) in chains {
        let mut verts: Vec<Vertex> = Vec::with_capacity(chain.len());
        for &e in &chain {
            let p = edge_crossing(u, e);
            if verts.last().is_some_and(|v: &Vertex| v.pos == p) {
                continue;
            }
            let normal = vertex_normal(u, e, p).unwrap_or([f64::NAN, f64::NAN]);
            verts.push(Vertex { pos: p, normal });
        }
        if closed && verts.len() > 1 && verts[0].pos != verts[verts.len() - 1].pos {
            verts.push(verts[0]);
        }
        if verts.len() < 2 {
            continue;
        }
        fill_missing_normals(&mut verts);
        let closed = closed && verts.len() > 3;
        polylines.push(Polyline { vertices: verts, closed });
    }
    Ok(FreeBoundary { polylines })
}

/// Vertices with a vanishing interpolated gradient get the left normal of the
/// adjacent segments.
fn fill_missing_normals(verts: &mut [Vertex]) {
    let n = verts.len();
    for k in 0..n {
        if verts[k].normal[0].is_finite() {
            continue;
        }
        let a = verts[k.saturating_sub(1)].pos;
        let b = verts[(k + 1).min(n - 1)].pos;
        verts[k].normal = vec2::unit(vec2::perp(vec2::sub(b, a))).unwrap_or([0.0, 1.0]);
    }
}

/// Exact distance from `p` to the nearest boundary segment.
pub fn fb_distance(fb: &FreeBoundary, p: Point) -> Result<f64> {
    if fb.is_empty() {
        return Err(Error::domain("free boundary is empty"));
    }
    Ok(fb
        .segments()
        .map(|(a, b)| vec2::point_segment_dist(p, a, b))
        .fold(f64::INFINITY, f64::min))
}

/// Uniform bucket index over the boundary segments for repeated distance
/// queries.
#[derive(Clone, Debug)]
pub struct BoundaryIndex {
    segments: Vec<(Point, Point)>,
    lo: Point,
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<u32>>,
}

impl BoundaryIndex {
    pub fn new(fb: &FreeBoundary, cell: f64) -> Result<Self> {
        if fb.is_empty() {
            return Err(Error::domain("free boundary is empty"));
        }
        if !(cell > 0.0) {
            return Err(Error::param("bucket size must be positive"));
        }
        let segments: Vec<(Point, Point)> = fb.segments().collect();
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (a, b) in &segments {
            for p in [a, b] {
                for d in 0..2 {
                    lo[d] = lo[d].min(p[d]);
                    hi[d] = hi[d].max(p[d]);
                }
            }
        }
        let dims = [0, 1].map(|d| (((hi[d] - lo[d]) / cell).floor() as usize + 1).min(4096));
        let cell = cell.max((hi[0] - lo[0]).max(hi[1] - lo[1]) / 4095.0);
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        let bucket_of = |x: f64, d: usize| (((x - lo[d]) / cell).floor().max(0.0) as usize).min(dims[d] - 1);
        for (s, (a, b)) in segments.iter().enumerate() {
            let (i0, i1) = (bucket_of(a[0].min(b[0]), 0), bucket_of(a[0].max(b[0]), 0));
            let (j0, j1) = (bucket_of(a[1].min(b[1]), 1), bucket_of(a[1].max(b[1]), 1));
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[i + dims[0] * j].push(s as u32);
                }
            }
        }
        Ok(Self { segments, lo, cell, dims, buckets })
    }

    /// Index with buckets of a few grid spacings.
    pub fn for_grid(fb: &FreeBoundary, grid: &Grid) -> Result<Self> {
        Self::new(fb, 4.0 * grid.spacing())
    }

    pub fn distance(&self, p: Point) -> f64 {
        self.nearest(p).0
    }

    /// Distance to the boundary and the nearest boundary point.
    pub fn nearest(&self, p: Point) -> (f64, Point) {
        let clamp = |d: usize| {
            (((p[d] - self.lo[d]) / self.cell).floor().max(0.0) as usize).min(self.dims[d] - 1)
        };
        let (ci, cj) = (clamp(0) as i64, clamp(1) as i64);
        let mut best = (f64::INFINITY, p);
        let max_ring = self.dims[0].max(self.dims[1]) as i64;
        for ring in 0..=max_ring {
            if best.0 <= (ring as f64 - 1.0) * self.cell {
                break;
            }
            for j in (cj - ring)..=(cj + ring) {
                for i in (ci - ring)..=(ci + ring) {
                    if (i - ci).abs() != ring && (j - cj).abs() != ring {
                        continue;
                    }
                    if i < 0 || j < 0 || i >= self.dims[0] as i64 || j >= self.dims[1] as i64 {
                        continue;
                    }
                    for &s in &self.buckets[i as usize + self.dims[0] * j as usize] {
                        let (a, b) = self.segments[s as usize];
                        let q = closest_on_segment(p, a, b);
                        let d = vec2::dist(p, q);
                        if d < best.0 {
                            best = (d, q);
                        }
                    }
                }
            }
        }
        best
    }
}

fn closest_on_segment(p: Point, a: Point, b: Point) -> Point {
    let d = vec2::sub(b, a);
    let l2 = vec2::dot(d, d);
    if l2 == 0.0 {
        return a;
    }
    let t = (vec2::dot(vec2::sub(p, a), d) / l2).clamp(0.0, 1.0);
    vec2::add(a, vec2::scale(d, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Interior,
    Exterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corkscrew {
    pub point: Point,
    pub node: usize,
    pub clearance: f64,
}

impl Corkscrew {
    /// Achieved constant `C₁ = r / clearance`.
    pub fn c1(&self, r: f64) -> f64 {
        r / self.clearance
    }
}

/// Node of `B(x, r/2)` on the requested side farthest from the boundary.
/// `None` signals a corkscrew failure (empty side or `r < 2h`).
pub fn corkscrew(
    u: &ScalarField,
    index: &BoundaryIndex,
    x: Point,
    r: f64,
    side: Side,
) -> Result<Option<Corkscrew>> {
    require_rank2(u)?;
    let g = u.grid();
    if !g.contains_ball(&Ball::disk(x, r)?) {
        return Err(Error::domain("corkscrew ball leaves the grid"));
    }
    if r < 2.0 * g.spacing() {
        return Ok(None);
    }
    let half = 0.5 * r;
    let (i0, i1) = g.node_range(0, x[0] - half, x[0] + half);
    let (j0, j1) = g.node_range(1, x[1] - half, x[1] + half);
    let mut best: Option<Corkscrew> = None;
    for j in j0..=j1 {
        for i in i0..=i1 {
            let p = g.node2(i, j);
            if vec2::dist(p, x) > half {
                continue;
            }
            let positive = u.at2(i, j) > 0.0;
            if positive != (side == Side::Interior) {
                continue;
            }
            let d = index.distance(p);
            if best.is_none_or(|b| d > b.clearance) {
                best = Some(Corkscrew { point: p, node: g.index2(i, j), clearance: d });
            }
        }
    }
    Ok(best.filter(|b| b.clearance > 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainBall {
    pub center: Point,
    pub radius: f64,
    /// Distance from the center to the boundary.
    pub clearance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnackChain {
    pub balls: Vec<ChainBall>,
    pub connected: bool,
    /// Path clearance threshold that succeeded (or the last one tried).
    pub clearance: f64,
    pub retried: bool,
    /// Achieved constant: worst `max(diam/dist, dist/diam)` over the chain.
    pub c2: f64,
    /// `⌈log₂(|x−y| / min(δ(x), δ(y)))⌉₊ + 1`
    pub ell: u32,
}

impl HarnackChain {
    pub fn len(&self) -> usize {
        self.balls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    /// Achieved `C₃` in `N ≤ C₃ ℓ + 1`.
    pub fn c3(&self) -> f64 {
        (self.balls.len() as f64 - 1.0).max(0.0) / self.ell as f64
    }

    /// Consecutive balls overlap.
    pub fn consecutive_intersecting(&self) -> bool {
        self.balls
            .windows(2)
            .all(|w| vec2::dist(w[0].center, w[1].center) < w[0].radius + w[1].radius)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    cost: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* over 8-connected positive nodes with clearance at least `c_clear`.
fn clear_path(
    u: &ScalarField,
    delta: &mut dyn FnMut(usize) -> f64,
    start: usize,
    goal: usize,
    c_clear: f64,
) -> Option<Vec<usize>> {
    let g = u.grid();
    let (nx, ny) = (g.nx() as i64, g.ny() as i64);
    let h = g.spacing();
    let goal_p = g.node2(goal % g.nx(), goal / g.nx());
    let heuristic = |k: usize| vec2::dist(g.node2(k % g.nx(), k / g.nx()), goal_p);
    let mut cost = vec![f64::INFINITY; g.len()];
    let mut prev = vec![usize::MAX; g.len()];
    let mut heap = BinaryHeap::new();
    cost[start] = 0.0;
    heap.push(Frontier { cost: heuristic(start), node: start });
    while let Some(Frontier { cost: f, node }) = heap.pop() {
        if node == goal {
            let mut path = vec![goal];
            let mut k = goal;
            while k != start {
                k = prev[k];
                path.push(k);
            }
            path.reverse();
            return Some(path);
        }
        if f > cost[node] + heuristic(node) + 1e-12 {
            continue;
        }
        let (i, j) = ((node % g.nx()) as i64, (node / g.nx()) as i64);
        for (di, dj) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
            let (a, b) = (i + di, j + dj);
            if a < 0 || b < 0 || a >= nx || b >= ny {
                continue;
            }
            let nb = (a + nx * b) as usize;
            if u.values()[nb] <= 0.0 {
                continue;
            }
            if nb != goal && delta(nb) < c_clear {
                continue;
            }
            let step = if di != 0 && dj != 0 { h * std::f64::consts::SQRT_2 } else { h };
            let c = cost[node] + step;
            if c < cost[nb] {
                cost[nb] = c;
                prev[nb] = node;
                heap.push(Frontier { cost: c + heuristic(nb), node: nb });
            }
        }
    }
    None
}

/// Harnack chain from `x` to `y` inside `{u > 0}`.
///
/// The path avoids nodes closer than `min(δ(x), δ(y))/2` to the boundary,
/// retrying once at half that clearance. Balls `B(p, δ(p)/2)` are placed
/// along the path with arc-length spacing `δ(p)/3`.
pub fn harnack_chain(u: &ScalarField, index: &BoundaryIndex, x: Point, y: Point) -> Result<HarnackChain> {
    require_rank2(u)?;
    let g = u.grid();
    let reach = 0.25 * g.extent(0).hypot(g.extent(1));
    if vec2::dist(x, y) > reach {
        return Err(Error::Precondition(format!("points are farther apart than {reach}")));
    }
    if u.eval2(x)? <= 0.0 || u.eval2(y)? <= 0.0 {
        return Err(Error::Precondition("chain endpoints must lie in the positivity set".into()));
    }
    let (dx, dy) = (index.distance(x), index.distance(y));
    let dmin = dx.min(dy);
    let ell = if dmin > 0.0 {
        (vec2::dist(x, y) / dmin).log2().ceil().max(0.0) as u32 + 1
    } else {
        1
    };
    if x == y {
        let ball = ChainBall { center: x, radius: 0.5 * dx, clearance: dx };
        return Ok(HarnackChain { balls: vec![ball], connected: true, clearance: 0.5 * dmin, retried: false, c2: 2.0, ell });
    }
    let snap = |p: Point| {
        let (i, j) = g.nearest_node2(p);
        g.index2(i, j)
    };
    let (start, goal) = (snap(x), snap(y));
    let mut cache = vec![f64::NAN; g.len()];
    let mut delta = |k: usize| {
        if cache[k].is_nan() {
            cache[k] = index.distance(g.node2(k % g.nx(), k / g.nx()));
        }
        cache[k]
    };
    let mut c_clear = 0.5 * dmin;
    let mut retried = false;
    let mut path = clear_path(u, &mut delta, start, goal, c_clear);
    if path.is_none() {
        retried = true;
        c_clear *= 0.5;
        path = clear_path(u, &mut delta, start, goal, c_clear);
    }
    let Some(path) = path else {
        return Ok(HarnackChain { balls: Vec::new(), connected: false, clearance: c_clear, retried, c2: f64::INFINITY, ell });
    };

    let mut pts = vec![x];
    pts.extend(path.iter().map(|&k| g.node2(k % g.nx(), k / g.nx())));
    pts.push(y);
    pts.dedup();
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + vec2::dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    let at = |s: f64| -> Point {
        let k = cum.partition_point(|&c| c <= s).clamp(1, pts.len() - 1);
        let seg = cum[k] - cum[k - 1];
        let t = if seg > 0.0 { ((s - cum[k - 1]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        vec2::add(pts[k - 1], vec2::scale(vec2::sub(pts[k], pts[k - 1]), t))
    };
    let floor = 0.25 * g.spacing();
    let mut balls = Vec::new();
    let mut s = 0.0;
    let mut c = x;
    loop {
        let d = index.distance(c);
        balls.push(ChainBall { center: c, radius: 0.5 * d, clearance: d });
        if s >= total {
            break;
        }
        let step = (d / 3.0).max(floor);
        if s + step >= total {
            s = total;
            c = y;
        } else {
            s += step;
            c = at(s);
        }
    }
    let c2 = balls
        .iter()
        .map(|b| {
            let diam = 2.0 * b.radius;
            let dist = b.clearance - b.radius;
            if dist > 0.0 && diam > 0.0 {
                (diam / dist).max(dist / diam)
            } else {
                f64::INFINITY
            }
        })
        .fold(1.0, f64::max);
    Ok(HarnackChain { balls, connected: true, clearance: c_clear, retried, c2, ell })
}

/// Length of the part of segment `ab` inside the closed disk.
fn clipped_length(a: Point, b: Point, c: Point, r: f64) -> f64 {
    match clip_segment(a, b, c, r) {
        Some((t0, t1)) => (t1 - t0) * vec2::dist(a, b),
        None => 0.0,
    }
}

/// Parameter interval of `a + t(b − a)`, `t ∈ [0, 1]`, inside the disk.
fn clip_segment(a: Point, b: Point, c: Point, r: f64) -> Option<(f64, f64)> {
    let d = vec2::sub(b, a);
    let f = vec2::sub(a, c);
    let qa = vec2::dot(d, d);
    if qa == 0.0 {
        return (vec2::dot(f, f) <= r * r).then_some((0.0, 0.0));
    }
    let qb = 2.0 * vec2::dot(f, d);
    let qc = vec2::dot(f, f) - r * r;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = ((-qb - sq) / (2.0 * qa)).max(0.0);
    let t1 = ((-qb + sq) / (2.0 * qa)).min(1.0);
    (t0 < t1).then_some((t0, t1))
}

fn check_ball(grid: &Grid, x: Point, r: f64) -> Result<()> {
    if !grid.contains_ball(&Ball::disk(x, r)?) {
        return Err(Error::domain("ball leaves the grid"));
    }
    Ok(())
}

/// Boundary length inside `B(x, r)` divided by `2r`.
pub fn ahlfors_ratio(fb: &FreeBoundary, grid: &Grid, x: Point, r: f64) -> Result<f64> {
    check_ball(grid, x, r)?;
    if r < 4.0 * grid.spacing() {
        return Err(Error::Resolution(format!("radius {r} is below 4h")));
    }
    let len: f64 = fb.segments().map(|(a, b)| clipped_length(a, b, x, r)).sum();
    Ok(len / (2.0 * r))
}

/// Two-sided Hausdorff distance between `Γ ∩ B(x₀, r)` and the diameter of
/// the ball orthogonal to `e`, normalized by `r`.
pub fn hausdorff_flatness(fb: &FreeBoundary, grid: &Grid, x0: Point, r: f64, e: Point) -> Result<f64> {
    check_ball(grid, x0, r)?;
    let e = vec2::unit(e).ok_or_else(|| Error::param("direction must be nonzero"))?;
    let step = 0.5 * grid.spacing();
    let pieces: Vec<(Point, Point)> = fb
        .segments()
        .filter_map(|(a, b)| {
            clip_segment(a, b, x0, r).map(|(t0, t1)| {
                let d = vec2::sub(b, a);
                (vec2::add(a, vec2::scale(d, t0)), vec2::add(a, vec2::scale(d, t1)))
            })
        })
        .collect();
    if pieces.is_empty() {
        return Err(Error::domain("boundary does not meet the ball"));
    }
    let t = vec2::perp(e);
    let (c0, c1) = (vec2::add(x0, vec2::scale(t, -r)), vec2::add(x0, vec2::scale(t, r)));
    let mut gamma_to_chord: f64 = 0.0;
    for &(a, b) in &pieces {
        let n = (vec2::dist(a, b) / step).ceil().max(1.0) as usize;
        for k in 0..=n {
            let p = vec2::add(a, vec2::scale(vec2::sub(b, a), k as f64 / n as f64));
            gamma_to_chord = gamma_to_chord.max(vec2::point_segment_dist(p, c0, c1));
        }
    }
    let n = (2.0 * r / step).ceil() as usize;
    let mut chord_to_gamma: f64 = 0.0;
    for k in 0..=n {
        let p = vec2::add(c0, vec2::scale(vec2::sub(c1, c0), k as f64 / n as f64));
        let d = pieces
            .iter()
            .map(|&(a, b)| vec2::point_segment_dist(p, a, b))
            .fold(f64::INFINITY, f64::min);
        chord_to_gamma = chord_to_gamma.max(d);
    }
    Ok(gamma_to_chord.max(chord_to_gamma) / r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmostMinReport {
    pub x: Point,
    pub r: f64,
    pub j_u: f64,
    pub j_v: f64,
    /// `J(u)/J(v) − 1`; absent for degenerate balls with `J(v) = 0`.
    pub defect: Option<f64>,
    pub allowance: f64,
    pub pass: bool,
    pub degenerate: bool,
}

/// Compares `u` with its harmonic replacement in `B(x, r)`.
pub fn verify_almost_min(
    u: &ScalarField,
    w: &WeightField,
    amp: &AlmostMinParams,
    x: Point,
    r: f64,
    tau_disc: f64,
) -> Result<AlmostMinReport> {
    require_rank2(u)?;
    let ball = Ball::disk(x, r)?;
    if !u.grid().contains_ball(&ball) {
        return Err(Error::domain("ball leaves the grid"));
    }
    let v = harmonic_replace(u, w, &ball)?;
    let region = Region::Ball(ball);
    let j_u = energy(u, w, &region, Indicator::Sharp)?;
    let j_v = energy(&v, w, &region, Indicator::Sharp)?;
    let allowance = amp.allowance(r) + tau_disc;
    if j_v == 0.0 {
        return Ok(AlmostMinReport { x, r, j_u, j_v, defect: None, allowance, pass: j_u == 0.0, degenerate: true });
    }
    let defect = j_u / j_v - 1.0;
    Ok(AlmostMinReport { x, r, j_u, j_v, defect: Some(defect), allowance, pass: defect <= allowance, degenerate: false })
}

/// Boundary point selected for audits, with its interpolated unit normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditPoint {
    pub pos: Point,
    pub normal: Point,
}

/// `n` points equispaced by arc length (at the midpoints of `n` equal arcs)
/// along the part of the boundary inside the rectangle `[lo, hi]`.
pub fn audit_points(fb: &FreeBoundary, lo: Point, hi: Point, n: usize) -> Vec<AuditPoint> {
    let mut pieces: Vec<(Vertex, Vertex)> = Vec::new();
    for line in &fb.polylines {
        for w in line.vertices.windows(2) {
            if let Some((t0, t1)) = clip_to_rect(w[0].pos, w[1].pos, lo, hi) {
                let lerp = |t: f64| Vertex {
                    pos: vec2::add(w[0].pos, vec2::scale(vec2::sub(w[1].pos, w[0].pos), t)),
                    normal: vec2::unit(vec2::add(
                        vec2::scale(w[0].normal, 1.0 - t),
                        vec2::scale(w[1].normal, t),
                    ))
                    .unwrap_or(w[0].normal),
                };
                if t1 > t0 {
                    pieces.push((lerp(t0), lerp(t1)));
                }
            }
        }
    }
    let lengths: Vec<f64> = pieces.iter().map(|(a, b)| vec2::dist(a.pos, b.pos)).collect();
    let total: f64 = lengths.iter().sum();
    if n == 0 || total == 0.0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut k = 0;
    for (piece, &len) in pieces.iter().zip(&lengths) {
        while k < n {
            let target = (k as f64 + 0.5) * total / n as f64;
            if target > acc + len {
                break;
            }
            let t = if len > 0.0 { (target - acc) / len } else { 0.0 };
            let (a, b) = piece;
            out.push(AuditPoint {
                pos: vec2::add(a.pos, vec2::scale(vec2::sub(b.pos, a.pos), t)),
                normal: vec2::unit(vec2::add(vec2::scale(a.normal, 1.0 - t), vec2::scale(b.normal, t)))
                    .unwrap_or(a.normal),
            });
            k += 1;
        }
        acc += len;
    }
    out
}

/// Liang–Barsky clipping of a segment to an axis-aligned rectangle.
fn clip_to_rect(a: Point, b: Point, lo: Point, hi: Point) -> Option<(f64, f64)> {
    let d = vec2::sub(b, a);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        for (p, q) in [(-d[axis], a[axis] - lo[axis]), (d[axis], hi[axis] - a[axis])] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let t = q / p;
                if p < 0.0 {
                    t0 = t0.max(t);
                } else {
                    t1 = t1.min(t);
                }
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// One corkscrew measurement of an NTA audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorkscrewRow {
    pub x: Point,
    pub r: f64,
    pub side: Side,
    pub found: Option<Corkscrew>,
}

/// One Harnack-chain measurement of an NTA audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub x: Point,
    pub y: Point,
    pub r: f64,
    pub n: usize,
    pub ell: u32,
    pub c2: f64,
    pub c3: f64,
    pub connected: bool,
    pub retried: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NtaReport {
    pub corkscrews: Vec<CorkscrewRow>,
    pub chains: Vec<ChainRow>,
}

impl NtaReport {
    /// Worst achieved `C₁` over all corkscrews; infinite if any failed.
    pub fn c1(&self) -> f64 {
        self.corkscrews
            .iter()
            .map(|c| c.found.map_or(f64::INFINITY, |f| f.c1(c.r)))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_plane(n: usize) -> ScalarField {
        ScalarField::from_fn2(Grid::square(-1.0, 1.0, n).unwrap(), |p| p[1].max(0.0)).unwrap()
    }

    fn circle_field(n: usize) -> ScalarField {
        ScalarField::from_fn2(Grid::square(-1.0, 1.0, n).unwrap(), |p| (vec2::norm(p) - 0.5).max(0.0)).unwrap()
    }

    #[test]
    fn line_extraction() {
        let u = half_plane(65);
        let h = u.grid().spacing();
        let fb = extract_boundary(&u).unwrap();
        assert_eq!(fb.polylines.len(), 1);
        assert!((fb.length() - 2.0).abs() < 1e-9);
        for v in fb.vertices() {
            assert!(v.pos[1].abs() <= h);
            assert!(vec2::dot(v.normal, [0.0, 1.0]) >= 1f64.to_radians().cos());
        }
        let line = &fb.polylines[0].vertices;
        assert!(line[0].pos[0] < line[line.len() - 1].pos[0]);
    }

    #[test]
    fn circle_extraction() {
        let u = circle_field(201);
        let h = u.grid().spacing();
        let fb = extract_boundary(&u).unwrap();
        assert_eq!(fb.polylines.len(), 1);
        assert!(fb.polylines[0].closed);
        assert!((fb.length() / PI_F - 1.0).abs() < 0.02, "{}", fb.length());
        for v in fb.vertices() {
            assert!((vec2::norm(v.pos) - 0.5).abs() <= h);
            // the positive side is outside the disk
            assert!(vec2::dot(v.normal, v.pos) > 0.0);
        }
    }

    const PI_F: f64 = std::f64::consts::PI;

    #[test]
    fn positive_everywhere_is_empty() {
        let u = ScalarField::constant(Grid::square(0.0, 1.0, 9).unwrap(), 1.0).unwrap();
        let fb = extract_boundary(&u).unwrap();
        assert!(fb.is_empty());
        assert!(fb_distance(&fb, [0.0, 0.0]).is_err());
    }

    #[test]
    fn saddle_resolution_by_center() {
        let g = Grid::square(0.0, 1.0, 2).unwrap();
        let up = ScalarField::new(g.clone(), vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let fb = extract_boundary(&up).unwrap();
        assert_eq!(fb.polylines.len(), 2);
        let lifted = ScalarField::new(g, vec![1.0, -0.5, -0.5, 1.0]).unwrap();
        let fb2 = extract_boundary(&lifted).unwrap();
        // center positive: the segments cut off the negative corners
        for p in &fb2.polylines {
            let mid = vec2::scale(vec2::add(p.vertices[0].pos, p.vertices[1].pos), 0.5);
            let near_neg = vec2::dist(mid, [1.0, 0.0]).min(vec2::dist(mid, [0.0, 1.0]));
            assert!(near_neg < 0.5);
        }
    }

    #[test]
    fn distances() {
        let u = half_plane(65);
        let fb = extract_boundary(&u).unwrap();
        let h = u.grid().spacing();
        assert!((fb_distance(&fb, [0.3, 0.4]).unwrap() - 0.4).abs() <= h);
        let v = fb.polylines[0].vertices[3].pos;
        assert_eq!(fb_distance(&fb, v).unwrap(), 0.0);
        let c = extract_boundary(&circle_field(129)).unwrap();
        assert!((fb_distance(&c, [0.0, 0.0]).unwrap() - 0.5).abs() <= 2.0 / 128.0);
        let idx = BoundaryIndex::new(&c, 0.05).unwrap();
        for p in [[0.0, 0.0], [0.9, -0.9], [0.51, 0.0], [3.0, 2.0], [-0.2, 0.33]] {
            assert_eq!(idx.distance(p), fb_distance(&c, p).unwrap());
        }
    }

    #[test]
    fn corkscrews_half_plane() {
        let u = half_plane(257);
        let fb = extract_boundary(&u).unwrap();
        let idx = BoundaryIndex::for_grid(&fb, u.grid()).unwrap();
        let inner = corkscrew(&u, &idx, [0.0, 0.0], 0.4, Side::Interior).unwrap().unwrap();
        assert!(inner.clearance >= 0.19);
        let outer = corkscrew(&u, &idx, [0.0, 0.0], 0.4, Side::Exterior).unwrap().unwrap();
        assert!((outer.clearance - inner.clearance).abs() <= u.grid().spacing());
        assert!(corkscrew(&u, &idx, [0.0, 0.0], 0.01, Side::Interior).unwrap().is_none());
        assert!(corkscrew(&u, &idx, [0.0, 0.0], 1.5, Side::Interior).is_err());
    }

    #[test]
    fn chains_half_plane() {
        let u = half_plane(257);
        let fb = extract_boundary(&u).unwrap();
        let idx = BoundaryIndex::for_grid(&fb, u.grid()).unwrap();
        let c = harnack_chain(&u, &idx, [-0.3, 0.2], [0.3, 0.2]).unwrap();
        assert!(c.connected && c.len() <= 12, "{}", c.len());
        assert!(c.c2 <= 4.0);
        assert!(c.consecutive_intersecting());
        assert_eq!(harnack_chain(&u, &idx, [0.1, 0.3], [0.1, 0.3]).unwrap().len(), 1);
        let near = harnack_chain(&u, &idx, [0.0, 0.4], [0.2, 0.4]).unwrap();
        assert!(near.len() <= 3, "{}", near.len());
        assert!(harnack_chain(&u, &idx, [0.0, -0.3], [0.0, 0.3]).is_err());
    }

    #[test]
    fn ahlfors_line_and_circle() {
        let u = half_plane(129);
        let g = u.grid();
        let fb = extract_boundary(&u).unwrap();
        assert!((ahlfors_ratio(&fb, g, [0.1, 0.0], 0.3).unwrap() - 1.0).abs() < 0.02);
        assert_eq!(ahlfors_ratio(&fb, g, [0.0, -0.6], 0.3).unwrap(), 0.0);
        assert!(matches!(ahlfors_ratio(&fb, g, [0.0, 0.0], 0.02), Err(Error::Resolution(_))));
        let c = circle_field(401);
        let fbc = extract_boundary(&c).unwrap();
        let ratio = ahlfors_ratio(&fbc, c.grid(), [0.5, 0.0], 0.1).unwrap();
        assert!((ratio - 1.0).abs() < 0.03, "{ratio}");
    }

    #[test]
    fn hausdorff_cases() {
        let u = half_plane(257);
        let g = u.grid();
        let h = g.spacing();
        let fb = extract_boundary(&u).unwrap();
        assert!(hausdorff_flatness(&fb, g, [0.0, 0.0], 0.4, [0.0, 1.0]).unwrap() <= h / 0.4);
        let phi: f64 = 0.2;
        let tilted = hausdorff_flatness(&fb, g, [0.0, 0.0], 0.4, [-phi.sin(), phi.cos()]).unwrap();
        assert!((tilted / phi.sin() - 1.0).abs() < 0.1, "{tilted}");
        assert!(hausdorff_flatness(&fb, g, [0.0, -0.6], 0.2, [0.0, 1.0]).is_err());
        let c = circle_field(801);
        let fbc = extract_boundary(&c).unwrap();
        let r = 0.1;
        let d = hausdorff_flatness(&fbc, c.grid(), [0.5, 0.0], r, [1.0, 0.0]).unwrap();
        assert!((d / (r / (2.0 * 0.5)) - 1.0).abs() < 0.2, "{d}");
    }

    #[test]
    fn half_plane_is_its_own_replacement() {
        let u = half_plane(129);
        let w = WeightField::constant(u.grid(), 1.0).unwrap();
        let amp = AlmostMinParams::exact(1.0);
        let rep = verify_almost_min(&u, &w, &amp, [0.0, 0.0], 0.3, 5e-3).unwrap();
        assert!(rep.pass && rep.defect.unwrap().abs() <= 5e-3);
        let zero = u.map(|_| 0.0).unwrap();
        let rep = verify_almost_min(&zero, &w, &amp, [0.0, 0.0], 0.3, 5e-3).unwrap();
        assert!(rep.degenerate);
    }

    #[test]
    fn audit_points_spread() {
        let u = half_plane(129);
        let fb = extract_boundary(&u).unwrap();
        let pts = audit_points(&fb, [-0.8, -0.8], [0.8, 0.8], 16);
        assert_eq!(pts.len(), 16);
        assert!((pts[0].pos[0] + 0.75).abs() < 1e-9);
        assert!((pts[15].pos[0] - 0.75).abs() < 1e-9);
        for w in pts.windows(2) {
            assert!((w[1].pos[0] - w[0].pos[0] - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn normals_follow_the_circle() {
        let u = circle_field(201);
        let fb = extract_boundary(&u).unwrap();
        for v in fb.vertices() {
            let radial = vec2::unit(v.pos).unwrap();
            assert!(vec2::dot(v.normal, radial) >= 0.5f64.to_radians().cos(), "{:?} at {:?}", v.normal, v.pos);
        }
    }

    #[test]
    fn corkscrew_clearance_scales_with_radius() {
        let u = half_plane(257);
        let h = u.grid().spacing();
        let fb = extract_boundary(&u).unwrap();
        let idx = BoundaryIndex::for_grid(&fb, u.grid()).unwrap();
        let mut r = 8.0 * h;
        let mut ratios = Vec::new();
        while r <= 0.5 {
            let c = corkscrew(&u, &idx, [0.1, 0.0], r, Side::Interior).unwrap().unwrap();
            ratios.push((r, c.clearance / r));
            r *= 2.0;
        }
        let (_, top) = ratios[ratios.len() - 1];
        for (r, q) in ratios {
            assert!((q - top).abs() <= 2.0 * h / r, "r = {r}: {q} vs {top}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn blob() -> ScalarField {
            let g = Grid::square(-1.0, 1.0, 129).unwrap();
            ScalarField::from_fn2(g, |p| (0.6 + 0.15 * (3.0 * p[1].atan2(p[0])).cos() - vec2::norm(p)).max(0.0)).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn chains_connect_clear_points(a in [-0.6..0.6f64, -0.6..0.6f64], b in [-0.6..0.6f64, -0.6..0.6f64]) {
                let u = blob();
                let h = u.grid().spacing();
                let fb = extract_boundary(&u).unwrap();
                let idx = BoundaryIndex::for_grid(&fb, u.grid()).unwrap();
                prop_assume!(u.eval2(a).unwrap() > 0.0 && u.eval2(b).unwrap() > 0.0);
                prop_assume!(idx.distance(a) > 4.0 * h && idx.distance(b) > 4.0 * h);
                prop_assume!(vec2::dist(a, b) <= 0.25 * 8f64.sqrt());
                let c = harnack_chain(&u, &idx, a, b).unwrap();
                prop_assert!(c.connected);
                prop_assert!(c.consecutive_intersecting());
                prop_assert!(c.len() as f64 <= 40.0 * c.ell as f64 + 1.0, "{} balls, l = {}", c.len(), c.ell);
            }
        }
    }
}
