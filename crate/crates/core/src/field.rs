//! Uniform-grid scalar fields: multilinear interpolation, finite-difference
//! gradients and quadrature over balls and circles.
//!
//! Samples are stored with the first axis varying fastest, so a rank-2 field
//! with `dims = [nx, ny]` is a row-major raster of `ny` rows of `nx` values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the plane.
pub type Point = [f64; 2];

/// Subsamples per axis used on cells cut by a ball's rim.
const RIM_SUBSAMPLES: usize = 4;

/// Relative slack (in units of the spacing) for points on the grid boundary.
const EDGE_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    origin: Vec<f64>,
    spacing: f64,
    dims: Vec<usize>,
}

impl Grid {
    pub fn new(origin: Vec<f64>, spacing: f64, dims: Vec<usize>) -> Result<Self> {
        let rank = dims.len();
        if !(2..=3).contains(&rank) {
            return Err(Error::param(format!("grid rank must be 2 or 3, got {rank}")));
        }
        if origin.len() != rank {
            return Err(Error::param(format!(
                "origin has {} coordinates for a rank-{rank} grid",
                origin.len()
            )));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::param(format!("grid spacing must be positive, got {spacing}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::param("grid origin must be finite"));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::param(format!("every axis needs at least 2 samples, got {dims:?}")));
        }
        let total = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::param("sample count overflows the address space"))?;
        if total > isize::MAX as usize / std::mem::size_of::<f64>() {
            return Err(Error::param("sample count overflows the address space"));
        }
        Ok(Self { origin, spacing, dims })
    }

    /// Square rank-2 grid covering `[lo, hi]²` with `n` samples per axis.
    pub fn square(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(hi > lo) {
            return Err(Error::param(format!("invalid square grid [{lo}, {hi}] with {n} samples")));
        }
        Self::new(vec![lo, lo], (hi - lo) / (n - 1) as f64, vec![n, n])
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Physical length of `axis`.
    pub fn extent(&self, axis: usize) -> f64 {
        (self.dims[axis] - 1) as f64 * self.spacing
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.origin[axis] + self.extent(axis)
    }

    pub fn min_extent(&self) -> f64 {
        (0..self.rank()).map(|a| self.extent(a)).fold(f64::INFINITY, f64::min)
    }

    pub fn nx(&self) -> usize {
        self.dims[0]
    }

    pub fn ny(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn index2(&self, i: usize, j: usize) -> usize {
        i + self.dims[0] * j
    }

    pub fn index(&self, ijk: &[usize]) -> usize {
        let mut idx = 0;
        for axis in (0..self.rank()).rev() {
            idx = idx * self.dims[axis] + ijk[axis];
        }
        idx
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.rank());
        for &d in &self.dims {
            out.push(idx % d);
            idx /= d;
        }
        out
    }

    #[inline]
    pub fn node2(&self, i: usize, j: usize) -> Point {
        [
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
        ]
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .zip(&self.origin)
            .map(|(&i, &o)| o + i as f64 * self.spacing)
            .collect()
    }

    pub fn is_boundary_node(&self, idx: usize) -> bool {
        self.multi_index(idx)
            .iter()
            .zip(&self.dims)
            .any(|(&i, &d)| i == 0 || i + 1 == d)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        let slack = EDGE_SLACK * self.spacing;
        p.len() == self.rank()
            && p.iter().enumerate().all(|(a, &x)| {
                x.is_finite() && x >= self.origin[a] - slack && x <= self.upper(a) + slack
            })
    }

    /// True when the closed ball lies inside the grid rectangle.
    pub fn contains_ball(&self, ball: &Ball) -> bool {
        let slack = EDGE_SLACK * self.spacing;
        ball.center.len() == self.rank()
            && (0..self.rank()).all(|a| {
                ball.center[a] - ball.radius >= self.origin[a] - slack
                    && ball.center[a] + ball.radius <= self.upper(a) + slack
            })
    }

    /// Nearest node (rank 2), clamped to the grid.
    pub fn nearest_node2(&self, p: Point) -> (usize, usize) {
        let f = |a: usize| {
            let s = ((p[a] - self.origin[a]) / self.spacing).round();
            s.clamp(0.0, (self.dims[a] - 1) as f64) as usize
        };
        (f(0), f(1))
    }

    /// Inclusive node index range along `axis` covering `[lo, hi]`.
    pub fn node_range(&self, axis: usize, lo: f64, hi: f64) -> (usize, usize) {
        let h = self.spacing;
        let max = (self.dims[axis] - 1) as f64;
        let a = ((lo - self.origin[axis]) / h).ceil().clamp(0.0, max) as usize;
        let b = ((hi - self.origin[axis]) / h).floor().clamp(0.0, max) as usize;
        (a, b)
    }

    /// Cell index and fractional offset of coordinate `x` on `axis`.
    #[inline]
    fn locate(&self, axis: usize, x: f64) -> (usize, f64) {
        let s = (x - self.origin[axis]) / self.spacing;
        let last = self.dims[axis] - 2;
        let i = (s.floor().max(0.0) as usize).min(last);
        (i, (s - i as f64).clamp(0.0, 1.0))
    }
}

/// Closed ball `B(center, radius)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: impl Into<Vec<f64>>, radius: f64) -> Result<Self> {
        let center = center.into();
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::param(format!("ball radius must be positive, got {radius}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::param("ball center must be finite"));
        }
        Ok(Self { center, radius })
    }

    pub fn disk(center: Point, radius: f64) -> Result<Self> {
        Self::new(center.to_vec(), radius)
    }

    pub fn center2(&self) -> Point {
        [self.center[0], self.center[1]]
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        dist_sq(&self.center, p) <= self.radius * self.radius
    }
}

#[inline]
pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Real-valued samples on a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::param(format!(
                "field has {} values for a grid of {} samples",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite sample at index {k}")));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|k| f(&grid.node(k))).collect();
        Self::new(grid, values)
    }

    /// Rank-2 fast path of [`ScalarField::from_fn`].
    pub fn from_fn2(grid: Grid, f: impl Fn(Point) -> f64) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::param("from_fn2 needs a rank-2 grid"));
        }
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                values.push(f(grid.node2(i, j)));
            }
        }
        Self::new(grid, values)
    }

    pub fn constant(grid: Grid, c: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![c; n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index2(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    fn check_point(&self, p: &[f64]) -> Result<()> {
        if self.grid.contains(p) {
            Ok(())
        } else {
            Err(Error::domain(format!("point {p:?} lies outside the grid")))
        }
    }

    /// Multilinear interpolation of the surrounding `2^n` samples.
    pub fn eval(&self, p: &[f64]) -> Result<f64> {
        self.check_point(p)?;
        Ok(self.eval_unchecked(p))
    }

    pub(crate) fn eval_unchecked(&self, p: &[f64]) -> f64 {
        if self.grid.rank() == 2 {
            return self.eval2_unchecked([p[0], p[1]]);
        }
        let (base, frac) = self.cell_of(p);
        let mut acc = 0.0;
        for corner in 0..(1usize << 3) {
            let mut w = 1.0;
            let mut idx = base;
            let mut stride = 1;
            for (a, f) in frac.iter().enumerate() {
                let bit = corner >> a & 1;
                w *= if bit == 1 { *f } else { 1.0 - f };
                idx += bit * stride;
                stride *= self.grid.dims[a];
            }
            acc += w * self.values[idx];
        }
        acc
    }

    pub fn eval2(&self, p: Point) -> Result<f64> {
        self.check_point(&p)?;
        Ok(self.eval2_unchecked(p))
    }

    #[inline]
    pub(crate) fn eval2_unchecked(&self, p: Point) -> f64 {
        let (i, fx) = self.grid.locate(0, p[0]);
        let (j, fy) = self.grid.locate(1, p[1]);
        let nx = self.grid.dims[0];
        let k = i + nx * j;
        let v = &self.values;
        (1.0 - fy) * ((1.0 - fx) * v[k] + fx * v[k + 1])
            + fy * ((1.0 - fx) * v[k + nx] + fx * v[k + nx + 1])
    }

    fn cell_of(&self, p: &[f64]) -> (usize, Vec<f64>) {
        let mut idx = Vec::with_capacity(p.len());
        let mut frac = Vec::with_capacity(p.len());
        for (a, &x) in p.iter().enumerate() {
            let (i, f) = self.grid.locate(a, x);
            idx.push(i);
            frac.push(f);
        }
        (self.grid.index(&idx), frac)
    }

    /// Gradient of the multilinear interpolant at `p`; on shared cell faces
    /// the cell on the upper side is used.
    pub fn grad_at(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_point(p)?;
        if self.grid.rank() == 2 {
            return Ok(self.grad2_unchecked([p[0], p[1]]).to_vec());
        }
        let (base, frac) = self.cell_of(p);
        let n = frac.len();
        let mut g = vec![0.0; n];
        for corner in 0..(1usize << n) {
            let mut idx = base;
            let mut stride = 1;
            for a in 0..n {
                idx += (corner >> a & 1) * stride;
                stride *= self.grid.dims[a];
            }
            for (b, gb) in g.iter_mut().enumerate() {
                let mut w = 1.0;
                for (a, f) in frac.iter().enumerate() {
                    let bit = corner >> a & 1;
                    w *= match (a == b, bit) {
                        (true, 1) => 1.0,
                        (true, _) => -1.0,
                        (false, 1) => *f,
                        (false, _) => 1.0 - f,
                    };
                }
                *gb += w * self.values[idx];
            }
        }
        let h = self.grid.spacing;
        Ok(g.into_iter().map(|x| x / h).collect())
    }

    pub fn grad2(&self, p: Point) -> Result<Point> {
        self.check_point(&p)?;
        Ok(self.grad2_unchecked(p))
    }

    #[inline]
    pub(crate) fn grad2_unchecked(&self, p: Point) -> Point {
        let (i, fx) = self.grid.locate(0, p[0]);
        let (j, fy) = self.grid.locate(1, p[1]);
        let nx = self.grid.dims[0];
        let k = i + nx * j;
        let v = &self.values;
        let h = self.grid.spacing;
        [
            ((1.0 - fy) * (v[k + 1] - v[k]) + fy * (v[k + nx + 1] - v[k + nx])) / h,
            ((1.0 - fx) * (v[k + nx] - v[k]) + fx * (v[k + nx + 1] - v[k + 1])) / h,
        ]
    }

    /// Finite-difference gradient at every node: centered in the interior,
    /// one-sided on the faces.
    pub fn gradient(&self) -> Result<VectorField> {
        let g = &self.grid;
        if g.dims.iter().any(|&d| d < 3) {
            return Err(Error::param("gradient needs at least 3 samples per axis"));
        }
        let h = g.spacing;
        let mut components = Vec::with_capacity(g.rank());
        let mut stride = 1;
        for axis in 0..g.rank() {
            let d = g.dims[axis];
            let comp: Vec<f64> = (0..g.len())
                .map(|k| {
                    let i = (k / stride) % d;
                    if i == 0 {
                        (self.values[k + stride] - self.values[k]) / h
                    } else if i + 1 == d {
                        (self.values[k] - self.values[k - stride]) / h
                    } else {
                        (self.values[k + stride] - self.values[k - stride]) / (2.0 * h)
                    }
                })
                .collect();
            components.push(comp);
            stride *= d;
        }
        Ok(VectorField { grid: g.clone(), components })
    }

    /// `∫_{∂B} f dσ` by the trapezoidal rule on `n_theta` equispaced angles.
    pub fn circle_integral(&self, ball: &Ball, n_theta: usize) -> Result<f64> {
        circle_quadrature(&self.grid, ball, n_theta, |p| self.eval2_unchecked(p))
    }

    /// `∫_B f dx` with rim-cell subsampling.
    pub fn ball_integral(&self, ball: &Ball) -> Result<f64> {
        ball_quadrature(&self.grid, ball, |p| self.eval_unchecked(p))
    }

    /// Pullback `x ↦ f(x₀ + r x) / r` sampled on `out_grid`.
    ///
    /// Sampling is bilinear, except that on planar grids a cell with an
    /// exactly-zero corner and no negative corner is sampled from the
    /// one-sided extension of [`Self::zero_extension`] and clipped at zero.
    /// Plain bilinear sampling of a clipped field is positive on every cell
    /// touching a positive node, which inflates the positive phase of the
    /// blow-up by up to one source cell.
    pub fn rescale(&self, x0: &[f64], r: f64, out_grid: &Grid) -> Result<ScalarField> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::param(format!("rescale factor must be positive, got {r}")));
        }
        if out_grid.rank() != self.grid.rank() || x0.len() != self.grid.rank() {
            return Err(Error::param("rescale rank mismatch"));
        }
        let ext = (self.grid.rank() == 2).then(|| self.zero_extension());
        let mut values = Vec::with_capacity(out_grid.len());
        let mut q = vec![0.0; x0.len()];
        for k in 0..out_grid.len() {
            let x = out_grid.node(k);
            for a in 0..q.len() {
                q[a] = x0[a] + r * x[a];
            }
            if !self.grid.contains(&q) {
                return Err(Error::domain(format!(
                    "rescaled node {x:?} pulls back to {q:?}, outside the source grid"
                )));
            }
            let v = match &ext {
                Some(ext) => self.eval2_sharp(ext, [q[0], q[1]]),
                None => self.eval_unchecked(&q),
            };
            values.push(v / r);
        }
        ScalarField::new(out_grid.clone(), values)
    }

    /// Node values with every exactly-zero node next to the positive phase
    /// replaced by the value at that node of the least-squares affine fit to
    /// the positive nodes of its 5 × 5 stencil, capped at zero. Other nodes are
    /// unchanged. The extension is exact for clipped affine fields.
    pub fn zero_extension(&self) -> Vec<f64> {
        let g = &self.grid;
        let (nx, ny) = (g.dims[0], g.dims[1]);
        let v = &self.values;
        let mut ext = v.clone();
        for j in 0..ny {
            for i in 0..nx {
                let k = i + nx * j;
                if v[k] != 0.0 {
                    continue;
                }
                // normal equations of u ≈ a + b·dx + c·dy in units of h
                let mut m = [[0.0; 3]; 3];
                let mut rhs = [0.0; 3];
                let mut n = 0;
                for dj in -2i64..=2 {
                    for di in -2i64..=2 {
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a < 0 || b < 0 || a as usize >= nx || b as usize >= ny {
                            continue;
                        }
                        let val = v[a as usize + nx * b as usize];
                        if val > 0.0 {
                            let phi = [1.0, di as f64, dj as f64];
                            for r in 0..3 {
                                for c in 0..3 {
                                    m[r][c] += phi[r] * phi[c];
                                }
                                rhs[r] += phi[r] * val;
                            }
                            n += 1;
                        }
                    }
                }
                if n >= 3 {
                    if let Some(a) = solve3(m, rhs) {
                        ext[k] = a.min(0.0);
                    }
                }
            }
        }
        ext
    }

    fn eval2_sharp(&self, ext: &[f64], p: Point) -> f64 {
        let (i, fx) = self.grid.locate(0, p[0]);
        let (j, fy) = self.grid.locate(1, p[1]);
        let nx = self.grid.dims[0];
        let k = [i + nx * j, i + 1 + nx * j, i + nx * (j + 1), i + 1 + nx * (j + 1)];
        let v = &self.values;
        let mixed = k.iter().any(|&m| v[m] == 0.0) && k.iter().all(|&m| v[m] >= 0.0);
        let src = if mixed { ext } else { v.as_slice() };
        let s = (1.0 - fy) * ((1.0 - fx) * src[k[0]] + fx * src[k[1]]) + fy * ((1.0 - fx) * src[k[2]] + fx * src[k[3]]);
        if mixed { s.max(0.0) } else { s }
    }
}

/// Node-wise vector field, one component array per axis.
#[derive(Clone, Debug)]
pub struct VectorField {
    grid: Grid,
    components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn at(&self, idx: usize) -> Vec<f64> {
        self.components.iter().map(|c| c[idx]).collect()
    }
}

/// Default angular resolution for a circle of radius `r` on spacing `h`.
pub fn default_n_theta(r: f64, h: f64) -> usize {
    ((2.0 * std::f64::consts::PI * r / h).ceil() as usize).max(64)
}

/// Trapezoidal rule for `∫_{∂B} g dσ` on a rank-2 grid.
pub fn circle_quadrature(
    grid: &Grid,
    ball: &Ball,
    n_theta: usize,
    g: impl Fn(Point) -> f64,
) -> Result<f64> {
    if grid.rank() != 2 {
        return Err(Error::param("circle quadrature is only defined on rank-2 grids"));
    }
    if n_theta < 16 {
        return Err(Error::param(format!("n_theta must be at least 16, got {n_theta}")));
    }
    if !grid.contains_ball(ball) {
        return Err(Error::domain(format!(
            "circle of radius {} at {:?} leaves the grid",
            ball.radius, ball.center
        )));
    }
    let c = ball.center2();
    let r = ball.radius;
    let dtheta = 2.0 * std::f64::consts::PI / n_theta as f64;
    let sum: f64 = (0..n_theta)
        .map(|k| {
            let (s, co) = (k as f64 * dtheta).sin_cos();
            g([c[0] + r * co, c[1] + r * s])
        })
        .sum();
    Ok(sum * dtheta * r)
}

/// Cell quadrature of `∫_B g dx`: interior cells use their center, cells cut
/// by the rim use a 4×4 (4×4×4) subsample restricted to the ball.
pub fn ball_quadrature(grid: &Grid, ball: &Ball, g: impl Fn(&[f64]) -> f64) -> Result<f64> {
    if ball.center.len() != grid.rank() {
        return Err(Error::param("ball rank does not match grid rank"));
    }
    if !grid.contains_ball(ball) {
        return Err(Error::domain(format!(
            "ball of radius {} at {:?} leaves the grid",
            ball.radius, ball.center
        )));
    }
    let rank = grid.rank();
    let h = grid.spacing;
    let r = ball.radius;
    let r2 = r * r;
    let cell_range: Vec<(usize, usize)> = (0..rank)
        .map(|a| {
            let lo = ((ball.center[a] - r - grid.origin[a]) / h).floor().max(0.0) as usize;
            let hi = (((ball.center[a] + r - grid.origin[a]) / h).ceil() as usize)
                .min(grid.dims[a] - 1);
            (lo.min(grid.dims[a] - 2), hi.max(lo + 1))
        })
        .collect();
    let vol = h.powi(rank as i32);
    let sub = RIM_SUBSAMPLES;
    let sub_vol = vol / (sub.pow(rank as u32)) as f64;

    let mut total = 0.0;
    let mut cell = vec![0usize; rank];
    for (a, c) in cell.iter_mut().enumerate() {
        *c = cell_range[a].0;
    }
    let mut lo = vec![0.0; rank];
    let mut p = vec![0.0; rank];
    'cells: loop {
        let mut near = 0.0;
        let mut far = 0.0;
        for a in 0..rank {
            lo[a] = grid.origin[a] + cell[a] as f64 * h;
            let c = ball.center[a];
            let d_near = (lo[a] - c).max(0.0).max(c - lo[a] - h);
            let d_far = (c - lo[a]).abs().max((lo[a] + h - c).abs());
            near += d_near * d_near;
            far += d_far * d_far;
        }
        if far <= r2 {
            for a in 0..rank {
                p[a] = lo[a] + 0.5 * h;
            }
            total += vol * g(&p);
        } else if near < r2 {
            let n_sub = sub.pow(rank as u32);
            for s in 0..n_sub {
                let mut rem = s;
                for a in 0..rank {
                    p[a] = lo[a] + ((rem % sub) as f64 + 0.5) * h / sub as f64;
                    rem /= sub;
                }
                if dist_sq(&p, &ball.center) < r2 {
                    total += sub_vol * g(&p);
                }
            }
        }
        for a in 0..rank {
            cell[a] += 1;
            if cell[a] < cell_range[a].1 {
                continue 'cells;
            }
            cell[a] = cell_range[a].0;
        }
        break;
    }
    Ok(total)
}

/// Small 2-vector helpers.
pub mod vec2 {
    use super::Point;

    #[inline]
    pub fn sub(a: Point, b: Point) -> Point {
        [a[0] - b[0], a[1] - b[1]]
    }

    #[inline]
    pub fn add(a: Point, b: Point) -> Point {
        [a[0] + b[0], a[1] + b[1]]
    }

    #[inline]
    pub fn scale(a: Point, s: f64) -> Point {
        [a[0] * s, a[1] * s]
    }

    #[inline]
    pub fn dot(a: Point, b: Point) -> f64 {
        a[0] * b[0] + a[1] * b[1]
    }

    #[inline]
    pub fn norm(a: Point) -> f64 {
        a[0].hypot(a[1])
    }

    #[inline]
    pub fn dist(a: Point, b: Point) -> f64 {
        norm(sub(a, b))
    }

    /// Counter-clockwise perpendicular.
    #[inline]
    pub fn perp(a: Point) -> Point {
        [-a[1], a[0]]
    }

    pub fn unit(a: Point) -> Option<Point> {
        let n = norm(a);
        (n > 0.0 && n.is_finite()).then(|| scale(a, 1.0 / n))
    }

    pub fn from_angle(theta: f64) -> Point {
        let (s, c) = theta.sin_cos();
        [c, s]
    }

    /// Distance from `p` to the segment `[a, b]`.
    pub fn point_segment_dist(p: Point, a: Point, b: Point) -> f64 {
        let ab = sub(b, a);
        let len2 = dot(ab, ab);
        if len2 == 0.0 {
            return dist(p, a);
        }
        let t = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
        dist(p, add(a, scale(ab, t)))
    }
}

/// First component of the solution of a 3 × 3 system by Cramer's rule, or
/// `None` when it is numerically singular.
fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> Option<f64> {
    let det3 = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det3(m);
    let scale = m.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
    if d.abs() <= 1e-9 * scale.powi(3) {
        return None;
    }
    let mut a = m;
    for row in 0..3 {
        a[row][0] = r[row];
    }
    Some(det3(a) / d)
}
