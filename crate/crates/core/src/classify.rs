//! Flatness, blow-up fits, density classification, normal derivatives, the
//! weak Green identity on replacements, and the flatness decay audit.
//!
//! Directions follow one convention throughout: `u` vanishes on the slab
//! `⟨x−x₀,e⟩ ≤ −σr` and dominates `q₊(x₀)(⟨x−x₀,e⟩ − σr)` beyond `+σr`, so
//! `e` points into the positive phase.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{vec2, Ball, Grid, Point, ScalarField};
use crate::geometry::{hausdorff_flatness, FreeBoundary, Vertex};
use crate::monotone::{check_on_boundary, extrapolate_w0, weiss, Ladder, W0Fit};
use crate::problem::WeightField;

pub const DEFAULT_N_DIR: usize = 360;
pub const DEFAULT_EPS_GAP: f64 = 0.15;
/// Resolution of the blow-up raster on `[−1, 1]²` (cells per side).
pub const BLOWUP_CELLS: usize = 128;

fn require_rank2(u: &ScalarField) -> Result<()> {
    if u.grid().rank() != 2 {
        return Err(Error::param("classification is implemented for rank-2 fields"));
    }
    Ok(())
}

fn require_ball(grid: &Grid, x0: Point, r: f64) -> Result<Ball> {
    let ball = Ball::disk(x0, r)?;
    if !grid.contains_ball(&ball) {
        return Err(Error::domain(format!("ball B({x0:?}, {r}) leaves the grid")));
    }
    Ok(ball)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub x0: Point,
    pub r: f64,
    pub sigma: f64,
    pub direction: Point,
    /// Hausdorff flatness of the extracted boundary in `direction`; absent
    /// when the boundary misses the ball.
    pub hausdorff_sigma: Option<f64>,
}

/// Grid nodes of `B(x₀, r)` as offsets from `x₀` with their values.
struct BallSamples {
    offsets: Vec<(Point, f64)>,
    r: f64,
    q: f64,
    u_tol: f64,
}

impl BallSamples {
    fn new(u: &ScalarField, x0: Point, r: f64, q: f64) -> Self {
        let g = u.grid();
        let (i0, i1) = g.node_range(0, x0[0] - r, x0[0] + r);
        let (j0, j1) = g.node_range(1, x0[1] - r, x0[1] + r);
        let mut offsets = Vec::new();
        for j in j0..=j1 {
            for i in i0..=i1 {
                let d = vec2::sub(g.node2(i, j), x0);
                if vec2::norm(d) <= r {
                    offsets.push((d, u.at2(i, j)));
                }
            }
        }
        Self { offsets, r, q, u_tol: 1e-9 * u.max_abs() }
    }

    /// Least `σ ∈ [0, 1]` satisfying both slab conditions in direction `e`.
    ///
    /// Each condition excludes an interval of `σ` per node, so the minimum
    /// is a maximum over nodes and needs no search.
    fn sigma(&self, e: Point) -> f64 {
        let mut need: f64 = 0.0;
        for &(d, v) in &self.offsets {
            let s = vec2::dot(d, e);
            if v > self.u_tol {
                need = need.max(-s);
            }
            if s > 0.0 {
                need = need.max(s - v.max(0.0) / self.q);
            }
        }
        (need / self.r).min(1.0)
    }
}

fn angle_dir(theta: f64) -> Point {
    vec2::from_angle(theta)
}

/// Coarse search over `n_dir` angles, a fine pass around the winner, and
/// the midpoint of the plateau of near-minimal angles.
fn best_direction(samples: &BallSamples, n_dir: usize, tol: f64) -> (Point, f64) {
    let step = 2.0 * PI / n_dir as f64;
    let mut best = (0.0, f64::INFINITY);
    for k in 0..n_dir {
        let theta = k as f64 * step;
        let s = samples.sigma(angle_dir(theta));
        if s < best.1 {
            best = (theta, s);
        }
    }
    const FINE: i32 = 50;
    let fine_step = step / FINE as f64;
    let fine: Vec<(f64, f64)> = (-FINE..=FINE)
        .map(|k| {
            let theta = best.0 + k as f64 * fine_step;
            (theta, samples.sigma(angle_dir(theta)))
        })
        .collect();
    let (arg, min) = fine
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &(_, s))| if s < acc.1 { (k, s) } else { acc });
    let mut lo = arg;
    while lo > 0 && fine[lo - 1].1 <= min + tol {
        lo -= 1;
    }
    let mut hi = arg;
    while hi + 1 < fine.len() && fine[hi + 1].1 <= min + tol {
        hi += 1;
    }
    let theta = 0.5 * (fine[lo].0 + fine[hi].0);
    let e = angle_dir(theta);
    (e, samples.sigma(e))
}

fn flatness_setup(u: &ScalarField, w: &WeightField, x0: Point, r: f64) -> Result<BallSamples> {
    require_rank2(u)?;
    require_ball(u.grid(), x0, r)?;
    if r < 2.0 * u.grid().spacing() {
        return Err(Error::Resolution(format!("radius {r} is below 2h")));
    }
    check_on_boundary(u, x0)?;
    let q = w.q_plus_at(&x0)?;
    Ok(BallSamples::new(u, x0, r, q))
}

/// Minimal flatness of `u` at `(x₀, r)` over `n_dir` directions.
pub fn flatness(
    u: &ScalarField,
    w: &WeightField,
    fb: &FreeBoundary,
    x0: Point,
    r: f64,
    n_dir: usize,
) -> Result<FlatnessReport> {
    if n_dir < 4 {
        return Err(Error::param("flatness needs at least 4 directions"));
    }
    let samples = flatness_setup(u, w, x0, r)?;
    let tol = u.grid().spacing() / (4.0 * r);
    let (direction, sigma) = best_direction(&samples, n_dir, tol);
    let hausdorff_sigma = hausdorff_flatness(fb, u.grid(), x0, r, direction).ok();
    Ok(FlatnessReport { x0, r, sigma, direction, hausdorff_sigma })
}

/// Flatness of `u` at `(x₀, r)` in the prescribed direction `e`.
pub fn flatness_in_direction(u: &ScalarField, w: &WeightField, x0: Point, r: f64, e: Point) -> Result<f64> {
    let e = vec2::unit(e).ok_or_else(|| Error::param("direction must be nonzero"))?;
    Ok(flatness_setup(u, w, x0, r)?.sigma(e))
}

#[derive(Clone, Debug)]
pub struct BlowupResult {
    pub x0: Point,
    pub r: f64,
    /// `u(x₀ + r x)/r` on `[−1, 1]²`.
    pub rescaled: ScalarField,
    pub slope: f64,
    pub normal: Point,
    /// Sup-norm distance to `slope·⟨x, normal⟩₊` on the unit ball.
    pub misfit: f64,
}

struct UnitBallNodes {
    pts: Vec<(Point, f64)>,
}

impl UnitBallNodes {
    fn misfit(&self, a: f64, nu: Point) -> f64 {
        self.pts
            .iter()
            .map(|&(x, v)| (v - a * vec2::dot(x, nu).max(0.0)).abs())
            .fold(0.0, f64::max)
    }

    /// The misfit is convex in the slope, so golden-section search applies.
    fn best_slope(&self, nu: Point, lo: f64, hi: f64) -> (f64, f64) {
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (lo, hi);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut fc, mut fd) = (self.misfit(c, nu), self.misfit(d, nu));
        for _ in 0..60 {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = self.misfit(c, nu);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = self.misfit(d, nu);
            }
        }
        if fc <= fd {
            (c, fc)
        } else {
            (d, fd)
        }
    }
}

/// Best half-plane solution `a⟨x,ν⟩₊` for the blow-up of `u` at `(x₀, r)`.
///
/// The normal is searched in 1° steps with `a = q₊(x₀)`, then `(a, ν)` are
/// refined jointly within one step of the winner.
pub fn blowup_fit(u: &ScalarField, w: &WeightField, x0: Point, r: f64) -> Result<BlowupResult> {
    require_rank2(u)?;
    require_ball(u.grid(), x0, r)?;
    check_on_boundary(u, x0)?;
    let a0 = w.q_plus_at(&x0)?;
    let out = Grid::square(-1.0, 1.0, BLOWUP_CELLS + 1)?;
    let rescaled = u.rescale(&x0, r, &out)?;
    let mut pts = Vec::new();
    for j in 0..out.ny() {
        for i in 0..out.nx() {
            let x = out.node2(i, j);
            if vec2::norm(x) <= 1.0 {
                pts.push((x, rescaled.at2(i, j)));
            }
        }
    }
    let nodes = UnitBallNodes { pts };
    let step = PI / 180.0;
    let mut best = (a0, 0.0, f64::INFINITY);
    for k in 0..360 {
        let theta = k as f64 * step;
        let m = nodes.misfit(a0, angle_dir(theta));
        if m < best.2 {
            best = (a0, theta, m);
        }
    }
    let theta0 = best.1;
    for k in -50..=50 {
        let theta = theta0 + k as f64 * step / 50.0;
        let (a, m) = nodes.best_slope(angle_dir(theta), 0.0, 2.0 * a0.max(best.0));
        if m < best.2 {
            best = (a, theta, m);
        }
    }
    Ok(BlowupResult { x0, r, rescaled, slope: best.0, normal: angle_dir(best.1), misfit: best.2 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Regular,
    Unresolved,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyParams {
    pub eps_gap: f64,
    /// Fits whose largest residual exceeds this fraction of `W₀` are unresolved.
    pub residual_fraction: f64,
    /// Use `(q₊² + q₋²) π/2` as the reference density at points where both
    /// phases meet.
    pub two_phase_aware: bool,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        Self { eps_gap: DEFAULT_EPS_GAP, residual_fraction: 0.05, two_phase_aware: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub x0: Point,
    pub w0: f64,
    pub reference: f64,
    pub gap_ratio: f64,
    pub label: Label,
    pub fit: W0Fit,
    pub two_phase: bool,
}

/// Ladder used to extrapolate the Weiss density: ratio 0.8 down to `24h`,
/// lowered if needed so that at least four radii remain.
pub fn density_ladder(r_max: f64, h: f64) -> Result<Ladder> {
    Ladder::new(r_max, 0.8, (24.0 * h).min(r_max * 0.8f64.powi(3) * (1.0 - 1e-9)))
}

fn negative_phase_near(u: &ScalarField, x0: Point, r: f64) -> bool {
    let g = u.grid();
    let (i0, i1) = g.node_range(0, x0[0] - r, x0[0] + r);
    let (j0, j1) = g.node_range(1, x0[1] - r, x0[1] + r);
    (j0..=j1).any(|j| (i0..=i1).any(|i| vec2::dist(g.node2(i, j), x0) <= r && u.at2(i, j) < 0.0))
}

/// Extrapolated Weiss density at `x₀` compared with the half-plane value.
pub fn classify_point(
    u: &ScalarField,
    w: &WeightField,
    x0: Point,
    ladder: &Ladder,
    alpha: f64,
    params: &ClassifyParams,
) -> Result<Classification> {
    require_rank2(u)?;
    let samples = ladder
        .radii()
        .into_iter()
        .map(|r| weiss(u, w, x0, r))
        .collect::<Result<Vec<_>>>()?;
    let fit = extrapolate_w0(&samples, alpha).ok_or_else(|| Error::param("ladder needs at least two radii"))?;
    let qp = w.q_plus_at(&x0)?;
    let two_phase = params.two_phase_aware && negative_phase_near(u, x0, ladder.r_min);
    let reference = if two_phase {
        let qm = w.q_minus_at(&x0)?;
        (qp * qp + qm * qm) * PI / 2.0
    } else {
        qp * qp * PI / 2.0
    };
    let gap_ratio = fit.w0 / reference;
    let resolved = fit.residual <= params.residual_fraction * fit.w0.abs();
    let label = if resolved && gap_ratio <= 1.0 + params.eps_gap { Label::Regular } else { Label::Unresolved };
    Ok(Classification { x0, w0: fit.w0, reference, gap_ratio, label, fit, two_phase })
}

/// Least-squares slope (with intercept) of `t ↦ u(z + tν)` for
/// `t = 2h, 3h, …, 8h`.
pub fn normal_derivative(u: &ScalarField, z: &Vertex) -> Result<f64> {
    require_rank2(u)?;
    let nu = vec2::unit(z.normal).ok_or_else(|| Error::param("vertex normal must be nonzero"))?;
    let h = u.grid().spacing();
    let mut ts = [0.0; 7];
    let mut vs = [0.0; 7];
    for k in 0..7 {
        let t = (k + 2) as f64 * h;
        ts[k] = t;
        vs[k] = u.eval2(vec2::add(z.pos, vec2::scale(nu, t)))?;
    }
    let mt = ts.iter().sum::<f64>() / 7.0;
    let mv = vs.iter().sum::<f64>() / 7.0;
    let sxy: f64 = ts.iter().zip(&vs).map(|(t, v)| (t - mt) * (v - mv)).sum();
    let sxx: f64 = ts.iter().map(|t| (t - mt) * (t - mt)).sum();
    Ok(sxy / sxx)
}

/// Tensor-product bump `cos²(π(x−c)/2a)·cos²(π(y−c)/2a)` on the square of
/// half-width `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineBump {
    pub center: Point,
    pub half_width: f64,
}

impl CosineBump {
    fn factor(&self, t: f64) -> f64 {
        if t.abs() >= self.half_width {
            0.0
        } else {
            let c = (PI * t / (2.0 * self.half_width)).cos();
            c * c
        }
    }

    pub fn value(&self, p: Point) -> f64 {
        self.factor(p[0] - self.center[0]) * self.factor(p[1] - self.center[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakIdentityTrial {
    pub bump: CosineBump,
    /// `−∫⟨∇h, ∇ζ⟩`
    pub lhs: f64,
    /// `∫_Γ ζ ∂⁺h/∂ν dH¹`
    pub rhs: f64,
    pub relative_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakIdentityReport {
    pub trials: Vec<WeakIdentityTrial>,
    pub median_residual: f64,
}

/// Both sides of the weak Green identity of `h` for one bump.
pub fn weak_identity_bump(h: &ScalarField, fb: &FreeBoundary, bump: CosineBump) -> Result<WeakIdentityTrial> {
    require_rank2(h)?;
    let g = h.grid();
    let a = bump.half_width;
    let (lo, hi) = (vec2::sub(bump.center, [a, a]), vec2::add(bump.center, [a, a]));
    if !g.contains(&lo) || !g.contains(&hi) {
        return Err(Error::domain("bump support leaves the grid"));
    }
    let (i0, i1) = g.node_range(0, lo[0], hi[0]);
    let (j0, j1) = g.node_range(1, lo[1], hi[1]);
    let (i0, j0) = (i0.saturating_sub(1), j0.saturating_sub(1));
    let (i1, j1) = ((i1 + 1).min(g.nx() - 1), (j1 + 1).min(g.ny() - 1));
    let zeta = |i: usize, j: usize| bump.value(g.node2(i, j));
    let mut dot = 0.0;
    for j in j0..=j1 {
        for i in i0..=i1 {
            let (hv, zv) = (h.at2(i, j), zeta(i, j));
            if i < i1 {
                dot += (h.at2(i + 1, j) - hv) * (zeta(i + 1, j) - zv);
            }
            if j < j1 {
                dot += (h.at2(i, j + 1) - hv) * (zeta(i, j + 1) - zv);
            }
        }
    }
    let lhs = -dot;
    let mut rhs = 0.0;
    for line in &fb.polylines {
        for seg in line.vertices.windows(2) {
            let (za, zb) = (bump.value(seg[0].pos), bump.value(seg[1].pos));
            if za == 0.0 && zb == 0.0 {
                continue;
            }
            let ga = if za > 0.0 { normal_derivative(h, &seg[0])? } else { 0.0 };
            let gb = if zb > 0.0 { normal_derivative(h, &seg[1])? } else { 0.0 };
            rhs += 0.5 * vec2::dist(seg[0].pos, seg[1].pos) * (za * ga + zb * gb);
        }
    }
    let scale = lhs.abs().max(rhs.abs());
    let relative_residual = if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
    Ok(WeakIdentityTrial { bump, lhs, rhs, relative_residual })
}

/// Weak identity on `n_trials` random bumps centred near boundary vertices
/// and supported in `b`.
pub fn weak_identity_check(
    h: &ScalarField,
    fb: &FreeBoundary,
    b: &Ball,
    n_trials: usize,
    seed: u64,
) -> Result<WeakIdentityReport> {
    let c = b.center2();
    let r = b.radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let a = r * rng.gen_range(0.15..0.3);
        let reach = r - a * 2f64.sqrt() - h.grid().spacing();
        let candidates: Vec<&Vertex> = fb.vertices().filter(|v| vec2::dist(v.pos, c) <= reach - 0.5 * a).collect();
        if candidates.is_empty() {
            return Err(Error::domain("no boundary vertex deep enough inside the ball"));
        }
        let v = candidates[rng.gen_range(0..candidates.len())];
        let shift = rng.gen_range(-0.5 * a..0.5 * a);
        let center = vec2::add(v.pos, vec2::scale(v.normal, shift));
        trials.push(weak_identity_bump(h, fb, CosineBump { center, half_width: a })?);
    }
    let mut res: Vec<f64> = trials.iter().map(|t| t.relative_residual).collect();
    res.sort_by(f64::total_cmp);
    let median_residual = match res.len() {
        0 => 0.0,
        n if n % 2 == 1 => res[n / 2],
        n => 0.5 * (res[n / 2 - 1] + res[n / 2]),
    };
    Ok(WeakIdentityReport { trials, median_residual })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayParams {
    pub theta: f64,
    pub eta: f64,
    pub r0: f64,
    /// Smallest radius of the ladder in grid spacings.
    pub min_radius_h: f64,
    pub max_levels: usize,
    pub n_dir: usize,
    /// Largest acceptable fitted drift constant.
    pub c_max: f64,
}

impl Default for DecayParams {
    fn default() -> Self {
        Self { theta: 0.75, eta: 0.5, r0: 0.25, min_radius_h: 8.0, max_levels: 8, n_dir: DEFAULT_N_DIR, c_max: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub r: f64,
    pub sigma: f64,
    pub direction: Point,
    /// `4h/r`
    pub floor: f64,
    pub above_floor: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayStep {
    pub r: f64,
    pub r_next: f64,
    /// `max(θσ(r), 4h/r_next)`
    pub bound: f64,
    pub sigma_next: f64,
    pub drift: f64,
    pub above_floor: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub x0: Point,
    pub rows: Vec<DecayRow>,
    pub steps: Vec<DecayStep>,
    /// Exponent of `σ(r) ≈ A r^α̃` over rows above the floor.
    pub alpha_tilde: Option<f64>,
    /// Fewer than two rows resolve σ above the floor.
    pub flat_at_resolution: bool,
    /// Least `C` with `|e_{k+1} − e_k| ≤ C max(σ(r_k), 4h/r_k)`.
    pub c_drift: f64,
    /// The ladder stopped at the resolution limit before `max_levels`.
    pub truncated: bool,
}

impl DecayReport {
    /// Fraction of steps above the floor that improve; 1 when there are none.
    pub fn pass_fraction(&self) -> f64 {
        let above: Vec<&DecayStep> = self.steps.iter().filter(|s| s.above_floor).collect();
        if above.is_empty() {
            1.0
        } else {
            above.iter().filter(|s| s.pass).count() as f64 / above.len() as f64
        }
    }

    pub fn rate_pass(&self) -> bool {
        self.flat_at_resolution || self.alpha_tilde.is_some_and(|a| a > 0.0)
    }
}

/// Flatness on the ladder `r_k = r₀ηᵏ` with the improvement and drift checks.
pub fn decay_audit(
    u: &ScalarField,
    w: &WeightField,
    fb: &FreeBoundary,
    x0: Point,
    params: &DecayParams,
) -> Result<DecayReport> {
    if !(params.theta > 0.0 && params.theta < 1.0 && params.eta > 0.0 && params.eta < 1.0) {
        return Err(Error::param("decay audit needs θ, η in (0, 1)"));
    }
    let h = u.grid().spacing();
    let r_stop = params.min_radius_h * h;
    let mut rows = Vec::new();
    let mut r = params.r0;
    while r >= r_stop && rows.len() < params.max_levels {
        let f = flatness(u, w, fb, x0, r, params.n_dir)?;
        let floor = 4.0 * h / r;
        rows.push(DecayRow { r, sigma: f.sigma, direction: f.direction, floor, above_floor: f.sigma > floor });
        r *= params.eta;
    }
    let truncated = rows.len() < params.max_levels;
    let mut steps = Vec::new();
    let mut c_drift: f64 = 0.0;
    for k in 0..rows.len().saturating_sub(1) {
        let (a, b) = (&rows[k], &rows[k + 1]);
        let bound = (params.theta * a.sigma).max(b.floor);
        let drift = vec2::dist(a.direction, b.direction);
        c_drift = c_drift.max(drift / a.sigma.max(a.floor));
        steps.push(DecayStep {
            r: a.r,
            r_next: b.r,
            bound,
            sigma_next: b.sigma,
            drift,
            above_floor: a.above_floor,
            pass: b.sigma <= bound + 1e-12,
        });
    }
    let resolved: Vec<(f64, f64)> =
        rows.iter().filter(|row| row.above_floor).map(|row| (row.r.ln(), row.sigma.ln())).collect();
    let flat_at_resolution = resolved.len() < 2;
    let alpha_tilde = (!flat_at_resolution).then(|| {
        let n = resolved.len() as f64;
        let mx = resolved.iter().map(|p| p.0).sum::<f64>() / n;
        let my = resolved.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = resolved.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = resolved.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    });
    Ok(DecayReport { x0, rows, steps, alpha_tilde, flat_at_resolution, c_drift, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::extract_boundary;
    use crate::solver::harmonic_replace;
    use proptest::prelude::*;

    fn tilted(n: usize, lambda: f64, phi: f64) -> ScalarField {
        let nu = angle_dir(phi);
        ScalarField::from_fn2(Grid::square(-1.0, 1.0, n).unwrap(), |p| lambda * vec2::dot(p, nu).max(0.0)).unwrap()
    }

    fn half_plane(n: usize, lambda: f64) -> ScalarField {
        ScalarField::from_fn2(Grid::square(-1.0, 1.0, n).unwrap(), |p| lambda * p[1].max(0.0)).unwrap()
    }

    fn weights(u: &ScalarField, q: f64) -> WeightField {
        WeightField::constant(u.grid(), q).unwrap()
    }

    fn angle_between(a: Point, b: Point) -> f64 {
        vec2::dot(a, b).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn half_plane_is_flat_in_e2() {
        let u = half_plane(257, 1.0);
        let w = weights(&u, 1.0);
        let fb = extract_boundary(&u).unwrap();
        let h = u.grid().spacing();
        for x0 in [[0.0, 0.0], [0.3, 0.0]] {
            let f = flatness(&u, &w, &fb, x0, 0.25, DEFAULT_N_DIR).unwrap();
            assert!(f.sigma <= 2.0 * h / 0.25, "{f:?}");
            assert!(angle_between(f.direction, [0.0, 1.0]) < PI / 180.0, "{f:?}");
            assert!(f.hausdorff_sigma.unwrap() < 1e-9);
        }
    }

    #[test]
    fn forced_wrong_direction_is_maximally_non_flat() {
        let u = half_plane(257, 1.0);
        let w = weights(&u, 1.0);
        assert_eq!(flatness_in_direction(&u, &w, [0.0, 0.0], 0.25, [0.0, -1.0]).unwrap(), 1.0);
    }

    #[test]
    fn flatness_requires_a_boundary_point() {
        let u = half_plane(129, 1.0);
        let w = weights(&u, 1.0);
        let fb = extract_boundary(&u).unwrap();
        assert!(matches!(flatness(&u, &w, &fb, [0.0, 0.3], 0.2, 90), Err(Error::Precondition(_))));
        assert!(flatness(&u, &w, &fb, [0.9, 0.0], 0.2, 90).is_err());
    }

    #[test]
    fn cone_flatness_is_scale_invariant() {
        // Right-angle wedge: not flat, and σ does not depend on r.
        let g = Grid::square(-1.0, 1.0, 257).unwrap();
        let u = ScalarField::from_fn2(g, |p| p[0].min(p[1]).max(0.0)).unwrap();
        let w = weights(&u, 1.0);
        let fb = extract_boundary(&u).unwrap();
        let h = u.grid().spacing();
        let s: Vec<f64> = [0.1, 0.2, 0.4]
            .iter()
            .map(|&r| flatness(&u, &w, &fb, [0.0, 0.0], r, DEFAULT_N_DIR).unwrap().sigma)
            .collect();
        assert!(s[0] > 0.2);
        for k in 1..3 {
            assert!((s[k] - s[0]).abs() <= 4.0 * h / 0.1, "{s:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn flatness_is_rotation_equivariant(phi in 0.0..(2.0 * PI)) {
            let u = tilted(129, 1.0, phi);
            let w = weights(&u, 1.0);
            let fb = extract_boundary(&u).unwrap();
            let f = flatness(&u, &w, &fb, [0.0, 0.0], 0.4, DEFAULT_N_DIR).unwrap();
            prop_assert!(angle_between(f.direction, angle_dir(phi)) <= PI / 180.0);
            prop_assert!(f.sigma <= 4.0 * u.grid().spacing() / 0.4);
        }

        #[test]
        fn hausdorff_flatness_is_comparable_to_sigma(t in 0.0..(2.0 * PI), r in 0.1..0.35f64) {
            let g = Grid::square(-1.0, 1.0, 257).unwrap();
            let h = g.spacing();
            let u = ScalarField::from_fn2(g, |p| (vec2::norm(p) - 0.5).max(0.0)).unwrap();
            let w = weights(&u, 1.0);
            let fb = extract_boundary(&u).unwrap();
            let x0 = vec2::scale(vec2::from_angle(t), 0.5);
            let sigma = flatness(&u, &w, &fb, x0, r, DEFAULT_N_DIR).unwrap().sigma;
            let hausdorff = (0..360)
                .map(|k| hausdorff_flatness(&fb, u.grid(), x0, r, angle_dir((k as f64).to_radians())).unwrap())
                .fold(f64::INFINITY, f64::min);
            prop_assert!(sigma <= 3.0 * hausdorff + h / r, "sigma {sigma}, hausdorff {hausdorff}");
            prop_assert!(hausdorff <= 3.0 * sigma + h / r, "sigma {sigma}, hausdorff {hausdorff}");
        }
    }

    #[test]
    fn blowup_of_half_plane_is_exact() {
        let u = half_plane(257, 2.0);
        let w = weights(&u, 2.0);
        for x0 in [[0.0, 0.0], [0.3, 0.0]] {
            let b = blowup_fit(&u, &w, x0, 0.25).unwrap();
            assert!(b.misfit <= 1e-6, "{}", b.misfit);
            assert!((b.slope - 2.0).abs() < 1e-6);
            assert!(angle_between(b.normal, [0.0, 1.0]) < 1e-9);
        }
    }

    #[test]
    fn blowup_finds_slope_different_from_weight() {
        let u = tilted(257, 1.3, 1.0);
        let w = weights(&u, 1.0);
        let b = blowup_fit(&u, &w, [0.0, 0.0], 0.5).unwrap();
        assert!((b.slope - 1.3).abs() < 0.01, "{}", b.slope);
        assert!(angle_between(b.normal, angle_dir(1.0)) < 0.01);
        assert!(b.misfit < 0.02);
    }

    #[test]
    fn half_plane_density_gap_is_one() {
        let u = half_plane(513, 1.0);
        let w = weights(&u, 1.0);
        let ladder = density_ladder(0.25, u.grid().spacing()).unwrap();
        let c = classify_point(&u, &w, [0.0, 0.0], &ladder, 1.0, &ClassifyParams::default()).unwrap();
        assert!((c.gap_ratio - 1.0).abs() < 0.02, "{c:?}");
        assert_eq!(c.label, Label::Regular);
    }

    #[test]
    fn two_plane_density_is_twice_the_half_plane() {
        let g = Grid::square(-1.0, 1.0, 257).unwrap();
        let u = ScalarField::from_fn2(g.clone(), |p| p[1].abs()).unwrap();
        let w = WeightField::constant_two_phase(&g, 1.0, 1.0).unwrap();
        let ladder = density_ladder(0.25, g.spacing()).unwrap();
        let c = classify_point(&u, &w, [0.0, 0.0], &ladder, 1.0, &ClassifyParams::default()).unwrap();
        assert!((c.w0 - PI).abs() < 0.05 * PI, "{c:?}");
        assert!((c.gap_ratio - 2.0).abs() < 0.05);
        assert_eq!(c.label, Label::Unresolved);
    }

    #[test]
    fn two_phase_aware_mode_recognises_the_two_plane_field() {
        let g = Grid::square(-1.0, 1.0, 257).unwrap();
        let u = ScalarField::from_fn2(g.clone(), |p| if p[1] > 0.0 { p[1] } else { 0.5 * p[1] }).unwrap();
        let w = WeightField::constant_two_phase(&g, 1.0, 0.5).unwrap();
        let ladder = density_ladder(0.25, g.spacing()).unwrap();
        let params = ClassifyParams { two_phase_aware: true, ..Default::default() };
        let c = classify_point(&u, &w, [0.0, 0.0], &ladder, 1.0, &params).unwrap();
        assert!(c.two_phase);
        assert!((c.gap_ratio - 1.0).abs() < 0.02, "{c:?}");
        assert_eq!(c.label, Label::Regular);
    }

    #[test]
    fn exterior_disk_point_is_regular() {
        let g = Grid::square(-1.0, 1.0, 513).unwrap();
        let u = ScalarField::from_fn2(g, |p| (vec2::norm(p) - 0.3).max(0.0)).unwrap();
        let w = weights(&u, 1.0);
        let x0 = [0.3 * 0.6, 0.3 * 0.8];
        let ladder = density_ladder(0.25, u.grid().spacing()).unwrap();
        let c = classify_point(&u, &w, x0, &ladder, 1.0, &ClassifyParams::default()).unwrap();
        assert_eq!(c.label, Label::Regular, "{c:?}");
    }

    #[test]
    fn slope_family_has_unit_gap_ratio() {
        // W₀ of a(x₂)₊ with q₊ = 1 is π/2 for every slope.
        for a in [0.5, 1.0, 2.0] {
            let u = half_plane(257, a);
            let w = weights(&u, 1.0);
            let ladder = density_ladder(0.25, u.grid().spacing()).unwrap();
            let c = classify_point(&u, &w, [0.0, 0.0], &ladder, 1.0, &ClassifyParams::default()).unwrap();
            assert!((c.gap_ratio - 1.0).abs() < 0.03, "a = {a}: {c:?}");
        }
    }

    #[test]
    fn normal_derivative_recovers_slope() {
        let u = half_plane(257, 1.7);
        let z = Vertex { pos: [0.2, 0.0], normal: [0.0, 1.0] };
        assert!((normal_derivative(&u, &z).unwrap() / 1.7 - 1.0).abs() < 0.01);
        let phi: f64 = 0.4;
        let z = Vertex { pos: [0.2, 0.0], normal: [phi.sin(), phi.cos()] };
        assert!((normal_derivative(&u, &z).unwrap() / (1.7 * phi.cos()) - 1.0).abs() < 0.02);
        let edge = Vertex { pos: [0.2, 0.99], normal: [0.0, 1.0] };
        assert!(normal_derivative(&u, &edge).is_err());
    }

    #[test]
    fn normal_derivative_matches_blowup_slope() {
        let u = tilted(257, 1.4, 0.7);
        let w = weights(&u, 1.0);
        let b = blowup_fit(&u, &w, [0.0, 0.0], 0.3).unwrap();
        let z = Vertex { pos: [0.0, 0.0], normal: angle_dir(0.7) };
        let d = normal_derivative(&u, &z).unwrap();
        assert!((b.slope / d - 1.0).abs() < 0.03);
    }

    #[test]
    fn weak_identity_on_half_plane() {
        let u = half_plane(257, 1.0);
        let fb = extract_boundary(&u).unwrap();
        let bump = CosineBump { center: [0.1, 0.02], half_width: 0.1 };
        let t = weak_identity_bump(&u, &fb, bump).unwrap();
        // ∫ ζ(x₁, 0) dx₁ = a·cos²(π·0.02/0.2) for the cos² profile of width 2a.
        let exact = 0.1 * (PI * 0.02 / 0.2).cos().powi(2);
        assert!((t.lhs / exact - 1.0).abs() < 0.03, "{t:?}");
        assert!((t.rhs / exact - 1.0).abs() < 0.03, "{t:?}");
        let ball = Ball::disk([0.0, 0.0], 0.5).unwrap();
        let report = weak_identity_check(&u, &fb, &ball, 20, 3).unwrap();
        assert!(report.median_residual <= 0.03, "{}", report.median_residual);
    }

    #[test]
    fn weak_identity_vanishes_away_from_boundary() {
        let g = Grid::square(-1.0, 1.0, 129).unwrap();
        let u = ScalarField::from_fn2(g, |p| (p[1] + 0.5).max(0.0)).unwrap();
        let w = weights(&u, 1.0);
        let ball = Ball::disk([0.0, 0.3], 0.4).unwrap();
        let h = harmonic_replace(&u, &w, &ball).unwrap();
        let fb = extract_boundary(&h).unwrap();
        let t = weak_identity_bump(&h, &fb, CosineBump { center: [0.0, 0.3], half_width: 0.2 }).unwrap();
        assert_eq!(t.rhs, 0.0);
        // ‖ζ‖ in L¹ is (a)² here.
        assert!(t.lhs.abs() <= 1e-6 * 0.04, "{}", t.lhs);
    }

    #[test]
    fn decay_on_exact_fields() {
        let u = half_plane(513, 1.0);
        let w = weights(&u, 1.0);
        let fb = extract_boundary(&u).unwrap();
        let rep = decay_audit(&u, &w, &fb, [0.0, 0.0], &DecayParams::default()).unwrap();
        assert!(rep.truncated);
        assert!(rep.rows.len() >= 4);
        assert!(rep.rows.iter().all(|r| r.sigma <= r.floor));
        assert!(rep.steps.iter().all(|s| s.pass && s.drift < 1e-9));
        assert!(rep.flat_at_resolution && rep.rate_pass());
        assert_eq!(rep.pass_fraction(), 1.0);

        let u = tilted(513, 1.0, 0.3);
        let fb = extract_boundary(&u).unwrap();
        let rep = decay_audit(&u, &w, &fb, [0.0, 0.0], &DecayParams::default()).unwrap();
        for row in &rep.rows {
            assert!(angle_between(row.direction, angle_dir(0.3)) < PI / 180.0);
            assert!(row.sigma <= row.floor);
        }
    }

    #[test]
    fn decay_rate_on_a_curved_boundary() {
        let g = Grid::square(-1.0, 1.0, 513).unwrap();
        let u = ScalarField::from_fn2(g, |p| (vec2::norm(p) - 0.5).max(0.0)).unwrap();
        let w = weights(&u, 1.0);
        let fb = extract_boundary(&u).unwrap();
        let params = DecayParams { r0: 0.4, ..Default::default() };
        let rep = decay_audit(&u, &w, &fb, [0.0, 0.5], &params).unwrap();
        let a = rep.alpha_tilde.expect("curvature resolves σ above the floor");
        assert!(a > 0.5, "{rep:?}");
        assert!(rep.pass_fraction() >= 0.9);
        assert!(rep.c_drift <= 10.0);
    }
}
