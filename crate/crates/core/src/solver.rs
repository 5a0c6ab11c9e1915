//! Minimization of the discrete one- and two-phase functional, and the linear
//! Laplace solves behind harmonic replacement and harmonic measure.
//!
//! The descent works node by node: each interior node's share of the energy is
//! a one-dimensional piecewise quadratic, minimized exactly, over-relaxed and
//! accepted under an Armijo test. Every accepted update lowers the global
//! energy by exactly the local decrease, so the trace is monotone within a
//! stage. Stages anneal the indicator ramp `H_ε(u) = clamp(u/ε, 0, 1)` down
//! the ε-ladder and finish with the sharp indicator; coarser grids provide the
//! warm start.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ball_quadrature, vec2, Ball, Grid, Point, ScalarField};
use crate::problem::{perimeter_nodes, Phase, Problem, WeightField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    /// Ramp widths in multiples of the grid spacing, strictly decreasing, all ≥ 1.
    pub eps_ladder: Vec<f64>,
    /// Final stage with the exact indicator.
    pub sharp_polish: bool,
    /// First trial relaxation factor; `None` uses `2 / (1 + sin(πh/L))`.
    pub initial_step: Option<f64>,
    pub shrink: f64,
    pub armijo_c: f64,
    pub rel_tol: f64,
    pub window: usize,
    pub max_iters: usize,
    /// Nonnegativity projection; `None` projects exactly for one-phase problems.
    pub project_nonneg: Option<bool>,
    pub multilevel: bool,
    /// Smallest per-axis sample count of a coarse level.
    pub coarsest: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            eps_ladder: vec![8.0, 4.0, 2.0, 1.0],
            sharp_polish: true,
            initial_step: None,
            shrink: 0.5,
            armijo_c: 1e-4,
            rel_tol: 1e-10,
            window: 50,
            max_iters: 50_000,
            project_nonneg: None,
            multilevel: true,
            coarsest: 33,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_ladder.iter().any(|&e| !(e >= 1.0 && e.is_finite())) {
            return Err(Error::param("every ε-ladder entry must be at least one grid spacing"));
        }
        if self.eps_ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::param("ε-ladder must be strictly decreasing"));
        }
        if self.eps_ladder.is_empty() && !self.sharp_polish {
            return Err(Error::param("no descent stage configured"));
        }
        if let Some(w) = self.initial_step {
            if !(w >= 1.0 && w < 2.0) {
                return Err(Error::param(format!("initial step must lie in [1, 2), got {w}")));
            }
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::param("shrink factor must lie in (0, 1)"));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::param("Armijo constant must lie in (0, 1)"));
        }
        if self.window == 0 || self.max_iters == 0 {
            return Err(Error::param("window and iteration cap must be positive"));
        }
        Ok(())
    }
}

/// Indicator used for the phase-volume term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Indicator {
    Sharp,
    /// `H_ε(u) = clamp(u/ε, 0, 1)`
    Ramp(f64),
}

impl Indicator {
    #[inline]
    fn plus(self, u: f64) -> f64 {
        match self {
            Indicator::Sharp => (u > 0.0) as u8 as f64,
            Indicator::Ramp(eps) => (u / eps).clamp(0.0, 1.0),
        }
    }
}

/// Integration region for [`energy`].
#[derive(Clone, Debug)]
pub enum Region {
    Grid,
    Ball(Ball),
}

/// Dirichlet and phase-volume parts of the functional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParts {
    pub dirichlet: f64,
    pub volume: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.dirichlet + self.volume
    }
}

/// `∫ |∇u|² + q₊² χ{u>0} + q₋² χ{u<0}` over `region`.
pub fn energy(u: &ScalarField, w: &WeightField, region: &Region, ind: Indicator) -> Result<f64> {
    Ok(energy_parts(u, w, region, ind)?.total())
}

/// On the whole grid the Dirichlet part is the forward-difference edge sum and
/// the volume part a trapezoid-weighted node sum; on a ball both parts use the
/// cell quadrature of [`ball_quadrature`] applied to the multilinear
/// interpolants.
pub fn energy_parts(
    u: &ScalarField,
    w: &WeightField,
    region: &Region,
    ind: Indicator,
) -> Result<EnergyParts> {
    if u.grid() != w.grid() {
        return Err(Error::param("field and weights must share a grid"));
    }
    match region {
        Region::Grid => Ok(grid_energy(u, w, None, ind)),
        Region::Ball(b) => {
            let dirichlet = ball_quadrature(u.grid(), b, |p| {
                let g = u.grad_at(p).expect("quadrature point inside grid");
                g.iter().map(|x| x * x).sum()
            })?;
            let volume = ball_quadrature(u.grid(), b, |p| {
                let v = u.eval_unchecked(p);
                let qp = w.q_plus.eval_unchecked(p);
                let qm = w.q_minus.eval_unchecked(p);
                qp * qp * ind.plus(v) + qm * qm * ind.plus(-v)
            })?;
            Ok(EnergyParts { dirichlet, volume })
        }
    }
}

fn trapezoid_weight(grid: &Grid, idx: usize) -> f64 {
    grid.multi_index(idx)
        .iter()
        .zip(grid.dims())
        .map(|(&i, &d)| if i == 0 || i + 1 == d { 0.5 } else { 1.0 })
        .product()
}

/// Whole-grid energy with an optional node-wise Dirichlet coefficient.
fn grid_energy(
    u: &ScalarField,
    w: &WeightField,
    coefficient: Option<&ScalarField>,
    ind: Indicator,
) -> EnergyParts {
    let g = u.grid();
    let n = g.rank() as i32;
    let h = g.spacing();
    let v = u.values();
    let mut dirichlet = 0.0;
    let mut stride = 1;
    for axis in 0..g.rank() {
        let d = g.dims()[axis];
        for k in 0..g.len() {
            if (k / stride) % d + 1 == d {
                continue;
            }
            let j = k + stride;
            // edges on a grid face carry half weight per face they touch
            let faces = (0..g.rank()).filter(|&a| a != axis).filter(|&a| {
                let s: usize = g.dims()[..a].iter().product();
                let i = (k / s) % g.dims()[a];
                i == 0 || i + 1 == g.dims()[a]
            });
            let mut c = 0.5f64.powi(faces.count() as i32);
            if let Some(a) = coefficient {
                c *= 0.5 * (a.values()[k] + a.values()[j]);
            }
            let dv = v[j] - v[k];
            dirichlet += c * dv * dv;
        }
        stride *= d;
    }
    dirichlet *= h.powi(n - 2);
    let mut volume = 0.0;
    for k in 0..g.len() {
        let qp = w.q_plus.values()[k];
        let qm = w.q_minus.values()[k];
        volume += trapezoid_weight(g, k) * (qp * qp * ind.plus(v[k]) + qm * qm * ind.plus(-v[k]));
    }
    volume *= h.powi(n);
    EnergyParts { dirichlet, volume }
}

/// One entry of the energy trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub stage: usize,
    /// Ramp width in length units; 0 for the sharp stage.
    pub eps: f64,
    pub iteration: usize,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub level: usize,
    pub stage: usize,
    pub eps: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_energy: f64,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub u: ScalarField,
    pub energy_trace: Vec<TraceEntry>,
    pub stages: Vec<StageSummary>,
    /// Discrete functional with the exact indicator, for the functional that
    /// was minimized.
    pub sharp_energy: f64,
    pub converged: bool,
    /// Sweeps on the finest level.
    pub iterations: usize,
}

/// Per-level discretization of the functional.
struct Level {
    grid: Grid,
    /// `h² q₊²` and `h² q₋²` at each node.
    vol_plus: Vec<f64>,
    vol_minus: Vec<f64>,
    q_plus: Vec<f64>,
    q_minus: Vec<f64>,
    coef: Vec<f64>,
    /// Edge coefficients towards the +x and +y neighbors.
    cx: Vec<f64>,
    cy: Vec<f64>,
    fixed: Vec<bool>,
    boundary: Vec<f64>,
}

impl Level {
    fn new(
        grid: Grid,
        q_plus: &[f64],
        q_minus: &[f64],
        coefficient: Option<&[f64]>,
        boundary: Vec<f64>,
    ) -> Self {
        let h2 = grid.spacing().powi(2);
        let (nx, ny) = (grid.nx(), grid.ny());
        let coef = |k: usize| coefficient.map_or(1.0, |c| c[k]);
        let mut cx = vec![0.0; grid.len()];
        let mut cy = vec![0.0; grid.len()];
        let mut fixed = vec![false; grid.len()];
        for j in 0..ny {
            for i in 0..nx {
                let k = grid.index2(i, j);
                if i + 1 < nx {
                    cx[k] = 0.5 * (coef(k) + coef(k + 1));
                }
                if j + 1 < ny {
                    cy[k] = 0.5 * (coef(k) + coef(k + nx));
                }
                fixed[k] = i == 0 || j == 0 || i + 1 == nx || j + 1 == ny;
            }
        }
        Self {
            vol_plus: q_plus.iter().map(|q| h2 * q * q).collect(),
            vol_minus: q_minus.iter().map(|q| h2 * q * q).collect(),
            q_plus: q_plus.to_vec(),
            q_minus: q_minus.to_vec(),
            coef: (0..grid.len()).map(coef).collect(),
            grid,
            cx,
            cy,
            fixed,
            boundary,
        }
    }

    /// Coarsens by injection onto every other node.
    fn coarsen(&self) -> Option<Level> {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        if (nx - 1) % 2 != 0 || (ny - 1) % 2 != 0 {
            return None;
        }
        let (cnx, cny) = ((nx - 1) / 2 + 1, (ny - 1) / 2 + 1);
        let grid = Grid::new(self.grid.origin().to_vec(), 2.0 * self.grid.spacing(), vec![cnx, cny]).ok()?;
        let pick = |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(cnx * cny);
            for j in 0..cny {
                for i in 0..cnx {
                    out.push(src[self.grid.index2(2 * i, 2 * j)]);
                }
            }
            out
        };
        let (qp, qm, coef) = (pick(&self.q_plus), pick(&self.q_minus), pick(&self.coef));
        let boundary = pick(&self.boundary);
        Some(Level::new(grid, &qp, &qm, Some(&coef), boundary))
    }

    fn energy(&self, u: &[f64], ind: Indicator) -> f64 {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let mut e = 0.0;
        for j in 0..ny {
            for i in 0..nx {
                let k = self.grid.index2(i, j);
                if i + 1 < nx {
                    let d = u[k + 1] - u[k];
                    e += self.cx[k] * d * d;
                }
                if j + 1 < ny {
                    let d = u[k + nx] - u[k];
                    e += self.cy[k] * d * d;
                }
                if !self.fixed[k] {
                    e += self.vol_plus[k] * ind.plus(u[k]) + self.vol_minus[k] * ind.plus(-u[k]);
                }
            }
        }
        e
    }
}

/// Local energy `K (u - m)² + a₊ H(u) + a₋ H(-u)` of one node.
#[derive(Clone, Copy)]
struct Local {
    k: f64,
    m: f64,
    a_plus: f64,
    a_minus: f64,
    ind: Indicator,
}

impl Local {
    #[inline]
    fn f(&self, u: f64) -> f64 {
        let d = u - self.m;
        self.k * d * d + self.a_plus * self.ind.plus(u) + self.a_minus * self.ind.plus(-u)
    }

    /// Exact minimizer over the feasible set (`u ≥ 0` when projected).
    #[inline]
    fn argmin(&self, project: bool) -> f64 {
        let m = self.m;
        let mut best = 0.0;
        let mut best_f = self.f(0.0);
        let consider = |u: f64, best: &mut f64, best_f: &mut f64| {
            let fu = self.f(u);
            if fu < *best_f {
                *best = u;
                *best_f = fu;
            }
        };
        match self.ind {
            Indicator::Sharp => {
                if m > 0.0 || (m < 0.0 && !project) {
                    consider(m, &mut best, &mut best_f);
                }
            }
            Indicator::Ramp(eps) => {
                consider(m.max(eps), &mut best, &mut best_f);
                consider((m - self.a_plus / (2.0 * self.k * eps)).clamp(0.0, eps), &mut best, &mut best_f);
                if !project {
                    consider((m + self.a_minus / (2.0 * self.k * eps)).clamp(-eps, 0.0), &mut best, &mut best_f);
                    consider(m.min(-eps), &mut best, &mut best_f);
                }
            }
        }
        best
    }
}

struct StageParams {
    ind: Indicator,
    omega: f64,
    project: bool,
}

/// One relaxation sweep; returns the exact energy change and the largest move.
fn sweep(level: &Level, u: &mut [f64], sp: &StageParams, cfg: &SolveConfig) -> (f64, f64) {
    let (nx, ny) = (level.grid.nx(), level.grid.ny());
    let mut delta_e = 0.0;
    let mut max_move: f64 = 0.0;
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let k = i + nx * j;
            let (ce, cw, cn, cs) = (level.cx[k], level.cx[k - 1], level.cy[k], level.cy[k - nx]);
            let kk = ce + cw + cn + cs;
            let m = (ce * u[k + 1] + cw * u[k - 1] + cn * u[k + nx] + cs * u[k - nx]) / kk;
            let u0 = u[k];
            let (a_plus, a_minus) = (level.vol_plus[k], level.vol_minus[k]);
            if sp.project && u0 == 0.0 && m <= 0.0 {
                continue;
            }
            // Both u0 and the minimizer on the quadratic piece u ≥ ε (u > 0 for
            // the sharp indicator): the over-relaxed step satisfies the
            // Armijo test analytically whenever it stays on that piece.
            let (floor, on_piece) = match sp.ind {
                Indicator::Ramp(eps) => (eps, m >= eps + a_plus / (2.0 * kk * eps)),
                Indicator::Sharp => (0.0, m > 0.0 && kk * m * m > a_plus),
            };
            if on_piece && u0 >= floor && u0 > 0.0 {
                let cand = u0 + sp.omega * (m - u0);
                if cand >= floor && cand > 0.0 {
                    if cand != u0 {
                        delta_e += kk * ((cand - m) * (cand - m) - (u0 - m) * (u0 - m));
                        max_move = max_move.max((cand - u0).abs());
                        u[k] = cand;
                    }
                    continue;
                }
            }
            let local = Local { k: kk, m, a_plus, a_minus, ind: sp.ind };
            let star = if on_piece { m } else { local.argmin(sp.project) };
            let d = star - u0;
            if d == 0.0 {
                continue;
            }
            let f0 = local.f(u0);
            let mut t = sp.omega;
            let mut new = u0;
            let mut f_new = f0;
            loop {
                let mut cand = u0 + t * d;
                if sp.project {
                    cand = cand.max(0.0);
                }
                let fc = local.f(cand);
                if t <= 1.0 {
                    if fc < f0 {
                        new = cand;
                        f_new = fc;
                    }
                    break;
                }
                if fc <= f0 - cfg.armijo_c * t * kk * d * d {
                    new = cand;
                    f_new = fc;
                    break;
                }
                t = (t * cfg.shrink).max(1.0);
            }
            if new != u0 {
                // a single-node move changes the global energy by exactly the
                // change of its local energy
                delta_e += f_new - f0;
                max_move = max_move.max((new - u0).abs());
                u[k] = new;
            }
        }
    }
    (delta_e, max_move)
}

struct StageOutcome {
    iterations: usize,
    converged: bool,
    final_energy: f64,
}

fn run_stage(
    level: &Level,
    u: &mut [f64],
    sp: &StageParams,
    cfg: &SolveConfig,
    trace: &mut Vec<TraceEntry>,
    tag: (usize, usize, f64),
) -> StageOutcome {
    let mut e = level.energy(u, sp.ind);
    let mut history = Vec::with_capacity(1024);
    history.push(e);
    trace.push(TraceEntry { level: tag.0, stage: tag.1, eps: tag.2, iteration: 0, energy: e });
    for it in 1..=cfg.max_iters {
        let (de, moved) = sweep(level, u, sp, cfg);
        e += de;
        if it % 100 == 0 {
            e = level.energy(u, sp.ind);
        }
        history.push(e);
        trace.push(TraceEntry { level: tag.0, stage: tag.1, eps: tag.2, iteration: it, energy: e });
        if moved == 0.0 {
            return StageOutcome { iterations: it, converged: true, final_energy: e };
        }
        if it >= cfg.window {
            let old = history[it - cfg.window];
            if old - e <= cfg.rel_tol * e.abs().max(f64::MIN_POSITIVE) {
                return StageOutcome { iterations: it, converged: true, final_energy: level.energy(u, sp.ind) };
            }
        }
    }
    StageOutcome { iterations: cfg.max_iters, converged: false, final_energy: level.energy(u, sp.ind) }
}

fn optimal_omega(grid: &Grid) -> f64 {
    let l = grid.extent(0).max(grid.extent(1));
    2.0 / (1.0 + (PI * grid.spacing() / l).sin())
}

/// Bilinear prolongation from a level to the next finer one.
fn prolong(coarse: &Level, u: &[f64], fine: &Level) -> Vec<f64> {
    let cf = ScalarField::new(coarse.grid.clone(), u.to_vec()).expect("finite iterate");
    let mut out = Vec::with_capacity(fine.grid.len());
    for j in 0..fine.grid.ny() {
        for i in 0..fine.grid.nx() {
            let k = fine.grid.index2(i, j);
            out.push(if fine.fixed[k] {
                fine.boundary[k]
            } else {
                cf.eval2_unchecked(fine.grid.node2(i, j))
            });
        }
    }
    out
}

/// Coons-patch blend of the boundary values, used as the coarsest start.
fn coons(level: &Level, project: bool) -> Vec<f64> {
    let (nx, ny) = (level.grid.nx(), level.grid.ny());
    let b = &level.boundary;
    let at = |i: usize, j: usize| b[i + nx * j];
    let mut u = b.clone();
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let s = i as f64 / (nx - 1) as f64;
            let t = j as f64 / (ny - 1) as f64;
            let ruled = (1.0 - s) * at(0, j) + s * at(nx - 1, j) + (1.0 - t) * at(i, 0) + t * at(i, ny - 1);
            let bilinear = (1.0 - s) * (1.0 - t) * at(0, 0)
                + s * (1.0 - t) * at(nx - 1, 0)
                + (1.0 - s) * t * at(0, ny - 1)
                + s * t * at(nx - 1, ny - 1);
            let v = ruled - bilinear;
            u[i + nx * j] = if project { v.max(0.0) } else { v };
        }
    }
    u
}

/// Minimizes the problem's functional (the perturbed one when a perturbation
/// is attached). Non-convergence is reported in the result, never an error.
pub fn minimize(problem: &Problem, cfg: &SolveConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let grid = problem.grid.clone();
    if grid.nx() < 3 || grid.ny() < 3 {
        return Err(Error::param("solves need at least 3 samples per axis"));
    }
    let (weights, coefficient) = match &problem.perturbation {
        Some(p) => (&p.weights, Some(&p.coefficient)),
        None => (&problem.weights, None),
    };
    let project = cfg.project_nonneg.unwrap_or(problem.phase == Phase::OnePhase);
    let mut boundary = vec![0.0; grid.len()];
    for (&k, &v) in perimeter_nodes(&grid).iter().zip(&problem.trace) {
        boundary[k] = v;
    }
    let q_minus: Vec<f64> = match problem.phase {
        Phase::OnePhase => vec![0.0; grid.len()],
        Phase::TwoPhase => weights.q_minus.values().to_vec(),
    };
    let fine = Level::new(
        grid.clone(),
        weights.q_plus.values(),
        &q_minus,
        coefficient.map(|c| c.values()),
        boundary,
    );

    let mut levels = vec![fine];
    if cfg.multilevel {
        while let Some(c) = levels.last().unwrap().coarsen() {
            if c.grid.nx() < cfg.coarsest || c.grid.ny() < cfg.coarsest {
                break;
            }
            levels.push(c);
        }
    }
    let h_fine = grid.spacing();
    let mut trace = Vec::new();
    let mut stages = Vec::new();

    let coarsest = levels.len() - 1;
    let mut u = coons(&levels[coarsest], project);
    for lvl in (1..levels.len()).rev() {
        let level = &levels[lvl];
        let first = cfg.eps_ladder.first().copied().unwrap_or(1.0) * h_fine;
        let eps = first.max(2.0 * level.grid.spacing());
        let sp = StageParams {
            ind: Indicator::Ramp(eps),
            omega: cfg.initial_step.unwrap_or_else(|| optimal_omega(&level.grid)),
            project,
        };
        let out = run_stage(level, &mut u, &sp, cfg, &mut trace, (lvl, 0, eps));
        stages.push(StageSummary {
            level: lvl,
            stage: 0,
            eps,
            iterations: out.iterations,
            converged: out.converged,
            final_energy: out.final_energy,
        });
        u = prolong(level, &u, &levels[lvl - 1]);
    }
    if coarsest == 0 {
        u = coons(&levels[0], project);
    }

    let level = &levels[0];
    let omega = cfg.initial_step.unwrap_or_else(|| optimal_omega(&level.grid));
    let mut schedule: Vec<Indicator> = cfg.eps_ladder.iter().map(|&e| Indicator::Ramp(e * h_fine)).collect();
    if cfg.sharp_polish {
        schedule.push(Indicator::Sharp);
    }
    let mut converged = true;
    let mut iterations = 0;
    for (s, ind) in schedule.into_iter().enumerate() {
        let eps = match ind {
            Indicator::Ramp(e) => e,
            Indicator::Sharp => 0.0,
        };
        let sp = StageParams { ind, omega, project };
        let out = run_stage(level, &mut u, &sp, cfg, &mut trace, (0, s, eps));
        converged &= out.converged;
        iterations += out.iterations;
        stages.push(StageSummary {
            level: 0,
            stage: s,
            eps,
            iterations: out.iterations,
            converged: out.converged,
            final_energy: out.final_energy,
        });
    }
    let u = ScalarField::new(grid, u)?;
    let sharp_energy = grid_energy(&u, weights, coefficient, Indicator::Sharp).total();
    Ok(SolveResult { u, energy_trace: trace, stages, sharp_energy, converged, iterations })
}

/// Red-black-free lexicographic SOR for the 5-point Laplacian on a node
/// subset, with optional right-hand side. Nodes outside the subset keep their
/// values and act as Dirichlet data.
struct MaskedLaplace {
    nx: usize,
    nodes: Vec<usize>,
    omega: f64,
}

impl MaskedLaplace {
    fn new(grid: &Grid, nodes: Vec<usize>) -> Self {
        let (mut imin, mut imax, mut jmin, mut jmax) = (usize::MAX, 0, usize::MAX, 0);
        for &k in &nodes {
            let (i, j) = (k % grid.nx(), k / grid.nx());
            imin = imin.min(i);
            imax = imax.max(i);
            jmin = jmin.min(j);
            jmax = jmax.max(j);
        }
        let span = (imax.saturating_sub(imin)).max(jmax.saturating_sub(jmin)) + 2;
        let omega = 2.0 / (1.0 + (PI / span as f64).sin());
        Self { nx: grid.nx(), nodes, omega }
    }

    /// Iterates until the largest residual drops below `tol`; returns sweeps.
    fn solve(&self, v: &mut [f64], rhs: Option<&[f64]>, tol: f64, max_sweeps: usize) -> usize {
        let nx = self.nx;
        for sweep in 1..=max_sweeps {
            let mut res: f64 = 0.0;
            for (n, &k) in self.nodes.iter().enumerate() {
                let avg = 0.25 * (v[k + 1] + v[k - 1] + v[k + nx] + v[k - nx]);
                let target = avg + rhs.map_or(0.0, |r| r[n]);
                let r = target - v[k];
                res = res.max(r.abs());
                v[k] += self.omega * r;
            }
            if res <= tol {
                return sweep;
            }
        }
        max_sweeps
    }
}

fn interior_node(grid: &Grid, k: usize) -> bool {
    let (i, j) = (k % grid.nx(), k / grid.nx());
    i > 0 && j > 0 && i + 1 < grid.nx() && j + 1 < grid.ny()
}

/// Harmonic replacement in `ball`: the discrete Dirichlet-energy minimizer on
/// the nodes of `{u > 0}` strictly inside the ball, agreeing with `u`
/// everywhere else.
pub fn harmonic_replace(u: &ScalarField, _w: &WeightField, ball: &Ball) -> Result<ScalarField> {
    let g = u.grid();
    if g.rank() != 2 {
        return Err(Error::param("harmonic replacement is implemented for rank-2 fields"));
    }
    if !g.contains_ball(ball) {
        return Err(Error::domain("replacement ball leaves the grid"));
    }
    let c = ball.center2();
    let r = ball.radius;
    let (i0, i1) = g.node_range(0, c[0] - r, c[0] + r);
    let (j0, j1) = g.node_range(1, c[1] - r, c[1] + r);
    let mut nodes = Vec::new();
    for j in j0..=j1 {
        for i in i0..=i1 {
            let k = g.index2(i, j);
            if interior_node(g, k) && u.values()[k] > 0.0 && vec2::dist(g.node2(i, j), c) < r {
                nodes.push(k);
            }
        }
    }
    if nodes.is_empty() {
        return Ok(u.clone());
    }
    let mut v = u.values().to_vec();
    let tol = 1e-10 * u.max_abs().max(f64::MIN_POSITIVE);
    let solver = MaskedLaplace::new(g, nodes);
    solver.solve(&mut v, None, tol, 200_000);
    ScalarField::new(g.clone(), v)
}

/// Discrete harmonic measure of `{u > 0}` seen from one pole.
#[derive(Clone, Debug)]
pub struct HarmonicMeasure {
    grid: Grid,
    pub pole: Point,
    /// Boundary nodes of the positivity set with their harmonic-measure mass.
    pub masses: Vec<(usize, f64)>,
}

impl HarmonicMeasure {
    /// Solves for the discrete Green's function at the node nearest `pole`;
    /// the mass of each boundary node is `¼ Σ G` over its interior neighbors.
    pub fn new(u: &ScalarField, pole: Point) -> Result<Self> {
        let g = u.grid();
        if g.rank() != 2 {
            return Err(Error::param("harmonic measure is implemented for rank-2 fields"));
        }
        if !g.contains(&pole) {
            return Err(Error::domain("pole lies outside the grid"));
        }
        let (pi, pj) = g.nearest_node2(pole);
        let pk = g.index2(pi, pj);
        let positive = |k: usize| u.values()[k] > 0.0;
        if !(positive(pk) && interior_node(g, pk)) {
            return Err(Error::param(format!("pole {pole:?} is not in the positivity set")));
        }
        let nodes: Vec<usize> = (0..g.len()).filter(|&k| interior_node(g, k) && positive(k)).collect();
        let rhs: Vec<f64> = nodes.iter().map(|&k| if k == pk { 1.0 } else { 0.0 }).collect();
        let mut green = vec![0.0; g.len()];
        let solver = MaskedLaplace::new(g, nodes.clone());
        solver.solve(&mut green, Some(&rhs), 1e-13, 500_000);
        let nx = g.nx();
        let mut is_unknown = vec![false; g.len()];
        for &k in &nodes {
            is_unknown[k] = true;
        }
        let mut mass = vec![0.0; g.len()];
        for &k in &nodes {
            for nb in [k + 1, k - 1, k + nx, k - nx] {
                if !is_unknown[nb] {
                    mass[nb] += 0.25 * green[k];
                }
            }
        }
        let masses = mass.into_iter().enumerate().filter(|&(_, m)| m > 0.0).collect();
        Ok(Self { grid: g.clone(), pole: g.node2(pi, pj), masses })
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().map(|m| m.1).sum()
    }

    /// Mass of the boundary inside `target`; nodes within half a cell of the
    /// rim count fractionally.
    pub fn of_ball(&self, target: &Ball) -> f64 {
        let h = self.grid.spacing();
        let c = target.center2();
        self.masses
            .iter()
            .map(|&(k, m)| {
                let p = self.grid.node(k);
                let d = vec2::dist([p[0], p[1]], c);
                m * ((target.radius - d) / h + 0.5).clamp(0.0, 1.0)
            })
            .sum()
    }
}

/// `ω^{pole}(target ∩ ∂{u > 0})`.
pub fn harmonic_measure(u: &ScalarField, pole: Point, target: &Ball) -> Result<f64> {
    Ok(HarmonicMeasure::new(u, pole)?.of_ball(target))
}
