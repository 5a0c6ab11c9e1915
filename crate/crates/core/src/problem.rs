//! Problem descriptions: Hölder weights, Dirichlet data and the weight
//! perturbation that turns exact minimizers into certified almost-minimizers.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{vec2, Grid, Point, ScalarField};

pub const PROBLEM_SCHEMA: &str = "fblab.problem.v1";

/// The coefficient pair `q₊`, `q₋` with its Hölder metadata.
#[derive(Clone, Debug)]
pub struct WeightField {
    pub q_plus: ScalarField,
    pub q_minus: ScalarField,
    /// Lower bound of `q₊` (and of `q₋` when that phase is non-degenerate).
    pub c0: f64,
    pub alpha: f64,
    pub holder_seminorm: f64,
}

impl WeightField {
    pub fn new(
        q_plus: ScalarField,
        q_minus: ScalarField,
        c0: f64,
        alpha: f64,
        holder_seminorm: f64,
    ) -> Result<Self> {
        if q_plus.grid() != q_minus.grid() {
            return Err(Error::param("q₊ and q₋ must share a grid"));
        }
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(Error::param(format!("c0 must be positive, got {c0}")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::param(format!("Hölder exponent must lie in (0, 1], got {alpha}")));
        }
        if !(holder_seminorm >= 0.0 && holder_seminorm.is_finite()) {
            return Err(Error::param("Hölder seminorm must be finite and nonnegative"));
        }
        let slack = 1e-12 * c0;
        if q_plus.min() < c0 - slack {
            return Err(Error::param(format!("q₊ drops to {} below c0 = {c0}", q_plus.min())));
        }
        let above = q_minus.values().iter().all(|&v| v >= c0 - slack);
        let ordered = q_minus
            .values()
            .iter()
            .zip(q_plus.values())
            .all(|(&m, &p)| m >= 0.0 && m <= p + slack);
        if !(above || ordered) {
            return Err(Error::param(
                "q₋ must either stay above c0 or satisfy 0 ≤ q₋ ≤ q₊ everywhere",
            ));
        }
        Ok(Self { q_plus, q_minus, c0, alpha, holder_seminorm })
    }

    /// Constant one-phase weights `q₊ ≡ q`, `q₋ ≡ 0`.
    pub fn constant(grid: &Grid, q: f64) -> Result<Self> {
        Self::new(
            ScalarField::constant(grid.clone(), q)?,
            ScalarField::constant(grid.clone(), 0.0)?,
            q,
            1.0,
            0.0,
        )
    }

    /// Constant two-phase weights.
    pub fn constant_two_phase(grid: &Grid, q_plus: f64, q_minus: f64) -> Result<Self> {
        Self::new(
            ScalarField::constant(grid.clone(), q_plus)?,
            ScalarField::constant(grid.clone(), q_minus)?,
            q_plus.min(if q_minus > 0.0 { q_minus } else { q_plus }),
            1.0,
            0.0,
        )
    }

    pub fn grid(&self) -> &Grid {
        self.q_plus.grid()
    }

    pub fn is_one_phase(&self) -> bool {
        self.q_minus.values().iter().all(|&v| v == 0.0)
    }

    pub fn q_plus_at(&self, p: &[f64]) -> Result<f64> {
        self.q_plus.eval(p)
    }

    pub fn q_minus_at(&self, p: &[f64]) -> Result<f64> {
        self.q_minus.eval(p)
    }

    /// Checks the empirical Hölder quotient of both weights against
    /// `1.05 · Λ` over `n_pairs` random pairs.
    pub fn check_holder(&self, n_pairs: usize, seed: u64) -> Result<f64> {
        let qp = empirical_holder_quotient(&self.q_plus, self.alpha, n_pairs, seed)?;
        let qm = empirical_holder_quotient(&self.q_minus, self.alpha, n_pairs, seed ^ 0x5eed)?;
        let q = qp.max(qm);
        if q > 1.05 * self.holder_seminorm + 1e-12 {
            return Err(Error::param(format!(
                "empirical Hölder quotient {q} exceeds 1.05 × Λ = {}",
                1.05 * self.holder_seminorm
            )));
        }
        Ok(q)
    }
}

/// Almost-minimality constants `(κ, α)`; `κ = 0` is an exact minimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmostMinParams {
    pub kappa: f64,
    pub alpha: f64,
}

impl AlmostMinParams {
    pub fn new(kappa: f64, alpha: f64) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::param(format!("κ must be finite and nonnegative, got {kappa}")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::param(format!("α must lie in (0, 1], got {alpha}")));
        }
        Ok(Self { kappa, alpha })
    }

    pub fn exact(alpha: f64) -> Self {
        Self { kappa: 0.0, alpha }
    }

    /// Allowed relative defect `κ r^α` on a ball of radius `r`.
    pub fn allowance(&self, r: f64) -> f64 {
        self.kappa * r.powf(self.alpha)
    }
}

/// Normalized Weierstrass sum `S(x) ∈ [-1, 1]` with its Hölder seminorm.
struct Weierstrass {
    terms: Vec<(f64, Point, f64)>,
    norm: f64,
    seminorm: f64,
}

impl Weierstrass {
    fn new(seed: u64, alpha: f64, grid: &Grid) -> Self {
        let extent = (0..grid.rank()).map(|a| grid.extent(a)).fold(0.0, f64::max);
        let levels = (extent / grid.spacing()).log2().ceil().max(0.0) as i32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let terms: Vec<(f64, Point, f64)> = (0..=levels)
            .map(|k| {
                let theta = vec2::from_angle(rng.gen_range(0.0..2.0 * PI));
                let phase = rng.gen_range(0.0..2.0 * PI);
                (2f64.powi(k), theta, phase)
            })
            .collect();
        let weight = |freq: f64| freq.powf(-alpha);
        let norm: f64 = terms.iter().map(|t| weight(t.0)).sum();
        // |S(x) - S(y)| ≤ Σ w_k min(2, 2^k d) / Σ w_k; sup of that over d^α on a
        // fine logarithmic grid of separations.
        let diam = (0..grid.rank()).map(|a| grid.extent(a).powi(2)).sum::<f64>().sqrt();
        let d_min = 2f64.powi(-levels - 4);
        let steps = ((diam / d_min).log2() * 32.0).ceil() as usize + 1;
        let mut seminorm: f64 = 0.0;
        for s in 0..=steps {
            let d = (d_min * 2f64.powf(s as f64 / 32.0)).min(diam);
            let bound: f64 = terms.iter().map(|t| weight(t.0) * (2.0f64).min(t.0 * d)).sum();
            seminorm = seminorm.max(bound / norm / d.powf(alpha));
        }
        Self { terms, norm, seminorm: seminorm * 1.01 }
    }

    fn eval(&self, p: &[f64], alpha: f64) -> f64 {
        let x = [p[0], p[1]];
        self.terms
            .iter()
            .map(|(freq, theta, phase)| freq.powf(-alpha) * (freq * vec2::dot(x, *theta) + phase).cos())
            .sum::<f64>()
            / self.norm
    }
}

/// A generated Hölder field with its certified seminorm.
#[derive(Clone, Debug)]
pub struct HolderField {
    pub field: ScalarField,
    pub seminorm: f64,
}

/// Weierstrass-type weight `q = c₀ + amplitude · (1 + S) / 2`, so that
/// `c₀ ≤ q ≤ c₀ + amplitude` with Hölder exponent `alpha` at every resolved
/// scale. Directions and phases are drawn from `seed`.
pub fn make_holder_field(
    seed: u64,
    c0: f64,
    amplitude: f64,
    alpha: f64,
    grid: &Grid,
) -> Result<HolderField> {
    if !(c0 > 0.0) {
        return Err(Error::param(format!("c0 must be positive, got {c0}")));
    }
    if !(amplitude >= 0.0 && amplitude < c0) {
        return Err(Error::param(format!("amplitude {amplitude} must lie in [0, c0 = {c0})")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param(format!("α must lie in (0, 1], got {alpha}")));
    }
    if grid.rank() != 2 {
        return Err(Error::param("Hölder weights are generated on rank-2 grids"));
    }
    if amplitude == 0.0 {
        return Ok(HolderField { field: ScalarField::constant(grid.clone(), c0)?, seminorm: 0.0 });
    }
    let w = Weierstrass::new(seed, alpha, grid);
    let field = ScalarField::from_fn(grid.clone(), |p| {
        (c0 + amplitude * 0.5 * (1.0 + w.eval(p, alpha))).max(c0)
    })?;
    Ok(HolderField { field, seminorm: 0.5 * amplitude * w.seminorm })
}

/// Largest `|f(x) - f(y)| / |x - y|^α` over random pairs: half uniformly
/// spread, half at log-uniform separations down to a quarter cell.
pub fn empirical_holder_quotient(
    field: &ScalarField,
    alpha: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let g = field.grid();
    if g.rank() != 2 {
        return Err(Error::param("Hölder estimator needs a rank-2 field"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = [g.origin()[0], g.origin()[1]];
    let hi = [g.upper(0), g.upper(1)];
    let diam = g.extent(0).hypot(g.extent(1));
    let h = g.spacing();
    let mut best: f64 = 0.0;
    let pt = |rng: &mut ChaCha8Rng| [rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1])];
    for k in 0..n_pairs {
        let x = pt(&mut rng);
        let y = if k % 2 == 0 {
            pt(&mut rng)
        } else {
            let d = (h / 4.0) * (diam / (h / 4.0)).powf(rng.gen::<f64>());
            let dir = vec2::from_angle(rng.gen_range(0.0..2.0 * PI));
            let y = vec2::add(x, vec2::scale(dir, d));
            if !g.contains(&y) {
                continue;
            }
            y
        };
        let d = vec2::dist(x, y);
        if d == 0.0 {
            continue;
        }
        let q = (field.eval2_unchecked(x) - field.eval2_unchecked(y)).abs() / d.powf(alpha);
        best = best.max(q);
    }
    Ok(best)
}

/// Output of [`perturbed_weights`].
#[derive(Clone, Debug)]
pub struct Perturbation {
    /// `q̃ = q·√(1+ε)`.
    pub weights: WeightField,
    /// Dirichlet coefficient `1 + ε` of the perturbed functional.
    pub coefficient: ScalarField,
    pub epsilon_seminorm: f64,
    pub epsilon_max_abs: f64,
    /// Almost-minimality constants of the perturbed minimizer for the
    /// unperturbed functional.
    pub params: AlmostMinParams,
}

/// Perturbs the whole integrand by a mean-zero Hölder factor `1 + ε`,
/// `|ε| ≤ 1/2`, seminorm `≤ Λ_pert`. The exact minimizer of
/// `∫ (1+ε)(|∇v|² + q₊² χ{v>0} + q₋² χ{v<0})` satisfies
/// `J(u) ≤ (1 + κ r^α) J(v)` on every `B(x, r)` with `κ = 2^{α+2} Λ_pert`,
/// because `sup_B(1+ε) / inf_B(1+ε) ≤ 1 + 2 osc_B ε`.
pub fn perturbed_weights(
    w: &WeightField,
    seed: u64,
    lambda_pert: f64,
    alpha: f64,
) -> Result<Perturbation> {
    if !(lambda_pert >= 0.0 && lambda_pert.is_finite()) {
        return Err(Error::param(format!("Λ_pert must be nonnegative, got {lambda_pert}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param(format!("α must lie in (0, 1], got {alpha}")));
    }
    let grid = w.grid().clone();
    let kappa = 2f64.powf(alpha + 2.0) * lambda_pert;
    let params = AlmostMinParams::new(kappa, alpha)?;
    if lambda_pert == 0.0 {
        return Ok(Perturbation {
            weights: w.clone(),
            coefficient: ScalarField::constant(grid, 1.0)?,
            epsilon_seminorm: 0.0,
            epsilon_max_abs: 0.0,
            params,
        });
    }
    let ws = Weierstrass::new(seed, alpha, &grid);
    let raw = ScalarField::from_fn(grid.clone(), |p| ws.eval(p, alpha))?;
    let mean = raw.values().iter().sum::<f64>() / raw.values().len() as f64;
    let spread = raw.values().iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
    let scale = (lambda_pert / ws.seminorm).min(if spread > 0.0 { 0.5 / spread } else { f64::INFINITY });
    let eps = raw.map(|v| scale * (v - mean))?;
    let eps_min = eps.min();
    let eps_max = eps.max();
    let eps_seminorm = scale * ws.seminorm;
    let factor = eps.map(|e| (1.0 + e).sqrt())?;
    let mul = |q: &ScalarField| -> Result<ScalarField> {
        ScalarField::new(
            grid.clone(),
            q.values().iter().zip(factor.values()).map(|(a, b)| a * b).collect(),
        )
    };
    let q_plus = mul(&w.q_plus)?;
    let q_minus = mul(&w.q_minus)?;
    let q_max = w.q_plus.max().max(w.q_minus.max());
    let seminorm = (1.0 + eps_max).sqrt() * w.holder_seminorm
        + q_max * eps_seminorm / (2.0 * (1.0 + eps_min).sqrt());
    let c0 = (w.c0 * (1.0 + eps_min).sqrt()).min(q_plus.min());
    let weights = WeightField::new(q_plus, q_minus, c0, w.alpha.min(alpha), seminorm)?;
    let coefficient = eps.map(|e| 1.0 + e)?;
    Ok(Perturbation {
        weights,
        coefficient,
        epsilon_seminorm: eps_seminorm,
        epsilon_max_abs: eps_min.abs().max(eps_max.abs()),
        params,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    OnePhase,
    TwoPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    Constant { value: f64 },
    Holder { seed: u64, c0: f64, amplitude: f64, alpha: f64 },
    /// Field file in the sidecar format, relative to the spec's directory.
    File { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    pub q_plus: WeightSpec,
    #[serde(default)]
    pub q_minus: Option<WeightSpec>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

/// Dirichlet data on the outer boundary of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirichletSpec {
    /// `λ⟨x - c, ν⟩₊`
    HalfPlane { lambda: f64, point: Point, normal: Point },
    /// `λ₊⟨x, ν⟩₊ - λ₋⟨x, ν⟩₋`
    TwoPlane { lambda_plus: f64, lambda_minus: f64, normal: Point },
    /// Values on the perimeter nodes, counter-clockwise from the node at the
    /// origin (see [`perimeter_nodes`]).
    Tabulated { trace: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub seed: u64,
    pub lambda_pert: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub schema: String,
    pub grid: GridSpec,
    pub phase: Phase,
    pub weights: WeightsSpec,
    pub dirichlet: DirichletSpec,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
}

/// Node indices of the grid perimeter, counter-clockwise from `(0, 0)`.
pub fn perimeter_nodes(grid: &Grid) -> Vec<usize> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut out = Vec::with_capacity(2 * (nx + ny) - 4);
    out.extend((0..nx).map(|i| grid.index2(i, 0)));
    out.extend((1..ny).map(|j| grid.index2(nx - 1, j)));
    out.extend((0..nx - 1).rev().map(|i| grid.index2(i, ny - 1)));
    out.extend((1..ny - 1).rev().map(|j| grid.index2(0, j)));
    out
}

impl DirichletSpec {
    /// Boundary values on the perimeter of `grid`, in [`perimeter_nodes`] order.
    pub fn trace(&self, grid: &Grid) -> Result<Vec<f64>> {
        let nodes = perimeter_nodes(grid);
        let unit = |n: Point| {
            vec2::unit(n).ok_or_else(|| Error::param("boundary normal must be nonzero"))
        };
        match self {
            DirichletSpec::HalfPlane { lambda, point, normal } => {
                let nu = unit(*normal)?;
                Ok(nodes
                    .iter()
                    .map(|&k| {
                        let x = grid.node(k);
                        lambda * vec2::dot(vec2::sub([x[0], x[1]], *point), nu).max(0.0)
                    })
                    .collect())
            }
            DirichletSpec::TwoPlane { lambda_plus, lambda_minus, normal } => {
                let nu = unit(*normal)?;
                Ok(nodes
                    .iter()
                    .map(|&k| {
                        let x = grid.node(k);
                        let t = vec2::dot([x[0], x[1]], nu);
                        lambda_plus * t.max(0.0) - lambda_minus * (-t).max(0.0)
                    })
                    .collect())
            }
            DirichletSpec::Tabulated { trace } => {
                if trace.len() != nodes.len() {
                    return Err(Error::param(format!(
                        "tabulated trace has {} values, the perimeter has {} nodes",
                        trace.len(),
                        nodes.len()
                    )));
                }
                if trace.iter().any(|v| !v.is_finite()) {
                    return Err(Error::param("tabulated trace contains non-finite values"));
                }
                Ok(trace.clone())
            }
        }
    }
}

/// A validated, fully sampled problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub grid: Grid,
    pub phase: Phase,
    /// Weights of the functional the result is audited against.
    pub weights: WeightField,
    /// Perimeter values in [`perimeter_nodes`] order.
    pub trace: Vec<f64>,
    pub perturbation: Option<Perturbation>,
}

impl Problem {
    pub fn new(grid: Grid, phase: Phase, weights: WeightField, dirichlet: &DirichletSpec) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::param("solves are implemented for rank-2 grids only"));
        }
        if weights.grid() != &grid {
            return Err(Error::param("weights must be sampled on the problem grid"));
        }
        let trace = dirichlet.trace(&grid)?;
        if phase == Phase::OnePhase && trace.iter().any(|&v| v < 0.0) {
            return Err(Error::param("one-phase boundary data must be nonnegative"));
        }
        Ok(Self { grid, phase, weights, trace, perturbation: None })
    }

    pub fn with_perturbation(mut self, seed: u64, lambda_pert: f64, alpha: f64) -> Result<Self> {
        self.perturbation = Some(perturbed_weights(&self.weights, seed, lambda_pert, alpha)?);
        Ok(self)
    }

    /// Almost-minimality constants the solution is expected to satisfy for
    /// [`Problem::weights`].
    pub fn almost_min_params(&self) -> AlmostMinParams {
        match &self.perturbation {
            Some(p) => p.params,
            None => AlmostMinParams::exact(self.weights.alpha),
        }
    }
}

impl ProblemSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: ProblemSpec = crate::io::parse_json(text)?;
        if spec.schema != PROBLEM_SCHEMA {
            return Err(Error::Json {
                path: "schema".into(),
                message: format!("expected `{PROBLEM_SCHEMA}`, got `{}`", spec.schema),
            });
        }
        Ok(spec)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.origin.clone(), self.grid.spacing, self.grid.dims.clone())
    }

    /// Samples weights and boundary data. File weights resolve relative to `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Problem> {
        let grid = self.grid()?;
        let alpha = self.weights.alpha;
        let (q_plus, lam_p, lb_p) = sample_weight(&self.weights.q_plus, &grid, alpha, base_dir)?;
        let (q_minus, lam_m, _) = match (&self.weights.q_minus, self.phase) {
            (Some(spec), Phase::TwoPhase) => sample_weight(spec, &grid, alpha, base_dir)?,
            _ => (ScalarField::constant(grid.clone(), 0.0)?, 0.0, 0.0),
        };
        let c0 = lb_p.min(q_plus.min());
        let weights = WeightField::new(q_plus, q_minus, c0, alpha, lam_p.max(lam_m))?;
        let problem = Problem::new(grid, self.phase, weights, &self.dirichlet)?;
        match &self.perturbation {
            Some(p) => problem.with_perturbation(p.seed, p.lambda_pert, p.alpha),
            None => Ok(problem),
        }
    }
}

/// Returns the sampled weight, its Hölder seminorm and its lower bound.
fn sample_weight(
    spec: &WeightSpec,
    grid: &Grid,
    alpha: f64,
    base_dir: &Path,
) -> Result<(ScalarField, f64, f64)> {
    match spec {
        WeightSpec::Constant { value } => {
            if !(*value >= 0.0 && value.is_finite()) {
                return Err(Error::param(format!("constant weight must be nonnegative, got {value}")));
            }
            Ok((ScalarField::constant(grid.clone(), *value)?, 0.0, *value))
        }
        WeightSpec::Holder { seed, c0, amplitude, alpha: a } => {
            if *a < alpha {
                return Err(Error::param(format!(
                    "weight exponent {a} is below the declared exponent {alpha}"
                )));
            }
            let hf = make_holder_field(*seed, *c0, *amplitude, *a, grid)?;
            // a C^a field is C^alpha on a bounded set with seminorm scaled by diam^(a - alpha)
            let diam = grid.extent(0).hypot(grid.extent(1));
            Ok((hf.field, hf.seminorm * diam.powf(a - alpha), *c0))
        }
        WeightSpec::File { path } => {
            let field = crate::io::read_field(&base_dir.join(path))?;
            if field.grid() != grid {
                return Err(Error::param(format!("weight file `{path}` is on a different grid")));
            }
            let lam = 1.05 * empirical_holder_quotient(&field, alpha, 20_000, 0)?;
            let lb = field.min();
            Ok((field, lam, lb))
        }
    }
}
