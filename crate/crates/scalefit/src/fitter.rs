//! Grid-multistart BFGS minimization of the Huber objective.
//!
//! Every grid point is optimized to convergence with a strong-Wolfe line
//! search; the winner is the lowest converged objective, with exact ties
//! broken toward the lexicographically smallest parameter vector so repeated
//! runs pick the same optimum bit for bit.

use nalgebra::{Matrix5, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Aggregation, Dataset, FitConfig, LogSpaceParams, ScalingLawParams};
use crate::objective::LogData;

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_BRACKET_STEPS: usize = 30;
const MAX_ZOOM_STEPS: usize = 50;
const MAX_STEP_LENGTH: f64 = 1e4;

/// Why one optimizer run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Gradient infinity norm (sum scale) fell below the tolerance.
    GradientNorm,
    /// Relative objective change fell below the secondary tolerance.
    RelativeChange,
    /// The optional loose absolute-change rule fired.
    AbsoluteChange,
    /// Iteration cap reached without meeting a tolerance.
    MaxIterations,
    /// The line search could not make further progress.
    LineSearchFailure,
    /// The objective was not finite at the starting point.
    NonFiniteStart,
}

impl StopReason {
    pub fn is_converged(&self) -> bool {
        matches!(
            self,
            StopReason::GradientNorm | StopReason::RelativeChange | StopReason::AbsoluteChange
        )
    }
}

/// Outcome of optimizing from a single starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleFit {
    pub params: LogSpaceParams,
    pub objective: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub converged: bool,
}

/// One row of the multistart table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRunRecord {
    pub index: usize,
    pub init: LogSpaceParams,
    pub params: LogSpaceParams,
    pub objective: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub converged: bool,
    /// True when the run ended with a non-positive exponent.
    pub degenerate: bool,
}

/// Full multistart fit: winning parameters plus the per-start audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Winning parameters in linear space.
    pub params: ScalingLawParams,
    /// The same winner in optimizer coordinates.
    pub log_params: LogSpaceParams,
    /// Objective at the winner, in the configured aggregation.
    pub objective: f64,
    /// Index into `grid` of the winning start.
    pub best_run_index: usize,
    pub converged_runs: usize,
    pub total_runs: usize,
    /// True when the winner has a non-positive exponent.
    pub degenerate: bool,
    /// Observations actually fitted (after any outlier screen).
    pub n_observations: usize,
    pub dropped_outliers: usize,
    pub config: FitConfig,
    pub grid: Vec<GridRunRecord>,
}

impl FitResult {
    pub fn to_json_path(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn from_json_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(file)?)
    }
}

/// The standard 4500 starting points in grid order.
pub fn default_grid() -> Vec<LogSpaceParams> {
    crate::model::InitGrid::standard().points()
}

struct Objective<'a> {
    ld: &'a LogData,
    delta: f64,
    aggregation: Aggregation,
}

impl Objective<'_> {
    #[inline]
    fn eval(&self, v: &Vector5<f64>) -> (f64, Vector5<f64>) {
        self.ld.value_and_grad(v, self.delta, self.aggregation)
    }

    /// Gradient norms are compared on the sum scale regardless of the
    /// configured aggregation, so convergence does not loosen with n.
    fn grad_scale(&self) -> f64 {
        match self.aggregation {
            Aggregation::Sum => 1.0,
            Aggregation::Mean => self.ld.len() as f64,
        }
    }
}

struct LineSearchHit {
    alpha: f64,
    f: f64,
    g: Vector5<f64>,
}

/// Strong-Wolfe line search (bracket then zoom). Returns a point satisfying
/// at least the sufficient-decrease condition; `None` when no decrease is
/// attainable along `p`.
fn line_search(
    obj: &Objective,
    x: &Vector5<f64>,
    p: &Vector5<f64>,
    f0: f64,
    dphi0: f64,
) -> Option<LineSearchHit> {
    if dphi0 >= 0.0 {
        return None;
    }
    let eval_at = |alpha: f64| {
        let xa = x + alpha * p;
        let (f, g) = obj.eval(&xa);
        let dphi = g.dot(p);
        (f, g, dphi)
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut lo_best: Option<LineSearchHit> = None;
    let mut alpha = 1.0;

    for step in 0..MAX_BRACKET_STEPS {
        let (f_a, g_a, dphi_a) = eval_at(alpha);
        let armijo = f_a.is_finite() && f_a <= f0 + WOLFE_C1 * alpha * dphi0;
        if !armijo || (step > 0 && f_a >= f_prev) {
            return zoom(obj, x, p, f0, dphi0, alpha_prev, f_prev, lo_best, alpha);
        }
        if dphi_a.abs() <= -WOLFE_C2 * dphi0 {
            return Some(LineSearchHit { alpha, f: f_a, g: g_a });
        }
        let hit = LineSearchHit { alpha, f: f_a, g: g_a };
        if dphi_a >= 0.0 {
            return zoom(obj, x, p, f0, dphi0, alpha, f_a, Some(hit), alpha_prev);
        }
        lo_best = Some(hit);
        alpha_prev = alpha;
        f_prev = f_a;
        if alpha >= MAX_STEP_LENGTH {
            // Cannot expand further; settle for the best Armijo point.
            return lo_best;
        }
        alpha = (2.0 * alpha).min(MAX_STEP_LENGTH);
    }
    lo_best
}

/// Narrow a bracket `[lo, hi]` that contains a strong-Wolfe point.
#[allow(clippy::too_many_arguments)]
fn zoom(
    obj: &Objective,
    x: &Vector5<f64>,
    p: &Vector5<f64>,
    f0: f64,
    dphi0: f64,
    mut alpha_lo: f64,
    mut f_lo: f64,
    mut lo_hit: Option<LineSearchHit>,
    mut alpha_hi: f64,
) -> Option<LineSearchHit> {
    let eval_at = |alpha: f64| {
        let xa = x + alpha * p;
        let (f, g) = obj.eval(&xa);
        let dphi = g.dot(p);
        (f, g, dphi)
    };

    for _ in 0..MAX_ZOOM_STEPS {
        let width = (alpha_hi - alpha_lo).abs();
        if width <= 1e-14 * alpha_lo.abs().max(1.0) {
            break;
        }
        // Bisection, robust against the non-finite region the exp-space
        // parameters can wander into.
        let alpha = 0.5 * (alpha_lo + alpha_hi);
        let (f_a, g_a, dphi_a) = eval_at(alpha);
        let armijo = f_a.is_finite() && f_a <= f0 + WOLFE_C1 * alpha * dphi0;
        if !armijo || f_a >= f_lo {
            alpha_hi = alpha;
        } else {
            if dphi_a.abs() <= -WOLFE_C2 * dphi0 {
                return Some(LineSearchHit { alpha, f: f_a, g: g_a });
            }
            if dphi_a * (alpha_hi - alpha_lo) >= 0.0 {
                alpha_hi = alpha_lo;
            }
            alpha_lo = alpha;
            f_lo = f_a;
            lo_hit = Some(LineSearchHit { alpha, f: f_a, g: g_a });
        }
    }
    lo_hit
}

struct BfgsOutcome {
    x: Vector5<f64>,
    f: f64,
    iterations: usize,
    stop_reason: StopReason,
}

fn bfgs_minimize(obj: &Objective, x0: Vector5<f64>, config: &FitConfig) -> BfgsOutcome {
    let grad_scale = obj.grad_scale();
    let (mut f, mut g) = obj.eval(&x0);
    if !f.is_finite() {
        return BfgsOutcome { x: x0, f, iterations: 0, stop_reason: StopReason::NonFiniteStart };
    }
    let mut x = x0;
    let mut h = Matrix5::<f64>::identity();
    let mut first_update = true;
    let mut iterations = 0;

    loop {
        if g.amax() * grad_scale <= config.grad_tolerance {
            return BfgsOutcome { x, f, iterations, stop_reason: StopReason::GradientNorm };
        }
        if iterations >= config.max_iterations {
            return BfgsOutcome { x, f, iterations, stop_reason: StopReason::MaxIterations };
        }

        let mut p = -(&h * g);
        let mut dphi0 = p.dot(&g);
        if !(dphi0 < 0.0) {
            // The approximation lost positive definiteness; restart steepest.
            h = Matrix5::identity();
            first_update = true;
            p = -g;
            dphi0 = p.dot(&g);
        }

        let mut hit = line_search(obj, &x, &p, f, dphi0);
        if hit.is_none() && !first_update {
            // Retry once along steepest descent before giving up.
            h = Matrix5::identity();
            first_update = true;
            p = -g;
            dphi0 = p.dot(&g);
            hit = line_search(obj, &x, &p, f, dphi0);
        }
        let hit = match hit {
            Some(hit) => hit,
            None => {
                return BfgsOutcome { x, f, iterations, stop_reason: StopReason::LineSearchFailure }
            }
        };

        iterations += 1;
        let x_new = x + hit.alpha * p;
        let s = x_new - x;
        let y = hit.g - g;
        let decrease = f - hit.f;

        x = x_new;
        f = hit.f;
        g = hit.g;

        if let Some(tau) = config.absolute_change_stop {
            if decrease <= tau {
                return BfgsOutcome { x, f, iterations, stop_reason: StopReason::AbsoluteChange };
            }
        }
        if decrease <= config.relative_change_tolerance * f.abs().max(1e-300) {
            return BfgsOutcome { x, f, iterations, stop_reason: StopReason::RelativeChange };
        }

        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if first_update {
                let yy = y.dot(&y);
                if yy > 0.0 {
                    h *= sy / yy;
                }
                first_update = false;
            }
            let rho = 1.0 / sy;
            let left = Matrix5::identity() - rho * s * y.transpose();
            h = left * h * left.transpose() + rho * s * s.transpose();
            h = 0.5 * (h + h.transpose());
        }
    }
}

pub(crate) fn minimize_prepared(
    ld: &LogData,
    config: &FitConfig,
    init: &LogSpaceParams,
) -> SingleFit {
    let obj = Objective { ld, delta: config.delta, aggregation: config.aggregation };
    let out = bfgs_minimize(&obj, init.as_vector(), config);
    SingleFit {
        params: LogSpaceParams::from_vector(&out.x),
        objective: out.f,
        iterations: out.iterations,
        stop_reason: out.stop_reason,
        converged: out.stop_reason.is_converged(),
    }
}

/// Optimize from one explicit starting point, without the outlier screen.
pub fn fit_single(data: &Dataset, config: &FitConfig, init: &LogSpaceParams) -> Result<SingleFit> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::BadInput("fit_single needs a non-empty dataset".into()));
    }
    let ld = LogData::from_dataset(data)?;
    Ok(minimize_prepared(&ld, config, init))
}

fn lex_less(a: &LogSpaceParams, b: &LogSpaceParams) -> bool {
    let va = a.as_vector();
    let vb = b.as_vector();
    for k in 0..5 {
        if va[k] < vb[k] {
            return true;
        }
        if va[k] > vb[k] {
            return false;
        }
    }
    false
}

/// True when `cand` should replace `best`: strictly lower objective, or a
/// lexicographically smaller parameter vector inside the relative tie window.
fn improves(cand_obj: f64, cand_params: &LogSpaceParams, best_obj: f64, best_params: &LogSpaceParams) -> bool {
    let scale = cand_obj.abs().max(best_obj.abs()).max(1e-300);
    if (cand_obj - best_obj).abs() <= 1e-10 * scale {
        lex_less(cand_params, best_params)
    } else {
        cand_obj < best_obj
    }
}

pub(crate) fn best_of_grid_prepared(ld: &LogData, config: &FitConfig) -> Option<SingleFit> {
    let starts = config.init_grid.points();
    let fits: Vec<SingleFit> =
        starts.iter().map(|init| minimize_prepared(ld, config, init)).collect();
    let mut best: Option<SingleFit> = None;
    for fit in fits {
        if !(fit.converged && fit.objective.is_finite()) {
            continue;
        }
        match &best {
            None => best = Some(fit),
            Some(b) => {
                if improves(fit.objective, &fit.params, b.objective, &b.params) {
                    best = Some(fit);
                }
            }
        }
    }
    best
}

/// Multistart fit over the configured grid.
///
/// When `config.drop_outliers` is set, undertrained runs are removed before
/// fitting; `dropped_outliers` records how many.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let (working, dropped) = if config.drop_outliers {
        let (kept, dropped) = data.partition_outliers(config.outlier_threshold);
        (kept, dropped.len())
    } else {
        (data.clone(), 0)
    };
    if working.is_empty() {
        return Err(Error::BadInput(
            "no observations left to fit (empty dataset or everything screened out)".into(),
        ));
    }
    let ld = LogData::from_dataset(&working)?;
    let starts = config.init_grid.points();

    let grid: Vec<GridRunRecord> = starts
        .par_iter()
        .enumerate()
        .map(|(index, init)| {
            let fit = minimize_prepared(&ld, config, init);
            GridRunRecord {
                index,
                init: *init,
                params: fit.params,
                objective: fit.objective,
                iterations: fit.iterations,
                stop_reason: fit.stop_reason,
                converged: fit.converged,
                degenerate: fit.params.is_degenerate(),
            }
        })
        .collect();

    let converged_runs = grid.iter().filter(|r| r.converged).count();
    let mut best_index: Option<usize> = None;
    for rec in &grid {
        if !(rec.converged && rec.objective.is_finite()) {
            continue;
        }
        match best_index {
            None => best_index = Some(rec.index),
            Some(b) => {
                let best = &grid[b];
                if improves(rec.objective, &rec.params, best.objective, &best.params) {
                    best_index = Some(rec.index);
                }
            }
        }
    }
    let best_index = best_index.ok_or_else(|| {
        Error::Numerical(format!(
            "no optimizer start converged ({} starts, {} observations)",
            grid.len(),
            working.len()
        ))
    })?;
    let winner = &grid[best_index];

    Ok(FitResult {
        params: winner.params.to_linear(),
        log_params: winner.params,
        objective: winner.objective,
        best_run_index: best_index,
        converged_runs,
        total_runs: grid.len(),
        degenerate: winner.params.is_degenerate(),
        n_observations: working.len(),
        dropped_outliers: dropped,
        config: config.clone(),
        grid,
    })
}
