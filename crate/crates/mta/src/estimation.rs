//! Maximum-likelihood estimation of intensity coefficients.
//!
//! Each constant-intensity segment is one Poisson-regression observation:
//! the segment's conversion count is the response and its exposure is the
//! offset. The log-likelihood (dropping the `log y!` constant) is
//!
//! ```text
//! sum over segments of  -exp(eta) * exposure + y * (eta + ln exposure)
//! ```
//!
//! with `eta` the weighted sum of the segment's active coefficients. The
//! objective is concave in the coefficients, so damped Newton steps converge
//! globally; an optional ridge penalty on non-intercept coefficients keeps
//! sparse keys finite.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::UserPath;
use crate::intensity::{
    CoefKey, Conditioning, IntensityModel, ModelSpec, SegScratch, Segment, SegmentView, Segmenter,
};

/// Coefficients are clamped at this floor. A key active only on
/// zero-conversion segments is separated (its MLE is minus infinity);
/// `exp(-30)` is zero at double precision, so the floor resolves the fit
/// while the key is flagged in `floored_keys`.
pub const COEF_FLOOR: f64 = -30.0;

/// Segments per accumulation chunk. Chunk partials are reduced in fixed
/// order so sums are bit-identical at any worker count.
const ACCUM_CHUNK: usize = 16384;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepControl {
    NewtonWithHalving,
    GradientDescent { learning_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the max-norm of the (projected) gradient.
    pub gradient_tolerance: f64,
    /// Ridge penalty on non-intercept coefficients; zero by default.
    pub ridge_penalty: f64,
    pub step_control: StepControl,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            ridge_penalty: 0.0,
            step_control: StepControl::NewtonWithHalving,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidConfig("gradient_tolerance must be positive".into()));
        }
        if self.ridge_penalty < 0.0 {
            return Err(Error::InvalidConfig("ridge_penalty must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: IntensityModel,
    /// Unpenalized log-likelihood at the final iterate (constant `log y!`
    /// excluded).
    pub final_log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Total exposure per key, including zero entries for spec-derivable
    /// keys never active in the corpus.
    pub per_key_offset: BTreeMap<CoefKey, f64>,
    /// Spec-derivable keys with zero offset, excluded from the fit.
    pub dropped_keys: Vec<CoefKey>,
    /// Keys clamped at [`COEF_FLOOR`] (separation).
    pub floored_keys: Vec<CoefKey>,
    /// Penalized objective after each iteration, starting at the initial
    /// iterate.
    pub objective_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Model fit diagnostics over a segmented corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub log_likelihood: f64,
    /// Mean per-segment Poisson deviance.
    pub poisson_loss: f64,
    /// Predicted conversions over observed conversions, minus one; `None`
    /// when the corpus has no observed conversions.
    pub prediction_bias: Option<f64>,
    pub observed_conversions: u64,
    pub predicted_conversions: f64,
}

/// Log-likelihood of a segmented corpus under a model (excluding the
/// `log y!` constant). Errors if a segment carries a key the model lacks.
pub fn log_likelihood(model: &IntensityModel, segments: &[Segment]) -> Result<f64> {
    let mut total = 0.0;
    for s in segments {
        let eta = model.segment_eta(s)?;
        let e = s.exposure();
        let y = f64::from(s.conversions());
        total += -eta.exp() * e + y * (eta + e.ln());
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Design matrix
// ---------------------------------------------------------------------------

/// Sparse (CSR) design: one row per segment, one column per coefficient key.
/// Flat storage keeps the Newton passes allocation-free and cache-friendly.
struct Design {
    keys: Vec<CoefKey>,
    intercept: usize,
    row_ptr: Vec<u32>,
    col: Vec<u32>,
    val: Vec<f64>,
    y: Vec<f64>,
    exposure: Vec<f64>,
    log_exposure: Vec<f64>,
    total_conversions: f64,
    total_exposure: f64,
    /// Conversions on segments where each key is active; zero means the
    /// key is separated (its MLE is minus infinity).
    key_conversions: Vec<f64>,
    /// Total exposure per key.
    key_offsets: Vec<f64>,
}

/// A CSR block built by one worker; blocks are concatenated in input order.
#[derive(Default)]
struct DesignBlock {
    lens: Vec<u32>,
    col: Vec<u32>,
    val: Vec<f64>,
    y: Vec<f64>,
    exposure: Vec<f64>,
    key_conversions: Vec<f64>,
    key_offsets: Vec<f64>,
}

impl DesignBlock {
    fn new(p: usize) -> Self {
        Self {
            key_conversions: vec![0.0; p],
            key_offsets: vec![0.0; p],
            ..Self::default()
        }
    }

    fn push_row(&mut self, index: &BTreeMap<CoefKey, u32>, view: &SegmentView<'_>) {
        self.lens.push(view.active.len() as u32);
        let y = f64::from(view.conversions);
        for (key, w) in view.active {
            let j = index[key];
            self.col.push(j);
            self.val.push(*w);
            self.key_conversions[j as usize] += y;
            self.key_offsets[j as usize] += view.exposure();
        }
        self.y.push(y);
        self.exposure.push(view.exposure());
    }
}

impl Design {
    fn assemble(keys: Vec<CoefKey>, blocks: Vec<DesignBlock>) -> Result<Self> {
        let p = keys.len();
        let intercept = keys
            .iter()
            .position(|k| *k == CoefKey::Intercept)
            .ok_or_else(|| Error::KeyMismatch("corpus has no intercept-bearing segments".into()))?;
        let rows: usize = blocks.iter().map(|b| b.y.len()).sum();
        let nnz: usize = blocks.iter().map(|b| b.col.len()).sum();

        let mut design = Design {
            keys,
            intercept,
            row_ptr: Vec::with_capacity(rows + 1),
            col: Vec::with_capacity(nnz),
            val: Vec::with_capacity(nnz),
            y: Vec::with_capacity(rows),
            exposure: Vec::with_capacity(rows),
            log_exposure: Vec::with_capacity(rows),
            total_conversions: 0.0,
            total_exposure: 0.0,
            key_conversions: vec![0.0; p],
            key_offsets: vec![0.0; p],
        };
        design.row_ptr.push(0);
        for block in blocks {
            for len in block.lens {
                let last = *design.row_ptr.last().unwrap();
                design.row_ptr.push(last + len);
            }
            design.col.extend_from_slice(&block.col);
            design.val.extend_from_slice(&block.val);
            for (i, y) in block.y.iter().enumerate() {
                design.y.push(*y);
                design.exposure.push(block.exposure[i]);
                design.log_exposure.push(block.exposure[i].ln());
                design.total_conversions += y;
                design.total_exposure += block.exposure[i];
            }
            for j in 0..p {
                design.key_conversions[j] += block.key_conversions[j];
                design.key_offsets[j] += block.key_offsets[j];
            }
        }
        Ok(design)
    }

    fn from_segments(segments: &[Segment]) -> Result<Self> {
        let mut set: std::collections::BTreeSet<CoefKey> = Default::default();
        for s in segments {
            for (key, _) in s.active() {
                if !set.contains(key) {
                    set.insert(key.clone());
                }
            }
        }
        let keys: Vec<CoefKey> = set.into_iter().collect();
        let index: BTreeMap<CoefKey, u32> =
            keys.iter().enumerate().map(|(i, k)| (k.clone(), i as u32)).collect();

        let mut block = DesignBlock::new(keys.len());
        for s in segments {
            let (lo, hi) = s.interval();
            block.push_row(
                &index,
                &SegmentView { lo, hi, conversions: s.conversions(), active: s.active() },
            );
        }
        Self::assemble(keys, vec![block])
    }

    /// Streams every path through the segmenter: one parallel pass to
    /// discover the key universe, one to fill the rows. Chunks concatenate
    /// in path order, so the design is identical at any worker count.
    fn from_paths(segmenter: &Segmenter, paths: &[UserPath]) -> Result<Self> {
        const PATH_CHUNK: usize = 4096;
        let key_sets: Vec<std::collections::BTreeSet<CoefKey>> = paths
            .par_chunks(PATH_CHUNK)
            .map(|chunk| {
                let mut set = std::collections::BTreeSet::new();
                let mut scratch = SegScratch::default();
                for p in chunk {
                    segmenter.scan(p, &mut scratch, |view| {
                        for (key, _) in view.active {
                            if !set.contains(key) {
                                set.insert(key.clone());
                            }
                        }
                    })?;
                }
                Ok(set)
            })
            .collect::<Result<_>>()?;
        let mut set = std::collections::BTreeSet::new();
        for s in key_sets {
            set.extend(s);
        }
        let keys: Vec<CoefKey> = set.into_iter().collect();
        let index: BTreeMap<CoefKey, u32> =
            keys.iter().enumerate().map(|(i, k)| (k.clone(), i as u32)).collect();

        let blocks: Vec<DesignBlock> = paths
            .par_chunks(PATH_CHUNK)
            .map(|chunk| {
                let mut block = DesignBlock::new(keys.len());
                let mut scratch = SegScratch::default();
                for p in chunk {
                    segmenter.scan(p, &mut scratch, |view| block.push_row(&index, &view))?;
                }
                Ok(block)
            })
            .collect::<Result<_>>()?;
        Self::assemble(keys, blocks)
    }

    fn rows(&self) -> usize {
        self.y.len()
    }

    #[inline]
    fn eta(&self, row: usize, theta: &[f64]) -> f64 {
        let (a, b) = (self.row_ptr[row] as usize, self.row_ptr[row + 1] as usize);
        let mut eta = 0.0;
        for k in a..b {
            eta += theta[self.col[k] as usize] * self.val[k];
        }
        eta
    }

    /// Unpenalized log-likelihood.
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.fold_ranges(
            |range| {
                let mut ll = 0.0;
                for r in range {
                    let eta = self.eta(r, theta);
                    ll += -eta.exp() * self.exposure[r] + self.y[r] * (eta + self.log_exposure[r]);
                }
                ll
            },
            |a, b| a + b,
            0.0,
        )
    }

    fn penalty(&self, theta: &[f64], ridge: f64) -> f64 {
        if ridge == 0.0 {
            return 0.0;
        }
        ridge
            * theta
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != self.intercept)
                .map(|(_, t)| t * t)
                .sum::<f64>()
    }

    fn objective(&self, theta: &[f64], ridge: f64) -> f64 {
        self.log_likelihood(theta) - self.penalty(theta, ridge)
    }

    /// Gradient of the penalized objective; optionally the dense lower
    /// triangle of its Hessian.
    fn gradient_hessian(
        &self,
        theta: &[f64],
        ridge: f64,
        want_hessian: bool,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let p = self.keys.len();
        let (mut grad, mut hess) = self.fold_ranges(
            |range| {
                let mut g = vec![0.0f64; p];
                let mut h = want_hessian.then(|| vec![0.0f64; p * p]);
                for r in range {
                    let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
                    let eta = self.eta(r, theta);
                    let mu = eta.exp() * self.exposure[r];
                    let resid = self.y[r] - mu;
                    for k in a..b {
                        g[self.col[k] as usize] += resid * self.val[k];
                    }
                    if let Some(h) = h.as_deref_mut() {
                        for k1 in a..b {
                            let (j1, w1) = (self.col[k1] as usize, self.val[k1]);
                            for k2 in a..b {
                                let (j2, w2) = (self.col[k2] as usize, self.val[k2]);
                                if j1 >= j2 {
                                    h[j1 * p + j2] -= mu * w1 * w2;
                                }
                            }
                        }
                    }
                }
                (g, h)
            },
            |mut acc, part| {
                for (a, b) in acc.0.iter_mut().zip(part.0) {
                    *a += b;
                }
                if let (Some(acc_h), Some(part_h)) = (acc.1.as_mut(), part.1) {
                    for (a, b) in acc_h.iter_mut().zip(part_h) {
                        *a += b;
                    }
                }
                acc
            },
            (vec![0.0; p], want_hessian.then(|| vec![0.0; p * p])),
        );
        if ridge != 0.0 {
            for j in 0..p {
                if j != self.intercept {
                    grad[j] -= 2.0 * ridge * theta[j];
                    if let Some(h) = hess.as_mut() {
                        h[j * p + j] -= 2.0 * ridge;
                    }
                }
            }
        }
        (grad, hess)
    }

    /// Deterministic parallel fold over fixed row ranges: range partials
    /// are computed in parallel and combined strictly in range order, so
    /// results are bit-identical at any worker count.
    fn fold_ranges<A: Send>(
        &self,
        map: impl Fn(std::ops::Range<usize>) -> A + Sync,
        combine: impl Fn(A, A) -> A,
        empty: A,
    ) -> A {
        let rows = self.rows();
        if rows <= ACCUM_CHUNK {
            return map(0..rows);
        }
        let ranges: Vec<std::ops::Range<usize>> = (0..rows)
            .step_by(ACCUM_CHUNK)
            .map(|a| a..(a + ACCUM_CHUNK).min(rows))
            .collect();
        let partials: Vec<A> = ranges.into_par_iter().map(&map).collect();
        partials.into_iter().fold(empty, combine)
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Enumerates the keys a spec can generate, independent of data (user-feature
/// keys are data-dependent and excluded here).
fn spec_candidate_keys(spec: &ModelSpec) -> Vec<CoefKey> {
    let mut keys = vec![CoefKey::Intercept];
    for term in &spec.terms {
        for l in 0..term.basis.len() as u32 {
            match &term.conditioning {
                Conditioning::Always | Conditioning::PrecededWithin { .. } => {
                    keys.push(CoefKey::term(&term.name, l));
                }
                Conditioning::FeatureEquals { level, .. } => {
                    keys.push(CoefKey::term_level(&term.name, l, level));
                }
                Conditioning::ExactCount { max_count, .. } => {
                    for c in 1..=*max_count {
                        keys.push(CoefKey::term_count(&term.name, l, c));
                    }
                }
            }
        }
    }
    keys
}

/// Segments every path under `spec` (streaming, parallel) and fits by
/// maximum likelihood.
pub fn fit(spec: &ModelSpec, paths: &[UserPath], config: &FitConfig) -> Result<FitResult> {
    spec.validate()?;
    config.validate()?;
    let segmenter = Segmenter::new(spec)?;
    let design = Design::from_paths(&segmenter, paths)?;
    fit_design(spec, design, config)
}

/// Fits coefficients over pre-built segments.
pub fn fit_segments(
    spec: &ModelSpec,
    segments: &[Segment],
    config: &FitConfig,
) -> Result<FitResult> {
    spec.validate()?;
    config.validate()?;
    let design = Design::from_segments(segments)?;
    fit_design(spec, design, config)
}

fn fit_design(spec: &ModelSpec, design: Design, config: &FitConfig) -> Result<FitResult> {
    if design.total_conversions < 1.0 {
        return Err(Error::NoConversions);
    }

    let mut per_key_offset: BTreeMap<CoefKey, f64> = design
        .keys
        .iter()
        .zip(&design.key_offsets)
        .map(|(k, o)| (k.clone(), *o))
        .collect();
    let mut dropped_keys = Vec::new();
    for key in spec_candidate_keys(spec) {
        if !per_key_offset.contains_key(&key) {
            per_key_offset.insert(key.clone(), 0.0);
            dropped_keys.push(key);
        }
    }

    let p = design.keys.len();
    let ridge = config.ridge_penalty;
    let mut theta = vec![0.0f64; p];
    theta[design.intercept] = (design.total_conversions / design.total_exposure).ln();

    // Separated keys (no conversions anywhere they are active) are pinned
    // at the floor and held out of the optimization.
    let frozen: Vec<bool> = (0..p)
        .map(|j| j != design.intercept && design.key_conversions[j] == 0.0)
        .collect();
    for (j, &freeze) in frozen.iter().enumerate() {
        if freeze {
            theta[j] = COEF_FLOOR;
        }
    }

    let mut objective = design.objective(&theta, ridge);
    let mut trace = vec![objective];
    let mut converged = false;
    let mut iterations = 0;
    let mut warnings = Vec::new();

    for _ in 0..config.max_iterations {
        let want_hessian = matches!(config.step_control, StepControl::NewtonWithHalving);
        let (mut grad, mut hess) = design.gradient_hessian(&theta, ridge, want_hessian);
        pin_frozen(&frozen, &mut grad, hess.as_deref_mut(), p);

        if std::env::var_os("MTA_DEBUG_FIT").is_some() {
            eprintln!(
                "iter {iterations}: obj {objective:.15e} grad {:?}",
                grad.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>()
            );
        }
        if projected_grad_norm(&theta, &grad) <= config.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let direction = match config.step_control {
            StepControl::NewtonWithHalving => {
                newton_direction(&grad, hess.as_deref().unwrap(), p).unwrap_or_else(|| {
                    warnings.push("singular Hessian; fell back to gradient step".into());
                    grad.clone()
                })
            }
            StepControl::GradientDescent { learning_rate } => {
                grad.iter().map(|g| g * learning_rate).collect()
            }
        };

        match config.step_control {
            StepControl::NewtonWithHalving => {
                // Backtracking keeps the penalized objective non-decreasing
                // up to summation rounding: comparisons below the rounding
                // noise of a ~rows-term sum are meaningless, and near the
                // optimum full Newton steps must pass through that noise
                // floor for the gradient to keep contracting.
                let noise = (design.rows() as f64).sqrt() * f64::EPSILON;
                let slack = 8.0 * noise * objective.abs().max(1.0);
                let mut scale = 1.0;
                let mut accepted = false;
                for _ in 0..60 {
                    let candidate = step(&theta, &direction, scale);
                    let cand_obj = design.objective(&candidate, ridge);
                    if cand_obj.is_finite() && cand_obj >= objective - slack {
                        theta = candidate;
                        objective = cand_obj;
                        accepted = true;
                        break;
                    }
                    scale *= 0.5;
                }
                if !accepted {
                    warnings.push("line search stalled; stopping early".into());
                    break;
                }
            }
            StepControl::GradientDescent { .. } => {
                theta = step(&theta, &direction, 1.0);
                objective = design.objective(&theta, ridge);
            }
        }
        trace.push(objective);
    }

    if !converged {
        // The loop may exhaust max_iterations with the gradient already
        // at tolerance; check once more at the final iterate.
        let (mut grad, _) = design.gradient_hessian(&theta, ridge, false);
        pin_frozen(&frozen, &mut grad, None, p);
        converged = projected_grad_norm(&theta, &grad) <= config.gradient_tolerance;
    }

    let mut coefficients = BTreeMap::new();
    let mut floored_keys = Vec::new();
    for (j, key) in design.keys.iter().enumerate() {
        coefficients.insert(key.clone(), theta[j]);
        if theta[j] <= COEF_FLOOR + 1e-9 {
            floored_keys.push(key.clone());
        }
    }
    if !floored_keys.is_empty() {
        warnings.push(format!(
            "{} key(s) separated and clamped at {COEF_FLOOR}: {}",
            floored_keys.len(),
            floored_keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
        ));
    }
    if !dropped_keys.is_empty() {
        warnings.push(format!(
            "{} key(s) with zero offset excluded from the fit: {}",
            dropped_keys.len(),
            dropped_keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
        ));
    }

    let final_log_likelihood = design.log_likelihood(&theta);
    let model = IntensityModel::new(spec.clone(), coefficients)?;
    Ok(FitResult {
        model,
        final_log_likelihood,
        converged,
        iterations,
        per_key_offset,
        dropped_keys,
        floored_keys,
        objective_trace: trace,
        warnings,
    })
}

fn step(theta: &[f64], direction: &[f64], scale: f64) -> Vec<f64> {
    theta
        .iter()
        .zip(direction)
        .map(|(t, d)| (t + scale * d).max(COEF_FLOOR))
        .collect()
}

/// Zeroes gradient entries (and neutralizes Hessian rows/columns) of pinned
/// coordinates so the solver leaves them untouched.
fn pin_frozen(frozen: &[bool], grad: &mut [f64], hess: Option<&mut [f64]>, p: usize) {
    if !frozen.iter().any(|&f| f) {
        return;
    }
    for (j, &freeze) in frozen.iter().enumerate() {
        if freeze {
            grad[j] = 0.0;
        }
    }
    if let Some(h) = hess {
        for j in 0..p {
            for k in 0..=j {
                if frozen[j] || frozen[k] {
                    h[j * p + k] = if j == k { -1.0 } else { 0.0 };
                }
            }
        }
    }
}

/// Max-norm of the gradient, ignoring descent pressure on floored
/// coordinates.
fn projected_grad_norm(theta: &[f64], grad: &[f64]) -> f64 {
    theta
        .iter()
        .zip(grad)
        .map(|(t, g)| if *t <= COEF_FLOOR + 1e-9 && *g < 0.0 { 0.0 } else { g.abs() })
        .fold(0.0, f64::max)
}

/// Solves `(-H) d = g` for the ascent direction; `-H` is positive
/// semi-definite by concavity. Returns `None` if the factorization fails
/// even with jitter.
fn newton_direction(grad: &[f64], hess_lower: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut a = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in 0..=j {
            let v = -hess_lower[j * p + k];
            a[(j, k)] = v;
            a[(k, j)] = v;
        }
    }
    let g = DVector::from_column_slice(grad);
    for jitter in [0.0, 1e-10, 1e-8, 1e-6] {
        let mut m = a.clone();
        if jitter > 0.0 {
            let scale = a.diagonal().amax().max(1.0);
            for j in 0..p {
                m[(j, j)] += jitter * scale;
            }
        }
        if let Some(chol) = m.cholesky() {
            let d = chol.solve(&g);
            return Some(d.iter().copied().collect());
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Fit metrics over a segmented corpus: log-likelihood, mean per-segment
/// Poisson deviance, and prediction bias.
pub fn fit_diagnostics(model: &IntensityModel, segments: &[Segment]) -> Result<Diagnostics> {
    let mut ll = 0.0;
    let mut deviance = 0.0;
    let mut observed = 0u64;
    let mut predicted = 0.0;
    for s in segments {
        let eta = model.segment_eta(s)?;
        let e = s.exposure();
        let y = f64::from(s.conversions());
        let mu = eta.exp() * e;
        ll += -mu + y * (eta + e.ln());
        deviance += 2.0 * if y > 0.0 { y * (y / mu).ln() - (y - mu) } else { mu };
        observed += u64::from(s.conversions());
        predicted += mu;
    }
    let n = segments.len().max(1) as f64;
    Ok(Diagnostics {
        log_likelihood: ll,
        poisson_loss: deviance / n,
        prediction_bias: (observed > 0).then(|| predicted / observed as f64 - 1.0),
        observed_conversions: observed,
        predicted_conversions: predicted,
    })
}

/// Diagnostics per level of a user feature. Segments of paths lacking the
/// feature are grouped under `"(none)"`.
pub fn fit_diagnostics_sliced(
    model: &IntensityModel,
    segments: &[Segment],
    paths: &[UserPath],
    feature: &str,
) -> Result<BTreeMap<String, Diagnostics>> {
    let level_of: BTreeMap<&str, &str> = paths
        .iter()
        .map(|p| (p.user_id(), p.user_features().get(feature).unwrap_or("(none)")))
        .collect();
    let mut grouped: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for s in segments {
        let level = level_of.get(s.user_id()).copied().unwrap_or("(none)");
        grouped.entry(level.to_string()).or_default().push(s.clone());
    }
    grouped
        .into_iter()
        .map(|(level, segs)| Ok((level, fit_diagnostics(model, &segs)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Replicate summaries
// ---------------------------------------------------------------------------

/// Per-key summary of `exp(coefficient)` across replicate fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySummary {
    pub mean: f64,
    /// Empirical 2.5% quantile (type-7 interpolation).
    pub q_low: f64,
    /// Empirical 97.5% quantile (type-7 interpolation).
    pub q_high: f64,
    /// Number of replicates carrying the key.
    pub replicates: usize,
}

/// Summarizes replicate fits sharing one spec: per-key mean and empirical
/// 95% interval of `exp(coefficient)`. Keys dropped in some replicates are
/// summarized over the replicates that carry them.
pub fn replicate_summary(models: &[IntensityModel]) -> Result<BTreeMap<CoefKey, KeySummary>> {
    if models.len() < 2 {
        return Err(Error::SpecMismatch("need at least 2 replicates".into()));
    }
    let spec = models[0].spec();
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.spec() != spec {
            return Err(Error::SpecMismatch(format!("replicate {i} differs from replicate 0")));
        }
    }
    let mut values: BTreeMap<CoefKey, Vec<f64>> = BTreeMap::new();
    for m in models {
        for (key, coef) in m.coefficients() {
            values.entry(key.clone()).or_default().push(coef.exp());
        }
    }
    Ok(values
        .into_iter()
        .map(|(key, mut v)| {
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let summary = KeySummary {
                mean,
                q_low: quantile_type7(&v, 0.025),
                q_high: quantile_type7(&v, 0.975),
                replicates: v.len(),
            };
            (key, summary)
        })
        .collect())
}

/// Type-7 (linear interpolation) quantile of pre-sorted values.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = (sorted.len() as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, FeatureValues, ObservationWindow};
    use crate::intensity::{segment_path, AdSelection, BasisSpec, EffectKind, TermSpec};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(keys: &[(CoefKey, f64)], exposure: f64, conversions: u32) -> Segment {
        Segment::new("u", 0.0, exposure, keys.to_vec(), conversions).unwrap()
    }

    fn constant_spec() -> ModelSpec {
        ModelSpec::default()
    }

    fn effect_spec() -> ModelSpec {
        ModelSpec {
            intercept_features: vec![],
            terms: vec![TermSpec {
                name: "ad".into(),
                applies_to: EffectKind::AdEffect,
                basis: BasisSpec::Step { boundaries: vec![30.0] },
                conditioning: Conditioning::Always,
            }],
            reference_levels: BTreeMap::new(),
        }
    }

    fn model(spec: ModelSpec, coefs: &[(CoefKey, f64)]) -> IntensityModel {
        IntensityModel::new(spec, coefs.iter().cloned().collect()).unwrap()
    }

    #[test]
    fn log_likelihood_single_segment() {
        let m = model(constant_spec(), &[(CoefKey::Intercept, (1.0f64 / 30.0).ln())]);
        let segs = [seg(&[(CoefKey::Intercept, 1.0)], 30.0, 1)];
        let ll = log_likelihood(&m, &segs).unwrap();
        assert_abs_diff_eq!(ll, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn likelihood_rises_as_rate_drops_with_zero_conversions() {
        let segs = [seg(&[(CoefKey::Intercept, 1.0)], 30.0, 0)];
        let ll = |a: f64| {
            log_likelihood(&model(constant_spec(), &[(CoefKey::Intercept, a)]), &segs).unwrap()
        };
        assert!(ll(-4.0) > ll(-3.0));
        assert!(ll(-5.0) > ll(-4.0));
    }

    #[test]
    fn likelihood_matches_continuous_time_formula() {
        // Continuous-time inhomogeneous-Poisson log-likelihood,
        // sum_i [ -integral lambda + sum_conv log lambda(T) ], integrated
        // exactly (lambda constant per segment). It differs from the
        // regression form by the theta-free constant sum_s y_s log e_s.
        let continuous = |m: &IntensityModel, segs: &[Segment]| -> f64 {
            segs.iter()
                .map(|s| {
                    let eta = m.segment_eta(s).unwrap();
                    -eta.exp() * s.exposure() + f64::from(s.conversions()) * eta
                })
                .sum()
        };
        let segs = [
            seg(&[(CoefKey::Intercept, 1.0)], 10.0, 4),
            seg(&[(CoefKey::Intercept, 1.0), (CoefKey::term("ad", 0), 1.0)], 5.0, 6),
        ];
        let constant: f64 = segs.iter().map(|s| f64::from(s.conversions()) * s.exposure().ln()).sum();
        let m1 = model(effect_spec(), &[(CoefKey::Intercept, -1.0), (CoefKey::term("ad", 0), 0.8)]);
        let m2 = model(effect_spec(), &[(CoefKey::Intercept, -0.4), (CoefKey::term("ad", 0), 0.1)]);
        for m in [&m1, &m2] {
            let ll = log_likelihood(m, &segs).unwrap();
            assert_abs_diff_eq!(ll, continuous(m, &segs) + constant, epsilon = 1e-8);
        }
        // Model differences agree without the constant.
        let d_reg = log_likelihood(&m1, &segs).unwrap() - log_likelihood(&m2, &segs).unwrap();
        let d_cont = continuous(&m1, &segs) - continuous(&m2, &segs);
        assert_abs_diff_eq!(d_reg, d_cont, epsilon = 1e-8);
    }

    #[test]
    fn key_mismatch_is_an_error() {
        let m = model(constant_spec(), &[(CoefKey::Intercept, 0.0)]);
        let segs = [seg(&[(CoefKey::Intercept, 1.0), (CoefKey::term("ad", 0), 1.0)], 5.0, 0)];
        assert!(matches!(log_likelihood(&m, &segs), Err(Error::KeyMismatch(_))));
    }

    #[test]
    fn constant_model_recovers_closed_form_mle() {
        let segs = [
            seg(&[(CoefKey::Intercept, 1.0)], 12.0, 2),
            seg(&[(CoefKey::Intercept, 1.0)], 18.0, 1),
            seg(&[(CoefKey::Intercept, 1.0)], 30.0, 4),
        ];
        let fit = fit_segments(&constant_spec(), &segs, &FitConfig::default()).unwrap();
        assert!(fit.converged);
        let alpha = fit.model.coefficient(&CoefKey::Intercept).unwrap();
        assert_abs_diff_eq!(alpha, (7.0f64 / 60.0).ln(), epsilon = 1e-10);
    }

    #[test]
    fn two_segment_toy_recovers_saturated_mle() {
        let segs = [
            seg(&[(CoefKey::Intercept, 1.0)], 10.0, 4),
            seg(&[(CoefKey::Intercept, 1.0), (CoefKey::term("ad", 0), 1.0)], 5.0, 6),
        ];
        let config = FitConfig { gradient_tolerance: 1e-12, ..FitConfig::default() };
        let fit = fit_segments(&effect_spec(), &segs, &config).unwrap();
        assert!(fit.converged);
        let alpha = fit.model.coefficient(&CoefKey::Intercept).unwrap();
        let beta = fit.model.coefficient(&CoefKey::term("ad", 0)).unwrap();
        assert_abs_diff_eq!(alpha, 0.4f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(beta, 3.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn gradient_descent_converges_on_toy() {
        let segs = [seg(&[(CoefKey::Intercept, 1.0)], 20.0, 8)];
        let config = FitConfig {
            max_iterations: 5000,
            gradient_tolerance: 1e-9,
            ridge_penalty: 0.0,
            step_control: StepControl::GradientDescent { learning_rate: 0.05 },
        };
        let fit = fit_segments(&constant_spec(), &segs, &config).unwrap();
        assert!(fit.converged);
        let alpha = fit.model.coefficient(&CoefKey::Intercept).unwrap();
        assert_abs_diff_eq!(alpha, 0.4f64.ln(), epsilon = 1e-7);
    }

    #[test]
    fn empty_or_conversionless_corpus_is_an_error() {
        let segs = [seg(&[(CoefKey::Intercept, 1.0)], 30.0, 0)];
        assert!(matches!(
            fit_segments(&constant_spec(), &segs, &FitConfig::default()),
            Err(Error::NoConversions)
        ));
    }

    #[test]
    fn separated_key_is_floored_and_flagged() {
        let segs = [
            seg(&[(CoefKey::Intercept, 1.0)], 10.0, 5),
            seg(&[(CoefKey::Intercept, 1.0), (CoefKey::term("ad", 0), 1.0)], 8.0, 0),
        ];
        let fit = fit_segments(&effect_spec(), &segs, &FitConfig::default()).unwrap();
        assert!(fit.converged, "floored fit should still satisfy the projected gradient");
        assert_eq!(fit.floored_keys, vec![CoefKey::term("ad", 0)]);
        let beta = fit.model.coefficient(&CoefKey::term("ad", 0)).unwrap();
        assert_abs_diff_eq!(beta, COEF_FLOOR, epsilon = 1e-9);
        assert!(fit.warnings.iter().any(|w| w.contains("separated")));
    }

    #[test]
    fn zero_offset_key_is_dropped_and_reported() {
        // The ad term never activates: no segment carries its key.
        let segs = [seg(&[(CoefKey::Intercept, 1.0)], 30.0, 2)];
        let fit = fit_segments(&effect_spec(), &segs, &FitConfig::default()).unwrap();
        assert_eq!(fit.dropped_keys, vec![CoefKey::term("ad", 0)]);
        assert_eq!(fit.per_key_offset[&CoefKey::term("ad", 0)], 0.0);
        assert!(fit.model.coefficient(&CoefKey::term("ad", 0)).is_none());
    }

    #[test]
    fn newton_objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut segs = Vec::new();
        for _ in 0..200 {
            let with_effect = rng.random::<f64>() < 0.5;
            let mut keys = vec![(CoefKey::Intercept, 1.0)];
            if with_effect {
                keys.push((CoefKey::term("ad", 0), 1.0 + f64::from(rng.random::<bool>())));
            }
            let exposure = 0.5 + 29.5 * rng.random::<f64>();
            let y = (exposure * 0.2 * rng.random::<f64>()).floor() as u32;
            segs.push(seg(&keys, exposure, y));
        }
        let fit = fit_segments(&effect_spec(), &segs, &FitConfig::default()).unwrap();
        for w in fit.objective_trace.windows(2) {
            // Non-decreasing up to a few ulps of the objective scale.
            let slack = 1e-12 * w[0].abs().max(1.0);
            assert!(w[1] >= w[0] - slack, "objective decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut segs = Vec::new();
        for _ in 0..60 {
            let mut keys = vec![(CoefKey::Intercept, 1.0)];
            if rng.random::<f64>() < 0.6 {
                keys.push((CoefKey::term("ad", 0), f64::from(rng.random_range(1..3u32))));
            }
            let exposure = 0.5 + 10.0 * rng.random::<f64>();
            segs.push(seg(&keys, exposure, rng.random_range(0..4)));
        }
        let design = Design::from_segments(&segs).unwrap();
        let ridge = 0.3;
        let theta: Vec<f64> = (0..design.keys.len()).map(|_| rng.random_range(-1.5..0.5)).collect();
        let (grad, _) = design.gradient_hessian(&theta, ridge, false);
        let h = 1e-5;
        for j in 0..theta.len() {
            let mut plus = theta.clone();
            plus[j] += h;
            let mut minus = theta.clone();
            minus[j] -= h;
            let fd = (design.objective(&plus, ridge) - design.objective(&minus, ridge)) / (2.0 * h);
            let denom = grad[j].abs().max(fd.abs()).max(1e-8);
            assert!(
                ((grad[j] - fd) / denom).abs() < 1e-4,
                "coord {j}: analytic {} vs fd {fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn prediction_bias_zero_at_optimum_and_one_when_doubled() {
        let segs = [
            seg(&[(CoefKey::Intercept, 1.0)], 10.0, 4),
            seg(&[(CoefKey::Intercept, 1.0), (CoefKey::term("ad", 0), 1.0)], 5.0, 6),
        ];
        let fit = fit_segments(&effect_spec(), &segs, &FitConfig::default()).unwrap();
        let d = fit_diagnostics(&fit.model, &segs).unwrap();
        assert_abs_diff_eq!(d.prediction_bias.unwrap(), 0.0, epsilon = 1e-10);

        let mut coefs = fit.model.coefficients().clone();
        *coefs.get_mut(&CoefKey::Intercept).unwrap() += 2.0f64.ln();
        let doubled = IntensityModel::new(fit.model.spec().clone(), coefs).unwrap();
        let d = fit_diagnostics(&doubled, &segs).unwrap();
        assert_abs_diff_eq!(d.prediction_bias.unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn bias_undefined_without_observed_conversions() {
        let m = model(constant_spec(), &[(CoefKey::Intercept, -2.0)]);
        let segs = [seg(&[(CoefKey::Intercept, 1.0)], 30.0, 0)];
        let d = fit_diagnostics(&m, &segs).unwrap();
        assert_eq!(d.prediction_bias, None);
    }

    #[test]
    fn partitioned_keys_recover_empirical_rate_ratios() {
        // Three disjoint groups; each key fully determines its segments, so
        // the MLE matches the per-group empirical rates and the exp(coef)
        // ratios equal the rate ratios.
        let spec = ModelSpec {
            intercept_features: vec![],
            terms: vec![
                TermSpec {
                    name: "g1".into(),
                    applies_to: EffectKind::AdEffect,
                    basis: BasisSpec::Step { boundaries: vec![30.0] },
                    conditioning: Conditioning::Always,
                },
                TermSpec {
                    name: "g2".into(),
                    applies_to: EffectKind::AdEffect,
                    basis: BasisSpec::Step { boundaries: vec![40.0] },
                    conditioning: Conditioning::PrecededWithin { days: 1.0 },
                },
            ],
            reference_levels: BTreeMap::new(),
        };
        let segs = [
            seg(&[(CoefKey::Intercept, 1.0)], 20.0, 5), // rate 0.25
            seg(&[(CoefKey::Intercept, 1.0), (CoefKey::term("g1", 0), 1.0)], 10.0, 6), // 0.6
            seg(&[(CoefKey::Intercept, 1.0), (CoefKey::term("g2", 0), 1.0)], 8.0, 2), // 0.25
        ];
        let config = FitConfig { gradient_tolerance: 1e-12, ..FitConfig::default() };
        let fit = fit_segments(&spec, &segs, &config).unwrap();
        let base = fit.model.coefficient(&CoefKey::Intercept).unwrap().exp();
        let r1 = fit.model.coefficient(&CoefKey::term("g1", 0)).unwrap().exp();
        let r2 = fit.model.coefficient(&CoefKey::term("g2", 0)).unwrap().exp();
        assert_abs_diff_eq!(base, 0.25, epsilon = 1e-9);
        assert_abs_diff_eq!(r1, 0.6 / 0.25, epsilon = 1e-9);
        assert_abs_diff_eq!(r2, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn path_fit_is_deterministic_across_thread_counts() {
        use crate::simulator::{simulate_dataset, Scenario, ScenarioConfig};
        let config = ScenarioConfig::new(Scenario::S2, 9_000, 1).unwrap().with_seed(5);
        let data = simulate_dataset(&config, 0).unwrap();
        let spec = crate::simulator::scenario_fit_spec(&Scenario::S2).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| fit(&spec, data.exposed(), &FitConfig::default()).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.model.coefficients(), b.model.coefficients());
        assert_eq!(a.final_log_likelihood.to_bits(), b.final_log_likelihood.to_bits());
        assert_eq!(a.per_key_offset, b.per_key_offset);
    }

    #[test]
    fn fit_is_deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut segs = Vec::new();
        for _ in 0..40_000 {
            let mut keys = vec![(CoefKey::Intercept, 1.0)];
            if rng.random::<f64>() < 0.5 {
                keys.push((CoefKey::term("ad", 0), 1.0));
            }
            segs.push(seg(&keys, 0.1 + rng.random::<f64>(), rng.random_range(0..2)));
        }
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| fit_segments(&effect_spec(), &segs, &FitConfig::default()).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.model.coefficients(), b.model.coefficients());
        assert_eq!(a.final_log_likelihood.to_bits(), b.final_log_likelihood.to_bits());
    }

    #[test]
    fn sliced_diagnostics_expose_missing_feature() {
        // Two user groups with different true rates; a constant-only model
        // fitted to both must over-predict one slice and under-predict the
        // other.
        let mk_path = |id: &str, level: &str, conv_times: &[f64]| {
            UserPath::new(
                id,
                ObservationWindow::new(0.0, 30.0).unwrap(),
                [("segment", level)].into_iter().collect(),
                conv_times.iter().map(|&t| Event::conversion(t)).collect(),
            )
            .unwrap()
        };
        let mut paths = Vec::new();
        for i in 0..20 {
            // "hot" users convert 3 times, "cold" users once.
            paths.push(mk_path(&format!("h{i}"), "hot", &[3.0, 11.0, 22.0]));
            paths.push(mk_path(&format!("c{i}"), "cold", &[15.0]));
        }
        let spec = constant_spec();
        let segments: Vec<Segment> =
            paths.iter().flat_map(|p| segment_path(&spec, p).unwrap()).collect();
        let fit = fit_segments(&spec, &segments, &FitConfig::default()).unwrap();
        let sliced = fit_diagnostics_sliced(&fit.model, &segments, &paths, "segment").unwrap();
        let hot = sliced["hot"].prediction_bias.unwrap();
        let cold = sliced["cold"].prediction_bias.unwrap();
        assert!(hot < 0.0, "hot slice under-predicted: {hot}");
        assert!(cold > 0.0, "cold slice over-predicted: {cold}");
        // Overall bias is still zero at the MLE.
        let overall = fit_diagnostics(&fit.model, &segments).unwrap();
        assert_abs_diff_eq!(overall.prediction_bias.unwrap(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn replicate_summary_examples() {
        let mk = |v: f64| {
            model(
                effect_spec(),
                &[(CoefKey::Intercept, -1.0), (CoefKey::term("ad", 0), v.ln())],
            )
        };
        // Identical replicates: mean = value, zero-width interval.
        let s = replicate_summary(&[mk(2.0), mk(2.0), mk(2.0)]).unwrap();
        let k = &s[&CoefKey::term("ad", 0)];
        assert_abs_diff_eq!(k.mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k.q_low, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k.q_high, 2.0, epsilon = 1e-12);

        // exp(coef) = 1, 2, 3: mean 2, type-7 quantiles computed by hand:
        // h = 2 * 0.025 = 0.05 -> 1.05 and h = 2 * 0.975 = 1.95 -> 2.95.
        let s = replicate_summary(&[mk(1.0), mk(2.0), mk(3.0)]).unwrap();
        let k = &s[&CoefKey::term("ad", 0)];
        assert_abs_diff_eq!(k.mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k.q_low, 1.05, epsilon = 1e-12);
        assert_abs_diff_eq!(k.q_high, 2.95, epsilon = 1e-12);
        assert_eq!(k.replicates, 3);
    }

    #[test]
    fn replicate_summary_rejects_spec_mismatch() {
        let a = model(constant_spec(), &[(CoefKey::Intercept, -1.0)]);
        let b = model(
            effect_spec(),
            &[(CoefKey::Intercept, -1.0), (CoefKey::term("ad", 0), 0.0)],
        );
        assert!(matches!(replicate_summary(&[a, b]), Err(Error::SpecMismatch(_))));
    }

    #[test]
    fn end_to_end_fit_from_paths() {
        // Deterministic micro-corpus: users convert at fixed offsets after
        // their single ad; just checks the path -> segments -> fit plumbing.
        let mut paths = Vec::new();
        for i in 0..30 {
            let ad_t = 1.0 + (i as f64) * 0.9;
            let mut events = vec![Event::ad(ad_t, [("type", "1")].into_iter().collect())];
            if i % 2 == 0 {
                events.push(Event::conversion((ad_t + 0.5).min(30.0)));
            }
            paths.push(
                UserPath::new(
                    format!("u{i}"),
                    ObservationWindow::new(0.0, 30.0).unwrap(),
                    FeatureValues::new(),
                    events,
                )
                .unwrap(),
            );
        }
        let spec = ModelSpec {
            intercept_features: vec![],
            terms: vec![TermSpec {
                name: "ad".into(),
                applies_to: EffectKind::AdEffect,
                basis: BasisSpec::Step { boundaries: vec![1.0, 30.0] },
                conditioning: Conditioning::Always,
            }],
            reference_levels: BTreeMap::new(),
        };
        let fit = fit(&spec, &paths, &FitConfig::default()).unwrap();
        assert!(fit.converged);
        // All conversions land within a day of the ad: the short-term rate
        // dominates the baseline.
        let short = fit.model.coefficient(&CoefKey::term("ad", 0)).unwrap();
        assert!(short > 1.0, "short-term log-effect {short}");
        let p = &paths[0];
        let eta = fit
            .model
            .log_intensity(p, p.events()[0].t + 0.25, AdSelection::All, false)
            .unwrap();
        assert!(eta.is_finite());
    }
}
