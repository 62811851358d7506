//! Static allocation curves optimized against historical windows.
//!
//! A fixed curve is a single simplex vector used for every execution window.
//! The curve is parameterized by unconstrained logits and decoded through a
//! softmax, so every iterate of every optimizer is feasible and no explicit
//! simplex constraints are needed. Three optimizer families are provided:
//! differential evolution, Nelder–Mead with random restarts, and basin
//! hopping.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::marketdata::FeatureWindow;
use crate::objectives::{AllocationCurve, LossKind, VolumeNormalization};
use crate::{Error, Result};

/// A fixed-curve calibration problem over a set of historical windows.
///
/// Construction precomputes, per usable window, either the price ratios
/// `p_t / VWAP_market` (for the VWAP losses) or the normalized volume targets
/// (for the volume-curve loss), so a loss evaluation is one pass over an
/// `n×T` matrix.
#[derive(Debug, Clone)]
pub struct FixedCurveProblem {
    horizon: usize,
    loss: LossKind,
    data: ProblemData,
    skipped: usize,
}

#[derive(Debug, Clone)]
enum ProblemData {
    /// `ratio[w][t] = p_t / VWAP_market` per window.
    PriceRatios(Array2<f64>),
    /// `target[w][t]` per window under the chosen normalization.
    Targets(Array2<f64>),
}

impl FixedCurveProblem {
    pub fn new(windows: &[FeatureWindow], loss: LossKind) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Config("need at least one window".into()));
        }
        let horizon = windows[0].horizon();
        if windows.iter().any(|w| w.horizon() != horizon) {
            return Err(Error::Dimension("windows disagree on horizon length".into()));
        }
        let mut rows: Vec<f64> = Vec::with_capacity(windows.len() * horizon);
        let mut skipped = 0usize;
        match loss {
            LossKind::Absolute | LossKind::Quadratic => {
                for w in windows {
                    match crate::objectives::market_vwap(&w.horizon_volumes, &w.horizon_prices) {
                        Ok(mvwap) => rows.extend(w.horizon_prices.iter().map(|p| p / mvwap)),
                        Err(Error::UndefinedVwap) => skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
            LossKind::Volume(norm) => {
                for w in windows {
                    let denom = match norm {
                        VolumeNormalization::Horizon => w.horizon_volume_sum(),
                        VolumeNormalization::Lookback => w.lookback_volume_sum,
                    };
                    if denom <= 0.0 {
                        skipped += 1;
                        continue;
                    }
                    rows.extend(w.horizon_volumes.iter().map(|v| v / denom));
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::UndefinedVwap);
        }
        let n = rows.len() / horizon;
        let matrix = Array2::from_shape_vec((n, horizon), rows)
            .expect("row count is a multiple of the horizon");
        let data = match loss {
            LossKind::Absolute | LossKind::Quadratic => ProblemData::PriceRatios(matrix),
            LossKind::Volume(_) => ProblemData::Targets(matrix),
        };
        Ok(Self {
            horizon,
            loss,
            data,
            skipped,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    /// Windows dropped at construction for lacking a defined objective.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Mean loss of a decoded curve over the usable windows.
    pub fn loss_for_curve(&self, q: &AllocationCurve) -> Result<f64> {
        if q.len() != self.horizon {
            return Err(Error::Dimension(format!(
                "curve has {} bins, problem horizon {}",
                q.len(),
                self.horizon
            )));
        }
        Ok(self.loss_for_weights(q.weights()))
    }

    fn loss_for_weights(&self, w: &[f64]) -> f64 {
        match &self.data {
            ProblemData::PriceRatios(ratios) => {
                let quadratic = matches!(self.loss, LossKind::Quadratic);
                let mut sum = 0.0;
                for row in ratios.rows() {
                    let row = row.as_slice().expect("standard layout");
                    let r: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - 1.0;
                    sum += if quadratic { r * r } else { r.abs() };
                }
                sum / ratios.nrows() as f64
            }
            ProblemData::Targets(targets) => {
                let mut sum = 0.0;
                for row in targets.rows() {
                    let row = row.as_slice().expect("standard layout");
                    sum += row
                        .iter()
                        .zip(w)
                        .map(|(t, q)| (q - t) * (q - t))
                        .sum::<f64>();
                }
                sum / targets.nrows() as f64
            }
        }
    }

    fn loss_for_logits(&self, logits: &[f64], scratch: &mut [f64]) -> f64 {
        crate::objectives::softmax_into(logits, scratch);
        self.loss_for_weights(scratch)
    }
}

/// Optimizer family used to fit a fixed curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedCurveMethod {
    DifferentialEvolution,
    RestartLocal,
    BasinHopping,
}

impl fmt::Display for FixedCurveMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FixedCurveMethod::DifferentialEvolution => "de",
            FixedCurveMethod::RestartLocal => "restart_local",
            FixedCurveMethod::BasinHopping => "basinhopping",
        })
    }
}

impl FromStr for FixedCurveMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "de" | "differential_evolution" => Ok(FixedCurveMethod::DifferentialEvolution),
            "restart_local" | "nelder_mead" => Ok(FixedCurveMethod::RestartLocal),
            "basinhopping" | "basin_hopping" => Ok(FixedCurveMethod::BasinHopping),
            other => Err(Error::Config(format!(
                "unknown fixed-curve method '{other}' (expected de, restart_local or basinhopping)"
            ))),
        }
    }
}

/// Result of one fixed-curve optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub curve: AllocationCurve,
    /// Training loss of `curve`, recomputed from the decoded weights.
    pub loss: f64,
    pub evaluations: u64,
    pub wall_time_s: f64,
    pub method: FixedCurveMethod,
    pub seed: u64,
}

/// Differential-evolution settings (rand/1/bin).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeConfig {
    /// Population size; defaults to `15 × T` when `None`.
    pub population: Option<usize>,
    pub generations: usize,
    pub differential_weight: f64,
    pub crossover_rate: f64,
    /// Stop when the population's loss spread falls below this.
    pub spread_tol: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            population: None,
            generations: 1000,
            differential_weight: 0.8,
            crossover_rate: 0.9,
            spread_tol: 1e-10,
        }
    }
}

/// Differential evolution over the curve logits.
pub fn optimize_de(problem: &FixedCurveProblem, config: &DeConfig, seed: u64) -> OptimizerReport {
    let start = Instant::now();
    let t = problem.horizon;
    let pop_size = config.population.unwrap_or(15 * t).max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = vec![0.0; t];
    let mut evaluations = 0u64;

    let mut population: Vec<Vec<f64>> = (0..pop_size)
        .map(|_| (0..t).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut fitness: Vec<f64> = population
        .iter()
        .map(|x| {
            evaluations += 1;
            problem.loss_for_logits(x, &mut scratch)
        })
        .collect();

    let mut trial = vec![0.0; t];
    for _gen in 0..config.generations {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &f in &fitness {
            lo = lo.min(f);
            hi = hi.max(f);
        }
        if hi - lo < config.spread_tol {
            break;
        }
        for i in 0..pop_size {
            // three distinct donors, none equal to the target index
            let mut pick = || loop {
                let j = rng.random_range(0..pop_size);
                if j != i {
                    return j;
                }
            };
            let a = pick();
            let b = loop {
                let j = pick();
                if j != a {
                    break j;
                }
            };
            let c = loop {
                let j = pick();
                if j != a && j != b {
                    break j;
                }
            };
            let j_rand = rng.random_range(0..t);
            for d in 0..t {
                let mutant =
                    population[a][d] + config.differential_weight * (population[b][d] - population[c][d]);
                trial[d] = if d == j_rand || rng.random_range(0.0..1.0) < config.crossover_rate {
                    mutant
                } else {
                    population[i][d]
                };
            }
            evaluations += 1;
            let f_trial = problem.loss_for_logits(&trial, &mut scratch);
            if f_trial <= fitness[i] {
                population[i].copy_from_slice(&trial);
                fitness[i] = f_trial;
            }
        }
    }

    let best = fitness
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("population is non-empty");
    finish_report(
        problem,
        &population[best],
        evaluations,
        start,
        FixedCurveMethod::DifferentialEvolution,
        seed,
    )
}

/// Nelder–Mead restart settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Initial simplex step around each random start.
    pub initial_step: f64,
    /// Stop when the simplex loss spread falls below this.
    pub f_tol: f64,
    /// Stop when the simplex collapses below this size.
    pub x_tol: f64,
}

impl Default for RestartConfig {
    fn default() -> Self {
        Self {
            restarts: 1000,
            max_iters: 2000,
            initial_step: 0.5,
            f_tol: 1e-10,
            x_tol: 1e-8,
        }
    }
}

/// Best-of-restarts Nelder–Mead from standard-normal random starts.
///
/// The softmax reparameterization absorbs the simplex constraints, so an
/// unconstrained simplex search replaces constrained local programming.
pub fn optimize_restart_local(
    problem: &FixedCurveProblem,
    config: &RestartConfig,
    seed: u64,
) -> OptimizerReport {
    let start = Instant::now();
    let t = problem.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = vec![0.0; t];
    let mut evaluations = 0u64;
    let mut best: Option<(Vec<f64>, f64)> = None;

    for _ in 0..config.restarts.max(1) {
        let x0: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (x, f, evals) = nelder_mead(
            |x| problem.loss_for_logits(x, &mut scratch),
            &x0,
            config.initial_step,
            config.max_iters,
            config.f_tol,
            config.x_tol,
        );
        evaluations += evals;
        if best.as_ref().map_or(true, |(_, bf)| f < *bf) {
            best = Some((x, f));
        }
    }
    let (x, _) = best.expect("at least one restart ran");
    finish_report(
        problem,
        &x,
        evaluations,
        start,
        FixedCurveMethod::RestartLocal,
        seed,
    )
}

/// Basin-hopping settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasinHoppingConfig {
    /// Random perturbation + local search steps per run.
    pub hops: usize,
    /// Scale of the Gaussian logit perturbation.
    pub step_scale: f64,
    /// Metropolis acceptance temperature.
    pub temperature: f64,
    /// Independent runs; the best result across runs is reported.
    pub runs: usize,
    pub local: RestartConfig,
}

impl Default for BasinHoppingConfig {
    fn default() -> Self {
        Self {
            hops: 50,
            step_scale: 0.5,
            temperature: 1.0,
            runs: 10,
            local: RestartConfig {
                restarts: 1,
                ..RestartConfig::default()
            },
        }
    }
}

/// Repeated local search with Gaussian perturbations and Metropolis
/// acceptance; `runs` independent chains, best overall returned.
pub fn optimize_basinhopping(
    problem: &FixedCurveProblem,
    config: &BasinHoppingConfig,
    seed: u64,
) -> OptimizerReport {
    let start = Instant::now();
    let t = problem.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = vec![0.0; t];
    let mut evaluations = 0u64;
    let mut best: Option<(Vec<f64>, f64)> = None;

    let local =
        |x0: &[f64], rng_evals: &mut u64, scratch: &mut Vec<f64>| -> (Vec<f64>, f64) {
            let (x, f, evals) = nelder_mead(
                |x| problem.loss_for_logits(x, scratch),
                x0,
                config.local.initial_step,
                config.local.max_iters,
                config.local.f_tol,
                config.local.x_tol,
            );
            *rng_evals += evals;
            (x, f)
        };

    for _ in 0..config.runs.max(1) {
        let x0: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (mut current_x, mut current_f) = local(&x0, &mut evaluations, &mut scratch);
        if best.as_ref().map_or(true, |(_, bf)| current_f < *bf) {
            best = Some((current_x.clone(), current_f));
        }
        for _ in 0..config.hops {
            let perturbed: Vec<f64> = current_x
                .iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + config.step_scale * z
                })
                .collect();
            let (cand_x, cand_f) = local(&perturbed, &mut evaluations, &mut scratch);
            if best.as_ref().map_or(true, |(_, bf)| cand_f < *bf) {
                best = Some((cand_x.clone(), cand_f));
            }
            let accept = cand_f < current_f || {
                let u: f64 = rng.random_range(0.0..1.0);
                u < (-(cand_f - current_f) / config.temperature).exp()
            };
            if accept {
                current_x = cand_x;
                current_f = cand_f;
            }
        }
    }
    let (x, _) = best.expect("at least one run completed");
    finish_report(
        problem,
        &x,
        evaluations,
        start,
        FixedCurveMethod::BasinHopping,
        seed,
    )
}

fn finish_report(
    problem: &FixedCurveProblem,
    logits: &[f64],
    evaluations: u64,
    start: Instant,
    method: FixedCurveMethod,
    seed: u64,
) -> OptimizerReport {
    let curve = AllocationCurve::from_logits(logits);
    let loss = problem.loss_for_weights(curve.weights());
    OptimizerReport {
        curve,
        loss,
        evaluations,
        wall_time_s: start.elapsed().as_secs_f64(),
        method,
        seed,
    }
}

/// Standard Nelder–Mead simplex search (reflection 1, expansion 2,
/// contraction 0.5, shrink 0.5). Returns the best point, its value and the
/// number of function evaluations.
fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_iters: usize,
    f_tol: f64,
    x_tol: f64,
) -> (Vec<f64>, f64, u64) {
    let dim = x0.len();
    let mut evals = 0u64;
    let mut eval = |x: &[f64], evals: &mut u64| {
        *evals += 1;
        f(x)
    };

    // simplex: x0 plus one orthogonal step per coordinate
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for d in 0..dim {
        let mut x = x0.to_vec();
        x[d] += step;
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }

    for _ in 0..max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (f_best, f_worst) = (simplex[0].1, simplex[dim].1);
        let spread = f_worst - f_best;
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread < f_tol || size < x_tol {
            break;
        }

        // centroid of all but the worst
        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / dim as f64;
            }
        }
        let worst = simplex[dim].clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst.0)
            .map(|(c, w)| c + (c - w))
            .collect();
        let f_reflect = eval(&reflect, &mut evals);

        if f_reflect < simplex[0].1 {
            // try expanding further along the same direction
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + 2.0 * (c - w))
                .collect();
            let f_expand = eval(&expand, &mut evals);
            simplex[dim] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
        } else if f_reflect < simplex[dim - 1].1 {
            simplex[dim] = (reflect, f_reflect);
        } else {
            // contract toward the centroid (outside if the reflection helped)
            let toward = if f_reflect < worst.1 { &reflect } else { &worst.0 };
            let contract: Vec<f64> = centroid
                .iter()
                .zip(toward)
                .map(|(c, w)| c + 0.5 * (w - c))
                .collect();
            let f_contract = eval(&contract, &mut evals);
            if f_contract < worst.1.min(f_reflect) {
                simplex[dim] = (contract, f_contract);
            } else {
                // shrink everything toward the best vertex
                let best_x = simplex[0].0.clone();
                for (x, fx) in simplex.iter_mut().skip(1) {
                    for (xi, bi) in x.iter_mut().zip(&best_x) {
                        *xi = bi + 0.5 * (*xi - bi);
                    }
                    *fx = eval(x, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    (x, fx, evals)
}

/// On-disk form of a fitted curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveArtifact {
    pub asset: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub loss_kind: String,
    pub method: String,
    pub seed: u64,
    pub weights: Vec<f64>,
    pub train_loss: f64,
    pub wall_time_s: f64,
}

impl CurveArtifact {
    pub fn from_report(report: &OptimizerReport, asset: &str, loss: LossKind) -> Self {
        Self {
            asset: asset.to_string(),
            horizon: report.curve.len(),
            loss_kind: loss.name().to_string(),
            method: report.method.to_string(),
            seed: report.seed,
            weights: report.curve.weights().to_vec(),
            train_loss: report.loss,
            wall_time_s: report.wall_time_s,
        }
    }

    pub fn curve(&self) -> Result<AllocationCurve> {
        AllocationCurve::new(self.weights.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
