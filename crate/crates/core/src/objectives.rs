//! VWAP mathematics: achieved and market VWAP, the three calibration losses,
//! the slippage decomposition bound, the volume-curve R² score and the
//! Konishi/McCulloch–Kazakov reference curve.
//!
//! All losses work on the ratio `achieved / market − 1`, so they are invariant
//! under uniform scaling of prices (and of volumes, which cancel in both the
//! allocation and the market curve).

use serde::{Deserialize, Serialize};

use crate::marketdata::FeatureWindow;
use crate::{Error, Result};

/// A length-T simplex vector of execution weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationCurve(Vec<f64>);

/// Tolerance on `Σ q_t − 1` for a valid allocation.
pub const SIMPLEX_TOL: f64 = 1e-9;

impl AllocationCurve {
    /// Validates non-negativity and unit sum (within [`SIMPLEX_TOL`]).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Dimension("allocation curve must be non-empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Numeric(
                "allocation weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Numeric(format!(
                "allocation weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    /// The flat 1/T allocation.
    pub fn uniform(t: usize) -> Self {
        assert!(t > 0, "horizon must be positive");
        Self(vec![1.0 / t as f64; t])
    }

    /// Softmax of unconstrained logits (max-subtracted); always a valid curve.
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut weights = vec![0.0; logits.len()];
        softmax_into(logits, &mut weights);
        Self(weights)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.0
    }

    /// Largest absolute deviation from the flat curve.
    pub fn max_deviation_from_uniform(&self) -> f64 {
        let flat = 1.0 / self.len() as f64;
        self.0
            .iter()
            .map(|w| (w - flat).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-wise softmax with max subtraction, writing into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Which deviation of achieved from market VWAP a loss penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VwapLossKind {
    Absolute,
    Quadratic,
}

/// Normalizer for the volume-curve targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeNormalization {
    /// Targets are `V_t / Σ_horizon V` (the literal curve-matching loss).
    #[default]
    Horizon,
    /// Targets are `V_t / Σ_lookback V`; keeps the denominator independent of
    /// the (unknown) horizon total.
    Lookback,
}

/// Training objective selector shared by the fixed-curve optimizers and the
/// network trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Absolute,
    Quadratic,
    Volume(VolumeNormalization),
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Absolute => "absolute",
            LossKind::Quadratic => "quadratic",
            LossKind::Volume(_) => "volume",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Volume-weighted average price the order itself achieves: `Σ q_t p_t`.
pub fn achieved_vwap(q: &AllocationCurve, prices: &[f64]) -> Result<f64> {
    if q.len() != prices.len() {
        return Err(Error::Dimension(format!(
            "allocation has {} bins, prices {}",
            q.len(),
            prices.len()
        )));
    }
    Ok(q.weights().iter().zip(prices).map(|(q, p)| q * p).sum())
}

/// Market VWAP over the horizon: `Σ V_t p_t / Σ V_t`.
pub fn market_vwap(volumes: &[f64], prices: &[f64]) -> Result<f64> {
    if volumes.len() != prices.len() {
        return Err(Error::Dimension(format!(
            "volumes have {} bins, prices {}",
            volumes.len(),
            prices.len()
        )));
    }
    let total: f64 = volumes.iter().sum();
    if total <= 0.0 {
        return Err(Error::UndefinedVwap);
    }
    Ok(volumes.iter().zip(prices).map(|(v, p)| v * p).sum::<f64>() / total)
}

/// Signed slippage ratio `achieved/market − 1` for one window.
pub fn slippage_ratio(q: &AllocationCurve, window: &FeatureWindow) -> Result<f64> {
    let achieved = achieved_vwap(q, &window.horizon_prices)?;
    let market = market_vwap(&window.horizon_volumes, &window.horizon_prices)?;
    Ok(achieved / market - 1.0)
}

/// Per-window VWAP loss: `|r|` or `r²` with `r = achieved/market − 1`.
pub fn vwap_loss(q: &AllocationCurve, window: &FeatureWindow, kind: VwapLossKind) -> Result<f64> {
    let r = slippage_ratio(q, window)?;
    Ok(match kind {
        VwapLossKind::Absolute => r.abs(),
        VwapLossKind::Quadratic => r * r,
    })
}

/// The market's realized volume curve `Q_t = V_t / Σ V` for one window.
pub fn market_curve(window: &FeatureWindow) -> Result<AllocationCurve> {
    let total = window.horizon_volume_sum();
    if total <= 0.0 {
        return Err(Error::UndefinedVwap);
    }
    AllocationCurve::new(window.horizon_volumes.iter().map(|v| v / total).collect())
}

/// Per-window volume-curve loss `Σ_t (q_t − target_t)²` with the target
/// normalized per `normalization`.
pub fn volume_curve_loss(
    q: &AllocationCurve,
    window: &FeatureWindow,
    normalization: VolumeNormalization,
) -> Result<f64> {
    if q.len() != window.horizon() {
        return Err(Error::Dimension(format!(
            "allocation has {} bins, window horizon {}",
            q.len(),
            window.horizon()
        )));
    }
    let denom = match normalization {
        VolumeNormalization::Horizon => window.horizon_volume_sum(),
        VolumeNormalization::Lookback => window.lookback_volume_sum,
    };
    if denom <= 0.0 {
        return Err(Error::UndefinedTarget);
    }
    Ok(q.weights()
        .iter()
        .zip(&window.horizon_volumes)
        .map(|(q, v)| {
            let d = q - v / denom;
            d * d
        })
        .sum())
}

/// Per-window loss under any [`LossKind`].
pub fn window_loss(q: &AllocationCurve, window: &FeatureWindow, kind: LossKind) -> Result<f64> {
    match kind {
        LossKind::Absolute => vwap_loss(q, window, VwapLossKind::Absolute),
        LossKind::Quadratic => vwap_loss(q, window, VwapLossKind::Quadratic),
        LossKind::Volume(norm) => volume_curve_loss(q, window, norm),
    }
}

/// Mean loss over a window set; windows with an undefined market VWAP (or
/// volume target) are skipped and counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetLoss {
    pub mean: f64,
    pub used: usize,
    pub skipped: usize,
}

pub fn dataset_loss(
    q: &AllocationCurve,
    windows: &[FeatureWindow],
    kind: LossKind,
) -> Result<DatasetLoss> {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for w in windows {
        match window_loss(q, w, kind) {
            Ok(l) => {
                sum += l;
                used += 1;
            }
            Err(Error::UndefinedVwap) | Err(Error::UndefinedTarget) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::UndefinedVwap);
    }
    Ok(DatasetLoss {
        mean: sum / used as f64,
        used,
        skipped,
    })
}

/// Slippage split into a price-deviation term and a volume-allocation term;
/// their sum bounds the total by the triangle inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlippageDecomposition {
    /// `|Σ_t (P_t q_t − VWAP_t Q_t)|`, as a price difference.
    pub total_slippage: f64,
    /// `Σ_t |(P_t − VWAP_t) q_t|` — execution quality inside each bin.
    pub price_term: f64,
    /// `Σ_t |VWAP_t (q_t − Q_t)|` — allocation mismatch against the market curve.
    pub volume_term: f64,
    /// `price_term + volume_term`.
    pub bound: f64,
}

/// Computes the decomposition for one window. `exec_prices` are the average
/// prices the order actually paid per bin, `market_bin_vwaps` the market's
/// per-bin VWAPs.
pub fn slippage_decomposition(
    q: &AllocationCurve,
    market: &AllocationCurve,
    exec_prices: &[f64],
    market_bin_vwaps: &[f64],
) -> Result<SlippageDecomposition> {
    let t = q.len();
    if market.len() != t || exec_prices.len() != t || market_bin_vwaps.len() != t {
        return Err(Error::Dimension(
            "decomposition inputs must share the horizon length".into(),
        ));
    }
    let mut total = 0.0;
    let mut price_term = 0.0;
    let mut volume_term = 0.0;
    for i in 0..t {
        let (qi, qm) = (q.weights()[i], market.weights()[i]);
        let (p, vwap) = (exec_prices[i], market_bin_vwaps[i]);
        total += p * qi - vwap * qm;
        price_term += ((p - vwap) * qi).abs();
        volume_term += (vwap * (qi - qm)).abs();
    }
    let total_slippage = total.abs();
    let bound = price_term + volume_term;
    debug_assert!(
        total_slippage <= bound + 1e-12 * (1.0 + bound),
        "triangle-inequality bound violated: {total_slippage} > {bound}"
    );
    Ok(SlippageDecomposition {
        total_slippage,
        price_term,
        volume_term,
        bound,
    })
}

/// Per-window R² of an allocation against the market curve, with the flat
/// 1/T curve as the baseline (the mean of any simplex vector is exactly 1/T).
///
/// Returns `None` when the market curve is exactly uniform (zero total
/// variance); such windows are excluded from dataset means.
pub fn volume_curve_r2(q: &AllocationCurve, market: &AllocationCurve) -> Option<f64> {
    assert_eq!(q.len(), market.len(), "curves must share the horizon length");
    let flat = 1.0 / market.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (qi, mi) in q.weights().iter().zip(market.weights()) {
        ss_res += (mi - qi) * (mi - qi);
        ss_tot += (mi - flat) * (mi - flat);
    }
    if ss_tot == 0.0 {
        None
    } else {
        Some(1.0 - ss_res / ss_tot)
    }
}

/// The analytic reference allocation shifting the mean volume curve by the
/// volume–volatility covariance per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KonishiCurve {
    /// `E[X_t]`: mean market volume share per bin.
    pub mean_volume: Vec<f64>,
    /// Raw `x_t = E[X_t] + Cov[X_t, σ_t²] / E[σ_t²]` before projection.
    pub variance_weighted: Vec<f64>,
    /// `variance_weighted` clipped at zero and renormalized to the simplex.
    pub projected: AllocationCurve,
    /// Bins where `E[σ_t²] = 0` forced the mean-volume fallback.
    pub fallback_bins: Vec<usize>,
}

/// Estimates the Konishi/McCulloch–Kazakov curve from training windows.
///
/// Per bin, `X_t` is the window's market volume share and `σ_t²` the squared
/// bin-VWAP return (chained from the last lookback price), the simplest
/// volatility proxy. Windows with an undefined market curve are skipped.
pub fn konishi_curve(windows: &[FeatureWindow]) -> Result<KonishiCurve> {
    if windows.len() < 30 {
        return Err(Error::Config(format!(
            "need at least 30 windows to estimate the curve, got {}",
            windows.len()
        )));
    }
    let t = windows[0].horizon();
    let mut n = 0usize;
    let mut sum_x = vec![0.0; t];
    let mut sum_s = vec![0.0; t];
    let mut sum_xs = vec![0.0; t];
    for w in windows {
        if w.horizon() != t {
            return Err(Error::Dimension("windows disagree on horizon length".into()));
        }
        let total = w.horizon_volume_sum();
        if total <= 0.0 {
            continue;
        }
        let mut prev = w.prev_price;
        for i in 0..t {
            let x = w.horizon_volumes[i] / total;
            let ret = w.horizon_prices[i] / prev - 1.0;
            let s2 = ret * ret;
            sum_x[i] += x;
            sum_s[i] += s2;
            sum_xs[i] += x * s2;
            prev = w.horizon_prices[i];
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedVwap);
    }
    let nf = n as f64;
    let mut mean_volume = vec![0.0; t];
    let mut variance_weighted = vec![0.0; t];
    let mut fallback_bins = Vec::new();
    for i in 0..t {
        let ex = sum_x[i] / nf;
        let es = sum_s[i] / nf;
        let exs = sum_xs[i] / nf;
        mean_volume[i] = ex;
        if es > 0.0 {
            // E[Xσ²]/E[σ²] = E[X] + Cov[X,σ²]/E[σ²]
            variance_weighted[i] = exs / es;
        } else {
            log::warn!("zero return variance in bin {i}; falling back to the mean volume share");
            variance_weighted[i] = ex;
            fallback_bins.push(i);
        }
    }
    let mut clipped: Vec<f64> = variance_weighted.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 {
        for c in clipped.iter_mut() {
            *c /= total;
        }
    } else {
        clipped = vec![1.0 / t as f64; t];
    }
    Ok(KonishiCurve {
        mean_volume,
        variance_weighted,
        projected: AllocationCurve::new(clipped)?,
        fallback_bins,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::marketdata::FeatureWindow;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Window with the given horizon volumes/prices and a trivial lookback.
    pub(crate) fn window(volumes: &[f64], prices: &[f64]) -> FeatureWindow {
        window_with_lookback_sum(volumes, prices, 10.0)
    }

    pub(crate) fn window_with_lookback_sum(
        volumes: &[f64],
        prices: &[f64],
        lookback_volume_sum: f64,
    ) -> FeatureWindow {
        let t = volumes.len();
        FeatureWindow::new(
            Array2::zeros((2, 3)),
            Array2::zeros((t, 3)),
            volumes.to_vec(),
            prices.to_vec(),
            prices[0],
            lookback_volume_sum,
            "TEST".into(),
            0,
        )
        .unwrap()
    }

    fn curve(w: &[f64]) -> AllocationCurve {
        AllocationCurve::new(w.to_vec()).unwrap()
    }

    #[test]
    fn achieved_vwap_examples() {
        let p = [100.0, 110.0];
        assert_abs_diff_eq!(achieved_vwap(&curve(&[0.5, 0.5]), &p).unwrap(), 105.0);
        assert_abs_diff_eq!(achieved_vwap(&curve(&[1.0, 0.0]), &p).unwrap(), 100.0);
        assert_abs_diff_eq!(achieved_vwap(&curve(&[0.25, 0.75]), &p).unwrap(), 107.5);
        assert!(achieved_vwap(&curve(&[1.0]), &p).is_err());
    }

    #[test]
    fn market_vwap_examples() {
        assert_abs_diff_eq!(
            market_vwap(&[1.0, 3.0], &[100.0, 110.0]).unwrap(),
            107.5
        );
        assert_abs_diff_eq!(market_vwap(&[4.0, 4.0], &[100.0, 110.0]).unwrap(), 105.0);
        assert!(matches!(
            market_vwap(&[0.0, 0.0], &[100.0, 110.0]).unwrap_err(),
            Error::UndefinedVwap
        ));
    }

    #[test]
    fn vwap_loss_examples() {
        // q equal to the market curve: achieved = market for both kinds.
        let w = window(&[1.0, 3.0], &[100.0, 110.0]);
        let q_market = curve(&[0.25, 0.75]);
        assert_abs_diff_eq!(vwap_loss(&q_market, &w, VwapLossKind::Absolute).unwrap(), 0.0);
        assert_abs_diff_eq!(vwap_loss(&q_market, &w, VwapLossKind::Quadratic).unwrap(), 0.0);

        // achieved 101 vs market 100: ratio 1.01.
        let w2 = window(&[1.0, 1.0], &[99.0, 101.0]); // market = 100
        let q = curve(&[0.0, 1.0]); // achieved = 101
        assert_abs_diff_eq!(
            vwap_loss(&q, &w2, VwapLossKind::Absolute).unwrap(),
            0.01,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            vwap_loss(&q, &w2, VwapLossKind::Quadratic).unwrap(),
            1e-4,
            epsilon = 1e-12
        );

        // T = 1 forces q = Q = [1].
        let w3 = window(&[5.0], &[100.0]);
        assert_abs_diff_eq!(
            vwap_loss(&curve(&[1.0]), &w3, VwapLossKind::Absolute).unwrap(),
            0.0
        );
    }

    #[test]
    fn volume_curve_loss_examples() {
        let w = window(&[1.0, 3.0], &[100.0, 110.0]);
        let q_market = curve(&[0.25, 0.75]);
        assert_abs_diff_eq!(
            volume_curve_loss(&q_market, &w, VolumeNormalization::Horizon).unwrap(),
            0.0
        );
        let flat = AllocationCurve::uniform(2);
        assert_abs_diff_eq!(
            volume_curve_loss(&flat, &w, VolumeNormalization::Horizon).unwrap(),
            0.125,
            epsilon = 1e-12
        );
        // Lookback normalization differs whenever the sums differ.
        let w2 = window_with_lookback_sum(&[1.0, 3.0], &[100.0, 110.0], 8.0);
        let horizon = volume_curve_loss(&flat, &w2, VolumeNormalization::Horizon).unwrap();
        let lookback = volume_curve_loss(&flat, &w2, VolumeNormalization::Lookback).unwrap();
        assert_ne!(horizon, lookback);
    }

    #[test]
    fn decomposition_examples() {
        let q = curve(&[0.5, 0.5]);
        let m = curve(&[0.25, 0.75]);
        let prices = [100.0, 110.0];

        let d = slippage_decomposition(&m, &m, &prices, &prices).unwrap();
        assert_eq!(
            (d.total_slippage, d.price_term, d.volume_term, d.bound),
            (0.0, 0.0, 0.0, 0.0)
        );

        // Execution at the bin VWAP: price term vanishes.
        let d2 = slippage_decomposition(&q, &m, &prices, &prices).unwrap();
        assert_eq!(d2.price_term, 0.0);
        assert!(d2.total_slippage <= d2.volume_term + 1e-12);
    }

    #[test]
    fn decomposition_bound_holds_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let t = rng.random_range(1..=16);
            let logits_q: Vec<f64> = (0..t).map(|_| rng.random_range(-3.0..3.0)).collect();
            let logits_m: Vec<f64> = (0..t).map(|_| rng.random_range(-3.0..3.0)).collect();
            let q = AllocationCurve::from_logits(&logits_q);
            let m = AllocationCurve::from_logits(&logits_m);
            let exec: Vec<f64> = (0..t).map(|_| rng.random_range(50.0..150.0)).collect();
            let vwaps: Vec<f64> = (0..t).map(|_| rng.random_range(50.0..150.0)).collect();
            let d = slippage_decomposition(&q, &m, &exec, &vwaps).unwrap();
            assert!(
                d.total_slippage <= d.bound * (1.0 + 1e-12) + 1e-15,
                "bound violated: {} > {}",
                d.total_slippage,
                d.bound
            );
            assert!(d.bound >= d.price_term.max(d.volume_term));
        }
    }

    #[test]
    fn r2_examples() {
        let market = curve(&[0.25, 0.75]);
        assert_abs_diff_eq!(
            volume_curve_r2(&AllocationCurve::uniform(2), &market).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(volume_curve_r2(&market, &market).unwrap(), 1.0);
        assert_abs_diff_eq!(
            volume_curve_r2(&curve(&[0.3, 0.7]), &market).unwrap(),
            0.96,
            epsilon = 1e-12
        );
        // Exactly uniform market curve has zero variance: excluded.
        assert!(volume_curve_r2(&market, &AllocationCurve::uniform(2)).is_none());
    }

    #[test]
    fn dataset_loss_skips_undefined_windows() {
        let good = window(&[1.0, 3.0], &[100.0, 110.0]);
        let dead = window(&[0.0, 0.0], &[100.0, 100.0]);
        let flat = AllocationCurve::uniform(2);
        let d = dataset_loss(&flat, &[good.clone(), dead], LossKind::Absolute).unwrap();
        assert_eq!((d.used, d.skipped), (1, 1));
        assert_abs_diff_eq!(
            d.mean,
            vwap_loss(&flat, &good, VwapLossKind::Absolute).unwrap()
        );
    }

    /// Brute-force generator for Konishi inputs: draws per-window volume
    /// shares and price paths from a controllable joint law.
    fn konishi_windows(
        n: usize,
        t: usize,
        last_bin_coupled: bool,
        seed: u64,
    ) -> Vec<FeatureWindow> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let event = rng.random_bool(0.5);
            let mut volumes: Vec<f64> = (0..t).map(|_| rng.random_range(0.5..1.5)).collect();
            let mut prices = Vec::with_capacity(t);
            let mut p = 100.0;
            for i in 0..t {
                let sigma = if last_bin_coupled && i == t - 1 && event {
                    0.05
                } else {
                    0.002
                };
                if last_bin_coupled && i == t - 1 && event {
                    volumes[i] *= 6.0;
                }
                let z: f64 = rng.random_range(-1.0..1.0);
                p *= 1.0 + sigma * z;
                prices.push(p);
            }
            out.push(window(&volumes, &prices));
        }
        out
    }

    #[test]
    fn konishi_reduces_to_mean_curve_when_independent() {
        let windows = konishi_windows(4000, 4, false, 9);
        let k = konishi_curve(&windows).unwrap();
        for (proj, mean) in k.projected.weights().iter().zip(&k.mean_volume) {
            assert_abs_diff_eq!(proj, mean, epsilon = 0.01);
        }
    }

    #[test]
    fn konishi_overweights_covariant_last_bin() {
        let windows = konishi_windows(4000, 4, true, 10);
        let k = konishi_curve(&windows).unwrap();
        let t = k.mean_volume.len();
        assert!(
            k.projected.weights()[t - 1] > k.mean_volume[t - 1] + 0.02,
            "projected {} should exceed mean share {}",
            k.projected.weights()[t - 1],
            k.mean_volume[t - 1]
        );
    }

    #[test]
    fn konishi_identical_windows_return_their_curve() {
        let w = window(&[1.0, 1.0, 2.0], &[100.0, 101.0, 99.0]);
        let windows: Vec<FeatureWindow> = (0..40).map(|_| w.clone()).collect();
        let k = konishi_curve(&windows).unwrap();
        for (x, q) in k.variance_weighted.iter().zip([0.25, 0.25, 0.5]) {
            assert_abs_diff_eq!(*x, q, epsilon = 1e-12);
        }
    }

    #[test]
    fn konishi_requires_thirty_windows() {
        let w = window(&[1.0, 3.0], &[100.0, 110.0]);
        let windows: Vec<FeatureWindow> = (0..29).map(|_| w.clone()).collect();
        assert!(matches!(
            konishi_curve(&windows).unwrap_err(),
            Error::Config(_)
        ));
    }

    proptest! {
        /// Scale invariance: losses depend only on the price *ratios* and the
        /// volume *shares*.
        #[test]
        fn loss_invariant_under_uniform_scaling(
            logits in proptest::collection::vec(-3.0..3.0f64, 2..6),
            vols in proptest::collection::vec(0.1..10.0f64, 2..6),
            price_scale in 0.01..100.0f64,
            vol_scale in 0.01..100.0f64,
        ) {
            let t = logits.len().min(vols.len());
            let q = AllocationCurve::from_logits(&logits[..t]);
            let vols = &vols[..t];
            let prices: Vec<f64> = (0..t).map(|i| 100.0 + 3.0 * i as f64).collect();

            let w1 = window(vols, &prices);
            let scaled_p: Vec<f64> = prices.iter().map(|p| p * price_scale).collect();
            let scaled_v: Vec<f64> = vols.iter().map(|v| v * vol_scale).collect();
            let w2 = window(&scaled_v, &scaled_p);

            for kind in [VwapLossKind::Absolute, VwapLossKind::Quadratic] {
                let a = vwap_loss(&q, &w1, kind).unwrap();
                let b = vwap_loss(&q, &w2, kind).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
            // achieved/market scale together with prices
            let av1 = achieved_vwap(&q, &prices).unwrap();
            let av2 = achieved_vwap(&q, &scaled_p).unwrap();
            prop_assert!((av2 - av1 * price_scale).abs() <= 1e-9 * av2.abs());
        }

        /// The flat curve scores exactly zero R² against any non-uniform
        /// market curve; the market curve itself scores one.
        #[test]
        fn r2_anchors(logits in proptest::collection::vec(-2.0..2.0f64, 2..8)) {
            let market = AllocationCurve::from_logits(&logits);
            let flat = AllocationCurve::uniform(market.len());
            match volume_curve_r2(&flat, &market) {
                Some(r2) => prop_assert_eq!(r2, 0.0),
                None => prop_assert!(market.max_deviation_from_uniform() == 0.0),
            }
            if let Some(r2) = volume_curve_r2(&market, &market) {
                prop_assert!((r2 - 1.0).abs() < 1e-12);
            }
        }
    }

    /// Mean-of-curves optimality: over the simplex, the dataset volume-curve
    /// loss is minimized at the mean market curve.
    #[test]
    fn dataset_volume_loss_minimized_at_mean_curve() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = 3;
        let windows: Vec<FeatureWindow> = (0..200)
            .map(|_| {
                let vols: Vec<f64> = (0..t).map(|_| rng.random_range(0.1..2.0)).collect();
                let prices: Vec<f64> = (0..t).map(|_| rng.random_range(90.0..110.0)).collect();
                window(&vols, &prices)
            })
            .collect();
        let mut mean = vec![0.0; t];
        for w in &windows {
            let total = w.horizon_volume_sum();
            for (m, v) in mean.iter_mut().zip(&w.horizon_volumes) {
                *m += v / total;
            }
        }
        for m in mean.iter_mut() {
            *m /= windows.len() as f64;
        }
        let q_star = AllocationCurve::new(mean).unwrap();
        let best = dataset_loss(&q_star, &windows, LossKind::Volume(VolumeNormalization::Horizon))
            .unwrap()
            .mean;
        // Fine grid over the 3-simplex.
        let steps = 40;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let a = i as f64 / steps as f64;
                let b = j as f64 / steps as f64;
                let q = AllocationCurve::new(vec![a, b, (1.0 - a - b).max(0.0)]).unwrap();
                let l = dataset_loss(&q, &windows, LossKind::Volume(VolumeNormalization::Horizon))
                    .unwrap()
                    .mean;
                assert!(l + 1e-12 >= best, "grid point beats the mean curve");
            }
        }
    }
}
