//! Bar ingestion, feature engineering and dataset splitting.
//!
//! The pipeline is `load_bars` → `compute_features` → `split_dataset`.
//! Input is a delimited text file of time bins (timestamp, bin VWAP price,
//! traded volume); output is a chronological list of [`FeatureWindow`]s, each
//! pairing a lookback feature matrix with the horizon volumes and prices the
//! execution is judged against.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, Timelike};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One time bin of market history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    /// Epoch seconds, UTC.
    pub timestamp: i64,
    /// Volume-weighted average price of the bin (carried forward on empty bins).
    pub vwap_price: f64,
    /// Traded volume in base units.
    pub volume: f64,
}

/// A validated, gap-free series of bars with uniform spacing.
#[derive(Debug, Clone)]
pub struct BarSeries {
    bars: Vec<Bar>,
    bin_seconds: i64,
}

impl BarSeries {
    /// Validates ordering/spacing invariants and fills gaps with zero-volume
    /// bars carrying the last observed price.
    pub fn new(mut bars: Vec<Bar>, bin_seconds: i64) -> Result<Self> {
        if bin_seconds <= 0 {
            return Err(Error::Config("bin_seconds must be positive".into()));
        }
        if bars.is_empty() {
            return Err(Error::Data("empty bar series".into()));
        }
        bars.sort_by_key(|b| b.timestamp);

        let mut filled = Vec::with_capacity(bars.len());
        let mut last_price: Option<f64> = None;
        for (i, bar) in bars.iter().enumerate() {
            if !bar.vwap_price.is_finite() || !bar.volume.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite value at timestamp {}",
                    bar.timestamp
                )));
            }
            if bar.volume < 0.0 {
                return Err(Error::Data(format!(
                    "negative volume at timestamp {}",
                    bar.timestamp
                )));
            }
            if bar.volume > 0.0 && bar.vwap_price <= 0.0 {
                return Err(Error::Data(format!(
                    "non-positive price with positive volume at timestamp {}",
                    bar.timestamp
                )));
            }
            if let Some(prev) = filled.last().map(|b: &Bar| b.timestamp) {
                if bar.timestamp == prev {
                    return Err(Error::Data(format!(
                        "duplicate timestamp {}",
                        bar.timestamp
                    )));
                }
                let gap = bar.timestamp - prev;
                if gap % bin_seconds != 0 {
                    return Err(Error::Data(format!(
                        "timestamp {} not aligned to {}s bins",
                        bar.timestamp, bin_seconds
                    )));
                }
                // Fill missing bins: zero volume, price carried forward.
                let carry = last_price.expect("previous bar always sets a price");
                let mut t = prev + bin_seconds;
                while t < bar.timestamp {
                    filled.push(Bar {
                        timestamp: t,
                        vwap_price: carry,
                        volume: 0.0,
                    });
                    t += bin_seconds;
                }
            }
            let price = if bar.volume == 0.0 {
                match last_price {
                    Some(p) => p,
                    None if bar.vwap_price > 0.0 => bar.vwap_price,
                    None => {
                        return Err(Error::Data(format!(
                            "series starts with zero volume and no usable price (row {})",
                            i + 1
                        )))
                    }
                }
            } else {
                bar.vwap_price
            };
            last_price = Some(price);
            filled.push(Bar {
                timestamp: bar.timestamp,
                vwap_price: price,
                volume: bar.volume,
            });
        }
        Ok(Self {
            bars: filled,
            bin_seconds,
        })
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn bin_seconds(&self) -> i64 {
        self.bin_seconds
    }
}

/// Column names mapping a delimited file onto [`Bar`] fields.
///
/// The default maps `timestamp,vwap_price,volume` and falls back to a plain
/// `price` column when `vwap_price` is absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMap {
    pub timestamp: String,
    pub price: String,
    pub volume: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            price: "vwap_price".into(),
            volume: "volume".into(),
        }
    }
}

/// Loads a delimited bar file (header required), sorts by timestamp, fills
/// gaps with zero-volume carried-price bars and validates invariants.
pub fn load_bars(path: &Path, schema: &ColumnMap, bin_seconds: i64) -> Result<BarSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_idx = find(&schema.timestamp)
        .ok_or_else(|| Error::Schema(format!("missing column '{}'", schema.timestamp)))?;
    let price_idx = find(&schema.price)
        .or_else(|| {
            // Accept a plain "price" column when the default name is absent.
            (schema.price == "vwap_price").then(|| find("price")).flatten()
        })
        .ok_or_else(|| Error::Schema(format!("missing column '{}'", schema.price)))?;
    let vol_idx = find(&schema.volume)
        .ok_or_else(|| Error::Schema(format!("missing column '{}'", schema.volume)))?;

    let mut bars = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("row {}: {e}", row + 1)))?;
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let timestamp: i64 = field(ts_idx)
            .parse()
            .map_err(|_| Error::Data(format!("row {}: bad timestamp '{}'", row + 1, field(ts_idx))))?;
        let vwap_price: f64 = field(price_idx)
            .parse()
            .map_err(|_| Error::Data(format!("row {}: bad price '{}'", row + 1, field(price_idx))))?;
        let volume: f64 = field(vol_idx)
            .parse()
            .map_err(|_| Error::Data(format!("row {}: bad volume '{}'", row + 1, field(vol_idx))))?;
        if !vwap_price.is_finite() || !volume.is_finite() {
            return Err(Error::Data(format!("row {}: non-finite value", row + 1)));
        }
        bars.push(Bar {
            timestamp,
            vwap_price,
            volume,
        });
    }
    BarSeries::new(bars, bin_seconds)
}

/// Encoding of the hour-of-day / day-of-week features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEncoding {
    /// 24 + 7 one-hot columns (default; suits linear models).
    #[default]
    OneHot,
    /// Two scalar columns, hour/23 and weekday/6.
    Scalar,
}

/// Feature layout and windowing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Lookback length S (rows of the feature matrix).
    pub lookback: usize,
    /// Horizon length T (bins the order executes over).
    pub horizon: usize,
    /// Trailing window, in bins, for the volume normalizer (two weeks of
    /// hourly bins by default). The window excludes the current bin.
    pub normalization_window: usize,
    pub time_encoding: TimeEncoding,
    /// Window stride; 1 maximizes sample count, `horizon` gives
    /// non-overlapping executions.
    pub stride: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            lookback: 120,
            horizon: 12,
            normalization_window: 336,
            time_encoding: TimeEncoding::OneHot,
            stride: 1,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be >= 1".into()));
        }
        if self.normalization_window == 0 {
            return Err(Error::Config("normalization_window must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Total feature dimension F (sum of the block widths).
    pub fn feature_dim(&self) -> usize {
        match self.time_encoding {
            TimeEncoding::OneHot => 1 + 24 + 7 + 1,
            TimeEncoding::Scalar => 1 + 1 + 1 + 1,
        }
    }

    /// Stable fingerprint of the spec, embedded in window caches so stale
    /// caches are detected.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// One training/backtest sample: lookback features plus the horizon the
/// execution is scored on.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    /// Lookback feature matrix, S×F.
    pub x: Array2<f64>,
    /// Feature rows of the horizon bins, T×F. Row `t` is computed exactly like
    /// a lookback row and only uses information available once bin `t` has
    /// traded, so dynamic strategies can replay a shifted lookback.
    pub horizon_features: Array2<f64>,
    /// Raw market volumes over the horizon.
    pub horizon_volumes: Vec<f64>,
    /// Bin VWAP prices over the horizon (carry-forward applied, all positive).
    pub horizon_prices: Vec<f64>,
    /// VWAP price of the last lookback bin; anchors the first horizon return.
    pub prev_price: f64,
    /// Sum of raw volumes over the lookback bins (strictly positive).
    pub lookback_volume_sum: f64,
    pub asset: String,
    /// Timestamp of the first lookback bin.
    pub start_timestamp: i64,
}

impl FeatureWindow {
    /// Validating constructor; rejects NaN/Inf, non-positive horizon prices
    /// and empty lookback volume.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x: Array2<f64>,
        horizon_features: Array2<f64>,
        horizon_volumes: Vec<f64>,
        horizon_prices: Vec<f64>,
        prev_price: f64,
        lookback_volume_sum: f64,
        asset: String,
        start_timestamp: i64,
    ) -> Result<Self> {
        let t = horizon_volumes.len();
        if horizon_prices.len() != t || horizon_features.nrows() != t {
            return Err(Error::Dimension(format!(
                "horizon lengths disagree: {} volumes, {} prices, {} feature rows",
                t,
                horizon_prices.len(),
                horizon_features.nrows()
            )));
        }
        if x.ncols() != horizon_features.ncols() {
            return Err(Error::Dimension(
                "lookback and horizon feature widths differ".into(),
            ));
        }
        let finite = x.iter().chain(horizon_features.iter()).all(|v| v.is_finite())
            && horizon_volumes.iter().all(|v| v.is_finite() && *v >= 0.0)
            && horizon_prices.iter().all(|p| p.is_finite() && *p > 0.0)
            && prev_price.is_finite()
            && prev_price > 0.0;
        if !finite {
            return Err(Error::Data("window contains non-finite or invalid values".into()));
        }
        if !(lookback_volume_sum > 0.0) {
            return Err(Error::Data("lookback volume sum must be positive".into()));
        }
        Ok(Self {
            x,
            horizon_features,
            horizon_volumes,
            horizon_prices,
            prev_price,
            lookback_volume_sum,
            asset,
            start_timestamp,
        })
    }

    /// Horizon length T.
    pub fn horizon(&self) -> usize {
        self.horizon_volumes.len()
    }

    /// Lookback length S.
    pub fn lookback(&self) -> usize {
        self.x.nrows()
    }

    /// Total market volume over the horizon.
    pub fn horizon_volume_sum(&self) -> f64 {
        self.horizon_volumes.iter().sum()
    }
}

/// Windows rejected during feature construction, by cause.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    /// A bin in the window had a zero trailing-volume normalizer.
    pub zero_normalizer: usize,
    /// The lookback traded no volume at all.
    pub zero_lookback_volume: usize,
}

impl SkipReport {
    pub fn total(&self) -> usize {
        self.zero_normalizer + self.zero_lookback_volume
    }
}

/// Per-bin feature row, or the reason it is unusable.
enum BinFeatures {
    Valid(Vec<f64>),
    ZeroNormalizer,
}

fn bin_feature_rows(series: &BarSeries, spec: &FeatureSpec) -> Vec<Option<BinFeatures>> {
    let bars = series.bars();
    let w = spec.normalization_window;
    let f = spec.feature_dim();
    let mut rows: Vec<Option<BinFeatures>> = Vec::with_capacity(bars.len());

    // Rolling sum of the previous `w` volumes (exclusive of the current bin),
    // so no feature ever looks at the present or future.
    let mut trailing_sum = 0.0;
    for t in 0..bars.len() {
        if t < w {
            trailing_sum += bars[t].volume;
            rows.push(None); // warm-up: normalizer not yet defined
            continue;
        }
        let ma = trailing_sum / w as f64;
        let row = if ma > 0.0 {
            let bar = &bars[t];
            let mut row = Vec::with_capacity(f);
            row.push(bar.volume / ma);
            let dt = DateTime::from_timestamp(bar.timestamp, 0)
                .expect("bar timestamps fit chrono's range");
            let hour = dt.hour() as usize;
            let dow = dt.weekday().num_days_from_monday() as usize;
            match spec.time_encoding {
                TimeEncoding::OneHot => {
                    let mut hour_block = [0.0; 24];
                    hour_block[hour] = 1.0;
                    row.extend_from_slice(&hour_block);
                    let mut dow_block = [0.0; 7];
                    dow_block[dow] = 1.0;
                    row.extend_from_slice(&dow_block);
                }
                TimeEncoding::Scalar => {
                    row.push(hour as f64 / 23.0);
                    row.push(dow as f64 / 6.0);
                }
            }
            // Return on the bin VWAP price, forced to zero when nothing traded.
            let ret = if bar.volume == 0.0 {
                0.0
            } else {
                bar.vwap_price / bars[t - 1].vwap_price - 1.0
            };
            row.push(ret);
            BinFeatures::Valid(row)
        } else {
            BinFeatures::ZeroNormalizer
        };
        rows.push(Some(row));
        trailing_sum += bars[t].volume - bars[t - w].volume;
    }
    rows
}

/// Builds sliding lookback/horizon windows with the features of the paper's
/// setup: trailing-normalized volume, hour-of-day, day-of-week and bin-VWAP
/// returns. Windows whose bins lack a volume normalizer, or whose lookback
/// traded nothing, are skipped and counted.
pub fn compute_features(
    series: &BarSeries,
    spec: &FeatureSpec,
    asset: &str,
) -> Result<(Vec<FeatureWindow>, SkipReport)> {
    spec.validate()?;
    let bars = series.bars();
    let (s, t, w) = (spec.lookback, spec.horizon, spec.normalization_window);
    let needed = w + s + t;
    if bars.len() < needed {
        return Err(Error::Config(format!(
            "series too short: {} bars, need at least {needed} (normalization {w} + lookback {s} + horizon {t})",
            bars.len()
        )));
    }

    let rows = bin_feature_rows(series, spec);
    let f = spec.feature_dim();
    let mut windows = Vec::new();
    let mut skips = SkipReport::default();

    let mut start = w;
    while start + s + t <= bars.len() {
        let mut ok = true;
        for idx in start..start + s + t {
            match rows[idx] {
                Some(BinFeatures::Valid(_)) => {}
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            skips.zero_normalizer += 1;
            start += spec.stride;
            continue;
        }
        let lookback_volume_sum: f64 = bars[start..start + s].iter().map(|b| b.volume).sum();
        if lookback_volume_sum <= 0.0 {
            skips.zero_lookback_volume += 1;
            start += spec.stride;
            continue;
        }

        let mut x = Array2::zeros((s, f));
        for (i, idx) in (start..start + s).enumerate() {
            if let Some(BinFeatures::Valid(row)) = &rows[idx] {
                x.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
            }
        }
        let mut horizon_features = Array2::zeros((t, f));
        for (i, idx) in (start + s..start + s + t).enumerate() {
            if let Some(BinFeatures::Valid(row)) = &rows[idx] {
                horizon_features
                    .row_mut(i)
                    .assign(&ndarray::ArrayView1::from(&row[..]));
            }
        }
        let horizon_volumes: Vec<f64> = bars[start + s..start + s + t]
            .iter()
            .map(|b| b.volume)
            .collect();
        let horizon_prices: Vec<f64> = bars[start + s..start + s + t]
            .iter()
            .map(|b| b.vwap_price)
            .collect();

        windows.push(FeatureWindow::new(
            x,
            horizon_features,
            horizon_volumes,
            horizon_prices,
            bars[start + s - 1].vwap_price,
            lookback_volume_sum,
            asset.to_string(),
            bars[start].timestamp,
        )?);
        start += spec.stride;
    }
    Ok((windows, skips))
}

/// Chronological train/validation/test partition.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<FeatureWindow>,
    pub validation: Vec<FeatureWindow>,
    pub test: Vec<FeatureWindow>,
    pub seed: u64,
}

/// Splits windows into the chronologically last `test_frac` as the test set,
/// with `val_frac` of the remainder sampled (seeded, without replacement) as
/// validation. Train and validation keep chronological order internally.
pub fn split_dataset(
    mut windows: Vec<FeatureWindow>,
    test_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if windows.len() < 10 {
        return Err(Error::Config(format!(
            "need at least 10 windows to split, got {}",
            windows.len()
        )));
    }
    if !(0.0..1.0).contains(&test_frac) || !(0.0..1.0).contains(&val_frac) {
        return Err(Error::Config("split fractions must lie in [0, 1)".into()));
    }
    windows.sort_by_key(|w| w.start_timestamp);

    let n = windows.len();
    let n_test = ((n as f64) * test_frac).round() as usize;
    let n_front = n - n_test;
    let test = windows.split_off(n_front);

    let n_val = ((n_front as f64) * val_frac).round() as usize;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut val_idx = rand::seq::index::sample(&mut rng, n_front, n_val).into_vec();
    val_idx.sort_unstable();

    let mut is_val = vec![false; n_front];
    for i in &val_idx {
        is_val[*i] = true;
    }
    let mut train = Vec::with_capacity(n_front - n_val);
    let mut validation = Vec::with_capacity(n_val);
    for (i, w) in windows.into_iter().enumerate() {
        if is_val[i] {
            validation.push(w);
        } else {
            train.push(w);
        }
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Window cache: newline-terminated JSON header + little-endian f64 blobs.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    fingerprint: String,
    spec: FeatureSpec,
    asset: String,
    count: usize,
    skip_report: SkipReport,
}

/// Persists windows with the spec fingerprint embedded. Byte-identical for
/// identical inputs.
pub fn write_window_cache(
    path: &Path,
    spec: &FeatureSpec,
    asset: &str,
    windows: &[FeatureWindow],
    skips: &SkipReport,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    let header = CacheHeader {
        fingerprint: spec.fingerprint(),
        spec: spec.clone(),
        asset: asset.to_string(),
        count: windows.len(),
        skip_report: *skips,
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Data(e.to_string()))?;
    out.write_all(b"\n")?;
    for w in windows {
        out.write_all(&w.start_timestamp.to_le_bytes())?;
        out.write_all(&w.prev_price.to_le_bytes())?;
        out.write_all(&w.lookback_volume_sum.to_le_bytes())?;
        let mut write_f64s = |vals: &mut dyn Iterator<Item = f64>| -> Result<()> {
            for v in vals {
                out.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        write_f64s(&mut w.x.iter().copied())?;
        write_f64s(&mut w.horizon_features.iter().copied())?;
        write_f64s(&mut w.horizon_volumes.iter().copied())?;
        write_f64s(&mut w.horizon_prices.iter().copied())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a window cache, verifying the embedded fingerprint against `expected`
/// when provided.
pub fn read_window_cache(
    path: &Path,
    expected: Option<&FeatureSpec>,
) -> Result<(FeatureSpec, String, Vec<FeatureWindow>, SkipReport)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: CacheHeader =
        serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Data(format!("bad cache header: {e}")))?;
    if let Some(spec) = expected {
        if spec.fingerprint() != header.fingerprint {
            return Err(Error::Config(format!(
                "cache {} was built with a different feature spec (fingerprint {} != {})",
                path.display(),
                header.fingerprint,
                spec.fingerprint()
            )));
        }
    }
    let spec = header.spec;
    let (s, t, f) = (spec.lookback, spec.horizon, spec.feature_dim());
    let mut windows = Vec::with_capacity(header.count);
    let read_f64 = |reader: &mut BufReader<std::fs::File>| -> Result<f64> {
        let mut buf = [0u8; 8];
        reader.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    };
    for _ in 0..header.count {
        let mut ts_buf = [0u8; 8];
        reader.read_exact(&mut ts_buf)?;
        let start_timestamp = i64::from_le_bytes(ts_buf);
        let prev_price = read_f64(&mut reader)?;
        let lookback_volume_sum = read_f64(&mut reader)?;
        let block = |rows: usize, cols: usize, reader: &mut BufReader<std::fs::File>| -> Result<Array2<f64>> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut buf = [0u8; 8];
                reader.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Data(format!("bad cache shape: {e}")))
        };
        let x = block(s, f, &mut reader)?;
        let horizon_features = block(t, f, &mut reader)?;
        let vecn = |n: usize, reader: &mut BufReader<std::fs::File>| -> Result<Vec<f64>> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let mut buf = [0u8; 8];
                reader.read_exact(&mut buf)?;
                v.push(f64::from_le_bytes(buf));
            }
            Ok(v)
        };
        let horizon_volumes = vecn(t, &mut reader)?;
        let horizon_prices = vecn(t, &mut reader)?;
        windows.push(FeatureWindow::new(
            x,
            horizon_features,
            horizon_volumes,
            horizon_prices,
            prev_price,
            lookback_volume_sum,
            header.asset.clone(),
            start_timestamp,
        )?);
    }
    Ok((spec, header.asset, windows, header.skip_report))
}
