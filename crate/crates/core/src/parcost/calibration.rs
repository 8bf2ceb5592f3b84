//! Profiled per-stage latency tables and interpolation.
//!
//! A calibration table carries measured stage latencies keyed by
//! `(strategy, server GPU count)` at a set of batch-token points. CSV format:
//!
//! ```text
//! strategy,m,batch_tokens,recv_us,comp_us,send_us,moe_us
//! EP4-PP2,8,256,145,142,207,492
//! ```
//!
//! Receive/send/MoE latencies interpolate linearly in tokens. Compute latency
//! interpolates in the *expected distinct adapter count* implied by the token
//! count under the catalog popularity, which is what produces the sub-linear
//! tokens-to-latency relationship: doubling the batch does not double the
//! number of distinct adapters touched, and distinct invocations drive the
//! memory-bound LoRA compute cost.
//!
//! Queries outside the calibrated token domain are errors, except that the
//! communication stages (recv/send, bandwidth-bound and hence linear) may
//! extrapolate when the model was built with `extrapolate_comm`.

use super::ParallelStrategy;
use crate::error::{Error, Result};
use crate::workload::expected_distinct;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const CAL_HEADER: [&str; 7] = [
    "strategy",
    "m",
    "batch_tokens",
    "recv_us",
    "comp_us",
    "send_us",
    "moe_us",
];

/// One measured point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalPoint {
    pub tokens: f64,
    pub recv_us: f64,
    pub comp_us: f64,
    pub send_us: f64,
    pub moe_us: f64,
}

/// Measured stage latencies keyed by (strategy key, server GPU count).
#[derive(Debug, Clone, Default)]
pub struct CalibrationTable {
    entries: BTreeMap<(String, u32), Vec<CalPoint>>,
}

impl CalibrationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Calibration(format!("cannot open {}: {e}", path.display()))
        })?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        {
            let headers = csv_reader.headers()?;
            if headers.iter().ne(CAL_HEADER.iter().copied()) {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected calibration header `{}`", CAL_HEADER.join(",")),
                });
            }
        }
        let mut table = Self::new();
        for (idx, record) in csv_reader.records().enumerate() {
            let line = idx + 2;
            let record = record.map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            let get = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("missing field {i}"),
                    })?
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse {
                        line,
                        msg: format!("field {}: {e}", CAL_HEADER[i]),
                    })
            };
            let strategy = record.get(0).unwrap_or("").trim();
            let m = get(1)? as u32;
            // Normalize the strategy name so PP/EP rows land on the canonical
            // EPx-PPy key used for lookups.
            let parsed: ParallelStrategy = strategy.parse()?;
            parsed.validate(m)?;
            let key = parsed.calibration_key(m);
            table.insert_point(
                &key,
                m,
                CalPoint {
                    tokens: get(2)?,
                    recv_us: get(3)?,
                    comp_us: get(4)?,
                    send_us: get(5)?,
                    moe_us: get(6)?,
                },
            )?;
        }
        table.validate()?;
        Ok(table)
    }

    /// Adds a point under the canonical key for (strategy, m).
    pub fn add_point(
        &mut self,
        strategy: &ParallelStrategy,
        m: u32,
        point: CalPoint,
    ) -> Result<()> {
        strategy.validate(m)?;
        self.insert_point(&strategy.calibration_key(m), m, point)?;
        self.validate()
    }

    fn insert_point(&mut self, key: &str, m: u32, point: CalPoint) -> Result<()> {
        if point.tokens <= 0.0 {
            return Err(Error::Calibration(format!(
                "batch_tokens must be > 0 for {key}"
            )));
        }
        let points = self.entries.entry((key.to_string(), m)).or_default();
        if points.iter().any(|p| p.tokens == point.tokens) {
            return Err(Error::Calibration(format!(
                "duplicate calibration point at {} tokens for {key}",
                point.tokens
            )));
        }
        points.push(point);
        points.sort_by(|a, b| a.tokens.partial_cmp(&b.tokens).unwrap());
        Ok(())
    }

    /// All stage columns must be non-negative and non-decreasing in tokens.
    fn validate(&self) -> Result<()> {
        for ((key, m), points) in &self.entries {
            for pair in points.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                for (name, lo, hi) in [
                    ("recv_us", a.recv_us, b.recv_us),
                    ("comp_us", a.comp_us, b.comp_us),
                    ("send_us", a.send_us, b.send_us),
                    ("moe_us", a.moe_us, b.moe_us),
                ] {
                    if hi < lo {
                        return Err(Error::Calibration(format!(
                            "{key} (m={m}): {name} decreases between {} and {} tokens",
                            a.tokens, b.tokens
                        )));
                    }
                }
            }
            for p in points {
                if p.recv_us < 0.0 || p.comp_us < 0.0 || p.send_us < 0.0 || p.moe_us < 0.0 {
                    return Err(Error::Calibration(format!(
                        "{key} (m={m}): negative latency at {} tokens",
                        p.tokens
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn points(&self, strategy: &ParallelStrategy, m: u32) -> Result<&[CalPoint]> {
        let key = strategy.calibration_key(m);
        self.entries
            .get(&(key.clone(), m))
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                Error::Calibration(format!("no calibration entry for {key} with m={m}"))
            })
    }

    pub fn has_config(&self, strategy: &ParallelStrategy, m: u32) -> bool {
        self.entries
            .contains_key(&(strategy.calibration_key(m), m))
    }

    pub fn configs(&self) -> impl Iterator<Item = (&str, u32)> {
        self.entries.keys().map(|(k, m)| (k.as_str(), *m))
    }
}

/// Stage of a LoRA execution on the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Recv,
    Comp,
    Send,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Recv => write!(f, "recv"),
            Stage::Comp => write!(f, "comp"),
            Stage::Send => write!(f, "send"),
        }
    }
}

/// Piecewise-linear interpolation over points sorted by x.
///
/// `extrapolate` extends the nearest segment's slope beyond the domain
/// (clamped at zero); otherwise out-of-domain queries are errors.
fn interpolate(points: &[(f64, f64)], x: f64, extrapolate: bool, what: &str) -> Result<f64> {
    debug_assert!(!points.is_empty());
    let (x0, _) = points[0];
    let (xn, _) = points[points.len() - 1];
    if (x < x0 || x > xn) && !extrapolate {
        return Err(Error::Calibration(format!(
            "{what}: probe {x} outside calibrated domain [{x0}, {xn}]"
        )));
    }
    if points.len() == 1 {
        return Ok(points[0].1);
    }
    // Pick the segment: clamp to the first/last for extrapolation.
    let seg = if x <= x0 {
        0
    } else if x >= xn {
        points.len() - 2
    } else {
        points.partition_point(|&(px, _)| px < x).saturating_sub(1)
    };
    let (xa, ya) = points[seg];
    let (xb, yb) = points[seg + 1];
    let t = (x - xa) / (xb - xa);
    Ok((ya + t * (yb - ya)).max(0.0))
}

/// Calibrated stage-latency evaluator for a fixed adapter popularity.
#[derive(Debug, Clone)]
pub struct StageLatencyModel {
    table: CalibrationTable,
    popularity: Vec<f64>,
    extrapolate_comm: bool,
    /// Per-config compute points re-indexed by expected distinct adapters.
    comp_points: BTreeMap<(String, u32), Vec<(f64, f64)>>,
}

impl StageLatencyModel {
    pub fn new(table: CalibrationTable, popularity: Vec<f64>, extrapolate_comm: bool) -> Self {
        let mut comp_points = BTreeMap::new();
        for (key, points) in &table.entries {
            let mapped: Vec<(f64, f64)> = points
                .iter()
                .map(|p| (expected_distinct(&popularity, p.tokens), p.comp_us))
                .collect();
            comp_points.insert(key.clone(), mapped);
        }
        Self {
            table,
            popularity,
            extrapolate_comm,
            comp_points,
        }
    }

    pub fn table(&self) -> &CalibrationTable {
        &self.table
    }

    /// Expected distinct adapters among `tokens` popularity-weighted draws.
    pub fn distinct_at(&self, tokens: f64) -> f64 {
        expected_distinct(&self.popularity, tokens)
    }

    /// Latency in seconds of one server stage at the given activation count.
    pub fn stage_latency(
        &self,
        strategy: &ParallelStrategy,
        m: u32,
        stage: Stage,
        tokens: f64,
    ) -> Result<f64> {
        let points = self.table.points(strategy, m)?;
        let what = format!("{} (m={m}) stage {stage} ", strategy.calibration_key(m));
        let us = match stage {
            Stage::Recv => interpolate(
                &points.iter().map(|p| (p.tokens, p.recv_us)).collect::<Vec<_>>(),
                tokens,
                self.extrapolate_comm,
                &what,
            )?,
            Stage::Send => interpolate(
                &points.iter().map(|p| (p.tokens, p.send_us)).collect::<Vec<_>>(),
                tokens,
                self.extrapolate_comm,
                &what,
            )?,
            Stage::Comp => {
                let key = (strategy.calibration_key(m), m);
                let mapped = self.comp_points.get(&key).expect("validated by points()");
                let d = self.distinct_at(tokens);
                interpolate(mapped, d, false, &what)?
            }
        };
        Ok(us * 1e-6)
    }

    /// Base-model MoE (grouped GEMM) module time in seconds per layer.
    pub fn moe_time(&self, strategy: &ParallelStrategy, m: u32, tokens: f64) -> Result<f64> {
        let points = self.table.points(strategy, m)?;
        let what = format!("{} (m={m}) moe ", strategy.calibration_key(m));
        let us = interpolate(
            &points.iter().map(|p| (p.tokens, p.moe_us)).collect::<Vec<_>>(),
            tokens,
            false,
            &what,
        )?;
        Ok(us * 1e-6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::zipf_probabilities;
    use approx::assert_abs_diff_eq;

    pub const TABLE2_CSV: &str = "\
strategy,m,batch_tokens,recv_us,comp_us,send_us,moe_us
EP1-PP8,8,256,243,342,384,493
EP1-PP8,8,512,527,526,734,762
EP2-PP4,8,256,155,212,221,493
EP2-PP4,8,512,279,315,402,764
EP4-PP2,8,256,145,142,207,492
EP4-PP2,8,512,246,204,396,763
EP8-PP1,8,256,173,163,255,493
EP8-PP1,8,512,310,205,441,763
";

    fn table2() -> CalibrationTable {
        CalibrationTable::from_reader(TABLE2_CSV.as_bytes()).unwrap()
    }

    fn model() -> StageLatencyModel {
        StageLatencyModel::new(table2(), zipf_probabilities(512, 1.2).unwrap(), false)
    }

    fn hybrid(x: u32, y: u32) -> ParallelStrategy {
        ParallelStrategy::Hybrid {
            expert_degree: x,
            stages: y,
        }
    }

    #[test]
    fn exact_at_calibration_points() {
        let m = model();
        let s = hybrid(4, 2);
        assert_abs_diff_eq!(
            m.stage_latency(&s, 8, Stage::Recv, 256.0).unwrap(),
            145e-6,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            m.stage_latency(&s, 8, Stage::Comp, 256.0).unwrap(),
            142e-6,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            m.stage_latency(&s, 8, Stage::Send, 512.0).unwrap(),
            396e-6,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(m.moe_time(&s, 8, 512.0).unwrap(), 763e-6, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_strategies_reuse_hybrid_rows() {
        let m = model();
        // EP on 8 GPUs resolves to the EP8-PP1 row, PP to EP1-PP8.
        assert_abs_diff_eq!(
            m.stage_latency(&ParallelStrategy::ExpertParallel, 8, Stage::Recv, 256.0)
                .unwrap(),
            173e-6,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            m.stage_latency(&ParallelStrategy::PipelineParallel, 8, Stage::Recv, 256.0)
                .unwrap(),
            243e-6,
            epsilon = 1e-15
        );
    }

    #[test]
    fn pure_linear_calibration_doubles_exactly() {
        let mut table = CalibrationTable::new();
        let s = hybrid(2, 1);
        for tokens in [64.0, 128.0, 256.0, 512.0] {
            table
                .add_point(
                    &s,
                    2,
                    CalPoint {
                        tokens,
                        recv_us: 0.5 * tokens,
                        comp_us: 10.0,
                        send_us: 0.75 * tokens,
                        moe_us: tokens,
                    },
                )
                .unwrap();
        }
        let m = StageLatencyModel::new(table, zipf_probabilities(16, 1.2).unwrap(), false);
        let r1 = m.stage_latency(&s, 2, Stage::Recv, 100.0).unwrap();
        let r2 = m.stage_latency(&s, 2, Stage::Recv, 200.0).unwrap();
        assert!((r2 / r1 - 2.0).abs() < 0.01);
    }

    #[test]
    fn compute_scales_sublinearly_at_table_points() {
        let m = model();
        let s = hybrid(4, 2);
        let c1 = m.stage_latency(&s, 8, Stage::Comp, 256.0).unwrap();
        let c2 = m.stage_latency(&s, 8, Stage::Comp, 512.0).unwrap();
        let ratio = c2 / c1;
        assert!((ratio - 204.0 / 142.0).abs() < 1e-9);
        assert!(ratio < 2.0);
    }

    #[test]
    fn comp_is_monotone_and_concave_between_points() {
        let m = model();
        let s = hybrid(4, 2);
        let samples: Vec<f64> = (0..=16)
            .map(|i| {
                let tokens = 256.0 + i as f64 * 16.0;
                m.stage_latency(&s, 8, Stage::Comp, tokens).unwrap()
            })
            .collect();
        for w in samples.windows(2) {
            assert!(w[1] >= w[0] - 1e-15);
        }
        // Discrete second difference stays non-positive: linear in the
        // distinct count composed with a concave tokens->distinct map.
        for w in samples.windows(3) {
            assert!(w[2] - w[1] <= w[1] - w[0] + 1e-12);
        }
    }

    #[test]
    fn missing_config_is_an_error() {
        let m = model();
        let err = m
            .stage_latency(&hybrid(2, 2), 4, Stage::Recv, 256.0)
            .unwrap_err();
        assert!(err.to_string().contains("EP2-PP2"), "{err}");
    }

    #[test]
    fn out_of_domain_errors_without_flag() {
        let m = model();
        let s = hybrid(4, 2);
        let err = m.stage_latency(&s, 8, Stage::Recv, 1024.0).unwrap_err();
        assert!(err.to_string().contains("1024"), "{err}");
        // Compute never extrapolates even with the comm flag set.
        let m2 = StageLatencyModel::new(table2(), zipf_probabilities(512, 1.2).unwrap(), true);
        assert!(m2.stage_latency(&s, 8, Stage::Recv, 1024.0).is_ok());
        assert!(m2.stage_latency(&s, 8, Stage::Comp, 1024.0).is_err());
    }

    #[test]
    fn comm_extrapolation_follows_the_last_segment() {
        let m = StageLatencyModel::new(table2(), zipf_probabilities(512, 1.2).unwrap(), true);
        let s = hybrid(4, 2);
        // recv slope between the two points: (246-145)/256 us per token.
        let expected = (246.0 + (246.0 - 145.0) / 256.0 * 256.0) * 1e-6;
        let got = m.stage_latency(&s, 8, Stage::Recv, 768.0).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn non_monotone_table_rejected() {
        let csv = "\
strategy,m,batch_tokens,recv_us,comp_us,send_us,moe_us
EP2-PP1,2,128,100,50,100,200
EP2-PP1,2,256,90,60,120,300
";
        let err = CalibrationTable::from_reader(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("recv_us"), "{err}");
    }
}
