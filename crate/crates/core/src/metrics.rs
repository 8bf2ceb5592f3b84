//! Evaluation metrics over simulation records.
//!
//! TTFT here is queueing delay plus the decode engine's first-token latency
//! (prefill excluded by construction: the simulator models the decode side of
//! a prefill-decode disaggregated deployment). TPOT is decode time per output
//! token. SLO attainment treats each adapter as a tenant: an adapter attains
//! when strictly more than `threshold` of its requests meet both SLOs.
//!
//! Headline metrics are computed over a steady-state window (fractional
//! warmup/cooldown trimmed from the experiment horizon) so ramp-up and drain
//! artifacts do not pollute tail statistics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Timeline of one completed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub adapter_id: usize,
    pub arrival_time: f64,
    pub admission_time: f64,
    pub first_token_time: f64,
    pub completion_time: f64,
    pub output_tokens: u32,
    /// Scheduler decision order, for admission-trace comparisons.
    pub admission_seq: u64,
}

impl RequestRecord {
    pub fn validate(&self) -> Result<()> {
        let ok = self.arrival_time <= self.admission_time
            && self.admission_time <= self.first_token_time
            && self.first_token_time <= self.completion_time;
        if !ok {
            return Err(Error::Validation(format!(
                "request {} timeline out of order: arrival {} admission {} first {} completion {}",
                self.request_id,
                self.arrival_time,
                self.admission_time,
                self.first_token_time,
                self.completion_time
            )));
        }
        Ok(())
    }

    /// Queueing delay before the scheduler admitted the request.
    pub fn queueing_delay(&self) -> f64 {
        self.admission_time - self.arrival_time
    }
}

/// Time to first token: queueing plus the first decode iteration.
pub fn ttft(record: &RequestRecord) -> f64 {
    record.first_token_time - record.arrival_time
}

/// Average time per output token during decoding.
pub fn tpot(record: &RequestRecord) -> Result<f64> {
    if record.output_tokens == 0 {
        return Err(Error::InvalidArgument(format!(
            "request {} has zero output tokens",
            record.request_id
        )));
    }
    Ok((record.completion_time - record.admission_time) / record.output_tokens as f64)
}

/// Nearest-rank percentile: the ceil(q/100 * n)-th smallest value.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "percentile of an empty set".into(),
        ));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "percentile q must lie in [0, 100], got {q}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = ((q / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Fraction of adapters (with traffic) whose requests meet both SLOs in
/// strictly more than `threshold` of cases.
pub fn slo_attainment(
    records: &[RequestRecord],
    ttft_slo: f64,
    tpot_slo: f64,
    threshold: f64,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "slo_attainment over no records".into(),
        ));
    }
    let mut per_adapter: std::collections::BTreeMap<usize, (u32, u32)> =
        std::collections::BTreeMap::new();
    for r in records {
        let meets = ttft(r) <= ttft_slo && tpot(r)? <= tpot_slo;
        let entry = per_adapter.entry(r.adapter_id).or_insert((0, 0));
        entry.1 += 1;
        if meets {
            entry.0 += 1;
        }
    }
    let adapters = per_adapter.len() as f64;
    let attaining = per_adapter
        .values()
        .filter(|(met, total)| *met as f64 > threshold * *total as f64)
        .count() as f64;
    Ok(attaining / adapters)
}

/// One sample of a diagnostic time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimePoint {
    pub time: f64,
    pub value: f64,
}

/// Steady-state trimming, as fractions of the experiment horizon.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WindowSpec {
    pub warmup_frac: f64,
    pub cooldown_frac: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            warmup_frac: 0.1,
            cooldown_frac: 0.1,
        }
    }
}

/// SLO targets the report evaluates against.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SloSpec {
    pub ttft_slo: f64,
    pub tpot_slo: f64,
    pub attainment_threshold: f64,
}

impl Default for SloSpec {
    fn default() -> Self {
        Self {
            ttft_slo: 0.25,
            tpot_slo: 0.1,
            attainment_threshold: 0.9,
        }
    }
}

/// Full simulation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub requests_total: usize,
    pub requests_completed: usize,
    /// Experiment horizon in seconds (trace window, or last completion for
    /// traces without a declared duration).
    pub horizon: f64,
    pub window_start: f64,
    pub window_end: f64,
    /// Requests whose arrival falls inside the steady-state window.
    pub window_requests: usize,
    pub p95_ttft: Option<f64>,
    pub avg_tpot: Option<f64>,
    /// Completed in-window requests per second of window.
    pub throughput: f64,
    pub attainment: Option<f64>,
    pub mean_batch_size: Option<f64>,
    pub mean_active_adapters: Option<f64>,
    pub batch_series: Vec<TimePoint>,
    pub active_adapter_series: Vec<TimePoint>,
    pub per_request: Vec<RequestRecord>,
}

fn window_mean(series: &[TimePoint], lo: f64, hi: f64) -> Option<f64> {
    let vals: Vec<f64> = series
        .iter()
        .filter(|p| p.time >= lo && p.time <= hi)
        .map(|p| p.value)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Assembles the report from raw records and series.
pub fn build_report(
    per_request: Vec<RequestRecord>,
    requests_total: usize,
    trace_duration: f64,
    batch_series: Vec<TimePoint>,
    active_adapter_series: Vec<TimePoint>,
    window: WindowSpec,
    slos: SloSpec,
) -> Result<MetricsReport> {
    for r in &per_request {
        r.validate()?;
    }
    let last_completion = per_request
        .iter()
        .map(|r| r.completion_time)
        .fold(0.0_f64, f64::max);
    let horizon = if trace_duration > 0.0 {
        trace_duration
    } else {
        last_completion
    };
    let window_start = horizon * window.warmup_frac;
    let window_end = horizon * (1.0 - window.cooldown_frac);

    let in_window: Vec<&RequestRecord> = per_request
        .iter()
        .filter(|r| r.arrival_time >= window_start && r.arrival_time <= window_end)
        .collect();

    let (p95_ttft, avg_tpot, attainment) = if in_window.is_empty() {
        (None, None, None)
    } else {
        let ttfts: Vec<f64> = in_window.iter().map(|r| ttft(r)).collect();
        let tpots = in_window
            .iter()
            .map(|r| tpot(r))
            .collect::<Result<Vec<f64>>>()?;
        let owned: Vec<RequestRecord> = in_window.iter().map(|&r| r.clone()).collect();
        (
            Some(percentile(&ttfts, 95.0)?),
            Some(tpots.iter().sum::<f64>() / tpots.len() as f64),
            Some(slo_attainment(
                &owned,
                slos.ttft_slo,
                slos.tpot_slo,
                slos.attainment_threshold,
            )?),
        )
    };

    let window_len = (window_end - window_start).max(f64::EPSILON);
    let throughput = in_window.len() as f64 / window_len;

    Ok(MetricsReport {
        requests_total,
        requests_completed: per_request.len(),
        horizon,
        window_start,
        window_end,
        window_requests: in_window.len(),
        p95_ttft,
        avg_tpot,
        throughput,
        attainment,
        mean_batch_size: window_mean(&batch_series, window_start, window_end),
        mean_active_adapters: window_mean(&active_adapter_series, window_start, window_end),
        batch_series,
        active_adapter_series,
        per_request,
    })
}

/// Summary block emitted as JSON (per-request data goes to CSV instead).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub requests_total: usize,
    pub requests_completed: usize,
    pub horizon: f64,
    pub window_start: f64,
    pub window_end: f64,
    pub window_requests: usize,
    pub p95_ttft: Option<f64>,
    pub avg_tpot: Option<f64>,
    pub throughput: f64,
    pub attainment: Option<f64>,
    pub mean_batch_size: Option<f64>,
    pub mean_active_adapters: Option<f64>,
}

impl MetricsReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            requests_total: self.requests_total,
            requests_completed: self.requests_completed,
            horizon: self.horizon,
            window_start: self.window_start,
            window_end: self.window_end,
            window_requests: self.window_requests,
            p95_ttft: self.p95_ttft,
            avg_tpot: self.avg_tpot,
            throughput: self.throughput,
            attainment: self.attainment,
            mean_batch_size: self.mean_batch_size,
            mean_active_adapters: self.mean_active_adapters,
        }
    }

    pub fn write_summary_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, &self.summary())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    /// `request_id,adapter_id,arrival,admission,first_token,completion,
    /// output_tokens,ttft,tpot`
    pub fn write_per_request_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "request_id",
            "adapter_id",
            "arrival",
            "admission",
            "first_token",
            "completion",
            "output_tokens",
            "ttft",
            "tpot",
        ])?;
        for r in &self.per_request {
            csv.write_record(&[
                r.request_id.to_string(),
                r.adapter_id.to_string(),
                format!("{}", r.arrival_time),
                format!("{}", r.admission_time),
                format!("{}", r.first_token_time),
                format!("{}", r.completion_time),
                r.output_tokens.to_string(),
                format!("{}", ttft(r)),
                format!("{}", tpot(r)?),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn write_series_csv<W: Write>(series: &[TimePoint], column: &str, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["time_s", column])?;
        for p in series {
            csv.write_record(&[format!("{}", p.time), format!("{}", p.value)])?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn record(
        adapter: usize,
        arrival: f64,
        admission: f64,
        first: f64,
        completion: f64,
        out: u32,
    ) -> RequestRecord {
        RequestRecord {
            request_id: 0,
            adapter_id: adapter,
            arrival_time: arrival,
            admission_time: admission,
            first_token_time: first,
            completion_time: completion,
            output_tokens: out,
            admission_seq: 0,
        }
    }

    #[test]
    fn ttft_is_first_token_minus_arrival() {
        let r = record(0, 0.0, 0.0, 0.30, 1.0, 10);
        assert_abs_diff_eq!(ttft(&r), 0.30, epsilon = 1e-15);
        // 0.30 s violates a 0.25 s target.
        assert!(ttft(&r) > 0.25);
    }

    #[test]
    fn ttft_equals_first_iteration_when_not_queued() {
        let r = record(0, 2.0, 2.0, 2.02, 3.0, 10);
        assert_abs_diff_eq!(ttft(&r), 0.02, epsilon = 1e-15);
        assert_eq!(r.queueing_delay(), 0.0);
    }

    #[test]
    fn tpot_basic() {
        let r = record(0, 0.0, 0.0, 0.1, 1.0, 10);
        assert_abs_diff_eq!(tpot(&r).unwrap(), 0.1, epsilon = 1e-15);
        // Single-token request: TPOT is the first iteration latency.
        let r = record(0, 0.0, 0.0, 0.07, 0.07, 1);
        assert_abs_diff_eq!(tpot(&r).unwrap(), 0.07, epsilon = 1e-15);
        let bad = record(0, 0.0, 0.0, 0.1, 1.0, 0);
        assert!(tpot(&bad).is_err());
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_time_shift(
            shift in -100.0f64..100.0,
            queue in 0.0f64..5.0,
            decode in 0.001f64..5.0,
            out in 1u32..200,
        ) {
            let base = record(0, 10.0, 10.0 + queue, 10.0 + queue + decode,
                              10.0 + queue + decode * out as f64, out);
            let shifted = record(0, 10.0 + shift, 10.0 + shift + queue,
                                 10.0 + shift + queue + decode,
                                 10.0 + shift + queue + decode * out as f64, out);
            prop_assert!((ttft(&base) - ttft(&shifted)).abs() < 1e-9);
            prop_assert!((tpot(&base).unwrap() - tpot(&shifted).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn percentile_is_monotone_and_member(
            values in proptest::collection::vec(-1e3f64..1e3, 1..50),
            q1 in 0.0f64..100.0,
            q2 in 0.0f64..100.0,
        ) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let a = percentile(&values, lo).unwrap();
            let b = percentile(&values, hi).unwrap();
            prop_assert!(a <= b);
            prop_assert!(values.contains(&a));
            prop_assert!(values.contains(&b));
        }

        #[test]
        fn attainment_monotone_in_slo(
            ttft_slo in 0.01f64..2.0,
            slack in 0.01f64..1.0,
        ) {
            let records: Vec<RequestRecord> = (0..20)
                .map(|i| {
                    let d = 0.05 + 0.1 * (i as f64 % 7.0);
                    record(i % 4, 0.0, 0.0, d, d + 1.0, 10)
                })
                .collect();
            let tight = slo_attainment(&records, ttft_slo, 0.2, 0.9).unwrap();
            let loose = slo_attainment(&records, ttft_slo + slack, 0.2, 0.9).unwrap();
            prop_assert!(loose >= tight);
        }
    }

    #[test]
    fn percentile_nearest_rank_examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 100.0).unwrap(), 5.0);
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 95.0).unwrap(), 95.0);
        assert_eq!(percentile(&[42.0], 3.0).unwrap(), 42.0);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn attainment_strictly_greater_than_threshold() {
        // 9 of 10 requests meet the SLOs: 0.9 is NOT strictly greater than
        // the 0.9 threshold, so the adapter does not attain.
        let mut records: Vec<RequestRecord> = (0..9)
            .map(|_| record(0, 0.0, 0.0, 0.1, 0.5, 10))
            .collect();
        records.push(record(0, 0.0, 0.0, 5.0, 6.0, 10));
        assert_eq!(slo_attainment(&records, 0.25, 0.1, 0.9).unwrap(), 0.0);
        // One more success tips it over.
        let mut records: Vec<RequestRecord> = (0..10)
            .map(|_| record(0, 0.0, 0.0, 0.1, 0.5, 10))
            .collect();
        records.push(record(0, 0.0, 0.0, 5.0, 6.0, 10));
        assert_eq!(slo_attainment(&records, 0.25, 0.1, 0.9).unwrap(), 1.0);
    }

    #[test]
    fn attainment_all_meeting() {
        let records: Vec<RequestRecord> = (0..12)
            .map(|i| record(i % 3, 0.0, 0.0, 0.1, 0.5, 10))
            .collect();
        assert_eq!(slo_attainment(&records, 0.25, 0.1, 0.9).unwrap(), 1.0);
    }

    #[test]
    fn adapters_without_traffic_are_excluded() {
        // Only adapters 0 and 1 have traffic; the denominator is 2.
        let records = vec![
            record(0, 0.0, 0.0, 0.1, 0.5, 10),
            record(1, 0.0, 0.0, 9.0, 9.5, 10),
        ];
        assert_abs_diff_eq!(
            slo_attainment(&records, 0.25, 0.1, 0.9).unwrap(),
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn report_throughput_counts_window_completions() {
        let records: Vec<RequestRecord> = (0..100)
            .map(|i| {
                let t = i as f64;
                RequestRecord {
                    request_id: i as u64,
                    adapter_id: 0,
                    arrival_time: t,
                    admission_time: t,
                    first_token_time: t + 0.1,
                    completion_time: t + 0.5,
                    output_tokens: 5,
                    admission_seq: i as u64,
                }
            })
            .collect();
        let report = build_report(
            records,
            100,
            100.0,
            vec![],
            vec![],
            WindowSpec {
                warmup_frac: 0.1,
                cooldown_frac: 0.1,
            },
            SloSpec::default(),
        )
        .unwrap();
        // Window [10, 90]: arrivals 10..=90, one per second.
        assert_eq!(report.window_requests, 81);
        let implied = report.throughput * (report.window_end - report.window_start);
        assert!((implied - 81.0).abs() <= 1.0);
    }

    #[test]
    fn empty_run_produces_empty_report() {
        let report = build_report(
            vec![],
            0,
            0.0,
            vec![],
            vec![],
            WindowSpec::default(),
            SloSpec::default(),
        )
        .unwrap();
        assert_eq!(report.requests_completed, 0);
        assert!(report.p95_ttft.is_none());
        assert!(report.attainment.is_none());
        assert!(report.batch_series.is_empty());
    }

    #[test]
    fn report_validates_record_ordering() {
        let bad = record(0, 5.0, 4.0, 6.0, 7.0, 1);
        assert!(build_report(
            vec![bad],
            1,
            10.0,
            vec![],
            vec![],
            WindowSpec::default(),
            SloSpec::default()
        )
        .is_err());
    }
}
