//! Multi-tenant request workload generation and ingestion.
//!
//! Adapter popularity follows a Zipf law, request arrivals follow a Poisson
//! process, and request lengths come from a pluggable [`LengthModel`]. Traces
//! can also be loaded from CSV (`request_id,arrival_time_s,adapter_id,
//! input_tokens,output_tokens`) so recorded workloads replay bit-identically.
//!
//! All generation is driven by a single seed. Independent ChaCha streams are
//! split off that seed per draw category (arrivals / adapter choice / lengths)
//! so that, e.g., changing the length model does not perturb arrival times.

use crate::error::{Error, Result};
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream ids for seed splitting. One stream per draw category.
const STREAM_ARRIVALS: u64 = 0;
const STREAM_ADAPTERS: u64 = 1;
const STREAM_LENGTHS: u64 = 2;

/// Seedable RNG pinned to one of the documented draw streams.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The adapter population: popularity, memory footprint, and geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterCatalog {
    /// Invocation probabilities, canonical (non-increasing) order, sum 1.
    pub probs: Vec<f64>,
    /// GPU memory footprint per adapter in bytes.
    pub mem_per_adapter: u64,
    /// Transformer layers covered by each adapter.
    pub layers: u32,
    /// Experts per layer.
    pub experts: u32,
    /// LoRA rank.
    pub rank: u32,
}

impl AdapterCatalog {
    pub fn new(
        probs: Vec<f64>,
        mem_per_adapter: u64,
        layers: u32,
        experts: u32,
        rank: u32,
    ) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("catalog must have N >= 1".into()));
        }
        if layers == 0 || experts == 0 || rank == 0 {
            return Err(Error::InvalidArgument(
                "layers, experts and rank must be positive".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        for (i, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "probability {i} is {p}, must be > 0"
                )));
            }
            if i > 0 && p > probs[i - 1] {
                return Err(Error::InvalidArgument(
                    "probabilities must be non-increasing".into(),
                ));
            }
        }
        Ok(Self {
            probs,
            mem_per_adapter,
            layers,
            experts,
            rank,
        })
    }

    /// Catalog with Zipf(s) popularity over `n` adapters.
    pub fn zipf(
        n: usize,
        s: f64,
        mem_per_adapter: u64,
        layers: u32,
        experts: u32,
        rank: u32,
    ) -> Result<Self> {
        Self::new(
            zipf_probabilities(n, s)?,
            mem_per_adapter,
            layers,
            experts,
            rank,
        )
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Bytes of one layer's slice of an adapter.
    pub fn layer_bytes(&self) -> u64 {
        self.mem_per_adapter / self.layers as u64
    }
}

/// One serving request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    /// Arrival time in seconds from trace start.
    pub arrival_time: f64,
    pub adapter_id: usize,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

/// A time-ordered request trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub requests: Vec<Request>,
    /// Trace window length in seconds.
    pub duration: f64,
    pub seed: u64,
}

impl WorkloadTrace {
    /// Checks every adapter id against the catalog size.
    pub fn validate_adapter_ids(&self, n_adapters: usize) -> Result<()> {
        for req in &self.requests {
            if req.adapter_id >= n_adapters {
                return Err(Error::Validation(format!(
                    "request {} references adapter {} but the catalog has {}",
                    req.id, req.adapter_id, n_adapters
                )));
            }
        }
        Ok(())
    }
}

/// Zipf popularity vector: p_i = i^(-s) / sum_j j^(-s), ranks 1..=n.
pub fn zipf_probabilities(n: usize, s: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("zipf needs N >= 1".into()));
    }
    if s < 0.0 || !s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "zipf skew must be a non-negative real, got {s}"
        )));
    }
    let weights: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-s)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Expected number of distinct adapters across `draws` i.i.d. draws from `probs`.
///
/// Closed form: sum_i (1 - (1 - p_i)^draws). Concave and increasing in draws,
/// which is what makes adapter-count-driven compute costs sub-linear in batch
/// size under skewed popularity.
pub fn expected_distinct(probs: &[f64], draws: f64) -> f64 {
    probs
        .iter()
        .map(|&p| 1.0 - (1.0 - p).powf(draws))
        .sum()
}

/// Request length sampling backend.
#[derive(Debug, Clone)]
pub enum LengthModel {
    /// Every request has the same input/output lengths.
    Constant {
        input_tokens: u32,
        output_tokens: u32,
    },
    /// Joint (input, output) pairs resampled uniformly from a recorded trace.
    Empirical { pairs: Vec<(u32, u32)> },
}

impl LengthModel {
    pub fn constant(input_tokens: u32, output_tokens: u32) -> Result<Self> {
        if output_tokens == 0 {
            return Err(Error::InvalidArgument(
                "output_tokens must be >= 1".into(),
            ));
        }
        Ok(Self::Constant {
            input_tokens,
            output_tokens,
        })
    }

    /// Builds the empirical model from the length columns of a trace file.
    pub fn empirical_from_trace(path: &std::path::Path) -> Result<Self> {
        let trace = load_trace(path)?;
        let pairs: Vec<(u32, u32)> = trace
            .requests
            .iter()
            .map(|r| (r.input_tokens, r.output_tokens))
            .collect();
        if pairs.is_empty() {
            return Err(Error::Validation(format!(
                "no length samples in {}",
                path.display()
            )));
        }
        Ok(Self::Empirical { pairs })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (u32, u32) {
        match self {
            Self::Constant {
                input_tokens,
                output_tokens,
            } => (*input_tokens, *output_tokens),
            Self::Empirical { pairs } => {
                let idx = rand::Rng::random_range(rng, 0..pairs.len());
                pairs[idx]
            }
        }
    }
}

/// Generates a Poisson-arrival trace over `[0, duration)`.
///
/// Inter-arrival times are i.i.d. Exponential(rate); each request's adapter is
/// drawn i.i.d. from `probs`; lengths come from `length_model`. The result is
/// a pure function of the arguments and `seed`.
pub fn generate_trace(
    rate: f64,
    duration: f64,
    probs: &[f64],
    length_model: &LengthModel,
    seed: u64,
) -> Result<WorkloadTrace> {
    if !(rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "arrival rate must be > 0, got {rate}"
        )));
    }
    if duration < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "duration must be >= 0, got {duration}"
        )));
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument(
            "probability vector must be non-empty".into(),
        ));
    }

    let mut arrival_rng = stream_rng(seed, STREAM_ARRIVALS);
    let mut adapter_rng = stream_rng(seed, STREAM_ADAPTERS);
    let mut length_rng = stream_rng(seed, STREAM_LENGTHS);

    let exp = rand_distr::Exp::new(rate)
        .map_err(|e| Error::InvalidArgument(format!("bad rate: {e}")))?;
    let adapter_dist = rand::distr::weighted::WeightedIndex::new(probs)
        .map_err(|e| Error::InvalidArgument(format!("bad probabilities: {e}")))?;

    let mut requests = Vec::new();
    let mut t = 0.0_f64;
    let mut id = 0_u64;
    loop {
        t += exp.sample(&mut arrival_rng);
        if t >= duration {
            break;
        }
        let adapter_id = adapter_dist.sample(&mut adapter_rng);
        let (input_tokens, output_tokens) = length_model.sample(&mut length_rng);
        requests.push(Request {
            id,
            arrival_time: t,
            adapter_id,
            input_tokens,
            output_tokens: output_tokens.max(1),
        });
        id += 1;
    }

    Ok(WorkloadTrace {
        requests,
        duration,
        seed,
    })
}

const TRACE_HEADER: [&str; 5] = [
    "request_id",
    "arrival_time_s",
    "adapter_id",
    "input_tokens",
    "output_tokens",
];

/// Writes a trace in the CSV interchange format.
pub fn write_trace(trace: &WorkloadTrace, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in &trace.requests {
        w.write_record(&[
            r.id.to_string(),
            format!("{}", r.arrival_time),
            r.adapter_id.to_string(),
            r.input_tokens.to_string(),
            r.output_tokens.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a trace from the CSV interchange format.
///
/// Rejects malformed rows (naming the line), negative arrival times, zero
/// output lengths, and arrivals that are not sorted by (time, id).
pub fn load_trace(path: &std::path::Path) -> Result<WorkloadTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    {
        let headers = reader.headers()?;
        if headers.iter().ne(TRACE_HEADER.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "expected header `{}`, got `{}`",
                    TRACE_HEADER.join(","),
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
    }

    let mut requests: Vec<Request> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != TRACE_HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", TRACE_HEADER.len(), record.len()),
            });
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let id: u64 = field(0).trim().parse().map_err(|e| Error::Parse {
            line,
            msg: format!("request_id: {e}"),
        })?;
        let arrival_time: f64 = field(1).trim().parse().map_err(|e| Error::Parse {
            line,
            msg: format!("arrival_time_s: {e}"),
        })?;
        let adapter_id: usize = field(2).trim().parse().map_err(|e| Error::Parse {
            line,
            msg: format!("adapter_id: {e}"),
        })?;
        let input_tokens: u32 = field(3).trim().parse().map_err(|e| Error::Parse {
            line,
            msg: format!("input_tokens: {e}"),
        })?;
        let output_tokens: u32 = field(4).trim().parse().map_err(|e| Error::Parse {
            line,
            msg: format!("output_tokens: {e}"),
        })?;

        if !arrival_time.is_finite() || arrival_time < 0.0 {
            return Err(Error::Validation(format!(
                "line {line}: arrival_time_s must be finite and >= 0, got {arrival_time}"
            )));
        }
        if output_tokens == 0 {
            return Err(Error::Validation(format!(
                "line {line}: output_tokens must be >= 1"
            )));
        }
        if let Some(prev) = requests.last() {
            let ordered = arrival_time > prev.arrival_time
                || (arrival_time == prev.arrival_time && id > prev.id);
            if !ordered {
                return Err(Error::Validation(format!(
                    "line {line}: arrivals not sorted by (arrival_time, id)"
                )));
            }
        }
        requests.push(Request {
            id,
            arrival_time,
            adapter_id,
            input_tokens,
            output_tokens,
        });
    }

    let duration = requests.last().map(|r| r.arrival_time).unwrap_or(0.0);
    Ok(WorkloadTrace {
        requests,
        duration,
        seed: 0,
    })
}

/// Greedy load-balanced partition of adapters into `l` disjoint sets.
///
/// Adapters are visited in descending probability (index order for ties, since
/// the canonical catalog order is non-increasing); each goes to the set with
/// the smallest probability mass so far, lowest set index on ties.
pub fn partition_adapters_greedy(probs: &[f64], l: usize) -> Result<Vec<Vec<usize>>> {
    if l == 0 {
        return Err(Error::InvalidArgument(
            "instance count must be >= 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps index order for equal probabilities.
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());

    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); l];
    let mut masses = vec![0.0_f64; l];
    for adapter in order {
        let target = masses
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        sets[target].push(adapter);
        masses[target] += probs[adapter];
    }
    for set in &mut sets {
        set.sort_unstable();
    }
    Ok(sets)
}
