//! SLO-driven LoRA server resource provisioning.
//!
//! Two independent sizing questions are answered offline from historical
//! workload statistics:
//!
//! 1. **Cache capacity for the tail-TTFT SLO.** A request is *immediately
//!    admissible* when its adapter is resident or instantly loadable, so a
//!    P95 TTFT target maps to an Immediate Admissibility Rate (IAR) target
//!    alpha = 0.95. Adapter access counts within a global batch of `LB`
//!    requests are Poissonized (`lambda_i = LB * p_i`); an adapter is resident
//!    when its access count exceeds a threshold `tau*` chosen so the expected
//!    resident count exactly fills the cache:
//!
//!    ```text
//!    q_i = Pr[Poisson(lambda_i) > tau*],      sum_i q_i = M
//!    IAR(M) = sum_i p_i * [q_i + (1 - q_i) * P_free(i)]
//!    ```
//!
//!    where `P_free(i)` is the probability that the other N-1 adapters,
//!    independently resident with probabilities `q_j`, occupy at most M-1
//!    slots (a Poisson-binomial tail computed by dynamic programming). The
//!    minimum cache size is the smallest M with IAR(M) >= alpha, found by
//!    ascending scan.
//!
//! 2. **GPU count for the average-TPOT SLO.** Per-stage server latencies
//!    (receive / compute / send), profiled per GPU-count candidate, must fit
//!    the per-instance FFN budget (their sum) and the server-side layer
//!    budget (their max, times the number of instances it serves).
//!
//! The overall GPU requirement is the larger of the memory-derived and
//! compute-derived counts.
//!
//! The threshold equation is solved over a *real* tau via the regularized
//! lower incomplete gamma function, which continuously extends the integer
//! Poisson tail (`Pr[Poisson(lambda) > tau] = P(tau+1, lambda)`) and makes
//! the capacity constraint an exact root of a monotone map. The discrete
//! integer-tau variant is retained behind [`TauMode`] for comparison.

use crate::error::{BindingConstraint, Error, Result};
use crate::parcost::{ParallelStrategy, Stage, StageLatencyModel};
use crate::workload::AdapterCatalog;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

/// Absolute tolerance on `sum_i q_i - M` accepted from the threshold solve.
pub const THRESHOLD_TOLERANCE: f64 = 1e-8;

/// Pr[Poisson(lambda) > tau] for real tau >= 0.
///
/// For integer tau this is `1 - sum_{k=0}^{tau} lambda^k e^-lambda / k!`; for
/// fractional tau it is the continuous extension `P(tau+1, lambda)` via the
/// regularized lower incomplete gamma function, which is monotone decreasing
/// in tau, monotone increasing in lambda, and agrees with the sum at integers.
pub fn poisson_tail(lambda: f64, tau: f64) -> Result<f64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda must be a finite non-negative real, got {lambda}"
        )));
    }
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tau must be a finite non-negative real, got {tau}"
        )));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    Ok(gamma_lr(tau + 1.0, lambda))
}

/// Threshold relaxation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TauMode {
    /// Real-valued tau via the incomplete-gamma extension (default).
    #[default]
    Continuous,
    /// Integer tau: the smallest integer whose expected resident count does
    /// not exceed the capacity. The capacity constraint then holds only
    /// approximately; kept for comparison against the relaxed solution.
    Integer,
}

/// Root of the capacity constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSolution {
    pub tau_star: f64,
    /// False when even tau = 0 leaves expected residents below the capacity
    /// (cache larger than the active set), in which case tau* = 0.
    pub binding: bool,
}

fn expected_residents(lambdas: &[f64], tau: f64) -> f64 {
    lambdas
        .iter()
        .map(|&l| if l == 0.0 { 0.0 } else { gamma_lr(tau + 1.0, l) })
        .sum()
}

/// Solves `sum_i Pr[Poisson(lambda_i) > tau] = M` for tau by bisection.
pub fn solve_threshold(lambdas: &[f64], cache_size: usize) -> Result<ThresholdSolution> {
    solve_threshold_with_mode(lambdas, cache_size, TauMode::Continuous)
}

pub fn solve_threshold_with_mode(
    lambdas: &[f64],
    cache_size: usize,
    mode: TauMode,
) -> Result<ThresholdSolution> {
    if cache_size == 0 {
        return Err(Error::InvalidArgument("cache size must be >= 1".into()));
    }
    for &l in lambdas {
        if !l.is_finite() || l < 0.0 {
            return Err(Error::InvalidArgument(format!("bad lambda {l}")));
        }
    }
    let m = cache_size as f64;
    let at_zero = expected_residents(lambdas, 0.0);
    if at_zero < m {
        return Ok(ThresholdSolution {
            tau_star: 0.0,
            binding: false,
        });
    }

    match mode {
        TauMode::Integer => {
            let mut tau = 0.0;
            while expected_residents(lambdas, tau) > m {
                tau += 1.0;
            }
            Ok(ThresholdSolution {
                tau_star: tau,
                binding: true,
            })
        }
        TauMode::Continuous => {
            let mut lo = 0.0_f64;
            let mut hi = 1.0_f64;
            while expected_residents(lambdas, hi) >= m {
                lo = hi;
                hi *= 2.0;
                if hi > 1e12 {
                    return Err(Error::InvalidArgument(
                        "threshold bracket exceeded 1e12; lambdas are degenerate".into(),
                    ));
                }
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let f = expected_residents(lambdas, mid);
                if (f - m).abs() <= THRESHOLD_TOLERANCE * 0.1 {
                    return Ok(ThresholdSolution {
                        tau_star: mid,
                        binding: true,
                    });
                }
                if f > m {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= f64::EPSILON * hi.max(1.0) {
                    break;
                }
            }
            let tau_star = 0.5 * (lo + hi);
            let residual = (expected_residents(lambdas, tau_star) - m).abs();
            if residual > THRESHOLD_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "threshold bisection stalled with residual {residual}"
                )));
            }
            Ok(ThresholdSolution {
                tau_star,
                binding: true,
            })
        }
    }
}

/// Pr[sum_{j != i} Bernoulli(q_j) <= M-1]: a free slot exists for adapter i.
///
/// Computed by the truncated Poisson-binomial dynamic program: occupancy
/// counts above M-1 never flow back into lower indices when dp is updated
/// high-to-low, so dp[0..M] stays exact at O(N*M) cost.
pub fn free_slot_prob(residency: &[f64], adapter: usize, cache_size: usize) -> Result<f64> {
    if adapter >= residency.len() {
        return Err(Error::InvalidArgument(format!(
            "adapter index {adapter} out of range for {} adapters",
            residency.len()
        )));
    }
    if cache_size == 0 {
        return Err(Error::InvalidArgument("cache size must be >= 1".into()));
    }
    for &q in residency {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidArgument(format!(
                "residency probability {q} outside [0, 1]"
            )));
        }
    }
    // N-1 other adapters always fit into N-1 or more slots.
    if cache_size >= residency.len() {
        return Ok(1.0);
    }

    let mut dp = vec![0.0_f64; cache_size];
    dp[0] = 1.0;
    for (j, &q) in residency.iter().enumerate() {
        if j == adapter {
            continue;
        }
        for k in (1..cache_size).rev() {
            dp[k] = dp[k] * (1.0 - q) + dp[k - 1] * q;
        }
        dp[0] *= 1.0 - q;
    }
    Ok(dp.iter().sum())
}

/// Full output of one IAR evaluation at a fixed cache size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IarSolution {
    pub cache_size: usize,
    pub tau_star: f64,
    /// Residency probability per adapter at tau*.
    pub residency: Vec<f64>,
    pub iar_value: f64,
    pub capacity_binding: bool,
}

/// Immediate Admissibility Rate at cache size M.
pub fn iar(probs: &[f64], global_batch: f64, cache_size: usize) -> Result<IarSolution> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("probs must be non-empty".into()));
    }
    if !(global_batch > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "global batch must be > 0, got {global_batch}"
        )));
    }
    if cache_size == 0 {
        return Err(Error::InvalidArgument("cache size must be >= 1".into()));
    }
    let n = probs.len();
    let lambdas: Vec<f64> = probs.iter().map(|&p| global_batch * p).collect();

    // Cache covering every adapter admits every request outright.
    if cache_size >= n {
        let residency = lambdas
            .iter()
            .map(|&l| poisson_tail(l, 0.0))
            .collect::<Result<Vec<_>>>()?;
        return Ok(IarSolution {
            cache_size,
            tau_star: 0.0,
            residency,
            iar_value: 1.0,
            capacity_binding: false,
        });
    }

    let threshold = solve_threshold(&lambdas, cache_size)?;
    let residency = lambdas
        .iter()
        .map(|&l| poisson_tail(l, threshold.tau_star))
        .collect::<Result<Vec<_>>>()?;

    let mut iar_value = 0.0;
    for (i, (&p, &q)) in probs.iter().zip(&residency).enumerate() {
        let p_free = free_slot_prob(&residency, i, cache_size)?;
        iar_value += p * (q + (1.0 - q) * p_free);
    }
    Ok(IarSolution {
        cache_size,
        tau_star: threshold.tau_star,
        residency,
        iar_value,
        capacity_binding: threshold.binding,
    })
}

/// One probed capacity on the IAR curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IarPoint {
    pub cache_size: usize,
    pub iar: f64,
}

/// Result of the minimum-cache-size search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheSizing {
    pub m_star: usize,
    /// IAR at every probed capacity, ascending.
    pub curve: Vec<IarPoint>,
    /// Set when the target could not be attained even at M = N.
    pub saturated: bool,
    /// Full solution at M*.
    pub solution: IarSolution,
}

/// Smallest cache size whose IAR meets `alpha`, by ascending scan.
///
/// The scan is linear because IAR monotonicity in M is an empirical
/// observation, not a proven fact.
pub fn min_cache_size(probs: &[f64], global_batch: f64, alpha: f64) -> Result<CacheSizing> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let n = probs.len();
    let mut curve = Vec::new();
    for m in 1..=n {
        let solution = iar(probs, global_batch, m)?;
        curve.push(IarPoint {
            cache_size: m,
            iar: solution.iar_value,
        });
        if solution.iar_value >= alpha {
            return Ok(CacheSizing {
                m_star: m,
                curve,
                saturated: false,
                solution,
            });
        }
    }
    // IAR(N) is exactly 1, so this is reachable only through pathological
    // inputs; report the full-cache fallback rather than failing.
    let solution = iar(probs, global_batch, n)?;
    Ok(CacheSizing {
        m_star: n,
        curve,
        saturated: true,
        solution,
    })
}

/// Profiled stage-time model used for the TPOT-side sizing.
pub struct TpotLatencyModel<'a> {
    pub latency: &'a StageLatencyModel,
    /// Expert activations per request (routing top-k).
    pub tokens_per_request: f64,
    /// Per-instance FFN latency budget in seconds.
    pub slo_ffn: f64,
    /// Per-layer server budget in seconds.
    pub slo_layer: f64,
    /// LLM instances sharing the server.
    pub instances: u32,
}

/// Stage times of one candidate evaluated at the planning batch size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageTimes {
    pub recv: f64,
    pub comp: f64,
    pub send: f64,
}

impl StageTimes {
    pub fn sum(&self) -> f64 {
        self.recv + self.comp + self.send
    }

    pub fn max(&self) -> f64 {
        self.recv.max(self.comp).max(self.send)
    }
}

/// Compute-side sizing outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpuSizing {
    pub gpu_count: u32,
    pub strategy: ParallelStrategy,
    pub stage_times: StageTimes,
    /// Stage-time sum compared against SLO_FFN.
    pub ffn_sum: f64,
    /// Max stage time times instance count, compared against SLO_Layer.
    pub layer_load: f64,
}

/// Smallest candidate GPU count meeting both TPOT-derived constraints.
pub fn min_server_gpus(
    model: &TpotLatencyModel,
    batch_per_instance: u32,
    candidates: &[(u32, ParallelStrategy)],
) -> Result<GpuSizing> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "candidate GPU counts must be non-empty".into(),
        ));
    }
    if !candidates.windows(2).all(|w| w[0].0 < w[1].0) {
        return Err(Error::InvalidArgument(
            "candidate GPU counts must be strictly ascending".into(),
        ));
    }
    if batch_per_instance == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }

    let tokens = batch_per_instance as f64 * model.tokens_per_request;
    let mut last: Option<GpuSizing> = None;
    for &(m, strategy) in candidates {
        let stage_times = StageTimes {
            recv: model.latency.stage_latency(&strategy, m, Stage::Recv, tokens)?,
            comp: model.latency.stage_latency(&strategy, m, Stage::Comp, tokens)?,
            send: model.latency.stage_latency(&strategy, m, Stage::Send, tokens)?,
        };
        let sizing = GpuSizing {
            gpu_count: m,
            strategy,
            ffn_sum: stage_times.sum(),
            layer_load: stage_times.max() * model.instances as f64,
            stage_times,
        };
        if sizing.ffn_sum <= model.slo_ffn && sizing.layer_load <= model.slo_layer {
            return Ok(sizing);
        }
        last = Some(sizing);
    }

    let last = last.unwrap();
    let ffn_violation = last.ffn_sum / model.slo_ffn;
    let layer_violation = last.layer_load / model.slo_layer;
    let constraint = if last.ffn_sum > model.slo_ffn && ffn_violation >= layer_violation {
        BindingConstraint::FfnLatency
    } else {
        BindingConstraint::LayerThroughput
    };
    Err(Error::Infeasible { constraint })
}

/// GPUs needed to hold a cache of `cache_size` adapters.
pub fn gpus_for_cache(cache_size: usize, per_gpu_adapter_capacity: u32) -> u32 {
    debug_assert!(per_gpu_adapter_capacity > 0);
    cache_size.div_ceil(per_gpu_adapter_capacity as usize) as u32
}

/// SLO targets the plan must satisfy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SloTargets {
    /// Target IAR; maps one-to-one from the TTFT percentile (P95 -> 0.95).
    pub ttft_alpha: f64,
    /// Per-instance FFN latency budget in seconds.
    pub slo_ffn: f64,
    /// Per-layer server latency budget in seconds.
    pub slo_layer: f64,
}

/// Which requirement dominates the final GPU count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanBinding {
    Memory,
    Compute,
    Balanced,
}

/// Everything needed to plan a deployment.
#[derive(Debug, Clone)]
pub struct PlanInputs<'a> {
    pub catalog: &'a AdapterCatalog,
    pub instances: u32,
    pub batch_per_instance: u32,
    /// Expert activations per request (routing top-k).
    pub tokens_per_request: f64,
    pub per_gpu_adapter_capacity: u32,
    /// (GPU count, strategy) candidates in ascending GPU order.
    pub candidates: Vec<(u32, ParallelStrategy)>,
    /// Extra capacities to evaluate and attach to the IAR curve.
    pub probe_capacities: Vec<usize>,
    pub slos: SloTargets,
}

/// Inputs echoed into the serialized plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanEcho {
    pub adapters: usize,
    pub instances: u32,
    pub batch_per_instance: u32,
    pub global_batch: f64,
    pub ttft_alpha: f64,
    pub slo_ffn: f64,
    pub slo_layer: f64,
    pub per_gpu_adapter_capacity: u32,
    pub mem_per_adapter: u64,
}

/// The provisioning answer: cache size, GPU counts, and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvisioningPlan {
    pub inputs: PlanEcho,
    pub tau_star: f64,
    pub capacity_binding: bool,
    pub residency: Vec<f64>,
    pub iar_curve: Vec<IarPoint>,
    pub m_star: usize,
    pub min_cache_bytes: u64,
    pub memory_gpus: u32,
    pub compute_gpus: u32,
    pub compute_sizing: GpuSizing,
    pub gpus: u32,
    pub binding: PlanBinding,
}

/// Full provisioning pipeline: cache sizing plus GPU sizing, combined by max.
pub fn provision(inputs: &PlanInputs, latency: &StageLatencyModel) -> Result<ProvisioningPlan> {
    if inputs.instances == 0 || inputs.batch_per_instance == 0 {
        return Err(Error::InvalidArgument(
            "instances and batch_per_instance must be >= 1".into(),
        ));
    }
    if inputs.per_gpu_adapter_capacity == 0 {
        return Err(Error::InvalidArgument(
            "per_gpu_adapter_capacity must be >= 1".into(),
        ));
    }
    let global_batch = inputs.instances as f64 * inputs.batch_per_instance as f64;
    let sizing = min_cache_size(&inputs.catalog.probs, global_batch, inputs.slos.ttft_alpha)?;

    let mut curve = sizing.curve.clone();
    for &m in &inputs.probe_capacities {
        if m == 0 || m > inputs.catalog.len() {
            return Err(Error::InvalidArgument(format!(
                "probe capacity {m} outside 1..=N"
            )));
        }
        if !curve.iter().any(|p| p.cache_size == m) {
            let sol = iar(&inputs.catalog.probs, global_batch, m)?;
            curve.push(IarPoint {
                cache_size: m,
                iar: sol.iar_value,
            });
        }
    }
    curve.sort_by_key(|p| p.cache_size);

    let tpot_model = TpotLatencyModel {
        latency,
        tokens_per_request: inputs.tokens_per_request,
        slo_ffn: inputs.slos.slo_ffn,
        slo_layer: inputs.slos.slo_layer,
        instances: inputs.instances,
    };
    let compute_sizing = min_server_gpus(&tpot_model, inputs.batch_per_instance, &inputs.candidates)?;

    let memory_gpus = gpus_for_cache(sizing.m_star, inputs.per_gpu_adapter_capacity);
    let compute_gpus = compute_sizing.gpu_count;
    let gpus = memory_gpus.max(compute_gpus);
    let binding = match memory_gpus.cmp(&compute_gpus) {
        std::cmp::Ordering::Greater => PlanBinding::Memory,
        std::cmp::Ordering::Less => PlanBinding::Compute,
        std::cmp::Ordering::Equal => PlanBinding::Balanced,
    };

    Ok(ProvisioningPlan {
        inputs: PlanEcho {
            adapters: inputs.catalog.len(),
            instances: inputs.instances,
            batch_per_instance: inputs.batch_per_instance,
            global_batch,
            ttft_alpha: inputs.slos.ttft_alpha,
            slo_ffn: inputs.slos.slo_ffn,
            slo_layer: inputs.slos.slo_layer,
            per_gpu_adapter_capacity: inputs.per_gpu_adapter_capacity,
            mem_per_adapter: inputs.catalog.mem_per_adapter,
        },
        tau_star: sizing.solution.tau_star,
        capacity_binding: sizing.solution.capacity_binding,
        residency: sizing.solution.residency.clone(),
        iar_curve: curve,
        m_star: sizing.m_star,
        min_cache_bytes: sizing.m_star as u64 * inputs.catalog.mem_per_adapter,
        memory_gpus,
        compute_gpus,
        compute_sizing,
        gpus,
        binding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parcost::{CalPoint, CalibrationTable};
    use crate::workload::zipf_probabilities;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn poisson_pmf_sum(lambda: f64, tau: u32) -> f64 {
        let mut term = (-lambda).exp();
        let mut sum = term;
        for k in 1..=tau {
            term *= lambda / k as f64;
            sum += term;
        }
        1.0 - sum
    }

    #[test]
    fn tail_of_empty_process_is_zero() {
        assert_eq!(poisson_tail(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(poisson_tail(0.0, 3.7).unwrap(), 0.0);
    }

    #[test]
    fn tail_closed_forms() {
        assert_abs_diff_eq!(
            poisson_tail(1.0, 0.0).unwrap(),
            1.0 - (-1.0f64).exp(),
            epsilon = 1e-12
        );
        // 1 - 5 e^-2
        assert_abs_diff_eq!(
            poisson_tail(2.0, 2.0).unwrap(),
            1.0 - 5.0 * (-2.0f64).exp(),
            epsilon = 1e-12
        );
        // Cross-checked against scipy gammainc(2.5, 3.0).
        assert_abs_diff_eq!(
            poisson_tail(3.0, 1.5).unwrap(),
            0.6937810815867212,
            epsilon = 1e-12
        );
    }

    #[test]
    fn tail_rejects_negative_arguments() {
        assert!(poisson_tail(-1.0, 0.0).is_err());
        assert!(poisson_tail(1.0, -0.5).is_err());
    }

    #[test]
    fn gamma_route_agrees_with_pmf_sum_at_integers() {
        for &lambda in &[0.3, 1.0, 2.0, 5.5, 9.0] {
            for tau in 0..8u32 {
                let via_gamma = poisson_tail(lambda, tau as f64).unwrap();
                let via_sum = poisson_pmf_sum(lambda, tau);
                assert_abs_diff_eq!(via_gamma, via_sum, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn tail_monotone_and_bounded(
            lambda in 0.0f64..50.0,
            tau in 0.0f64..40.0,
            d_tau in 0.01f64..5.0,
            d_lambda in 0.01f64..5.0,
        ) {
            let v = poisson_tail(lambda, tau).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(poisson_tail(lambda, tau + d_tau).unwrap() <= v + 1e-12);
            prop_assert!(poisson_tail(lambda + d_lambda, tau).unwrap() >= v - 1e-12);
        }
    }

    #[test]
    fn threshold_symmetric_case_splits_evenly() {
        // Equal lambdas with M = N/2 force q_i = 1/2 each.
        let lambdas = vec![4.0; 8];
        let sol = solve_threshold(&lambdas, 4).unwrap();
        assert!(sol.binding);
        let q = poisson_tail(4.0, sol.tau_star).unwrap();
        assert_abs_diff_eq!(q, 0.5, epsilon = 1e-8);
        let sum: f64 = (0..8).map(|_| q).sum();
        assert_abs_diff_eq!(sum, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn threshold_nonbinding_when_cache_exceeds_active_set() {
        let sol = solve_threshold(&[1.0], 1).unwrap();
        assert!(!sol.binding);
        assert_eq!(sol.tau_star, 0.0);
        let q = poisson_tail(1.0, 0.0).unwrap();
        assert_abs_diff_eq!(q, 0.632, epsilon = 1e-3);
    }

    #[test]
    fn threshold_matches_independent_bisection() {
        let probs = zipf_probabilities(8, 1.2).unwrap();
        let lambdas: Vec<f64> = probs.iter().map(|p| 16.0 * p).collect();
        let sol = solve_threshold(&lambdas, 3).unwrap();

        // Second root-finder: fixed-count interval halving at 1e-12.
        let f = |t: f64| -> f64 {
            lambdas
                .iter()
                .map(|&l| poisson_tail(l, t).unwrap())
                .sum::<f64>()
                - 3.0
        };
        let (mut lo, mut hi) = (0.0, 16.0);
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let independent = 0.5 * (lo + hi);
        assert_abs_diff_eq!(sol.tau_star, independent, epsilon = 1e-6);
        // And against an external reference solve of the same equation.
        assert_abs_diff_eq!(sol.tau_star, 1.263493714970835, epsilon = 1e-6);
        assert!(f(sol.tau_star).abs() <= 1e-8);
    }

    #[test]
    fn threshold_rejects_zero_cache() {
        assert!(solve_threshold(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn integer_mode_underfills_capacity() {
        let probs = zipf_probabilities(8, 1.2).unwrap();
        let lambdas: Vec<f64> = probs.iter().map(|p| 16.0 * p).collect();
        let sol = solve_threshold_with_mode(&lambdas, 3, TauMode::Integer).unwrap();
        assert_eq!(sol.tau_star.fract(), 0.0);
        let total: f64 = lambdas
            .iter()
            .map(|&l| poisson_tail(l, sol.tau_star).unwrap())
            .sum();
        assert!(total <= 3.0);
        // One step lower would overfill.
        if sol.tau_star >= 1.0 {
            let t: f64 = lambdas
                .iter()
                .map(|&l| poisson_tail(l, sol.tau_star - 1.0).unwrap())
                .sum();
            assert!(t > 3.0);
        }
    }

    #[test]
    fn free_slot_single_competitor() {
        // One other adapter resident with probability 0.3: a slot in a
        // 1-entry cache is free with probability 0.7.
        assert_abs_diff_eq!(
            free_slot_prob(&[0.9, 0.3], 0, 1).unwrap(),
            0.7,
            epsilon = 1e-15
        );
    }

    #[test]
    fn free_slot_two_fair_competitors() {
        // Two Bernoulli(0.5) others, two slots: blocked only when both are
        // resident: 1 - 0.25.
        assert_abs_diff_eq!(
            free_slot_prob(&[0.42, 0.5, 0.5], 0, 2).unwrap(),
            0.75,
            epsilon = 1e-15
        );
    }

    #[test]
    fn free_slot_full_cache_is_certain() {
        assert_eq!(free_slot_prob(&[0.9, 0.8, 0.7], 1, 3).unwrap(), 1.0);
        assert_eq!(free_slot_prob(&[1.0, 1.0], 0, 5).unwrap(), 1.0);
    }

    #[test]
    fn free_slot_validates_arguments() {
        assert!(free_slot_prob(&[0.5], 3, 1).is_err());
        assert!(free_slot_prob(&[1.5], 0, 1).is_err());
        assert!(free_slot_prob(&[0.5, 0.5], 0, 0).is_err());
    }

    /// Brute-force Poisson-binomial tail over all 2^(N-1) outcomes.
    fn free_slot_brute(residency: &[f64], adapter: usize, cache_size: usize) -> f64 {
        let others: Vec<f64> = residency
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != adapter)
            .map(|(_, &q)| q)
            .collect();
        let n = others.len();
        let mut total = 0.0;
        for mask in 0u32..(1 << n) {
            let mut prob = 1.0;
            let mut occupied = 0;
            for (bit, &q) in others.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    prob *= q;
                    occupied += 1;
                } else {
                    prob *= 1.0 - q;
                }
            }
            if occupied <= cache_size - 1 {
                total += prob;
            }
        }
        total
    }

    #[test]
    fn free_slot_matches_enumeration_small() {
        let mut rng_state = 12345u64;
        let mut next = || {
            // xorshift is plenty for test fixtures
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for n in 2..=10usize {
            let q: Vec<f64> = (0..n).map(|_| next()).collect();
            for m in 1..=n {
                for i in 0..n {
                    let dp = free_slot_prob(&q, i, m).unwrap();
                    let brute = free_slot_brute(&q, i, m);
                    assert_abs_diff_eq!(dp, brute, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn iar_full_cache_is_exactly_one() {
        let probs = zipf_probabilities(12, 1.2).unwrap();
        let sol = iar(&probs, 24.0, 12).unwrap();
        assert_eq!(sol.iar_value, 1.0);
        assert!(!sol.capacity_binding);
    }

    #[test]
    fn iar_matches_reference_values() {
        // Frozen from an independent implementation (scipy gammainc + brentq
        // + numpy DP).
        let probs = zipf_probabilities(8, 1.2).unwrap();
        let sol = iar(&probs, 16.0, 3).unwrap();
        assert_abs_diff_eq!(sol.iar_value, 0.8155369191003667, epsilon = 1e-6);
        assert!(sol.capacity_binding);
        let sum_q: f64 = sol.residency.iter().sum();
        assert_abs_diff_eq!(sum_q, 3.0, epsilon = 1e-6);

        let sol2 = iar(&[0.8, 0.2], 1.0, 1).unwrap();
        assert_abs_diff_eq!(sol2.iar_value, 0.8446701192620687, epsilon = 1e-6);
    }

    #[test]
    fn iar_value_is_reconstructible_from_residency() {
        let probs = zipf_probabilities(10, 1.0).unwrap();
        let sol = iar(&probs, 20.0, 4).unwrap();
        let mut recomputed = 0.0;
        for (i, (&p, &q)) in probs.iter().zip(&sol.residency).enumerate() {
            let pf = free_slot_prob(&sol.residency, i, 4).unwrap();
            recomputed += p * (q + (1.0 - q) * pf);
        }
        assert_abs_diff_eq!(sol.iar_value, recomputed, epsilon = 1e-9);
    }

    #[test]
    fn min_cache_small_target_needs_one_slot() {
        let probs = zipf_probabilities(16, 1.2).unwrap();
        let sizing = min_cache_size(&probs, 32.0, 1e-4).unwrap();
        assert_eq!(sizing.m_star, 1);
        assert_eq!(sizing.curve.len(), 1);
    }

    #[test]
    fn min_cache_result_is_consistent() {
        let probs = zipf_probabilities(16, 1.2).unwrap();
        let sizing = min_cache_size(&probs, 32.0, 0.95).unwrap();
        assert!(sizing.solution.iar_value >= 0.95);
        if sizing.m_star > 1 {
            let below = iar(&probs, 32.0, sizing.m_star - 1).unwrap();
            assert!(below.iar_value < 0.95);
        }
        // The probed prefix is exactly 1..=M*.
        let ms: Vec<usize> = sizing.curve.iter().map(|p| p.cache_size).collect();
        assert_eq!(ms, (1..=sizing.m_star).collect::<Vec<_>>());
    }

    #[test]
    fn iar_scan_is_empirically_monotone() {
        for (n, s, lb) in [(16usize, 1.2, 32.0), (24, 0.8, 64.0), (12, 1.5, 18.0)] {
            let probs = zipf_probabilities(n, s).unwrap();
            let mut prev = 0.0;
            for m in 1..=n {
                let v = iar(&probs, lb, m).unwrap().iar_value;
                assert!(
                    v >= prev - 1e-9,
                    "IAR({m}) = {v} dropped below IAR({}) = {prev} for n={n} s={s}",
                    m - 1
                );
                prev = v;
            }
        }
    }

    fn sizing_fixture() -> (CalibrationTable, Vec<(u32, ParallelStrategy)>) {
        let mut table = CalibrationTable::new();
        // Stage times shrink as the server grows.
        let configs = [
            (2u32, ParallelStrategy::Hybrid { expert_degree: 2, stages: 1 }, 400.0),
            (4, ParallelStrategy::Hybrid { expert_degree: 4, stages: 1 }, 260.0),
            (8, ParallelStrategy::Hybrid { expert_degree: 4, stages: 2 }, 160.0),
        ];
        for (m, strategy, base) in configs {
            for tokens in [64.0, 512.0] {
                table
                    .add_point(
                        &strategy,
                        m,
                        CalPoint {
                            tokens,
                            recv_us: base + 0.2 * tokens,
                            comp_us: base + 0.1 * tokens,
                            send_us: base + 0.3 * tokens,
                            moe_us: 400.0 + tokens,
                        },
                    )
                    .unwrap();
            }
        }
        let candidates = configs.iter().map(|&(m, s, _)| (m, s)).collect();
        (table, candidates)
    }

    #[test]
    fn min_server_gpus_picks_smallest_feasible() {
        let (table, candidates) = sizing_fixture();
        let latency = StageLatencyModel::new(table, zipf_probabilities(64, 1.2).unwrap(), false);
        // Generous budgets: the 2-GPU candidate already fits.
        let model = TpotLatencyModel {
            latency: &latency,
            tokens_per_request: 2.0,
            slo_ffn: 10.0,
            slo_layer: 10.0,
            instances: 1,
        };
        let sizing = min_server_gpus(&model, 64, &candidates).unwrap();
        assert_eq!(sizing.gpu_count, 2);

        // Tight FFN budget leaves only the 8-GPU configuration.
        let model = TpotLatencyModel {
            latency: &latency,
            tokens_per_request: 2.0,
            slo_ffn: 700e-6,
            slo_layer: 10.0,
            instances: 1,
        };
        let sizing = min_server_gpus(&model, 64, &candidates).unwrap();
        assert_eq!(sizing.gpu_count, 8);
    }

    #[test]
    fn min_server_gpus_reports_binding_constraint() {
        let (table, candidates) = sizing_fixture();
        let latency = StageLatencyModel::new(table, zipf_probabilities(64, 1.2).unwrap(), false);
        let model = TpotLatencyModel {
            latency: &latency,
            tokens_per_request: 2.0,
            slo_ffn: 1e-6,
            slo_layer: 10.0,
            instances: 1,
        };
        match min_server_gpus(&model, 64, &candidates) {
            Err(Error::Infeasible { constraint }) => {
                assert_eq!(constraint, BindingConstraint::FfnLatency)
            }
            other => panic!("expected infeasible, got {other:?}"),
        }

        let model = TpotLatencyModel {
            latency: &latency,
            tokens_per_request: 2.0,
            slo_ffn: 10.0,
            slo_layer: 1e-6,
            instances: 4,
        };
        match min_server_gpus(&model, 64, &candidates) {
            Err(Error::Infeasible { constraint }) => {
                assert_eq!(constraint, BindingConstraint::LayerThroughput)
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn table2_sum_against_ffn_budget() {
        let table = CalibrationTable::from_reader(
            crate::parcost::test_fixtures::TABLE2_CSV.as_bytes(),
        )
        .unwrap();
        let latency = StageLatencyModel::new(table, zipf_probabilities(512, 1.2).unwrap(), false);
        let strategy = ParallelStrategy::Hybrid { expert_degree: 4, stages: 2 };
        let candidates = vec![(8u32, strategy)];
        // Batch 128 with top-2 routing: 256 activation tokens.
        let model_ok = TpotLatencyModel {
            latency: &latency,
            tokens_per_request: 2.0,
            slo_ffn: 494e-6 + 1e-9,
            slo_layer: 1.0,
            instances: 1,
        };
        let sizing = min_server_gpus(&model_ok, 128, &candidates).unwrap();
        assert_abs_diff_eq!(sizing.ffn_sum, 494e-6, epsilon = 1e-12);

        let model_tight = TpotLatencyModel {
            slo_ffn: 493e-6,
            ..model_ok
        };
        assert!(min_server_gpus(&model_tight, 128, &candidates).is_err());

        // Four instances sharing the server: layer budget needs 4 x 207 us.
        let model_layer = TpotLatencyModel {
            slo_ffn: 1.0,
            slo_layer: 828e-6 - 1e-9,
            instances: 4,
            ..model_ok
        };
        match min_server_gpus(&model_layer, 128, &candidates) {
            Err(Error::Infeasible { constraint }) => {
                assert_eq!(constraint, BindingConstraint::LayerThroughput)
            }
            other => panic!("expected layer-throughput infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn provision_takes_max_of_memory_and_compute() {
        let (table, candidates) = sizing_fixture();
        let latency = StageLatencyModel::new(table, zipf_probabilities(64, 1.2).unwrap(), false);
        let catalog = AdapterCatalog::zipf(64, 1.2, 1 << 30, 4, 8, 16).unwrap();
        let inputs = PlanInputs {
            catalog: &catalog,
            instances: 4,
            batch_per_instance: 16,
            tokens_per_request: 2.0,
            per_gpu_adapter_capacity: 4,
            candidates: candidates.clone(),
            probe_capacities: vec![],
            slos: SloTargets {
                ttft_alpha: 0.95,
                slo_ffn: 10.0,
                slo_layer: 10.0,
            },
        };
        let plan = provision(&inputs, &latency).unwrap();
        assert!(plan.gpus >= 1);
        assert_eq!(plan.gpus, plan.memory_gpus.max(plan.compute_gpus));
        assert_eq!(
            plan.memory_gpus,
            gpus_for_cache(plan.m_star, 4)
        );
        assert_eq!(plan.min_cache_bytes, plan.m_star as u64 * (1 << 30));
        if plan.memory_gpus > plan.compute_gpus {
            assert_eq!(plan.binding, PlanBinding::Memory);
        }
        // IAR at M* clears the target, matching the attached curve tail.
        assert!(plan.iar_curve.last().unwrap().iar >= 0.95);
    }

    #[test]
    fn cache_to_gpu_mapping() {
        assert_eq!(gpus_for_cache(128, 32), 4);
        assert_eq!(gpus_for_cache(192, 32), 6);
        assert_eq!(gpus_for_cache(256, 32), 8);
        assert_eq!(gpus_for_cache(1, 32), 1);
    }
}
