//! Analytical cost model for LoRA-server parallelization strategies.
//!
//! Four strategies are compared on four metrics per decode layer:
//!
//! | strategy  | peer volume    | peer count  | compute volume | sync scope |
//! |-----------|----------------|-------------|----------------|------------|
//! | DP        | bk / (p*m)     | m           | bk / m         | m          |
//! | PP        | bk / p         | 1           | bk             | 1          |
//! | EP        | bk / max(p,m)  | max(m/p,1)  | bk / m         | m          |
//! | EPx-PPy   | bk / max(p,x)  | max(x/p,1)  | bk / x         | x          |
//!
//! with `b` the per-instance batch size, `k` the expert routing top-k, `p` the
//! client (LLM instance) GPU count and `m` the server GPU count. PP and EP are
//! the degenerate hybrids EP1-PPm and EPm-PP1. All metrics are exact rationals
//! so identities like "compute volume times sync scope equals b*k" hold with
//! no rounding.

mod calibration;

pub use calibration::{CalibrationTable, Stage, StageLatencyModel};

use crate::error::{Error, Result};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

/// How LoRA execution is partitioned across the server GPUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ParallelStrategy {
    /// Adapters striped across GPUs.
    DataParallel,
    /// Layers striped across GPUs, one GPU per layer group.
    PipelineParallel,
    /// Experts split across GPUs.
    ExpertParallel,
    /// `stages` pipeline groups of `expert_degree` GPUs each.
    Hybrid { expert_degree: u32, stages: u32 },
}

impl ParallelStrategy {
    /// Validates the configuration against a server GPU count.
    pub fn validate(&self, server_gpus: u32) -> Result<()> {
        if server_gpus == 0 {
            return Err(Error::InvalidArgument("server_gpus must be >= 1".into()));
        }
        if let ParallelStrategy::Hybrid {
            expert_degree,
            stages,
        } = self
        {
            if *expert_degree == 0 || *stages == 0 {
                return Err(Error::InvalidArgument(
                    "hybrid degrees must be >= 1".into(),
                ));
            }
            if expert_degree * stages != server_gpus {
                return Err(Error::InvalidArgument(format!(
                    "hybrid EP{expert_degree}-PP{stages} requires x*y = m, got m = {server_gpus}"
                )));
            }
        }
        Ok(())
    }

    /// Expert-parallel degree once degenerate cases are resolved for `m` GPUs.
    pub fn expert_degree(&self, server_gpus: u32) -> u32 {
        match self {
            ParallelStrategy::DataParallel => server_gpus,
            ParallelStrategy::PipelineParallel => 1,
            ParallelStrategy::ExpertParallel => server_gpus,
            ParallelStrategy::Hybrid { expert_degree, .. } => *expert_degree,
        }
    }

    /// Pipeline stage count once degenerate cases are resolved for `m` GPUs.
    pub fn stage_count(&self, server_gpus: u32) -> u32 {
        match self {
            // DP synchronizes the whole server every step: one stage group.
            ParallelStrategy::DataParallel => 1,
            ParallelStrategy::PipelineParallel => server_gpus,
            ParallelStrategy::ExpertParallel => 1,
            ParallelStrategy::Hybrid { stages, .. } => *stages,
        }
    }

    /// Key used in calibration tables: `DP` or canonical `EPx-PPy`.
    pub fn calibration_key(&self, server_gpus: u32) -> String {
        match self {
            ParallelStrategy::DataParallel => "DP".to_string(),
            _ => format!(
                "EP{}-PP{}",
                self.expert_degree(server_gpus),
                self.stage_count(server_gpus)
            ),
        }
    }
}

impl std::fmt::Display for ParallelStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParallelStrategy::DataParallel => write!(f, "DP"),
            ParallelStrategy::PipelineParallel => write!(f, "PP"),
            ParallelStrategy::ExpertParallel => write!(f, "EP"),
            ParallelStrategy::Hybrid {
                expert_degree,
                stages,
            } => write!(f, "EP{expert_degree}-PP{stages}"),
        }
    }
}

impl std::str::FromStr for ParallelStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "DP" | "dp" => Ok(ParallelStrategy::DataParallel),
            "PP" | "pp" => Ok(ParallelStrategy::PipelineParallel),
            "EP" | "ep" => Ok(ParallelStrategy::ExpertParallel),
            other => {
                let rest = other
                    .strip_prefix("EP")
                    .or_else(|| other.strip_prefix("ep"));
                if let Some(rest) = rest {
                    if let Some((x, y)) = rest.split_once("-PP").or_else(|| rest.split_once("-pp"))
                    {
                        let expert_degree: u32 = x.parse().map_err(|_| {
                            Error::InvalidArgument(format!("bad strategy `{other}`"))
                        })?;
                        let stages: u32 = y.parse().map_err(|_| {
                            Error::InvalidArgument(format!("bad strategy `{other}`"))
                        })?;
                        return Ok(ParallelStrategy::Hybrid {
                            expert_degree,
                            stages,
                        });
                    }
                }
                Err(Error::InvalidArgument(format!(
                    "unknown strategy `{other}` (expected DP, PP, EP or EPx-PPy)"
                )))
            }
        }
    }
}

impl TryFrom<String> for ParallelStrategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ParallelStrategy> for String {
    fn from(s: ParallelStrategy) -> String {
        s.to_string()
    }
}

/// Per-layer communication/compute/synchronization cost of a strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyMetrics {
    /// Average activations per client-server GPU pair per layer.
    pub peer_volume: Ratio<u64>,
    /// Client GPUs a server GPU communicates with.
    pub peer_count: Ratio<u64>,
    /// Activations each participating server GPU computes per layer.
    pub compute_volume: Ratio<u64>,
    /// Server GPUs that must synchronize per step.
    pub sync_scope: u64,
}

/// Evaluates the per-strategy cost formulas.
pub fn strategy_metrics(
    strategy: &ParallelStrategy,
    batch: u64,
    top_k: u64,
    client_gpus: u64,
    server_gpus: u64,
) -> Result<StrategyMetrics> {
    if batch == 0 || top_k == 0 || client_gpus == 0 || server_gpus == 0 {
        return Err(Error::InvalidArgument(
            "batch, top_k, client_gpus and server_gpus must all be >= 1".into(),
        ));
    }
    strategy.validate(server_gpus as u32)?;

    let bk = Ratio::from_integer(batch * top_k);
    let one = Ratio::from_integer(1u64);
    let (p, m) = (client_gpus, server_gpus);

    let metrics = match strategy {
        ParallelStrategy::DataParallel => StrategyMetrics {
            peer_volume: bk / Ratio::from_integer(p * m),
            peer_count: Ratio::from_integer(m),
            compute_volume: bk / Ratio::from_integer(m),
            sync_scope: m,
        },
        ParallelStrategy::PipelineParallel => StrategyMetrics {
            peer_volume: bk / Ratio::from_integer(p),
            peer_count: one,
            compute_volume: bk,
            sync_scope: 1,
        },
        ParallelStrategy::ExpertParallel => StrategyMetrics {
            peer_volume: bk / Ratio::from_integer(p.max(m)),
            peer_count: (Ratio::new(m, p)).max(one),
            compute_volume: bk / Ratio::from_integer(m),
            sync_scope: m,
        },
        ParallelStrategy::Hybrid { expert_degree, .. } => {
            let x = *expert_degree as u64;
            StrategyMetrics {
                peer_volume: bk / Ratio::from_integer(p.max(x)),
                peer_count: (Ratio::new(x, p)).max(one),
                compute_volume: bk / Ratio::from_integer(x),
                sync_scope: x,
            }
        }
    };
    Ok(metrics)
}

/// Total assignment of the adapter tensor (adapter x layer x expert) to GPUs.
#[derive(Debug, Clone)]
pub struct Placement {
    pub strategy: ParallelStrategy,
    pub adapters: u32,
    pub layers: u32,
    pub experts: u32,
    pub server_gpus: u32,
}

/// Owner of `expert` when `experts` are split contiguously into `parts`,
/// remainder going one-per-part to the lowest-index parts.
fn expert_owner(expert: u32, experts: u32, parts: u32) -> u32 {
    let base = experts / parts;
    let remainder = experts % parts;
    // Parts [0, remainder) hold base+1 experts each.
    let big_span = remainder * (base + 1);
    if expert < big_span {
        expert / (base + 1)
    } else if base > 0 {
        remainder + (expert - big_span) / base
    } else {
        // More parts than experts: leftover parts stay empty.
        expert
    }
}

/// Builds the placement map for a strategy over the given geometry.
pub fn place_adapters(
    strategy: &ParallelStrategy,
    adapters: u32,
    layers: u32,
    experts: u32,
    server_gpus: u32,
) -> Result<Placement> {
    if adapters == 0 || layers == 0 || experts == 0 {
        return Err(Error::InvalidArgument(
            "adapters, layers and experts must be >= 1".into(),
        ));
    }
    strategy.validate(server_gpus)?;
    Ok(Placement {
        strategy: *strategy,
        adapters,
        layers,
        experts,
        server_gpus,
    })
}

impl Placement {
    /// Server GPU that hosts (adapter, layer, expert). Layers, experts and
    /// adapters are 0-based; pipeline stages interleave layers (layer mod y).
    pub fn gpu_for(&self, adapter: u32, layer: u32, expert: u32) -> u32 {
        debug_assert!(adapter < self.adapters && layer < self.layers && expert < self.experts);
        let m = self.server_gpus;
        match self.strategy {
            ParallelStrategy::DataParallel => adapter % m,
            ParallelStrategy::PipelineParallel => layer % m,
            ParallelStrategy::ExpertParallel => expert_owner(expert, self.experts, m),
            ParallelStrategy::Hybrid {
                expert_degree,
                stages,
            } => {
                let stage = layer % stages;
                stage * expert_degree + expert_owner(expert, self.experts, expert_degree)
            }
        }
    }

    /// Pipeline stage group that executes `layer`.
    pub fn stage_for_layer(&self, layer: u32) -> u32 {
        layer % self.strategy.stage_count(self.server_gpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ratio(n: u64, d: u64) -> Ratio<u64> {
        Ratio::new(n, d)
    }

    #[test]
    fn expert_parallel_row() {
        let m = strategy_metrics(&ParallelStrategy::ExpertParallel, 256, 2, 2, 8).unwrap();
        assert_eq!(m.peer_volume, ratio(64, 1));
        assert_eq!(m.peer_count, ratio(4, 1));
        assert_eq!(m.compute_volume, ratio(64, 1));
        assert_eq!(m.sync_scope, 8);
    }

    #[test]
    fn pipeline_parallel_row() {
        let m = strategy_metrics(&ParallelStrategy::PipelineParallel, 128, 2, 2, 4).unwrap();
        assert_eq!(m.peer_volume, ratio(128, 1));
        assert_eq!(m.peer_count, ratio(1, 1));
        assert_eq!(m.compute_volume, ratio(256, 1));
        assert_eq!(m.sync_scope, 1);
    }

    #[test]
    fn hybrid_with_full_expert_degree_matches_ep() {
        for (b, k, p, m) in [(256u64, 2u64, 2u64, 8u64), (64, 4, 4, 4), (100, 1, 8, 2)] {
            let hybrid = ParallelStrategy::Hybrid {
                expert_degree: m as u32,
                stages: 1,
            };
            let a = strategy_metrics(&hybrid, b, k, p, m).unwrap();
            let e = strategy_metrics(&ParallelStrategy::ExpertParallel, b, k, p, m).unwrap();
            assert_eq!(a, e);
        }
    }

    #[test]
    fn hybrid_with_single_expert_degree_matches_pp() {
        let hybrid = ParallelStrategy::Hybrid {
            expert_degree: 1,
            stages: 8,
        };
        let a = strategy_metrics(&hybrid, 256, 2, 2, 8).unwrap();
        let p = strategy_metrics(&ParallelStrategy::PipelineParallel, 256, 2, 2, 8).unwrap();
        assert_eq!(a.compute_volume, p.compute_volume);
        assert_eq!(a.sync_scope, p.sync_scope);
        assert_eq!(a.peer_volume, p.peer_volume);
        assert_eq!(a.peer_count, p.peer_count);
    }

    #[test]
    fn hybrid_rejects_mismatched_product() {
        let bad = ParallelStrategy::Hybrid {
            expert_degree: 4,
            stages: 3,
        };
        assert!(strategy_metrics(&bad, 16, 2, 2, 8).is_err());
    }

    proptest! {
        #[test]
        fn compute_volume_conserves_total_work(
            b in 1u64..2048, k in 1u64..16, p in 1u64..16,
            x_pow in 0u32..4, y_pow in 0u32..4,
        ) {
            let x = 1u64 << x_pow;
            let y = 1u64 << y_pow;
            let m = x * y;
            let bk = Ratio::from_integer(b * k);
            for strategy in [
                ParallelStrategy::DataParallel,
                ParallelStrategy::PipelineParallel,
                ParallelStrategy::ExpertParallel,
                ParallelStrategy::Hybrid { expert_degree: x as u32, stages: y as u32 },
            ] {
                let metrics = strategy_metrics(&strategy, b, k, p, m).unwrap();
                let total = metrics.compute_volume * Ratio::from_integer(metrics.sync_scope);
                prop_assert_eq!(total, bk);
                prop_assert!(metrics.sync_scope <= m);
                prop_assert!(metrics.peer_volume > Ratio::from_integer(0));
                prop_assert!(metrics.peer_count >= Ratio::from_integer(1));
            }
        }

        #[test]
        fn placement_is_total_and_partitioned(
            n in 1u32..6, l in 1u32..9, e in 1u32..9,
            x_pow in 0u32..3, y_pow in 0u32..3,
        ) {
            let x = 1u32 << x_pow;
            let y = 1u32 << y_pow;
            let m = x * y;
            for strategy in [
                ParallelStrategy::DataParallel,
                ParallelStrategy::PipelineParallel,
                ParallelStrategy::ExpertParallel,
                ParallelStrategy::Hybrid { expert_degree: x, stages: y },
            ] {
                let placement = place_adapters(&strategy, n, l, e, m).unwrap();
                for a in 0..n {
                    for layer in 0..l {
                        for expert in 0..e {
                            let gpu = placement.gpu_for(a, layer, expert);
                            prop_assert!(gpu < m, "gpu {} out of range m={}", gpu, m);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn hybrid_placement_interleaves_layers() {
        // EP2-PP2 over 4 layers: even layers on stage 0 (GPUs 0-1), odd layers
        // on stage 1 (GPUs 2-3).
        let strategy = ParallelStrategy::Hybrid {
            expert_degree: 2,
            stages: 2,
        };
        let p = place_adapters(&strategy, 4, 4, 4, 4).unwrap();
        for expert in 0..4 {
            assert!(p.gpu_for(0, 0, expert) < 2);
            assert!(p.gpu_for(0, 2, expert) < 2);
            assert!(p.gpu_for(0, 1, expert) >= 2);
            assert!(p.gpu_for(0, 3, expert) >= 2);
        }
    }

    #[test]
    fn pipeline_single_gpu_takes_everything() {
        let p = place_adapters(&ParallelStrategy::PipelineParallel, 3, 5, 2, 1).unwrap();
        for a in 0..3 {
            for l in 0..5 {
                for e in 0..2 {
                    assert_eq!(p.gpu_for(a, l, e), 0);
                }
            }
        }
    }

    #[test]
    fn expert_parallel_contiguous_split() {
        let p = place_adapters(&ParallelStrategy::ExpertParallel, 2, 2, 8, 4).unwrap();
        let owners: Vec<u32> = (0..8).map(|e| p.gpu_for(0, 0, e)).collect();
        assert_eq!(owners, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn expert_split_remainder_stays_balanced() {
        // 7 experts over 4 GPUs: sizes 2,2,2,1.
        let p = place_adapters(&ParallelStrategy::ExpertParallel, 1, 1, 7, 4).unwrap();
        let mut counts = [0u32; 4];
        for e in 0..7 {
            counts[p.gpu_for(0, 0, e) as usize] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 1]);
    }

    #[test]
    fn strategy_parsing_round_trips() {
        for s in ["DP", "PP", "EP", "EP4-PP2", "EP1-PP8"] {
            let parsed: ParallelStrategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("EPx-PP2".parse::<ParallelStrategy>().is_err());
        assert!("TP".parse::<ParallelStrategy>().is_err());
    }

    #[test]
    fn calibration_keys_canonicalize_degenerates() {
        assert_eq!(
            ParallelStrategy::ExpertParallel.calibration_key(8),
            "EP8-PP1"
        );
        assert_eq!(
            ParallelStrategy::PipelineParallel.calibration_key(8),
            "EP1-PP8"
        );
        assert_eq!(ParallelStrategy::DataParallel.calibration_key(8), "DP");
    }
}
