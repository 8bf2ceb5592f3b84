//! Scenario configuration: the JSON schema and its resolution into runnable
//! simulator inputs.
//!
//! Unknown keys are rejected everywhere so typos in experiment configs fail
//! loudly instead of silently running defaults. Relative paths (trace,
//! calibration) resolve against the scenario file's directory.

use super::{ClusterSpec, NetworkParams};
use crate::error::{Error, Result};
use crate::metrics::{SloSpec, WindowSpec};
use crate::parcost::{place_adapters, CalibrationTable, ParallelStrategy, StageLatencyModel};
use crate::workload::{
    generate_trace, load_trace, partition_adapters_greedy, AdapterCatalog, LengthModel,
    WorkloadTrace,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServingMode {
    /// Shared LoRA server, LoRA-free instances.
    #[default]
    Disaggregated,
    /// Baseline: private per-instance cache, serial LoRA compute.
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    Fcfs,
    /// Oracle shortest-job-first by known output length.
    Sjf,
}

/// Optimization toggles for ablation runs. Everything on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    /// Start adapter transfer at admission instead of first invocation.
    #[serde(default = "yes")]
    pub prefetch: bool,
    /// Overlap the LoRA path with the expert GEMM window.
    #[serde(default = "yes")]
    pub overlap: bool,
    /// Pipeline adapter loading at layer granularity.
    #[serde(default = "yes")]
    pub layerwise_loading: bool,
}

fn yes() -> bool {
    true
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            prefetch: true,
            overlap: true,
            layerwise_loading: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogSection {
    pub adapters: usize,
    pub zipf_s: f64,
    pub mem_per_adapter_mb: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: u32,
    pub experts: u32,
    pub top_k: u32,
    pub lora_rank: u32,
    #[serde(default = "default_hidden")]
    pub hidden: u32,
    /// Attention time per layer: base + per-request * batch. Assumed
    /// constants, not profiled values.
    #[serde(default = "default_attn_base")]
    pub attention_base_us: f64,
    #[serde(default = "default_attn_per_req")]
    pub attention_per_req_us: f64,
}

fn default_hidden() -> u32 {
    4096
}
fn default_attn_base() -> f64 {
    150.0
}
fn default_attn_per_req() -> f64 {
    1.5
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSection {
    /// Replay a recorded trace CSV.
    Trace { path: PathBuf },
    /// Generate Poisson arrivals with Zipf adapter choice.
    Synthetic {
        rate: f64,
        duration_s: f64,
        #[serde(default = "default_len")]
        input_tokens: u32,
        #[serde(default = "default_len")]
        output_tokens: u32,
        /// Optional trace whose empirical length pairs replace the constants.
        #[serde(default)]
        length_trace: Option<PathBuf>,
    },
}

fn default_len() -> u32 {
    128
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default = "default_link_gb")]
    pub link_gb_per_s: f64,
    #[serde(default = "default_base_us")]
    pub base_latency_us: f64,
    #[serde(default = "default_poll_us")]
    pub poll_detect_us: f64,
    #[serde(default = "default_broadcast_us")]
    pub broadcast_us: f64,
    #[serde(default = "default_sync_us")]
    pub sync_local_us: f64,
    #[serde(default = "default_mode")]
    pub mode: super::CommMode,
}

fn default_link_gb() -> f64 {
    50.0
}
fn default_base_us() -> f64 {
    5.0
}
fn default_poll_us() -> f64 {
    2.0
}
fn default_broadcast_us() -> f64 {
    5.0
}
fn default_sync_us() -> f64 {
    30.0
}
fn default_mode() -> super::CommMode {
    super::CommMode::Push
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            link_gb_per_s: default_link_gb(),
            base_latency_us: default_base_us(),
            poll_detect_us: default_poll_us(),
            broadcast_us: default_broadcast_us(),
            sync_local_us: default_sync_us(),
            mode: default_mode(),
        }
    }
}

impl NetSection {
    pub fn to_params(&self) -> NetworkParams {
        NetworkParams {
            link_bandwidth: self.link_gb_per_s * 1e9,
            base_latency: self.base_latency_us * 1e-6,
            poll_detect: self.poll_detect_us * 1e-6,
            broadcast: self.broadcast_us * 1e-6,
            sync_local: self.sync_local_us * 1e-6,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub instances: u32,
    pub gpus_per_instance: u32,
    pub batch_cap: u32,
    pub server_gpus: u32,
    pub strategy: ParallelStrategy,
    pub cache_capacity: usize,
    #[serde(default = "default_pcie")]
    pub pcie_gb_per_s: f64,
    #[serde(default)]
    pub net: NetSection,
}

fn default_pcie() -> f64 {
    50.0
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SloSection {
    #[serde(default = "default_ttft")]
    pub ttft_s: f64,
    #[serde(default = "default_tpot")]
    pub tpot_s: f64,
    #[serde(default = "default_attain")]
    pub attainment_threshold: f64,
}

fn default_ttft() -> f64 {
    0.25
}
fn default_tpot() -> f64 {
    0.1
}
fn default_attain() -> f64 {
    0.9
}

impl Default for SloSection {
    fn default() -> Self {
        Self {
            ttft_s: default_ttft(),
            tpot_s: default_tpot(),
            attainment_threshold: default_attain(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_warmup")]
    pub cooldown_frac: f64,
}

fn default_warmup() -> f64 {
    0.1
}

impl Default for WindowSection {
    fn default() -> Self {
        Self {
            warmup_frac: 0.1,
            cooldown_frac: 0.1,
        }
    }
}

/// On-disk scenario schema. See `docs/config-schema.md`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub catalog: CatalogSection,
    pub model: ModelSection,
    pub workload: WorkloadSection,
    pub cluster: ClusterSection,
    /// Calibration CSV; falls back to the caller-provided default when absent.
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    #[serde(default)]
    pub slos: SloSection,
    pub seed: u64,
    #[serde(default)]
    pub mode: ServingMode,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub window: WindowSection,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_s: f64,
    /// Allow linear extrapolation of comm-stage calibration beyond its domain.
    #[serde(default)]
    pub extrapolate_comm: bool,
}

fn default_sample_interval() -> f64 {
    0.1
}

impl ScenarioConfig {
    pub fn from_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    /// Resolves configs into a runnable scenario. `base_dir` anchors relative
    /// paths; `default_calibration` is used when the config names none.
    pub fn resolve(
        &self,
        base_dir: &Path,
        default_calibration: Option<&Path>,
    ) -> Result<SimScenario> {
        let catalog = AdapterCatalog::zipf(
            self.catalog.adapters,
            self.catalog.zipf_s,
            (self.catalog.mem_per_adapter_mb * 1e6) as u64,
            self.model.layers,
            self.model.experts,
            self.model.lora_rank,
        )?;

        let resolve_path = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };

        let trace: WorkloadTrace = match &self.workload {
            WorkloadSection::Trace { path } => load_trace(&resolve_path(path))?,
            WorkloadSection::Synthetic {
                rate,
                duration_s,
                input_tokens,
                output_tokens,
                length_trace,
            } => {
                let model = match length_trace {
                    Some(p) => LengthModel::empirical_from_trace(&resolve_path(p))?,
                    None => LengthModel::constant(*input_tokens, *output_tokens)?,
                };
                generate_trace(*rate, *duration_s, &catalog.probs, &model, self.seed)?
            }
        };
        trace.validate_adapter_ids(catalog.len())?;

        let cal_path = match (&self.calibration, default_calibration) {
            (Some(p), _) => resolve_path(p),
            (None, Some(p)) => p.to_path_buf(),
            (None, None) => {
                return Err(Error::Validation(
                    "no calibration file given and no default available".into(),
                ))
            }
        };
        let table = CalibrationTable::from_path(&cal_path)?;
        let latency = StageLatencyModel::new(table, catalog.probs.clone(), self.extrapolate_comm);

        let cluster = ClusterSpec {
            instances: self.cluster.instances,
            gpus_per_instance: self.cluster.gpus_per_instance,
            batch_cap: self.cluster.batch_cap,
            server_gpus: self.cluster.server_gpus,
            strategy: self.cluster.strategy,
            net: self.cluster.net.to_params(),
            pcie_bandwidth: self.cluster.pcie_gb_per_s * 1e9,
            cache_capacity: self.cluster.cache_capacity,
        };

        let scenario = SimScenario {
            catalog,
            top_k: self.model.top_k,
            hidden: self.model.hidden,
            attention_base: self.model.attention_base_us * 1e-6,
            attention_per_req: self.model.attention_per_req_us * 1e-6,
            trace,
            cluster,
            latency,
            slos: SloSpec {
                ttft_slo: self.slos.ttft_s,
                tpot_slo: self.slos.tpot_s,
                attainment_threshold: self.slos.attainment_threshold,
            },
            window: WindowSpec {
                warmup_frac: self.window.warmup_frac,
                cooldown_frac: self.window.cooldown_frac,
            },
            seed: self.seed,
            mode: self.mode,
            policy: self.policy,
            ablation: self.ablation,
            sample_interval: self.sample_interval_s,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Fully resolved simulator inputs.
#[derive(Debug, Clone)]
pub struct SimScenario {
    pub catalog: AdapterCatalog,
    pub top_k: u32,
    pub hidden: u32,
    /// Per-layer attention time: base + per_req * batch (seconds).
    pub attention_base: f64,
    pub attention_per_req: f64,
    pub trace: WorkloadTrace,
    pub cluster: ClusterSpec,
    pub latency: StageLatencyModel,
    pub slos: SloSpec,
    pub window: WindowSpec,
    pub seed: u64,
    pub mode: ServingMode,
    pub policy: Policy,
    pub ablation: AblationFlags,
    pub sample_interval: f64,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        if self.top_k == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(
                "top_k and hidden must be >= 1".into(),
            ));
        }
        if self.top_k > self.catalog.experts {
            return Err(Error::InvalidArgument(format!(
                "top_k {} exceeds expert count {}",
                self.top_k, self.catalog.experts
            )));
        }
        if !(self.sample_interval > 0.0) {
            return Err(Error::InvalidArgument(
                "sample_interval must be > 0".into(),
            ));
        }
        for f in [self.window.warmup_frac, self.window.cooldown_frac] {
            if !(0.0..0.5).contains(&f) {
                return Err(Error::InvalidArgument(format!(
                    "window fractions must lie in [0, 0.5), got {f}"
                )));
            }
        }
        self.trace.validate_adapter_ids(self.catalog.len())?;
        if self.cluster.cache_capacity > self.catalog.len() {
            return Err(Error::InvalidArgument(format!(
                "cache capacity {} exceeds adapter count {}",
                self.cluster.cache_capacity,
                self.catalog.len()
            )));
        }
        // Placement must be constructible for this geometry and calibration
        // must cover the configured parallelism.
        place_adapters(
            &self.cluster.strategy,
            self.catalog.len() as u32,
            self.catalog.layers,
            self.catalog.experts,
            self.cluster.server_gpus,
        )?;
        if !self
            .latency
            .table()
            .has_config(&self.cluster.strategy, self.cluster.server_gpus)
        {
            return Err(Error::Calibration(format!(
                "calibration has no entry for {} with m={}",
                self.cluster.strategy.calibration_key(self.cluster.server_gpus),
                self.cluster.server_gpus
            )));
        }
        Ok(())
    }

    /// Adapter-to-instance assignment (greedy load balancing).
    pub fn adapter_assignment(&self) -> Result<Vec<usize>> {
        let sets = partition_adapters_greedy(&self.catalog.probs, self.cluster.instances as usize)?;
        let mut owner = vec![0usize; self.catalog.len()];
        for (instance, set) in sets.iter().enumerate() {
            for &adapter in set {
                owner[adapter] = instance;
            }
        }
        Ok(owner)
    }
}
