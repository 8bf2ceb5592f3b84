//! Deterministic discrete-event simulator of disaggregated multi-LoRA serving.
//!
//! The simulated system: `L` decode instances run token-level iterations over
//! their admitted batches; every MoE layer issues two LoRA executions (up-gate
//! and down projection) to a shared LoRA server, each passing through
//! receive / compute / send stage resources (FIFO per pipeline stage group).
//! LoRA communication overlaps the expert GEMM, so only the part of the LoRA
//! path that exceeds the overlap window extends the layer. Adapters are cached
//! on the server (LRU over inactive residents) and loaded layer-by-layer over
//! PCIe, with optional scheduler-driven prefetch at admission time.
//!
//! A **coupled** baseline mode keeps a private adapter cache inside every
//! instance and adds serial LoRA compute to each layer instead of offloading.
//!
//! The event loop is single-threaded; events are processed in (time, creation
//! sequence) order, so a scenario plus seed determines every output bit.

mod engine;
mod net;
mod scenario;
mod server;

pub use engine::run;
pub use net::{comm_scale_factor, lora_roundtrip};
pub use scenario::{
    AblationFlags, CatalogSection, ClusterSection, ModelSection, Policy, ScenarioConfig,
    ServingMode, SimScenario, SloSection, WindowSection, WorkloadSection,
};

use serde::{Deserialize, Serialize};

/// Client-server transport discipline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommMode {
    /// One-sided writes into preallocated remote buffers; a leader polls for
    /// completed writes and broadcasts the sender id.
    Push,
    /// Clients coordinate and notify; the server synchronizes locally and
    /// issues remote reads, adding an extra transfer round trip.
    Pull,
}

/// Interconnect and protocol timing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkParams {
    /// Link bandwidth in bytes/second.
    pub link_bandwidth: f64,
    /// Fixed cost of one one-sided message, seconds.
    pub base_latency: f64,
    /// Leader poll-to-detection delay, seconds.
    pub poll_detect: f64,
    /// Leader-to-peers broadcast of the sender id, seconds.
    pub broadcast: f64,
    /// Local (intra-node) synchronization barrier, seconds.
    pub sync_local: f64,
    pub mode: CommMode,
}

impl Default for NetworkParams {
    /// Defaults sized for 400 Gb/s InfiniBand with GPU-initiated one-sided
    /// transfers; at a 4 MB payload the pull/push latency ratio is 2.63.
    fn default() -> Self {
        Self {
            link_bandwidth: 50e9,
            base_latency: 5e-6,
            poll_detect: 2e-6,
            broadcast: 5e-6,
            sync_local: 30e-6,
            mode: CommMode::Push,
        }
    }
}

impl NetworkParams {
    pub fn validate(&self) -> crate::error::Result<()> {
        for (name, v) in [
            ("link_bandwidth", self.link_bandwidth),
            ("base_latency", self.base_latency),
            ("poll_detect", self.poll_detect),
            ("broadcast", self.broadcast),
            ("sync_local", self.sync_local),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(crate::error::Error::InvalidArgument(format!(
                    "network parameter {name} must be >= 0, got {v}"
                )));
            }
        }
        if self.link_bandwidth == 0.0 {
            return Err(crate::error::Error::InvalidArgument(
                "link_bandwidth must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Cluster shape shared by the simulator and the provisioning front end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// LLM decode instances sharing the LoRA server.
    pub instances: u32,
    /// GPUs per LLM instance.
    pub gpus_per_instance: u32,
    /// Max concurrent requests per instance.
    pub batch_cap: u32,
    /// LoRA server GPU count.
    pub server_gpus: u32,
    pub strategy: crate::parcost::ParallelStrategy,
    pub net: NetworkParams,
    /// Host-to-GPU transfer bandwidth in bytes/second (adapter loading).
    pub pcie_bandwidth: f64,
    /// LoRA cache capacity in adapters (server-wide; split evenly across
    /// instances in coupled mode).
    pub cache_capacity: usize,
}

impl ClusterSpec {
    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::Error;
        if self.instances == 0 {
            return Err(Error::InvalidArgument("instances must be >= 1".into()));
        }
        if self.gpus_per_instance == 0 {
            return Err(Error::InvalidArgument(
                "gpus_per_instance must be >= 1".into(),
            ));
        }
        if self.batch_cap == 0 {
            return Err(Error::InvalidArgument("batch_cap must be >= 1".into()));
        }
        if self.cache_capacity == 0 {
            return Err(Error::InvalidArgument(
                "cache_capacity must be >= 1".into(),
            ));
        }
        if !(self.pcie_bandwidth > 0.0) {
            return Err(Error::InvalidArgument(
                "pcie_bandwidth must be > 0".into(),
            ));
        }
        self.strategy.validate(self.server_gpus)?;
        self.net.validate()
    }
}

/// Event kinds processed by the simulation loop, ordered by (time, sequence).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimEvent {
    /// A request enters the system.
    Arrival { request: usize },
    /// Re-run the admission pass for one instance's queue.
    AdmissionCheck { instance: usize },
    /// Adapter weights for the gating layer became available; the deferred
    /// LoRA execution may now enter the server stages.
    LayerLoadDone { instance: usize, projection: u8 },
    /// A LoRA execution left the send stage.
    StageDone { instance: usize, projection: u8 },
    /// An instance finished one decode iteration over its batch.
    DecodeStepDone { instance: usize },
    /// A request produced its final token and released its resources.
    RequestDone { request: usize },
    /// Time-series sampling tick.
    SampleTick,
}
