//! Client-server communication latency model.

use super::{CommMode, NetworkParams};

/// End-to-end latency of moving one LoRA activation payload between a client
/// and the server, in seconds.
///
/// Push mode: one-sided write (base latency + payload transfer), leader poll
/// detection, and the broadcast that hands the work to the other server GPUs.
///
/// Pull mode pays the push-mode path plus client-side coordination, an
/// explicit notify message, a local server synchronization, and a second
/// transfer round trip for the remote read.
///
/// `server_load` is queueing time already accumulated at the server stages
/// and is added verbatim.
pub fn lora_roundtrip(net: &NetworkParams, payload_bytes: f64, server_load: f64) -> f64 {
    debug_assert!(payload_bytes >= 0.0);
    let transfer = payload_bytes / net.link_bandwidth;
    let push = net.base_latency + transfer + net.poll_detect + net.broadcast;
    let protocol = match net.mode {
        CommMode::Push => push,
        CommMode::Pull => {
            push + 2.0 * net.sync_local + 2.0 * net.base_latency + transfer
        }
    };
    protocol + server_load
}

/// Multiplier applied to calibrated (push-profiled) comm-stage times when the
/// scenario selects a different transport mode.
pub fn comm_scale_factor(net: &NetworkParams, payload_bytes: f64) -> f64 {
    match net.mode {
        CommMode::Push => 1.0,
        CommMode::Pull => {
            let push = NetworkParams {
                mode: CommMode::Push,
                ..*net
            };
            lora_roundtrip(net, payload_bytes, 0.0) / lora_roundtrip(&push, payload_bytes, 0.0)
        }
    }
}
