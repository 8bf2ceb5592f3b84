//! LoRA server state: adapter cache with layer-wise loading, and the
//! receive/compute/send stage resources of each pipeline stage group.

use std::collections::HashMap;

/// Residency state of one cached adapter.
#[derive(Debug, Clone)]
pub struct AdapterSlot {
    /// In-flight requests currently using this adapter.
    pub refcount: u32,
    /// Recency stamp for LRU over inactive residents.
    pub last_used: u64,
    /// Absolute time each layer's weights become usable. `None` until the
    /// transfer is scheduled (no-prefetch mode defers it to first use).
    pub layer_available: Option<Vec<f64>>,
}

/// Adapter cache with LRU eviction over inactive residents.
#[derive(Debug)]
pub struct LoraCache {
    capacity: usize,
    layers: u32,
    /// Seconds to transfer one layer's slice of an adapter.
    layer_transfer: f64,
    /// Pipeline transfers at layer granularity; otherwise a layer is usable
    /// only once the whole adapter has arrived.
    layerwise: bool,
    resident: HashMap<usize, AdapterSlot>,
    use_seq: u64,
}

impl LoraCache {
    pub fn new(capacity: usize, layers: u32, layer_transfer: f64, layerwise: bool) -> Self {
        Self {
            capacity,
            layers,
            layer_transfer,
            layerwise,
            resident: HashMap::new(),
            use_seq: 0,
        }
    }

    fn availability(&self, start: f64) -> Vec<f64> {
        let total = self.layers as f64 * self.layer_transfer;
        (0..self.layers)
            .map(|l| {
                if self.layerwise {
                    start + (l + 1) as f64 * self.layer_transfer
                } else {
                    start + total
                }
            })
            .collect()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn resident_count(&self) -> usize {
        self.resident.len()
    }

    pub fn active_count(&self) -> usize {
        self.resident.values().filter(|s| s.refcount > 0).count()
    }

    pub fn is_resident(&self, adapter: usize) -> bool {
        self.resident.contains_key(&adapter)
    }

    /// Whether an admission for `adapter` could proceed right now: resident,
    /// or a slot is free, or some inactive resident can be evicted.
    pub fn admissible(&self, adapter: usize) -> bool {
        self.is_resident(adapter)
            || self.resident.len() < self.capacity
            || self.resident.values().any(|s| s.refcount == 0)
    }

    fn lru_inactive(&self) -> Option<usize> {
        self.resident
            .iter()
            .filter(|(_, s)| s.refcount == 0)
            .min_by_key(|(_, s)| s.last_used)
            .map(|(&a, _)| a)
    }

    /// Pins `adapter` for one more request, loading (and evicting) if needed.
    /// Returns false when the cache is full of active adapters.
    ///
    /// `prefetch` starts the weight transfer immediately; otherwise it is
    /// deferred until the first LoRA invocation touches the adapter.
    pub fn admit(&mut self, adapter: usize, now: f64, prefetch: bool) -> bool {
        self.use_seq += 1;
        if let Some(slot) = self.resident.get_mut(&adapter) {
            slot.refcount += 1;
            slot.last_used = self.use_seq;
            return true;
        }
        if self.resident.len() >= self.capacity {
            match self.lru_inactive() {
                Some(victim) => {
                    self.resident.remove(&victim);
                }
                None => return false,
            }
        }
        let layer_available = prefetch.then(|| self.availability(now));
        self.resident.insert(
            adapter,
            AdapterSlot {
                refcount: 1,
                last_used: self.use_seq,
                layer_available,
            },
        );
        debug_assert!(self.resident.len() <= self.capacity);
        true
    }

    /// Absolute time `layer` of `adapter` becomes usable, starting the
    /// transfer now if it has not been scheduled yet.
    pub fn layer_ready(&mut self, adapter: usize, layer: u32, now: f64) -> f64 {
        let slot = self
            .resident
            .get_mut(&adapter)
            .expect("layer_ready on a non-resident adapter");
        if slot.layer_available.is_none() {
            slot.layer_available = Some(
                (0..self.layers)
                    .map(|l| {
                        if self.layerwise {
                            now + (l + 1) as f64 * self.layer_transfer
                        } else {
                            now + self.layers as f64 * self.layer_transfer
                        }
                    })
                    .collect(),
            );
        }
        slot.layer_available.as_ref().unwrap()[layer as usize]
    }

    /// Time the whole adapter is loaded, scheduling the transfer if needed.
    pub fn fully_ready(&mut self, adapter: usize, now: f64) -> f64 {
        self.layer_ready(adapter, self.layers - 1, now)
    }

    /// Drops one request's pin on `adapter`.
    pub fn release(&mut self, adapter: usize) {
        self.use_seq += 1;
        let slot = self
            .resident
            .get_mut(&adapter)
            .expect("release of a non-resident adapter");
        debug_assert!(slot.refcount > 0, "refcount underflow");
        slot.refcount -= 1;
        slot.last_used = self.use_seq;
    }
}

/// FIFO recv/comp/send resources for each pipeline stage group.
///
/// Each stage is a single server: a visit entering at `entry` starts each
/// stage at max(previous stage exit, stage free time). Claims happen in
/// event order, which preserves arrival-order FIFO per stage.
#[derive(Debug)]
pub struct StageGroups {
    free: Vec<[f64; 3]>,
}

impl StageGroups {
    pub fn new(groups: usize) -> Self {
        Self {
            free: vec![[0.0; 3]; groups.max(1)],
        }
    }

    /// Runs one visit through the group's three stages; returns the send-stage
    /// exit time.
    pub fn claim(&mut self, group: usize, entry: f64, times: [f64; 3]) -> f64 {
        let free = &mut self.free[group];
        let mut t = entry;
        for (stage, &dt) in times.iter().enumerate() {
            let start = t.max(free[stage]);
            let done = start + dt;
            free[stage] = done;
            t = done;
        }
        t
    }
}
