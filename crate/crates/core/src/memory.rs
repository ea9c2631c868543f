//! Per-instance unified memory: physical blocks owned by parameter layers,
//! the KVCache pool or nobody, plus a virtual KVCache mapping that can grow
//! over freed parameter blocks and shrink back on restore.
//!
//! Blocks are one model layer in size. The KVCache region is the ordered list
//! of mapped blocks; dropping a layer appends its block to the tail of that
//! list, restoring it unmaps the block again.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::network::{Endpoint, TransferKind, TransferTask};
use crate::types::{Group, Instance, InstanceId, Micros, ModelSpec, RequestId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockOwner {
    ParamLayer(u32),
    KvCache,
    Free,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Block {
    pub id: u32,
    pub size_bytes: u64,
    pub owner: BlockOwner,
    /// Layer the block was created for, if it started as a parameter block.
    pub home_layer: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentTable {
    blocks: Vec<Block>,
    /// Virtual KVCache layout: block ids in mapping order.
    kv_map: Vec<u32>,
    /// Blocks unmapped for an in-flight restore, keyed by the layer they
    /// will hold.
    pending_restore: Vec<(u32, u32)>,
    pub map_latency: Micros,
    total: u64,
}

impl SegmentTable {
    /// Lays out a full parameter copy, a reserved (unmapped) region, and a
    /// KVCache pool filling the rest.
    pub fn new(model: &ModelSpec, total_hbm: u64, reserve_bytes: u64, map_latency: Micros) -> Result<SegmentTable> {
        let params = model.param_bytes();
        if params + reserve_bytes > total_hbm {
            return Err(Error::InvalidLayout(format!(
                "parameters ({params} B) and reserve ({reserve_bytes} B) exceed HBM ({total_hbm} B)"
            )));
        }
        let mut blocks = Vec::new();
        for layer in 0..model.num_layers {
            blocks.push(Block {
                id: blocks.len() as u32,
                size_bytes: model.bytes_per_layer,
                owner: BlockOwner::ParamLayer(layer),
                home_layer: Some(layer),
            });
        }
        let mut kv_map = Vec::new();
        let mut left = total_hbm - params - reserve_bytes;
        while left > 0 {
            let size = left.min(model.bytes_per_layer);
            kv_map.push(blocks.len() as u32);
            blocks.push(Block {
                id: blocks.len() as u32,
                size_bytes: size,
                owner: BlockOwner::KvCache,
                home_layer: None,
            });
            left -= size;
        }
        if reserve_bytes > 0 {
            blocks.push(Block {
                id: blocks.len() as u32,
                size_bytes: reserve_bytes,
                owner: BlockOwner::Free,
                home_layer: None,
            });
        }
        Ok(SegmentTable {
            blocks,
            kv_map,
            pending_restore: Vec::new(),
            map_latency,
            total: total_hbm,
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn kv_map(&self) -> &[u32] {
        &self.kv_map
    }

    pub fn total_bytes(&self) -> u64 {
        self.total
    }

    pub fn kvcache_virtual_extent(&self) -> u64 {
        self.kv_map.iter().map(|&b| self.blocks[b as usize].size_bytes).sum()
    }

    pub fn bytes_owned(&self, pred: impl Fn(&BlockOwner) -> bool) -> u64 {
        self.blocks.iter().filter(|b| pred(&b.owner)).map(|b| b.size_bytes).sum()
    }

    pub fn holds_layer(&self, layer: u32) -> bool {
        self.blocks.iter().any(|b| b.owner == BlockOwner::ParamLayer(layer))
    }

    pub fn layers_held(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self
            .blocks
            .iter()
            .filter_map(|b| match b.owner {
                BlockOwner::ParamLayer(l) => Some(l),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v
    }

    /// Held layers as one contiguous range (empty if none are held).
    pub fn layer_range_held(&self) -> Range<u32> {
        let v = self.layers_held();
        match (v.first(), v.last()) {
            (Some(&a), Some(&b)) => a..b + 1,
            _ => 0..0,
        }
    }

    pub fn num_layers_held(&self) -> u32 {
        self.layers_held().len() as u32
    }

    /// Checks ownership, sizing and mapping consistency.
    pub fn check(&self) -> Result<()> {
        let sum: u64 = self.blocks.iter().map(|b| b.size_bytes).sum();
        if sum != self.total {
            return Err(Error::InvalidLayout(format!("blocks sum to {sum}, expected {}", self.total)));
        }
        let mut mapped = vec![false; self.blocks.len()];
        for &b in &self.kv_map {
            let block = &self.blocks[b as usize];
            if block.owner != BlockOwner::KvCache || mapped[b as usize] {
                return Err(Error::InvalidLayout(format!("block {b} mapped inconsistently")));
            }
            mapped[b as usize] = true;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if block.owner == BlockOwner::KvCache && !mapped[i] {
                return Err(Error::InvalidLayout(format!("KVCache block {i} is not mapped")));
            }
        }
        Ok(())
    }

    fn block_of_layer(&self, layer: u32) -> Option<usize> {
        self.blocks.iter().position(|b| b.owner == BlockOwner::ParamLayer(layer))
    }

    /// Block to give back to `layer` on restore: its original block if that
    /// is still mapped as KVCache, else the most recently mapped block.
    fn reclaim_candidate(&self, layer: u32, taken: &[usize]) -> Option<usize> {
        let home = self
            .blocks
            .iter()
            .position(|b| b.home_layer == Some(layer) && b.owner == BlockOwner::KvCache);
        if let Some(i) = home {
            if !taken.contains(&i) {
                return Some(i);
            }
        }
        self.kv_map
            .iter()
            .rev()
            .map(|&b| b as usize)
            .find(|i| !taken.contains(i) && self.blocks[*i].home_layer.is_none_or(|h| !self.holds_layer(h)))
    }
}

/// Token bookkeeping over an instance's KVCache pool. A token costs
/// `kv_bytes_per_token * held_layers / num_layers` bytes on this instance.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct KvAllocator {
    allocated: BTreeMap<RequestId, u64>,
    capacity_bytes: u64,
    /// Bytes per token, scaled by `layer_den`.
    bytes_per_token_num: u64,
    layer_den: u64,
    /// Layers whose KVCache each token stores here.
    layers: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocOutcome {
    Ok,
    OutOfMemory,
}

impl KvAllocator {
    pub fn new(model: &ModelSpec, capacity_bytes: u64, layers_held: u32) -> KvAllocator {
        KvAllocator {
            allocated: BTreeMap::new(),
            capacity_bytes,
            bytes_per_token_num: model.kv_bytes_per_token * layers_held as u64,
            layer_den: model.num_layers as u64,
            layers: layers_held,
        }
    }

    pub fn footprint_layers(&self) -> u32 {
        self.layers
    }

    pub fn capacity_tokens(&self) -> u64 {
        if self.bytes_per_token_num == 0 {
            return u64::MAX;
        }
        ((self.capacity_bytes as u128 * self.layer_den as u128) / self.bytes_per_token_num as u128) as u64
    }

    pub fn used_tokens(&self) -> u64 {
        self.allocated.values().sum()
    }

    pub fn free_tokens(&self) -> u64 {
        self.capacity_tokens().saturating_sub(self.used_tokens())
    }

    pub fn bytes_for(&self, tokens: u64) -> u64 {
        ((tokens as u128 * self.bytes_per_token_num as u128).div_ceil(self.layer_den as u128)) as u64
    }

    pub fn used_bytes(&self) -> u64 {
        self.bytes_for(self.used_tokens())
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn tokens_of(&self, request: RequestId) -> u64 {
        self.allocated.get(&request).copied().unwrap_or(0)
    }

    pub fn requests(&self) -> impl Iterator<Item = (RequestId, u64)> + '_ {
        self.allocated.iter().map(|(&r, &t)| (r, t))
    }

    pub fn alloc(&mut self, request: RequestId, n_tokens: u64) -> AllocOutcome {
        assert!(n_tokens > 0, "allocation of zero tokens");
        if self.used_tokens() + n_tokens > self.capacity_tokens() {
            return AllocOutcome::OutOfMemory;
        }
        *self.allocated.entry(request).or_insert(0) += n_tokens;
        AllocOutcome::Ok
    }

    /// Allocation that bypasses the capacity check; used when KVCache is
    /// redistributed among group members with equal total bytes.
    pub(crate) fn force(&mut self, request: RequestId, n_tokens: u64) {
        *self.allocated.entry(request).or_insert(0) += n_tokens;
    }

    pub fn release(&mut self, request: RequestId) -> u64 {
        self.allocated.remove(&request).unwrap_or(0)
    }

    /// Rescales for a new pool size and per-token footprint, keeping the
    /// per-request token counts.
    pub fn resize(&mut self, capacity_bytes: u64, model: &ModelSpec, layers_held: u32) {
        self.capacity_bytes = capacity_bytes;
        self.bytes_per_token_num = model.kv_bytes_per_token * layers_held as u64;
        self.layer_den = model.num_layers as u64;
        self.layers = layers_held;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropOutcome {
    pub freed_bytes: u64,
    pub remapped_blocks: u32,
    pub remap_delay: Micros,
}

impl Instance {
    pub fn new(id: InstanceId, model: &ModelSpec, total_hbm: u64, reserve_bytes: u64, map_latency: Micros, nic_bandwidth: f64) -> Result<Instance> {
        let segments = SegmentTable::new(model, total_hbm, reserve_bytes, map_latency)?;
        let kv = KvAllocator::new(model, segments.kvcache_virtual_extent(), model.num_layers);
        Ok(Instance {
            id,
            total_hbm,
            segments,
            kv,
            group_id: crate::types::GroupId(id.0),
            nic_bandwidth,
        })
    }

    fn sync_allocator(&mut self, model: &ModelSpec, kv_layers: u32) {
        let extent = self.segments.kvcache_virtual_extent();
        self.kv.resize(extent, model, kv_layers);
    }

    /// Sets how many layers of KVCache each token stores here. Restored
    /// layers keep the old footprint until the instance's stage changes.
    pub fn set_kv_layers(&mut self, layers: u32, model: &ModelSpec) {
        self.sync_allocator(model, layers);
    }

    /// Unmaps the parameter blocks of `layers` and maps them onto the tail of
    /// the KVCache region. `group` is the stage map the instance will serve
    /// under; layers it assigns to this instance may not be dropped.
    pub fn drop_layers(&mut self, layers: Range<u32>, group: &Group, model: &ModelSpec) -> Result<DropOutcome> {
        if layers.is_empty() {
            return Ok(DropOutcome {
                freed_bytes: 0,
                remapped_blocks: 0,
                remap_delay: Micros::ZERO,
            });
        }
        for layer in layers.clone() {
            if !self.segments.holds_layer(layer) {
                return Err(Error::LayerAbsent { instance: self.id, layer });
            }
            match group.holder_of(layer) {
                Some(h) if h != self.id => {}
                _ => return Err(Error::CoverageViolation { instance: self.id, layer }),
            }
        }
        let mut freed = 0;
        let mut n = 0;
        for layer in layers {
            let i = self.segments.block_of_layer(layer).expect("checked above");
            let block = &mut self.segments.blocks[i];
            block.owner = BlockOwner::KvCache;
            freed += block.size_bytes;
            self.segments.kv_map.push(i as u32);
            n += 1;
        }
        self.sync_allocator(model, self.segments.num_layers_held());
        Ok(DropOutcome {
            freed_bytes: freed,
            remapped_blocks: n,
            remap_delay: Micros(self.segments.map_latency.0 * n as u64),
        })
    }

    /// Bytes that could be unmapped from the KVCache region right now.
    pub fn reclaimable_bytes(&self) -> u64 {
        self.kv.capacity_bytes().saturating_sub(self.kv.used_bytes())
    }

    /// Whether every missing layer could be restored right now.
    pub fn check_full_restore(&self, model: &ModelSpec) -> Result<()> {
        let missing = model.num_layers - self.segments.num_layers_held();
        let needed = missing as u64 * model.bytes_per_layer;
        let mut probe = self.kv.clone();
        probe.resize(self.segments.kvcache_virtual_extent().saturating_sub(needed), model, self.kv.footprint_layers());
        let reclaimable = self.reclaimable_bytes();
        if probe.used_tokens() > probe.capacity_tokens() || reclaimable < needed {
            return Err(Error::RestoreBlocked {
                instance: self.id,
                needed,
                reclaimable,
            });
        }
        Ok(())
    }

    /// Starts restoring `layers` from `source`: unmaps the blocks that will
    /// receive the parameters and returns the transfer that fills them. The
    /// blocks stay unowned until [`Instance::finish_restore`].
    pub fn restore_layers(&mut self, layers: Range<u32>, source: Endpoint, model: &ModelSpec, now: Micros) -> Result<TransferTask> {
        let needed = layers.len() as u64 * model.bytes_per_layer;
        for layer in layers.clone() {
            if self.segments.holds_layer(layer) {
                return Err(Error::InvalidArgument(format!("instance {} already holds layer {layer}", self.id)));
            }
        }
        let extent_after = self.segments.kvcache_virtual_extent().saturating_sub(needed);
        let mut probe = self.kv.clone();
        probe.resize(extent_after, model, self.kv.footprint_layers());
        let reclaimable = self.reclaimable_bytes();
        if probe.used_tokens() > probe.capacity_tokens() || reclaimable < needed {
            return Err(Error::RestoreBlocked {
                instance: self.id,
                needed,
                reclaimable,
            });
        }
        let mut taken = Vec::new();
        for layer in layers.clone() {
            let i = self.segments.reclaim_candidate(layer, &taken).ok_or(Error::RestoreBlocked {
                instance: self.id,
                needed,
                reclaimable,
            })?;
            taken.push(i);
        }
        for (layer, &i) in layers.clone().zip(&taken) {
            self.segments.blocks[i].owner = BlockOwner::Free;
            self.segments.kv_map.retain(|&b| b as usize != i);
            self.segments.pending_restore.push((layer, i as u32));
        }
        self.sync_allocator(model, self.kv.footprint_layers());
        Ok(TransferTask::new(
            TransferKind::ParamShard,
            needed,
            source,
            Endpoint::Instance(self.id),
            now,
        ))
    }

    /// Marks the restored layers as resident once their transfer landed.
    pub fn finish_restore(&mut self, layers: Range<u32>, model: &ModelSpec) {
        for layer in layers {
            let pos = self
                .segments
                .pending_restore
                .iter()
                .position(|&(l, _)| l == layer)
                .expect("layer has no restore in flight");
            let (_, block) = self.segments.pending_restore.swap_remove(pos);
            self.segments.blocks[block as usize].owner = BlockOwner::ParamLayer(layer);
        }
        self.sync_allocator(model, self.kv.footprint_layers());
    }

    pub fn restore_in_flight(&self) -> bool {
        !self.segments.pending_restore.is_empty()
    }

    pub fn alloc_tokens(&mut self, request: RequestId, n_tokens: u64) -> AllocOutcome {
        self.kv.alloc(request, n_tokens)
    }
}
