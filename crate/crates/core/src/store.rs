//! Two-tier KV storage: a host pool of combined HND pages and a device
//! cache holding pinned sink pages, the recent token ring, and per-head
//! slots for recalled selectable pages.
//!
//! Token flow: every token's K/V lands in the device ring. Once a full
//! page falls wholly outside the recent window it is offloaded (transposed
//! to a combined HND page, summarized, appended to the host pool) but the
//! ring retains it until the end of the step, so the selection that first
//! saw the page is active before its device copy disappears. Recall moves
//! selected host pages back into per-head slots; only pages not already
//! resident are transferred, and slots are reclaimed from least-recently
//! used non-selected pages (ties to the lower page id).
//!
//! Byte accounting everywhere follows the configured `elem_bytes`, not the
//! in-memory `f32` width.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EngineConfig, HostLayoutMode};
use crate::layout::{
    contiguous_runs, transpose_to_hnd, ContiguousRun, HndCombinedPage, LayoutError, LayoutKind,
    NhdPage, PageGeometry, PageKind,
};
use crate::selection::{summarize_page, SelectionResult, SummaryStore};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("kv head {kv_head}: {selected} pages selected but capacity is {capacity}")]
    CapacityExceeded {
        kv_head: usize,
        selected: usize,
        capacity: usize,
    },
    #[error("host pool has no page {0}")]
    MissingHostPage(u32),
    #[error("page {page_id} not resident for kv head {kv_head}")]
    PageNotResident { kv_head: usize, page_id: u32 },
    #[error("page holds {got} tokens, store page size is {expected}")]
    PartialPage { got: usize, expected: usize },
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// Complete KV pool for one sequence: combined HND pages, dense ids.
#[derive(Debug, Default)]
pub struct HostPool {
    pages: Vec<HndCombinedPage>,
}

impl HostPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn get(&self, page_id: u32) -> Result<&HndCombinedPage, StoreError> {
        self.pages
            .get(page_id as usize)
            .ok_or(StoreError::MissingHostPage(page_id))
    }

    fn append(&mut self, page: HndCombinedPage) -> u32 {
        self.pages.push(page);
        (self.pages.len() - 1) as u32
    }
}

#[derive(Clone)]
struct TokenEntry {
    k: Box<[f32]>,
    v: Box<[f32]>,
}

#[derive(Clone)]
struct ResidentPage {
    page_id: u32,
    last_used: u64,
    keys: NhdPage,
    values: NhdPage,
}

#[derive(Clone, Default)]
struct HeadSlots {
    slots: Vec<Option<ResidentPage>>,
    by_page: BTreeMap<u32, usize>,
}

/// Selectable-slot contents per head: `(page_id, keys, values)` per slot.
pub type SlotSnapshot = Vec<Vec<Option<(u32, Vec<f32>, Vec<f32>)>>>;

/// One K/V row of the attended context, addressed by global token position.
pub struct ContextRow<'a> {
    pub position: usize,
    pub key: &'a [f32],
    pub value: &'a [f32],
}

/// Device-side cache: pinned sink pages, the retained recent-token ring,
/// and `capacity` recallable page slots per KV head.
#[derive(Clone)]
pub struct DeviceCache {
    page_size: usize,
    n_kv: usize,
    head_dim: usize,
    capacity: usize,
    sink_page_limit: usize,
    window_tokens: usize,
    sink: Vec<(NhdPage, NhdPage)>,
    ring: VecDeque<TokenEntry>,
    ring_start: usize,
    n_tokens: usize,
    n_offloaded: usize,
    heads: Vec<HeadSlots>,
}

impl DeviceCache {
    pub fn new(
        page_size: usize,
        n_kv: usize,
        head_dim: usize,
        capacity: usize,
        sink_pages: usize,
        window_tokens: usize,
    ) -> Self {
        let mut heads = Vec::with_capacity(n_kv);
        for _ in 0..n_kv {
            let mut slots = Vec::with_capacity(capacity);
            slots.resize_with(capacity, || None);
            heads.push(HeadSlots {
                slots,
                by_page: BTreeMap::new(),
            });
        }
        Self {
            page_size,
            n_kv,
            head_dim,
            capacity,
            sink_page_limit: sink_pages,
            window_tokens,
            sink: Vec::new(),
            ring: VecDeque::new(),
            ring_start: 0,
            n_tokens: 0,
            n_offloaded: 0,
            heads,
        }
    }

    pub fn from_config(cfg: &EngineConfig) -> Self {
        Self::new(
            cfg.dims.page_size,
            cfg.dims.n_kv,
            cfg.dims.d,
            cfg.selectable_pages,
            cfg.sink_pages,
            cfg.budget.window_tokens,
        )
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn ring_span(&self) -> (usize, usize) {
        (self.ring_start, self.n_tokens)
    }

    pub fn n_offloaded(&self) -> usize {
        self.n_offloaded
    }

    pub fn sink_page_count(&self) -> usize {
        self.sink.len()
    }

    /// Append one token's K/V rows (each `n_kv * head_dim`).
    pub fn append_token(&mut self, k: &[f32], v: &[f32]) {
        debug_assert_eq!(k.len(), self.n_kv * self.head_dim);
        debug_assert_eq!(v.len(), self.n_kv * self.head_dim);
        self.ring.push_back(TokenEntry {
            k: k.into(),
            v: v.into(),
        });
        self.n_tokens += 1;
    }

    /// Full pages now wholly outside the recent window and not yet on host.
    pub fn pages_due_for_offload(&self) -> std::ops::Range<usize> {
        let due_end = self.n_tokens.saturating_sub(self.window_tokens) / self.page_size;
        self.n_offloaded..due_end.max(self.n_offloaded)
    }

    /// Rebuild page `page_id` as token-major K/V pages from the ring.
    pub fn extract_page(&self, page_id: usize) -> (NhdPage, NhdPage) {
        let mut k_page = NhdPage::new(PageKind::Key, self.page_size, self.n_kv, self.head_dim);
        let mut v_page = NhdPage::new(PageKind::Value, self.page_size, self.n_kv, self.head_dim);
        for t in 0..self.page_size {
            let pos = page_id * self.page_size + t;
            let entry = &self.ring[pos - self.ring_start];
            for h in 0..self.n_kv {
                let d = self.head_dim;
                k_page
                    .token_head_row_mut(t, h)
                    .copy_from_slice(&entry.k[h * d..(h + 1) * d]);
                v_page
                    .token_head_row_mut(t, h)
                    .copy_from_slice(&entry.v[h * d..(h + 1) * d]);
            }
        }
        (k_page, v_page)
    }

    fn note_offloaded(&mut self, page_id: u32, k_page: &NhdPage, v_page: &NhdPage) {
        debug_assert_eq!(page_id as usize, self.n_offloaded);
        if (page_id as usize) < self.sink_page_limit {
            self.sink.push((k_page.clone(), v_page.clone()));
        }
        self.n_offloaded += 1;
    }

    /// Drop offloaded pages from the ring. Called at the end of a decode
    /// step so the step that offloaded a page still attends to it from the
    /// ring while the selection that first saw it takes over next step.
    pub fn release_offloaded(&mut self) {
        while self.ring_start < self.n_offloaded * self.page_size {
            self.ring.pop_front();
            self.ring_start += 1;
        }
    }

    pub fn resident_pages(&self, kv_head: usize) -> Vec<u32> {
        self.heads[kv_head].by_page.keys().copied().collect()
    }

    pub fn resident_count(&self, kv_head: usize) -> usize {
        self.heads[kv_head].by_page.len()
    }

    fn evict(&mut self, kv_head: usize, page_id: u32) {
        let head = &mut self.heads[kv_head];
        if let Some(slot) = head.by_page.remove(&page_id) {
            head.slots[slot] = None;
        }
    }

    fn install(
        &mut self,
        kv_head: usize,
        slot: usize,
        page_id: u32,
        k_data: Vec<f32>,
        v_data: Vec<f32>,
        tick: u64,
    ) {
        let keys = NhdPage::from_data(PageKind::Key, self.page_size, 1, self.head_dim, k_data)
            .expect("slot key block sized by planner");
        let values = NhdPage::from_data(PageKind::Value, self.page_size, 1, self.head_dim, v_data)
            .expect("slot value block sized by planner");
        let head = &mut self.heads[kv_head];
        if let Some(old) = head.slots[slot].take() {
            head.by_page.remove(&old.page_id);
        }
        head.by_page.insert(page_id, slot);
        head.slots[slot] = Some(ResidentPage {
            page_id,
            last_used: tick,
            keys,
            values,
        });
    }

    /// Mark the pages a head consumed this step, for LRU eviction.
    pub fn touch(&mut self, kv_head: usize, pages: &[u32], tick: u64) {
        let head = &mut self.heads[kv_head];
        for pid in pages {
            if let Some(&slot) = head.by_page.get(pid) {
                if let Some(res) = head.slots[slot].as_mut() {
                    res.last_used = tick;
                }
            }
        }
    }

    /// The token set one KV head attends to: sink pages, the selected
    /// pages, and the retained ring, deduplicated by position.
    pub fn gather_context(
        &self,
        kv_head: usize,
        pages: &[u32],
    ) -> Result<Vec<ContextRow<'_>>, StoreError> {
        let d = self.head_dim;
        let p = self.page_size;
        let mut map: BTreeMap<usize, (&[f32], &[f32])> = BTreeMap::new();
        for (pid, (k_page, v_page)) in self.sink.iter().enumerate() {
            for t in 0..p {
                map.insert(
                    pid * p + t,
                    (
                        k_page.token_head_row(t, kv_head),
                        v_page.token_head_row(t, kv_head),
                    ),
                );
            }
        }
        for &pid in pages {
            let base = pid as usize * p;
            if base >= self.ring_start {
                // still retained in the ring; rows inserted below
                continue;
            }
            let head = &self.heads[kv_head];
            let &slot = head
                .by_page
                .get(&pid)
                .ok_or(StoreError::PageNotResident { kv_head, page_id: pid })?;
            let res = head.slots[slot]
                .as_ref()
                .expect("residency index points at a filled slot");
            for t in 0..p {
                map.insert(
                    base + t,
                    (res.keys.token_head_row(t, 0), res.values.token_head_row(t, 0)),
                );
            }
        }
        for (i, entry) in self.ring.iter().enumerate() {
            map.insert(
                self.ring_start + i,
                (
                    &entry.k[kv_head * d..(kv_head + 1) * d],
                    &entry.v[kv_head * d..(kv_head + 1) * d],
                ),
            );
        }
        Ok(map
            .into_iter()
            .map(|(position, (key, value))| ContextRow {
                position,
                key,
                value,
            })
            .collect())
    }

    /// Selectable-slot contents per head, for equivalence checks.
    pub fn snapshot_selectable(&self) -> SlotSnapshot {
        self.heads
            .iter()
            .map(|h| {
                h.slots
                    .iter()
                    .map(|s| {
                        s.as_ref().map(|r| {
                            (r.page_id, r.keys.data().to_vec(), r.values.data().to_vec())
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

/// Every token's K/V rows for one head across both tiers, positions
/// ascending. Used by the uncompressed full-attention path.
pub fn gather_all_rows<'a>(
    host: &'a HostPool,
    cache: &'a DeviceCache,
    kv_head: usize,
) -> Vec<ContextRow<'a>> {
    let p = cache.page_size;
    let d = cache.head_dim;
    let mut rows = Vec::with_capacity(cache.n_tokens);
    for pid in 0..cache.ring_start / p {
        let block = host.pages[pid].head_block(kv_head);
        for t in 0..p {
            rows.push(ContextRow {
                position: pid * p + t,
                key: &block[t * d..(t + 1) * d],
                value: &block[(p + t) * d..(p + t + 1) * d],
            });
        }
    }
    for (i, entry) in cache.ring.iter().enumerate() {
        rows.push(ContextRow {
            position: cache.ring_start + i,
            key: &entry.k[kv_head * d..(kv_head + 1) * d],
            value: &entry.v[kv_head * d..(kv_head + 1) * d],
        });
    }
    rows
}

/// Transpose a full page to the combined host layout, record its summary,
/// and append it to the pool. Sink pages are additionally pinned on device.
pub fn offload_full_page(
    host: &mut HostPool,
    cache: &mut DeviceCache,
    summaries: &mut SummaryStore,
    k_page: &NhdPage,
    v_page: &NhdPage,
) -> Result<u32, StoreError> {
    if k_page.page_size != cache.page_size {
        return Err(StoreError::PartialPage {
            got: k_page.page_size,
            expected: cache.page_size,
        });
    }
    summaries.push(summarize_page(k_page));
    let combined = transpose_to_hnd(k_page, v_page)?;
    let page_id = host.append(combined);
    cache.note_offloaded(page_id, k_page, v_page);
    debug_assert_eq!(host.len(), summaries.len());
    debug_assert_eq!(host.len(), cache.n_offloaded);
    Ok(page_id)
}

/// One planned page fetch: destination slot and the modeled transfer runs.
#[derive(Debug, Clone)]
pub struct PlannedFetch {
    pub page_id: u32,
    pub dest_slot: usize,
    pub runs: Vec<ContiguousRun>,
}

#[derive(Debug, Clone)]
pub struct HeadPlan {
    pub kv_head: usize,
    pub fetches: Vec<PlannedFetch>,
    pub evict: Vec<u32>,
    pub reused: u64,
}

/// Delta recall plan: per head, the non-resident selected pages to fetch
/// and the slots reclaimed for them.
#[derive(Debug, Clone)]
pub struct TransferPlan {
    pub geom: PageGeometry,
    pub host_layout: HostLayoutMode,
    pub heads: Vec<HeadPlan>,
}

impl TransferPlan {
    pub fn empty(geom: PageGeometry, host_layout: HostLayoutMode) -> Self {
        Self {
            geom,
            host_layout,
            heads: Vec::new(),
        }
    }

    pub fn total_fetches(&self) -> u64 {
        self.heads.iter().map(|h| h.fetches.len() as u64).sum()
    }

    pub fn total_copy_ops(&self) -> u64 {
        self.heads
            .iter()
            .flat_map(|h| &h.fetches)
            .map(|f| f.runs.len() as u64)
            .sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.heads
            .iter()
            .flat_map(|h| &h.fetches)
            .flat_map(|f| &f.runs)
            .map(|r| r.byte_len as u64)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.iter().all(|h| h.fetches.is_empty())
    }
}

/// Executed-transfer tallies. `bytes_moved` is the sum of executed run
/// lengths under `elem_bytes` accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferStats {
    pub copy_ops: u64,
    pub bytes_moved: u64,
    pub pages_fetched: u64,
    pub pages_reused: u64,
}

impl TransferStats {
    pub fn merge(&mut self, other: &TransferStats) {
        self.copy_ops += other.copy_ops;
        self.bytes_moved += other.bytes_moved;
        self.pages_fetched += other.pages_fetched;
        self.pages_reused += other.pages_reused;
    }
}

fn runs_for_fetch(geom: &PageGeometry, layout: HostLayoutMode, kv_head: usize) -> Vec<ContiguousRun> {
    match layout {
        HostLayoutMode::Hnd => contiguous_runs(LayoutKind::HndCombined, geom, kv_head),
        HostLayoutMode::Nhd => {
            // K page runs then V page runs; offsets are page-local.
            let mut runs = contiguous_runs(LayoutKind::Nhd, geom, kv_head);
            runs.extend(contiguous_runs(LayoutKind::Nhd, geom, kv_head));
            runs
        }
    }
}

/// Plan the delta recall for `selection`. Heads outside `head_mask` (when
/// given) are skipped. Fetches cover exactly the selected pages not
/// resident; slots come from free slots first, then from evicting
/// least-recently-used non-selected residents (ties to lower page id).
pub fn plan_recall(
    selection: &SelectionResult,
    cache: &DeviceCache,
    geom: &PageGeometry,
    host_layout: HostLayoutMode,
    head_mask: Option<&[bool]>,
) -> Result<TransferPlan, StoreError> {
    let mut plan = TransferPlan::empty(*geom, host_layout);
    for (m, selected) in selection.per_kv_head.iter().enumerate() {
        if let Some(mask) = head_mask {
            if !mask[m] {
                continue;
            }
        }
        if selected.len() > cache.capacity {
            return Err(StoreError::CapacityExceeded {
                kv_head: m,
                selected: selected.len(),
                capacity: cache.capacity,
            });
        }
        let head = &cache.heads[m];
        let fetch_ids: Vec<u32> = selected
            .iter()
            .copied()
            .filter(|pid| !head.by_page.contains_key(pid))
            .collect();
        let reused = (selected.len() - fetch_ids.len()) as u64;
        let mut free_slots: Vec<usize> = head
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(i, _)| i)
            .collect();
        free_slots.reverse(); // pop() hands out the lowest slot first
        let mut evictable: Vec<(u64, u32, usize)> = head
            .slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|r| (i, r)))
            .filter(|(_, r)| !selected.contains(&r.page_id))
            .map(|(i, r)| (r.last_used, r.page_id, i))
            .collect();
        evictable.sort_unstable();
        let mut evict = Vec::new();
        let mut fetches = Vec::new();
        let mut evict_iter = evictable.into_iter();
        for pid in fetch_ids {
            let dest_slot = if let Some(slot) = free_slots.pop() {
                slot
            } else {
                let (_, evicted_page, slot) = evict_iter
                    .next()
                    .expect("capacity check guarantees an evictable slot");
                evict.push(evicted_page);
                slot
            };
            fetches.push(PlannedFetch {
                page_id: pid,
                dest_slot,
                runs: runs_for_fetch(geom, host_layout, m),
            });
        }
        plan.heads.push(HeadPlan {
            kv_head: m,
            fetches,
            evict,
            reused,
        });
    }
    Ok(plan)
}

/// Owns the two staging buffers and executes recall plans, either strictly
/// in order or as a double-buffered transfer/convert pipeline.
pub struct TransferAgent {
    staging: [Vec<f32>; 2],
}

impl TransferAgent {
    pub fn new() -> Self {
        Self {
            staging: [Vec::new(), Vec::new()],
        }
    }

    fn ensure_staging(&mut self, elems: usize) {
        for buf in &mut self.staging {
            if buf.len() != elems {
                buf.resize(elems, 0.0)
            }
        }
    }

    /// Copy + convert each fetched page strictly in order through one
    /// staging buffer.
    pub fn execute_sequential(
        &mut self,
        plan: &TransferPlan,
        host: &HostPool,
        cache: &mut DeviceCache,
        tick: u64,
    ) -> Result<TransferStats, StoreError> {
        validate_plan(plan, host)?;
        let mut stats = apply_evictions(plan, cache);
        let elems = plan.geom.head_block_elems();
        self.ensure_staging(elems);
        let eb = plan.geom.elem_bytes;
        let kv_elems = plan.geom.page_size * plan.geom.head_dim;
        for head_plan in &plan.heads {
            for fetch in &head_plan.fetches {
                let block = host.pages[fetch.page_id as usize].head_block(head_plan.kv_head);
                let buf = &mut self.staging[0];
                fill_staging(buf, block, &fetch.runs, eb, &mut stats);
                cache.install(
                    head_plan.kv_head,
                    fetch.dest_slot,
                    fetch.page_id,
                    buf[..kv_elems].to_vec(),
                    buf[kv_elems..].to_vec(),
                    tick,
                );
                stats.pages_fetched += 1;
            }
        }
        Ok(stats)
    }

    /// Double-buffered pipeline: while page `n` converts out of one staging
    /// buffer, page `n + 1` transfers into the other. Final cache contents
    /// are byte-identical to [`Self::execute_sequential`].
    pub fn execute_streamed(
        &mut self,
        plan: &TransferPlan,
        host: &HostPool,
        cache: &mut DeviceCache,
        tick: u64,
    ) -> Result<TransferStats, StoreError> {
        validate_plan(plan, host)?;
        let mut stats = apply_evictions(plan, cache);
        let fetches: Vec<(usize, &PlannedFetch)> = plan
            .heads
            .iter()
            .flat_map(|h| h.fetches.iter().map(move |f| (h.kv_head, f)))
            .collect();
        if fetches.is_empty() {
            return Ok(stats);
        }
        let elems = plan.geom.head_block_elems();
        self.ensure_staging(elems);
        let eb = plan.geom.elem_bytes;
        let kv_elems = plan.geom.page_size * plan.geom.head_dim;

        let (filled_tx, filled_rx) = mpsc::channel::<(Vec<f32>, usize, TransferStats)>();
        let (free_tx, free_rx) = mpsc::channel::<Vec<f32>>();
        let buf_a = std::mem::take(&mut self.staging[0]);
        let buf_b = std::mem::take(&mut self.staging[1]);
        let seeds = fetches.len().min(2);
        let mut kept: Vec<Vec<f32>> = Vec::with_capacity(2);
        for (i, buf) in [buf_a, buf_b].into_iter().enumerate() {
            if i < seeds {
                free_tx.send(buf).expect("receiver alive");
            } else {
                kept.push(buf);
            }
        }
        let fetch_list = &fetches;
        std::thread::scope(|scope| {
            scope.spawn(move || {
                for (idx, (kv_head, fetch)) in fetch_list.iter().enumerate() {
                    let Ok(mut buf) = free_rx.recv() else { return };
                    let block = host.pages[fetch.page_id as usize].head_block(*kv_head);
                    let mut tally = TransferStats::default();
                    fill_staging(&mut buf, block, &fetch.runs, eb, &mut tally);
                    if filled_tx.send((buf, idx, tally)).is_err() {
                        return;
                    }
                }
            });
            let mut returns_left = fetch_list.len() - seeds;
            for _ in 0..fetch_list.len() {
                let (buf, idx, tally) = filled_rx
                    .recv()
                    .expect("transfer side hung up mid-pipeline");
                let (kv_head, fetch) = fetch_list[idx];
                cache.install(
                    kv_head,
                    fetch.dest_slot,
                    fetch.page_id,
                    buf[..kv_elems].to_vec(),
                    buf[kv_elems..].to_vec(),
                    tick,
                );
                stats.merge(&tally);
                stats.pages_fetched += 1;
                if returns_left > 0 {
                    free_tx.send(buf).expect("transfer side still receiving");
                    returns_left -= 1;
                } else {
                    kept.push(buf);
                }
            }
        });
        debug_assert_eq!(kept.len(), 2);
        self.staging[1] = kept.pop().unwrap_or_default();
        self.staging[0] = kept.pop().unwrap_or_default();
        Ok(stats)
    }
}

impl Default for TransferAgent {
    fn default() -> Self {
        Self::new()
    }
}

fn validate_plan(plan: &TransferPlan, host: &HostPool) -> Result<(), StoreError> {
    for head_plan in &plan.heads {
        for fetch in &head_plan.fetches {
            if fetch.page_id as usize >= host.len() {
                return Err(StoreError::MissingHostPage(fetch.page_id));
            }
        }
    }
    Ok(())
}

fn apply_evictions(plan: &TransferPlan, cache: &mut DeviceCache) -> TransferStats {
    let mut stats = TransferStats::default();
    for head_plan in &plan.heads {
        for &pid in &head_plan.evict {
            cache.evict(head_plan.kv_head, pid);
        }
        stats.pages_reused += head_plan.reused;
    }
    stats
}

/// Copy one head block into staging, one modeled run at a time. Run order
/// matches the head-block element order, so the staging offset is the
/// running sum of run lengths.
fn fill_staging(
    buf: &mut [f32],
    block: &[f32],
    runs: &[ContiguousRun],
    elem_bytes: usize,
    stats: &mut TransferStats,
) {
    let mut off = 0usize;
    for run in runs {
        let n = run.byte_len / elem_bytes;
        buf[off..off + n].copy_from_slice(&block[off..off + n]);
        off += n;
        stats.copy_ops += 1;
        stats.bytes_moved += run.byte_len as u64;
    }
    debug_assert_eq!(off, block.len());
}
