//! KV-cache memory accounting and a rollback-aware paging model.
//!
//! All byte arithmetic is exact `u64`; KiB and MiB are binary (2¹⁰, 2²⁰).

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{config_err, input_err, Error, Result};

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryConfig {
    pub d_model: u64,
    pub n_heads: u64,
    pub d_head: u64,
    pub n_layers: u64,
    /// Bytes per element (2 for FP16).
    pub bytes_per_elem: u64,
    pub n_kv_self: u64,
    pub n_kv_bus: u64,
    pub n_streams: u64,
    pub tokens_per_stream: Vec<u64>,
    /// `ℓ_bus`
    pub bus_tokens: u64,
    /// Layers carrying bus cross-attention (`d_×`).
    pub cross_layers: u64,
    pub weights_bytes: u64,
    pub workspace_bytes: u64,
    pub gpu_budget_bytes: u64,
    pub reserve_bytes: u64,
}

impl MemoryConfig {
    /// The 4096-wide, 32-layer, three-stream FP16 configuration with the
    /// given number of self-attention KV heads (1 for MQA, 8 for GQA).
    pub fn worked_example(n_kv_self: u64) -> Self {
        Self {
            d_model: 4096,
            n_heads: 32,
            d_head: 128,
            n_layers: 32,
            bytes_per_elem: 2,
            n_kv_self,
            n_kv_bus: 1,
            n_streams: 3,
            tokens_per_stream: vec![2048; 3],
            bus_tokens: 2560,
            cross_layers: 8,
            weights_bytes: 0,
            workspace_bytes: 0,
            gpu_budget_bytes: 180 * GIB,
            reserve_bytes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_head == 0 || self.d_model == 0 {
            return Err(config_err("d_model, n_heads and d_head must be positive"));
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(config_err(alloc::format!(
                "d_head x n_heads = {} but d_model = {}",
                self.d_head * self.n_heads,
                self.d_model
            )));
        }
        if self.n_layers == 0 || self.bytes_per_elem == 0 || self.n_streams == 0 {
            return Err(config_err("n_layers, bytes_per_elem and n_streams must be positive"));
        }
        if self.tokens_per_stream.len() as u64 != self.n_streams {
            return Err(config_err(alloc::format!(
                "tokens_per_stream has {} entries for {} streams",
                self.tokens_per_stream.len(),
                self.n_streams
            )));
        }
        if self.cross_layers > self.n_layers {
            return Err(config_err("cross_layers cannot exceed n_layers"));
        }
        Ok(())
    }

    /// Pages that fit on device: `min(m_peak, budget − weights − reserve) / page_bytes`.
    pub fn resident_page_capacity(&self, m_peak: u64, page_bytes: u64) -> u64 {
        let room = self
            .gpu_budget_bytes
            .saturating_sub(self.weights_bytes)
            .saturating_sub(self.reserve_bytes);
        m_peak.min(room) / page_bytes.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvBudget {
    pub per_token_per_layer: u64,
    pub per_token_all_layers: u64,
    pub surface_total: u64,
    pub bus_total: u64,
    pub grand_total: u64,
}

pub fn kv_budget(cfg: &MemoryConfig) -> KvBudget {
    let per_token_per_layer = 2 * cfg.n_kv_self * cfg.d_head * cfg.bytes_per_elem;
    let per_token_all_layers = per_token_per_layer * cfg.n_layers;
    let surface_total = per_token_all_layers * cfg.tokens_per_stream.iter().sum::<u64>();
    let bus_total = 2 * cfg.n_kv_bus * cfg.d_head * cfg.bytes_per_elem * cfg.cross_layers * cfg.bus_tokens;
    KvBudget {
        per_token_per_layer,
        per_token_all_layers,
        surface_total,
        bus_total,
        grand_total: surface_total + bus_total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PressureVerdict {
    Ok,
    Warn,
    Oom,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressureReport {
    pub verdict: PressureVerdict,
    /// `m_peak / (budget − weights)`.
    pub utilization: f64,
    /// Inside the 70–85% target band.
    pub in_target_band: bool,
}

pub const TARGET_LOW: f64 = 0.70;
pub const TARGET_HIGH: f64 = 0.85;

/// OOM iff `m_peak + weights + workspace > budget`; warn when `m_peak` is
/// above 85% of what remains after weights.
pub fn pressure_check(cfg: &MemoryConfig, m_peak: u64) -> PressureReport {
    let demand = m_peak as u128 + cfg.weights_bytes as u128 + cfg.workspace_bytes as u128;
    let oom = demand > cfg.gpu_budget_bytes as u128;
    let remaining = cfg.gpu_budget_bytes.saturating_sub(cfg.weights_bytes);
    let utilization = if remaining == 0 {
        f64::INFINITY
    } else {
        m_peak as f64 / remaining as f64
    };
    let verdict = if oom {
        PressureVerdict::Oom
    } else if utilization > TARGET_HIGH {
        PressureVerdict::Warn
    } else {
        PressureVerdict::Ok
    };
    PressureReport {
        verdict,
        utilization,
        in_target_band: (TARGET_LOW..=TARGET_HIGH).contains(&utilization),
    }
}

// ---------------------------------------------------------------------------
// Paging
// ---------------------------------------------------------------------------

pub type PageId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageState {
    Resident,
    Evicted,
    Pinned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Stream(usize),
    Bus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub id: PageId,
    pub pool: Pool,
    pub first_token: usize,
    /// Tokens stored (≤ page size).
    pub len: usize,
    pub state: PageState,
    pub last_read: u64,
}

impl Page {
    pub fn tokens(&self) -> Range<usize> {
        self.first_token..self.first_token + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementPolicy {
    /// Open a fresh page at a commit point whenever packing into the tail
    /// page would spread the next `L` tokens over more than `⌈L/B_page⌉` pages.
    Aligned,
    /// Always pack into the tail page.
    Naive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub page: PageId,
    pub tokens: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictionPolicy {
    /// Pin bus pages so they are never evicted.
    pub pin_bus: bool,
}

/// Pages the next step will read.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Demand {
    /// Pages covering the next stride of each stream.
    pub next_stride: Vec<PageId>,
    /// Pages of the Δ-lagged bus snapshot.
    pub lagged_snapshot: Vec<PageId>,
    /// Fresh pages about to be allocated.
    pub new_pages: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SwapCost {
    pub eviction: f64,
    pub prefetch: f64,
}

impl SwapCost {
    pub fn total(&self) -> f64 {
        self.eviction + self.prefetch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvictionReport {
    pub evicted: Vec<PageId>,
    pub prefetched: Vec<PageId>,
    pub swap_cost: SwapCost,
}

#[derive(Debug, Clone)]
pub struct PageTable {
    page_size: usize,
    pages: Vec<Option<Page>>,
    streams: Vec<Vec<PageId>>,
    bus: Vec<PageId>,
    clock: u64,
}

impl PageTable {
    pub fn new(page_size: usize, n_streams: usize) -> Result<Self> {
        if page_size == 0 {
            return Err(config_err("page size must be positive"));
        }
        Ok(Self {
            page_size,
            pages: Vec::new(),
            streams: vec![Vec::new(); n_streams],
            bus: Vec::new(),
            clock: 0,
        })
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn page(&self, id: PageId) -> Option<&Page> {
        self.pages.get(id).and_then(Option::as_ref)
    }

    pub fn stream_pages(&self, stream: usize) -> impl Iterator<Item = &Page> {
        self.streams[stream].iter().filter_map(|&id| self.page(id))
    }

    pub fn bus_pages(&self) -> &[PageId] {
        &self.bus
    }

    pub fn live_pages(&self) -> impl Iterator<Item = &Page> {
        self.pages.iter().flatten()
    }

    pub fn resident_count(&self) -> usize {
        self.live_pages().filter(|p| p.state != PageState::Evicted).count()
    }

    /// One past the last token stored for `stream`.
    pub fn next_token(&self, stream: usize) -> usize {
        self.streams[stream]
            .last()
            .and_then(|&id| self.page(id))
            .map_or(0, |p| p.first_token + p.len)
    }

    fn alloc(&mut self, pool: Pool, first_token: usize) -> PageId {
        self.clock += 1;
        let id = self.pages.len();
        self.pages.push(Some(Page {
            id,
            pool,
            first_token,
            len: 0,
            state: PageState::Resident,
            last_read: self.clock,
        }));
        id
    }

    fn check_stream(&self, stream: usize) -> Result<()> {
        if stream >= self.streams.len() {
            return Err(input_err(alloc::format!("no page pool for stream {stream}")));
        }
        Ok(())
    }

    /// Place `tokens` (which must start at the stream's next token, a commit
    /// point) into the stream's pool.
    pub fn page_place(
        &mut self,
        stream: usize,
        tokens: Range<usize>,
        horizon: usize,
        policy: PlacementPolicy,
    ) -> Result<Vec<Placement>> {
        self.check_stream(stream)?;
        let next = self.next_token(stream);
        if tokens.start != next {
            return Err(input_err(alloc::format!(
                "placement must continue at token {next}, got {}",
                tokens.start
            )));
        }
        let b = self.page_size;
        let room = match self.streams[stream].last().and_then(|&id| self.page(id)) {
            Some(p) => b - p.len,
            None => 0,
        };
        let mut fresh_first = room == 0;
        if policy == PlacementPolicy::Aligned && room > 0 && horizon > 0 {
            let packed = 1 + horizon.saturating_sub(room).div_ceil(b);
            if packed > horizon.div_ceil(b) {
                fresh_first = true;
            }
        }

        let mut out = Vec::new();
        let mut t = tokens.start;
        while t < tokens.end {
            let tail = self.streams[stream].last().copied();
            let id = match tail {
                Some(id) if !fresh_first && self.pages[id].as_ref().unwrap().len < b => id,
                _ => {
                    let id = self.alloc(Pool::Stream(stream), t);
                    self.streams[stream].push(id);
                    id
                }
            };
            fresh_first = false;
            let page = self.pages[id].as_mut().unwrap();
            let take = (b - page.len).min(tokens.end - t);
            page.len += take;
            out.push(Placement {
                page: id,
                tokens: t..t + take,
            });
            t += take;
        }
        Ok(out)
    }

    /// Allocate bus snapshot pages for `tokens` bus rows.
    pub fn place_bus(&mut self, tokens: usize) -> Vec<PageId> {
        let mut out = Vec::new();
        let mut left = tokens;
        let mut first = self.bus.len() * self.page_size;
        while left > 0 {
            let id = self.alloc(Pool::Bus, first);
            let take = left.min(self.page_size);
            self.pages[id].as_mut().unwrap().len = take;
            self.bus.push(id);
            out.push(id);
            left -= take;
            first += take;
        }
        out
    }

    /// Number of the stream's pages holding any of `window`.
    pub fn pages_overlapping(&self, stream: usize, window: Range<usize>) -> usize {
        self.stream_pages(stream)
            .filter(|p| p.len > 0 && p.first_token < window.end && window.start < p.first_token + p.len)
            .count()
    }

    /// Pages invalidated if the trailing `span` tokens of `stream` are rolled back.
    pub fn rollback_page_cost(&self, stream: usize, span: usize, horizon: usize) -> Result<usize> {
        self.check_stream(stream)?;
        if span > horizon {
            return Err(Error::HorizonExceeded { span, horizon });
        }
        let end = self.next_token(stream);
        Ok(self.pages_overlapping(stream, end.saturating_sub(span)..end))
    }

    /// Drop every token of `stream` at or after `from`. Returns the number of
    /// pages touched (freed or truncated).
    pub fn rollback(&mut self, stream: usize, from: usize) -> Result<usize> {
        self.check_stream(stream)?;
        let mut touched = 0;
        let mut kept = Vec::with_capacity(self.streams[stream].len());
        for &id in &self.streams[stream] {
            let page = self.pages[id].as_mut().unwrap();
            let end = page.first_token + page.len;
            if end <= from {
                kept.push(id);
            } else if page.first_token >= from {
                touched += 1;
                self.pages[id] = None;
            } else {
                touched += 1;
                page.len = from - page.first_token;
                kept.push(id);
            }
        }
        self.streams[stream] = kept;
        Ok(touched)
    }

    /// Mark pages as read now.
    pub fn touch(&mut self, ids: &[PageId]) {
        self.clock += 1;
        for &id in ids {
            if let Some(p) = self.pages.get_mut(id).and_then(Option::as_mut) {
                p.last_read = self.clock;
            }
        }
    }

    /// Make the demanded pages resident within `capacity` resident pages,
    /// evicting least-recently-read unpinned pages as needed.
    ///
    /// On error nothing is changed.
    pub fn evict_and_prefetch(
        &mut self,
        demand: &Demand,
        policy: EvictionPolicy,
        capacity: usize,
        t_page: f64,
    ) -> Result<EvictionReport> {
        let mut want: Vec<PageId> = demand
            .next_stride
            .iter()
            .chain(&demand.lagged_snapshot)
            .copied()
            .filter(|&id| self.page(id).is_some())
            .collect();
        if policy.pin_bus {
            want.extend(self.bus.iter().copied());
        }
        want.sort_unstable();
        want.dedup();

        let prefetch: Vec<PageId> = want
            .iter()
            .copied()
            .filter(|&id| self.page(id).unwrap().state == PageState::Evicted)
            .collect();
        let mut resident = self.resident_count() + prefetch.len() + demand.new_pages;

        let mut candidates: Vec<&Page> = self
            .live_pages()
            .filter(|p| p.state == PageState::Resident)
            .filter(|p| !(policy.pin_bus && p.pool == Pool::Bus))
            .filter(|p| want.binary_search(&p.id).is_err())
            .collect();
        candidates.sort_by_key(|p| (p.last_read, p.id));

        let mut evicted = Vec::new();
        let mut it = candidates.into_iter();
        while resident > capacity {
            match it.next() {
                Some(p) => {
                    evicted.push(p.id);
                    resident -= 1;
                }
                None => {
                    return Err(Error::Capacity {
                        needed: resident,
                        available: capacity,
                    })
                }
            }
        }

        for &id in &evicted {
            self.pages[id].as_mut().unwrap().state = PageState::Evicted;
        }
        for &id in &prefetch {
            self.pages[id].as_mut().unwrap().state = PageState::Resident;
        }
        if policy.pin_bus {
            for &id in &self.bus {
                self.pages[id].as_mut().unwrap().state = PageState::Pinned;
            }
        }
        self.touch(&want);
        Ok(EvictionReport {
            swap_cost: SwapCost {
                eviction: evicted.len() as f64 * t_page,
                prefetch: prefetch.len() as f64 * t_page,
            },
            evicted,
            prefetched: prefetch,
        })
    }
}

/// Replays append/commit/rollback traffic against a [`PageTable`].
#[derive(Debug, Clone)]
pub struct PagingSimulator {
    pub table: PageTable,
    pub horizon: usize,
    pub policy: PlacementPolicy,
    committed: Vec<usize>,
}

impl PagingSimulator {
    pub fn new(page_size: usize, horizon: usize, n_streams: usize, policy: PlacementPolicy) -> Result<Self> {
        Ok(Self {
            table: PageTable::new(page_size, n_streams)?,
            horizon,
            policy,
            committed: vec![0; n_streams],
        })
    }

    /// Append `n` speculative tokens after the last commit.
    pub fn append(&mut self, stream: usize, n: usize) -> Result<Vec<Placement>> {
        let start = self.table.next_token(stream);
        if start + n - self.committed[stream] > self.horizon {
            return Err(Error::HorizonExceeded {
                span: start + n - self.committed[stream],
                horizon: self.horizon,
            });
        }
        // alignment decisions only happen at commit points
        let policy = if start == self.committed[stream] {
            self.policy
        } else {
            PlacementPolicy::Naive
        };
        self.table.page_place(stream, start..start + n, self.horizon, policy)
    }

    pub fn commit(&mut self, stream: usize) {
        self.committed[stream] = self.table.next_token(stream);
    }

    /// Roll back to the last commit; returns pages dropped.
    pub fn rollback(&mut self, stream: usize) -> Result<usize> {
        self.table.rollback(stream, self.committed[stream])
    }
}
