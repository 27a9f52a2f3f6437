//! Address translation for the CPU and the PIM logic.
//!
//! Both sides share one virtual-to-physical mapping ([`PageMap`]) but walk
//! separate structures: the CPU always walks a conventional four-level
//! table, while PIM logic may walk either the same kind of table or a flat
//! region table that only covers declared PIM regions (two accesses per
//! walk: region entry, then flat map slot). CPU and PIM TLBs are
//! independent and never kept coherent with each other.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::PhysAddr;
use crate::trace::{Region, VirtAddr};

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
/// Virtual addresses reachable through four 9-bit levels.
pub const CONVENTIONAL_VA_BITS: u32 = PAGE_SHIFT + 4 * 9;
const FRAME_BITS: u32 = 52;
const FRAME_MASK: u64 = (1 << FRAME_BITS) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageTableMode {
    Conventional4Level,
    RegionBased,
}

impl PageTableMode {
    /// Memory accesses performed by one walk after a TLB miss.
    pub fn walk_accesses(self) -> u64 {
        match self {
            PageTableMode::Conventional4Level => 4,
            PageTableMode::RegionBased => 2,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum XlatError {
    #[error("address {vaddr:#x} outside address space of {space:#x} bytes")]
    OutOfSpace { vaddr: VirtAddr, space: u64 },
    #[error("translation fault: {vaddr:#x} is not inside any PIM region")]
    Fault { vaddr: VirtAddr },
    #[error("region [{base:#x}, {bound:#x}) overlaps an existing region")]
    Overlap { base: VirtAddr, bound: VirtAddr },
    #[error("region [{base:#x}, {bound:#x}) is empty or not page aligned")]
    Unaligned { base: VirtAddr, bound: VirtAddr },
}

/// Seeded bijection from virtual page numbers to physical frame numbers:
/// an odd-multiplier affine map modulo 2^52.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageMap {
    mul: u64,
    add: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl PageMap {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            mul: splitmix64(seed) | 1,
            add: splitmix64(seed ^ 0xa5a5_a5a5_a5a5_a5a5),
        }
    }

    pub fn frame(&self, vpn: u64) -> u64 {
        vpn.wrapping_mul(self.mul).wrapping_add(self.add) & FRAME_MASK
    }
}

/// Fully associative TLB with FIFO replacement.
#[derive(Debug, Clone)]
pub struct Tlb {
    capacity: usize,
    entries: HashMap<u64, u64>,
    order: VecDeque<u64>,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "TLB needs at least one entry");
        Self {
            capacity,
            entries: HashMap::with_capacity(capacity),
            order: VecDeque::with_capacity(capacity),
        }
    }

    pub fn lookup(&self, vpn: u64) -> Option<u64> {
        self.entries.get(&vpn).copied()
    }

    pub fn insert(&mut self, vpn: u64, pfn: u64) {
        if self.entries.contains_key(&vpn) {
            return;
        }
        if self.entries.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
        self.entries.insert(vpn, pfn);
        self.order.push_back(vpn);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionEntry {
    pub region_base: VirtAddr,
    pub region_bound: VirtAddr,
    /// One frame number per page of the region.
    pub flat_map: Vec<u64>,
}

/// Flat page table covering only PIM regions.
#[derive(Debug, Clone, Default)]
pub struct RegionTable {
    entries: Vec<RegionEntry>,
}

impl RegionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `[base, bound)` with a fresh mapping derived from
    /// `mapping_seed`.
    pub fn register_region(
        &mut self,
        base: VirtAddr,
        bound: VirtAddr,
        mapping_seed: u64,
    ) -> Result<&RegionEntry, XlatError> {
        self.register_with(base, bound, &PageMap::from_seed(mapping_seed))
    }

    /// Registers `[base, bound)` using an existing mapping, so the flat map
    /// agrees with other walkers built from the same map.
    pub fn register_with(
        &mut self,
        base: VirtAddr,
        bound: VirtAddr,
        map: &PageMap,
    ) -> Result<&RegionEntry, XlatError> {
        if base >= bound || !base.is_multiple_of(PAGE_SIZE) || !bound.is_multiple_of(PAGE_SIZE) {
            return Err(XlatError::Unaligned { base, bound });
        }
        if self
            .entries
            .iter()
            .any(|e| base < e.region_bound && e.region_base < bound)
        {
            return Err(XlatError::Overlap { base, bound });
        }
        let first = base >> PAGE_SHIFT;
        let flat_map = (first..bound >> PAGE_SHIFT).map(|vpn| map.frame(vpn)).collect();
        self.entries.push(RegionEntry {
            region_base: base,
            region_bound: bound,
            flat_map,
        });
        Ok(self.entries.last().unwrap())
    }

    /// Frame of the page holding `vaddr`: one access to find the region
    /// entry, one to read its flat map.
    pub fn lookup(&self, vaddr: VirtAddr) -> Option<u64> {
        let e = self
            .entries
            .iter()
            .find(|e| vaddr >= e.region_base && vaddr < e.region_bound)?;
        Some(e.flat_map[((vaddr - e.region_base) >> PAGE_SHIFT) as usize])
    }

    pub fn entries(&self) -> &[RegionEntry] {
        &self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub paddr: PhysAddr,
    pub walk_accesses: u64,
    pub tlb_hit: bool,
}

/// A page walker with its private TLB.
#[derive(Debug, Clone)]
pub struct Walker {
    mode: PageTableMode,
    space: u64,
    map: PageMap,
    regions: RegionTable,
    tlb: Tlb,
}

impl Walker {
    pub fn new(mode: PageTableMode, space: u64, map: PageMap, tlb_entries: usize) -> Self {
        Self {
            mode,
            space,
            map,
            regions: RegionTable::new(),
            tlb: Tlb::new(tlb_entries),
        }
    }

    /// Walker for PIM logic, registering every declared region when the
    /// region-based table is in use.
    pub fn for_regions(
        mode: PageTableMode,
        space: u64,
        map: PageMap,
        tlb_entries: usize,
        regions: &[Region],
    ) -> Result<Self, XlatError> {
        let mut w = Self::new(mode, space, map, tlb_entries);
        if mode == PageTableMode::RegionBased {
            for r in regions {
                let base = r.base & !(PAGE_SIZE - 1);
                let bound = r.bound.div_ceil(PAGE_SIZE) * PAGE_SIZE;
                w.regions.register_with(base, bound, &map)?;
            }
        }
        Ok(w)
    }

    pub fn mode(&self) -> PageTableMode {
        self.mode
    }

    pub fn regions_mut(&mut self) -> &mut RegionTable {
        &mut self.regions
    }

    pub fn tlb(&self) -> &Tlb {
        &self.tlb
    }

    pub fn translate(&mut self, vaddr: VirtAddr) -> Result<Translation, XlatError> {
        let out_of_space = vaddr >= self.space
            || (self.mode == PageTableMode::Conventional4Level
                && vaddr >> CONVENTIONAL_VA_BITS != 0);
        if out_of_space {
            return Err(XlatError::OutOfSpace {
                vaddr,
                space: self.space,
            });
        }
        let vpn = vaddr >> PAGE_SHIFT;
        let offset = vaddr & (PAGE_SIZE - 1);
        if let Some(pfn) = self.tlb.lookup(vpn) {
            return Ok(Translation {
                paddr: (pfn << PAGE_SHIFT) | offset,
                walk_accesses: 0,
                tlb_hit: true,
            });
        }
        let pfn = match self.mode {
            PageTableMode::Conventional4Level => self.map.frame(vpn),
            PageTableMode::RegionBased => self
                .regions
                .lookup(vaddr)
                .ok_or(XlatError::Fault { vaddr })?,
        };
        self.tlb.insert(vpn, pfn);
        Ok(Translation {
            paddr: (pfn << PAGE_SHIFT) | offset,
            walk_accesses: self.mode.walk_accesses(),
            tlb_hit: false,
        })
    }
}
