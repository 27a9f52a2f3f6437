use std::collections::BTreeMap;

use super::{LineAddr, LineState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheLine {
    pub state: LineState,
    pub value: u64,
    stamp: u64,
}

/// Fully associative, LRU, write-back CPU cache. Absent lines are Invalid.
#[derive(Debug, Clone)]
pub struct CpuCache {
    capacity: usize,
    lines: BTreeMap<LineAddr, CacheLine>,
    lru: BTreeMap<u64, LineAddr>,
    clock: u64,
}

impl CpuCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "cache needs at least one line");
        Self {
            capacity,
            lines: BTreeMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
        }
    }

    pub fn get(&self, line: LineAddr) -> Option<CacheLine> {
        self.lines.get(&line).copied()
    }

    pub fn state(&self, line: LineAddr) -> LineState {
        self.lines
            .get(&line)
            .map_or(LineState::Invalid, |l| l.state)
    }

    pub fn contains(&self, line: LineAddr) -> bool {
        self.lines.contains_key(&line)
    }

    fn bump(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Marks `line` most recently used.
    pub fn touch(&mut self, line: LineAddr) {
        let stamp = self.bump();
        if let Some(l) = self.lines.get_mut(&line) {
            self.lru.remove(&l.stamp);
            l.stamp = stamp;
            self.lru.insert(stamp, line);
        }
    }

    pub fn update(&mut self, line: LineAddr, state: LineState, value: u64) {
        if let Some(l) = self.lines.get_mut(&line) {
            l.state = state;
            l.value = value;
        }
    }

    pub fn set_state(&mut self, line: LineAddr, state: LineState) {
        if state == LineState::Invalid {
            self.remove(line);
        } else if let Some(l) = self.lines.get_mut(&line) {
            l.state = state;
        }
    }

    /// Fills `line`, returning the evicted victim if the cache was full.
    pub fn insert(
        &mut self,
        line: LineAddr,
        state: LineState,
        value: u64,
    ) -> Option<(LineAddr, CacheLine)> {
        debug_assert!(state.is_valid());
        if self.lines.contains_key(&line) {
            self.update(line, state, value);
            self.touch(line);
            return None;
        }
        let victim = if self.lines.len() == self.capacity {
            let (&stamp, &victim) = self.lru.iter().next().expect("full cache has an LRU line");
            self.lru.remove(&stamp);
            self.lines.remove(&victim).map(|l| (victim, l))
        } else {
            None
        };
        let stamp = self.bump();
        self.lines.insert(line, CacheLine { state, value, stamp });
        self.lru.insert(stamp, line);
        victim
    }

    pub fn remove(&mut self, line: LineAddr) -> Option<CacheLine> {
        let l = self.lines.remove(&line)?;
        self.lru.remove(&l.stamp);
        Some(l)
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Dirty lines in address order.
    pub fn dirty_lines(&self) -> impl Iterator<Item = LineAddr> + '_ {
        self.lines
            .iter()
            .filter(|(_, l)| l.state.is_dirty())
            .map(|(a, _)| *a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (LineAddr, CacheLine)> + '_ {
        self.lines.iter().map(|(a, l)| (*a, *l))
    }
}
