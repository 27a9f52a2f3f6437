use std::collections::BTreeMap;

use super::{
    Access, CoherenceOutcome, CoherenceState, Decision, LineAddr, LineState,
};
use crate::trace::Agent;

/// Normal cached CPU access: hit, or fill from DRAM over the channel with a
/// possible dirty-victim writeback.
pub fn cpu_cached_access(
    state: &mut CoherenceState,
    line: LineAddr,
    kind: Access,
) -> CoherenceOutcome {
    let mut out = CoherenceOutcome::default();
    match state.cache.get(line) {
        Some(l) => {
            out.cache_hit = true;
            state.cache.touch(line);
            match kind {
                Access::Read => out.value = l.value,
                Access::Write(v) => {
                    state.cache.update(line, LineState::Modified, v);
                    out.value = v;
                }
            }
        }
        None => {
            out.dram_accesses += 1;
            out.channel_transfers += 1;
            let (st, value) = match kind {
                Access::Read => (LineState::Exclusive, state.memory.read(line)),
                Access::Write(v) => (LineState::Modified, v),
            };
            out.value = value;
            if let Some((victim, vl)) = state.cache.insert(line, st, value) {
                if vl.state.is_dirty() {
                    state.memory.write(victim, vl.value);
                    out.dram_accesses += 1;
                    out.channel_transfers += 1;
                    out.flushed_lines.push(victim);
                }
            }
        }
    }
    out
}

/// PIM access to `line` under per-line MESI. PIM holds no copy, so the CPU
/// copy is downgraded to Shared on a PIM read and invalidated on a PIM
/// write; a dirty copy is written back first. Any CPU-cached line costs one
/// channel message.
fn pim_fg(state: &mut CoherenceState, line: LineAddr, kind: Access) -> CoherenceOutcome {
    let mut out = CoherenceOutcome::default();
    if let Some(l) = state.cache.get(line) {
        out.messages_on_channel += 1;
        if l.state.is_dirty() {
            state.memory.write(line, l.value);
            out.dram_accesses += 1;
            out.channel_transfers += 1;
            out.flushed_lines.push(line);
        }
        match kind {
            Access::Read => state.cache.set_state(line, LineState::Shared),
            Access::Write(_) => state.cache.set_state(line, LineState::Invalid),
        }
    }
    out.value = match kind {
        Access::Read => state.memory.read(line),
        Access::Write(v) => {
            state.memory.write(line, v);
            v
        }
    };
    out
}

pub fn fg_access(
    state: &mut CoherenceState,
    agent: Agent,
    line: LineAddr,
    kind: Access,
) -> CoherenceOutcome {
    match agent {
        Agent::Cpu => cpu_cached_access(state, line, kind),
        Agent::Pim => pim_fg(state, line, kind),
    }
}

/// Same state transitions as [`fg_access`], with every coherence action
/// free: no messages and no flush traffic are charged.
pub fn ideal_access(
    state: &mut CoherenceState,
    agent: Agent,
    line: LineAddr,
    kind: Access,
) -> CoherenceOutcome {
    match agent {
        Agent::Cpu => cpu_cached_access(state, line, kind),
        Agent::Pim => {
            let mut out = pim_fg(state, line, kind);
            out.messages_on_channel = 0;
            out.dram_accesses = 0;
            out.channel_transfers = 0;
            out
        }
    }
}

/// Access to a line in a non-cacheable region: the CPU goes to DRAM over
/// the channel every time, PIM goes straight to its vault. Never any
/// coherence messages.
pub fn nc_access(
    state: &mut CoherenceState,
    agent: Agent,
    line: LineAddr,
    kind: Access,
) -> CoherenceOutcome {
    debug_assert!(!state.cache.contains(line), "non-cacheable line found in CPU cache");
    let mut out = CoherenceOutcome::default();
    if agent == Agent::Cpu {
        out.dram_accesses = 1;
        out.channel_transfers = 1;
    }
    out.value = match kind {
        Access::Read => state.memory.read(line),
        Access::Write(v) => {
            state.memory.write(line, v);
            v
        }
    };
    out
}

/// Region locks for coarse-grained coherence, keyed by region index.
#[derive(Debug, Clone, Default)]
pub struct CgLocks {
    held: BTreeMap<usize, Agent>,
}

impl CgLocks {
    pub fn holder(&self, region: usize) -> Option<Agent> {
        self.held.get(&region).copied()
    }
}

/// Takes the lock on `region`. When PIM acquires, every CPU-cached line of
/// the region (`in_region` on physical line addresses) is written back if
/// dirty and invalidated. A lock held by the other agent yields `Stall`.
pub fn cg_acquire(
    locks: &mut CgLocks,
    state: &mut CoherenceState,
    agent: Agent,
    region: usize,
    in_region: impl Fn(LineAddr) -> bool,
) -> CoherenceOutcome {
    let mut out = CoherenceOutcome::default();
    match locks.holder(region) {
        Some(h) if h == agent => return out,
        Some(_) => {
            out.decision = Decision::Stall;
            return out;
        }
        None => {}
    }
    out.messages_on_channel = 1;
    if agent == Agent::Pim {
        let victims: Vec<_> = state
            .cache
            .iter()
            .filter(|(l, _)| in_region(*l))
            .collect();
        for (line, l) in victims {
            if l.state.is_dirty() {
                state.memory.write(line, l.value);
                out.dram_accesses += 1;
                out.channel_transfers += 1;
                out.flushed_lines.push(line);
            }
            state.cache.remove(line);
        }
    }
    locks.held.insert(region, agent);
    out
}

pub fn cg_release(locks: &mut CgLocks, agent: Agent, region: usize) -> CoherenceOutcome {
    let mut out = CoherenceOutcome::default();
    if locks.holder(region) == Some(agent) {
        locks.held.remove(&region);
        out.messages_on_channel = 1;
    }
    out
}

/// Whether `agent` may touch `region` right now.
pub fn cg_check(locks: &CgLocks, agent: Agent, region: usize) -> Decision {
    match locks.holder(region) {
        Some(h) if h != agent => Decision::Stall,
        _ => Decision::Proceed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st() -> CoherenceState {
        CoherenceState::new(16)
    }

    /// Reference MESI transitions for a PIM access, written independently
    /// of the implementation: (cpu state before, pim op) ->
    /// (cpu state after, messages >= 1, writeback).
    fn mesi_oracle(before: LineState, write: bool) -> (LineState, bool, bool) {
        use LineState::*;
        match (before, write) {
            (Invalid, _) => (Invalid, false, false),
            (Modified, false) => (Shared, true, true),
            (Exclusive, false) | (Shared, false) => (Shared, true, false),
            (Modified, true) => (Invalid, true, true),
            (_, true) => (Invalid, true, false),
        }
    }

    #[test]
    fn pim_accesses_follow_mesi_table() {
        use LineState::*;
        for before in [Modified, Exclusive, Shared, Invalid] {
            for write in [false, true] {
                let mut s = st();
                if before != Invalid {
                    s.cache.insert(0, before, 7);
                }
                let kind = if write { Access::Write(9) } else { Access::Read };
                let out = fg_access(&mut s, Agent::Pim, 0, kind);
                let (after, msg, wb) = mesi_oracle(before, write);
                assert_eq!(s.cache.state(0), after, "{before:?} write={write}");
                assert_eq!(out.messages_on_channel >= 1, msg);
                assert_eq!(out.flushed_lines == vec![0], wb);
                assert!(s.writers(0).len() <= 1);
            }
        }
    }

    #[test]
    fn pim_read_of_modified_line_sees_cpu_data() {
        let mut s = st();
        cpu_cached_access(&mut s, 64, Access::Write(5));
        let out = fg_access(&mut s, Agent::Pim, 64, Access::Read);
        assert_eq!(out.value, 5);
        assert_eq!(s.cache.state(64), LineState::Shared);
        assert!(out.messages_on_channel >= 1);
    }

    #[test]
    fn pim_read_uncached_is_plain_dram() {
        let mut s = st();
        let out = fg_access(&mut s, Agent::Pim, 64, Access::Read);
        assert_eq!(out.messages_on_channel, 0);
    }

    #[test]
    fn pim_write_then_cpu_read() {
        let mut s = st();
        cpu_cached_access(&mut s, 0, Access::Read);
        fg_access(&mut s, Agent::Pim, 0, Access::Write(42));
        let out = fg_access(&mut s, Agent::Cpu, 0, Access::Read);
        assert_eq!(out.value, 42);
        assert!(!out.cache_hit);
    }

    #[test]
    fn ideal_matches_fg_state_at_zero_cost() {
        let mut a = st();
        let mut b = st();
        for s in [&mut a, &mut b] {
            cpu_cached_access(s, 0, Access::Write(1));
            cpu_cached_access(s, 64, Access::Read);
        }
        let ops = [(0, Access::Read), (64, Access::Write(3)), (0, Access::Write(4))];
        for (line, op) in ops {
            fg_access(&mut a, Agent::Pim, line, op);
            let o = ideal_access(&mut b, Agent::Pim, line, op);
            assert_eq!(o.messages_on_channel, 0);
            assert_eq!(o.channel_transfers, 0);
        }
        for line in [0, 64] {
            assert_eq!(a.coherent_value(line), b.coherent_value(line));
            assert_eq!(a.cache.state(line), b.cache.state(line));
        }
    }

    #[test]
    fn nc_reads_always_go_to_dram() {
        let mut s = st();
        let total: u64 = (0..100)
            .map(|_| nc_access(&mut s, Agent::Cpu, 0, Access::Read).dram_accesses)
            .sum();
        assert_eq!(total, 100);
        assert!(s.cache.is_empty());
        let o = nc_access(&mut s, Agent::Pim, 0, Access::Read);
        assert_eq!(o.messages_on_channel, 0);
    }

    #[test]
    fn nc_last_write_wins() {
        let mut s = st();
        let writes = [(Agent::Cpu, 1), (Agent::Pim, 2), (Agent::Cpu, 3), (Agent::Pim, 4)];
        for (a, v) in writes {
            nc_access(&mut s, a, 0, Access::Write(v));
        }
        assert_eq!(s.memory.read(0), 4);
    }

    #[test]
    fn cg_acquire_flushes_dirty_lines() {
        let mut s = st();
        for (i, line) in [0u64, 64, 128, 192, 4096].into_iter().enumerate() {
            let kind = if i < 3 || i == 4 { Access::Write(i as u64 + 1) } else { Access::Read };
            cpu_cached_access(&mut s, line, kind);
        }
        let mut locks = CgLocks::default();
        let out = cg_acquire(&mut locks, &mut s, Agent::Pim, 0, |l| l < 4096);
        assert_eq!(out.flushed_lines, vec![0, 64, 128]);
        assert_eq!(out.messages_on_channel, 1);
        assert!(!s.cache.contains(192));
        assert!(s.cache.contains(4096));
        assert_eq!(s.memory.read(64), 2);
    }

    #[test]
    fn cg_clean_region_single_message() {
        let mut s = st();
        let mut locks = CgLocks::default();
        let out = cg_acquire(&mut locks, &mut s, Agent::Pim, 0, |_| true);
        assert!(out.flushed_lines.is_empty());
        assert_eq!(out.messages_on_channel, 1);
    }

    #[test]
    fn cg_cpu_stalls_until_release() {
        let mut s = st();
        let mut locks = CgLocks::default();
        cg_acquire(&mut locks, &mut s, Agent::Pim, 2, |_| true);
        assert_eq!(cg_check(&locks, Agent::Cpu, 2), Decision::Stall);
        assert_eq!(cg_check(&locks, Agent::Cpu, 1), Decision::Proceed);
        let o = cg_acquire(&mut locks, &mut s, Agent::Cpu, 2, |_| true);
        assert_eq!(o.decision, Decision::Stall);
        assert_eq!(cg_release(&mut locks, Agent::Pim, 2).messages_on_channel, 1);
        assert_eq!(cg_check(&locks, Agent::Cpu, 2), Decision::Proceed);
    }
}
