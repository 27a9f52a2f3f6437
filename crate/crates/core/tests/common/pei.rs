//! PEI atomicity checks: every order of up to four PEIs on one line at the
//! component level, and many concurrent Adds through the engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pimsim::coherence::{cpu_cached_access, Access, CoherenceState, Mechanism};
use pimsim::engine::{simulate_detailed, store_token, Plan};
use pimsim::machine::MachineConfig;
use pimsim::pei::{pcu_execute, pmu_dispatch, PeiOp};
use pimsim::trace::{Agent, Granularity, PeiOpcode, Trace, TraceEvent};

use super::{single_region_header, LINE};

const POOL: [(PeiOpcode, i64); 4] = [
    (PeiOpcode::Add, 3),
    (PeiOpcode::Add, -5),
    (PeiOpcode::Min, 1),
    (PeiOpcode::Max, 9),
];

fn sequential(initial: i64, ops: &[(PeiOpcode, i64)]) -> Vec<i64> {
    let mut v = initial;
    let mut seen = vec![v];
    for &(opcode, x) in ops {
        v = match opcode {
            PeiOpcode::Add => v + x,
            PeiOpcode::Min => if x < v { x } else { v },
            PeiOpcode::Max => if x > v { x } else { v },
        };
        seen.push(v);
    }
    seen
}

/// Cache state set up before a PEI: untouched, read by the CPU, or evicted.
#[derive(Clone, Copy)]
enum Prep {
    Keep,
    CpuRead,
    Evict,
}

/// Runs every sequence of 1..=4 PEIs from a fixed pool, from several start
/// values, with every choice of CPU cache state before each PEI, so that
/// each PEI lands on the host or the memory PCU in all combinations.
/// Returns the number of runs and how many disagreed with applying the
/// PEIs one after the other.
pub fn exhaustive_one_line_peis() -> (usize, usize) {
    let cfg = MachineConfig::default();
    let line = 0;
    let (mut runs, mut bad) = (0, 0);
    for k in 1..=4u32 {
        for ops_code in 0..4usize.pow(k) {
            let ops: Vec<_> = (0..k)
                .map(|i| POOL[ops_code / 4usize.pow(i) % 4])
                .collect();
            for prep_code in 0..3usize.pow(k) {
                let preps: Vec<Prep> = (0..k)
                    .map(|i| [Prep::Keep, Prep::CpuRead, Prep::Evict][prep_code / 3usize.pow(i) % 3])
                    .collect();
                for initial in [0i64, 4, -7] {
                    runs += 1;
                    let want = sequential(initial, &ops);
                    let mut st = CoherenceState::new(4);
                    st.memory.write(line, initial as u64);
                    let mut ok = true;
                    for (i, (&(opcode, x), prep)) in ops.iter().zip(&preps).enumerate() {
                        match prep {
                            Prep::Keep => {}
                            Prep::CpuRead => {
                                cpu_cached_access(&mut st, line, Access::Read);
                            }
                            Prep::Evict => {
                                if let Some(c) = st.cache.remove(line) {
                                    if c.state.is_dirty() {
                                        st.memory.write(line, c.value);
                                    }
                                }
                            }
                        }
                        let op = PeiOp::new(opcode, 8, x, (i % 2) as u32, LINE).unwrap();
                        let site = pmu_dispatch(&op, 8, &st, &cfg);
                        ok &= pcu_execute(&op, site, line, &mut st) == want[i];
                    }
                    ok &= st.coherent_value(line) as i64 == want[k as usize];
                    bad += !ok as usize;
                }
            }
        }
    }
    (runs, bad)
}

fn pei_add(vaddr: u64) -> TraceEvent {
    TraceEvent::Pei {
        opcode: PeiOpcode::Add,
        vaddr,
        operand: 1,
    }
}

/// The CPU stores to one line, then issues `n` Add(+1) PEIs to it, part
/// from itself and part from two kernels it offloads, with random delays.
/// A fence and a load end the stream. Returns the expected value and the
/// offloaded kernel ids.
pub fn concurrent_adds_trace(n: usize, seed: u64) -> (Trace, u64, [u32; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cuts = {
        let mut c = [rng.gen_range(0..=n), rng.gen_range(0..=n), rng.gen_range(0..=n)];
        c.sort_unstable();
        c
    };
    let parts = [cuts[0], cuts[1] - cuts[0], cuts[2] - cuts[1], n - cuts[2]];
    let mut cpu = vec![TraceEvent::Store { vaddr: 0, bytes: 8 }];
    let initial = store_token(Agent::Cpu, 0);
    let delay = |ev: &mut Vec<TraceEvent>, rng: &mut ChaCha8Rng, site| {
        if rng.gen_bool(0.5) {
            ev.push(TraceEvent::Compute {
                site,
                cycles: rng.gen_range(1..40),
            });
        }
    };
    for (i, &len) in parts.iter().enumerate() {
        let offloaded = i % 2 == 0;
        if offloaded {
            cpu.push(TraceEvent::KernelBegin {
                kernel_id: 1 + i as u32 / 2,
                granularity: Granularity::Function,
            });
        }
        for _ in 0..len {
            delay(&mut cpu, &mut rng, if offloaded { Agent::Pim } else { Agent::Cpu });
            cpu.push(pei_add(8 * rng.gen_range(0..8)));
        }
        if offloaded {
            cpu.push(TraceEvent::KernelEnd {
                kernel_id: 1 + i as u32 / 2,
            });
        }
    }
    cpu.push(TraceEvent::Fence);
    cpu.push(TraceEvent::Load { vaddr: 0, bytes: 8 });
    let trace = Trace {
        header: single_region_header(4096),
        cpu,
        pim: vec![],
    };
    (trace, initial + n as u64, [1, 2])
}

/// Runs [`concurrent_adds_trace`] under `mechanism` and returns the final
/// line value and the value seen by the load after the fence.
pub fn run_concurrent_adds(n: usize, seed: u64, mechanism: Mechanism) -> (u64, u64, u64) {
    let (trace, want, kernels) = concurrent_adds_trace(n, seed);
    let out = simulate_detailed(
        &MachineConfig::default(),
        &trace,
        &Plan::new(mechanism).offloading(kernels),
    )
    .expect("simulation runs");
    let last_load = trace.cpu.len() - 1;
    let seen = out
        .observations
        .iter()
        .find(|o| o.origin == Agent::Cpu && o.index == last_load)
        .map(|o| o.value)
        .expect("final load observed");
    (want, out.final_memory[&0], seen)
}
