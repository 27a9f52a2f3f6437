//! The event loop. Two in-order agents with local clocks; the one with the
//! smaller clock (CPU on ties) executes its next action, which is applied
//! to the shared state atomically at its start time.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::ledger::{account, EnergyLedger};
use super::report::{Counters, MetricsReport, REPORT_SCHEMA};
use super::{KernelStats, LoadObservation, Plan, SimError, SimOutcome};
use crate::coherence::{
    cg_acquire, cg_release, conda_record, conda_resolve, conda_rollback_and_reexecute,
    cpu_cached_access, fg_access, ideal_access, nc_access, Access, CgLocks, CoherenceOutcome,
    CoherenceState, CondaEpoch, LineAddr, Mechanism, Resolution,
};
use crate::machine::{vault_of, validate_config, EventKind, MachineConfig, PimCoreKind, VaultId};
use crate::pei::{pcu_execute, pmu_dispatch, ExecutionSite, PeiOp, PmuState, PEI_OPERAND_BYTES};
use crate::trace::{Agent, Granularity, KernelId, Trace, TraceEvent, VirtAddr};
use crate::xlat::{PageMap, PageTableMode, Walker, XlatError};

/// Value stored by event `index` of stream `origin`. Unique per store so
/// final memory identifies the last writer of every line.
pub fn store_token(origin: Agent, index: usize) -> u64 {
    ((origin.id() as u64 + 1) << 48) | (index as u64 + 1)
}

#[derive(Debug, Clone, Copy)]
struct Step {
    origin: Agent,
    index: usize,
    ev: TraceEvent,
}

#[derive(Debug, Clone)]
struct Job {
    kernel: Option<KernelId>,
    granularity: Option<Granularity>,
    steps: Vec<Step>,
    offloaded: bool,
    /// PIM regions touched, for region locks.
    regions: Vec<usize>,
    /// CPU steps that precede an offloaded kernel; it may start only once
    /// the CPU has executed them.
    after_cpu: usize,
}

#[derive(Debug, Clone)]
struct CpuStep {
    step: Step,
    /// Offloaded jobs dispatched before this step; a fence waits for them.
    waits_for: usize,
}

fn split_program(
    trace: &Trace,
    plan: &Plan,
) -> Result<(Vec<CpuStep>, Vec<Job>), SimError> {
    let mut cpu = Vec::new();
    let mut offloaded = Vec::new();
    let mut seen_offload = BTreeSet::new();
    let mut current: Option<Job> = None;
    let mut depth = 0usize;

    for (index, &ev) in trace.cpu.iter().enumerate() {
        let step = Step {
            origin: Agent::Cpu,
            index,
            ev,
        };
        if let Some(job) = current.as_mut() {
            job.steps.push(step);
            match ev {
                TraceEvent::KernelBegin { .. } => depth += 1,
                TraceEvent::KernelEnd { .. } => {
                    depth -= 1;
                    if depth == 0 {
                        offloaded.push(current.take().expect("job open"));
                    }
                }
                _ => {}
            }
            continue;
        }
        if let TraceEvent::KernelBegin {
            kernel_id,
            granularity,
        } = ev
        {
            if !plan.cpu_only && plan.offload.contains(&kernel_id) {
                seen_offload.insert(kernel_id);
                depth = 1;
                current = Some(Job {
                    kernel: Some(kernel_id),
                    granularity: Some(granularity),
                    steps: vec![step],
                    offloaded: true,
                    regions: vec![],
                    after_cpu: cpu.len(),
                });
                continue;
            }
        }
        cpu.push(CpuStep {
            step,
            waits_for: offloaded.len(),
        });
    }
    if !plan.cpu_only {
        if let Some(missing) = plan.offload.iter().find(|k| !seen_offload.contains(k)) {
            return Err(SimError::UnknownKernel(*missing));
        }
    }

    let mut pim_jobs = Vec::new();
    let mut anon: Option<Job> = None;
    let mut current: Option<Job> = None;
    let mut depth = 0usize;
    for (index, &ev) in trace.pim.iter().enumerate() {
        let step = Step {
            origin: Agent::Pim,
            index,
            ev,
        };
        if plan.cpu_only {
            cpu.push(CpuStep { step, waits_for: 0 });
            continue;
        }
        match (current.as_mut(), ev) {
            (Some(job), _) => {
                job.steps.push(step);
                match ev {
                    TraceEvent::KernelBegin { .. } => depth += 1,
                    TraceEvent::KernelEnd { .. } => {
                        depth -= 1;
                        if depth == 0 {
                            pim_jobs.push(current.take().expect("job open"));
                        }
                    }
                    _ => {}
                }
            }
            (
                None,
                TraceEvent::KernelBegin {
                    kernel_id,
                    granularity,
                },
            ) => {
                if let Some(a) = anon.take() {
                    pim_jobs.push(a);
                }
                depth = 1;
                current = Some(Job {
                    kernel: Some(kernel_id),
                    granularity: Some(granularity),
                    steps: vec![step],
                    offloaded: false,
                    regions: vec![],
                    after_cpu: 0,
                });
            }
            (None, _) => anon
                .get_or_insert_with(|| Job {
                    kernel: None,
                    granularity: None,
                    steps: vec![],
                    offloaded: false,
                    regions: vec![],
                    after_cpu: 0,
                })
                .steps
                .push(step),
        }
    }
    if let Some(a) = anon.take() {
        pim_jobs.push(a);
    }

    // Offloaded kernels first; the PIM agent prefers them once ready.
    let mut jobs = offloaded;
    jobs.extend(pim_jobs);
    for job in &mut jobs {
        let mut regions = BTreeSet::new();
        for s in &job.steps {
            if let Some((vaddr, bytes)) = s.ev.footprint() {
                for r in [trace.region_of(vaddr), trace.region_of(vaddr + bytes - 1)]
                    .into_iter()
                    .flatten()
                {
                    regions.insert(r);
                }
            }
        }
        job.regions = regions.into_iter().collect();
    }
    Ok((cpu, jobs))
}

struct Epoch {
    conda: CondaEpoch,
    dirty_at_start: BTreeSet<LineAddr>,
    cpu_written: BTreeSet<LineAddr>,
    cpu_read: BTreeSet<LineAddr>,
    observations: Vec<LoadObservation>,
}

#[derive(Default)]
struct PimAgent {
    time: u64,
    /// Job being executed, if one is selected.
    current: Option<usize>,
    next_offload: usize,
    next_stream: usize,
    done: usize,
    pc: usize,
    started: bool,
    job_start: Option<u64>,
    home_vault: Option<VaultId>,
    /// Recently fetched lines, most recent last.
    line_buffers: Vec<LineAddr>,
    epoch: Option<Epoch>,
    /// Running the current job under region locks after too many rollbacks.
    cg_mode: bool,
    locks: Vec<usize>,
    consecutive_rollbacks: u32,
}

struct Engine<'a> {
    cfg: &'a MachineConfig,
    trace: &'a Trace,
    plan: &'a Plan,
    cpu_prog: Vec<CpuStep>,
    jobs: Vec<Job>,
    n_offload: usize,

    state: CoherenceState,
    locks: CgLocks,
    pmu: PmuState,
    cpu_walker: Walker,
    pim_walker: Walker,
    vline_of: HashMap<LineAddr, VirtAddr>,

    cpu_time: u64,
    cpu_pc: usize,
    cpu_kernels: Vec<(KernelId, u64)>,
    pim: PimAgent,
    offload_done_at: Vec<u64>,
    lock_release_at: u64,

    ledger: EnergyLedger,
    counters: Counters,
    kernels: BTreeMap<KernelId, KernelStats>,
    observations: Vec<LoadObservation>,
}

fn kernel_label(trace: &Trace, kernel: Option<KernelId>) -> String {
    match kernel {
        Some(id) => match trace.header.kernel_names.get(&id) {
            Some(name) => format!("{name} (id {id})"),
            None => format!("id {id}"),
        },
        None => "<no kernel>".into(),
    }
}

fn lines_of(vaddr: VirtAddr, bytes: u64, line: u64) -> impl Iterator<Item = VirtAddr> {
    let first = vaddr / line;
    let last = (vaddr + bytes.max(1) - 1) / line;
    (first..=last).map(move |l| l * line)
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a MachineConfig, trace: &'a Trace, plan: &'a Plan) -> Result<Self, SimError> {
        validate_config(cfg).map_err(SimError::Config)?;
        trace.validate()?;
        let (cpu_prog, jobs) = split_program(trace, plan)?;
        let n_offload = jobs.iter().filter(|j| j.offloaded).count();
        let map = PageMap::from_seed(cfg.mapping_seed);
        let space = trace.header.vaddr_space_size;
        let cpu_walker = Walker::new(
            PageTableMode::Conventional4Level,
            space,
            map,
            cfg.tlb_entries,
        );
        let pim_walker = Walker::for_regions(
            plan.xlat_mode,
            space,
            map,
            cfg.tlb_entries,
            &trace.header.pim_regions,
        )
        .map_err(|source| SimError::Translation {
            kernel: "<setup>".into(),
            vaddr: 0,
            source,
        })?;
        Ok(Self {
            cfg,
            trace,
            plan,
            cpu_prog,
            jobs,
            n_offload,
            state: CoherenceState::new(cfg.cpu_cache_lines),
            locks: CgLocks::default(),
            pmu: PmuState::default(),
            cpu_walker,
            pim_walker,
            vline_of: HashMap::new(),
            cpu_time: 0,
            cpu_pc: 0,
            cpu_kernels: Vec::new(),
            pim: PimAgent {
                next_stream: n_offload,
                ..PimAgent::default()
            },
            offload_done_at: Vec::new(),
            lock_release_at: 0,
            ledger: EnergyLedger::default(),
            counters: Counters::default(),
            kernels: BTreeMap::new(),
            observations: Vec::new(),
        })
    }

    fn charge(&mut self, kernel: Option<KernelId>, kind: EventKind, qty: u64) {
        account(&mut self.ledger, kind, qty, &self.cfg.energy);
        if let Some(k) = kernel {
            let ks = self.kernels.entry(k).or_default();
            account(&mut ks.energy, kind, qty, &self.cfg.energy);
        }
    }

    fn kernel_stats(&mut self, kernel: Option<KernelId>) -> Option<&mut KernelStats> {
        kernel.map(|k| self.kernels.entry(k).or_default())
    }

    /// Channel and DRAM side effects of a coherence action.
    fn apply_outcome(&mut self, kernel: Option<KernelId>, out: &CoherenceOutcome) {
        self.counters.coherence_messages += out.messages_on_channel;
        self.counters.dram_accesses += out.dram_accesses;
        self.counters.offchip_bytes += out.channel_transfers * self.cfg.line_size;
        self.counters.flushed_lines += out.flushed_lines.len() as u64;
        self.charge(kernel, EventKind::CoherenceMessage, out.messages_on_channel);
        self.charge(kernel, EventKind::DramAccess, out.dram_accesses);
        self.charge(kernel, EventKind::ChannelTransfer, out.channel_transfers);
    }

    fn cg_active(&self) -> bool {
        self.plan.mechanism == Mechanism::Cg || (self.plan.mechanism == Mechanism::Conda && self.pim.cg_mode)
    }

    fn in_region(&self, vaddr: VirtAddr) -> Option<usize> {
        self.trace.region_of(vaddr)
    }

    // ---- scheduling ----

    fn cpu_blocked(&self) -> Option<Blocker> {
        let cs = &self.cpu_prog[self.cpu_pc];
        if matches!(cs.step.ev, TraceEvent::Fence) && cs.waits_for > self.offload_done_at.len() {
            return Some(Blocker::Offload);
        }
        if !self.pim.locks.is_empty() {
            if let Some((vaddr, bytes)) = cs.step.ev.footprint() {
                let held = lines_of(vaddr, bytes, self.cfg.line_size)
                    .filter_map(|v| self.in_region(v))
                    .any(|r| self.locks.holder(r) == Some(Agent::Pim));
                if held {
                    return Some(Blocker::Lock);
                }
            }
        }
        None
    }

    fn run(mut self) -> Result<SimOutcome, SimError> {
        loop {
            let cpu_left = self.cpu_pc < self.cpu_prog.len();
            let pim_left = self.pim.done < self.jobs.len();
            if !cpu_left && !pim_left {
                break;
            }
            let blocked = if cpu_left { self.cpu_blocked() } else { None };
            let cpu_can = cpu_left && blocked.is_none();
            let pim_can = pim_left && self.pim_ready();
            let run_cpu = match (cpu_can, pim_can) {
                (true, true) => self.cpu_time <= self.pim.time,
                (true, false) => true,
                (false, true) => false,
                (false, false) => return Err(SimError::Deadlock),
            };
            if run_cpu {
                self.cpu_step()?;
            } else {
                self.pim_step()?;
                if let Some(b) = blocked {
                    self.maybe_unblock(b);
                }
            }
        }
        self.finish()
    }

    /// Moves the CPU clock forward to the moment the thing it waits on
    /// happened, once it has.
    fn maybe_unblock(&mut self, b: Blocker) {
        if self.cpu_pc >= self.cpu_prog.len() || self.cpu_blocked().is_some() {
            return;
        }
        let at = match b {
            Blocker::Offload => {
                let need = self.cpu_prog[self.cpu_pc].waits_for;
                self.offload_done_at[need - 1]
            }
            Blocker::Lock => self.lock_release_at,
        };
        if at > self.cpu_time {
            if b == Blocker::Lock {
                self.counters.lock_stall_cycles += at - self.cpu_time;
            }
            self.cpu_time = at;
        }
    }

    // ---- CPU ----

    fn cpu_kernel(&self) -> Option<KernelId> {
        self.cpu_kernels.first().map(|k| k.0)
    }

    fn cpu_step(&mut self) -> Result<(), SimError> {
        let Step { origin, index, ev } = self.cpu_prog[self.cpu_pc].step;
        self.cpu_pc += 1;
        let kernel = self.cpu_kernel();
        match ev {
            TraceEvent::Compute { cycles, .. } => {
                self.cpu_time += cycles;
                self.charge(kernel, EventKind::CpuCompute, cycles);
                if let Some(ks) = self.kernel_stats(kernel) {
                    ks.instructions += 1;
                }
            }
            TraceEvent::Load { vaddr, bytes } | TraceEvent::Store { vaddr, bytes } => {
                let write = matches!(ev, TraceEvent::Store { .. });
                if let Some(ks) = self.kernel_stats(kernel) {
                    ks.instructions += 1;
                }
                for v in lines_of(vaddr, bytes as u64, self.cfg.line_size) {
                    let kind = if write {
                        Access::Write(store_token(origin, index))
                    } else {
                        Access::Read
                    };
                    let value = self.cpu_access(kernel, v, kind)?;
                    if !write {
                        self.observations.push(LoadObservation {
                            origin,
                            index,
                            vline: v,
                            value,
                        });
                    }
                }
            }
            TraceEvent::Pei {
                opcode,
                vaddr,
                operand,
            } => {
                if let Some(ks) = self.kernel_stats(kernel) {
                    ks.instructions += 1;
                }
                let op = PeiOp::new(opcode, vaddr, operand, 0, self.cfg.line_size)
                    .map_err(SimError::Pei)?;
                self.cpu_pei(kernel, &op)?;
            }
            TraceEvent::Fence => {
                self.cpu_time = self.pmu.fence(0, self.cpu_time) + self.cfg.lat_fence;
            }
            TraceEvent::KernelBegin { kernel_id, .. } => {
                self.cpu_kernels.push((kernel_id, self.cpu_time));
            }
            TraceEvent::KernelEnd { .. } => {
                if let Some((k, start)) = self.cpu_kernels.pop() {
                    if self.cpu_kernels.is_empty() {
                        let ks = self.kernels.entry(k).or_default();
                        ks.cycles += self.cpu_time - start;
                        ks.agent = Some(Agent::Cpu);
                    }
                }
            }
        }
        Ok(())
    }

    fn cpu_translate(&mut self, kernel: Option<KernelId>, vaddr: VirtAddr) -> Result<LineAddr, SimError> {
        let t = self
            .cpu_walker
            .translate(vaddr)
            .map_err(|source| SimError::Translation {
                kernel: kernel_label(self.trace, kernel),
                vaddr,
                source,
            })?;
        if !t.tlb_hit {
            let n = t.walk_accesses;
            self.counters.tlb_misses += 1;
            self.counters.page_walk_accesses += n;
            self.counters.dram_accesses += n;
            self.counters.offchip_bytes += n * self.cfg.line_size;
            self.cpu_time += n * (self.cfg.lat_channel_round_trip + self.cfg.lat_dram_local_vault);
            self.charge(kernel, EventKind::DramAccess, n);
            self.charge(kernel, EventKind::ChannelTransfer, n);
        }
        let pline = self.cfg.line_of(t.paddr);
        self.vline_of.insert(pline, self.cfg.line_of(vaddr));
        Ok(pline)
    }

    fn track_cpu(&mut self, pline: LineAddr, read: bool, write: bool) {
        if let Some(ep) = self.pim.epoch.as_mut() {
            if read {
                ep.cpu_read.insert(pline);
            }
            if write {
                ep.cpu_written.insert(pline);
            }
        }
    }

    fn cpu_access(
        &mut self,
        kernel: Option<KernelId>,
        vaddr: VirtAddr,
        kind: Access,
    ) -> Result<u64, SimError> {
        let pline = self.cpu_translate(kernel, vaddr)?;
        if self.pmu.in_flight_on(pline, self.cpu_time) {
            self.counters.pei_race_warnings += 1;
        }
        self.track_cpu(pline, !kind.is_write(), kind.is_write());
        let nc = self.plan.mechanism == Mechanism::Nc
            && !self.plan.cpu_only
            && self.in_region(vaddr).is_some();
        let out = if nc {
            nc_access(&mut self.state, Agent::Cpu, pline, kind)
        } else {
            cpu_cached_access(&mut self.state, pline, kind)
        };
        let miss_latency = self.cfg.lat_channel_round_trip + self.cfg.lat_dram_local_vault;
        if nc {
            self.cpu_time += miss_latency;
            self.counters.cache_misses += 1;
            if let Some(ks) = self.kernel_stats(kernel) {
                ks.dram_misses += 1;
            }
        } else {
            self.charge(kernel, EventKind::CacheAccess, 1);
            self.cpu_time += self.cfg.lat_cpu_cache_hit;
            if out.cache_hit {
                self.counters.cache_hits += 1;
            } else {
                self.cpu_time += miss_latency;
                self.counters.cache_misses += 1;
                if let Some(ks) = self.kernel_stats(kernel) {
                    ks.dram_misses += 1;
                }
            }
        }
        self.apply_outcome(kernel, &out);
        Ok(out.value)
    }

    fn cpu_pei(&mut self, kernel: Option<KernelId>, op: &PeiOp) -> Result<(), SimError> {
        let vaddr = op.vaddr();
        let pline = self.cpu_translate(kernel, vaddr)?;
        let paddr = pline + (vaddr % self.cfg.line_size);
        self.track_cpu(pline, true, true);
        let site = pmu_dispatch(op, paddr, &self.state, self.cfg);
        let latency = match site {
            ExecutionSite::HostPcu(_) => {
                self.counters.pei_host += 1;
                self.charge(kernel, EventKind::CacheAccess, 1);
                self.charge(kernel, EventKind::CpuCompute, 1);
                self.cfg.lat_pcu_op
            }
            ExecutionSite::MemoryPcu(_) => {
                self.counters.pei_memory += 1;
                self.counters.dram_accesses += 2;
                self.counters.offchip_bytes += 2 * PEI_OPERAND_BYTES;
                self.charge(kernel, EventKind::ChannelTransfer, 1);
                self.charge(kernel, EventKind::DramAccess, 2);
                self.charge(kernel, EventKind::PimCompute, 1);
                self.cfg.lat_channel_round_trip + self.cfg.lat_dram_local_vault + self.cfg.lat_pcu_op
            }
        };
        pcu_execute(op, site, pline, &mut self.state);
        self.pmu
            .enqueue(pline, 0, self.cpu_time, latency, self.cfg.lat_pcu_op);
        self.cpu_time += self.cfg.lat_cpu_cache_hit;
        Ok(())
    }

    // ---- PIM ----

    fn job_index(&self) -> usize {
        self.pim.current.expect("a job is selected")
    }

    fn pim_kernel(&self) -> Option<KernelId> {
        self.jobs[self.job_index()].kernel
    }

    fn offload_ready(&self) -> bool {
        self.pim.next_offload < self.n_offload
            && self.cpu_pc >= self.jobs[self.pim.next_offload].after_cpu
    }

    fn pim_ready(&self) -> bool {
        self.pim.current.is_some() || self.offload_ready() || self.pim.next_stream < self.jobs.len()
    }

    /// Next job: a ready offloaded kernel, else the next PIM-stream job. An
    /// offloaded kernel starts no earlier than the CPU reached it.
    fn select_job(&mut self) {
        if self.offload_ready() {
            self.pim.current = Some(self.pim.next_offload);
            self.pim.next_offload += 1;
            self.pim.time = self.pim.time.max(self.cpu_time);
        } else {
            self.pim.current = Some(self.pim.next_stream);
            self.pim.next_stream += 1;
        }
    }

    fn pim_step(&mut self) -> Result<(), SimError> {
        if self.pim.current.is_none() {
            self.select_job();
        }
        if !self.pim.started {
            return self.start_job();
        }
        let job = &self.jobs[self.job_index()];
        if self.pim.pc < job.steps.len() {
            let step = job.steps[self.pim.pc];
            self.pim.pc += 1;
            return self.pim_event(step);
        }
        self.finish_job()
    }

    fn scaled_compute(&self, cycles: u64) -> u64 {
        let mut f = self.cfg.pim_cycle_ratio;
        if self.cfg.pim_core_kind == PimCoreKind::FixedAccelerator {
            f *= self.cfg.accel_compute_scale;
        }
        (cycles as f64 * f).round() as u64
    }

    fn start_job(&mut self) -> Result<(), SimError> {
        let job = &self.jobs[self.job_index()];
        let kernel = job.kernel;
        if self.cfg.pim_core_kind == PimCoreKind::FixedAccelerator {
            let ok = job
                .granularity
                .is_some_and(|g| self.cfg.accel_granularities.contains(&g));
            if !ok {
                return Err(SimError::Unsupported {
                    kernel: kernel_label(self.trace, kernel),
                    granularity: job.granularity,
                });
            }
        }
        self.pim.started = true;
        self.pim.pc = 0;
        self.pim.home_vault = None;
        self.pim.line_buffers.clear();
        if self.pim.job_start.is_none() {
            self.pim.job_start = Some(self.pim.time);
        }
        match self.plan.mechanism {
            _ if self.cg_active() => {
                let regions = self.jobs[self.job_index()].regions.clone();
                let mut acquired = false;
                for r in regions {
                    let region = self.trace.header.pim_regions[r];
                    let vline_of = &self.vline_of;
                    let out = cg_acquire(&mut self.locks, &mut self.state, Agent::Pim, r, |pl| {
                        vline_of.get(&pl).is_some_and(|v| region.contains(*v))
                    });
                    self.apply_outcome(kernel, &out);
                    acquired |= out.messages_on_channel > 0;
                    self.pim.locks.push(r);
                }
                if acquired {
                    self.pim.time += self.cfg.lat_channel_round_trip;
                }
            }
            Mechanism::Conda => {
                self.pim.epoch = Some(Epoch {
                    conda: CondaEpoch::new(self.cfg.signature_bits, self.cfg.signature_hashes),
                    dirty_at_start: self.state.cache.dirty_lines().collect(),
                    cpu_written: BTreeSet::new(),
                    cpu_read: BTreeSet::new(),
                    observations: Vec::new(),
                });
            }
            _ => {}
        }
        Ok(())
    }

    fn pim_event(&mut self, step: Step) -> Result<(), SimError> {
        let kernel = self.pim_kernel();
        let Step { origin, index, ev } = step;
        match ev {
            TraceEvent::Compute { cycles, .. } => {
                let c = self.scaled_compute(cycles);
                self.pim.time += c;
                self.charge(kernel, EventKind::PimCompute, c);
                if let Some(ks) = self.kernel_stats(kernel) {
                    ks.instructions += 1;
                }
            }
            TraceEvent::Load { vaddr, bytes } | TraceEvent::Store { vaddr, bytes } => {
                let write = matches!(ev, TraceEvent::Store { .. });
                if let Some(ks) = self.kernel_stats(kernel) {
                    ks.instructions += 1;
                }
                for v in lines_of(vaddr, bytes as u64, self.cfg.line_size) {
                    let kind = if write {
                        Access::Write(store_token(origin, index))
                    } else {
                        Access::Read
                    };
                    let value = self.pim_access(kernel, v, kind)?;
                    if !write {
                        let obs = LoadObservation {
                            origin,
                            index,
                            vline: v,
                            value,
                        };
                        match self.pim.epoch.as_mut() {
                            Some(ep) => ep.observations.push(obs),
                            None => self.observations.push(obs),
                        }
                    }
                }
            }
            TraceEvent::Pei {
                opcode,
                vaddr,
                operand,
            } => {
                if let Some(ks) = self.kernel_stats(kernel) {
                    ks.instructions += 1;
                }
                PeiOp::new(opcode, vaddr, operand, 1, self.cfg.line_size).map_err(SimError::Pei)?;
                let line = self.cfg.line_of(vaddr);
                let old = self.pim_access(kernel, line, Access::Read)? as i64;
                let new = opcode.apply(old, operand) as u64;
                self.pim_access(kernel, line, Access::Write(new))?;
                self.pim.time += self.cfg.lat_pcu_op;
            }
            TraceEvent::Fence => self.pim.time += self.cfg.lat_fence,
            TraceEvent::KernelBegin { .. } | TraceEvent::KernelEnd { .. } => {}
        }
        Ok(())
    }

    fn pim_access(
        &mut self,
        kernel: Option<KernelId>,
        vaddr: VirtAddr,
        kind: Access,
    ) -> Result<u64, SimError> {
        let t = self.pim_walker.translate(vaddr).map_err(|source| match source {
            XlatError::Fault { vaddr } => SimError::TranslationFault {
                kernel: kernel_label(self.trace, kernel),
                vaddr,
            },
            source => SimError::Translation {
                kernel: kernel_label(self.trace, kernel),
                vaddr,
                source,
            },
        })?;
        if !t.tlb_hit {
            let n = t.walk_accesses;
            self.counters.tlb_misses += 1;
            self.counters.page_walk_accesses += n;
            self.counters.dram_accesses += n;
            self.pim.time += n * self.cfg.lat_dram_local_vault;
            self.charge(kernel, EventKind::DramAccess, n);
        }
        let pline = self.cfg.line_of(t.paddr);
        self.vline_of.insert(pline, self.cfg.line_of(vaddr));
        let vault = vault_of(t.paddr, self.cfg);
        let home = *self.pim.home_vault.get_or_insert(vault);
        if let Some(pos) = self.pim.line_buffers.iter().position(|&l| l == pline) {
            self.pim.line_buffers.remove(pos);
            self.pim.time += self.cfg.lat_pim_line_buffer;
        } else {
            self.pim.time += if vault == home {
                self.cfg.lat_dram_local_vault
            } else {
                self.cfg.lat_dram_remote_vault
            };
            self.counters.dram_accesses += 1;
            self.charge(kernel, EventKind::DramAccess, 1);
            if let Some(ks) = self.kernel_stats(kernel) {
                ks.dram_misses += 1;
            }
        }
        if self.cfg.pim_line_buffers > 0 {
            if self.pim.line_buffers.len() == self.cfg.pim_line_buffers {
                self.pim.line_buffers.remove(0);
            }
            self.pim.line_buffers.push(pline);
        }

        let region = self.in_region(vaddr);
        let out = if let Some(ep) = self.pim.epoch.as_mut() {
            let value = match kind {
                Access::Read => ep.conda.read_value(pline, &self.state.memory),
                Access::Write(v) => v,
            };
            let mut out = conda_record(&mut ep.conda, pline, kind).map_err(SimError::Conda)?;
            out.value = value;
            out
        } else {
            match self.plan.mechanism {
                Mechanism::Ideal => ideal_access(&mut self.state, Agent::Pim, pline, kind),
                Mechanism::Nc if region.is_some() => {
                    nc_access(&mut self.state, Agent::Pim, pline, kind)
                }
                _ if self.cg_active() && region.is_some_and(|r| self.pim.locks.contains(&r)) => {
                    nc_access(&mut self.state, Agent::Pim, pline, kind)
                }
                _ => fg_access(&mut self.state, Agent::Pim, pline, kind),
            }
        };
        if out.messages_on_channel > 0 {
            self.pim.time += self.cfg.lat_channel_round_trip;
        }
        self.apply_outcome(kernel, &out);
        Ok(out.value)
    }

    fn finish_job(&mut self) -> Result<(), SimError> {
        let kernel = self.pim_kernel();
        if let Some(mut ep) = self.pim.epoch.take() {
            let mut dirty: BTreeSet<LineAddr> = self.state.cache.dirty_lines().collect();
            dirty.extend(&ep.dirty_at_start);
            dirty.extend(&ep.cpu_written);
            let (res, out) = conda_resolve(&mut ep.conda, &mut self.state, &dirty, &ep.cpu_read)
                .map_err(SimError::Conda)?;
            self.pim.time += self.cfg.lat_channel_round_trip;
            self.apply_outcome(kernel, &out);
            match res {
                Resolution::Conflict { .. } => {
                    conda_rollback_and_reexecute(&mut ep.conda).map_err(SimError::Conda)?;
                    self.counters.rollbacks += 1;
                    self.pim.consecutive_rollbacks += 1;
                    if self.pim.consecutive_rollbacks >= self.cfg.rollback_limit {
                        self.pim.cg_mode = true;
                        self.counters.cg_fallbacks += 1;
                    }
                    self.pim.started = false;
                    return Ok(());
                }
                Resolution::Committed { .. } => {
                    self.counters.epochs_committed += 1;
                    self.observations.append(&mut ep.observations);
                }
            }
        }
        for r in std::mem::take(&mut self.pim.locks) {
            let out = cg_release(&mut self.locks, Agent::Pim, r);
            self.apply_outcome(kernel, &out);
            self.lock_release_at = self.pim.time;
        }
        let start = self.pim.job_start.take().unwrap_or(self.pim.time);
        if let Some(k) = kernel {
            let ks = self.kernels.entry(k).or_default();
            ks.cycles += self.pim.time - start;
            ks.agent = Some(Agent::Pim);
        }
        if self.jobs[self.job_index()].offloaded {
            self.offload_done_at.push(self.pim.time);
        }
        self.pim.current = None;
        self.pim.done += 1;
        self.pim.pc = 0;
        self.pim.started = false;
        self.pim.cg_mode = false;
        self.pim.consecutive_rollbacks = 0;
        Ok(())
    }

    fn finish(mut self) -> Result<SimOutcome, SimError> {
        let pei_done = self.pmu.fence(0, 0);
        let total_cycles = self.cpu_time.max(self.pim.time).max(pei_done);

        let mut final_memory = BTreeMap::new();
        for (&pline, &vline) in &self.vline_of {
            final_memory.insert(vline, self.state.coherent_value(pline));
        }
        let report = MetricsReport {
            schema: REPORT_SCHEMA,
            mechanism: if self.plan.cpu_only {
                "cpu-only".to_string()
            } else {
                self.plan.mechanism.to_string()
            },
            config_digest: self.cfg.digest(),
            seed: self.plan.seed,
            total_cycles,
            per_kernel_cycles: self.kernels.iter().map(|(k, s)| (*k, s.cycles)).collect(),
            event_counts: self.ledger.counts(),
            energy: std::mem::take(&mut self.ledger),
            counters: std::mem::take(&mut self.counters),
        };
        Ok(SimOutcome {
            report,
            kernels: self.kernels,
            final_memory,
            observations: self.observations,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Blocker {
    Offload,
    Lock,
}

pub(super) fn run(cfg: &MachineConfig, trace: &Trace, plan: &Plan) -> Result<SimOutcome, SimError> {
    Engine::new(cfg, trace, plan)?.run()
}
