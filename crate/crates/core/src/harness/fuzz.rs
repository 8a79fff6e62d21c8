// SPDX-License-Identifier: Apache-2.0

//! Randomized interrupt and fault injection against running enclaves.
//!
//! A campaign launches two enclaves on the desk machine and drives both
//! cores with random entries, register writes, interrupts, faults, exits
//! and resumes. A shadow model records the register file each AEX must
//! save; every step is checked against it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::loader::{load_manifest, Placement};
use crate::machine::MachineConfig;
use crate::manifest::Manifest;
use crate::monitor::{ApiCall, Caller, Disposition, MachineEvent, MemoryOp, MonitorOptions, SecurityMonitor, ThreadState};
use crate::resource::ResourceId;
use crate::types::{CoreId, EnclaveId, FaultKind, ProtectionDomain, RegisterFile, ThreadId, VirtAddr, AEX_FLAG_REGISTER};

/// Counts of what a campaign exercised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InjectionReport {
    /// Enclave to OS transitions: AEXs and exits.
    pub exits_to_os: usize,
    pub aex: usize,
    /// Entries of a thread holding a saved AEX snapshot.
    pub snapshot_reentries: usize,
    pub resumes: usize,
}

/// Builds the campaign machine: two enclaves, one thread each, idle.
pub fn injection_machine(options: MonitorOptions) -> (SecurityMonitor, Vec<(EnclaveId, ThreadId)>) {
    let mut sm = SecurityMonitor::boot(MachineConfig::desk(), options).expect("desk boots");
    let arena = sm.metadata_arena().base.0;
    let mut pairs = Vec::new();
    for (k, (variant, region)) in [(0u8, 6u32), (1, 5)].into_iter().enumerate() {
        let eid = EnclaveId(arena + 0x1000 * k as u64);
        let tid = ThreadId(eid.0 + 0x800);
        let placement = Placement {
            eid,
            tids: vec![tid],
            units: vec![ResourceId::Region(region)],
        };
        load_manifest(&mut sm, &Manifest::builtin_app(variant), &placement).expect("built-in app loads");
        pairs.push((eid, tid));
    }
    (sm, pairs)
}

/// Runs `steps` random steps from `seed`. Returns the first discrepancy
/// between the monitor and the shadow model.
pub fn interrupt_injection(seed: u64, steps: usize) -> Result<InjectionReport, String> {
    interrupt_injection_with(MonitorOptions::default(), seed, steps)
}

/// [`interrupt_injection`] against a monitor booted with `options`.
pub fn interrupt_injection_with(options: MonitorOptions, seed: u64, steps: usize) -> Result<InjectionReport, String> {
    let (mut sm, pairs) = injection_machine(options);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = InjectionReport::default();
    // tid -> (registers, pc) the last AEX must have saved.
    let mut shadow: BTreeMap<ThreadId, (RegisterFile, u64)> = BTreeMap::new();
    let cores = sm.machine().cores().len();

    for step in 0..steps {
        let core = CoreId(rng.gen_range(0..cores));
        let state = sm.machine().core(core).expect("core exists").clone();
        let fail = |what: String| Err(format!("seed {seed} step {step} core {}: {what}", core.0));

        let Some(tid) = state.current_thread.filter(|_| state.current_domain.is_enclave()) else {
            // The OS schedules an idle thread here.
            let idle: Vec<_> = pairs
                .iter()
                .filter(|(_, t)| sm.thread(*t).is_some_and(|m| m.state == ThreadState::Assigned))
                .collect();
            if idle.is_empty() {
                continue;
            }
            let (eid, tid) = *idle[rng.gen_range(0..idle.len())];
            let call = ApiCall::EnterEnclave {
                eid,
                tid,
                core,
            };
            if let Err(e) = sm.call(Caller::OS, call) {
                return fail(format!("enter_enclave refused: {e}"));
            }
            let t = sm.thread(tid).expect("thread exists");
            let c = sm.machine().core(core).unwrap();
            if let Some((regs, pc)) = shadow.get(&tid) {
                report.snapshot_reentries += 1;
                if !t.aex_present || t.aex_state != *regs || t.aex_pc != *pc {
                    return fail("saved AEX state changed while the thread was suspended".into());
                }
                if c.registers[AEX_FLAG_REGISTER] != 1 {
                    return fail("re-entry does not flag the pending AEX".into());
                }
            } else if c.registers.iter().any(|r| *r != 0) {
                return fail("fresh entry leaks register contents".into());
            }
            continue;
        };

        let eid = state.current_domain.enclave().expect("enclave domain");
        let caller = Caller::enclave(eid, core);
        let pre = sm.clone();
        let disposition = match rng.gen_range(0..8) {
            0 | 1 => {
                let mut regs = [0u64; crate::types::REGISTER_COUNT];
                rng.fill(&mut regs[..]);
                let c = sm.machine_mut().core_mut(core).unwrap();
                c.set_registers(regs);
                c.pc = 0x40_0000 + rng.gen_range(0..0x4000u64);
                continue;
            }
            2 => sm.handle_event(core, MachineEvent::Interrupt),
            3 => {
                let kind = FaultKind::ALL[rng.gen_range(0..FaultKind::ALL.len())];
                sm.handle_event(core, MachineEvent::EnclaveFault(kind))
            }
            4 => match sm.memory_access(core, VirtAddr(0x40_3000), MemoryOp::Read) {
                Ok(_) => return fail("unmapped enclave page was readable".into()),
                Err(d) => d,
            },
            5 => sm.handle_event(core, MachineEvent::Exit),
            6 => {
                let pending = pre.thread(tid).is_some_and(|t| t.aex_present);
                let r = sm.call(caller, ApiCall::ResumeAex);
                match (pending, &r) {
                    (true, Ok(_)) => {
                        report.resumes += 1;
                        let (regs, pc) = shadow.remove(&tid).expect("shadow tracks every AEX");
                        let c = sm.machine().core(core).unwrap();
                        if c.registers != regs || c.pc != pc {
                            return fail("resume_aex did not restore the saved registers".into());
                        }
                    }
                    (false, Err(_)) => {}
                    _ => return fail(format!("resume_aex with pending={pending} returned {r:?}")),
                }
                continue;
            }
            _ => {
                let _ = sm.call(caller, ApiCall::ResumeFromFault);
                continue;
            }
        };

        let post = sm.machine().core(core).unwrap();
        let left = post.current_domain == ProtectionDomain::UntrustedOS;
        match disposition {
            Disposition::DelegatedToOs { aex: true } => {
                report.aex += 1;
                let t = sm.thread(tid).expect("thread exists");
                if t.aex_state != state.registers || t.aex_pc != state.pc {
                    return fail("AEX saved something other than the interrupted registers".into());
                }
                shadow.insert(tid, (state.registers, state.pc));
            }
            Disposition::Returned(Ok(_)) if left => {
                // A voluntary exit discards any pending snapshot.
                shadow.remove(&tid);
                if sm.thread(tid).is_some_and(|t| t.aex_present) {
                    return fail("exit left an AEX snapshot pending".into());
                }
            }
            Disposition::EnclaveHandler(_) | Disposition::Returned(_) => {}
            Disposition::DelegatedToOs { aex: false } => return fail("enclave event delegated without an AEX".into()),
        }
        if left {
            report.exits_to_os += 1;
            if !post.registers_zero() || post.pc != 0 {
                return fail("OS-visible registers are not zero after leaving the enclave".into());
            }
            if sm.machine().tlb(core).entries_for(ProtectionDomain::Enclave(eid)) != 0 {
                return fail("enclave translations survive on the core".into());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::Mutation;

    #[test]
    fn campaigns_exercise_every_path() {
        let mut total = InjectionReport::default();
        for seed in 0..20 {
            let r = interrupt_injection(seed, 200).unwrap();
            total.aex += r.aex;
            total.exits_to_os += r.exits_to_os;
            total.snapshot_reentries += r.snapshot_reentries;
            total.resumes += r.resumes;
        }
        assert!(total.aex > 0 && total.snapshot_reentries > 0 && total.resumes > 0, "{total:?}");
        assert!(total.exits_to_os > total.aex);
    }

    #[test]
    fn broken_aex_paths_are_caught() {
        for m in [Mutation::SkipAexSave, Mutation::SkipCoreClean] {
            let options = MonitorOptions {
                mutations: [m].into(),
                ..MonitorOptions::default()
            };
            assert!((0..20).any(|seed| interrupt_injection_with(options.clone(), seed, 200).is_err()), "{m:?}");
        }
    }
}
