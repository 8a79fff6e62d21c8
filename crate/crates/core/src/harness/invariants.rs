// SPDX-License-Identifier: Apache-2.0

//! The registered invariant set, checked on every explored state and after
//! every scenario action.
//!
//! State invariants look at one state. Step invariants compare the states
//! before and after one action; they cover properties of transitions, such
//! as what an AEX saved.

use std::fmt;

use crate::machine::{Access, Grant};
use crate::monitor::{EnclaveState, MailboxState, SecurityMonitor, ThreadState};
use crate::resource::{ResourceId, ResourceState};
use crate::types::{AccessKind, CoreId, PhysAddr, ProtectionDomain, RegisterFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Invariant {
    OwnershipPartition,
    CleanBeforeReuse,
    SealMonotonicity,
    AexConfidentiality,
    ThreadExclusivity,
    SenderAuthenticity,
    KeyConfinement,
}

impl Invariant {
    pub const ALL: [Invariant; 7] = [
        Invariant::OwnershipPartition,
        Invariant::CleanBeforeReuse,
        Invariant::SealMonotonicity,
        Invariant::AexConfidentiality,
        Invariant::ThreadExclusivity,
        Invariant::SenderAuthenticity,
        Invariant::KeyConfinement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Invariant::OwnershipPartition => "ownership-partition",
            Invariant::CleanBeforeReuse => "clean-before-reuse",
            Invariant::SealMonotonicity => "seal-monotonicity",
            Invariant::AexConfidentiality => "aex-confidentiality",
            Invariant::ThreadExclusivity => "thread-exclusivity",
            Invariant::SenderAuthenticity => "sender-authenticity",
            Invariant::KeyConfinement => "key-confinement",
        }
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Violation {
    pub invariant: Invariant,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn fail(&mut self, invariant: Invariant, detail: impl Into<String>) {
        self.0.push(Violation {
            invariant,
            detail: detail.into(),
        });
    }
}

/// Checks every state invariant.
pub fn check_state(sm: &SecurityMonitor) -> Vec<Violation> {
    let mut c = Collector(Vec::new());
    ownership_partition(sm, &mut c);
    clean_before_reuse(sm, &mut c);
    seal_monotonicity(sm, &mut c);
    aex_confidentiality(sm, &mut c);
    thread_exclusivity(sm, &mut c);
    sender_authenticity(sm, &mut c);
    key_confinement(sm, &mut c);
    c.0
}

/// Checks the transition from `pre` to `post`.
pub fn check_step(pre: &SecurityMonitor, post: &SecurityMonitor) -> Vec<Violation> {
    let mut c = Collector(Vec::new());
    for (tid, after) in post.threads() {
        let Some(before) = pre.thread(*tid) else {
            continue;
        };
        // A fresh AEX must have saved exactly what the core held.
        if after.aex_present && !before.aex_present {
            if let Some(core) = before.core {
                let cs = pre.machine().core(core).expect("core exists");
                if cs.current_thread == Some(*tid) && (after.aex_state != cs.registers || after.aex_pc != cs.pc) {
                    c.fail(
                        Invariant::AexConfidentiality,
                        format!("AEX of thread {tid} on core {core} saved a different register file"),
                    );
                }
            }
        }
        // Resuming restores the snapshot byte for byte.
        if before.aex_present && !after.aex_present && after.state == ThreadState::Scheduled {
            if let Some(core) = after.core {
                let cs = post.machine().core(core).expect("core exists");
                let resumed = cs.current_thread == Some(*tid) && before.core == after.core;
                if resumed && (cs.registers != before.aex_state || cs.pc != before.aex_pc) {
                    c.fail(
                        Invariant::AexConfidentiality,
                        format!("thread {tid} resumed on core {core} with registers other than its AEX snapshot"),
                    );
                }
            }
        }
    }
    // Every enclave-to-OS transition leaves no register state behind.
    for (before, after) in pre.machine().cores().iter().zip(post.machine().cores()) {
        if before.current_domain.is_enclave()
            && after.current_domain == ProtectionDomain::UntrustedOS
            && !after.registers_zero()
        {
            c.fail(
                Invariant::AexConfidentiality,
                format!("core {} returned to the OS with nonzero registers", after.id),
            );
        }
    }
    c.0
}

fn expected_grant(owner: ProtectionDomain, state: ResourceState) -> Grant {
    match state {
        ResourceState::Owned | ResourceState::Blocked => Grant { owner, enabled: true },
        ResourceState::Clean => Grant {
            owner: ProtectionDomain::UntrustedOS,
            enabled: false,
        },
        ResourceState::Offered(to) => Grant { owner: to, enabled: false },
    }
}

fn ownership_partition(sm: &SecurityMonitor, c: &mut Collector) {
    const I: Invariant = Invariant::OwnershipPartition;
    let machine = sm.machine();
    let page = machine.page_size();
    for unit in machine.backend.units() {
        let id = ResourceId::from(unit);
        let Some(rec) = sm.resources().get(&id) else {
            c.fail(I, format!("{id} has no ownership record"));
            continue;
        };
        if machine.backend.grant(unit) != Some(expected_grant(rec.owner, rec.state)) {
            c.fail(I, format!("hardware grant of {id} disagrees with its record"));
        }
    }
    for (id, rec) in sm.resources().iter() {
        let mut domains = vec![rec.owner];
        if let ResourceState::Offered(to) = rec.state {
            domains.push(to);
        }
        for d in domains {
            if let Some(eid) = d.enclave() {
                if sm.enclave(eid).is_none() {
                    c.fail(I, format!("{id} refers to nonexistent enclave {eid}"));
                }
            }
        }
        if let ResourceId::Core(_) = id {
            if rec.owner != ProtectionDomain::UntrustedOS {
                c.fail(I, format!("{id} owned by {}", rec.owner));
            }
        }
        if let ResourceId::Thread(tid) = id {
            if sm.thread(*tid).is_none() {
                c.fail(I, format!("{id} has no metadata"));
            }
        }
    }
    for (eid, space) in machine.spaces() {
        let domain = ProtectionDomain::Enclave(eid);
        for (vpn, (ppn, _)) in &space.table.mapping {
            let held = sm
                .unit_record(PhysAddr(ppn * page))
                .is_some_and(|(_, r)| r.owner == domain && matches!(r.state, ResourceState::Owned | ResourceState::Blocked));
            if !held {
                c.fail(I, format!("enclave {eid} maps page {vpn:#x} to ppn {ppn:#x} it does not hold"));
            }
        }
    }
    for core in machine.cores() {
        for (domain, vpn, entry) in machine.tlb(core.id).entries() {
            let pa = PhysAddr(entry.ppn * page);
            if machine.check_access(domain, pa, AccessKind::Read) != Ok(Access::Allowed) {
                c.fail(
                    I,
                    format!("core {} caches a translation {vpn:#x} -> {pa} that {domain} may not use", core.id),
                );
            }
        }
        if let ProtectionDomain::Enclave(eid) = core.current_domain {
            let live = sm.enclave(eid).is_some_and(|e| e.state == EnclaveState::Initialized);
            let thread_ok = core
                .current_thread
                .and_then(|t| sm.thread(t))
                .is_some_and(|t| t.owner == Some(eid));
            if !live || !thread_ok {
                c.fail(I, format!("core {} runs enclave {eid} without a live owned thread", core.id));
            }
        }
    }
}

fn clean_before_reuse(sm: &SecurityMonitor, c: &mut Collector) {
    const I: Invariant = Invariant::CleanBeforeReuse;
    let machine = sm.machine();
    let page = machine.page_size();
    for unit in machine.backend.units() {
        let id = ResourceId::from(unit);
        let Some(rec) = sm.resources().get(&id) else { continue };
        let range = machine.backend.unit_range(unit).expect("unit has a range");
        let pages = range.base.0 / page..range.end() / page;
        match rec.state {
            ResourceState::Clean | ResourceState::Offered(_) => {
                if let Some(ppn) = pages.clone().find(|p| !machine.memory.is_zero_page(*p)) {
                    c.fail(I, format!("{id} is {} but page {ppn:#x} holds data", rec.state));
                }
            }
            ResourceState::Owned | ResourceState::Blocked if rec.owner.is_enclave() => {
                for ppn in pages {
                    let Some(frame) = machine.memory.frame(ppn) else { continue };
                    if let Some(w) = frame
                        .writers()
                        .iter()
                        .find(|w| **w != rec.owner && **w != ProtectionDomain::SecurityMonitor)
                    {
                        c.fail(I, format!("page {ppn:#x} of {} still holds data written by {w}", rec.owner));
                    }
                }
            }
            _ => {}
        }
    }
    for (id, rec) in sm.resources().iter() {
        if let ResourceId::Thread(tid) = id {
            let clean = matches!(rec.state, ResourceState::Clean | ResourceState::Offered(_));
            if clean && !sm.thread(*tid).is_some_and(|t| t.is_zeroed()) {
                c.fail(I, format!("thread {tid} is {} but its metadata is not scrubbed", rec.state));
            }
        }
    }
}

fn seal_monotonicity(sm: &SecurityMonitor, c: &mut Collector) {
    for (eid, e) in sm.enclaves() {
        let ok = match e.state {
            EnclaveState::Loading => e.final_measurement.is_none(),
            EnclaveState::Initialized | EnclaveState::Deleted => e.final_measurement == Some(e.measurement.peek()),
        };
        if !ok {
            c.fail(
                Invariant::SealMonotonicity,
                format!("enclave {eid} measurement changed after it was sealed"),
            );
        }
    }
}

fn aex_confidentiality(sm: &SecurityMonitor, c: &mut Collector) {
    for core in sm.machine().cores() {
        if core.current_domain != ProtectionDomain::UntrustedOS {
            continue;
        }
        if let Some(d) = core.register_taint.iter().find(|d| **d != ProtectionDomain::UntrustedOS) {
            c.fail(
                Invariant::AexConfidentiality,
                format!("OS-visible core {} holds register values of {d}", core.id),
            );
        }
    }
}

fn thread_exclusivity(sm: &SecurityMonitor, c: &mut Collector) {
    const I: Invariant = Invariant::ThreadExclusivity;
    let mut seen: Vec<(crate::types::ThreadId, CoreId)> = Vec::new();
    for core in sm.machine().cores() {
        let Some(tid) = core.current_thread else { continue };
        if let Some((_, other)) = seen.iter().find(|(t, _)| *t == tid) {
            c.fail(I, format!("thread {tid} runs on cores {other} and {}", core.id));
        }
        seen.push((tid, core.id));
        match sm.thread(tid) {
            Some(t) if t.state == ThreadState::Scheduled && t.core == Some(core.id) => {}
            _ => c.fail(I, format!("core {} runs thread {tid} not scheduled there", core.id)),
        }
    }
    for (tid, t) in sm.threads() {
        if t.state == ThreadState::Scheduled && !seen.iter().any(|(s, core)| s == tid && Some(*core) == t.core) {
            c.fail(I, format!("thread {tid} is scheduled but no core runs it"));
        }
    }
}

fn sender_authenticity(sm: &SecurityMonitor, c: &mut Collector) {
    const I: Invariant = Invariant::SenderAuthenticity;
    for (eid, e) in sm.enclaves() {
        for (i, m) in e.mailboxes.iter().enumerate() {
            if m.state != MailboxState::Full {
                continue;
            }
            let Some(sender) = m.sender else {
                c.fail(I, format!("mailbox {i} of {eid} is full without a sender"));
                continue;
            };
            if m.armed_for != Some(sender) {
                c.fail(I, format!("mailbox {i} of {eid} holds mail from {sender} it did not accept"));
            }
            let expected = match sender {
                ProtectionDomain::SecurityMonitor => Some([0; 32]),
                ProtectionDomain::Enclave(s) => match sm.enclave(s) {
                    Some(se) => se.final_measurement,
                    // The sender has since been torn down; nothing to compare.
                    None => continue,
                },
                ProtectionDomain::UntrustedOS => None,
            };
            if expected != Some(m.sender_measurement) {
                c.fail(I, format!("mailbox {i} of {eid} carries a measurement {sender} does not have"));
            }
        }
    }
}

fn contains_secret(words: &RegisterFile, secret: &[u8; 32]) -> bool {
    let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
    bytes.windows(32).any(|w| w == secret)
}

fn key_confinement(sm: &SecurityMonitor, c: &mut Collector) {
    const I: Invariant = Invariant::KeyConfinement;
    let secret = sm.attestation_secret();
    let signing = sm.signing_measurement();
    let is_signing = |d: ProtectionDomain| match d {
        ProtectionDomain::SecurityMonitor => true,
        ProtectionDomain::Enclave(eid) => sm.enclave(eid).is_some_and(|e| e.final_measurement == Some(signing)),
        ProtectionDomain::UntrustedOS => false,
    };
    let machine = sm.machine();
    for ppn in machine.memory.find(&secret) {
        let owner = machine.backend.owner_of(machine.page_addr(ppn));
        if !is_signing(owner) {
            c.fail(I, format!("attestation key found in page {ppn:#x} owned by {owner}"));
        }
    }
    for (eid, e) in sm.enclaves() {
        let leaked = e.mailboxes.iter().any(|m| m.message.windows(32).any(|w| w == secret));
        if leaked && !is_signing(ProtectionDomain::Enclave(*eid)) {
            c.fail(I, format!("attestation key delivered to a mailbox of {eid}"));
        }
    }
    for core in machine.cores() {
        if contains_secret(&core.registers, &secret) && !is_signing(core.current_domain) {
            c.fail(I, format!("attestation key in registers of core {} running {}", core.id, core.current_domain));
        }
    }
    for (tid, t) in sm.threads() {
        let saved = contains_secret(&t.aex_state, &secret) || contains_secret(&t.fault_state, &secret);
        let owner_ok = t.owner.is_some_and(|e| is_signing(ProtectionDomain::Enclave(e)));
        if saved && !owner_ok {
            c.fail(I, format!("attestation key saved in metadata of thread {tid}"));
        }
    }
}
