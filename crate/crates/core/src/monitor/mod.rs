// SPDX-License-Identifier: Apache-2.0

//! The security monitor: API dispatch, transactions and monitor state.
//!
//! Every API call runs as a transaction. [`SecurityMonitor::begin`] takes the
//! call's guards in canonical order or fails with [`Error::ConcurrentCall`]
//! without touching anything; [`SecurityMonitor::commit`] validates the call
//! against current state, applies it and releases the guards. Keeping the
//! two halves separate lets the harness interleave in-flight calls
//! deterministically.

mod enclave;
mod events;
mod mail;
mod resources;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

pub use enclave::{EnclaveMetadata, EnclaveState, ThreadMetadata, ThreadState};
pub use events::{Disposition, MachineEvent, MemoryOp};
pub use mail::{FieldId, Mailbox, MailboxState, MAILBOX_SIZE};

use crate::crypto::{derive_sm_identity, DeviceIdentity, Entropy, SmIdentity};
use crate::error::{Error, Result};
use crate::machine::{ConfigError, Grant, Machine, MachineConfig, MemoryUnit};
use crate::manifest::Manifest;
use crate::resource::{LockKey, LockTable, ResourceId, ResourceMap, ResourceRecord, ResourceState, TxId};
use crate::types::{
    CoreId, Digest, EnclaveId, FaultHandlers, Perms, PhysAddr, PhysRange, ProtectionDomain, ThreadId,
    VirtAddr, VirtRange,
};

/// Bytes of monitor memory taken by an enclave's fixed metadata.
pub const ENCLAVE_METADATA_BASE: u64 = 512;
/// Additional bytes of enclave metadata per mailbox.
pub const MAILBOX_METADATA_SIZE: u64 = 576;
pub const THREAD_METADATA_SIZE: u64 = 768;
pub const METADATA_ALIGN: u64 = 64;
pub const MAX_MAILBOXES: u32 = 8;

/// The monitor image measured at boot unless the configuration supplies one.
pub const DEFAULT_SM_IMAGE: &[u8] = b"sanctorum security monitor reference image, build 1";

pub fn enclave_metadata_size(mailbox_count: u32) -> u64 {
    ENCLAVE_METADATA_BASE + MAILBOX_METADATA_SIZE * u64::from(mailbox_count)
}

/// Deliberately broken monitor checks, used to test that the explorer
/// notices when a check is missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mutation {
    SkipScrub,
    SkipTlbShootdown,
    SkipCoreClean,
    SkipAexSave,
    SkipSealCheck,
    SkipThreadBusyCheck,
    SkipSenderFilter,
    SkipSigningCheck,
}

impl Mutation {
    pub const ALL: [Mutation; 8] = [
        Mutation::SkipScrub,
        Mutation::SkipTlbShootdown,
        Mutation::SkipCoreClean,
        Mutation::SkipAexSave,
        Mutation::SkipSealCheck,
        Mutation::SkipThreadBusyCheck,
        Mutation::SkipSenderFilter,
        Mutation::SkipSigningCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::SkipScrub => "skip-scrub",
            Mutation::SkipTlbShootdown => "skip-tlb-shootdown",
            Mutation::SkipCoreClean => "skip-core-clean",
            Mutation::SkipAexSave => "skip-aex-save",
            Mutation::SkipSealCheck => "skip-seal-check",
            Mutation::SkipThreadBusyCheck => "skip-thread-busy-check",
            Mutation::SkipSenderFilter => "skip-sender-filter",
            Mutation::SkipSigningCheck => "skip-signing-check",
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mutation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mutation `{s}`"))
    }
}

/// Boot-time options for a monitor instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorOptions {
    pub allow_post_init_accept: bool,
    /// Label from which the simulated device fuses are derived.
    pub device_label: String,
    pub sm_image: Vec<u8>,
    /// Seed for the entropy source; `None` draws from the host.
    pub seed: Option<u64>,
    pub mutations: BTreeSet<Mutation>,
}

impl Default for MonitorOptions {
    fn default() -> Self {
        MonitorOptions {
            allow_post_init_accept: true,
            device_label: "sanctorum-sim-device-0".into(),
            sm_image: DEFAULT_SM_IMAGE.to_vec(),
            seed: Some(0),
            mutations: BTreeSet::new(),
        }
    }
}

/// Immutable facts fixed at boot.
#[derive(Debug)]
struct Platform {
    options: MonitorOptions,
    device: DeviceIdentity,
    identity: SmIdentity,
    signing_measurement: Digest,
}

/// Who is making an API call. Enclave callers are identified by the core
/// they run on; the monitor checks the core really runs that enclave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Caller {
    pub domain: ProtectionDomain,
    pub core: Option<CoreId>,
}

impl Caller {
    pub const OS: Caller = Caller {
        domain: ProtectionDomain::UntrustedOS,
        core: None,
    };

    pub fn enclave(eid: EnclaveId, core: CoreId) -> Self {
        Caller {
            domain: ProtectionDomain::Enclave(eid),
            core: Some(core),
        }
    }
}

/// A monitor API call with its arguments.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ApiCall {
    BlockResource(ResourceId),
    CleanResource(ResourceId),
    GrantResource(ResourceId, ProtectionDomain),
    AcceptResource(ResourceId),
    OwnerOf(ResourceId),
    CreateEnclave {
        eid: EnclaveId,
        evrange: VirtRange,
        mailbox_count: u32,
    },
    AllocatePageTable {
        eid: EnclaveId,
        vaddr: VirtAddr,
    },
    LoadPage {
        eid: EnclaveId,
        vaddr: VirtAddr,
        src: PhysAddr,
        dest: PhysAddr,
        perms: Perms,
    },
    ShareMemory {
        eid: EnclaveId,
        pa: PhysAddr,
    },
    CreateThread {
        eid: EnclaveId,
        tid: ThreadId,
        entry_point: VirtAddr,
        fault_handlers: FaultHandlers,
    },
    InitEnclave(EnclaveId),
    EnterEnclave {
        eid: EnclaveId,
        tid: ThreadId,
        core: CoreId,
    },
    ExitEnclave,
    DeleteEnclave(EnclaveId),
    AcceptThread {
        tid: ThreadId,
        entry_point: VirtAddr,
        fault_handlers: FaultHandlers,
    },
    MapPage {
        vaddr: VirtAddr,
        pa: PhysAddr,
        perms: Perms,
    },
    ResumeAex,
    ResumeFromFault,
    GetRandom,
    AcceptMail {
        index: u32,
        sender: ProtectionDomain,
    },
    SendMail {
        recipient: EnclaveId,
        message: Vec<u8>,
    },
    GetMail(u32),
    GetAttestationKey,
    GetField(u32),
}

impl ApiCall {
    pub fn name(&self) -> &'static str {
        match self {
            ApiCall::BlockResource(_) => "block_resource",
            ApiCall::CleanResource(_) => "clean_resource",
            ApiCall::GrantResource(..) => "grant_resource",
            ApiCall::AcceptResource(_) => "accept_resource",
            ApiCall::OwnerOf(_) => "owner_of",
            ApiCall::CreateEnclave { .. } => "create_enclave",
            ApiCall::AllocatePageTable { .. } => "allocate_page_table",
            ApiCall::LoadPage { .. } => "load_page",
            ApiCall::ShareMemory { .. } => "share_memory",
            ApiCall::CreateThread { .. } => "create_thread",
            ApiCall::InitEnclave(_) => "init_enclave",
            ApiCall::EnterEnclave { .. } => "enter_enclave",
            ApiCall::ExitEnclave => "exit_enclave",
            ApiCall::DeleteEnclave(_) => "delete_enclave",
            ApiCall::AcceptThread { .. } => "accept_thread",
            ApiCall::MapPage { .. } => "map_page",
            ApiCall::ResumeAex => "resume_aex",
            ApiCall::ResumeFromFault => "resume_from_fault",
            ApiCall::GetRandom => "get_random",
            ApiCall::AcceptMail { .. } => "accept_mail",
            ApiCall::SendMail { .. } => "send_mail",
            ApiCall::GetMail(_) => "get_mail",
            ApiCall::GetAttestationKey => "get_attestation_key",
            ApiCall::GetField(_) => "get_field",
        }
    }
}

/// Successful API results.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ApiValue {
    Unit,
    Measurement(Digest),
    Owner {
        owner: ProtectionDomain,
        state: ResourceState,
    },
    Mail {
        message: Vec<u8>,
        sender: ProtectionDomain,
        sender_measurement: Digest,
    },
    Bytes(Vec<u8>),
    Random([u8; 32]),
}

pub type ApiResult = Result<ApiValue>;

/// An in-flight API call holding its guards.
#[derive(Debug)]
#[must_use = "a transaction holds locks until committed or aborted"]
pub struct Transaction {
    id: TxId,
    caller: Caller,
    call: ApiCall,
}

impl Transaction {
    pub fn call(&self) -> &ApiCall {
        &self.call
    }
}

/// Complete monitor and machine state.
#[derive(Debug, Clone)]
pub struct SecurityMonitor {
    platform: Arc<Platform>,
    machine: Machine,
    resources: ResourceMap,
    enclaves: BTreeMap<EnclaveId, EnclaveMetadata>,
    threads: BTreeMap<ThreadId, ThreadMetadata>,
    locks: LockTable,
    entropy: Entropy,
    /// Transaction counter. Not part of the abstract state.
    next_tx: TxId,
}

impl PartialEq for SecurityMonitor {
    fn eq(&self, other: &Self) -> bool {
        self.machine == other.machine
            && self.resources == other.resources
            && self.enclaves == other.enclaves
            && self.threads == other.threads
            && self.locks == other.locks
            && self.entropy == other.entropy
    }
}

impl Eq for SecurityMonitor {}

impl Hash for SecurityMonitor {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.machine.hash(state);
        self.resources.hash(state);
        self.enclaves.hash(state);
        self.threads.hash(state);
        self.locks.hash(state);
        self.entropy.hash(state);
    }
}

impl SecurityMonitor {
    /// Secure boot: derives the monitor's identity, reserves monitor memory
    /// and hands everything else to the OS.
    pub fn boot(config: MachineConfig, options: MonitorOptions) -> Result<Self, ConfigError> {
        let mut machine = Machine::new(config)?;
        let device = DeviceIdentity::simulated(&options.device_label);
        let identity = derive_sm_identity(&device, &options.sm_image);
        let config = machine.config().clone();

        let signing_measurement = Manifest::signing_enclave()
            .expected_measurement(config.page_size, identity.sm_image_hash(), config.capabilities())
            .expect("built-in signing enclave manifest is well formed");

        let sm = config.sm_range();
        let image_len = options.sm_image.len().min(config.page_size as usize);
        machine.memory.write(sm.base, &options.sm_image[..image_len], ProtectionDomain::SecurityMonitor);

        let mut resources = ResourceMap::default();
        for core in 0..config.core_count {
            resources.insert(
                ResourceId::Core(CoreId(core)),
                ResourceRecord::owned(ProtectionDomain::UntrustedOS),
            );
        }
        for unit in machine.backend.units() {
            let owner = machine.backend.grant(unit).expect("unit from backend").owner;
            resources.insert(unit.into(), ResourceRecord::owned(owner));
        }

        let entropy = match options.seed {
            Some(seed) => Entropy::seeded(seed),
            None => Entropy::System,
        };
        Ok(SecurityMonitor {
            platform: Arc::new(Platform {
                options,
                device,
                identity,
                signing_measurement,
            }),
            machine,
            resources,
            enclaves: BTreeMap::new(),
            threads: BTreeMap::new(),
            locks: LockTable::default(),
            entropy,
            next_tx: 1,
        })
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    /// Direct access to the simulated hardware, for actors that touch
    /// memory and registers without going through the monitor.
    pub fn machine_mut(&mut self) -> &mut Machine {
        &mut self.machine
    }

    pub fn options(&self) -> &MonitorOptions {
        &self.platform.options
    }

    pub fn mutated(&self, m: Mutation) -> bool {
        self.platform.options.mutations.contains(&m)
    }

    pub fn resources(&self) -> &ResourceMap {
        &self.resources
    }

    pub fn enclaves(&self) -> &BTreeMap<EnclaveId, EnclaveMetadata> {
        &self.enclaves
    }

    pub fn enclave(&self, eid: EnclaveId) -> Option<&EnclaveMetadata> {
        self.enclaves.get(&eid)
    }

    pub fn threads(&self) -> &BTreeMap<ThreadId, ThreadMetadata> {
        &self.threads
    }

    pub fn thread(&self, tid: ThreadId) -> Option<&ThreadMetadata> {
        self.threads.get(&tid)
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    pub fn sm_public_key(&self) -> [u8; 32] {
        self.platform.identity.public_key()
    }

    pub fn sm_identity(&self) -> &SmIdentity {
        &self.platform.identity
    }

    pub fn device_public_key(&self) -> [u8; 32] {
        self.platform.device.public_key()
    }

    /// Measurement the monitor recognizes as the signing enclave.
    pub fn signing_measurement(&self) -> Digest {
        self.platform.signing_measurement
    }

    /// Capability bitmask absorbed into every enclave's Create record.
    pub fn capabilities(&self) -> u64 {
        self.machine.config().capabilities()
    }

    pub(crate) fn attestation_secret(&self) -> [u8; 32] {
        self.platform.identity.attestation_secret()
    }

    /// Metadata arena: monitor memory minus the page holding the monitor image.
    pub fn metadata_arena(&self) -> PhysRange {
        let sm = self.machine.config().sm_range();
        let page = self.machine.page_size();
        PhysRange::new(sm.base.0 + page, sm.len - page)
    }

    /// Live metadata structures as (address, size).
    pub fn metadata_allocations(&self) -> Vec<PhysRange> {
        let mut out: Vec<PhysRange> = self
            .enclaves
            .values()
            .map(|e| PhysRange::new(e.eid.0, enclave_metadata_size(e.mailbox_count)))
            .chain(
                self.threads
                    .keys()
                    .map(|t| PhysRange::new(t.0, THREAD_METADATA_SIZE)),
            )
            .collect();
        out.sort();
        out
    }

    /// Lowest free, aligned metadata slot of `size` bytes.
    pub fn free_metadata_slot(&self, size: u64) -> Option<PhysAddr> {
        let arena = self.metadata_arena();
        let used = self.metadata_allocations();
        let mut addr = arena.base.0;
        while addr + size <= arena.end() {
            let candidate = PhysRange::new(addr, size);
            match used.iter().find(|r| r.overlaps(&candidate)) {
                None => return Some(PhysAddr(addr)),
                Some(r) => addr = r.end().div_ceil(METADATA_ALIGN) * METADATA_ALIGN,
            }
        }
        None
    }

    fn check_metadata_slot(&self, addr: PhysAddr, size: u64) -> Result<()> {
        let slot = PhysRange::new(addr.0, size);
        let arena = self.metadata_arena();
        let inside = addr.is_aligned(METADATA_ALIGN) && addr.0 >= arena.base.0 && slot.end() <= arena.end();
        if !inside || self.machine.backend_owner_of(addr)? != ProtectionDomain::SecurityMonitor {
            return Err(Error::BadAddress);
        }
        if self.metadata_allocations().iter().any(|r| r.overlaps(&slot)) {
            return Err(Error::BadAddress);
        }
        Ok(())
    }

    /// Physical pages of every unit `eid` holds in the Owned state, ascending.
    pub fn enclave_pages(&self, eid: EnclaveId) -> Vec<u64> {
        let owner = ProtectionDomain::Enclave(eid);
        let mut pages = Vec::new();
        for (id, rec) in self.resources.iter() {
            if rec.owner != owner || rec.state != ResourceState::Owned {
                continue;
            }
            if let Some(range) = id.memory_unit().and_then(|u| self.machine.backend.unit_range(u)) {
                let page = self.machine.page_size();
                pages.extend(range.base.0 / page..range.end() / page);
            }
        }
        pages.sort_unstable();
        pages
    }

    /// Memory unit containing `pa` and its record.
    pub fn unit_record(&self, pa: PhysAddr) -> Option<(MemoryUnit, &ResourceRecord)> {
        let unit = self.machine.backend.unit_of(pa)?;
        Some((unit, self.resources.get(&unit.into())?))
    }

    /// Reprograms the isolation hardware for `unit` from its record.
    fn sync_grant(&mut self, unit: MemoryUnit) {
        let rec = *self.resources.get(&unit.into()).expect("memory unit has a record");
        let grant = match rec.state {
            ResourceState::Owned | ResourceState::Blocked => Grant {
                owner: rec.owner,
                enabled: true,
            },
            ResourceState::Clean => Grant {
                owner: ProtectionDomain::UntrustedOS,
                enabled: false,
            },
            ResourceState::Offered(to) => Grant {
                owner: to,
                enabled: false,
            },
        };
        self.machine.backend.set_grant(unit, grant);
    }

    /// The enclave and thread a caller runs as. Enclave callers must be
    /// the domain currently active on the core they name.
    fn running(&self, caller: &Caller) -> Result<(EnclaveId, CoreId, ThreadId)> {
        let eid = caller.domain.enclave().ok_or(Error::NotEnclave)?;
        let core = caller.core.ok_or(Error::NotInEnclave)?;
        let state = self.machine.core(core).ok_or(Error::BadArgument)?;
        match (state.current_domain, state.current_thread) {
            (ProtectionDomain::Enclave(e), Some(tid)) if e == eid => Ok((eid, core, tid)),
            _ => Err(Error::NotInEnclave),
        }
    }

    fn require_os(caller: &Caller) -> Result<()> {
        if caller.domain == ProtectionDomain::UntrustedOS {
            Ok(())
        } else {
            Err(Error::NotOS)
        }
    }

    /// Guards a call needs, in canonical order.
    fn lock_keys(&self, caller: &Caller, call: &ApiCall) -> Vec<LockKey> {
        use LockKey::{Enclave, MetadataArena, Resource};
        let running = self.running(caller).ok();
        let mut keys = match call {
            ApiCall::BlockResource(id) | ApiCall::AcceptResource(id) => vec![Resource(*id)],
            ApiCall::CleanResource(id) => {
                let mut k = vec![Resource(*id)];
                if let Some(eid) = self.resources.get(id).and_then(|r| r.owner.enclave()) {
                    k.push(Enclave(eid));
                }
                k
            }
            ApiCall::GrantResource(id, to) => {
                let mut k = vec![Resource(*id)];
                if let Some(eid) = to.enclave() {
                    k.push(Enclave(eid));
                }
                k
            }
            ApiCall::OwnerOf(_) | ApiCall::GetField(_) | ApiCall::GetRandom => vec![],
            ApiCall::CreateEnclave { eid, .. } => vec![MetadataArena, Enclave(*eid)],
            ApiCall::AllocatePageTable { eid, .. }
            | ApiCall::LoadPage { eid, .. }
            | ApiCall::ShareMemory { eid, .. }
            | ApiCall::InitEnclave(eid) => vec![Enclave(*eid)],
            ApiCall::CreateThread { eid, tid, .. } => {
                vec![MetadataArena, Enclave(*eid), Resource(ResourceId::Thread(*tid))]
            }
            ApiCall::EnterEnclave { eid, tid, core } => vec![
                Enclave(*eid),
                Resource(ResourceId::Core(*core)),
                Resource(ResourceId::Thread(*tid)),
            ],
            ApiCall::ExitEnclave | ApiCall::ResumeAex | ApiCall::ResumeFromFault => match running {
                Some((_, core, tid)) => vec![
                    Resource(ResourceId::Core(core)),
                    Resource(ResourceId::Thread(tid)),
                ],
                None => vec![],
            },
            ApiCall::DeleteEnclave(eid) => {
                let mut k = vec![Enclave(*eid)];
                k.extend(
                    self.resources
                        .held_by(ProtectionDomain::Enclave(*eid))
                        .map(Resource),
                );
                k
            }
            ApiCall::AcceptThread { tid, .. } => {
                let mut k = vec![Resource(ResourceId::Thread(*tid))];
                k.extend(running.map(|(e, _, _)| Enclave(e)));
                k
            }
            ApiCall::MapPage { .. } => running.map(|(e, _, _)| vec![Enclave(e)]).unwrap_or_default(),
            ApiCall::AcceptMail { index, .. } | ApiCall::GetMail(index) => running
                .map(|(eid, _, _)| {
                    vec![Resource(ResourceId::Mailbox { eid, index: *index })]
                })
                .unwrap_or_default(),
            ApiCall::SendMail { recipient, .. } => {
                let sender = caller.domain;
                self.enclaves
                    .get(recipient)
                    .and_then(|e| {
                        e.mailboxes
                            .iter()
                            .position(|m| m.state == MailboxState::Accepting(sender))
                    })
                    .map(|i| {
                        vec![Resource(ResourceId::Mailbox {
                            eid: *recipient,
                            index: i as u32,
                        })]
                    })
                    .unwrap_or_default()
            }
            ApiCall::GetAttestationKey => running
                .and_then(|(eid, _, _)| {
                    let e = self.enclaves.get(&eid)?;
                    let i = e.mailboxes.iter().position(|m| {
                        m.state == MailboxState::Accepting(ProtectionDomain::SecurityMonitor)
                    })?;
                    Some(vec![Resource(ResourceId::Mailbox {
                        eid,
                        index: i as u32,
                    })])
                })
                .unwrap_or_default(),
        };
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    /// Starts a transaction: acquires every guard `call` needs, or none.
    pub fn begin(&mut self, caller: Caller, call: ApiCall) -> Result<Transaction> {
        let keys = self.lock_keys(&caller, &call);
        let id = self.next_tx;
        if !self.locks.try_acquire(id, &keys) {
            return Err(Error::ConcurrentCall);
        }
        self.next_tx += 1;
        Ok(Transaction { id, caller, call })
    }

    /// Validates and applies an in-flight call, then releases its guards.
    pub fn commit(&mut self, tx: Transaction) -> ApiResult {
        let result = self.execute(&tx.caller, &tx.call);
        self.locks.release(tx.id);
        result
    }

    /// Releases a transaction's guards without applying it.
    pub fn abort(&mut self, tx: Transaction) {
        self.locks.release(tx.id);
    }

    /// Issues one API call as a complete transaction.
    pub fn call(&mut self, caller: Caller, call: ApiCall) -> ApiResult {
        let tx = self.begin(caller, call)?;
        self.commit(tx)
    }

    fn execute(&mut self, caller: &Caller, call: &ApiCall) -> ApiResult {
        match caller.domain {
            ProtectionDomain::SecurityMonitor => return Err(Error::BadArgument),
            ProtectionDomain::Enclave(_) => {
                self.running(caller)?;
            }
            ProtectionDomain::UntrustedOS => {}
        }
        let unit = |r: Result<()>| r.map(|()| ApiValue::Unit);
        match call {
            ApiCall::BlockResource(id) => unit(self.block_resource(caller, *id)),
            ApiCall::CleanResource(id) => unit(self.clean_resource(caller, *id)),
            ApiCall::GrantResource(id, to) => unit(self.grant_resource(caller, *id, *to)),
            ApiCall::AcceptResource(id) => unit(self.accept_resource(caller, *id)),
            ApiCall::OwnerOf(id) => {
                let (owner, state) = self.owner_of(*id)?;
                Ok(ApiValue::Owner { owner, state })
            }
            ApiCall::CreateEnclave {
                eid,
                evrange,
                mailbox_count,
            } => unit(self.create_enclave(caller, *eid, *evrange, *mailbox_count)),
            ApiCall::AllocatePageTable { eid, vaddr } => unit(self.allocate_page_table(caller, *eid, *vaddr)),
            ApiCall::LoadPage {
                eid,
                vaddr,
                src,
                dest,
                perms,
            } => unit(self.load_page(caller, *eid, *vaddr, *src, *dest, *perms)),
            ApiCall::ShareMemory { eid, pa } => unit(self.share_memory(caller, *eid, *pa)),
            ApiCall::CreateThread {
                eid,
                tid,
                entry_point,
                fault_handlers,
            } => unit(self.create_thread(caller, *eid, *tid, *entry_point, fault_handlers)),
            ApiCall::InitEnclave(eid) => self.init_enclave(caller, *eid).map(ApiValue::Measurement),
            ApiCall::EnterEnclave { eid, tid, core } => unit(self.enter_enclave(caller, *eid, *tid, *core)),
            ApiCall::ExitEnclave => unit(self.exit_enclave(caller)),
            ApiCall::DeleteEnclave(eid) => unit(self.delete_enclave(caller, *eid)),
            ApiCall::AcceptThread {
                tid,
                entry_point,
                fault_handlers,
            } => unit(self.accept_thread(caller, *tid, *entry_point, fault_handlers)),
            ApiCall::MapPage { vaddr, pa, perms } => unit(self.map_page(caller, *vaddr, *pa, *perms)),
            ApiCall::ResumeAex => unit(self.resume_aex(caller)),
            ApiCall::ResumeFromFault => unit(self.resume_from_fault(caller)),
            ApiCall::GetRandom => {
                self.running(caller)?;
                Ok(ApiValue::Random(self.entropy.bytes32()))
            }
            ApiCall::AcceptMail { index, sender } => unit(self.accept_mail(caller, *index, *sender)),
            ApiCall::SendMail { recipient, message } => unit(self.send_mail(caller, *recipient, message)),
            ApiCall::GetMail(index) => self.get_mail(caller, *index),
            ApiCall::GetAttestationKey => unit(self.get_attestation_key(caller)),
            ApiCall::GetField(id) => self.get_field(*id).map(ApiValue::Bytes),
        }
    }
}

/// A monitor shared between genuinely concurrent callers.
///
/// Each call takes the state lock to begin its transaction, drops it, and
/// retakes it to commit, so transactions from different threads overlap
/// and conflicting ones fail with [`Error::ConcurrentCall`].
#[derive(Debug)]
pub struct ConcurrentMonitor {
    inner: Mutex<SecurityMonitor>,
}

impl ConcurrentMonitor {
    pub fn new(monitor: SecurityMonitor) -> Self {
        ConcurrentMonitor {
            inner: Mutex::new(monitor),
        }
    }

    pub fn call(&self, caller: Caller, call: ApiCall) -> ApiResult {
        let tx = self.inner.lock().unwrap().begin(caller, call)?;
        std::thread::yield_now();
        self.inner.lock().unwrap().commit(tx)
    }

    pub fn into_inner(self) -> SecurityMonitor {
        self.inner.into_inner().unwrap()
    }

    pub fn snapshot(&self) -> SecurityMonitor {
        self.inner.lock().unwrap().clone()
    }
}
