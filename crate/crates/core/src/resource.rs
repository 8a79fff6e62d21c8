// SPDX-License-Identifier: Apache-2.0

//! Resource ownership records and the transaction lock table.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::machine::MemoryUnit;
use crate::types::{parse_u64, CoreId, EnclaveId, PhysAddr, ProtectionDomain, ThreadId};

/// Resource addressing: the (type, rid) pair. Ordering is the canonical
/// lock-acquisition order (type first, then identifier).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResourceId {
    Core(CoreId),
    Region(u32),
    Interval(PhysAddr),
    Thread(ThreadId),
    Mailbox { eid: EnclaveId, index: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResourceType {
    Core,
    MemoryRegion,
    MemoryInterval,
    Thread,
    MailboxSlot,
}

impl ResourceId {
    pub fn rtype(&self) -> ResourceType {
        match self {
            ResourceId::Core(_) => ResourceType::Core,
            ResourceId::Region(_) => ResourceType::MemoryRegion,
            ResourceId::Interval(_) => ResourceType::MemoryInterval,
            ResourceId::Thread(_) => ResourceType::Thread,
            ResourceId::Mailbox { .. } => ResourceType::MailboxSlot,
        }
    }

    pub fn memory_unit(&self) -> Option<MemoryUnit> {
        match *self {
            ResourceId::Region(i) => Some(MemoryUnit::Region(i)),
            ResourceId::Interval(base) => Some(MemoryUnit::Interval(base)),
            _ => None,
        }
    }
}

impl From<MemoryUnit> for ResourceId {
    fn from(unit: MemoryUnit) -> Self {
        match unit {
            MemoryUnit::Region(i) => ResourceId::Region(i),
            MemoryUnit::Interval(base) => ResourceId::Interval(base),
        }
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceId::Core(c) => write!(f, "core:{}", c.0),
            ResourceId::Region(i) => write!(f, "region:{i}"),
            ResourceId::Interval(base) => write!(f, "interval:{base}"),
            ResourceId::Thread(tid) => write!(f, "thread:{tid}"),
            ResourceId::Mailbox { eid, index } => write!(f, "mailbox:{eid}:{index}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed resource id `{0}`")]
pub struct ParseResourceError(pub String);

impl FromStr for ResourceId {
    type Err = ParseResourceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParseResourceError(s.to_owned());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let num = |v: &str| parse_u64(v).map_err(|_| bad());
        Ok(match kind {
            "core" => ResourceId::Core(CoreId(num(rest)? as usize)),
            "region" => ResourceId::Region(u32::try_from(num(rest)?).map_err(|_| bad())?),
            "interval" => ResourceId::Interval(PhysAddr(num(rest)?)),
            "thread" => ResourceId::Thread(ThreadId(num(rest)?)),
            "mailbox" => {
                let (eid, index) = rest.split_once(':').ok_or_else(bad)?;
                ResourceId::Mailbox {
                    eid: EnclaveId(num(eid)?),
                    index: u32::try_from(num(index)?).map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        })
    }
}

/// Lifecycle state of a resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResourceState {
    Owned,
    Blocked,
    Clean,
    Offered(ProtectionDomain),
}

impl fmt::Display for ResourceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceState::Owned => f.write_str("owned"),
            ResourceState::Blocked => f.write_str("blocked"),
            ResourceState::Clean => f.write_str("clean"),
            ResourceState::Offered(to) => write!(f, "offered:{to}"),
        }
    }
}

impl FromStr for ResourceState {
    type Err = ParseResourceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "owned" => Ok(ResourceState::Owned),
            "blocked" => Ok(ResourceState::Blocked),
            "clean" => Ok(ResourceState::Clean),
            _ => match s.strip_prefix("offered:") {
                Some(to) => to
                    .parse()
                    .map(ResourceState::Offered)
                    .map_err(|_| ParseResourceError(s.to_owned())),
                None => Err(ParseResourceError(s.to_owned())),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResourceRecord {
    pub owner: ProtectionDomain,
    pub state: ResourceState,
}

impl ResourceRecord {
    pub const fn owned(owner: ProtectionDomain) -> Self {
        ResourceRecord {
            owner,
            state: ResourceState::Owned,
        }
    }

    /// Owned or Blocked by `domain`: the states in which `domain` holds it.
    pub fn held_by(&self, domain: ProtectionDomain) -> bool {
        self.owner == domain && matches!(self.state, ResourceState::Owned | ResourceState::Blocked)
    }
}

/// The monitor's map from each resource to its owner and state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ResourceMap {
    records: BTreeMap<ResourceId, ResourceRecord>,
}

impl ResourceMap {
    pub fn get(&self, id: &ResourceId) -> Option<&ResourceRecord> {
        self.records.get(id)
    }

    pub fn get_mut(&mut self, id: &ResourceId) -> Option<&mut ResourceRecord> {
        self.records.get_mut(id)
    }

    pub fn insert(&mut self, id: ResourceId, record: ResourceRecord) {
        self.records.insert(id, record);
    }

    pub fn remove(&mut self, id: &ResourceId) -> Option<ResourceRecord> {
        self.records.remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ResourceId, &ResourceRecord)> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Resources currently held (Owned or Blocked) by `domain`.
    pub fn held_by(&self, domain: ProtectionDomain) -> impl Iterator<Item = ResourceId> + '_ {
        self.records
            .iter()
            .filter(move |(_, r)| r.held_by(domain))
            .map(|(id, _)| *id)
    }
}

/// A transaction guard. Ordering is the global acquisition order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LockKey {
    /// Allocation of metadata slots in monitor memory.
    MetadataArena,
    Enclave(EnclaveId),
    Resource(ResourceId),
}

pub type TxId = u64;

/// Guards held by in-flight transactions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct LockTable {
    held: BTreeMap<LockKey, TxId>,
}

impl LockTable {
    /// Takes every key in `keys` for `tx`, or none of them.
    pub fn try_acquire(&mut self, tx: TxId, keys: &[LockKey]) -> bool {
        debug_assert!(keys.windows(2).all(|w| w[0] < w[1]), "keys must be sorted and unique");
        if keys.iter().any(|k| self.held.contains_key(k)) {
            return false;
        }
        for k in keys {
            self.held.insert(*k, tx);
        }
        true
    }

    pub fn release(&mut self, tx: TxId) {
        self.held.retain(|_, holder| *holder != tx);
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }

    pub fn holder(&self, key: &LockKey) -> Option<TxId> {
        self.held.get(key).copied()
    }
}
