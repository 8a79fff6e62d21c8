// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::types::{PhysAddr, VirtAddr};

/// Which load-ordering rule an operation broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrderRule {
    /// Destination page is not above every page loaded so far.
    Descending,
    /// A page table was requested after data pages were loaded.
    TablesAfterData,
}

/// Error codes returned by the security monitor API and the machine model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Error)]
pub enum Error {
    #[error("physical address {0} is outside physical memory")]
    AddressOutOfRange(PhysAddr),
    #[error("page fault at {0}")]
    PageFault(VirtAddr),
    #[error("caller does not own the resource")]
    NotOwner,
    #[error("resource or object is in the wrong state for this call")]
    WrongState,
    #[error("resource is in active use")]
    InUse,
    #[error("concurrent operation holds a required lock; retry")]
    ConcurrentCall,
    #[error("only the untrusted OS may issue this call")]
    NotOS,
    #[error("only an enclave may issue this call")]
    NotEnclave,
    #[error("target protection domain does not exist")]
    NoSuchDomain,
    #[error("resource is not offered to the caller")]
    NotOffered,
    #[error("no such resource")]
    NoSuchResource,
    #[error("metadata address is not a free SM-owned slot")]
    BadAddress,
    #[error("malformed argument")]
    BadArgument,
    #[error("load order violated ({0:?})")]
    OrderViolation(OrderRule),
    #[error("virtual page is already mapped")]
    AliasViolation,
    #[error("enclave has no unconsumed physical memory left")]
    OutOfEnclaveMemory,
    #[error("enclave has no threads")]
    NoThreads,
    #[error("thread is already scheduled")]
    ThreadBusy,
    #[error("core is not available to the caller")]
    CoreBusy,
    #[error("core is not running an enclave")]
    NotInEnclave,
    #[error("enclave still has scheduled threads")]
    ThreadsScheduled,
    #[error("no such enclave")]
    NoSuchEnclave,
    #[error("no mailbox is accepting mail from the caller")]
    NotAccepting,
    #[error("message exceeds the mailbox buffer")]
    MessageTooLarge,
    #[error("mailbox is empty")]
    Empty,
    #[error("no such mailbox")]
    NoSuchMailbox,
    #[error("caller is not the signing enclave")]
    NotSigningEnclave,
    #[error("no such field")]
    NoSuchField,
}

impl Error {
    /// Stable name used in scenario expectations and traces.
    pub fn code(&self) -> &'static str {
        match self {
            Error::AddressOutOfRange(_) => "AddressOutOfRange",
            Error::PageFault(_) => "PageFault",
            Error::NotOwner => "NotOwner",
            Error::WrongState => "WrongState",
            Error::InUse => "InUse",
            Error::ConcurrentCall => "ConcurrentCall",
            Error::NotOS => "NotOS",
            Error::NotEnclave => "NotEnclave",
            Error::NoSuchDomain => "NoSuchDomain",
            Error::NotOffered => "NotOffered",
            Error::NoSuchResource => "NoSuchResource",
            Error::BadAddress => "BadAddress",
            Error::BadArgument => "BadArgument",
            Error::OrderViolation(_) => "OrderViolation",
            Error::AliasViolation => "AliasViolation",
            Error::OutOfEnclaveMemory => "OutOfEnclaveMemory",
            Error::NoThreads => "NoThreads",
            Error::ThreadBusy => "ThreadBusy",
            Error::CoreBusy => "CoreBusy",
            Error::NotInEnclave => "NotInEnclave",
            Error::ThreadsScheduled => "ThreadsScheduled",
            Error::NoSuchEnclave => "NoSuchEnclave",
            Error::NotAccepting => "NotAccepting",
            Error::MessageTooLarge => "MessageTooLarge",
            Error::Empty => "Empty",
            Error::NoSuchMailbox => "NoSuchMailbox",
            Error::NotSigningEnclave => "NotSigningEnclave",
            Error::NoSuchField => "NoSuchField",
        }
    }

    /// Identifier of the enclave-loading rule this error reports, if any.
    ///
    /// The offline measurement tool reports the same identifiers.
    pub fn load_rule(&self) -> Option<&'static str> {
        match self {
            Error::AliasViolation => Some("alias"),
            Error::OrderViolation(OrderRule::Descending) => Some("order"),
            Error::OrderViolation(OrderRule::TablesAfterData) => Some("data-before-tables"),
            Error::BadArgument => Some("argument"),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
