// SPDX-License-Identifier: Apache-2.0

//! Mailboxes and the public-field API.
//!
//! Mailbox states are Closed, Accepting(sender) and Full. A recipient arms
//! a mailbox for one sender; only that sender can fill it, and the monitor
//! stamps the sender's measurement on the message.

use super::{ApiValue, Caller, EnclaveState, Mutation, SecurityMonitor};
use crate::error::{Error, Result};
use crate::resource::{ResourceId, ResourceState};
use crate::types::{Digest, EnclaveId, ProtectionDomain};

pub const MAILBOX_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum MailboxState {
    #[default]
    Closed,
    Accepting(ProtectionDomain),
    Full,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Mailbox {
    pub state: MailboxState,
    pub message: Vec<u8>,
    pub sender: Option<ProtectionDomain>,
    pub sender_measurement: Digest,
    /// Sender the mailbox was armed for when it was filled. Model
    /// bookkeeping for the invariant checker.
    pub armed_for: Option<ProtectionDomain>,
}

/// Public data exposed through `get_field`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum FieldId {
    PublicKey = 0,
    SmCertificate = 1,
    DeviceCertificate = 2,
    SmMeasurement = 3,
}

impl FieldId {
    pub fn from_u32(id: u32) -> Option<Self> {
        Some(match id {
            0 => FieldId::PublicKey,
            1 => FieldId::SmCertificate,
            2 => FieldId::DeviceCertificate,
            3 => FieldId::SmMeasurement,
            _ => return None,
        })
    }
}

impl SecurityMonitor {
    fn mailbox_usable(&self, eid: EnclaveId, index: u32) -> Result<()> {
        let e = &self.enclaves[&eid];
        if index >= e.mailbox_count {
            return Err(Error::NoSuchMailbox);
        }
        let rec = self.resources.get(&ResourceId::Mailbox { eid, index });
        if rec.map(|r| r.state) != Some(ResourceState::Owned) {
            return Err(Error::WrongState);
        }
        Ok(())
    }

    pub(super) fn accept_mail(&mut self, caller: &Caller, index: u32, sender: ProtectionDomain) -> Result<()> {
        let (eid, _, _) = self.running(caller)?;
        self.mailbox_usable(eid, index)?;
        if sender == ProtectionDomain::UntrustedOS {
            return Err(Error::BadArgument);
        }
        self.enclaves.get_mut(&eid).unwrap().mailboxes[index as usize] = super::Mailbox {
            state: MailboxState::Accepting(sender),
            ..Default::default()
        };
        Ok(())
    }

    /// Fills a mailbox of `recipient` armed for `sender`.
    fn deliver(&mut self, recipient: EnclaveId, sender: ProtectionDomain, message: &[u8], measurement: Digest) -> Result<()> {
        let skip_filter = self.mutated(Mutation::SkipSenderFilter);
        let e = &self.enclaves[&recipient];
        let usable = |i: usize| self.mailbox_usable(recipient, i as u32).is_ok();
        let index = e
            .mailboxes
            .iter()
            .enumerate()
            .position(|(i, m)| m.state == MailboxState::Accepting(sender) && usable(i))
            .or_else(|| (skip_filter && !e.mailboxes.is_empty() && usable(0)).then_some(0))
            .ok_or(Error::NotAccepting)?;
        let mailbox = &mut self.enclaves.get_mut(&recipient).unwrap().mailboxes[index];
        let armed_for = match mailbox.state {
            MailboxState::Accepting(d) => Some(d),
            _ => None,
        };
        *mailbox = super::Mailbox {
            state: MailboxState::Full,
            message: message.to_vec(),
            sender: Some(sender),
            sender_measurement: measurement,
            armed_for,
        };
        Ok(())
    }

    pub(super) fn send_mail(&mut self, caller: &Caller, recipient: EnclaveId, message: &[u8]) -> Result<()> {
        let (eid, _, _) = self.running(caller)?;
        match self.enclaves.get(&recipient) {
            Some(r) if r.state == EnclaveState::Initialized => {}
            _ => return Err(Error::NoSuchEnclave),
        }
        if message.len() > MAILBOX_SIZE {
            return Err(Error::MessageTooLarge);
        }
        let measurement = self.enclaves[&eid]
            .final_measurement
            .expect("a running enclave is initialized");
        self.deliver(recipient, caller.domain, message, measurement)
    }

    pub(super) fn get_mail(&mut self, caller: &Caller, index: u32) -> Result<ApiValue> {
        let (eid, _, _) = self.running(caller)?;
        self.mailbox_usable(eid, index)?;
        let mailbox = &mut self.enclaves.get_mut(&eid).unwrap().mailboxes[index as usize];
        if mailbox.state != MailboxState::Full {
            return Err(Error::Empty);
        }
        let taken = std::mem::take(mailbox);
        Ok(ApiValue::Mail {
            message: taken.message,
            sender: taken.sender.expect("full mailbox has a sender"),
            sender_measurement: taken.sender_measurement,
        })
    }

    /// Delivers the attestation key, as mail from the monitor, to the
    /// signing enclave.
    pub(super) fn get_attestation_key(&mut self, caller: &Caller) -> Result<()> {
        let (eid, _, _) = self.running(caller)?;
        let measurement = self.enclaves[&eid].final_measurement;
        if measurement != Some(self.signing_measurement()) && !self.mutated(Mutation::SkipSigningCheck) {
            return Err(Error::NotSigningEnclave);
        }
        let secret = self.attestation_secret();
        self.deliver(eid, ProtectionDomain::SecurityMonitor, &secret, [0; 32])
    }

    pub fn get_field(&self, id: u32) -> Result<Vec<u8>> {
        let identity = &self.platform.identity;
        Ok(match FieldId::from_u32(id).ok_or(Error::NoSuchField)? {
            FieldId::PublicKey => identity.public_key().to_vec(),
            FieldId::SmCertificate => identity.certificate().to_bytes().to_vec(),
            FieldId::DeviceCertificate => identity.device_certificate().to_bytes().to_vec(),
            FieldId::SmMeasurement => identity.sm_image_hash().to_vec(),
        })
    }
}
