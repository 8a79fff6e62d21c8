// SPDX-License-Identifier: Apache-2.0

//! Trap dispatch: API calls, interrupts and faults arriving on a core.

use super::{ApiCall, ApiResult, Caller, SecurityMonitor};
use crate::error::Error;
use crate::types::{CoreId, FaultKind, ProtectionDomain, VirtAddr};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MachineEvent {
    SmApiCall(ApiCall),
    Interrupt,
    PageFault(VirtAddr),
    EnclaveFault(FaultKind),
    Exit,
}

/// What happened to an event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Disposition {
    /// An API call (or exit) completed with this result.
    Returned(ApiResult),
    /// Handed to the OS; `aex` is true if an enclave was suspended first.
    DelegatedToOs { aex: bool },
    /// An enclave fault handler now runs at this address.
    EnclaveHandler(VirtAddr),
}

/// A word-sized memory access issued by whatever runs on a core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemoryOp {
    Read,
    Write(u64),
}

impl SecurityMonitor {
    /// Dispatches an event trapped on `core`. Every (core state, event)
    /// pair has a disposition.
    pub fn handle_event(&mut self, core: CoreId, event: MachineEvent) -> Disposition {
        let Some(state) = self.machine.core(core) else {
            return Disposition::Returned(Err(Error::BadArgument));
        };
        let caller = Caller {
            domain: state.current_domain,
            core: Some(core),
        };
        let in_enclave = state.current_domain.is_enclave();
        match event {
            MachineEvent::SmApiCall(call) => Disposition::Returned(self.call(caller, call)),
            MachineEvent::Exit => Disposition::Returned(self.call(caller, ApiCall::ExitEnclave)),
            MachineEvent::Interrupt => {
                if in_enclave {
                    self.aex(core).expect("core runs an enclave");
                }
                Disposition::DelegatedToOs { aex: in_enclave }
            }
            MachineEvent::PageFault(_) => self.enclave_fault(core, FaultKind::PageFault),
            MachineEvent::EnclaveFault(kind) => self.enclave_fault(core, kind),
        }
    }

    fn enclave_fault(&mut self, core: CoreId, kind: FaultKind) -> Disposition {
        let state = self.machine.core(core).expect("valid core");
        let (ProtectionDomain::Enclave(_), Some(tid)) = (state.current_domain, state.current_thread) else {
            return Disposition::DelegatedToOs { aex: false };
        };
        let (regs, pc) = (state.registers, state.pc);
        let t = self.threads.get_mut(&tid).expect("running thread has metadata");
        match t.fault_handlers.get(&kind).copied() {
            // A fault inside a fault handler forces an AEX.
            Some(handler) if !t.in_fault_handler => {
                t.fault_state = regs;
                t.fault_pc = pc;
                t.in_fault_handler = true;
                self.machine.core_mut(core).unwrap().pc = handler.0;
                Disposition::EnclaveHandler(handler)
            }
            _ => {
                self.aex(core).expect("core runs an enclave");
                Disposition::DelegatedToOs { aex: true }
            }
        }
    }

    /// Performs a memory access for the domain active on `core`. A failed
    /// translation becomes a page-fault event; its disposition is returned
    /// as the error.
    pub fn memory_access(&mut self, core: CoreId, va: VirtAddr, op: MemoryOp) -> Result<u64, Disposition> {
        let result = match op {
            MemoryOp::Read => self.machine.core_read(core, va),
            MemoryOp::Write(value) => self.machine.core_write(core, va, value).map(|()| value),
        };
        match result {
            Ok(v) => Ok(v),
            Err(Error::PageFault(addr)) => Err(self.handle_event(core, MachineEvent::PageFault(addr))),
            Err(e) => Err(Disposition::Returned(Err(e))),
        }
    }
}
