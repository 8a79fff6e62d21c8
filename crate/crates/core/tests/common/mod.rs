// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use sanctorum::harness::scenario::{run_scenario, RunOptions, RunReport, Scenario};
use sanctorum::harness::{load_manifest, Placement};
use sanctorum::machine::MachineConfig;
use sanctorum::manifest::Manifest;
use sanctorum::monitor::{ApiCall, Caller, MonitorOptions, SecurityMonitor};
use sanctorum::resource::ResourceId;
use sanctorum::types::{CoreId, Digest, EnclaveId, ThreadId};

/// Metadata slots in the desk machine's arena.
pub const E1: EnclaveId = EnclaveId(0x1000);
pub const T1: ThreadId = ThreadId(0x1800);
pub const E2: EnclaveId = EnclaveId(0x2000);
pub const T2: ThreadId = ThreadId(0x2800);
pub const E3: EnclaveId = EnclaveId(0x3000);
pub const T3: ThreadId = ThreadId(0x3800);

pub fn desk() -> SecurityMonitor {
    SecurityMonitor::boot(MachineConfig::desk(), MonitorOptions::default()).unwrap()
}

pub fn launch(sm: &mut SecurityMonitor, manifest: &Manifest, eid: EnclaveId, tid: ThreadId, region: u32) -> Digest {
    let placement = Placement {
        eid,
        tids: vec![tid],
        units: vec![ResourceId::Region(region)],
    };
    load_manifest(sm, manifest, &placement).unwrap()
}

pub fn enter(sm: &mut SecurityMonitor, eid: EnclaveId, tid: ThreadId, core: usize) {
    sm.call(
        Caller::OS,
        ApiCall::EnterEnclave {
            eid,
            tid,
            core: CoreId(core),
        },
    )
    .unwrap();
}

/// Runs a scenario script and panics with the failure if any step fails.
pub fn run_ok(text: &str) -> RunReport {
    let scenario = Scenario::parse(text, None).unwrap_or_else(|e| panic!("{e}"));
    run_scenario(&scenario, RunOptions::default()).unwrap_or_else(|f| panic!("{}", f.error))
}
