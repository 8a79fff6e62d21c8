// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::BTreeMap;

use common::run_ok;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sanctorum::error::Error;
use sanctorum::harness::explore::alphabet;
use sanctorum::harness::interleave::{all_schedules, run_concurrent};
use sanctorum::harness::{
    action::apply, check_atomicity, check_state, check_step, explore, run_scenario, ExploreConfig, ExploreError,
    Invariant, RunOptions, Scenario, ScenarioError, Script, Trace,
};
use sanctorum::machine::MachineConfig;
use sanctorum::monitor::{ApiCall, Caller, Mutation, MonitorOptions, SecurityMonitor};
use sanctorum::resource::ResourceId;
use sanctorum::types::{CoreId, ProtectionDomain};

const ATTESTATION: &str = "machine desk
launch app0 eid=0x1000 tids=0x1800 units=region:6 => save A
launch signing eid=0x2000 tids=0x2800 units=region:5 => ok
os enter_enclave 0x1000 0x1800 0 => ok
os enter_enclave 0x2000 0x2800 1 => ok
signing-init core=1 => ok
signing-arm core=1 requester=0x1000 => ok
verifier V measurement=$A
attest-request core=0 signer=0x2000 verifier=V => ok
signing-serve core=1 => replied
attest-collect core=0 verifier=V => ok
verify V => ok
";

#[test]
fn traces_are_deterministic_and_roundtrip() {
    let s = Scenario::parse(ATTESTATION, None).unwrap();
    let opts = RunOptions { seed: Some(11), stress: false };
    let a = run_scenario(&s, opts).unwrap().trace;
    let b = run_scenario(&s, opts).unwrap().trace;
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let text = String::from_utf8(a.to_jsonl()).unwrap();
    assert_eq!(text.lines().count(), a.len());
    let back = Trace::from_jsonl(&text).unwrap();
    assert_eq!(back.to_jsonl(), a.to_jsonl());
    for (i, e) in a.events.iter().enumerate() {
        assert_eq!(e.index, i as u64);
        assert_eq!(e.state.len(), 64);
    }
    let other = run_scenario(&s, RunOptions { seed: Some(12), stress: false }).unwrap().trace;
    assert_ne!(other.to_jsonl(), a.to_jsonl());
}

#[test]
fn failed_assertion_keeps_the_partial_trace() {
    let s = Scenario::parse("machine desk\nos owner_of region:1 => ok\nos owner_of region:1 => err\n", None).unwrap();
    let failure = run_scenario(&s, RunOptions::default()).unwrap_err();
    assert!(matches!(failure.error, ScenarioError::AssertionFailed { line: 3, .. }));
    assert_eq!(failure.error.exit_code(), 1);
    assert_eq!(failure.trace.len(), 2);
    let parse = Scenario::parse("machine desk\nos owner_of", None).unwrap_err();
    assert_eq!(parse.exit_code(), 2);
}

#[test]
fn racing_conflicts_admit_one_winner() {
    run_ok(
        "machine desk
         race
           os block_resource region:3
           os block_resource region:3
         end => winners 1
         race
           os clean_resource region:3 => ok
           os block_resource region:4 => ok
         end => winners 2
         os owner_of region:3 => owner:os:clean
         os owner_of region:4 => owner:os:blocked",
    );
}

#[test]
fn stress_mode_races_real_threads() {
    let s = Scenario::parse(
        "machine desk
         race
           os block_resource region:2
           os block_resource region:2
           os block_resource region:2
         end => winners 1",
        None,
    )
    .unwrap();
    for _ in 0..20 {
        run_scenario(&s, RunOptions { seed: None, stress: true }).unwrap();
    }
}

#[test]
fn concurrent_callers_on_one_resource() {
    let sm = SecurityMonitor::boot(MachineConfig::desk(), MonitorOptions::default()).unwrap();
    let r = ResourceId::Region(4);
    let scripts: Vec<Script> = (0..4)
        .map(|_| Script {
            caller: Caller::OS,
            calls: vec![ApiCall::BlockResource(r)],
        })
        .collect();
    for _ in 0..25 {
        let (results, post) = run_concurrent(sm.clone(), &scripts);
        let wins = results.iter().filter(|r| r[0].is_ok()).count();
        assert_eq!(wins, 1, "{results:?}");
        for r in results.iter().filter(|r| r[0].is_err()) {
            assert!(matches!(r[0], Err(Error::ConcurrentCall) | Err(Error::WrongState)));
        }
        assert!(post.locks().is_empty());
    }
}

fn os_script(calls: Vec<ApiCall>) -> Script {
    Script { caller: Caller::OS, calls }
}

#[test]
fn three_call_scripts_are_serializable() {
    let sm = SecurityMonitor::boot(MachineConfig::minimal(), MonitorOptions::default()).unwrap();
    let (a, b) = (ResourceId::Region(2), ResourceId::Region(3));
    let scripts = [
        os_script(vec![ApiCall::BlockResource(a), ApiCall::CleanResource(a), ApiCall::GrantResource(a, ProtectionDomain::UntrustedOS)]),
        os_script(vec![ApiCall::BlockResource(b), ApiCall::CleanResource(a), ApiCall::OwnerOf(a)]),
    ];
    let report = check_atomicity(&sm, &scripts).unwrap();
    assert_eq!(report.schedules, all_schedules(&sm, &scripts).len());
    assert!(report.schedules > 100);
    assert!(report.distinct_states > 1);
}

#[test]
fn three_single_call_actors_are_serializable() {
    let sm = SecurityMonitor::boot(MachineConfig::minimal(), MonitorOptions::default()).unwrap();
    let r = ResourceId::Region(2);
    let scripts = [
        os_script(vec![ApiCall::BlockResource(r)]),
        os_script(vec![ApiCall::BlockResource(r)]),
        os_script(vec![ApiCall::OwnerOf(r)]),
    ];
    let report = check_atomicity(&sm, &scripts).unwrap();
    assert!(report.schedules >= 6);
}

#[test]
fn bounded_exploration_is_clean() {
    let report = explore(&ExploreConfig::minimal(4)).unwrap();
    assert!(report.violations.is_empty(), "{:?}", report.violations);
    assert!(report.states_visited > 1000);
    assert_eq!(report.depth, 4);
    let zero = explore(&ExploreConfig::minimal(0)).unwrap();
    assert_eq!((zero.states_visited, zero.transitions), (1, 0));
}

#[test]
fn exploration_budget_is_enforced() {
    let mut cfg = ExploreConfig::minimal(6);
    cfg.budget = 500;
    assert!(matches!(explore(&cfg), Err(ExploreError::BudgetExceeded { budget: 500, .. })));
}

#[test]
fn counterexamples_replay_as_scenarios() {
    let mut cfg = ExploreConfig::minimal(3).with_mutation(Mutation::SkipSealCheck);
    cfg.stop_on_violation = true;
    let report = explore(&cfg).unwrap();
    let cx = report.violated(Invariant::SealMonotonicity).expect("seal counterexample");
    assert!(cx.depth() <= 3);
    let text = cx.to_scenario("minimal", &cfg.options.mutations);
    let s = Scenario::parse(&text, None).unwrap();
    let failure = run_scenario(&s, RunOptions::default()).unwrap_err();
    assert!(matches!(failure.error, ScenarioError::InvariantViolation { .. }), "{}", failure.error);
    // The same actions are harmless on an intact monitor.
    let intact = text.lines().filter(|l| !l.starts_with("mutation")).collect::<Vec<_>>().join("\n");
    run_scenario(&Scenario::parse(&intact, None).unwrap(), RunOptions::default()).unwrap();
}

fn random_walk(seed: u64, steps: usize, sm: &mut SecurityMonitor) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = BTreeMap::new();
    for step in 0..steps {
        let actions = alphabet(sm);
        let action = &actions[rng.gen_range(0..actions.len())];
        let pre = sm.clone();
        apply(sm, action, &images);
        let mut v = check_step(&pre, sm);
        v.extend(check_state(sm));
        if let Some(v) = v.first() {
            return Err(format!("step {step} `{}`: {v}", action.render()));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn invariants_hold_along_random_walks(seed in any::<u64>()) {
        let mut sm = SecurityMonitor::boot(MachineConfig::minimal(), MonitorOptions::default()).unwrap();
        prop_assert_eq!(random_walk(seed, 40, &mut sm), Ok(()));
    }

    #[test]
    fn a_disabled_scrub_is_eventually_observable(seed in 0u64..4) {
        // Not every walk hits the bug; the deterministic search does.
        let mut sm = SecurityMonitor::boot(
            MachineConfig::minimal(),
            MonitorOptions { mutations: [Mutation::SkipScrub].into(), ..MonitorOptions::default() },
        ).unwrap();
        let _ = random_walk(seed, 10, &mut sm);
        let mut cfg = ExploreConfig::minimal(3).with_mutation(Mutation::SkipScrub);
        cfg.stop_on_violation = true;
        prop_assert!(!explore(&cfg).unwrap().violations.is_empty());
    }
}

#[test]
fn walks_on_the_desk_config_stay_clean() {
    for seed in 0..6 {
        let mut sm = SecurityMonitor::boot(MachineConfig::desk(), MonitorOptions::default()).unwrap();
        random_walk(seed, 60, &mut sm).unwrap();
    }
}

#[test]
fn core_registers_after_exit_are_os_visible_zero() {
    let report = run_ok(
        "machine desk
         launch app0 eid=0x1000 tids=0x1800 units=region:6 => ok
         os enter_enclave 0x1000 0x1800 1 => ok
         core 1 setregs 0xdead => ok
         core 1 exit_enclave => ok
         core 1 regs => regs:zero",
    );
    let core = report.monitor.machine().core(CoreId(1)).unwrap();
    assert_eq!(core.current_domain, ProtectionDomain::UntrustedOS);
}
