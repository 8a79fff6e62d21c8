// SPDX-License-Identifier: Apache-2.0

//! Interleaved execution of racing actors and the serializability check.
//!
//! Each actor runs an ordered list of calls. A call is two steps, `begin`
//! then `commit`; a `begin` refused with `ConcurrentCall` ends the call in
//! one step. A schedule is the sequence of actor indices taking steps.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::error::Error;
use crate::monitor::{ApiCall, ApiResult, Caller, SecurityMonitor, Transaction};
use crate::statehash::state_digest;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Script {
    pub caller: Caller,
    pub calls: Vec<ApiCall>,
}

pub type Schedule = Vec<usize>;

/// (actor, call index) in a merged serial order.
type Step = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterleaveError {
    #[error("schedule step {step} names actor {actor}, which has no step left")]
    BadSchedule { step: usize, actor: usize },
    #[error("schedule ends with unfinished actors")]
    Incomplete,
    #[error("schedule {schedule:?} is not equivalent to any serial execution: {detail}")]
    AtomicityViolation { schedule: Schedule, detail: String },
}

/// Results of one interleaved run.
#[derive(Debug, Clone)]
pub struct InterleavedRun {
    pub schedule: Schedule,
    /// Per actor, one result per call in program order.
    pub results: Vec<Vec<ApiResult>>,
    pub state: SecurityMonitor,
}

struct Actor {
    next: usize,
    pending: Option<Transaction>,
}

struct Execution {
    sm: SecurityMonitor,
    actors: Vec<Actor>,
    results: Vec<Vec<ApiResult>>,
}

impl Execution {
    fn new(sm: &SecurityMonitor, scripts: &[Script]) -> Self {
        Execution {
            sm: sm.clone(),
            actors: scripts.iter().map(|_| Actor { next: 0, pending: None }).collect(),
            results: scripts.iter().map(|_| Vec::new()).collect(),
        }
    }

    fn runnable(&self, scripts: &[Script], actor: usize) -> bool {
        let a = &self.actors[actor];
        a.pending.is_some() || a.next < scripts[actor].calls.len()
    }

    fn step(&mut self, scripts: &[Script], actor: usize) {
        let a = &mut self.actors[actor];
        match a.pending.take() {
            Some(tx) => {
                self.results[actor].push(self.sm.commit(tx));
                a.next += 1;
            }
            None => {
                let script = &scripts[actor];
                match self.sm.begin(script.caller, script.calls[a.next].clone()) {
                    Ok(tx) => a.pending = Some(tx),
                    Err(e) => {
                        self.results[actor].push(Err(e));
                        a.next += 1;
                    }
                }
            }
        }
    }
}

/// Runs `scripts` under `schedule`.
pub fn run_schedule(sm: &SecurityMonitor, scripts: &[Script], schedule: &[usize]) -> Result<InterleavedRun, InterleaveError> {
    let mut ex = Execution::new(sm, scripts);
    for (step, &actor) in schedule.iter().enumerate() {
        if actor >= scripts.len() || !ex.runnable(scripts, actor) {
            return Err(InterleaveError::BadSchedule { step, actor });
        }
        ex.step(scripts, actor);
    }
    if (0..scripts.len()).any(|a| ex.runnable(scripts, a)) {
        return Err(InterleaveError::Incomplete);
    }
    Ok(InterleavedRun {
        schedule: schedule.to_vec(),
        results: ex.results,
        state: ex.sm,
    })
}

/// Round robin, one step per actor per turn. For single-call actors this
/// is every `begin` followed by every `commit`: maximal contention.
pub fn canonical_schedule(sm: &SecurityMonitor, scripts: &[Script]) -> Schedule {
    let mut ex = Execution::new(sm, scripts);
    let mut schedule = Vec::new();
    loop {
        let mut progressed = false;
        for actor in 0..scripts.len() {
            if ex.runnable(scripts, actor) {
                ex.step(scripts, actor);
                schedule.push(actor);
                progressed = true;
            }
        }
        if !progressed {
            return schedule;
        }
    }
}

/// Every complete schedule, in lexicographic order.
pub fn all_schedules(sm: &SecurityMonitor, scripts: &[Script]) -> Vec<Schedule> {
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    extend(sm, scripts, &mut prefix, &mut out);
    out
}

fn extend(sm: &SecurityMonitor, scripts: &[Script], prefix: &mut Schedule, out: &mut Vec<Schedule>) {
    // Transactions cannot be cloned, so each node replays its prefix.
    let mut ex = Execution::new(sm, scripts);
    for &a in prefix.iter() {
        ex.step(scripts, a);
    }
    let next: Vec<usize> = (0..scripts.len()).filter(|a| ex.runnable(scripts, *a)).collect();
    if next.is_empty() {
        out.push(prefix.clone());
        return;
    }
    for a in next {
        prefix.push(a);
        extend(sm, scripts, prefix, out);
        prefix.pop();
    }
}

/// Serial outcomes for the calls selected by `mask`, one per order that
/// respects each actor's program order.
/// Per-call results of one serial order, and the final state.
type SerialOutcome = (Vec<Vec<Option<ApiResult>>>, SecurityMonitor);

fn serial_outcomes(sm: &SecurityMonitor, scripts: &[Script], mask: &[Vec<bool>]) -> Vec<SerialOutcome> {
    let selected: Vec<Vec<usize>> = mask
        .iter()
        .map(|m| m.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect())
        .collect();
    let mut out = Vec::new();
    let mut order = Vec::new();
    let mut taken = vec![0usize; scripts.len()];
    merges(&selected, &mut taken, &mut order, &mut |order| {
        let mut state = sm.clone();
        let mut results: Vec<Vec<Option<ApiResult>>> = scripts.iter().map(|s| vec![None; s.calls.len()]).collect();
        for &(actor, call) in order {
            let s = &scripts[actor];
            results[actor][call] = Some(state.call(s.caller, s.calls[call].clone()));
        }
        out.push((results, state));
    });
    out
}

fn merges(
    selected: &[Vec<usize>],
    taken: &mut [usize],
    order: &mut Vec<Step>,
    visit: &mut dyn FnMut(&[Step]),
) {
    let mut any = false;
    for a in 0..selected.len() {
        if taken[a] < selected[a].len() {
            any = true;
            order.push((a, selected[a][taken[a]]));
            taken[a] += 1;
            merges(selected, taken, order, visit);
            taken[a] -= 1;
            order.pop();
        }
    }
    if !any {
        visit(order);
    }
}

/// Summary of an exhaustive interleaving check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomicityReport {
    pub schedules: usize,
    /// Distinct final states across all schedules.
    pub distinct_states: usize,
}

/// Enumerates every schedule and checks each against the serial executions
/// of the calls it did not refuse.
pub fn check_atomicity(sm: &SecurityMonitor, scripts: &[Script]) -> Result<AtomicityReport, InterleaveError> {
    let mut serial_cache = SerialCache::new();
    let schedules = all_schedules(sm, scripts);
    let mut finals = std::collections::BTreeSet::new();
    for schedule in &schedules {
        let run = run_schedule(sm, scripts, schedule)?;
        check_serializable(sm, scripts, &run, &mut serial_cache)?;
        finals.insert(state_digest(&run.state));
    }
    Ok(AtomicityReport {
        schedules: schedules.len(),
        distinct_states: finals.len(),
    })
}

type SerialCache = BTreeMap<Vec<Vec<bool>>, Vec<SerialOutcome>>;

fn check_serializable(
    sm: &SecurityMonitor,
    scripts: &[Script],
    run: &InterleavedRun,
    cache: &mut SerialCache,
) -> Result<(), InterleaveError> {
    let mask: Vec<Vec<bool>> = run
        .results
        .iter()
        .map(|rs| rs.iter().map(|r| *r != Err(Error::ConcurrentCall)).collect())
        .collect();
    let serials = cache
        .entry(mask.clone())
        .or_insert_with(|| serial_outcomes(sm, scripts, &mask));
    let matches = serials.iter().any(|(results, state)| {
        *state == run.state
            && run.results.iter().zip(results).all(|(got, want)| {
                got.iter()
                    .zip(want)
                    .all(|(g, w)| w.as_ref().map_or(*g == Err(Error::ConcurrentCall), |w| w == g))
            })
    });
    if matches {
        Ok(())
    } else {
        Err(InterleaveError::AtomicityViolation {
            schedule: run.schedule.clone(),
            detail: format!("results {:?}", run.results),
        })
    }
}

/// Runs every script on its own OS thread against a shared monitor.
pub fn run_concurrent(sm: SecurityMonitor, scripts: &[Script]) -> (Vec<Vec<ApiResult>>, SecurityMonitor) {
    let shared = crate::monitor::ConcurrentMonitor::new(sm);
    let barrier = std::sync::Barrier::new(scripts.len());
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = scripts
            .iter()
            .map(|s| {
                let shared = &shared;
                let barrier = &barrier;
                scope.spawn(move || {
                    barrier.wait();
                    s.calls.iter().map(|c| shared.call(s.caller, c.clone())).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("actor thread")).collect()
    });
    (results, shared.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::MachineConfig;
    use crate::monitor::MonitorOptions;
    use crate::resource::ResourceId;

    fn booted() -> SecurityMonitor {
        SecurityMonitor::boot(MachineConfig::minimal(), MonitorOptions::default()).unwrap()
    }

    fn os(calls: Vec<ApiCall>) -> Script {
        Script { caller: Caller::OS, calls }
    }

    #[test]
    fn schedule_counts_for_two_single_call_actors() {
        let sm = booted();
        let r = ResourceId::Region(2);
        let scripts = [os(vec![ApiCall::BlockResource(r)]), os(vec![ApiCall::OwnerOf(ResourceId::Region(3))])];
        // Disjoint guards: both calls take two steps, C(4,2) orders.
        assert_eq!(all_schedules(&sm, &scripts).len(), 6);
        let run = run_schedule(&sm, &scripts, &canonical_schedule(&sm, &scripts)).unwrap();
        assert!(run.results.iter().all(|r| r[0].is_ok()));
    }

    #[test]
    fn conflicting_begin_fails_fast() {
        let sm = booted();
        let r = ResourceId::Region(2);
        let scripts = [os(vec![ApiCall::BlockResource(r)]), os(vec![ApiCall::BlockResource(r)])];
        let run = run_schedule(&sm, &scripts, &[0, 1, 0]).unwrap();
        assert_eq!(run.results[1], vec![Err(Error::ConcurrentCall)]);
        assert!(run_schedule(&sm, &scripts, &[0, 1, 1]).is_err());
        let report = check_atomicity(&sm, &scripts).unwrap();
        assert!(report.schedules >= 3);
    }
}
