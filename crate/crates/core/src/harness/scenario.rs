// SPDX-License-Identifier: Apache-2.0

//! Scenario scripts: a machine, actors' actions, and expected outcomes.
//!
//! One directive per line; `#` starts a comment.
//!
//! ```text
//! machine minimal|desk|sanctum|desk-intervals
//! seed 7
//! option allow_post_init_accept=false
//! mutation skip-scrub
//! manifest app = app.manifest            # path relative to the scenario
//!
//! let E = 0x4000                         # also: $a+0x800, measure IMAGE
//! launch app eid=$E units=region:2 => save M
//! os block_resource region:2 => err:InUse
//! core 1 get_mail 0 => mail:enclave:0x4000:$M
//! race
//!   os clean_resource region:3
//!   os clean_resource region:3
//! end => winners 1
//! ```
//!
//! Expectations: `ok`, `err`, `any`, `save NAME` (stores the last `:` field
//! of the result), or a result text matched exactly or as a prefix ending
//! at a `:`. Built-in variables: `$arena`, `$device_key`, `$sm_key`,
//! `$sm_hash`, `$caps`, `$signing_measurement`.
//!
//! Attestation programs run as directives:
//!
//! ```text
//! signing-init core=N
//! signing-arm core=N requester=EID
//! verifier NAME measurement=HEX [device-key=HEX]
//! attest-request core=N signer=EID verifier=NAME [measurement=HEX]
//! signing-serve core=N                   # replied | refused
//! attest-collect core=N verifier=NAME
//! verify NAME                            # ok | err:REASON
//! export-bundle NAME
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::attestation::{self, AttestationBundle, ProtocolError, RemoteVerifier, RequesterState, ServeOutcome};
use crate::crypto::Entropy;
use crate::harness::action::{apply, caller_on, Action, Outcome};
use crate::harness::interleave::{canonical_schedule, check_atomicity, run_concurrent, run_schedule, Script};
use crate::harness::invariants::{check_state, check_step, Violation};
use crate::harness::trace::Trace;
use crate::machine::MachineConfig;
use crate::manifest::Manifest;
use crate::monitor::{Caller, Mutation, MonitorOptions, SecurityMonitor};
use crate::types::{parse_u64, CoreId, Digest, EnclaveId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}, event {event}: expected `{expected}`, got `{actual}`")]
    AssertionFailed {
        line: usize,
        event: usize,
        expected: String,
        actual: String,
    },
    #[error("line {line}: invariant violated: {violation}")]
    InvariantViolation { line: usize, violation: Violation },
    #[error("line {line}: {detail}")]
    AtomicityViolation { line: usize, detail: String },
}

impl ScenarioError {
    /// Process exit code for the failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Parse { .. } => 2,
            _ => 1,
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Ok,
    Err,
    Any,
    Save(String),
    Text(String),
}

impl Expect {
    fn parse(s: &str) -> Result<Expect, String> {
        let words: Vec<&str> = s.split_whitespace().collect();
        Ok(match words.as_slice() {
            [] => return Err("empty expectation".into()),
            ["ok"] => Expect::Ok,
            ["err"] => Expect::Err,
            ["any"] => Expect::Any,
            ["save", name] if is_ident(name) => Expect::Save(name.to_string()),
            ["save", ..] => return Err("`save` takes one variable name".into()),
            [text] => Expect::Text(text.to_string()),
            _ => return Err(format!("bad expectation `{s}`")),
        })
    }
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expect::Ok => f.write_str("ok"),
            Expect::Err => f.write_str("err"),
            Expect::Any => f.write_str("any"),
            Expect::Save(n) => write!(f, "save {n}"),
            Expect::Text(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaceLine {
    pub line: usize,
    pub words: Vec<String>,
    pub expect: Option<Expect>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepKind {
    Let { name: String, value: String },
    Action(Vec<String>),
    Race { lines: Vec<RaceLine>, winners: Option<usize> },
    Directive { name: String, args: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub kind: StepKind,
    pub expect: Option<Expect>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config_name: String,
    pub config: MachineConfig,
    pub options: MonitorOptions,
    pub manifests: BTreeMap<String, Manifest>,
    pub steps: Vec<Step>,
}

const DIRECTIVES: [&str; 8] = [
    "signing-init",
    "signing-arm",
    "verifier",
    "attest-request",
    "signing-serve",
    "attest-collect",
    "verify",
    "export-bundle",
];

const BUILTIN_VARS: [&str; 6] = ["arena", "device_key", "sm_key", "sm_hash", "caps", "signing_measurement"];

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Machine presets by scenario name.
pub fn machine_config(name: &str) -> Option<MachineConfig> {
    Some(match name {
        "minimal" => MachineConfig::minimal(),
        "desk" => MachineConfig::desk(),
        "sanctum" => MachineConfig::sanctum(),
        "desk-intervals" | "intervals" => MachineConfig::desk_intervals(),
        _ => return None,
    })
}

/// Names of `$VAR` references in `s`.
fn references(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(i) = rest.find('$') {
        let tail = &rest[i + 1..];
        let end = tail
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(tail.len());
        out.push(tail[..end].to_string());
        rest = &tail[end..];
    }
    out
}

fn substitute(s: &str, vars: &BTreeMap<String, String>) -> Result<String, String> {
    let mut out = String::new();
    let mut rest = s;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let tail = &rest[i + 1..];
        let end = tail
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(tail.len());
        let name = &tail[..end];
        out.push_str(vars.get(name).ok_or_else(|| format!("undefined variable `${name}`"))?);
        rest = &tail[end..];
    }
    out.push_str(rest);
    Ok(out)
}

fn split_expect(line: &str) -> (&str, Option<&str>) {
    match line.split_once("=>") {
        Some((body, exp)) => (body.trim(), Some(exp.trim())),
        None => (line.trim(), None),
    }
}

/// Tracks which variables are defined while parsing, and the literal
/// values of those that can be resolved statically.
struct Scope {
    defined: BTreeSet<String>,
    literal: BTreeMap<String, String>,
}

impl Scope {
    fn check(&self, line: usize, text: &str) -> Result<(), ScenarioError> {
        match references(text).into_iter().find(|r| !self.defined.contains(r)) {
            Some(r) => Err(parse_err(line, format!("undefined variable `${r}`"))),
            None => Ok(()),
        }
    }

    /// Parses an action now if every variable in it has a static value.
    fn validate_action(&self, line: usize, words: &[String]) -> Result<(), ScenarioError> {
        let text = words.join(" ");
        self.check(line, &text)?;
        if let Ok(resolved) = substitute(&text, &self.literal) {
            let w: Vec<&str> = resolved.split_whitespace().collect();
            Action::parse(&w).map_err(|m| parse_err(line, m))?;
        }
        Ok(())
    }

    fn define(&mut self, name: &str, literal: Option<String>) {
        self.defined.insert(name.to_string());
        match literal {
            Some(v) => self.literal.insert(name.to_string(), v),
            None => self.literal.remove(name),
        };
    }
}

impl Scenario {
    pub fn from_file(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| parse_err(0, format!("{}: {e}", path.display())))?;
        Scenario::parse(&text, path.parent())
    }

    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
        let mut config_name = None;
        let mut options = MonitorOptions::default();
        let mut manifests = BTreeMap::new();
        let mut steps: Vec<Step> = Vec::new();
        let mut race: Option<(usize, Vec<RaceLine>)> = None;
        let mut scope = Scope {
            defined: BUILTIN_VARS.iter().map(|s| s.to_string()).collect(),
            literal: BTreeMap::new(),
        };

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (body, expect_text) = split_expect(content);
            let words: Vec<String> = body.split_whitespace().map(str::to_string).collect();
            let header = steps.is_empty() && race.is_none();
            let first = words.first().map(String::as_str).unwrap_or("");
            // `end` carries a winner count, not a result expectation.
            let expect = match expect_text {
                Some(_) if race.is_some() && first == "end" => None,
                Some(t) => Some(Expect::parse(t).map_err(|m| parse_err(line, m))?),
                None => None,
            };
            if let Some(e) = &expect {
                scope.check(line, &e.to_string())?;
            }

            if let Some((_, lines)) = race.as_mut() {
                if first == "end" {
                    let winners = match expect_text.map(|e| e.split_whitespace().collect::<Vec<_>>()) {
                        None => None,
                        Some(w) if w.len() == 2 && w[0] == "winners" => {
                            Some(w[1].parse().map_err(|_| parse_err(line, "bad winner count"))?)
                        }
                        Some(_) => return Err(parse_err(line, "`end` takes `=> winners N`")),
                    };
                    if words.len() != 1 {
                        return Err(parse_err(line, "`end` takes no arguments"));
                    }
                    let (start, lines) = race.take().unwrap();
                    if lines.len() < 2 {
                        return Err(parse_err(start, "a race needs at least two actions"));
                    }
                    steps.push(Step {
                        line: start,
                        kind: StepKind::Race { lines, winners },
                        expect: None,
                    });
                    continue;
                }
                if !matches!(first, "os" | "core") {
                    return Err(parse_err(line, "a race holds only `os` and `core` API calls"));
                }
                scope.validate_action(line, &words)?;
                if let Some(Expect::Save(n)) = &expect {
                    return Err(parse_err(line, format!("cannot save `{n}` inside a race")));
                }
                lines.push(RaceLine { line, words, expect });
                continue;
            }

            let no_expect = |what: &str| -> Result<(), ScenarioError> {
                if expect.is_some() {
                    Err(parse_err(line, format!("`{what}` takes no expectation")))
                } else {
                    Ok(())
                }
            };
            match first {
                "machine" | "seed" | "option" | "mutation" | "manifest" if !header => {
                    return Err(parse_err(line, format!("`{first}` must precede the first step")));
                }
                "machine" => {
                    no_expect("machine")?;
                    if words.len() != 2 {
                        return Err(parse_err(line, "`machine` takes one name"));
                    }
                    if config_name.is_some() {
                        return Err(parse_err(line, "machine given twice"));
                    }
                    machine_config(&words[1]).ok_or_else(|| parse_err(line, format!("unknown machine `{}`", words[1])))?;
                    config_name = Some(words[1].clone());
                }
                "seed" => {
                    no_expect("seed")?;
                    let seed = words
                        .get(1)
                        .filter(|_| words.len() == 2)
                        .and_then(|s| parse_u64(s).ok())
                        .ok_or_else(|| parse_err(line, "`seed` takes one number"))?;
                    options.seed = Some(seed);
                }
                "option" => {
                    no_expect("option")?;
                    for w in &words[1..] {
                        let (k, v) = w.split_once('=').ok_or_else(|| parse_err(line, format!("bad option `{w}`")))?;
                        match k {
                            "allow_post_init_accept" => {
                                options.allow_post_init_accept =
                                    v.parse().map_err(|_| parse_err(line, format!("bad boolean `{v}`")))?
                            }
                            "device_label" => options.device_label = v.to_string(),
                            "sm_image" => {
                                options.sm_image = crate::harness::action::parse_bytes(v).map_err(|m| parse_err(line, m))?
                            }
                            _ => return Err(parse_err(line, format!("unknown option `{k}`"))),
                        }
                    }
                }
                "mutation" => {
                    no_expect("mutation")?;
                    for w in &words[1..] {
                        options.mutations.insert(w.parse::<Mutation>().map_err(|m| parse_err(line, m))?);
                    }
                }
                "manifest" => {
                    no_expect("manifest")?;
                    let (name, path) = match words.as_slice() {
                        [_, name, eq, path] if eq == "=" => (name, path),
                        _ => return Err(parse_err(line, "expected `manifest NAME = PATH`")),
                    };
                    let full = base_dir.map_or_else(|| Path::new(path).to_path_buf(), |d| d.join(path));
                    let m = Manifest::from_file(&full).map_err(|e| parse_err(line, format!("{}: {e}", full.display())))?;
                    manifests.insert(name.clone(), m);
                }
                "let" => {
                    no_expect("let")?;
                    let (name, value) = match words.as_slice() {
                        [_, name, eq, rest @ ..] if eq == "=" && !rest.is_empty() && is_ident(name) => {
                            (name.clone(), rest.join(" "))
                        }
                        _ => return Err(parse_err(line, "expected `let NAME = VALUE`")),
                    };
                    scope.check(line, &value)?;
                    let literal = if let Some(image) = value.strip_prefix("measure ") {
                        let image = image.trim();
                        if !manifests.contains_key(image) && crate::harness::action::builtin_image(image).is_none() {
                            return Err(parse_err(line, format!("unknown image `{image}`")));
                        }
                        None
                    } else {
                        substitute(&value, &scope.literal).ok().map(|v| eval_sum(&v))
                    };
                    scope.define(&name, literal);
                    steps.push(Step {
                        line,
                        kind: StepKind::Let { name, value },
                        expect: None,
                    });
                }
                "race" => {
                    no_expect("race")?;
                    if words.len() != 1 {
                        return Err(parse_err(line, "`race` takes no arguments"));
                    }
                    race = Some((line, Vec::new()));
                }
                "end" => return Err(parse_err(line, "`end` without `race`")),
                d if DIRECTIVES.contains(&d) => {
                    scope.check(line, body)?;
                    validate_directive(line, d, &words[1..])?;
                    if let Some(Expect::Save(n)) = &expect {
                        scope.define(n, None);
                    }
                    steps.push(Step {
                        line,
                        kind: StepKind::Directive {
                            name: d.to_string(),
                            args: words[1..].to_vec(),
                        },
                        expect,
                    });
                }
                _ => {
                    scope.validate_action(line, &words)?;
                    if let Some(Expect::Save(n)) = &expect {
                        scope.define(n, None);
                    }
                    steps.push(Step {
                        line,
                        kind: StepKind::Action(words),
                        expect,
                    });
                }
            }
        }
        if let Some((start, _)) = race {
            return Err(parse_err(start, "`race` without `end`"));
        }
        let config_name = config_name.unwrap_or_else(|| "desk".into());
        let config = machine_config(&config_name).expect("validated");
        Ok(Scenario {
            config_name,
            config,
            options,
            manifests,
            steps,
        })
    }
}

/// `A+B` of two numbers becomes their hex sum; anything else is kept.
fn eval_sum(v: &str) -> String {
    if let Some((a, b)) = v.split_once('+') {
        if let (Ok(a), Ok(b)) = (parse_u64(a.trim()), parse_u64(b.trim())) {
            return format!("{:#x}", a.wrapping_add(b));
        }
    }
    v.to_string()
}

fn directive_keys(name: &str) -> (&'static [&'static str], &'static [&'static str]) {
    // (required, optional)
    match name {
        "signing-init" | "signing-serve" => (&["core"], &[]),
        "signing-arm" => (&["core", "requester"], &[]),
        "verifier" => (&["measurement"], &["device-key"]),
        "attest-request" => (&["core", "signer", "verifier"], &["measurement"]),
        "attest-collect" => (&["core", "verifier"], &[]),
        _ => (&[], &[]),
    }
}

fn validate_directive(line: usize, name: &str, args: &[String]) -> Result<(), ScenarioError> {
    let named = matches!(name, "verifier" | "verify" | "export-bundle");
    let kv = if named {
        if args.is_empty() || !is_ident(&args[0]) {
            return Err(parse_err(line, format!("`{name}` needs a verifier name")));
        }
        &args[1..]
    } else {
        args
    };
    let (required, optional) = directive_keys(name);
    let mut seen = BTreeSet::new();
    for a in kv {
        let (k, _) = a
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected key=value, got `{a}`")))?;
        if !required.contains(&k) && !optional.contains(&k) {
            return Err(parse_err(line, format!("unknown argument `{k}` for `{name}`")));
        }
        if !seen.insert(k.to_string()) {
            return Err(parse_err(line, format!("argument `{k}` given twice")));
        }
    }
    if let Some(k) = required.iter().find(|k| !seen.contains(**k)) {
        return Err(parse_err(line, format!("`{name}` needs `{k}=`")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    /// Run races on concurrent OS threads instead of a fixed schedule.
    pub stress: bool,
}

/// A bundle a scenario exported, with what a verifier needs to check it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedBundle {
    pub name: String,
    pub bytes: Vec<u8>,
    pub nonce: [u8; 32],
    pub measurement: Digest,
    pub device_key: [u8; 32],
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: Trace,
    pub bundles: Vec<ExportedBundle>,
    pub monitor: SecurityMonitor,
}

/// A failed run, with the trace up to and including the failing event.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: ScenarioError,
    pub trace: Trace,
}

struct VerifierSlot {
    verifier: RemoteVerifier,
    requester: Option<RequesterState>,
    bundle: Option<AttestationBundle>,
}

struct Runner<'a> {
    scenario: &'a Scenario,
    options: RunOptions,
    sm: SecurityMonitor,
    vars: BTreeMap<String, String>,
    trace: Trace,
    verifiers: BTreeMap<String, VerifierSlot>,
    bundles: Vec<ExportedBundle>,
    seed: u64,
}

fn protocol_result(r: Result<(), ProtocolError>) -> String {
    match r {
        Ok(()) => "ok".into(),
        Err(ProtocolError::Api { error, .. }) => format!("err:{}", error.code()),
        Err(ProtocolError::NoReply) => "err:NoReply".into(),
        Err(ProtocolError::UnexpectedSender) => "err:UnexpectedSender".into(),
        Err(ProtocolError::Malformed) => "err:Malformed".into(),
        Err(ProtocolError::Memory) => "err:Memory".into(),
    }
}

fn hex32(s: &str) -> Result<[u8; 32], String> {
    hex::decode(s)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| format!("expected 64 hex characters, got `{s}`"))
}

impl Runner<'_> {
    fn parse_fail(&self, line: usize, message: impl Into<String>) -> ScenarioError {
        parse_err(line, message)
    }

    fn check_expect(&mut self, line: usize, expect: &Option<Expect>, actual: &str) -> Result<(), ScenarioError> {
        let ok = match expect {
            None | Some(Expect::Any) => true,
            Some(Expect::Ok) => !actual.starts_with("err"),
            Some(Expect::Err) => actual.starts_with("err"),
            Some(Expect::Save(name)) => {
                let value = actual.rsplit(':').next().unwrap_or(actual).to_string();
                self.vars.insert(name.clone(), value);
                true
            }
            Some(Expect::Text(t)) => {
                let want = substitute(t, &self.vars).map_err(|m| parse_err(line, m))?;
                actual == want || actual.strip_prefix(&want).is_some_and(|r| r.starts_with(':'))
            }
        };
        if ok {
            Ok(())
        } else {
            let expected = match expect {
                Some(Expect::Text(t)) => substitute(t, &self.vars).unwrap_or_else(|_| t.clone()),
                Some(e) => e.to_string(),
                None => String::new(),
            };
            Err(ScenarioError::AssertionFailed {
                line,
                event: self.trace.len().saturating_sub(1),
                expected,
                actual: actual.to_string(),
            })
        }
    }

    fn check_invariants(&self, line: usize, pre: &SecurityMonitor) -> Result<(), ScenarioError> {
        let mut violations = check_step(pre, &self.sm);
        violations.extend(check_state(&self.sm));
        match violations.into_iter().next() {
            Some(violation) => Err(ScenarioError::InvariantViolation { line, violation }),
            None => Ok(()),
        }
    }

    fn action(&self, line: usize, words: &[String]) -> Result<Action, ScenarioError> {
        let text = substitute(&words.join(" "), &self.vars).map_err(|m| self.parse_fail(line, m))?;
        let w: Vec<&str> = text.split_whitespace().collect();
        Action::parse(&w).map_err(|m| self.parse_fail(line, m))
    }

    fn eval_let(&self, line: usize, value: &str) -> Result<String, ScenarioError> {
        if let Some(image) = value.strip_prefix("measure ") {
            let image = image.trim();
            let m = self
                .scenario
                .manifests
                .get(image)
                .cloned()
                .or_else(|| crate::harness::action::builtin_image(image))
                .ok_or_else(|| self.parse_fail(line, format!("unknown image `{image}`")))?;
            let d = m
                .expected_measurement(
                    self.sm.machine().page_size(),
                    self.sm.sm_identity().sm_image_hash(),
                    self.sm.capabilities(),
                )
                .map_err(|e| self.parse_fail(line, format!("image `{image}` is invalid: {e}")))?;
            return Ok(hex::encode(d));
        }
        let v = substitute(value, &self.vars).map_err(|m| self.parse_fail(line, m))?;
        Ok(eval_sum(&v))
    }

    fn run_step(&mut self, step: &Step) -> Result<(), ScenarioError> {
        let line = step.line;
        match &step.kind {
            StepKind::Let { name, value } => {
                let v = self.eval_let(line, value)?;
                self.vars.insert(name.clone(), v);
            }
            StepKind::Action(words) => {
                let action = self.action(line, words)?;
                let pre = self.sm.clone();
                let outcome = apply(&mut self.sm, &action, &self.scenario.manifests);
                let rendered = outcome.render();
                self.trace
                    .record(action.actor(), action.op_name(), &action.render(), rendered.clone(), &self.sm);
                self.check_expect(line, &step.expect, &rendered)?;
                self.check_invariants(line, &pre)?;
            }
            StepKind::Race { lines, winners } => self.run_race(line, lines, *winners)?,
            StepKind::Directive { name, args } => {
                let pre = self.sm.clone();
                let args: Vec<String> = args
                    .iter()
                    .map(|a| substitute(a, &self.vars))
                    .collect::<Result<_, _>>()
                    .map_err(|m| self.parse_fail(line, m))?;
                let (actor, result) = self.directive(line, name, &args)?;
                self.trace.record(actor, name, &args.join(" "), result.clone(), &self.sm);
                self.check_expect(line, &step.expect, &result)?;
                self.check_invariants(line, &pre)?;
            }
        }
        Ok(())
    }

    fn run_race(&mut self, line: usize, lines: &[RaceLine], winners: Option<usize>) -> Result<(), ScenarioError> {
        let mut scripts = Vec::new();
        let mut actions = Vec::new();
        for l in lines {
            let action = self.action(l.line, &l.words)?;
            let (caller, call) = match &action {
                Action::Os(call) => (Caller::OS, call.clone()),
                Action::Core(core, call) => (caller_on(&self.sm, *core), call.clone()),
                _ => return Err(self.parse_fail(l.line, "a race holds only `os` and `core` API calls")),
            };
            scripts.push(Script {
                caller,
                calls: vec![call],
            });
            actions.push(action);
        }
        let pre = self.sm.clone();
        let results = if self.options.stress {
            let (results, post) = run_concurrent(self.sm.clone(), &scripts);
            self.sm = post;
            results
        } else {
            let schedule = canonical_schedule(&self.sm, &scripts);
            let run = run_schedule(&self.sm, &scripts, &schedule).expect("canonical schedule is complete");
            check_atomicity(&self.sm, &scripts).map_err(|e| ScenarioError::AtomicityViolation {
                line,
                detail: e.to_string(),
            })?;
            self.sm = run.state;
            run.results
        };
        let mut won = 0;
        for ((l, action), result) in lines.iter().zip(&actions).zip(&results) {
            let rendered = Outcome::Api(result[0].clone()).render();
            won += usize::from(result[0].is_ok());
            self.trace
                .record(action.actor(), action.op_name(), &action.render(), rendered.clone(), &self.sm);
            if !self.options.stress {
                self.check_expect(l.line, &l.expect, &rendered)?;
            }
        }
        if let Some(n) = winners {
            if won != n {
                return Err(ScenarioError::AssertionFailed {
                    line,
                    event: self.trace.len() - 1,
                    expected: format!("winners {n}"),
                    actual: format!("winners {won}"),
                });
            }
        }
        self.check_invariants(line, &pre)
    }

    fn directive(&mut self, line: usize, name: &str, args: &[String]) -> Result<(String, String), ScenarioError> {
        let (label, kv) = if matches!(name, "verifier" | "verify" | "export-bundle") {
            (args[0].clone(), &args[1..])
        } else {
            (String::new(), args)
        };
        let map: BTreeMap<&str, &str> = kv.iter().filter_map(|a| a.split_once('=')).collect();
        let num = |k: &str| -> Result<u64, ScenarioError> {
            let v = map[k];
            parse_u64(v).map_err(|_| parse_err(line, format!("bad number `{v}` for `{k}`")))
        };
        let core = || num("core").map(|c| CoreId(c as usize));
        let actor = match map.get("core") {
            Some(c) => format!("core{c}"),
            None => "verifier".to_string(),
        };
        let result = match name {
            "signing-init" => protocol_result(attestation::signing_init(&mut self.sm, core()?)),
            "signing-arm" => {
                let requester = EnclaveId(num("requester")?);
                protocol_result(attestation::signing_arm(&mut self.sm, core()?, requester))
            }
            "signing-serve" => match attestation::signing_serve(&mut self.sm, core()?) {
                Ok(ServeOutcome::Replied) => "replied".into(),
                Ok(ServeOutcome::Refused) => "refused".into(),
                Err(e) => protocol_result(Err(e)),
            },
            "verifier" => {
                let measurement = hex32(map["measurement"]).map_err(|m| parse_err(line, m))?;
                let device_key = match map.get("device-key") {
                    Some(k) => hex32(k).map_err(|m| parse_err(line, m))?,
                    None => self.sm.device_public_key(),
                };
                let stream = 1 + self.verifiers.len() as u64;
                let mut entropy = Entropy::seeded_stream(self.seed, stream);
                self.verifiers.insert(
                    label.clone(),
                    VerifierSlot {
                        verifier: RemoteVerifier::new(&mut entropy, device_key, measurement),
                        requester: None,
                        bundle: None,
                    },
                );
                "ok".into()
            }
            "attest-request" => {
                let core = core()?;
                let signer = EnclaveId(num("signer")?);
                let vname = map["verifier"];
                let challenge = self
                    .verifiers
                    .get(vname)
                    .ok_or_else(|| parse_err(line, format!("unknown verifier `{vname}`")))?
                    .verifier
                    .challenge();
                let measurement = match map.get("measurement") {
                    Some(m) => hex32(m).map_err(|m| parse_err(line, m))?,
                    // An enclave knows the measurement it was built with.
                    None => self
                        .sm
                        .machine()
                        .core(core)
                        .and_then(|c| c.current_domain.enclave())
                        .and_then(|e| self.sm.enclave(e))
                        .and_then(|e| e.final_measurement)
                        .unwrap_or([0; 32]),
                };
                match attestation::attest_request(&mut self.sm, core, signer, &challenge, measurement) {
                    Ok(state) => {
                        self.verifiers.get_mut(vname).unwrap().requester = Some(state);
                        "ok".into()
                    }
                    Err(e) => protocol_result(Err(e)),
                }
            }
            "attest-collect" => {
                let core = core()?;
                let vname = map["verifier"];
                let state = self
                    .verifiers
                    .get(vname)
                    .and_then(|v| v.requester.clone())
                    .ok_or_else(|| parse_err(line, format!("verifier `{vname}` has no pending request")))?;
                match attestation::attest_collect(&mut self.sm, core, &state) {
                    Ok(bundle) => {
                        self.verifiers.get_mut(vname).unwrap().bundle = Some(bundle);
                        "ok".into()
                    }
                    Err(e) => protocol_result(Err(e)),
                }
            }
            "verify" => {
                let slot = self
                    .verifiers
                    .get(&label)
                    .ok_or_else(|| parse_err(line, format!("unknown verifier `{label}`")))?;
                match (&slot.bundle, &slot.requester) {
                    (Some(bundle), Some(req)) => match slot.verifier.finish(bundle, &req.public) {
                        Ok(verifier_end) => {
                            let enclave_end = req.channel().map_err(|e| parse_err(line, e.to_string()))?;
                            let sealed = enclave_end.seal(0, b"attested");
                            match verifier_end.open(0, &sealed) {
                                Ok(p) if p == b"attested" => "ok".into(),
                                _ => "err:channel".into(),
                            }
                        }
                        Err(f) => format!("err:{}", f.code()),
                    },
                    _ => return Err(parse_err(line, format!("verifier `{label}` has no bundle"))),
                }
            }
            "export-bundle" => {
                let slot = self
                    .verifiers
                    .get(&label)
                    .ok_or_else(|| parse_err(line, format!("unknown verifier `{label}`")))?;
                let bundle = slot
                    .bundle
                    .ok_or_else(|| parse_err(line, format!("verifier `{label}` has no bundle")))?;
                self.bundles.push(ExportedBundle {
                    name: label.clone(),
                    bytes: bundle.to_bytes(),
                    nonce: slot.verifier.challenge().nonce,
                    measurement: slot.verifier.expected_measurement,
                    device_key: slot.verifier.trusted_device_key,
                });
                "ok".into()
            }
            _ => unreachable!("validated directive `{name}`"),
        };
        Ok((actor, result))
    }
}

/// Boots the scenario's machine and runs every step, checking expectations
/// and the invariant set after each.
pub fn run_scenario(scenario: &Scenario, options: RunOptions) -> Result<RunReport, RunFailure> {
    let mut monitor_options = scenario.options.clone();
    if let Some(seed) = options.seed {
        monitor_options.seed = Some(seed);
    }
    let seed = monitor_options.seed.unwrap_or(0);
    let fail = |error| RunFailure {
        error,
        trace: Trace::default(),
    };
    let sm = SecurityMonitor::boot(scenario.config.clone(), monitor_options)
        .map_err(|e| fail(parse_err(0, format!("machine `{}`: {e}", scenario.config_name))))?;
    let mut vars = BTreeMap::new();
    vars.insert("arena".to_string(), format!("{:#x}", sm.metadata_arena().base.0));
    vars.insert("device_key".to_string(), hex::encode(sm.device_public_key()));
    vars.insert("sm_key".to_string(), hex::encode(sm.sm_public_key()));
    vars.insert("sm_hash".to_string(), hex::encode(sm.sm_identity().sm_image_hash()));
    vars.insert("caps".to_string(), format!("{:#x}", sm.capabilities()));
    vars.insert("signing_measurement".to_string(), hex::encode(sm.signing_measurement()));
    if let Some(v) = check_state(&sm).into_iter().next() {
        return Err(fail(ScenarioError::InvariantViolation { line: 0, violation: v }));
    }
    let mut runner = Runner {
        scenario,
        options,
        sm,
        vars,
        trace: Trace::default(),
        verifiers: BTreeMap::new(),
        bundles: Vec::new(),
        seed,
    };
    for step in &scenario.steps {
        if let Err(error) = runner.run_step(step) {
            return Err(RunFailure {
                error,
                trace: runner.trace,
            });
        }
    }
    Ok(RunReport {
        trace: runner.trace,
        bundles: runner.bundles,
        monitor: runner.sm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("machine nowhere", 1),
            ("machine minimal\nos block_resource", 2),
            ("os owner_of region:1\nseed 3", 2),
            ("race\nos owner_of region:1\n", 1),
            ("end", 1),
            ("os owner_of $nope", 1),
            ("verify", 1),
            ("signing-arm core=0", 1),
            ("os owner_of region:1 => save", 1),
        ];
        for (text, line) in cases {
            match Scenario::parse(text, None) {
                Err(ScenarioError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn expectations_match_on_field_boundaries() {
        let text = "machine minimal\nos owner_of region:1 => owner:os\nos owner_of region:1 => owner:o\n";
        let s = Scenario::parse(text, None).unwrap();
        let err = run_scenario(&s, RunOptions::default()).unwrap_err();
        assert!(matches!(err.error, ScenarioError::AssertionFailed { line: 3, .. }), "{err}");
        assert_eq!(err.trace.len(), 2);
    }

    #[test]
    fn saved_values_feed_later_lines() {
        let text = "\
machine minimal
let E = $arena
let T = $arena+0x800
launch app0 eid=$E tids=$T units=region:3 => save M
let W = measure app0
os owner_of region:3 => owner:enclave:$E:owned
os init_enclave $E => err:WrongState
";
        let s = Scenario::parse(text, None).unwrap();
        let report = run_scenario(&s, RunOptions::default()).unwrap();
        assert_eq!(report.trace.len(), 3);
    }
}
