// SPDX-License-Identifier: Apache-2.0

//! Actor actions, their text form, and how they are applied to a monitor.
//!
//! Text forms, one per scenario line:
//!
//! ```text
//! os <api call>                 the untrusted OS issues a monitor call
//! core N <api call>             whatever runs on core N issues a call
//! core N read VA | write VA V   memory access through core N's translation
//! core N setregs V | regs       fill / dump the register file
//! core N interrupt | fault KIND | exit
//! os read PA | os write PA V    OS access to physical memory
//! dma read PA | dma write PA V
//! launch IMAGE eid=E tids=T[,T] units=U[,U]
//! ```
//!
//! API calls are `name key=value ...`; leading values may be given
//! positionally in key order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::Error;
use crate::harness::loader::{load_manifest, LoadError, Placement};
use crate::machine::Access;
use crate::manifest::Manifest;
use crate::monitor::{ApiCall, ApiResult, ApiValue, Caller, Disposition, MachineEvent, MemoryOp, SecurityMonitor};
use crate::resource::ResourceId;
use crate::types::{
    parse_u64, AccessKind, CoreId, Digest, EnclaveId, FaultHandlers, FaultKind, PhysAddr, ProtectionDomain,
    RegisterFile, ThreadId, VirtAddr, REGISTER_COUNT,
};

/// First register receiving data returned to an enclave caller (`a1`).
pub const RETURN_REGISTER: usize = 11;
/// Registers available for returned data.
pub const RETURN_REGISTER_COUNT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Os(ApiCall),
    Core(CoreId, ApiCall),
    CoreRead(CoreId, VirtAddr),
    CoreWrite(CoreId, VirtAddr, u64),
    SetRegisters(CoreId, u64),
    Registers(CoreId),
    Interrupt(CoreId),
    Fault(CoreId, FaultKind),
    Exit(CoreId),
    OsRead(PhysAddr),
    OsWrite(PhysAddr, u64),
    DmaRead(PhysAddr),
    DmaWrite(PhysAddr, u64),
    Launch { image: String, placement: Placement },
}

/// What an action produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Api(ApiResult),
    Word(u64),
    Stored,
    Denied,
    Registers(RegisterFile),
    Event(Disposition),
    Launched(Result<Digest, LoadError>),
}

fn render_api_result(r: &ApiResult) -> String {
    match r {
        Ok(ApiValue::Unit) => "ok".into(),
        Ok(ApiValue::Measurement(d)) => format!("measurement:{}", hex::encode(d)),
        Ok(ApiValue::Owner { owner, state }) => format!("owner:{owner}:{state}"),
        Ok(ApiValue::Mail {
            message,
            sender,
            sender_measurement,
        }) => format!(
            "mail:{sender}:{}:{}",
            hex::encode(sender_measurement),
            hex::encode(message)
        ),
        Ok(ApiValue::Bytes(b)) => format!("bytes:{}", hex::encode(b)),
        Ok(ApiValue::Random(b)) => format!("random:{}", hex::encode(b)),
        Err(e) => format!("err:{}", e.code()),
    }
}

impl Outcome {
    /// Canonical text, used in traces and matched by expectations.
    pub fn render(&self) -> String {
        match self {
            Outcome::Api(r) => render_api_result(r),
            Outcome::Word(v) => format!("value:{v:#x}"),
            Outcome::Stored => "ok".into(),
            Outcome::Denied => "denied".into(),
            Outcome::Registers(regs) if regs.iter().all(|r| *r == 0) => "regs:zero".into(),
            Outcome::Registers(regs) => {
                let words: Vec<String> = regs.iter().map(|r| format!("{r:x}")).collect();
                format!("regs:{}", words.join(","))
            }
            Outcome::Event(Disposition::Returned(r)) => render_api_result(r),
            Outcome::Event(Disposition::DelegatedToOs { aex: true }) => "aex".into(),
            Outcome::Event(Disposition::DelegatedToOs { aex: false }) => "delegated".into(),
            Outcome::Event(Disposition::EnclaveHandler(va)) => format!("handler:{va}"),
            Outcome::Launched(Ok(d)) => format!("measurement:{}", hex::encode(d)),
            Outcome::Launched(Err(e)) => format!("err:{}", e.error.code()),
        }
    }

    pub fn is_ok(&self) -> bool {
        !self.render().starts_with("err:")
    }
}

/// Names manifests by image name. `signing` and `appN` are built in.
pub fn builtin_image(name: &str) -> Option<Manifest> {
    if name == "signing" {
        return Some(Manifest::signing_enclave());
    }
    let variant: u8 = name.strip_prefix("app")?.parse().ok()?;
    Some(Manifest::builtin_app(variant))
}

pub(crate) fn caller_on(sm: &SecurityMonitor, core: CoreId) -> Caller {
    let domain = sm
        .machine()
        .core(core)
        .map_or(ProtectionDomain::UntrustedOS, |c| c.current_domain);
    Caller { domain, core: Some(core) }
}

/// Places data returned to an enclave caller in its argument registers,
/// as a real call would.
fn deliver_to_registers(sm: &mut SecurityMonitor, core: CoreId, result: &ApiResult) {
    let bytes: &[u8] = match result {
        Ok(ApiValue::Mail { message, .. }) => message,
        Ok(ApiValue::Random(r)) => r,
        _ => return,
    };
    let Some(c) = sm.machine_mut().core_mut(core) else {
        return;
    };
    for (i, chunk) in bytes.chunks(8).take(RETURN_REGISTER_COUNT).enumerate() {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        c.set_register(RETURN_REGISTER + i, u64::from_le_bytes(word));
    }
}

/// Applies `action`. `images` resolves launch image names not built in.
pub fn apply(sm: &mut SecurityMonitor, action: &Action, images: &BTreeMap<String, Manifest>) -> Outcome {
    let bad_core = Outcome::Api(Err(Error::BadArgument));
    match action {
        Action::Os(call) => Outcome::Api(sm.call(Caller::OS, call.clone())),
        Action::Core(core, call) => {
            if sm.machine().core(*core).is_none() {
                return bad_core;
            }
            let caller = caller_on(sm, *core);
            let result = sm.call(caller, call.clone());
            if caller.domain.is_enclave() {
                deliver_to_registers(sm, *core, &result);
            }
            Outcome::Api(result)
        }
        Action::CoreRead(core, va) | Action::CoreWrite(core, va, _) => {
            if sm.machine().core(*core).is_none() {
                return bad_core;
            }
            let op = match action {
                Action::CoreWrite(_, _, v) => MemoryOp::Write(*v),
                _ => MemoryOp::Read,
            };
            match sm.memory_access(*core, *va, op) {
                Ok(v) if op == MemoryOp::Read => Outcome::Word(v),
                Ok(_) => Outcome::Stored,
                Err(d) => Outcome::Event(d),
            }
        }
        Action::SetRegisters(core, value) => match sm.machine_mut().core_mut(*core) {
            Some(c) => {
                c.set_registers([*value; REGISTER_COUNT]);
                Outcome::Stored
            }
            None => bad_core,
        },
        Action::Registers(core) => match sm.machine().core(*core) {
            Some(c) => Outcome::Registers(c.registers),
            None => bad_core,
        },
        Action::Interrupt(core) => Outcome::Event(sm.handle_event(*core, MachineEvent::Interrupt)),
        Action::Fault(core, kind) => Outcome::Event(sm.handle_event(*core, MachineEvent::EnclaveFault(*kind))),
        Action::Exit(core) => Outcome::Event(sm.handle_event(*core, MachineEvent::Exit)),
        Action::OsRead(pa) | Action::OsWrite(pa, _) => {
            let kind = match action {
                Action::OsRead(_) => AccessKind::Read,
                _ => AccessKind::Write,
            };
            let pa = PhysAddr(pa.0 & !7);
            match sm.machine().check_access(ProtectionDomain::UntrustedOS, pa, kind) {
                Err(e) => Outcome::Api(Err(e)),
                Ok(Access::Denied) => Outcome::Denied,
                Ok(Access::Allowed) => match action {
                    Action::OsWrite(_, v) => {
                        sm.machine_mut()
                            .memory
                            .write_u64(pa, *v, ProtectionDomain::UntrustedOS);
                        Outcome::Stored
                    }
                    _ => Outcome::Word(sm.machine().memory.read_u64(pa)),
                },
            }
        }
        Action::DmaRead(pa) => match sm.machine().dma_read(*pa) {
            Ok(Some(v)) => Outcome::Word(v),
            Ok(None) => Outcome::Denied,
            Err(e) => Outcome::Api(Err(e)),
        },
        Action::DmaWrite(pa, v) => match sm.machine_mut().dma_write(*pa, *v) {
            Ok(Access::Allowed) => Outcome::Stored,
            Ok(Access::Denied) => Outcome::Denied,
            Err(e) => Outcome::Api(Err(e)),
        },
        Action::Launch { image, placement } => {
            let manifest = match images.get(image).cloned().or_else(|| builtin_image(image)) {
                Some(m) => m,
                None => {
                    return Outcome::Launched(Err(LoadError {
                        step: format!("image {image}"),
                        op_index: None,
                        error: Error::BadArgument,
                    }))
                }
            };
            Outcome::Launched(load_manifest(sm, &manifest, placement))
        }
    }
}

impl Action {
    /// Who performs the action, for traces.
    pub fn actor(&self) -> String {
        match self {
            Action::Os(_) | Action::OsRead(_) | Action::OsWrite(..) | Action::Launch { .. } => "os".into(),
            Action::DmaRead(_) | Action::DmaWrite(..) => "dma".into(),
            Action::Core(c, _)
            | Action::CoreRead(c, _)
            | Action::CoreWrite(c, ..)
            | Action::SetRegisters(c, _)
            | Action::Registers(c)
            | Action::Interrupt(c)
            | Action::Fault(c, _)
            | Action::Exit(c) => format!("core{}", c.0),
        }
    }

    /// Operation name, for traces.
    pub fn op_name(&self) -> &'static str {
        match self {
            Action::Os(call) | Action::Core(_, call) => call.name(),
            Action::CoreRead(..) | Action::OsRead(_) | Action::DmaRead(_) => "read",
            Action::CoreWrite(..) | Action::OsWrite(..) | Action::DmaWrite(..) => "write",
            Action::SetRegisters(..) => "setregs",
            Action::Registers(_) => "regs",
            Action::Interrupt(_) => "interrupt",
            Action::Fault(..) => "fault",
            Action::Exit(_) => "exit",
            Action::Launch { .. } => "launch",
        }
    }

    /// Scenario-file text for the action.
    pub fn render(&self) -> String {
        match self {
            Action::Os(call) => format!("os {}", render_call(call)),
            Action::Core(c, call) => format!("core {} {}", c.0, render_call(call)),
            Action::CoreRead(c, va) => format!("core {} read {va}", c.0),
            Action::CoreWrite(c, va, v) => format!("core {} write {va} {v:#x}", c.0),
            Action::SetRegisters(c, v) => format!("core {} setregs {v:#x}", c.0),
            Action::Registers(c) => format!("core {} regs", c.0),
            Action::Interrupt(c) => format!("core {} interrupt", c.0),
            Action::Fault(c, k) => format!("core {} fault {}", c.0, k.name()),
            Action::Exit(c) => format!("core {} exit", c.0),
            Action::OsRead(pa) => format!("os read {pa}"),
            Action::OsWrite(pa, v) => format!("os write {pa} {v:#x}"),
            Action::DmaRead(pa) => format!("dma read {pa}"),
            Action::DmaWrite(pa, v) => format!("dma write {pa} {v:#x}"),
            Action::Launch { image, placement } => {
                let tids: Vec<String> = placement.tids.iter().map(|t| t.to_string()).collect();
                let units: Vec<String> = placement.units.iter().map(|u| u.to_string()).collect();
                format!(
                    "launch {image} eid={} tids={} units={}",
                    placement.eid,
                    tids.join(","),
                    units.join(",")
                )
            }
        }
    }

    /// Parses the text form of an action.
    pub fn parse(words: &[&str]) -> Result<Action, String> {
        let num = |s: &str| parse_u64(s).map_err(|_| format!("bad number `{s}`"));
        let arity = |n: usize| {
            if words.len() == n {
                Ok(())
            } else {
                Err(format!("`{}` takes {} argument(s)", words[..words.len().min(2)].join(" "), n - 2))
            }
        };
        match words {
            ["os", "read", ..] => {
                arity(3)?;
                Ok(Action::OsRead(PhysAddr(num(words[2])?)))
            }
            ["os", "write", ..] => {
                arity(4)?;
                Ok(Action::OsWrite(PhysAddr(num(words[2])?), num(words[3])?))
            }
            ["os", name, rest @ ..] => Ok(Action::Os(parse_call(name, rest)?)),
            ["dma", "read", ..] => {
                arity(3)?;
                Ok(Action::DmaRead(PhysAddr(num(words[2])?)))
            }
            ["dma", "write", ..] => {
                arity(4)?;
                Ok(Action::DmaWrite(PhysAddr(num(words[2])?), num(words[3])?))
            }
            ["core", n, op, rest @ ..] => {
                let core = CoreId(num(n)? as usize);
                let arg = |i: usize| rest.get(i).copied().ok_or_else(|| format!("`{op}` needs more arguments"));
                let exact = |k: usize| {
                    if rest.len() == k {
                        Ok(())
                    } else {
                        Err(format!("`{op}` takes {k} argument(s)"))
                    }
                };
                match *op {
                    "read" => {
                        exact(1)?;
                        Ok(Action::CoreRead(core, VirtAddr(num(arg(0)?)?)))
                    }
                    "write" => {
                        exact(2)?;
                        Ok(Action::CoreWrite(core, VirtAddr(num(arg(0)?)?), num(arg(1)?)?))
                    }
                    "setregs" => {
                        exact(1)?;
                        Ok(Action::SetRegisters(core, num(arg(0)?)?))
                    }
                    "regs" => exact(0).map(|()| Action::Registers(core)),
                    "interrupt" => exact(0).map(|()| Action::Interrupt(core)),
                    "exit" => exact(0).map(|()| Action::Exit(core)),
                    "fault" => {
                        exact(1)?;
                        Ok(Action::Fault(core, arg(0)?.parse()?))
                    }
                    name => Ok(Action::Core(core, parse_call(name, rest)?)),
                }
            }
            ["launch", image, rest @ ..] => {
                let args = KeyArgs::new(rest, &["eid", "tids", "units"])?;
                let list = |k: &str| -> Vec<String> {
                    args.opt(k)
                        .map(|v| v.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect())
                        .unwrap_or_default()
                };
                let tids = list("tids")
                    .iter()
                    .map(|t| num(t).map(ThreadId))
                    .collect::<Result<_, _>>()?;
                let units = list("units")
                    .iter()
                    .map(|u| u.parse::<ResourceId>().map_err(|e| e.0))
                    .collect::<Result<_, _>>()?;
                args.finish()?;
                Ok(Action::Launch {
                    image: image.to_string(),
                    placement: Placement {
                        eid: EnclaveId(num(args.req("eid")?)?),
                        tids,
                        units,
                    },
                })
            }
            _ => Err(format!("unrecognized action `{}`", words.join(" "))),
        }
    }
}

/// `key=value` arguments with positional fallback in `keys` order.
struct KeyArgs<'a> {
    values: BTreeMap<String, &'a str>,
    known: Vec<String>,
}

impl<'a> KeyArgs<'a> {
    fn new(words: &[&'a str], keys: &[&str]) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        let mut positional = keys.iter();
        for w in words {
            let (k, v) = match w.split_once('=') {
                Some((k, v)) => (k.to_string(), v),
                None => (
                    positional
                        .next()
                        .ok_or_else(|| format!("unexpected argument `{w}`"))?
                        .to_string(),
                    *w,
                ),
            };
            if values.insert(k.clone(), v).is_some() {
                return Err(format!("argument `{k}` given twice"));
            }
        }
        Ok(KeyArgs {
            values,
            known: keys.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn opt(&self, key: &str) -> Option<&'a str> {
        self.values.get(key).copied()
    }

    fn req(&self, key: &str) -> Result<&'a str, String> {
        self.opt(key).ok_or_else(|| format!("missing argument `{key}`"))
    }

    /// Fault-handler arguments, keyed by fault kind name.
    fn handlers(&mut self) -> Result<FaultHandlers, String> {
        let mut out = FaultHandlers::new();
        for kind in FaultKind::ALL {
            if let Some(v) = self.values.get(kind.name()) {
                out.insert(kind, VirtAddr(parse_u64(v).map_err(|_| format!("bad address `{v}`"))?));
                self.known.push(kind.name().to_string());
            }
        }
        Ok(out)
    }

    fn finish(&self) -> Result<(), String> {
        match self.values.keys().find(|k| !self.known.contains(k)) {
            Some(k) => Err(format!("unknown argument `{k}`")),
            None => Ok(()),
        }
    }
}

fn call_keys(name: &str) -> Option<&'static [&'static str]> {
    Some(match name {
        "block_resource" | "clean_resource" | "accept_resource" | "owner_of" => &["res"],
        "grant_resource" => &["res", "to"],
        "create_enclave" => &["eid", "evrange", "mailboxes"],
        "allocate_page_table" => &["eid", "vaddr"],
        "load_page" => &["eid", "vaddr", "src", "dest", "perms"],
        "share_memory" => &["eid", "pa"],
        "create_thread" => &["eid", "tid", "entry"],
        "init_enclave" | "delete_enclave" => &["eid"],
        "enter_enclave" => &["eid", "tid", "core"],
        "accept_thread" => &["tid", "entry"],
        "map_page" => &["vaddr", "pa", "perms"],
        "accept_mail" => &["index", "sender"],
        "send_mail" => &["recipient", "message"],
        "get_mail" => &["index"],
        "get_field" => &["id"],
        "exit_enclave" | "resume_aex" | "resume_from_fault" | "get_random" | "get_attestation_key" => &[],
        _ => return None,
    })
}

const FIELD_NAMES: [&str; 4] = ["public_key", "sm_certificate", "device_certificate", "sm_measurement"];

/// Parses `name args...` into an API call.
pub fn parse_call(name: &str, words: &[&str]) -> Result<ApiCall, String> {
    let keys = call_keys(name).ok_or_else(|| format!("unknown API call `{name}`"))?;
    let mut a = KeyArgs::new(words, keys)?;
    let handlers = if matches!(name, "create_thread" | "accept_thread") {
        a.handlers()?
    } else {
        FaultHandlers::new()
    };
    let a = a;
    let num = |k: &str| -> Result<u64, String> {
        let v = a.req(k)?;
        parse_u64(v).map_err(|_| format!("bad number `{v}` for `{k}`"))
    };
    let res = |k: &str| -> Result<ResourceId, String> { a.req(k)?.parse().map_err(|e: crate::resource::ParseResourceError| e.0) };
    let domain = |k: &str| -> Result<ProtectionDomain, String> { a.req(k)?.parse() };
    let perms = |k: &str| -> Result<crate::types::Perms, String> { a.req(k)?.parse() };
    let eid = |k: &str| num(k).map(EnclaveId);
    let u32_of = |k: &str| -> Result<u32, String> { u32::try_from(num(k)?).map_err(|_| format!("`{k}` out of range")) };
    let call = match name {
        "block_resource" => ApiCall::BlockResource(res("res")?),
        "clean_resource" => ApiCall::CleanResource(res("res")?),
        "accept_resource" => ApiCall::AcceptResource(res("res")?),
        "owner_of" => ApiCall::OwnerOf(res("res")?),
        "grant_resource" => ApiCall::GrantResource(res("res")?, domain("to")?),
        "create_enclave" => ApiCall::CreateEnclave {
            eid: eid("eid")?,
            evrange: a.req("evrange")?.parse()?,
            mailbox_count: u32_of("mailboxes")?,
        },
        "allocate_page_table" => ApiCall::AllocatePageTable {
            eid: eid("eid")?,
            vaddr: VirtAddr(num("vaddr")?),
        },
        "load_page" => ApiCall::LoadPage {
            eid: eid("eid")?,
            vaddr: VirtAddr(num("vaddr")?),
            src: PhysAddr(num("src")?),
            dest: PhysAddr(num("dest")?),
            perms: perms("perms")?,
        },
        "share_memory" => ApiCall::ShareMemory {
            eid: eid("eid")?,
            pa: PhysAddr(num("pa")?),
        },
        "create_thread" => ApiCall::CreateThread {
            eid: eid("eid")?,
            tid: ThreadId(num("tid")?),
            entry_point: VirtAddr(num("entry")?),
            fault_handlers: handlers.clone(),
        },
        "init_enclave" => ApiCall::InitEnclave(eid("eid")?),
        "delete_enclave" => ApiCall::DeleteEnclave(eid("eid")?),
        "enter_enclave" => ApiCall::EnterEnclave {
            eid: eid("eid")?,
            tid: ThreadId(num("tid")?),
            core: CoreId(num("core")? as usize),
        },
        "accept_thread" => ApiCall::AcceptThread {
            tid: ThreadId(num("tid")?),
            entry_point: VirtAddr(num("entry")?),
            fault_handlers: handlers.clone(),
        },
        "map_page" => ApiCall::MapPage {
            vaddr: VirtAddr(num("vaddr")?),
            pa: PhysAddr(num("pa")?),
            perms: perms("perms")?,
        },
        "accept_mail" => ApiCall::AcceptMail {
            index: u32_of("index")?,
            sender: domain("sender")?,
        },
        "send_mail" => ApiCall::SendMail {
            recipient: eid("recipient")?,
            message: parse_bytes(a.req("message")?)?,
        },
        "get_mail" => ApiCall::GetMail(u32_of("index")?),
        "get_field" => {
            let v = a.req("id")?;
            let id = match FIELD_NAMES.iter().position(|n| *n == v) {
                Some(i) => i as u32,
                None => u32_of("id")?,
            };
            ApiCall::GetField(id)
        }
        "exit_enclave" => ApiCall::ExitEnclave,
        "resume_aex" => ApiCall::ResumeAex,
        "resume_from_fault" => ApiCall::ResumeFromFault,
        "get_random" => ApiCall::GetRandom,
        "get_attestation_key" => ApiCall::GetAttestationKey,
        _ => unreachable!("keys exist for `{name}`"),
    };
    a.finish()?;
    Ok(call)
}

/// `hex:..` (or bare hex) or `text:..` byte strings.
pub fn parse_bytes(s: &str) -> Result<Vec<u8>, String> {
    if let Some(text) = s.strip_prefix("text:") {
        return Ok(text.as_bytes().to_vec());
    }
    hex::decode(s.strip_prefix("hex:").unwrap_or(s)).map_err(|_| format!("bad byte string `{s}`"))
}

fn render_handlers(out: &mut String, handlers: &FaultHandlers) {
    for (kind, addr) in handlers {
        write!(out, " {}={addr}", kind.name()).unwrap();
    }
}

/// Text form of an API call, all arguments keyed.
pub fn render_call(call: &ApiCall) -> String {
    let mut s = call.name().to_string();
    match call {
        ApiCall::BlockResource(r) | ApiCall::CleanResource(r) | ApiCall::AcceptResource(r) | ApiCall::OwnerOf(r) => {
            write!(s, " res={r}").unwrap()
        }
        ApiCall::GrantResource(r, to) => write!(s, " res={r} to={to}").unwrap(),
        ApiCall::CreateEnclave {
            eid,
            evrange,
            mailbox_count,
        } => write!(s, " eid={eid} evrange={evrange} mailboxes={mailbox_count}").unwrap(),
        ApiCall::AllocatePageTable { eid, vaddr } => write!(s, " eid={eid} vaddr={vaddr}").unwrap(),
        ApiCall::LoadPage {
            eid,
            vaddr,
            src,
            dest,
            perms,
        } => write!(s, " eid={eid} vaddr={vaddr} src={src} dest={dest} perms={perms}").unwrap(),
        ApiCall::ShareMemory { eid, pa } => write!(s, " eid={eid} pa={pa}").unwrap(),
        ApiCall::CreateThread {
            eid,
            tid,
            entry_point,
            fault_handlers,
        } => {
            write!(s, " eid={eid} tid={tid} entry={entry_point}").unwrap();
            render_handlers(&mut s, fault_handlers);
        }
        ApiCall::InitEnclave(eid) | ApiCall::DeleteEnclave(eid) => write!(s, " eid={eid}").unwrap(),
        ApiCall::EnterEnclave { eid, tid, core } => write!(s, " eid={eid} tid={tid} core={}", core.0).unwrap(),
        ApiCall::AcceptThread {
            tid,
            entry_point,
            fault_handlers,
        } => {
            write!(s, " tid={tid} entry={entry_point}").unwrap();
            render_handlers(&mut s, fault_handlers);
        }
        ApiCall::MapPage { vaddr, pa, perms } => write!(s, " vaddr={vaddr} pa={pa} perms={perms}").unwrap(),
        ApiCall::AcceptMail { index, sender } => write!(s, " index={index} sender={sender}").unwrap(),
        ApiCall::SendMail { recipient, message } => {
            write!(s, " recipient={recipient} message=hex:{}", hex::encode(message)).unwrap()
        }
        ApiCall::GetMail(i) => write!(s, " index={i}").unwrap(),
        ApiCall::GetField(id) => write!(s, " id={id}").unwrap(),
        ApiCall::ExitEnclave
        | ApiCall::ResumeAex
        | ApiCall::ResumeFromFault
        | ApiCall::GetRandom
        | ApiCall::GetAttestationKey => {}
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(text: &str) {
        let words: Vec<&str> = text.split_whitespace().collect();
        let action = Action::parse(&words).unwrap();
        let rendered = action.render();
        let again: Vec<&str> = rendered.split_whitespace().collect();
        assert_eq!(Action::parse(&again).unwrap(), action, "{text} -> {rendered}");
    }

    #[test]
    fn actions_round_trip_through_text() {
        for text in [
            "os block_resource region:3",
            "os grant_resource region:3 enclave:0x4000",
            "os create_enclave eid=0x4000 evrange=0x400000+0x4000 mailboxes=2",
            "os load_page 0x4000 0x400000 0x3c000 0x20000 rx",
            "os create_thread eid=0x4000 tid=0x4800 entry=0x400000 page_fault=0x400800",
            "os enter_enclave eid=0x4000 tid=0x4800 core=1",
            "core 1 accept_mail index=0 sender=sm",
            "core 0 send_mail recipient=0x4000 message=text:hello",
            "core 0 get_field sm_certificate",
            "core 0 accept_thread tid=0x4800 entry=0x400000",
            "core 1 write 0x400000 0xdead",
            "core 1 fault illegal_instruction",
            "core 1 setregs 7",
            "dma write 0x20000 5",
            "os read 0x20000",
            "launch app0 eid=0x4000 tids=0x4800 units=region:2,region:3",
        ] {
            round_trip(text);
        }
    }

    #[test]
    fn rejects_malformed_calls() {
        for text in [
            "os block_resource",
            "os frobnicate 1",
            "os create_enclave eid=1 evrange=0x1000 mailboxes=1",
            "os block_resource region:1 extra",
            "core x read 0",
            "os get_mail 0 index=1",
        ] {
            let words: Vec<&str> = text.split_whitespace().collect();
            assert!(Action::parse(&words).is_err(), "{text}");
        }
    }
}
