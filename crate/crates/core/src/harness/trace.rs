// SPDX-License-Identifier: Apache-2.0

//! Execution traces, written as JSON lines.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use sha3::{Digest as _, Sha3_256};

use crate::monitor::SecurityMonitor;
use crate::statehash::state_digest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub index: u64,
    pub actor: String,
    pub api: String,
    /// sha3-256 of the action's argument text.
    pub args: String,
    pub result: String,
    /// Canonical state hash after the event.
    pub state: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

pub fn args_digest(args: &str) -> String {
    hex::encode(Sha3_256::digest(args.as_bytes()))
}

impl Trace {
    pub fn record(&mut self, actor: String, api: &str, args: &str, result: String, sm: &SecurityMonitor) {
        self.events.push(TraceEvent {
            index: self.events.len() as u64,
            actor,
            api: api.to_string(),
            args: args_digest(args),
            result,
            state: hex::encode(state_digest(sm)),
        });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last(&self) -> Option<&TraceEvent> {
        self.events.last()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_jsonl(text: &str) -> serde_json::Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { events })
    }
}
