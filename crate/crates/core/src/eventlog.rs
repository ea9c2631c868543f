//! Newline-delimited event records: `time_us kind key=value ...`.
//!
//! Field order is the order of insertion, so a given run always produces
//! the same bytes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::types::Micros;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub time: Micros,
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl EventRecord {
    pub fn new(time: Micros, kind: &str) -> EventRecord {
        EventRecord {
            time,
            kind: kind.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> EventRecord {
        let v = value.to_string();
        debug_assert!(!v.contains(char::is_whitespace), "field values may not contain spaces");
        self.fields.push((key.to_string(), v));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key)?.parse().ok()
    }
}

impl fmt::Display for EventRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.time.0, self.kind)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for EventRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<EventRecord> {
        let mut parts = s.split_whitespace();
        let bad = || Error::InvalidArgument(format!("malformed event record `{s}`"));
        let time = Micros(parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?);
        let kind = parts.next().ok_or_else(bad)?.to_string();
        let mut fields = Vec::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            fields.push((k.to_string(), v.to_string()));
        }
        Ok(EventRecord { time, kind, fields })
    }
}

pub fn parse_log(text: &str) -> Result<Vec<EventRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}

pub fn render_log(records: &[EventRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}
