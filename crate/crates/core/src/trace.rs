//! JSON-lines trace records.
//!
//! One object per line: `{"t":..,"core":..,"tid":..,"kind":..,"extra":{..}}`.
//! `t` is in microseconds. `extra` is omitted when empty.
//!
//! | kind        | meaning                                                     |
//! |-------------|-------------------------------------------------------------|
//! | `dispatch`  | thread switched in on `core`                                |
//! | `block`     | thread left `core` blocked (`umt`: a channel write happened) |
//! |             | or, with `compensation`, a migration compensation write     |
//! | `unblock`   | channel unblock write on `core`                             |
//! | `wake`      | thread became runnable on `core` (`cause`: io, leader, ...)  |
//! | `migrate`   | runnable thread moved from `from` to `core`                 |
//! | `surrender` | worker parked itself at a scheduling point                  |

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::CoreId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Block,
    Unblock,
    Wake,
    Surrender,
    Dispatch,
    Migrate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extra {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub umt: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensation: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<CoreId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

impl Extra {
    pub fn is_empty(&self) -> bool {
        *self == Extra::default()
    }

    pub fn umt(written: bool) -> Self {
        Self {
            umt: Some(written),
            ..Self::default()
        }
    }

    pub fn compensation() -> Self {
        Self {
            umt: Some(true),
            compensation: Some(true),
            ..Self::default()
        }
    }

    pub fn from_core(from: CoreId) -> Self {
        Self {
            from: Some(from),
            ..Self::default()
        }
    }

    pub fn cause(cause: &str) -> Self {
        Self {
            cause: Some(cause.to_owned()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub core: CoreId,
    pub tid: u32,
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Extra::is_empty")]
    pub extra: Extra,
}

impl TraceRecord {
    /// A block that took a thread off its core's runnable set.
    pub fn leaves_core(&self) -> bool {
        self.kind == TraceKind::Block && self.extra.compensation != Some(true)
    }

    /// Whether this record corresponds to a channel write.
    pub fn is_channel_write(&self) -> bool {
        match self.kind {
            TraceKind::Unblock => true,
            TraceKind::Block => self.extra.umt == Some(true),
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Parses a JSON-lines trace. Blank lines are skipped; line numbers are 1-based.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| TraceError::Malformed {
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_omits_empty_extra() {
        let recs = vec![
            TraceRecord {
                t: 5,
                core: 1,
                tid: 3,
                kind: TraceKind::Dispatch,
                extra: Extra::default(),
            },
            TraceRecord {
                t: 7,
                core: 0,
                tid: 3,
                kind: TraceKind::Migrate,
                extra: Extra::from_core(1),
            },
        ];
        let text = to_jsonl(&recs);
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"t":5,"core":1,"tid":3,"kind":"dispatch"}"#
        );
        assert_eq!(read_jsonl(text.as_bytes()).unwrap(), recs);
    }

    #[test]
    fn malformed_line_reports_position() {
        let text = "{\"t\":1,\"core\":0,\"tid\":0,\"kind\":\"wake\"}\n\nnot json\n";
        match read_jsonl(text.as_bytes()) {
            Err(TraceError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
