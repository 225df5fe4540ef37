//! Append-only job accounting: one event per line, replayable from empty,
//! with sacct-style tabular queries.
//!
//! Log line format (bit-exact, pipe-delimited):
//!
//! ```text
//! time|event|jobid|jobname|state|exitcode|user|account
//! ```
//!
//! Empty optional fields are empty strings; a missing exitcode renders as
//! "" and never as "0".

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::scheduler::JobState;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccountingError {
    #[error("inconsistent event: {0}")]
    InconsistentEvent(String),
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("malformed log line: {0:?}")]
    MalformedLine(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Submit,
    Start,
    End,
    Cancel,
    Timeout,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Submit => "SUBMIT",
            EventKind::Start => "START",
            EventKind::End => "END",
            EventKind::Cancel => "CANCEL",
            EventKind::Timeout => "TIMEOUT",
        };
        f.write_str(s)
    }
}

impl EventKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "SUBMIT" => EventKind::Submit,
            "START" => EventKind::Start,
            "END" => EventKind::End,
            "CANCEL" => EventKind::Cancel,
            "TIMEOUT" => EventKind::Timeout,
            _ => return None,
        })
    }
}

/// One lifecycle event with the job snapshot it carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub time: i64,
    pub kind: EventKind,
    pub jobid: u64,
    pub jobname: String,
    pub state: JobState,
    pub exitcode: Option<i32>,
    pub user: String,
    pub account: String,
}

/// The per-job accounting row reconstructed from events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountingRecord {
    pub jobid: u64,
    pub jobname: String,
    pub state: JobState,
    pub exitcode: Option<i32>,
    pub user: String,
    pub account: String,
    pub submit_time: i64,
    pub start_time: Option<i64>,
    pub end_time: Option<i64>,
}

pub const QUERY_FIELDS: &[&str] = &[
    "jobid", "jobname", "state", "exitcode", "user", "account", "submit", "start", "end",
];

#[derive(Debug, Clone, Default)]
pub struct AccountingLog {
    records: BTreeMap<u64, AccountingRecord>,
    lines: Vec<String>,
}

impl AccountingLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// The raw append-only log lines, in order.
    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn record_for(&self, jobid: u64) -> Option<&AccountingRecord> {
        self.records.get(&jobid)
    }

    pub fn records(&self) -> impl Iterator<Item = &AccountingRecord> {
        self.records.values()
    }

    /// Append one event: log grows by one line, in-memory record updated.
    pub fn record(&mut self, event: &Event) -> Result<(), AccountingError> {
        self.apply(event)?;
        self.lines.push(Self::format_line(event));
        Ok(())
    }

    fn apply(&mut self, event: &Event) -> Result<(), AccountingError> {
        match event.kind {
            EventKind::Submit => {
                if self.records.contains_key(&event.jobid) {
                    return Err(AccountingError::InconsistentEvent(format!(
                        "SUBMIT for existing job {}",
                        event.jobid
                    )));
                }
                self.records.insert(
                    event.jobid,
                    AccountingRecord {
                        jobid: event.jobid,
                        jobname: event.jobname.clone(),
                        state: JobState::Pending,
                        exitcode: None,
                        user: event.user.clone(),
                        account: event.account.clone(),
                        submit_time: event.time,
                        start_time: None,
                        end_time: None,
                    },
                );
            }
            EventKind::Start => {
                let rec = self.live_record(event, JobState::Pending)?;
                rec.state = JobState::Running;
                rec.start_time = Some(event.time);
            }
            EventKind::End => {
                let rec = self.live_record(event, JobState::Running)?;
                rec.state = event.state;
                rec.exitcode = event.exitcode;
                rec.end_time = Some(event.time);
            }
            EventKind::Cancel => {
                let rec = self.records.get_mut(&event.jobid).ok_or_else(|| {
                    AccountingError::InconsistentEvent(format!("CANCEL for unknown job {}", event.jobid))
                })?;
                if rec.state != JobState::Pending && rec.state != JobState::Running {
                    return Err(AccountingError::InconsistentEvent(format!(
                        "CANCEL for terminal job {}",
                        event.jobid
                    )));
                }
                rec.state = JobState::Cancelled;
                rec.end_time = Some(event.time);
            }
            EventKind::Timeout => {
                let rec = self.live_record(event, JobState::Running)?;
                rec.state = JobState::Timeout;
                rec.end_time = Some(event.time);
            }
        }
        Ok(())
    }

    fn live_record(
        &mut self,
        event: &Event,
        expect: JobState,
    ) -> Result<&mut AccountingRecord, AccountingError> {
        let rec = self.records.get_mut(&event.jobid).ok_or_else(|| {
            AccountingError::InconsistentEvent(format!(
                "{} for unknown job {}",
                event.kind, event.jobid
            ))
        })?;
        if rec.state != expect {
            return Err(AccountingError::InconsistentEvent(format!(
                "{} for job {} in state {}",
                event.kind, event.jobid, rec.state
            )));
        }
        Ok(rec)
    }

    fn format_line(event: &Event) -> String {
        let exitcode = event.exitcode.map(|c| c.to_string()).unwrap_or_default();
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}",
            event.time,
            event.kind,
            event.jobid,
            event.jobname,
            event.state,
            exitcode,
            event.user,
            event.account
        )
    }

    pub fn parse_line(line: &str) -> Result<Event, AccountingError> {
        let err = || AccountingError::MalformedLine(line.to_string());
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 8 {
            return Err(err());
        }
        Ok(Event {
            time: parts[0].parse().map_err(|_| err())?,
            kind: EventKind::parse(parts[1]).ok_or_else(err)?,
            jobid: parts[2].parse().map_err(|_| err())?,
            jobname: parts[3].to_string(),
            state: JobState::parse(parts[4]).ok_or_else(err)?,
            exitcode: if parts[5].is_empty() {
                None
            } else {
                Some(parts[5].parse().map_err(|_| err())?)
            },
            user: parts[6].to_string(),
            account: parts[7].to_string(),
        })
    }

    /// Rebuild the in-memory table by replaying log lines from empty.
    pub fn replay(lines: &[String]) -> Result<Self, AccountingError> {
        let mut log = AccountingLog::new();
        for line in lines {
            let event = Self::parse_line(line)?;
            log.record(&event)?;
        }
        Ok(log)
    }

    /// sacct-style query: columns exactly in the requested order, rows by
    /// ascending jobid.
    pub fn query(
        &self,
        format_fields: &[&str],
        user: Option<&str>,
        state: Option<JobState>,
    ) -> Result<Vec<Vec<String>>, AccountingError> {
        for f in format_fields {
            if !QUERY_FIELDS.contains(f) {
                return Err(AccountingError::UnknownField(f.to_string()));
            }
        }
        let mut rows = Vec::new();
        for rec in self.records.values() {
            if user.map_or(false, |u| rec.user != u) {
                continue;
            }
            if state.map_or(false, |s| rec.state != s) {
                continue;
            }
            let row = format_fields
                .iter()
                .map(|f| match *f {
                    "jobid" => rec.jobid.to_string(),
                    "jobname" => rec.jobname.clone(),
                    "state" => rec.state.to_string(),
                    "exitcode" => rec.exitcode.map(|c| c.to_string()).unwrap_or_default(),
                    "user" => rec.user.clone(),
                    "account" => rec.account.clone(),
                    "submit" => rec.submit_time.to_string(),
                    "start" => rec.start_time.map(|t| t.to_string()).unwrap_or_default(),
                    "end" => rec.end_time.map(|t| t.to_string()).unwrap_or_default(),
                    _ => unreachable!("validated above"),
                })
                .collect();
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Render rows as aligned plain-text columns under a header row.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            if i < widths.len() {
                widths[i] = widths[i].max(cell.len());
            }
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: Vec<&str>, widths: &[usize]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            if i + 1 == cells.len() {
                line.push_str(cell);
            } else {
                line.push_str(&format!("{:width$}", cell, width = widths[i]));
            }
        }
        line.trim_end().to_string()
    };
    out.push_str(&fmt_row(headers.to_vec(), &widths));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row.iter().map(String::as_str).collect(), &widths));
        out.push('\n');
    }
    out
}
