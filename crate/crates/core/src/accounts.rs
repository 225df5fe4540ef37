//! User accounts: QOS levels, per-user limits, storage quota bookkeeping,
//! CSV roster ingestion, and the daily expiration sweep.
//!
//! The deployment this models keeps OS users and scheduler users as two
//! separate systems that must stay in sync. That split is modeled as two
//! tables: the identity table (accounts with all their attributes) and the
//! scheduler table (the set of usernames the scheduler will accept work
//! from). Every mutation keeps the active identity usernames equal to the
//! scheduler-table usernames.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use thiserror::Error;

use crate::jobspec::JobRequest;

pub const ROSTER_HEADER: &str = "username,qos,expires_on,max_submit,max_running,max_wall_min,quota_gb";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccountError {
    #[error("row {row}: duplicate username {username}")]
    DuplicateUsername { row: usize, username: String },
    #[error("row {row}: bad date {value:?}")]
    BadDate { row: usize, value: String },
    #[error("row {row}: unknown qos {qos}")]
    UnknownQos { row: usize, qos: String },
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("bad roster header (expected {ROSTER_HEADER:?})")]
    BadHeader,
    #[error("user {0} is inactive")]
    InactiveUser(String),
}

/// Why a submission was refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubmitViolation {
    /// Live (pending + running) job count is already at max_submit.
    SubmitLimit { limit: u32 },
    /// Requested wall time exceeds the user's max_wall_min.
    WallLimit { requested: u64, limit: u64 },
    /// Requested QOS does not exist.
    UnknownQos { qos: String },
    /// Requested QOS outranks the user's own (equal-or-lower weight only).
    QosNotPermitted { requested: String, own: String },
}

impl std::fmt::Display for SubmitViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubmitViolation::SubmitLimit { limit } => {
                write!(f, "SubmitLimit: already at max_submit={limit}")
            }
            SubmitViolation::WallLimit { requested, limit } => {
                write!(f, "WallLimit: requested {requested} min > max_wall_min {limit}")
            }
            SubmitViolation::UnknownQos { qos } => write!(f, "UnknownQos: {qos}"),
            SubmitViolation::QosNotPermitted { requested, own } => {
                write!(f, "QosNotPermitted: {requested} outranks {own}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QosLevel {
    pub name: String,
    pub weight: u32,
}

/// Named priority classes. A level named "normal" always exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QosTable {
    levels: BTreeMap<String, u32>,
}

impl Default for QosTable {
    fn default() -> Self {
        let mut levels = BTreeMap::new();
        levels.insert("normal".to_string(), 1);
        QosTable { levels }
    }
}

impl QosTable {
    pub fn define(&mut self, name: &str, weight: u32) {
        self.levels.insert(name.to_string(), weight);
    }

    pub fn weight(&self, name: &str) -> Option<u32> {
        self.levels.get(name).copied()
    }

    pub fn levels(&self) -> impl Iterator<Item = QosLevel> + '_ {
        self.levels.iter().map(|(name, weight)| QosLevel {
            name: name.clone(),
            weight: *weight,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserAccount {
    pub username: String,
    pub uid: u32,
    pub qos: String,
    pub expires_on: NaiveDate,
    pub max_submit: u32,
    pub max_running: u32,
    pub max_wall_min: u64,
    pub quota_gb: u64,
    pub active: bool,
}

#[derive(Debug, Clone, Default)]
pub struct AccountsDb {
    pub qos: QosTable,
    identity: BTreeMap<String, UserAccount>,
    scheduler_users: BTreeSet<String>,
    next_uid: u32,
}

impl AccountsDb {
    pub fn new(qos: QosTable) -> Self {
        AccountsDb {
            qos,
            identity: BTreeMap::new(),
            scheduler_users: BTreeSet::new(),
            next_uid: 0,
        }
    }

    pub fn get(&self, username: &str) -> Option<&UserAccount> {
        self.identity.get(username)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &UserAccount> {
        self.identity.values()
    }

    /// Active identity usernames; must always equal the scheduler table.
    pub fn active_usernames(&self) -> BTreeSet<String> {
        self.identity
            .values()
            .filter(|a| a.active)
            .map(|a| a.username.clone())
            .collect()
    }

    pub fn scheduler_usernames(&self) -> BTreeSet<String> {
        self.scheduler_users.clone()
    }

    /// The two-table sync invariant.
    pub fn tables_in_sync(&self) -> bool {
        self.active_usernames() == self.scheduler_users
    }

    /// Create one account atomically in both tables.
    pub fn create(
        &mut self,
        username: &str,
        qos: &str,
        expires_on: NaiveDate,
        max_submit: u32,
        max_running: u32,
        max_wall_min: u64,
        quota_gb: u64,
    ) -> Result<&UserAccount, AccountError> {
        if self.identity.get(username).map_or(false, |a| a.active) {
            return Err(AccountError::DuplicateUsername {
                row: 0,
                username: username.to_string(),
            });
        }
        if self.qos.weight(qos).is_none() {
            return Err(AccountError::UnknownQos {
                row: 0,
                qos: qos.to_string(),
            });
        }
        self.next_uid += 1;
        let account = UserAccount {
            username: username.to_string(),
            uid: 1000 + self.next_uid,
            qos: qos.to_string(),
            expires_on,
            max_submit,
            max_running: max_running.min(max_submit),
            max_wall_min,
            quota_gb,
            active: true,
        };
        self.identity.insert(username.to_string(), account);
        self.scheduler_users.insert(username.to_string());
        Ok(&self.identity[username])
    }

    /// Batch roster ingestion. Row errors are reported without aborting the
    /// batch; valid rows are still applied.
    pub fn ingest_csv(&mut self, text: &str) -> Result<(Vec<String>, Vec<AccountError>), AccountError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(AccountError::BadHeader)?;
        if header.trim() != ROSTER_HEADER {
            return Err(AccountError::BadHeader);
        }
        let mut created = Vec::new();
        let mut errors = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = i + 2; // 1-based, after the header
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            match self.ingest_row(row, line) {
                Ok(username) => created.push(username),
                Err(e) => errors.push(e),
            }
        }
        Ok((created, errors))
    }

    fn ingest_row(&mut self, row: usize, line: &str) -> Result<String, AccountError> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(AccountError::BadRow {
                row,
                message: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let username = fields[0].trim();
        if username.is_empty() {
            return Err(AccountError::BadRow {
                row,
                message: "empty username".to_string(),
            });
        }
        let qos = fields[1].trim();
        let expires_on = NaiveDate::parse_from_str(fields[2].trim(), "%Y-%m-%d").map_err(|_| {
            AccountError::BadDate {
                row,
                value: fields[2].to_string(),
            }
        })?;
        let num = |idx: usize| -> Result<u64, AccountError> {
            fields[idx].trim().parse().map_err(|_| AccountError::BadRow {
                row,
                message: format!("bad number {:?}", fields[idx]),
            })
        };
        let (max_submit, max_running) = (num(3)? as u32, num(4)? as u32);
        let (max_wall_min, quota_gb) = (num(5)?, num(6)?);
        self.create(username, qos, expires_on, max_submit, max_running, max_wall_min, quota_gb)
            .map_err(|e| match e {
                AccountError::DuplicateUsername { username, .. } => {
                    AccountError::DuplicateUsername { row, username }
                }
                AccountError::UnknownQos { qos, .. } => AccountError::UnknownQos { row, qos },
                other => other,
            })?;
        Ok(username.to_string())
    }

    /// Submit-time limit check. The running-count limit is enforced at
    /// schedule time, not here.
    pub fn check_submit(
        &self,
        username: &str,
        req: &JobRequest,
        submitted_live: u32,
    ) -> Result<Result<(), SubmitViolation>, AccountError> {
        let user = self
            .identity
            .get(username)
            .filter(|a| a.active)
            .ok_or_else(|| AccountError::InactiveUser(username.to_string()))?;
        if submitted_live >= user.max_submit {
            return Ok(Err(SubmitViolation::SubmitLimit {
                limit: user.max_submit,
            }));
        }
        if req.time_limit_min > user.max_wall_min {
            return Ok(Err(SubmitViolation::WallLimit {
                requested: req.time_limit_min,
                limit: user.max_wall_min,
            }));
        }
        let Some(req_weight) = self.qos.weight(&req.qos) else {
            return Ok(Err(SubmitViolation::UnknownQos {
                qos: req.qos.clone(),
            }));
        };
        let own_weight = self.qos.weight(&user.qos).unwrap_or(0);
        if req_weight > own_weight {
            return Ok(Err(SubmitViolation::QosNotPermitted {
                requested: req.qos.clone(),
                own: user.qos.clone(),
            }));
        }
        Ok(Ok(()))
    }

    /// Remove every account whose expires_on is strictly before `today`
    /// from the scheduler table and mark it inactive. Returns the removed
    /// usernames; cancelling the removed users' jobs is the caller's duty.
    /// Idempotent for a fixed date.
    pub fn reconcile_expired(&mut self, today: NaiveDate) -> Vec<String> {
        let mut removed = Vec::new();
        for account in self.identity.values_mut() {
            if account.active && account.expires_on < today {
                account.active = false;
                self.scheduler_users.remove(&account.username);
                removed.push(account.username.clone());
            }
        }
        removed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn db_with_qos() -> AccountsDb {
        let mut qos = QosTable::default();
        qos.define("student", 1);
        qos.define("faculty", 2);
        AccountsDb::new(qos)
    }

    fn roster(rows: &[&str]) -> String {
        let mut text = format!("{ROSTER_HEADER}\n");
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        text
    }

    #[test]
    fn ingest_reads_back_fields() {
        let mut db = db_with_qos();
        let (created, errors) = db
            .ingest_csv(&roster(&["alice,student,2026-05-31,20,2,2880,200"]))
            .unwrap();
        assert_eq!(created, vec!["alice"]);
        assert!(errors.is_empty());
        let a = db.get("alice").unwrap();
        assert_eq!(a.qos, "student");
        assert_eq!(a.expires_on, date("2026-05-31"));
        assert_eq!(a.max_submit, 20);
        assert_eq!(a.max_running, 2);
        assert_eq!(a.max_wall_min, 2880);
        assert_eq!(a.quota_gb, 200);
        assert!(db.tables_in_sync());
    }

    #[test]
    fn header_only_roster_is_empty() {
        let mut db = db_with_qos();
        let (created, errors) = db.ingest_csv(&roster(&[])).unwrap();
        assert!(created.is_empty());
        assert!(errors.is_empty());
    }

    #[test]
    fn duplicate_username_is_row_local() {
        let mut db = db_with_qos();
        let (created, errors) = db
            .ingest_csv(&roster(&[
                "bob,student,2026-05-31,20,2,2880,200",
                "bob,student,2026-05-31,20,2,2880,200",
                "carol,student,2026-05-31,20,2,2880,200",
            ]))
            .unwrap();
        assert_eq!(created, vec!["bob", "carol"]);
        assert_eq!(
            errors,
            vec![AccountError::DuplicateUsername {
                row: 3,
                username: "bob".to_string()
            }]
        );
        assert!(db.tables_in_sync());
    }

    #[test]
    fn bad_rows_reported() {
        let mut db = db_with_qos();
        let (created, errors) = db
            .ingest_csv(&roster(&[
                "dan,student,not-a-date,20,2,2880,200",
                "eve,ghost,2026-05-31,20,2,2880,200",
            ]))
            .unwrap();
        assert!(created.is_empty());
        assert!(matches!(errors[0], AccountError::BadDate { row: 2, .. }));
        assert!(matches!(errors[1], AccountError::UnknownQos { row: 3, .. }));
    }

    #[test]
    fn bad_header_aborts() {
        let mut db = db_with_qos();
        assert_eq!(db.ingest_csv("user,qos\n"), Err(AccountError::BadHeader));
    }

    fn req(time_limit_min: u64, qos: &str) -> JobRequest {
        JobRequest {
            time_limit_min,
            qos: qos.to_string(),
            command: vec!["true".to_string()],
            ..JobRequest::default()
        }
    }

    #[test]
    fn submit_limit_at_capacity() {
        let mut db = db_with_qos();
        db.create("alice", "student", date("2099-01-01"), 2, 2, 2880, 10)
            .unwrap();
        let v = db.check_submit("alice", &req(60, "student"), 2).unwrap();
        assert_eq!(v, Err(SubmitViolation::SubmitLimit { limit: 2 }));
        assert_eq!(db.check_submit("alice", &req(60, "student"), 1).unwrap(), Ok(()));
    }

    #[test]
    fn wall_limit_boundary_inclusive() {
        let mut db = db_with_qos();
        db.create("alice", "student", date("2099-01-01"), 5, 2, 2880, 10)
            .unwrap();
        assert_eq!(db.check_submit("alice", &req(2880, "student"), 0).unwrap(), Ok(()));
        assert!(db.check_submit("alice", &req(2881, "student"), 0).unwrap().is_err());
    }

    #[test]
    fn qos_request_rule_over_weight_grid() {
        // Exhaustive over (own-weight, requested-weight) in {0..3}^2:
        // allowed iff requested <= own.
        for own_w in 0..4u32 {
            for req_w in 0..4u32 {
                let mut qos = QosTable::default();
                qos.define("own", own_w);
                qos.define("want", req_w);
                let mut db = AccountsDb::new(qos);
                db.create("u", "own", date("2099-01-01"), 5, 2, 2880, 10).unwrap();
                let outcome = db.check_submit("u", &req(60, "want"), 0).unwrap();
                assert_eq!(outcome.is_ok(), req_w <= own_w, "own={own_w} req={req_w}");
            }
        }
    }

    #[test]
    fn student_cannot_request_faculty() {
        let mut db = db_with_qos();
        db.create("alice", "student", date("2099-01-01"), 5, 2, 2880, 10)
            .unwrap();
        let v = db.check_submit("alice", &req(60, "faculty"), 0).unwrap();
        assert!(matches!(v, Err(SubmitViolation::QosNotPermitted { .. })));
    }

    #[test]
    fn inactive_user_is_an_error() {
        let mut db = db_with_qos();
        db.create("alice", "student", date("2000-01-01"), 5, 2, 2880, 10)
            .unwrap();
        db.reconcile_expired(date("2001-01-01"));
        assert_eq!(
            db.check_submit("alice", &req(60, "student"), 0),
            Err(AccountError::InactiveUser("alice".to_string()))
        );
    }

    #[test]
    fn expiry_is_strictly_before_today() {
        let mut db = db_with_qos();
        db.create("past", "student", date("2026-01-01"), 5, 2, 2880, 10).unwrap();
        db.create("today", "student", date("2026-01-02"), 5, 2, 2880, 10).unwrap();
        let removed = db.reconcile_expired(date("2026-01-02"));
        assert_eq!(removed, vec!["past"]);
        assert!(db.get("today").unwrap().active);
        assert!(db.tables_in_sync());
        // idempotent
        assert!(db.reconcile_expired(date("2026-01-02")).is_empty());
    }
}
