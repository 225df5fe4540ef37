//! The controller: single owner of queue, accounts, fleet, and accounting
//! state. All mutations flow through one logical event loop; network and
//! simulation front-ends feed it ordered events.

use std::collections::BTreeMap;

use chrono::NaiveDate;

use crate::accounting::AccountingLog;
use crate::accounts::AccountsDb;
use crate::cluster::{Fleet, NodeState};
use crate::control::{HEARTBEAT_INTERVAL, MISSED_HEARTBEATS_DOWN};
use crate::jobspec::JobRequest;
use crate::scheduler::{JobState, Scheduler, SchedulerError};

#[derive(Debug)]
pub struct Controller {
    pub accounts: AccountsDb,
    pub fleet: Fleet,
    pub scheduler: Scheduler,
    pub accounting: AccountingLog,
    pub admins: Vec<String>,
    /// 1 in simulation (ticks are minutes), 60 under a real clock (seconds).
    pub ticks_per_minute: i64,
    last_heartbeat: BTreeMap<String, i64>,
}

impl Controller {
    pub fn new(fleet: Fleet, accounts: AccountsDb, admins: Vec<String>, ticks_per_minute: i64) -> Self {
        Controller {
            accounts,
            fleet,
            scheduler: Scheduler::new(),
            accounting: AccountingLog::new(),
            admins,
            ticks_per_minute,
            last_heartbeat: BTreeMap::new(),
        }
    }

    pub fn is_admin(&self, username: &str) -> bool {
        self.admins.iter().any(|a| a == username)
    }

    pub fn submit(&mut self, req: JobRequest, username: &str, now: i64) -> Result<u64, SchedulerError> {
        self.scheduler
            .submit(req, username, now, &self.accounts, &mut self.accounting)
    }

    pub fn schedule_cycle(&mut self, now: i64) -> Vec<u64> {
        self.scheduler
            .schedule_cycle(now, &mut self.fleet, &self.accounts, &mut self.accounting)
            .expect("accounting accepts scheduler events")
    }

    pub fn enforce_walltime(&mut self, now: i64) -> Vec<u64> {
        self.scheduler
            .enforce_walltime(now, self.ticks_per_minute, &mut self.fleet, &mut self.accounting)
            .expect("accounting accepts scheduler events")
    }

    pub fn complete(&mut self, job_id: u64, exit_code: i32, now: i64) -> Result<JobState, SchedulerError> {
        let job = self
            .scheduler
            .complete(job_id, exit_code, now, &mut self.fleet, &mut self.accounting)?;
        Ok(job.state)
    }

    /// Returns the job's state before cancellation so callers can stop a
    /// running command on its node.
    pub fn cancel(&mut self, job_id: u64, requester: &str, now: i64) -> Result<JobState, SchedulerError> {
        let is_admin = self.is_admin(requester);
        self.scheduler
            .cancel(job_id, requester, is_admin, now, &mut self.fleet, &mut self.accounting)
    }

    /// The daily expiration sweep: deactivate expired accounts and cancel
    /// every one of their live jobs.
    pub fn reconcile(&mut self, today: NaiveDate, now: i64) -> (Vec<String>, Vec<u64>) {
        let removed = self.accounts.reconcile_expired(today);
        let mut cancelled = Vec::new();
        for username in &removed {
            let live: Vec<u64> = self
                .scheduler
                .jobs()
                .filter(|j| &j.username == username && !j.state.is_terminal())
                .map(|j| j.id)
                .collect();
            for id in live {
                self.scheduler
                    .cancel(id, username, true, now, &mut self.fleet, &mut self.accounting)
                    .expect("live job is cancellable");
                cancelled.push(id);
            }
        }
        (removed, cancelled)
    }

    /// Record a heartbeat. A node that was DOWN comes back up once its agent
    /// is heard from again.
    pub fn heartbeat(&mut self, node_name: &str, now: i64) {
        self.last_heartbeat.insert(node_name.to_string(), now);
        if let Some(node) = self.fleet.node_mut(node_name) {
            if node.down {
                node.down = false;
            }
        }
    }

    /// Mark nodes with 3 missed heartbeats DOWN and fail their running jobs.
    /// Returns the nodes newly marked down.
    pub fn check_heartbeats(&mut self, now: i64) -> Vec<String> {
        let deadline = HEARTBEAT_INTERVAL * MISSED_HEARTBEATS_DOWN;
        let mut downed = Vec::new();
        let names: Vec<String> = self.last_heartbeat.keys().cloned().collect();
        for name in names {
            let last = self.last_heartbeat[&name];
            let already_down = self.fleet.node(&name).map_or(true, |n| n.down);
            if !already_down && now - last > deadline {
                self.fleet.set_down(&name, true).expect("tracked node exists");
                self.scheduler
                    .fail_jobs_on_node(&name, now, &mut self.fleet, &mut self.accounting)
                    .expect("accounting accepts scheduler events");
                downed.push(name);
            }
        }
        downed
    }

    /// One scheduler tick: wall-time enforcement, heartbeat liveness, then a
    /// scheduling pass. Returns the jobs started this tick.
    pub fn tick(&mut self, now: i64) -> Vec<u64> {
        self.enforce_walltime(now);
        self.check_heartbeats(now);
        self.schedule_cycle(now)
    }

    pub fn node_summary(&self) -> Vec<(String, NodeState, String, u64)> {
        self.fleet.node_summary()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounts::QosTable;
    use crate::cluster::Node;

    fn controller() -> Controller {
        let mut qos = QosTable::default();
        qos.define("student", 1);
        let mut accounts = AccountsDb::new(qos);
        accounts
            .create(
                "alice",
                "student",
                NaiveDate::from_ymd_opt(2026, 1, 1).unwrap(),
                10,
                10,
                10000,
                10,
            )
            .unwrap();
        let fleet = Fleet::new(vec![Node::new("node0", 2, 64000, 16)]);
        Controller::new(fleet, accounts, vec!["admin".to_string()], 1)
    }

    fn req() -> JobRequest {
        JobRequest {
            gpus: 1,
            command: vec!["true".to_string()],
            ..JobRequest::default()
        }
    }

    #[test]
    fn reconcile_cancels_pending_and_running() {
        let mut c = controller();
        let pending_id;
        let running_id = c.submit(req(), "alice", 0).unwrap();
        c.tick(0);
        pending_id = c.submit(req(), "alice", 1).unwrap();
        // hold the second job pending by filling the node
        let other = c.submit(req(), "alice", 1).unwrap();
        c.tick(1);
        assert_eq!(c.scheduler.job(running_id).unwrap().state, JobState::Running);
        let today = NaiveDate::from_ymd_opt(2026, 1, 2).unwrap();
        let (removed, cancelled) = c.reconcile(today, 2);
        assert_eq!(removed, vec!["alice"]);
        assert!(cancelled.contains(&pending_id) && cancelled.contains(&running_id));
        assert!(cancelled.contains(&other));
        // second run same date is a no-op
        assert_eq!(c.reconcile(today, 3), (vec![], vec![]));
        assert!(c.accounts.tables_in_sync());
    }

    #[test]
    fn missed_heartbeats_fail_node_jobs() {
        let mut c = controller();
        c.heartbeat("node0", 0);
        let id = c.submit(req(), "alice", 0).unwrap();
        c.tick(0);
        assert_eq!(c.scheduler.job(id).unwrap().state, JobState::Running);
        // within 3 intervals: still up
        c.tick(30);
        assert_eq!(c.fleet.node("node0").unwrap().state(), NodeState::Mixed);
        c.tick(31);
        assert_eq!(c.fleet.node("node0").unwrap().state(), NodeState::Down);
        assert_eq!(c.scheduler.job(id).unwrap().state, JobState::Failed);
        // heartbeat resume brings the node back
        c.heartbeat("node0", 40);
        assert_eq!(c.fleet.node("node0").unwrap().state(), NodeState::Idle);
    }
}
