//! Job lifecycle state machine and the QOS-priority scheduling cycle.
//!
//! Transitions: PENDING -> {RUNNING, CANCELLED};
//! RUNNING -> {COMPLETED, FAILED, CANCELLED, TIMEOUT}; terminal states absorb.
//!
//! Scheduling is greedy opportunistic fill: pending jobs are visited in
//! priority order (higher QOS weight, then earlier submit, then lower id)
//! and a blocked job never stops a lower-priority job that fits from
//! starting.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::accounting::{AccountingError, AccountingLog, Event, EventKind};
use crate::accounts::{AccountError, AccountsDb, QosTable, SubmitViolation};
use crate::cluster::{Allocation, Fleet};
use crate::jobspec::JobRequest;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("submission rejected: {0}")]
    Rejected(SubmitViolation),
    #[error("multi-node jobs are not supported (requested {0} nodes)")]
    MultiNodeUnsupported(u32),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("job {0} is not running")]
    NotRunning(u64),
    #[error("job {0} is already terminal")]
    AlreadyTerminal(u64),
    #[error("permission denied for {requester} on job {job_id}")]
    PermissionDenied { requester: String, job_id: u64 },
    #[error("unknown qos {0}")]
    UnknownQos(String),
    #[error(transparent)]
    Account(#[from] AccountError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Pending,
    Running,
    Completed,
    Failed,
    Cancelled,
    Timeout,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, JobState::Pending | JobState::Running)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "PENDING" => JobState::Pending,
            "RUNNING" => JobState::Running,
            "COMPLETED" => JobState::Completed,
            "FAILED" => JobState::Failed,
            "CANCELLED" => JobState::Cancelled,
            "TIMEOUT" => JobState::Timeout,
            _ => return None,
        })
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JobState::Pending => "PENDING",
            JobState::Running => "RUNNING",
            JobState::Completed => "COMPLETED",
            JobState::Failed => "FAILED",
            JobState::Cancelled => "CANCELLED",
            JobState::Timeout => "TIMEOUT",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub id: u64,
    pub request: JobRequest,
    pub username: String,
    pub state: JobState,
    pub submit_time: i64,
    pub start_time: Option<i64>,
    pub end_time: Option<i64>,
    pub exit_code: Option<i32>,
    pub allocation: Option<Allocation>,
}

/// Priority key: sorts ascending, so higher weight first, then earlier
/// submit time, then lower id.
pub fn priority_key(job: &Job, qos: &QosTable) -> Result<(Reverse<u32>, i64, u64), SchedulerError> {
    let weight = qos
        .weight(&job.request.qos)
        .ok_or_else(|| SchedulerError::UnknownQos(job.request.qos.clone()))?;
    Ok((Reverse(weight), job.submit_time, job.id))
}

#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    jobs: BTreeMap<u64, Job>,
    next_id: u64,
}

impl Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn job(&self, id: u64) -> Option<&Job> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    /// PENDING + RUNNING jobs for one user.
    pub fn live_count(&self, username: &str) -> u32 {
        self.jobs
            .values()
            .filter(|j| j.username == username && !j.state.is_terminal())
            .count() as u32
    }

    pub fn running_count(&self, username: &str) -> u32 {
        self.jobs
            .values()
            .filter(|j| j.username == username && j.state == JobState::Running)
            .count() as u32
    }

    fn event(job: &Job, time: i64, kind: EventKind) -> Event {
        Event {
            time,
            kind,
            jobid: job.id,
            jobname: job.request.job_name.clone(),
            state: job.state,
            exitcode: job.exit_code,
            user: job.username.clone(),
            account: job.request.qos.clone(),
        }
    }

    /// Check limits, create a PENDING job, record the SUBMIT event.
    pub fn submit(
        &mut self,
        req: JobRequest,
        username: &str,
        now: i64,
        accounts: &AccountsDb,
        accounting: &mut AccountingLog,
    ) -> Result<u64, SchedulerError> {
        if req.nodes > 1 {
            return Err(SchedulerError::MultiNodeUnsupported(req.nodes));
        }
        let live = self.live_count(username);
        accounts
            .check_submit(username, &req, live)?
            .map_err(SchedulerError::Rejected)?;
        self.next_id += 1;
        let id = self.next_id;
        let job = Job {
            id,
            request: req,
            username: username.to_string(),
            state: JobState::Pending,
            submit_time: now,
            start_time: None,
            end_time: None,
            exit_code: None,
            allocation: None,
        };
        accounting.record(&Self::event(&job, now, EventKind::Submit))?;
        self.jobs.insert(id, job);
        Ok(id)
    }

    /// One scheduling pass: visit PENDING jobs in priority order, skip users
    /// at max_running, start everything that fits. Returns started job ids.
    pub fn schedule_cycle(
        &mut self,
        now: i64,
        fleet: &mut Fleet,
        accounts: &AccountsDb,
        accounting: &mut AccountingLog,
    ) -> Result<Vec<u64>, SchedulerError> {
        let mut pending: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| j.state == JobState::Pending)
            .map(|j| j.id)
            .collect();
        pending.sort_by_key(|id| {
            priority_key(&self.jobs[id], &accounts.qos).expect("qos checked at submit")
        });

        let mut started = Vec::new();
        for id in pending {
            let (username, req) = {
                let job = &self.jobs[&id];
                (job.username.clone(), job.request.clone())
            };
            let max_running = accounts.get(&username).map_or(0, |a| a.max_running);
            if self.running_count(&username) >= max_running {
                continue;
            }
            if let Some(alloc) = fleet.allocate(id, &req) {
                let job = self.jobs.get_mut(&id).expect("id from scan");
                job.state = JobState::Running;
                job.start_time = Some(now);
                job.allocation = Some(alloc);
                started.push(id);
                let ev = Self::event(&self.jobs[&id], now, EventKind::Start);
                accounting.record(&ev)?;
            }
        }
        Ok(started)
    }

    /// Terminal transition for a finished command.
    pub fn complete(
        &mut self,
        job_id: u64,
        exit_code: i32,
        now: i64,
        fleet: &mut Fleet,
        accounting: &mut AccountingLog,
    ) -> Result<&Job, SchedulerError> {
        let job = self
            .jobs
            .get_mut(&job_id)
            .ok_or(SchedulerError::UnknownJob(job_id))?;
        if job.state != JobState::Running {
            return Err(SchedulerError::NotRunning(job_id));
        }
        if let Some(alloc) = job.allocation.take() {
            fleet.release(&alloc).expect("running job holds a live allocation");
        }
        job.state = if exit_code == 0 {
            JobState::Completed
        } else {
            JobState::Failed
        };
        job.exit_code = Some(exit_code);
        job.end_time = Some(now);
        let ev = Self::event(job, now, EventKind::End);
        accounting.record(&ev)?;
        Ok(&self.jobs[&job_id])
    }

    /// Cancel a job on behalf of its owner or an admin. Returns the state the
    /// job was in before cancellation (so callers can stop a running command).
    pub fn cancel(
        &mut self,
        job_id: u64,
        requester: &str,
        is_admin: bool,
        now: i64,
        fleet: &mut Fleet,
        accounting: &mut AccountingLog,
    ) -> Result<JobState, SchedulerError> {
        let job = self
            .jobs
            .get_mut(&job_id)
            .ok_or(SchedulerError::UnknownJob(job_id))?;
        if !is_admin && job.username != requester {
            return Err(SchedulerError::PermissionDenied {
                requester: requester.to_string(),
                job_id,
            });
        }
        if job.state.is_terminal() {
            return Err(SchedulerError::AlreadyTerminal(job_id));
        }
        let was = job.state;
        if let Some(alloc) = job.allocation.take() {
            fleet.release(&alloc).expect("running job holds a live allocation");
        }
        job.state = JobState::Cancelled;
        job.end_time = Some(now);
        let ev = Self::event(job, now, EventKind::Cancel);
        accounting.record(&ev)?;
        Ok(was)
    }

    /// Time out every RUNNING job whose elapsed time exceeds its limit.
    /// A job may run exactly its limit; the recorded end_time is clamped to
    /// start_time + limit, the instant its window closed.
    pub fn enforce_walltime(
        &mut self,
        now: i64,
        ticks_per_minute: i64,
        fleet: &mut Fleet,
        accounting: &mut AccountingLog,
    ) -> Result<Vec<u64>, SchedulerError> {
        let mut timed_out = Vec::new();
        let ids: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| j.state == JobState::Running)
            .map(|j| j.id)
            .collect();
        for id in ids {
            let job = self.jobs.get_mut(&id).expect("id from scan");
            let start = job.start_time.expect("running job has start_time");
            let limit_ticks = job.request.time_limit_min as i64 * ticks_per_minute;
            if now - start > limit_ticks {
                if let Some(alloc) = job.allocation.take() {
                    fleet.release(&alloc).expect("running job holds a live allocation");
                }
                job.state = JobState::Timeout;
                job.end_time = Some(start + limit_ticks);
                let ev = Self::event(job, start + limit_ticks, EventKind::Timeout);
                accounting.record(&ev)?;
                timed_out.push(id);
            }
        }
        Ok(timed_out)
    }

    /// Fail every RUNNING job placed on `node_name` (used when the node is
    /// marked DOWN after missed heartbeats). Jobs are not migrated.
    pub fn fail_jobs_on_node(
        &mut self,
        node_name: &str,
        now: i64,
        fleet: &mut Fleet,
        accounting: &mut AccountingLog,
    ) -> Result<Vec<u64>, SchedulerError> {
        let ids: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| {
                j.state == JobState::Running
                    && j.allocation.as_ref().map_or(false, |a| a.node_name == node_name)
            })
            .map(|j| j.id)
            .collect();
        for &id in &ids {
            let job = self.jobs.get_mut(&id).expect("id from scan");
            if let Some(alloc) = job.allocation.take() {
                fleet.release(&alloc).expect("running job holds a live allocation");
            }
            job.state = JobState::Failed;
            job.exit_code = None;
            job.end_time = Some(now);
            let ev = Self::event(job, now, EventKind::End);
            accounting.record(&ev)?;
        }
        Ok(ids)
    }
}
