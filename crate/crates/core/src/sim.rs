//! Deterministic discrete-event harness driving the full controller at
//! virtual time, plus a single-machine local-exec mode that runs real
//! commands.
//!
//! Virtual time advances in 1-minute ticks, matching the unit of job time
//! limits. Each tick runs wall-time enforcement, then due completions, then
//! the tick's external events, then one scheduling pass. Identical scenarios
//! yield identical traces.
//!
//! Scenario file format (flat text, `#` comments allowed):
//!
//! ```text
//! node <name> gpus=<n> mem_mb=<m> cpus=<c>
//! qos <name> <weight>
//! user <roster CSV row>
//! event <time> submit <username> duration=<min> [gpus=N] [mem=MB] [time=LIMIT]
//!       [qos=NAME] [name=JOBNAME] [exit=CODE] [cmd=TOKEN]
//! event <time> cancel <jobid> [by=<username>]
//! event <time> reconcile <YYYY-MM-DD>
//! event <time> tick
//! ```

use std::fs::File;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use thiserror::Error;

use crate::accounting::AccountingLog;
use crate::accounts::{AccountsDb, QosTable, ROSTER_HEADER};
use crate::cluster::{Fleet, Node};
use crate::controller::Controller;
use crate::jobspec::{self, JobRequest};
use crate::scheduler::JobState;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("malformed scenario, line {line}: {message}")]
    MalformedScenario { line: usize, message: String },
    #[error("roster error: {0}")]
    Roster(#[from] crate::accounts::AccountError),
    #[error("job file: {0}")]
    JobFile(#[from] crate::jobspec::JobSpecError),
    #[error("launch failure: {0}")]
    LaunchFailure(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Submit {
        username: String,
        job_file: String,
        true_duration_min: i64,
        exit_code: i32,
    },
    Cancel {
        job_id: u64,
        requester: String,
    },
    Reconcile(NaiveDate),
    Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub nodes: Vec<Node>,
    pub qos_table: Vec<(String, u32)>,
    pub roster: String,
    pub events: Vec<(i64, Action)>,
}

/// One observed lifecycle transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub time: i64,
    pub job_id: u64,
    pub state: JobState,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub transitions: Vec<Transition>,
    pub accounting: AccountingLog,
}

impl Trace {
    /// The trace in its external form: transition listing plus the
    /// accounting log lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.transitions {
            out.push_str(&format!("{} job {} -> {}\n", t.time, t.job_id, t.state));
        }
        out.push_str("---\n");
        for line in self.accounting.lines() {
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut nodes = Vec::new();
        let mut qos_table = Vec::new();
        let mut roster = format!("{ROSTER_HEADER}\n");
        let mut events: Vec<(i64, Action)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let bad = |message: String| SimError::MalformedScenario { line: lineno, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tokens = line.split_whitespace();
            match tokens.next().unwrap() {
                "node" => {
                    let name = tokens.next().ok_or_else(|| bad("node needs a name".into()))?;
                    let (mut gpus, mut mem, mut cpus) = (0u32, 1u64, 1u32);
                    for tok in tokens {
                        let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("bad node attr {tok:?}")))?;
                        match k {
                            "gpus" => gpus = v.parse().map_err(|_| bad(format!("bad gpus {v:?}")))?,
                            "mem_mb" => mem = v.parse().map_err(|_| bad(format!("bad mem_mb {v:?}")))?,
                            "cpus" => cpus = v.parse().map_err(|_| bad(format!("bad cpus {v:?}")))?,
                            other => return Err(bad(format!("unknown node attr {other:?}"))),
                        }
                    }
                    nodes.push(Node::new(name, gpus, mem, cpus));
                }
                "qos" => {
                    let name = tokens.next().ok_or_else(|| bad("qos needs a name".into()))?;
                    let weight = tokens
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| bad("qos needs an integer weight".into()))?;
                    qos_table.push((name.to_string(), weight));
                }
                "user" => {
                    let row = tokens.collect::<Vec<_>>().join(" ");
                    if row.is_empty() {
                        return Err(bad("user needs a roster row".into()));
                    }
                    roster.push_str(&row);
                    roster.push('\n');
                }
                "event" => {
                    let time: i64 = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("event needs an integer time".into()))?;
                    let action = match tokens.next().ok_or_else(|| bad("event needs an action".into()))? {
                        "submit" => parse_submit(tokens, &bad)?,
                        "cancel" => {
                            let job_id = tokens
                                .next()
                                .and_then(|t| t.parse().ok())
                                .ok_or_else(|| bad("cancel needs a job id".into()))?;
                            let mut requester = "admin".to_string();
                            for tok in tokens {
                                if let Some(v) = tok.strip_prefix("by=") {
                                    requester = v.to_string();
                                }
                            }
                            Action::Cancel { job_id, requester }
                        }
                        "reconcile" => {
                            let date = tokens
                                .next()
                                .and_then(|t| NaiveDate::parse_from_str(t, "%Y-%m-%d").ok())
                                .ok_or_else(|| bad("reconcile needs a YYYY-MM-DD date".into()))?;
                            Action::Reconcile(date)
                        }
                        "tick" => Action::Tick,
                        other => return Err(bad(format!("unknown action {other:?}"))),
                    };
                    if let Some((prev, _)) = events.last() {
                        if time < *prev {
                            return Err(bad("events must be time-ordered".into()));
                        }
                    }
                    events.push((time, action));
                }
                other => return Err(bad(format!("unknown scenario directive {other:?}"))),
            }
        }
        Ok(Scenario {
            nodes,
            qos_table,
            roster,
            events,
        })
    }
}

fn parse_submit<'a>(
    tokens: impl Iterator<Item = &'a str>,
    bad: &dyn Fn(String) -> SimError,
) -> Result<Action, SimError> {
    let mut tokens = tokens;
    let username = tokens
        .next()
        .ok_or_else(|| bad("submit needs a username".into()))?
        .to_string();
    let mut req = JobRequest {
        command: vec!["simjob".to_string()],
        ..JobRequest::default()
    };
    let mut duration = 0i64;
    let mut exit_code = 0i32;
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| bad(format!("bad submit attr {tok:?}")))?;
        match k {
            "duration" => duration = v.parse().map_err(|_| bad(format!("bad duration {v:?}")))?,
            "exit" => exit_code = v.parse().map_err(|_| bad(format!("bad exit {v:?}")))?,
            "gpus" => req.gpus = v.parse().map_err(|_| bad(format!("bad gpus {v:?}")))?,
            "mem" => req.mem_mb = v.parse().map_err(|_| bad(format!("bad mem {v:?}")))?,
            "time" => req.time_limit_min = jobspec::parse_time_limit(v)?,
            "qos" => req.qos = v.to_string(),
            "name" => req.job_name = v.to_string(),
            "cmd" => req.command = vec![v.to_string()],
            other => return Err(bad(format!("unknown submit attr {other:?}"))),
        }
    }
    if duration < 0 {
        return Err(bad("duration must be >= 0".into()));
    }
    Ok(Action::Submit {
        username,
        job_file: jobspec::render_job_file(&req),
        true_duration_min: duration,
        exit_code,
    })
}

/// Run a scenario to quiescence. Pure function of its input.
pub fn run_sim(scenario: &Scenario) -> Result<Trace, SimError> {
    let mut qos = QosTable::default();
    for (name, weight) in &scenario.qos_table {
        qos.define(name, *weight);
    }
    let mut accounts = AccountsDb::new(qos);
    let (_, roster_errors) = accounts.ingest_csv(&scenario.roster)?;
    if let Some(err) = roster_errors.into_iter().next() {
        return Err(SimError::Roster(err));
    }
    let mut ctrl = Controller::new(
        Fleet::new(scenario.nodes.clone()),
        accounts,
        vec!["admin".to_string()],
        1,
    );

    // per-job virtual runtime and injected exit code
    let mut durations: Vec<(u64, i64, i32)> = Vec::new();
    let mut events = scenario.events.iter().peekable();
    let mut seen = 0usize;
    let mut now = 0i64;
    loop {
        ctrl.enforce_walltime(now);

        // completions due at this tick, in job-id order
        let due: Vec<(u64, i32)> = durations
            .iter()
            .filter(|(id, end, _)| *end <= now && ctrl.scheduler.job(*id).map_or(false, |j| j.state == JobState::Running))
            .map(|(id, _, exit)| (*id, *exit))
            .collect();
        for (id, exit) in due {
            ctrl.complete(id, exit, now).expect("due job is running");
        }

        while events.peek().map_or(false, |(t, _)| *t <= now) {
            let (_, action) = events.next().unwrap();
            seen += 1;
            match action {
                Action::Submit {
                    username,
                    job_file,
                    true_duration_min,
                    exit_code,
                } => {
                    let req = jobspec::parse_job_file(job_file)?;
                    // rejected submissions are a normal trace outcome
                    if let Ok(id) = ctrl.submit(req, username, now) {
                        // relative duration; rewritten to an absolute end
                        // time when the job starts
                        durations.push((id, *true_duration_min, *exit_code));
                    }
                }
                Action::Cancel { job_id, requester } => {
                    let _ = ctrl.cancel(*job_id, requester, now);
                }
                Action::Reconcile(date) => {
                    ctrl.reconcile(*date, now);
                }
                Action::Tick => {}
            }
        }

        let started = ctrl.schedule_cycle(now);
        let made_progress = !started.is_empty();
        for id in started {
            let start = ctrl.scheduler.job(id).unwrap().start_time.unwrap();
            if let Some(entry) = durations.iter_mut().find(|(jid, _, _)| *jid == id) {
                // convert stored duration to an absolute end time
                entry.1 = start + entry.1;
            }
        }

        let running = ctrl.scheduler.jobs().any(|j| j.state == JobState::Running);
        let events_left = seen < scenario.events.len();
        // with no events, no running jobs, and nothing newly started, any
        // remaining pending jobs can never start: quiescent
        if !events_left && !running && !made_progress {
            break;
        }
        now += 1;
    }

    let transitions = ctrl
        .accounting
        .lines()
        .iter()
        .map(|line| {
            let ev = AccountingLog::parse_line(line).expect("own lines parse");
            Transition {
                time: ev.time,
                job_id: ev.jobid,
                state: ev.state,
            }
        })
        .collect();
    Ok(Trace {
        transitions,
        accounting: ctrl.accounting,
    })
}

#[derive(Debug)]
pub struct LocalRun {
    pub exit_code: Option<i32>,
    pub state: JobState,
    pub accounting: AccountingLog,
}

/// Run a job file's command on this machine, wiring stdout/stderr to the
/// requested paths and enforcing the wall-time limit with a real timer.
pub fn run_local(job_file_path: &Path) -> Result<LocalRun, SimError> {
    let text = std::fs::read_to_string(job_file_path)
        .map_err(|e| SimError::LaunchFailure(format!("{}: {e}", job_file_path.display())))?;
    let req = jobspec::parse_job_file(&text)?;
    let limit = Duration::from_secs(req.time_limit_min * 60);
    run_local_request(&req, limit)
}

/// Local execution with an explicit limit (run_local uses the job file's
/// wall time; tests shorten it).
pub fn run_local_request(req: &JobRequest, limit: Duration) -> Result<LocalRun, SimError> {
    let mut accounts = AccountsDb::new(QosTable::default());
    let far_future = NaiveDate::from_ymd_opt(9999, 1, 1).unwrap();
    let username = "local";
    accounts
        .create(username, "normal", far_future, u32::MAX, u32::MAX, u64::MAX, 1)
        .expect("fresh table");
    // a synthetic node exactly sized to the request so placement succeeds
    let node = Node::new("localhost", req.gpus, req.mem_mb, 1);
    let mut ctrl = Controller::new(Fleet::new(vec![node]), accounts, vec![], 60);

    let mut req = req.clone();
    req.qos = "normal".to_string();
    let id = ctrl
        .submit(req.clone(), username, 0)
        .map_err(|e| SimError::LaunchFailure(e.to_string()))?;
    let started = ctrl.schedule_cycle(0);
    assert_eq!(started, vec![id], "synthetic node fits the request");

    let output_path = req.output_path.replace("<jobid>", &id.to_string());
    let error_path = req.error_path.replace("<jobid>", &id.to_string());
    let stdout = File::create(&output_path)
        .map_err(|e| SimError::LaunchFailure(format!("{output_path}: {e}")))?;
    let stderr = File::create(&error_path)
        .map_err(|e| SimError::LaunchFailure(format!("{error_path}: {e}")))?;

    let start = Instant::now();
    let spawn = Command::new(&req.command[0])
        .args(&req.command[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::from(stdout))
        .stderr(Stdio::from(stderr))
        .spawn();
    let mut child = match spawn {
        Ok(c) => c,
        Err(e) => {
            // launch failures surface as a failed job, not a crash
            let _ = e;
            let state = ctrl
                .complete(id, crate::control::LAUNCH_FAILURE_EXIT, 0)
                .expect("job is running");
            return Ok(LocalRun {
                exit_code: Some(crate::control::LAUNCH_FAILURE_EXIT),
                state,
                accounting: ctrl.accounting,
            });
        }
    };

    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                let code = status.code().unwrap_or(1);
                let elapsed = start.elapsed().as_secs() as i64;
                let state = ctrl.complete(id, code, elapsed).expect("job is running");
                return Ok(LocalRun {
                    exit_code: Some(code),
                    state,
                    accounting: ctrl.accounting,
                });
            }
            Ok(None) => {
                if start.elapsed() > limit {
                    let _ = child.kill();
                    let _ = child.wait();
                    let elapsed = start.elapsed().as_secs() as i64;
                    // enforce at the real deadline regardless of tick math
                    ctrl.enforce_walltime(elapsed.max(req.time_limit_min as i64 * 60 + 1));
                    let state = ctrl.scheduler.job(id).unwrap().state;
                    return Ok(LocalRun {
                        exit_code: None,
                        state,
                        accounting: ctrl.accounting,
                    });
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(SimError::LaunchFailure(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "node node0 gpus=1 mem_mb=64000 cpus=8\n\
qos student 1\n\
qos faculty 2\n\
user alice,student,2099-01-01,20,5,10000,200\n\
user prof,faculty,2099-01-01,20,5,10000,200\n";

    fn scenario(events: &str) -> Scenario {
        Scenario::parse(&format!("{BASE}{events}")).unwrap()
    }

    fn terminal(trace: &Trace, id: u64) -> (i64, JobState) {
        trace
            .transitions
            .iter()
            .rev()
            .find(|t| t.job_id == id)
            .map(|t| (t.time, t.state))
            .unwrap()
    }

    #[test]
    fn job_completes_at_start_plus_duration() {
        let trace = run_sim(&scenario("event 0 submit alice duration=5 gpus=1 time=10\n")).unwrap();
        assert_eq!(terminal(&trace, 1), (5, JobState::Completed));
    }

    #[test]
    fn walltime_fires_before_completion() {
        let trace = run_sim(&scenario("event 0 submit alice duration=20 gpus=1 time=10\n")).unwrap();
        assert_eq!(terminal(&trace, 1), (10, JobState::Timeout));
    }

    #[test]
    fn second_job_starts_when_first_ends() {
        let trace = run_sim(&scenario(
            "event 0 submit alice duration=5 gpus=1 time=10\n\
             event 0 submit alice duration=3 gpus=1 time=10\n",
        ))
        .unwrap();
        let start2 = trace
            .transitions
            .iter()
            .find(|t| t.job_id == 2 && t.state == JobState::Running)
            .unwrap();
        assert_eq!(start2.time, 5);
        assert_eq!(terminal(&trace, 2), (8, JobState::Completed));
    }

    #[test]
    fn injected_exit_code_fails_job() {
        let trace = run_sim(&scenario("event 0 submit alice duration=2 gpus=1 time=10 exit=3\n")).unwrap();
        assert_eq!(terminal(&trace, 1).1, JobState::Failed);
        assert_eq!(trace.accounting.record_for(1).unwrap().exitcode, Some(3));
    }

    #[test]
    fn determinism_identical_traces() {
        let s = scenario(
            "event 0 submit alice duration=5 gpus=1 time=10\n\
             event 1 submit prof duration=2 gpus=1 time=10 qos=faculty\n\
             event 3 cancel 1\n",
        );
        let a = run_sim(&s).unwrap().render();
        let b = run_sim(&s).unwrap().render();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_times_are_monotone() {
        let trace = run_sim(&scenario(
            "event 0 submit alice duration=20 gpus=1 time=10\n\
             event 2 submit prof duration=4 gpus=1 time=10 qos=faculty\n",
        ))
        .unwrap();
        let times: Vec<i64> = trace.transitions.iter().map(|t| t.time).collect();
        let mut sorted = times.clone();
        sorted.sort();
        assert_eq!(times, sorted);
    }

    #[test]
    fn unstartable_pending_job_terminates_sim() {
        let trace = run_sim(&scenario("event 0 submit alice duration=5 gpus=2 time=10\n")).unwrap();
        // job never fits the 1-GPU node; it stays pending and the sim ends
        assert_eq!(trace.accounting.record_for(1).unwrap().state, JobState::Pending);
    }

    #[test]
    fn malformed_scenario_reports_line() {
        let err = Scenario::parse("bogus line\n").unwrap_err();
        assert!(matches!(err, SimError::MalformedScenario { line: 1, .. }));
        assert!(Scenario::parse("event 5 tick\nevent 3 tick\n").is_err());
    }

    #[test]
    fn run_local_captures_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out.txt");
        let req = JobRequest {
            output_path: out.to_str().unwrap().to_string(),
            error_path: dir.path().join("err.txt").to_str().unwrap().to_string(),
            command: vec!["echo".to_string(), "ok".to_string()],
            ..JobRequest::default()
        };
        let run = run_local_request(&req, Duration::from_secs(60)).unwrap();
        assert_eq!(run.exit_code, Some(0));
        assert_eq!(run.state, JobState::Completed);
        assert_eq!(std::fs::read_to_string(out).unwrap(), "ok\n");
    }

    #[test]
    fn run_local_nonzero_exit_fails() {
        let dir = tempfile::tempdir().unwrap();
        let req = JobRequest {
            output_path: dir.path().join("o").to_str().unwrap().to_string(),
            error_path: dir.path().join("e").to_str().unwrap().to_string(),
            command: vec!["sh".to_string(), "-c".to_string(), "exit 3".to_string()],
            ..JobRequest::default()
        };
        let run = run_local_request(&req, Duration::from_secs(60)).unwrap();
        assert_eq!(run.exit_code, Some(3));
        assert_eq!(run.state, JobState::Failed);
        assert_eq!(run.accounting.record_for(1).unwrap().exitcode, Some(3));
    }

    #[test]
    fn run_local_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let req = JobRequest {
            output_path: dir.path().join("o").to_str().unwrap().to_string(),
            error_path: dir.path().join("e").to_str().unwrap().to_string(),
            time_limit_min: 1,
            command: vec!["sleep".to_string(), "30".to_string()],
            ..JobRequest::default()
        };
        let run = run_local_request(&req, Duration::from_millis(300)).unwrap();
        assert_eq!(run.exit_code, None);
        assert_eq!(run.state, JobState::Timeout);
    }

    #[test]
    fn run_local_missing_command_reports_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let req = JobRequest {
            output_path: dir.path().join("o").to_str().unwrap().to_string(),
            error_path: dir.path().join("e").to_str().unwrap().to_string(),
            command: vec!["/no/such/binary".to_string()],
            ..JobRequest::default()
        };
        let run = run_local_request(&req, Duration::from_secs(5)).unwrap();
        assert_eq!(run.exit_code, Some(crate::control::LAUNCH_FAILURE_EXIT));
        assert_eq!(run.state, JobState::Failed);
    }
}
