//! The controller daemon: a line-oriented TCP endpoint multiplexing two
//! kinds of peers onto the single scheduler event loop.
//!
//! Agents speak the authenticated wire protocol from [`crate::control`];
//! their first byte is a message kind letter. Clients speak the JSON request
//! protocol from [`crate::rpc`]; their first byte is `{`. Nodes join the
//! fleet when their agent's first heartbeat arrives, carrying the node's
//! capacity.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::accounting::render_table;
use crate::accounts::AccountsDb;
use crate::cluster::{Fleet, Node};
use crate::control::{self, ControlError, Message, MessageKind};
use crate::controller::Controller;
use crate::jobspec;
use crate::rpc::{Op, Outcome, Request, Response};
use crate::scheduler::{JobState, SchedulerError};

pub struct ServerHandle {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

struct Shared {
    ctrl: Mutex<Controller>,
    job_done: Condvar,
    agents: Mutex<HashMap<String, TcpStream>>,
    secret: Vec<u8>,
    skew_window: i64,
    start: Instant,
    stop: AtomicBool,
}

impl Shared {
    /// Seconds since the controller started: the scheduler's tick clock.
    fn now_ticks(&self) -> i64 {
        self.start.elapsed().as_secs() as i64
    }

    fn unix_now() -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    }

    /// Run one scheduler tick and dispatch LAUNCH messages for anything that
    /// started. Called from the tick thread and after state-changing events.
    fn advance(&self) {
        let now = self.now_ticks();
        let launches: Vec<(String, Message)> = {
            let mut ctrl = self.ctrl.lock().unwrap();
            let started = ctrl.tick(now);
            started
                .iter()
                .filter_map(|id| {
                    let job = ctrl.scheduler.job(*id)?;
                    let alloc = job.allocation.as_ref()?;
                    let idstr = id.to_string();
                    let msg = Message::new(
                        MessageKind::Launch,
                        &[
                            ("jobid", idstr.as_str()),
                            ("cmd", &job.request.command.join(" ")),
                            ("out", &job.request.output_path.replace("<jobid>", &idstr)),
                            ("err", &job.request.error_path.replace("<jobid>", &idstr)),
                        ],
                        Self::unix_now(),
                    );
                    Some((alloc.node_name.clone(), msg))
                })
                .collect()
        };
        for (node, msg) in launches {
            self.send_to_agent(&node, &msg);
        }
        self.job_done.notify_all();
    }

    fn send_to_agent(&self, node: &str, msg: &Message) {
        let line = match control::encode(msg, &self.secret) {
            Ok(l) => l,
            Err(_) => return,
        };
        let mut agents = self.agents.lock().unwrap();
        if let Some(stream) = agents.get_mut(node) {
            if writeln!(stream, "{line}").is_err() {
                agents.remove(node);
            }
        }
    }
}

/// Start a controller daemon. Binding to port 0 picks a free port; the
/// chosen address is on the returned handle.
pub fn serve(
    bind_addr: &str,
    fleet: Fleet,
    accounts: AccountsDb,
    admins: Vec<String>,
    secret: Vec<u8>,
    skew_window: i64,
) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(bind_addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        ctrl: Mutex::new(Controller::new(fleet, accounts, admins, 60)),
        job_done: Condvar::new(),
        agents: Mutex::new(HashMap::new()),
        secret,
        skew_window,
        start: Instant::now(),
        stop: AtomicBool::new(false),
    });

    let accept_shared = Arc::clone(&shared);
    let acceptor = thread::spawn(move || {
        while !accept_shared.stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let conn_shared = Arc::clone(&accept_shared);
                    thread::spawn(move || handle_connection(stream, conn_shared));
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(20));
                }
                Err(_) => break,
            }
        }
    });

    let tick_shared = Arc::clone(&shared);
    let ticker = thread::spawn(move || {
        while !tick_shared.stop.load(Ordering::SeqCst) {
            tick_shared.advance();
            thread::sleep(Duration::from_millis(250));
        }
    });

    Ok(ServerHandle {
        addr,
        shared,
        threads: vec![acceptor, ticker],
    })
}

fn handle_connection(stream: TcpStream, shared: Arc<Shared>) {
    let reader = match stream.try_clone() {
        Ok(s) => BufReader::new(s),
        Err(_) => return,
    };
    let mut writer = stream;
    let mut lines = reader.lines();
    while let Some(Ok(line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        if line.trim_start().starts_with('{') {
            let response = handle_client_line(&line, &shared);
            let mut text = serde_json::to_string(&response).unwrap_or_else(|_| {
                serde_json::to_string(&Response::system_err("serialization failure")).unwrap()
            });
            text.push('\n');
            let _ = writer.write_all(text.as_bytes());
            return; // one exchange per client connection
        }
        match handle_agent_line(&line, &writer, &shared) {
            Ok(()) => {}
            Err(err) => {
                let reply = Message::new(
                    MessageKind::Error,
                    &[("reason", &err.to_string())],
                    Shared::unix_now(),
                );
                if let Ok(encoded) = control::encode(&reply, &shared.secret) {
                    let _ = writeln!(writer, "{encoded}");
                }
            }
        }
    }
}

fn handle_agent_line(line: &str, stream: &TcpStream, shared: &Arc<Shared>) -> Result<(), ControlError> {
    let msg = control::authenticate(line, &shared.secret, Shared::unix_now(), shared.skew_window)?;
    let now = shared.now_ticks();
    match msg.kind {
        MessageKind::Heartbeat => {
            let Some(node_name) = msg.field("node") else {
                return Err(ControlError::Malformed("heartbeat without node".to_string()));
            };
            {
                let mut ctrl = shared.ctrl.lock().unwrap();
                if ctrl.fleet.node(node_name).is_none() {
                    let gpus = msg.field("gpus").and_then(|v| v.parse().ok()).unwrap_or(0);
                    let mem = msg.field("mem_mb").and_then(|v| v.parse().ok()).unwrap_or(1);
                    let cpus = msg.field("cpus").and_then(|v| v.parse().ok()).unwrap_or(1);
                    let mut fleet_nodes = ctrl.fleet.nodes().to_vec();
                    fleet_nodes.push(Node::new(node_name, gpus, mem, cpus));
                    ctrl.fleet = Fleet::new(fleet_nodes);
                }
                ctrl.heartbeat(node_name, now);
            }
            if let Ok(clone) = stream.try_clone() {
                shared
                    .agents
                    .lock()
                    .unwrap()
                    .insert(node_name.to_string(), clone);
            }
            shared.advance();
        }
        MessageKind::Status => {
            let jobid: u64 = msg
                .field("jobid")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ControlError::Malformed("status without jobid".to_string()))?;
            let exit: i32 = msg.field("exit").and_then(|v| v.parse().ok()).unwrap_or(1);
            {
                let mut ctrl = shared.ctrl.lock().unwrap();
                // the job may already be timed out or cancelled; late status
                // reports are dropped
                let _ = ctrl.complete(jobid, exit, now);
            }
            shared.advance();
        }
        MessageKind::Ack => {}
        MessageKind::Error => {}
        MessageKind::Launch | MessageKind::Stop => {
            return Err(ControlError::Malformed(format!(
                "{} is controller-to-agent only",
                msg.kind.as_str()
            )));
        }
    }
    Ok(())
}

fn handle_client_line(line: &str, shared: &Arc<Shared>) -> Response {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return Response::user_err(format!("bad request: {e}")),
    };
    handle_request(&request, shared)
}

fn scheduler_error_response(err: SchedulerError) -> Response {
    Response::user_err(err.to_string())
}

fn handle_request(request: &Request, shared: &Arc<Shared>) -> Response {
    let user = request.user.as_str();
    let now = shared.now_ticks();
    match &request.op {
        Op::Ping => Response::Ok(Outcome::Pong),
        Op::Submit { job_file } => {
            let req = match jobspec::parse_job_file(job_file) {
                Ok(r) => r,
                Err(e) => return Response::user_err(e.to_string()),
            };
            let outcome = {
                let mut ctrl = shared.ctrl.lock().unwrap();
                ctrl.submit(req, user, now)
            };
            match outcome {
                Ok(job_id) => {
                    shared.advance();
                    Response::Ok(Outcome::Submitted { job_id })
                }
                Err(e) => scheduler_error_response(e),
            }
        }
        Op::Wait { job_id } => {
            let deadline = Instant::now() + Duration::from_secs(24 * 3600);
            let mut ctrl = shared.ctrl.lock().unwrap();
            loop {
                match ctrl.scheduler.job(*job_id) {
                    None => return Response::user_err(format!("unknown job {job_id}")),
                    Some(job) if job.state.is_terminal() => {
                        let idstr = job_id.to_string();
                        return Response::Ok(Outcome::JobDone {
                            job_id: *job_id,
                            state: job.state.to_string(),
                            exit_code: job.exit_code,
                            output_path: job.request.output_path.replace("<jobid>", &idstr),
                        });
                    }
                    Some(_) => {}
                }
                if Instant::now() > deadline {
                    return Response::system_err("timed out waiting for job");
                }
                let (guard, _) = shared
                    .job_done
                    .wait_timeout(ctrl, Duration::from_millis(100))
                    .unwrap();
                ctrl = guard;
            }
        }
        Op::Cancel { job_id } => {
            let result = {
                let mut ctrl = shared.ctrl.lock().unwrap();
                let node = ctrl
                    .scheduler
                    .job(*job_id)
                    .and_then(|j| j.allocation.as_ref())
                    .map(|a| a.node_name.clone());
                ctrl.cancel(*job_id, user, now).map(|was| (was, node))
            };
            match result {
                Ok((was, node)) => {
                    if was == JobState::Running {
                        if let Some(node) = node {
                            let idstr = job_id.to_string();
                            let stop = Message::new(
                                MessageKind::Stop,
                                &[("jobid", idstr.as_str())],
                                Shared::unix_now(),
                            );
                            shared.send_to_agent(&node, &stop);
                        }
                    }
                    shared.advance();
                    Response::Ok(Outcome::Cancelled { job_id: *job_id })
                }
                Err(e) => scheduler_error_response(e),
            }
        }
        Op::Acct { format, user: filter } => {
            let fields: Vec<&str> = format.split(',').map(str::trim).collect();
            let ctrl = shared.ctrl.lock().unwrap();
            match ctrl.accounting.query(&fields, filter.as_deref(), None) {
                Ok(rows) => Response::Ok(Outcome::Table {
                    text: render_table(&fields, &rows),
                }),
                Err(e) => Response::user_err(e.to_string()),
            }
        }
        Op::Info => {
            let ctrl = shared.ctrl.lock().unwrap();
            let rows: Vec<Vec<String>> = ctrl
                .node_summary()
                .into_iter()
                .map(|(name, state, gpus, mem)| {
                    vec![name, state.to_string(), gpus, mem.to_string()]
                })
                .collect();
            Response::Ok(Outcome::Table {
                text: render_table(&["NODELIST", "STATE", "GPUS", "MEM_FREE_MB"], &rows),
            })
        }
        Op::UserIngest { csv } => {
            if !shared.ctrl.lock().unwrap().is_admin(user) {
                return Response::user_err("PermissionDenied: admin required");
            }
            let mut ctrl = shared.ctrl.lock().unwrap();
            match ctrl.accounts.ingest_csv(csv) {
                Ok((created, errors)) => Response::Ok(Outcome::Ingested {
                    created,
                    errors: errors.iter().map(|e| e.to_string()).collect(),
                }),
                Err(e) => Response::user_err(e.to_string()),
            }
        }
        Op::UserList => {
            if !shared.ctrl.lock().unwrap().is_admin(user) {
                return Response::user_err("PermissionDenied: admin required");
            }
            let ctrl = shared.ctrl.lock().unwrap();
            let rows: Vec<Vec<String>> = ctrl
                .accounts
                .accounts()
                .map(|a| {
                    vec![
                        a.username.clone(),
                        a.qos.clone(),
                        a.expires_on.to_string(),
                        a.max_submit.to_string(),
                        a.max_running.to_string(),
                        a.max_wall_min.to_string(),
                        a.quota_gb.to_string(),
                        if a.active { "yes" } else { "no" }.to_string(),
                    ]
                })
                .collect();
            Response::Ok(Outcome::Table {
                text: render_table(
                    &["USER", "QOS", "EXPIRES", "MAX_SUBMIT", "MAX_RUNNING", "MAX_WALL_MIN", "QUOTA_GB", "ACTIVE"],
                    &rows,
                ),
            })
        }
        Op::Reconcile { date } => {
            if !shared.ctrl.lock().unwrap().is_admin(user) {
                return Response::user_err("PermissionDenied: admin required");
            }
            let today = match date {
                Some(d) => match chrono::NaiveDate::parse_from_str(d, "%Y-%m-%d") {
                    Ok(d) => d,
                    Err(_) => return Response::user_err(format!("bad date {d:?}")),
                },
                None => chrono::Utc::now().date_naive(),
            };
            let (removed, cancelled) = {
                let mut ctrl = shared.ctrl.lock().unwrap();
                ctrl.reconcile(today, now)
            };
            shared.advance();
            Response::Ok(Outcome::Reconciled { removed, cancelled })
        }
        Op::QosDefine { name, weight } => {
            if !shared.ctrl.lock().unwrap().is_admin(user) {
                return Response::user_err("PermissionDenied: admin required");
            }
            shared.ctrl.lock().unwrap().accounts.qos.define(name, *weight);
            Response::Ok(Outcome::Done)
        }
    }
}
