//! The per-node agent: connects to the controller, advertises the node's
//! capacity via heartbeats, launches job commands on LAUNCH, kills them on
//! STOP, and reports exit codes with STATUS.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::control::{self, Message, MessageKind, LAUNCH_FAILURE_EXIT};

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub controller_addr: String,
    pub node_name: String,
    pub gpus: u32,
    pub mem_mb: u64,
    pub cpus: u32,
    pub secret: Vec<u8>,
    pub heartbeat: Duration,
}

pub struct AgentHandle {
    stop: Arc<AtomicBool>,
    stream: TcpStream,
    threads: Vec<thread::JoinHandle<()>>,
}

impl AgentHandle {
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock the receiver's socket read
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

struct AgentState {
    config: AgentConfig,
    writer: Mutex<TcpStream>,
    running: Mutex<HashMap<u64, Child>>,
    stop: Arc<AtomicBool>,
}

fn unix_now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

impl AgentState {
    fn send(&self, kind: MessageKind, fields: &[(&str, &str)]) {
        let msg = Message::new(kind, fields, unix_now());
        if let Ok(line) = control::encode(&msg, &self.config.secret) {
            let mut writer = self.writer.lock().unwrap();
            let _ = writeln!(writer, "{line}");
        }
    }

    fn heartbeat(&self) {
        let gpus = self.config.gpus.to_string();
        let mem = self.config.mem_mb.to_string();
        let cpus = self.config.cpus.to_string();
        self.send(
            MessageKind::Heartbeat,
            &[
                ("node", self.config.node_name.as_str()),
                ("gpus", &gpus),
                ("mem_mb", &mem),
                ("cpus", &cpus),
            ],
        );
    }

    fn launch(self: &Arc<Self>, jobid: u64, cmd: &str, out: &str, err: &str) {
        let tokens: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        let spawned = (|| {
            let stdout = File::create(out).ok()?;
            let stderr = File::create(err).ok()?;
            let (first, rest) = tokens.split_first()?;
            Command::new(first)
                .args(rest)
                .stdin(Stdio::null())
                .stdout(Stdio::from(stdout))
                .stderr(Stdio::from(stderr))
                .spawn()
                .ok()
        })();
        let Some(child) = spawned else {
            let idstr = jobid.to_string();
            let exitstr = LAUNCH_FAILURE_EXIT.to_string();
            self.send(MessageKind::Status, &[("jobid", idstr.as_str()), ("exit", &exitstr)]);
            return;
        };
        self.running.lock().unwrap().insert(jobid, child);
        let state = Arc::clone(self);
        thread::spawn(move || {
            // poll so a STOP (which kills and removes the child) wins the race
            loop {
                let status = {
                    let mut running = state.running.lock().unwrap();
                    let Some(child) = running.get_mut(&jobid) else {
                        return; // stopped; cancellation already reported
                    };
                    match child.try_wait() {
                        Ok(Some(status)) => {
                            running.remove(&jobid);
                            Some(status)
                        }
                        Ok(None) => None,
                        Err(_) => {
                            running.remove(&jobid);
                            None
                        }
                    }
                };
                if let Some(status) = status {
                    let code = status.code().unwrap_or(1);
                    let idstr = jobid.to_string();
                    let codestr = code.to_string();
                    state.send(MessageKind::Status, &[("jobid", idstr.as_str()), ("exit", &codestr)]);
                    return;
                }
                if state.stop.load(Ordering::SeqCst) {
                    return;
                }
                thread::sleep(Duration::from_millis(25));
            }
        });
    }

    fn stop_job(&self, jobid: u64) {
        if let Some(mut child) = self.running.lock().unwrap().remove(&jobid) {
            let _ = child.kill();
            let _ = child.wait();
        }
        let idstr = jobid.to_string();
        self.send(MessageKind::Ack, &[("jobid", idstr.as_str())]);
    }
}

/// Connect to the controller and supervise jobs until shutdown.
pub fn run_agent(config: AgentConfig) -> std::io::Result<AgentHandle> {
    let stream = TcpStream::connect(&config.controller_addr)?;
    let reader = BufReader::new(stream.try_clone()?);
    let shutdown_stream = stream.try_clone()?;
    let stop = Arc::new(AtomicBool::new(false));
    let state = Arc::new(AgentState {
        config,
        writer: Mutex::new(stream),
        running: Mutex::new(HashMap::new()),
        stop: Arc::clone(&stop),
    });

    state.heartbeat();

    let hb_state = Arc::clone(&state);
    let heartbeats = thread::spawn(move || {
        let interval = hb_state.config.heartbeat;
        let step = Duration::from_millis(50).min(interval);
        let mut waited = Duration::ZERO;
        while !hb_state.stop.load(Ordering::SeqCst) {
            thread::sleep(step);
            waited += step;
            if waited >= interval {
                waited = Duration::ZERO;
                hb_state.heartbeat();
            }
        }
    });

    let rx_state = Arc::clone(&state);
    let receiver = thread::spawn(move || {
        let mut lines = reader.lines();
        while let Some(Ok(line)) = lines.next() {
            if rx_state.stop.load(Ordering::SeqCst) {
                break;
            }
            let msg = match control::authenticate(
                &line,
                &rx_state.config.secret,
                unix_now(),
                control::DEFAULT_SKEW_WINDOW_SECS,
            ) {
                Ok(m) => m,
                Err(_) => continue,
            };
            match msg.kind {
                MessageKind::Launch => {
                    let jobid = msg.field("jobid").and_then(|v| v.parse().ok());
                    let cmd = msg.field("cmd");
                    let out = msg.field("out");
                    let err = msg.field("err");
                    if let (Some(jobid), Some(cmd), Some(out), Some(err)) = (jobid, cmd, out, err) {
                        rx_state.launch(jobid, cmd, out, err);
                    }
                }
                MessageKind::Stop => {
                    if let Some(jobid) = msg.field("jobid").and_then(|v| v.parse().ok()) {
                        rx_state.stop_job(jobid);
                    }
                }
                _ => {}
            }
        }
    });

    Ok(AgentHandle {
        stop,
        stream: shutdown_stream,
        threads: vec![heartbeats, receiver],
    })
}
