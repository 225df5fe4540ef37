//! End-to-end controller/agent exchange over a real local socket: submit,
//! launch, status, cancel, and client queries.

use std::time::Duration;

use chrono::NaiveDate;

use gridling::accounts::{AccountsDb, QosTable};
use gridling::agent::{run_agent, AgentConfig};
use gridling::cluster::Fleet;
use gridling::jobspec::{render_job_file, JobRequest};
use gridling::rpc::{self, Op, Outcome, Request, Response};
use gridling::server::serve;

const SECRET: &[u8] = b"integration-test-shared-secret!!";

fn accounts() -> AccountsDb {
    let mut db = AccountsDb::new(QosTable::default());
    db.create(
        "alice",
        "normal",
        NaiveDate::from_ymd_opt(2099, 1, 1).unwrap(),
        10,
        5,
        10000,
        10,
    )
    .unwrap();
    db
}

fn start_cluster(dir: &std::path::Path) -> (gridling::server::ServerHandle, gridling::agent::AgentHandle, String) {
    let server = serve(
        "127.0.0.1:0",
        Fleet::default(),
        accounts(),
        vec!["admin".to_string()],
        SECRET.to_vec(),
        300,
    )
    .unwrap();
    let addr = server.addr.to_string();
    let agent = run_agent(AgentConfig {
        controller_addr: addr.clone(),
        node_name: "node0".to_string(),
        gpus: 2,
        mem_mb: 64000,
        cpus: 8,
        secret: SECRET.to_vec(),
        heartbeat: Duration::from_millis(200),
    })
    .unwrap();
    let _ = dir;
    (server, agent, addr)
}

fn job_file(dir: &std::path::Path, command: &[&str], gpus: u32) -> String {
    let req = JobRequest {
        gpus,
        output_path: dir.join("out-<jobid>.txt").to_str().unwrap().to_string(),
        error_path: dir.join("err-<jobid>.txt").to_str().unwrap().to_string(),
        command: command.iter().map(|s| s.to_string()).collect(),
        ..JobRequest::default()
    };
    render_job_file(&req)
}

fn call(addr: &str, user: &str, op: Op) -> Response {
    rpc::call(
        addr,
        &Request {
            user: user.to_string(),
            op,
        },
    )
    .unwrap()
}

#[test]
fn submit_runs_to_completion_with_output() {
    let dir = tempfile::tempdir().unwrap();
    let (server, agent, addr) = start_cluster(dir.path());

    let file = job_file(dir.path(), &["echo", "ok"], 1);
    let Response::Ok(Outcome::Submitted { job_id }) = call(&addr, "alice", Op::Submit { job_file: file }) else {
        panic!("submit failed");
    };
    assert_eq!(job_id, 1);

    let Response::Ok(Outcome::JobDone { state, exit_code, output_path, .. }) =
        call(&addr, "alice", Op::Wait { job_id })
    else {
        panic!("wait failed");
    };
    assert_eq!(state, "COMPLETED");
    assert_eq!(exit_code, Some(0));
    assert_eq!(std::fs::read_to_string(output_path).unwrap(), "ok\n");

    // accounting visible through the query surface
    let Response::Ok(Outcome::Table { text }) = call(
        &addr,
        "alice",
        Op::Acct {
            format: "jobid,jobname,state,exitcode,user,account".to_string(),
            user: None,
        },
    ) else {
        panic!("acct failed");
    };
    assert!(text.contains("COMPLETED"));

    agent.shutdown();
    server.shutdown();
}

#[test]
fn nonexistent_command_reports_sentinel_exit() {
    let dir = tempfile::tempdir().unwrap();
    let (server, agent, addr) = start_cluster(dir.path());

    let file = job_file(dir.path(), &["/no/such/binary"], 0);
    let Response::Ok(Outcome::Submitted { job_id }) = call(&addr, "alice", Op::Submit { job_file: file }) else {
        panic!("submit failed");
    };
    let Response::Ok(Outcome::JobDone { state, exit_code, .. }) = call(&addr, "alice", Op::Wait { job_id }) else {
        panic!("wait failed");
    };
    assert_eq!(state, "FAILED");
    assert_eq!(exit_code, Some(213));

    agent.shutdown();
    server.shutdown();
}

#[test]
fn cancel_running_job_stops_it_and_frees_the_node() {
    let dir = tempfile::tempdir().unwrap();
    let (server, agent, addr) = start_cluster(dir.path());

    let file = job_file(dir.path(), &["sleep", "30"], 2);
    let Response::Ok(Outcome::Submitted { job_id }) = call(&addr, "alice", Op::Submit { job_file: file }) else {
        panic!("submit failed");
    };
    // wait for it to start
    std::thread::sleep(Duration::from_millis(600));

    // a stranger may not cancel
    let resp = call(&addr, "mallory", Op::Cancel { job_id });
    assert!(matches!(resp, Response::Err { user_error: true, .. }));

    let Response::Ok(Outcome::Cancelled { .. }) = call(&addr, "alice", Op::Cancel { job_id }) else {
        panic!("owner cancel failed");
    };
    let Response::Ok(Outcome::JobDone { state, .. }) = call(&addr, "alice", Op::Wait { job_id }) else {
        panic!("wait failed");
    };
    assert_eq!(state, "CANCELLED");

    // GPUs return to the pool
    let Response::Ok(Outcome::Table { text }) = call(&addr, "alice", Op::Info) else {
        panic!("info failed");
    };
    assert!(text.contains("0/2"), "info was:\n{text}");

    agent.shutdown();
    server.shutdown();
}

#[test]
fn admin_surface_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let (server, agent, addr) = start_cluster(dir.path());

    let csv = "username,qos,expires_on,max_submit,max_running,max_wall_min,quota_gb\n\
               bob,normal,2099-01-01,5,2,1000,50\n";
    let resp = call(&addr, "alice", Op::UserIngest { csv: csv.to_string() });
    assert!(matches!(resp, Response::Err { user_error: true, .. }));

    let Response::Ok(Outcome::Ingested { created, errors }) =
        call(&addr, "admin", Op::UserIngest { csv: csv.to_string() })
    else {
        panic!("ingest failed");
    };
    assert_eq!(created, vec!["bob"]);
    assert!(errors.is_empty());

    let Response::Ok(Outcome::Reconciled { removed, .. }) = call(
        &addr,
        "admin",
        Op::Reconcile {
            date: Some("2099-06-01".to_string()),
        },
    ) else {
        panic!("reconcile failed");
    };
    assert!(removed.contains(&"alice".to_string()) && removed.contains(&"bob".to_string()));

    agent.shutdown();
    server.shutdown();
}

#[test]
fn unreachable_controller_is_a_connect_error() {
    let err = rpc::call(
        "127.0.0.1:1",
        &Request {
            user: "alice".to_string(),
            op: Op::Ping,
        },
    )
    .unwrap_err();
    assert_eq!(err.kind(), std::io::ErrorKind::ConnectionRefused);
}
