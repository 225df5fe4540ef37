//! Client <-> controller request protocol: one JSON object per line over the
//! controller's TCP endpoint. CLI commands are thin wrappers over these
//! requests; the agent protocol (module [`crate::control`]) shares the same
//! port and is told apart by its first byte.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    pub user: String,
    pub op: Op,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Ping,
    Submit { job_file: String },
    /// Block until the job reaches a terminal state.
    Wait { job_id: u64 },
    Cancel { job_id: u64 },
    Acct { format: String, user: Option<String> },
    Info,
    UserIngest { csv: String },
    UserList,
    Reconcile { date: Option<String> },
    QosDefine { name: String, weight: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Pong,
    Submitted {
        job_id: u64,
    },
    JobDone {
        job_id: u64,
        state: String,
        exit_code: Option<i32>,
        output_path: String,
    },
    Cancelled {
        job_id: u64,
    },
    /// Pre-rendered table text (acct, info, user list).
    Table {
        text: String,
    },
    Ingested {
        created: Vec<String>,
        errors: Vec<String>,
    },
    Reconciled {
        removed: Vec<String>,
        cancelled: Vec<u64>,
    },
    Done,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Ok(Outcome),
    /// `user_error` distinguishes exit status 1 (bad request) from 2
    /// (system trouble) at the CLI boundary.
    Err { message: String, user_error: bool },
}

impl Response {
    pub fn user_err(message: impl Into<String>) -> Self {
        Response::Err {
            message: message.into(),
            user_error: true,
        }
    }

    pub fn system_err(message: impl Into<String>) -> Self {
        Response::Err {
            message: message.into(),
            user_error: false,
        }
    }
}

/// One request-response exchange with the controller.
pub fn call(addr: &str, request: &Request) -> io::Result<Response> {
    let stream = TcpStream::connect(addr)?;
    call_on(stream, request)
}

pub fn call_on(mut stream: TcpStream, request: &Request) -> io::Result<Response> {
    let mut line = serde_json::to_string(request)?;
    line.push('\n');
    stream.write_all(line.as_bytes())?;
    stream.flush()?;
    let mut reader = BufReader::new(stream);
    let mut reply = String::new();
    reader.read_line(&mut reply)?;
    if reply.is_empty() {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "controller closed connection"));
    }
    Ok(serde_json::from_str(&reply)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trips_as_json() {
        let req = Request {
            user: "alice".to_string(),
            op: Op::Acct {
                format: "jobid,state".to_string(),
                user: None,
            },
        };
        let json = serde_json::to_string(&req).unwrap();
        let back: Request = serde_json::from_str(&json).unwrap();
        assert_eq!(back.user, "alice");
        assert!(matches!(back.op, Op::Acct { .. }));
    }

    #[test]
    fn responses_tag_error_class() {
        let json = serde_json::to_string(&Response::user_err("nope")).unwrap();
        let back: Response = serde_json::from_str(&json).unwrap();
        assert!(matches!(back, Response::Err { user_error: true, .. }));
    }
}
