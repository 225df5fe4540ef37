//! Controller <-> node-agent wire protocol: one line per message, keyed
//! digest authentication and clock-skew rejection.
//!
//! Wire format (bit-exact): `<kind>|<k=v>;...|<timestamp>|<auth_tag>` where
//! the auth tag is an HMAC-SHA256 hex digest over everything before it. The
//! shared secret stands in for cluster-wide credential infrastructure and is
//! loaded from a file named in configuration; the timestamp window stands in
//! for synchronized clocks.

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

pub const DEFAULT_SKEW_WINDOW_SECS: i64 = 300;
pub const HEARTBEAT_INTERVAL: i64 = 10;
pub const MISSED_HEARTBEATS_DOWN: i64 = 3;

/// Synthetic exit code reported when an agent cannot launch a command.
pub const LAUNCH_FAILURE_EXIT: i32 = 213;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ControlError {
    #[error("illegal character in {0:?}")]
    IllegalCharacter(String),
    #[error("bad auth tag")]
    BadTag,
    #[error("clock skew {skew}s exceeds window {window}s")]
    ClockSkew { skew: i64, window: i64 },
    #[error("malformed wire line: {0:?}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Launch,
    Stop,
    Status,
    Heartbeat,
    Ack,
    Error,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Launch => "LAUNCH",
            MessageKind::Stop => "STOP",
            MessageKind::Status => "STATUS",
            MessageKind::Heartbeat => "HEARTBEAT",
            MessageKind::Ack => "ACK",
            MessageKind::Error => "ERROR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "LAUNCH" => MessageKind::Launch,
            "STOP" => MessageKind::Stop,
            "STATUS" => MessageKind::Status,
            "HEARTBEAT" => MessageKind::Heartbeat,
            "ACK" => MessageKind::Ack,
            "ERROR" => MessageKind::Error,
            _ => return None,
        })
    }
}

/// An authenticated protocol message. Field order is preserved on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub fields: Vec<(String, String)>,
    pub timestamp: i64,
}

impl Message {
    pub fn new(kind: MessageKind, fields: &[(&str, &str)], timestamp: i64) -> Self {
        Message {
            kind,
            fields: fields
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            timestamp,
        }
    }

    pub fn field(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn mac_hex(payload: &str, secret: &[u8]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(payload.as_bytes());
    let digest = mac.finalize().into_bytes();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn canonical_fields(fields: &[(String, String)]) -> Result<String, ControlError> {
    let mut seen: Vec<&str> = Vec::new();
    let mut parts = Vec::with_capacity(fields.len());
    for (k, v) in fields {
        for (name, text) in [("key", k.as_str()), ("value", v.as_str())] {
            if text.contains('|') || text.contains('\n') || text.contains(';') {
                return Err(ControlError::IllegalCharacter(format!("{name} {text:?}")));
            }
        }
        if k.contains('=') || k.is_empty() {
            return Err(ControlError::IllegalCharacter(format!("key {k:?}")));
        }
        if seen.contains(&k.as_str()) {
            return Err(ControlError::IllegalCharacter(format!("duplicate key {k:?}")));
        }
        seen.push(k);
        parts.push(format!("{k}={v}"));
    }
    Ok(parts.join(";"))
}

/// Serialize and sign one message as a single wire line.
pub fn encode(msg: &Message, secret: &[u8]) -> Result<String, ControlError> {
    let fields = canonical_fields(&msg.fields)?;
    let payload = format!("{}|{}|{}", msg.kind.as_str(), fields, msg.timestamp);
    let tag = mac_hex(&payload, secret);
    Ok(format!("{payload}|{tag}"))
}

fn decode(line: &str) -> Result<(Message, &str, String), ControlError> {
    let err = || ControlError::Malformed(line.to_string());
    let (payload, tag) = line.rsplit_once('|').ok_or_else(err)?;
    let parts: Vec<&str> = payload.split('|').collect();
    if parts.len() != 3 {
        return Err(err());
    }
    let kind = MessageKind::parse(parts[0]).ok_or_else(err)?;
    let mut fields = Vec::new();
    if !parts[1].is_empty() {
        for pair in parts[1].split(';') {
            let (k, v) = pair.split_once('=').ok_or_else(err)?;
            if k.is_empty() || fields.iter().any(|(key, _)| key == k) {
                return Err(err());
            }
            fields.push((k.to_string(), v.to_string()));
        }
    }
    let timestamp: i64 = parts[2].parse().map_err(|_| err())?;
    Ok((
        Message {
            kind,
            fields,
            timestamp,
        },
        payload,
        tag.to_string(),
    ))
}

/// Verify the digest and the clock-skew window, then return the message.
pub fn authenticate(
    line: &str,
    secret: &[u8],
    receiver_now: i64,
    skew_window: i64,
) -> Result<Message, ControlError> {
    let (msg, payload, tag) = decode(line)?;
    let expected = mac_hex(payload, secret);
    // constant-time comparison is overkill on a trusted LAN, but cheap
    if tag.len() != expected.len()
        || tag
            .bytes()
            .zip(expected.bytes())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            != 0
    {
        return Err(ControlError::BadTag);
    }
    let skew = (receiver_now - msg.timestamp).abs();
    if skew > skew_window {
        return Err(ControlError::ClockSkew {
            skew,
            window: skew_window,
        });
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SECRET: &[u8] = b"0123456789abcdef0123456789abcdef";

    #[test]
    fn heartbeat_round_trips() {
        let msg = Message::new(MessageKind::Heartbeat, &[], 42);
        let line = encode(&msg, SECRET).unwrap();
        assert!(line.starts_with("HEARTBEAT||42|"));
        assert_eq!(authenticate(&line, SECRET, 42, 300).unwrap(), msg);
    }

    #[test]
    fn launch_round_trips_field_for_field() {
        let msg = Message::new(
            MessageKind::Launch,
            &[("jobid", "7"), ("cmd", "python train.py --epochs=3")],
            100,
        );
        let line = encode(&msg, SECRET).unwrap();
        let back = authenticate(&line, SECRET, 100, 300).unwrap();
        assert_eq!(back, msg);
        assert_eq!(back.field("cmd"), Some("python train.py --epochs=3"));
    }

    #[test]
    fn pipe_in_value_is_illegal() {
        let msg = Message::new(MessageKind::Status, &[("out", "a|b")], 1);
        assert!(matches!(
            encode(&msg, SECRET),
            Err(ControlError::IllegalCharacter(_))
        ));
    }

    #[test]
    fn flipped_tag_character_rejected() {
        let msg = Message::new(MessageKind::Ack, &[("jobid", "1")], 5);
        let mut line = encode(&msg, SECRET).unwrap();
        let last = line.pop().unwrap();
        line.push(if last == '0' { '1' } else { '0' });
        assert_eq!(authenticate(&line, SECRET, 5, 300), Err(ControlError::BadTag));
    }

    #[test]
    fn wrong_secret_rejected() {
        let msg = Message::new(MessageKind::Ack, &[], 5);
        let line = encode(&msg, SECRET).unwrap();
        assert_eq!(
            authenticate(&line, b"another-secret", 5, 300),
            Err(ControlError::BadTag)
        );
    }

    #[test]
    fn skew_window_boundary() {
        let msg = Message::new(MessageKind::Heartbeat, &[], 1000);
        let line = encode(&msg, SECRET).unwrap();
        // exactly at the window is accepted
        assert!(authenticate(&line, SECRET, 1300, 300).is_ok());
        assert_eq!(
            authenticate(&line, SECRET, 1301, 300),
            Err(ControlError::ClockSkew { skew: 301, window: 300 })
        );
        // future timestamps are bounded the same way
        assert!(authenticate(&line, SECRET, 700, 300).is_ok());
        assert!(authenticate(&line, SECRET, 699, 300).is_err());
    }

    #[test]
    fn malformed_lines_rejected() {
        for line in ["", "LAUNCH|", "NOPE||1|aa", "STATUS|x|1|aa", "STATUS||t|aa"] {
            assert!(matches!(
                authenticate(line, SECRET, 0, 300),
                Err(ControlError::Malformed(_)) | Err(ControlError::BadTag)
            ));
        }
    }

    #[test]
    fn duplicate_field_keys_rejected() {
        let msg = Message {
            kind: MessageKind::Status,
            fields: vec![
                ("k".to_string(), "1".to_string()),
                ("k".to_string(), "2".to_string()),
            ],
            timestamp: 0,
        };
        assert!(encode(&msg, SECRET).is_err());
    }
}
