//! Client protocol: newline-delimited JSON requests, replies and monitor
//! updates. The same messages travel over TCP and the WebSocket gateway.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::{ChError, Severity};
use crate::sim::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Get,
    Put,
    Monitor,
    Unmonitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: Op,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    /// Correlation id echoed in the reply; any JSON value.
    #[serde(default)]
    pub id: Value,
}

impl Request {
    pub fn get(name: &str, id: impl Into<Value>) -> Self {
        Self {
            op: Op::Get,
            name: name.into(),
            value: None,
            id: id.into(),
        }
    }

    pub fn put(name: &str, value: Value, id: impl Into<Value>) -> Self {
        Self {
            op: Op::Put,
            name: name.into(),
            value: Some(value),
            id: id.into(),
        }
    }

    pub fn monitor(name: &str, id: impl Into<Value>) -> Self {
        Self {
            op: Op::Monitor,
            name: name.into(),
            value: None,
            id: id.into(),
        }
    }

    pub fn unmonitor(name: &str, id: impl Into<Value>) -> Self {
        Self {
            op: Op::Unmonitor,
            name: name.into(),
            value: None,
            id: id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub id: Value,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Reply {
    pub fn ok(id: Value, value: Option<Value>) -> Self {
        Self {
            id,
            ok: true,
            value,
            error: None,
        }
    }

    pub fn err(id: Value, e: &ChError) -> Self {
        Self {
            id,
            ok: false,
            value: None,
            error: Some(e.to_string()),
        }
    }

    /// Error code without detail, if this is an error reply.
    pub fn error_code(&self) -> Option<&str> {
        self.error
            .as_deref()
            .map(|e| e.split_once(':').map_or(e, |(c, _)| c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Update {
    pub ev: String,
    pub name: String,
    pub value: Value,
    pub alarm: Severity,
    pub t_ns: Nanos,
}

impl Update {
    pub fn new(name: String, value: Value, alarm: Severity, t_ns: Nanos) -> Self {
        Self {
            ev: "update".into(),
            name,
            value,
            alarm,
            t_ns,
        }
    }
}

/// A server-to-client message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Message {
    Update(Update),
    Reply(Reply),
}

impl Message {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

/// Parses one request line. A malformed line yields the error reply to
/// send back, carrying the id when one could be recovered.
pub fn parse_request(line: &str) -> Result<Request, Reply> {
    serde_json::from_str::<Request>(line).map_err(|e| {
        let id = serde_json::from_str::<Value>(line)
            .ok()
            .and_then(|v| v.get("id").cloned())
            .unwrap_or(Value::Null);
        Reply {
            id,
            ok: false,
            value: None,
            error: Some(format!("bad_request: {e}")),
        }
    })
}
