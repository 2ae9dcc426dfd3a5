//! Newline-delimited JSON wire format spoken with external score processes.
//!
//! ```text
//! → {"op":"hello","dim":d}                     ← {"op":"hello","dim":d}
//! → {"op":"score","t":s,"z":[[..],..]}         ← {"op":"score","values":[[..],..]}
//! → {"op":"shutdown"}                          ← process exits with status 0
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every finite
//! `f64` bit-exactly. A server may answer any request with
//! `{"op":"error","message":"..."}`.

use ndarray::{Array2, ArrayView2};
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Hello { dim: usize },
    Score { t: f64, z: Array2<f64> },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Hello { dim: usize },
    Score { values: Array2<f64> },
    Error { message: String },
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
enum RawRequest {
    Hello { dim: usize },
    Score { t: f64, z: Vec<Vec<f64>> },
    Shutdown,
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum RawReply {
    Hello { dim: usize },
    Score { values: Vec<Vec<f64>> },
    Error { message: String },
}

fn write_float(out: &mut String, x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::transport(format!("cannot encode non-finite value {x}"), None));
    }
    out.push_str(&format!("{x:.16e}"));
    Ok(())
}

fn write_matrix(out: &mut String, m: ArrayView2<f64>) -> Result<()> {
    out.push('[');
    for (i, row) in m.rows().into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, x) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write_float(out, *x)?;
        }
        out.push(']');
    }
    out.push(']');
    Ok(())
}

fn to_matrix(rows: Vec<Vec<f64>>, raw: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::transport("ragged numeric payload", Some(raw.to_string())));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|e| Error::transport(e.to_string(), Some(raw.to_string())))
}

/// Encode a request as a single line (without the trailing newline).
pub fn encode_request(req: &Request) -> Result<String> {
    let mut out = String::new();
    match req {
        Request::Hello { dim } => out.push_str(&format!("{{\"op\":\"hello\",\"dim\":{dim}}}")),
        Request::Score { t, z } => {
            out.push_str("{\"op\":\"score\",\"t\":");
            write_float(&mut out, *t)?;
            out.push_str(",\"z\":");
            write_matrix(&mut out, z.view())?;
            out.push('}');
        }
        Request::Shutdown => out.push_str("{\"op\":\"shutdown\"}"),
    }
    Ok(out)
}

pub fn decode_request(line: &str) -> Result<Request> {
    let raw: RawRequest = serde_json::from_str(line.trim())
        .map_err(|e| Error::transport(format!("malformed request: {e}"), Some(line.to_string())))?;
    Ok(match raw {
        RawRequest::Hello { dim } => Request::Hello { dim },
        RawRequest::Score { t, z } => Request::Score {
            t,
            z: to_matrix(z, line)?,
        },
        RawRequest::Shutdown => Request::Shutdown,
    })
}

pub fn encode_reply(reply: &Reply) -> Result<String> {
    let mut out = String::new();
    match reply {
        Reply::Hello { dim } => out.push_str(&format!("{{\"op\":\"hello\",\"dim\":{dim}}}")),
        Reply::Score { values } => {
            out.push_str("{\"op\":\"score\",\"values\":");
            write_matrix(&mut out, values.view())?;
            out.push('}');
        }
        Reply::Error { message } => {
            let msg = serde_json::to_string(message).expect("strings always serialize");
            out.push_str(&format!("{{\"op\":\"error\",\"message\":{msg}}}"));
        }
    }
    Ok(out)
}

pub fn decode_reply(line: &str) -> Result<Reply> {
    let raw: RawReply = serde_json::from_str(line.trim())
        .map_err(|e| Error::transport(format!("unparseable reply: {e}"), Some(line.to_string())))?;
    Ok(match raw {
        RawReply::Hello { dim } => Reply::Hello { dim },
        RawReply::Score { values } => Reply::Score {
            values: to_matrix(values, line)?,
        },
        RawReply::Error { message } => Reply::Error { message },
    })
}
