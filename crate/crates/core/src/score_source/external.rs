use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use ndarray::{Array2, ArrayView2};

use super::protocol::{decode_reply, encode_request, Reply, Request};
use crate::error::{Error, Result};

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Channel {
    fn roundtrip(&mut self, req: &Request) -> Result<Reply> {
        let line = encode_request(req)?;
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::transport(format!("write to score process failed: {e}"), None))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::transport(format!("read from score process failed: {e}"), None))?;
        if n == 0 {
            let status = self.child.try_wait().ok().flatten();
            return Err(Error::transport(
                format!("score process closed its output (status: {status:?})"),
                None,
            ));
        }
        match decode_reply(&reply)? {
            Reply::Error { message } => Err(Error::transport(
                format!("score process reported an error: {message}"),
                Some(reply.trim_end().to_string()),
            )),
            ok => Ok(ok),
        }
    }
}

/// A black-box score model running as a child process.
///
/// Access is serialized: one request in flight per handle.
pub struct ExternalScoreModel {
    channel: Mutex<Option<Channel>>,
    dim: usize,
    command: Vec<String>,
}

impl std::fmt::Debug for ExternalScoreModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalScoreModel")
            .field("dim", &self.dim)
            .field("command", &self.command)
            .finish()
    }
}

impl ExternalScoreModel {
    /// Launch `command`, check that it speaks the protocol at dimension `dim`, and
    /// check that it answers a repeated query at `probe_time` identically.
    pub fn spawn(command: &[String], dim: usize, probe_time: f64) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::usage("external backend command line is empty"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::transport(format!("cannot launch {program:?}: {e}"), None))?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout was piped"));
        let model = Self {
            channel: Mutex::new(Some(Channel { child, stdin, stdout })),
            dim,
            command: command.to_vec(),
        };
        model.handshake(probe_time)?;
        Ok(model)
    }

    fn handshake(&self, probe_time: f64) -> Result<()> {
        match self.request(&Request::Hello { dim: self.dim })? {
            Reply::Hello { dim } if dim == self.dim => {}
            Reply::Hello { dim } => {
                return Err(Error::transport(
                    format!("score process runs at dimension {dim}, expected {}", self.dim),
                    None,
                ))
            }
            other => return Err(Error::transport(format!("expected hello, got {other:?}"), None)),
        }
        let probe = Array2::from_shape_fn((2, self.dim), |(i, j)| 0.25 * (i as f64 + 1.0) - 0.1 * j as f64);
        let first = self.score_batch(probe_time, probe.view())?;
        let second = self.score_batch(probe_time, probe.view())?;
        if first.iter().zip(second.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::transport(
                "score process is not deterministic: repeated query gave different values",
                None,
            ));
        }
        Ok(())
    }

    fn request(&self, req: &Request) -> Result<Reply> {
        let mut guard = self.channel.lock().unwrap_or_else(|p| p.into_inner());
        let channel = guard
            .as_mut()
            .ok_or_else(|| Error::transport("score process already shut down", None))?;
        channel.roundtrip(req)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    pub fn score_batch(&self, s: f64, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.dim {
            return Err(Error::domain(format!("batch has dimension {}, model has {}", z.ncols(), self.dim)));
        }
        let reply = self.request(&Request::Score { t: s, z: z.to_owned() })?;
        match reply {
            Reply::Score { values } if values.dim() == z.dim() => Ok(values),
            Reply::Score { values } => Err(Error::transport(
                format!("reply shape {:?} does not match request shape {:?}", values.dim(), z.dim()),
                None,
            )),
            other => Err(Error::transport(format!("expected score reply, got {other:?}"), None)),
        }
    }

    /// Ask the process to exit and wait for it. Fails unless it exits with status 0.
    pub fn shutdown(&self) -> Result<()> {
        let mut guard = self.channel.lock().unwrap_or_else(|p| p.into_inner());
        let Some(mut channel) = guard.take() else {
            return Ok(());
        };
        let line = encode_request(&Request::Shutdown)?;
        let _ = writeln!(channel.stdin, "{line}").and_then(|_| channel.stdin.flush());
        drop(channel.stdin);
        let status = channel
            .child
            .wait()
            .map_err(|e| Error::transport(format!("waiting for score process failed: {e}"), None))?;
        if status.success() {
            Ok(())
        } else {
            Err(Error::transport(format!("score process exited with {status}"), None))
        }
    }
}

impl Drop for ExternalScoreModel {
    fn drop(&mut self) {
        let mut guard = self.channel.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(mut channel) = guard.take() {
            if let Ok(line) = encode_request(&Request::Shutdown) {
                let _ = writeln!(channel.stdin, "{line}").and_then(|_| channel.stdin.flush());
            }
            drop(channel.stdin);
            if channel.child.try_wait().ok().flatten().is_none() {
                std::thread::sleep(std::time::Duration::from_millis(20));
                if channel.child.try_wait().ok().flatten().is_none() {
                    let _ = channel.child.kill();
                }
            }
            let _ = channel.child.wait();
        }
    }
}
