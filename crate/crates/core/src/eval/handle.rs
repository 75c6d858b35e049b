//! Connections to evaluator processes.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use super::protocol::{EvalRequest, EvalResponse, Frame, Handshake, ResponseStatus, PROTOCOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandleError {
    #[error("evaluator crashed: {0}")]
    Crashed(String),
    #[error("evaluator did not answer within {0:?}")]
    Timeout(Duration),
    #[error("evaluator handshake: {0}")]
    Handshake(String),
    #[error("cannot start evaluator: {0}")]
    Spawn(String),
}

/// One evaluator, used by one worker at a time. Requests are strictly
/// sequential.
pub trait EvaluatorHandle: Send {
    fn handshake(&self) -> &Handshake;

    /// Sends `request` and returns the raw response line.
    fn exchange(&mut self, request: &EvalRequest, timeout: Duration) -> Result<String, HandleError>;

    fn shutdown(&mut self) {}
}

fn check_handshake(line: &str) -> Result<Handshake, HandleError> {
    match Frame::from_line(line) {
        Ok(Frame::Handshake(h)) if h.protocol == PROTOCOL => Ok(h),
        Ok(Frame::Handshake(h)) => Err(HandleError::Handshake(format!(
            "protocol `{}`, expected `{PROTOCOL}`",
            h.protocol
        ))),
        Ok(_) => Err(HandleError::Handshake("first frame is not a handshake".into())),
        Err(e) => Err(HandleError::Handshake(e.to_string())),
    }
}

/// Evaluator speaking the protocol over a child process's stdin/stdout.
pub struct SubprocessEvaluator {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
    handshake: Handshake,
    dead: Option<HandleError>,
}

impl std::fmt::Debug for SubprocessEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubprocessEvaluator")
            .field("pid", &self.child.id())
            .field("dead", &self.dead)
            .finish()
    }
}

impl SubprocessEvaluator {
    pub fn spawn(command: &[String], startup_timeout: Duration) -> Result<Self, HandleError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| HandleError::Spawn("empty evaluator command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| HandleError::Spawn(format!("{program}: {e}")))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut handle = SubprocessEvaluator {
            child,
            stdin,
            lines: rx,
            handshake: Handshake {
                protocol: String::new(),
                tasks: Vec::new(),
                ibe_kinds: Vec::new(),
                capabilities: Vec::new(),
                environments: Vec::new(),
            },
            dead: None,
        };
        let line = handle.next_line(startup_timeout).map_err(|e| {
            handle.kill();
            HandleError::Handshake(e.to_string())
        })?;
        handle.handshake = check_handshake(&line).inspect_err(|_| handle.kill())?;
        Ok(handle)
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn next_line(&mut self, timeout: Duration) -> Result<String, HandleError> {
        match self.lines.recv_timeout(timeout) {
            Ok(line) => Ok(line),
            Err(RecvTimeoutError::Timeout) => {
                self.kill();
                Err(HandleError::Timeout(timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = self
                    .child
                    .wait()
                    .map(|s| s.to_string())
                    .unwrap_or_else(|e| e.to_string());
                Err(HandleError::Crashed(format!("stdout closed ({status})")))
            }
        }
    }
}

impl EvaluatorHandle for SubprocessEvaluator {
    fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn exchange(&mut self, request: &EvalRequest, timeout: Duration) -> Result<String, HandleError> {
        if let Some(e) = &self.dead {
            return Err(e.clone());
        }
        let line = Frame::Request(request.clone()).to_line();
        let sent = self
            .stdin
            .as_mut()
            .ok_or_else(|| HandleError::Crashed("stdin closed".into()))
            .and_then(|w| {
                w.write_all(line.as_bytes())
                    .and_then(|_| w.flush())
                    .map_err(|e| HandleError::Crashed(e.to_string()))
            });
        let result = sent.and_then(|_| self.next_line(timeout));
        if let Err(e) = &result {
            self.dead = Some(e.clone());
        }
        result
    }

    fn shutdown(&mut self) {
        if self.dead.is_none() {
            if let Some(mut w) = self.stdin.take() {
                let _ = w.write_all(Frame::Request(EvalRequest::shutdown(0)).to_line().as_bytes());
                let _ = w.flush();
            }
            for _ in 0..50 {
                if matches!(self.child.try_wait(), Ok(Some(_))) {
                    self.dead = Some(HandleError::Crashed("shut down".into()));
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
        }
        self.kill();
        self.dead = Some(HandleError::Crashed("shut down".into()));
    }
}

impl Drop for SubprocessEvaluator {
    fn drop(&mut self) {
        if self.dead.is_none() {
            self.shutdown();
        }
    }
}

/// Server side of the protocol.
pub trait EvalServer: Send {
    fn handshake(&self) -> Handshake;
    fn handle(&mut self, request: &EvalRequest) -> EvalResponse;
}

/// Runs a server in process. Frames still go through JSON so the engine
/// sees exactly what a subprocess would send.
pub struct LoopbackEvaluator {
    server: Box<dyn EvalServer>,
    handshake: Handshake,
}

impl LoopbackEvaluator {
    pub fn new(server: Box<dyn EvalServer>) -> Self {
        let handshake = server.handshake();
        LoopbackEvaluator { server, handshake }
    }
}

impl EvaluatorHandle for LoopbackEvaluator {
    fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn exchange(&mut self, request: &EvalRequest, _timeout: Duration) -> Result<String, HandleError> {
        let line = Frame::Request(request.clone()).to_line();
        let response = match Frame::from_line(&line) {
            Ok(Frame::Request(r)) => self.server.handle(&r),
            _ => EvalResponse::failure(request.request_id, ResponseStatus::ProtocolError, "unreadable request", 0),
        };
        Ok(Frame::Response(response).to_line())
    }
}

/// Serves `server` over a line stream until shutdown or end of input.
pub fn serve(
    server: &mut dyn EvalServer,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<()> {
    output.write_all(Frame::Handshake(server.handshake()).to_line().as_bytes())?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match Frame::from_line(&line) {
            Ok(Frame::Request(r)) if r.kind == super::protocol::RequestKind::Shutdown => break,
            Ok(Frame::Request(r)) => match r.validate() {
                Ok(()) => server.handle(&r),
                Err(e) => EvalResponse::failure(r.request_id, ResponseStatus::ProtocolError, e, 0),
            },
            Ok(_) => EvalResponse::failure(0, ResponseStatus::ProtocolError, "expected a request frame", 0),
            Err(e) => EvalResponse::failure(0, ResponseStatus::ProtocolError, e.to_string(), 0),
        };
        output.write_all(Frame::Response(response).to_line().as_bytes())?;
        output.flush()?;
    }
    Ok(())
}
