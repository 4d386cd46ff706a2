//! Child processes speaking the line protocol.
//!
//! Parent to child: `S <id>` opens stream `id` (no reply), `X <id>` requests
//! one bit. Child to parent: a single line `0` or `1` per `X`. Streams are
//! partitioned across children by `id mod procs`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::error::SamplerError;

pub const DEFAULT_BIT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug)]
struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

#[derive(Debug)]
pub struct ExternalPool {
    command: String,
    workers: Vec<Mutex<Worker>>,
    timeout: Duration,
}

impl ExternalPool {
    /// Spawns `procs` copies of `command` through `sh -c`, with `args` appended.
    pub fn spawn(
        command: &str,
        args: &[String],
        procs: usize,
        timeout: Duration,
    ) -> Result<Self, SamplerError> {
        let mut line = command.to_string();
        for a in args {
            line.push(' ');
            line.push_str(a);
        }
        let workers = (0..procs.max(1))
            .map(|_| spawn_worker(&line).map(Mutex::new))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            command: line,
            workers,
            timeout,
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn procs(&self) -> usize {
        self.workers.len()
    }

    fn worker(&self, id: u64) -> std::sync::MutexGuard<'_, Worker> {
        let slot = &self.workers[(id % self.workers.len() as u64) as usize];
        slot.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn open(&self, id: u64) -> Result<(), SamplerError> {
        let mut w = self.worker(id);
        send(&mut w, id, &format!("S {id}\n"))
    }

    pub fn bit(&self, id: u64) -> Result<bool, SamplerError> {
        let mut w = self.worker(id);
        send(&mut w, id, &format!("X {id}\n"))?;
        match w.lines.recv_timeout(self.timeout) {
            Ok(line) => match line.trim_end_matches(['\r', '\n']) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(SamplerError::Protocol {
                    stream: id,
                    line: other.to_string(),
                }),
            },
            Err(RecvTimeoutError::Timeout) => Err(SamplerError::Timeout {
                stream: id,
                secs: self.timeout.as_secs(),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(SamplerError::ChildExited { stream: id }),
        }
    }
}

fn spawn_worker(line: &str) -> Result<Worker, SamplerError> {
    let spawn_err = |reason: String| SamplerError::Spawn {
        command: line.to_string(),
        reason,
    };
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(line)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| spawn_err(e.to_string()))?;
    let stdin = child
        .stdin
        .take()
        .ok_or_else(|| spawn_err("no stdin".into()))?;
    let stdout = child
        .stdout
        .take()
        .ok_or_else(|| spawn_err("no stdout".into()))?;
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            match line {
                Ok(l) => {
                    if tx.send(l).is_err() {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
    });
    Ok(Worker {
        child,
        stdin,
        lines: rx,
    })
}

fn send(w: &mut Worker, id: u64, msg: &str) -> Result<(), SamplerError> {
    let res = w
        .stdin
        .write_all(msg.as_bytes())
        .and_then(|_| w.stdin.flush());
    match res {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            Err(SamplerError::ChildExited { stream: id })
        }
        Err(e) => Err(SamplerError::Io(e.to_string())),
    }
}

impl Drop for ExternalPool {
    fn drop(&mut self) {
        for w in &self.workers {
            let mut w = w.lock().unwrap_or_else(|e| e.into_inner());
            let _ = w.child.kill();
            let _ = w.child.wait();
        }
    }
}
