//! Noise predictions served by another process over the DNFP stream.

use std::io::{BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::predictor::NoisePredictor;
use crate::protocol::{self, Request, Response};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

struct Connection {
    writer: Box<dyn Write + Send>,
    responses: Receiver<Result<Response>>,
    child: Option<Child>,
    broken: Option<String>,
}

/// Client side of a DNFP connection. Requests are serialized: one request is
/// in flight at a time per connection.
pub struct ExternalPredictor {
    label: String,
    timeout: Duration,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for ExternalPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalPredictor")
            .field("label", &self.label)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ExternalPredictor {
    /// Launch `program args...` and speak DNFP over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("failed to launch `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let label = std::iter::once(program.to_string())
            .chain(args.iter().cloned())
            .collect::<Vec<_>>()
            .join(" ");
        let mut p = Self::connect(label, stdout, stdin, timeout)?;
        p.conn.get_mut().expect("fresh mutex").child = Some(child);
        Ok(p)
    }

    /// Attach to an already connected peer. The handshake must arrive within
    /// `timeout`.
    pub fn connect<R, W>(label: String, reader: R, writer: W, timeout: Duration) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (hs_tx, hs_rx) = mpsc::channel();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            let hs = protocol::read_handshake(&mut reader);
            let ok = hs.is_ok();
            if hs_tx.send(hs).is_err() || !ok {
                return;
            }
            loop {
                let frame = protocol::read_response(&mut reader);
                let stop = frame.is_err();
                if tx.send(frame).is_err() || stop {
                    return;
                }
            }
        });
        match hs_rx.recv_timeout(timeout) {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(Error::Transport(format!("handshake with `{label}`: {e}"))),
            Err(_) => {
                return Err(Error::Transport(format!(
                    "no handshake from `{label}` within {timeout:?}"
                )))
            }
        }
        Ok(Self {
            label,
            timeout,
            conn: Mutex::new(Connection {
                writer: Box::new(writer),
                responses: rx,
                child: None,
                broken: None,
            }),
        })
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn request(&self, t: usize, x: &Tensor) -> Result<Tensor> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(reason) = &conn.broken {
            return Err(Error::Transport(format!("connection to `{}` is down: {reason}", self.label)));
        }
        let t32 = u32::try_from(t).map_err(|_| Error::param("timestep exceeds u32"))?;
        let result = self.exchange(&mut conn, t32, x);
        if let Err(Error::Transport(reason)) = &result {
            // Any transport fault leaves the stream position unknown.
            conn.broken = Some(reason.clone());
        }
        result
    }

    fn exchange(&self, conn: &mut Connection, t: u32, x: &Tensor) -> Result<Tensor> {
        let req = Request { t, x: x.clone() };
        protocol::write_request(&mut conn.writer, &req)
            .map_err(|e| Error::Transport(format!("sending to `{}`: {e}", self.label)))?;
        let frame = match conn.responses.recv_timeout(self.timeout) {
            Ok(frame) => frame,
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Transport(format!(
                    "`{}` did not answer within {:?}",
                    self.label, self.timeout
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Transport(format!("`{}` exited", self.label)))
            }
        };
        match frame {
            Ok(Response::Ok(y)) => {
                if y.shape() != x.shape() {
                    return Err(Error::Transport(format!(
                        "`{}` returned shape {:?} for input {:?}",
                        self.label,
                        y.shape(),
                        x.shape()
                    )));
                }
                Ok(y)
            }
            Ok(Response::Err(msg)) => Err(Error::Transport(format!(
                "`{}` reported an error: {msg}",
                self.label
            ))),
            Err(e) => Err(Error::Transport(format!(
                "malformed frame from `{}`: {e}",
                self.label
            ))),
        }
    }
}

impl NoisePredictor for ExternalPredictor {
    fn id(&self) -> String {
        format!("external({})", self.label)
    }

    fn predict(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        schedule.check_timestep(t)?;
        self.request(t, x)
    }
}

impl Drop for ExternalPredictor {
    fn drop(&mut self) {
        let conn = self.conn.get_mut().unwrap_or_else(|p| p.into_inner());
        // Closing stdin lets a well-behaved server exit on EOF.
        conn.writer = Box::new(std::io::sink());
        if let Some(child) = conn.child.as_mut() {
            for _ in 0..50 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
