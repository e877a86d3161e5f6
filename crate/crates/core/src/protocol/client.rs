use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use super::{encode_frame, Frame, FrameDecoder, ProtocolError};

/// Blocking TCP client. A background thread decodes incoming frames into an
/// unbounded local queue, so nothing is lost once it reaches this side.
pub struct Client {
    stream: TcpStream,
    incoming: Receiver<Result<Frame, ProtocolError>>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let (tx, incoming) = mpsc::channel();
        std::thread::spawn(move || {
            let mut dec = FrameDecoder::new();
            let mut buf = vec![0u8; 64 * 1024];
            loop {
                let n = match reader.read(&mut buf) {
                    Ok(0) => return,
                    Ok(n) => n,
                    Err(e) => {
                        let _ = tx.send(Err(e.into()));
                        return;
                    }
                };
                dec.push(&buf[..n]);
                loop {
                    match dec.next_frame() {
                        Ok(Some(f)) => {
                            if tx.send(Ok(f)).is_err() {
                                return;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            let _ = tx.send(Err(e));
                            return;
                        }
                    }
                }
            }
        });
        Ok(Self { stream, incoming })
    }

    pub fn send(&mut self, f: &Frame) -> Result<(), ProtocolError> {
        self.send_raw(&encode_frame(f)?)
    }

    /// Writes bytes verbatim, for fault injection.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        self.stream.write_all(bytes)?;
        Ok(())
    }

    pub fn subscribe(&mut self, topic: &str) -> Result<(), ProtocolError> {
        self.send(&Frame::subscribe(topic))
    }

    pub fn unsubscribe(&mut self, topic: &str) -> Result<(), ProtocolError> {
        self.send(&Frame::unsubscribe(topic))
    }

    pub fn publish(&mut self, topic: &str, payload: Vec<u8>) -> Result<(), ProtocolError> {
        self.send(&Frame::publish(topic, payload))
    }

    /// Next frame within `timeout`; `Ok(None)` on timeout and
    /// [`ProtocolError::Closed`] once the server hung up.
    pub fn recv(&mut self, timeout: Duration) -> Result<Option<Frame>, ProtocolError> {
        match self.incoming.recv_timeout(timeout) {
            Ok(r) => r.map(Some),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::Closed),
        }
    }

    /// Receives until `accept` returns a value, handing every frame to it.
    pub fn recv_until<T>(
        &mut self,
        timeout: Duration,
        mut accept: impl FnMut(&Frame) -> Option<T>,
    ) -> Result<T, ProtocolError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(ProtocolError::Io("timed out waiting for the server".into()));
            }
            if let Some(f) = self.recv(left)? {
                if let Some(v) = accept(&f) {
                    return Ok(v);
                }
            }
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}
