//! Reliable ordered byte streams: TCP, and an in-process pipe for tests.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

pub trait Duplex: Read + Write + Send {
    /// A second handle to the same stream, used for the writing half.
    fn try_clone_box(&self) -> io::Result<Box<dyn Duplex>>;

    /// Closes both directions; a blocked reader on either side sees EOF.
    fn shutdown(&self);

    fn describe(&self) -> String;
}

impl Duplex for TcpStream {
    fn try_clone_box(&self) -> io::Result<Box<dyn Duplex>> {
        Ok(Box::new(self.try_clone()?))
    }

    fn shutdown(&self) {
        let _ = TcpStream::shutdown(self, Shutdown::Both);
    }

    fn describe(&self) -> String {
        self.peer_addr().map_or_else(|_| "tcp".into(), |a| a.to_string())
    }
}

enum Chunk {
    Data(Vec<u8>),
    Eof,
}

struct Inbox {
    rx: Receiver<Chunk>,
    buf: VecDeque<u8>,
    eof: bool,
}

/// One end of an in-process pipe.
#[derive(Clone)]
pub struct PipeEnd {
    inbox: Arc<Mutex<Inbox>>,
    closed: Arc<AtomicBool>,
    to_self: Sender<Chunk>,
    to_peer: Sender<Chunk>,
    name: &'static str,
}

/// Two connected ends.
pub fn pipe() -> (PipeEnd, PipeEnd) {
    let (tx_a, rx_a) = channel();
    let (tx_b, rx_b) = channel();
    let end = |rx, to_self, to_peer, name| PipeEnd {
        inbox: Arc::new(Mutex::new(Inbox { rx, buf: VecDeque::new(), eof: false })),
        closed: Arc::new(AtomicBool::new(false)),
        to_self,
        to_peer,
        name,
    };
    (end(rx_a, tx_a.clone(), tx_b.clone(), "pipe-a"), end(rx_b, tx_b, tx_a, "pipe-b"))
}

impl Read for PipeEnd {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        let mut inbox = self.inbox.lock().unwrap_or_else(|p| p.into_inner());
        while inbox.buf.is_empty() && !inbox.eof {
            match inbox.rx.recv() {
                Ok(Chunk::Data(d)) => inbox.buf.extend(d),
                Ok(Chunk::Eof) | Err(_) => {
                    inbox.eof = true;
                    self.closed.store(true, Ordering::SeqCst);
                }
            }
        }
        let n = out.len().min(inbox.buf.len());
        for (slot, b) in out.iter_mut().zip(inbox.buf.drain(..n)) {
            *slot = b;
        }
        Ok(n)
    }
}

impl Write for PipeEnd {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        self.to_peer.send(Chunk::Data(data.to_vec())).map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Duplex for PipeEnd {
    fn try_clone_box(&self) -> io::Result<Box<dyn Duplex>> {
        Ok(Box::new(self.clone()))
    }

    fn shutdown(&self) {
        self.closed.store(true, Ordering::SeqCst);
        let _ = self.to_peer.send(Chunk::Eof);
        let _ = self.to_self.send(Chunk::Eof);
    }

    fn describe(&self) -> String {
        self.name.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipe_carries_bytes_and_eof() {
        let (mut a, mut b) = pipe();
        a.write_all(b"hello ").unwrap();
        a.write_all(b"world").unwrap();
        let mut buf = [0u8; 11];
        b.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"hello world");
        let reader = std::thread::spawn(move || {
            let mut rest = Vec::new();
            b.read_to_end(&mut rest).unwrap();
            rest
        });
        a.write_all(b"!").unwrap();
        a.shutdown();
        assert_eq!(reader.join().unwrap(), b"!");
        assert!(a.write_all(b"x").is_err());
        let mut empty = Vec::new();
        a.read_to_end(&mut empty).unwrap();
    }
}
