//! Length-prefixed TCP transport. One thread per connection; requests are
//! serialised through the manager lock.

use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{Clock, PromiseManager, ServiceError};
use crate::protocol::{decode, encode, read_frame, write_frame, Envelope, FaultCode, ProtocolError};

pub type SharedManager = Arc<Mutex<PromiseManager>>;

/// Open connections and the threads serving them.
type Connections = Arc<Mutex<Vec<(TcpStream, JoinHandle<()>)>>>;

/// A running server. Dropping it shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    conns: Connections,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, lets every in-flight request finish, then joins the
    /// connection threads.
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let conns = std::mem::take(&mut *self.conns.lock().unwrap_or_else(|e| e.into_inner()));
        for (stream, _) in &conns {
            // no further reads; a request already read still gets its reply
            let _ = stream.shutdown(Shutdown::Read);
        }
        for (_, h) in conns {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_inner();
        }
    }
}

pub fn serve(
    addr: impl ToSocketAddrs + std::fmt::Debug,
    manager: SharedManager,
    clock: Arc<dyn Clock>,
) -> Result<ServerHandle, ServiceError> {
    let shown = format!("{addr:?}");
    let listener = TcpListener::bind(addr).map_err(|e| ServiceError::Bind(shown, e))?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Connections = Arc::default();

    let accept = {
        let stop = stop.clone();
        let conns = conns.clone();
        thread::Builder::new()
            .name("promises-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    let Ok(handle) = stream.try_clone() else { continue };
                    let manager = manager.clone();
                    let clock = clock.clone();
                    let worker = thread::spawn(move || connection(stream, &manager, &*clock));
                    let mut conns = conns.lock().unwrap_or_else(|e| e.into_inner());
                    conns.retain(|(_, h)| !h.is_finished());
                    conns.push((handle, worker));
                }
            })?
    };
    log::info!("listening on {local}");
    Ok(ServerHandle {
        addr: local,
        stop,
        accept: Some(accept),
        conns,
    })
}

fn connection(stream: TcpStream, manager: &Mutex<PromiseManager>, clock: &dyn Clock) {
    let peer = stream.peer_addr().ok();
    let Ok(write_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    loop {
        let reply = match read_frame(&mut reader) {
            Ok(Some(bytes)) => match decode(&bytes) {
                Ok(request) => {
                    let mut m = manager.lock().unwrap_or_else(|e| e.into_inner());
                    let now = clock.now();
                    m.handle(&request, now)
                }
                Err(e) => Envelope::fault(FaultCode::MalformedMessage, e.to_string()),
            },
            Ok(None) => break,
            Err(ProtocolError::FrameTooLarge(n)) => {
                let f = Envelope::fault(FaultCode::MalformedMessage, format!("frame of {n} bytes is too large"));
                let _ = send(&mut writer, &f);
                break;
            }
            Err(e) => {
                log::debug!("connection {peer:?} closed: {e}");
                break;
            }
        };
        if let Err(e) = send(&mut writer, &reply) {
            log::debug!("connection {peer:?} write failed: {e}");
            break;
        }
    }
}

fn send(w: &mut BufWriter<TcpStream>, env: &Envelope) -> Result<(), ProtocolError> {
    let bytes = match encode(env) {
        Ok(b) => b,
        Err(e) => encode(&Envelope::fault(FaultCode::InternalError, e.to_string()))?,
    };
    write_frame(w, &bytes)
}

/// A blocking client holding one connection.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let writer = BufWriter::new(stream.try_clone()?);
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
        })
    }

    pub fn call(&mut self, request: &Envelope) -> Result<Envelope, ProtocolError> {
        let bytes = encode(request)?;
        self.call_raw(&bytes)
    }

    /// Sends arbitrary bytes as one frame and decodes the reply.
    pub fn call_raw(&mut self, bytes: &[u8]) -> Result<Envelope, ProtocolError> {
        write_frame(&mut self.writer, bytes)?;
        match read_frame(&mut self.reader)? {
            Some(reply) => decode(&reply),
            None => Err(ProtocolError::Io(std::io::ErrorKind::UnexpectedEof.into())),
        }
    }
}
