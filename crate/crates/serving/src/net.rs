use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crate::frame::{decode, read_raw, write_frame, FrameError, Message};

type Registry = Arc<Mutex<HashMap<u64, TcpStream>>>;

/// Running server or broker. Dropping the handle leaves it running;
/// call [`ServerHandle::shutdown`] to stop it.
pub struct ServerHandle {
    addr: Option<SocketAddr>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    conns: Registry,
}

impl ServerHandle {
    pub(crate) fn new(addr: Option<SocketAddr>, stop: Arc<AtomicBool>, threads: Vec<JoinHandle<()>>) -> Self {
        Self {
            addr,
            stop,
            threads,
            conns: Registry::default(),
        }
    }

    /// Listening address, when the server accepts connections.
    pub fn addr(&self) -> Option<SocketAddr> {
        self.addr
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Stop accepting, close open connections and join the service threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(addr) = self.addr {
            // wake the blocking accept
            let _ = TcpStream::connect(addr);
        }
        for (_, s) in self.conns.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Accept loop; each connection gets its own thread running `handler` for
/// every well-formed request frame.
pub(crate) fn serve<H>(listener: TcpListener, handler: H) -> io::Result<ServerHandle>
where
    H: Fn(Message) -> Message + Send + Sync + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns = Registry::default();
    let handler = Arc::new(handler);
    let accept = {
        let stop = stop.clone();
        let conns = conns.clone();
        thread::spawn(move || {
            let next = AtomicU64::new(0);
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let key = next.fetch_add(1, Ordering::Relaxed);
                if let Ok(clone) = stream.try_clone() {
                    conns.lock().unwrap().insert(key, clone);
                }
                let handler = handler.clone();
                let conns = conns.clone();
                thread::spawn(move || {
                    let _ = connection_loop(stream, handler.as_ref());
                    conns.lock().unwrap().remove(&key);
                });
            }
        })
    };
    let mut handle = ServerHandle::new(Some(addr), stop, vec![accept]);
    handle.conns = conns;
    Ok(handle)
}

fn connection_loop(stream: TcpStream, handler: &(dyn Fn(Message) -> Message + Send + Sync)) -> Result<(), FrameError> {
    let _ = stream.set_nodelay(true);
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    loop {
        let body = match read_raw(&mut reader) {
            Ok(Some(body)) => body,
            Ok(None) => return Ok(()),
            Err(FrameError::Oversized(n)) => {
                let msg = Message::error("", "frame_too_large", format!("frame of {n} bytes exceeds 16 MiB"));
                let _ = write_frame(&mut writer, &msg);
                let _ = writer.shutdown(Shutdown::Both);
                return Err(FrameError::Oversized(n));
            }
            Err(e) => return Err(e),
        };
        let reply = match decode(&body) {
            Ok(msg) => handler(msg),
            Err((id, e)) => Message::error(id.unwrap_or_default(), "malformed_frame", e.to_string()),
        };
        write_frame(&mut writer, &reply)?;
    }
}
