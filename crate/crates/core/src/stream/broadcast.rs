use std::collections::VecDeque;
use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{DetectionEvent, EventSink, FramePacket, StreamError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BroadcastConfig {
    /// Bytes a client may have queued before it is disconnected.
    pub max_pending_bytes: usize,
}

impl Default for BroadcastConfig {
    fn default() -> Self {
        Self {
            max_pending_bytes: 1 << 20,
        }
    }
}

#[derive(Default)]
struct Outbox {
    lines: VecDeque<Arc<str>>,
    bytes: usize,
    closed: bool,
}

struct Client {
    outbox: Mutex<Outbox>,
    ready: Condvar,
    stream: TcpStream,
}

impl Client {
    fn close(&self) {
        self.outbox.lock().unwrap().closed = true;
        self.ready.notify_all();
    }
}

struct Shared {
    config: BroadcastConfig,
    clients: Mutex<Vec<Arc<Client>>>,
    writers: Mutex<Vec<JoinHandle<()>>>,
    stopping: AtomicBool,
    disconnected: AtomicU64,
    sent: AtomicU64,
}

impl Shared {
    fn add_client(self: &Arc<Self>, stream: TcpStream) {
        let _ = stream.set_nodelay(true);
        let Ok(write_half) = stream.try_clone() else { return };
        let client = Arc::new(Client {
            outbox: Mutex::default(),
            ready: Condvar::new(),
            stream,
        });
        let shared = Arc::clone(self);
        let c = Arc::clone(&client);
        let handle = std::thread::spawn(move || writer_loop(&shared, &c, write_half));
        self.clients.lock().unwrap().push(client);
        self.writers.lock().unwrap().push(handle);
    }

    fn remove(&self, client: &Arc<Client>) {
        let mut clients = self.clients.lock().unwrap();
        if let Some(pos) = clients.iter().position(|c| Arc::ptr_eq(c, client)) {
            clients.swap_remove(pos);
            self.disconnected.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn publish(&self, line: Arc<str>) {
        let clients: Vec<Arc<Client>> = self.clients.lock().unwrap().clone();
        for client in clients {
            let mut ob = client.outbox.lock().unwrap();
            if ob.closed {
                continue;
            }
            if ob.bytes + line.len() > self.config.max_pending_bytes {
                log::warn!("disconnecting slow client {:?}", client.stream.peer_addr().ok());
                ob.closed = true;
                ob.lines.clear();
                drop(ob);
                let _ = client.stream.shutdown(Shutdown::Both);
                client.ready.notify_all();
                self.remove(&client);
                continue;
            }
            ob.bytes += line.len();
            ob.lines.push_back(Arc::clone(&line));
            drop(ob);
            client.ready.notify_one();
        }
    }
}

fn writer_loop(shared: &Shared, client: &Arc<Client>, mut stream: TcpStream) {
    loop {
        let line = {
            let mut ob = client.outbox.lock().unwrap();
            loop {
                if let Some(line) = ob.lines.pop_front() {
                    ob.bytes -= line.len();
                    break Some(line);
                }
                if ob.closed {
                    break None;
                }
                ob = client.ready.wait(ob).unwrap();
            }
        };
        let Some(line) = line else { break };
        if stream.write_all(line.as_bytes()).is_err() {
            client.close();
            break;
        }
        shared.sent.fetch_add(1, Ordering::Relaxed);
    }
    let _ = stream.flush();
    let _ = stream.shutdown(Shutdown::Both);
    shared.remove(client);
}

/// Newline-delimited JSON fan-out over TCP. Clients that connect mid-run
/// receive events from the next one onward.
pub struct BroadcastHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

/// Binds `bind` and starts accepting clients.
pub fn broadcast_events(bind: &str, config: BroadcastConfig) -> Result<BroadcastHandle, StreamError> {
    let bind_err = |source| StreamError::Bind {
        addr: bind.to_string(),
        source,
    };
    let addrs: Vec<SocketAddr> = bind.to_socket_addrs().map_err(bind_err)?.collect();
    let listener = TcpListener::bind(&addrs[..]).map_err(bind_err)?;
    let addr = listener.local_addr().map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let shared = Arc::new(Shared {
        config,
        clients: Mutex::default(),
        writers: Mutex::default(),
        stopping: AtomicBool::new(false),
        disconnected: AtomicU64::new(0),
        sent: AtomicU64::new(0),
    });
    let acc = Arc::clone(&shared);
    let acceptor = std::thread::spawn(move || {
        while !acc.stopping.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("client connected from {peer}");
                    if stream.set_nonblocking(false).is_ok() {
                        acc.add_client(stream);
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    std::thread::sleep(Duration::from_millis(10));
                }
            }
        }
    });
    Ok(BroadcastHandle {
        addr,
        shared,
        acceptor: Some(acceptor),
    })
}

impl BroadcastHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn client_count(&self) -> usize {
        self.shared.clients.lock().unwrap().len()
    }

    /// Clients dropped for being slow or closing their end.
    pub fn disconnected(&self) -> u64 {
        self.shared.disconnected.load(Ordering::SeqCst)
    }

    pub fn lines_sent(&self) -> u64 {
        self.shared.sent.load(Ordering::Relaxed)
    }

    pub fn publish(&self, event: &DetectionEvent) {
        self.shared.publish(event.to_json_line().into());
    }

    pub fn sink(&self) -> BroadcastSink {
        BroadcastSink {
            shared: Arc::clone(&self.shared),
        }
    }

    /// Stops accepting, flushes what each client has queued and closes all
    /// connections.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stopping.store(true, Ordering::SeqCst);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        for c in self.shared.clients.lock().unwrap().iter() {
            c.close();
        }
        let writers: Vec<_> = std::mem::take(&mut *self.shared.writers.lock().unwrap());
        for w in writers {
            let _ = w.join();
        }
    }
}

impl Drop for BroadcastHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Pipeline sink feeding a [`BroadcastHandle`].
pub struct BroadcastSink {
    shared: Arc<Shared>,
}

impl EventSink for BroadcastSink {
    fn name(&self) -> &str {
        "broadcast"
    }

    fn emit(&mut self, event: &DetectionEvent, _frame: &FramePacket) -> std::io::Result<()> {
        self.shared.publish(event.to_json_line().into());
        Ok(())
    }
}
