//! Storage transports and the storage server's network front end.
//!
//! The proxy talks to storage through [`StorageTransport`], either directly
//! against an in-process [`SlotStore`] or over TCP. The TCP flavor owns
//! reconnect-and-retry: a dropped connection is reopened and the in-flight
//! half of the exchange is resent. The server recognizes resent halves
//! structurally (see the store module), so retries never duplicate log
//! entries or corrupt slots.

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::store::{write_ndjson_entry, SlotStore, WriteOutcome};
use crate::wire::StorageMsg;

/// Timestamp source for the storage side. Real deployments measure wall
/// time; deterministic runs share a tick counter with the simulation
/// driver, which advances it once per batch interval.
#[derive(Clone)]
pub enum StorageClock {
    WallMicros(Instant),
    Ticks(Arc<AtomicU64>),
}

impl StorageClock {
    pub fn wall() -> Self {
        StorageClock::WallMicros(Instant::now())
    }

    pub fn ticks(counter: Arc<AtomicU64>) -> Self {
        StorageClock::Ticks(counter)
    }

    pub fn now(&self) -> u64 {
        match self {
            StorageClock::WallMicros(origin) => origin.elapsed().as_micros() as u64,
            StorageClock::Ticks(counter) => counter.load(Ordering::SeqCst),
        }
    }
}

pub trait StorageTransport: Send {
    fn capacity(&self) -> u64;
    fn block_width(&self) -> usize;
    /// One-time population of every slot before the protocol starts.
    fn init_upload(&mut self, writes: &[(u64, Vec<u8>)]) -> Result<()>;
    fn batch_read(&mut self, addrs: &[u64]) -> Result<Vec<Vec<u8>>>;
    fn batch_write(&mut self, writes: &[(u64, Vec<u8>)]) -> Result<()>;
}

/// Direct transport for single-process setups: simulation, tests, and the
/// audit harness, which wants the store (and its log) in hand afterwards.
pub struct InProcTransport {
    store: Arc<Mutex<SlotStore>>,
    clock: StorageClock,
}

impl InProcTransport {
    pub fn new(store: Arc<Mutex<SlotStore>>, clock: StorageClock) -> Self {
        InProcTransport { store, clock }
    }
}

impl StorageTransport for InProcTransport {
    fn capacity(&self) -> u64 {
        self.store.lock().unwrap().capacity()
    }

    fn block_width(&self) -> usize {
        self.store.lock().unwrap().block_width()
    }

    fn init_upload(&mut self, writes: &[(u64, Vec<u8>)]) -> Result<()> {
        self.store.lock().unwrap().init_upload(writes)
    }

    fn batch_read(&mut self, addrs: &[u64]) -> Result<Vec<Vec<u8>>> {
        let now = self.clock.now();
        self.store.lock().unwrap().batch_read(addrs, now)
    }

    fn batch_write(&mut self, writes: &[(u64, Vec<u8>)]) -> Result<()> {
        self.store.lock().unwrap().batch_write(writes).map(|_| ())
    }
}

/// TCP transport with bounded reconnect-and-resend on connection failure.
pub struct TcpTransport {
    addr: String,
    conn: Option<Conn>,
    capacity: u64,
    element_size: u32,
    block_width: u32,
    max_attempts: u32,
    retry_backoff: Duration,
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn connect(addr: &str) -> Result<Self> {
        let mut transport = TcpTransport {
            addr: addr.to_string(),
            conn: None,
            capacity: 0,
            element_size: 0,
            block_width: 0,
            max_attempts: 5,
            retry_backoff: Duration::from_millis(20),
        };
        transport.reconnect()?;
        Ok(transport)
    }

    fn reconnect(&mut self) -> Result<()> {
        self.conn = None;
        let stream = TcpStream::connect(&self.addr)?;
        stream.set_nodelay(true)?;
        let reader_stream = stream.try_clone()?;
        let mut conn = Conn {
            reader: BufReader::new(reader_stream),
            writer: BufWriter::new(stream),
        };
        // the server opens every connection by announcing its geometry
        match StorageMsg::read_from(&mut conn.reader)? {
            StorageMsg::Handshake { capacity, element_size, block_width } => {
                if self.capacity != 0 && self.capacity != capacity {
                    return Err(Error::Protocol(format!(
                        "server geometry changed across reconnect: capacity {} became {capacity}",
                        self.capacity
                    )));
                }
                self.capacity = capacity;
                self.element_size = element_size;
                self.block_width = block_width;
            }
            other => {
                return Err(Error::Protocol(format!(
                    "expected handshake, got {other:?}"
                )));
            }
        }
        self.conn = Some(conn);
        Ok(())
    }

    /// Runs one request-response exchange, reconnecting and resending on
    /// connection errors. Safe because the server treats structurally
    /// identical resends as replays.
    fn exchange(&mut self, request: &StorageMsg) -> Result<StorageMsg> {
        let mut last_err = None;
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry_backoff);
                if let Err(e) = self.reconnect() {
                    last_err = Some(e);
                    continue;
                }
            }
            let conn = match self.conn.as_mut() {
                Some(c) => c,
                None => match self.reconnect() {
                    Ok(()) => self.conn.as_mut().unwrap(),
                    Err(e) => {
                        last_err = Some(e);
                        continue;
                    }
                },
            };
            let result = request
                .write_to(&mut conn.writer)
                .and_then(|()| conn.writer.flush().map_err(Error::from))
                .and_then(|()| StorageMsg::read_from(&mut conn.reader));
            match result {
                Ok(resp) => return Ok(resp),
                Err(e @ Error::Io(_)) => {
                    last_err = Some(e);
                    self.conn = None;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Protocol("exchange failed".into())))
    }

    /// Test hook: kill the socket under the transport to exercise the
    /// reconnect path deterministically.
    #[cfg(test)]
    fn sever_connection(&mut self) {
        if let Some(conn) = &self.conn {
            let _ = conn.reader.get_ref().shutdown(std::net::Shutdown::Both);
        }
    }
}

impl StorageTransport for TcpTransport {
    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn block_width(&self) -> usize {
        self.block_width as usize
    }

    fn init_upload(&mut self, writes: &[(u64, Vec<u8>)]) -> Result<()> {
        let msg = StorageMsg::BatchWrite { writes: writes.to_vec() };
        match self.exchange(&msg)? {
            StorageMsg::Ack => Ok(()),
            other => Err(Error::Protocol(format!("expected ack for setup upload, got {other:?}"))),
        }
    }

    fn batch_read(&mut self, addrs: &[u64]) -> Result<Vec<Vec<u8>>> {
        let msg = StorageMsg::BatchRead { addrs: addrs.to_vec() };
        match self.exchange(&msg)? {
            StorageMsg::BatchReadResp { blocks } => {
                if blocks.len() != addrs.len() {
                    return Err(Error::Protocol(format!(
                        "read {} slots, got {} blocks",
                        addrs.len(),
                        blocks.len()
                    )));
                }
                Ok(blocks)
            }
            other => Err(Error::Protocol(format!("expected read response, got {other:?}"))),
        }
    }

    fn batch_write(&mut self, writes: &[(u64, Vec<u8>)]) -> Result<()> {
        let msg = StorageMsg::BatchWrite { writes: writes.to_vec() };
        match self.exchange(&msg)? {
            StorageMsg::Ack => Ok(()),
            other => Err(Error::Protocol(format!("expected ack, got {other:?}"))),
        }
    }
}

/// Running storage server bound to a local port. Stops when dropped.
pub struct StorageServerHandle {
    pub addr: String,
    stop: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl Drop for StorageServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Spawns the accept loop on its own thread. `element_size` is advertised
/// in the handshake so the proxy can sanity-check its configuration.
/// Completed batches stream to `log_sink` as NDJSON in addition to the
/// store's in-memory log.
pub fn spawn_storage_server(
    listener: TcpListener,
    store: Arc<Mutex<SlotStore>>,
    element_size: u32,
    log_sink: Option<Box<dyn Write + Send>>,
) -> Result<StorageServerHandle> {
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?.to_string();
    let stop = Arc::new(AtomicBool::new(false));
    let stop_accept = stop.clone();
    let clock = StorageClock::wall();
    let sink = Arc::new(Mutex::new(log_sink));
    let join = std::thread::spawn(move || {
        loop {
            if stop_accept.load(Ordering::SeqCst) {
                return;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    let store = store.clone();
                    let clock = clock.clone();
                    let sink = sink.clone();
                    // one active proxy connection at a time is the normal
                    // case; serving it inline keeps shutdown simple
                    if let Err(e) = serve_connection(stream, &store, element_size, &clock, &sink) {
                        eprintln!("storage connection ended: {e}");
                    }
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => {
                    eprintln!("storage accept failed: {e}");
                    return;
                }
            }
        }
    });
    Ok(StorageServerHandle { addr, stop, join: Some(join) })
}

fn serve_connection(
    stream: TcpStream,
    store: &Arc<Mutex<SlotStore>>,
    element_size: u32,
    clock: &StorageClock,
    sink: &Arc<Mutex<Option<Box<dyn Write + Send>>>>,
) -> Result<()> {
    stream.set_nodelay(true)?;
    let reader_stream = stream.try_clone()?;
    let mut reader = BufReader::new(reader_stream);
    let mut writer = BufWriter::new(stream);

    {
        let store = store.lock().unwrap();
        let hello = StorageMsg::Handshake {
            capacity: store.capacity(),
            element_size,
            block_width: store.block_width() as u32,
        };
        hello.write_to(&mut writer)?;
        writer.flush()?;
    }

    loop {
        let msg = match StorageMsg::read_from(&mut reader) {
            Ok(msg) => msg,
            // normal disconnect between exchanges
            Err(Error::Io(ref e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        match msg {
            StorageMsg::BatchRead { addrs } => {
                let now = clock.now();
                let blocks = store.lock().unwrap().batch_read(&addrs, now)?;
                StorageMsg::BatchReadResp { blocks }.write_to(&mut writer)?;
                writer.flush()?;
            }
            StorageMsg::BatchWrite { writes } => {
                let mut store = store.lock().unwrap();
                if store.is_initialized() {
                    let outcome = store.batch_write(&writes)?;
                    if outcome == WriteOutcome::Applied {
                        if let Some(sink) = sink.lock().unwrap().as_mut() {
                            let entry =
                                store.latest_entry().expect("applied write appends an entry");
                            write_ndjson_entry(sink, entry)?;
                            sink.flush()?;
                        }
                    }
                } else {
                    store.init_upload(&writes)?;
                }
                drop(store);
                StorageMsg::Ack.write_to(&mut writer)?;
                writer.flush()?;
            }
            other => {
                return Err(Error::Protocol(format!("unexpected message {other:?}")));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh_server(
        capacity: u64,
        block_width: usize,
    ) -> (StorageServerHandle, Arc<Mutex<SlotStore>>) {
        let store = Arc::new(Mutex::new(SlotStore::new(capacity, block_width)));
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let handle = spawn_storage_server(listener, store.clone(), 8, None).unwrap();
        (handle, store)
    }

    fn init_blocks(capacity: u64, width: usize) -> Vec<(u64, Vec<u8>)> {
        (0..capacity).map(|a| (a, vec![a as u8; width])).collect()
    }

    #[test]
    fn inproc_transport_round_trip() {
        let store = Arc::new(Mutex::new(SlotStore::new(4, 8)));
        let ticks = Arc::new(AtomicU64::new(0));
        let mut t = InProcTransport::new(store.clone(), StorageClock::ticks(ticks.clone()));
        assert_eq!(t.capacity(), 4);
        t.init_upload(&init_blocks(4, 8)).unwrap();

        ticks.store(7, Ordering::SeqCst);
        let blocks = t.batch_read(&[2, 0]).unwrap();
        assert_eq!(blocks, vec![vec![2u8; 8], vec![0u8; 8]]);
        t.batch_write(&[(2, vec![9; 8]), (0, vec![8; 8])]).unwrap();

        let store = store.lock().unwrap();
        assert_eq!(store.log().len(), 1);
        assert_eq!(store.log()[0].receive_time, 7);
    }

    #[test]
    fn tcp_transport_handshake_and_exchange() {
        let (server, store) = fresh_server(6, 36);
        let mut t = TcpTransport::connect(&server.addr).unwrap();
        assert_eq!(t.capacity(), 6);
        assert_eq!(t.block_width(), 36);

        t.init_upload(&init_blocks(6, 36)).unwrap();
        let blocks = t.batch_read(&[5, 1]).unwrap();
        assert_eq!(blocks[0], vec![5u8; 36]);
        t.batch_write(&[(5, vec![0xAA; 36]), (1, vec![0xBB; 36])]).unwrap();

        assert_eq!(store.lock().unwrap().log().len(), 1);
        assert_eq!(store.lock().unwrap().slot(5).unwrap(), vec![0xAA; 36].as_slice());
    }

    #[test]
    fn tcp_transport_survives_connection_loss() {
        let (server, store) = fresh_server(3, 36);
        let mut t = TcpTransport::connect(&server.addr).unwrap();
        t.init_upload(&init_blocks(3, 36)).unwrap();

        // kill the socket between exchanges; the next read reconnects
        t.sever_connection();
        let blocks = t.batch_read(&[0, 2]).unwrap();
        assert_eq!(blocks[1], vec![2u8; 36]);

        // and again between the read and write halves of one batch
        t.sever_connection();
        t.batch_write(&[(0, vec![1; 36]), (2, vec![3; 36])]).unwrap();

        let store = store.lock().unwrap();
        assert_eq!(store.log().len(), 1);
        assert_eq!(store.log()[0].read_addresses, vec![0, 2]);
        assert_eq!(store.slot(0).unwrap(), vec![1u8; 36].as_slice());
    }
}
