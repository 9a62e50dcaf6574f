//! Client SDK: a pipelined connection speaking the client wire protocol.
//!
//! Works against anything that serves the protocol, which in this
//! workspace means the proxy front end and the plain unprotected server
//! the benchmarks compare against. Requests carry client-chosen ids and
//! responses may arrive out of order (a cache hit overtakes an older
//! miss), so completions are matched by id, not position.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{ClientResponse, ResponseBody};
use crate::wire::ClientMsg;

pub struct CloakClient {
    writer: BufWriter<TcpStream>,
    responses: Receiver<ClientResponse>,
    next_id: u64,
    in_flight: HashMap<u64, Instant>,
}

impl CloakClient {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader_stream = stream.try_clone()?;
        let (tx, rx) = channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(reader_stream);
            loop {
                let resp = match ClientMsg::read_from(&mut reader) {
                    Ok(ClientMsg::ReadResp { id, value }) => ClientResponse::value(id, value),
                    Ok(ClientMsg::WriteOk { id }) => ClientResponse::write_ok(id),
                    Ok(ClientMsg::Err { id, code }) => ClientResponse::err(id, code),
                    Ok(_) | Err(_) => return,
                };
                if tx.send(resp).is_err() {
                    return;
                }
            }
        });
        Ok(CloakClient {
            writer: BufWriter::new(stream),
            responses: rx,
            next_id: 1,
            in_flight: HashMap::new(),
        })
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Issues a read, returning its id immediately.
    pub fn send_read(&mut self, addr: u64) -> Result<u64> {
        let id = self.fresh_id();
        ClientMsg::Read { id, addr }.write_to(&mut self.writer)?;
        self.writer.flush()?;
        Ok(id)
    }

    /// Issues a write, returning its id immediately.
    pub fn send_write(&mut self, addr: u64, value: Vec<u8>) -> Result<u64> {
        let id = self.fresh_id();
        ClientMsg::Write { id, addr, value }.write_to(&mut self.writer)?;
        self.writer.flush()?;
        Ok(id)
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.in_flight.insert(id, Instant::now());
        id
    }

    /// Next completion, with the round-trip time of the matched request.
    pub fn recv(&mut self, timeout: Duration) -> Result<(ClientResponse, Duration)> {
        let resp = match self.responses.recv_timeout(timeout) {
            Ok(resp) => resp,
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Protocol("timed out waiting for a response".into()));
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Protocol("server closed the connection".into()));
            }
        };
        let issued = self
            .in_flight
            .remove(&resp.id)
            .ok_or_else(|| Error::Protocol(format!("response for unknown id {}", resp.id)))?;
        Ok((resp, issued.elapsed()))
    }

    /// Blocking read of one element; requires an empty pipeline.
    pub fn get(&mut self, addr: u64, timeout: Duration) -> Result<Vec<u8>> {
        assert!(self.in_flight.is_empty(), "get() is for unpipelined use");
        let id = self.send_read(addr)?;
        let (resp, _) = self.recv(timeout)?;
        debug_assert_eq!(resp.id, id);
        match resp.body {
            ResponseBody::Value(v) => Ok(v),
            ResponseBody::Err(code) => Err(Error::Protocol(format!("server error code {code}"))),
            ResponseBody::WriteOk => Err(Error::Protocol("write ack for a read".into())),
        }
    }

    /// Blocking write of one element; requires an empty pipeline.
    pub fn put(&mut self, addr: u64, value: Vec<u8>, timeout: Duration) -> Result<()> {
        assert!(self.in_flight.is_empty(), "put() is for unpipelined use");
        self.send_write(addr, value)?;
        let (resp, _) = self.recv(timeout)?;
        match resp.body {
            ResponseBody::WriteOk => Ok(()),
            ResponseBody::Err(code) => Err(Error::Protocol(format!("server error code {code}"))),
            ResponseBody::Value(_) => Err(Error::Protocol("value response for a write".into())),
        }
    }
}
