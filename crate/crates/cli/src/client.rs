//! Blocking client for the line protocol.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde_json::{Map, Value};

use crate::wire::{decode_message, encode_message, MsgType, WireError, WireMessage};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("server closed the connection")]
    Closed,
    #[error("bad reply from server: {0}")]
    Wire(#[from] WireError),
    #[error("reply {got:?} does not match request {want:?}")]
    Mismatch { want: String, got: String },
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
}

impl Client {
    pub fn connect(addr: &str) -> Result<Client, ClientError> {
        let stream = TcpStream::connect(addr).map_err(|source| ClientError::Connect {
            addr: addr.to_string(),
            source,
        })?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        Ok(Client {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            next_id: 1,
        })
    }

    /// Sends one request and waits for its reply.
    pub fn request(&mut self, kind: MsgType, payload: Map<String, Value>) -> Result<WireMessage, ClientError> {
        let id = format!("c{}", self.next_id);
        self.next_id += 1;
        self.send_raw(&encode_message(&WireMessage::new(kind, id.clone(), payload)))?;
        let reply = self.read_reply()?;
        if reply.request_id != id {
            return Err(ClientError::Mismatch {
                want: id,
                got: reply.request_id,
            });
        }
        Ok(reply)
    }

    /// Writes bytes as-is; for exercising the server with odd input.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn read_reply(&mut self) -> Result<WireMessage, ClientError> {
        let mut line = Vec::new();
        if self.reader.read_until(b'\n', &mut line)? == 0 {
            return Err(ClientError::Closed);
        }
        Ok(decode_message(&line)?)
    }
}
