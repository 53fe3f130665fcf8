//! Exchange interface for a round, with an in-process and a loopback TCP
//! implementation. Both move the same message bytes.
//!
//! Socket frames are `len u32 LE | message`.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};

use super::{serve_round, ClientUpload, RoundOutcome, ServerConfig, SyncResponse};
use crate::{Error, Result};

/// Carries uploads to the server and replies back to the clients.
pub trait Exchange {
    /// Runs one round for `uploads` and returns each client's reply, in the
    /// order the uploads were given.
    fn round(&mut self, uploads: &[ClientUpload]) -> Result<Vec<SyncResponse>>;
}

/// Calls the server directly with serialized messages.
#[derive(Debug, Clone)]
pub struct InProcess {
    pub config: ServerConfig,
    pub last: Option<RoundOutcome>,
}

impl InProcess {
    pub fn new(config: ServerConfig) -> Self {
        Self { config, last: None }
    }
}

impl Exchange for InProcess {
    fn round(&mut self, uploads: &[ClientUpload]) -> Result<Vec<SyncResponse>> {
        let msgs = uploads
            .iter()
            .map(ClientUpload::to_bytes)
            .collect::<Result<Vec<_>>>()?;
        let (replies, outcome) = serve_round(&msgs, &self.config)?;
        self.last = Some(outcome);
        replies.iter().map(|r| SyncResponse::from_bytes(r)).collect()
    }
}

fn net_err(e: std::io::Error) -> Error {
    Error::Protocol(format!("socket: {e}"))
}

pub fn write_frame(w: &mut impl Write, msg: &[u8]) -> Result<()> {
    let len = u32::try_from(msg.len()).map_err(|_| Error::Protocol("frame too large".into()))?;
    w.write_all(&len.to_le_bytes()).map_err(net_err)?;
    w.write_all(msg).map_err(net_err)?;
    w.flush().map_err(net_err)
}

pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(net_err)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf).map_err(net_err)?;
    Ok(buf)
}

/// Accept `clients` connections, wait for every upload (barrier), run the
/// round, then answer each connection with its own domain's reply.
pub fn serve_tcp(listener: &TcpListener, clients: usize, cfg: &ServerConfig) -> Result<RoundOutcome> {
    let mut conns = Vec::with_capacity(clients);
    let mut msgs = Vec::with_capacity(clients);
    for _ in 0..clients {
        let (mut stream, _) = listener.accept().map_err(net_err)?;
        msgs.push(read_frame(&mut stream)?);
        conns.push(stream);
    }
    let (replies, outcome) = serve_round(&msgs, cfg)?;
    for (stream, reply) in conns.iter_mut().zip(&replies) {
        write_frame(stream, reply)?;
    }
    Ok(outcome)
}

/// Client side: send one upload and block for the reply.
pub fn client_tcp(addr: SocketAddr, upload: &ClientUpload) -> Result<SyncResponse> {
    let mut stream = TcpStream::connect(addr).map_err(net_err)?;
    write_frame(&mut stream, &upload.to_bytes()?)?;
    let reply = SyncResponse::from_bytes(&read_frame(&mut stream)?)?;
    if reply.domain != upload.domain {
        return Err(Error::Protocol(format!(
            "reply for '{}' sent to '{}'",
            reply.domain, upload.domain
        )));
    }
    Ok(reply)
}

/// Runs the server and the clients over `127.0.0.1`. Clients connect one
/// after another so the server sees uploads in the given order.
#[derive(Debug, Clone)]
pub struct Loopback {
    pub config: ServerConfig,
}

impl Exchange for Loopback {
    fn round(&mut self, uploads: &[ClientUpload]) -> Result<Vec<SyncResponse>> {
        let listener = TcpListener::bind("127.0.0.1:0").map_err(net_err)?;
        let addr = listener.local_addr().map_err(net_err)?;
        let cfg = self.config;
        let n = uploads.len();
        let server = std::thread::spawn(move || serve_tcp(&listener, n, &cfg));
        let mut streams = Vec::with_capacity(n);
        for u in uploads {
            let mut s = TcpStream::connect(addr).map_err(net_err)?;
            write_frame(&mut s, &u.to_bytes()?)?;
            streams.push(s);
        }
        let mut replies = Vec::with_capacity(n);
        for s in streams.iter_mut() {
            match read_frame(s) {
                Ok(b) => replies.push(SyncResponse::from_bytes(&b)?),
                Err(_) => break,
            }
        }
        server
            .join()
            .map_err(|_| Error::Protocol("server thread panicked".into()))??;
        Ok(replies)
    }
}
