//! Byte-stream endpoints through which the orchestrator reaches a hosted
//! controller.

use std::io::{self, BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};

use thiserror::Error;

use super::controller::ControllerHost;
use super::frame::{decode_frame, read_frame_bytes, write_frame_bytes, FrameType};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport closed: {0}")]
    TransportClosed(String),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        TransportError::TransportClosed(e.to_string())
    }
}

/// Frame types the controller side answers with exactly one frame.
pub fn expects_reply(kind: FrameType) -> bool {
    matches!(kind, FrameType::TimeSync | FrameType::ReadResp)
}

/// Carries one encoded frame to the controller and returns its reply, if the
/// frame type has one.
pub trait ControllerEndpoint {
    fn exchange(&mut self, bytes: &[u8], kind: FrameType) -> Result<Option<Vec<u8>>, TransportError>;

    /// Controller-side events, for endpoints that can see them.
    fn take_events(&mut self) -> Vec<(u16, String)> {
        Vec::new()
    }
}

/// In-process endpoint: bytes go straight into a [`ControllerHost`].
pub struct LocalEndpoint {
    host: ControllerHost,
}

impl LocalEndpoint {
    pub fn new(host: ControllerHost) -> Self {
        LocalEndpoint { host }
    }
}

impl ControllerEndpoint for LocalEndpoint {
    fn exchange(&mut self, bytes: &[u8], _kind: FrameType) -> Result<Option<Vec<u8>>, TransportError> {
        Ok(self.host.handle(bytes))
    }

    fn take_events(&mut self) -> Vec<(u16, String)> {
        self.host.take_events()
    }
}

/// Endpoint for a controller served in another process.
pub struct TcpEndpoint {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpEndpoint {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpEndpoint { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }
}

impl ControllerEndpoint for TcpEndpoint {
    fn exchange(&mut self, bytes: &[u8], kind: FrameType) -> Result<Option<Vec<u8>>, TransportError> {
        write_frame_bytes(&mut self.writer, bytes)?;
        if expects_reply(kind) {
            Ok(Some(read_frame_bytes(&mut self.reader)?))
        } else {
            Ok(None)
        }
    }
}

/// Serves one connection until the peer closes it. Replies are written only
/// for frame types that expect one, so the stream stays in lock-step.
pub fn serve_connection(host: &mut ControllerHost, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let bytes = match read_frame_bytes(&mut reader) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let wants_reply = decode_frame(&bytes).map(|f| expects_reply(f.kind)).unwrap_or(false);
        let reply = host.handle(&bytes);
        if wants_reply {
            if let Some(r) = reply {
                write_frame_bytes(&mut writer, &r)?;
            }
        }
    }
}
