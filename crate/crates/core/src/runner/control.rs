//! Line-oriented TCP control channel between the client and server hosts.
//!
//! ```text
//! client                      server
//! HELLO rtt-bench/1     ->
//!                       <-    HELLO rtt-bench/1
//! START <id>            ->
//!                       <-    STARTED            (or ERROR <message>)
//! ... measurement ...
//! STOP                  ->
//!                       <-    RESULT <length>
//!                       <-    <length bytes of TOML>
//! ```

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use thiserror::Error;

pub const PROTOCOL: &str = "rtt-bench/1";
/// Upper bound on a RESULT payload.
pub const MAX_RESULT: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Hello(String),
    Start(String),
    Started,
    Stop,
    Result(Vec<u8>),
    Error(String),
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("peer {addr} unreachable: {source}")]
    Unreachable { addr: SocketAddr, source: io::Error },
    #[error("control connection: {0}")]
    Io(#[from] io::Error),
    #[error("control connection closed by peer")]
    Closed,
    #[error("bad control line {0:?}")]
    Malformed(String),
    #[error("expected {expected}, got {got:?}")]
    Unexpected { expected: &'static str, got: Command },
    #[error("peer speaks {0:?}, expected {PROTOCOL:?}")]
    Version(String),
    #[error("peer reported: {0}")]
    Remote(String),
}

fn single_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

pub fn write_command<W: Write>(w: &mut W, cmd: &Command) -> io::Result<()> {
    match cmd {
        Command::Hello(v) => writeln!(w, "HELLO {}", single_line(v))?,
        Command::Start(id) => writeln!(w, "START {}", single_line(id))?,
        Command::Started => writeln!(w, "STARTED")?,
        Command::Stop => writeln!(w, "STOP")?,
        Command::Error(m) => writeln!(w, "ERROR {}", single_line(m))?,
        Command::Result(payload) => {
            writeln!(w, "RESULT {}", payload.len())?;
            w.write_all(payload)?;
        }
    }
    w.flush()
}

pub fn read_command<R: BufRead>(r: &mut R) -> Result<Command, ControlError> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(ControlError::Closed);
    }
    let line = line.trim_end_matches(['\n', '\r']);
    let (word, rest) = line.split_once(' ').unwrap_or((line, ""));
    let cmd = match (word, rest) {
        ("HELLO", v) if !v.is_empty() => Command::Hello(v.to_string()),
        ("START", id) if !id.is_empty() => Command::Start(id.to_string()),
        ("STARTED", "") => Command::Started,
        ("STOP", "") => Command::Stop,
        ("ERROR", m) => Command::Error(m.to_string()),
        ("RESULT", n) => {
            let len: usize = n.parse().map_err(|_| ControlError::Malformed(line.to_string()))?;
            if len > MAX_RESULT {
                return Err(ControlError::Malformed(line.to_string()));
            }
            let mut payload = vec![0u8; len];
            r.read_exact(&mut payload)?;
            Command::Result(payload)
        }
        _ => return Err(ControlError::Malformed(line.to_string())),
    };
    Ok(cmd)
}

/// One end of a control connection.
#[derive(Debug)]
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Self { reader: BufReader::new(stream), writer })
    }

    pub fn send(&mut self, cmd: &Command) -> Result<(), ControlError> {
        Ok(write_command(&mut self.writer, cmd)?)
    }

    pub fn recv(&mut self) -> Result<Command, ControlError> {
        read_command(&mut self.reader)
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.writer.set_read_timeout(t)
    }

    pub fn peer_addr(&self) -> io::Result<SocketAddr> {
        self.writer.peer_addr()
    }
}

/// Client side of the control channel.
#[derive(Debug)]
pub struct ControlClient {
    conn: Connection,
}

impl ControlClient {
    /// Connects and exchanges HELLO.
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, ControlError> {
        let stream =
            TcpStream::connect_timeout(&addr, timeout).map_err(|source| ControlError::Unreachable { addr, source })?;
        let mut conn = Connection::new(stream)?;
        conn.set_read_timeout(Some(timeout))?;
        conn.send(&Command::Hello(PROTOCOL.into()))?;
        match conn.recv()? {
            Command::Hello(v) if v == PROTOCOL => {}
            Command::Hello(v) => return Err(ControlError::Version(v)),
            Command::Error(m) => return Err(ControlError::Remote(m)),
            got => return Err(ControlError::Unexpected { expected: "HELLO", got }),
        }
        Ok(Self { conn })
    }

    /// Asks the server to bring up its half of experiment `id`. `setup`
    /// bounds how long that may take.
    pub fn start(&mut self, id: &str, setup: Duration) -> Result<(), ControlError> {
        self.conn.set_read_timeout(Some(setup))?;
        self.conn.send(&Command::Start(id.into()))?;
        match self.conn.recv()? {
            Command::Started => Ok(()),
            Command::Error(m) => Err(ControlError::Remote(m)),
            got => Err(ControlError::Unexpected { expected: "STARTED", got }),
        }
    }

    /// Ends the experiment and returns the server's result payload.
    pub fn stop(&mut self, teardown: Duration) -> Result<Vec<u8>, ControlError> {
        self.conn.set_read_timeout(Some(teardown))?;
        self.conn.send(&Command::Stop)?;
        match self.conn.recv()? {
            Command::Result(p) => Ok(p),
            Command::Error(m) => Err(ControlError::Remote(m)),
            got => Err(ControlError::Unexpected { expected: "RESULT", got }),
        }
    }
}
