//! Endpoints and byte-stream connections.
//!
//! Endpoint syntax: `unix:PATH`, `tcp:HOST:PORT`, `exec:PROGRAM ARGS...` (spawn a
//! child and talk over its stdin/stdout) and, for servers only, `stdio`.

use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::time::Duration;

#[cfg(unix)]
use std::os::unix::net::UnixStream;

use super::ProtocolError;

/// Per-read timeout on socket connections.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Unix(PathBuf),
    Tcp(String),
    Exec(Vec<String>),
    Stdio,
}

impl FromStr for Endpoint {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| ProtocolError::BadEndpoint(format!("{s:?}: {why}"));
        if s == "stdio" {
            return Ok(Endpoint::Stdio);
        }
        let (scheme, rest) = s.split_once(':').ok_or_else(|| bad("expected SCHEME:ADDRESS"))?;
        match scheme {
            "unix" if !rest.is_empty() => Ok(Endpoint::Unix(PathBuf::from(rest))),
            "tcp" => {
                let (host, port) = rest.rsplit_once(':').ok_or_else(|| bad("expected tcp:HOST:PORT"))?;
                if host.is_empty() || port.parse::<u16>().is_err() {
                    return Err(bad("expected tcp:HOST:PORT"));
                }
                Ok(Endpoint::Tcp(rest.to_string()))
            }
            "exec" => {
                let argv: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
                if argv.is_empty() {
                    return Err(bad("missing program"));
                }
                Ok(Endpoint::Exec(argv))
            }
            _ => Err(bad("unknown scheme or empty address")),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Unix(p) => write!(f, "unix:{}", p.display()),
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
            Endpoint::Exec(argv) => write!(f, "exec:{}", argv.join(" ")),
            Endpoint::Stdio => f.write_str("stdio"),
        }
    }
}

/// A bidirectional, buffered byte stream to a server.
pub struct Connection {
    pub(crate) reader: Box<dyn Read + Send>,
    pub(crate) writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Connection {
    pub fn open(endpoint: &Endpoint) -> Result<Self, ProtocolError> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let s = TcpStream::connect(addr)?;
                s.set_nodelay(true)?;
                s.set_read_timeout(Some(DEFAULT_TIMEOUT))?;
                let r = s.try_clone()?;
                Ok(Self::from_parts(r, s))
            }
            #[cfg(unix)]
            Endpoint::Unix(path) => {
                let s = UnixStream::connect(path)?;
                s.set_read_timeout(Some(DEFAULT_TIMEOUT))?;
                let r = s.try_clone()?;
                Ok(Self::from_parts(r, s))
            }
            #[cfg(not(unix))]
            Endpoint::Unix(_) => Err(ProtocolError::BadEndpoint("unix sockets are unsupported here".into())),
            Endpoint::Exec(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let mut conn = Self::from_parts(stdout, stdin);
                conn.child = Some(child);
                Ok(conn)
            }
            Endpoint::Stdio => Err(ProtocolError::BadEndpoint("stdio is a server-side endpoint".into())),
        }
    }

    pub fn from_parts<R, W>(reader: R, writer: W) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self {
            reader: Box::new(BufReader::new(reader)),
            writer: Box::new(BufWriter::new(writer)),
            child: None,
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // Closing stdin ends a well-behaved server's loop.
            self.writer = Box::new(io::sink());
            if child.wait().is_err() {
                let _ = child.kill();
            }
        }
    }
}
