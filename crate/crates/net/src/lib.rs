//! Processes of the teleoperation cell: the host server, the arm simulator
//! node, the tester emulator node and a scripted operator client.

pub mod device_node;
pub mod operator;
pub mod server;
pub mod sim_node;

use std::net::SocketAddr;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("cannot bind {what} on {addr}: {source}")]
    Bind {
        what: &'static str,
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Setup(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

pub(crate) fn bind_tcp(what: &'static str, addr: SocketAddr) -> Result<std::net::TcpListener, NetError> {
    let l = std::net::TcpListener::bind(addr).map_err(|source| NetError::Bind { what, addr, source })?;
    l.set_nonblocking(true)?;
    Ok(l)
}

pub(crate) fn bind_udp(what: &'static str, addr: SocketAddr) -> Result<std::net::UdpSocket, NetError> {
    std::net::UdpSocket::bind(addr).map_err(|source| NetError::Bind { what, addr, source })
}

/// `host:port` to a socket address; `localhost` maps to 127.0.0.1.
pub fn socket_addr(host: &str, port: u16) -> Result<SocketAddr, NetError> {
    use std::net::ToSocketAddrs;
    (host, port)
        .to_socket_addrs()?
        .find(|a| a.is_ipv4())
        .ok_or_else(|| NetError::Setup(format!("cannot resolve {host}")))
}
