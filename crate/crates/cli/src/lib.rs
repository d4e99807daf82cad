//! Shared pieces of the `teleoplab` command line: exit codes, config
//! loading, endpoint parsing and the IK benchmark.

pub mod bench;

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;
use teleoplab::server::ServerConfig;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    /// A checked outcome did not hold (event mismatch, failed threshold).
    pub const ASSERTION: u8 = 1;
    /// Bad flags, unreadable or invalid config, unusable ports.
    pub const CONFIG: u8 = 2;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Assertion(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Assertion(_) => exit::ASSERTION,
        }
    }
}

impl From<teleoplab_net::NetError> for CliError {
    fn from(e: teleoplab_net::NetError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub fn load_config(path: &Path) -> Result<ServerConfig, CliError> {
    let named = |e: &dyn std::fmt::Display| {
        let msg = e.to_string();
        let shown = path.display().to_string();
        CliError::Config(if msg.contains(&shown) { msg } else { format!("{shown}: {msg}") })
    };
    let cfg = ServerConfig::from_file(path).map_err(|e| named(&e))?;
    cfg.validate().map_err(|e| named(&e))?;
    Ok(cfg)
}

/// `6041`, `:6041` or `host:6041`; a bare port binds on `default_host`.
pub fn endpoint(spec: &str, default_host: &str) -> Result<SocketAddr, CliError> {
    let bad = || CliError::Config(format!("not an address or port: `{spec}`"));
    let port_only = spec.strip_prefix(':').unwrap_or(spec);
    if let Ok(port) = port_only.parse::<u16>() {
        return teleoplab_net::socket_addr(default_host, port).map_err(|_| bad());
    }
    let (host, port) = spec.rsplit_once(':').ok_or_else(bad)?;
    let port = port.parse::<u16>().map_err(|_| bad())?;
    teleoplab_net::socket_addr(host, port).map_err(|_| bad())
}

/// Blocks until SIGINT or SIGTERM, or until `run_for` elapses.
pub fn wait_for_shutdown(run_for: Option<Duration>) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Config(format!("signal runtime: {e}")))?;
    rt.block_on(async {
        let limit = async {
            match run_for {
                Some(d) => tokio::time::sleep(d).await,
                None => std::future::pending().await,
            }
        };
        #[cfg(unix)]
        {
            use tokio::signal::unix::{signal, SignalKind};
            let mut term = signal(SignalKind::terminate()).map_err(|e| CliError::Config(format!("SIGTERM handler: {e}")))?;
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
                _ = limit => {}
            }
        }
        #[cfg(not(unix))]
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = limit => {}
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_forms() {
        let a = endpoint("6041", "127.0.0.1").unwrap();
        assert_eq!(a, "127.0.0.1:6041".parse().unwrap());
        assert_eq!(endpoint(":7", "127.0.0.1").unwrap().port(), 7);
        assert_eq!(endpoint("localhost:9", "0.0.0.0").unwrap(), "127.0.0.1:9".parse().unwrap());
        assert!(endpoint("nope", "127.0.0.1").is_err());
        assert!(endpoint("host:99999", "127.0.0.1").is_err());
    }
}
