use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::time::Duration;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: IpAddr,
    pub port: u16,
    /// Maximum number of queued (not yet running) jobs.
    pub queue_cap: usize,
    /// How long finished jobs and their bundles are kept.
    pub result_ttl: Duration,
    pub results_dir: PathBuf,
    /// Value of the `Retry-After` header sent when the queue is full.
    pub retry_after_secs: u64,
    pub max_upload_bytes: usize,
    /// Static web UI assets served at `/`, if any.
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.port)
    }
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 8080,
            queue_cap: 16,
            result_ttl: Duration::from_secs(24 * 3600),
            results_dir: std::env::temp_dir().join("exedit-results"),
            retry_after_secs: 30,
            max_upload_bytes: 64 << 20,
            static_dir: None,
        }
    }
}
