//! Run manifests: the resolved config, loadable as a config to replay the
//! run, followed by comment lines describing the outputs.

use std::path::Path;

use crate::error::Result;
use crate::io::config::RunConfig;
use crate::io::field::write_atomic;

pub const MANIFEST_NAME: &str = "manifest.toml";

/// FNV-1a, 64 bit.
pub fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    /// `(file name, checksum, length)` of every output, in write order.
    pub outputs: Vec<(String, u64, usize)>,
    /// `key: value` summary lines.
    pub summary: Vec<String>,
}

impl Manifest {
    pub fn record(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.push((name.to_owned(), checksum(bytes), bytes.len()));
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }

    pub fn render(&self, cfg: &RunConfig) -> String {
        let mut out = format!("# qflow {}\n", env!("CARGO_PKG_VERSION"));
        out.push_str(&cfg.to_toml());
        out.push('\n');
        for (name, sum, len) in &self.outputs {
            out.push_str(&format!("# output {name} bytes={len} fnv1a64={sum:016x}\n"));
        }
        for line in &self.summary {
            out.push_str(&format!("# {line}\n"));
        }
        out
    }

    pub fn write(&self, cfg: &RunConfig, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_NAME), self.render(cfg).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::parse_config;

    #[test]
    fn checksum_reference_values() {
        assert_eq!(checksum(b""), 0xcbf29ce484222325);
        assert_eq!(checksum(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn manifest_replays_as_config() {
        let cfg = parse_config("mode = \"flow\"\nproblem = \"constant:10\"\n", &[], Path::new("/tmp")).unwrap();
        let mut m = Manifest::default();
        m.record("final.qfld", b"xyz");
        m.note("outcome: reached_t_end");
        let text = m.render(&cfg);
        assert!(text.contains("# output final.qfld bytes=3"));
        let again = parse_config(&text, &[], Path::new("/tmp")).unwrap();
        assert_eq!(again.to_toml(), cfg.to_toml());
    }
}
