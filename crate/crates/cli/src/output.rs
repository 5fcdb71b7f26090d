//! CSV files with a `#` metadata header.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::LoadedConfig;
use crate::CliError;

pub fn config_hash(raw: &str) -> String {
    format!("{:x}", Sha256::digest(raw.as_bytes()))
}

/// Header lines shared by every output file. Contains nothing that varies
/// between runs of the same config and seed.
pub fn metadata(cfg: &LoadedConfig, command: &str, seed: u64) -> Vec<String> {
    let c = &cfg.config;
    let i = &c.integrator;
    let m = &c.matching;
    vec![
        format!("embspec {command}"),
        format!("config_sha256: {}", config_hash(&cfg.raw)),
        format!("seed: {seed}"),
        format!(
            "tolerances: rel_tol={:e} abs_tol={:e} max_step={} tol_center={:e} matching_tol={:e} lambda_tol={:e} T={}",
            i.rel_tol, i.abs_tol, i.max_step, c.floquet.tol_center, m.tol, m.lambda_tol, m.t
        ),
        format!(
            "versions: embspec-core {} embspec-tool {}",
            embspec_core::VERSION,
            env!("CARGO_PKG_VERSION")
        ),
    ]
}

/// Writes `rows` as CSV under `dir/name` after `header` comment lines and
/// before `footer` comment lines.
pub fn write_csv<T: Serialize>(
    dir: &Path,
    name: &str,
    header: &[String],
    rows: &[T],
    footer: &[String],
) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path)?);
    for line in header {
        writeln!(w, "# {line}")?;
    }
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        for r in rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
    }
    for line in footer {
        writeln!(w, "# {line}")?;
    }
    w.flush()?;
    Ok(path)
}
