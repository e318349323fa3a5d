//! Numeric formatting, manifests, and small file helpers.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use bfmm::Result;

/// Format with 6 significant digits; scientific notation outside a sane
/// fixed-point range.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..=14).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Flat key=value manifest recording the command, seed, flags, and input
/// hashes so a run is reproducible from this file alone.
pub fn write_manifest(dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        writeln!(text, "{k}={v}").expect("string write");
    }
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}
