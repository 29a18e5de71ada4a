use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stqe::pcdata::{read_ply_with, write_ply_to, ReadOptions};
use stqe::PointCloud;

use crate::{ReadArgs, WriteArgs};

/// Sets up the rayon pool and reports whether work may run in parallel.
pub fn configure_threads(threads: Option<usize>) -> Result<bool> {
    match threads {
        Some(0) => Ok(false),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("building the worker pool")?;
            Ok(true)
        }
        None => Ok(true),
    }
}

impl ReadArgs {
    pub fn options(&self) -> ReadOptions {
        ReadOptions { dedup: self.dedup, matrix: self.matrix, bit_depth: None }
    }
}

pub fn read_cloud(path: &Path, read: &ReadArgs) -> Result<PointCloud> {
    read_ply_with(path, &read.options()).with_context(|| format!("reading {}", path.display()))
}

pub fn write_cloud(pc: &PointCloud, path: &Path, write: &WriteArgs, read: &ReadArgs) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_ply_to(pc, &mut w, write.encoding, write.color, read.matrix)
        .and_then(|_| w.flush().map_err(Into::into))
        .with_context(|| format!("writing {}", path.display()))
}

/// `*.ply` files of a directory, sorted by file name.
pub fn list_ply(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no .ply files in {}", dir.display());
    }
    Ok(out)
}

pub fn file_name(path: &Path) -> Result<String> {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .with_context(|| format!("{} has no file name", path.display()))
}

/// Pretty JSON to `path`, or to stdout when `path` is `None`.
pub fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}
