//! Layer manifests: one entry per line.
//!
//! ```text
//! # name      source
//! layer q     weights/q.arbt        # weights from a tensor container
//! shape mlp   256 512 [repeat]      # seeded synthetic weights of this shape
//! fp16 embed  32000 4096 [repeat]   # kept at 16 bits, accounting only
//! ```
//!
//! Paths are relative to the manifest's directory. A repeat count expands
//! an entry into `name.0`, `name.1`, ...

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::format::{read_header, ContainerHeader};
use crate::partition::{LayerKind, LayerShape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntrySource {
    File(PathBuf),
    Synthetic { rows: usize, cols: usize },
    Dense16 { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub source: EntrySource,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        line,
        message: message.into(),
    }
}

fn dim(line: usize, v: &str) -> Result<usize> {
    match v.parse::<usize>() {
        Ok(d) if d > 0 => Ok(d),
        _ => Err(bad(line, format!("invalid dimension `{v}`"))),
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let (source, name, repeat) = match fields[..] {
            ["layer", name, path] => (EntrySource::File(base.join(path)), name, 1),
            ["shape" | "fp16", name, rows, cols, ref rest @ ..] if rest.len() <= 1 => {
                let (rows, cols) = (dim(line, rows)?, dim(line, cols)?);
                let repeat = rest.first().map_or(Ok(1), |r| dim(line, r))?;
                let source = if fields[0] == "shape" {
                    EntrySource::Synthetic { rows, cols }
                } else {
                    EntrySource::Dense16 { rows, cols }
                };
                (source, name, repeat)
            }
            _ => return Err(bad(line, format!("cannot parse `{content}`"))),
        };
        for r in 0..repeat {
            let name = if repeat == 1 { name.to_string() } else { format!("{name}.{r}") };
            if entries.iter().any(|e| e.name == name) {
                return Err(bad(line, format!("duplicate layer name `{name}`")));
            }
            entries.push(ManifestEntry {
                name,
                source: source.clone(),
            });
        }
    }
    Ok(Manifest { entries })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

impl Manifest {
    /// Entries that are quantized (everything except 16-bit tensors).
    pub fn quantized(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| !matches!(e.source, EntrySource::Dense16 { .. }))
    }

    /// Shapes for the storage ledger; file entries are sized from their headers.
    pub fn shapes(&self) -> Result<Vec<LayerShape>> {
        self.entries
            .iter()
            .map(|e| {
                let (rows, cols, kind) = match &e.source {
                    EntrySource::Synthetic { rows, cols } => (*rows, *cols, LayerKind::Binarized),
                    EntrySource::Dense16 { rows, cols } => (*rows, *cols, LayerKind::Dense16),
                    EntrySource::File(path) => {
                        let bytes = std::fs::read(path).map_err(|err| Error::io(path, err))?;
                        match read_header(&bytes)? {
                            ContainerHeader::Tensor(t) if t.dims.len() == 2 => {
                                (t.dims[0], t.dims[1], LayerKind::Binarized)
                            }
                            _ => return Err(Error::BadRank(3)),
                        }
                    }
                };
                Ok(LayerShape {
                    name: e.name.clone(),
                    rows,
                    cols,
                    kind,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_entry_kinds() {
        let m = parse_manifest("layer a w/a.arbt\nshape b 4 8 2 # two\n\nfp16 e 10 4\n", Path::new("/m")).unwrap();
        let names: Vec<_> = m.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a", "b.0", "b.1", "e"]);
        assert_eq!(m.entries[0].source, EntrySource::File(PathBuf::from("/m/w/a.arbt")));
        assert_eq!(m.quantized().count(), 3);
        assert_eq!(m.entries[3].source, EntrySource::Dense16 { rows: 10, cols: 4 });
    }

    #[test]
    fn rejects_bad_lines() {
        for text in ["shape b 4", "shape b 0 3", "tensor x y", "shape a 1 1\nshape a 2 2"] {
            assert!(matches!(parse_manifest(text, Path::new(".")), Err(Error::Manifest { .. })), "{text}");
        }
    }
}
