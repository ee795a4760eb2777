//! Multi-identity training corpus: stream triples grouped by identity and
//! source label.
//!
//! On disk a corpus is any directory tree whose leaf directories hold an
//! `identity.json` / `visual.json` / `audio.json` triple. Grouping comes from
//! the labels inside the identity manifest, not from directory names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::streams::StreamTriple;

#[derive(Debug, Clone, PartialEq)]
pub struct SourceEntry {
    pub label: String,
    pub streams: StreamTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEntry {
    pub label: String,
    pub sources: Vec<SourceEntry>,
}

/// Identities sorted by label; sources within an identity sorted by label.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    identities: Vec<IdentityEntry>,
}

impl Corpus {
    pub fn from_triples(triples: impl IntoIterator<Item = StreamTriple>) -> Result<Self> {
        let mut grouped: BTreeMap<String, BTreeMap<String, StreamTriple>> = BTreeMap::new();
        for t in triples {
            let id = t.identity.identity_label.clone();
            let src = t.identity.source_label.clone();
            let by_source = grouped.entry(id.clone()).or_default();
            if by_source.insert(src.clone(), t).is_some() {
                return Err(Error::InsufficientData(format!(
                    "duplicate (identity, source) pair ({id}, {src})"
                )));
            }
        }
        let identities = grouped
            .into_iter()
            .map(|(label, sources)| IdentityEntry {
                label,
                sources: sources
                    .into_iter()
                    .map(|(label, streams)| SourceEntry { label, streams })
                    .collect(),
            })
            .collect();
        Ok(Corpus { identities })
    }

    /// Loads every stream triple found below `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
            ));
        }
        let mut leaves: Vec<PathBuf> = WalkDir::new(dir)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file() && e.file_name() == "identity.json")
            .filter_map(|e| e.path().parent().map(Path::to_path_buf))
            .collect();
        leaves.sort();
        if leaves.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no stream triples found under {}",
                dir.display()
            )));
        }
        let triples = leaves.iter().map(StreamTriple::load).collect::<Result<Vec<_>>>()?;
        Self::from_triples(triples)
    }

    /// Writes `<dir>/<identity>/<source>/{identity,visual,audio}.{json,f32}`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for id in &self.identities {
            for src in &id.sources {
                src.streams.save(dir.join(&id.label).join(&src.label))?;
            }
        }
        Ok(())
    }

    pub fn identities(&self) -> &[IdentityEntry] {
        &self.identities
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn num_triples(&self) -> usize {
        self.identities.iter().map(|i| i.sources.len()).sum()
    }

    /// Feature width of each modality, checked to be uniform across the corpus.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let first = &self
            .identities
            .first()
            .ok_or_else(|| Error::InsufficientData("empty corpus".into()))?
            .sources[0]
            .streams;
        let dims = (first.identity.dim, first.visual.dim, first.audio.dim);
        for id in &self.identities {
            for s in &id.sources {
                let t = &s.streams;
                if (t.identity.dim, t.visual.dim, t.audio.dim) != dims {
                    return Err(Error::Shape(format!(
                        "stream ({}, {}) has feature widths {:?}, expected {dims:?}",
                        id.label,
                        s.label,
                        (t.identity.dim, t.visual.dim, t.audio.dim)
                    )));
                }
            }
        }
        Ok(dims)
    }
}
