//! Single-file tensor archive shared by checkpoints and extractor weights.
//!
//! A tar file holding named text members (configuration, run state), a
//! `manifest.json` describing every tensor and one `tensors.bin` with the raw
//! little-endian `f64` values back to back.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";
const DTYPE: &str = "f64le";

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
}

/// In-memory archive contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub texts: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn text(&self, member: &str) -> Result<&str> {
        self.texts
            .get(member)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("archive has no `{member}` member")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("archive has no tensor `{name}`")))
    }

    /// Tensors whose name starts with `prefix`, with the prefix removed.
    pub fn tensors_under<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.tensors
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v)))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape(),
                dtype: DTYPE.into(),
                offset: blob.len() as u64,
            });
            blob.extend_from_slice(&t.to_le_bytes());
        }
        let mut builder = tar::Builder::new(BufWriter::new(File::create(path)?));
        let mut add = |name: &str, bytes: &[u8]| -> Result<()> {
            let mut header = tar::Header::new_gnu();
            header.set_size(bytes.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder.append_data(&mut header, name, bytes)?;
            Ok(())
        };
        for (name, text) in &self.texts {
            add(name, text.as_bytes())?;
        }
        add(MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
        add(TENSORS, &blob)?;
        builder
            .into_inner()?
            .into_inner()
            .map_err(|e| e.into_error())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut tar = tar::Archive::new(BufReader::new(File::open(path)?));
        let mut members: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for entry in tar.entries()? {
            let mut entry = entry?;
            let name = entry.path()?.to_string_lossy().into_owned();
            let mut bytes = Vec::new();
            entry.read_to_end(&mut bytes)?;
            members.insert(name, bytes);
        }
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(
            &members
                .remove(MANIFEST)
                .ok_or_else(|| Error::Format("archive has no manifest".into()))?,
        )?;
        let blob = members
            .remove(TENSORS)
            .ok_or_else(|| Error::Format("archive has no tensor data".into()))?;
        let mut tensors = BTreeMap::new();
        for e in manifest {
            if e.dtype != DTYPE {
                return Err(Error::Format(format!(
                    "tensor `{}` has dtype {}",
                    e.name, e.dtype
                )));
            }
            let start = e.offset as usize;
            let end = start + e.shape.iter().product::<usize>() * 8;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the data", e.name)))?;
            tensors.insert(e.name, Tensor::from_le_bytes(e.shape, bytes)?);
        }
        let texts = members
            .into_iter()
            .map(|(k, v)| {
                String::from_utf8(v)
                    .map(|s| (k.clone(), s))
                    .map_err(|_| Error::Format(format!("member `{k}` is not UTF-8")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { texts, tensors })
    }
}
