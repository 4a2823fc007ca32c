//! On-disk formats shared by every stage: `.npy` image files and
//! line-delimited JSON index files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::class::ClassId;
use crate::error::{Error, Result};
use crate::fingerprint;

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Writes a little-endian `float32` array in NumPy's `.npy` v1.0 layout.
pub fn write_npy(path: &Path, array: &ArrayD<f32>) -> Result<()> {
    let shape = match array.shape() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut buf = Vec::with_capacity(NPY_MAGIC.len() + 4 + header.len() + array.len() * 4);
    buf.extend_from_slice(NPY_MAGIC);
    buf.extend_from_slice(&[1, 0]);
    buf.extend_from_slice(&(header.len() as u16).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for v in array.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, buf).map_err(Error::io(path))
}

pub fn read_npy(path: &Path) -> Result<ArrayD<f32>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(Error::io(path))?;
    let bad = |detail: &str| Error::format(format!("npy file {}", path.display()), detail);
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("missing magic"));
    }
    let (header_len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let header = std::str::from_utf8(bytes.get(start..start + header_len).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not utf-8"))?;
    if !header.contains("'<f4'") {
        return Err(bad("only little-endian float32 is supported"));
    }
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran order is not supported"));
    }
    let open = header.find("'shape': (").ok_or_else(|| bad("no shape"))? + "'shape': (".len();
    let close = open + header[open..].find(')').ok_or_else(|| bad("unterminated shape"))?;
    let shape = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("non-integer dimension")))
        .collect::<Result<Vec<_>>>()?;
    let data = &bytes[start + header_len..];
    let count: usize = shape.iter().product();
    if data.len() != count * 4 {
        return Err(bad(&format!("expected {count} values, found {} bytes", data.len())));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| bad(&e.to_string()))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), e))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::format(path.display().to_string(), e))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(Error::io(path))?))
}

/// One line of a real-dataset index: an image path relative to the index
/// file and its class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRecord {
    pub image_ref: String,
    pub class: ClassId,
}

/// One line of a group metadata file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRecord {
    pub image_ref: String,
    pub group_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image_ref: String,
    pub class: ClassId,
    pub image: Array1<f32>,
}

/// Labeled images held in memory, flattened to vectors. `shape` is the
/// per-image array shape on disk (`[C, H, W]` for images, `[D]` for points).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Vec<usize>,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(shape: Vec<usize>, num_classes: usize, examples: Vec<Example>) -> Result<Self> {
        let dim: usize = shape.iter().product();
        for e in &examples {
            e.class.check(num_classes)?;
            if e.image.len() != dim {
                return Err(Error::invalid(format!(
                    "{} has {} values, expected {dim}",
                    e.image_ref,
                    e.image.len()
                )));
            }
        }
        Ok(Dataset {
            shape,
            num_classes,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.examples.iter().map(|e| e.class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in &self.examples {
            counts[e.class.zero_based()] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            shape: self.shape.clone(),
            num_classes: self.num_classes,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    pub fn index_records(&self) -> Vec<IndexRecord> {
        self.examples
            .iter()
            .map(|e| IndexRecord {
                image_ref: e.image_ref.clone(),
                class: e.class,
            })
            .collect()
    }

    /// Content fingerprint over references, labels and pixel values.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for e in &self.examples {
            bytes.extend_from_slice(e.image_ref.as_bytes());
            bytes.extend_from_slice(&e.class.get().to_le_bytes());
            for v in &e.image {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fingerprint::of_bytes(&bytes)
    }

    /// Loads an index file; image paths resolve against the index's directory.
    /// `num_classes` defaults to the largest class id present.
    pub fn load(index: &Path, num_classes: Option<usize>) -> Result<Self> {
        let records: Vec<IndexRecord> = read_jsonl(index)?;
        if records.is_empty() {
            return Err(Error::invalid(format!("{} lists no images", index.display())));
        }
        let root = index.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut shape: Option<Vec<usize>> = None;
        let mut examples = Vec::with_capacity(records.len());
        for r in records {
            let arr = read_npy(&root.join(&r.image_ref))?;
            match &shape {
                None => shape = Some(arr.shape().to_vec()),
                Some(s) if s.as_slice() != arr.shape() => {
                    return Err(Error::invalid(format!(
                        "{} has shape {:?}, expected {s:?}",
                        r.image_ref,
                        arr.shape()
                    )))
                }
                _ => {}
            }
            examples.push(Example {
                image_ref: r.image_ref,
                class: r.class,
                image: Array1::from_iter(arr.iter().copied()),
            });
        }
        let n = num_classes.unwrap_or_else(|| examples.iter().map(|e| e.class.get() as usize).max().unwrap_or(0));
        Dataset::new(shape.unwrap_or_default(), n, examples)
    }

    /// Writes every image under `dir` and an index named `index_name` there.
    pub fn save(&self, dir: &Path, index_name: &str) -> Result<PathBuf> {
        for e in &self.examples {
            let arr = ArrayD::from_shape_vec(IxDyn(&self.shape), e.image.to_vec())
                .map_err(|err| Error::invalid(err.to_string()))?;
            write_npy(&dir.join(&e.image_ref), &arr)?;
        }
        let index = dir.join(index_name);
        write_jsonl(&index, &self.index_records())?;
        Ok(index)
    }
}
