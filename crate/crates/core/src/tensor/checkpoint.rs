//! Checkpoint container.
//!
//! Layout: a UTF-8 manifest followed by raw little-endian `f32` payloads in
//! manifest order.
//!
//! ```text
//! mpt-checkpoint v1 <count>\n
//! <name> f32 <d0>x<d1>x...\n      (count lines)
//! <payload bytes>
//! ```

use std::io::{BufRead, BufReader, Read, Write};

use super::Tensor;
use crate::Error;

const MAGIC: &str = "mpt-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensor: Tensor,
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[CheckpointEntry]) -> Result<(), Error> {
    let mut manifest = format!("{MAGIC} {}\n", entries.len());
    for e in entries {
        if e.name.is_empty() || e.name.chars().any(char::is_whitespace) {
            return Err(Error::Format(format!("invalid tensor name {:?}", e.name)));
        }
        let dims: Vec<String> = e.tensor.shape().iter().map(ToString::to_string).collect();
        manifest.push_str(&format!("{} f32 {}\n", e.name, dims.join("x")));
    }
    w.write_all(manifest.as_bytes())?;
    let mut payload = Vec::new();
    for e in entries {
        for &v in e.tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<CheckpointEntry>, Error> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let count: usize = line
        .trim_end_matches('\n')
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::Format("missing checkpoint header".into()))?;
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated manifest".into()));
        }
        let fields: Vec<&str> = line.trim_end_matches('\n').split(' ').collect();
        let [name, dtype, dims] = fields[..] else {
            return Err(Error::Format(format!("malformed manifest line {line:?}")));
        };
        if dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {dtype}")));
        }
        let shape = dims
            .split('x')
            .map(str::parse)
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|_| Error::Format(format!("bad shape {dims:?}")))?;
        specs.push((name.to_string(), shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        reader
            .read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated payload for {name}")))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        entries.push(CheckpointEntry { name, tensor });
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(entries)
}
