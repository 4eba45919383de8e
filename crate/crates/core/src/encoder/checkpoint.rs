//! Checkpoint layout:
//!
//! ```text
//! sbmt-checkpoint 1
//! config <key>=<value>          one line per ModelConfig field
//! tensor <name> <rows> <cols> <byte offset>
//! payload <byte count>
//! <raw little-endian f32 values, row-major, tensors back to back>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &str = "sbmt-checkpoint 1";

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

pub fn write_checkpoint<W: Write>(model: &EncoderModel, mut w: W) -> Result<()> {
    let mut header = format!("{MAGIC}\n");
    for (k, v) in model.config.to_pairs() {
        header.push_str(&format!("config {k}={v}\n"));
    }
    let mut offset = 0usize;
    for (name, p) in model.param_names().iter().zip(model.params()) {
        header.push_str(&format!("tensor {name} {} {} {offset}\n", p.rows(), p.cols()));
        offset += p.len() * 4;
    }
    header.push_str(&format!("payload {offset}\n"));
    w.write_all(header.as_bytes())?;
    let mut payload = Vec::with_capacity(offset);
    for p in model.params() {
        for &v in p.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<EncoderModel> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        let trimmed = line.trim_end().len();
        line.truncate(trimmed);
        Ok(())
    };
    next_line(&mut r, &mut line)?;
    if line != MAGIC {
        return Err(bad(format!("bad magic line `{line}`")));
    }
    let mut config = ModelConfig::default();
    let mut tensors = Vec::new();
    let payload_len = loop {
        next_line(&mut r, &mut line)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["config", kv] => {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad config line `{line}`")))?;
                config.set(k, v)?;
            }
            ["tensor", name, rows, cols, offset] => {
                let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad tensor line `{line}`")));
                tensors.push((name.to_string(), parse(rows)?, parse(cols)?, parse(offset)?));
            }
            ["payload", len] => break len.parse::<usize>().map_err(|_| bad(format!("bad payload line `{line}`")))?,
            _ => return Err(bad(format!("unrecognised header line `{line}`"))),
        }
    };
    let mut payload = vec![0u8; payload_len];
    r.read_exact(&mut payload).map_err(|e| bad(format!("payload truncated: {e}")))?;

    let mut model = EncoderModel::new(config)?;
    let names = model.param_names();
    if names.len() != tensors.len() {
        return Err(bad(format!("{} tensors for a model with {} parameters", tensors.len(), names.len())));
    }
    for ((name, p), (t_name, rows, cols, offset)) in names.iter().zip(model.params_mut()).zip(&tensors) {
        if name != t_name || p.shape() != (*rows, *cols) {
            return Err(bad(format!("tensor {t_name} {rows}x{cols} does not match {name} {:?}", p.shape())));
        }
        let end = offset + p.len() * 4;
        let bytes = payload.get(*offset..end).ok_or_else(|| bad(format!("tensor {name} runs past the payload")))?;
        for (v, chunk) in p.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderModel> {
    read_checkpoint(File::open(path)?)
}
