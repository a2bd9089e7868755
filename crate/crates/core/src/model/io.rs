// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight file format.
//!
//! A file is a UTF-8 manifest followed by a binary blob:
//!
//! ```text
//! GIMWEIGHTS
//! format_version 1
//! vocab_size 64
//! d_model 32
//! n_heads 4
//! d_head 8
//! n_layers 2
//! d_mlp 64
//! max_seq_len 64
//! eps_ln 0.00001
//! tensors 22
//! tensor tok_embed 64 32
//! ...
//! end
//! <little-endian f64 values of every tensor, concatenated in manifest order>
//! ```
//!
//! Floats in the manifest use Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{GimError, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::Weights;
use crate::tensor::Tensor;

pub const MAGIC: &str = "GIMWEIGHTS";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end";

/// Serializes weights into the on-disk byte layout.
pub fn encode_weights(weights: &Weights) -> Vec<u8> {
    let c = &weights.config;
    let named = weights.named_tensors();
    let mut text = format!(
        "{MAGIC}\nformat_version {FORMAT_VERSION}\nvocab_size {}\nd_model {}\nn_heads {}\nd_head {}\nn_layers {}\nd_mlp {}\nmax_seq_len {}\neps_ln {}\ntensors {}\n",
        c.vocab_size, c.d_model, c.n_heads, c.d_head, c.n_layers, c.d_mlp, c.max_seq_len, c.eps_ln,
        named.len()
    );
    for (name, t) in &named {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        text.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
    }
    text.push_str(END);
    text.push('\n');
    let mut bytes = text.into_bytes();
    for (_, t) in &named {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save_weights(weights: &Weights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(weights))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Weights> {
    decode_weights(&fs::read(path)?)
}

struct Manifest<'a> {
    lines: std::str::Lines<'a>,
}

impl<'a> Manifest<'a> {
    fn next_line(&mut self) -> Result<&'a str> {
        self.lines
            .next()
            .ok_or_else(|| GimError::format("<manifest>", "unexpected end of manifest"))
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.next_line()?;
        let value = line
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| {
                GimError::format(
                    "<manifest>",
                    format!("expected `{key} <value>`, got `{line}`"),
                )
            })?;
        value
            .parse()
            .map_err(|_| GimError::format("<manifest>", format!("bad value for {key}: `{value}`")))
    }
}

/// Parses the byte layout written by [`encode_weights`].
pub fn decode_weights(bytes: &[u8]) -> Result<Weights> {
    let header_end = find_header_end(bytes)?;
    let text = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| GimError::format("<manifest>", "manifest is not valid UTF-8"))?;
    let mut m = Manifest {
        lines: text.lines(),
    };
    if m.next_line()? != MAGIC {
        return Err(GimError::format(
            "<manifest>",
            "bad magic; not a weight file",
        ));
    }
    let version: u32 = m.field("format_version")?;
    if version != FORMAT_VERSION {
        return Err(GimError::format(
            "<manifest>",
            format!("unsupported format_version {version}"),
        ));
    }
    let config = ModelConfig {
        vocab_size: m.field("vocab_size")?,
        d_model: m.field("d_model")?,
        n_heads: m.field("n_heads")?,
        d_head: m.field("d_head")?,
        n_layers: m.field("n_layers")?,
        d_mlp: m.field("d_mlp")?,
        max_seq_len: m.field("max_seq_len")?,
        eps_ln: m.field("eps_ln")?,
    };
    config
        .validate()
        .map_err(|e| GimError::format("<manifest>", e.to_string()))?;
    let count: usize = m.field("tensors")?;
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let line = m.next_line()?;
        let mut parts = line.split(' ');
        if parts.next() != Some("tensor") {
            return Err(GimError::format(
                "<manifest>",
                format!("expected tensor line, got `{line}`"),
            ));
        }
        let name = parts
            .next()
            .ok_or_else(|| GimError::format("<manifest>", "tensor line without a name"))?
            .to_owned();
        let shape = parts
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| GimError::format(name.clone(), "bad dimension"))?;
        specs.push((name, shape));
    }
    if m.next_line()? != END {
        return Err(GimError::format(
            "<manifest>",
            "missing `end` after tensor list",
        ));
    }

    let mut blob = &bytes[header_end..];
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in specs {
        let numel: usize = shape.iter().product();
        let need = numel * 8;
        if blob.len() < need {
            return Err(GimError::format(
                name,
                format!("truncated blob: need {need} bytes, {} left", blob.len()),
            ));
        }
        let data = blob[..need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        blob = &blob[need..];
        let t =
            Tensor::new(shape, data).map_err(|e| GimError::format(name.clone(), e.to_string()))?;
        tensors.push((name, t));
    }
    if !blob.is_empty() {
        return Err(GimError::format(
            "<blob>",
            format!("{} trailing bytes after the last tensor", blob.len()),
        ));
    }
    Weights::from_named(config, tensors)
}

/// Byte offset just past the `end\n` manifest line.
fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let marker = b"\nend\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
        .ok_or_else(|| GimError::format("<manifest>", "no manifest terminator found"))
}
