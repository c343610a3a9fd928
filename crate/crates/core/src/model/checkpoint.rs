//! Checkpoint files: a text manifest followed by raw little-endian payloads.
//!
//! ```text
//! NCKPT 1
//! config layers=4 lower_layers=3 ...
//! trainable all
//! tensor <name> f64 <d0>x<d1> <byte offset>
//! ...
//! end
//! <payload bytes>
//! ```
//!
//! Offsets are relative to the first payload byte. Values are stored as
//! IEEE-754 doubles, so a save/load round trip is bit-exact.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ModelParams;
use super::{Model, ModelConfig, Trainable};
use crate::error::{Error, Result};

const MAGIC: &str = "NCKPT 1";

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

pub fn write<W: Write>(model: &Model, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "config {}", model.config.to_inline())?;
    writeln!(out, "trainable {}", model.trainable.as_str())?;
    let tensors = model.params.tensors();
    let mut offset = 0usize;
    for t in &tensors {
        let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        writeln!(out, "tensor {} f64 {} {}", t.name, shape, offset)?;
        offset += t.data.len() * 8;
    }
    writeln!(out, "end")?;
    for t in &tensors {
        for x in t.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write(model, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

pub fn read<R: Read>(input: R) -> Result<Model> {
    let mut input = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |input: &mut BufReader<R>| -> Result<String> {
        line.clear();
        let read = input.read_line(&mut line).map_err(|e| corrupt(e.to_string()))?;
        if read == 0 {
            return Err(corrupt("unexpected end of manifest"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut input)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let config_line = next_line(&mut input)?;
    let config = ModelConfig::from_inline(
        config_line
            .strip_prefix("config ")
            .ok_or_else(|| corrupt("missing config line"))?,
    )?;
    let trainable = match next_line(&mut input)?.as_str() {
        "trainable all" => Trainable::All,
        "trainable adaptation" => Trainable::AdaptationOnly,
        other => return Err(corrupt(format!("bad trainable line {other:?}"))),
    };
    let mut entries: HashMap<String, Entry> = HashMap::new();
    loop {
        let l = next_line(&mut input)?;
        if l == "end" {
            break;
        }
        let parts: Vec<&str> = l.split(' ').collect();
        let [tag, name, dtype, shape, offset] = parts[..] else {
            return Err(corrupt(format!("bad manifest line {l:?}")));
        };
        if tag != "tensor" || dtype != "f64" {
            return Err(corrupt(format!("bad manifest line {l:?}")));
        }
        let shape = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| corrupt(format!("bad shape in {l:?}")))?;
        let offset = offset.parse().map_err(|_| corrupt(format!("bad offset in {l:?}")))?;
        entries.insert(name.to_string(), Entry { shape, offset });
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload).map_err(|e| corrupt(e.to_string()))?;

    let with_cache = entries.contains_key("projection");
    let mut params = ModelParams::init(&config, with_cache);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (j, layer) in params.layers.iter_mut().enumerate() {
        let has_lora = entries.contains_key(&format!("layers.{j}.ffn.lora_in.down"));
        if has_lora {
            layer.ffn.attach_lora(&mut rng, config.lora_rank, config.lora_alpha);
        }
    }
    let mut seen = 0;
    for t in params.tensors_mut() {
        let entry = entries
            .get(&t.name)
            .ok_or_else(|| corrupt(format!("missing tensor {}", t.name)))?;
        if entry.shape != t.shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor {}: checkpoint shape {:?}, model shape {:?}",
                t.name, entry.shape, t.shape
            )));
        }
        let bytes = payload
            .get(entry.offset..entry.offset + t.data.len() * 8)
            .ok_or_else(|| corrupt(format!("payload truncated in {}", t.name)))?;
        for (x, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        seen += 1;
    }
    if seen != entries.len() {
        return Err(corrupt(format!(
            "{} tensors in manifest, model expects {seen}",
            entries.len()
        )));
    }
    Ok(Model {
        config,
        params,
        trainable,
    })
}

pub fn load(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read(file)
}
