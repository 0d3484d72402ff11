//! Self-describing checkpoint files: a text header followed by raw
//! little-endian tensor data.
//!
//! ```text
//! avseg-checkpoint 1
//! dtype f32
//! config_hash 3f0c...
//! config in=8;w=16;...
//! iteration 1500
//! rng <seed hex> <stream> <word position>
//! param enc1.b0.conv1.w conv_weight 16x16x3x3 <byte offset>
//! ...
//! velocity enc1.b0.conv1.w <byte offset>
//! ...
//! data <byte count>
//! <parameter values, then velocities, at the listed offsets>
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::optim::OptimState;
use super::trainer::TrainState;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, ParamKind, ParameterSet};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "avseg-checkpoint";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

/// Serializes the full training state. The file is written to a temporary
/// sibling and renamed into place.
pub fn save_checkpoint<T: Real>(state: &TrainState<T>, cfg: &NetworkConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut head = String::new();
    head += &format!("{MAGIC} {FORMAT_VERSION}\n");
    head += &format!("dtype {}\n", T::DTYPE);
    head += &format!("config_hash {}\n", cfg.hash());
    head += &format!("config {}\n", cfg.fingerprint());
    head += &format!("iteration {}\n", state.iteration);
    head += &format!(
        "rng {} {} {}\n",
        hex(&state.rng.get_seed()),
        state.rng.get_stream(),
        state.rng.get_word_pos()
    );
    let mut data: Vec<u8> = Vec::new();
    for p in state.params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        head += &format!("param {} {} {} {}\n", p.name, p.kind.tag(), dims.join("x"), data.len());
        data.extend(p.value.data().iter().flat_map(|v| v.to_le_bytes_vec()));
    }
    for (p, v) in state.params.iter().zip(&state.optim.velocity) {
        if !v.is_empty() {
            head += &format!("velocity {} {}\n", p.name, data.len());
            data.extend(v.iter().flat_map(|x| x.to_le_bytes_vec()));
        }
    }
    head += &format!("data {}\n", data.len());
    let mut bytes = head.into_bytes();
    bytes.extend_from_slice(&data);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parsed checkpoint; `config` is the network configuration it was made with.
pub struct Checkpoint<T> {
    pub config: NetworkConfig,
    pub state: TrainState<T>,
}

fn read_values<T: Real>(data: &[u8], at: &mut usize, n: usize, width: usize, f64_src: bool) -> Result<Vec<T>> {
    let end = *at + n * width;
    let chunk = data.get(*at..end).ok_or_else(|| Error::Checkpoint("truncated tensor data".into()))?;
    *at = end;
    Ok(chunk
        .chunks_exact(width)
        .map(|c| if f64_src { T::lit(f64::from_le_slice(c)) } else { T::lit(f32::from_le_slice(c) as f64) })
        .collect())
}

/// Reads a checkpoint, converting values to `T` if the stored dtype differs.
/// When `expect` is given its hash must match the stored one.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, expect: Option<&NetworkConfig>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));

    let mut pos = 0;
    let mut lines = Vec::new();
    let data_len = loop {
        let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing data section"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not UTF-8"))?;
        pos += nl + 1;
        if let Some(n) = line.strip_prefix("data ") {
            break n.parse::<usize>().map_err(|_| bad("bad data length"))?;
        }
        lines.push(line.to_string());
    };
    let data = &bytes[pos..];
    if data.len() != data_len {
        return Err(bad("data section length mismatch"));
    }

    let mut it = lines.iter();
    let mut field = |key: &str| -> Result<String> {
        let l = it.next().ok_or_else(|| bad(&format!("missing {key}")))?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("expected {key}, found {l:?}")))
    };
    if field(MAGIC)? != FORMAT_VERSION.to_string() {
        return Err(bad("unsupported format version"));
    }
    let dtype = field("dtype")?;
    let (width, f64_src) = match dtype.as_str() {
        "f32" => (4, false),
        "f64" => (8, true),
        _ => return Err(bad("unknown dtype")),
    };
    let hash = field("config_hash")?;
    let config = NetworkConfig::from_fingerprint(&field("config")?)?;
    if config.hash() != hash {
        return Err(bad("config hash does not match stored config"));
    }
    if let Some(cfg) = expect {
        if cfg.hash() != hash {
            return Err(Error::ConfigMismatch { checkpoint: hash, runtime: cfg.hash() });
        }
    }
    let iteration: usize = field("iteration")?.parse().map_err(|_| bad("bad iteration"))?;
    let rng_line = field("rng")?;
    let rng_parts: Vec<&str> = rng_line.split(' ').collect();
    let rng = match rng_parts.as_slice() {
        [seed, stream, word] => {
            let seed: [u8; 32] = unhex(seed).and_then(|v| v.try_into().ok()).ok_or_else(|| bad("bad rng seed"))?;
            let mut r = ChaCha8Rng::from_seed(seed);
            r.set_stream(stream.parse().map_err(|_| bad("bad rng stream"))?);
            r.set_word_pos(word.parse().map_err(|_| bad("bad rng position"))?);
            r
        }
        _ => return Err(bad("bad rng line")),
    };

    let rest: Vec<&String> = it.collect();
    let mut params = ParameterSet::<T>::new();
    let mut at = 0;
    let mut velocity_names = Vec::new();
    let check_offset = |off: &str, at: usize| -> Result<()> {
        if off.parse::<usize>().ok() != Some(at) {
            return Err(bad("tensor offset does not match directory order"));
        }
        Ok(())
    };
    for line in rest {
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["param", name, kind, dims, off] => {
                check_offset(off, at)?;
                let kind = ParamKind::from_tag(kind).ok_or_else(|| bad("unknown parameter kind"))?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad("bad shape")))
                    .collect::<Result<_>>()?;
                let n = shape.iter().product();
                let values = read_values(data, &mut at, n, width, f64_src)?;
                params.insert(*name, kind, Tensor::new(shape, values)?)?;
            }
            ["velocity", name, off] => velocity_names.push((name.to_string(), off.to_string())),
            _ => return Err(bad(&format!("unexpected header line {line:?}"))),
        }
    }
    let mut optim = OptimState::new(&params);
    for (name, off) in velocity_names {
        check_offset(&off, at)?;
        let i = params.position(&name).ok_or_else(|| bad("velocity for unknown parameter"))?;
        if optim.velocity[i].is_empty() {
            return Err(bad("velocity for non-trainable parameter"));
        }
        let n = optim.velocity[i].len();
        optim.velocity[i] = read_values(data, &mut at, n, width, f64_src)?;
    }
    if at != data.len() {
        return Err(bad("trailing tensor data"));
    }
    Ok(Checkpoint { config, state: TrainState { params, optim, rng, iteration } })
}
