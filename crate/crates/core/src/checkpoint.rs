//! Binary model checkpoints and the shared tensor-block format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic  "SPFSL1"
//! config UTF-8 `key=value` lines, terminated by one blank line
//! blocks name_len: u32, name bytes, rank: u32, dims: u32 each, f64 payload
//! ```
//!
//! Floats in the config section are printed with Rust's shortest
//! round-trippable formatting and payloads are raw f64 bits, so a
//! save/load/save cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::prompt::{CiInner, Mechanism, Pooling, ProjectorKind, PromptConfig, PromptModule};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"SPFSL1";

/// Writes one named tensor block.
pub fn write_tensor_block<W: Write>(w: &mut W, name: &str, t: &Tensor, path: &str) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(name.as_bytes()).map_err(io_err)?;
    w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io_err)?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8], path: &str) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::format(path, "truncated tensor block"));
        }
        filled += n;
    }
    Ok(true)
}

/// Reads one named tensor block; `Ok(None)` at clean EOF.
pub fn read_tensor_block<R: Read>(r: &mut R, path: &str) -> Result<Option<(String, Tensor)>> {
    let mut len4 = [0u8; 4];
    if !read_exact_or_eof(r, &mut len4, path)? {
        return Ok(None);
    }
    let name_len = u32::from_le_bytes(len4) as usize;
    if name_len > 4096 {
        return Err(Error::format(path, format!("implausible name length {name_len}")));
    }
    let mut name_bytes = vec![0u8; name_len];
    if !read_exact_or_eof(r, &mut name_bytes, path)? {
        return Err(Error::format(path, "truncated block name"));
    }
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::format(path, "block name is not UTF-8"))?;
    let mut rank4 = [0u8; 4];
    if !read_exact_or_eof(r, &mut rank4, path)? {
        return Err(Error::format(path, "truncated block rank"));
    }
    let rank = u32::from_le_bytes(rank4) as usize;
    if rank > 8 {
        return Err(Error::format(path, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d4 = [0u8; 4];
        if !read_exact_or_eof(r, &mut d4, path)? {
            return Err(Error::format(path, "truncated block dims"));
        }
        shape.push(u32::from_le_bytes(d4) as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut v8 = [0u8; 8];
    for _ in 0..count {
        if !read_exact_or_eof(r, &mut v8, path)? {
            return Err(Error::format(path, "truncated block payload"));
        }
        data.push(f64::from_le_bytes(v8));
    }
    Ok(Some((name, Tensor::new(shape, data)?)))
}

fn write_kv<W: Write>(w: &mut W, key: &str, value: impl std::fmt::Display, path: &str) -> Result<()> {
    w.write_all(format!("{key}={value}\n").as_bytes())
        .map_err(|e| Error::io(path, e))
}

fn model_config_lines(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("image_size".into(), cfg.image_size.to_string()),
        ("channels".into(), cfg.channels.to_string()),
        ("patch_size".into(), cfg.patch_size.to_string()),
        ("depth".into(), cfg.depth.to_string()),
        ("width".into(), cfg.width.to_string()),
        ("heads".into(), cfg.heads.to_string()),
        ("mlp_ratio".into(), cfg.mlp_ratio.to_string()),
        ("activation".into(), cfg.activation.name().to_string()),
        ("ln_eps".into(), format!("{}", cfg.ln_eps)),
        ("scale_exponent".into(), format!("{}", cfg.scale_exponent)),
    ]
}

fn prompt_config_lines(cfg: &PromptConfig) -> Vec<(String, String)> {
    vec![
        ("prompt.inject_layer".into(), cfg.inject_layer.to_string()),
        ("prompt.mechanism".into(), cfg.mechanism.name().to_string()),
        ("prompt.projector".into(), cfg.projector_kind.name().to_string()),
        ("prompt.pooling".into(), cfg.pooling.name().to_string()),
        ("prompt.semantic_dim".into(), cfg.semantic_dim.to_string()),
        ("prompt.ci_inner".into(), cfg.ci_inner.name().to_string()),
    ]
}

/// A trained model on disk: encoder plus optional prompt module.
pub struct Checkpoint {
    pub encoder: Encoder,
    pub prompt: Option<PromptModule>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    encoder: &Encoder,
    prompt: Option<&PromptModule>,
) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    let file = File::create(path.as_ref()).map_err(|e| Error::io(&path_str, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| Error::io(&path_str, e))?;
    for (k, v) in model_config_lines(&encoder.cfg) {
        write_kv(&mut w, &k, v, &path_str)?;
    }
    write_kv(&mut w, "has_prompt", prompt.is_some(), &path_str)?;
    if let Some(pm) = prompt {
        for (k, v) in prompt_config_lines(&pm.cfg) {
            write_kv(&mut w, &k, v, &path_str)?;
        }
    }
    w.write_all(b"\n").map_err(|e| Error::io(&path_str, e))?;
    for p in encoder.parameters() {
        write_tensor_block(&mut w, &p.name, &p.value, &path_str)?;
    }
    if let Some(pm) = prompt {
        for p in pm.parameters() {
            write_tensor_block(&mut w, &p.name, &p.value, &path_str)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path_str, e))
}

fn parse_kv_lines<R: Read>(r: &mut R, path: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut line = Vec::new();
    loop {
        line.clear();
        let mut byte = [0u8; 1];
        loop {
            if !read_exact_or_eof(r, &mut byte, path)? {
                return Err(Error::format(path, "config section not terminated"));
            }
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        if line.is_empty() {
            return Ok(map);
        }
        let text = std::str::from_utf8(&line)
            .map_err(|_| Error::format(path, "config line is not UTF-8"))?;
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad config line {text:?}")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::format(path, format!("duplicate config key {k:?}")));
        }
    }
}

fn get_parse<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    path: &str,
) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::format(path, format!("missing config key {key:?}")))?;
    raw.parse::<T>()
        .map_err(|_| Error::format(path, format!("bad value for {key:?}: {raw:?}")))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path_str = path.as_ref().display().to_string();
    let file = File::open(path.as_ref()).map_err(|e| Error::io(&path_str, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 6];
    if !read_exact_or_eof(&mut r, &mut magic, &path_str)? || &magic != MAGIC {
        return Err(Error::format(&path_str, "bad magic, not a model checkpoint"));
    }
    let map = parse_kv_lines(&mut r, &path_str)?;
    let cfg = ModelConfig {
        image_size: get_parse(&map, "image_size", &path_str)?,
        channels: get_parse(&map, "channels", &path_str)?,
        patch_size: get_parse(&map, "patch_size", &path_str)?,
        depth: get_parse(&map, "depth", &path_str)?,
        width: get_parse(&map, "width", &path_str)?,
        heads: get_parse(&map, "heads", &path_str)?,
        mlp_ratio: get_parse(&map, "mlp_ratio", &path_str)?,
        activation: Activation::parse(&get_parse::<String>(&map, "activation", &path_str)?)?,
        ln_eps: get_parse(&map, "ln_eps", &path_str)?,
        scale_exponent: get_parse(&map, "scale_exponent", &path_str)?,
    };
    let mut encoder = Encoder::zeros(cfg.clone())?;
    let has_prompt: bool = get_parse(&map, "has_prompt", &path_str)?;
    let mut prompt = if has_prompt {
        let pcfg = PromptConfig {
            inject_layer: get_parse(&map, "prompt.inject_layer", &path_str)?,
            mechanism: Mechanism::parse(&get_parse::<String>(&map, "prompt.mechanism", &path_str)?)?,
            projector_kind: ProjectorKind::parse(&get_parse::<String>(
                &map,
                "prompt.projector",
                &path_str,
            )?)?,
            pooling: Pooling::parse(&get_parse::<String>(&map, "prompt.pooling", &path_str)?)?,
            semantic_dim: get_parse(&map, "prompt.semantic_dim", &path_str)?,
            ci_inner: CiInner::parse(&get_parse::<String>(&map, "prompt.ci_inner", &path_str)?)?,
        };
        Some(PromptModule::zeros(pcfg, &cfg)?)
    } else {
        None
    };

    let mut blocks = BTreeMap::new();
    while let Some((name, tensor)) = read_tensor_block(&mut r, &path_str)? {
        if blocks.insert(name.clone(), tensor).is_some() {
            return Err(Error::format(&path_str, format!("duplicate block {name:?}")));
        }
    }
    let mut assign = |p: &mut crate::nn::Parameter| -> Result<()> {
        let t = blocks
            .remove(&p.name)
            .ok_or_else(|| Error::format(&path_str, format!("missing parameter block {:?}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::format(
                &path_str,
                format!(
                    "block {:?} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                ),
            ));
        }
        p.value = t;
        Ok(())
    };
    for p in encoder.parameters_mut() {
        assign(p)?;
    }
    if let Some(pm) = prompt.as_mut() {
        for p in pm.parameters_mut() {
            assign(p)?;
        }
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::format(
            &path_str,
            format!("unexpected parameter block {extra:?}"),
        ));
    }
    Ok(Checkpoint { encoder, prompt })
}
