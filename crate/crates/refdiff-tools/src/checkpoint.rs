//! Checkpoint container.
//!
//! Layout: `RDCP` magic, `u32` format version, `u32` JSON header length, the
//! header, `u32` tensor count, then per tensor a `u16` name length, the
//! UTF-8 name, a `u8` rank, `u32` dims, and the row-major `f32`
//! little-endian data. The header records the step, schedule, latent spec,
//! charset hash, and the full run config plus init seed, from which the
//! architecture and every frozen component are rebuilt; weight maps are the
//! payload. Tensor names are grouped `base/`, `aux/`, `plugin/a/`,
//! `plugin/b/`, `plugin/ext/`. BTreeMap ordering makes files byte-stable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use refdiff_core::codec::LatentSpec;
use refdiff_core::schedule::ScheduleConfig;
use refdiff_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::dataset::charset_hash;
use crate::error::{Result, ToolError};
use crate::stack::ModelStack;

const MAGIC: &[u8; 4] = b"RDCP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    step: usize,
    seed: u64,
    schedule: ScheduleConfig,
    latent: LatentSpec,
    charset_hash: String,
    config: RunConfig,
}

fn header_for(stack: &ModelStack, kind: &str) -> Header {
    Header {
        kind: kind.to_string(),
        step: stack.step,
        seed: stack.seed,
        schedule: stack.config.schedule_config(),
        latent: stack.config.latent_spec(),
        charset_hash: charset_hash(&stack.charset),
        config: stack.config.clone(),
    }
}

fn plugin_tensors(stack: &ModelStack) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (name, (a, b)) in &stack.plugin.adapter.pairs {
        out.push((format!("plugin/a/{name}"), a));
        out.push((format!("plugin/b/{name}"), b));
    }
    for (name, t) in &stack.plugin.extensions {
        out.push((format!("plugin/ext/{name}"), t));
    }
    out
}

fn encode(header: &Header, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let header_json = serde_json::to_vec(header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(ToolError::Data(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ToolError::Data("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<(Header, BTreeMap<String, Tensor<f32>>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ToolError::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ToolError::Data(format!(
            "checkpoint format version {version}, this build reads {VERSION}"
        )));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ToolError::Data("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(ToolError::Data("trailing bytes after checkpoint payload".into()));
    }
    Ok((header, tensors))
}

/// Split grouped payload names back into the stack's weight maps. Every
/// payload tensor must land on an existing parameter of the same shape and
/// every expected parameter must be present.
fn apply_payload(stack: &mut ModelStack, tensors: BTreeMap<String, Tensor<f32>>, kind: &str) -> Result<()> {
    let mut expected: BTreeMap<String, &mut Tensor<f32>> = BTreeMap::new();
    if kind == "model" {
        for (n, t) in stack.base.iter_mut() {
            expected.insert(format!("base/{n}"), t);
        }
        for (n, t) in stack.aux_params.iter_mut() {
            expected.insert(format!("aux/{n}"), t);
        }
    }
    for (n, (a, b)) in stack.plugin.adapter.pairs.iter_mut() {
        expected.insert(format!("plugin/a/{n}"), a);
        expected.insert(format!("plugin/b/{n}"), b);
    }
    for (n, t) in stack.plugin.extensions.iter_mut() {
        expected.insert(format!("plugin/ext/{n}"), t);
    }
    if tensors.len() != expected.len() {
        return Err(ToolError::Data(format!(
            "checkpoint carries {} tensors, the architecture defines {}",
            tensors.len(),
            expected.len()
        )));
    }
    for (name, tensor) in tensors {
        let slot = expected
            .get_mut(&name)
            .ok_or_else(|| ToolError::Data(format!("unexpected tensor '{name}'")))?;
        if slot.shape() != tensor.shape() {
            return Err(ToolError::Data(format!(
                "tensor '{name}' is {:?}, architecture wants {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        **slot = tensor;
    }
    Ok(())
}

/// Full model checkpoint: base, auxiliary heads, and the plugin.
pub fn save_model(path: &Path, stack: &ModelStack) -> Result<()> {
    let header = header_for(stack, "model");
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (n, t) in &stack.base {
        tensors.push((format!("base/{n}"), t));
    }
    for (n, t) in &stack.aux_params {
        tensors.push((format!("aux/{n}"), t));
    }
    tensors.extend(plugin_tensors(stack));
    fs::write(path, encode(&header, &tensors)?)?;
    Ok(())
}

/// Rebuild the whole stack from a model checkpoint.
pub fn load_model(path: &Path) -> Result<ModelStack> {
    let bytes = fs::read(path)?;
    let (header, tensors) = decode(&bytes)?;
    if header.kind != "model" {
        return Err(ToolError::Data(format!(
            "expected a model checkpoint, found kind '{}'",
            header.kind
        )));
    }
    let mut stack = ModelStack::init(header.config.clone(), header.seed)?;
    verify_header(&header, &stack)?;
    apply_payload(&mut stack, tensors, "model")?;
    stack.step = header.step;
    Ok(stack)
}

/// Plugin-only artifact for shipping one expert adapter.
pub fn save_adapter(path: &Path, stack: &ModelStack) -> Result<()> {
    let header = header_for(stack, "adapter");
    let tensors = plugin_tensors(stack);
    fs::write(path, encode(&header, &tensors)?)?;
    Ok(())
}

/// Load an adapter into an existing stack; geometry and charset must agree.
pub fn load_adapter(path: &Path, stack: &mut ModelStack) -> Result<()> {
    let bytes = fs::read(path)?;
    let (header, tensors) = decode(&bytes)?;
    if header.kind != "adapter" {
        return Err(ToolError::Data(format!(
            "expected an adapter checkpoint, found kind '{}'",
            header.kind
        )));
    }
    verify_header(&header, stack)?;
    apply_payload(stack, tensors, "adapter")?;
    Ok(())
}

fn verify_header(header: &Header, stack: &ModelStack) -> Result<()> {
    let want_hash = charset_hash(&stack.charset);
    if header.charset_hash != want_hash {
        return Err(ToolError::Data(format!(
            "checkpoint charset hash {} does not match the runtime charset {}",
            header.charset_hash, want_hash
        )));
    }
    if header.latent != stack.config.latent_spec() {
        return Err(ToolError::Data("checkpoint latent spec mismatch".into()));
    }
    if header.schedule != stack.config.schedule_config() {
        return Err(ToolError::Data("checkpoint schedule mismatch".into()));
    }
    Ok(())
}
