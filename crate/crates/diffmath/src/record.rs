//! Flat little-endian network records.
//!
//! Layout: magic, activation code (u8), norm flag (u8), attention tokens and
//! blocks (u32, zero when disabled), input dim, hidden count, hidden dims,
//! output dim (all u32), parameter count (u64), then every parameter as f32.

use std::io::{Read, Write};

use crate::network::{Activation, AttentionSpec, Network, NetworkSpec};
use crate::tensor::Tensor;
use crate::DiffError;

pub const MAGIC: &[u8; 7] = b"GWMNET1";

fn u32_of(v: usize) -> Result<u32, DiffError> {
    u32::try_from(v).map_err(|_| DiffError::Record(format!("dimension {v} too large")))
}

pub fn write_network(net: &Network, out: &mut impl Write) -> Result<(), DiffError> {
    let spec = net.spec();
    out.write_all(MAGIC)?;
    out.write_all(&[spec.activation.code(), u8::from(spec.norm)])?;
    let (tokens, blocks) = spec.attention.map_or((0, 0), |a| (a.tokens, a.blocks));
    let mut header = vec![tokens, blocks, spec.input_dim, spec.hidden_dims.len()];
    header.extend(&spec.hidden_dims);
    header.push(spec.output_dim);
    for h in header {
        out.write_all(&u32_of(h)?.to_le_bytes())?;
    }
    out.write_all(&(net.param_count() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(net.param_count() * 4);
    for v in net.flat_params() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<usize, DiffError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn read_network(input: &mut impl Read) -> Result<Network, DiffError> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiffError::Record("bad magic".into()));
    }
    let mut flags = [0u8; 2];
    input.read_exact(&mut flags)?;
    let activation = Activation::from_code(flags[0])
        .ok_or_else(|| DiffError::Record(format!("unknown activation code {}", flags[0])))?;
    let norm = match flags[1] {
        0 => false,
        1 => true,
        other => return Err(DiffError::Record(format!("bad norm flag {other}"))),
    };
    let tokens = read_u32(input)?;
    let blocks = read_u32(input)?;
    let input_dim = read_u32(input)?;
    let hidden = read_u32(input)?;
    if hidden > 64 {
        return Err(DiffError::Record(format!("implausible hidden layer count {hidden}")));
    }
    let hidden_dims = (0..hidden).map(|_| read_u32(input)).collect::<Result<Vec<_>, _>>()?;
    let output_dim = read_u32(input)?;
    let attention = (tokens > 0 || blocks > 0).then_some(AttentionSpec { tokens, blocks });
    let spec = NetworkSpec { input_dim, hidden_dims, output_dim, activation, attention, norm };
    spec.validate()?;
    let mut count = [0u8; 8];
    input.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    if count != spec.param_count() {
        return Err(DiffError::Record(format!(
            "header declares {count} parameters, layout needs {}",
            spec.param_count()
        )));
    }
    let mut raw = vec![0u8; count * 4];
    input.read_exact(&mut raw)?;
    let mut values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let params = spec
        .param_shapes()
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Network::from_params(spec, params)
}
