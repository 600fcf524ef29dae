//! Binary container for a whole trained network.
//!
//! ```text
//! "MSNT" | version: u32 | spec JSON: u32 length + UTF-8
//! n_tensors: u32 | (len: u32 | f64 × len) × n_tensors     parameter order
//! n_norms: u32 | (running_mean | running_var) × n_norms   placement order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::msaf::container::{get_f64s, get_u32, put_f64s, put_u32};
use crate::nn::Parameterized;
use crate::zoo::{build_fusion_network, FusionNet, FusionNetSpec};

pub const NET_MAGIC: &[u8; 4] = b"MSNT";
pub const NET_VERSION: u32 = 1;

pub fn write_network_to(w: &mut impl Write, net: &FusionNet) -> Result<()> {
    w.write_all(NET_MAGIC)?;
    put_u32(w, NET_VERSION)?;
    let json = serde_json::to_vec(&net.spec)?;
    put_u32(w, json.len() as u32)?;
    w.write_all(&json)?;
    let params = net.params();
    put_u32(w, params.len() as u32)?;
    for t in params {
        put_u32(w, t.len() as u32)?;
        put_f64s(w, t.data())?;
    }
    let norms: Vec<_> = net.placements.iter().flatten().map(|p| &p.norm).collect();
    put_u32(w, norms.len() as u32)?;
    for n in norms {
        put_f64s(w, &n.running_mean)?;
        put_f64s(w, &n.running_var)?;
    }
    Ok(())
}

pub fn read_network_from(r: &mut impl Read) -> Result<FusionNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NET_MAGIC {
        return Err(Error::Format(format!("bad network magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != NET_VERSION {
        return Err(Error::Format(format!("unsupported network version {version}")));
    }
    let mut json = vec![0u8; get_u32(r)? as usize];
    r.read_exact(&mut json)?;
    let spec: FusionNetSpec = serde_json::from_slice(&json)?;
    // Initial values are overwritten below.
    let mut net = build_fusion_network(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n = get_u32(r)? as usize;
    let expected = net.params().len();
    if n != expected {
        return Err(Error::Format(format!("{n} tensors stored, network has {expected}")));
    }
    for (k, t) in net.params_mut().into_iter().enumerate() {
        let len = get_u32(r)? as usize;
        if len != t.len() {
            return Err(Error::Format(format!(
                "tensor {k}: {len} values stored, expected {}",
                t.len()
            )));
        }
        t.data_mut().copy_from_slice(&get_f64s(r, len)?);
    }
    let norms = get_u32(r)? as usize;
    let expected = net.placements.iter().map(Vec::len).sum::<usize>();
    if norms != expected {
        return Err(Error::Format(format!(
            "{norms} normalization states stored, network has {expected}"
        )));
    }
    for p in net.placements.iter_mut().flatten() {
        let f = p.norm.features();
        p.norm.running_mean = get_f64s(r, f)?;
        p.norm.running_var = get_f64s(r, f)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after network".into()));
    }
    Ok(net)
}

pub fn write_network(path: impl AsRef<Path>, net: &FusionNet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_network_to(&mut w, net)?;
    w.flush()?;
    Ok(())
}

pub fn read_network(path: impl AsRef<Path>) -> Result<FusionNet> {
    read_network_from(&mut BufReader::new(File::open(path)?))
}
