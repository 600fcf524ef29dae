//! Versioned little-endian binary container for [`MsafParams`].
//!
//! ```text
//! "MSAF" | version: u32 | n_modalities: u32 | channels: u32 × n
//! block_channels: u32 | reduction: u32 | lambda: f64 | dropout_p: f64
//! dropout_enabled: u8 | segments: u32 | descriptor: u8
//! W_Z | b_Z | gamma | beta | running_mean | running_var | (W_i | b_i) × N_B
//! ```
//! Arrays are row-major `f64` with shapes implied by the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{block_counts, DescriptorSum, MsafConfig, MsafParams};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm1d, Linear};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSAF";
pub const VERSION: u32 = 1;

pub fn write_params_to(w: &mut impl Write, params: &MsafParams, config: &MsafConfig) -> Result<()> {
    config.validate()?;
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, params.channels.len() as u32)?;
    for &c in &params.channels {
        put_u32(w, c as u32)?;
    }
    put_u32(w, config.block_channels as u32)?;
    put_u32(w, config.reduction as u32)?;
    w.write_all(&config.lambda.to_le_bytes())?;
    w.write_all(&config.dropout_p.to_le_bytes())?;
    w.write_all(&[u8::from(config.dropout_enabled)])?;
    put_u32(w, config.segments as u32)?;
    let descriptor = match config.descriptor {
        DescriptorSum::PerModality => 0u8,
        DescriptorSum::Cumulative => 1,
    };
    w.write_all(&[descriptor])?;

    put_f64s(w, params.join.weight.data())?;
    put_f64s(w, params.join.bias.data())?;
    put_f64s(w, params.norm.gamma.data())?;
    put_f64s(w, params.norm.beta.data())?;
    put_f64s(w, &params.norm.running_mean)?;
    put_f64s(w, &params.norm.running_var)?;
    for b in &params.blocks {
        put_f64s(w, b.weight.data())?;
        put_f64s(w, b.bias.data())?;
    }
    Ok(())
}

pub fn read_params_from(r: &mut impl Read) -> Result<(MsafParams, MsafConfig)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = get_u32(r)? as usize;
    let channels = (0..n)
        .map(|_| get_u32(r).map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let block_channels = get_u32(r)? as usize;
    let reduction = get_u32(r)? as usize;
    let lambda = get_f64(r)?;
    let dropout_p = get_f64(r)?;
    let dropout_enabled = get_u8(r)? != 0;
    let segments = get_u32(r)? as usize;
    let descriptor = match get_u8(r)? {
        0 => DescriptorSum::PerModality,
        1 => DescriptorSum::Cumulative,
        d => return Err(Error::Format(format!("unknown descriptor mode {d}"))),
    };
    let config = MsafConfig {
        block_channels,
        reduction,
        lambda,
        dropout_p,
        dropout_enabled,
        segments,
        descriptor,
    };
    config.validate()?;
    let c = block_channels;
    let reduced = config.reduced();

    let join = Linear {
        weight: get_tensor(r, &[reduced, c])?,
        bias: get_tensor(r, &[reduced])?,
    };
    let norm = BatchNorm1d {
        gamma: get_tensor(r, &[reduced])?,
        beta: get_tensor(r, &[reduced])?,
        running_mean: get_f64s(r, reduced)?,
        running_var: get_f64s(r, reduced)?,
    };
    let n_blocks: usize = block_counts(&channels, c).iter().sum();
    let blocks = (0..n_blocks)
        .map(|_| {
            Ok(Linear {
                weight: get_tensor(r, &[c, reduced])?,
                bias: get_tensor(r, &[c])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after parameter arrays".into()));
    }
    Ok((
        MsafParams {
            channels,
            join,
            norm,
            blocks,
        },
        config,
    ))
}

pub fn write_params(path: impl AsRef<Path>, params: &MsafParams, config: &MsafConfig) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params_to(&mut w, params, config)?;
    w.flush()?;
    Ok(())
}

pub fn read_params(path: impl AsRef<Path>) -> Result<(MsafParams, MsafConfig)> {
    read_params_from(&mut BufReader::new(File::open(path)?))
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| get_f64(r)).collect()
}

fn get_tensor(r: &mut impl Read, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), get_f64s(r, n)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msaf::init_msaf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout_is_fixed() {
        let cfg = MsafConfig::new(2, 2).with_lambda(0.5);
        let p = init_msaf(&[2, 3], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut buf = Vec::new();
        write_params_to(&mut buf, &p, &cfg).unwrap();
        assert_eq!(&buf[..4], b"MSAF");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(buf[28..36].try_into().unwrap()), 0.5);
        let header = 4 + 4 + 4 + 2 * 4 + 4 + 4 + 8 + 8 + 1 + 4 + 1;
        // 3 blocks of (2·1 + 2), join (1·2 + 1), norm 4 × 1.
        assert_eq!(buf.len(), header + 8 * (3 * 4 + 3 + 4));
    }

    #[test]
    fn round_trip_and_corruption() {
        let cfg = MsafConfig::new(4, 2).with_dropout(0.2).with_segments(3);
        let p = init_msaf(&[5, 8], &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut buf = Vec::new();
        write_params_to(&mut buf, &p, &cfg).unwrap();
        let (q, c) = read_params_from(&mut buf.as_slice()).unwrap();
        assert_eq!((q, c), (p, cfg));

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_params_from(&mut bad.as_slice()).is_err());
        assert!(read_params_from(&mut &buf[..buf.len() - 1]).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_params_from(&mut long.as_slice()).is_err());
    }
}
