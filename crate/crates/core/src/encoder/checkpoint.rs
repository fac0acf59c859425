//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "PRCK" | u32 version | str scalar type | str config JSON | u32 n_params
//! per param: str name | u32 ndim | u64 dims[ndim] | f64 data[product(dims)]
//! ```
//! Strings are a u32 byte length followed by UTF-8 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EncoderConfig, EncoderModel, Param};
use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"PRCK";
const VERSION: u32 = 1;
const MAX_ELEMENTS: usize = 1 << 30;

pub fn write_checkpoint<T: Scalar, W: Write>(model: &EncoderModel<T>, out: W) -> Result<W> {
    let mut w = BinWriter::new(out);
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.str(T::type_name())?;
    w.str(&serde_json::to_string(model.config())?)?;
    w.u32(model.params().len() as u32)?;
    for p in model.params() {
        w.str(&p.name)?;
        w.u32(p.tensor.shape().len() as u32)?;
        for d in p.tensor.shape() {
            w.u64(*d as u64)?;
        }
        for v in p.tensor.data() {
            w.f64(v.to_f64_lossy())?;
        }
    }
    w.finish()
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: R) -> Result<EncoderModel<T>> {
    let mut r = BinReader::new(input);
    r.header(MAGIC, VERSION)?;
    let _stored_type = r.str()?;
    let config: EncoderConfig = serde_json::from_str(&r.str()?)?;
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("{} has {} dimensions", name, ndim)));
        }
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|n| *n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Format(format!("{} has implausible shape {:?}", name, shape)))?;
        let data = (0..numel)
            .map(|_| r.f64().map(T::of))
            .collect::<Result<Vec<_>>>()?;
        params.push(Param::new(name, Tensor::new(shape, data)?));
    }
    r.expect_end()?;
    EncoderModel::from_params(config, params)
}

pub fn save_checkpoint<T: Scalar>(model: &EncoderModel<T>, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<EncoderModel<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TokenSequence;

    fn bytes(model: &EncoderModel<f64>) -> Vec<u8> {
        write_checkpoint(model, Vec::new()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = EncoderModel::<f64>::new(EncoderConfig::default(), 9).unwrap();
        let back: EncoderModel<f64> = read_checkpoint(&bytes(&m)[..]).unwrap();
        assert_eq!(back.flat_params(), m.flat_params());
        assert_eq!(back.config(), m.config());
        let seq = TokenSequence::from_content(&[4, 8, 15]);
        assert_eq!(back.embed_query(&seq).unwrap(), m.embed_query(&seq).unwrap());
    }

    #[test]
    fn damaged_files_rejected() {
        let m = EncoderModel::<f64>::new(EncoderConfig::default(), 9).unwrap();
        let good = bytes(&m);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f64, _>(&bad[..]), Err(Error::Format(_))));

        let cut = &good[..good.len() - 3];
        assert!(matches!(read_checkpoint::<f64, _>(cut), Err(Error::Format(_))));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(read_checkpoint::<f64, _>(&long[..]), Err(Error::Format(_))));

        let mut ver = good;
        ver[4] = 9;
        assert!(matches!(read_checkpoint::<f64, _>(&ver[..]), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = EncoderModel::<f64>::new(EncoderConfig::default(), 2).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back: EncoderModel<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back.flat_params(), m.flat_params());
    }
}
