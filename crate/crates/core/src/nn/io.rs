//! Binary weight container.
//!
//! ```text
//! magic        8 bytes  "IVIMNETW"
//! version      u32 LE
//! config_len   u32 LE, followed by the NetworkConfig as UTF-8 JSON
//! n_layers     u32 LE, followed by (outputs u32, inputs u32) per layer
//! n_params     u64 LE, followed by n_params f64 LE
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{IvimError, Result};
use crate::nn::network::{NetworkConfig, NetworkWeights};

const MAGIC: &[u8; 8] = b"IVIMNETW";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

pub fn write_weights<W: Write>(weights: &NetworkWeights, mut out: W) -> std::io::Result<()> {
    let config = serde_json::to_vec(weights.config()).expect("config serializes");
    out.write_all(MAGIC)?;
    out.write_all(&WEIGHTS_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(&config)?;
    let shapes = weights.config().layer_shapes();
    out.write_all(&(shapes.len() as u32).to_le_bytes())?;
    for (n_in, n_out) in shapes {
        out.write_all(&(n_out as u32).to_le_bytes())?;
        out.write_all(&(n_in as u32).to_le_bytes())?;
    }
    out.write_all(&(weights.params().len() as u64).to_le_bytes())?;
    for p in weights.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_weights(weights: &NetworkWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_weights(weights, &mut buf).map_err(|e| IvimError::io(path, e))?;
    fs::write(path, buf).map_err(|e| IvimError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            IvimError::Format("weight file truncated".into())
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_weights<R: Read>(mut input: R) -> Result<NetworkWeights> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| IvimError::Format(format!("cannot read weights: {e}")))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(IvimError::Format("not an IVIM weight file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != WEIGHTS_FORMAT_VERSION {
        return Err(IvimError::Format(format!(
            "unsupported weight file version {version}, expected {WEIGHTS_FORMAT_VERSION}"
        )));
    }
    let config_len = c.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(c.take(config_len)?)
        .map_err(|e| IvimError::Format(format!("bad config block: {e}")))?;
    config
        .validate()
        .map_err(|e| IvimError::Format(format!("invalid config block: {e}")))?;

    let n_layers = c.u32()? as usize;
    let expected = config.layer_shapes();
    let mut stored = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let n_out = c.u32()? as usize;
        let n_in = c.u32()? as usize;
        stored.push((n_in, n_out));
    }
    if stored != expected {
        return Err(IvimError::Shape(format!(
            "stored layer shapes {stored:?} do not match config {expected:?}"
        )));
    }
    let n_params = c.u64()? as usize;
    if n_params != config.parameter_count() {
        return Err(IvimError::Shape(format!(
            "payload holds {n_params} weights, config needs {}",
            config.parameter_count()
        )));
    }
    let payload = c.take(n_params.checked_mul(8).ok_or_else(|| IvimError::Format("payload too large".into()))?)?;
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if c.pos != bytes.len() {
        return Err(IvimError::Format("trailing bytes after weight payload".into()));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(IvimError::Format("non-finite weight in payload".into()));
    }
    NetworkWeights::from_parts(config, params)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| IvimError::io(path, e))?;
    read_weights(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, predict_samples};

    fn sample() -> NetworkWeights {
        init_network(&NetworkConfig::for_input(6), 42).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let w = sample();
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();
        let back = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back, w);
        let x = [1.0, 0.93, 0.85, 0.7, 0.55, 0.41];
        let a = predict_samples(&w, &x).unwrap();
        let b = predict_samples(&back, &x).unwrap();
        assert_eq!(a.params.d.to_bits(), b.params.d.to_bits());
        assert_eq!(a.params.f.to_bits(), b.params.f.to_bits());
        assert_eq!(a.params.d_star.to_bits(), b.params.d_star.to_bits());
    }

    #[test]
    fn corrupt_header_is_format_error() {
        let mut buf = Vec::new();
        write_weights(&sample(), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_weights(buf.as_slice()), Err(IvimError::Format(_))));

        let mut buf = Vec::new();
        write_weights(&sample(), &mut buf).unwrap();
        buf[8] = 9;
        assert!(matches!(read_weights(buf.as_slice()), Err(IvimError::Format(_))));

        let mut buf = Vec::new();
        write_weights(&sample(), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_weights(buf.as_slice()), Err(IvimError::Format(_))));
    }

    #[test]
    fn altered_config_is_shape_error() {
        let mut buf = Vec::new();
        write_weights(&sample(), &mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf).into_owned();
        let needle = "\"hidden_width\":6";
        assert!(text.contains(needle));
        let pos = buf.windows(needle.len()).position(|w| w == needle.as_bytes()).unwrap();
        buf[pos + needle.len() - 1] = b'7';
        assert!(matches!(read_weights(buf.as_slice()), Err(IvimError::Shape(_))));
    }
}
