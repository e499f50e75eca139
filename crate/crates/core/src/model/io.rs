//! Little-endian model files:
//!
//! ```text
//! "DHKD" | version u32 = 1 | components u32
//! per component: role u8 (0 backbone, 1 main head, 2 aux head) | layers u32
//!   per layer: in u32 | out u32 | weight f64[in·out] row-major | bias f64[out]
//! ```

use std::path::Path;

use super::mlp::{Activation, Layer, Mlp};
use super::net::DualHeadNet;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"DHKD";
pub const FORMAT_VERSION: u32 = 1;

const ROLE_BACKBONE: u8 = 0;
const ROLE_MAIN: u8 = 1;
const ROLE_AUX: u8 = 2;

pub fn encode_model(net: &DualHeadNet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut parts = vec![(ROLE_BACKBONE, net.backbone()), (ROLE_MAIN, net.main_head())];
    if let Some(aux) = net.aux_head() {
        parts.push((ROLE_AUX, aux));
    }
    out.extend_from_slice(&(parts.len() as u32).to_le_bytes());
    for (role, mlp) in parts {
        out.push(role);
        out.extend_from_slice(&(mlp.layers().len() as u32).to_le_bytes());
        for l in mlp.layers() {
            out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { kind: "model", reason: reason.into() }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| bad(format!("{what} size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_model(buf: &[u8]) -> Result<DualHeadNet> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {magic:02x?}, expected \"DHKD\"")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let count = r.u32("component count")?;
    if !(2..=3).contains(&count) {
        return Err(bad(format!("expected 2 or 3 components, found {count}")));
    }
    let mut slots: [Option<Mlp>; 3] = [None, None, None];
    for _ in 0..count {
        let role = r.u8("role tag")?;
        if role > ROLE_AUX {
            return Err(bad(format!("unknown role tag {role}")));
        }
        if slots[role as usize].is_some() {
            return Err(bad(format!("duplicate component with role {role}")));
        }
        let n_layers = r.u32("layer count")? as usize;
        if n_layers == 0 {
            return Err(bad("component with zero layers"));
        }
        let mut layers = Vec::new();
        for i in 0..n_layers {
            let fan_in = r.u32("layer input dim")? as usize;
            let fan_out = r.u32("layer output dim")? as usize;
            let n = fan_in.checked_mul(fan_out).ok_or_else(|| bad(format!("layer {i} dimensions {fan_in}x{fan_out} overflow")))?;
            let weight = r.f64s(n, "weights")?;
            let bias = r.f64s(fan_out, "bias")?;
            layers.push(Layer { weight: Matrix::from_raw(fan_in, fan_out, weight), bias });
        }
        let act = if role == ROLE_BACKBONE { Activation::Relu } else { Activation::Identity };
        slots[role as usize] = Some(Mlp::new(layers, act).map_err(|e| bad(e.to_string()))?);
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let [backbone, main, aux] = slots;
    let backbone = backbone.ok_or_else(|| bad("missing backbone"))?;
    let main = main.ok_or_else(|| bad("missing main head"))?;
    DualHeadNet::new(backbone, main, aux).map_err(|e| bad(e.to_string()))
}

pub fn save_model(net: &DualHeadNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DualHeadNet> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AuxHead;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = Rng::new(11);
        for aux in [None, Some(AuxHead::Linear), Some(AuxHead::Mlp { hidden: 9 })] {
            let net = DualHeadNet::init(&[5, 7, 4], 3, aux, &mut rng).unwrap();
            let back = decode_model(&encode_model(&net)).unwrap();
            let a: Vec<u64> = net.params_flat().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.params_flat().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(net, back);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dhkd");
        let net = DualHeadNet::init(&[3, 4], 2, None, &mut Rng::new(0)).unwrap();
        save_model(&net, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), net);
        assert!(matches!(load_model(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let net = DualHeadNet::init(&[3, 4], 2, Some(AuxHead::Linear), &mut Rng::new(0)).unwrap();
        let good = encode_model(&net);

        let mut m = good.clone();
        m[0] = b'X';
        assert!(decode_model(&m).unwrap_err().to_string().contains("magic"));

        let mut v = good.clone();
        v[4] = 2;
        assert!(decode_model(&v).unwrap_err().to_string().contains("version"));

        for cut in [3, 10, 20, good.len() - 1] {
            assert!(decode_model(&good[..cut]).unwrap_err().to_string().contains("truncated"));
        }

        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());

        // first layer of the backbone claims 2^32-1 × 2^32-1 weights
        let mut huge = good.clone();
        huge[17..21].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[21..25].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_model(&huge).is_err());
    }
}
