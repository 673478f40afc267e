use std::io::{self, Read, Write};

use super::Partition;
use crate::error::{Error, Result};

/// Encoded output of a compression operator.
///
/// The in-memory payload keeps full `f64` precision; [`encoded_bytes`]
/// is the wire cost model with 32-bit reals.
///
/// [`encoded_bytes`]: CompressedMessage::encoded_bytes
#[derive(Debug, Clone, PartialEq)]
pub enum CompressedMessage {
    Dense {
        values: Vec<f64>,
    },
    Sparse {
        dim: usize,
        indices: Vec<usize>,
        values: Vec<f64>,
    },
    /// Coordinate `k` decodes to `norm · sign_k · level_k / 2^bits`.
    Dithered {
        bits: u32,
        norm: f64,
        signs: Vec<i8>,
        levels: Vec<u32>,
    },
    /// Coordinate `k` in group `m` decodes to `norms[m] / |I_m| · sign_k`.
    GroupSigns {
        partition: Partition,
        norms: Vec<f64>,
        signs: Vec<i8>,
    },
}

const TAG_DENSE: u8 = 0;
const TAG_SPARSE: u8 = 1;
const TAG_DITHERED: u8 = 2;
const TAG_GROUP_SIGNS: u8 = 3;

impl CompressedMessage {
    pub fn dim(&self) -> usize {
        match self {
            CompressedMessage::Dense { values } => values.len(),
            CompressedMessage::Sparse { dim, .. } => *dim,
            CompressedMessage::Dithered { signs, .. } => signs.len(),
            CompressedMessage::GroupSigns { partition, .. } => partition.dim(),
        }
    }

    /// Wire size in bytes. One 4-byte header word per message, 4-byte reals
    /// and indices, dithered coordinates packed at `bits + 2` bits (ternary
    /// sign plus level in `0..=2^bits`), group signs at 2 bits.
    pub fn encoded_bytes(&self) -> usize {
        let d = self.dim();
        match self {
            CompressedMessage::Dense { .. } => 4 + 4 * d,
            CompressedMessage::Sparse { indices, .. } => 4 + 8 * indices.len(),
            CompressedMessage::Dithered { bits, .. } => 4 + (d * (*bits as usize + 2)).div_ceil(8),
            CompressedMessage::GroupSigns { norms, .. } => 4 + 4 * norms.len() + (2 * d).div_ceil(8),
        }
    }

    /// Structural checks required before decoding.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::MalformedMessage(msg));
        match self {
            CompressedMessage::Dense { .. } => Ok(()),
            CompressedMessage::Sparse {
                dim,
                indices,
                values,
            } => {
                if indices.len() != values.len() {
                    return bad(format!(
                        "{} indices but {} values",
                        indices.len(),
                        values.len()
                    ));
                }
                for w in indices.windows(2) {
                    if w[0] >= w[1] {
                        return bad(format!("indices not strictly increasing at {}", w[1]));
                    }
                }
                if let Some(&last) = indices.last() {
                    if last >= *dim {
                        return bad(format!("index {last} out of range for d = {dim}"));
                    }
                }
                Ok(())
            }
            CompressedMessage::Dithered {
                bits,
                norm,
                signs,
                levels,
            } => {
                if *bits == 0 || *bits > super::MAX_DITHER_BITS {
                    return bad(format!("unsupported bit depth {bits}"));
                }
                if signs.len() != levels.len() {
                    return bad("sign and level lengths differ".into());
                }
                if !(norm.is_finite() && *norm >= 0.0) {
                    return bad(format!("norm {norm} is not a finite nonnegative value"));
                }
                let top = 1u32 << bits;
                if let Some(k) = levels.iter().position(|&l| l > top) {
                    return bad(format!("level {} at {k} exceeds 2^{bits}", levels[k]));
                }
                if signs.iter().any(|s| !(-1..=1).contains(s)) {
                    return bad("sign outside {-1,0,1}".into());
                }
                if *norm == 0.0 && (signs.iter().any(|&s| s != 0) || levels.iter().any(|&l| l != 0)) {
                    return bad("zero norm with nonzero payload".into());
                }
                Ok(())
            }
            CompressedMessage::GroupSigns {
                partition,
                norms,
                signs,
            } => {
                if norms.len() != partition.groups().len() {
                    return bad(format!(
                        "{} norms for {} groups",
                        norms.len(),
                        partition.groups().len()
                    ));
                }
                if signs.len() != partition.dim() {
                    return bad("sign vector length differs from partition".into());
                }
                if norms.iter().any(|n| n.is_nan() || *n < 0.0) {
                    return bad("negative group norm".into());
                }
                if signs.iter().any(|s| !(-1..=1).contains(s)) {
                    return bad("sign outside {-1,0,1}".into());
                }
                Ok(())
            }
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        self.check()?;
        Ok(match self {
            CompressedMessage::Dense { values } => values.clone(),
            CompressedMessage::Sparse {
                dim,
                indices,
                values,
            } => {
                let mut out = vec![0.0; *dim];
                for (&k, &v) in indices.iter().zip(values) {
                    out[k] = v;
                }
                out
            }
            CompressedMessage::Dithered {
                bits,
                norm,
                signs,
                levels,
            } => {
                let steps = (1u64 << bits) as f64;
                signs
                    .iter()
                    .zip(levels)
                    .map(|(&s, &l)| norm * f64::from(s) * f64::from(l) / steps)
                    .collect()
            }
            CompressedMessage::GroupSigns {
                partition,
                norms,
                signs,
            } => {
                let mut out = vec![0.0; partition.dim()];
                for (g, &n) in partition.groups().iter().zip(norms) {
                    let mag = n / g.len() as f64;
                    for &k in g {
                        out[k] = mag * f64::from(signs[k]);
                    }
                }
                out
            }
        })
    }

    pub(super) fn scale_magnitudes(&mut self, factor: f64) {
        match self {
            CompressedMessage::Dense { values } | CompressedMessage::Sparse { values, .. } => {
                for v in values {
                    *v *= factor;
                }
            }
            CompressedMessage::Dithered { norm, .. } => *norm *= factor,
            CompressedMessage::GroupSigns { norms, .. } => {
                for n in norms {
                    *n *= factor;
                }
            }
        }
    }

    /// Exact little-endian dump: tag byte, then fields in declaration order.
    /// Counts and indices are `u64`, reals `f64`, signs `i8`, levels `u32`,
    /// bit depth `u8`. A group partition is written as its group count
    /// followed by each group's length and indices.
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let u64w = |w: &mut dyn Write, v: usize| w.write_all(&(v as u64).to_le_bytes());
        match self {
            CompressedMessage::Dense { values } => {
                w.write_all(&[TAG_DENSE])?;
                u64w(w, values.len())?;
                for v in values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            CompressedMessage::Sparse {
                dim,
                indices,
                values,
            } => {
                w.write_all(&[TAG_SPARSE])?;
                u64w(w, *dim)?;
                u64w(w, indices.len())?;
                for &k in indices {
                    u64w(w, k)?;
                }
                for v in values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            CompressedMessage::Dithered {
                bits,
                norm,
                signs,
                levels,
            } => {
                w.write_all(&[TAG_DITHERED])?;
                u64w(w, signs.len())?;
                w.write_all(&[*bits as u8])?;
                w.write_all(&norm.to_le_bytes())?;
                for &s in signs {
                    w.write_all(&s.to_le_bytes())?;
                }
                for &l in levels {
                    w.write_all(&l.to_le_bytes())?;
                }
            }
            CompressedMessage::GroupSigns {
                partition,
                norms,
                signs,
            } => {
                w.write_all(&[TAG_GROUP_SIGNS])?;
                u64w(w, partition.dim())?;
                u64w(w, partition.groups().len())?;
                for g in partition.groups() {
                    u64w(w, g.len())?;
                    for &k in g {
                        u64w(w, k)?;
                    }
                }
                for n in norms {
                    w.write_all(&n.to_le_bytes())?;
                }
                for &s in signs {
                    w.write_all(&s.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut rd = Reader { r };
        let msg = match rd.u8()? {
            TAG_DENSE => {
                let d = rd.len()?;
                CompressedMessage::Dense {
                    values: rd.f64s(d)?,
                }
            }
            TAG_SPARSE => {
                let dim = rd.len()?;
                let k = rd.len()?;
                let indices = (0..k).map(|_| rd.len()).collect::<Result<_>>()?;
                CompressedMessage::Sparse {
                    dim,
                    indices,
                    values: rd.f64s(k)?,
                }
            }
            TAG_DITHERED => {
                let d = rd.len()?;
                let bits = u32::from(rd.u8()?);
                let norm = rd.f64()?;
                let signs = (0..d).map(|_| rd.u8().map(|b| b as i8)).collect::<Result<_>>()?;
                let levels = (0..d)
                    .map(|_| rd.bytes::<4>().map(u32::from_le_bytes))
                    .collect::<Result<_>>()?;
                CompressedMessage::Dithered {
                    bits,
                    norm,
                    signs,
                    levels,
                }
            }
            TAG_GROUP_SIGNS => {
                let d = rd.len()?;
                let m = rd.len()?;
                let mut groups = Vec::with_capacity(m.min(d));
                for _ in 0..m {
                    let len = rd.len()?;
                    groups.push((0..len).map(|_| rd.len()).collect::<Result<Vec<_>>>()?);
                }
                let partition = Partition::new(groups)
                    .map_err(|e| Error::MalformedMessage(format!("bad partition: {e}")))?;
                if partition.dim() != d {
                    return Err(Error::MalformedMessage("partition size differs from d".into()));
                }
                let norms = rd.f64s(m)?;
                let signs = (0..d).map(|_| rd.u8().map(|b| b as i8)).collect::<Result<_>>()?;
                CompressedMessage::GroupSigns {
                    partition,
                    norms,
                    signs,
                }
            }
            tag => return Err(Error::MalformedMessage(format!("unknown variant tag {tag}"))),
        };
        msg.check()?;
        Ok(msg)
    }
}

struct Reader<'a, R: Read> {
    r: &'a mut R,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| Error::MalformedMessage(format!("truncated message: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.bytes::<8>()?);
        usize::try_from(v).map_err(|_| Error::MalformedMessage(format!("length {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_examples() {
        let dense = CompressedMessage::Dense {
            values: vec![1.5, -0.25],
        };
        assert_eq!(dense.decode().unwrap(), vec![1.5, -0.25]);

        let sparse = CompressedMessage::Sparse {
            dim: 4,
            indices: vec![1, 3],
            values: vec![2.0, 2.0],
        };
        assert_eq!(sparse.decode().unwrap(), vec![0.0, 2.0, 0.0, 2.0]);

        let dithered = CompressedMessage::Dithered {
            bits: 1,
            norm: 5.0,
            signs: vec![1, 1],
            levels: vec![1, 2],
        };
        assert_eq!(dithered.decode().unwrap(), vec![2.5, 5.0]);
    }

    #[test]
    fn malformed_messages_are_rejected() {
        let dup = CompressedMessage::Sparse {
            dim: 4,
            indices: vec![1, 1],
            values: vec![1.0, 1.0],
        };
        assert!(matches!(dup.decode(), Err(Error::MalformedMessage(_))));
        let out_of_range = CompressedMessage::Sparse {
            dim: 2,
            indices: vec![2],
            values: vec![1.0],
        };
        assert!(out_of_range.decode().is_err());
        let level = CompressedMessage::Dithered {
            bits: 1,
            norm: 1.0,
            signs: vec![1],
            levels: vec![3],
        };
        assert!(matches!(level.decode(), Err(Error::MalformedMessage(_))));
        let zero_norm = CompressedMessage::Dithered {
            bits: 1,
            norm: 0.0,
            signs: vec![1],
            levels: vec![1],
        };
        assert!(zero_norm.decode().is_err());
    }

    #[test]
    fn byte_accounting() {
        let dense = CompressedMessage::Dense {
            values: vec![0.0; 1000],
        };
        assert_eq!(dense.encoded_bytes(), 4004);
        let sparse = CompressedMessage::Sparse {
            dim: 5000,
            indices: (0..100).collect(),
            values: vec![1.0; 100],
        };
        assert_eq!(sparse.encoded_bytes(), 804);
        let dithered = CompressedMessage::Dithered {
            bits: 2,
            norm: 0.0,
            signs: vec![0; 784],
            levels: vec![0; 784],
        };
        // 784 coordinates at 4 bits each
        assert_eq!(dithered.encoded_bytes(), 4 + 392);
        let groups = CompressedMessage::GroupSigns {
            partition: Partition::contiguous(10, 3).unwrap(),
            norms: vec![0.0; 3],
            signs: vec![0; 10],
        };
        assert_eq!(groups.encoded_bytes(), 4 + 12 + 3);
    }

    #[test]
    fn truncated_dump_is_malformed() {
        let msg = CompressedMessage::Dense {
            values: vec![1.0, 2.0],
        };
        let mut buf = Vec::new();
        msg.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            CompressedMessage::read_from(&mut buf.as_slice()),
            Err(Error::MalformedMessage(_))
        ));
    }
}
