//! Minimal NPY reader/writer for little-endian float32/float64/complex64/
//! complex128 arrays in C order, 1 to 3 dimensions.
//!
//! Files are written as format version 1.0 with the header padded so the data
//! starts on a 64-byte boundary. Versions 2.0 and 3.0 are accepted on read.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use num_complex::{Complex32, Complex64};
use thiserror::Error;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("not an NPY file (bad magic)")]
    BadMagic,
    #[error("unsupported NPY version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("fortran order unsupported")]
    FortranOrder,
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("unsupported shape {0:?}")]
    UnsupportedShape(Vec<usize>),
    #[error("truncated NPY data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed NPY header: {0}")]
    BadHeader(String),
    #[error("expected a {expected} array, found {found}")]
    WrongKind { expected: &'static str, found: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    C64,
    C128,
}

impl DType {
    fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::F64 => "<f8",
            DType::C64 => "<c8",
            DType::C128 => "<c16",
        }
    }

    fn from_descr(d: &str) -> Result<Self, NpyError> {
        match d {
            "<f4" => Ok(DType::F32),
            "<f8" => Ok(DType::F64),
            "<c8" => Ok(DType::C64),
            "<c16" => Ok(DType::C128),
            other => Err(NpyError::UnsupportedDtype(other.to_string())),
        }
    }

    fn item_size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::C64 => 8,
            DType::C128 => 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NpyArray {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    C64(ArrayD<Complex32>),
    C128(ArrayD<Complex64>),
}

impl NpyArray {
    pub fn dtype(&self) -> DType {
        match self {
            NpyArray::F32(_) => DType::F32,
            NpyArray::F64(_) => DType::F64,
            NpyArray::C64(_) => DType::C64,
            NpyArray::C128(_) => DType::C128,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            NpyArray::F32(a) => a.shape(),
            NpyArray::F64(a) => a.shape(),
            NpyArray::C64(a) => a.shape(),
            NpyArray::C128(a) => a.shape(),
        }
    }

    fn kind(&self) -> String {
        format!("{:?} {:?}", self.dtype(), self.shape())
    }

    /// Real array widened to f64. Complex arrays are rejected.
    pub fn to_real(&self) -> Result<ArrayD<f64>, NpyError> {
        match self {
            NpyArray::F32(a) => Ok(a.mapv(f64::from)),
            NpyArray::F64(a) => Ok(a.clone()),
            _ => Err(NpyError::WrongKind {
                expected: "real",
                found: self.kind(),
            }),
        }
    }

    /// Complex array widened to complex128; real arrays get a zero imaginary part.
    pub fn to_complex(&self) -> ArrayD<Complex64> {
        match self {
            NpyArray::F32(a) => a.mapv(|v| Complex64::new(v.into(), 0.0)),
            NpyArray::F64(a) => a.mapv(|v| Complex64::new(v, 0.0)),
            NpyArray::C64(a) => a.mapv(|v| Complex64::new(v.re.into(), v.im.into())),
            NpyArray::C128(a) => a.clone(),
        }
    }

    pub fn to_real2(&self) -> Result<Array2<f64>, NpyError> {
        self.to_real()?.into_dimensionality().map_err(|_| NpyError::WrongKind {
            expected: "2D real",
            found: self.kind(),
        })
    }

    pub fn to_real3(&self) -> Result<Array3<f64>, NpyError> {
        let a = self.to_real()?;
        let a = if a.ndim() == 2 {
            let (h, w) = (a.shape()[0], a.shape()[1]);
            a.into_shape_with_order(IxDyn(&[1, h, w])).expect("same size")
        } else {
            a
        };
        a.into_dimensionality().map_err(|_| NpyError::WrongKind {
            expected: "3D real",
            found: self.kind(),
        })
    }

    /// 3D complex stack; a 2D array becomes a stack of one.
    pub fn to_complex3(&self) -> Result<Array3<Complex64>, NpyError> {
        let a = self.to_complex();
        let a = if a.ndim() == 2 {
            let (h, w) = (a.shape()[0], a.shape()[1]);
            a.into_shape_with_order(IxDyn(&[1, h, w])).expect("same size")
        } else {
            a
        };
        a.into_dimensionality().map_err(|_| NpyError::WrongKind {
            expected: "3D complex",
            found: self.kind(),
        })
    }
}

fn header_dict(dtype: DType, shape: &[usize]) -> String {
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_str
    )
}

pub fn to_bytes(array: &NpyArray) -> Vec<u8> {
    let dict = header_dict(array.dtype(), array.shape());
    // magic(6) + version(2) + header length(2) + dict + padding + '\n'
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let header_len = dict.len() + pad + 1;
    let n: usize = array.shape().iter().product();
    let mut out = Vec::with_capacity(10 + header_len + n * array.dtype().item_size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    match array {
        NpyArray::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        NpyArray::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        NpyArray::C64(a) => a.iter().for_each(|v| {
            out.extend_from_slice(&v.re.to_le_bytes());
            out.extend_from_slice(&v.im.to_le_bytes());
        }),
        NpyArray::C128(a) => a.iter().for_each(|v| {
            out.extend_from_slice(&v.re.to_le_bytes());
            out.extend_from_slice(&v.im.to_le_bytes());
        }),
    }
    out
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn parse_header(text: &str) -> Result<Header, NpyError> {
    let bad = |m: &str| NpyError::BadHeader(m.to_string());
    let body = text.trim().trim_start_matches('{').trim_end_matches('}');
    let value_of = |key: &str| -> Result<&str, NpyError> {
        let pat = format!("'{key}':");
        let start = body.find(&pat).ok_or_else(|| bad(&format!("missing key {key}")))? + pat.len();
        Ok(body[start..].trim_start())
    };
    let descr_v = value_of("descr")?;
    let descr = descr_v
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| bad("descr is not a string"))?
        .to_string();
    let fo = value_of("fortran_order")?;
    let fortran_order = if fo.starts_with("True") {
        true
    } else if fo.starts_with("False") {
        false
    } else {
        return Err(bad("fortran_order is not a bool"));
    };
    let sv = value_of("shape")?;
    let inner = sv
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("shape is not a tuple"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("shape entry is not an integer")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Header {
        descr,
        fortran_order,
        shape,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<NpyArray, NpyError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(NpyError::Truncated {
                    expected: 12,
                    actual: bytes.len(),
                });
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        _ => return Err(NpyError::UnsupportedVersion(major, minor)),
    };
    let data_start = header_start + header_len;
    if bytes.len() < data_start {
        return Err(NpyError::Truncated {
            expected: data_start,
            actual: bytes.len(),
        });
    }
    let text = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|_| NpyError::BadHeader("header is not UTF-8".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(NpyError::FortranOrder);
    }
    let dtype = DType::from_descr(&header.descr)?;
    if header.shape.is_empty() || header.shape.len() > 3 {
        return Err(NpyError::UnsupportedShape(header.shape));
    }
    let n: usize = header.shape.iter().product();
    let expected = n * dtype.item_size();
    let data = &bytes[data_start..];
    if data.len() < expected {
        return Err(NpyError::Truncated {
            expected: data_start + expected,
            actual: bytes.len(),
        });
    }
    let shape = IxDyn(&header.shape);
    let chunks = |size: usize| data[..expected].chunks_exact(size);
    let built = match dtype {
        DType::F32 => NpyArray::F32(
            ArrayD::from_shape_vec(
                shape,
                chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            )
            .expect("size checked"),
        ),
        DType::F64 => NpyArray::F64(
            ArrayD::from_shape_vec(
                shape,
                chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            )
            .expect("size checked"),
        ),
        DType::C64 => NpyArray::C64(
            ArrayD::from_shape_vec(
                shape,
                chunks(8)
                    .map(|c| {
                        Complex32::new(
                            f32::from_le_bytes(c[..4].try_into().unwrap()),
                            f32::from_le_bytes(c[4..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            )
            .expect("size checked"),
        ),
        DType::C128 => NpyArray::C128(
            ArrayD::from_shape_vec(
                shape,
                chunks(16)
                    .map(|c| {
                        Complex64::new(
                            f64::from_le_bytes(c[..8].try_into().unwrap()),
                            f64::from_le_bytes(c[8..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            )
            .expect("size checked"),
        ),
    };
    Ok(built)
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<NpyArray, NpyError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| NpyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers never observe a partial file.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> std::io::Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_npy(path: impl AsRef<Path>, array: &NpyArray) -> Result<(), NpyError> {
    let path = path.as_ref();
    atomic_write(path, &to_bytes(array)).map_err(|source| NpyError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_real2_f32(path: impl AsRef<Path>, image: &Array2<f64>) -> Result<(), NpyError> {
    write_npy(path, &NpyArray::F32(image.mapv(|v| v as f32).into_dyn()))
}

pub fn write_real3_f32(path: impl AsRef<Path>, stack: &Array3<f64>) -> Result<(), NpyError> {
    write_npy(path, &NpyArray::F32(stack.mapv(|v| v as f32).into_dyn()))
}

pub fn write_complex3_c64(path: impl AsRef<Path>, stack: &Array3<Complex64>) -> Result<(), NpyError> {
    write_npy(
        path,
        &NpyArray::C64(stack.mapv(|v| Complex32::new(v.re as f32, v.im as f32)).into_dyn()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_for_3x4_f32() {
        let a = NpyArray::F32(ArrayD::zeros(IxDyn(&[3, 4])));
        let bytes = to_bytes(&a);
        assert_eq!(&bytes[..6], MAGIC);
        assert_eq!(&bytes[6..8], &[1, 0]);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        let header = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
        assert!(header.contains("'shape': (3, 4)"));
        assert!(header.contains("'fortran_order': False"));
        assert!(header.contains("'descr': '<f4'"));
        assert!(header.ends_with('\n'));
        assert_eq!(bytes.len(), 10 + hlen + 48);
    }

    fn patch(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        assert_eq!(from.len(), to.len());
        let at = bytes
            .windows(from.len())
            .position(|w| w == from.as_bytes())
            .expect("pattern present");
        let mut out = bytes.to_vec();
        out[at..at + to.len()].copy_from_slice(to.as_bytes());
        out
    }

    #[test]
    fn fortran_order_rejected() {
        let good = to_bytes(&NpyArray::F64(ArrayD::zeros(IxDyn(&[2, 2]))));
        let text = patch(&good, "'fortran_order': False", "'fortran_order': True ");
        let err = from_bytes(&text).unwrap_err();
        assert!(matches!(err, NpyError::FortranOrder));
        assert_eq!(err.to_string(), "fortran order unsupported");
    }

    #[test]
    fn truncated_and_foreign_inputs_rejected() {
        let good = to_bytes(&NpyArray::F64(ArrayD::zeros(IxDyn(&[2, 3]))));
        assert!(matches!(
            from_bytes(&good[..good.len() - 1]),
            Err(NpyError::Truncated { .. })
        ));
        assert!(matches!(from_bytes(b"PK\x03\x04xxxxxxxx"), Err(NpyError::BadMagic)));
        let text = patch(&good, "<f8", "<i8");
        assert!(matches!(from_bytes(&text), Err(NpyError::UnsupportedDtype(d)) if d == "<i8"));
        let big = patch(&good, "<f8", ">f8");
        assert!(matches!(from_bytes(&big), Err(NpyError::UnsupportedDtype(_))));
    }

    #[test]
    fn reads_one_dimensional_shapes() {
        let a = NpyArray::F64(ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, 3.0]).unwrap());
        let bytes = to_bytes(&a);
        assert!(String::from_utf8_lossy(&bytes).contains("'shape': (3,)"));
        assert_eq!(from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn file_round_trip_is_atomic_and_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let a = NpyArray::C64(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| {
            Complex32::new(i[0] as f32 + 0.25, i[1] as f32 - i[2] as f32 * 1.5)
        }));
        write_npy(&path, &a).unwrap();
        assert_eq!(read_npy(&path).unwrap(), a);
        let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }

    fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(1usize..5, 1..=3)
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(shape in arb_shape(), seed in any::<u64>(), kind in 0u8..4) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dims = IxDyn(&shape);
            let arr = match kind {
                0 => NpyArray::F32(ArrayD::from_shape_simple_fn(dims, || f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff))),
                1 => NpyArray::F64(ArrayD::from_shape_simple_fn(dims, || rng.random::<f64>() * 1e6 - 5e5)),
                2 => NpyArray::C64(ArrayD::from_shape_simple_fn(dims, || Complex32::new(rng.random(), -rng.random::<f32>()))),
                _ => NpyArray::C128(ArrayD::from_shape_simple_fn(dims, || Complex64::new(rng.random(), rng.random()))),
            };
            let back = from_bytes(&to_bytes(&arr)).unwrap();
            prop_assert_eq!(to_bytes(&back), to_bytes(&arr));
        }
    }
}
