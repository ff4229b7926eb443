//! Point-cloud and tensor files.
//!
//! Binary point clouds are little-endian 20-byte records
//! `f32 x, f32 y, f32 z, f32 r, u32 ring`. CSV clouds carry the header
//! `x,y,z,r,ring`. Tensor files hold three little-endian `u32` dims followed
//! by row-major little-endian `f32` data.

use std::fs;
use std::path::{Path, PathBuf};

use gmfuse_core::pillar::{LidarPoint, RING_LIMIT};
use gmfuse_core::Tensor;

use crate::error::{CliError, Result};

pub const RECORD_BYTES: usize = 20;
pub const HEADER_BYTES: usize = 12;
pub const CSV_HEADER: [&str; 5] = ["x", "y", "z", "r", "ring"];

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn plural(n: usize) -> &'static str {
    if n == 1 {
        ""
    } else {
        "s"
    }
}

pub fn parse_binary_points(bytes: &[u8]) -> Result<Vec<LidarPoint>> {
    let rem = bytes.len() % RECORD_BYTES;
    if rem != 0 {
        return Err(CliError::validation(format!(
            "trailing {rem} byte{} at offset {}",
            plural(rem),
            bytes.len() - rem
        )));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let offset = i * RECORD_BYTES;
            let ring = le_u32(&rec[16..]);
            if ring >= RING_LIMIT {
                return Err(CliError::validation(format!(
                    "ring {ring} exceeds {} at offset {}",
                    RING_LIMIT - 1,
                    offset + 16
                )));
            }
            let [x, y, z, r] = [0, 4, 8, 12].map(|o| f64::from(le_f32(&rec[o..])));
            LidarPoint::new(x, y, z, r, ring).map_err(|e| CliError::validation(format!("record at offset {offset}: {e}")))
        })
        .collect()
}

pub fn encode_binary_points(points: &[LidarPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * RECORD_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.ring.to_le_bytes());
    }
    out
}

pub fn parse_csv_points(text: &[u8]) -> Result<Vec<LidarPoint>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text);
    let header = reader
        .headers()
        .map_err(|e| CliError::validation(format!("csv header: {e}")))?
        .clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(CliError::validation(format!(
            "csv header must be `{}`, got `{}`",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::validation(format!("csv: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |k: usize| -> Result<&str> {
            record
                .get(k)
                .ok_or_else(|| CliError::validation(format!("line {line}: missing field `{}`", CSV_HEADER[k])))
        };
        let mut xyzr = [0.0; 4];
        for (k, v) in xyzr.iter_mut().enumerate() {
            let raw = field(k)?;
            *v = raw
                .parse()
                .map_err(|_| CliError::validation(format!("line {line}: field `{}` is not a number: `{raw}`", CSV_HEADER[k])))?;
        }
        let raw = field(4)?;
        let ring: u32 = raw
            .parse()
            .map_err(|_| CliError::validation(format!("line {line}: field `ring` is not an integer: `{raw}`")))?;
        let [x, y, z, r] = xyzr;
        points.push(LidarPoint::new(x, y, z, r, ring).map_err(|e| CliError::validation(format!("line {line}: {e}")))?);
    }
    Ok(points)
}

/// Reads a cloud, choosing CSV when the file starts with the CSV header.
pub fn read_points(path: &Path) -> Result<Vec<LidarPoint>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let is_csv = bytes.starts_with(b"x,") || path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let parsed = if is_csv {
        parse_csv_points(&bytes)
    } else {
        parse_binary_points(&bytes)
    };
    parsed.map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = t.dims3("tensor file")?;
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * t.len());
    for d in [h, w, c] {
        let d = u32::try_from(d).map_err(|_| CliError::validation(format!("dim {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_BYTES {
        return Err(CliError::validation(format!(
            "tensor header needs {HEADER_BYTES} bytes, file ends at offset {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[..HEADER_BYTES].chunks_exact(4).map(|b| le_u32(b) as usize).collect();
    let expected = dims.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d));
    let payload = bytes.len() - HEADER_BYTES;
    if expected != Some(payload) {
        return Err(CliError::validation(format!(
            "tensor dims {dims:?} need {} payload bytes from offset {HEADER_BYTES}, found {payload}",
            expected.map_or("too many".to_string(), |e| e.to_string())
        )));
    }
    let data = bytes[HEADER_BYTES..].chunks_exact(4).map(|b| f64::from(le_f32(b))).collect();
    Ok(Tensor::new(dims, data)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?).map_err(|e| CliError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// `out.bin` gets the sidecar `out.bin.txt`.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".txt");
    PathBuf::from(name)
}

/// Writes `key = value` lines followed by the resolved config.
pub fn write_sidecar(output: &Path, fields: &[(&str, String)], config: &str) -> Result<PathBuf> {
    let path = sidecar_path(output);
    let mut text = String::new();
    for (k, v) in fields {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str("\n[config]\n");
    text.push_str(config);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_record() {
        let p = LidarPoint::new(1.5, -2.0, 0.25, 0.5, 7).unwrap();
        let bytes = encode_binary_points(&[p]);
        assert_eq!(bytes.len(), 20);
        assert_eq!(parse_binary_points(&bytes).unwrap(), vec![p]);
    }

    #[test]
    fn trailing_bytes() {
        let e = parse_binary_points(&[0u8; 21]).unwrap_err().to_string();
        assert_eq!(e, "trailing 1 byte at offset 20");
        let e = parse_binary_points(&[0u8; 43]).unwrap_err().to_string();
        assert_eq!(e, "trailing 3 bytes at offset 40");
    }

    #[test]
    fn ring_limit_names_offset() {
        let mut bytes = encode_binary_points(&[LidarPoint::new(0.0, 0.0, 0.0, 0.0, 0).unwrap(); 2]);
        bytes[36..40].copy_from_slice(&256u32.to_le_bytes());
        let e = parse_binary_points(&bytes).unwrap_err().to_string();
        assert!(e.contains("offset 36"), "{e}");
    }

    #[test]
    fn csv_points() {
        let pts = parse_csv_points(b"x,y,z,r,ring\n1,2,3,0.5,4\n-1, 0, 0, 0, 255\n").unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].ring, 255);
        let e = parse_csv_points(b"x,y,z,r,ring\n1,2,oops,0.5,4\n").unwrap_err().to_string();
        assert!(e.contains("`z`") && e.contains("line 2"), "{e}");
        assert!(parse_csv_points(b"x,y,z,ring\n").is_err());
        assert!(parse_csv_points(b"x,y,z,r,ring\n1,2,3,0.5,256\n").is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::from_fn([2, 3, 4], |i| i as f64 * 0.5 - 3.0).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(&bytes[..12], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
        let e = decode_tensor(&bytes[..50]).unwrap_err().to_string();
        assert!(e.contains("offset 12"), "{e}");
        assert!(decode_tensor(&bytes[..5]).is_err());
    }
}
