//! Persistence: the `.tns` tensor container, multi-tensor container files,
//! ASCII PLY export, and JSON-lines logging helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const TNS_MAGIC: &[u8; 4] = b"TNS1";
const CONTAINER_MAGIC: &[u8; 4] = b"TNC1";
pub const CONTAINER_VERSION: u32 = 1;

/// A tensor of any supported dtype, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I32(Vec<usize>, Vec<i32>),
}

impl AnyTensor {
    fn dtype(&self) -> u8 {
        match self {
            AnyTensor::F32(_) => 0,
            AnyTensor::F64(_) => 1,
            AnyTensor::I32(..) => 2,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::I32(s, _) => s,
        }
    }
}

/// Tensors carry their dtype into the container via this trait.
pub trait TensorDtype: Scalar {
    fn wrap(t: Tensor<Self>) -> AnyTensor;
    fn unwrap_any(a: AnyTensor) -> Option<Tensor<Self>>;
}

impl TensorDtype for f32 {
    fn wrap(t: Tensor<f32>) -> AnyTensor {
        AnyTensor::F32(t)
    }
    fn unwrap_any(a: AnyTensor) -> Option<Tensor<f32>> {
        match a {
            AnyTensor::F32(t) => Some(t),
            _ => None,
        }
    }
}

impl TensorDtype for f64 {
    fn wrap(t: Tensor<f64>) -> AnyTensor {
        AnyTensor::F64(t)
    }
    fn unwrap_any(a: AnyTensor) -> Option<Tensor<f64>> {
        match a {
            AnyTensor::F64(t) => Some(t),
            _ => None,
        }
    }
}

fn tns_bytes(t: &AnyTensor) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::new();
    out.extend_from_slice(TNS_MAGIC);
    out.push(t.dtype());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t {
        AnyTensor::F32(t) => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        AnyTensor::F64(t) => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        AnyTensor::I32(_, d) => {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn parse_tns(r: &mut impl Read, path: &Path) -> Result<AnyTensor> {
    let fmt = |msg: String| Error::format(path, msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != TNS_MAGIC {
        return Err(fmt(format!("bad tensor magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    let (dtype, rank) = (head[0], head[1] as usize);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let count: usize = shape.iter().product();
    match dtype {
        0 => {
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            let data: Vec<f32> =
                buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(AnyTensor::F32(Tensor::from_vec(&shape, data).map_err(|e| fmt(e.to_string()))?))
        }
        1 => {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            let data: Vec<f64> =
                buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(AnyTensor::F64(Tensor::from_vec(&shape, data).map_err(|e| fmt(e.to_string()))?))
        }
        2 => {
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            let data: Vec<i32> =
                buf.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(AnyTensor::I32(shape, data))
        }
        other => Err(fmt(format!("unknown tensor dtype code {other}"))),
    }
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &AnyTensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tns_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    parse_tns(&mut f, path)
}

pub fn read_typed_tensor<T: TensorDtype>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let any = read_tensor_file(path)?;
    let dtype = any.dtype();
    T::unwrap_any(any)
        .ok_or_else(|| Error::format(path, format!("expected dtype {}, found {dtype}", T::DTYPE)))
}

/// A container file holding a JSON metadata document plus named tensors.
/// Write order is the block order, so save→load→save is byte-identical.
#[derive(Clone, Debug)]
pub struct Container {
    pub version: u32,
    pub meta: serde_json::Value,
    pub blocks: Vec<(String, AnyTensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { version: CONTAINER_VERSION, meta, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: AnyTensor) {
        self.blocks.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_typed<T: TensorDtype>(&self, name: &str, path: &Path) -> Result<Tensor<T>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor block '{name}'")))?;
        T::unwrap_any(t.clone())
            .ok_or_else(|| Error::format(path, format!("block '{name}' has the wrong dtype")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        w.write_all(CONTAINER_MAGIC).map_err(io)?;
        w.write_all(&self.version.to_le_bytes()).map_err(io)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&meta).map_err(io)?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.blocks {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(nb).map_err(io)?;
            let blob = tns_bytes(t);
            w.write_all(&(blob.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&blob).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Container> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::format(path, format!("bad container magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != CONTAINER_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported container version {version} (expected {CONTAINER_VERSION})"),
            ));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let meta_len = u64::from_le_bytes(b8) as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf).map_err(io)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta_buf)?;
        r.read_exact(&mut b4).map_err(io)?;
        let n_blocks = u32::from_le_bytes(b4) as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            r.read_exact(&mut b4).map_err(io)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format(path, "non-utf8 block name".to_string()))?;
            r.read_exact(&mut b8).map_err(io)?;
            let blob_len = u64::from_le_bytes(b8) as usize;
            let mut blob = vec![0u8; blob_len];
            r.read_exact(&mut blob).map_err(io)?;
            let t = parse_tns(&mut blob.as_slice(), path)?;
            blocks.push((name, t));
        }
        Ok(Container { version, meta, blocks })
    }
}

/// ASCII PLY export, 6 significant digits per coordinate.
pub fn write_ply<T: Scalar>(path: impl AsRef<Path>, points: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    if points.shape().len() != 2 || points.cols() != 3 {
        return Err(Error::Shape(format!("ply export needs [N,3], got {:?}", points.shape())));
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let run = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", points.rows())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "end_header")?;
        for i in 0..points.rows() {
            let r = points.row(i);
            writeln!(w, "{:.6e} {:.6e} {:.6e}", r[0].as_f64(), r[1].as_f64(), r[2].as_f64())?;
        }
        w.flush()
    };
    run(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let r = BufReader::new(f);
    let mut lines = r.lines();
    let mut n = None;
    for line in lines.by_ref() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(rest) = line.strip_prefix("element vertex ") {
            n = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format(path, format!("bad vertex count '{rest}'")))?,
            );
        }
        if line.trim() == "end_header" {
            break;
        }
    }
    let n = n.ok_or_else(|| Error::format(path, "missing element vertex line".to_string()))?;
    let mut data = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, "truncated vertex list".to_string()))?
            .map_err(|e| Error::io(path, e))?;
        for tok in line.split_whitespace().take(3) {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| Error::format(path, format!("bad coordinate '{tok}'")))?,
            );
        }
    }
    Tensor::from_vec(&[n, 3], data)
}

/// Append one JSON document as a line to a log file.
pub fn append_jsonl(path: impl AsRef<Path>, value: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_file_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t32 = Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng);
        let t64 = Tensor::<f64>::randn(&[2, 2, 4], 1.0, &mut rng);
        let p32 = dir.path().join("a.tns");
        let p64 = dir.path().join("b.tns");
        write_tensor_file(&p32, &AnyTensor::F32(t32.clone())).unwrap();
        write_tensor_file(&p64, &AnyTensor::F64(t64.clone())).unwrap();
        assert_eq!(read_typed_tensor::<f32>(&p32).unwrap().data(), t32.data());
        assert_eq!(read_typed_tensor::<f64>(&p64).unwrap().data(), t64.data());
        let pi = dir.path().join("c.tns");
        write_tensor_file(&pi, &AnyTensor::I32(vec![4], vec![1, -2, 3, -4])).unwrap();
        match read_tensor_file(&pi).unwrap() {
            AnyTensor::I32(s, d) => {
                assert_eq!(s, vec![4]);
                assert_eq!(d, vec![1, -2, 3, -4]);
            }
            other => panic!("wrong dtype {other:?}"),
        }
    }

    #[test]
    fn container_save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Container::new(serde_json::json!({"step": 17, "seed": 5}));
        c.push("w1", AnyTensor::F32(Tensor::randn(&[8, 4], 1.0, &mut rng)));
        c.push("b1", AnyTensor::F32(Tensor::randn(&[4], 1.0, &mut rng)));
        c.push("idx", AnyTensor::I32(vec![3], vec![7, 8, 9]));
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        c.save(&p1).unwrap();
        let loaded = Container::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.meta["step"], 17);
    }

    #[test]
    fn container_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let c = Container::new(serde_json::json!({}));
        c.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99;
        std::fs::write(&p, bytes).unwrap();
        let err = Container::load(&p).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn missing_file_error_names_path() {
        let err = read_tensor_file("/nonexistent/x.tns").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.tns"), "{err}");
    }

    #[test]
    fn ply_round_trip_within_1e6() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Tensor::<f64>::randn(&[50, 3], 0.1, &mut rng);
        let p = dir.path().join("cloud.ply");
        write_ply(&p, &pts).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 50\n"));
        let back = read_ply(&p).unwrap();
        for i in 0..50 {
            for k in 0..3 {
                assert!((back.row(i)[k] - pts.row(i)[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jsonl_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        append_jsonl(&p, &serde_json::json!({"step": 0, "loss": 1.5})).unwrap();
        append_jsonl(&p, &serde_json::json!({"step": 1, "loss": 1.2})).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["step"], 1);
    }
}
