//! Tensor weight files: text header lines `tensor <name> <dims...>`, closed
//! by an `end` line, then little-endian f32 values in declaration order.
//! Metadata sidecars are two-column TSV (`key<TAB>value`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = String::new();
    for t in tensors {
        out.push_str("tensor ");
        out.push_str(&t.name);
        for d in &t.dims {
            out.push_str(&format!(" {d}"));
        }
        out.push('\n');
    }
    out.push_str("end\n");
    let mut bytes = out.into_bytes();
    for t in tensors {
        for v in &t.values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    let bad = |reason: String| Error::format(path, reason);
    let mut headers = Vec::new();
    let mut pos = 0;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("unterminated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("non-text header".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(bad(format!("unexpected header line {line:?}")));
        }
        let name = parts.next().ok_or_else(|| bad("tensor without name".into()))?.to_string();
        let dims = parts
            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension in {line:?}"))))
            .collect::<Result<Vec<_>>>()?;
        headers.push((name, dims));
    }
    let mut out = Vec::with_capacity(headers.len());
    for (name, dims) in headers {
        let n: usize = dims.iter().product();
        let end = pos + 4 * n;
        if end > bytes.len() {
            return Err(bad(format!("truncated payload for tensor {name}")));
        }
        let values = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        pos = end;
        out.push(NamedTensor { name, dims, values });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Splits a network's flat parameter vector into named tensors.
pub fn network_tensors(net: &Network, params: &[f64]) -> Vec<NamedTensor> {
    net.param_tensors()
        .into_iter()
        .map(|t| {
            let n: usize = t.dims.iter().product();
            NamedTensor {
                name: t.name,
                values: params[t.offset..t.offset + n].to_vec(),
                dims: t.dims,
            }
        })
        .collect()
}

/// Reassembles a flat parameter vector, checking names and dimensions.
pub fn network_params(net: &Network, tensors: &[NamedTensor], path: &Path) -> Result<Vec<f64>> {
    let expected = net.param_tensors();
    if expected.len() != tensors.len() {
        return Err(Error::format(
            path,
            format!("expected {} tensors, found {}", expected.len(), tensors.len()),
        ));
    }
    let mut params = vec![0.0; net.param_count()];
    for (e, t) in expected.iter().zip(tensors) {
        if e.name != t.name || e.dims != t.dims {
            return Err(Error::format(
                path,
                format!("tensor {} {:?} does not match architecture {} {:?}", t.name, t.dims, e.name, e.dims),
            ));
        }
        params[e.offset..e.offset + t.values.len()].copy_from_slice(&t.values);
    }
    Ok(params)
}

pub fn write_network(path: &Path, net: &Network, params: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_tensors(&network_tensors(net, params))).map_err(|e| Error::io(path, e))
}

pub fn read_network(path: &Path, net: &Network) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode_tensors(&bytes, path)?;
    network_params(net, &tensors, path)
}

/// Ordered key/value metadata written as TSV.
pub type Meta = BTreeMap<String, String>;

pub fn write_meta(path: &Path, meta: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in meta {
        text.push_str(k);
        text.push('\t');
        text.push_str(v);
        text.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut meta = Meta::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {} is not key<TAB>value", i + 1)))?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

pub fn meta_get<'a>(meta: &'a Meta, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::format(path, format!("missing key {key:?}")))
}

pub fn meta_parse<T: std::str::FromStr>(meta: &Meta, key: &str, path: &Path) -> Result<T> {
    meta_get(meta, key, path)?
        .parse()
        .map_err(|_| Error::format(path, format!("bad value for {key:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Shape};

    #[test]
    fn tensors_round_trip_at_f32_precision() {
        let net = Network::new(
            Shape(1, 8, 8),
            vec![Layer::Conv3x3 { cin: 1, cout: 2, stride: 2 }, Layer::Relu, Layer::Dense { inputs: 32, outputs: 3 }],
        )
        .unwrap();
        let params: Vec<f64> = net.init_params(3).iter().map(|&v| v as f32 as f64).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.wts");
        write_network(&path, &net, &params).unwrap();
        assert_eq!(read_network(&path, &net).unwrap(), params);
        let text = fs::read(&path).unwrap();
        assert!(text.starts_with(b"tensor layer0.weight 2 1 3 3\ntensor layer0.bias 2\n"));
    }

    #[test]
    fn rejects_mismatched_architecture() {
        let a = Network::new(Shape(1, 4, 4), vec![Layer::Dense { inputs: 16, outputs: 2 }]).unwrap();
        let b = Network::new(Shape(1, 4, 4), vec![Layer::Dense { inputs: 16, outputs: 3 }]).unwrap();
        let bytes = encode_tensors(&network_tensors(&a, &a.init_params(0)));
        let tensors = decode_tensors(&bytes, Path::new("x")).unwrap();
        assert!(network_params(&b, &tensors, Path::new("x")).is_err());
        assert!(decode_tensors(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn meta_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        write_meta(&path, &[("a".into(), "1".into()), ("b".into(), "x y".into())]).unwrap();
        let m = read_meta(&path).unwrap();
        assert_eq!(m["b"], "x y");
        assert_eq!(meta_parse::<u32>(&m, "a", &path).unwrap(), 1);
        assert!(meta_get(&m, "c", &path).is_err());
    }
}
