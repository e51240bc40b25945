//! Tensor container (`.bin` raw little-endian + `.json` sidecar) and weights manifests.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ComplexImage, Provenance};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    /// Complex payloads carry a trailing dimension of 2 (`[real, imag]`).
    pub shape: Vec<usize>,
    pub dtype: String,
    pub complex: bool,
    #[serde(default)]
    pub meta: Value,
}

/// Write via a temporary sibling and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

/// `(<base>.bin, <base>.json)`; `base` may itself contain dots.
pub fn container_paths(base: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut p = base.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    (with(".bin"), with(".json"))
}

/// Store `data` under `<base>.bin` + `<base>.json`.
pub fn write_tensor<T: Scalar>(
    base: &Path,
    shape: &[usize],
    data: &[T],
    complex: bool,
    meta: Value,
) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::shape(numel, data.len()));
    }
    let mut bytes = Vec::with_capacity(std::mem::size_of_val(data));
    for &v in data {
        v.write_le(&mut bytes);
    }
    let (bin, json) = container_paths(base);
    write_atomic(&bin, &bytes)?;
    write_json(
        &json,
        &Sidecar {
            shape: shape.to_vec(),
            dtype: T::DTYPE.to_string(),
            complex,
            meta,
        },
    )
}

pub fn read_tensor<T: Scalar>(base: &Path) -> Result<(Sidecar, Vec<T>)> {
    let (bin, json) = container_paths(base);
    let side: Sidecar = read_json(&json)?;
    if side.dtype != T::DTYPE {
        return Err(Error::Corrupt {
            path: json,
            detail: format!("dtype {} where {} expected", side.dtype, T::DTYPE),
        });
    }
    if side.complex && side.shape.last() != Some(&2) {
        return Err(Error::Corrupt {
            path: json,
            detail: "complex payload without trailing dimension 2".into(),
        });
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let width = std::mem::size_of::<T>();
    let numel: usize = side.shape.iter().product();
    if bytes.len() != numel * width {
        return Err(Error::Corrupt {
            path: bin,
            detail: format!("{} bytes for {} elements", bytes.len(), numel),
        });
    }
    let data = bytes.chunks_exact(width).map(T::read_le).collect();
    Ok((side, data))
}

pub fn write_complex_image<T: Scalar>(
    base: &Path,
    img: &ComplexImage<T>,
    meta: Value,
) -> Result<()> {
    let (h, w) = img.dim();
    let data: Vec<T> = img.data().iter().flat_map(|c| [c.re, c.im]).collect();
    let mut meta = meta;
    if let Value::Object(m) = &mut meta {
        m.insert(
            "provenance".into(),
            serde_json::to_value(img.meta).expect("enum"),
        );
    }
    write_tensor(base, &[h, w, 2], &data, true, meta)
}

pub fn read_complex_image<T: Scalar>(base: &Path) -> Result<ComplexImage<T>> {
    let (side, data) = read_tensor::<T>(base)?;
    let corrupt = |detail: &str| Error::Corrupt {
        path: base.into(),
        detail: detail.into(),
    };
    if !side.complex || side.shape.len() != 3 {
        return Err(corrupt("expected complex [H, W, 2] payload"));
    }
    let meta = side
        .meta
        .get("provenance")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or(Provenance::Sample);
    let values: Vec<Complex<T>> = data
        .chunks_exact(2)
        .map(|c| Complex::new(c[0], c[1]))
        .collect();
    let arr = Array2::from_shape_vec((side.shape[0], side.shape[1]), values)
        .map_err(|_| corrupt("shape"))?;
    ComplexImage::new(arr, meta)
}

pub fn write_grid<T: Scalar>(base: &Path, grid: &Array2<T>, meta: Value) -> Result<()> {
    let (h, w) = grid.dim();
    let data: Vec<T> = grid.iter().copied().collect();
    write_tensor(base, &[h, w], &data, false, meta)
}

pub fn read_grid<T: Scalar>(base: &Path) -> Result<Array2<T>> {
    let (side, data) = read_tensor::<T>(base)?;
    if side.complex || side.shape.len() != 2 {
        return Err(Error::Corrupt {
            path: base.into(),
            detail: "expected real [H, W] payload".into(),
        });
    }
    Array2::from_shape_vec((side.shape[0], side.shape[1]), data).map_err(|_| Error::Corrupt {
        path: base.into(),
        detail: "shape".into(),
    })
}

/// Hex SHA-256 over the little-endian bytes of a float stream.
pub fn digest_f32(values: impl IntoIterator<Item = f32>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn param_checksum<T: Scalar>(params: &ParamSet<T>) -> String {
    let mut h = Sha256::new();
    for p in params.iter() {
        h.update(p.name.as_bytes());
        for d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        let mut bytes = Vec::new();
        for &v in p.value.data() {
            v.write_le(&mut bytes);
        }
        h.update(&bytes);
    }
    hex(&h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub kind: String,
    pub config: Value,
    pub params: Vec<ParamEntry>,
    pub checksum: String,
    #[serde(default)]
    pub extra: Value,
}

/// One container per parameter under `<dir>/params/`, listed by `<dir>/manifest.json`.
pub fn save_weights<T: Scalar>(
    dir: &Path,
    kind: &str,
    config: Value,
    params: &ParamSet<T>,
    extra: Value,
) -> Result<WeightsManifest> {
    let mut entries = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let file = format!("params/{i:04}_{}", p.name);
        write_tensor(
            &dir.join(&file),
            &p.value.shape(),
            p.value.data(),
            false,
            serde_json::json!({ "name": p.name }),
        )?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
            file,
        });
    }
    let manifest = WeightsManifest {
        kind: kind.to_string(),
        config,
        params: entries,
        checksum: param_checksum(params),
        extra,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_weights<T: Scalar>(dir: &Path) -> Result<(WeightsManifest, ParamSet<T>)> {
    let manifest: WeightsManifest = read_json(&dir.join("manifest.json"))?;
    let mut params = ParamSet::new();
    for e in &manifest.params {
        let (_, data) = read_tensor::<T>(&dir.join(&e.file))?;
        params.push(e.name.clone(), Tensor::from_vec(e.shape, data)?);
    }
    let sum = param_checksum(&params);
    if sum != manifest.checksum {
        return Err(Error::Corrupt {
            path: dir.into(),
            detail: format!("checksum {sum} != manifest {}", manifest.checksum),
        });
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn grids_roundtrip_bit_exact(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 16)) {
            let dir = tempfile::tempdir().unwrap();
            let g = Array2::from_shape_vec((4, 4), vals).unwrap();
            write_grid(&dir.path().join("g"), &g, Value::Null).unwrap();
            let back: Array2<f32> = read_grid(&dir.path().join("g")).unwrap();
            prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn complex_sidecar_schema() {
        let dir = tempfile::tempdir().unwrap();
        let img = ComplexImage::<f32>::new(
            Array2::from_shape_fn((4, 8), |(y, x)| Complex::new(y as f32, -(x as f32))),
            Provenance::ZeroFilled,
        )
        .unwrap();
        let base = dir.path().join("x_u");
        write_complex_image(&base, &img, serde_json::json!({})).unwrap();
        let side: Sidecar = read_json(&container_paths(&base).1).unwrap();
        assert_eq!(side.shape, vec![4, 8, 2]);
        assert_eq!(side.dtype, "float32");
        assert!(side.complex);
        let bytes = fs::read(container_paths(&base).0).unwrap();
        assert_eq!(bytes.len(), 4 * 8 * 2 * 4);
        // second element is imag of (0, 0), then real of (0, 1)
        assert_eq!(f32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0.0);
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), -1.0);
        assert_eq!(read_complex_image::<f32>(&base).unwrap(), img);
    }

    #[test]
    fn weights_roundtrip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::<f32>::new();
        ps.push(
            "a.w",
            Tensor::from_vec([1, 1, 1, 3], vec![1.5, -2.0, 1e-30]).unwrap(),
        );
        ps.push("a.b", Tensor::full([1, 2, 1, 1], 0.25));
        let m = save_weights(dir.path(), "test", Value::Null, &ps, Value::Null).unwrap();
        let (m2, back) = load_weights::<f32>(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, ps);

        let file = container_paths(&dir.path().join(&m.params[0].file)).0;
        let mut bytes = fs::read(&file).unwrap();
        bytes[0] ^= 1;
        fs::write(&file, bytes).unwrap();
        assert!(matches!(
            load_weights::<f32>(dir.path()),
            Err(Error::Corrupt { .. })
        ));
    }
}
