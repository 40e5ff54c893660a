//! File formats: binary tensors, sidecar metadata, scene files, graymaps,
//! and model checkpoints.
//!
//! Binary tensor layout (little endian throughout):
//!
//! ```text
//! magic[4] | version u8 | flags u8 (bit0: complex) | ndim u8 | dims u32*ndim | payload f32
//! ```
//!
//! Complex payloads interleave re/im. Magics: `RDC1` radar cube, `RAH1`
//! range-azimuth map, `RDH1` range-Doppler map, `BEV1` BEV image.
//!
//! Checkpoint layout:
//!
//! ```text
//! CKPT | version u8 | dtype u8 (4|8) | header_len u32 | header json |
//! n_tensors u32 | { name_len u16 | name | ndim u8 | dims u32*ndim | payload } *
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevImage, BevSpec};
use crate::num::{real, Dtype, Float};
use crate::signal::{RadarCube, Scene, WaveformConfig};

pub const MAGIC_CUBE: &[u8; 4] = b"RDC1";
pub const MAGIC_RAH: &[u8; 4] = b"RAH1";
pub const MAGIC_RDH: &[u8; 4] = b"RDH1";
pub const MAGIC_BEV: &[u8; 4] = b"BEV1";
pub const MAGIC_CLOUD: &[u8; 4] = b"PCD1";
pub const MAGIC_CKPT: &[u8; 4] = b"CKPT";

const FORMAT_VERSION: u8 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------
// Raw tensor container
// ---------------------------------------------------------------------

fn write_tensor_file(
    path: &Path,
    magic: &[u8; 4],
    complex: bool,
    dims: &[usize],
    payload: impl Iterator<Item = f32>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    w.write_u8(FORMAT_VERSION)?;
    w.write_u8(if complex { 1 } else { 0 })?;
    w.write_u8(dims.len() as u8)?;
    for &d in dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for v in payload {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

struct RawTensor {
    complex: bool,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn read_tensor_file(path: &Path, expect_magic: &[u8; 4]) -> Result<RawTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != expect_magic {
        return Err(format_err(
            path,
            format!("magic {magic:?}, expected {expect_magic:?}"),
        ));
    }
    let version = r.read_u8()?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let flags = r.read_u8()?;
    let complex = flags & 1 == 1;
    let ndim = r.read_u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let count = dims.iter().product::<usize>() * if complex { 2 } else { 1 };
    let mut data = vec![0f32; count];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Ok(RawTensor {
        complex,
        dims,
        data,
    })
}

// ---------------------------------------------------------------------
// Radar cube
// ---------------------------------------------------------------------

/// Write a radar cube plus its `.meta.toml` sidecar with the waveform.
pub fn write_cube<T: Float>(path: &Path, cube: &RadarCube<T>) -> Result<()> {
    let (a, b, c) = cube.dims();
    write_tensor_file(
        path,
        MAGIC_CUBE,
        true,
        &[a, b, c],
        cube.data
            .iter()
            .flat_map(|v| [v.re.to_f32().unwrap(), v.im.to_f32().unwrap()]),
    )?;
    let meta = toml::to_string_pretty(&cube.meta)
        .map_err(|e| format_err(path, format!("sidecar encode: {e}")))?;
    std::fs::write(sidecar_path(path), meta)?;
    Ok(())
}

pub fn read_cube<T: Float>(path: &Path) -> Result<RadarCube<T>> {
    let raw = read_tensor_file(path, MAGIC_CUBE)?;
    if !raw.complex || raw.dims.len() != 3 {
        return Err(format_err(path, "expected complex rank-3 tensor"));
    }
    let meta_text = std::fs::read_to_string(sidecar_path(path))?;
    let meta: WaveformConfig =
        toml::from_str(&meta_text).map_err(|e| format_err(path, format!("sidecar: {e}")))?;
    let (a, b, c) = (raw.dims[0], raw.dims[1], raw.dims[2]);
    let mut data = Array3::<Complex<T>>::zeros((a, b, c));
    for (i, v) in data.iter_mut().enumerate() {
        *v = Complex::new(
            real::<T>(raw.data[2 * i] as f64),
            real::<T>(raw.data[2 * i + 1] as f64),
        );
    }
    Ok(RadarCube { data, meta })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.toml");
    std::path::PathBuf::from(s)
}

// ---------------------------------------------------------------------
// Real-valued maps
// ---------------------------------------------------------------------

/// Sidecar metadata of a stored heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub range_bin_size_m: Option<f64>,
    pub velocity_bin_size_mps: Option<f64>,
    pub azimuth_centers_rad: Option<Vec<f64>>,
    /// "db_normalized" or "linear_power".
    pub scale: String,
    pub frame_id: u64,
}

/// Write a real-valued map with one of the heatmap magics and metadata.
pub fn write_map<T: Float>(
    path: &Path,
    magic: &[u8; 4],
    values: &Array2<T>,
    meta: &MapMeta,
) -> Result<()> {
    let (h, w) = values.dim();
    write_tensor_file(
        path,
        magic,
        false,
        &[h, w],
        values.iter().map(|v| v.to_f32().unwrap()),
    )?;
    let text = toml::to_string_pretty(meta)
        .map_err(|e| format_err(path, format!("sidecar encode: {e}")))?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn read_map<T: Float>(path: &Path, magic: &[u8; 4]) -> Result<(Array2<T>, MapMeta)> {
    let raw = read_tensor_file(path, magic)?;
    if raw.complex || raw.dims.len() != 2 {
        return Err(format_err(path, "expected real rank-2 tensor"));
    }
    let meta_text = std::fs::read_to_string(sidecar_path(path))?;
    let meta: MapMeta =
        toml::from_str(&meta_text).map_err(|e| format_err(path, format!("sidecar: {e}")))?;
    let arr = Array2::from_shape_vec(
        (raw.dims[0], raw.dims[1]),
        raw.data.iter().map(|&v| real::<T>(v as f64)).collect(),
    )
    .map_err(|e| format_err(path, format!("shape: {e}")))?;
    Ok((arr, meta))
}

/// Write a BEV image as a `BEV1` tensor; the grid geometry goes in the
/// sidecar.
pub fn write_bev<T: Float>(path: &Path, img: &BevImage<T>) -> Result<()> {
    let (h, w) = img.values.dim();
    write_tensor_file(
        path,
        MAGIC_BEV,
        false,
        &[h, w],
        img.values.iter().map(|v| v.to_f32().unwrap()),
    )?;
    #[derive(Serialize)]
    struct BevMeta<'a> {
        spec: &'a BevSpec,
        frame_id: u64,
    }
    let text = toml::to_string_pretty(&BevMeta {
        spec: &img.spec,
        frame_id: img.frame_id,
    })
    .map_err(|e| format_err(path, format!("sidecar encode: {e}")))?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn read_bev<T: Float>(path: &Path) -> Result<BevImage<T>> {
    let raw = read_tensor_file(path, MAGIC_BEV)?;
    if raw.complex || raw.dims.len() != 2 {
        return Err(format_err(path, "expected real rank-2 tensor"));
    }
    #[derive(Deserialize)]
    struct BevMeta {
        spec: BevSpec,
        frame_id: u64,
    }
    let meta_text = std::fs::read_to_string(sidecar_path(path))?;
    let meta: BevMeta =
        toml::from_str(&meta_text).map_err(|e| format_err(path, format!("sidecar: {e}")))?;
    let values = Array2::from_shape_vec(
        (raw.dims[0], raw.dims[1]),
        raw.data.iter().map(|&v| real::<T>(v as f64)).collect(),
    )
    .map_err(|e| format_err(path, format!("shape: {e}")))?;
    Ok(BevImage {
        values,
        spec: meta.spec,
        frame_id: meta.frame_id,
    })
}

// ---------------------------------------------------------------------
// Point clouds
// ---------------------------------------------------------------------

/// Point cloud with per-point magnitudes, CSV form `x_m,y_m,magnitude`.
pub fn write_cloud_csv(
    path: &Path,
    cloud: &crate::geometry::PointCloud2D<f64>,
    magnitudes: &[f64],
) -> Result<()> {
    if magnitudes.len() != cloud.points.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} magnitudes for {} points",
            magnitudes.len(),
            cloud.points.len()
        )));
    }
    let mut text = String::from("x_m,y_m,magnitude\n");
    for (p, m) in cloud.points.iter().zip(magnitudes) {
        text.push_str(&format!("{},{},{}\n", p.x, p.y, m));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Point cloud in the shared tensor container: a real [n, 3] tensor of
/// (x, y, magnitude) rows under the `PCD1` magic.
pub fn write_cloud_bin(
    path: &Path,
    cloud: &crate::geometry::PointCloud2D<f64>,
    magnitudes: &[f64],
) -> Result<()> {
    if magnitudes.len() != cloud.points.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} magnitudes for {} points",
            magnitudes.len(),
            cloud.points.len()
        )));
    }
    let n = cloud.points.len();
    write_tensor_file(
        path,
        MAGIC_CLOUD,
        false,
        &[n, 3],
        cloud
            .points
            .iter()
            .zip(magnitudes)
            .flat_map(|(p, &m)| [p.x as f32, p.y as f32, m as f32]),
    )
}

pub fn read_cloud_bin(
    path: &Path,
    frame_id: u64,
) -> Result<(crate::geometry::PointCloud2D<f64>, Vec<f64>)> {
    let raw = read_tensor_file(path, MAGIC_CLOUD)?;
    if raw.complex || raw.dims.len() != 2 || raw.dims[1] != 3 {
        return Err(format_err(path, "expected real [n, 3] tensor"));
    }
    let mut points = Vec::with_capacity(raw.dims[0]);
    let mut magnitudes = Vec::with_capacity(raw.dims[0]);
    for row in raw.data.chunks_exact(3) {
        points.push(crate::geometry::Point2 {
            x: row[0] as f64,
            y: row[1] as f64,
        });
        magnitudes.push(row[2] as f64);
    }
    Ok((
        crate::geometry::PointCloud2D { points, frame_id },
        magnitudes,
    ))
}

/// 8-bit binary portable graymap (P5) for eyeballing images in [0, 1].
pub fn write_pgm<T: Float>(path: &Path, values: &Array2<T>) -> Result<()> {
    let (h, w) = values.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for v in values.iter() {
        let v = v.to_f64().unwrap().clamp(0.0, 1.0);
        out.write_u8((v * 255.0).round() as u8)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------
// Scene files
// ---------------------------------------------------------------------

/// Human-readable scene file (TOML): kind, seed, extent, scatterer list.
pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    let text = toml::to_string_pretty(scene)
        .map_err(|e| format_err(path, format!("encode: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| format_err(path, format!("{e}")))
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------

/// Model role recorded in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Teacher,
    Distilled,
}

/// Checkpoint header: everything needed to rebuild the network and verify
/// it is being used under the schedule it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub seed: u64,
    pub step: u64,
    pub schedule_hash: u64,
    pub net: crate::nn::UNetConfig,
}

pub fn save_checkpoint<T: Float>(
    path: &Path,
    header: &CheckpointHeader,
    params: &crate::nn::ParamSet<T>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC_CKPT)?;
    w.write_u8(FORMAT_VERSION)?;
    w.write_u8(T::DTYPE.tag())?;
    let header_json = serde_json::to_vec(header)
        .map_err(|e| format_err(path, format!("header encode: {e}")))?;
    w.write_u32::<LittleEndian>(header_json.len() as u32)?;
    w.write_all(&header_json)?;
    w.write_u32::<LittleEndian>(params.tensors.len() as u32)?;
    for (tensor, name) in params.tensors.iter().zip(&params.names) {
        let bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u8(tensor.ndim() as u8)?;
        for &d in tensor.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        match T::DTYPE {
            Dtype::F32 => {
                for v in tensor.iter() {
                    w.write_f32::<LittleEndian>(v.to_f32().unwrap())?;
                }
            }
            Dtype::F64 => {
                for v in tensor.iter() {
                    w.write_f64::<LittleEndian>(v.to_f64().unwrap())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(
    path: &Path,
) -> Result<(CheckpointHeader, crate::nn::ParamSet<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC_CKPT {
        return Err(format_err(path, "not a checkpoint file"));
    }
    let version = r.read_u8()?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_tag(r.read_u8()?)
        .ok_or_else(|| format_err(path, "unknown dtype tag"))?;
    if dtype != T::DTYPE {
        return Err(format_err(
            path,
            format!(
                "checkpoint stores {}-byte floats, loader expects {}-byte",
                dtype.byte_width(),
                T::DTYPE.byte_width()
            ),
        ));
    }
    let header_len = r.read_u32::<LittleEndian>()? as usize;
    let mut header_buf = vec![0u8; header_len];
    r.read_exact(&mut header_buf)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_buf)
        .map_err(|e| format_err(path, format!("header: {e}")))?;
    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    let mut params = crate::nn::ParamSet::<T>::new();
    for _ in 0..n_tensors {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| format_err(path, "tensor name not utf-8"))?;
        let ndim = r.read_u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut tensor = ArrayD::<T>::zeros(IxDyn(&dims));
        match dtype {
            Dtype::F32 => {
                let mut buf = vec![0f32; count];
                r.read_f32_into::<LittleEndian>(&mut buf)?;
                for (t, &v) in tensor.iter_mut().zip(&buf) {
                    *t = real::<T>(v as f64);
                }
            }
            Dtype::F64 => {
                let mut buf = vec![0f64; count];
                r.read_f64_into::<LittleEndian>(&mut buf)?;
                for (t, &v) in tensor.iter_mut().zip(&buf) {
                    *t = real::<T>(v);
                }
            }
        }
        params.register(name, tensor);
    }
    Ok((header, params))
}
