//! Dense rank-4 tensors, flow fields and their binary container.
//!
//! Binary layout (little-endian): the 8-byte magic `RLCTNSR1`, four `u32`
//! dims `(T, C, H, W)`, then `T*C*H*W` row-major `f32` values. Flow fields
//! are stored with `T = 1, C = 2` (u then v). In memory everything is `f64`,
//! so a write/read round trip is exact for values representable in `f32`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"RLCTNSR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct FeatureTensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for FeatureTensor {
    type Error = Error;

    fn try_from(r: RawTensor) -> Result<Self> {
        FeatureTensor::from_vec(r.dims, r.data)
    }
}

impl FeatureTensor {
    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor contains non-finite values"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [t, c, h, w] = dims;
        let mut data = Vec::with_capacity(t * c * h * w);
        for ti in 0..t {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ti, ci, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn t(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(t, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(t, c, y, x);
        self.data[i] = v;
    }

    /// Copy of temporal slice `t` as a `T = 1` tensor.
    pub fn frame(&self, t: usize) -> Result<FeatureTensor> {
        if t >= self.t() {
            return Err(Error::shape(format!(
                "frame {t} out of range for T = {}",
                self.t()
            )));
        }
        let n = self.c() * self.h() * self.w();
        Ok(FeatureTensor {
            dims: [1, self.c(), self.h(), self.w()],
            data: self.data[t * n..(t + 1) * n].to_vec(),
        })
    }

    /// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of every slice.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<FeatureTensor> {
        if y0 + h > self.h() || x0 + w > self.w() {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {:?}",
                self.dims
            )));
        }
        let [t, c, _, _] = self.dims;
        let mut data = Vec::with_capacity(t * c * h * w);
        for ti in 0..t {
            for ci in 0..c {
                for y in y0..y0 + h {
                    let row = self.index(ti, ci, y, x0);
                    data.extend_from_slice(&self.data[row..row + w]);
                }
            }
        }
        Ok(FeatureTensor {
            dims: [t, c, h, w],
            data,
        })
    }

    /// Concatenates tensors along the time axis.
    pub fn stack(frames: &[FeatureTensor]) -> Result<FeatureTensor> {
        let first = frames.first().ok_or(Error::Empty("tensors to stack"))?;
        let [_, c, h, w] = first.dims;
        let mut t = 0;
        let mut data = Vec::new();
        for f in frames {
            if f.dims[1..] != [c, h, w] {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    f.dims, first.dims
                )));
            }
            t += f.t();
            data.extend_from_slice(&f.data);
        }
        Ok(FeatureTensor {
            dims: [t, c, h, w],
            data,
        })
    }

    /// Concatenates along channels; all inputs share `T`, `H` and `W`.
    pub fn concat_channels(parts: &[&FeatureTensor]) -> Result<FeatureTensor> {
        let first = parts.first().ok_or(Error::Empty("tensors to concatenate"))?;
        let [t, _, h, w] = first.dims;
        for p in parts {
            if p.t() != t || p.h() != h || p.w() != w {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.dims, first.dims
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.c()).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(t * c * plane);
        for ti in 0..t {
            for p in parts {
                let n = p.c() * plane;
                data.extend_from_slice(&p.data[ti * n..(ti + 1) * n]);
            }
        }
        Ok(FeatureTensor {
            dims: [t, c, h, w],
            data,
        })
    }

    pub fn add(&self, other: &FeatureTensor) -> Result<FeatureTensor> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(FeatureTensor {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureTensor {
        FeatureTensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureTensor) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        for d in self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut dims = [0usize; 4];
        let mut word = [0u8; 4];
        for d in dims.iter_mut() {
            input.read_exact(&mut word)?;
            *d = u32::from_le_bytes(word) as usize;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        FeatureTensor::from_vec(dims, data)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Per-pixel motion `(u, v)` in pixels per frame, row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::shape(format!(
                "flow {height}x{width} needs {} values per component",
                height * width
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::invalid("flow contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            u,
            v,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::uniform(height, width, 0.0, 0.0)
    }

    pub fn uniform(height: usize, width: usize, u: f64, v: f64) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn set(&mut self, y: usize, x: usize, u: f64, v: f64) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn to_tensor(&self) -> FeatureTensor {
        let mut data = self.u.clone();
        data.extend_from_slice(&self.v);
        FeatureTensor {
            dims: [1, 2, self.height, self.width],
            data,
        }
    }

    pub fn from_tensor(t: &FeatureTensor) -> Result<Self> {
        if t.t() != 1 || t.c() != 2 {
            return Err(Error::shape(format!(
                "flow tensor must be (1, 2, H, W), got {:?}",
                t.dims()
            )));
        }
        let n = t.h() * t.w();
        Self::new(
            t.h(),
            t.w(),
            t.data()[..n].to_vec(),
            t.data()[n..].to_vec(),
        )
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_tensor().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_tensor(&FeatureTensor::load(path)?)
    }
}

/// Writes named tensors as consecutive sections: `u32` name length, UTF-8
/// name, then one tensor record.
pub fn write_sections<'a>(
    mut out: impl Write,
    sections: impl IntoIterator<Item = (&'a str, &'a FeatureTensor)>,
) -> Result<()> {
    for (name, tensor) in sections {
        let len = u32::try_from(name.len())
            .map_err(|_| Error::Format("section name too long".into()))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        tensor.write_to(&mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sections(mut input: impl Read) -> Result<Vec<(String, FeatureTensor)>> {
    let mut sections = Vec::new();
    loop {
        let mut word = [0u8; 4];
        match input.read_exact(&mut word) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(word) as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
        let tensor = FeatureTensor::read_from(&mut input)?;
        sections.push((name, tensor));
    }
    Ok(sections)
}
