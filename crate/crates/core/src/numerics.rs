//! Deterministic dense-tensor kernels and seeded pseudo-randomness.
//!
//! All storage is f32, row-major, flat `Vec<f32>`. Kernels accumulate in a
//! fixed index order per output element so that cached-vs-uncached runs can
//! be compared bitwise.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("data length {got} does not match shape product {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("degenerate reference: current tensor has zero L1 norm")]
    DegenerateReference,
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("sctd format: {0}")]
    Sctd(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, rejecting shape/length mismatch and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NumericsError> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(NumericsError::LengthMismatch {
                got: data.len(),
                want,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(NumericsError::LengthMismatch {
                got: self.data.len(),
                want,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    fn dims2(&self) -> Result<(usize, usize), NumericsError> {
        if self.shape.len() != 2 {
            return Err(NumericsError::ShapeMismatch(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// c[i][j] = sum_p a[i][p] * b[p][j], p accumulated in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch(format!(
            "matmul inner dims {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    // i-p-j loop order: each c[i][j] still receives contributions in
    // ascending p, which is the mandated reduction order.
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// a [m x k] times b-transposed where b is [n x k]; result [m x n].
/// Reduction order per output element is ascending p, same as `matmul`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch(format!(
            "matmul_nt inner dims {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Numerically stable softmax along `axis`; each slice sums to 1.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    let rank = x.rank();
    if axis >= rank {
        return Err(NumericsError::InvalidAxis { axis, rank });
    }
    let axis_len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut maxv = f32::NEG_INFINITY;
            for a in 0..axis_len {
                maxv = maxv.max(out[base + a * inner]);
            }
            let mut sum = 0.0f32;
            for a in 0..axis_len {
                let e = (out[base + a * inner] - maxv).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= sum;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Per-row normalization over the last dimension: zero mean, unit population
/// variance. Affine-free; modulation is applied by the caller.
pub fn layer_norm(x: &Tensor, eps: f32) -> Result<Tensor, NumericsError> {
    let d = *x
        .shape
        .last()
        .ok_or_else(|| NumericsError::ShapeMismatch("layer_norm on scalar".into()))?;
    if d < 2 {
        return Err(NumericsError::ShapeMismatch(
            "layer_norm requires last dim >= 2".into(),
        ));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let denom = (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Tanh-approximation GELU applied elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub fn gelu_scalar(v: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_56;
    0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + 0.044715 * v * v * v)).tanh())
}

/// L1 relative error: sum|current - stale| / sum|current|.
pub fn rel_l1_error(current: &Tensor, stale: &Tensor) -> Result<f32, NumericsError> {
    if current.shape != stale.shape {
        return Err(NumericsError::ShapeMismatch(format!(
            "rel_l1_error shapes {:?} vs {:?}",
            current.shape, stale.shape
        )));
    }
    let denom: f32 = current.data.iter().map(|v| v.abs()).sum();
    if denom == 0.0 {
        return Err(NumericsError::DegenerateReference);
    }
    let num: f32 = current
        .data
        .iter()
        .zip(stale.data.iter())
        .map(|(c, s)| (c - s).abs())
        .sum();
    Ok(num / denom)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.shape != b.shape {
        return Err(NumericsError::ShapeMismatch(format!(
            "add shapes {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| x + y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Deterministic 64-bit generator (splitmix64 state transition).
///
/// Normal draws use Box-Muller on two uniform draws, one normal returned per
/// pair, so the draw sequence is reproducible from the seed alone.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    pub fn uniform(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }

    /// Standard normal via Box-Muller (cosine branch of one pair).
    pub fn normal(&mut self) -> f32 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor { shape, data }
    }

    /// Derive an independent stream for sub-tasks (samples, matrices).
    pub fn derive(&self, stream: u64) -> SeededRng {
        let mut mixer = SeededRng::new(self.state ^ stream.wrapping_mul(0xA076_1D64_78BD_642F));
        SeededRng::new(mixer.next_u64())
    }
}

const SCTD_MAGIC: &[u8; 4] = b"SCTD";
const SCTD_VERSION: u32 = 1;

/// Serialize a tensor in the SCTD dump format: magic `SCTD`, u32 version=1,
/// u32 ndim, ndim x u64 dims, f32 little-endian payload.
pub fn write_sctd<W: Write>(w: &mut W, t: &Tensor) -> Result<(), NumericsError> {
    w.write_all(SCTD_MAGIC)?;
    w.write_all(&SCTD_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_sctd<R: Read>(r: &mut R) -> Result<Tensor, NumericsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SCTD_MAGIC {
        return Err(NumericsError::Sctd(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != SCTD_VERSION {
        return Err(NumericsError::Sctd(format!(
            "unsupported version {version}, expected {SCTD_VERSION}"
        )));
    }
    r.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut b8 = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Tensor::new(shape, data)
}

pub fn save_sctd(path: &Path, t: &Tensor) -> Result<(), NumericsError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_sctd(&mut f, t)
}

pub fn load_sctd(path: &Path) -> Result<Tensor, NumericsError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_sctd(&mut f)
}
