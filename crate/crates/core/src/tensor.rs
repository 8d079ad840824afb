//! Dense row-major tensors and the primitive kernels the rest of the crate builds on.
//!
//! Activations use `N, C, H, W` ordering and convolution kernels use
//! `Kout, Kin, Kh, Kw`. Every random fill goes through [`rng_from_seed`], which is
//! xoshiro256** seeded via SplitMix64, so buffers are reproducible across machines.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Uniform};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};

pub type Rng64 = Xoshiro256StarStar;

/// The one generator used for every random draw in the crate.
pub fn rng_from_seed(seed: u64) -> Rng64 {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Mixes a textual label into a seed (FNV-1a over the label, xor-folded with the seed).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix finalizer so nearby seeds decorrelate
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::Single => 1,
            Precision::Double => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Precision::Single),
            2 => Some(Precision::Double),
            _ => None,
        }
    }
}

/// Real scalar types a [`Tensor`] can hold.
pub trait Scalar: Float + Default + fmt::Debug + fmt::Display + Sum + Send + Sync + 'static {
    const PRECISION: Precision;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Every strided index must land inside its slice; [`gemm`] checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row/column strides of a matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major `rows x cols` matrix.
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }

    fn max_index(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Safe strided GEMM: `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c[m,n]`.
///
/// Single-threaded; for a fixed `k` every output element is accumulated in the
/// same order regardless of `m` and `n`, so results do not depend on batch size.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * lc.rs + j * lc.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(la.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.max_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: bounds checked above; strides are non-negative and slices do not alias
    // because `c` is borrowed mutably.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidShape(dims.to_vec()));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillSpec {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Gaussian { mean: f64, std: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    ArgMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::mismatch("tensor construction", dims, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn create(dims: &[usize], fill: FillSpec) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let data = match fill {
            FillSpec::Zeros => vec![T::zero(); n],
            FillSpec::Constant(x) => vec![T::from_f64(x); n],
            FillSpec::Uniform { lo, hi, seed } => {
                if lo.is_nan() || hi.is_nan() || lo >= hi {
                    return Err(Error::Config(format!("uniform fill needs lo < hi, got [{lo}, {hi})")));
                }
                let dist = Uniform::new(lo, hi).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = rng_from_seed(seed);
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
            FillSpec::Gaussian { mean, std, seed } => {
                let dist = Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = rng_from_seed(seed);
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    /// Zero tensor for internally computed shapes.
    ///
    /// Panics if a dimension is zero.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::create(dims, FillSpec::Zeros).expect("zero-sized tensor")
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let shape = Shape::new(dims).expect("zero-sized tensor");
        let n = shape.numel();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape(vec![1]), data: vec![value] }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let shape = Shape::new(dims).expect("zero-sized tensor");
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::mismatch("reshape", self.dims(), dims));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::mismatch("add_assign", self.dims(), other.dims()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Elementwise binary op. `b` must either match `a`'s shape or equal a
    /// trailing suffix of it (including the single-element scalar case).
    pub fn map_binary(&self, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
        let (ad, bd) = (self.dims(), b.dims());
        let broadcast_ok = b.len() == 1 || (bd.len() <= ad.len() && ad[ad.len() - bd.len()..] == *bd);
        if !broadcast_ok {
            return Err(Error::mismatch(&format!("{op:?}"), ad, bd));
        }
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => {
                if cfg!(debug_assertions) && y == T::zero() {
                    log::warn!("division by exact zero in map_binary");
                }
                x / y
            }
            BinaryOp::Max => {
                if y > x {
                    y
                } else {
                    x
                }
            }
        };
        let bl = b.len();
        let data = self.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % bl])).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ad, bd) = (self.dims(), b.dims());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::mismatch("matmul", ad, bd));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            Layout::row_major(k),
            &b.data,
            Layout::row_major(n),
            T::zero(),
            &mut out.data,
            Layout::row_major(n),
        );
        Ok(out)
    }

    /// Reduces over `axes`, removing them from the shape. A full reduction yields shape `[1]`.
    /// `ArgMax` takes exactly one axis and breaks ties toward the lowest index.
    pub fn reduce(&self, axes: &[usize], op: ReduceOp) -> Result<Tensor<T>> {
        let dims = self.dims();
        let rank = dims.len();
        for &ax in axes {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
        }
        if op == ReduceOp::ArgMax && axes.len() != 1 {
            return Err(Error::Config("argmax reduces exactly one axis".into()));
        }
        let reduced: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
        let out_dims: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| dims[d]).collect();
        let out_dims = if out_dims.is_empty() { vec![1] } else { out_dims };
        let out_len: usize = out_dims.iter().product();
        let count: usize = axes.iter().map(|&a| dims[a]).product();

        let mut acc = vec![
            match op {
                ReduceOp::Max | ReduceOp::ArgMax => T::neg_infinity(),
                _ => T::zero(),
            };
            out_len
        ];
        let mut arg = vec![0usize; out_len];
        let mut idx = vec![0usize; rank];
        for &x in &self.data {
            let mut o = 0;
            let mut r = 0;
            for d in 0..rank {
                if reduced[d] {
                    r = idx[d];
                } else {
                    o = o * dims[d] + idx[d];
                }
            }
            match op {
                ReduceOp::Sum | ReduceOp::Mean => acc[o] = acc[o] + x,
                ReduceOp::Max => {
                    if x > acc[o] {
                        acc[o] = x
                    }
                }
                ReduceOp::ArgMax => {
                    if x > acc[o] {
                        acc[o] = x;
                        arg[o] = r;
                    }
                }
            }
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < dims[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let data = match op {
            ReduceOp::Mean => {
                let c = T::from_f64(count as f64);
                acc.into_iter().map(|s| s / c).collect()
            }
            ReduceOp::ArgMax => arg.into_iter().map(|i| T::from_f64(i as f64)).collect(),
            _ => acc,
        };
        Tensor::new(&out_dims, data)
    }

    /// `PTNSR1` serialization: magic, precision code, rank, u32 extents, raw little-endian data.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"PTNSR1");
        out.push(T::PRECISION.code());
        out.push(self.shape.rank() as u8);
        for &d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.reserve(self.data.len() * T::BYTES);
        for &x in &self.data {
            x.write_le(out);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out);
        out
    }

    /// Decodes one tensor from `reader`, which tracks the byte offset for error reporting.
    pub fn read_from(reader: &mut ByteReader<'_>) -> Result<Self> {
        reader.expect_magic(b"PTNSR1")?;
        let code = reader.u8()?;
        let precision = Precision::from_code(code).ok_or_else(|| reader.error(format!("unknown precision code {code}")))?;
        if precision != T::PRECISION {
            return Err(reader.error(format!("tensor stored in {precision:?} precision, expected {:?}", T::PRECISION)));
        }
        let rank = reader.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(reader.u32()? as usize);
        }
        let shape = Shape::new(&dims).map_err(|e| reader.error(e.to_string()))?;
        let raw = reader.take(shape.numel() * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Tensor { shape, data })
    }
}

/// Cursor over a byte slice that reports failures with their byte offset.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("unexpected end of data: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let at = self.pos;
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::Parse { offset: at, msg: format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)) });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn utf8(&mut self, n: usize) -> Result<&'a str> {
        let at = self.pos;
        let raw = self.take(n)?;
        std::str::from_utf8(raw).map_err(|e| Error::Parse { offset: at, msg: e.to_string() })
    }
}

/// Reads a whole file and decodes tensors from it in sequence.
pub fn read_all(path: &std::path::Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a failed
/// run never leaves a truncated file behind.
pub fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path.file_name().ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp_name = format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id());
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => std::path::PathBuf::from(tmp_name),
    };
    let res = (|| -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res.map_err(Error::from)
}

/// Uniform draw in `[0, 1)`, used by samplers that only need a coin.
pub(crate) fn unit(rng: &mut Rng64) -> f64 {
    rng.random::<f64>()
}
