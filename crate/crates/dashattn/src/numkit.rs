//! Dense f64 kernels, seeded RNG, and the binary tensor file format.
//!
//! Design points:
//! - All reference math runs in f64, row-major, with a deterministic
//!   accumulation order (per output element, ascending index).
//! - Randomness comes from ChaCha8 keyed by a 64-bit seed: a named,
//!   platform-independent counter-based generator, so every artifact is
//!   reproducible from `(config, seed)` alone.
//! - Tensor files carry the magic `DASHTNSR`, a u32 version (currently 1),
//!   a dtype byte (0 = f64, 1 = f32, 2 = u32), a dimension count byte,
//!   one u64 per dimension, then the row-major payload. All multi-byte
//!   values are little-endian.

use crate::{Error, Result};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from row-major data, rejecting length mismatches and non-finite
    /// entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {}x{} = {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from row-major data without the finiteness scan. Intended for
    /// internally computed values and for tests that poison entries on
    /// purpose.
    pub fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {}x{} = {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Matrix with iid standard normal entries drawn from `rng`.
    pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// `a * b` with the inner accumulation running over `k` in ascending order,
/// one output element per task, so the result is identical at any thread
/// count.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    if n == 0 || m == 0 {
        return Ok(out);
    }
    crate::parallel::for_each_row_mut(&mut out.data, n, |i, row| {
        let ar = a.row(i);
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += ar[t] * b.data[t * n + j];
            }
            row[j] = acc;
        }
    });
    Ok(out)
}

/// Numerically stable softmax of a slice: subtracts the max, exponentiates,
/// normalizes. The input must be non-empty and finite.
pub fn softmax_vec(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Domain("softmax of empty slice".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("softmax input contains non-finite entries".into()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    Ok(p)
}

/// Row-wise stable softmax with an optional boolean mask (true = keep).
/// Masked entries are exactly zero in the output. A row with every entry
/// masked is degenerate and returns an error naming the row.
pub fn row_softmax(z: &DenseMatrix, mask: Option<&[bool]>) -> Result<DenseMatrix> {
    if let Some(m) = mask {
        if m.len() != z.data.len() {
            return Err(Error::Shape(format!(
                "mask length {} vs matrix {}x{}",
                m.len(),
                z.rows,
                z.cols
            )));
        }
    }
    let cols = z.cols;
    let mut out = DenseMatrix::zeros(z.rows, cols);
    for i in 0..z.rows {
        let zr = z.row(i);
        let keep = |j: usize| mask.map_or(true, |m| m[i * cols + j]);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..cols {
            if keep(j) {
                mx = mx.max(zr[j]);
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let or = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..cols {
            if keep(j) {
                let e = (zr[j] - mx).exp();
                or[j] = e;
                sum += e;
            }
        }
        for j in 0..cols {
            if keep(j) {
                or[j] /= sum;
            }
        }
    }
    Ok(out)
}

/// Seeded ChaCha8 generator. Identical seeds produce identical streams on
/// every platform.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform draw from [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    /// Uniform draw from [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.0.sample(rand_distr::StandardNormal)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        use rand::seq::SliceRandom;
        xs.shuffle(&mut self.0);
    }
}

pub mod tensor {
    //! Binary tensor file I/O. See the module docs for the layout.

    use super::DenseMatrix;
    use crate::{Error, Result};
    use std::io::{Read, Write};
    use std::path::Path;

    pub const MAGIC: &[u8; 8] = b"DASHTNSR";
    pub const VERSION: u32 = 1;

    /// Element type codes stored in the header.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Dtype {
        F64 = 0,
        F32 = 1,
        U32 = 2,
    }

    impl Dtype {
        fn from_code(c: u8) -> Result<Self> {
            match c {
                0 => Ok(Dtype::F64),
                1 => Ok(Dtype::F32),
                2 => Ok(Dtype::U32),
                _ => Err(Error::Format(format!("unknown dtype code {c}"))),
            }
        }
    }

    fn write_header(w: &mut impl Write, dtype: Dtype, dims: &[usize]) -> Result<()> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("too many dimensions: {}", dims.len())));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[dtype as u8, dims.len() as u8])?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        Ok(())
    }

    fn read_header(r: &mut impl Read) -> Result<(Dtype, Vec<usize>)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(|_| Error::Format("truncated header".into()))?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut tb = [0u8; 2];
        r.read_exact(&mut tb).map_err(|_| Error::Format("truncated header".into()))?;
        let dtype = Dtype::from_code(tb[0])?;
        let ndim = tb[1] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut d = [0u8; 8];
            r.read_exact(&mut d).map_err(|_| Error::Format("truncated dims".into()))?;
            dims.push(u64::from_le_bytes(d) as usize);
        }
        Ok((dtype, dims))
    }

    fn check_len(dims: &[usize], len: usize) -> Result<()> {
        let expect: usize = dims.iter().product();
        if expect != len {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims, expect, len
            )));
        }
        Ok(())
    }

    pub fn write_f64(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
        check_len(dims, data.len())?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, Dtype::F64, dims)?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_f32(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
        check_len(dims, data.len())?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, Dtype::F32, dims)?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_u32(path: &Path, dims: &[usize], data: &[u32]) -> Result<()> {
        check_len(dims, data.len())?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, Dtype::U32, dims)?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    fn read_payload(path: &Path, want: Dtype) -> Result<(Vec<usize>, Vec<u8>)> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let (dtype, dims) = read_header(&mut r)?;
        if dtype != want {
            return Err(Error::Format(format!("dtype {:?}, expected {:?}", dtype, want)));
        }
        let count: usize = dims.iter().product();
        let width = match want {
            Dtype::F64 => 8,
            Dtype::F32 | Dtype::U32 => 4,
        };
        let mut buf = vec![0u8; count * width];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated payload".into()))?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok((dims, buf))
    }

    pub fn read_f64(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
        let (dims, buf) = read_payload(path, Dtype::F64)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }

    pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
        let (dims, buf) = read_payload(path, Dtype::F32)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }

    pub fn read_u32(path: &Path) -> Result<(Vec<usize>, Vec<u32>)> {
        let (dims, buf) = read_payload(path, Dtype::U32)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }

    /// Writes a matrix as a 2-d f64 tensor.
    pub fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
        write_f64(path, &[m.rows(), m.cols()], m.data())
    }

    /// Reads a 2-d f64 tensor back as a matrix.
    pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
        let (dims, data) = read_f64(path)?;
        if dims.len() != 2 {
            return Err(Error::Format(format!("expected 2-d tensor, got {}-d", dims.len())));
        }
        DenseMatrix::from_vec_unchecked(dims[0], dims[1], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Triple-loop reference multiply, kept deliberately naive.
    fn matmul_oracle(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Unnormalized-then-normalized softmax without max subtraction; only
    /// valid for small logits, which is what the oracle tests feed it.
    fn softmax_oracle(z: &[f64]) -> Vec<f64> {
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        z.iter().map(|v| v.exp() / s).collect()
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut eye = DenseMatrix::zeros(2, 2);
        eye.set(0, 0, 1.0);
        eye.set(1, 1, 1.0);
        let a = DenseMatrix::from_vec(2, 2, vec![3.0, -1.0, 2.5, 0.0]).unwrap();
        let prod = matmul(&eye, &a).unwrap();
        assert_eq!(prod, a, "I * A must equal A exactly");
    }

    #[test]
    fn matmul_hand_example() {
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DenseMatrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(7);
        let a = DenseMatrix::standard_normal(8, 5, &mut rng);
        let b = DenseMatrix::standard_normal(5, 9, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(4, 2);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_associativity_within_tolerance() {
        let mut rng = Rng::new(11);
        let a = DenseMatrix::standard_normal(16, 16, &mut rng);
        let b = DenseMatrix::standard_normal(16, 16, &mut rng);
        let c = DenseMatrix::standard_normal(16, 16, &mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let r = DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_symmetric_row_is_uniform() {
        let z = DenseMatrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let p = row_softmax(&z, None).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_extreme_logit_is_stable() {
        let z = DenseMatrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let p = row_softmax(&z, None).unwrap();
        assert!(p.data().iter().all(|v| v.is_finite()));
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = Rng::new(3);
        let z: Vec<f64> = (0..12).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let zm = DenseMatrix::from_vec(1, 12, z.clone()).unwrap();
        let got = row_softmax(&zm, None).unwrap();
        let want = softmax_oracle(&z);
        for j in 0..12 {
            assert!((got.get(0, j) - want[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let z = DenseMatrix::from_vec(1, 3, vec![5.0, 1.0, 2.0]).unwrap();
        let mask = vec![false, true, true];
        let p = row_softmax(&z, Some(&mask)).unwrap();
        assert_eq!(p.get(0, 0), 0.0);
        let s: f64 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn softmax_fully_masked_row_errors_with_row_index() {
        let z = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = vec![true, true, false, false];
        match row_softmax(&z, Some(&mask)) {
            Err(Error::DegenerateRow { row }) => assert_eq!(row, 1),
            other => panic!("expected degenerate row error, got {other:?}"),
        }
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn rng_different_seeds_differ() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let same = (0..16).filter(|_| a.uniform() == b.uniform()).count();
        assert!(same < 16);
    }

    #[test]
    fn tensor_round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut rng = Rng::new(5);
        let m = DenseMatrix::standard_normal(7, 3, &mut rng);
        tensor::write_matrix(&path, &m).unwrap();
        let back = tensor::read_matrix(&path).unwrap();
        assert_eq!(m.data().len(), back.data().len());
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "round trip must be bit-exact");
        }
    }

    #[test]
    fn tensor_zero_sized_matrix_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        let m = DenseMatrix::zeros(0, 0);
        tensor::write_matrix(&path, &m).unwrap();
        let back = tensor::read_matrix(&path).unwrap();
        assert_eq!(back.rows(), 0);
        assert_eq!(back.cols(), 0);
    }

    #[test]
    fn tensor_bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00\x00\x02").unwrap();
        assert!(matches!(tensor::read_matrix(&path), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let m = DenseMatrix::zeros(4, 4);
        tensor::write_matrix(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(tensor::read_matrix(&path), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_u32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.bin");
        let words = vec![33u32, 0, 0xdeadbeef];
        tensor::write_u32(&path, &[3], &words).unwrap();
        let (dims, back) = tensor::read_u32(&path).unwrap();
        assert_eq!(dims, vec![3]);
        assert_eq!(back, words);
    }
}
