//! Dense rank-5 feature tensors and the small matrix kernel everything else
//! is built on. No broadcasting: every shape mismatch is a hard error so
//! pipeline bugs surface at the first bad call.
//!
//! Feature tensors are indexed `(clip n, time t, row i, col j, channel c)`
//! and stored row-major in exactly that order. All arithmetic is f64; the
//! dtype tag only controls on-disk precision.

use crate::error::{Error, Result};
use crate::tube::TubeIndex;

/// Logical dimensions of a feature tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn new(n: usize, t: usize, h: usize, w: usize, c: usize) -> Dims {
        Dims { n, t, h, w, c }
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.n * self.t * self.h * self.w * self.c
    }

    /// Number of grid positions, i.e. N*T*H*W.
    pub fn positions(&self) -> usize {
        self.n * self.t * self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 || self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(Error::Shape(format!("all dims must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Scalar precision used when a tensor is serialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(&self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Dtype> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Rank-5 real array over (clip, time, row, col, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    dims: Dims,
    dtype: Dtype,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<FeatureTensor> {
        FeatureTensor::with_dtype(dims, data, Dtype::F64)
    }

    pub fn with_dtype(dims: Dims, data: Vec<f64>, dtype: Dtype) -> Result<FeatureTensor> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                dims.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite tensor element {bad}")));
        }
        Ok(FeatureTensor { dims, dtype, data })
    }

    pub fn zeros(dims: Dims) -> Result<FeatureTensor> {
        dims.validate()?;
        Ok(FeatureTensor {
            dims,
            dtype: Dtype::F64,
            data: vec![0.0; dims.len()],
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn set_dtype(&mut self, dtype: Dtype) {
        self.dtype = dtype;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Flat offset of the channel vector at a grid position.
    fn base(&self, n: usize, t: usize, i: usize, j: usize) -> usize {
        let d = &self.dims;
        debug_assert!(n < d.n && t < d.t && i < d.h && j < d.w);
        (((n * d.t + t) * d.h + i) * d.w + j) * d.c
    }

    pub fn get(&self, n: usize, t: usize, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.base(n, t, i, j) + c]
    }

    /// The C-vector stored at one grid position.
    pub fn channels(&self, n: usize, t: usize, i: usize, j: usize) -> &[f64] {
        let b = self.base(n, t, i, j);
        &self.data[b..b + self.dims.c]
    }

    pub fn channels_mut(&mut self, n: usize, t: usize, i: usize, j: usize) -> &mut [f64] {
        let b = self.base(n, t, i, j);
        let c = self.dims.c;
        &mut self.data[b..b + c]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite tensor element {bad}")));
        }
        Ok(())
    }
}

/// Row-major 2-D matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix element {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Running multiply-accumulate count for one kernel invocation.
#[derive(Debug, Default)]
pub struct MacCounter {
    macs: u64,
}

impl MacCounter {
    pub fn new() -> MacCounter {
        MacCounter { macs: 0 }
    }

    pub fn add(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn total(&self) -> u64 {
        self.macs
    }
}

/// `a * b`, summing over the inner index in ascending order per output element.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut counter = MacCounter::new();
    matmul_counted(a, b, &mut counter)
}

pub fn matmul_counted(a: &Matrix, b: &Matrix, counter: &mut MacCounter) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // ikj order: per output element the k-sum still runs ascending.
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
            counter.add(b.cols as u64);
        }
    }
    Ok(out)
}

/// `a * b^T`; both operands row-major, so every output element is a dot of
/// two contiguous rows.
pub(crate) fn matmul_nt(a: &Matrix, b: &Matrix, counter: &mut MacCounter) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt: {}x{} * ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b.row(j)) {
                acc += av * bv;
            }
            out.data[i * b.rows + j] = acc;
            counter.add(a.cols as u64);
        }
    }
    Ok(out)
}

/// `a^T * b`.
pub(crate) fn matmul_tn(a: &Matrix, b: &Matrix, counter: &mut MacCounter) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn: ({}x{})^T * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = &a.data[k * a.cols..(k + 1) * a.cols];
        let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
        for (i, av) in a_row.iter().enumerate() {
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
            counter.add(b.cols as u64);
        }
    }
    Ok(out)
}

/// Materialize the tube's feature vectors as a |tube| x C matrix, rows in
/// canonical (n, t, i, j) ascending order.
pub fn gather_positions(x: &FeatureTensor, tube: &TubeIndex) -> Result<Matrix> {
    check_tube_dims(x, tube)?;
    let c = x.dims.c;
    let mut data = Vec::with_capacity(tube.total() * c);
    for (n, t, i, j) in tube.iter_positions() {
        data.extend_from_slice(x.channels(n, t, i, j));
    }
    Ok(Matrix {
        rows: tube.total(),
        cols: c,
        data,
    })
}

/// Add `rows[k]` onto the k-th tube position of `x`; all other positions are
/// copied bit-for-bit.
pub fn scatter_add(x: &FeatureTensor, tube: &TubeIndex, rows: &Matrix) -> Result<FeatureTensor> {
    check_tube_dims(x, tube)?;
    if rows.rows != tube.total() || rows.cols != x.dims.c {
        return Err(Error::Shape(format!(
            "scatter_add: rows {}x{} vs tube total {} and C {}",
            rows.rows,
            rows.cols,
            tube.total(),
            x.dims.c
        )));
    }
    let mut out = x.clone();
    for (k, (n, t, i, j)) in tube.iter_positions().enumerate() {
        let dst = out.channels_mut(n, t, i, j);
        for (d, r) in dst.iter_mut().zip(rows.row(k)) {
            *d += r;
        }
    }
    out.check_finite()?;
    Ok(out)
}

/// Element-wise mean over the clip axis, yielding dims (1, T, H, W, C).
///
/// Per element the N clip values are summed in value order (total order on
/// f64), so the result is exactly invariant to clip permutation.
pub fn clip_mean(h: &FeatureTensor) -> Result<FeatureTensor> {
    let d = h.dims;
    let out_dims = Dims::new(1, d.t, d.h, d.w, d.c);
    let stride = d.t * d.h * d.w * d.c;
    let mut data = vec![0.0; stride];
    let mut vals = vec![0.0; d.n];
    for (e, slot) in data.iter_mut().enumerate() {
        for (n, v) in vals.iter_mut().enumerate() {
            *v = h.data[n * stride + e];
        }
        vals.sort_by(f64::total_cmp);
        *slot = vals.iter().sum::<f64>() / d.n as f64;
    }
    FeatureTensor::with_dtype(out_dims, data, h.dtype)
}

fn check_tube_dims(x: &FeatureTensor, tube: &TubeIndex) -> Result<()> {
    let d = x.dims;
    if (d.n, d.t, d.h, d.w) != tube.grid_dims() {
        return Err(Error::Shape(format!(
            "tube grid {:?} does not match tensor dims ({}, {}, {}, {})",
            tube.grid_dims(),
            d.n,
            d.t,
            d.h,
            d.w
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tube::TubeIndex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, dims: Dims) -> FeatureTensor {
        let data = (0..dims.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureTensor::new(dims, data).unwrap()
    }

    fn random_tube(rng: &mut ChaCha8Rng, n: usize, t: usize, h: usize, w: usize) -> TubeIndex {
        let mut masks = Vec::new();
        for _ in 0..n * t {
            masks.push((0..h * w).map(|_| rng.gen_bool(0.4)).collect::<Vec<bool>>());
        }
        TubeIndex::from_masks(n, t, h, w, masks).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = matmul(&Matrix::identity(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let out = matmul(&a, &b).unwrap();
        // independent naive ijk oracle
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(out.get(i, j), acc, "element ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 5, 6);
        let mut c1 = MacCounter::new();
        let nt = matmul_nt(&a, &b, &mut c1).unwrap();
        let via_t = matmul(&a, &b.transpose()).unwrap();
        for (x, y) in nt.data().iter().zip(via_t.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = random_matrix(&mut rng, 4, 3);
        let mut c2 = MacCounter::new();
        let tn = matmul_tn(&a, &c, &mut c2).unwrap();
        let via_t2 = matmul(&a.transpose(), &c).unwrap();
        for (x, y) in tn.data().iter().zip(via_t2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(c1.total(), 4 * 5 * 6);
        assert_eq!(c2.total(), 6 * 4 * 3);
    }

    #[test]
    fn gather_full_tube_flattens_grid() {
        let dims = Dims::new(1, 1, 2, 2, 3);
        let data: Vec<f64> = (0..dims.len()).map(|v| v as f64).collect();
        let x = FeatureTensor::new(dims, data.clone()).unwrap();
        let tube = TubeIndex::full(1, 1, 2, 2);
        let m = gather_positions(&x, &tube).unwrap();
        assert_eq!(m.rows(), 4);
        assert_eq!(m.cols(), 3);
        assert_eq!(m.data(), &data[..]);
    }

    #[test]
    fn gather_empty_tube() {
        let dims = Dims::new(1, 1, 2, 2, 3);
        let x = FeatureTensor::zeros(dims).unwrap();
        let tube = TubeIndex::empty(1, 1, 2, 2);
        let m = gather_positions(&x, &tube).unwrap();
        assert_eq!(m.rows(), 0);
        assert_eq!(m.cols(), 3);
    }

    #[test]
    fn gather_matches_per_position_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = Dims::new(2, 3, 4, 4, 5);
        let x = random_tensor(&mut rng, dims);
        let tube = random_tube(&mut rng, 2, 3, 4, 4);
        let m = gather_positions(&x, &tube).unwrap();
        let mut k = 0;
        for n in 0..2 {
            for t in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        if tube.contains(n, t, i, j) {
                            assert_eq!(m.row(k), x.channels(n, t, i, j));
                            k += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(k, tube.total());
    }

    #[test]
    fn scatter_zero_rows_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = Dims::new(2, 2, 3, 3, 4);
        let x = random_tensor(&mut rng, dims);
        let tube = random_tube(&mut rng, 2, 2, 3, 3);
        let zeros = Matrix::zeros(tube.total(), 4);
        let out = scatter_add(&x, &tube, &zeros).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn scatter_then_gather_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = Dims::new(1, 2, 3, 3, 2);
        let x = random_tensor(&mut rng, dims);
        let tube = random_tube(&mut rng, 1, 2, 3, 3);
        let rows = random_matrix(&mut rng, tube.total(), 2);
        let orig = gather_positions(&x, &tube).unwrap();
        let out = scatter_add(&x, &tube, &rows).unwrap();
        let back = gather_positions(&out, &tube).unwrap();
        for k in 0..tube.total() {
            for c in 0..2 {
                assert_eq!(back.get(k, c), orig.get(k, c) + rows.get(k, c));
            }
        }
    }

    #[test]
    fn scatter_matches_index_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = Dims::new(2, 2, 2, 2, 3);
        let x = random_tensor(&mut rng, dims);
        let tube = random_tube(&mut rng, 2, 2, 2, 2);
        let rows = random_matrix(&mut rng, tube.total(), 3);
        let out = scatter_add(&x, &tube, &rows).unwrap();
        let mut k = 0;
        for n in 0..2 {
            for t in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        for c in 0..3 {
                            let expect = if tube.contains(n, t, i, j) {
                                x.get(n, t, i, j, c) + rows.get(k, c)
                            } else {
                                x.get(n, t, i, j, c)
                            };
                            assert_eq!(out.get(n, t, i, j, c), expect);
                        }
                        if tube.contains(n, t, i, j) {
                            k += 1;
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn clip_mean_single_clip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, Dims::new(1, 2, 3, 3, 2));
        let out = clip_mean(&x).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn clip_mean_hand_case() {
        let dims = Dims::new(2, 1, 1, 1, 2);
        let x = FeatureTensor::new(dims, vec![2.0, 2.0, 4.0, 4.0]).unwrap();
        let out = clip_mean(&x).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0]);
    }

    #[test]
    fn clip_mean_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = Dims::new(10, 2, 3, 3, 4);
        let x = random_tensor(&mut rng, dims);
        let out = clip_mean(&x).unwrap();
        let stride = 2 * 3 * 3 * 4;
        for e in 0..stride {
            let mut acc = 0.0;
            for n in 0..10 {
                acc += x.data()[n * stride + e];
            }
            let expect = acc / 10.0;
            assert!((out.data()[e] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_mean_permutation_invariant_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = Dims::new(5, 1, 2, 2, 3);
        let x = random_tensor(&mut rng, dims);
        let stride = dims.len() / 5;
        // rotate the clip axis by two
        let mut permuted = vec![0.0; dims.len()];
        for n in 0..5 {
            let src = &x.data()[n * stride..(n + 1) * stride];
            permuted[((n + 2) % 5) * stride..((n + 2) % 5 + 1) * stride].copy_from_slice(src);
        }
        let y = FeatureTensor::new(dims, permuted).unwrap();
        assert_eq!(clip_mean(&x).unwrap().data(), clip_mean(&y).unwrap().data());
    }

    #[test]
    fn tensor_rejects_non_finite() {
        let dims = Dims::new(1, 1, 1, 1, 2);
        assert!(FeatureTensor::new(dims, vec![1.0, f64::NAN]).is_err());
        assert!(FeatureTensor::new(dims, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn tensor_rejects_bad_length_and_zero_dims() {
        assert!(FeatureTensor::new(Dims::new(1, 1, 1, 1, 2), vec![1.0]).is_err());
        assert!(FeatureTensor::zeros(Dims::new(0, 1, 1, 1, 2)).is_err());
    }
}
