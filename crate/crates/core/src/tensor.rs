//! Dense matrices and third-order tensors.
//!
//! `Tensor3` stores entries with the first index varying fastest, so that
//! `vec(Z ×₁ U₁ ×₂ U₂ ×₃ U₃) = (U₃ ⊗ U₂ ⊗ U₁) vec(Z)` holds with `vec` being a
//! plain copy of the storage. All inference code relies on this identity.

use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("ragged rows");
        }
        Self::new(
            r,
            c,
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
    }

    pub fn diag(values: &[f64]) -> Self {
        Self::from_fn(values.len(), values.len(), |i, j| {
            if i == j {
                values[i]
            } else {
                0.0
            }
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self[(i, l)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(l);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return shape_err(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Mat, s: f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return shape_err(format!("add {:?} and {:?}", self.shape(), other.shape()));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        })
    }

    pub fn frob_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn dot(&self, other: &Mat) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Squared Euclidean norm of every row.
    pub fn row_norms_sq(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x * x).sum())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Dense third-order tensor, first index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let len = dims.iter().product::<usize>();
        if data.len() != len {
            return shape_err(format!(
                "tensor {:?} needs {} entries, got {}",
                dims,
                len,
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`Tensor3::offset`].
    #[inline]
    pub fn index_of(&self, offset: usize) -> (usize, usize, usize) {
        let i = offset % self.dims[0];
        let rest = offset / self.dims[0];
        (i, rest % self.dims[1], rest / self.dims[1])
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Tensor3, s: f64) -> Result<Tensor3> {
        if self.dims != other.dims {
            return shape_err(format!("add {:?} and {:?}", self.dims, other.dims));
        }
        Ok(Tensor3 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        self.map(|x| x * s)
    }

    pub fn frob_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn dot(&self, other: &Tensor3) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Frontal slice `k` as a `dims[0] x dims[1]` matrix.
    pub fn slice(&self, k: usize) -> Mat {
        Mat::from_fn(self.dims[0], self.dims[1], |i, j| self.get(i, j, k))
    }
}

fn check_mode(mode: usize) -> Result<usize> {
    match mode {
        1..=3 => Ok(mode - 1),
        _ => Err(Error::Shape(format!("mode must be 1, 2 or 3, got {mode}"))),
    }
}

/// Mode-`mode` product `t ×_mode m` (modes are 1-based).
pub fn mode_product(t: &Tensor3, m: &Mat, mode: usize) -> Result<Tensor3> {
    let axis = check_mode(mode)?;
    let d = t.dims;
    if m.cols() != d[axis] {
        return shape_err(format!(
            "mode-{} product: matrix has {} columns but tensor mode size is {}",
            mode,
            m.cols(),
            d[axis]
        ));
    }
    let mut out_dims = d;
    out_dims[axis] = m.rows();
    let mut out = Tensor3::zeros(out_dims);
    let r = m.rows();
    match axis {
        0 => {
            // each mode-1 fibre is contiguous
            for jk in 0..d[1] * d[2] {
                let src = &t.data[jk * d[0]..(jk + 1) * d[0]];
                let dst = &mut out.data[jk * r..(jk + 1) * r];
                for (a, slot) in dst.iter_mut().enumerate() {
                    *slot = m.row(a).iter().zip(src).map(|(x, y)| x * y).sum();
                }
            }
        }
        1 => {
            for k in 0..d[2] {
                for a in 0..r {
                    let coeffs = m.row(a);
                    let dst_base = d[0] * (a + r * k);
                    for (j, &c) in coeffs.iter().enumerate() {
                        if c == 0.0 {
                            continue;
                        }
                        let src_base = d[0] * (j + d[1] * k);
                        for i in 0..d[0] {
                            out.data[dst_base + i] += c * t.data[src_base + i];
                        }
                    }
                }
            }
        }
        _ => {
            let plane = d[0] * d[1];
            for a in 0..r {
                let coeffs = m.row(a);
                for (k, &c) in coeffs.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let src = &t.data[k * plane..(k + 1) * plane];
                    let dst = &mut out.data[a * plane..(a + 1) * plane];
                    for (x, y) in dst.iter_mut().zip(src) {
                        *x += c * y;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Tucker reconstruction `core ×₁ u1 ×₂ u2 ×₃ u3`.
pub fn tucker3(core: &Tensor3, u1: &Mat, u2: &Mat, u3: &Mat) -> Result<Tensor3> {
    // contract the mode that shrinks the most first; the result is the same
    let t = mode_product(core, u3, 3)?;
    let t = mode_product(&t, u2, 2)?;
    mode_product(&t, u1, 1)
}

/// Kronecker product.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Mat::from_fn(ar * br, ac * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

/// Vectorization with the first index fastest.
pub fn vec(t: &Tensor3) -> Vec<f64> {
    t.data.clone()
}

pub fn unvec(v: &[f64], dims: [usize; 3]) -> Result<Tensor3> {
    Tensor3::new(dims, v.to_vec())
}

/// Contraction of two tensors over every mode except `mode`:
/// `out[x, y] = Σ w[.., x, ..] p[.., y, ..]`.
pub fn mode_gram(w: &Tensor3, p: &Tensor3, mode: usize) -> Result<Mat> {
    let axis = check_mode(mode)?;
    let (dw, dp) = (w.dims, p.dims);
    for ax in 0..3 {
        if ax != axis && dw[ax] != dp[ax] {
            return shape_err(format!("mode_gram over mode {mode}: dims {dw:?} vs {dp:?}"));
        }
    }
    let mut out = Mat::zeros(dw[axis], dp[axis]);
    match axis {
        0 => {
            for jk in 0..dw[1] * dw[2] {
                let wf = &w.data[jk * dw[0]..(jk + 1) * dw[0]];
                let pf = &p.data[jk * dp[0]..(jk + 1) * dp[0]];
                for (x, &wv) in wf.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let row = &mut out.data[x * dp[0]..(x + 1) * dp[0]];
                    for (o, &pv) in row.iter_mut().zip(pf) {
                        *o += wv * pv;
                    }
                }
            }
        }
        1 => {
            for k in 0..dw[2] {
                for x in 0..dw[1] {
                    let wb = dw[0] * (x + dw[1] * k);
                    for y in 0..dp[1] {
                        let pb = dp[0] * (y + dp[1] * k);
                        let s: f64 = (0..dw[0]).map(|i| w.data[wb + i] * p.data[pb + i]).sum();
                        out[(x, y)] += s;
                    }
                }
            }
        }
        _ => {
            let plane = dw[0] * dw[1];
            for x in 0..dw[2] {
                let wp = &w.data[x * plane..(x + 1) * plane];
                for y in 0..dp[2] {
                    let pp = &p.data[y * plane..(y + 1) * plane];
                    out[(x, y)] = wp.iter().zip(pp).map(|(a, b)| a * b).sum();
                }
            }
        }
    }
    Ok(out)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    if !m.is_square() {
        return shape_err(format!(
            "spectral radius of non-square {}x{} matrix",
            m.rows(),
            m.cols()
        ));
    }
    if m.rows() == 0 {
        return Ok(0.0);
    }
    let eig = m.to_nalgebra().complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.rows() == 0 || m.cols() == 0 {
        return 0.0;
    }
    m.to_nalgebra().singular_values().max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Tensor3 {
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn brute_mode_product(t: &Tensor3, m: &Mat, mode: usize) -> Tensor3 {
        let d = t.dims();
        let mut od = d;
        od[mode - 1] = m.rows();
        Tensor3::from_fn(od, |a, b, c| {
            let mut s = 0.0;
            for l in 0..d[mode - 1] {
                s += match mode {
                    1 => m[(a, l)] * t.get(l, b, c),
                    2 => m[(b, l)] * t.get(a, l, c),
                    _ => m[(c, l)] * t.get(a, b, l),
                };
            }
            s
        })
    }

    #[test]
    fn mode_product_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_tensor(&mut rng, [3, 4, 2]);
        for mode in 1..=3 {
            let n = t.dims()[mode - 1];
            assert_eq!(mode_product(&t, &Mat::identity(n), mode).unwrap(), t);
            let m = rand_mat(&mut rng, 5, n);
            let z = mode_product(&Tensor3::zeros(t.dims()), &m, mode).unwrap();
            assert!(z.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mode_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = rand_tensor(&mut rng, [2, 3, 2]);
        let m = rand_mat(&mut rng, 4, 2);
        let fast = mode_product(&t, &m, 1).unwrap();
        let slow = brute_mode_product(&t, &m, 1);
        assert_eq!(fast.dims(), [4, 3, 2]);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
        for mode in 2..=3 {
            let m = rand_mat(&mut rng, 3, t.dims()[mode - 1]);
            let fast = mode_product(&t, &m, mode).unwrap();
            assert!(fast.max_abs_diff(&brute_mode_product(&t, &m, mode)) < 1e-12);
        }
    }

    #[test]
    fn mode_product_shape_error_names_mode() {
        let t = Tensor3::zeros([2, 3, 4]);
        let err = mode_product(&t, &Mat::zeros(2, 2), 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("mode-2"), "{err}");
        assert!(mode_product(&t, &Mat::zeros(2, 2), 4).is_err());
    }

    #[test]
    fn tucker_identity_returns_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let core = rand_tensor(&mut rng, [2, 3, 2]);
        let out = tucker3(
            &core,
            &Mat::identity(2),
            &Mat::identity(3),
            &Mat::identity(2),
        )
        .unwrap();
        assert_eq!(out, core);
    }

    #[test]
    fn tucker_rank_one_matches_double_sum() {
        // m = 1, K = 1: gamma_ij = c_i * z * c_j * c2
        let c1 = Mat::new(3, 1, vec![0.3, 1.2, 0.7]).unwrap();
        let c2 = Mat::new(1, 1, vec![-0.8]).unwrap();
        let z = Tensor3::new([1, 1, 1], vec![1.7]).unwrap();
        let g = tucker3(&z, &c1, &c1, &c2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = c1[(i, 0)] * 1.7 * c1[(j, 0)] * -0.8;
                assert!((g.get(i, j, 0) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tucker_matches_kronecker_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let core = rand_tensor(&mut rng, [3, 3, 2]);
        let c1 = rand_mat(&mut rng, 4, 3);
        let c2 = rand_mat(&mut rng, 2, 2);
        let lhs = vec(&tucker3(&core, &c1, &c1, &c2).unwrap());
        let big = kron(&kron(&c2, &c1), &c1);
        let rhs = big.matvec(&vec(&core)).unwrap();
        let err = lhs
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn kron_small_cases() {
        assert_eq!(kron(&Mat::identity(2), &Mat::identity(3)), Mat::identity(6));
        let b = Mat::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        assert_eq!(kron(&Mat::new(1, 1, vec![2.0]).unwrap(), &b), b.scale(2.0));
    }

    #[test]
    fn kron_mixed_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, c, d) = (
            rand_mat(&mut rng, 2, 2),
            rand_mat(&mut rng, 2, 2),
            rand_mat(&mut rng, 2, 2),
            rand_mat(&mut rng, 2, 2),
        );
        let lhs = kron(&a, &b).matmul(&kron(&c, &d)).unwrap();
        let rhs = kron(&a.matmul(&c).unwrap(), &b.matmul(&d).unwrap());
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn vec_unvec() {
        let t = Tensor3::new([1, 1, 1], vec![4.25]).unwrap();
        assert_eq!(vec(&t), vec![4.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = rand_tensor(&mut rng, [3, 2, 4]);
        assert_eq!(unvec(&vec(&t), t.dims()).unwrap(), t);
        assert!(unvec(&[1.0, 2.0], [3, 1, 1]).is_err());
    }

    #[test]
    fn mode_gram_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_tensor(&mut rng, [3, 4, 2]);
        for mode in 1..=3 {
            let mut pd = w.dims();
            pd[mode - 1] = 2;
            let p = rand_tensor(&mut rng, pd);
            let g = mode_gram(&w, &p, mode).unwrap();
            let d = w.dims();
            for x in 0..d[mode - 1] {
                for y in 0..2 {
                    let mut s = 0.0;
                    for a in 0..d[0] {
                        for b in 0..d[1] {
                            for c in 0..d[2] {
                                let (wi, pi) = match mode {
                                    1 if a == x => (w.get(a, b, c), p.get(y, b, c)),
                                    2 if b == x => (w.get(a, b, c), p.get(a, y, c)),
                                    3 if c == x => (w.get(a, b, c), p.get(a, b, y)),
                                    _ => (0.0, 0.0),
                                };
                                s += wi * pi;
                            }
                        }
                    }
                    assert!((g[(x, y)] - s).abs() < 1e-12);
                }
            }
        }
    }

    fn power_iteration_radius(m: &Mat) -> f64 {
        // symmetric input: power iteration on m converges to the dominant |eigenvalue|
        let n = m.rows();
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w = m.matvec(&v).unwrap();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / norm).collect();
        }
        lambda
    }

    #[test]
    fn spectral_radius_cases() {
        assert!((spectral_radius(&Mat::identity(3)).unwrap() - 1.0).abs() < 1e-12);
        assert!((spectral_radius(&Mat::diag(&[0.5, -0.9])).unwrap() - 0.9).abs() < 1e-12);
        assert!(spectral_radius(&Mat::zeros(2, 3)).is_err());

        // a rotation has complex eigenvalues of modulus 1
        let rot = Mat::from_rows(&[&[0.0, -0.8], &[0.8, 0.0]]).unwrap();
        assert!((spectral_radius(&rot).unwrap() - 0.8).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = rand_mat(&mut rng, 5, 5);
        let sym = r.add_scaled(&r.transpose(), 1.0).unwrap();
        let want = power_iteration_radius(&sym);
        assert!((spectral_radius(&sym).unwrap() - want).abs() < 1e-8);
    }

    proptest::proptest! {
        #[test]
        fn mode_product_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, mode in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4)];
            let t = rand_tensor(&mut rng, dims);
            let s = rand_tensor(&mut rng, dims);
            let m = rand_mat(&mut rng, 3, dims[mode - 1]);
            let comb = t.scale(alpha).add_scaled(&s, beta).unwrap();
            let lhs = mode_product(&comb, &m, mode).unwrap();
            let rhs = mode_product(&t, &m, mode).unwrap().scale(alpha)
                .add_scaled(&mode_product(&s, &m, mode).unwrap(), beta).unwrap();
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn vec_round_trip_is_bitwise(data in proptest::collection::vec(proptest::num::f64::NORMAL, 12)) {
            let t = Tensor3::new([2, 3, 2], data).unwrap();
            let back = unvec(&vec(&t), t.dims()).unwrap();
            proptest::prop_assert!(back.as_slice().iter().zip(t.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
