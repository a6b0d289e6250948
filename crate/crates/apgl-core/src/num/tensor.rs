//! Dense row-major 64-bit tensors and the arithmetic kernels the model is
//! built from. Rank is 1..=3; a rank-3 tensor is treated as a stack of
//! matrices by the batched kernels.
//!
//! Accumulation order is fixed (ascending inner index) so results are
//! bit-reproducible and agree exactly with a naive triple-loop oracle.

use rand::Rng;

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[inline]
fn product(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(
            !dims.is_empty() && dims.len() <= 3,
            "tensor rank must be 1..=3, got {:?}",
            dims
        );
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; product(dims)],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            product(dims),
            data.len(),
            "shape mismatch: dims {:?} need {} values, got {}",
            dims,
            product(dims),
            data.len()
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn filled(dims: &[usize], v: f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; product(dims)],
        }
    }

    /// Seeded N(0, std^2) initialization.
    pub fn randn(dims: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = product(dims);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(standard_normal(rng) * std);
        }
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Number of rows when viewed as a matrix stack (all dims but the last).
    pub fn num_rows(&self) -> usize {
        product(&self.dims[..self.dims.len() - 1])
    }

    /// Length of the last dimension.
    pub fn row_len(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.dims[1] + j]
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Self {
        assert_eq!(
            product(dims),
            self.data.len(),
            "shape mismatch: cannot reshape {:?} into {:?}",
            self.dims,
            dims
        );
        self.dims = dims.to_vec();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.dims);
        self.data[0]
    }
}

/// Box-Muller draw; consumes two uniforms per sample.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}

fn assert_mat(t: &Tensor, what: &str) -> (usize, usize) {
    assert_eq!(
        t.rank(),
        2,
        "{what}: expected rank-2 tensor, got shape {:?}",
        t.dims
    );
    (t.dims[0], t.dims[1])
}

/// c[i][j] += sum_k a[i][k] * b[k][j], accumulated in ascending k order.
/// The ikj loop order keeps the inner loop contiguous while preserving the
/// same per-element summation order as the naive ijk loop.
fn matmul_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aip * bv;
            }
        }
    }
}

/// (m,k) x (k,n) -> (m,n)
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, ka) = assert_mat(a, "matmul lhs");
    let (kb, n) = assert_mat(b, "matmul rhs");
    assert_eq!(
        ka, kb,
        "matmul: inner dims disagree, lhs {:?} rhs {:?}",
        a.dims, b.dims
    );
    let mut c = Tensor::zeros(&[m, n]);
    matmul_into(&mut c.data, &a.data, &b.data, m, ka, n);
    c
}

/// (m,k) x (n,k)^T -> (m,n)
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, ka) = assert_mat(a, "matmul_nt lhs");
    let (n, kb) = assert_mat(b, "matmul_nt rhs");
    assert_eq!(
        ka, kb,
        "matmul_nt: inner dims disagree, lhs {:?} rhs {:?}",
        a.dims, b.dims
    );
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                s += x * y;
            }
            crow[j] = s;
        }
    }
    c
}

/// (k,m)^T x (k,n) -> (m,n)
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = assert_mat(a, "matmul_tn lhs");
    let (kb, n) = assert_mat(b, "matmul_tn rhs");
    assert_eq!(
        k, kb,
        "matmul_tn: outer dims disagree, lhs {:?} rhs {:?}",
        a.dims, b.dims
    );
    let mut c = Tensor::zeros(&[m, n]);
    // Accumulate rank-1 updates in ascending k order.
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c.data[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn batch_dims(t: &Tensor, what: &str) -> (usize, usize, usize) {
    assert_eq!(
        t.rank(),
        3,
        "{what}: expected rank-3 tensor, got shape {:?}",
        t.dims
    );
    (t.dims[0], t.dims[1], t.dims[2])
}

/// (B,m,k) x (B,k,n) -> (B,m,n)
pub fn bmatmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (ba, m, k) = batch_dims(a, "bmatmul lhs");
    let (bb, kb, n) = batch_dims(b, "bmatmul rhs");
    assert!(
        ba == bb && k == kb,
        "bmatmul: incompatible shapes lhs {:?} rhs {:?}",
        a.dims,
        b.dims
    );
    let mut c = Tensor::zeros(&[ba, m, n]);
    for bi in 0..ba {
        matmul_into(
            &mut c.data[bi * m * n..(bi + 1) * m * n],
            &a.data[bi * m * k..(bi + 1) * m * k],
            &b.data[bi * k * n..(bi + 1) * k * n],
            m,
            k,
            n,
        );
    }
    c
}

/// (B,m,k) x (B,n,k)^T -> (B,m,n)
pub fn bmatmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (ba, m, k) = batch_dims(a, "bmatmul_nt lhs");
    let (bb, n, kb) = batch_dims(b, "bmatmul_nt rhs");
    assert!(
        ba == bb && k == kb,
        "bmatmul_nt: incompatible shapes lhs {:?} rhs {:?}",
        a.dims,
        b.dims
    );
    let mut c = Tensor::zeros(&[ba, m, n]);
    for bi in 0..ba {
        let abase = bi * m * k;
        let bbase = bi * n * k;
        let cbase = bi * m * n;
        for i in 0..m {
            let arow = &a.data[abase + i * k..abase + (i + 1) * k];
            let crow = &mut c.data[cbase + i * n..cbase + (i + 1) * n];
            for j in 0..n {
                let brow = &b.data[bbase + j * k..bbase + (j + 1) * k];
                let mut s = 0.0;
                for (&x, &y) in arow.iter().zip(brow.iter()) {
                    s += x * y;
                }
                crow[j] = s;
            }
        }
    }
    c
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.dims, b.dims,
        "add: shape mismatch, lhs {:?} rhs {:?}",
        a.dims, b.dims
    );
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(b.data.iter()) {
        *o += v;
    }
    out
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.dims, b.dims,
        "sub: shape mismatch, lhs {:?} rhs {:?}",
        a.dims, b.dims
    );
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(b.data.iter()) {
        *o -= v;
    }
    out
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.dims, b.dims,
        "mul: shape mismatch, lhs {:?} rhs {:?}",
        a.dims, b.dims
    );
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(b.data.iter()) {
        *o *= v;
    }
    out
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        *o *= c;
    }
    out
}

/// a + c*b
pub fn add_scaled(a: &Tensor, b: &Tensor, c: f64) -> Tensor {
    assert_eq!(
        a.dims, b.dims,
        "add_scaled: shape mismatch, lhs {:?} rhs {:?}",
        a.dims, b.dims
    );
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(b.data.iter()) {
        *o += c * v;
    }
    out
}

pub fn relu(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        if *o < 0.0 {
            *o = 0.0;
        }
    }
    out
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        *o = sigmoid_scalar(*o);
    }
    out
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) = -softplus(-x), computed without overflow.
#[inline]
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        -((-x).exp()).ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row-wise softmax over the last dimension, shift-invariant.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    let w = out.row_len();
    for r in 0..out.num_rows() {
        let row = &mut out.data[r * w..(r + 1) * w];
        softmax_row_in_place(row);
    }
    out
}

pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Concatenate along the last dimension; all parts share leading dims.
pub fn concat_last_dim(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_last_dim: no parts");
    let rows = parts[0].num_rows();
    let lead = &parts[0].dims[..parts[0].rank() - 1];
    let mut total = 0;
    for p in parts {
        assert_eq!(
            &p.dims[..p.rank() - 1],
            lead,
            "concat_last_dim: leading dims disagree, {:?} vs {:?}",
            parts[0].dims,
            p.dims
        );
        total += p.row_len();
    }
    let mut dims = lead.to_vec();
    dims.push(total);
    let mut out = Tensor::zeros(&dims);
    for r in 0..rows {
        let orow = out.row_mut(r);
        let mut off = 0;
        for p in parts {
            let w = p.row_len();
            orow[off..off + w].copy_from_slice(p.row(r));
            off += w;
        }
    }
    out
}

/// Gather rows of a rank-2 table: out[i] = table[indices[i]].
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Tensor {
    let (rows, w) = assert_mat(table, "gather_rows table");
    let mut out = Tensor::zeros(&[indices.len(), w]);
    for (i, &idx) in indices.iter().enumerate() {
        assert!(
            idx < rows,
            "gather_rows: index {idx} out of bounds for table with {rows} rows"
        );
        out.row_mut(i).copy_from_slice(table.row(idx));
    }
    out
}

pub fn transpose2(a: &Tensor) -> Tensor {
    let (m, n) = assert_mat(a, "transpose2");
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    out
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims, b.dims, "max_abs_diff: {:?} vs {:?}", a.dims, b.dims);
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
