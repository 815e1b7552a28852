//! Differentiable operations on [`Value`].
//!
//! Shapes are explicit: the only broadcast is the row-wise bias add.

use std::rc::Rc;

use super::tensor::{pairwise_sum, Tensor};
use super::value::Value;
use crate::error::{Error, Result};

/// Minimum norm accepted by [`Value::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

fn mat_dims(op: &'static str, v: &Value) -> Result<(usize, usize)> {
    v.data()
        .matrix_dims()
        .ok_or_else(|| Error::shape(op, format!("expected a matrix, got {:?}", v.shape())))
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Row-major (rows x cols) has strides (cols, 1); a transposed view swaps them.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer sizes are checked by the callers against m, k, n and the
    // strides describe views that stay inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Value {
    pub fn matmul(&self, other: &Value) -> Result<Value> {
        let (m, k) = mat_dims("matmul", self)?;
        let (k2, n) = mat_dims("matmul", other)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.values(), false, other.values(), false, &mut out, 0.0);
        let data = Tensor::new(vec![m, n], out)?;
        Ok(Value::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps| {
                let (a, b) = (&ps[0], &ps[1]);
                if a.requires_grad() {
                    // dA = G * B^T
                    a.accumulate_with(|acc| gemm(m, n, k, g, false, b.values(), true, acc, 1.0));
                }
                if b.requires_grad() {
                    // dB = A^T * G
                    b.accumulate_with(|acc| gemm(k, m, n, a.values(), true, g, false, acc, 1.0));
                }
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Value> {
        let (m, n) = mat_dims("transpose", self)?;
        let src = self.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(Value::from_op(
            Tensor::new(vec![n, m], out)?,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }),
        ))
    }

    fn zip_same(
        &self,
        other: &Value,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Value) -> Result<Value> {
        let data = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(Value::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                ps[0].accumulate(g);
                ps[1].accumulate(g);
            }),
        ))
    }

    pub fn sub(&self, other: &Value) -> Result<Value> {
        let data = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(Value::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                ps[0].accumulate(g);
                ps[1].accumulate_with(|acc| acc.iter_mut().zip(g).for_each(|(a, b)| *a -= b));
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Value) -> Result<Value> {
        let data = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(Value::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                let (a, b) = (&ps[0], &ps[1]);
                a.accumulate_with(|acc| {
                    for ((o, gi), bi) in acc.iter_mut().zip(g).zip(b.values()) {
                        *o += gi * bi;
                    }
                });
                b.accumulate_with(|acc| {
                    for ((o, gi), ai) in acc.iter_mut().zip(g).zip(a.values()) {
                        *o += gi * ai;
                    }
                });
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Value {
        let data = Tensor::new(
            self.shape().to_vec(),
            self.values().iter().map(|x| x * c).collect(),
        )
        .expect("same shape");
        Value::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| acc.iter_mut().zip(g).for_each(|(a, b)| *a += c * b))
            }),
        )
    }

    /// `[m x n] + [n]`, the bias broadcast over rows.
    pub fn add_bias(&self, bias: &Value) -> Result<Value> {
        let (m, n) = mat_dims("add_bias", self)?;
        if bias.shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(), bias.shape()),
            ));
        }
        let b = bias.values();
        let mut out = self.values().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            row.iter_mut().zip(b).for_each(|(x, bi)| *x += bi);
        }
        Ok(Value::from_op(
            Tensor::new(vec![m, n], out)?,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate(g);
                ps[1].accumulate_with(|acc| {
                    for j in 0..n {
                        let col: Vec<f64> = (0..m).map(|i| g[i * n + j]).collect();
                        acc[j] += pairwise_sum(&col);
                    }
                });
            }),
        ))
    }

    pub fn sum(&self) -> Value {
        let s = pairwise_sum(self.values());
        let len = self.len();
        Value::from_op(
            Tensor::scalar(s),
            vec![self.clone()],
            Box::new(move |g, ps| {
                let gv = g[0];
                ps[0].accumulate_with(|acc| acc.iter_mut().for_each(|a| *a += gv));
                debug_assert_eq!(ps[0].len(), len);
            }),
        )
    }

    /// Mean of all entries; zero for an empty value.
    pub fn mean(&self) -> Value {
        if self.is_empty() {
            return self.sum();
        }
        self.sum().scale(1.0 / self.len() as f64)
    }

    /// Per-row sums of a matrix, giving a vector.
    pub fn sum_rows(&self) -> Result<Value> {
        let (m, n) = mat_dims("sum_rows", self)?;
        let out: Vec<f64> = (0..m)
            .map(|i| pairwise_sum(&self.values()[i * n..(i + 1) * n]))
            .collect();
        Ok(Value::from_op(
            Tensor::vector(out),
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for i in 0..m {
                        acc[i * n..(i + 1) * n].iter_mut().for_each(|a| *a += g[i]);
                    }
                })
            }),
        ))
    }

    pub fn relu(&self) -> Value {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sin(&self) -> Value {
        self.unary(f64::sin, |x, _| x.cos())
    }

    /// Elementwise map given the function and its derivative `d(x, y)`.
    fn unary(&self, f: impl Fn(f64) -> f64, d: impl Fn(f64, f64) -> f64 + 'static) -> Value {
        let out: Vec<f64> = self.values().iter().map(|&x| f(x)).collect();
        let data = Tensor::new(self.shape().to_vec(), out).expect("same shape");
        let y = Rc::new(data.data().to_vec());
        Value::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let x = ps[0].values();
                ps[0].accumulate_with(|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * d(x[i], y[i]);
                    }
                })
            }),
        )
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Value> {
        let (m, n) = mat_dims("softmax_rows", self)?;
        if self.values().iter().any(|x| x.is_nan()) {
            return Err(Error::numeric("softmax_rows", "NaN in input"));
        }
        let mut out = self.values().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|x| *x = (*x - max).exp());
            let z = pairwise_sum(row);
            row.iter_mut().for_each(|x| *x /= z);
        }
        let y = Rc::new(out.clone());
        Ok(Value::from_op(
            Tensor::new(vec![m, n], out)?,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let (yr, gr) = (&y[r.clone()], &g[r.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, a) in acc[r].iter_mut().enumerate() {
                            *a += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }),
        ))
    }

    /// `outer(u, v)[i][j] = v[i] * u[j]`: depth (from `v`) indexes rows,
    /// channels (from `u`) index columns.
    pub fn outer(u: &Value, v: &Value) -> Result<Value> {
        let (&[c], &[r]) = (u.shape(), v.shape()) else {
            return Err(Error::shape(
                "outer",
                format!("expected vectors, got {:?} and {:?}", u.shape(), v.shape()),
            ));
        };
        let (uu, vv) = (u.values(), v.values());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = vv[i] * uu[j];
            }
        }
        Ok(Value::from_op(
            Tensor::new(vec![r, c], out)?,
            vec![u.clone(), v.clone()],
            Box::new(move |g, ps| {
                let (u, v) = (&ps[0], &ps[1]);
                u.accumulate_with(|acc| {
                    for i in 0..r {
                        for j in 0..c {
                            acc[j] += g[i * c + j] * v.values()[i];
                        }
                    }
                });
                v.accumulate_with(|acc| {
                    for i in 0..r {
                        for j in 0..c {
                            acc[i] += g[i * c + j] * u.values()[j];
                        }
                    }
                });
            }),
        ))
    }

    /// Scales a vector to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Value> {
        let &[c] = self.shape() else {
            return Err(Error::shape(
                "l2_normalize",
                format!("expected a vector, got {:?}", self.shape()),
            ));
        };
        self.reshape(&[1, c])?.l2_normalize_rows()?.reshape(&[c])
    }

    /// Row-wise [`Value::l2_normalize`].
    pub fn l2_normalize_rows(&self) -> Result<Value> {
        let (m, n) = mat_dims("l2_normalize_rows", self)?;
        let mut out = self.values().to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(n.max(1)) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    norm,
                    eps: NORM_EPS,
                });
            }
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        let y = Rc::new(out.clone());
        Ok(Value::from_op(
            Tensor::new(vec![m, n], out)?,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let (yr, gr) = (&y[r.clone()], &g[r.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, a) in acc[r].iter_mut().enumerate() {
                            *a += (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                })
            }),
        ))
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_grad(&self) -> Value {
        Value::constant(self.data().clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Value> {
        let data = self.data().clone().reshape(shape)?;
        Ok(Value::from_op(
            data,
            vec![self.clone()],
            Box::new(|g, ps| ps[0].accumulate(g)),
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Value]) -> Result<Value> {
        let dims = parts
            .iter()
            .map(|p| mat_dims("concat_cols", p))
            .collect::<Result<Vec<_>>>()?;
        let m = dims.first().map_or(0, |d| d.0);
        if dims.iter().any(|d| d.0 != m) {
            return Err(Error::shape("concat_cols", format!("row counts {dims:?}")));
        }
        let widths: Vec<usize> = dims.iter().map(|d| d.1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for i in 0..m {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&p.values()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(Value::from_op(
            Tensor::new(vec![m, total], out)?,
            parts.to_vec(),
            Box::new(move |g, ps| {
                let mut off = 0;
                for (p, &w) in ps.iter().zip(&widths) {
                    p.accumulate_with(|acc| {
                        for i in 0..m {
                            for j in 0..w {
                                acc[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }),
        ))
    }

    /// Vertical stack of matrices with equal column counts. Vectors count as
    /// single rows.
    pub fn concat_rows(parts: &[Value]) -> Result<Value> {
        let width = |p: &Value| match p.shape() {
            &[n] => Ok((1, n)),
            &[m, n] => Ok((m, n)),
            s => Err(Error::shape("concat_rows", format!("expected rows, got {s:?}"))),
        };
        let dims = parts.iter().map(width).collect::<Result<Vec<_>>>()?;
        let Some(&(_, n)) = dims.first() else {
            return Err(Error::shape("concat_rows", "nothing to stack"));
        };
        if dims.iter().any(|d| d.1 != n) {
            return Err(Error::shape("concat_rows", format!("column counts {dims:?}")));
        }
        let m: usize = dims.iter().map(|d| d.0).sum();
        let data: Vec<f64> = parts.iter().flat_map(|p| p.values().iter().copied()).collect();
        let lens: Vec<usize> = parts.iter().map(Value::len).collect();
        Ok(Value::from_op(
            Tensor::new(vec![m, n], data)?,
            parts.to_vec(),
            Box::new(move |g, ps| {
                let mut off = 0;
                for (p, &len) in ps.iter().zip(&lens) {
                    p.accumulate(&g[off..off + len]);
                    off += len;
                }
            }),
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Value> {
        let (m, n) = mat_dims("slice_cols", self)?;
        if start > end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {n} columns"),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.values()[i * n + start..i * n + end]);
        }
        Ok(Value::from_op(
            Tensor::new(vec![m, w], out)?,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for i in 0..m {
                        for j in 0..w {
                            acc[i * n + start + j] += g[i * w + j];
                        }
                    }
                })
            }),
        ))
    }

    /// Sparse linear read: output row `q` is `sum_k w_k * row(src_k)` of
    /// `self` viewed as `[rows x channels]`.
    pub fn gather(&self, plan: &Rc<GatherPlan>, channels: usize) -> Result<Value> {
        if channels == 0 || self.len() % channels != 0 || self.len() / channels != plan.src_rows
        {
            return Err(Error::shape(
                "gather",
                format!(
                    "source {:?} is not {} rows of {channels} channels",
                    self.shape(),
                    plan.src_rows
                ),
            ));
        }
        let c = channels;
        let src = self.values();
        let mut out = vec![0.0; plan.len() * c];
        for q in 0..plan.len() {
            let dst = &mut out[q * c..(q + 1) * c];
            for (row, w) in plan.taps(q) {
                let s = &src[row * c..(row + 1) * c];
                dst.iter_mut().zip(s).for_each(|(d, x)| *d += w * x);
            }
        }
        let plan = Rc::clone(plan);
        Ok(Value::from_op(
            Tensor::new(vec![plan.len(), c], out)?,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for q in 0..plan.len() {
                        let gq = &g[q * c..(q + 1) * c];
                        for (row, w) in plan.taps(q) {
                            let a = &mut acc[row * c..(row + 1) * c];
                            a.iter_mut().zip(gq).for_each(|(a, x)| *a += w * x);
                        }
                    }
                })
            }),
        ))
    }

    /// Writes the rows of `self` (`[m x c]`) to rows `indices` of a zero
    /// `[rows x c]` matrix. Indices must be unique.
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Value> {
        let (m, c) = mat_dims("scatter_rows", self)?;
        if indices.len() != m {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} indices for {m} rows", indices.len()),
            ));
        }
        let mut out = vec![0.0; rows * c];
        let mut written = vec![false; rows];
        for (i, &r) in indices.iter().enumerate() {
            if r >= rows {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: vec![r as i64],
                    dims: vec![rows],
                });
            }
            if std::mem::replace(&mut written[r], true) {
                return Err(Error::Contract(format!("scatter_rows: row {r} written twice")));
            }
            out[r * c..(r + 1) * c].copy_from_slice(&self.values()[i * c..(i + 1) * c]);
        }
        let indices = indices.to_vec();
        Ok(Value::from_op(
            Tensor::new(vec![rows, c], out)?,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for (i, &r) in indices.iter().enumerate() {
                        for j in 0..c {
                            acc[i * c + j] += g[r * c + j];
                        }
                    }
                })
            }),
        ))
    }

    /// 3-D max pooling of an `[X, Y, Z, C]` grid over `lambda`-cubed blocks,
    /// flattened to `[L x C]` in lexicographic block order. Partial edge
    /// blocks pool only the voxels that exist. Ties go to the first voxel in
    /// lexicographic order.
    pub fn max_pool3d(&self, lambda: usize) -> Result<Value> {
        let &[x, y, z, c] = self.shape() else {
            return Err(Error::shape(
                "max_pool3d",
                format!("expected [X, Y, Z, C], got {:?}", self.shape()),
            ));
        };
        if lambda == 0 {
            return Err(Error::Contract("max_pool3d: lambda must be >= 1".into()));
        }
        let (bx, by, bz) = (x.div_ceil(lambda), y.div_ceil(lambda), z.div_ceil(lambda));
        let l = bx * by * bz;
        let src = self.values();
        let mut out = vec![f64::NEG_INFINITY; l * c];
        let mut arg = vec![usize::MAX; l * c];
        for i in 0..x {
            for j in 0..y {
                for k in 0..z {
                    let b = ((i / lambda) * by + j / lambda) * bz + k / lambda;
                    let base = ((i * y + j) * z + k) * c;
                    for ch in 0..c {
                        let v = src[base + ch];
                        // Strict comparison keeps the lexicographically first maximum.
                        if v > out[b * c + ch] || arg[b * c + ch] == usize::MAX {
                            out[b * c + ch] = v;
                            arg[b * c + ch] = base + ch;
                        }
                    }
                }
            }
        }
        let arg = Rc::new(arg);
        Ok(Value::from_op(
            Tensor::new(vec![l, c], out)?,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for (o, &src_idx) in arg.iter().enumerate() {
                        acc[src_idx] += g[o];
                    }
                })
            }),
        ))
    }

    /// Maximum over the third axis of an `[X, Y, Z, C]` grid, giving
    /// `[X * Y, C]`. Ties go to the smallest `z`.
    pub fn max_over_z(&self) -> Result<Value> {
        let &[x, y, z, c] = self.shape() else {
            return Err(Error::shape(
                "max_over_z",
                format!("expected [X, Y, Z, C], got {:?}", self.shape()),
            ));
        };
        if z == 0 {
            return Err(Error::shape("max_over_z", "empty z axis"));
        }
        let src = self.values();
        let cells = x * y;
        let mut out = vec![0.0; cells * c];
        let mut arg = vec![0usize; cells * c];
        for cell in 0..cells {
            for ch in 0..c {
                let mut best = cell * z * c + ch;
                for k in 1..z {
                    let idx = (cell * z + k) * c + ch;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[cell * c + ch] = src[best];
                arg[cell * c + ch] = best;
            }
        }
        let arg = Rc::new(arg);
        Ok(Value::from_op(
            Tensor::new(vec![cells, c], out)?,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for (o, &i) in arg.iter().enumerate() {
                        acc[i] += g[o];
                    }
                })
            }),
        ))
    }
}

impl Value {
    /// [`Value::max_over_z`] for a grid stored as occupied rows. `self` is
    /// `[M, C]`; `slots[(cell * z) + k]` names the row at height `k` of
    /// `cell`, or `None` where the voxel is empty and reads zero. Ties go to
    /// the smallest `z`; an empty voxel that wins takes no gradient.
    pub fn max_over_z_rows(&self, slots: &[Option<u32>], z: usize) -> Result<Value> {
        let (m, c) = mat_dims("max_over_z_rows", self)?;
        if z == 0 || slots.len() % z != 0 {
            return Err(Error::shape(
                "max_over_z_rows",
                format!("{} slots do not split into columns of {z}", slots.len()),
            ));
        }
        if let Some(bad) = slots.iter().flatten().find(|&&r| r as usize >= m) {
            return Err(Error::Index {
                op: "max_over_z_rows",
                index: vec![*bad as i64],
                dims: vec![m],
            });
        }
        let src = self.values();
        let cells = slots.len() / z;
        let mut out = vec![0.0; cells * c];
        let mut arg: Vec<Option<u32>> = vec![None; cells * c];
        for cell in 0..cells {
            let column = &slots[cell * z..(cell + 1) * z];
            for ch in 0..c {
                let read = |s: Option<u32>| s.map_or(0.0, |r| src[r as usize * c + ch]);
                let (mut best, mut at) = (read(column[0]), column[0]);
                for &s in &column[1..] {
                    let v = read(s);
                    if v > best {
                        best = v;
                        at = s;
                    }
                }
                out[cell * c + ch] = best;
                arg[cell * c + ch] = at;
            }
        }
        let arg = Rc::new(arg);
        Ok(Value::from_op(
            Tensor::new(vec![cells, c], out)?,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].accumulate_with(|acc| {
                    for (o, r) in arg.iter().enumerate() {
                        if let Some(r) = r {
                            acc[*r as usize * c + o % c] += g[o];
                        }
                    }
                })
            }),
        ))
    }
}

/// Compressed list of weighted source rows for each output row of
/// [`Value::gather`].
#[derive(Debug, Clone, Default)]
pub struct GatherPlan {
    src_rows: usize,
    starts: Vec<usize>,
    rows: Vec<usize>,
    weights: Vec<f64>,
}

impl GatherPlan {
    pub fn new(src_rows: usize) -> Self {
        Self {
            src_rows,
            starts: vec![0],
            rows: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Plain row selection.
    pub fn select(src_rows: usize, rows: &[usize]) -> Self {
        let mut plan = Self::new(src_rows);
        for &r in rows {
            plan.push_row([(r, 1.0)]);
        }
        plan
    }

    /// Appends one output row. Taps pointing outside the source are dropped.
    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, f64)>) {
        for (r, w) in taps {
            if r < self.src_rows {
                self.rows.push(r);
                self.weights.push(w);
            }
        }
        self.starts.push(self.rows.len());
    }

    /// Number of output rows.
    pub fn len(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn src_rows(&self) -> usize {
        self.src_rows
    }

    pub fn taps(&self, q: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.starts[q]..self.starts[q + 1];
        self.rows[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    /// Largest number of source rows read by any output row.
    pub fn max_fan_in(&self) -> usize {
        self.starts.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}
