//! Shape-checked tensor operations with recorded adjoints.
//!
//! Binary ops support exactly one broadcast form: the right-hand side may be
//! a suffix of the left-hand shape (bias-style broadcast over leading
//! dimensions). Anything richer is a shape error.

use super::{numel, Elem, Tensor};
use crate::{Error, Result};

// Suffix-broadcast check: returns the tile length of `b` inside `a`, i.e.
// b repeats every `b.len()` contiguous elements.
fn broadcast_check<T: Elem>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    let sa = a.shape();
    let sb = b.shape();
    if sa == sb {
        return Ok(());
    }
    if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
        return Ok(());
    }
    Err(Error::Shape {
        op,
        details: format!("lhs {:?} vs rhs {:?}", sa, sb),
    })
}

// Sums `g` (length multiple of bn) into buckets of length bn.
fn fold_broadcast<T: Elem>(g: &[T], bn: usize) -> Vec<T> {
    let mut out = vec![T::zero(); bn];
    for chunk in g.chunks_exact(bn) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += *v;
        }
    }
    out
}

impl<T: Elem> Tensor<T> {
    // ---- elementwise binary ----------------------------------------------

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        broadcast_check("add", self, rhs)?;
        let (a, b) = (self.data(), rhs.data());
        let bn = b.len();
        let data: Vec<T> = a.iter().enumerate().map(|(i, &x)| x + b[i % bn]).collect();
        drop(a);
        drop(b);
        let an = self.len();
        Tensor::from_op(
            "add",
            self.shape(),
            data,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let db = if bn == an {
                    g.to_vec()
                } else {
                    fold_broadcast(g, bn)
                };
                vec![Some(g.to_vec()), Some(db)]
            },
        )
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        broadcast_check("sub", self, rhs)?;
        let (a, b) = (self.data(), rhs.data());
        let bn = b.len();
        let data: Vec<T> = a.iter().enumerate().map(|(i, &x)| x - b[i % bn]).collect();
        drop(a);
        drop(b);
        let an = self.len();
        Tensor::from_op(
            "sub",
            self.shape(),
            data,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let db = if bn == an {
                    g.iter().map(|&v| -v).collect()
                } else {
                    fold_broadcast(g, bn).into_iter().map(|v| -v).collect()
                };
                vec![Some(g.to_vec()), Some(db)]
            },
        )
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        broadcast_check("mul", self, rhs)?;
        let (a, b) = (self.data(), rhs.data());
        let bn = b.len();
        let data: Vec<T> = a.iter().enumerate().map(|(i, &x)| x * b[i % bn]).collect();
        drop(a);
        drop(b);
        let lhs = self.clone();
        let rhs_h = rhs.clone();
        Tensor::from_op(
            "mul",
            self.shape(),
            data,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let a = lhs.data();
                let b = rhs_h.data();
                let da: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * b[i % bn]).collect();
                let mut db = vec![T::zero(); bn];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % bn] += gv * a[i];
                }
                vec![Some(da), Some(db)]
            },
        )
    }

    // ---- elementwise unary -----------------------------------------------

    pub fn neg(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&x| -x).collect();
        Tensor::from_op("neg", self.shape(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| -v).collect())]
        })
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op("scale", self.shape(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape(),
            data,
            vec![self.clone()],
            move |g| vec![Some(g.to_vec())],
        )
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let x = self.clone();
        Tensor::from_op("relu", self.shape(), data, vec![self.clone()], move |g| {
            let xd = x.data();
            let da = g
                .iter()
                .zip(xd.iter())
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            vec![Some(da)]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let half = T::of_f64(0.5);
        let inv_sqrt2 = T::of_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (x * inv_sqrt2).erf()))
            .collect();
        let x = self.clone();
        Tensor::from_op("gelu", self.shape(), data, vec![self.clone()], move |g| {
            let inv_sqrt_tau = T::of_f64(1.0 / (std::f64::consts::TAU).sqrt());
            let xd = x.data();
            let da = g
                .iter()
                .zip(xd.iter())
                .map(|(&gv, &xv)| {
                    let cdf = half * (T::one() + (xv * inv_sqrt2).erf());
                    let pdf = inv_sqrt_tau * (-half * xv * xv).exp();
                    gv * (cdf + xv * pdf)
                })
                .collect();
            vec![Some(da)]
        })
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&x| x.exp()).collect();
        let y = data.clone();
        Tensor::from_op("exp", self.shape(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(&y).map(|(&gv, &yv)| gv * yv).collect())]
        })
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        {
            let d = self.data();
            if let Some(bad) = d.iter().find(|&&x| x <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    details: format!("log of non-positive value {bad}"),
                });
            }
        }
        let data: Vec<T> = self.data().iter().map(|&x| x.ln()).collect();
        let x = self.clone();
        Tensor::from_op("log", self.shape(), data, vec![self.clone()], move |g| {
            let xd = x.data();
            vec![Some(
                g.iter().zip(xd.iter()).map(|(&gv, &xv)| gv / xv).collect(),
            )]
        })
    }

    /// Element-wise square root. Gradient at exactly zero is defined as 0
    /// (subgradient choice keeps norms of zero vectors finite).
    pub fn sqrt_elem(&self) -> Result<Tensor<T>> {
        {
            let d = self.data();
            if let Some(bad) = d.iter().find(|&&x| x < T::zero()) {
                return Err(Error::Domain {
                    op: "sqrt",
                    details: format!("sqrt of negative value {bad}"),
                });
            }
        }
        let data: Vec<T> = self.data().iter().map(|&x| x.sqrt()).collect();
        let y = data.clone();
        Tensor::from_op("sqrt", self.shape(), data, vec![self.clone()], move |g| {
            let half = T::of_f64(0.5);
            let da = g
                .iter()
                .zip(&y)
                .map(|(&gv, &yv)| {
                    if yv == T::zero() {
                        T::zero()
                    } else {
                        gv * half / yv
                    }
                })
                .collect();
            vec![Some(da)]
        })
    }

    // ---- softmax family ---------------------------------------------------

    /// Temperature softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&self, temperature: T) -> Result<Tensor<T>> {
        let shape = self.shape();
        let c = *shape.last().unwrap();
        if temperature <= T::zero() {
            return Err(Error::Domain {
                op: "softmax",
                details: format!("temperature must be positive, got {temperature}"),
            });
        }
        if c < 2 {
            return Err(Error::Shape {
                op: "softmax",
                details: format!("last extent must be >= 2, got shape {:?}", shape),
            });
        }
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for (row, out) in x.chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = ((v - m) / temperature).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o = *o / s;
            }
        }
        drop(x);
        let y = data.clone();
        Tensor::from_op(
            "softmax",
            shape,
            data,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![T::zero(); g.len()];
                for ((grow, yrow), drow) in g
                    .chunks_exact(c)
                    .zip(y.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = yv * (gv - dot) / temperature;
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    /// Temperature log-softmax over the last axis (log-sum-exp formulation).
    pub fn log_softmax(&self, temperature: T) -> Result<Tensor<T>> {
        let shape = self.shape();
        let c = *shape.last().unwrap();
        if temperature <= T::zero() {
            return Err(Error::Domain {
                op: "log_softmax",
                details: format!("temperature must be positive, got {temperature}"),
            });
        }
        if c < 2 {
            return Err(Error::Shape {
                op: "log_softmax",
                details: format!("last extent must be >= 2, got shape {:?}", shape),
            });
        }
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for (row, out) in x.chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m) / temperature;
                s += o.exp();
            }
            let lse = s.ln();
            for o in out.iter_mut() {
                *o = *o - lse;
            }
        }
        drop(x);
        let l = data.clone();
        Tensor::from_op(
            "log_softmax",
            shape,
            data,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![T::zero(); g.len()];
                for ((grow, lrow), drow) in g
                    .chunks_exact(c)
                    .zip(l.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let gsum: T = grow.iter().cloned().sum();
                    for ((d, &gv), &lv) in drow.iter_mut().zip(grow).zip(lrow) {
                        *d = (gv - lv.exp() * gsum) / temperature;
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let s: T = self.data().iter().cloned().sum();
        let n = self.len();
        Tensor::from_op("sum", vec![1], vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = self.len();
        let inv = T::of_f64(1.0 / n as f64);
        let s: T = self.data().iter().cloned().sum();
        Tensor::from_op("mean", vec![1], vec![s * inv], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    fn axis_split(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op,
                details: format!("axis {axis} out of range for shape {:?}", shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((outer, mid, inner))
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &e)| e)
            .collect();
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, mid, inner) = self.axis_split("sum_axis", axis)?;
        let x = self.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    data[obase + i] += x[base + i];
                }
            }
        }
        drop(x);
        let shape = Self::reduced_shape(&self.shape(), axis);
        Tensor::from_op("sum_axis", shape, data, vec![self.clone()], move |g| {
            let mut dx = vec![T::zero(); outer * mid * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    let gbase = o * inner;
                    dx[base..base + inner].copy_from_slice(&g[gbase..gbase + inner]);
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (_, mid, _) = self.axis_split("mean_axis", axis)?;
        let inv = T::of_f64(1.0 / mid as f64);
        self.sum_axis(axis)?.scale(inv)
    }

    /// L2 norm, over the whole tensor (`axis: None`) or per-slice along an
    /// axis. Gradient at a zero vector is 0.
    pub fn l2_norm(&self, axis: Option<usize>) -> Result<Tensor<T>> {
        match axis {
            None => {
                let x = self.data();
                let sq: T = x.iter().map(|&v| v * v).sum();
                drop(x);
                let norm = sq.sqrt();
                let xh = self.clone();
                Tensor::from_op("l2_norm", vec![1], vec![norm], vec![self.clone()], move |g| {
                    let xd = xh.data();
                    let da = if norm == T::zero() {
                        vec![T::zero(); xd.len()]
                    } else {
                        xd.iter().map(|&v| g[0] * v / norm).collect()
                    };
                    vec![Some(da)]
                })
            }
            Some(ax) => {
                let (outer, mid, inner) = self.axis_split("l2_norm", ax)?;
                let x = self.data();
                let mut data = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            let v = x[base + i];
                            data[o * inner + i] += v * v;
                        }
                    }
                }
                drop(x);
                for v in data.iter_mut() {
                    *v = v.sqrt();
                }
                let shape = Self::reduced_shape(&self.shape(), ax);
                let norms = data.clone();
                let xh = self.clone();
                Tensor::from_op("l2_norm", shape, data, vec![self.clone()], move |g| {
                    let xd = xh.data();
                    let mut dx = vec![T::zero(); xd.len()];
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                let n = norms[o * inner + i];
                                if n != T::zero() {
                                    dx[base + i] = g[o * inner + i] * xd[base + i] / n;
                                }
                            }
                        }
                    }
                    vec![Some(dx)]
                })
            }
        }
    }

    // ---- matmul --------------------------------------------------------------

    /// Matrix product. Supports `[m,k] x [k,n]` and batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let sa = self.shape();
        let sb = rhs.shape();
        let err = || Error::Shape {
            op: "matmul",
            details: format!("lhs {:?} vs rhs {:?}", sa, sb),
        };
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(err());
                }
                (1usize, sa[0], sa[1], sb[1])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(err());
                }
                (sa[0], sa[1], sa[2], sb[2])
            }
            _ => return Err(err()),
        };
        let a = self.data();
        let b = rhs.data();
        let mut data = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        drop(a);
        drop(b);
        let out_shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let ah = self.clone();
        let bh = rhs.clone();
        Tensor::from_op(
            "matmul",
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let a = ah.data();
                let b = bh.data();
                let mut da = vec![T::zero(); a.len()];
                let mut db = vec![T::zero(); b.len()];
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    gemm_nt(
                        m,
                        n,
                        k,
                        gs,
                        &b[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                    gemm_tn(
                        m,
                        k,
                        n,
                        &a[bi * m * k..(bi + 1) * m * k],
                        gs,
                        &mut db[bi * k * n..(bi + 1) * k * n],
                    );
                }
                vec![Some(da), Some(db)]
            },
        )
    }

    // ---- shape ops -------------------------------------------------------------

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        if numel(&shape) != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                details: format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            });
        }
        let data = self.to_vec();
        Tensor::from_op("reshape", shape, data, vec![self.clone()], move |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Swaps two axes (materialized copy; all tensors stay contiguous).
    pub fn swap_axes(&self, ax1: usize, ax2: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if ax1 >= shape.len() || ax2 >= shape.len() {
            return Err(Error::Shape {
                op: "swap_axes",
                details: format!("axes ({ax1},{ax2}) out of range for {:?}", shape),
            });
        }
        if ax1 == ax2 {
            return self.reshape(shape);
        }
        let mut new_shape = shape.clone();
        new_shape.swap(ax1, ax2);
        let data = permute_swap(&self.data(), &shape, ax1, ax2);
        let ns = new_shape.clone();
        Tensor::from_op("swap_axes", new_shape, data, vec![self.clone()], move |g| {
            vec![Some(permute_swap(g, &ns, ax1, ax2))]
        })
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                details: "no tensors given".into(),
            });
        }
        let base = parts[0].shape();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                details: format!("axis {axis} out of range for {:?}", base),
            });
        }
        let mut mids = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let mut t = s.clone();
            let mut b = base.clone();
            t[axis] = 0;
            b[axis] = 0;
            if t != b {
                return Err(Error::Shape {
                    op: "concat",
                    details: format!("incompatible shapes {:?} vs {:?}", base, s),
                });
            }
            mids.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_mid: usize = mids.iter().sum();
        let mut data = vec![T::zero(); outer * total_mid * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for (p, &mid) in parts.iter().zip(&mids) {
                let pd = p.data();
                let src = &pd[o * mid * inner..(o + 1) * mid * inner];
                let dst = (o * total_mid + off) * inner;
                data[dst..dst + mid * inner].copy_from_slice(src);
                off += mid;
            }
        }
        let mut shape = base;
        shape[axis] = total_mid;
        let mids_b = mids.clone();
        Tensor::from_op("concat", shape, data, parts.to_vec(), move |g| {
            let mut grads: Vec<Option<Vec<T>>> = mids_b
                .iter()
                .map(|&mid| Some(vec![T::zero(); outer * mid * inner]))
                .collect();
            for o in 0..outer {
                let mut off = 0usize;
                for (gi, &mid) in mids_b.iter().enumerate() {
                    let src = (o * total_mid + off) * inner;
                    let dst = o * mid * inner;
                    grads[gi].as_mut().unwrap()[dst..dst + mid * inner]
                        .copy_from_slice(&g[src..src + mid * inner]);
                    off += mid;
                }
            }
            grads
        })
    }

    /// Selects index `idx` along axis 1 of a rank-3 tensor: `[b,t,d] -> [b,d]`.
    pub fn select_axis1(&self, idx: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 3 || idx >= shape[1] {
            return Err(Error::Shape {
                op: "select_axis1",
                details: format!("index {idx} invalid for shape {:?}", shape),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let x = self.data();
        let mut data = vec![T::zero(); b * d];
        for bi in 0..b {
            let src = (bi * t + idx) * d;
            data[bi * d..(bi + 1) * d].copy_from_slice(&x[src..src + d]);
        }
        drop(x);
        Tensor::from_op(
            "select_axis1",
            vec![b, d],
            data,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![T::zero(); b * t * d];
                for bi in 0..b {
                    let dst = (bi * t + idx) * d;
                    dx[dst..dst + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                vec![Some(dx)]
            },
        )
    }

    // ---- layernorm ---------------------------------------------------------------

    /// Per-vector normalization over the last axis, then affine transform.
    pub fn layernorm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let shape = self.shape();
        let d = *shape.last().unwrap();
        if gain.shape() != vec![d] || bias.shape() != vec![d] {
            return Err(Error::Shape {
                op: "layernorm",
                details: format!(
                    "gain {:?} / bias {:?} incompatible with input {:?}",
                    gain.shape(),
                    bias.shape(),
                    shape
                ),
            });
        }
        let x = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let rows = x.len() / d;
        let inv_d = T::of_f64(1.0 / d as f64);
        let mut data = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_sigma = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu: T = row.iter().cloned().sum::<T>() * inv_d;
            let var: T = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let is = (var + eps).sqrt().recip();
            inv_sigma[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                data[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        drop(x);
        drop(gd);
        drop(bd);
        let gain_h = gain.clone();
        Tensor::from_op(
            "layernorm",
            shape,
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g| {
                let gd = gain_h.data();
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for r in 0..rows {
                    let grow = &g[r * d..(r + 1) * d];
                    let xrow = &xhat[r * d..(r + 1) * d];
                    let is = inv_sigma[r];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = grow[j] * gd[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xrow[j];
                        dgain[j] += grow[j] * xrow[j];
                        dbias[j] += grow[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = grow[j] * gd[j];
                        dx[r * d + j] = is * (dxh - mean_dxh - xrow[j] * mean_dxh_xh);
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            },
        )
    }

    // ---- non-differentiable helpers -----------------------------------------------

    /// Per-row argmax of a rank-2 tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "argmax_rows",
                details: format!("expected rank 2, got {:?}", shape),
            });
        }
        let c = shape[1];
        let d = self.data();
        Ok(d.chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

// out += a * b, row-major, i-k-j loop order (fixed per-element summation
// order: ascending k).
pub(crate) fn gemm<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,k] += g[m,n] * b[k,n]^T
pub(crate) fn gemm_nt<T: Elem>(m: usize, n: usize, k: usize, g: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (gv, bv) in grow.iter().zip(brow) {
                acc += *gv * *bv;
            }
            *o += acc;
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
pub(crate) fn gemm_tn<T: Elem>(m: usize, k: usize, n: usize, a: &[T], g: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn permute_swap<T: Elem>(data: &[T], shape: &[usize], ax1: usize, ax2: usize) -> Vec<T> {
    let (a, b) = if ax1 < ax2 { (ax1, ax2) } else { (ax2, ax1) };
    let outer: usize = shape[..a].iter().product();
    let da = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let db = shape[b];
    let inner: usize = shape[b + 1..].iter().product();
    let mut out = vec![data[0]; data.len()];
    let mut dst = 0usize;
    for o in 0..outer {
        for jb in 0..db {
            for m in 0..mid {
                for ja in 0..da {
                    let src = ((((o * da + ja) * mid) + m) * db + jb) * inner;
                    out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                    dst += inner;
                }
            }
        }
    }
    out
}
