//! Raw loops behind the tape operations. Slices are row-major; callers check
//! shapes.

use crate::scalar::Real;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * k + kk] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeom {
    #[inline]
    fn source(&self, o: usize, j: usize) -> Option<usize> {
        let pos = (o * self.stride + j) as isize - self.pad_left as isize;
        if pos >= 0 && (pos as usize) < self.len_in {
            Some(pos as usize)
        } else {
            None
        }
    }
}

pub fn conv1d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let (ci, co) = (g.c_in, g.c_out);
    for b in 0..g.batch {
        for o in 0..g.len_out {
            let y_row = &mut y[(b * g.len_out + o) * co..(b * g.len_out + o + 1) * co];
            if let Some(bias) = bias {
                y_row.copy_from_slice(bias);
            }
            for j in 0..g.kernel {
                let Some(pos) = g.source(o, j) else { continue };
                let x_row = &x[(b * g.len_in + pos) * ci..(b * g.len_in + pos + 1) * ci];
                let w_j = &w[j * ci * co..(j + 1) * ci * co];
                matmul_acc(x_row, w_j, y_row, 1, ci, co);
            }
        }
    }
}

pub fn conv1d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ci, co) = (g.c_in, g.c_out);
    let rows = |b: usize, o: usize| (b * g.len_out + o) * co..(b * g.len_out + o + 1) * co;
    if let Some(db) = db {
        for b in 0..g.batch {
            for o in 0..g.len_out {
                for (d, &v) in db.iter_mut().zip(&dy[rows(b, o)]) {
                    *d += v;
                }
            }
        }
    }
    if let Some(dx) = dx {
        for b in 0..g.batch {
            for o in 0..g.len_out {
                let dy_row = &dy[rows(b, o)];
                for j in 0..g.kernel {
                    let Some(pos) = g.source(o, j) else { continue };
                    let dx_row = &mut dx[(b * g.len_in + pos) * ci..(b * g.len_in + pos + 1) * ci];
                    matmul_bt_acc(dy_row, &w[j * ci * co..(j + 1) * ci * co], dx_row, 1, co, ci);
                }
            }
        }
    }
    if let Some(dw) = dw {
        for b in 0..g.batch {
            for o in 0..g.len_out {
                let dy_row = &dy[rows(b, o)];
                for j in 0..g.kernel {
                    let Some(pos) = g.source(o, j) else { continue };
                    let x_row = &x[(b * g.len_in + pos) * ci..(b * g.len_in + pos + 1) * ci];
                    matmul_at_acc(x_row, dy_row, &mut dw[j * ci * co..(j + 1) * ci * co], 1, ci, co);
                }
            }
        }
    }
}

/// Depthwise conv, stride 1: `y[b,o,c] = bias[c] + sum_j x[b,o+j-pad,c] * w[j,c]`.
pub fn depthwise_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let c = g.c_in;
    for b in 0..g.batch {
        for o in 0..g.len_out {
            let y_row = &mut y[(b * g.len_out + o) * c..(b * g.len_out + o + 1) * c];
            if let Some(bias) = bias {
                y_row.copy_from_slice(bias);
            }
            for j in 0..g.kernel {
                let Some(pos) = g.source(o, j) else { continue };
                let x_row = &x[(b * g.len_in + pos) * c..(b * g.len_in + pos + 1) * c];
                let w_j = &w[j * c..(j + 1) * c];
                for ((yv, &xv), &wv) in y_row.iter_mut().zip(x_row).zip(w_j) {
                    *yv += xv * wv;
                }
            }
        }
    }
}

pub fn depthwise_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let c = g.c_in;
    for b in 0..g.batch {
        for o in 0..g.len_out {
            let dy_row = &dy[(b * g.len_out + o) * c..(b * g.len_out + o + 1) * c];
            if let Some(db) = db.as_deref_mut() {
                for (d, &v) in db.iter_mut().zip(dy_row) {
                    *d += v;
                }
            }
            for j in 0..g.kernel {
                let Some(pos) = g.source(o, j) else { continue };
                let base = (b * g.len_in + pos) * c;
                if let Some(dx) = dx.as_deref_mut() {
                    for ch in 0..c {
                        dx[base + ch] += dy_row[ch] * w[j * c + ch];
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    for ch in 0..c {
                        dw[j * c + ch] += dy_row[ch] * x[base + ch];
                    }
                }
            }
        }
    }
}

/// Max pooling over the middle axis of `[batch, len_in, c]`. Returns the
/// flat source index of each output element (first maximum wins on ties).
pub fn maxpool_forward<T: Real>(
    x: &[T],
    batch: usize,
    len_in: usize,
    c: usize,
    pool: usize,
    stride: usize,
    len_out: usize,
    y: &mut [T],
) -> alloc::vec::Vec<usize> {
    let mut arg = alloc::vec![0usize; batch * len_out * c];
    for b in 0..batch {
        for o in 0..len_out {
            for ch in 0..c {
                let mut best = (b * len_in + o * stride) * c + ch;
                for j in 1..pool {
                    let idx = (b * len_in + o * stride + j) * c + ch;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let out = (b * len_out + o) * c + ch;
                y[out] = x[best];
                arg[out] = best;
            }
        }
    }
    arg
}

/// Per-channel mean and biased variance over all leading positions.
pub fn channel_moments<T: Real>(x: &[T], c: usize) -> (alloc::vec::Vec<T>, alloc::vec::Vec<T>) {
    let rows = x.len() / c;
    let n = T::lit(rows as f64);
    let mut mean = alloc::vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = alloc::vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in var.iter_mut() {
        *s /= n;
    }
    (mean, var)
}

