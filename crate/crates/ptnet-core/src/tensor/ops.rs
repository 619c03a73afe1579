//! Forward ops and their backward rules.

use std::sync::Arc;

use super::tape::{NodeId, Tape, Vjp};
use super::{Element, Tensor};
use crate::error::{PtnetError, Result};

fn tape_of<E: Element>(inputs: &[&Tensor<E>]) -> Result<Option<Tape<E>>> {
    let mut found: Option<Tape<E>> = None;
    for t in inputs {
        if let Some((tape, _)) = &t.node {
            match &found {
                None => found = Some(tape.clone()),
                Some(f) => {
                    if !Tape::ptr_eq(f, tape) {
                        return Err(PtnetError::Autodiff("operands live on different tapes".into()));
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Builds the op result and, when any input is tracked, records the node.
/// The VJP closure is only constructed in the tracked case.
fn make_result<E: Element>(
    inputs: &[&Tensor<E>],
    shape: Vec<usize>,
    data: Vec<E>,
    vjp: impl FnOnce() -> Vjp<E>,
) -> Result<Tensor<E>> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let node = match tape_of(inputs)? {
        Some(tape) => {
            let ids: Vec<Option<NodeId>> = inputs.iter().map(|t| t.node_id_on(&tape)).collect();
            let id = tape.record(ids, Some(vjp()));
            Some((tape, id))
        }
        None => None,
    };
    Ok(Tensor { shape, data: Arc::new(data), node })
}

fn check_same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(PtnetError::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- matmul ---

fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a[m,n] x b[k,n]^T -> [m,k]
fn matmul_nt_raw<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    out
}

/// a[m,k]^T x g[m,n] -> [k,n]
fn matmul_tn_raw<E: Element>(a: &[E], g: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

impl<E: Element> Tensor<E> {
    /// Standard 2-d matrix product.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = self.rows_cols()?;
        let (k2, n) = rhs.rows_cols()?;
        if k != k2 {
            return Err(PtnetError::Shape(format!(
                "matmul: inner dims {k} and {k2} differ"
            )));
        }
        let out = matmul_raw(self.data(), rhs.data(), m, k, n);
        let a = Arc::clone(&self.data);
        let b = Arc::clone(&rhs.data);
        make_result(&[self, rhs], vec![m, n], out, || {
            Box::new(move |g| {
                vec![matmul_nt_raw(g, &b, m, n, k), matmul_tn_raw(&a, g, m, k, n)]
            })
        })
    }

    pub fn transpose2d(&self) -> Result<Tensor<E>> {
        let (m, n) = self.rows_cols()?;
        let x = self.data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        make_result(&[self], vec![n, m], out, || {
            Box::new(move |g| {
                let mut dx = vec![E::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                vec![dx]
            })
        })
    }

    // ------------------------------------------------------- elementwise ---

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape(self, rhs, "add")?;
        let out = self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| a + b).collect();
        make_result(&[self, rhs], self.shape.clone(), out, || {
            Box::new(move |g| vec![g.to_vec(), g.to_vec()])
        })
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape(self, rhs, "sub")?;
        let out = self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| a - b).collect();
        make_result(&[self, rhs], self.shape.clone(), out, || {
            Box::new(move |g| vec![g.to_vec(), g.iter().map(|&v| -v).collect()])
        })
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape(self, rhs, "mul")?;
        let out = self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| a * b).collect();
        let a = Arc::clone(&self.data);
        let b = Arc::clone(&rhs.data);
        make_result(&[self, rhs], self.shape.clone(), out, || {
            Box::new(move |g| {
                let da = g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect();
                vec![da, db]
            })
        })
    }

    /// Elementwise |a - b| with subgradient 0 at ties.
    pub fn abs_diff(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape(self, rhs, "abs_diff")?;
        let out = self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| (a - b).abs()).collect();
        let a = Arc::clone(&self.data);
        let b = Arc::clone(&rhs.data);
        make_result(&[self, rhs], self.shape.clone(), out, || {
            Box::new(move |g| {
                let mut da = Vec::with_capacity(g.len());
                for ((&gv, &av), &bv) in g.iter().zip(a.iter()).zip(b.iter()) {
                    let d = av - bv;
                    let s = if d > E::zero() {
                        E::one()
                    } else if d < E::zero() {
                        -E::one()
                    } else {
                        E::zero()
                    };
                    da.push(gv * s);
                }
                let db = da.iter().map(|&v| -v).collect();
                vec![da, db]
            })
        })
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let ce = E::from_f64(c);
        let out = self.data.iter().map(|&v| v * ce).collect();
        make_result(&[self], self.shape.clone(), out, || {
            Box::new(move |g: &[E]| vec![g.iter().map(|&v| v * ce).collect()])
        })
        .expect("scale is infallible")
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<E> {
        let ce = E::from_f64(c);
        let out = self.data.iter().map(|&v| v + ce).collect();
        make_result(&[self], self.shape.clone(), out, || {
            Box::new(move |g: &[E]| vec![g.to_vec()])
        })
        .expect("add_scalar is infallible")
    }

    /// Multiplies by a 1-element tensor (gradient flows to both operands).
    pub fn mul_scalar_tensor(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        if s.numel() != 1 {
            return Err(PtnetError::Shape(format!(
                "mul_scalar_tensor: scalar operand has shape {:?}",
                s.shape
            )));
        }
        let sv = s.data[0];
        let out = self.data.iter().map(|&v| v * sv).collect();
        let x = Arc::clone(&self.data);
        make_result(&[self, s], self.shape.clone(), out, || {
            Box::new(move |g| {
                let dx = g.iter().map(|&v| v * sv).collect();
                let mut ds = E::zero();
                for (&gv, &xv) in g.iter().zip(x.iter()) {
                    ds += gv * xv;
                }
                vec![dx, vec![ds]]
            })
        })
    }

    /// Adds a `[n]` bias row to every row of a `[m, n]` tensor.
    pub fn add_row(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, n) = self.rows_cols()?;
        if bias.shape() != [n] {
            return Err(PtnetError::Shape(format!(
                "add_row: bias shape {:?} does not match row width {n}",
                bias.shape
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(self.data[i * n + j] + bias.data[j]);
            }
        }
        make_result(&[self, bias], vec![m, n], out, || {
            Box::new(move |g| {
                let mut db = vec![E::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                vec![g.to_vec(), db]
            })
        })
    }

    // -------------------------------------------------------- activations ---

    pub fn sigmoid(&self) -> Tensor<E> {
        let out: Vec<E> = self.data.iter().map(|&v| stable_sigmoid(v)).collect();
        let y = out.clone();
        make_result(&[self], self.shape.clone(), out, || {
            Box::new(move |g: &[E]| {
                vec![g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| gv * yv * (E::one() - yv))
                    .collect()]
            })
        })
        .expect("sigmoid is infallible")
    }

    /// Tanh-approximation GELU; the backward is the exact derivative of the
    /// approximation.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a = E::from_f64(0.044_715);
        let half = E::from_f64(0.5);
        let out: Vec<E> = self
            .data
            .iter()
            .map(|&x| {
                let inner = c * (x + a * x * x * x);
                half * x * (E::one() + inner.tanh())
            })
            .collect();
        let x = Arc::clone(&self.data);
        make_result(&[self], self.shape.clone(), out, || {
            Box::new(move |g: &[E]| {
                let three = E::from_f64(3.0);
                vec![g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| {
                        let inner = c * (xv + a * xv * xv * xv);
                        let t = inner.tanh();
                        let dinner = c * (E::one() + three * a * xv * xv);
                        let dy = half * (E::one() + t)
                            + half * xv * (E::one() - t * t) * dinner;
                        gv * dy
                    })
                    .collect()]
            })
        })
        .expect("gelu is infallible")
    }

    // ---------------------------------------------------------- softmaxes ---

    /// Numerically stable softmax over the last axis. Errors on NaN input.
    pub fn softmax_last(&self) -> Result<Tensor<E>> {
        let (rows, n) = self.last_axis_rows();
        let mut out = vec![E::zero(); self.numel()];
        for r in 0..rows {
            let x = &self.data[r * n..(r + 1) * n];
            let mut mx = x[0];
            for &v in x {
                if v.is_nan() {
                    return Err(PtnetError::NonFinite("softmax input".into()));
                }
                if v > mx {
                    mx = v;
                }
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut sum = E::zero();
            for (ov, &xv) in o.iter_mut().zip(x) {
                *ov = (xv - mx).exp();
                sum += *ov;
            }
            for ov in o.iter_mut() {
                *ov = *ov / sum;
            }
        }
        let y = out.clone();
        make_result(&[self], self.shape.clone(), out, || {
            Box::new(move |g| {
                let mut dx = vec![E::zero(); g.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = E::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot += gv * yv;
                    }
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![dx]
            })
        })
    }

    /// log(softmax) over the last axis.
    pub fn log_softmax_last(&self) -> Result<Tensor<E>> {
        let (rows, n) = self.last_axis_rows();
        let mut out = vec![E::zero(); self.numel()];
        for r in 0..rows {
            let x = &self.data[r * n..(r + 1) * n];
            let mut mx = x[0];
            for &v in x {
                if v.is_nan() {
                    return Err(PtnetError::NonFinite("log_softmax input".into()));
                }
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for &xv in x {
                sum += (xv - mx).exp();
            }
            let lse = mx + sum.ln();
            for (o, &xv) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = xv - lse;
            }
        }
        let y = out.clone();
        make_result(&[self], self.shape.clone(), out, || {
            Box::new(move |g| {
                let mut dx = vec![E::zero(); g.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut gsum = E::zero();
                    for &gv in gr {
                        gsum += gv;
                    }
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = gv - yv.exp() * gsum;
                    }
                }
                vec![dx]
            })
        })
    }

    fn last_axis_rows(&self) -> (usize, usize) {
        let n = *self.shape.last().unwrap_or(&1);
        (self.numel() / n, n)
    }

    // --------------------------------------------------------- reductions ---

    pub fn sum_all(&self) -> Tensor<E> {
        let mut s = E::zero();
        for &v in self.data.iter() {
            s += v;
        }
        let n = self.numel();
        make_result(&[self], Vec::new(), vec![s], || {
            Box::new(move |g: &[E]| vec![vec![g[0]; n]])
        })
        .expect("sum_all is infallible")
    }

    pub fn mean_all(&self) -> Tensor<E> {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Arithmetic mean over one axis of a 2-d tensor.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<E>> {
        let (m, n) = self.rows_cols()?;
        match axis {
            0 => {
                let inv = E::from_f64(1.0 / m as f64);
                let mut out = vec![E::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += self.data[i * n + j];
                    }
                }
                for o in &mut out {
                    *o = *o * inv;
                }
                make_result(&[self], vec![n], out, || {
                    Box::new(move |g| {
                        let mut dx = vec![E::zero(); m * n];
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] = g[j] * inv;
                            }
                        }
                        vec![dx]
                    })
                })
            }
            1 => {
                let inv = E::from_f64(1.0 / n as f64);
                let mut out = vec![E::zero(); m];
                for i in 0..m {
                    let mut s = E::zero();
                    for j in 0..n {
                        s += self.data[i * n + j];
                    }
                    out[i] = s * inv;
                }
                make_result(&[self], vec![m], out, || {
                    Box::new(move |g| {
                        let mut dx = vec![E::zero(); m * n];
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] = g[i] * inv;
                            }
                        }
                        vec![dx]
                    })
                })
            }
            _ => Err(PtnetError::Invalid(format!("mean_axis: axis {axis} out of range"))),
        }
    }

    // ------------------------------------------------------ shape plumbing ---

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(PtnetError::Shape(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                self.shape
            )));
        }
        let old = self.shape.clone();
        make_result(&[self], shape, self.data.as_ref().clone(), || {
            let _ = &old;
            Box::new(move |g| vec![g.to_vec()])
        })
    }

    /// Contiguous slice along axis 0 or 1 of a 2-d tensor.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let (m, n) = self.rows_cols()?;
        let bound = if axis == 0 { m } else { n };
        if axis > 1 || start + len > bound || len == 0 {
            return Err(PtnetError::Shape(format!(
                "narrow: axis {axis}, range {start}..{} out of bounds for [{m}, {n}]",
                start + len
            )));
        }
        let (out_shape, out) = if axis == 0 {
            (vec![len, n], self.data[start * n..(start + len) * n].to_vec())
        } else {
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
            }
            (vec![m, len], out)
        };
        make_result(&[self], out_shape, out, || {
            Box::new(move |g| {
                let mut dx = vec![E::zero(); m * n];
                if axis == 0 {
                    dx[start * n..(start + len) * n].copy_from_slice(g);
                } else {
                    for i in 0..m {
                        dx[i * n + start..i * n + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                }
                vec![dx]
            })
        })
    }

    /// Row gather from a `[v, d]` table; duplicated indices accumulate in the
    /// backward scatter.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<E>> {
        let (v, d) = self.rows_cols()?;
        if idx.is_empty() {
            return Err(PtnetError::Invalid("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(PtnetError::Invalid(format!(
                "gather_rows: index {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        let idx: Arc<Vec<usize>> = Arc::new(idx.to_vec());
        make_result(&[self], vec![idx.len(), d], out, || {
            Box::new(move |g| {
                let mut dt = vec![E::zero(); v * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                vec![dt]
            })
        })
    }

    /// out[i] = self[map[i]]; the backward scatter-adds, so the map does not
    /// need to be a bijection (nearest-neighbour upsampling reuses sources).
    pub fn reindex(&self, map: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Tensor<E>> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() {
            return Err(PtnetError::Shape(format!(
                "reindex: map of {} entries vs output shape {out_shape:?}",
                map.len()
            )));
        }
        let src_n = self.numel();
        if let Some(&bad) = map.iter().find(|&&i| i >= src_n) {
            return Err(PtnetError::Invalid(format!(
                "reindex: source index {bad} out of range ({src_n} elements)"
            )));
        }
        let out = map.iter().map(|&i| self.data[i]).collect();
        let map2 = Arc::clone(&map);
        make_result(&[self], out_shape, out, || {
            Box::new(move |g| {
                let mut dx = vec![E::zero(); src_n];
                for (o, &i) in map2.iter().enumerate() {
                    dx[i] += g[o];
                }
                vec![dx]
            })
        })
    }

    // ----------------------------------------------------- normalizations ---

    /// LayerNorm over the last axis of a 2-d tensor with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let (m, n) = self.rows_cols()?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(PtnetError::Shape(format!(
                "layer_norm: gamma/beta must be [{n}], got {:?}/{:?}",
                gamma.shape, beta.shape
            )));
        }
        let epse = E::from_f64(eps);
        let invn = E::from_f64(1.0 / n as f64);
        let mut out = vec![E::zero(); m * n];
        let mut xhat = vec![E::zero(); m * n];
        let mut istd = vec![E::zero(); m];
        for i in 0..m {
            let x = &self.data[i * n..(i + 1) * n];
            let mut mu = E::zero();
            for &v in x {
                mu += v;
            }
            mu = mu * invn;
            let mut var = E::zero();
            for &v in x {
                let d = v - mu;
                var += d * d;
            }
            var = var * invn;
            let is = (var + epse).sqrt().recip();
            istd[i] = is;
            for j in 0..n {
                let xh = (x[j] - mu) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = gamma.data[j] * xh + beta.data[j];
            }
        }
        let gamma_d = Arc::clone(&gamma.data);
        let xhat = Arc::new(xhat);
        let istd = Arc::new(istd);
        make_result(&[self, gamma, beta], vec![m, n], out, || {
            Box::new(move |g| {
                let mut dx = vec![E::zero(); m * n];
                let mut dgamma = vec![E::zero(); n];
                let mut dbeta = vec![E::zero(); n];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut mean_dxhat = E::zero();
                    let mut mean_dxhat_xhat = E::zero();
                    for j in 0..n {
                        let dxh = gr[j] * gamma_d[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dxhat = mean_dxhat * invn;
                    mean_dxhat_xhat = mean_dxhat_xhat * invn;
                    for j in 0..n {
                        let dxh = gr[j] * gamma_d[j];
                        dx[i * n + j] = istd[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                vec![dx, dgamma, dbeta]
            })
        })
    }

    /// Rows scaled to unit L2 norm (an `eps` under the square root guards
    /// zero rows).
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor<E>> {
        let (m, n) = self.rows_cols()?;
        let epse = E::from_f64(eps);
        let mut out = vec![E::zero(); m * n];
        let mut inv_norm = vec![E::zero(); m];
        for i in 0..m {
            let x = &self.data[i * n..(i + 1) * n];
            let mut s = E::zero();
            for &v in x {
                s += v * v;
            }
            let inv = (s + epse).sqrt().recip();
            inv_norm[i] = inv;
            for j in 0..n {
                out[i * n + j] = x[j] * inv;
            }
        }
        let x = Arc::clone(&self.data);
        let inv_norm = Arc::new(inv_norm);
        make_result(&[self], vec![m, n], out, || {
            Box::new(move |g| {
                let mut dx = vec![E::zero(); m * n];
                for i in 0..m {
                    let xr = &x[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let inv = inv_norm[i];
                    let mut dot = E::zero();
                    for (&gv, &xv) in gr.iter().zip(xr) {
                        dot += gv * xv;
                    }
                    let inv3 = inv * inv * inv;
                    for j in 0..n {
                        dx[i * n + j] = gr[j] * inv - xr[j] * dot * inv3;
                    }
                }
                vec![dx]
            })
        })
    }

    // -------------------------------------------------------------- losses ---

    /// Mean binary cross-entropy from logits against a (constant) binary
    /// target, with probabilities clamped to `[eps, 1-eps]`. Where the clamp
    /// binds the gradient is zero, matching the clamped forward.
    pub fn bce_mean_logits(&self, target: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        check_same_shape(self, target, "bce_mean_logits")?;
        for &t in target.data.iter() {
            if t != E::zero() && t != E::one() {
                return Err(PtnetError::Invalid("bce target is not binary".into()));
            }
        }
        let lo = E::from_f64(eps);
        let hi = E::one() - lo;
        let count = self.numel();
        let invc = E::from_f64(1.0 / count as f64);
        let mut loss = E::zero();
        let mut probs = vec![E::zero(); count];
        let mut clamped = vec![false; count];
        for (i, (&x, &t)) in self.data.iter().zip(target.data.iter()).enumerate() {
            let p = stable_sigmoid(x);
            let (p, was_clamped) = if p < lo {
                (lo, true)
            } else if p > hi {
                (hi, true)
            } else {
                (p, false)
            };
            probs[i] = p;
            clamped[i] = was_clamped;
            loss -= t * p.ln() + (E::one() - t) * (E::one() - p).ln();
        }
        loss = loss * invc;
        let probs = Arc::new(probs);
        let clamped = Arc::new(clamped);
        let tgt = Arc::clone(&target.data);
        make_result(&[self, target], Vec::new(), vec![loss], || {
            Box::new(move |g| {
                let g0 = g[0];
                let mut dx = vec![E::zero(); count];
                for i in 0..count {
                    if !clamped[i] {
                        dx[i] = g0 * (probs[i] - tgt[i]) * invc;
                    }
                }
                // target is constant in every caller; return zeros for shape.
                vec![dx, vec![E::zero(); count]]
            })
        })
    }

    // ------------------------------------------------------- spatial ops ---

    /// 3x3 same-padding convolution on a `[h, w, c_in]` map with kernel
    /// `[3, 3, c_in, c_out]` and bias `[c_out]`.
    pub fn conv3x3(&self, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(PtnetError::Shape(format!("conv3x3: input shape {s:?} is not [h,w,c]")));
        }
        let (h, w, cin) = (s[0], s[1], s[2]);
        let ws = weight.shape();
        if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != cin {
            return Err(PtnetError::Shape(format!(
                "conv3x3: kernel shape {ws:?} does not match input channels {cin}"
            )));
        }
        let cout = ws[3];
        if bias.shape() != [cout] {
            return Err(PtnetError::Shape(format!("conv3x3: bias shape {:?}", bias.shape)));
        }
        let x = self.data();
        let k = weight.data();
        let mut out = vec![E::zero(); h * w * cout];
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                o.copy_from_slice(bias.data());
                for dy in 0..3usize {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    for dx in 0..3usize {
                        let sx = xx + dx;
                        if sx < 1 || sx > w {
                            continue;
                        }
                        let sx = sx - 1;
                        let xrow = &x[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                        let krow = &k[((dy * 3 + dx) * cin) * cout..((dy * 3 + dx + 1) * cin) * cout];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let kk = &krow[ci * cout..(ci + 1) * cout];
                            for (ov, &kv) in o.iter_mut().zip(kk) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        let xd = Arc::clone(&self.data);
        let kd = Arc::clone(&weight.data);
        make_result(&[self, weight, bias], vec![h, w, cout], out, || {
            Box::new(move |g| {
                let mut dxv = vec![E::zero(); h * w * cin];
                let mut dkv = vec![E::zero(); 9 * cin * cout];
                let mut dbv = vec![E::zero(); cout];
                for y in 0..h {
                    for xx in 0..w {
                        let go = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                        for (co, &gv) in go.iter().enumerate() {
                            dbv[co] += gv;
                        }
                        for dy in 0..3usize {
                            let sy = y + dy;
                            if sy < 1 || sy > h {
                                continue;
                            }
                            let sy = sy - 1;
                            for dx in 0..3usize {
                                let sx = xx + dx;
                                if sx < 1 || sx > w {
                                    continue;
                                }
                                let sx = sx - 1;
                                for ci in 0..cin {
                                    let xv = xd[(sy * w + sx) * cin + ci];
                                    let kbase = ((dy * 3 + dx) * cin + ci) * cout;
                                    let mut acc = E::zero();
                                    for (co, &gv) in go.iter().enumerate() {
                                        acc += kd[kbase + co] * gv;
                                        dkv[kbase + co] += xv * gv;
                                    }
                                    dxv[(sy * w + sx) * cin + ci] += acc;
                                }
                            }
                        }
                    }
                }
                vec![dxv, dkv, dbv]
            })
        })
    }

    /// Adaptive average pooling of a `[h, w, c]` map to `(oh, ow)` bins;
    /// bin edges at `floor(i*h/oh)` like the usual library convention.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(PtnetError::Shape(format!(
                "adaptive_avg_pool2d: input shape {s:?} is not [h,w,c]"
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(PtnetError::Invalid(format!(
                "adaptive_avg_pool2d: target ({oh}, {ow}) invalid for ({h}, {w})"
            )));
        }
        let x = self.data();
        let mut out = vec![E::zero(); oh * ow * c];
        let mut bins: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            let y0 = i * h / oh;
            let y1 = (i + 1) * h / oh;
            for j in 0..ow {
                let x0 = j * w / ow;
                let x1 = (j + 1) * w / ow;
                bins.push((y0, y1, x0, x1));
                let inv = E::from_f64(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                let o = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let src = &x[(y * w + xx) * c..(y * w + xx + 1) * c];
                        for (ov, &sv) in o.iter_mut().zip(src) {
                            *ov += sv * inv;
                        }
                    }
                }
            }
        }
        let bins = Arc::new(bins);
        make_result(&[self], vec![oh, ow, c], out, || {
            Box::new(move |g| {
                let mut dx = vec![E::zero(); h * w * c];
                for (bi, &(y0, y1, x0, x1)) in bins.iter().enumerate() {
                    let inv = E::from_f64(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                    let go = &g[bi * c..(bi + 1) * c];
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let d = &mut dx[(y * w + xx) * c..(y * w + xx + 1) * c];
                            for (dv, &gv) in d.iter_mut().zip(go) {
                                *dv += gv * inv;
                            }
                        }
                    }
                }
                vec![dx]
            })
        })
    }

    /// Nearest-neighbour 2x upsampling of a `[h, w, c]` map.
    pub fn upsample2x(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(PtnetError::Shape(format!("upsample2x: input shape {s:?} is not [h,w,c]")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut map = Vec::with_capacity(4 * h * w * c);
        for y in 0..2 * h {
            for x in 0..2 * w {
                for ch in 0..c {
                    map.push(((y / 2) * w + x / 2) * c + ch);
                }
            }
        }
        self.reindex(Arc::new(map), vec![2 * h, 2 * w, c])
    }
}

fn stable_sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        (E::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

// ------------------------------------------------------------- free fns ---

/// Concatenates 2-d tensors along the last axis (equal row counts).
pub fn concat_last<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(PtnetError::Invalid("concat_last: no operands".into()));
    }
    let (m, _) = parts[0].rows_cols()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.rows_cols()?;
        if pm != m {
            return Err(PtnetError::Shape(format!(
                "concat_last: row counts differ ({m} vs {pm})"
            )));
        }
        widths.push(pn);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * total);
    for i in 0..m {
        for (p, &wd) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data[i * wd..(i + 1) * wd]);
        }
    }
    let widths2 = widths.clone();
    make_result(parts, vec![m, total], out, || {
        Box::new(move |g| {
            let mut grads: Vec<Vec<E>> =
                widths2.iter().map(|&wd| Vec::with_capacity(m * wd)).collect();
            for i in 0..m {
                let mut off = 0;
                for (gi, &wd) in grads.iter_mut().zip(&widths2) {
                    gi.extend_from_slice(&g[i * total + off..i * total + off + wd]);
                    off += wd;
                }
            }
            grads
        })
    })
}

/// Concatenates 2-d tensors along the first axis (equal column counts).
pub fn concat_rows<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(PtnetError::Invalid("concat_rows: no operands".into()));
    }
    let (_, n) = parts[0].rows_cols()?;
    let mut heights = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.rows_cols()?;
        if pn != n {
            return Err(PtnetError::Shape(format!(
                "concat_rows: column counts differ ({n} vs {pn})"
            )));
        }
        heights.push(pm);
    }
    let total: usize = heights.iter().sum();
    let mut out = Vec::with_capacity(total * n);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    let heights2 = heights.clone();
    make_result(parts, vec![total, n], out, || {
        Box::new(move |g| {
            let mut grads = Vec::with_capacity(heights2.len());
            let mut off = 0;
            for &hm in &heights2 {
                grads.push(g[off * n..(off + hm) * n].to_vec());
                off += hm;
            }
            grads
        })
    })
}
