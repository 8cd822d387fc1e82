use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `m` is `rows × cols`, row-major.
    MatVec {
        m: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mse(Var, Var),
    /// Row-wise affine map of a `steps × n_in` matrix.
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        steps: usize,
        n_in: usize,
        n_out: usize,
    },
    /// Row-wise concatenation of two `steps`-row matrices.
    ConcatCols {
        a: Var,
        b: Var,
        steps: usize,
        wa: usize,
        wb: usize,
    },
    /// One-layer LSTM over a sequence; aux holds gates then cells.
    LstmSeq {
        x: Var,
        wx: Var,
        wh: Var,
        b: Var,
        steps: usize,
        n_in: usize,
        hidden: usize,
    },
    /// Causal dilated convolution with zero left padding.
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
        steps: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
    aux_off: usize,
}

/// Counts simultaneously live gradient tapes.
#[derive(Debug, Clone, Default)]
pub struct TapeMonitor {
    inner: Arc<MonitorInner>,
}

#[derive(Debug, Default)]
struct MonitorInner {
    live: AtomicUsize,
    peak: AtomicUsize,
    created: AtomicUsize,
}

impl TapeMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live(&self) -> usize {
        self.inner.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::SeqCst)
    }

    pub fn created(&self) -> usize {
        self.inner.created.load(Ordering::SeqCst)
    }

    fn enter(&self) {
        let now = self.inner.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.inner.peak.fetch_max(now, Ordering::SeqCst);
        self.inner.created.fetch_add(1, Ordering::SeqCst);
    }

    fn leave(&self) {
        self.inner.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Reverse-mode tape: an arena of nodes over flat value and gradient buffers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<f64>,
    aux: Vec<f64>,
    grads: Vec<f64>,
    monitor: Option<TapeMonitor>,
}

impl Drop for Tape {
    fn drop(&mut self) {
        if let Some(m) = &self.monitor {
            m.leave();
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn shape_err(what: &str) -> Error {
    Error::ShapeMismatch(what.to_string())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape registered with `monitor` for its whole lifetime.
    pub fn monitored(monitor: &TapeMonitor) -> Self {
        monitor.enter();
        let mut t = Tape::default();
        t.monitor = Some(monitor.clone());
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: &[f64], aux: &[f64]) -> Var {
        let node = Node {
            op,
            off: self.values.len(),
            len: value.len(),
            aux_off: self.aux.len(),
        };
        self.values.extend_from_slice(value);
        self.aux.extend_from_slice(aux);
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.values[n.off..n.off + n.len]
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        if self.grads.len() < n.off + n.len {
            return &[];
        }
        &self.grads[n.off..n.off + n.len]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].len
    }

    pub fn leaf(&mut self, value: &[f64]) -> Var {
        self.push(Op::Leaf, value, &[])
    }

    fn same_len(&self, a: Var, b: Var) -> Result<usize> {
        let (la, lb) = (self.dim(a), self.dim(b));
        if la != lb {
            return Err(shape_err(&format!("operands of length {la} and {lb}")));
        }
        Ok(la)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_len(a, b)?;
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(op, &v, &[]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(op, &v, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `m · x` with `m` of shape `rows × cols`.
    pub fn matvec(&mut self, m: Var, x: Var, rows: usize) -> Result<Var> {
        let cols = self.dim(x);
        if self.dim(m) != rows * cols {
            return Err(shape_err(&format!("matrix of {} entries is not {rows}x{cols}", self.dim(m))));
        }
        let (mv, xv) = (self.value(m), self.value(x));
        let v: Vec<f64> = (0..rows)
            .map(|r| mv[r * cols..(r + 1) * cols].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Op::MatVec { m, x, rows, cols }, &v, &[]))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.dim(x) {
            return Err(shape_err(&format!("slice {start}..{} of length {}", start + len, self.dim(x))));
        }
        let v = self.value(x)[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x, start }, &v, &[]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), &v, &[])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        self.push(Op::Sum(x), &[s], &[])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.same_len(a, b)?;
        if n == 0 {
            return Err(shape_err("mse of empty vectors"));
        }
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        Ok(self.push(Op::Mse(a, b), &[s], &[]))
    }

    /// `y[t] = W x[t] + b` for each of `steps` rows.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>, steps: usize, n_out: usize) -> Result<Var> {
        if steps == 0 || self.dim(x) % steps != 0 {
            return Err(shape_err("dense input is not a whole number of rows"));
        }
        let n_in = self.dim(x) / steps;
        if self.dim(w) != n_out * n_in || b.is_some_and(|b| self.dim(b) != n_out) {
            return Err(shape_err(&format!("dense weights for {n_in} -> {n_out}")));
        }
        let mut y = vec![0.0; steps * n_out];
        dense_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), n_in, n_out, &mut y);
        Ok(self.push(
            Op::Dense {
                x,
                w,
                b,
                steps,
                n_in,
                n_out,
            },
            &y,
            &[],
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var, steps: usize) -> Result<Var> {
        if steps == 0 || self.dim(a) % steps != 0 || self.dim(b) % steps != 0 {
            return Err(shape_err("column concat needs whole rows"));
        }
        let (wa, wb) = (self.dim(a) / steps, self.dim(b) / steps);
        let (av, bv) = (self.value(a), self.value(b));
        let mut y = Vec::with_capacity(steps * (wa + wb));
        for t in 0..steps {
            y.extend_from_slice(&av[t * wa..(t + 1) * wa]);
            y.extend_from_slice(&bv[t * wb..(t + 1) * wb]);
        }
        Ok(self.push(Op::ConcatCols { a, b, steps, wa, wb }, &y, &[]))
    }

    /// LSTM hidden states (`steps × hidden`) from inputs (`steps × n_in`).
    /// Gate blocks are ordered input, forget, cell, output.
    pub fn lstm_seq(&mut self, x: Var, wx: Var, wh: Var, b: Var, steps: usize, hidden: usize) -> Result<Var> {
        if steps == 0 || self.dim(x) % steps != 0 {
            return Err(shape_err("lstm input is not a whole number of rows"));
        }
        let n_in = self.dim(x) / steps;
        let g = 4 * hidden;
        if self.dim(wx) != g * n_in || self.dim(wh) != g * hidden || self.dim(b) != g {
            return Err(shape_err(&format!("lstm weights for {n_in} inputs, hidden {hidden}")));
        }
        let mut h = vec![0.0; steps * hidden];
        let mut aux = vec![0.0; steps * 5 * hidden];
        {
            let (gates, cells) = aux.split_at_mut(steps * g);
            lstm_forward(self.value(x), self.value(wx), self.value(wh), self.value(b), n_in, hidden, &mut h, gates, cells);
        }
        Ok(self.push(
            Op::LstmSeq {
                x,
                wx,
                wh,
                b,
                steps,
                n_in,
                hidden,
            },
            &h,
            &aux,
        ))
    }

    /// Causal convolution: `y[t,o] = b[o] + Σ_i Σ_k w[o,i,k] x[t − k·d, i]`.
    pub fn causal_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        steps: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Var> {
        if steps == 0 || self.dim(x) % steps != 0 {
            return Err(shape_err("conv input is not a whole number of rows"));
        }
        let c_in = self.dim(x) / steps;
        if self.dim(w) != c_out * c_in * kernel || self.dim(b) != c_out {
            return Err(shape_err(&format!("conv weights for {c_in} -> {c_out}, kernel {kernel}")));
        }
        let mut y = vec![0.0; steps * c_out];
        conv_forward(self.value(x), self.value(w), self.value(b), c_in, c_out, kernel, dilation, &mut y);
        Ok(self.push(
            Op::CausalConv {
                x,
                w,
                b,
                steps,
                c_in,
                c_out,
                kernel,
                dilation,
            },
            &y,
            &[],
        ))
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.dim(root) != 1 {
            return Err(shape_err("backward root must be scalar"));
        }
        self.backward_with(root, &[1.0])
    }

    /// Backpropagates `seed = ∂L/∂root` for an externally computed loss.
    pub fn backward_with(&mut self, root: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.dim(root) {
            return Err(shape_err(&format!("seed of length {} for node of length {}", seed.len(), self.dim(root))));
        }
        self.grads.clear();
        self.grads.resize(self.values.len(), 0.0);
        let r = &self.nodes[root.0];
        self.grads[r.off..r.off + r.len].copy_from_slice(seed);
        for id in (0..=root.0).rev() {
            self.backprop_node(id);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize) {
        let node = self.nodes[id].clone();
        let g: Vec<f64> = self.grads[node.off..node.off + node.len].to_vec();
        if g.iter().all(|v| *v == 0.0) {
            return;
        }
        let values = &self.values;
        let grads = &mut self.grads;
        let span = |nodes: &[Node], v: Var| {
            let n = &nodes[v.0];
            n.off..n.off + n.len
        };
        let nodes = &self.nodes;
        let out = &values[node.off..node.off + node.len];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (d, v) in grads[span(nodes, *a)].iter_mut().zip(&g) {
                    *d += v;
                }
                for (d, v) in grads[span(nodes, *b)].iter_mut().zip(&g) {
                    *d += v;
                }
            }
            Op::Sub(a, b) => {
                for (d, v) in grads[span(nodes, *a)].iter_mut().zip(&g) {
                    *d += v;
                }
                for (d, v) in grads[span(nodes, *b)].iter_mut().zip(&g) {
                    *d -= v;
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (span(nodes, *a), span(nodes, *b));
                let av = values[sa.clone()].to_vec();
                let bv = values[sb.clone()].to_vec();
                for ((d, v), y) in grads[sa].iter_mut().zip(&g).zip(&bv) {
                    *d += v * y;
                }
                for ((d, v), x) in grads[sb].iter_mut().zip(&g).zip(&av) {
                    *d += v * x;
                }
            }
            Op::Scale(a, s) => {
                for (d, v) in grads[span(nodes, *a)].iter_mut().zip(&g) {
                    *d += s * v;
                }
            }
            Op::MatVec { m, x, rows, cols } => {
                let (sm, sx) = (span(nodes, *m), span(nodes, *x));
                let mv = values[sm.clone()].to_vec();
                let xv = values[sx.clone()].to_vec();
                for r in 0..*rows {
                    let gm = &mut grads[sm.start + r * cols..sm.start + (r + 1) * cols];
                    for (d, xc) in gm.iter_mut().zip(&xv) {
                        *d += g[r] * xc;
                    }
                }
                let gx = &mut grads[sx];
                for r in 0..*rows {
                    for (d, mc) in gx.iter_mut().zip(&mv[r * cols..(r + 1) * cols]) {
                        *d += g[r] * mc;
                    }
                }
            }
            Op::Tanh(a) => {
                for ((d, v), y) in grads[span(nodes, *a)].iter_mut().zip(&g).zip(out) {
                    *d += v * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                for ((d, v), y) in grads[span(nodes, *a)].iter_mut().zip(&g).zip(out) {
                    *d += v * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                for ((d, v), y) in grads[span(nodes, *a)].iter_mut().zip(&g).zip(out) {
                    if *y > 0.0 {
                        *d += v;
                    }
                }
            }
            Op::Slice { x, start } => {
                let s = span(nodes, *x);
                for (d, v) in grads[s.start + start..s.start + start + g.len()].iter_mut().zip(&g) {
                    *d += v;
                }
            }
            Op::Concat(parts) => {
                let mut o = 0;
                for p in parts {
                    let s = span(nodes, *p);
                    let n = s.len();
                    for (d, v) in grads[s].iter_mut().zip(&g[o..o + n]) {
                        *d += v;
                    }
                    o += n;
                }
            }
            Op::Sum(x) => {
                for d in &mut grads[span(nodes, *x)] {
                    *d += g[0];
                }
            }
            Op::Mse(a, b) => {
                let (sa, sb) = (span(nodes, *a), span(nodes, *b));
                let n = sa.len() as f64;
                let diff: Vec<f64> = values[sa.clone()].iter().zip(&values[sb.clone()]).map(|(x, y)| x - y).collect();
                for (d, df) in grads[sa].iter_mut().zip(&diff) {
                    *d += g[0] * 2.0 * df / n;
                }
                for (d, df) in grads[sb].iter_mut().zip(&diff) {
                    *d -= g[0] * 2.0 * df / n;
                }
            }
            Op::Dense {
                x,
                w,
                b,
                steps,
                n_in,
                n_out,
            } => {
                let (sx, sw) = (span(nodes, *x), span(nodes, *w));
                let xv = &values[sx.clone()];
                let wv = &values[sw.clone()];
                let mut gw = vec![0.0; wv.len()];
                let mut gx = vec![0.0; xv.len()];
                let mut gb = vec![0.0; *n_out];
                for t in 0..*steps {
                    let xr = &xv[t * n_in..(t + 1) * n_in];
                    let gr = &g[t * n_out..(t + 1) * n_out];
                    let gxr = &mut gx[t * n_in..(t + 1) * n_in];
                    for (o, go) in gr.iter().enumerate() {
                        if *go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        let wr = &wv[o * n_in..(o + 1) * n_in];
                        let gwr = &mut gw[o * n_in..(o + 1) * n_in];
                        for i in 0..*n_in {
                            gwr[i] += go * xr[i];
                            gxr[i] += go * wr[i];
                        }
                    }
                }
                add_into(&mut grads[sx], &gx);
                add_into(&mut grads[sw], &gw);
                if let Some(b) = b {
                    add_into(&mut grads[span(nodes, *b)], &gb);
                }
            }
            Op::ConcatCols { a, b, steps, wa, wb } => {
                let (sa, sb) = (span(nodes, *a), span(nodes, *b));
                let w = wa + wb;
                for t in 0..*steps {
                    add_into(&mut grads[sa.start + t * wa..sa.start + (t + 1) * wa], &g[t * w..t * w + wa]);
                    add_into(&mut grads[sb.start + t * wb..sb.start + (t + 1) * wb], &g[t * w + wa..(t + 1) * w]);
                }
            }
            Op::LstmSeq {
                x,
                wx,
                wh,
                b,
                steps,
                n_in,
                hidden,
            } => {
                let (sx, swx, swh, sb) = (span(nodes, *x), span(nodes, *wx), span(nodes, *wh), span(nodes, *b));
                let aux = &self.aux[node.aux_off..node.aux_off + steps * 5 * hidden];
                let (gates, cells) = aux.split_at(steps * 4 * hidden);
                let mut lg = LstmGrads {
                    x: vec![0.0; sx.len()],
                    wx: vec![0.0; swx.len()],
                    wh: vec![0.0; swh.len()],
                    b: vec![0.0; sb.len()],
                };
                lstm_backward(
                    &values[sx.clone()],
                    &values[swx.clone()],
                    &values[swh.clone()],
                    out,
                    gates,
                    cells,
                    &g,
                    *n_in,
                    *hidden,
                    &mut lg,
                );
                add_into(&mut grads[sx], &lg.x);
                add_into(&mut grads[swx], &lg.wx);
                add_into(&mut grads[swh], &lg.wh);
                add_into(&mut grads[sb], &lg.b);
            }
            Op::CausalConv {
                x,
                w,
                b,
                steps,
                c_in,
                c_out,
                kernel,
                dilation,
            } => {
                let (sx, sw, sb) = (span(nodes, *x), span(nodes, *w), span(nodes, *b));
                let xv = &values[sx.clone()];
                let wv = &values[sw.clone()];
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; *c_out];
                for t in 0..*steps {
                    for o in 0..*c_out {
                        let go = g[t * c_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for k in 0..*kernel {
                            let lag = k * dilation;
                            if lag > t {
                                break;
                            }
                            let src = (t - lag) * c_in;
                            for i in 0..*c_in {
                                let wi = (o * c_in + i) * kernel + k;
                                gw[wi] += go * xv[src + i];
                                gx[src + i] += go * wv[wi];
                            }
                        }
                    }
                }
                add_into(&mut grads[sx], &gx);
                add_into(&mut grads[sw], &gw);
                add_into(&mut grads[sb], &gb);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dense_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, n_in: usize, n_out: usize, y: &mut [f64]) {
    let steps = y.len() / n_out.max(1);
    for t in 0..steps {
        let xr = &x[t * n_in..(t + 1) * n_in];
        for o in 0..n_out {
            let wr = &w[o * n_in..(o + 1) * n_in];
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..n_in {
                s += wr[i] * xr[i];
            }
            y[t * n_out + o] = s;
        }
    }
}

/// Runs the LSTM recurrence, writing hidden states, post-activation gates
/// and cell states.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_forward(
    x: &[f64],
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
    n_in: usize,
    hidden: usize,
    h_out: &mut [f64],
    gates: &mut [f64],
    cells: &mut [f64],
) {
    let g4 = 4 * hidden;
    if hidden == 0 {
        return;
    }
    let steps = h_out.len() / hidden;
    let mut a = vec![0.0; g4];
    for t in 0..steps {
        let xr = &x[t * n_in..(t + 1) * n_in];
        for r in 0..g4 {
            let mut s = b[r];
            let wr = &wx[r * n_in..(r + 1) * n_in];
            for i in 0..n_in {
                s += wr[i] * xr[i];
            }
            if t > 0 {
                let hp = &h_out[(t - 1) * hidden..t * hidden];
                let wr = &wh[r * hidden..(r + 1) * hidden];
                for j in 0..hidden {
                    s += wr[j] * hp[j];
                }
            }
            a[r] = s;
        }
        let gt = &mut gates[t * g4..(t + 1) * g4];
        for j in 0..hidden {
            let i_g = sigmoid(a[j]);
            let f_g = sigmoid(a[hidden + j]);
            let c_g = a[2 * hidden + j].tanh();
            let o_g = sigmoid(a[3 * hidden + j]);
            gt[j] = i_g;
            gt[hidden + j] = f_g;
            gt[2 * hidden + j] = c_g;
            gt[3 * hidden + j] = o_g;
            let c_prev = if t > 0 { cells[(t - 1) * hidden + j] } else { 0.0 };
            let c = f_g * c_prev + i_g * c_g;
            cells[t * hidden + j] = c;
            h_out[t * hidden + j] = o_g * c.tanh();
        }
    }
}

pub(crate) struct LstmGrads {
    pub x: Vec<f64>,
    pub wx: Vec<f64>,
    pub wh: Vec<f64>,
    pub b: Vec<f64>,
}

/// Backpropagation through time for [`lstm_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward(
    x: &[f64],
    wx: &[f64],
    wh: &[f64],
    h: &[f64],
    gates: &[f64],
    cells: &[f64],
    gh: &[f64],
    n_in: usize,
    hidden: usize,
    out: &mut LstmGrads,
) {
    if hidden == 0 {
        return;
    }
    let g4 = 4 * hidden;
    let steps = h.len() / hidden;
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut da = vec![0.0; g4];
    for t in (0..steps).rev() {
        let gt = &gates[t * g4..(t + 1) * g4];
        for j in 0..hidden {
            let (i_g, f_g, c_g, o_g) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
            let c = cells[t * hidden + j];
            let c_prev = if t > 0 { cells[(t - 1) * hidden + j] } else { 0.0 };
            let tc = c.tanh();
            let dh = gh[t * hidden + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
            da[j] = dc * c_g * i_g * (1.0 - i_g);
            da[hidden + j] = dc * c_prev * f_g * (1.0 - f_g);
            da[2 * hidden + j] = dc * i_g * (1.0 - c_g * c_g);
            da[3 * hidden + j] = d_o * o_g * (1.0 - o_g);
            dc_next[j] = dc * f_g;
        }
        let xr = &x[t * n_in..(t + 1) * n_in];
        let gxr = &mut out.x[t * n_in..(t + 1) * n_in];
        dh_next.fill(0.0);
        for r in 0..g4 {
            let d = da[r];
            if d == 0.0 {
                continue;
            }
            out.b[r] += d;
            let wr = &wx[r * n_in..(r + 1) * n_in];
            let gwr = &mut out.wx[r * n_in..(r + 1) * n_in];
            for i in 0..n_in {
                gwr[i] += d * xr[i];
                gxr[i] += d * wr[i];
            }
            if t > 0 {
                let hp = &h[(t - 1) * hidden..t * hidden];
                let wr = &wh[r * hidden..(r + 1) * hidden];
                let gwr = &mut out.wh[r * hidden..(r + 1) * hidden];
                for j in 0..hidden {
                    gwr[j] += d * hp[j];
                    dh_next[j] += d * wr[j];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
    y: &mut [f64],
) {
    let steps = y.len() / c_out.max(1);
    for t in 0..steps {
        for o in 0..c_out {
            let mut s = b[o];
            for k in 0..kernel {
                let lag = k * dilation;
                if lag > t {
                    break;
                }
                let src = (t - lag) * c_in;
                for i in 0..c_in {
                    s += w[(o * c_in + i) * kernel + k] * x[src + i];
                }
            }
            y[t * c_out + o] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `f` at every coordinate of every input.
    fn fd_check(inputs: &[Vec<f64>], f: &dyn Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v)).collect();
        let root = f(&mut tape, &vars);
        tape.backward(root).unwrap();
        let eval = |inp: &[Vec<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inp.iter().map(|v| t.leaf(v)).collect();
            let r = f(&mut t, &vs);
            t.value(r)[0]
        };
        let h = 1e-5;
        for (a, v) in inputs.iter().enumerate() {
            let g = tape.grad(vars[a]).to_vec();
            for i in 0..v.len() {
                let mut p = inputs.to_vec();
                p[a][i] += h;
                let mut m = inputs.to_vec();
                m[a][i] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(err < tol, "input {a}[{i}]: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones_and_unused_leaf_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, -2.0, 3.0]);
        let c = t.leaf(&[5.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[1.0, 1.0, 1.0]);
        assert_eq!(t.grad(c), &[0.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_vec(&mut rng, 5);
        let b = rand_vec(&mut rng, 5);
        let m = rand_vec(&mut rng, 15);
        fd_check(
            &[a, b, m],
            &|t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let d = t.sub(s, v[1]).unwrap();
                let p = t.mul(d, v[1]).unwrap();
                let q = t.mul(p, p).unwrap();
                let th = t.tanh(q);
                let sg = t.sigmoid(v[0]);
                let r = t.relu(sg);
                let sc = t.scale(r, -0.7);
                let mv = t.matvec(v[2], th, 3).unwrap();
                let sl = t.slice(sc, 1, 3).unwrap();
                let e = t.mse(mv, sl).unwrap();
                let cat = t.concat(&[e, mv]);
                t.sum(cat)
            },
            1e-6,
        );
    }

    #[test]
    fn random_depth_six_graphs_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let choices: Vec<u8> = (0..6).map(|_| rng.random_range(0..7)).collect();
            let inputs = vec![rand_vec(&mut rng, 4), rand_vec(&mut rng, 4), rand_vec(&mut rng, 16)];
            fd_check(
                &inputs,
                &|t, v| {
                    let mut cur = v[0];
                    for c in &choices {
                        cur = match c {
                            0 => t.add(cur, v[1]).unwrap(),
                            1 => t.mul(cur, v[1]).unwrap(),
                            2 => t.tanh(cur),
                            3 => t.sigmoid(cur),
                            4 => t.matvec(v[2], cur, 4).unwrap(),
                            5 => t.sub(cur, v[0]).unwrap(),
                            _ => t.scale(cur, 1.3),
                        };
                    }
                    let z = t.mse(cur, v[1]).unwrap();
                    let s = t.sum(cur);
                    t.add(z, s).unwrap()
                },
                1e-6,
            );
        }
    }

    #[test]
    fn fused_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (steps, n_in, hidden) = (6, 3, 2);
        let x = rand_vec(&mut rng, steps * n_in);
        let wx = rand_vec(&mut rng, 4 * hidden * n_in);
        let wh = rand_vec(&mut rng, 4 * hidden * hidden);
        let b = rand_vec(&mut rng, 4 * hidden);
        let probe = rand_vec(&mut rng, steps * hidden);
        fd_check(
            &[x.clone(), wx, wh, b, probe],
            &|t, v| {
                let h = t.lstm_seq(v[0], v[1], v[2], v[3], steps, hidden).unwrap();
                let p = t.mul(h, v[4]).unwrap();
                t.sum(p)
            },
            1e-6,
        );
        let w = rand_vec(&mut rng, 2 * n_in);
        let bias = rand_vec(&mut rng, 2);
        let other = rand_vec(&mut rng, steps);
        fd_check(
            &[x.clone(), w, bias, other],
            &|t, v| {
                let d = t.dense(v[0], v[1], Some(v[2]), steps, 2).unwrap();
                let c = t.concat_cols(d, v[3], steps).unwrap();
                let s = t.tanh(c);
                t.sum(s)
            },
            1e-6,
        );
        let cw = rand_vec(&mut rng, 4 * n_in * 2);
        let cb = rand_vec(&mut rng, 4);
        fd_check(
            &[x, cw, cb],
            &|t, v| {
                let y = t.causal_conv(v[0], v[1], v[2], steps, 4, 2, 2).unwrap();
                let r = t.tanh(y);
                let q = t.mul(r, r).unwrap();
                t.sum(q)
            },
            1e-6,
        );
    }

    /// The LSTM built from primitive ops, one step at a time.
    fn primitive_lstm(t: &mut Tape, x: &[f64], wx: Var, wh: Var, b: Var, steps: usize, n_in: usize, hidden: usize) -> (Vec<Var>, Var) {
        let xs = t.leaf(x);
        let mut h = t.leaf(&vec![0.0; hidden]);
        let mut c = t.leaf(&vec![0.0; hidden]);
        let mut hs = Vec::new();
        for s in 0..steps {
            let xt = t.slice(xs, s * n_in, n_in).unwrap();
            let ax = t.matvec(wx, xt, 4 * hidden).unwrap();
            let ah = t.matvec(wh, h, 4 * hidden).unwrap();
            let a0 = t.add(ax, ah).unwrap();
            let a = t.add(a0, b).unwrap();
            let ai = t.slice(a, 0, hidden).unwrap();
            let af = t.slice(a, hidden, hidden).unwrap();
            let ag = t.slice(a, 2 * hidden, hidden).unwrap();
            let ao = t.slice(a, 3 * hidden, hidden).unwrap();
            let (i, f, g, o) = (t.sigmoid(ai), t.sigmoid(af), t.tanh(ag), t.sigmoid(ao));
            let fc = t.mul(f, c).unwrap();
            let ig = t.mul(i, g).unwrap();
            c = t.add(fc, ig).unwrap();
            let tc = t.tanh(c);
            h = t.mul(o, tc).unwrap();
            hs.push(h);
        }
        (hs.clone(), xs)
    }

    #[test]
    fn fused_lstm_matches_primitive_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (steps, n_in, hidden) = (7, 2, 3);
        let x = rand_vec(&mut rng, steps * n_in);
        let wxv = rand_vec(&mut rng, 4 * hidden * n_in);
        let whv = rand_vec(&mut rng, 4 * hidden * hidden);
        let bv = rand_vec(&mut rng, 4 * hidden);
        let probe = rand_vec(&mut rng, steps * hidden);

        let mut a = Tape::new();
        let (wx, wh, b) = (a.leaf(&wxv), a.leaf(&whv), a.leaf(&bv));
        let xs = a.leaf(&x);
        let h = a.lstm_seq(xs, wx, wh, b, steps, hidden).unwrap();
        let pr = a.leaf(&probe);
        let p = a.mul(h, pr).unwrap();
        let s = a.sum(p);
        a.backward(s).unwrap();

        let mut z = Tape::new();
        let (wx2, wh2, b2) = (z.leaf(&wxv), z.leaf(&whv), z.leaf(&bv));
        let (hs, xs2) = primitive_lstm(&mut z, &x, wx2, wh2, b2, steps, n_in, hidden);
        let all = z.concat(&hs);
        let pr2 = z.leaf(&probe);
        let p2 = z.mul(all, pr2).unwrap();
        let s2 = z.sum(p2);
        z.backward(s2).unwrap();

        for (u, v) in a.value(h).iter().zip(z.value(all)) {
            assert!((u - v).abs() < 1e-14);
        }
        for (g1, g2) in [(a.grad(wx), z.grad(wx2)), (a.grad(wh), z.grad(wh2)), (a.grad(b), z.grad(b2)), (a.grad(xs), z.grad(xs2))] {
            for (u, v) in g1.iter().zip(g2) {
                assert!((u - v).abs() < 1e-12, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn causal_conv_matches_primitive_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (steps, c_in, c_out, kernel, dil) = (9, 2, 3, 2, 4);
        let x = rand_vec(&mut rng, steps * c_in);
        let w = rand_vec(&mut rng, c_out * c_in * kernel);
        let b = rand_vec(&mut rng, c_out);
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let (wv, bv) = (t.leaf(&w), t.leaf(&b));
        let y = t.causal_conv(xv, wv, bv, steps, c_out, kernel, dil).unwrap();
        // Per time step: b + Σ_k W_k x[t − k·d] with W_k the tap-k matrix.
        let mut p = Tape::new();
        let xs = p.leaf(&x);
        let taps: Vec<Var> = (0..kernel)
            .map(|k| {
                let m: Vec<f64> = (0..c_out * c_in).map(|oi| w[oi * kernel + k]).collect();
                p.leaf(&m)
            })
            .collect();
        let bp = p.leaf(&b);
        let mut rows = Vec::new();
        for s in 0..steps {
            let mut acc = bp;
            for (k, tap) in taps.iter().enumerate() {
                if k * dil <= s {
                    let xt = p.slice(xs, (s - k * dil) * c_in, c_in).unwrap();
                    let term = p.matvec(*tap, xt, c_out).unwrap();
                    acc = p.add(acc, term).unwrap();
                }
            }
            rows.push(acc);
        }
        let all = p.concat(&rows);
        for (u, v) in t.value(y).iter().zip(p.value(all)) {
            assert!((u - v).abs() < 1e-14);
        }
        let s1 = t.sum(y);
        t.backward(s1).unwrap();
        let s2 = p.sum(all);
        p.backward(s2).unwrap();
        for (u, v) in t.grad(xv).iter().zip(p.grad(xs)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn monitor_tracks_live_tapes() {
        let m = TapeMonitor::new();
        {
            let _a = Tape::monitored(&m);
            assert_eq!(m.live(), 1);
            {
                let _b = Tape::monitored(&m);
                assert_eq!(m.live(), 2);
            }
            assert_eq!(m.live(), 1);
        }
        assert_eq!((m.live(), m.peak(), m.created()), (0, 2, 2));
        let _c = Tape::new();
        assert_eq!(m.created(), 2);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(&[1.0, 2.0]);
        let b = t.leaf(&[1.0]);
        assert!(t.add(a, b).is_err());
        assert!(t.matvec(a, b, 3).is_err());
        assert!(t.slice(a, 1, 2).is_err());
        assert!(t.dense(a, b, None, 2, 2).is_err());
        assert!(t.backward_with(a, &[1.0]).is_err());
    }
}
