use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, s: F },
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { a: Var, start: usize, axis: Axis },
    Softmax { a: Var },
    LayerNorm { a: Var, rstd: Vec<F> },
    Conv1d { x: Var, w: Var },
    Gather { table: Var, idx: Vec<usize> },
    MeanRows { a: Var },
    BlockMean { a: Var, window: usize },
    Gelu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records every executed operation in order so adjoints can be replayed
/// in reverse.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_row_broadcast<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> bool {
    a.shape().len() == 2
        && a.shape() != b.shape()
        && b.numel() == a.cols()
        && (b.shape().len() == 1 || b.rows() == 1)
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (F::one() + th);
    let dy = half * (F::one() + th)
        + half * x * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * k * x * x);
    (y, dy)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape().len() {
            1 => Ok((1, t.cols())),
            2 => Ok((t.rows(), t.cols())),
            _ => Err(Error::shape(op, format!("expected rank <= 2, got {:?}", t.shape()))),
        }
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`).
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (m, k) = self.dims2(name, a)?;
        let (br, bc) = self.dims2(name, b)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                name,
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        F::gemm(
            false,
            trans_b,
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            self.value(b).data(),
            F::zero(),
            out.data_mut(),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, bool)> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::from_vec(ta.shape(), data)?, false));
        }
        if is_row_broadcast(ta, tb) {
            let cols = ta.cols();
            let bd = tb.data();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % cols]))
                .collect();
            return Ok((Tensor::from_vec(ta.shape(), data)?, true));
        }
        Err(Error::shape(
            name,
            format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        ))
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, broadcast) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b, broadcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, broadcast) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b, broadcast }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, broadcast) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b, broadcast }, rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, s }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2("concat", p))
            .collect::<Result<_>>()?;
        let out = match axis {
            Axis::Cols => {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(Error::shape("concat", format!("row counts {dims:?} along cols")));
                }
                let width: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::from_vec(&[rows, width], data)?
            }
            Axis::Rows => {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(Error::shape("concat", format!("col counts {dims:?} along rows")));
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::from_vec(&[rows, cols], data)?
            }
        };
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize, axis: Axis) -> Result<Var> {
        let (rows, cols) = self.dims2("slice", a)?;
        let extent = if axis == Axis::Rows { rows } else { cols };
        if len == 0 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} of extent {extent}", start + len),
            ));
        }
        let src = self.value(a);
        let out = match axis {
            Axis::Rows => Tensor::from_vec(
                &[len, cols],
                src.data()[start * cols..(start + len) * cols].to_vec(),
            )?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&src.row(r)[start..start + len]);
                }
                Tensor::from_vec(&[rows, len], data)?
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice { a, start, axis }, rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("softmax", a)?;
        let src = self.value(a);
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let x = src.row(r);
            let mx = x.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let o = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mut s = F::zero();
            for (oi, &xi) in o.iter_mut().zip(x) {
                *oi = (xi - mx).exp();
                s = s + *oi;
            }
            for oi in o.iter_mut() {
                *oi = *oi / s;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("layer_norm", a)?;
        let src = self.value(a);
        let n = F::lit(cols as f64);
        let eps = F::lit(LAYER_NORM_EPS);
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = src.row(r);
            let mean = x.iter().copied().sum::<F>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (o, &v) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mean) * rs;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LayerNorm { a, rstd }, rg))
    }

    /// Depthwise 1-D convolution along rows with same padding. `x` is
    /// `T x C`, `w` is `K x C` with odd `K`.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.dims2("conv1d", x)?;
        let (k, wc) = self.dims2("conv1d", w)?;
        if wc != c || k % 2 == 0 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?}, kernel {:?} (kernel must be odd x channels)",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            ));
        }
        let pad = k / 2;
        let xs = self.value(x);
        let ws = self.value(w);
        let mut out = Tensor::zeros(&[t, c]);
        {
            let od = out.data_mut();
            for ti in 0..t {
                for ki in 0..k {
                    let src = ti + ki;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let xr = xs.row(src - pad);
                    let wr = ws.row(ki);
                    let orow = &mut od[ti * c..(ti + 1) * c];
                    for ci in 0..c {
                        orow[ci] = orow[ci] + wr[ci] * xr[ci];
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv1d { x, w }, rg))
    }

    /// Row lookup into a `V x d` table.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather", table)?;
        if idx.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather", format!("index {bad} out of {v} rows")));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::from_vec(&[idx.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows, `T x C -> 1 x C`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("mean_rows", a)?;
        let src = self.value(a);
        let inv = F::one() / F::lit(rows as f64);
        let mut out = Tensor::zeros(&[1, cols]);
        for r in 0..rows {
            for (o, &v) in out.data_mut().iter_mut().zip(src.row(r)) {
                *o = *o + v;
            }
        }
        for o in out.data_mut() {
            *o = *o * inv;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows { a }, rg))
    }

    /// Mean over non-overlapping row windows, `T x C -> ceil(T/w) x C`; a
    /// trailing partial window is averaged over its actual length.
    pub fn block_mean(&mut self, a: Var, window: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("block_mean", a)?;
        if window == 0 {
            return Err(Error::shape("block_mean", "window 0"));
        }
        let blocks = rows.div_ceil(window);
        let src = self.value(a);
        let mut out = Tensor::zeros(&[blocks, cols]);
        for b in 0..blocks {
            let lo = b * window;
            let hi = (lo + window).min(rows);
            let inv = F::one() / F::lit((hi - lo) as f64);
            let orow = &mut out.data_mut()[b * cols..(b + 1) * cols];
            for r in lo..hi {
                for (o, &v) in orow.iter_mut().zip(src.row(r)) {
                    *o = *o + v;
                }
            }
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::BlockMean { a, window }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: F = t.data().iter().copied().sum::<F>() / F::lit(t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Reverse pass from a scalar root. Visits every recorded node once, in
    /// reverse recording order, accumulating adjoints additively.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), F::one()));
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            visited += 1;
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(gout) = upper[0].as_ref() else {
                continue;
            };
            self.adjoint(node, gout, lower);
        }
        Ok(Gradients { grads, visited })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> Option<&'g mut Tensor<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let s = &mut grads[v.0];
        if s.is_none() {
            *s = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        s.as_mut()
    }

    fn adjoint(&self, node: &Node<F>, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.rows(), ta.cols());
                let n = gout.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    F::gemm(false, !trans_b, m, n, k, F::one(), gout.data(), tb.data(), F::one(), ga.data_mut());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // C = A Bᵀ, B is n x k: dB = dCᵀ · A
                        F::gemm(true, false, n, m, k, F::one(), gout.data(), ta.data(), F::one(), gb.data_mut());
                    } else {
                        // dB = Aᵀ · dC
                        F::gemm(true, false, k, m, n, F::one(), ta.data(), gout.data(), F::one(), gb.data_mut());
                    }
                }
            }
            Op::Add { a, b, broadcast } | Op::Sub { a, b, broadcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -F::one() } else { F::one() };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(gout);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *broadcast {
                        let cols = gb.numel();
                        let gd = gb.data_mut();
                        for (i, &g) in gout.data().iter().enumerate() {
                            gd[i % cols] = gd[i % cols] + sign * g;
                        }
                    } else {
                        gb.axpy(sign, gout);
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let cols = tb.numel();
                if let Some(ga) = self.slot(grads, *a) {
                    let bd = tb.data();
                    for (i, (g, &go)) in ga.data_mut().iter_mut().zip(gout.data()).enumerate() {
                        let bv = if *broadcast { bd[i % cols] } else { bd[i] };
                        *g = *g + go * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let gd = gb.data_mut();
                    for (i, (&go, &av)) in gout.data().iter().zip(ta.data()).enumerate() {
                        let j = if *broadcast { i % cols } else { i };
                        gd[j] = gd[j] + go * av;
                    }
                }
            }
            Op::Scale { a, s } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.axpy(*s, gout);
                }
            }
            Op::Concat { parts, axis } => {
                let width = gout.cols();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = {
                        let t = self.value(*p);
                        (t.rows(), t.cols())
                    };
                    if let Some(gp) = self.slot(grads, *p) {
                        let gd = gp.data_mut();
                        match axis {
                            Axis::Cols => {
                                for r in 0..pr {
                                    let src = &gout.data()[r * width + offset..r * width + offset + pc];
                                    for (d, &s) in gd[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                        *d = *d + s;
                                    }
                                }
                            }
                            Axis::Rows => {
                                let src = &gout.data()[offset * width..(offset + pr) * width];
                                for (d, &s) in gd.iter_mut().zip(src) {
                                    *d = *d + s;
                                }
                            }
                        }
                    }
                    offset += if *axis == Axis::Cols { pc } else { pr };
                }
            }
            Op::Slice { a, start, axis } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let cols = ga.cols();
                    let gd = ga.data_mut();
                    match axis {
                        Axis::Rows => {
                            for (d, &s) in gd[start * cols..].iter_mut().zip(gout.data()) {
                                *d = *d + s;
                            }
                        }
                        Axis::Cols => {
                            let len = gout.cols();
                            for r in 0..gout.rows() {
                                let dst = &mut gd[r * cols + start..r * cols + start + len];
                                for (d, &s) in dst.iter_mut().zip(gout.row(r)) {
                                    *d = *d + s;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let y = &node.value;
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = gout.row(r);
                        let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        let dst = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let y = &node.value;
                    let cols = y.cols();
                    let n = F::lit(cols as f64);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = gout.row(r);
                        let mg = gr.iter().copied().sum::<F>() / n;
                        let mgy = gr.iter().zip(yr).map(|(&g, &yv)| g * yv).sum::<F>() / n;
                        let dst = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                            *d = *d + rstd[r] * (gv - mg - yv * mgy);
                        }
                    }
                }
            }
            Op::Conv1d { x, w } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (t, c) = (xs.rows(), xs.cols());
                let k = ws.rows();
                let pad = k / 2;
                if let Some(gx) = self.slot(grads, *x) {
                    let gd = gx.data_mut();
                    for ti in 0..t {
                        let go = gout.row(ti);
                        for ki in 0..k {
                            let src = ti + ki;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let wr = ws.row(ki);
                            let dst = &mut gd[(src - pad) * c..(src - pad + 1) * c];
                            for ci in 0..c {
                                dst[ci] = dst[ci] + wr[ci] * go[ci];
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    let gd = gw.data_mut();
                    for ti in 0..t {
                        let go = gout.row(ti);
                        for ki in 0..k {
                            let src = ti + ki;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let xr = xs.row(src - pad);
                            let dst = &mut gd[ki * c..(ki + 1) * c];
                            for ci in 0..c {
                                dst[ci] = dst[ci] + xr[ci] * go[ci];
                            }
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let d = gt.cols();
                    let gd = gt.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        for (dst, &s) in gd[i * d..(i + 1) * d].iter_mut().zip(gout.row(r)) {
                            *dst = *dst + s;
                        }
                    }
                }
            }
            Op::MeanRows { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let rows = ga.rows();
                    let cols = ga.cols();
                    let inv = F::one() / F::lit(rows as f64);
                    let gd = ga.data_mut();
                    for r in 0..rows {
                        for (dst, &s) in gd[r * cols..(r + 1) * cols].iter_mut().zip(gout.data()) {
                            *dst = *dst + s * inv;
                        }
                    }
                }
            }
            Op::BlockMean { a, window } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let rows = ga.rows();
                    let cols = ga.cols();
                    let gd = ga.data_mut();
                    for b in 0..gout.rows() {
                        let lo = b * window;
                        let hi = (lo + window).min(rows);
                        let inv = F::one() / F::lit((hi - lo) as f64);
                        for r in lo..hi {
                            for (dst, &s) in gd[r * cols..(r + 1) * cols].iter_mut().zip(gout.row(b)) {
                                *dst = *dst + s * inv;
                            }
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let xs = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &x), &g) in ga.data_mut().iter_mut().zip(xs.data()).zip(gout.data()) {
                        *d = *d + g * gelu_parts(x).1;
                    }
                }
            }
            Op::Sum { a } => {
                let g = gout.item();
                if let Some(ga) = self.slot(grads, *a) {
                    for d in ga.data_mut() {
                        *d = *d + g;
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let g = gout.item() / F::lit(ga.numel() as f64);
                    for d in ga.data_mut() {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    visited: usize,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of recorded operations the reverse sweep stepped through.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
