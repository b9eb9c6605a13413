use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row partition used by the segment reductions.
///
/// `offsets` has one more entry than there are segments; segment `s` covers
/// rows `offsets[s]..offsets[s + 1]`. Segments may be empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Rc<[usize]>,
}

impl Segments {
    pub fn from_offsets(offsets: Vec<usize>) -> Self {
        assert!(!offsets.is_empty(), "segment offsets need a leading zero");
        assert_eq!(offsets[0], 0, "segment offsets must start at zero");
        assert!(
            offsets.windows(2).all(|w| w[0] <= w[1]),
            "segment offsets must be non-decreasing"
        );
        Self {
            offsets: offsets.into(),
        }
    }

    /// `count` consecutive segments of `size` rows each.
    pub fn uniform(count: usize, size: usize) -> Self {
        Self::from_offsets((0..=count).map(|s| s * size).collect())
    }

    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        let mut acc = 0;
        for len in lengths {
            acc += len;
            offsets.push(acc);
        }
        Self::from_offsets(offsets)
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn len_of(&self, s: usize) -> usize {
        self.offsets[s + 1] - self.offsets[s]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    WeightedGather {
        src: Var,
        index: Rc<[usize]>,
        weights: Rc<[f64]>,
        k: usize,
    },
    SegmentSum(Var, Segments),
    SegmentMean(Var, Segments),
    SegmentMax(Var, Vec<usize>),
    SegmentSoftmax(Var, Segments),
    RowSoftmax(Var),
    Transpose(Var),
    Reshape(Var),
    RowNorm(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape that records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a single reverse sweep over the
/// tape visits every node after all of its consumers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that gradients are never propagated into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x · w + bias`, with `bias` a `1 × cols` row added to every row.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        assert_eq!(bv.shape(), (1, wv.cols()), "affine expects a 1 x cols bias");
        let mut value = Tensor::zeros(xv.rows(), wv.cols());
        for r in 0..value.rows() {
            value.row_mut(r).copy_from_slice(bv.data());
        }
        gemm(xv, false, wv, false, &mut value, true);
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        self.push(value, Op::Affine(x, w, bias), rg)
    }

    /// Adds a `1 × cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1 x cols bias");
        let mut value = av.clone();
        let bias = rv.data();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    /// Scales row `r` of `a` by `col[r]`, where `col` is `rows × 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col expects a rows x 1 column");
        let mut value = av.clone();
        for r in 0..value.rows() {
            let s = cv.data()[r];
            value.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            let w = pv.cols();
            for r in 0..rows {
                value.row_mut(r)[offset..offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let value = Tensor::from_vec(end - start, c, av.data()[start * c..end * c].to_vec());
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// Row `r` of the result is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Var {
        let value = self.value(a).select_rows(&index);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, index), rg)
    }

    /// Row `i` of the result is `Σ_t weights[i·k + t] · src[index[i·k + t]]`.
    pub fn weighted_gather(&mut self, src: Var, index: Rc<[usize]>, weights: Rc<[f64]>, k: usize) -> Var {
        assert_eq!(index.len(), weights.len(), "weighted_gather length mismatch");
        assert!(k > 0 && index.len().is_multiple_of(k), "weighted_gather group size");
        let sv = self.value(src);
        let rows = index.len() / k;
        let mut value = Tensor::zeros(rows, sv.cols());
        for i in 0..rows {
            let out = value.row_mut(i);
            for t in 0..k {
                let w = weights[i * k + t];
                for (o, s) in out.iter_mut().zip(sv.row(index[i * k + t])) {
                    *o += w * s;
                }
            }
        }
        let rg = self.rg(src);
        self.push(value, Op::WeightedGather { src, index, weights, k }, rg)
    }

    pub fn segment_sum(&mut self, a: Var, seg: &Segments) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), seg.total(), "segment_sum row mismatch");
        let mut value = Tensor::zeros(seg.count(), av.cols());
        for s in 0..seg.count() {
            let out = value.row_mut(s);
            for r in seg.range(s) {
                for (o, x) in out.iter_mut().zip(av.row(r)) {
                    *o += x;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SegmentSum(a, seg.clone()), rg)
    }

    /// Per-segment mean; empty segments produce zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: &Segments) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), seg.total(), "segment_mean row mismatch");
        let mut value = Tensor::zeros(seg.count(), av.cols());
        for s in 0..seg.count() {
            let n = seg.len_of(s);
            if n == 0 {
                continue;
            }
            let inv = 1.0 / n as f64;
            let out = value.row_mut(s);
            for r in seg.range(s) {
                for (o, x) in out.iter_mut().zip(av.row(r)) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::SegmentMean(a, seg.clone()), rg)
    }

    /// Column-wise maximum per segment; ties resolve to the earliest row.
    /// Empty segments produce zero rows.
    pub fn segment_max(&mut self, a: Var, seg: &Segments) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), seg.total(), "segment_max row mismatch");
        let cols = av.cols();
        let mut value = Tensor::zeros(seg.count(), cols);
        let mut argmax = vec![usize::MAX; seg.count() * cols];
        for s in 0..seg.count() {
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_r = usize::MAX;
                for r in seg.range(s) {
                    let x = av.get(r, c);
                    if x > best {
                        best = x;
                        best_r = r;
                    }
                }
                if best_r != usize::MAX {
                    value.set(s, c, best);
                    argmax[s * cols + c] = best_r;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SegmentMax(a, argmax), rg)
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, a: Var, seg: &Segments) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), seg.total(), "segment_softmax row mismatch");
        let cols = av.cols();
        let mut value = av.clone();
        for s in 0..seg.count() {
            let range = seg.range(s);
            if range.is_empty() {
                continue;
            }
            for c in 0..cols {
                let max = range
                    .clone()
                    .map(|r| av.get(r, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for r in range.clone() {
                    let e = (av.get(r, c) - max).exp();
                    value.set(r, c, e);
                    denom += e;
                }
                for r in range.clone() {
                    let e = value.get(r, c);
                    value.set(r, c, e / denom);
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SegmentSoftmax(a, seg.clone()), rg)
    }

    /// Softmax across the columns of each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Reinterprets the row-major buffer of `a` with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape must preserve the element count");
        let value = Tensor::from_vec(rows, cols, av.data().to_vec());
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Euclidean norm of each row, as a `rows × 1` column.
    ///
    /// The derivative at a zero row is taken to be zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::RowNorm(a), rg)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::RowSum(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of all entries; zero for an empty tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = if av.is_empty() { 0.0 } else { av.sum() / av.len() as f64 };
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Hash of every piecewise branch taken during evaluation: the sign of each
    /// leaky-rectifier input and each segment-max winner. Two evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(a, _) => {
                    for x in self.value(*a).data() {
                        (*x > 0.0).hash(&mut h);
                    }
                }
                Op::SegmentMax(_, argmax) => argmax.hash(&mut h),
                Op::RowNorm(_) => {
                    for x in node.value.data() {
                        (*x > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_ref(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds into the gradient slot of `v`, creating a zero slot if needed.
    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        let shape = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let slot = self.slot(grads, *a);
                    gemm(g, false, bv, true, slot, true);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let slot = self.slot(grads, *b);
                    gemm(av, true, g, false, slot, true);
                }
            }
            Op::Affine(x, w, bias) => {
                if self.rg(*x) {
                    let wv = self.value(*w);
                    let slot = self.slot(grads, *x);
                    gemm(g, false, wv, true, slot, true);
                }
                if self.rg(*w) {
                    let xv = self.value(*x);
                    let slot = self.slot(grads, *w);
                    gemm(xv, true, g, false, slot, true);
                }
                if self.rg(*bias) {
                    let slot = self.slot(grads, *bias);
                    for r in 0..g.rows() {
                        for (o, v) in slot.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate_ref(grads, *a, g);
                if self.rg(*row) {
                    let mut acc = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in acc.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *row, acc);
                }
            }
            Op::Add(a, b) => {
                self.accumulate_ref(grads, *a, g);
                self.accumulate_ref(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate_ref(grads, *a, g);
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let ga = g.zip_map(&node.value, |x, q| x * q);
                    self.accumulate(grads, *b, ga.zip_map(bv, |x, y| -x / y));
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = cv.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*col) {
                    let data = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Tensor::from_vec(g.rows(), 1, data));
                }
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accumulate(grads, *a, g.map(|x| x * f));
            }
            Op::AddScalar(a) => self.accumulate_ref(grads, *a, g),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { s * x });
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let slot = self.slot(grads, p);
                        for r in 0..g.rows() {
                            for (o, x) in slot.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *o += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                let slot = self.slot(grads, *a);
                for r in 0..g.rows() {
                    let dst = &mut slot.row_mut(r)[start..start + g.cols()];
                    for (o, x) in dst.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = g.cols();
                let slot = self.slot(grads, *a);
                let dst = &mut slot.data_mut()[start * c..start * c + g.len()];
                for (o, x) in dst.iter_mut().zip(g.data()) {
                    *o += x;
                }
            }
            Op::GatherRows(a, index) => {
                let slot = self.slot(grads, *a);
                for (r, &i) in index.iter().enumerate() {
                    for (o, x) in slot.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::WeightedGather { src, index, weights, k } => {
                let slot = self.slot(grads, *src);
                for (t, (&i, &w)) in index.iter().zip(weights.iter()).enumerate() {
                    let gr = g.row(t / k);
                    for (o, x) in slot.row_mut(i).iter_mut().zip(gr) {
                        *o += w * x;
                    }
                }
            }
            Op::SegmentSum(a, seg) => {
                let slot = self.slot(grads, *a);
                for s in 0..seg.count() {
                    let gs = g.row(s);
                    for r in seg.range(s) {
                        for (o, x) in slot.row_mut(r).iter_mut().zip(gs) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SegmentMean(a, seg) => {
                let slot = self.slot(grads, *a);
                for s in 0..seg.count() {
                    let n = seg.len_of(s);
                    if n == 0 {
                        continue;
                    }
                    let inv = 1.0 / n as f64;
                    let gs = g.row(s);
                    for r in seg.range(s) {
                        for (o, x) in slot.row_mut(r).iter_mut().zip(gs) {
                            *o += x * inv;
                        }
                    }
                }
            }
            Op::SegmentMax(a, argmax) => {
                let cols = g.cols();
                let slot = self.slot(grads, *a);
                for (flat, &r) in argmax.iter().enumerate() {
                    if r != usize::MAX {
                        let (s, c) = (flat / cols, flat % cols);
                        let cur = slot.get(r, c);
                        slot.set(r, c, cur + g.get(s, c));
                    }
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = &node.value;
                let cols = y.cols();
                let mut ga = Tensor::zeros(y.rows(), cols);
                for s in 0..seg.count() {
                    for c in 0..cols {
                        let dot: f64 = seg.range(s).map(|r| g.get(r, c) * y.get(r, c)).sum();
                        for r in seg.range(s) {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::from_vec(r, c, g.data().to_vec()));
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let norms = &node.value;
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let n = norms.data()[r];
                    if n > 0.0 {
                        let f = g.data()[r] / n;
                        for (o, x) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = f * x;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let gv = g.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|o| *o = gv);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(av.rows(), av.cols(), g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                if !av.is_empty() {
                    let v = g.item() / av.len() as f64;
                    self.accumulate(grads, *a, Tensor::full(av.rows(), av.cols(), v));
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        denom += *x;
    }
    for x in row.iter_mut() {
        *x /= denom;
    }
}
