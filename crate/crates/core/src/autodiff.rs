//! Eager, tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates immediately and appends a node to the [`Tape`].
//! A node is *tracked* when at least one of its inputs is tracked; only tracked
//! nodes take part in [`Tape::backward`]. The tape can be consumed once.

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};
use indexmap::IndexMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Select { x: Var, axis: usize, index: usize },
    Embedding { table: Var, ids: Vec<usize> },
    SegmentMean { x: Var, offsets: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    TileRows { x: Var, times: usize },
    Attention(Box<AttentionCache<T>>),
    Upsample { x: Var, grid: usize, patch: usize },
}

#[derive(Debug)]
struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    queries_per_segment: usize,
    key_offsets: Vec<usize>,
    heads: usize,
    /// Softmax probabilities, laid out per segment, head, query row.
    probs: Vec<T>,
    prob_offsets: Vec<usize>,
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients of a scalar loss with respect to named parameters.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T = f64> {
    by_name: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.by_name.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn l2_norm(&self, name: &str) -> Option<T> {
        self.get(name).map(|g| g.iter().map(|&v| v * v).sum::<T>().sqrt())
    }

    pub fn into_map(self) -> IndexMap<String, Vec<T>> {
        self.by_name
    }
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        bail!(Dimension, "{op}: shapes {:?} and {:?} differ", a, b);
    }
    Ok(())
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        bail!(Dimension, "{op}: axis {axis} out of range for shape {:?}", shape);
    }
    Ok(())
}

/// `out[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..n {
                mx = mx.max(x[idx(j)]);
            }
            let mut z = T::zero();
            for j in 0..n {
                z += (x[idx(j)] - mx).exp();
            }
            let lz = z.ln();
            for j in 0..n {
                let s = x[idx(j)] - mx;
                out[idx(j)] = if log { s - lz } else { s.exp() / z };
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let mut value = value;
        value.requires_grad = tracked;
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn raw(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    /// Registers a named parameter. It is tracked iff `value.requires_grad`.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        let tracked = value.requires_grad;
        let value = Tensor::new(value.shape().to_vec(), value.data().to_vec()).expect("valid tensor");
        self.nodes.push(Node { value, op: Op::Leaf, tracked });
        let var = Var(self.nodes.len() - 1);
        if tracked {
            self.params.push((name.to_string(), var));
        }
        var
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let value = Tensor::new(value.shape().to_vec(), value.into_data()).expect("valid tensor");
        self.nodes.push(Node { value, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul: cannot multiply {:?} by {:?}", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Self::raw(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(self.shape(a), self.shape(b), name)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(Self::raw(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    /// `x[n,d] + bias[d]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            bail!(Dimension, "add_row: {:?} + {:?}", sx, sb);
        }
        let d = sb[0];
        let b = self.data(bias);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let t = Self::raw(sx.to_vec(), data);
        Ok(self.push(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.ln());
        self.push(t, Op::Log(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    /// Numerically stable `log(softmax(x))`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis, "softmax")?;
        if shape[axis] == 0 {
            bail!(Domain, "softmax over empty axis {axis}");
        }
        let data = softmax_forward(self.data(x), &shape, axis, log);
        let op = if log { Op::LogSoftmax { x, axis } } else { Op::Softmax { x, axis } };
        Ok(self.push(Self::raw(shape, data), op, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            bail!(Domain, "mean of empty tensor");
        }
        let s: T = self.data(x).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mean(x), &[x]))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis, "sum_axis")?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + j) * inner + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok(self.push(Self::raw(new_shape, out), Op::SumAxis { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            bail!(Dimension, "concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                bail!(Dimension, "concat: {:?} incompatible with {:?} on axis {axis}", s, base);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Self::raw(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Picks one slice along `axis`, removing it from the shape.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis, "select")?;
        if index >= shape[axis] {
            bail!(Dimension, "select: index {index} out of range for axis of length {}", shape[axis]);
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + index) * inner..(o * n + index + 1) * inner]);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok(self.push(Self::raw(new_shape, out), Op::Select { x, axis, index }, &[x]))
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            bail!(Dimension, "embedding table must be 2-d, got {:?}", s);
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            bail!(Dimension, "embedding id {bad} out of range for vocab {vocab}");
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let t = Self::raw(vec![ids.len(), dim], out);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean of consecutive row segments; `offsets` has one more entry than
    /// segments and every segment must be nonempty.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || offsets.len() < 2 || *offsets.last().unwrap() != s[0] || offsets[0] != 0 {
            bail!(Dimension, "segment_mean: offsets {:?} do not cover shape {:?}", offsets, s);
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            bail!(Domain, "segment_mean: empty segment in {:?}", offsets);
        }
        let dim = s[1];
        let src = self.data(x);
        let segs = offsets.len() - 1;
        let mut out = vec![T::zero(); segs * dim];
        for g in 0..segs {
            let inv = T::one() / T::of((offsets[g + 1] - offsets[g]) as f64);
            for r in offsets[g]..offsets[g + 1] {
                for c in 0..dim {
                    out[g * dim + c] += src[r * dim + c] * inv;
                }
            }
        }
        let t = Self::raw(vec![segs, dim], out);
        Ok(self.push(t, Op::SegmentMean { x, offsets: offsets.to_vec() }, &[x]))
    }

    /// Repeats each row of `[n, d]` `times` times consecutively: `[n*times, d]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            bail!(Dimension, "repeat_rows expects 2-d input, got {:?}", s);
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(s[0] * times * s[1]);
        for r in 0..s[0] {
            for _ in 0..times {
                out.extend_from_slice(&src[r * s[1]..(r + 1) * s[1]]);
            }
        }
        let t = Self::raw(vec![s[0] * times, s[1]], out);
        Ok(self.push(t, Op::RepeatRows { x, times }, &[x]))
    }

    /// Stacks `times` copies of a `[n, d]` block: `[times*n, d]`.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            bail!(Dimension, "tile_rows expects 2-d input, got {:?}", s);
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let t = Self::raw(vec![s[0] * times, s[1]], out);
        Ok(self.push(t, Op::TileRows { x, times }, &[x]))
    }

    /// Multi-head scaled dot-product cross-attention over segments.
    ///
    /// `q` is `[segments * queries_per_segment, d]`; `k` and `v` are
    /// `[total_keys, d]` where segment `s` owns key rows
    /// `key_offsets[s]..key_offsets[s + 1]`. Queries of a segment attend only
    /// to that segment's keys.
    pub fn cross_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        queries_per_segment: usize,
        key_offsets: &[usize],
        heads: usize,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            bail!(Dimension, "cross_attention: q {:?}, k {:?}, v {:?}", sq, sk, sv);
        }
        let d = sq[1];
        if heads == 0 || d % heads != 0 {
            bail!(Dimension, "cross_attention: width {d} not divisible by {heads} heads");
        }
        let segs = key_offsets.len().saturating_sub(1);
        if segs == 0 || key_offsets[0] != 0 || key_offsets[segs] != sk[0] || segs * queries_per_segment != sq[0] {
            bail!(Dimension, "cross_attention: segmentation {:?} inconsistent with q {:?}, k {:?}", key_offsets, sq, sk);
        }
        if key_offsets.windows(2).any(|w| w[1] <= w[0]) {
            bail!(Domain, "cross_attention: segment without keys");
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); sq[0] * d];
        let mut prob_offsets = Vec::with_capacity(segs + 1);
        let mut probs = Vec::new();
        for s in 0..segs {
            prob_offsets.push(probs.len());
            let (k0, k1) = (key_offsets[s], key_offsets[s + 1]);
            let nk = k1 - k0;
            for h in 0..heads {
                let c0 = h * dh;
                for qi in 0..queries_per_segment {
                    let qrow = s * queries_per_segment + qi;
                    let qv = &qd[qrow * d + c0..qrow * d + c0 + dh];
                    let mut scores: Vec<T> = (k0..k1)
                        .map(|kr| qv.iter().zip(&kd[kr * d + c0..kr * d + c0 + dh]).map(|(&a, &b)| a * b).sum::<T>() * scale)
                        .collect();
                    let mx = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - mx).exp();
                        z += *sc;
                    }
                    for sc in scores.iter_mut() {
                        *sc /= z;
                    }
                    let orow = &mut out[qrow * d + c0..qrow * d + c0 + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vr = k0 + j;
                        for (o, &vv) in orow.iter_mut().zip(&vd[vr * d + c0..vr * d + c0 + dh]) {
                            *o += p * vv;
                        }
                    }
                    debug_assert_eq!(scores.len(), nk);
                    probs.extend(scores);
                }
            }
        }
        prob_offsets.push(probs.len());
        let cache = AttentionCache {
            q,
            k,
            v,
            queries_per_segment,
            key_offsets: key_offsets.to_vec(),
            heads,
            probs,
            prob_offsets,
        };
        let t = Self::raw(vec![sq[0], d], out);
        Ok(self.push(t, Op::Attention(Box::new(cache)), &[q, k, v]))
    }

    /// Attention probabilities of the most recent use of `out`, if it is an
    /// attention node: `(segment, head, query)` rows of key weights.
    pub fn attention_weights(&self, out: Var) -> Option<&[T]> {
        match &self.nodes[out.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    /// Nearest-neighbour upsampling from per-patch rows to an image.
    ///
    /// `x` is `[batch * grid * grid, channels]`, patches in row-major grid
    /// order; the result is `[batch, channels, grid*patch, grid*patch]`.
    pub fn upsample_patches(&mut self, x: Var, grid: usize, patch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cells = grid * grid;
        if s.len() != 2 || cells == 0 || !s[0].is_multiple_of(cells) {
            bail!(Dimension, "upsample_patches: {:?} is not a whole number of {grid}x{grid} grids", s);
        }
        let (batch, ch) = (s[0] / cells, s[1]);
        let side = grid * patch;
        let src = self.data(x);
        let mut out = vec![T::zero(); batch * ch * side * side];
        for b in 0..batch {
            for c in 0..ch {
                for y in 0..side {
                    for xx in 0..side {
                        let row = b * cells + (y / patch) * grid + xx / patch;
                        out[((b * ch + c) * side + y) * side + xx] = src[row * ch + c];
                    }
                }
            }
        }
        let t = Self::raw(vec![batch, ch, side, side], out);
        Ok(self.push(t, Op::Upsample { x, grid, patch }, &[x]))
    }

    /// Runs reverse accumulation from the scalar `loss` and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            bail!(State, "backward called twice on the same tape");
        }
        if self.nodes[loss.0].value.len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut by_name = IndexMap::new();
        for (name, var) in &self.params {
            let g = grads
                .get_mut(var.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![T::zero(); self.nodes[var.0].value.len()]);
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[target.0].tracked {
            return;
        }
        let len = self.nodes[target.0].value.len();
        let slot = grads[target.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let (ad, bd) = (self.data(a), self.data(b));
                self.accumulate(grads, a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
                self.accumulate(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
                self.accumulate(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.accumulate(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            &Op::Div(a, b) => {
                let bd = self.data(b);
                self.accumulate(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bd[i];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * out[i] / bd[i];
                    }
                });
            }
            &Op::AddRow(x, bias) => {
                let d = self.shape(bias)[0];
                self.accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
                self.accumulate(grads, bias, |gb| {
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                });
            }
            &Op::Scale(x, c) => {
                self.accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * c));
            }
            &Op::AddScalar(x) => {
                self.accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
            }
            &Op::Relu(x) => {
                self.accumulate(grads, x, |gx| {
                    for i in 0..g.len() {
                        if out[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            &Op::Sigmoid(x) => {
                self.accumulate(grads, x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * out[i] * (T::one() - out[i]);
                    }
                });
            }
            &Op::Log(x) => {
                let xd = self.data(x);
                self.accumulate(grads, x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] / xd[i];
                    }
                });
            }
            &Op::Softmax { x, axis } | &Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            if log {
                                let gs: T = (0..n).map(|j| g[idx(j)]).sum();
                                for j in 0..n {
                                    gx[idx(j)] += g[idx(j)] - out[idx(j)].exp() * gs;
                                }
                            } else {
                                let dot: T = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                                for j in 0..n {
                                    gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            &Op::Mean(x) => {
                let n = T::of(self.data(x).len() as f64);
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            &Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[(o * n + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            &Op::Reshape(x) => {
                self.accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    self.accumulate(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + n) * inner];
                            for (d, &s) in gv[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    start += n;
                }
            }
            &Op::Select { x, axis, index } => {
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            gx[(o * n + index) * inner + i] += g[o * inner + i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            gt[id * dim + c] += g[r * dim + c];
                        }
                    }
                });
            }
            Op::SegmentMean { x, offsets } => {
                let dim = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for s in 0..offsets.len() - 1 {
                        let inv = T::one() / T::of((offsets[s + 1] - offsets[s]) as f64);
                        for r in offsets[s]..offsets[s + 1] {
                            for c in 0..dim {
                                gx[r * dim + c] += g[s * dim + c] * inv;
                            }
                        }
                    }
                });
            }
            &Op::RepeatRows { x, times } => {
                let s = self.shape(x);
                let (rows, dim) = (s[0], s[1]);
                self.accumulate(grads, x, |gx| {
                    for r in 0..rows {
                        for t in 0..times {
                            let src = (r * times + t) * dim;
                            for c in 0..dim {
                                gx[r * dim + c] += g[src + c];
                            }
                        }
                    }
                });
            }
            &Op::TileRows { x, times } => {
                let n = self.data(x).len();
                self.accumulate(grads, x, |gx| {
                    for t in 0..times {
                        for (o, &v) in gx.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Attention(c) => self.attention_backward(c, g, grads),
            &Op::Upsample { x, grid, patch } => {
                let s = node.value.shape();
                let (batch, ch, side) = (s[0], s[1], s[2]);
                let cells = grid * grid;
                self.accumulate(grads, x, |gx| {
                    for b in 0..batch {
                        for c in 0..ch {
                            for y in 0..side {
                                for xx in 0..side {
                                    let row = b * cells + (y / patch) * grid + xx / patch;
                                    gx[row * ch + c] += g[((b * ch + c) * side + y) * side + xx];
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let d = self.shape(c.q)[1];
        let dh = d / c.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(c.q), self.data(c.k), self.data(c.v));
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let segs = c.key_offsets.len() - 1;
        for s in 0..segs {
            let (k0, k1) = (c.key_offsets[s], c.key_offsets[s + 1]);
            let nk = k1 - k0;
            let mut pos = c.prob_offsets[s];
            let mut dscore = vec![T::zero(); nk];
            for h in 0..c.heads {
                let c0 = h * dh;
                for qi in 0..c.queries_per_segment {
                    let qrow = s * c.queries_per_segment + qi;
                    let p = &c.probs[pos..pos + nk];
                    pos += nk;
                    let go = &g[qrow * d + c0..qrow * d + c0 + dh];
                    // dP = dO v^T, dV += P^T dO
                    let mut dot = T::zero();
                    for j in 0..nk {
                        let vr = (k0 + j) * d + c0;
                        let dp: T = go.iter().zip(&vd[vr..vr + dh]).map(|(&a, &b)| a * b).sum();
                        dscore[j] = dp;
                        dot += dp * p[j];
                        for (o, &gg) in gv[vr..vr + dh].iter_mut().zip(go) {
                            *o += p[j] * gg;
                        }
                    }
                    for j in 0..nk {
                        let ds = p[j] * (dscore[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kr = (k0 + j) * d + c0;
                        let qr = qrow * d + c0;
                        for t in 0..dh {
                            gq[qr + t] += ds * kd[kr + t];
                            gk[kr + t] += ds * qd[qr + t];
                        }
                    }
                }
            }
        }
        for (var, gsrc) in [(c.q, gq), (c.k, gk), (c.v, gv)] {
            self.accumulate(grads, var, |dst| dst.iter_mut().zip(&gsrc).for_each(|(o, &v)| *o += v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn relu_and_softmax_by_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);
        let z = tape.constant(t(&[2], &[0., 0.]));
        let s = tape.softmax(z, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2, 3], &[0.; 6]));
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dimension(_))));
        let c = tape.constant(t(&[3], &[0.; 3]));
        assert!(matches!(tape.add(a, c), Err(crate::Error::Dimension(_))));
        assert!(matches!(tape.softmax(a, 2), Err(crate::Error::Dimension(_))));
        let empty = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(tape.softmax(empty, 1), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", &t(&[2], &[1., 2.]).with_grad());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap(), &[2., 4.]);
    }

    #[test]
    fn mean_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &t(&[4], &[3., -1., 0., 8.]).with_grad());
        let loss = tape.mean(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("x").unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &t(&[2], &[1., 2.]).with_grad());
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(crate::Error::Contract(_))));
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(crate::Error::State(_))));
    }

    #[test]
    fn frozen_params_are_not_tracked() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &t(&[2], &[1., 2.]));
        let w = tape.param("w", &t(&[2], &[3., 4.]).with_grad());
        let p = tape.mul(x, w).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.get("x").is_none());
        assert_eq!(g.get("w").unwrap(), &[1., 2.]);
    }

    #[test]
    fn concat_select_roundtrip_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 1], &[1., 2.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let s = tape.select(c, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[4., 6.]);
    }

    #[test]
    fn attention_single_key_is_identity_on_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(t(&[1, 2], &[0.5, -0.5]));
        let v = tape.constant(t(&[1, 2], &[7., 9.]));
        let o = tape.cross_attention(q, k, v, 2, &[0, 1], 2).unwrap();
        assert_eq!(tape.value(o).data(), &[7., 9., 7., 9.]);
    }

    #[test]
    fn upsample_layout() {
        let mut tape = Tape::<f64>::new();
        // one sample, 2x2 grid, one channel, patch 2
        let x = tape.constant(t(&[4, 1], &[1., 2., 3., 4.]));
        let u = tape.upsample_patches(x, 2, 2).unwrap();
        assert_eq!(tape.shape(u), &[1, 1, 4, 4]);
        assert_eq!(
            tape.value(u).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }
}
