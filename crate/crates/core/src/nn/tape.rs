use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::conv::{self, ConvDims, ConvGeom};
use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{numel, shape_err, strides, NnError, ParamId, ParamStore, Real, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

const ZERO_FILL: usize = usize::MAX;

type SegmentFn<'p, T> = dyn Fn(&mut Tape<'p, T>, &[Var]) -> Result<Vec<Var>> + 'p;

struct Segment<'p, T: Real> {
    inputs: Vec<Var>,
    f: Rc<SegmentFn<'p, T>>,
}

struct GruSaved<T> {
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    ghn: Vec<T>,
}

enum Op<'p, T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastAdd(Var, Var, Rc<Vec<usize>>),
    BroadcastMul(Var, Var, Rc<Vec<usize>>),
    Affine(Var, T),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    /// `out[j] = x[map[j]]`, or zero where `map[j] == ZERO_FILL`.
    Gather(Var, Vec<usize>),
    Concat { xs: Vec<Var>, axis_len: Vec<usize>, inner: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    WeightNorm { v: Var, g: Var, norms: Vec<T> },
    Gru { x: Var, h: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, saved: Box<GruSaved<T>> },
    MdnNll { logits: Var, mu: Var, log_sigma: Var, target: Vec<T> },
    Bce { p: Var, labels: Vec<T> },
    Segment(Rc<Segment<'p, T>>),
    SegmentOut { seg: Var, offset: usize },
}

struct Node<'p, T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<'p, T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn var(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(|g| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(&id, g)| (id, g.as_slice()))
    }
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape borrows the parameter store for its whole lifetime and is
/// confined to one thread. An inference tape (see [`Tape::inference`])
/// computes the same values but records no backward information.
pub struct Tape<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<ParamId, Var>,
    record: bool,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            record: true,
        }
    }

    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            record: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of activation elements currently held by the tape
    /// (parameter copies excluded).
    pub fn stored_activations(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Param(_)))
            .map(|n| n.value.len())
            .sum()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(NnError::NonScalarLoss(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<'p, T>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{name}");
        if value.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NumericFault { op: name });
        }
        let (op, requires_grad) = if self.record && requires_grad {
            (op, true)
        } else if let Op::Param(id) = op {
            (Op::Param(id), false)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push("constant", shape, t.into_data(), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push("input", shape, t.into_data(), Op::Leaf, true)
    }

    /// The tape-local leaf for a parameter. Repeated calls return the same
    /// variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self
            .push("param", p.shape.clone(), p.value.clone(), Op::Param(id), true)
            .expect("parameters are finite");
        self.param_vars.insert(id, v);
        v
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<'p, T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        self.push(name, self.shape(a).to_vec(), value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn broadcast_map(&self, op: &'static str, x: Var, y: Var) -> Result<Vec<usize>> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() {
            return Err(shape_err(op, format!("cannot broadcast {ys:?} onto {xs:?}")));
        }
        let mut yfull = vec![1; xs.len() - ys.len()];
        yfull.extend_from_slice(ys);
        for (a, b) in xs.iter().zip(&yfull) {
            if *b != 1 && a != b {
                return Err(shape_err(op, format!("cannot broadcast {ys:?} onto {xs:?}")));
            }
        }
        let ystr = strides(&yfull);
        let eff: Vec<usize> = yfull
            .iter()
            .zip(&ystr)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        Ok(odometer(xs, &eff))
    }

    /// `x + y` where `y` broadcasts over axes of extent 1 (or missing
    /// leading axes).
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let map = self.broadcast_map("add_bcast", x, y)?;
        let yv = self.value(y);
        let value = self.value(x).iter().zip(&map).map(|(&a, &j)| a + yv[j]).collect();
        let rg = self.rg(&[x, y]);
        self.push("add_bcast", self.shape(x).to_vec(), value, Op::BroadcastAdd(x, y, Rc::new(map)), rg)
    }

    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let map = self.broadcast_map("mul_bcast", x, y)?;
        let yv = self.value(y);
        let value = self.value(x).iter().zip(&map).map(|(&a, &j)| a * yv[j]).collect();
        let rg = self.rg(&[x, y]);
        self.push("mul_bcast", self.shape(x).to_vec(), value, Op::BroadcastMul(x, y, Rc::new(map)), rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<'p, T>) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(name, self.shape(x).to_vec(), value, op, rg)
    }

    /// `a·x + b`
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Result<Var> {
        self.unary("affine", x, |v| a * v + b, Op::Affine(x, a))
    }

    pub fn scale(&mut self, x: Var, a: T) -> Result<Var> {
        self.affine(x, a, T::zero())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, |v| v.ln(), Op::Ln(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(
            "leaky_relu",
            x,
            |v| if v > T::zero() { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).len() as f64);
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("mean", vec![], vec![s / n], Op::Mean(x), rg)
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x), rg)
    }

    fn gather(&mut self, name: &'static str, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let value = map
            .iter()
            .map(|&j| if j == ZERO_FILL { T::zero() } else { xv[j] })
            .collect();
        let rg = self.rg(&[x]);
        self.push(name, shape, value, Op::Gather(x, map), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("invalid permutation {perm:?} for {xs:?}")));
        }
        let st = strides(&xs);
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let out_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let map = odometer(&out_shape, &out_strides);
        self.gather("permute", x, out_shape, map)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(shape_err("narrow", format!("{start}+{len} on axis {axis} of {xs:?}")));
        }
        let mut out_shape = xs.clone();
        out_shape[axis] = len;
        let map = narrow_map(&xs, axis, start, len);
        self.gather("narrow", x, out_shape, map)
    }

    /// Index `idx` along `axis`, dropping the axis.
    pub fn select(&mut self, x: Var, axis: usize, idx: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || idx >= xs[axis] {
            return Err(shape_err("select", format!("index {idx} on axis {axis} of {xs:?}")));
        }
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        let map = narrow_map(&xs, axis, idx, 1);
        self.gather("select", x, out_shape, map)
    }

    /// Shift one step forward along `axis`: `out[i] = x[i-1]`, `out[0] = 0`.
    pub fn shift(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(shape_err("shift", format!("axis {axis} of {xs:?}")));
        }
        let st = strides(&xs);
        let n = numel(&xs);
        let map = (0..n)
            .map(|j| {
                let i = (j / st[axis]) % xs[axis];
                if i == 0 { ZERO_FILL } else { j - st[axis] }
            })
            .collect();
        self.gather("shift", x, xs, map)
    }

    /// Reflection padding of the two trailing axes of a 4-D tensor,
    /// `pads = [top, bottom, left, right]`.
    pub fn reflect_pad2d(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("reflect_pad2d", format!("expected 4-D input, got {xs:?}")));
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
        let mut map = Vec::with_capacity(bc * ho * wo);
        for p in 0..bc {
            for y in 0..ho {
                let iy = conv::reflect_index(y as isize - pads[0] as isize, h);
                for xx in 0..wo {
                    let ix = conv::reflect_index(xx as isize - pads[2] as isize, w);
                    map.push((p * h + iy) * w + ix);
                }
            }
        }
        self.gather("reflect_pad2d", x, vec![xs[0], xs[1], ho, wo], map)
    }

    /// Rows of `table[G, d]` selected by `ids`, shaped `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("embedding", format!("table must be 2-D, got {ts:?}")));
        }
        let (g, d) = (ts[0], ts[1]);
        let mut map = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= g {
                return Err(NnError::Index { index: id, len: g });
            }
            map.extend(id * d..(id + 1) * d);
        }
        self.gather("embedding", table, vec![ids.len(), d], map)
    }

    fn concat_impl(&mut self, xs: &[Var], axis: usize, out_shape: Vec<usize>, axis_len: Vec<usize>) -> Result<Var> {
        let inner: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let total = numel(&out_shape);
        let mut value = Vec::with_capacity(total);
        for o in 0..outer {
            for (&x, &a) in xs.iter().zip(&axis_len) {
                let chunk = a * inner;
                value.extend_from_slice(&self.value(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(xs);
        self.push(
            "concat",
            out_shape,
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis_len,
                inner,
            },
            rg,
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut axis_len = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            axis_len.push(s[axis]);
        }
        let mut out_shape = first;
        out_shape[axis] = axis_len.iter().sum();
        self.concat_impl(xs, axis, out_shape, axis_len)
    }

    /// Stack equally shaped values along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err("stack", "no inputs"))?)
            .to_vec();
        if axis > first.len() || xs.iter().any(|&x| self.shape(x) != first.as_slice()) {
            return Err(shape_err("stack", format!("inputs must share shape {first:?}")));
        }
        let mut out_shape = first;
        out_shape.insert(axis, xs.len());
        self.concat_impl(xs, axis, out_shape, vec![1; xs.len()])
    }

    // ---- dense layers --------------------------------------------------

    /// `y = x·Wᵀ + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (out, inp) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err("linear", format!("bias {:?} vs {out} outputs", self.shape(b))));
            }
        }
        let rows = numel(&xs) / inp.max(1);
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            for r in y.chunks_mut(out) {
                r.copy_from_slice(bv);
            }
        }
        gemm_nt(self.value(x), self.value(w), &mut y, rows, inp, out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push("linear", shape, y, Op::Linear { x, w, b }, rg)
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [channels] => Err(shape_err(
                op,
                format!("bias {:?} vs {channels} channels", self.shape(b)),
            )),
            _ => Ok(()),
        }
    }

    /// Grouped, strided, dilated 2-D cross-correlation with implicit zero
    /// padding. `x[B, C_in, H, W]`, `w[C_out, C_in/groups, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let d = ConvDims::forward(self.shape(x), self.shape(w), &geom, "conv2d")?;
        self.check_bias("conv2d", b, d.c_out)?;
        let mut y = vec![T::zero(); d.y_len()];
        conv::forward(self.value(x), self.value(w), &mut y, &d, &geom);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b), d.batch, d.c_out, d.ho * d.wo);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            "conv2d",
            vec![d.batch, d.c_out, d.ho, d.wo],
            y,
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// weight: `x[B, C, H, W]`, `w[C, C_out/groups, kH, kW]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        output_padding: [usize; 2],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(shape_err("conv_transpose2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        let c_out = ws[1] * geom.groups;
        let ho = geom.transpose_extent(0, xs[2], ws[2], output_padding[0]);
        let wo = geom.transpose_extent(1, xs[3], ws[3], output_padding[1]);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err("conv_transpose2d", "non-positive output extent"));
        };
        let out_shape = vec![xs[0], c_out, ho, wo];
        // The equivalent forward convolution maps out_shape -> xs.
        let d = ConvDims::forward(&out_shape, &ws, &geom, "conv_transpose2d")?;
        if d.ho != xs[2] || d.wo != xs[3] {
            return Err(shape_err(
                "conv_transpose2d",
                format!("output_padding {output_padding:?} inconsistent with stride"),
            ));
        }
        self.check_bias("conv_transpose2d", b, c_out)?;
        let mut y = vec![T::zero(); d.x_len()];
        conv::backward_input(self.value(x), self.value(w), &mut y, &d, &geom);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b), d.batch, c_out, ho * wo);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            "conv_transpose2d",
            out_shape,
            y,
            Op::ConvTranspose2d { x, w, b, geom },
            rg,
        )
    }

    /// Weight normalisation `w = g · v/‖v‖`, one scalar `g` per slice of
    /// `v` along axis 0.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        if vs.is_empty() || self.shape(g) != [vs[0]] {
            return Err(shape_err("weight_norm", format!("v {vs:?} vs g {:?}", self.shape(g))));
        }
        let fan = numel(&vs[1..]);
        let vv = self.value(v);
        let gv = self.value(g);
        let mut norms = Vec::with_capacity(vs[0]);
        let mut w = Vec::with_capacity(vv.len());
        for (c, row) in vv.chunks(fan).enumerate() {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            if n == T::zero() || !n.is_finite() {
                return Err(NnError::NumericFault { op: "weight_norm" });
            }
            norms.push(n);
            let s = gv[c] / n;
            w.extend(row.iter().map(|&a| s * a));
        }
        let rg = self.rg(&[v, g]);
        self.push("weight_norm", vs, w, Op::WeightNorm { v, g, norms }, rg)
    }

    /// One GRU update (gate order reset, update, candidate):
    ///
    /// ```text
    /// r = σ(W_ir x + b_ir + W_hr h + b_hr)
    /// z = σ(W_iz x + b_iz + W_hz h + b_hz)
    /// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
    /// h' = (1 − z) ⊙ n + z ⊙ h
    /// ```
    ///
    /// `x[N, d_in]`, `h[N, d]`, `w_ih[3d, d_in]`, `w_hh[3d, d]`.
    pub fn gru_cell(&mut self, x: Var, h: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let hs = self.shape(h).to_vec();
        let wi = self.shape(w_ih).to_vec();
        let wh = self.shape(w_hh).to_vec();
        let ok = xs.len() == 2
            && hs.len() == 2
            && xs[0] == hs[0]
            && wi.len() == 2
            && wh.len() == 2
            && wi[0] == 3 * hs[1]
            && wi[1] == xs[1]
            && wh == [3 * hs[1], hs[1]]
            && self.shape(b_ih) == [3 * hs[1]]
            && self.shape(b_hh) == [3 * hs[1]];
        if !ok {
            return Err(shape_err(
                "gru_cell",
                format!("x {xs:?}, h {hs:?}, w_ih {wi:?}, w_hh {wh:?}"),
            ));
        }
        let (n_rows, d_in, d) = (xs[0], xs[1], hs[1]);
        let mut gi = vec![T::zero(); n_rows * 3 * d];
        for r in gi.chunks_mut(3 * d) {
            r.copy_from_slice(self.value(b_ih));
        }
        gemm_nt(self.value(x), self.value(w_ih), &mut gi, n_rows, d_in, 3 * d);
        let mut gh = vec![T::zero(); n_rows * 3 * d];
        for r in gh.chunks_mut(3 * d) {
            r.copy_from_slice(self.value(b_hh));
        }
        gemm_nt(self.value(h), self.value(w_hh), &mut gh, n_rows, d, 3 * d);

        let hv = self.value(h);
        let len = n_rows * d;
        let mut saved = GruSaved {
            r: Vec::with_capacity(len),
            z: Vec::with_capacity(len),
            n: Vec::with_capacity(len),
            ghn: Vec::with_capacity(len),
        };
        let mut out = Vec::with_capacity(len);
        for row in 0..n_rows {
            let gi_r = &gi[row * 3 * d..(row + 1) * 3 * d];
            let gh_r = &gh[row * 3 * d..(row + 1) * 3 * d];
            for k in 0..d {
                let r = sigmoid(gi_r[k] + gh_r[k]);
                let z = sigmoid(gi_r[d + k] + gh_r[d + k]);
                let ghn = gh_r[2 * d + k];
                let n = (gi_r[2 * d + k] + r * ghn).tanh();
                let hp = hv[row * d + k];
                out.push(n + z * (hp - n));
                saved.r.push(r);
                saved.z.push(z);
                saved.n.push(n);
                saved.ghn.push(ghn);
            }
        }
        let rg = self.rg(&[x, h, w_ih, w_hh, b_ih, b_hh]);
        self.push(
            "gru_cell",
            vec![n_rows, d],
            out,
            Op::Gru {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                saved: Box::new(saved),
            },
            rg,
        )
    }

    // ---- losses --------------------------------------------------------

    /// Mean negative log-likelihood of `target` under per-row Gaussian
    /// mixtures given by mixture `logits`, means `mu` and log-scales
    /// `log_sigma`, all shaped `[N, K]`. Evaluated with log-sum-exp.
    pub fn mdn_nll(&mut self, logits: Var, mu: Var, log_sigma: Var, target: &[T]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || self.shape(mu) != s.as_slice() || self.shape(log_sigma) != s.as_slice() || target.len() != s[0] {
            return Err(shape_err(
                "mdn_nll",
                format!("logits {s:?}, mu {:?}, log_sigma {:?}, target {}", self.shape(mu), self.shape(log_sigma), target.len()),
            ));
        }
        if target.iter().any(|t| !t.is_finite()) {
            return Err(NnError::NumericFault { op: "mdn_nll" });
        }
        let (n, k) = (s[0], s[1]);
        let mut total = T::zero();
        let lv = self.value(logits);
        let mv = self.value(mu);
        let sv = self.value(log_sigma);
        let mut scratch = vec![T::zero(); k];
        for row in 0..n {
            let o = row * k;
            let lse_pi = log_sum_exp(&lv[o..o + k]);
            for c in 0..k {
                scratch[c] = lv[o + c] + gauss_log_pdf(target[row], mv[o + c], sv[o + c]);
            }
            total += lse_pi - log_sum_exp(&scratch);
        }
        let loss = total / T::of(n.max(1) as f64);
        let rg = self.rg(&[logits, mu, log_sigma]);
        self.push(
            "mdn_nll",
            vec![],
            vec![loss],
            Op::MdnNll {
                logits,
                mu,
                log_sigma,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`,
    /// with `p` clamped to `[ε, 1−ε]`, `ε = 1e-7`.
    pub fn bce(&mut self, p: Var, labels: &[T]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() || pv.is_empty() {
            return Err(shape_err("bce", format!("{} probabilities vs {} labels", pv.len(), labels.len())));
        }
        let eps = T::of(BCE_EPS);
        let mut total = T::zero();
        for (&q, &y) in pv.iter().zip(labels) {
            let q = q.max(eps).min(T::one() - eps);
            total -= y * q.ln() + (T::one() - y) * (T::one() - q).ln();
        }
        let loss = total / T::of(labels.len() as f64);
        let rg = self.rg(&[p]);
        self.push("bce", vec![], vec![loss], Op::Bce { p, labels: labels.to_vec() }, rg)
    }

    // ---- activation checkpointing ------------------------------------

    /// Runs `f` on `inputs` without keeping its interior activations.
    ///
    /// Only the inputs and outputs stay on this tape; backward re-runs `f`
    /// on a fresh tape and propagates through the recomputed graph. `f`
    /// must be deterministic in its inputs and parameters.
    pub fn checkpoint<F>(&mut self, inputs: &[Var], f: F) -> Result<Vec<Var>>
    where
        F: Fn(&mut Tape<'p, T>, &[Var]) -> Result<Vec<Var>> + 'p,
    {
        if !self.record {
            return f(self, inputs);
        }
        let (outs, shapes) = {
            let mut sub = Tape::inference(self.store);
            let sub_in = inputs
                .iter()
                .map(|&v| sub.constant(self.tensor(v)))
                .collect::<Result<Vec<_>>>()?;
            let outs = f(&mut sub, &sub_in)?;
            let shapes: Vec<Vec<usize>> = outs.iter().map(|&o| sub.shape(o).to_vec()).collect();
            let values: Vec<Vec<T>> = outs.iter().map(|&o| sub.value(o).to_vec()).collect();
            (values, shapes)
        };
        let seg = self.push(
            "checkpoint",
            vec![0],
            Vec::new(),
            Op::Segment(Rc::new(Segment {
                inputs: inputs.to_vec(),
                f: Rc::new(f),
            })),
            true,
        )?;
        let mut offset = 0;
        let mut result = Vec::with_capacity(outs.len());
        for (value, shape) in outs.into_iter().zip(shapes) {
            let len = value.len();
            result.push(self.push("checkpoint", shape, value, Op::SegmentOut { seg, offset }, true)?);
            offset += len;
        }
        self.nodes[seg.0].shape = vec![offset];
        Ok(result)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(NnError::NonScalarLoss(n.shape.clone()));
        }
        self.backward_seeded(&[(loss, vec![T::one()])])
    }

    /// Vector-Jacobian product: propagates `seed` (the gradient of some
    /// downstream loss with respect to `out`) back through this tape.
    pub fn backward_from(&self, out: Var, seed: &[T]) -> Result<Gradients<T>> {
        let n = &self.nodes[out.0];
        if numel(&n.shape) != seed.len() {
            return Err(shape_err(
                "backward_from",
                format!("seed of {} for output {:?}", seed.len(), n.shape),
            ));
        }
        self.backward_seeded(&[(out, seed.to_vec())])
    }

    fn backward_seeded(&self, seeds: &[(Var, Vec<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: BTreeMap<ParamId, Vec<T>> = BTreeMap::new();
        let mut last = 0;
        for (v, g) in seeds {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], g);
                last = last.max(v.0);
            }
        }
        if seeds.iter().any(|(v, _)| self.nodes[v.0].requires_grad) {
            for i in (0..=last).rev() {
                let Some(g) = grads[i].take() else { continue };
                if self.nodes[i].requires_grad {
                    self.backward_node(i, &g, &mut grads, &mut pgrads)?;
                }
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = numel(&self.nodes[v.0].shape);
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        pgrads: &mut BTreeMap<ParamId, Vec<T>>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => add_into_map(pgrads, *id, g),
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy_into(ga, T::one(), g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy_into(gb, T::one(), g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy_into(ga, T::one(), g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy_into(gb, -T::one(), g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::BroadcastAdd(x, yv, map) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy_into(gx, T::one(), g);
                }
                if let Some(gy) = self.slot(grads, *yv) {
                    for (&gi, &j) in g.iter().zip(map.iter()) {
                        gy[j] += gi;
                    }
                }
            }
            Op::BroadcastMul(x, yv, map) => {
                let (xv, yvv) = (self.value(*x), self.value(*yv));
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gi), &j) in gx.iter_mut().zip(g).zip(map.iter()) {
                        *o += gi * yvv[j];
                    }
                }
                if let Some(gy) = self.slot(grads, *yv) {
                    for ((&gi, &j), &xi) in g.iter().zip(map.iter()).zip(xv) {
                        gy[j] += gi * xi;
                    }
                }
            }
            Op::Affine(x, a) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy_into(gx, *a, g);
                }
            }
            Op::Exp(x) => self.pointwise(grads, *x, g, |_, yi| yi, y),
            Op::Ln(x) => self.pointwise(grads, *x, g, |xi, _| xi.recip(), y),
            Op::Tanh(x) => self.pointwise(grads, *x, g, |_, yi| T::one() - yi * yi, y),
            Op::Sigmoid(x) => self.pointwise(grads, *x, g, |_, yi| yi * (T::one() - yi), y),
            Op::LeakyRelu(x, s) => {
                let s = *s;
                self.pointwise(grads, *x, g, |xi, _| if xi > T::zero() { T::one() } else { s }, y)
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.pointwise(
                    grads,
                    *x,
                    g,
                    |xi, _| if xi >= lo && xi <= hi { T::one() } else { T::zero() },
                    y,
                )
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy_into(gx, T::one(), g);
                }
            }
            Op::Gather(x, map) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&gi, &j) in g.iter().zip(map) {
                        if j != ZERO_FILL {
                            gx[j] += gi;
                        }
                    }
                }
            }
            Op::Concat { xs, axis_len, inner } => {
                let row: usize = axis_len.iter().sum::<usize>() * inner;
                let outer = g.len() / row.max(1);
                let mut off = 0;
                for (&x, &a) in xs.iter().zip(axis_len) {
                    let chunk = a * inner;
                    if let Some(gx) = self.slot(grads, x) {
                        for o in 0..outer {
                            let src = &g[o * row + off..o * row + off + chunk];
                            for (d, &s) in gx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += chunk;
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (out, inp) = (ws[0], ws[1]);
                let rows = g.len() / out;
                if let Some(gx) = self.slot(grads, *x) {
                    gemm_nn(g, self.value(*w), gx, rows, out, inp);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm_tn(g, self.value(*x), gw, rows, out, inp);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in g.chunks(out) {
                            axpy_into(gb, T::one(), r);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let d = ConvDims::forward(self.shape(*x), self.shape(*w), geom, "conv2d")?;
                if let Some(gx) = self.slot(grads, *x) {
                    conv::backward_input(g, self.value(*w), gx, &d, geom);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    conv::backward_weight(self.value(*x), g, gw, &d, geom);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        channel_bias_grad(gb, g, d.batch, d.c_out, d.ho * d.wo);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                // Forward-conv view: "input" is this node's output.
                let d = ConvDims::forward(&node.shape, self.shape(*w), geom, "conv_transpose2d")?;
                if let Some(gx) = self.slot(grads, *x) {
                    conv::forward(g, self.value(*w), gx, &d, geom);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    conv::backward_weight(g, self.value(*x), gw, &d, geom);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        channel_bias_grad(gb, g, d.batch, d.c_in, d.h * d.w);
                    }
                }
            }
            Op::WeightNorm { v, g: gs, norms } => {
                let vv = self.value(*v);
                let gv = self.value(*gs);
                let fan = vv.len() / norms.len();
                let dots: Vec<T> = vv
                    .chunks(fan)
                    .zip(g.chunks(fan))
                    .map(|(vr, gr)| vr.iter().zip(gr).map(|(&a, &b)| a * b).sum())
                    .collect();
                if let Some(gg) = self.slot(grads, *gs) {
                    for c in 0..norms.len() {
                        gg[c] += dots[c] / norms[c];
                    }
                }
                if let Some(gvv) = self.slot(grads, *v) {
                    for c in 0..norms.len() {
                        let n = norms[c];
                        let a = gv[c] / n;
                        let bcoef = gv[c] * dots[c] / (n * n * n);
                        let range = c * fan..(c + 1) * fan;
                        for ((o, &gi), &vi) in gvv[range.clone()].iter_mut().zip(&g[range.clone()]).zip(&vv[range]) {
                            *o += a * gi - bcoef * vi;
                        }
                    }
                }
            }
            Op::Gru {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                saved,
            } => self.gru_backward(g, *x, *h, *w_ih, *w_hh, *b_ih, *b_hh, saved, grads),
            Op::MdnNll {
                logits,
                mu,
                log_sigma,
                target,
            } => {
                let s = self.shape(*logits);
                let (n, k) = (s[0], s[1]);
                let lv = self.value(*logits);
                let mv = self.value(*mu);
                let sv = self.value(*log_sigma);
                let scale = g[0] / T::of(n.max(1) as f64);
                let mut dl = vec![T::zero(); n * k];
                let mut dm = vec![T::zero(); n * k];
                let mut ds = vec![T::zero(); n * k];
                let mut a = vec![T::zero(); k];
                for row in 0..n {
                    let o = row * k;
                    let lse_pi = log_sum_exp(&lv[o..o + k]);
                    for c in 0..k {
                        a[c] = lv[o + c] + gauss_log_pdf(target[row], mv[o + c], sv[o + c]);
                    }
                    let lse_a = log_sum_exp(&a);
                    for c in 0..k {
                        let resp = (a[c] - lse_a).exp();
                        let pi = (lv[o + c] - lse_pi).exp();
                        let sigma = sv[o + c].exp();
                        let z = (target[row] - mv[o + c]) / sigma;
                        dl[o + c] = -scale * (resp - pi);
                        dm[o + c] = -scale * resp * z / sigma;
                        ds[o + c] = -scale * resp * (z * z - T::one());
                    }
                }
                for (v, d) in [(*logits, dl), (*mu, dm), (*log_sigma, ds)] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy_into(gv, T::one(), &d);
                    }
                }
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let eps = T::of(BCE_EPS);
                let scale = g[0] / T::of(labels.len() as f64);
                if let Some(gp) = self.slot(grads, *p) {
                    for ((o, &q), &yl) in gp.iter_mut().zip(pv).zip(labels) {
                        if q > eps && q < T::one() - eps {
                            *o += -scale * (yl / q - (T::one() - yl) / (T::one() - q));
                        }
                    }
                }
            }
            Op::SegmentOut { seg, offset } => {
                if let Some(gs) = self.slot(grads, *seg) {
                    for (d, &s) in gs[*offset..*offset + g.len()].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Segment(seg) => self.segment_backward(i, seg, g, grads, pgrads)?,
        }
        Ok(())
    }

    fn pointwise(
        &self,
        grads: &mut [Option<Vec<T>>],
        x: Var,
        g: &[T],
        dydx: impl Fn(T, T) -> T,
        y: &[T],
    ) {
        let xv = self.value(x);
        if let Some(gx) = self.slot(grads, x) {
            for (((o, &gi), &xi), &yi) in gx.iter_mut().zip(g).zip(xv).zip(y) {
                *o += gi * dydx(xi, yi);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        g: &[T],
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        s: &GruSaved<T>,
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.shape(h)[1];
        let rows = self.shape(h)[0];
        let d_in = self.shape(x)[1];
        let hv = self.value(h);
        let one = T::one();
        let mut dgi = vec![T::zero(); rows * 3 * d];
        let mut dgh = vec![T::zero(); rows * 3 * d];
        let mut dh_direct = vec![T::zero(); rows * d];
        for row in 0..rows {
            for k in 0..d {
                let idx = row * d + k;
                let (r, z, n, ghn) = (s.r[idx], s.z[idx], s.n[idx], s.ghn[idx]);
                let gy = g[idx];
                let dn = gy * (one - z);
                let dz = gy * (hv[idx] - n);
                dh_direct[idx] = gy * z;
                let dan = dn * (one - n * n);
                let dr = dan * ghn;
                let daz = dz * z * (one - z);
                let dar = dr * r * (one - r);
                let base = row * 3 * d;
                dgi[base + k] = dar;
                dgh[base + k] = dar;
                dgi[base + d + k] = daz;
                dgh[base + d + k] = daz;
                dgi[base + 2 * d + k] = dan;
                dgh[base + 2 * d + k] = dan * r;
            }
        }
        if let Some(gx) = self.slot(grads, x) {
            gemm_nn(&dgi, self.value(w_ih), gx, rows, 3 * d, d_in);
        }
        if let Some(gh) = self.slot(grads, h) {
            axpy_into(gh, one, &dh_direct);
            gemm_nn(&dgh, self.value(w_hh), gh, rows, 3 * d, d);
        }
        if let Some(gw) = self.slot(grads, w_ih) {
            gemm_tn(&dgi, self.value(x), gw, rows, 3 * d, d_in);
        }
        if let Some(gw) = self.slot(grads, w_hh) {
            gemm_tn(&dgh, self.value(h), gw, rows, 3 * d, d);
        }
        if let Some(gb) = self.slot(grads, b_ih) {
            for r in dgi.chunks(3 * d) {
                axpy_into(gb, one, r);
            }
        }
        if let Some(gb) = self.slot(grads, b_hh) {
            for r in dgh.chunks(3 * d) {
                axpy_into(gb, one, r);
            }
        }
    }

    fn segment_backward(
        &self,
        i: usize,
        seg: &Segment<'p, T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        pgrads: &mut BTreeMap<ParamId, Vec<T>>,
    ) -> Result<()> {
        debug_assert_eq!(g.len(), self.nodes[i].shape[0]);
        let mut sub = Tape::new(self.store);
        let mut sub_in = Vec::with_capacity(seg.inputs.len());
        for &v in &seg.inputs {
            let t = self.tensor(v);
            sub_in.push(if self.nodes[v.0].requires_grad {
                sub.input(t)?
            } else {
                sub.constant(t)?
            });
        }
        let outs = (seg.f)(&mut sub, &sub_in)?;
        let mut seeds = Vec::with_capacity(outs.len());
        let mut off = 0;
        for &o in &outs {
            let len = sub.value(o).len();
            seeds.push((o, g[off..off + len].to_vec()));
            off += len;
        }
        let sg = sub.backward_seeded(&seeds)?;
        for (&outer, &inner) in seg.inputs.iter().zip(&sub_in) {
            if let (Some(src), Some(dst)) = (sg.var(inner), self.slot(grads, outer)) {
                axpy_into(dst, T::one(), src);
            }
        }
        for (id, pg) in sg.params() {
            add_into_map(pgrads, id, pg);
        }
        Ok(())
    }
}

pub(crate) const BCE_EPS: f64 = 1e-7;

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

#[inline]
pub(crate) fn gauss_log_pdf<T: Real>(y: T, mu: T, log_sigma: T) -> T {
    let z = (y - mu) / log_sigma.exp();
    T::of(-0.5) * z * z - log_sigma - T::of(0.5 * (2.0 * std::f64::consts::PI).ln())
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(v) => axpy_into(v, T::one(), g),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_into_map<T: Real>(m: &mut BTreeMap<ParamId, Vec<T>>, id: ParamId, g: &[T]) {
    match m.get_mut(&id) {
        Some(v) => axpy_into(v, T::one(), g),
        None => {
            m.insert(id, g.to_vec());
        }
    }
}

#[inline]
fn axpy_into<T: Real>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn add_channel_bias<T: Real>(y: &mut [T], b: &[T], batch: usize, channels: usize, plane: usize) {
    for bi in 0..batch {
        for c in 0..channels {
            let o = (bi * channels + c) * plane;
            y[o..o + plane].iter_mut().for_each(|v| *v += b[c]);
        }
    }
}

fn channel_bias_grad<T: Real>(gb: &mut [T], g: &[T], batch: usize, channels: usize, plane: usize) {
    for bi in 0..batch {
        for c in 0..channels {
            let o = (bi * channels + c) * plane;
            gb[c] += g[o..o + plane].iter().copied().sum::<T>();
        }
    }
}

/// Flat source offsets for every element of `shape`, walking it in
/// row-major order with per-axis source strides.
fn odometer(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn narrow_map(xs: &[usize], axis: usize, start: usize, len: usize) -> Vec<usize> {
    let inner: usize = xs[axis + 1..].iter().product();
    let outer: usize = xs[..axis].iter().product();
    let mut map = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * xs[axis] + start) * inner;
        map.extend(base..base + len * inner);
    }
    map
}
