use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init, shape_err, ConvGeom, ParamId, ParamStore, Real, Result, Tape, Tensor, Var};

/// Fully connected layer `y = x·Wᵀ + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init::kaiming_uniform(rng, &[out_dim, in_dim], in_dim))?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), init::kaiming_uniform(rng, &[out_dim], in_dim))?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

/// Lookup table of `count` learned vectors of width `dim`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        count: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = store.add(format!("{name}.weight"), init::normal(rng, &[count, dim], 1.0))?;
        Ok(Self { table, count, dim })
    }

    /// Rows for `ids`, shaped `[ids.len(), dim]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<Var> {
        let t = tape.param(self.table);
        tape.embedding(t, ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    None,
    /// Zero padding `(pad_h, pad_w)` on both sides.
    Zeros(usize, usize),
    /// Reflection padding `(pad_h, pad_w)` on both sides.
    Reflect(usize, usize),
}

/// Hyper-parameters of a 2-D convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub dilation: [usize; 2],
    pub groups: usize,
    pub padding: Padding,
    pub weight_norm: bool,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: [usize; 2]) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: [1, 1],
            dilation: [1, 1],
            groups: 1,
            padding: Padding::None,
            weight_norm: false,
            bias: true,
        }
    }

    pub fn stride(mut self, s: [usize; 2]) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: [usize; 2]) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn weight_norm(mut self, on: bool) -> Self {
        self.weight_norm = on;
        self
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }

    fn geom(&self) -> ConvGeom {
        let padding = match self.padding {
            Padding::Zeros(h, w) => [h, w],
            _ => [0, 0],
        };
        ConvGeom {
            stride: self.stride,
            dilation: self.dilation,
            padding,
            groups: self.groups,
        }
    }
}

/// Registers a (possibly weight-normalised) kernel. Returns `(v, g)`;
/// `g` starts at `‖v‖` per slice so the effective weight equals `v`.
fn add_kernel<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    weight_norm: bool,
) -> Result<(ParamId, Option<ParamId>)> {
    let v = init::kaiming_uniform::<T, R>(rng, shape, fan_in);
    if !weight_norm {
        return Ok((store.add(format!("{name}.weight"), v)?, None));
    }
    let fan = v.numel() / shape[0];
    let norms: Vec<T> = v
        .data()
        .chunks(fan)
        .map(|r| r.iter().map(|&a| a * a).sum::<T>().sqrt())
        .collect();
    let g = Tensor::new(vec![shape[0]], norms)?;
    let vid = store.add(format!("{name}.weight_v"), v)?;
    let gid = store.add(format!("{name}.weight_g"), g)?;
    Ok((vid, Some(gid)))
}

fn kernel_var<T: Real>(tape: &mut Tape<'_, T>, v: ParamId, g: Option<ParamId>) -> Result<Var> {
    let vv = tape.param(v);
    match g {
        Some(g) => {
            let gv = tape.param(g);
            tape.weight_norm(vv, gv)
        }
        None => Ok(vv),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub w: ParamId,
    pub g: Option<ParamId>,
    pub b: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Self> {
        if spec.groups == 0 || spec.in_ch % spec.groups != 0 || spec.out_ch % spec.groups != 0 {
            return Err(shape_err(
                "conv2d",
                format!("channels {}->{} not divisible by groups {}", spec.in_ch, spec.out_ch, spec.groups),
            ));
        }
        let cin_g = spec.in_ch / spec.groups;
        let fan_in = cin_g * spec.kernel[0] * spec.kernel[1];
        let shape = [spec.out_ch, cin_g, spec.kernel[0], spec.kernel[1]];
        let (w, g) = add_kernel(store, rng, name, &shape, fan_in, spec.weight_norm)?;
        let b = if spec.bias {
            Some(store.add(format!("{name}.bias"), init::kaiming_uniform(rng, &[spec.out_ch], fan_in))?)
        } else {
            None
        };
        Ok(Self { spec, w, g, b })
    }

    /// The effective kernel (after weight normalisation, if enabled).
    pub fn weight<T: Real>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        kernel_var(tape, self.w, self.g)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let x = match self.spec.padding {
            Padding::Reflect(h, w) if h > 0 || w > 0 => tape.reflect_pad2d(x, [h, h, w, w])?,
            _ => x,
        };
        let w = self.weight(tape)?;
        let b = self.b.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.spec.geom())
    }
}

/// 1-D convolution over `x[B, C, L]`, run as a 2-D convolution with a
/// singleton height.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub inner: Conv2d,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
        weight_norm: bool,
    ) -> Result<Self> {
        let padding = match padding {
            Padding::None => Padding::None,
            Padding::Zeros(_, p) => Padding::Zeros(0, p),
            Padding::Reflect(_, p) => Padding::Reflect(0, p),
        };
        let spec = ConvSpec::new(in_ch, out_ch, [1, kernel])
            .dilation([1, dilation])
            .padding(padding)
            .weight_norm(weight_norm);
        Ok(Self {
            inner: Conv2d::new(store, rng, name, spec)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("conv1d", format!("expected [B, C, L], got {s:?}")));
        }
        let x4 = tape.reshape(x, &[s[0], s[1], 1, s[2]])?;
        let y = self.inner.forward(tape, x4)?;
        let ys = tape.shape(y).to_vec();
        tape.reshape(y, &[ys[0], ys[1], ys[3]])
    }
}

/// Transposed 2-D convolution; kernel `[C_in, C_out/groups, kH, kW]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: ConvGeom,
    pub output_padding: [usize; 2],
    pub w: ParamId,
    pub g: Option<ParamId>,
    pub b: Option<ParamId>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 2],
        geom: ConvGeom,
        output_padding: [usize; 2],
        weight_norm: bool,
    ) -> Result<Self> {
        if geom.groups == 0 || in_ch % geom.groups != 0 || out_ch % geom.groups != 0 {
            return Err(shape_err(
                "conv_transpose2d",
                format!("channels {in_ch}->{out_ch} not divisible by groups {}", geom.groups),
            ));
        }
        let cout_g = out_ch / geom.groups;
        let shape = [in_ch, cout_g, kernel[0], kernel[1]];
        let fan_in = cout_g * kernel[0] * kernel[1];
        let (w, g) = add_kernel(store, rng, name, &shape, fan_in, weight_norm)?;
        let b = Some(store.add(format!("{name}.bias"), init::kaiming_uniform(rng, &[out_ch], fan_in))?);
        Ok(Self {
            in_ch,
            out_ch,
            geom,
            output_padding,
            w,
            g,
            b,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = kernel_var(tape, self.w, self.g)?;
        let b = self.b.map(|b| tape.param(b));
        tape.conv_transpose2d(x, w, b, self.geom, self.output_padding)
    }
}

/// Gated recurrent unit with PyTorch's parameter layout
/// (`[reset | update | candidate]` stacked along the first axis).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let k = hidden;
        Ok(Self {
            w_ih: store.add(format!("{name}.weight_ih"), init::kaiming_uniform(rng, &[3 * hidden, input], k))?,
            w_hh: store.add(format!("{name}.weight_hh"), init::kaiming_uniform(rng, &[3 * hidden, hidden], k))?,
            b_ih: store.add(format!("{name}.bias_ih"), init::kaiming_uniform(rng, &[3 * hidden], k))?,
            b_hh: store.add(format!("{name}.bias_hh"), init::kaiming_uniform(rng, &[3 * hidden], k))?,
            input,
            hidden,
        })
    }

    /// One update, `x[N, input]`, `h[N, hidden]`.
    pub fn step<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, h: Var) -> Result<Var> {
        let w_ih = tape.param(self.w_ih);
        let w_hh = tape.param(self.w_hh);
        let b_ih = tape.param(self.b_ih);
        let b_hh = tape.param(self.b_hh);
        tape.gru_cell(x, h, w_ih, w_hh, b_ih, b_hh)
    }

    /// Runs over `seq[L, N, input]` from a zero state, returning every
    /// hidden state as `[L, N, hidden]`. With `reverse` the scan starts at
    /// the last step; outputs stay aligned with their inputs.
    pub fn run<T: Real>(&self, tape: &mut Tape<'_, T>, seq: Var, reverse: bool) -> Result<Var> {
        let s = tape.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.input {
            return Err(shape_err(
                "gru",
                format!("expected [L, N, {}], got {s:?}", self.input),
            ));
        }
        let (l, n) = (s[0], s[1]);
        let mut h = tape.constant(Tensor::zeros(&[n, self.hidden]))?;
        let mut outs = vec![None; l];
        let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in order {
            let x = tape.select(seq, 0, t)?;
            h = self.step(tape, x, h)?;
            outs[t] = Some(h);
        }
        let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        tape.stack(&outs, 0)
    }
}
