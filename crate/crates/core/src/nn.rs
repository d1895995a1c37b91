//! Small feed-forward networks with exact reverse-mode Jacobians with respect
//! to the flattened parameter vector.
//!
//! Parameters are stored layer by layer: the weight block (row-major,
//! `fan_out × fan_in`) followed by the bias block. Jacobians are `K × P`.
//! Batched quantities are datapoint-major: the Jacobian of a batch stacks
//! `J(x_0), J(x_1), …` into an `NK × P` matrix.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{mul_nn, mul_nt, mul_tn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// Linear hidden units, used to build networks that are linear in their inputs.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and the output `a`.
    /// The relu derivative at 0 is 0.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One parameter block of a layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub layer: usize,
    pub kind: String,
    pub weight_offset: usize,
    pub weight_shape: Vec<usize>,
    pub bias_offset: usize,
    pub bias_len: usize,
}

impl LayerBlock {
    pub fn weight_len(&self) -> usize {
        self.weight_shape.iter().product()
    }

    pub fn end(&self) -> usize {
        self.bias_offset + self.bias_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub blocks: Vec<LayerBlock>,
}

impl ParamLayout {
    pub fn param_count(&self) -> usize {
        self.blocks.last().map(|b| b.end()).unwrap_or(0)
    }

    /// Checks that blocks are contiguous, non-overlapping and start at 0.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for b in &self.blocks {
            if b.weight_offset != cursor || b.bias_offset != b.weight_offset + b.weight_len() {
                return Err(Error::Domain(format!("layout block {} is not contiguous", b.layer)));
            }
            cursor = b.end();
        }
        Ok(())
    }
}

/// Flat parameter values together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: DVector<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn new(values: DVector<f64>, layout: ParamLayout) -> Result<Self> {
        layout.validate()?;
        check_dim("ParamVector length", layout.param_count(), values.len())?;
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (layout).
    pub fn save(&self, stem: &Path) -> Result<()> {
        write_f64_blob(&stem.with_extension("bin"), self.values.as_slice())?;
        let json = serde_json::to_string_pretty(&self.layout)?;
        fs::write(stem.with_extension("json"), json)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let layout: ParamLayout = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        let values = read_f64_blob(&stem.with_extension("bin"))?;
        ParamVector::new(DVector::from_vec(values), layout)
    }
}

pub fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_f64_blob(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Domain(format!(
            "{} has {} bytes, not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// A differentiable map `f(x; w)` from `R^D` to `R^K`.
pub trait Network: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn layout(&self) -> ParamLayout;

    fn param_count(&self) -> usize {
        self.layout().param_count()
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> Result<DVector<f64>>;

    /// Returns `f(x; w)` and `J(x; w)ᵀ c` for a cotangent `c ∈ R^K`.
    fn vjp(&self, w: &[f64], x: &[f64], cot: &[f64]) -> Result<(DVector<f64>, DVector<f64>)>;

    /// `K × P` Jacobian from K reverse sweeps.
    fn jacobian(&self, w: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
        let k = self.output_dim();
        let p = self.param_count();
        let mut jac = DMatrix::zeros(k, p);
        let mut e = vec![0.0; k];
        for row in 0..k {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[row] = 1.0;
            let (_, g) = self.vjp(w, x, &e)?;
            jac.row_mut(row).copy_from(&g.transpose());
        }
        Ok(jac)
    }

    /// Outputs for the rows of `xs` (`N × D`), returned as `N × K`.
    fn forward_batch(&self, w: &[f64], xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_batch(w, xs)?;
        let rows: Vec<DVector<f64>> = (0..xs.nrows())
            .into_par_iter()
            .map(|i| self.forward(w, &row_vec(xs, i)))
            .collect::<Result<_>>()?;
        Ok(stack_rows(&rows, self.output_dim()))
    }

    /// Forward pass followed by one reverse pass with per-datum cotangents
    /// produced by `cot` from the `N × K` outputs. Returns the outputs and
    /// `Σ_i J(x_i)ᵀ c_i`.
    fn forward_vjp_batch(
        &self,
        w: &[f64],
        xs: &DMatrix<f64>,
        cot: &mut dyn FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>>,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let out = self.forward_batch(w, xs)?;
        let c = cot(&out)?;
        check_dim("cotangent rows", out.nrows(), c.nrows())?;
        check_dim("cotangent cols", out.ncols(), c.ncols())?;
        let p = self.param_count();
        let grads: Vec<DVector<f64>> = (0..xs.nrows())
            .into_par_iter()
            .map(|i| {
                let ci: Vec<f64> = c.row(i).iter().cloned().collect();
                self.vjp(w, &row_vec(xs, i), &ci).map(|(_, g)| g)
            })
            .collect::<Result<_>>()?;
        let mut total = DVector::zeros(p);
        for g in grads {
            total += g;
        }
        Ok((out, total))
    }

    /// Jacobians of all rows of `xs`, stacked datapoint-major into `NK × P`.
    fn jacobian_batch(&self, w: &[f64], xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_batch(w, xs)?;
        let k = self.output_dim();
        let jacs: Vec<DMatrix<f64>> = (0..xs.nrows())
            .into_par_iter()
            .map(|i| self.jacobian(w, &row_vec(xs, i)))
            .collect::<Result<_>>()?;
        let mut out = DMatrix::zeros(xs.nrows() * k, self.param_count());
        for (i, j) in jacs.iter().enumerate() {
            out.view_mut((i * k, 0), (k, j.ncols())).copy_from(j);
        }
        Ok(out)
    }

    fn check_batch(&self, w: &[f64], xs: &DMatrix<f64>) -> Result<()> {
        check_dim("parameter vector", self.param_count(), w.len())?;
        if xs.nrows() > 0 {
            check_dim("input dimension", self.input_dim(), xs.ncols())?;
        }
        Ok(())
    }

    /// Seeded initialization: weights `N(0, 1/fan_in)`, biases zero.
    fn init_params(&self, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let layout = self.layout();
        let mut w = DVector::zeros(layout.param_count());
        for b in &layout.blocks {
            let fan_in: usize = b.weight_shape.iter().skip(1).product::<usize>().max(1);
            let sd = (fan_in as f64).powf(-0.5);
            for v in w.rows_mut(b.weight_offset, b.weight_len()).iter_mut() {
                *v = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        w
    }
}

pub(crate) fn row_vec(xs: &DMatrix<f64>, i: usize) -> Vec<f64> {
    xs.row(i).iter().cloned().collect()
}

fn stack_rows(rows: &[DVector<f64>], k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), k);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..k {
            out[(i, j)] = r[j];
        }
    }
    out
}

/// Fully-connected architecture description; serialized as
/// `{"input_dim":…, "hidden":[…], "output_dim":…, "activation":"tanh"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub has_bias: bool,
}

fn default_true() -> bool {
    true
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Self {
        NetworkSpec {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation,
            has_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        let w = self.widths();
        w.windows(2)
            .map(|p| p[0] * p[1] + if self.has_bias { p[1] } else { 0 })
            .sum()
    }

    pub fn layout(&self) -> ParamLayout {
        let w = self.widths();
        let mut blocks = Vec::new();
        let mut off = 0;
        for (l, p) in w.windows(2).enumerate() {
            let (fin, fout) = (p[0], p[1]);
            let bias_len = if self.has_bias { fout } else { 0 };
            blocks.push(LayerBlock {
                layer: l,
                kind: "dense".into(),
                weight_offset: off,
                weight_shape: vec![fout, fin],
                bias_offset: off + fin * fout,
                bias_len,
            });
            off += fin * fout + bias_len;
        }
        ParamLayout { blocks }
    }
}

/// Multilayer perceptron with a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: NetworkSpec,
    layout: ParamLayout,
}

struct BatchCache {
    /// Post-activations per layer, layer 0 is the input; `N × width`.
    acts: Vec<DMatrix<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        Ok(Mlp { spec, layout })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn weight(&self, w: &[f64], l: usize) -> (DMatrix<f64>, Option<DVector<f64>>) {
        let b = &self.layout.blocks[l];
        let (fout, fin) = (b.weight_shape[0], b.weight_shape[1]);
        let wm = DMatrix::from_row_slice(fout, fin, &w[b.weight_offset..b.weight_offset + fout * fin]);
        let bias = (b.bias_len > 0).then(|| DVector::from_column_slice(&w[b.bias_offset..b.end()]));
        (wm, bias)
    }

    fn forward_cached(&self, w: &[f64], xs: &DMatrix<f64>) -> BatchCache {
        let nl = self.layout.blocks.len();
        let mut acts = vec![xs.clone()];
        let mut pre = Vec::with_capacity(nl.saturating_sub(1));
        for l in 0..nl {
            let (wm, bias) = self.weight(w, l);
            let mut z = mul_nt(&acts[l], &wm);
            if let Some(bias) = bias {
                for (j, mut col) in z.column_iter_mut().enumerate() {
                    col.add_scalar_mut(bias[j]);
                }
            }
            if l + 1 < nl {
                let act = self.spec.activation;
                let a = z.map(|v| act.apply(v));
                pre.push(z);
                acts.push(a);
            } else {
                acts.push(z);
            }
        }
        BatchCache { acts, pre }
    }

    /// Back-propagates `N × K` output cotangents. `sink` receives, for each
    /// layer, the `N × fan_out` error signal and the `N × fan_in` input
    /// activations.
    fn backward(&self, w: &[f64], cache: &BatchCache, cot: DMatrix<f64>, mut sink: impl FnMut(usize, &DMatrix<f64>, &DMatrix<f64>)) {
        let nl = self.layout.blocks.len();
        let mut delta = cot;
        for l in (0..nl).rev() {
            sink(l, &delta, &cache.acts[l]);
            if l > 0 {
                let (wm, _) = self.weight(w, l);
                let mut next = mul_nn(&delta, &wm);
                let act = self.spec.activation;
                let z = &cache.pre[l - 1];
                let a = &cache.acts[l];
                for ((d, &zv), &av) in next.iter_mut().zip(z.iter()).zip(a.iter()) {
                    *d *= act.derivative(zv, av);
                }
                delta = next;
            }
        }
    }
}

impl Network for Mlp {
    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn layout(&self) -> ParamLayout {
        self.layout.clone()
    }

    fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> Result<DVector<f64>> {
        check_dim("parameter vector", self.param_count(), w.len())?;
        check_dim("input dimension", self.input_dim(), x.len())?;
        let xs = DMatrix::from_row_slice(1, x.len(), x);
        let out = self.forward_batch(w, &xs)?;
        Ok(DVector::from_iterator(out.ncols(), out.row(0).iter().cloned()))
    }

    fn vjp(&self, w: &[f64], x: &[f64], cot: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("input dimension", self.input_dim(), x.len())?;
        check_dim("cotangent", self.output_dim(), cot.len())?;
        let xs = DMatrix::from_row_slice(1, x.len(), x);
        let c = DMatrix::from_row_slice(1, cot.len(), cot);
        let (out, g) = self.forward_vjp_batch(w, &xs, &mut |_| Ok(c.clone()))?;
        Ok((DVector::from_iterator(out.ncols(), out.row(0).iter().cloned()), g))
    }

    fn forward_batch(&self, w: &[f64], xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_batch(w, xs)?;
        let mut cache = self.forward_cached(w, xs);
        Ok(cache.acts.pop().expect("output layer"))
    }

    fn forward_vjp_batch(
        &self,
        w: &[f64],
        xs: &DMatrix<f64>,
        cot: &mut dyn FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>>,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_batch(w, xs)?;
        let cache = self.forward_cached(w, xs);
        let out = cache.acts.last().expect("output layer").clone();
        let c = cot(&out)?;
        check_dim("cotangent rows", out.nrows(), c.nrows())?;
        check_dim("cotangent cols", out.ncols(), c.ncols())?;
        let mut grad = DVector::zeros(self.param_count());
        let layout = &self.layout;
        self.backward(w, &cache, c, |l, delta, input| {
            let b = &layout.blocks[l];
            // gW = deltaᵀ · input, stored row-major
            let gw = mul_tn(delta, input);
            let (fout, fin) = (b.weight_shape[0], b.weight_shape[1]);
            for o in 0..fout {
                for j in 0..fin {
                    grad[b.weight_offset + o * fin + j] += gw[(o, j)];
                }
            }
            for o in 0..b.bias_len {
                grad[b.bias_offset + o] += delta.column(o).sum();
            }
        });
        Ok((out, grad))
    }

    fn jacobian_batch(&self, w: &[f64], xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_batch(w, xs)?;
        let n = xs.nrows();
        let k = self.output_dim();
        let p = self.param_count();
        let mut jac = DMatrix::zeros(n * k, p);
        if n == 0 {
            return Ok(jac);
        }
        let cache = self.forward_cached(w, xs);
        let layout = &self.layout;
        for out_idx in 0..k {
            let mut e = DMatrix::zeros(n, k);
            e.column_mut(out_idx).fill(1.0);
            self.backward(w, &cache, e, |l, delta, input| {
                let b = &layout.blocks[l];
                let (fout, fin) = (b.weight_shape[0], b.weight_shape[1]);
                for o in 0..fout {
                    let d = delta.column(o);
                    for j in 0..fin {
                        let a = input.column(j);
                        let mut col = jac.column_mut(b.weight_offset + o * fin + j);
                        for i in 0..n {
                            col[i * k + out_idx] = d[i] * a[i];
                        }
                    }
                }
                for o in 0..b.bias_len {
                    let d = delta.column(o);
                    let mut col = jac.column_mut(b.bias_offset + o);
                    for i in 0..n {
                        col[i * k + out_idx] = d[i];
                    }
                }
            });
        }
        Ok(jac)
    }

    fn jacobian(&self, w: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim("input dimension", self.input_dim(), x.len())?;
        self.jacobian_batch(w, &DMatrix::from_row_slice(1, x.len(), x))
    }
}

/// Convolution stage: `out_channels` filters of size `kernel × kernel`,
/// stride 1, no padding, relu, then non-overlapping `pool × pool` max-pooling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

/// Convolutional network: conv stages, then relu dense layers, then a linear
/// output layer. Inputs are flattened channel-major `C × H × W` images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub convs: Vec<ConvStage>,
    pub dense: Vec<usize>,
    pub output_dim: usize,
}

impl ConvNetSpec {
    /// Binary MNIST classifier with 4587 parameters: two 5×5 conv stages with
    /// 6 and 8 channels, each followed by 2×2 max-pooling, then dense layers
    /// of 22 and 16 units and a single logit.
    pub fn mnist_binary() -> Self {
        ConvNetSpec {
            in_channels: 1,
            height: 28,
            width: 28,
            convs: vec![
                ConvStage { out_channels: 6, kernel: 5, pool: 2 },
                ConvStage { out_channels: 8, kernel: 5, pool: 2 },
            ],
            dense: vec![22, 16],
            output_dim: 1,
        }
    }

    /// Spatial shapes `(channels, height, width)` entering each conv stage,
    /// followed by the shape after the last stage.
    fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut s = vec![(self.in_channels, self.height, self.width)];
        for st in &self.convs {
            let (_, h, w) = *s.last().expect("non-empty");
            if st.kernel == 0 || st.pool == 0 || h < st.kernel || w < st.kernel {
                return Err(Error::Config("conv kernel larger than its input".into()));
            }
            let (ho, wo) = (h - st.kernel + 1, w - st.kernel + 1);
            if ho % st.pool != 0 || wo % st.pool != 0 {
                return Err(Error::Config("conv output not divisible by pool size".into()));
            }
            s.push((st.out_channels, ho / st.pool, wo / st.pool));
        }
        Ok(s)
    }

    pub fn layout(&self) -> Result<ParamLayout> {
        let shapes = self.shapes()?;
        let mut blocks = Vec::new();
        let mut off = 0;
        for (l, st) in self.convs.iter().enumerate() {
            let cin = shapes[l].0;
            let wl = st.out_channels * cin * st.kernel * st.kernel;
            blocks.push(LayerBlock {
                layer: l,
                kind: "conv".into(),
                weight_offset: off,
                weight_shape: vec![st.out_channels, cin, st.kernel, st.kernel],
                bias_offset: off + wl,
                bias_len: st.out_channels,
            });
            off += wl + st.out_channels;
        }
        let (c, h, w) = *shapes.last().expect("non-empty");
        let mut widths = vec![c * h * w];
        widths.extend(&self.dense);
        widths.push(self.output_dim);
        for (j, p) in widths.windows(2).enumerate() {
            blocks.push(LayerBlock {
                layer: self.convs.len() + j,
                kind: "dense".into(),
                weight_offset: off,
                weight_shape: vec![p[1], p[0]],
                bias_offset: off + p[0] * p[1],
                bias_len: p[1],
            });
            off += p[0] * p[1] + p[1];
        }
        Ok(ParamLayout { blocks })
    }
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    spec: ConvNetSpec,
    shapes: Vec<(usize, usize, usize)>,
    layout: ParamLayout,
}

struct ConvCache {
    /// im2col matrix per conv stage, `(Ho·Wo) × (Cin·k·k)`.
    cols: Vec<DMatrix<f64>>,
    /// Pre-activation conv outputs, `(Ho·Wo) × Cout`.
    conv_pre: Vec<DMatrix<f64>>,
    /// Flat argmax index into the conv output for each pooled cell.
    pool_idx: Vec<Vec<usize>>,
    /// Dense-layer inputs (index 0 is the flattened conv output) and hidden pre-activations.
    dense_in: Vec<DVector<f64>>,
    dense_pre: Vec<DVector<f64>>,
}

impl ConvNet {
    pub fn new(spec: ConvNetSpec) -> Result<Self> {
        if spec.output_dim == 0 || spec.dense.contains(&0) {
            return Err(Error::Config("conv network widths must be positive".into()));
        }
        let shapes = spec.shapes()?;
        let layout = spec.layout()?;
        Ok(ConvNet { spec, shapes, layout })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> DMatrix<f64> {
        let (ho, wo) = (h - k + 1, w - k + 1);
        let mut cols = DMatrix::zeros(ho * wo, c * k * k);
        for ch in 0..c {
            for u in 0..k {
                for v in 0..k {
                    let col = ch * k * k + u * k + v;
                    let mut dst = cols.column_mut(col);
                    for y in 0..ho {
                        let src = &input[ch * h * w + (y + u) * w + v..];
                        for x in 0..wo {
                            dst[y * wo + x] = src[x];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(dcols: &DMatrix<f64>, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
        let (ho, wo) = (h - k + 1, w - k + 1);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for u in 0..k {
                for v in 0..k {
                    let src = dcols.column(ch * k * k + u * k + v);
                    for y in 0..ho {
                        let base = ch * h * w + (y + u) * w + v;
                        for x in 0..wo {
                            out[base + x] += src[y * wo + x];
                        }
                    }
                }
            }
        }
        out
    }

    fn conv_weight<'a>(&self, w: &'a [f64], l: usize) -> (DMatrix<f64>, &'a [f64]) {
        let b = &self.layout.blocks[l];
        let cout = b.weight_shape[0];
        let kk = b.weight_len() / cout;
        (
            DMatrix::from_row_slice(cout, kk, &w[b.weight_offset..b.weight_offset + b.weight_len()]),
            &w[b.bias_offset..b.end()],
        )
    }

    fn run_forward(&self, w: &[f64], x: &[f64]) -> (DVector<f64>, ConvCache) {
        let mut cache = ConvCache {
            cols: Vec::new(),
            conv_pre: Vec::new(),
            pool_idx: Vec::new(),
            dense_in: Vec::new(),
            dense_pre: Vec::new(),
        };
        let mut cur = x.to_vec();
        for (l, st) in self.spec.convs.iter().enumerate() {
            let (c, h, wd) = self.shapes[l];
            let k = st.kernel;
            let (ho, wo) = (h - k + 1, wd - k + 1);
            let cols = Self::im2col(&cur, c, h, wd, k);
            let (wm, bias) = self.conv_weight(w, l);
            let mut z = &cols * wm.transpose();
            for (oc, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(bias[oc]);
            }
            // relu then max-pool; relu is monotone so pooling the
            // pre-activation picks the same cell.
            let p = st.pool;
            let (hp, wp) = (ho / p, wo / p);
            let mut pooled = vec![0.0; st.out_channels * hp * wp];
            let mut idx = vec![0usize; pooled.len()];
            let zs = z.as_slice();
            for oc in 0..st.out_channels {
                for py in 0..hp {
                    for px in 0..wp {
                        let mut best = usize::MAX;
                        let mut bv = f64::NEG_INFINITY;
                        for dy in 0..p {
                            for dx in 0..p {
                                let flat = oc * ho * wo + (py * p + dy) * wo + px * p + dx;
                                if zs[flat] > bv {
                                    bv = zs[flat];
                                    best = flat;
                                }
                            }
                        }
                        let o = oc * hp * wp + py * wp + px;
                        pooled[o] = bv.max(0.0);
                        idx[o] = best;
                    }
                }
            }
            cache.cols.push(cols);
            cache.conv_pre.push(z);
            cache.pool_idx.push(idx);
            cur = pooled;
        }
        let mut a = DVector::from_vec(cur);
        let nconv = self.spec.convs.len();
        let ndense = self.layout.blocks.len() - nconv;
        for j in 0..ndense {
            let b = &self.layout.blocks[nconv + j];
            let (fout, fin) = (b.weight_shape[0], b.weight_shape[1]);
            let wm = DMatrix::from_row_slice(fout, fin, &w[b.weight_offset..b.weight_offset + fout * fin]);
            let z = &wm * &a + DVector::from_column_slice(&w[b.bias_offset..b.end()]);
            cache.dense_in.push(a);
            if j + 1 < ndense {
                a = z.map(|v| v.max(0.0));
                cache.dense_pre.push(z);
            } else {
                a = z;
            }
        }
        (a, cache)
    }
}

impl Network for ConvNet {
    fn input_dim(&self) -> usize {
        self.spec.in_channels * self.spec.height * self.spec.width
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn layout(&self) -> ParamLayout {
        self.layout.clone()
    }

    fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> Result<DVector<f64>> {
        check_dim("parameter vector", self.param_count(), w.len())?;
        check_dim("input dimension", self.input_dim(), x.len())?;
        Ok(self.run_forward(w, x).0)
    }

    fn vjp(&self, w: &[f64], x: &[f64], cot: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("parameter vector", self.param_count(), w.len())?;
        check_dim("input dimension", self.input_dim(), x.len())?;
        check_dim("cotangent", self.output_dim(), cot.len())?;
        let (out, cache) = self.run_forward(w, x);
        let mut grad = DVector::zeros(self.param_count());
        let nconv = self.spec.convs.len();
        let ndense = self.layout.blocks.len() - nconv;
        let mut delta = DVector::from_column_slice(cot);
        for j in (0..ndense).rev() {
            let b = &self.layout.blocks[nconv + j];
            let (fout, fin) = (b.weight_shape[0], b.weight_shape[1]);
            let input = &cache.dense_in[j];
            for o in 0..fout {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad.as_mut_slice()[b.weight_offset + o * fin..b.weight_offset + (o + 1) * fin];
                    for (g, a) in row.iter_mut().zip(input.iter()) {
                        *g += d * a;
                    }
                }
                grad[b.bias_offset + o] += d;
            }
            let wm = DMatrix::from_row_slice(fout, fin, &w[b.weight_offset..b.weight_offset + fout * fin]);
            let mut next = wm.transpose() * &delta;
            if j > 0 {
                for (d, z) in next.iter_mut().zip(cache.dense_pre[j - 1].iter()) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = next;
        }
        let mut dflat: Vec<f64> = delta.as_slice().to_vec();
        for l in (0..nconv).rev() {
            let st = &self.spec.convs[l];
            let (c, h, wd) = self.shapes[l];
            let k = st.kernel;
            let (ho, wo) = (h - k + 1, wd - k + 1);
            let z = &cache.conv_pre[l];
            let zs = z.as_slice();
            let mut dz = DMatrix::zeros(ho * wo, st.out_channels);
            {
                let dzs = dz.as_mut_slice();
                for (o, &flat) in cache.pool_idx[l].iter().enumerate() {
                    if zs[flat] > 0.0 {
                        dzs[flat] += dflat[o];
                    }
                }
            }
            let b = &self.layout.blocks[l];
            let gw = dz.transpose() * &cache.cols[l];
            let kk = gw.ncols();
            for oc in 0..st.out_channels {
                for q in 0..kk {
                    grad[b.weight_offset + oc * kk + q] += gw[(oc, q)];
                }
                grad[b.bias_offset + oc] += dz.column(oc).sum();
            }
            if l > 0 {
                let (wm, _) = self.conv_weight(w, l);
                let dcols = &dz * &wm;
                dflat = Self::col2im(&dcols, c, h, wd, k);
            }
        }
        Ok((out, grad))
    }
}
