//! Building blocks shared by the encoder architectures.

use facedyn_autograd::{concat, Float, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, Builder};

const LN_EPS: f64 = 1e-5;
/// Additive attention score at padded keys.
const MASKED_SCORE: f64 = -1e9;

/// Training/evaluation switch plus the dropout stream.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    training: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            training: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout<'g, T: Float>(&mut self, x: Var<'g, T>) -> Var<'g, T> {
        if !self.training || self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let scale = T::cst(1.0 / keep);
        let rng = &mut self.rng;
        let m = ArrayD::from_shape_simple_fn(IxDyn(&x.shape()), || {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        x.mask(&m)
    }
}

/// Validity mask of a padded batch in the layouts the layers need.
#[derive(Debug, Clone)]
pub struct SeqMask<T> {
    valid: Array2<bool>,
    /// `[B, T, 1]`, one on valid frames.
    pub frames: ArrayD<T>,
    /// `[B, 1, 1, T]`, zero on valid keys and a large negative value on padding.
    pub key_bias: ArrayD<T>,
    /// `[B, 1]` number of valid frames.
    pub counts: ArrayD<T>,
}

impl<T: Float> SeqMask<T> {
    pub fn new(valid: &Array2<bool>) -> Self {
        let (b, t) = valid.dim();
        let one = |v: bool| if v { T::one() } else { T::zero() };
        let frames = ArrayD::from_shape_fn(IxDyn(&[b, t, 1]), |i| one(valid[[i[0], i[1]]]));
        let key_bias = ArrayD::from_shape_fn(IxDyn(&[b, 1, 1, t]), |i| {
            if valid[[i[0], i[3]]] {
                T::zero()
            } else {
                T::cst(MASKED_SCORE)
            }
        });
        let counts = ArrayD::from_shape_fn(IxDyn(&[b, 1]), |i| {
            T::cst(valid.row(i[0]).iter().filter(|&&v| v).count().max(1) as f64)
        });
        Self {
            valid: valid.clone(),
            frames,
            key_bias,
            counts,
        }
    }

    pub fn batch(&self) -> usize {
        self.valid.nrows()
    }

    pub fn len(&self) -> usize {
        self.valid.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.ncols() == 0
    }

    /// Every `stride`-th frame, starting at 0.
    pub fn subsample(&self, stride: usize) -> Self {
        let cols: Vec<usize> = (0..self.len()).step_by(stride).collect();
        let valid = Array2::from_shape_fn((self.batch(), cols.len()), |(b, j)| {
            self.valid[[b, cols[j]]]
        });
        Self::new(&valid)
    }

    /// `[B, 1]` validity of step `t`.
    pub fn step(&self, t: usize) -> ArrayD<T> {
        ArrayD::from_shape_fn(IxDyn(&[self.batch(), 1]), |i| {
            if self.valid[[i[0], t]] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Mean over valid frames: `[B, T, C] -> [B, C]`.
    pub fn mean_pool<'g>(&self, x: Var<'g, T>) -> Var<'g, T> {
        let g = x.graph();
        x.mask(&self.frames).sum_axis(1, false) / g.constant(self.counts.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn register(&self, b: &mut Builder) {
        let bound = 1.0 / (self.din as f64).sqrt();
        b.uniform(format!("{}.w", self.name), &[self.din, self.dout], bound);
        b.uniform(format!("{}.b", self.name), &[self.dout], bound);
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.matmul(p.get(&format!("{}.w", self.name))) + p.get(&format!("{}.b", self.name))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn register(&self, b: &mut Builder) {
        b.fill(format!("{}.g", self.name), &[self.dim], 1.0);
        b.fill(format!("{}.b", self.name), &[self.dim], 0.0);
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(LN_EPS) * p.get(&format!("{}.g", self.name))
            + p.get(&format!("{}.b", self.name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

/// Pre-normalized two-layer feed-forward sublayer (no residual).
#[derive(Debug, Clone)]
pub struct FeedForward {
    ln: LayerNorm,
    up: Linear,
    down: Linear,
    act: Activation,
}

impl FeedForward {
    pub fn new(name: &str, width: usize, inner: usize, act: Activation) -> Self {
        Self {
            ln: LayerNorm::new(format!("{name}.ln"), width),
            up: Linear::new(format!("{name}.up"), width, inner),
            down: Linear::new(format!("{name}.down"), inner, width),
            act,
        }
    }

    pub fn register(&self, b: &mut Builder) {
        self.ln.register(b);
        self.up.register(b);
        self.down.register(b);
    }

    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        ctx: &mut ForwardCtx,
    ) -> Var<'g, T> {
        let h = self.up.forward(p, self.ln.forward(p, x));
        let h = match self.act {
            Activation::Relu => h.relu(),
            Activation::Silu => h.silu(),
        };
        ctx.dropout(self.down.forward(p, h))
    }

    /// Names of the output projection, which zero the branch when zeroed.
    pub fn output_params(&self) -> [String; 2] {
        [
            format!("{}.w", self.down.name),
            format!("{}.b", self.down.name),
        ]
    }
}

/// Multi-head self-attention with optional learned relative-position bias.
#[derive(Debug, Clone)]
pub struct Mhsa {
    name: String,
    width: usize,
    heads: usize,
    qkv: Linear,
    out: Linear,
    max_relative: Option<usize>,
}

impl Mhsa {
    pub fn new(name: &str, width: usize, heads: usize, max_relative: Option<usize>) -> Self {
        assert!(
            heads > 0 && width % heads == 0,
            "width {width} not divisible by {heads} heads"
        );
        Self {
            name: name.to_string(),
            width,
            heads,
            qkv: Linear::new(format!("{name}.qkv"), width, 3 * width),
            out: Linear::new(format!("{name}.out"), width, width),
            max_relative,
        }
    }

    fn rel_name(&self) -> String {
        format!("{}.rel", self.name)
    }

    pub fn register(&self, b: &mut Builder) {
        self.qkv.register(b);
        self.out.register(b);
        if let Some(r) = self.max_relative {
            b.uniform(self.rel_name(), &[self.heads, 2 * r + 1], 0.1);
        }
    }

    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask<T>,
    ) -> Var<'g, T> {
        let g = x.graph();
        let (b, t) = (mask.batch(), mask.len());
        let (h, dh) = (self.heads, self.width / self.heads);
        let qkv = self
            .qkv
            .forward(p, x)
            .reshape(&[b, t, 3, h, dh])
            .permute(&[2, 0, 3, 1, 4]);
        let part = |i: usize| qkv.slice(0, i, i + 1, 1).reshape(&[b, h, t, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let mut scores = q.bmm(k, true).mul_scalar(1.0 / (dh as f64).sqrt());
        if self.max_relative.is_some() {
            scores = scores + p.get(&self.rel_name()).rel_bias(t);
        }
        let attn = (scores + g.constant(mask.key_bias.clone())).softmax();
        let o = attn
            .bmm(v, false)
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, t, self.width]);
        self.out.forward(p, o)
    }

    pub fn output_params(&self) -> [String; 2] {
        [
            format!("{}.w", self.out.name),
            format!("{}.b", self.out.name),
        ]
    }
}

/// Conformer convolution sublayer (no residual): LN, pointwise expansion,
/// GLU, depthwise convolution with centered padding, LN, SiLU, pointwise.
#[derive(Debug, Clone)]
pub struct ConvModule {
    name: String,
    width: usize,
    kernel: usize,
    ln: LayerNorm,
    pw1: Linear,
    ln2: LayerNorm,
    pw2: Linear,
}

impl ConvModule {
    pub fn new(name: &str, width: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        Self {
            name: name.to_string(),
            width,
            kernel,
            ln: LayerNorm::new(format!("{name}.ln"), width),
            pw1: Linear::new(format!("{name}.pw1"), width, 2 * width),
            ln2: LayerNorm::new(format!("{name}.ln2"), width),
            pw2: Linear::new(format!("{name}.pw2"), width, width),
        }
    }

    pub fn register(&self, b: &mut Builder) {
        self.ln.register(b);
        self.pw1.register(b);
        let bound = 1.0 / (self.kernel as f64).sqrt();
        b.uniform(
            format!("{}.dw.w", self.name),
            &[self.kernel, self.width],
            bound,
        );
        b.uniform(format!("{}.dw.b", self.name), &[self.width], bound);
        self.ln2.register(b);
        self.pw2.register(b);
    }

    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask<T>,
        ctx: &mut ForwardCtx,
    ) -> Var<'g, T> {
        let w = self.width;
        let y = self.pw1.forward(p, self.ln.forward(p, x));
        let glu = y.slice(2, 0, w, 1) * y.slice(2, w, 2 * w, 1).sigmoid();
        let y = glu
            .mask(&mask.frames)
            .depthwise_conv_time(p.get(&format!("{}.dw.w", self.name)))
            + p.get(&format!("{}.dw.b", self.name));
        let y = self.ln2.forward(p, y).silu();
        ctx.dropout(self.pw2.forward(p, y))
    }

    pub fn output_params(&self) -> [String; 2] {
        [
            format!("{}.w", self.pw2.name),
            format!("{}.b", self.pw2.name),
        ]
    }
}

/// Macaron block: half FF, self-attention, convolution, half FF, each
/// pre-normalized with a residual connection.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    ff1: FeedForward,
    attn_ln: LayerNorm,
    attn: Mhsa,
    conv: ConvModule,
    ff2: FeedForward,
}

impl ConformerBlock {
    pub fn new(
        name: &str,
        width: usize,
        heads: usize,
        conv_kernel: usize,
        ff_inner: usize,
        max_relative: usize,
    ) -> Self {
        Self {
            ff1: FeedForward::new(&format!("{name}.ff1"), width, ff_inner, Activation::Silu),
            attn_ln: LayerNorm::new(format!("{name}.attn_ln"), width),
            attn: Mhsa::new(&format!("{name}.attn"), width, heads, Some(max_relative)),
            conv: ConvModule::new(&format!("{name}.conv"), width, conv_kernel),
            ff2: FeedForward::new(&format!("{name}.ff2"), width, ff_inner, Activation::Silu),
        }
    }

    pub fn register(&self, b: &mut Builder) {
        self.ff1.register(b);
        self.attn_ln.register(b);
        self.attn.register(b);
        self.conv.register(b);
        self.ff2.register(b);
    }

    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask<T>,
        ctx: &mut ForwardCtx,
    ) -> Var<'g, T> {
        let x = x + self.ff1.forward(p, x, ctx).mul_scalar(0.5);
        let a = self.attn.forward(p, self.attn_ln.forward(p, x), mask);
        let x = x + ctx.dropout(a);
        let x = x + self.conv.forward(p, x, mask, ctx);
        x + self.ff2.forward(p, x, ctx).mul_scalar(0.5)
    }

    /// Parameters whose zeroing turns every residual branch off.
    pub fn branch_output_params(&self) -> Vec<String> {
        [
            self.ff1.output_params(),
            self.attn.output_params(),
            self.conv.output_params(),
            self.ff2.output_params(),
        ]
        .concat()
    }

    pub fn conv(&self) -> &ConvModule {
        &self.conv
    }
}

/// Pre-norm Transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    attn_ln: LayerNorm,
    attn: Mhsa,
    ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(name: &str, width: usize, heads: usize, ff_inner: usize) -> Self {
        Self {
            attn_ln: LayerNorm::new(format!("{name}.attn_ln"), width),
            attn: Mhsa::new(&format!("{name}.attn"), width, heads, None),
            ff: FeedForward::new(&format!("{name}.ff"), width, ff_inner, Activation::Relu),
        }
    }

    pub fn register(&self, b: &mut Builder) {
        self.attn_ln.register(b);
        self.attn.register(b);
        self.ff.register(b);
    }

    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask<T>,
        ctx: &mut ForwardCtx,
    ) -> Var<'g, T> {
        let a = self.attn.forward(p, self.attn_ln.forward(p, x), mask);
        let x = x + ctx.dropout(a);
        x + self.ff.forward(p, x, ctx)
    }
}

/// Residual temporal-convolution block with one branch per kernel size.
/// Several branches are concatenated and projected back to the width.
#[derive(Debug, Clone)]
pub struct TcnBlock {
    kernels: Vec<usize>,
    branches: Vec<Linear>,
    proj: Option<Linear>,
}

impl TcnBlock {
    pub fn new(name: &str, width: usize, kernels: &[usize]) -> Self {
        assert!(!kernels.is_empty() && kernels.iter().all(|k| k % 2 == 1));
        let branches = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| Linear::new(format!("{name}.branch{i}"), k * width, width))
            .collect();
        let proj = (kernels.len() > 1)
            .then(|| Linear::new(format!("{name}.proj"), kernels.len() * width, width));
        Self {
            kernels: kernels.to_vec(),
            branches,
            proj,
        }
    }

    pub fn register(&self, b: &mut Builder) {
        for l in &self.branches {
            l.register(b);
        }
        if let Some(p) = &self.proj {
            p.register(b);
        }
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn kernels(&self) -> &[usize] {
        &self.kernels
    }

    /// Output of branch `i` before merging: `ReLU(conv_k(x))`.
    pub fn branch_forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        i: usize,
    ) -> Var<'g, T> {
        self.branches[i]
            .forward(p, x.unfold_time(self.kernels[i]))
            .relu()
    }

    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask<T>,
        ctx: &mut ForwardCtx,
    ) -> Var<'g, T> {
        let xm = x.mask(&mask.frames);
        let outs: Vec<Var<'g, T>> = (0..self.branches.len())
            .map(|i| self.branch_forward(p, xm, i))
            .collect();
        let y = match &self.proj {
            Some(proj) => proj.forward(p, concat(&outs, 2)),
            None => outs[0],
        };
        (xm + ctx.dropout(y)).mask(&mask.frames)
    }
}

/// Single GRU layer whose state freezes on padded steps.
#[derive(Debug, Clone)]
pub struct Gru {
    name: String,
    din: usize,
    hidden: usize,
}

impl Gru {
    pub fn new(name: impl Into<String>, din: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            din,
            hidden,
        }
    }

    pub fn register(&self, b: &mut Builder) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let h3 = 3 * self.hidden;
        b.uniform(format!("{}.w_ih", self.name), &[self.din, h3], bound);
        b.uniform(format!("{}.w_hh", self.name), &[self.hidden, h3], bound);
        b.uniform(format!("{}.b_ih", self.name), &[h3], bound);
        b.uniform(format!("{}.b_hh", self.name), &[h3], bound);
    }

    /// Returns the per-step states `[B, T, H]` (when `keep_sequence`) and the
    /// state after the last valid step `[B, H]`.
    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask<T>,
        keep_sequence: bool,
    ) -> (Option<Var<'g, T>>, Var<'g, T>) {
        let g = x.graph();
        let (b, t) = (mask.batch(), mask.len());
        let hd = self.hidden;
        let gi_all =
            x.matmul(p.get(&format!("{}.w_ih", self.name))) + p.get(&format!("{}.b_ih", self.name));
        let w_hh = p.get(&format!("{}.w_hh", self.name));
        let b_hh = p.get(&format!("{}.b_hh", self.name));
        let mut h = g.constant(ArrayD::zeros(IxDyn(&[b, hd])));
        let mut states = Vec::with_capacity(if keep_sequence { t } else { 0 });
        for step in 0..t {
            let gi = gi_all.slice(1, step, step + 1, 1).reshape(&[b, 3 * hd]);
            let gh = h.matmul(w_hh) + b_hh;
            let r = (gi.slice(1, 0, hd, 1) + gh.slice(1, 0, hd, 1)).sigmoid();
            let z = (gi.slice(1, hd, 2 * hd, 1) + gh.slice(1, hd, 2 * hd, 1)).sigmoid();
            let n = (gi.slice(1, 2 * hd, 3 * hd, 1) + r * gh.slice(1, 2 * hd, 3 * hd, 1)).tanh();
            let h_new = n + z * (h - n);
            h = h + (h_new - h).mask(&mask.step(step));
            if keep_sequence {
                states.push(h.reshape(&[b, 1, hd]));
            }
        }
        let seq = keep_sequence.then(|| concat(&states, 1));
        (seq, h)
    }
}
