//! Temporal encoders from a masked `L x 103` sequence to a fixed-size embedding.
//!
//! Convolutional and attention encoders mean-pool over valid frames; the
//! recurrent encoders read out the state after the last valid step. Padding
//! never reaches an embedding.

pub mod layers;
mod params;

pub use layers::{ConformerBlock, ConvModule, ForwardCtx, SeqMask, TcnBlock};
pub use params::{Bound, Builder, ParamStore};

use std::fmt;

use facedyn_autograd::{Float, Graph, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::FEATURE_DIM;
use layers::{Gru, LayerNorm, Linear, TransformerBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Gru,
    MsGru,
    Tcn,
    MsTcn,
    Transformer,
    Conformer,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Gru,
        Arch::MsGru,
        Arch::Tcn,
        Arch::MsTcn,
        Arch::Transformer,
        Arch::Conformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Gru => "gru",
            Arch::MsGru => "ms_gru",
            Arch::Tcn => "tcn",
            Arch::MsTcn => "ms_tcn",
            Arch::Transformer => "transformer",
            Arch::Conformer => "conformer",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Arch::Gru | Arch::MsGru)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown architecture {s}")))
    }
}

/// Subsampling strides of the multi-timescale GRU.
pub const MS_GRU_STRIDES: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Defaults to `[3]` for TCN and `[3, 5, 7, 9]` for MS-TCN.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_sizes: Option<Vec<usize>>,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub hidden_dim: usize,
    /// Feed-forward inner width as a multiple of `hidden_dim`.
    pub ff_mult: usize,
    /// Relative offsets beyond this distance share one attention bias.
    pub max_relative_position: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Conformer,
            embed_dim: 128,
            num_blocks: 4,
            num_heads: 4,
            kernel_sizes: None,
            conv_kernel: 15,
            dropout: 0.1,
            hidden_dim: 256,
            ff_mult: 4,
            max_relative_position: 64,
        }
    }
}

impl EncoderConfig {
    pub fn for_arch(arch: Arch) -> Self {
        Self {
            arch,
            ..Self::default()
        }
    }

    pub fn kernels(&self) -> Vec<usize> {
        match (&self.kernel_sizes, self.arch) {
            (Some(k), _) => k.clone(),
            (None, Arch::MsTcn) => vec![3, 5, 7, 9],
            (None, _) => vec![3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.num_blocks == 0 || self.ff_mult == 0
        {
            return bad("embed_dim, hidden_dim, num_blocks and ff_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        match self.arch {
            Arch::Transformer | Arch::Conformer => {
                if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
                    return bad(format!(
                        "num_heads {} must divide hidden_dim {}",
                        self.num_heads, self.hidden_dim
                    ));
                }
            }
            Arch::Tcn | Arch::MsTcn => {
                let k = self.kernels();
                if k.is_empty() || k.iter().any(|&k| k == 0 || k % 2 == 0) {
                    return bad(format!("kernel sizes must be odd and positive, got {k:?}"));
                }
                if self.arch == Arch::Tcn && k.len() != 1 {
                    return bad("tcn takes a single kernel size; use ms_tcn for several".into());
                }
            }
            _ => {}
        }
        if self.arch == Arch::Conformer && (self.conv_kernel == 0 || self.conv_kernel % 2 == 0) {
            return bad(format!(
                "conv_kernel must be odd and positive, got {}",
                self.conv_kernel
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Body {
    Gru(Vec<Gru>),
    MsGru(Vec<(usize, Vec<Gru>)>),
    Tcn {
        input: Linear,
        blocks: Vec<TcnBlock>,
    },
    Transformer {
        input: Linear,
        blocks: Vec<TransformerBlock>,
        norm: LayerNorm,
    },
    Conformer {
        input: Linear,
        blocks: Vec<ConformerBlock>,
        norm: LayerNorm,
    },
}

/// Architecture description; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    body: Body,
    head: Linear,
    shapes: Vec<(String, Vec<usize>)>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let inner = cfg.ff_mult * h;
        let gru_stack = |prefix: &str| -> Vec<Gru> {
            (0..cfg.num_blocks)
                .map(|l| {
                    Gru::new(
                        format!("{prefix}layer{l}"),
                        if l == 0 { FEATURE_DIM } else { h },
                        h,
                    )
                })
                .collect()
        };
        let (body, pooled) = match cfg.arch {
            Arch::Gru => (Body::Gru(gru_stack("")), h),
            Arch::MsGru => (
                Body::MsGru(
                    MS_GRU_STRIDES
                        .iter()
                        .map(|&s| (s, gru_stack(&format!("stride{s}."))))
                        .collect(),
                ),
                MS_GRU_STRIDES.len() * h,
            ),
            Arch::Tcn | Arch::MsTcn => {
                let k = cfg.kernels();
                (
                    Body::Tcn {
                        input: Linear::new("input", FEATURE_DIM, h),
                        blocks: (0..cfg.num_blocks)
                            .map(|i| TcnBlock::new(&format!("block{i}"), h, &k))
                            .collect(),
                    },
                    h,
                )
            }
            Arch::Transformer => (
                Body::Transformer {
                    input: Linear::new("input", FEATURE_DIM, h),
                    blocks: (0..cfg.num_blocks)
                        .map(|i| {
                            TransformerBlock::new(&format!("block{i}"), h, cfg.num_heads, inner)
                        })
                        .collect(),
                    norm: LayerNorm::new("norm", h),
                },
                h,
            ),
            Arch::Conformer => (
                Body::Conformer {
                    input: Linear::new("input", FEATURE_DIM, h),
                    blocks: (0..cfg.num_blocks)
                        .map(|i| {
                            build_conformer_block(
                                &format!("block{i}"),
                                h,
                                cfg.num_heads,
                                cfg.conv_kernel,
                                inner,
                                cfg.max_relative_position,
                            )
                        })
                        .collect::<Result<_>>()?,
                    norm: LayerNorm::new("norm", h),
                },
                h,
            ),
        };
        let mut enc = Self {
            cfg: cfg.clone(),
            body,
            head: Linear::new("head", pooled, cfg.embed_dim),
            shapes: Vec::new(),
        };
        enc.shapes = enc
            .init_params(0)
            .iter()
            .map(|(n, v)| (n.to_string(), v.shape().to_vec()))
            .collect();
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn param_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.shapes
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Fan-in uniform initialization from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore<f64> {
        let mut b = Builder::new(seed);
        match &self.body {
            Body::Gru(layers) => layers.iter().for_each(|l| l.register(&mut b)),
            Body::MsGru(branches) => branches
                .iter()
                .flat_map(|(_, l)| l)
                .for_each(|l| l.register(&mut b)),
            Body::Tcn { input, blocks } => {
                input.register(&mut b);
                blocks.iter().for_each(|x| x.register(&mut b));
            }
            Body::Transformer {
                input,
                blocks,
                norm,
            } => {
                input.register(&mut b);
                blocks.iter().for_each(|x| x.register(&mut b));
                norm.register(&mut b);
            }
            Body::Conformer {
                input,
                blocks,
                norm,
            } => {
                input.register(&mut b);
                blocks.iter().for_each(|x| x.register(&mut b));
                norm.register(&mut b);
            }
        }
        self.head.register(&mut b);
        b.finish()
    }

    pub fn check_params<T: Float>(&self, params: &ParamStore<T>) -> Result<()> {
        params.check_shapes(&self.shapes)
    }

    /// `x[B, L, 103]` with validity `mask[B, L]` to embeddings `[B, embed_dim]`.
    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        mask: &Array2<bool>,
        ctx: &mut ForwardCtx,
    ) -> Var<'g, T> {
        let m = SeqMask::<T>::new(mask);
        let x = x.mask(&m.frames);
        let pooled = match &self.body {
            Body::Gru(layers) => run_gru_stack(p, layers, x, &m),
            Body::MsGru(branches) => {
                let finals: Vec<Var<'g, T>> = branches
                    .iter()
                    .map(|(s, layers)| {
                        let xs = if *s == 1 {
                            x
                        } else {
                            x.slice(1, 0, m.len(), *s)
                        };
                        run_gru_stack(p, layers, xs, &m.subsample(*s))
                    })
                    .collect();
                facedyn_autograd::concat(&finals, 1)
            }
            Body::Tcn { input, blocks } => {
                let mut h = input.forward(p, x);
                for blk in blocks {
                    h = blk.forward(p, h, &m, ctx);
                }
                m.mean_pool(h)
            }
            Body::Transformer {
                input,
                blocks,
                norm,
            } => {
                let pe = sinusoidal_encoding::<T>(m.len(), self.cfg.hidden_dim);
                let mut h = input.forward(p, x) + x.graph().constant(pe);
                for blk in blocks {
                    h = blk.forward(p, h, &m, ctx);
                }
                m.mean_pool(norm.forward(p, h))
            }
            Body::Conformer {
                input,
                blocks,
                norm,
            } => {
                let mut h = input.forward(p, x);
                for blk in blocks {
                    h = blk.forward(p, h, &m, ctx);
                }
                m.mean_pool(norm.forward(p, h))
            }
        };
        self.head.forward(p, pooled)
    }

    /// The TCN blocks, for receptive-field probes.
    pub fn tcn_blocks(&self) -> Option<&[TcnBlock]> {
        match &self.body {
            Body::Tcn { blocks, .. } => Some(blocks),
            _ => None,
        }
    }

    pub fn conformer_blocks(&self) -> Option<&[ConformerBlock]> {
        match &self.body {
            Body::Conformer { blocks, .. } => Some(blocks),
            _ => None,
        }
    }
}

fn run_gru_stack<'g, T: Float>(
    p: &Bound<'g, T>,
    layers: &[Gru],
    x: Var<'g, T>,
    m: &SeqMask<T>,
) -> Var<'g, T> {
    let mut input = x;
    let mut last = None;
    for (i, layer) in layers.iter().enumerate() {
        let (seq, h) = layer.forward(p, input, m, i + 1 < layers.len());
        if let Some(seq) = seq {
            input = seq;
        }
        last = Some(h);
    }
    last.expect("at least one recurrent layer")
}

/// Absolute sinusoidal position table `[T, D]`.
pub fn sinusoidal_encoding<T: Float>(len: usize, dim: usize) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(&[len, dim]), |i| {
        let (t, d) = (i[0] as f64, i[1]);
        let freq = 1.0 / 10000f64.powf((2 * (d / 2)) as f64 / dim as f64);
        T::cst(if d % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        })
    })
}

pub fn build_conformer_block(
    name: &str,
    width: usize,
    heads: usize,
    conv_kernel: usize,
    ff_inner: usize,
    max_relative: usize,
) -> Result<ConformerBlock> {
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "width {width} not divisible by {heads} heads"
        )));
    }
    if conv_kernel % 2 == 0 {
        return Err(Error::Config(format!(
            "conv_kernel must be odd, got {conv_kernel}"
        )));
    }
    Ok(ConformerBlock::new(
        name,
        width,
        heads,
        conv_kernel,
        ff_inner,
        max_relative,
    ))
}

pub fn build_ms_tcn(kernel_sizes: &[usize], width: usize) -> Result<TcnBlock> {
    if kernel_sizes.is_empty() {
        return Err(Error::Config("at least one kernel size is required".into()));
    }
    if let Some(k) = kernel_sizes.iter().find(|&&k| k == 0 || k % 2 == 0) {
        return Err(Error::Config(format!("kernel size {k} is not odd")));
    }
    Ok(TcnBlock::new("block", width, kernel_sizes))
}

/// Evaluation-mode embeddings `[B, embed_dim]` for a padded batch.
pub fn encode(
    encoder: &Encoder,
    params: &ParamStore<f32>,
    sequences: &Array3<f32>,
    mask: &Array2<bool>,
) -> Result<Array2<f32>> {
    encoder.check_params(params)?;
    if sequences.dim().2 != FEATURE_DIM {
        return Err(Error::Dimension {
            expected: FEATURE_DIM,
            found: sequences.dim().2,
        });
    }
    let g = Graph::<f32>::new();
    let bound = params.bind_frozen(&g);
    let x = g.constant(sequences.clone().into_dyn());
    let out = encoder.forward(&bound, x, mask, &mut ForwardCtx::eval());
    let v = out.value().clone();
    Ok(v.into_dimensionality().expect("encoder output is 2-D"))
}
