use serde::{Deserialize, Serialize};

use super::{D2S_EMBEDDINGS, NONLINEAR_FLOPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpKind {
    Fc,
    Sg,
    Sum,
    Dp,
    Efc,
    Attn,
    D2s,
    S2d,
    Head,
}

/// Shape of one operator instance.
///
/// | kind | `dim_in` | `dim_in2` | `n_in` | `out_dim` |
/// |------|----------|-----------|--------|-----------|
/// | FC   | input width | | | output width |
/// | SG, SUM | width of x1 | width of x2 | | output width |
/// | DP   | dense width (0 = absent) | | sparse count | output width |
/// | EFC  | | | input count | output count |
/// | ATTN | | | input count | output count |
/// | D2S  | dense width | | | embeddings emitted |
/// | S2D  | | | sparse count | dense width |
/// | HEAD | input width | | | 1 |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSpec {
    pub kind: OpKind,
    pub dim_in: usize,
    pub dim_in2: usize,
    pub n_in: usize,
    pub out_dim: usize,
    pub dim_s: usize,
    pub heads: usize,
    pub balanced: bool,
}

impl OpSpec {
    pub fn new(kind: OpKind) -> Self {
        OpSpec {
            kind,
            dim_in: 0,
            dim_in2: 0,
            n_in: 0,
            out_dim: 0,
            dim_s: 16,
            heads: 1,
            balanced: false,
        }
    }

    pub fn fc(dim_in: usize, out_dim: usize) -> Self {
        OpSpec {
            dim_in,
            out_dim,
            ..OpSpec::new(OpKind::Fc)
        }
    }

    pub fn dp(dim_in: usize, n_in: usize, out_dim: usize, dim_s: usize, balanced: bool) -> Self {
        OpSpec {
            dim_in,
            n_in,
            out_dim,
            dim_s,
            balanced,
            ..OpSpec::new(OpKind::Dp)
        }
    }

    pub fn efc(n_in: usize, out_dim: usize, dim_s: usize) -> Self {
        OpSpec {
            n_in,
            out_dim,
            dim_s,
            ..OpSpec::new(OpKind::Efc)
        }
    }

    pub fn check(&self) -> Result<(), String> {
        match self.kind {
            OpKind::Dp if self.n_in == 0 && self.dim_in == 0 => Err("DP needs a dense or sparse input".into()),
            OpKind::Efc | OpKind::Attn if self.n_in == 0 => Err(format!("{:?} needs sparse input", self.kind)),
            OpKind::Attn if self.heads == 0 || !self.dim_s.is_multiple_of(self.heads) => {
                Err(format!("dim_s {} not divisible by {} heads", self.dim_s, self.heads))
            }
            _ => Ok(()),
        }
    }

    /// Width of the binary operators' internal result.
    fn binary_width(&self) -> usize {
        self.dim_in.max(self.dim_in2)
    }

    /// Rows stacked by the dot-product interaction.
    pub fn dp_rows(&self) -> usize {
        let sparse = if self.balanced {
            balance_width(self.out_dim)
        } else {
            self.n_in
        };
        usize::from(self.dim_in > 0) + sparse
    }

    pub fn dp_pairs(&self) -> usize {
        let n = self.dp_rows();
        n * n.saturating_sub(1) / 2
    }
}

/// Embedding count the balanced dot-product projects to:
/// `round(sqrt(2·d))`, ties rounding up.
pub fn balance_width(d: usize) -> usize {
    (2.0 * d as f64).sqrt().round() as usize
}

/// Parameter-count formulas for the dot-product input projection:
/// balanced `d² + N·round(sqrt(2·d))`, unbalanced `(N²/2)·d`. Biases are
/// excluded; the exact count of the implemented operator is
/// [`param_count`].
pub fn dp_params_paper(n: u64, d: u64, balanced: bool) -> u64 {
    if balanced {
        d * d + n * balance_width(d as usize) as u64
    } else {
        n * n / 2 * d
    }
}

/// Trainable scalars of one operator, split by role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub weights: u64,
    pub bias: u64,
    /// Layer-norm scale and shift.
    pub norm: u64,
}

impl ParamCount {
    /// Weights plus biases, the figure usually quoted for an operator.
    pub fn linear(&self) -> u64 {
        self.weights + self.bias
    }

    pub fn total(&self) -> u64 {
        self.weights + self.bias + self.norm
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            weights: self.weights + o.weights,
            bias: self.bias + o.bias,
            norm: self.norm + o.norm,
        }
    }
}

impl std::iter::Sum for ParamCount {
    fn sum<I: Iterator<Item = ParamCount>>(iter: I) -> Self {
        iter.fold(ParamCount::default(), |a, b| a + b)
    }
}

/// Exact parameter count of the implemented operator.
pub fn param_count(s: &OpSpec) -> ParamCount {
    let u = |x: usize| x as u64;
    let (ds, d) = (u(s.dim_s), u(s.out_dim));
    match s.kind {
        OpKind::Fc => ParamCount {
            weights: u(s.dim_in) * d,
            bias: d,
            norm: 2 * d,
        },
        OpKind::Sg => {
            let m = u(s.binary_width());
            ParamCount {
                weights: u(s.dim_in) * m,
                bias: m,
                norm: 2 * m,
            }
        }
        OpKind::Sum => ParamCount {
            norm: 2 * u(s.binary_width()),
            ..ParamCount::default()
        },
        OpKind::Dp => {
            let (proj_w, proj_b) = if s.dim_in > 0 { (u(s.dim_in) * ds, ds) } else { (0, 0) };
            let bal = if s.balanced { u(s.n_in) * u(balance_width(s.out_dim)) } else { 0 };
            ParamCount {
                weights: proj_w + bal + u(s.dp_pairs()) * d,
                bias: proj_b + d,
                norm: 2 * d,
            }
        }
        OpKind::Efc => ParamCount {
            weights: u(s.n_in) * d,
            bias: d,
            norm: 2 * ds,
        },
        OpKind::Attn => ParamCount {
            weights: 4 * ds * ds + 4 * ds * ds,
            bias: 4 * ds + 2 * ds + ds,
            norm: 4 * ds,
        },
        OpKind::D2s => ParamCount {
            weights: u(s.dim_in) * d * ds,
            bias: d * ds,
            norm: 0,
        },
        OpKind::S2d => ParamCount {
            weights: ds * d,
            bias: d,
            norm: 2 * d,
        },
        OpKind::Head => ParamCount {
            weights: u(s.dim_in),
            bias: 1,
            norm: 0,
        },
    }
}

/// FLOPs per sample: 2 per multiply-accumulate plus
/// [`NONLINEAR_FLOPS`] per sigmoid, softmax and layer-norm output element.
/// Matches the tape's instrumented count for the same operator.
pub fn flops(s: &OpSpec) -> u64 {
    flops_with(s, NONLINEAR_FLOPS)
}

/// Multiply-accumulate component of [`flops`] alone (2 per MAC).
pub fn mac_flops(s: &OpSpec) -> u64 {
    flops_with(s, 0)
}

fn flops_with(s: &OpSpec, nl: u64) -> u64 {
    let u = |x: usize| x as u64;
    let (ds, d, n) = (u(s.dim_s), u(s.out_dim), u(s.n_in));
    match s.kind {
        OpKind::Fc => 2 * u(s.dim_in) * d + nl * d,
        OpKind::Sg => {
            let m = u(s.binary_width());
            2 * u(s.dim_in) * m + 2 * nl * m
        }
        OpKind::Sum => nl * u(s.binary_width()),
        OpKind::Dp => {
            let proj = 2 * u(s.dim_in) * ds;
            let bal = if s.balanced { 2 * n * u(balance_width(s.out_dim)) * ds } else { 0 };
            let pairs = u(s.dp_pairs());
            proj + bal + 2 * pairs * ds + 2 * pairs * d + nl * d
        }
        OpKind::Efc => 2 * n * d * ds + nl * d * ds,
        OpKind::Attn => 16 * n * ds * ds + 4 * n * n * ds + nl * u(s.heads) * n * n + 2 * nl * n * ds,
        OpKind::D2s => 2 * u(s.dim_in) * d * ds,
        OpKind::S2d => 2 * n * ds + 2 * ds * d + nl * d,
        OpKind::Head => 2 * u(s.dim_in),
    }
}

/// Dense-to-sparse spec for a dense width.
pub(crate) fn d2s_spec(dim_in: usize, dim_s: usize) -> OpSpec {
    OpSpec {
        dim_in,
        out_dim: D2S_EMBEDDINGS,
        dim_s,
        ..OpSpec::new(OpKind::D2s)
    }
}
