//! Layers built from tape operations: linear maps, RMSNorm, the gated
//! feed-forward block and multi-head attention.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::ParameterTable;
use crate::tensor::Real;

pub const RMS_EPS: f64 = 1e-6;

/// Hidden width of the gated feed-forward block: `4d/2` rounded to a multiple of 8.
pub fn ff_width(d: usize) -> usize {
    let w = ((2 * d) as f64 / 8.0).round() as usize * 8;
    w.max(8)
}

pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

pub fn rmsnorm<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var) -> Result<Var> {
    tape.rmsnorm(x, gain, T::of(RMS_EPS))
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl FeedForward {
    pub fn init<T: Real>(table: &mut ParameterTable<T>, rng: &mut impl Rng, prefix: &str, d: usize) -> Result<()> {
        let h = ff_width(d);
        table.init_matrix(rng, &format!("{prefix}.w1"), d, h)?;
        table.init_bias(&format!("{prefix}.b1"), h)?;
        table.init_matrix(rng, &format!("{prefix}.w2"), d, h)?;
        table.init_bias(&format!("{prefix}.b2"), h)?;
        table.init_matrix(rng, &format!("{prefix}.w_out"), h, d)?;
        table.init_bias(&format!("{prefix}.b_out"), d)
    }

    pub fn load<T: Real>(tape: &mut Tape<T>, table: &ParameterTable<T>, prefix: &str) -> Result<Self> {
        let mut p = |s: &str| tape.param(table, &format!("{prefix}.{s}"));
        Ok(Self {
            w1: p("w1")?,
            b1: p("b1")?,
            w2: p("w2")?,
            b2: p("b2")?,
            w_out: p("w_out")?,
            b_out: p("b_out")?,
        })
    }
}

/// `(σ(xW₁+b₁) ⊙ SiLU(xW₂+b₂)) W_out + b_out`; output width equals input width.
pub fn swiglu_ff<T: Real>(tape: &mut Tape<T>, x: Var, p: &FeedForward) -> Result<Var> {
    let gate_pre = linear(tape, x, p.w1, p.b1)?;
    let gate = tape.sigmoid(gate_pre);
    let val_pre = linear(tape, x, p.w2, p.b2)?;
    let val = tape.silu(val_pre);
    let h = tape.mul(gate, val)?;
    linear(tape, h, p.w_out, p.b_out)
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHead {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl MultiHead {
    /// Per-head projections are stored side by side: head `m` owns
    /// columns `m·d'..(m+1)·d'` of `wq`, `wk` and `wv`.
    pub fn init<T: Real>(table: &mut ParameterTable<T>, rng: &mut impl Rng, prefix: &str, d: usize) -> Result<()> {
        for w in ["wq", "wk", "wv", "wo"] {
            table.init_matrix(rng, &format!("{prefix}.{w}"), d, d)?;
        }
        table.init_bias(&format!("{prefix}.bo"), d)
    }

    pub fn load<T: Real>(tape: &mut Tape<T>, table: &ParameterTable<T>, prefix: &str) -> Result<Self> {
        let mut p = |s: &str| tape.param(table, &format!("{prefix}.{s}"));
        Ok(Self {
            wq: p("wq")?,
            wk: p("wk")?,
            wv: p("wv")?,
            wo: p("wo")?,
            bo: p("bo")?,
        })
    }
}

/// One attention head: `softmax((Q Wq)(K Wk)ᵀ / √d') V Wv` with d' the
/// projected width. Masked keys get zero weight.
#[allow(clippy::too_many_arguments)]
pub fn attention_head<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    tape.attention(qp, kp, vp, 1, mask)
}

/// Keys and values projected once so repeated queries (decoding) reuse them.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedKv {
    pub k: Var,
    pub v: Var,
}

pub fn project_kv<T: Real>(tape: &mut Tape<T>, k: Var, v: Var, p: &MultiHead) -> Result<ProjectedKv> {
    Ok(ProjectedKv {
        k: tape.matmul(k, p.wk)?,
        v: tape.matmul(v, p.wv)?,
    })
}

pub fn multi_head_projected<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    kv: &ProjectedKv,
    p: &MultiHead,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (_, d) = tape.shape(q);
    if heads == 0 || d % heads != 0 {
        return Err(shape_err("multi_head", format!("width {d} not divisible by {heads} heads")));
    }
    let qp = tape.matmul(q, p.wq)?;
    let cat = tape.attention(qp, kv.k, kv.v, heads, mask)?;
    linear(tape, cat, p.wo, p.bo)
}

/// `(‖ₘ ATTₘ(Q, K, V)) W_O + b_O`
pub fn multi_head<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    p: &MultiHead,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let kv = project_kv(tape, k, v, p)?;
    multi_head_projected(tape, q, &kv, p, heads, mask)
}
