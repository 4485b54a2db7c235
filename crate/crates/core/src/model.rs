//! The weight-conditioned policy network: embeddings, encoder layers with
//! dual cross-attention and gated residual fusion, and the autoregressive
//! decoder (plain, residual-fusion, or expert-mixture query).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{masked_softmax_row, Tape, Var};
use crate::epo::guided_sample;
use crate::error::{Error, Result};
use crate::metrics::WeightVector;
use crate::nn::{self, FeedForward, MultiHead, ProjectedKv};
use crate::params::ParameterTable;
use crate::problems::{feasible_mask, Instance, ProblemKind, RolloutState, Solution};
use crate::tensor::{cosine_similarity, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Query refined by residual fusion with the weight token.
    Rf,
    /// Residual fusion followed by a top-1 expert mixture.
    Cco,
    /// Attention glimpse only.
    Plain,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rf => "rf",
            Self::Cco => "cco",
            Self::Plain => "plain",
        }
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rf" => Ok(Self::Rf),
            "cco" => Ok(Self::Cco),
            "plain" => Ok(Self::Plain),
            _ => Err(Error::InvalidArgument(format!("decoder must be rf|cco|plain, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Full,
    /// Node self-attention plus node-from-weight cross-attention only; the
    /// weight token is never updated and gated fusion is off.
    AblationApprox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub clip: f64,
    pub decoder: DecoderKind,
    pub grf: bool,
    pub experts: usize,
    pub encoder: EncoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            layers: 6,
            heads: 8,
            clip: 10.0,
            decoder: DecoderKind::Rf,
            grf: true,
            experts: 4,
            encoder: EncoderKind::Full,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip C must be positive, got {}", self.clip));
        }
        if self.decoder == DecoderKind::Cco && self.experts == 0 {
            return bad("cco decoder needs at least one expert".into());
        }
        if self.encoder == EncoderKind::AblationApprox && self.grf {
            return bad("encoder=ablation-approx requires grf=off".into());
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "d" => self.d = num(value)?,
            "L" | "layers" => self.layers = num(value)?,
            "M" | "heads" => self.heads = num(value)?,
            "C" | "clip" => {
                self.clip = value
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("`C` expects a number, got `{value}`")))?
            }
            "decoder" => self.decoder = value.parse()?,
            "grf" => {
                self.grf = match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(Error::InvalidArgument(format!("grf must be on|off, got `{value}`"))),
                }
            }
            "experts" => self.experts = num(value)?,
            "encoder" => {
                self.encoder = match value {
                    "full" => EncoderKind::Full,
                    "ablation-approx" => EncoderKind::AblationApprox,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "encoder must be full|ablation-approx, got `{value}`"
                        )))
                    }
                }
            }
            _ => return Err(Error::InvalidArgument(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d={}", self.d)?;
        writeln!(f, "L={}", self.layers)?;
        writeln!(f, "M={}", self.heads)?;
        writeln!(f, "C={}", self.clip)?;
        writeln!(f, "decoder={}", self.decoder.name())?;
        writeln!(f, "grf={}", if self.grf { "on" } else { "off" })?;
        writeln!(f, "experts={}", self.experts)?;
        let enc = match self.encoder {
            EncoderKind::Full => "full",
            EncoderKind::AblationApprox => "ablation-approx",
        };
        writeln!(f, "encoder={enc}")
    }
}

/// Attention + feed-forward sublayer pair, each with residual and RMSNorm.
struct Block {
    mha: MultiHead,
    norm1: Var,
    ff: FeedForward,
    norm2: Var,
}

impl Block {
    fn init<T: Real>(table: &mut ParameterTable<T>, rng: &mut impl Rng, prefix: &str, d: usize) -> Result<()> {
        MultiHead::init(table, rng, &format!("{prefix}.mha"), d)?;
        table.init_gain(&format!("{prefix}.norm1.g"), d)?;
        FeedForward::init(table, rng, &format!("{prefix}.ff"), d)?;
        table.init_gain(&format!("{prefix}.norm2.g"), d)
    }

    fn load<T: Real>(tape: &mut Tape<T>, table: &ParameterTable<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            mha: MultiHead::load(tape, table, &format!("{prefix}.mha"))?,
            norm1: tape.param(table, &format!("{prefix}.norm1.g"))?,
            ff: FeedForward::load(tape, table, &format!("{prefix}.ff"))?,
            norm2: tape.param(table, &format!("{prefix}.norm2.g"))?,
        })
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var, kv: Var, heads: usize) -> Result<Var> {
        let att = nn::multi_head(tape, x, kv, kv, &self.mha, heads, None)?;
        let r1 = tape.add(x, att)?;
        let x1 = nn::rmsnorm(tape, r1, self.norm1)?;
        let ff = nn::swiglu_ff(tape, x1, &self.ff)?;
        let r2 = tape.add(x1, ff)?;
        nn::rmsnorm(tape, r2, self.norm2)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Node embeddings, one row per node.
    pub h: Var,
    /// Weight embedding, a single row.
    pub a: Var,
}

#[derive(Clone, Copy, Debug)]
struct Rf {
    w6: Var,
    b6: Var,
    w7: Var,
    b7: Var,
}

#[derive(Clone, Debug)]
struct Cco {
    gate_w: Var,
    gate_b: Var,
    experts: Vec<[Var; 4]>,
    norm: Var,
}

/// Everything the decoder reuses across steps of one (instance, λ) rollout.
#[derive(Clone, Debug)]
pub struct DecoderContext {
    pub enc: EncoderOutput,
    kv: ProjectedKv,
    mha: MultiHead,
    ctx_w: Var,
    ctx_b: Var,
    rf: Option<Rf>,
    cco: Option<Cco>,
    graph_mean: Option<Var>,
    rows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
    /// Sample among the `k` most probable feasible nodes.
    Guided(usize),
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub solution: Solution,
    /// Log-probability of each decoder-chosen action, as tape variables.
    pub log_probs: Vec<Var>,
    /// The same values as plain numbers.
    pub step_log_probs: Vec<f64>,
}

impl Rollout {
    pub fn log_prob_sum(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    /// Number of decoder-chosen actions (excludes a fixed start node).
    pub fn decoded_len(&self) -> usize {
        self.step_log_probs.len()
    }
}

/// Width of the raw context vector before projection to `d`.
pub fn context_width(kind: ProblemKind, d: usize) -> usize {
    if kind.is_tsp() {
        2 * d
    } else {
        d + 1
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub kind: ProblemKind,
    pub cfg: ModelConfig,
    pub params: ParameterTable<T>,
}

impl<T: Real> Model<T> {
    pub fn new(kind: ProblemKind, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = ParameterTable::new();
        let d = cfg.d;
        t.init_matrix(&mut rng, "embed.node.w", kind.feature_width(), d)?;
        t.init_bias("embed.node.b", d)?;
        t.init_matrix(&mut rng, "embed.weight.w", kind.kappa(), d)?;
        t.init_bias("embed.weight.b", d)?;
        for l in 0..cfg.layers {
            Block::init(&mut t, &mut rng, &format!("enc.{l}.self"), d)?;
            if cfg.encoder == EncoderKind::Full {
                Block::init(&mut t, &mut rng, &format!("enc.{l}.wcross"), d)?;
            }
            Block::init(&mut t, &mut rng, &format!("enc.{l}.ncross"), d)?;
            if cfg.grf {
                let p = format!("enc.{l}.grf");
                t.init_matrix(&mut rng, &format!("{p}.w3"), d, d)?;
                t.init_matrix(&mut rng, &format!("{p}.w4"), 2 * d, d)?;
                t.init_bias(&format!("{p}.b4"), d)?;
                t.init_matrix(&mut rng, &format!("{p}.w5"), d, d)?;
                t.init_bias(&format!("{p}.b5"), d)?;
            }
        }
        t.init_matrix(&mut rng, "dec.ctx.w", context_width(kind, d), d)?;
        t.init_bias("dec.ctx.b", d)?;
        MultiHead::init(&mut t, &mut rng, "dec.mha", d)?;
        if cfg.decoder != DecoderKind::Plain {
            t.init_matrix(&mut rng, "dec.rf.w6", 2 * d, d)?;
            t.init_bias("dec.rf.b6", d)?;
            t.init_matrix(&mut rng, "dec.rf.w7", d, d)?;
            t.init_bias("dec.rf.b7", d)?;
        }
        if cfg.decoder == DecoderKind::Cco {
            t.init_matrix(&mut rng, "dec.cco.gate.w", d, cfg.experts)?;
            t.init_bias("dec.cco.gate.b", cfg.experts)?;
            for i in 0..cfg.experts {
                let p = format!("dec.cco.expert.{i}");
                t.init_matrix(&mut rng, &format!("{p}.w1"), d, d)?;
                t.init_bias(&format!("{p}.b1"), d)?;
                t.init_matrix(&mut rng, &format!("{p}.w2"), d, d)?;
                t.init_bias(&format!("{p}.b2"), d)?;
            }
            t.init_gain("dec.cco.norm.g", d)?;
        }
        Ok(Self { kind, cfg, params: t })
    }

    /// Wraps an existing table, checking it has every parameter this
    /// configuration needs with the right shape.
    pub fn from_params(kind: ProblemKind, cfg: ModelConfig, params: ParameterTable<T>) -> Result<Self> {
        let template = Model::<T>::new(kind, cfg.clone(), 0)?;
        for (name, t) in template.params.iter() {
            let got = params.get(name)?;
            if got.len() != t.len() || got.rows() != t.rows() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { kind, cfg, params })
    }

    fn check_instance(&self, inst: &Instance, w: &WeightVector) -> Result<()> {
        if inst.kind != self.kind {
            return Err(Error::InvalidArgument(format!("model is for {}, instance is {}", self.kind, inst.kind)));
        }
        if w.kappa() != self.kind.kappa() {
            return Err(Error::Dimension {
                expected: self.kind.kappa(),
                got: w.kappa(),
            });
        }
        Ok(())
    }

    /// Initial embeddings: one row per node and one weight token.
    pub fn embed_inputs(&self, tape: &mut Tape<T>, inst: &Instance, w: &WeightVector) -> Result<(Var, Var)> {
        self.check_instance(inst, w)?;
        let width = self.kind.feature_width();
        let feats: Vec<T> = inst.features.iter().flatten().map(|&v| T::of(v)).collect();
        let g = tape.leaf_values(inst.num_nodes(), width, feats)?;
        let lam = tape.leaf_values(1, w.kappa(), w.as_slice().iter().map(|&v| T::of(v)).collect())?;
        let p = |tape: &mut Tape<T>, n: &str| tape.param(&self.params, n);
        let (w0, b0) = (p(tape, "embed.node.w")?, p(tape, "embed.node.b")?);
        let (wl, bl) = (p(tape, "embed.weight.w")?, p(tape, "embed.weight.b")?);
        let h = nn::linear(tape, g, w0, b0)?;
        let a = nn::linear(tape, lam, wl, bl)?;
        Ok((h, a))
    }

    /// One encoder layer. Returns `(H', A')`.
    pub fn encoder_layer(&self, tape: &mut Tape<T>, l: usize, h: Var, a: Var) -> Result<(Var, Var)> {
        let heads = self.cfg.heads;
        let slf = Block::load(tape, &self.params, &format!("enc.{l}.self"))?;
        let h1 = slf.apply(tape, h, h, heads)?;
        let a_new = match self.cfg.encoder {
            EncoderKind::Full => {
                let wc = Block::load(tape, &self.params, &format!("enc.{l}.wcross"))?;
                wc.apply(tape, a, h1, heads)?
            }
            EncoderKind::AblationApprox => a,
        };
        let nc = Block::load(tape, &self.params, &format!("enc.{l}.ncross"))?;
        let h2 = nc.apply(tape, h1, a_new, heads)?;
        if !self.cfg.grf {
            return Ok((h2, a_new));
        }
        let g = self.grf_gate(tape, l, h2, a_new)?;
        let w3 = tape.param(&self.params, &format!("enc.{l}.grf.w3"))?;
        let aw = tape.matmul(a_new, w3)?;
        let inj = tape.mul(g, aw)?;
        Ok((tape.add(h2, inj)?, a_new))
    }

    /// `σ(GeLU([H₂‖A'→n]W₄+b₄)W₅+b₅)`, one gate row per node.
    pub fn grf_gate(&self, tape: &mut Tape<T>, l: usize, h2: Var, a: Var) -> Result<Var> {
        let p = format!("enc.{l}.grf");
        let ld = |tape: &mut Tape<T>, s: &str| tape.param(&self.params, &format!("{p}.{s}"));
        let (w4, b4, w5, b5) = (ld(tape, "w4")?, ld(tape, "b4")?, ld(tape, "w5")?, ld(tape, "b5")?);
        let rows = tape.shape(h2).0;
        let ab = tape.broadcast_rows(a, rows)?;
        let cat = tape.concat_cols(h2, ab)?;
        let z = nn::linear(tape, cat, w4, b4)?;
        let z = tape.gelu(z);
        let z = nn::linear(tape, z, w5, b5)?;
        Ok(tape.sigmoid(z))
    }

    pub fn encode(&self, tape: &mut Tape<T>, inst: &Instance, w: &WeightVector) -> Result<EncoderOutput> {
        let (mut h, mut a) = self.embed_inputs(tape, inst, w)?;
        for l in 0..self.cfg.layers {
            (h, a) = self.encoder_layer(tape, l, h, a)?;
        }
        Ok(EncoderOutput { h, a })
    }

    /// Loads decoder parameters and precomputes the glimpse keys/values
    /// over `[H‖A]`.
    pub fn decoder_context(&self, tape: &mut Tape<T>, enc: EncoderOutput) -> Result<DecoderContext> {
        let ha = tape.concat_rows(enc.h, enc.a)?;
        let mha = MultiHead::load(tape, &self.params, "dec.mha")?;
        let kv = nn::project_kv(tape, ha, ha, &mha)?;
        let p = |tape: &mut Tape<T>, n: &str| tape.param(&self.params, n);
        let rf = if self.cfg.decoder != DecoderKind::Plain {
            Some(Rf {
                w6: p(tape, "dec.rf.w6")?,
                b6: p(tape, "dec.rf.b6")?,
                w7: p(tape, "dec.rf.w7")?,
                b7: p(tape, "dec.rf.b7")?,
            })
        } else {
            None
        };
        let cco = if self.cfg.decoder == DecoderKind::Cco {
            let mut experts = Vec::with_capacity(self.cfg.experts);
            for i in 0..self.cfg.experts {
                let e = format!("dec.cco.expert.{i}");
                experts.push([
                    p(tape, &format!("{e}.w1"))?,
                    p(tape, &format!("{e}.b1"))?,
                    p(tape, &format!("{e}.w2"))?,
                    p(tape, &format!("{e}.b2"))?,
                ]);
            }
            Some(Cco {
                gate_w: p(tape, "dec.cco.gate.w")?,
                gate_b: p(tape, "dec.cco.gate.b")?,
                experts,
                norm: p(tape, "dec.cco.norm.g")?,
            })
        } else {
            None
        };
        let graph_mean = (self.kind == ProblemKind::BiKp).then(|| tape.mean_rows(ha));
        Ok(DecoderContext {
            enc,
            kv,
            mha,
            ctx_w: p(tape, "dec.ctx.w")?,
            ctx_b: p(tape, "dec.ctx.b")?,
            rf,
            cco,
            graph_mean,
            rows: tape.shape(enc.h).0,
        })
    }

    /// Raw context vector before projection.
    pub fn raw_context(&self, tape: &mut Tape<T>, dc: &DecoderContext, inst: &Instance, st: &RolloutState) -> Result<Var> {
        let h = dc.enc.h;
        match self.kind {
            ProblemKind::BiTsp | ProblemKind::TriTsp => {
                let (first, last) = match (st.first, st.current) {
                    (Some(f), Some(c)) => (f, c),
                    _ => return Err(Error::InvalidArgument("tour context needs a start node".into())),
                };
                let hf = tape.gather_rows(h, &[first])?;
                let hl = tape.gather_rows(h, &[last])?;
                tape.concat_cols(hf, hl)
            }
            ProblemKind::BiCvrp => {
                let last = st.current.unwrap_or(0);
                let hl = tape.gather_rows(h, &[last])?;
                let cap = tape.leaf(&Tensor::scalar(T::of(st.remaining_fraction(inst))));
                tape.concat_cols(hl, cap)
            }
            ProblemKind::BiKp => {
                let mean = dc.graph_mean.expect("knapsack context has graph mean");
                let cap = tape.leaf(&Tensor::scalar(T::of(st.remaining_fraction(inst))));
                tape.concat_cols(mean, cap)
            }
        }
    }

    /// Projected query `h_q` (1×d).
    pub fn context_query(&self, tape: &mut Tape<T>, dc: &DecoderContext, inst: &Instance, st: &RolloutState) -> Result<Var> {
        let raw = self.raw_context(tape, dc, inst, st)?;
        nn::linear(tape, raw, dc.ctx_w, dc.ctx_b)
    }

    /// Glimpse `Ĥ₁ = MHA(h_q, [H‖A], [H‖A])`; masked nodes are hidden, the
    /// weight token is always visible.
    pub fn glimpse(&self, tape: &mut Tape<T>, dc: &DecoderContext, hq: Var, mask: &[bool]) -> Result<Var> {
        let mut kv_mask = mask.to_vec();
        kv_mask.push(true);
        nn::multi_head_projected(tape, hq, &dc.kv, &dc.mha, self.cfg.heads, Some(&kv_mask))
    }

    fn residual_fusion(&self, tape: &mut Tape<T>, rf: &Rf, x: Var, a: Var) -> Result<Var> {
        let cat = tape.concat_cols(x, a)?;
        let z = nn::linear(tape, cat, rf.w6, rf.b6)?;
        let z = tape.relu(z);
        let z = nn::linear(tape, z, rf.w7, rf.b7)?;
        tape.add(x, z)
    }

    /// Gate probabilities over experts and the chosen (top-1) expert.
    pub fn cco_gate(&self, tape: &mut Tape<T>, dc: &DecoderContext, x: Var) -> Result<(Var, usize)> {
        let cco = dc
            .cco
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("decoder has no experts".into()))?;
        let scores = nn::linear(tape, x, cco.gate_w, cco.gate_b)?;
        let probs = tape.softmax(scores);
        let pv = tape.value(probs);
        let mut best = 0;
        for (i, &p) in pv.iter().enumerate() {
            if p > pv[best] {
                best = i;
            }
        }
        Ok((probs, best))
    }

    fn expert_mixture(&self, tape: &mut Tape<T>, dc: &DecoderContext, x: Var) -> Result<Var> {
        let cco = dc.cco.as_ref().expect("cco params loaded");
        let (probs, i) = self.cco_gate(tape, dc, x)?;
        let g = tape.select_col(probs, i)?;
        let [w1, b1, w2, b2] = cco.experts[i];
        let e = nn::linear(tape, x, w1, b1)?;
        let e = tape.relu(e);
        let e = nn::linear(tape, e, w2, b2)?;
        let ge = tape.mul(e, g)?;
        let r = tape.add(ge, x)?;
        nn::rmsnorm(tape, r, cco.norm)
    }

    /// Final decoder query `q_c` from the glimpse.
    pub fn query(&self, tape: &mut Tape<T>, dc: &DecoderContext, glimpse: Var) -> Result<Var> {
        match (&dc.rf, self.cfg.decoder) {
            (_, DecoderKind::Plain) | (None, _) => Ok(glimpse),
            (Some(rf), DecoderKind::Rf) => self.residual_fusion(tape, rf, glimpse, dc.enc.a),
            (Some(rf), DecoderKind::Cco) => {
                let h2 = self.residual_fusion(tape, rf, glimpse, dc.enc.a)?;
                self.expert_mixture(tape, dc, h2)
            }
        }
    }

    /// Clipped compatibilities `C·tanh(q_c·h_i/√d)` for every node, before
    /// masking.
    pub fn logits(&self, tape: &mut Tape<T>, dc: &DecoderContext, qc: Var) -> Result<Var> {
        let u = tape.matmul_bt(qc, dc.enc.h)?;
        let u = tape.scale(u, T::of(1.0 / (self.cfg.d as f64).sqrt()));
        let u = tape.tanh(u);
        Ok(tape.scale(u, T::of(self.cfg.clip)))
    }

    /// Logits for the current state (all intermediate steps on the tape).
    pub fn step_logits(&self, tape: &mut Tape<T>, dc: &DecoderContext, inst: &Instance, st: &RolloutState, mask: &[bool]) -> Result<Var> {
        let hq = self.context_query(tape, dc, inst, st)?;
        let g = self.glimpse(tape, dc, hq, mask)?;
        let qc = self.query(tape, dc, g)?;
        self.logits(tape, dc, qc)
    }

    /// Action probabilities at the current state; masked nodes get 0.
    pub fn decoder_step(&self, tape: &mut Tape<T>, dc: &DecoderContext, inst: &Instance, st: &RolloutState) -> Result<Vec<f64>> {
        let mask = feasible_mask(inst, st)?;
        if !mask.iter().any(|&b| b) {
            return Err(Error::NoFeasibleNode);
        }
        let logits = self.step_logits(tape, dc, inst, st, &mask)?;
        Ok(probabilities(tape.value(logits), &mask))
    }

    fn start_state(&self, inst: &Instance, start: Option<usize>) -> Result<RolloutState> {
        let mut st = RolloutState::new(inst);
        if self.kind.is_tsp() {
            st.apply(inst, start.unwrap_or(0))?;
        } else if start.is_some() {
            return Err(Error::InvalidArgument(format!("{} has no start node choice", self.kind)));
        }
        Ok(st)
    }

    /// Decodes one solution. Steps with a single feasible action are taken
    /// without evaluating the network; their log-probability is exactly 0.
    pub fn rollout(
        &self,
        tape: &mut Tape<T>,
        dc: &DecoderContext,
        inst: &Instance,
        mode: DecodeMode,
        rng: &mut impl Rng,
        start: Option<usize>,
    ) -> Result<Rollout> {
        self.decode(tape, dc, inst, start, |_, probs, mask| match mode {
            DecodeMode::Greedy => Ok(argmax(probs, mask)),
            DecodeMode::Sample => Ok(sample_index(probs, rng)),
            DecodeMode::Guided(k) => guided_sample(probs, mask, k, rng),
        })
    }

    /// Teacher-forces `sequence` (which must include any fixed start node)
    /// and returns its per-step log-probabilities.
    pub fn replay(&self, tape: &mut Tape<T>, dc: &DecoderContext, inst: &Instance, sequence: &[usize]) -> Result<Rollout> {
        let (start, rest) = if self.kind.is_tsp() {
            match sequence.split_first() {
                Some((&s, rest)) => (Some(s), rest),
                None => return Err(Error::Infeasible("empty tour".into())),
            }
        } else {
            (None, sequence)
        };
        let r = self.decode(tape, dc, inst, start, |t, _, _| {
            rest.get(t)
                .copied()
                .ok_or_else(|| Error::Infeasible("sequence ends before the rollout does".into()))
        })?;
        if r.solution.sequence != sequence {
            return Err(Error::Infeasible("sequence continues past a terminal state".into()));
        }
        Ok(r)
    }

    fn decode(
        &self,
        tape: &mut Tape<T>,
        dc: &DecoderContext,
        inst: &Instance,
        start: Option<usize>,
        mut choose: impl FnMut(usize, &[f64], &[bool]) -> Result<usize>,
    ) -> Result<Rollout> {
        if inst.num_nodes() != dc.rows {
            return Err(Error::Dimension {
                expected: dc.rows,
                got: inst.num_nodes(),
            });
        }
        let mut st = self.start_state(inst, start)?;
        let mut log_probs = Vec::new();
        let mut step_log_probs = Vec::new();
        let mut t = 0;
        while !st.is_done(inst) {
            let mask = feasible_mask(inst, &st)?;
            let feasible = mask.iter().filter(|&&b| b).count();
            let (action, lp) = if feasible == 1 {
                let only = mask.iter().position(|&b| b).expect("one feasible");
                (only, tape.leaf(&Tensor::scalar(T::zero())))
            } else {
                let logits = self.step_logits(tape, dc, inst, &st, &mask)?;
                let probs = probabilities(tape.value(logits), &mask);
                let a = choose(t, &probs, &mask)?;
                if a >= mask.len() || !mask[a] {
                    return Err(Error::InfeasibleAction {
                        action: a,
                        reason: "masked".into(),
                    });
                }
                (a, tape.log_softmax_at(logits, &mask, a)?)
            };
            st.apply(inst, action)?;
            step_log_probs.push(tape.scalar(lp).f64());
            log_probs.push(lp);
            t += 1;
        }
        let solution = st.into_solution(inst)?;
        Ok(Rollout {
            solution,
            log_probs,
            step_log_probs,
        })
    }

    /// Encodes and decodes on a fresh tape.
    pub fn solve(&self, inst: &Instance, w: &WeightVector, mode: DecodeMode, rng: &mut impl Rng) -> Result<Solution> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, inst, w)?;
        let dc = self.decoder_context(&mut tape, enc)?;
        Ok(self.rollout(&mut tape, &dc, inst, mode, rng, None)?.solution)
    }

    /// Greedy solution for every weight vector.
    pub fn solve_all(&self, inst: &Instance, weights: &[WeightVector]) -> Result<Vec<Solution>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        weights
            .iter()
            .map(|w| self.solve(inst, w, DecodeMode::Greedy, &mut rng))
            .collect()
    }

    /// Cosine similarity between the weight embedding and the mean node
    /// embedding after encoding.
    pub fn weight_node_similarity(&self, inst: &Instance, w: &WeightVector) -> Result<f64> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, inst, w)?;
        let mean = tape.mean_rows(enc.h);
        let a: Vec<f64> = tape.value(enc.a).iter().map(|v| v.f64()).collect();
        let m: Vec<f64> = tape.value(mean).iter().map(|v| v.f64()).collect();
        Ok(cosine_similarity(&a, &m))
    }
}

/// Masked softmax of a logit row, in `f64`.
pub fn probabilities<T: Real>(logits: &[T], mask: &[bool]) -> Vec<f64> {
    let l: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
    masked_softmax_row(&l, Some(mask))
}

/// Highest-probability feasible index; ties go to the lowest index.
pub fn argmax(probs: &[f64], mask: &[bool]) -> usize {
    let mut best = None;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b: usize| p > probs[b]) {
            best = Some(i);
        }
    }
    best.expect("at least one feasible node")
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p / total;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::generate_instance;
    use rand::seq::SliceRandom;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    fn wv(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn config_roundtrip_and_errors() {
        let mut cfg = ModelConfig::desk();
        cfg.decoder = DecoderKind::Cco;
        cfg.grf = false;
        let back = ModelConfig::parse(&cfg.to_string()).unwrap();
        assert_eq!(back, cfg);
        let c = ModelConfig::parse("d=16\nM=4 # heads\ndecoder=plain\n").unwrap();
        assert_eq!((c.d, c.heads, c.decoder), (16, 4, DecoderKind::Plain));
        assert!(ModelConfig::parse("d=10\nM=4").is_err());
        assert!(ModelConfig::parse("bogus=1").is_err());
        assert!(ModelConfig::parse("decoder=cco\nexperts=0").is_err());
        assert!(matches!(ModelConfig::parse("d=8\nnonsense"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn embedding_shapes_and_zero_case() {
        let inst = generate_instance(ProblemKind::BiTsp, 7, 1).unwrap();
        let m = Model::<f64>::new(ProblemKind::BiTsp, tiny_cfg(), 1).unwrap();
        let mut tape = Tape::new();
        let (h, a) = m.embed_inputs(&mut tape, &inst, &wv(&[0.3, 0.7])).unwrap();
        assert_eq!(tape.shape(h), (7, 8));
        assert_eq!(tape.shape(a), (1, 8));
        let (_, a2) = m.embed_inputs(&mut tape, &inst, &wv(&[0.6, 0.4])).unwrap();
        assert_ne!(tape.value(a), tape.value(a2));

        let zero = Instance::new(ProblemKind::BiTsp, vec![vec![0.0; 4]; 3], 0.0, "z").unwrap();
        let (h0, _) = m.embed_inputs(&mut tape, &zero, &wv(&[0.5, 0.5])).unwrap();
        assert!(tape.value(h0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_values_in_open_interval() {
        let inst = generate_instance(ProblemKind::BiTsp, 6, 2).unwrap();
        let m = Model::<f64>::new(ProblemKind::BiTsp, tiny_cfg(), 2).unwrap();
        let mut tape = Tape::new();
        let (h, a) = m.embed_inputs(&mut tape, &inst, &wv(&[0.2, 0.8])).unwrap();
        let g = m.grf_gate(&mut tape, 0, h, a).unwrap();
        assert!(tape.value(g).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn grf_off_returns_h2() {
        let inst = generate_instance(ProblemKind::BiTsp, 6, 3).unwrap();
        let mut cfg = tiny_cfg();
        let on = Model::<f64>::new(ProblemKind::BiTsp, cfg.clone(), 3).unwrap();
        cfg.grf = false;
        let mut off = Model::<f64>::new(ProblemKind::BiTsp, cfg, 3).unwrap();
        // Reuse identical block parameters so only the fusion differs.
        for (name, t) in on.params.iter() {
            if off.params.contains(name) {
                *off.params.get_mut(name).unwrap() = t.clone();
            }
        }
        assert!(!off.params.names().any(|n| n.contains("grf")));
        let w = wv(&[0.5, 0.5]);
        let mut tape = Tape::new();
        let (h, a) = on.embed_inputs(&mut tape, &inst, &w).unwrap();
        let (h_off, _) = off.encoder_layer(&mut tape, 0, h, a).unwrap();

        // Manual recomputation of H₂ without fusion.
        let slf = Block::load(&mut tape, &on.params, "enc.0.self").unwrap();
        let h1 = slf.apply(&mut tape, h, h, 2).unwrap();
        let wc = Block::load(&mut tape, &on.params, "enc.0.wcross").unwrap();
        let a1 = wc.apply(&mut tape, a, h1, 2).unwrap();
        let nc = Block::load(&mut tape, &on.params, "enc.0.ncross").unwrap();
        let h2 = nc.apply(&mut tape, h1, a1, 2).unwrap();
        assert_eq!(tape.value(h_off), tape.value(h2));
        let (h_on, _) = on.encoder_layer(&mut tape, 0, h, a).unwrap();
        assert_ne!(tape.value(h_on), tape.value(h2));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let inst = generate_instance(ProblemKind::BiTsp, 9, 4).unwrap();
        let cfg = ModelConfig {
            layers: 2,
            ..tiny_cfg()
        };
        let m = Model::<f32>::new(ProblemKind::BiTsp, cfg, 4).unwrap();
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
        let pinst = inst.permuted(&perm).unwrap();
        let w = wv(&[0.25, 0.75]);
        let mut tape = Tape::new();
        let e = m.encode(&mut tape, &inst, &w).unwrap();
        let ep = m.encode(&mut tape, &pinst, &w).unwrap();
        let h = tape.tensor(e.h);
        let hp = tape.tensor(ep.h);
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in hp.row_slice(i).iter().zip(h.row_slice(p)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        for (x, y) in tape.value(e.a).iter().zip(tape.value(ep.a)) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_layers_returns_embeddings() {
        let inst = generate_instance(ProblemKind::BiKp, 5, 1).unwrap();
        let cfg = ModelConfig {
            layers: 0,
            ..tiny_cfg()
        };
        let m = Model::<f64>::new(ProblemKind::BiKp, cfg, 1).unwrap();
        let w = wv(&[0.5, 0.5]);
        let mut tape = Tape::new();
        let e = m.encode(&mut tape, &inst, &w).unwrap();
        let (h, a) = m.embed_inputs(&mut tape, &inst, &w).unwrap();
        assert_eq!(tape.value(e.h), tape.value(h));
        assert_eq!(tape.value(e.a), tape.value(a));
    }

    #[test]
    fn encoder_outputs_finite_across_seeds() {
        let cfg = tiny_cfg();
        let m = Model::<f32>::new(ProblemKind::BiCvrp, cfg, 9).unwrap();
        for seed in 0..1000 {
            let inst = generate_instance(ProblemKind::BiCvrp, 5, seed).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let l: f64 = r.random();
            let mut tape = Tape::new();
            let e = m.encode(&mut tape, &inst, &WeightVector::normalized(vec![l, 1.0 - l]).unwrap()).unwrap();
            assert!(tape.value(e.h).iter().chain(tape.value(e.a)).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn context_query_shapes() {
        let cfg = tiny_cfg();
        for kind in ProblemKind::ALL {
            let inst = generate_instance(kind, 5, 1).unwrap();
            let m = Model::<f64>::new(kind, cfg.clone(), 1).unwrap();
            let w = WeightVector::normalized(vec![1.0; kind.kappa()]).unwrap();
            let mut tape = Tape::new();
            let enc = m.encode(&mut tape, &inst, &w).unwrap();
            let dc = m.decoder_context(&mut tape, enc).unwrap();
            let st = m.start_state(&inst, None).unwrap();
            let raw = m.raw_context(&mut tape, &dc, &inst, &st).unwrap();
            assert_eq!(tape.shape(raw).1, context_width(kind, 8));
            let q = m.context_query(&mut tape, &dc, &inst, &st).unwrap();
            assert_eq!(tape.shape(q), (1, 8));
            let rv = tape.value(raw).to_vec();
            match kind {
                ProblemKind::BiTsp | ProblemKind::TriTsp => {
                    assert_eq!(rv[..8], rv[8..]);
                    assert_eq!(&rv[..8], tape.tensor(enc.h).row_slice(0));
                }
                _ => assert_eq!(rv[8], 1.0),
            }
            if kind == ProblemKind::BiKp {
                let h = tape.tensor(enc.h);
                let a = tape.value(enc.a).to_vec();
                for j in 0..8 {
                    let s: f64 = (0..5).map(|i| h.get(i, j)).sum::<f64>() + a[j];
                    assert!((rv[j] - s / 6.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decoder_probabilities_respect_mask_and_clip() {
        for decoder in [DecoderKind::Rf, DecoderKind::Cco, DecoderKind::Plain] {
            let cfg = ModelConfig {
                decoder,
                clip: 10.0,
                ..tiny_cfg()
            };
            let inst = generate_instance(ProblemKind::BiTsp, 8, 2).unwrap();
            let m = Model::<f64>::new(ProblemKind::BiTsp, cfg, 2).unwrap();
            let mut tape = Tape::new();
            let enc = m.encode(&mut tape, &inst, &wv(&[0.4, 0.6])).unwrap();
            let dc = m.decoder_context(&mut tape, enc).unwrap();
            let mut st = m.start_state(&inst, None).unwrap();
            st.apply(&inst, 3).unwrap();
            let p = m.decoder_step(&mut tape, &dc, &inst, &st).unwrap();
            assert_eq!(p[0], 0.0);
            assert_eq!(p[3], 0.0);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mask = feasible_mask(&inst, &st).unwrap();
            let l = m.step_logits(&mut tape, &dc, &inst, &st, &mask).unwrap();
            assert!(tape.value(l).iter().all(|v| v.abs() <= 10.0));
        }
    }

    #[test]
    fn single_feasible_node_has_probability_one() {
        let inst = generate_instance(ProblemKind::BiTsp, 4, 2).unwrap();
        let m = Model::<f64>::new(ProblemKind::BiTsp, tiny_cfg(), 2).unwrap();
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &inst, &wv(&[0.4, 0.6])).unwrap();
        let dc = m.decoder_context(&mut tape, enc).unwrap();
        let mut st = m.start_state(&inst, None).unwrap();
        st.apply(&inst, 1).unwrap();
        st.apply(&inst, 2).unwrap();
        let p = m.decoder_step(&mut tape, &dc, &inst, &st).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn plain_equals_rf_with_zero_fusion_bitwise() {
        let cfg = tiny_cfg();
        let inst = generate_instance(ProblemKind::BiTsp, 7, 8).unwrap();
        let mut rf = Model::<f32>::new(ProblemKind::BiTsp, cfg.clone(), 8).unwrap();
        for n in ["dec.rf.w6", "dec.rf.b6", "dec.rf.w7", "dec.rf.b7"] {
            rf.params.get_mut(n).unwrap().values_mut().fill(0.0);
        }
        let plain = Model::<f32> {
            cfg: ModelConfig {
                decoder: DecoderKind::Plain,
                ..cfg
            },
            ..rf.clone()
        };
        let w = wv(&[0.3, 0.7]);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = rf.encode(&mut tape, &inst, &w).unwrap();
        let dc_rf = rf.decoder_context(&mut tape, enc).unwrap();
        let dc_pl = plain.decoder_context(&mut tape, enc).unwrap();
        let mut st = rf.start_state(&inst, None).unwrap();
        while !st.is_done(&inst) {
            let mask = feasible_mask(&inst, &st).unwrap();
            let a = rf.step_logits(&mut tape, &dc_rf, &inst, &st, &mask).unwrap();
            let b = plain.step_logits(&mut tape, &dc_pl, &inst, &st, &mask).unwrap();
            let (va, vb) = (tape.value(a).to_vec(), tape.value(b).to_vec());
            assert_eq!(va.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            let p = probabilities(&va, &mask);
            st.apply(&inst, sample_index(&p, &mut rng)).unwrap();
        }
    }

    #[test]
    fn rf_path_makes_query_depend_on_weight_token() {
        // Fix the glimpse, perturb A: q_c must move.
        let inst = generate_instance(ProblemKind::BiTsp, 5, 1).unwrap();
        let m = Model::<f64>::new(ProblemKind::BiTsp, tiny_cfg(), 1).unwrap();
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &inst, &wv(&[0.5, 0.5])).unwrap();
        let dc = m.decoder_context(&mut tape, enc).unwrap();
        let st = m.start_state(&inst, None).unwrap();
        let mask = feasible_mask(&inst, &st).unwrap();
        let hq = m.context_query(&mut tape, &dc, &inst, &st).unwrap();
        let g = m.glimpse(&mut tape, &dc, hq, &mask).unwrap();
        let g_val = tape.tensor(g);
        let a_val = tape.tensor(dc.enc.a);
        let rf = dc.rf.unwrap();
        let q_of = |tape: &mut Tape<f64>, a: &Tensor<f64>| {
            let gv = tape.leaf(&g_val);
            let av = tape.leaf(a);
            let q = m.residual_fusion(tape, &rf, gv, av).unwrap();
            tape.value(q).to_vec()
        };
        let base = q_of(&mut tape, &a_val);
        let h = 1e-6;
        let mut jac_norm = 0.0;
        for j in 0..8 {
            let mut ap = a_val.clone();
            ap.values_mut()[j] += h;
            let qp = q_of(&mut tape, &ap);
            jac_norm += qp.iter().zip(&base).map(|(x, y)| ((x - y) / h).powi(2)).sum::<f64>();
        }
        assert!(jac_norm.sqrt() > 1e-3, "{jac_norm}");
    }

    #[test]
    fn cco_gate_is_top1_subprobability() {
        let cfg = ModelConfig {
            decoder: DecoderKind::Cco,
            ..tiny_cfg()
        };
        let inst = generate_instance(ProblemKind::BiTsp, 6, 1).unwrap();
        let m = Model::<f64>::new(ProblemKind::BiTsp, cfg, 1).unwrap();
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &inst, &wv(&[0.5, 0.5])).unwrap();
        let dc = m.decoder_context(&mut tape, enc).unwrap();
        let x = tape.gather_rows(enc.h, &[0]).unwrap();
        let (probs, i) = m.cco_gate(&mut tape, &dc, x).unwrap();
        let p = tape.value(probs).to_vec();
        let gates: Vec<f64> = (0..4).map(|j| if j == i { p[j] } else { 0.0 }).collect();
        assert!(gates.iter().all(|&g| g >= 0.0));
        assert!(gates.iter().sum::<f64>() <= 1.0);
        assert!(p.iter().all(|&v| v <= p[i]));
    }

    #[test]
    fn single_expert_with_unit_gate_reduces_to_residual_norm() {
        let cfg = ModelConfig {
            decoder: DecoderKind::Cco,
            experts: 1,
            ..tiny_cfg()
        };
        let inst = generate_instance(ProblemKind::BiTsp, 5, 3).unwrap();
        let m = Model::<f64>::new(ProblemKind::BiTsp, cfg, 3).unwrap();
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &inst, &wv(&[0.5, 0.5])).unwrap();
        let dc = m.decoder_context(&mut tape, enc).unwrap();
        let x = tape.gather_rows(enc.h, &[2]).unwrap();
        let mixed = m.expert_mixture(&mut tape, &dc, x).unwrap();
        let cco = dc.cco.clone().unwrap();
        let [w1, b1, w2, b2] = cco.experts[0];
        let e = nn::linear(&mut tape, x, w1, b1).unwrap();
        let e = tape.relu(e);
        let e = nn::linear(&mut tape, e, w2, b2).unwrap();
        let r = tape.add(e, x).unwrap();
        let manual = nn::rmsnorm(&mut tape, r, cco.norm).unwrap();
        for (a, b) in tape.value(mixed).iter().zip(tape.value(manual)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rollouts_are_feasible_for_every_kind_and_mode() {
        for kind in ProblemKind::ALL {
            for decoder in [DecoderKind::Rf, DecoderKind::Cco, DecoderKind::Plain] {
                let cfg = ModelConfig { decoder, ..tiny_cfg() };
                let m = Model::<f32>::new(kind, cfg, 5).unwrap();
                for seed in 0..4 {
                    let inst = generate_instance(kind, 7, seed).unwrap();
                    let w = WeightVector::normalized(vec![1.0; kind.kappa()]).unwrap();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    for mode in [DecodeMode::Greedy, DecodeMode::Sample, DecodeMode::Guided(3)] {
                        let s = m.solve(&inst, &w, mode, &mut rng).unwrap();
                        assert!(s.feasible);
                        assert_eq!(crate::problems::objective_vector(&inst, &s.sequence).unwrap(), s.objectives);
                    }
                }
            }
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let inst = generate_instance(ProblemKind::BiCvrp, 8, 2).unwrap();
        let m = Model::<f32>::new(ProblemKind::BiCvrp, tiny_cfg(), 2).unwrap();
        let w = wv(&[0.7, 0.3]);
        let a = m.solve(&inst, &w, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = m.solve(&inst, &w, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_log_prob_matches_replay() {
        for kind in ProblemKind::ALL {
            let inst = generate_instance(kind, 6, 7).unwrap();
            let m = Model::<f64>::new(kind, tiny_cfg(), 7).unwrap();
            let w = WeightVector::normalized(vec![1.0; kind.kappa()]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut tape = Tape::new();
            let enc = m.encode(&mut tape, &inst, &w).unwrap();
            let dc = m.decoder_context(&mut tape, enc).unwrap();
            let r = m.rollout(&mut tape, &dc, &inst, DecodeMode::Sample, &mut rng, None).unwrap();

            // Independent recomputation: fresh tape, step through the
            // sequence and sum log p of each chosen action.
            let mut t2 = Tape::new();
            let enc2 = m.encode(&mut t2, &inst, &w).unwrap();
            let dc2 = m.decoder_context(&mut t2, enc2).unwrap();
            let mut st = m.start_state(&inst, None).unwrap();
            let skip = usize::from(kind.is_tsp());
            let mut total = 0.0;
            for &a in &r.solution.sequence[skip..] {
                let p = m.decoder_step(&mut t2, &dc2, &inst, &st).unwrap();
                total += p[a].ln();
                st.apply(&inst, a).unwrap();
            }
            assert!((total - r.log_prob_sum()).abs() < 1e-9, "{kind}: {total} vs {}", r.log_prob_sum());
            let rep = m.replay(&mut t2, &dc2, &inst, &r.solution.sequence).unwrap();
            assert!((rep.log_prob_sum() - r.log_prob_sum()).abs() < 1e-12);
        }
    }

    #[test]
    fn random_init_conditions_first_action_on_weights() {
        let weights = crate::metrics::das_dennis_weights(2, 100).unwrap();
        let mut differing = 0;
        for seed in 0..20 {
            let m = Model::<f32>::new(ProblemKind::BiTsp, tiny_cfg(), seed).unwrap();
            let inst = generate_instance(ProblemKind::BiTsp, 10, seed).unwrap();
            let firsts: std::collections::BTreeSet<usize> = m
                .solve_all(&inst, &weights)
                .unwrap()
                .iter()
                .map(|s| s.sequence[1])
                .collect();
            if firsts.len() > 1 {
                differing += 1;
            }
        }
        assert!(differing >= 10, "{differing}/20");
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = Model::<f32>::new(ProblemKind::BiTsp, tiny_cfg(), 1).unwrap();
        assert!(Model::from_params(ProblemKind::BiTsp, tiny_cfg(), m.params.clone()).is_ok());
        assert!(Model::from_params(ProblemKind::BiCvrp, tiny_cfg(), m.params.clone()).is_err());
        let cco = ModelConfig {
            decoder: DecoderKind::Cco,
            ..tiny_cfg()
        };
        assert!(Model::from_params(ProblemKind::BiTsp, cco, m.params).is_err());
    }

    #[test]
    fn argmax_ties_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4], &[true, true, true]), 1);
        assert_eq!(argmax(&[0.2, 0.4, 0.4], &[true, false, true]), 2);
    }
}
