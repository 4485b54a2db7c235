//! Preference optimization over sampled solutions: top-k guided sampling,
//! preference pairs, the length-normalized implicit reward and the
//! pairwise logistic loss, plus the training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{Decomposition, WeightVector};
use crate::model::{DecodeMode, DecoderContext, Model, Rollout};
use crate::params::AdamConfig;
use crate::problems::{generate_instance, Instance, ProblemKind};
use crate::tensor::{Real, Tensor};

/// Draws from `probs` restricted to the `k` most probable feasible nodes
/// (ties keep the lower index) and renormalized. With fewer than `k`
/// feasible nodes all of them are candidates.
pub fn guided_sample(probs: &[f64], mask: &[bool], k: usize, rng: &mut impl Rng) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k width must be at least 1".into()));
    }
    let mut cand: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if cand.is_empty() {
        return Err(Error::NoFeasibleNode);
    }
    cand.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    cand.truncate(k);
    if cand.len() == 1 {
        return Ok(cand[0]);
    }
    cand.sort_unstable();
    let total: f64 = cand.iter().map(|&i| probs[i]).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for &i in &cand {
        acc += probs[i];
        if u < acc {
            return Ok(i);
        }
    }
    Ok(*cand.last().expect("nonempty"))
}

/// Indices (0-based) of the guided samples among `r`: every `c`-th one,
/// at most `count` of them.
pub fn guided_indices(r: usize, c: usize, count: usize) -> Vec<usize> {
    (0..r).step_by(c.max(1)).take(count).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Problem size of training instances.
    pub n: usize,
    /// Solutions sampled per (instance, λ).
    pub r: usize,
    /// Every `c`-th solution is guided.
    pub c: usize,
    pub k: usize,
    /// Defaults to 3.5 for two objectives and 4.5 for three.
    pub beta: Option<f64>,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Overrides `⌈r/c⌉`; 0 gives plain preference optimization.
    pub guided_count: Option<usize>,
    pub decomposition: Decomposition,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 20,
            r: 8,
            c: 8,
            k: 5,
            beta: None,
            steps: 100,
            batch: 64,
            adam: AdamConfig::default(),
            seed: 1,
            guided_count: None,
            decomposition: Decomposition::WeightedSum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.r < 2 {
            return bad(format!("r must be at least 2, got {}", self.r));
        }
        if self.c < 2 {
            return bad(format!("c must be greater than 1, got {}", self.c));
        }
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return bad(format!("beta must be positive, got {b}"));
            }
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if let Some(g) = self.guided_count {
            if g > self.r.div_ceil(self.c) {
                return bad(format!("guided count {g} exceeds ceil(r/c) = {}", self.r.div_ceil(self.c)));
            }
        }
        Ok(())
    }

    pub fn beta_for(&self, kappa: usize) -> f64 {
        self.beta.unwrap_or(if kappa >= 3 { 4.5 } else { 3.5 })
    }

    pub fn guided_count(&self) -> usize {
        self.guided_count.unwrap_or_else(|| self.r.div_ceil(self.c))
    }

    /// `EPO` when any guided samples are drawn, `PO` otherwise.
    pub fn mode(&self) -> &'static str {
        if self.guided_count() == 0 {
            "PO"
        } else {
            "EPO"
        }
    }
}

/// Winner/loser indices into a solution list. `label` is 1 when the
/// winner's scalarized objective is strictly lower, 0 for ties.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreferencePair {
    pub winner: usize,
    pub loser: usize,
    pub label: f64,
    pub winner_score: f64,
    pub loser_score: f64,
}

/// All `r(r−1)/2` unordered pairs, oriented so the lower score wins.
pub fn build_pairs(scores: &[f64]) -> Vec<PreferencePair> {
    let mut out = Vec::with_capacity(scores.len() * scores.len().saturating_sub(1) / 2);
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            let (w, l, y) = if scores[i] < scores[j] {
                (i, j, 1.0)
            } else if scores[j] < scores[i] {
                (j, i, 1.0)
            } else {
                (i, j, 0.0)
            };
            out.push(PreferencePair {
                winner: w,
                loser: l,
                label: y,
                winner_score: scores[w],
                loser_score: scores[l],
            });
        }
    }
    out
}

/// `Σ log p / |π|` over decoder-chosen actions; an empty trajectory
/// scores 0.
pub fn implicit_reward(step_log_probs: &[f64]) -> f64 {
    if step_log_probs.is_empty() {
        0.0
    } else {
        step_log_probs.iter().sum::<f64>() / step_log_probs.len() as f64
    }
}

/// Tape version of [`implicit_reward`].
pub fn implicit_reward_var<T: Real>(tape: &mut Tape<T>, log_probs: &[Var]) -> Result<Var> {
    if log_probs.is_empty() {
        return Ok(tape.leaf(&Tensor::scalar(T::zero())));
    }
    let s = tape.sum(log_probs)?;
    Ok(tape.scale(s, T::of(1.0 / log_probs.len() as f64)))
}

/// `σ(β(f_w − f_l))`.
pub fn preference_prob(fw: f64, fl: f64, beta: f64) -> f64 {
    let z = beta * (fw - fl);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `−y · log σ(β(f_w − f_l))` as a tape node.
pub fn pair_loss<T: Real>(tape: &mut Tape<T>, fw: Var, fl: Var, label: f64, beta: f64) -> Result<Var> {
    let diff = tape.sub(fw, fl)?;
    let z = tape.scale(diff, T::of(beta));
    let ls = tape.log_sigmoid(z);
    Ok(tape.scale(ls, T::of(-label)))
}

/// Loss value of one pair given the two implicit rewards.
pub fn pair_loss_value(fw: f64, fl: f64, label: f64, beta: f64) -> f64 {
    let z = beta * (fw - fl);
    label * ((-z.abs()).exp().ln_1p() + (-z).max(0.0))
}

/// Samples `r` solutions for one (instance, λ): guided ones at
/// [`guided_indices`], plain samples elsewhere.
#[allow(clippy::too_many_arguments)]
pub fn sample_solutions<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    dc: &DecoderContext,
    inst: &Instance,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Rollout>> {
    let guided = guided_indices(cfg.r, cfg.c, cfg.guided_count());
    (0..cfg.r)
        .map(|i| {
            let mode = if guided.contains(&i) {
                DecodeMode::Guided(cfg.k)
            } else {
                DecodeMode::Sample
            };
            model.rollout(tape, dc, inst, mode, rng, None)
        })
        .collect()
}

/// Loss of one preference pair recomputed from scratch on a fresh tape.
/// Returns the loss and the gradient for every parameter it touches.
#[allow(clippy::type_complexity)]
pub fn epo_loss<T: Real>(
    model: &Model<T>,
    inst: &Instance,
    w: &WeightVector,
    winner: &[usize],
    loser: &[usize],
    label: f64,
    beta: f64,
) -> Result<(f64, BTreeMap<String, Vec<T>>)> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, inst, w)?;
    let dc = model.decoder_context(&mut tape, enc)?;
    let rw = model.replay(&mut tape, &dc, inst, winner)?;
    let rl = model.replay(&mut tape, &dc, inst, loser)?;
    let fw = implicit_reward_var(&mut tape, &rw.log_probs)?;
    let fl = implicit_reward_var(&mut tape, &rl.log_probs)?;
    let loss = pair_loss(&mut tape, fw, fl, label, beta)?;
    let value = tape.scalar(loss).f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("preference loss".into()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, tape.param_grads(&grads)))
}

/// Uniform draw from the probability simplex.
pub fn sample_weight(kappa: usize, rng: &mut impl Rng) -> WeightVector {
    let e: Vec<f64> = (0..kappa).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    WeightVector::normalized(e).expect("exponential draws are positive")
}

/// Independent stream for batch item `b` of step `step`.
pub fn item_rng(seed: u64, step: usize, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | b as u64);
    rng
}

/// Fills an empty Tchebycheff ideal point: 0 for length objectives, minus
/// the total profit for knapsack objectives.
pub fn resolve_decomposition(d: &Decomposition, inst: &Instance) -> Decomposition {
    match d {
        Decomposition::Tchebycheff(z) if z.is_empty() => {
            let z = match inst.kind {
                ProblemKind::BiKp => (1..=2)
                    .map(|j| -inst.features.iter().map(|r| r[j]).sum::<f64>())
                    .collect(),
                _ => vec![0.0; inst.kappa()],
            };
            Decomposition::Tchebycheff(z)
        }
        other => other.clone(),
    }
}

/// What one batch item contributed to a step.
#[derive(Clone, Debug)]
pub struct ItemOutcome<T> {
    pub weight: WeightVector,
    pub instance: Instance,
    pub rollouts: Vec<Rollout>,
    pub scores: Vec<f64>,
    pub pairs: Vec<PreferencePair>,
    /// Sum of pair losses (not yet averaged).
    pub loss_sum: f64,
    pub grads: BTreeMap<String, Vec<T>>,
}

/// Samples one (λ, instance), draws `r` solutions, builds pairs and
/// backpropagates `loss_scale · Σ pair losses`.
pub fn batch_item<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    step: usize,
    b: usize,
    loss_scale: f64,
) -> Result<ItemOutcome<T>> {
    let mut rng = item_rng(cfg.seed, step, b);
    let weight = sample_weight(model.kind.kappa(), &mut rng);
    let instance = generate_instance(model.kind, cfg.n, rng.random())?;
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, &instance, &weight)?;
    let dc = model.decoder_context(&mut tape, enc)?;
    let rollouts = sample_solutions(model, &mut tape, &dc, &instance, cfg, &mut rng)?;
    let decomposition = resolve_decomposition(&cfg.decomposition, &instance);
    let scores = rollouts
        .iter()
        .map(|r| decomposition.scalarize(&r.solution.objectives, &weight))
        .collect::<Result<Vec<_>>>()?;
    let pairs = build_pairs(&scores);
    let beta = cfg.beta_for(model.kind.kappa());
    let rewards = rollouts
        .iter()
        .map(|r| implicit_reward_var(&mut tape, &r.log_probs))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::new();
    for p in pairs.iter().filter(|p| p.label != 0.0) {
        terms.push(pair_loss(&mut tape, rewards[p.winner], rewards[p.loser], p.label, beta)?);
    }
    let (loss_sum, grads) = if terms.is_empty() {
        (0.0, BTreeMap::new())
    } else {
        let total = tape.sum(&terms)?;
        let loss_sum = tape.scalar(total).f64();
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}, item {b}")));
        }
        let scaled = tape.scale(total, T::of(loss_scale));
        let g = tape.backward(scaled)?;
        (loss_sum, tape.param_grads(&g))
    };
    Ok(ItemOutcome {
        weight,
        instance,
        rollouts,
        scores,
        pairs,
        loss_sum,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub mean_loss: f64,
    pub mean_best_ws: f64,
    pub elapsed_s: f64,
}

pub const LOG_HEADER: &str = "step,mean_loss,mean_best_ws,elapsed_s";

/// First line of a training log.
pub fn log_preamble(kind: ProblemKind, train: &TrainConfig, model: &crate::model::ModelConfig) -> String {
    format!(
        "# mode={} problem={} n={} r={} c={} k={} beta={} steps={} batch={} seed={} decoder={} grf={} d={} L={} M={}",
        train.mode(),
        kind,
        train.n,
        train.r,
        train.c,
        train.k,
        train.beta_for(kind.kappa()),
        train.steps,
        train.batch,
        train.seed,
        model.decoder.name(),
        if model.grf { "on" } else { "off" },
        model.d,
        model.layers,
        model.heads
    )
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{:.3}", self.step, self.mean_loss, self.mean_best_ws, self.elapsed_s)
    }
}

pub fn write_log<W: Write>(mut w: W, preamble: &str, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "{preamble}")?;
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

/// Training stopped on a non-finite loss. `model` holds the parameters
/// from before the failing step.
#[derive(Debug)]
pub struct TrainAbort<T> {
    pub step: usize,
    pub error: Error,
    pub model: Model<T>,
    pub log: Vec<LogRow>,
}

/// Runs `cfg.steps` optimizer steps. `on_step` sees every log row and the
/// updated model (e.g. for periodic checkpoints).
pub fn train<T: Real>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRow, &Model<T>) -> Result<()>,
) -> std::result::Result<(Model<T>, Vec<LogRow>), Box<TrainAbort<T>>> {
    let abort = |step, error, model, log| Box::new(TrainAbort { step, error, model, log });
    let mut log = Vec::with_capacity(cfg.steps);
    if let Err(e) = cfg.validate() {
        return Err(abort(0, e, model, log));
    }
    let started = Instant::now();
    let pairs_per_item = cfg.r * (cfg.r - 1) / 2;
    let scale = 1.0 / (cfg.batch * pairs_per_item) as f64;
    for step in 0..cfg.steps {
        let mut acc: BTreeMap<String, Vec<T>> = BTreeMap::new();
        let mut loss = 0.0;
        let mut best = 0.0;
        for b in 0..cfg.batch {
            let item = match batch_item(&model, cfg, step, b, scale) {
                Ok(it) => it,
                Err(e) => return Err(abort(step, e, model, log)),
            };
            loss += item.loss_sum;
            best += item.scores.iter().copied().fold(f64::INFINITY, f64::min);
            for (name, g) in item.grads {
                match acc.get_mut(&name) {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x = *x + *y),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        if let Err(e) = model.params.adam_step(&acc, &cfg.adam) {
            return Err(abort(step, e, model, log));
        }
        let row = LogRow {
            step,
            mean_loss: loss * scale,
            mean_best_ws: best / cfg.batch as f64,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        log::debug!("step {} loss {:.5} best_ws {:.4}", row.step, row.mean_loss, row.mean_best_ws);
        if let Err(e) = on_step(&row, &model) {
            log.push(row);
            return Err(abort(step, e, model, log));
        }
        log.push(row);
    }
    Ok((model, log))
}

/// Mean over instances and weights of the best scalarized objective among
/// `samples` sampled solutions.
pub fn mean_best_ws<T: Real>(
    model: &Model<T>,
    instances: &[Instance],
    weights: &[WeightVector],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, inst) in instances.iter().enumerate() {
        for (j, w) in weights.iter().enumerate() {
            let mut rng = item_rng(seed, i, j);
            let mut tape = Tape::new();
            let enc = model.encode(&mut tape, inst, w)?;
            let dc = model.decoder_context(&mut tape, enc)?;
            let mut best = f64::INFINITY;
            for _ in 0..samples {
                let r = model.rollout(&mut tape, &dc, inst, DecodeMode::Sample, &mut rng, None)?;
                best = best.min(crate::metrics::scalarize_ws(&r.solution.objectives, w)?);
            }
            total += best;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
