//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wecon_core::epo::{log_preamble, write_log};
use wecon_core::metrics::{hv_gap, read_points, write_points};
use wecon_core::oracle::mc_hypervolume;
use wecon_core::problems::{augment, load_instances, load_tsplib_instance, save_instances};
use wecon_core::{
    das_dennis_weights, evaluate_instance, exact_pareto, generate_instance, hypervolume, DecodeMode, EvalOptions,
    HvContext, Instance, Model, ParameterTable, ProblemKind, WeightVector,
};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "run.cfg";
pub const LOG_FILE: &str = "log.csv";
pub const REPORT_HEADER: &str = "problem,n,method,hv,gap_pct,time_s";

#[derive(Args, Clone, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub problem: ProblemKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write every augmented copy after each instance.
    #[arg(long)]
    pub augment: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Instance `i` of a generated dataset.
pub fn dataset_instance(kind: ProblemKind, n: usize, seed: u64, i: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let mut inst = generate_instance(kind, n, rng.random())?;
    inst.id = format!("{}-{n}-{seed}-{i}", kind.name());
    Ok(inst)
}

pub fn generate_dataset(kind: ProblemKind, n: usize, count: usize, seed: u64) -> Result<Vec<Instance>> {
    (0..count).map(|i| dataset_instance(kind, n, seed, i)).collect()
}

pub fn gen_data(args: &GenDataArgs) -> Result<Vec<Instance>> {
    let base = generate_dataset(args.problem, args.n, args.count, args.seed)?;
    let mut out = Vec::new();
    let augment_ok = args.augment && args.problem != ProblemKind::BiKp;
    if args.augment && !augment_ok {
        log::warn!("augmentation is undefined for {}; --augment ignored", args.problem);
    }
    for inst in base {
        if augment_ok {
            out.extend(augment(&inst)?);
        } else {
            out.push(inst);
        }
    }
    save_instances(&args.out, &out).with_context(|| format!("writing {}", args.out.display()))?;
    log::info!("wrote {} instances to {}", out.len(), args.out.display());
    Ok(out)
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub problem: Option<ProblemKind>,
    #[arg(long)]
    pub n: Option<usize>,
    /// `key=value` file applied before other flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub guided_count: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub decoder: Option<String>,
    #[arg(long)]
    pub grf: Option<String>,
    #[arg(long)]
    pub decomposition: Option<String>,
    /// Save a checkpoint every this many steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            cfg.apply_pair(pair)?;
        }
        let flags: [(&str, Option<String>); 14] = [
            ("problem", self.problem.map(|p| p.to_string())),
            ("n", self.n.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("r", self.r.map(|v| v.to_string())),
            ("c", self.c.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("guided_count", self.guided_count.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("weight_decay", self.weight_decay.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("decoder", self.decoder.clone()),
            ("grf", self.grf.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if let Some(d) = &self.decomposition {
            cfg.set("decomposition", d)?;
        }
        cfg.problem()?;
        if cfg.n.is_none() {
            cfg.n = Some(cfg.train.n);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub config: RunConfig,
    pub log: Vec<wecon_core::LogRow>,
}

fn save_run(dir: &Path, cfg: &RunConfig, model: &Model<f32>, log: &[wecon_core::LogRow]) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), cfg.to_string())?;
    model.params.save(dir.join(CHECKPOINT_FILE))?;
    let kind = cfg.problem()?;
    let file = BufWriter::new(File::create(dir.join(LOG_FILE))?);
    write_log(file, &log_preamble(kind, &cfg.train, &cfg.model), log)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = args.resolve()?;
    let kind = cfg.problem()?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let model = Model::<f32>::new(kind, cfg.model.clone(), cfg.train.seed)?;
    log::info!(
        "training {} n={} ({}) for {} steps, {} parameters",
        kind,
        cfg.train.n,
        cfg.train.mode(),
        cfg.train.steps,
        model.params.num_values()
    );
    let every = args.checkpoint_every;
    let dir = args.out_dir.clone();
    let run_cfg = cfg.clone();
    let mut partial = Vec::new();
    let result = wecon_core::train(model, &cfg.train, |row, m| {
        partial.push(row.clone());
        if every > 0 && (row.step + 1) % every == 0 {
            save_run(&dir, &run_cfg, m, &partial).map_err(|e| wecon_core::Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    });
    match result {
        Ok((model, log)) => {
            save_run(&args.out_dir, &cfg, &model, &log)?;
            Ok(TrainOutcome { model, config: cfg, log })
        }
        Err(abort) => {
            save_run(&args.out_dir, &cfg, &abort.model, &abort.log)?;
            bail!(
                "training aborted at step {}: {}; last good checkpoint saved in {}",
                abort.step,
                abort.error,
                args.out_dir.display()
            )
        }
    }
}

/// Loads a checkpoint and the run config saved beside it (or `config`).
pub fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(Model<f32>, RunConfig)> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let kind = cfg.problem()?;
    let params = ParameterTable::<f32>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok((Model::from_params(kind, cfg.model.clone(), params)?, cfg))
}

/// Where instances come from.
#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Instance file in the native text format.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TSPLIB coordinate files paired into one instance (repeat the flag).
    #[arg(long)]
    pub tsplib: Vec<PathBuf>,
    /// Otherwise generate `count` instances of size `n`.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
}

impl DataArgs {
    pub fn load(&self, kind: ProblemKind) -> Result<Vec<Instance>> {
        let insts = if let Some(p) = &self.data {
            load_instances(p).with_context(|| format!("loading {}", p.display()))?
        } else if !self.tsplib.is_empty() {
            vec![load_tsplib_instance(&self.tsplib)?]
        } else if let Some(n) = self.n {
            generate_dataset(kind, n, self.count, self.data_seed)?
        } else {
            bail!("no instances: give --data, --tsplib or --n");
        };
        ensure!(!insts.is_empty(), "no instances loaded");
        if let Some(bad) = insts.iter().find(|i| i.kind != kind) {
            bail!("instance {} is {}, expected {kind}", bad.id, bad.kind);
        }
        let n = insts[0].n;
        ensure!(insts.iter().all(|i| i.n == n), "instances of mixed size in one dataset");
        Ok(insts)
    }
}

/// Reference/ideal overrides; otherwise the built-in table is used.
#[derive(Args, Clone, Debug, Default)]
pub struct RefArgs {
    /// Reference point, comma separated, in internal (minimization) units.
    #[arg(long = "ref", value_delimiter = ',', allow_hyphen_values = true)]
    pub reference: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub ideal: Vec<f64>,
}

impl RefArgs {
    pub fn context(&self, kind: ProblemKind, n: usize) -> Result<HvContext> {
        if self.reference.is_empty() {
            ensure!(self.ideal.is_empty(), "--ideal given without --ref");
            return HvContext::for_problem(kind, n)
                .with_context(|| format!("no built-in reference point for {kind} n={n}; pass --ref and --ideal"));
        }
        let ideal = if self.ideal.is_empty() {
            vec![0.0; self.reference.len()]
        } else {
            self.ideal.clone()
        };
        ensure!(self.reference.len() == kind.kappa(), "--ref needs {} values", kind.kappa());
        Ok(HvContext::new(self.reference.clone(), ideal)?)
    }
}

/// Default lattice resolution: 101 vectors for two objectives, 105 for three.
pub fn default_lattice(kappa: usize) -> usize {
    if kappa >= 3 {
        13
    } else {
        100
    }
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub problem: ProblemKind,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config of the checkpoint; defaults to the one saved beside it.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub reference: RefArgs,
    /// Lattice resolution H.
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub augment: bool,
    /// `greedy` or `sample`.
    #[arg(long, default_value = "greedy")]
    pub decode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "wecon")]
    pub method: String,
    /// HV of a reference method, for the gap column.
    #[arg(long)]
    pub reference_hv: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-weight first actions and weight/node embedding similarity.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub problem: ProblemKind,
    pub n: usize,
    pub method: String,
    pub hv: f64,
    pub gap_pct: Option<f64>,
    pub time_s: f64,
}

impl ReportRow {
    pub fn csv(&self) -> String {
        let gap = self.gap_pct.map_or(String::new(), |g| format!("{g:.4}"));
        format!("{},{},{},{:.6},{},{:.3}", self.problem, self.n, self.method, self.hv, gap, self.time_s)
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

fn parse_decode(s: &str) -> Result<DecodeMode> {
    match s {
        "greedy" => Ok(DecodeMode::Greedy),
        "sample" => Ok(DecodeMode::Sample),
        _ => bail!("--decode must be greedy or sample, got `{s}`"),
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub row: ReportRow,
    pub per_instance: Vec<f64>,
    pub archives: Vec<wecon_core::ParetoArchive>,
}

pub fn evaluate_model(
    model: &Model<f32>,
    insts: &[Instance],
    weights: &[WeightVector],
    ctx: &HvContext,
    opts: &EvalOptions,
) -> Result<(Vec<f64>, Vec<wecon_core::ParetoArchive>)> {
    let mut hvs = Vec::with_capacity(insts.len());
    let mut archives = Vec::with_capacity(insts.len());
    for inst in insts {
        let e = evaluate_instance(model, inst, weights, ctx, opts)?;
        log::debug!("{}: hv {:.5} from {} rollouts", inst.id, e.hv, e.rollouts);
        hvs.push(e.hv);
        archives.push(e.archive);
    }
    Ok((hvs, archives))
}

pub fn eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let (model, _) = load_model(&args.checkpoint, args.model_config.as_deref())?;
    ensure!(model.kind == args.problem, "checkpoint is for {}, not {}", model.kind, args.problem);
    let insts = args.data.load(args.problem)?;
    let n = insts[0].n;
    let ctx = args.reference.context(args.problem, n)?;
    let h = args.h.unwrap_or_else(|| default_lattice(args.problem.kappa()));
    let weights = das_dennis_weights(args.problem.kappa(), h)?;
    let opts = EvalOptions {
        augment: args.augment,
        mode: parse_decode(&args.decode)?,
        seed: args.seed,
    };
    if args.augment && args.problem == ProblemKind::BiKp {
        log::warn!("augmentation is undefined for {}; --augment ignored", args.problem);
    }
    let started = Instant::now();
    let (hvs, archives) = evaluate_model(&model, &insts, &weights, &ctx, &opts)?;
    let hv = hvs.iter().sum::<f64>() / hvs.len() as f64;
    let row = ReportRow {
        problem: args.problem,
        n,
        method: if args.augment { format!("{}-aug", args.method) } else { args.method.clone() },
        hv,
        gap_pct: args.reference_hv.map(|r| hv_gap(hv, r)).transpose()?,
        time_s: started.elapsed().as_secs_f64(),
    };
    println!("{REPORT_HEADER}\n{}", row.csv());
    if let Some(p) = &args.report {
        write_report(p, std::slice::from_ref(&row))?;
    }
    if let Some(p) = &args.diagnostics {
        write_diagnostics(p, &model, &insts, &weights)?;
    }
    Ok(EvalOutcome {
        row,
        per_instance: hvs,
        archives,
    })
}

/// First decoder-chosen node of a greedy solution.
pub fn first_action(kind: ProblemKind, sequence: &[usize]) -> Option<usize> {
    let skip = usize::from(kind.is_tsp());
    sequence.get(skip).copied()
}

pub fn write_diagnostics(path: &Path, model: &Model<f32>, insts: &[Instance], weights: &[WeightVector]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let k = model.kind.kappa();
    let cols: Vec<String> = (1..=k).map(|i| format!("w{i}")).collect();
    writeln!(w, "instance,{},first_action,cos_sim", cols.join(","))?;
    for inst in insts {
        let sols = model.solve_all(inst, weights)?;
        for (wv, sol) in weights.iter().zip(&sols) {
            let ws: Vec<String> = wv.as_slice().iter().map(|v| format!("{v:.4}")).collect();
            let first = first_action(model.kind, &sol.sequence).map_or(String::new(), |a| a.to_string());
            let cos = model.weight_node_similarity(inst, wv)?;
            writeln!(w, "{},{},{first},{cos:.6}", inst.id, ws.join(","))?;
        }
    }
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct OracleArgs {
    #[arg(long)]
    pub problem: ProblemKind,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub reference: RefArgs,
    /// Directory for one archive CSV per instance.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also evaluate this checkpoint and report its HV ratio.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub instance: String,
    pub count: u64,
    pub points: usize,
    pub hv: f64,
    pub time_s: f64,
    pub model_hv: Option<f64>,
}

impl OracleRow {
    pub fn ratio(&self) -> Option<f64> {
        self.model_hv.map(|m| m / self.hv)
    }

    pub fn csv(&self) -> String {
        let (m, r) = match (self.model_hv, self.ratio()) {
            (Some(m), Some(r)) => (format!("{m:.6}"), format!("{r:.6}")),
            _ => (String::new(), String::new()),
        };
        format!("{},{},{},{:.6},{:.3},{m},{r}", self.instance, self.count, self.points, self.hv, self.time_s)
    }
}

pub const ORACLE_HEADER: &str = "instance,count,points,hv_exact,time_s,hv_model,ratio";

pub fn oracle(args: &OracleArgs) -> Result<Vec<OracleRow>> {
    let insts = args.data.load(args.problem)?;
    let ctx = args.reference.context(args.problem, insts[0].n)?;
    let model = match &args.checkpoint {
        Some(c) => Some(load_model(c, args.model_config.as_deref())?.0),
        None => None,
    };
    let weights = das_dennis_weights(
        args.problem.kappa(),
        args.h.unwrap_or_else(|| default_lattice(args.problem.kappa())),
    )?;
    let opts = EvalOptions {
        augment: args.augment,
        ..EvalOptions::default()
    };
    if let Some(d) = &args.out_dir {
        fs::create_dir_all(d)?;
    }
    let mut rows = Vec::with_capacity(insts.len());
    for (i, inst) in insts.iter().enumerate() {
        let res = exact_pareto(inst)?;
        let hv = hypervolume(res.archive.points(), &ctx)?;
        if let Some(d) = &args.out_dir {
            let f = BufWriter::new(File::create(d.join(format!("archive_{i}.csv")))?);
            write_points(f, &res.archive.sorted_points())?;
        }
        let model_hv = match &model {
            Some(m) => Some(evaluate_instance(m, inst, &weights, &ctx, &opts)?.hv),
            None => None,
        };
        rows.push(OracleRow {
            instance: inst.id.clone(),
            count: res.count,
            points: res.archive.len(),
            hv,
            time_s: res.elapsed.as_secs_f64(),
            model_hv,
        });
    }
    println!("{ORACLE_HEADER}");
    for r in &rows {
        println!("{}", r.csv());
    }
    if let Some(p) = &args.report {
        let mut w = BufWriter::new(File::create(p)?);
        writeln!(w, "{ORACLE_HEADER}")?;
        for r in &rows {
            writeln!(w, "{}", r.csv())?;
        }
    }
    Ok(rows)
}

#[derive(Args, Clone, Debug)]
pub struct HvArgs {
    /// CSV of objective vectors, one per line.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub problem: Option<ProblemKind>,
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub reference: RefArgs,
    /// Also report a Monte-Carlo estimate with this many samples.
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

pub fn hv(args: &HvArgs) -> Result<f64> {
    let pts = read_points(BufReader::new(
        File::open(&args.points).with_context(|| format!("opening {}", args.points.display()))?,
    ))?;
    let ctx = match (args.problem, args.n) {
        (Some(kind), Some(n)) => args.reference.context(kind, n)?,
        _ => {
            ensure!(!args.reference.reference.is_empty(), "give --problem and --n, or --ref");
            let ideal = if args.reference.ideal.is_empty() {
                vec![0.0; args.reference.reference.len()]
            } else {
                args.reference.ideal.clone()
            };
            HvContext::new(args.reference.reference.clone(), ideal)?
        }
    };
    let value = hypervolume(&pts, &ctx)?;
    println!("hv={value:.12}");
    if let Some(s) = args.mc_samples {
        let est = mc_hypervolume(&pts, &ctx, s, args.seed)?;
        println!("mc={:.6} se={:.6}", est.value, est.std_error);
    }
    Ok(value)
}
