use std::fs;
use std::path::Path;
use std::process::Command;

use wecon_cli::commands::{
    self, DataArgs, EvalArgs, GenDataArgs, HvArgs, OracleArgs, RefArgs, TrainArgs, CHECKPOINT_FILE, LOG_FILE,
};
use wecon_core::{ParameterTable, ProblemKind};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wecon"))
}

fn tiny_train(dir: &Path, extra: &[&str], steps: usize) -> TrainArgs {
    let mut set: Vec<String> = ["d=8", "L=1", "M=2"].iter().map(|s| s.to_string()).collect();
    set.extend(extra.iter().map(|s| s.to_string()));
    TrainArgs {
        problem: Some(ProblemKind::BiTsp),
        n: Some(6),
        set,
        steps: Some(steps),
        batch: Some(2),
        r: Some(4),
        c: Some(2),
        k: Some(2),
        out_dir: dir.to_path_buf(),
        ..TrainArgs::default()
    }
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let args = |name: &str| GenDataArgs {
        problem: ProblemKind::BiTsp,
        n: 20,
        count: 20,
        seed: 5,
        augment: false,
        out: dir.path().join(name),
    };
    assert_eq!(commands::gen_data(&args("a.txt")).unwrap().len(), 20);
    commands::gen_data(&args("b.txt")).unwrap();
    let a = fs::read(dir.path().join("a.txt")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.txt")).unwrap());
    let back = wecon_core::problems::load_instances(dir.path().join("a.txt")).unwrap();
    assert_eq!(back.len(), 20);
    assert!(back.iter().all(|i| i.n == 20));
}

#[test]
fn gen_data_ignores_augmentation_for_knapsack() {
    let dir = tempfile::tempdir().unwrap();
    let out = commands::gen_data(&GenDataArgs {
        problem: ProblemKind::BiKp,
        n: 10,
        count: 3,
        seed: 1,
        augment: true,
        out: dir.path().join("kp.txt"),
    })
    .unwrap();
    assert_eq!(out.len(), 3);
    let cvrp = commands::gen_data(&GenDataArgs {
        problem: ProblemKind::BiCvrp,
        n: 5,
        count: 2,
        seed: 1,
        augment: true,
        out: dir.path().join("cvrp.txt"),
    })
    .unwrap();
    assert_eq!(cvrp.len(), 16);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = commands::train(&tiny_train(dir.path(), &[], 0)).unwrap();
    let saved = ParameterTable::<f32>::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
    let init = wecon_core::Model::<f32>::new(ProblemKind::BiTsp, out.config.model.clone(), out.config.train.seed).unwrap();
    assert_eq!(saved.to_checkpoint_bytes(), init.params.to_checkpoint_bytes());
}

#[test]
fn log_header_records_mode_and_ablations() {
    let dir = tempfile::tempdir().unwrap();
    let po = dir.path().join("po");
    commands::train(&TrainArgs {
        guided_count: Some(0),
        ..tiny_train(&po, &["grf=off", "decoder=plain"], 1)
    })
    .unwrap();
    let log = fs::read_to_string(po.join(LOG_FILE)).unwrap();
    let first = log.lines().next().unwrap();
    assert!(first.starts_with("# mode=PO"), "{first}");
    assert!(first.contains("decoder=plain") && first.contains("grf=off"));
    let epo = dir.path().join("epo");
    commands::train(&tiny_train(&epo, &["decoder=cco"], 1)).unwrap();
    let log = fs::read_to_string(epo.join(LOG_FILE)).unwrap();
    assert!(log.starts_with("# mode=EPO"));
    assert!(log.contains("decoder=cco"));
    assert_eq!(log.lines().nth(1).unwrap(), wecon_core::epo::LOG_HEADER);
}

#[test]
fn eval_is_repeatable_and_augmentation_helps() {
    let dir = tempfile::tempdir().unwrap();
    commands::train(&tiny_train(dir.path(), &[], 1)).unwrap();
    let args = EvalArgs {
        problem: ProblemKind::BiTsp,
        checkpoint: dir.path().join(CHECKPOINT_FILE),
        model_config: None,
        data: DataArgs {
            n: Some(20),
            count: 2,
            data_seed: 3,
            ..DataArgs::default()
        },
        reference: RefArgs::default(),
        h: Some(10),
        augment: false,
        decode: "greedy".into(),
        seed: 0,
        method: "wecon".into(),
        reference_hv: Some(0.7),
        report: Some(dir.path().join("report.csv")),
        diagnostics: Some(dir.path().join("diag.csv")),
    };
    let a = commands::eval(&args).unwrap();
    let b = commands::eval(&args).unwrap();
    assert_eq!(a.per_instance, b.per_instance);
    assert!((0.0..=1.0).contains(&a.row.hv));
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.starts_with("problem,n,method,hv,gap_pct,time_s\nBiTSP,20,wecon,"));
    let diag = fs::read_to_string(dir.path().join("diag.csv")).unwrap();
    assert_eq!(diag.lines().count(), 1 + 2 * 11);
    let aug = commands::eval(&EvalArgs {
        augment: true,
        report: None,
        diagnostics: None,
        ..args
    })
    .unwrap();
    for (p, q) in a.per_instance.iter().zip(&aug.per_instance) {
        assert!(q >= &(p - 1e-12));
    }
    assert_eq!(aug.row.method, "wecon-aug");
}

#[test]
fn eval_without_reference_point_fails() {
    let dir = tempfile::tempdir().unwrap();
    commands::train(&tiny_train(dir.path(), &[], 0)).unwrap();
    let err = commands::eval(&EvalArgs {
        problem: ProblemKind::BiTsp,
        checkpoint: dir.path().join(CHECKPOINT_FILE),
        model_config: None,
        data: DataArgs {
            n: Some(7),
            count: 1,
            ..DataArgs::default()
        },
        reference: RefArgs::default(),
        h: Some(2),
        augment: false,
        decode: "greedy".into(),
        seed: 0,
        method: "m".into(),
        reference_hv: None,
        report: None,
        diagnostics: None,
    })
    .unwrap_err();
    assert!(format!("{err:#}").contains("reference point"), "{err:#}");
}

#[test]
fn oracle_counts_tours_and_reports_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("run");
    commands::train(&tiny_train(&ckpt, &[], 0)).unwrap();
    let rows = commands::oracle(&OracleArgs {
        problem: ProblemKind::BiTsp,
        data: DataArgs {
            n: Some(6),
            count: 2,
            ..DataArgs::default()
        },
        reference: RefArgs {
            reference: vec![6.0, 6.0],
            ideal: vec![0.0, 0.0],
        },
        out_dir: Some(dir.path().join("arch")),
        report: Some(dir.path().join("oracle.csv")),
        checkpoint: Some(ckpt.join(CHECKPOINT_FILE)),
        model_config: None,
        h: Some(10),
        augment: false,
    })
    .unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.count, 60);
        let ratio = r.ratio().unwrap();
        assert!(ratio > 0.0 && ratio <= 1.0 + 1e-12);
    }
    // Archive files feed straight back into the hv command.
    let hv = commands::hv(&HvArgs {
        points: dir.path().join("arch/archive_0.csv"),
        problem: None,
        n: None,
        reference: RefArgs {
            reference: vec![6.0, 6.0],
            ideal: vec![],
        },
        mc_samples: Some(1000),
        seed: 1,
    })
    .unwrap();
    assert!((hv - rows[0].hv).abs() < 1e-12);
}

#[test]
fn tsplib_pair_must_match_in_size() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, n: usize| {
        let mut s = format!("NAME : {name}\nTYPE : TSP\nDIMENSION : {n}\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n");
        for i in 0..n {
            s.push_str(&format!("{} {} {}\n", i + 1, (i * 37) % 100, (i * 53) % 100));
        }
        s.push_str("EOF\n");
        let p = dir.path().join(name);
        fs::write(&p, s).unwrap();
        p
    };
    let a = write("a.tsp", 5);
    let b = write("b.tsp", 5);
    let c = write("c.tsp", 4);
    let ok = DataArgs {
        tsplib: vec![a.clone(), b],
        ..DataArgs::default()
    };
    assert_eq!(ok.load(ProblemKind::BiTsp).unwrap()[0].n, 5);
    let bad = DataArgs {
        tsplib: vec![a, c],
        ..DataArgs::default()
    };
    assert!(bad.load(ProblemKind::BiTsp).is_err());
}

#[test]
fn binary_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data.txt");
    let run = |args: &[&str]| {
        let out = bin().args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["gen-data", "--problem", "bicvrp", "--n", "20", "--count", "2", "--seed", "4", "--out", data.to_str().unwrap()]);
    let cfg = d.join("tiny.cfg");
    fs::write(&cfg, "problem=bicvrp\nn=6\nd=8\nL=1\nM=2\nbatch=2\nr=4\nc=2\n").unwrap();
    let run_dir = d.join("run");
    run(&["train", "--config", cfg.to_str().unwrap(), "--steps", "1", "--out-dir", run_dir.to_str().unwrap()]);
    let out = run(&[
        "eval",
        "--problem",
        "bicvrp",
        "--checkpoint",
        run_dir.join(CHECKPOINT_FILE).to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--h",
        "4",
    ]);
    assert!(out.contains("BiCVRP,20,wecon,"), "{out}");
    let pts = d.join("pts.csv");
    fs::write(&pts, "f1,f2\n0.2,0.6\n0.5,0.3\n").unwrap();
    let out = run(&["hv", "--points", pts.to_str().unwrap(), "--ref", "1,1"]);
    assert_eq!(out.lines().next().unwrap(), "hv=0.470000000000");
    let bad = bin().args(["oracle", "--problem", "bitsp", "--n", "11", "--count", "1", "--ref", "9,9"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("n <= 10"));
}
