//! Release gate. Each criterion trains, evaluates or measures at full size
//! and prints one PASS/FAIL line. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test -p stfm-core --test acceptance -- 3 5`.

use std::process::ExitCode;
use std::time::Instant;

use stfm_core::harness::check::{run_suite, Suite, GRAD_TOL, LEMMA_TOL, PERM_TOL};
use stfm_core::harness::{load_checkpoint, run_bench, save_checkpoint, write_checkpoint, BenchConfig, BlockKind, RunConfig};
use stfm_core::tasks::MogGenConfig;
use stfm_core::train::eval::{evaluate_clustering, evaluate_max_regression, evaluate_oracle};
use stfm_core::train::{presets, TrainConfig, Trainer};
use stfm_core::{Result, SetModel};

const MAXREG_EVAL_SETS: usize = 5000;
const CLUSTER_EVAL_DATASETS: usize = 500;
const EVAL_SEED: u64 = 20_240_601;
const EM_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn train(cfg: TrainConfig) -> Result<SetModel> {
    let mut t = Trainer::new(cfg)?;
    t.run(|_, _| Ok(()))?;
    Ok(t.into_model())
}

fn max_regression() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, ok, bound) in [
        ("maxreg-sab-pma", (|m| m <= 0.5) as fn(f64) -> bool, "<= 0.5"),
        ("maxreg-rff-max", |m| m <= 0.3, "<= 0.3"),
        ("maxreg-rff-mean", |m| m >= 1.2, ">= 1.2"),
    ] {
        let model = train(presets::by_name(name).expect("preset"))?;
        let mae = evaluate_max_regression(&model, MAXREG_EVAL_SETS, EVAL_SEED)?.mae;
        pass &= ok(mae.mean);
        parts.push(format!("{name} MAE {:.4} ± {:.4} (want {bound})", mae.mean, mae.std));
    }
    Ok(Outcome {
        pass,
        detail: parts.join("; "),
    })
}

fn clustering() -> Result<Outcome> {
    let st_cfg = presets::by_name("cluster-st-reduced").expect("preset");
    let rff_cfg = presets::by_name("cluster-rff-reduced").expect("preset");
    let gen = st_cfg.mog.clone();
    let oracle = evaluate_oracle(&gen, CLUSTER_EVAL_DATASETS, EVAL_SEED)?;
    let st = evaluate_clustering(&train(st_cfg)?, &gen, CLUSTER_EVAL_DATASETS, EVAL_SEED)?;
    let rff = evaluate_clustering(&train(rff_cfg)?, &gen, CLUSTER_EVAL_DATASETS, EVAL_SEED)?;
    let gap_oracle = oracle.ll0.mean - st.ll0.mean;
    let gap_rff = st.ll0.mean - rff.ll0.mean;
    let em = [&st, &rff, &oracle].map(|r| r.em_improves_fraction(EM_TOL));
    let a = gap_oracle.abs() <= 0.35;
    let b = gap_rff >= 0.15;
    let c = em.iter().all(|f| *f == 1.0);
    Ok(Outcome {
        pass: a && b && c,
        detail: format!(
            "(a) ST LL0 {:.4} vs oracle {:.4}, gap {:.4} (want <= 0.35) {}; \
             (b) rFF LL0 {:.4}, ST margin {:.4} (want >= 0.15) {}; \
             (c) LL1 >= LL0 on {:.1}% / {:.1}% / {:.1}% of datasets (ST / rFF / oracle) {}; \
             ST LL1 {:.4} ARI0 {:.4} ARI1 {:.4}; rFF LL1 {:.4} ARI0 {:.4}",
            st.ll0.mean,
            oracle.ll0.mean,
            gap_oracle,
            ok(a),
            rff.ll0.mean,
            gap_rff,
            ok(b),
            100.0 * em[0],
            100.0 * em[1],
            100.0 * em[2],
            ok(c),
            st.ll1.mean,
            st.ari0.mean,
            st.ari1.mean,
            rff.ll1.mean,
            rff.ari0.mean,
        ),
    })
}

fn oracle() -> Result<Outcome> {
    let r = evaluate_oracle(&MogGenConfig::default(), CLUSTER_EVAL_DATASETS, EVAL_SEED)?;
    let ll = r.ll0.mean;
    Ok(Outcome {
        pass: (-1.53..=-1.42).contains(&ll),
        detail: format!(
            "oracle LL/data {ll:.4} ± {:.4} over {CLUSTER_EVAL_DATASETS} datasets (want in [-1.53, -1.42], reference -1.4726)",
            r.ll0.std
        ),
    })
}

fn complexity() -> Result<Outcome> {
    let sab = run_bench(&BenchConfig::new(BlockKind::Sab, 0, vec![256, 512, 1024, 2048, 4096], 5))?;
    let isab_sizes = vec![256, 512, 1024, 2048, 4096, 8192];
    let isab16 = run_bench(&BenchConfig::new(BlockKind::Isab, 16, isab_sizes, 5))?;
    let isab32 = run_bench(&BenchConfig::new(BlockKind::Isab, 32, vec![4096, 8192], 5))?;
    let sab_slope = sab.slope.unwrap_or(f64::NAN);
    let isab_slope = isab16.slope.unwrap_or(f64::NAN);
    let ratio = match (isab32.median_at(8192), isab16.median_at(8192)) {
        (Some(a), Some(b)) => a / b,
        _ => f64::NAN,
    };
    let failed: Vec<usize> = [&sab, &isab16, &isab32]
        .iter()
        .flat_map(|r| r.failed.iter().map(|(n, _)| *n))
        .collect();
    let a = sab_slope >= 1.6;
    let b = isab_slope <= 1.3;
    let c = (1.5..=2.5).contains(&ratio);
    Ok(Outcome {
        pass: a && b && c && failed.is_empty(),
        detail: format!(
            "SAB slope {sab_slope:.3} (want >= 1.6) {}; ISAB(16) slope {isab_slope:.3} (want <= 1.3) {}; \
             ISAB time m=32/m=16 at n=8192 {ratio:.3} (want in [1.5, 2.5]) {}; \
             SAB median at 4096 {:.4}s, ISAB(16) at 8192 {:.4}s, ISAB(32) at 8192 {:.4}s{}",
            ok(a),
            ok(b),
            ok(c),
            sab.median_at(4096).unwrap_or(f64::NAN),
            isab16.median_at(8192).unwrap_or(f64::NAN),
            isab32.median_at(8192).unwrap_or(f64::NAN),
            if failed.is_empty() { String::new() } else { format!("; failed sizes {failed:?}") },
        ),
    })
}

fn properties() -> Result<Outcome> {
    let report = run_suite(Suite::All, 0)?;
    let worst = |s| report.worst(s).unwrap_or(f64::NAN);
    let failures: Vec<String> = report.failures().map(ToString::to_string).collect();
    Ok(Outcome {
        pass: report.passed(),
        detail: format!(
            "{} cases; worst perm {:.2e} (tol {PERM_TOL:.0e}), lemma {:.2e} (tol {LEMMA_TOL:.0e}), \
             grad {:.2e} (tol {GRAD_TOL:.0e}), em drop {:.2e}{}",
            report.cases.len(),
            worst("perm"),
            worst("lemma"),
            worst("grad"),
            worst("em"),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(" | ")) },
        ),
    })
}

fn checkpoint_bytes(cfg: &TrainConfig) -> Result<Vec<u8>> {
    let model = train(cfg.clone())?;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &RunConfig::from_train(cfg.clone()), &model)?;
    Ok(buf)
}

fn persistence() -> Result<Outcome> {
    let mut detail = Vec::new();
    let mut pass = true;
    let dir = tempfile::tempdir()?;
    for name in ["maxreg-sab-pma", "cluster-st-reduced"] {
        let mut cfg = presets::by_name(name).expect("preset");
        cfg.steps = 50;
        cfg.eval_every = 25;
        cfg.eval_datasets = 10;
        let first = checkpoint_bytes(&cfg)?;
        let second = checkpoint_bytes(&cfg)?;
        let same_run = first == second;

        let path = dir.path().join(format!("{name}.stfm"));
        std::fs::write(&path, &first)?;
        let loaded = load_checkpoint(&path)?;
        let again = dir.path().join(format!("{name}.again.stfm"));
        save_checkpoint(&again, &loaded.config, &loaded.model)?;
        let round_trip = std::fs::read(&again)? == first;

        pass &= same_run && round_trip;
        detail.push(format!(
            "{name}: retrain identical {} ({} bytes), save-load-save identical {}",
            same_run,
            first.len(),
            round_trip
        ));
    }
    Ok(Outcome {
        pass,
        detail: detail.join("; "),
    })
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "MISSED"
    }
}

type Criterion = (u32, &'static str, fn() -> Result<Outcome>);

fn main() -> ExitCode {
    let criteria: [Criterion; 6] = [
        (1, "max regression", max_regression),
        (2, "amortized clustering ordering", clustering),
        (3, "oracle likelihood", oracle),
        (4, "runtime scaling", complexity),
        (5, "property suite", properties),
        (6, "persistence", persistence),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut all = true;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        all &= pass;
        println!(
            "{} criterion {id} ({name}) [{:.0}s]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
