//! Acceptance battery. Prints one PASS/FAIL line per criterion and fails
//! if any criterion fails. Thresholds are pinned here, independent of the
//! defaults `ferret verify` uses.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ferret_core::bench::verify::{
    accounting, allocation, block_speedup, convergence, drift, error_bound_trials, reconstruction_vs_k,
    rho_rate, unbiasedness, zo_connection, ConvergenceSetup,
};
use ferret_core::federation::Method;
use ferret_core::rand_basis::RandomSeed;

const SEED: RandomSeed = RandomSeed(7);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn unbiased() -> Outcome {
    let started = Instant::now();
    let err = unbiasedness(256, 16, 20_000, SEED).unwrap();
    let secs = started.elapsed().as_secs_f64();
    outcome(
        err <= 0.02 && secs < 60.0,
        format!("|mean - delta|/|delta| = {err:.5} (<= 0.02), {secs:.1}s (< 60s)"),
    )
}

fn error_bound() -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for (d, k) in [(1024, 32), (4096, 64), (16384, 128)] {
        let s = error_bound_trials(d, k, 200, SEED).unwrap();
        ok &= s.violations == 0 && s.mean_error <= s.bound;
        parts.push(format!(
            "d={d} K={k}: mean {:.3} <= {:.1}, {} violations",
            s.mean_error, s.bound, s.violations
        ));
    }
    outcome(ok, parts.join("; "))
}

fn zo_link() -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for eps in [0.1, 0.01] {
        let s = zo_connection(512, 32, eps, 1.0, 100, SEED).unwrap();
        ok &= s.violations == 0 && s.draws == 100;
        parts.push(format!(
            "eps={eps}: {}/100 within beta*eps/2 (max gap {:.2e})",
            s.draws - s.violations,
            s.max_gap
        ));
    }
    outcome(ok, parts.join("; "))
}

fn rho() -> Outcome {
    let s = rho_rate(&[100, 1_000, 10_000, 100_000, 1_000_000]).unwrap();
    let rel = (s.rho_d_at_max - 1.0 / 3.0).abs() * 3.0;
    outcome(
        (s.slope - 1.0).abs() <= 0.05 && rel <= 1e-3,
        format!("slope {:.5} (1 +- 0.05), rho*d at 1e6 off 1/3 by {rel:.2e} (<= 1e-3)", s.slope),
    )
}

fn recon_vs_k() -> Outcome {
    let started = Instant::now();
    let rows = reconstruction_vs_k(10_000, &[64, 128, 256, 512], &[0.1], 20, SEED).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let monotone = rows.windows(2).all(|w| w[1].ferret >= w[0].ferret);
    let beats_zo = rows.iter().all(|r| r.ferret >= r.zo[0]);
    let series: Vec<String> = rows
        .iter()
        .map(|r| format!("K={} {:.5}/{:.5}", r.x, r.ferret, r.zo[0]))
        .collect();
    outcome(
        monotone && beats_zo && secs < 300.0,
        format!("ferret/zo cosine {}; {secs:.1}s (< 300s)", series.join(", ")),
    )
}

fn drift_immunity() -> Outcome {
    let rows = drift(50_000, 500, 50, 0.1, 0.1, SEED).unwrap();
    let f: Vec<f64> = rows.iter().map(|r| r.ferret).collect();
    let spread = f.iter().copied().fold(f64::MIN, f64::max) - f.iter().copied().fold(f64::MAX, f64::min);
    let last = rows.last().unwrap();
    outcome(
        spread < 0.02 && last.zo[0] < last.ferret,
        format!(
            "ferret spread {spread:.4} (< 0.02); T=50 zo {:.4} < ferret {:.4}",
            last.zo[0], last.ferret
        ),
    )
}

fn block() -> Outcome {
    let (d, k, l) = (1usize << 20, 256usize, 16usize);
    let s = block_speedup(d, k, l, SEED).unwrap();
    let expected = (d * k / l) as u64;
    let dcos = (s.cosine_single - s.cosine_blocked).abs();
    outcome(
        s.cost_blocked == expected && s.speedup >= 4.0 && dcos <= 0.02,
        format!(
            "multiplies {} (= dK/L {expected}); speedup {:.1}x (>= 4x); cosine {:.4} vs {:.4}",
            s.cost_blocked, s.speedup, s.cosine_single, s.cosine_blocked
        ),
    )
}

fn alloc() -> Outcome {
    let s = allocation(&[256; 4], &[10.0, 1.0, 1.0, 1.0], 64, 100, SEED).unwrap();
    outcome(
        s.norm_sqrt_error <= s.uniform_error,
        format!(
            "norm-sqrt {:?} error {:.4} <= uniform {:?} error {:.4}",
            s.norm_sqrt_budgets, s.norm_sqrt_error, s.uniform_budgets, s.uniform_error
        ),
    )
}

fn converge() -> Outcome {
    let started = Instant::now();
    let setup = ConvergenceSetup {
        seed: SEED,
        ..ConvergenceSetup::default()
    };
    assert_eq!((setup.clients, setup.local_iters, setup.rounds), (8, 10, 20));
    assert_eq!(setup.budget * 4, setup.dim());
    let s = convergence(&setup).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let more = match (s.ferret_rounds, s.fedkseed_rounds) {
        (Some(a), Some(b)) => b > a,
        (Some(_), None) => true,
        _ => false,
    };
    outcome(
        (s.final_ratio - 1.0).abs() <= 0.1 && more && secs < 600.0,
        format!(
            "ferret/fedavg final loss {:.4} (within 10%); rounds to fedavg r10 loss: ferret {:?}, fedkseed {:?}; {secs:.1}s",
            s.final_ratio, s.ferret_rounds, s.fedkseed_rounds
        ),
    )
}

fn comm() -> Outcome {
    let (d, k) = (1_000_000u64, 4096u64);
    let s = accounting(d, k, 8, 5);
    let get = |m: Method| s.iter().find(|c| c.method == m).unwrap();
    let avg = get(Method::Fedavg);
    let want = (k + 1) as f64 / d as f64;
    let ferret = get(Method::Ferret).upload_ratio(avg);
    let kseed = get(Method::Fedkseed).upload_ratio(avg);
    let fedzo = get(Method::Fedzo).upload_ratio(avg);
    let exact = get(Method::Ferret).total_upload * d == avg.total_upload * (k + 1);
    outcome(
        ferret == want && kseed == ferret && fedzo == 1.0 && exact,
        format!("ferret/fedavg {ferret:e} (= {want:e}); fedkseed {kseed:e}; fedzo/fedavg {fedzo}"),
    )
}

const DETERMINISM_CONFIG: &str = r#"
[federation]
method = "ferret"
num_clients = 6
rounds = 4
local_iters = 3
total_bases = 24
local_lr = 0.1
participation = 0.5
partition = { kind = "label-skew", alpha = 0.5 }
allocation = "norm-sqrt"
root_seed = 11
batch_size = 8

[model]
kind = "mlp"
input_dim = 6
hidden_dim = 8
output_dim = 3
init_seed = 5

[data]
source = "synthetic-classification"
examples = 600
classes = 3
seed = 2
test_examples = 100
"#;

fn run_cli(cfg: &Path, out: &Path, workers: usize) -> (Vec<u8>, Vec<u8>) {
    let status = Command::new(env!("CARGO_BIN_EXE_ferret"))
        .args(["run", "--workers", &workers.to_string()])
        .arg(cfg)
        .env("FERRET_OUTPUT_DIR", out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    (
        std::fs::read(out.join("metrics.csv")).unwrap(),
        std::fs::read(out.join("summary.json")).unwrap(),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, DETERMINISM_CONFIG).unwrap();
    let a = run_cli(&cfg, &dir.path().join("a"), 0);
    let b = run_cli(&cfg, &dir.path().join("b"), 0);
    let sock = run_cli(&cfg, &dir.path().join("sock"), 3);
    let rows = a.0.iter().filter(|&&c| c == b'\n').count() - 1;
    outcome(
        a == b && a == sock && rows == 4,
        format!(
            "rerun identical: {}; 3-worker socket run identical: {}; {rows} rounds",
            a == b,
            a == sock
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("unbiasedness", unbiased),
        ("error bound", error_bound),
        ("zo connection", zo_link),
        ("rho rate", rho),
        ("reconstruction vs K", recon_vs_k),
        ("drift immunity", drift_immunity),
        ("block speedup", block),
        ("allocation", alloc),
        ("convergence", converge),
        ("communication accounting", comm),
        ("determinism and wire fidelity", determinism),
    ];
    let mut failed = vec![];
    let total = Instant::now();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!(
            "criterion {:>2} {:<30} {}  {}",
            i + 1,
            name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.passed {
            failed.push(format!("{} ({name})", i + 1));
        }
    }
    println!("acceptance total {:.1?}", Duration::from_secs_f64(total.elapsed().as_secs_f64()));
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
