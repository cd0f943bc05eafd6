//! Experiment driver behind the `ferret` command line.

pub mod config;
pub mod output;
pub mod repro;
pub mod verify;

use crate::error::Result;
use crate::federation::{Federation, RoundRecord};
use config::ExperimentConfig;
use output::RunSummary;

/// Builds the federation an experiment file describes. Workers of a
/// socket run call this too, so it must be deterministic.
pub fn build_federation(cfg: &ExperimentConfig) -> Result<Federation> {
    let (train, test) = cfg.load_data()?;
    let mut fed = Federation::new(cfg.federation.clone(), cfg.model, &train, test)?;
    fed.set_record_timings(cfg.output.record_timings);
    Ok(fed)
}

pub fn summarize(fed: &Federation, records: &[RoundRecord]) -> RunSummary {
    RunSummary {
        root_seed: fed.config().root_seed.0,
        sampled_per_round: fed.config().sampled_per_round(),
        costs: fed.summary(records),
    }
}

/// Writes the metrics CSV and the JSON summary to the configured paths.
pub fn write_outputs(cfg: &ExperimentConfig, fed: &Federation, records: &[RoundRecord]) -> Result<()> {
    output::write_records_csv(&cfg.csv_path(), records)?;
    output::write_summary(&cfg.summary_path(), &summarize(fed, records))
}

/// In-process run of an experiment file, writing both outputs.
pub fn run_in_process(cfg: &ExperimentConfig) -> Result<Vec<RoundRecord>> {
    let mut fed = build_federation(cfg)?;
    let records = fed.run()?;
    write_outputs(cfg, &fed, &records)?;
    Ok(records)
}

/// The frozen PRNG, basis and wire constants, plus reference values a
/// second implementation can check itself against.
pub fn protocol_dump() -> String {
    use crate::data::{BINARY_MAGIC, BINARY_VERSION};
    use crate::federation::{LANE_BATCHES, LANE_CALIBRATION, LANE_PARTITION, LANE_PROJECTION, LANE_SAMPLING};
    use crate::rand_basis::*;
    use crate::special::ERF_INV_SERIES_LIMIT;
    use crate::wire::*;
    use std::fmt::Write;

    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(s, "{k:<28} {v}");
    };
    line("seed_derivation_version", SEED_DERIVATION_VERSION.to_string());
    line("golden_gamma", format!("{GOLDEN_GAMMA:#018x}"));
    line("mix_mul_1", format!("{MIX_MUL_1:#018x}"));
    line("mix_mul_2", format!("{MIX_MUL_2:#018x}"));
    line("derive_domain", format!("{DERIVE_DOMAIN:#018x}"));
    for (name, lane) in ["client", "round", "block", "basis"].iter().zip(DERIVE_LANES) {
        line(&format!("derive_lane_{name}"), format!("{lane:#018x}"));
    }
    line("rho_series_min_dim", RHO_SERIES_MIN_DIM.to_string());
    line("erf_inv_series_limit", ERF_INV_SERIES_LIMIT.to_string());
    for (name, lane) in [
        ("projection", LANE_PROJECTION),
        ("batches", LANE_BATCHES),
        ("sampling", LANE_SAMPLING),
        ("partition", LANE_PARTITION),
        ("calibration", LANE_CALIBRATION),
    ] {
        line(&format!("engine_lane_{name}"), lane.to_string());
    }
    for (name, tag) in [
        ("projected", TAG_PROJECTED),
        ("scalars", TAG_SCALARS),
        ("raw", TAG_RAW),
        ("client_update", TAG_CLIENT_UPDATE),
        ("hello", TAG_HELLO),
        ("round_task", TAG_ROUND_TASK),
        ("shutdown", TAG_SHUTDOWN),
        ("failure", TAG_FAILURE),
    ] {
        line(&format!("tag_{name}"), format!("{tag:#04x}"));
    }
    line("max_frame_bytes", MAX_FRAME.to_string());
    line("dataset_magic", String::from_utf8_lossy(&BINARY_MAGIC).into_owned());
    line("dataset_version", BINARY_VERSION.to_string());
    line("csv_header", output::CSV_HEADER.join(","));
    let seed = RandomSeed(42);
    line("check_subseed_42_0000", derive_subseed(seed, 0, 0, 0, 0).0.to_string());
    line("check_subseed_42_1200", derive_subseed(seed, 1, 2, 0, 0).0.to_string());
    line("check_stream_u64_1_0", stream_u64(1, 0).to_string());
    if let Ok(chunk) = sample_basis(seed, 0, 16, 0) {
        let bits: Vec<String> = chunk.values[..4].iter().map(|v| format!("{:#010x}", v.to_bits())).collect();
        line("check_basis_42_b0_d16_k0", bits.join(" "));
    }
    s
}
