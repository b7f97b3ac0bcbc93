//! Subcommand implementations and the exit-code contract.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use checkmate_core::costmodel::{
    self, cost_checkmate, flops_breakdown, iteration_flops, iteration_seconds, optimal_frequency,
    render_sweep_csv, run_sweep, savings_per_day, wasted_sota, CostParams, FlopsPreset,
    ModelFlopsConfig, SweepAxis, SweepSpec, SECONDS_PER_HOUR,
};
use checkmate_core::fabric::{run_socket_demo, SocketError, SocketReport};
use checkmate_core::world::{
    render_training_csv, FailurePlan, RecoveryReport, World, WorldError,
};

use crate::config::{Mode, RunConfig};

/// Error carrying its process exit code: 2 config, 3 runtime invariant,
/// 4 unrecoverable.
pub struct CliError {
    pub code: i32,
    pub err: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config_err(err: anyhow::Error) -> CliError {
    CliError { code: 2, err }
}

pub fn runtime_err(err: anyhow::Error) -> CliError {
    CliError { code: 3, err }
}

fn world_err(e: WorldError) -> CliError {
    let code = match &e {
        WorldError::Config(_) => 2,
        WorldError::Recovery(_) => 4,
        _ => 3,
    };
    CliError { code, err: e.into() }
}

fn socket_err(e: SocketError) -> CliError {
    let code = match &e {
        SocketError::Config(_) => 2,
        _ => 3,
    };
    CliError { code, err: e.into() }
}

fn write_out(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime_err)
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
        .map_err(config_err)
}

fn write_resolved_config(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let text = toml::to_string(cfg).map_err(|e| runtime_err(e.into()))?;
    write_out(&out.join("config.toml"), &text)
}

fn build_world(cfg: &RunConfig) -> CliResult<World> {
    let wcfg = cfg.to_world().map_err(|m| config_err(anyhow!(m)))?;
    // Construction does no training; anything it rejects is a config problem.
    World::new(wcfg).map_err(|e| CliError { code: 2, err: e.into() })
}

fn write_world_outputs(world: &World, out: &Path) -> CliResult<()> {
    for g in 0..world.config().groups {
        let csv = render_training_csv(world.training_log(g));
        write_out(&out.join(format!("training_group{g}.csv")), &csv)?;
    }

    let c = world.counters();
    let mut counters = String::from("counter,value\n");
    for (name, value) in [
        ("rx_data", c.rx_data),
        ("rx_tagged", c.rx_tagged),
        ("rx_credit", c.rx_credit),
        ("rx_ack", c.rx_ack),
        ("rx_ctrl", c.rx_ctrl),
        ("tx_data", c.tx_data),
        ("tx_shadow_copies", c.tx_shadow_copies),
        ("tx_credit", c.tx_credit),
        ("tx_ctrl", c.tx_ctrl),
        ("multicast_frames", c.multicast_frames),
    ] {
        counters.push_str(&format!("{name},{value}\n"));
    }
    counters.push_str(&format!("tx_rx_ratio,{}\n", c.tx_rx_ratio()));
    write_out(&out.join("fabric_counters.csv"), &counters)?;

    let mut shadow = String::from("group,shard,completed,params_crc32\n");
    for g in 0..world.config().groups {
        for r in world.replicas(g) {
            let crc = crc32fast::hash(&r.params().to_le_bytes());
            shadow.push_str(&format!("{g},{},{},{crc}\n", r.shard(), r.completed()));
        }
    }
    write_out(&out.join("shadow_state.csv"), &shadow)
}

fn write_socket_outputs(report: &SocketReport, out: &Path) -> CliResult<()> {
    let mut csv = String::from("iteration,loss\n");
    for (i, loss) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{loss}\n"));
    }
    write_out(&out.join("training_group0.csv"), &csv)?;

    let mut counters = String::from("counter,value\n");
    counters.push_str(&format!("switch_rx_frames,{}\n", report.switch_rx_frames));
    counters.push_str(&format!("switch_tx_frames,{}\n", report.switch_tx_frames));
    counters.push_str(&format!("acks_dropped,{}\n", report.acks_dropped));
    counters.push_str(&format!("shadow_drops,{}\n", report.shadow_drops));
    write_out(&out.join("socket_counters.csv"), &counters)
}

/// Run a scenario end to end and write training, shadow, and fabric logs.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    prepare_out(out)?;
    write_resolved_config(cfg, out)?;
    match cfg.mode {
        Mode::Det => {
            let mut world = build_world(cfg)?;
            let plan = cfg
                .failure_plan()
                .map(|(plan, _)| plan)
                .unwrap_or(FailurePlan::None);
            let reports = world.run(cfg.iterations, &plan).map_err(world_err)?;
            write_world_outputs(&world, out)?;
            if !reports.is_empty() {
                write_recovery_csv(&reports, out)?;
            }
            log::info!("fabric counters: {:?}", world.counters());
            println!(
                "run complete: {} iterations, {} group(s), {} recoveries; logs in {}",
                cfg.iterations,
                cfg.world.groups,
                reports.len(),
                out.display()
            );
        }
        Mode::Sockets => {
            let scfg = cfg.to_socket().map_err(|m| config_err(anyhow!(m)))?;
            let report = run_socket_demo(&scfg).map_err(socket_err)?;
            write_socket_outputs(&report, out)?;
            if let Some(d) = &report.shadow_divergence {
                return Err(runtime_err(anyhow!("shadow diverged: {d}")));
            }
            println!(
                "socket run complete: {} iterations over {} ranks, {} frames switched; logs in {}",
                report.iterations,
                report.world_size,
                report.switch_rx_frames,
                out.display()
            );
        }
    }
    Ok(())
}

/// Byte-compare trainer and shadow state after every iteration, or replay
/// a finished run directory against a fresh control run.
pub fn cmd_verify(
    cfg: Option<&RunConfig>,
    run_dir: Option<&Path>,
    corrupt: Option<&str>,
    out: &Path,
) -> CliResult<()> {
    match (cfg, run_dir) {
        (_, Some(dir)) => verify_run_dir(dir),
        (Some(cfg), None) => verify_live(cfg, corrupt, out),
        (None, None) => Err(config_err(anyhow!("verify needs a config or --run-dir"))),
    }
}

fn verify_live(cfg: &RunConfig, corrupt: Option<&str>, out: &Path) -> CliResult<()> {
    if cfg.mode == Mode::Sockets {
        return Err(config_err(anyhow!(
            "per-iteration verification requires the deterministic fabric"
        )));
    }
    let corrupt = corrupt.map(parse_corrupt).transpose()?;
    prepare_out(out)?;

    let mut live = cfg.clone();
    live.world.verify_each_iteration = false;
    let mut world = build_world(&live)?;
    if let Some((shard, byte)) = corrupt {
        let owned = world
            .replicas(0)
            .find(|r| r.shard() == shard)
            .map(|r| r.owned_layer_extents().iter().map(|(_, x)| x.len() as u64 * 4).sum());
        match owned {
            Some(owned) if byte < owned => {}
            Some(owned) => {
                return Err(config_err(anyhow!(
                    "corruption target {shard}:{byte} is past the shard's {owned} owned bytes"
                )))
            }
            None => {
                return Err(config_err(anyhow!(
                    "corruption target names shard {shard}, but only {} exist",
                    cfg.world.shard_count
                )))
            }
        }
    }

    let mut log = String::from("iteration,status,detail\n");
    let mut divergence = None;
    for i in 0..cfg.iterations {
        world.step().map_err(world_err)?;
        if i == 0 {
            if let Some((shard, byte)) = corrupt {
                flip_shadow_byte(&mut world, shard, byte)?;
                log::info!("flipped shadow shard {shard} param byte {byte}");
            }
        }
        match world.verify() {
            Ok(()) => log.push_str(&format!("{i},identical,\n")),
            Err(WorldError::Divergence { detail, .. }) => {
                log.push_str(&format!("{i},diverged,{detail}\n"));
                divergence = Some((i, detail));
                break;
            }
            Err(e) => return Err(world_err(e)),
        }
    }
    write_out(&out.join("verify_log.csv"), &log)?;

    match divergence {
        None => {
            println!("identical for all iterations");
            Ok(())
        }
        Some((i, detail)) => {
            println!("diverged at iteration {i}: {detail}");
            Err(runtime_err(anyhow!("trainer and shadow state diverged")))
        }
    }
}

fn parse_corrupt(spec: &str) -> CliResult<(u8, u64)> {
    let parse = || {
        let (shard, byte) = spec.split_once(':')?;
        Some((shard.parse().ok()?, byte.parse().ok()?))
    };
    parse().ok_or_else(|| config_err(anyhow!("--corrupt wants SHARD:BYTE, got {spec:?}")))
}

/// Flip bit 0 of the shard's `byte`-th owned parameter byte. The offset
/// walks the shard's owned extents, so the flip always lands in a region
/// the verifier compares.
fn flip_shadow_byte(world: &mut World, shard: u8, byte: u64) -> CliResult<()> {
    let replica = world.replica_mut(0, shard).map_err(world_err)?;
    let mut remaining = byte;
    for (_, range) in replica.owned_layer_extents() {
        let len = range.len() as u64 * 4;
        if remaining < len {
            let elem = range.start + (remaining / 4) as usize;
            let bit = (remaining % 4) * 8;
            let params = replica.params_mut().as_mut_slice();
            params[elem] = f32::from_bits(params[elem].to_bits() ^ (1 << bit));
            return Ok(());
        }
        remaining -= len;
    }
    Err(config_err(anyhow!("owned byte {byte} is out of range for shard {shard}")))
}

fn verify_run_dir(dir: &Path) -> CliResult<()> {
    let config_path = dir.join("config.toml");
    let text = fs::read_to_string(&config_path)
        .with_context(|| format!("missing artifacts: {}", config_path.display()))
        .map_err(config_err)?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| config_err(e.into()))?;
    cfg.failures = None;

    let controls: Vec<(PathBuf, String)> = match cfg.mode {
        Mode::Det => {
            let mut world = build_world(&cfg)?;
            world.run(cfg.iterations, &FailurePlan::None).map_err(world_err)?;
            (0..cfg.world.groups)
                .map(|g| {
                    let name = format!("training_group{g}.csv");
                    (dir.join(name), render_training_csv(world.training_log(g)))
                })
                .collect()
        }
        Mode::Sockets => {
            let scfg = cfg.to_socket().map_err(|m| config_err(anyhow!(m)))?;
            let report = run_socket_demo(&scfg).map_err(socket_err)?;
            let mut csv = String::from("iteration,loss\n");
            for (i, loss) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{loss}\n"));
            }
            vec![(dir.join("training_group0.csv"), csv)]
        }
    };

    for (path, control) in &controls {
        let stored = fs::read_to_string(path)
            .with_context(|| format!("missing artifacts: {}", path.display()))
            .map_err(config_err)?;
        if &stored != control {
            let line = stored
                .lines()
                .zip(control.lines())
                .position(|(a, b)| a != b)
                .map(|n| n + 1)
                .unwrap_or_else(|| stored.lines().count().min(control.lines().count()) + 1);
            println!("{} diverges from the control run at line {line}", path.display());
            return Err(runtime_err(anyhow!("stored training log differs from control")));
        }
    }
    println!("identical: stored training logs match a fresh control run");
    Ok(())
}

fn write_recovery_csv(reports: &[RecoveryReport], out: &Path) -> CliResult<()> {
    let mut csv =
        String::from("at_iteration,resumed_at,interrupted,killed,purged_frames,fetched_shards\n");
    for r in reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.at_iteration,
            r.resumed_at,
            r.interrupted,
            r.killed.len(),
            r.purged_frames,
            r.fetched_shards
        ));
    }
    write_out(&out.join("recovery.csv"), &csv)
}

/// Inject the configured failures, then prove the recovered run ends in
/// the same state as an uninterrupted control run.
pub fn cmd_inject(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    if cfg.mode == Mode::Sockets {
        return Err(config_err(anyhow!("failure injection requires the deterministic fabric")));
    }
    let (plan, ranks) = cfg
        .failure_plan()
        .ok_or_else(|| config_err(anyhow!("inject needs a [failures] schedule")))?;
    prepare_out(out)?;
    write_resolved_config(cfg, out)?;

    let mut world = build_world(cfg)?;
    let reports = if ranks.is_empty() {
        world.run(cfg.iterations, &plan).map_err(world_err)?
    } else {
        let mut reports = Vec::new();
        let mut consumed = BTreeSet::new();
        while world.iteration() < cfg.iterations {
            let i = world.iteration();
            if plan.triggers(i) && consumed.insert(i) {
                reports.push(world.interrupt_and_recover(&ranks).map_err(world_err)?);
            } else {
                world.step().map_err(world_err)?;
            }
        }
        reports
    };

    let mut control_cfg = cfg.clone();
    control_cfg.failures = None;
    let mut control = build_world(&control_cfg)?;
    control.run(cfg.iterations, &FailurePlan::None).map_err(world_err)?;

    write_world_outputs(&world, out)?;
    write_recovery_csv(&reports, out)?;

    for g in 0..cfg.world.groups {
        if world.state_digest(g) != control.state_digest(g) {
            return Err(runtime_err(anyhow!(
                "group {g}: post-recovery state diverges from the control run"
            )));
        }
        if render_training_csv(world.training_log(g))
            != render_training_csv(control.training_log(g))
        {
            return Err(runtime_err(anyhow!(
                "group {g}: training log diverges from the control run"
            )));
        }
    }

    let interrupted = reports.iter().filter(|r| r.interrupted).count();
    for r in &reports {
        log::info!(
            "cut iteration {}, resumed at {}, {} shards fetched",
            r.at_iteration,
            r.resumed_at,
            r.fetched_shards
        );
    }
    println!(
        "injected {} cuts ({} recoveries); post-recovery state equals the control run; logs in {}",
        reports.len(),
        interrupted,
        out.display()
    );
    Ok(())
}

fn cost_err(e: costmodel::CostError) -> CliError {
    config_err(e.into())
}

/// Cost parameters as a TOML file, with times in seconds.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    failure_rate: f64,
    gpus: f64,
    duration_hours: f64,
    iteration_seconds: f64,
    stall_seconds: f64,
    #[serde(default)]
    cpu_nodes: f64,
    #[serde(default)]
    gpu_price: f64,
    #[serde(default)]
    cpu_price: f64,
    #[serde(default = "one")]
    frequency: f64,
}

fn one() -> f64 {
    1.0
}

impl CostFile {
    fn params(&self) -> CostParams {
        CostParams {
            failure_rate: self.failure_rate,
            gpus: self.gpus,
            duration_hours: self.duration_hours,
            iteration_hours: 0.0,
            stall_hours: 0.0,
            cpu_nodes: self.cpu_nodes,
            gpu_price: self.gpu_price,
            cpu_price: self.cpu_price,
            frequency: self.frequency,
        }
        .iteration_seconds(self.iteration_seconds)
        .stall_seconds(self.stall_seconds)
    }
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(config_err)
}

fn named_source(
    preset: Option<&str>,
    config: Option<&Path>,
    what: &str,
    available: &[&str],
) -> CliResult<(String, Option<PathBuf>)> {
    match (preset, config) {
        (Some(p), None) => Ok((p.to_string(), None)),
        (None, Some(path)) => {
            let name = path.file_stem().map_or("custom".into(), |s| s.to_string_lossy().into());
            Ok((name, Some(path.to_path_buf())))
        }
        (Some(_), Some(_)) => {
            Err(config_err(anyhow!("{what}: choose either --preset or --config")))
        }
        (None, None) => Err(config_err(anyhow!(
            "{what} needs --preset or --config; presets: {}",
            available.join(", ")
        ))),
    }
}

/// Evaluate the wasted-GPU-time model for one parameter set.
pub fn cmd_cost(preset: Option<&str>, config: Option<&Path>, out: &Path) -> CliResult<()> {
    let (name, file) = named_source(preset, config, "cost", costmodel::COST_PRESETS)?;
    let params = match file {
        Some(path) => load_toml::<CostFile>(&path)?.params(),
        None => costmodel::cost_preset(&name).ok_or_else(|| {
            config_err(anyhow!(
                "unknown cost preset {name:?}; available: {}",
                costmodel::COST_PRESETS.join(", ")
            ))
        })?,
    };

    let wasted = wasted_sota(&params).map_err(cost_err)?;
    let best = optimal_frequency(&params).map_err(cost_err)?;
    let ck = cost_checkmate(&params);
    let savings = savings_per_day(&params).map_err(cost_err)?;
    let f_star = best.frequency.every().map_or("never".to_string(), |f| f.to_string());
    let dollars_sota = params.gpu_price * wasted;

    let header = "name,failure_rate,gpus,duration_h,iteration_s,stall_s,frequency,\
                  wasted_gpu_h,f_star,wasted_at_fstar_gpu_h,checkmate_gpu_h,cpu_node_h,\
                  savings_gpu_h_per_day,dollars_sota,dollars_checkmate";
    let row = format!(
        "{name},{},{},{},{},{},{},{wasted},{f_star},{},{},{},{savings},{dollars_sota},{}",
        params.failure_rate,
        params.gpus,
        params.duration_hours,
        params.iteration_hours * SECONDS_PER_HOUR,
        params.stall_hours * SECONDS_PER_HOUR,
        params.frequency,
        best.wasted_gpu_hours,
        ck.gpu_waste_hours,
        ck.cpu_node_hours,
        ck.dollars
    );
    prepare_out(out)?;
    write_out(&out.join("cost.csv"), &format!("{header}\n{row}\n"))?;
    println!("{header}");
    println!("{row}");
    Ok(())
}

/// Sweep specification as a TOML file.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    /// frequency | overhead | failure_rate | cluster_size
    axis: String,
    grid: Vec<f64>,
    base: CostFile,
}

/// Sweep one cost-model axis and write the curve as CSV.
pub fn cmd_sweep(preset: Option<&str>, config: Option<&Path>, out: &Path) -> CliResult<()> {
    let (name, file) = named_source(preset, config, "sweep", costmodel::SWEEP_PRESETS)?;
    let spec = match file {
        Some(path) => {
            let f: SweepFile = load_toml(&path)?;
            SweepSpec {
                axis: SweepAxis::parse(&f.axis).map_err(cost_err)?,
                grid: f.grid,
                base: f.base.params(),
            }
        }
        None => costmodel::sweep_preset(&name).ok_or_else(|| {
            config_err(anyhow!(
                "unknown sweep preset {name:?}; available: {}",
                costmodel::SWEEP_PRESETS.join(", ")
            ))
        })?,
    };

    let rows = run_sweep(&spec).map_err(cost_err)?;
    let csv = render_sweep_csv(&rows);
    prepare_out(out)?;
    let path = out.join("sweep.csv");
    write_out(&path, &csv)?;
    print!("{csv}");
    println!("wrote {} rows ({} axis) to {}", rows.len(), spec.axis, path.display());
    Ok(())
}

/// Model shape plus machine rates, as a TOML file.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FlopsFile {
    batch: u64,
    seq_len: u64,
    layers: u64,
    hidden: u64,
    ffn_dim: u64,
    vocab: u64,
    query_heads: u64,
    kv_groups: u64,
    flops_per_gpu: f64,
    gpus: u64,
    param_count: u64,
    storage_bytes_per_second: f64,
}

impl FlopsFile {
    fn preset(&self, name: &str) -> FlopsPreset {
        FlopsPreset {
            name: name.to_string().leak(),
            model: ModelFlopsConfig {
                batch: self.batch,
                seq_len: self.seq_len,
                layers: self.layers,
                hidden: self.hidden,
                ffn_dim: self.ffn_dim,
                vocab: self.vocab,
                query_heads: self.query_heads,
                kv_groups: self.kv_groups,
            },
            flops_per_gpu: self.flops_per_gpu,
            gpus: self.gpus,
            param_count: self.param_count,
            storage_bytes_per_second: self.storage_bytes_per_second,
        }
    }
}

/// Print the FLOPs breakdown and derived iteration/checkpoint times.
pub fn cmd_flops(preset: Option<&str>, config: Option<&Path>, out: &Path) -> CliResult<()> {
    let (name, file) = named_source(preset, config, "flops", costmodel::FLOPS_PRESETS)?;
    let p = match file {
        Some(path) => load_toml::<FlopsFile>(&path)?.preset(&name),
        None => costmodel::flops_preset(&name).ok_or_else(|| {
            config_err(anyhow!(
                "unknown flops preset {name:?}; available: {}",
                costmodel::FLOPS_PRESETS.join(", ")
            ))
        })?,
    };

    p.model.validate().map_err(cost_err)?;
    let b = flops_breakdown(&p.model);
    let iteration = iteration_flops(&p.model);
    let time = iteration_seconds(b.forward, p.flops_per_gpu, p.gpus as f64).map_err(cost_err)?;
    let bytes = costmodel::checkpoint_bytes(p.param_count, 2, 4);
    let stall = costmodel::checkpoint_seconds(bytes, p.storage_bytes_per_second).map_err(cost_err)?;

    let mut csv = String::from("metric,value\n");
    for (metric, value) in [
        ("qkv_flops_per_layer", b.qkv),
        ("attn_flops_per_layer", b.attn),
        ("attn_out_flops_per_layer", b.attn_out),
        ("ffn_flops_per_layer", b.ffn),
        ("rope_flops_per_layer", b.rope),
        ("per_layer_flops", b.per_layer),
        ("vocab_flops", b.vocab),
        ("forward_flops", b.forward),
        ("iteration_flops", iteration),
        ("iteration_time_s", time),
        ("checkpoint_bytes", bytes as f64),
        ("checkpoint_stall_s", stall),
    ] {
        csv.push_str(&format!("{metric},{value}\n"));
    }
    prepare_out(out)?;
    write_out(&out.join("flops.csv"), &csv)?;
    print!("{csv}");
    println!("model {}: {} tokens per batch", name, p.model.tokens_per_batch());
    Ok(())
}
