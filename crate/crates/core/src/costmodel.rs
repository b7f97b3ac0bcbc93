//! Closed-form cost models: transformer FLOPs per iteration, checkpoint
//! size and stall, expected GPU-hours wasted by stop-the-world fallback
//! checkpointing, and what per-iteration network checkpointing saves.
//!
//! Times enter in natural units (seconds) and are carried in hours; waste
//! and savings come out in GPU-hours. Arithmetic is f64 throughout: the
//! largest quantities (~1e19 FLOPs) exceed exact integer range, so results
//! carry ~1e-16 relative error, far below every stated tolerance.

use thiserror::Error;

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Transformer shape for the FLOPs estimate (grouped-query attention).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFlopsConfig {
    /// Batch size in sequences.
    pub batch: u64,
    /// Sequence length in tokens.
    pub seq_len: u64,
    /// Transformer layer count.
    pub layers: u64,
    /// Hidden dimension.
    pub hidden: u64,
    /// Feed-forward dimension.
    pub ffn_dim: u64,
    /// Vocabulary size.
    pub vocab: u64,
    /// Query heads.
    pub query_heads: u64,
    /// Key/value groups.
    pub kv_groups: u64,
}

impl ModelFlopsConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        let dims = [
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("query_heads", self.query_heads),
            ("kv_groups", self.kv_groups),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(CostError::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn tokens_per_batch(&self) -> u64 {
        self.batch * self.seq_len
    }
}

/// Forward-pass FLOPs split by component; `forward` is their total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsBreakdown {
    /// Q, K, V projections: 2(bsh² + 2bsh·ga) per layer.
    pub qkv: f64,
    /// Dot-product attention and the multiply with V: 4bs²h per layer.
    pub attn: f64,
    /// Attention output projection: 2bsh·ga per layer.
    pub attn_out: f64,
    /// Two feed-forward transformations: 4bshf per layer.
    pub ffn: f64,
    /// Rotary positional embedding: 2bsh per layer.
    pub rope: f64,
    /// Sum of the five per-layer terms.
    pub per_layer: f64,
    /// Vocabulary projection in and out: 4bshv, once per pass.
    pub vocab: f64,
    /// per_layer x layers + vocab.
    pub forward: f64,
}

/// Forward-pass FLOPs by component for one batch.
pub fn flops_breakdown(cfg: &ModelFlopsConfig) -> FlopsBreakdown {
    let b = cfg.batch as f64;
    let s = cfg.seq_len as f64;
    let h = cfg.hidden as f64;
    let f = cfg.ffn_dim as f64;
    let v = cfg.vocab as f64;
    let ga = (cfg.kv_groups * cfg.query_heads) as f64;

    let qkv = 2.0 * (b * s * h * h + 2.0 * b * s * h * ga);
    let attn = 4.0 * b * s * s * h;
    let attn_out = 2.0 * b * s * h * ga;
    let ffn = 4.0 * b * s * h * f;
    let rope = 2.0 * b * s * h;
    let per_layer = qkv + attn + attn_out + ffn + rope;
    let vocab = 4.0 * b * s * h * v;
    FlopsBreakdown {
        qkv,
        attn,
        attn_out,
        ffn,
        rope,
        per_layer,
        vocab,
        forward: per_layer * cfg.layers as f64 + vocab,
    }
}

/// Forward-pass FLOPs for one batch.
pub fn flops_forward(cfg: &ModelFlopsConfig) -> f64 {
    flops_breakdown(cfg).forward
}

/// FLOPs for one training iteration: three forward passes' worth, since the
/// backward pass computes activation and weight gradients at the same cost
/// each (no activation recomputation).
pub fn iteration_flops(cfg: &ModelFlopsConfig) -> f64 {
    3.0 * flops_forward(cfg)
}

/// Iteration wall time: 3 x forward / (achieved rate x GPU count).
pub fn iteration_seconds(
    forward_flops: f64,
    flops_per_gpu: f64,
    gpus: f64,
) -> Result<f64, CostError> {
    if flops_per_gpu <= 0.0 || gpus <= 0.0 {
        return Err(CostError::Invalid("compute rate and GPU count must be positive".into()));
    }
    Ok(3.0 * forward_flops / (flops_per_gpu * gpus))
}

/// Full checkpoint size: every parameter plus its optimizer state.
pub fn checkpoint_bytes(param_count: u64, bytes_per_param: u64, bytes_per_opt_state: u64) -> u64 {
    param_count * (bytes_per_param + bytes_per_opt_state)
}

/// Stop-the-world checkpoint stall at a given storage throughput.
pub fn checkpoint_seconds(bytes: u64, bytes_per_second: f64) -> Result<f64, CostError> {
    if bytes_per_second <= 0.0 {
        return Err(CostError::Invalid("storage throughput must be positive".into()));
    }
    Ok(bytes as f64 / bytes_per_second)
}

/// Cluster and schedule parameters for the waste model. Times are stored in
/// hours; use the seconds-based builders for natural input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    /// Failures per GPU-hour.
    pub failure_rate: f64,
    /// GPUs in the cluster.
    pub gpus: f64,
    /// Training duration in hours, failure-free.
    pub duration_hours: f64,
    /// Iteration time in hours.
    pub iteration_hours: f64,
    /// Stall per stop-the-world checkpoint, in hours.
    pub stall_hours: f64,
    /// CPU nodes maintaining the live checkpoint.
    pub cpu_nodes: f64,
    /// Dollars per GPU-hour.
    pub gpu_price: f64,
    /// Dollars per CPU-node-hour.
    pub cpu_price: f64,
    /// Iterations between stop-the-world checkpoints (at least 1).
    pub frequency: f64,
}

impl CostParams {
    pub fn iteration_seconds(mut self, s: f64) -> Self {
        self.iteration_hours = s / SECONDS_PER_HOUR;
        self
    }

    pub fn stall_seconds(mut self, s: f64) -> Self {
        self.stall_hours = s / SECONDS_PER_HOUR;
        self
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.failure_rate >= 0.0) {
            return Err(CostError::Invalid("failure rate must be non-negative".into()));
        }
        if !(self.gpus > 0.0) {
            return Err(CostError::Invalid("GPU count must be positive".into()));
        }
        if !(self.duration_hours >= 0.0) {
            return Err(CostError::Invalid("duration must be non-negative".into()));
        }
        if !(self.iteration_hours > 0.0) {
            return Err(CostError::Invalid("iteration time must be positive".into()));
        }
        if !(self.stall_hours >= 0.0) {
            return Err(CostError::Invalid("checkpoint stall must be non-negative".into()));
        }
        if !(self.cpu_nodes >= 0.0) {
            return Err(CostError::Invalid("CPU node count must be non-negative".into()));
        }
        if !(self.frequency >= 1.0) {
            return Err(CostError::Invalid(format!(
                "checkpoint frequency {} below one iteration",
                self.frequency
            )));
        }
        Ok(())
    }
}

/// Expected GPU-hours wasted by checkpoint-every-f-iterations fallback
/// systems: ND(half lambda N f t + omega/(f t)) — repeated work after
/// failures plus checkpoint stalls.
pub fn wasted_sota(p: &CostParams) -> Result<f64, CostError> {
    p.validate()?;
    let ft = p.frequency * p.iteration_hours;
    Ok(p.gpus
        * p.duration_hours
        * (0.5 * p.failure_rate * p.gpus * ft + p.stall_hours / ft))
}

/// Checkpoint cadence minimizing the fallback waste.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimalFrequency {
    /// sqrt(2 omega / (lambda N t^2)), clamped up to one whole iteration.
    Every(f64),
    /// Nothing ever fails, so the optimum is to never checkpoint.
    Never,
}

impl OptimalFrequency {
    /// Numeric cadence, if one exists.
    pub fn every(&self) -> Option<f64> {
        match self {
            OptimalFrequency::Every(f) => Some(*f),
            OptimalFrequency::Never => None,
        }
    }
}

impl std::fmt::Display for OptimalFrequency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimalFrequency::Every(v) => write!(f, "{v}"),
            OptimalFrequency::Never => write!(f, "never"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimum {
    pub frequency: OptimalFrequency,
    /// Fallback waste at that cadence, GPU-hours.
    pub wasted_gpu_hours: f64,
}

/// The cadence minimizing `wasted_sota`, with the waste it achieves.
///
/// Unclamped, the waste has the closed form ND sqrt(2 omega lambda N); at
/// the clamp it is the f=1 evaluation. With a zero failure rate the waste
/// vanishes as the cadence grows, so the optimum is to never checkpoint.
pub fn optimal_frequency(p: &CostParams) -> Result<Optimum, CostError> {
    CostParams { frequency: 1.0, ..*p }.validate()?;
    if p.failure_rate == 0.0 {
        return Ok(Optimum { frequency: OptimalFrequency::Never, wasted_gpu_hours: 0.0 });
    }
    let nd = p.gpus * p.duration_hours;
    let raw =
        (2.0 * p.stall_hours / (p.failure_rate * p.gpus * p.iteration_hours.powi(2))).sqrt();
    if raw >= 1.0 {
        let wasted = nd * (2.0 * p.stall_hours * p.failure_rate * p.gpus).sqrt();
        Ok(Optimum { frequency: OptimalFrequency::Every(raw), wasted_gpu_hours: wasted })
    } else {
        let wasted = nd
            * (0.5 * p.failure_rate * p.gpus * p.iteration_hours
                + p.stall_hours / p.iteration_hours);
        Ok(Optimum { frequency: OptimalFrequency::Every(1.0), wasted_gpu_hours: wasted })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckmateCost {
    /// Half an iteration of repeated work per failure: half lambda N^2 D t.
    pub gpu_waste_hours: f64,
    /// CPU-node hours keeping the live checkpoint: D x C.
    pub cpu_node_hours: f64,
    /// Priced waste plus priced CPU time.
    pub dollars: f64,
}

/// Cost of running with per-iteration network checkpointing.
pub fn cost_checkmate(p: &CostParams) -> CheckmateCost {
    let gpu_waste_hours =
        0.5 * p.failure_rate * p.gpus * p.gpus * p.duration_hours * p.iteration_hours;
    let cpu_node_hours = p.duration_hours * p.cpu_nodes;
    CheckmateCost {
        gpu_waste_hours,
        cpu_node_hours,
        dollars: p.gpu_price * gpu_waste_hours + p.cpu_price * cpu_node_hours,
    }
}

/// GPU-hours per day saved over the fallback running at its own optimal
/// cadence: both sides evaluated at D = 24 h.
pub fn savings_per_day(p: &CostParams) -> Result<f64, CostError> {
    let day = CostParams { duration_hours: 24.0, ..*p };
    let sota = optimal_frequency(&day)?.wasted_gpu_hours;
    Ok(sota - cost_checkmate(&day).gpu_waste_hours)
}

/// Cadence grid 1, 2, 4, ..., 2^max_exp.
pub fn power_of_two_grid(max_exp: u32) -> Vec<f64> {
    (0..=max_exp).map(|e| (1u64 << e) as f64).collect()
}

/// Grid cadence with the least fallback waste (first on ties).
pub fn grid_argmin(p: &CostParams, grid: &[f64]) -> Result<(f64, f64), CostError> {
    if grid.is_empty() {
        return Err(CostError::Invalid("empty frequency grid".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for &f in grid {
        let wasted = wasted_sota(&CostParams { frequency: f, ..*p })?;
        if best.is_none_or(|(_, w)| wasted < w) {
            best = Some((f, wasted));
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// What a sweep varies, one grid point per output row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Checkpoint cadence in iterations; waste is evaluated at the point.
    Frequency,
    /// Per-checkpoint stall in seconds; waste is evaluated at the optimum.
    Overhead,
    /// Failures per GPU-hour; waste at the optimum.
    FailureRate,
    /// Cluster size in GPUs; waste at the optimum.
    ClusterSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, CostError> {
        match s {
            "frequency" => Ok(SweepAxis::Frequency),
            "overhead" => Ok(SweepAxis::Overhead),
            "failure_rate" => Ok(SweepAxis::FailureRate),
            "cluster_size" => Ok(SweepAxis::ClusterSize),
            other => Err(CostError::Invalid(format!(
                "unknown sweep axis {other:?}; expected frequency, overhead, failure_rate, \
                 or cluster_size"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Frequency => "frequency",
            SweepAxis::Overhead => "overhead",
            SweepAxis::FailureRate => "failure_rate",
            SweepAxis::ClusterSize => "cluster_size",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Grid values in the axis's natural unit; strictly increasing.
    pub grid: Vec<f64>,
    pub base: CostParams,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.grid.is_empty() {
            return Err(CostError::Invalid("sweep grid is empty".into()));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CostError::Invalid("sweep grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    /// Cadence the wasted column is evaluated at.
    pub frequency: OptimalFrequency,
    pub f_star: OptimalFrequency,
    pub wasted_sota_gpu_h: f64,
    pub checkmate_gpu_h: f64,
    pub cpu_node_h: f64,
    pub savings_gpu_h_per_day: f64,
    pub dollars_sota: f64,
    pub dollars_checkmate: f64,
}

pub const SWEEP_CSV_HEADER: &str = "axis_value,f,f_star,wasted_sota_gpu_h,checkmate_gpu_h,\
cpu_node_h,savings_gpu_h_per_day,dollars_sota,dollars_checkmate";

/// Evaluate every grid point of a sweep.
///
/// Frequency sweeps evaluate the fallback waste at each grid cadence; the
/// other axes perturb the base parameters and evaluate at the optimum.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, CostError> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.grid.len());
    for &value in &spec.grid {
        let mut p = spec.base;
        match spec.axis {
            SweepAxis::Frequency => p.frequency = value,
            SweepAxis::Overhead => p.stall_hours = value / SECONDS_PER_HOUR,
            SweepAxis::FailureRate => p.failure_rate = value,
            SweepAxis::ClusterSize => p.gpus = value,
        }
        let opt = optimal_frequency(&p)?;
        let (frequency, wasted) = match spec.axis {
            SweepAxis::Frequency => {
                (OptimalFrequency::Every(value), wasted_sota(&p)?)
            }
            _ => (opt.frequency, opt.wasted_gpu_hours),
        };
        let cm = cost_checkmate(&p);
        rows.push(SweepRow {
            axis_value: value,
            frequency,
            f_star: opt.frequency,
            wasted_sota_gpu_h: wasted,
            checkmate_gpu_h: cm.gpu_waste_hours,
            cpu_node_h: cm.cpu_node_hours,
            savings_gpu_h_per_day: savings_per_day(&p)?,
            dollars_sota: p.gpu_price * wasted,
            dollars_checkmate: cm.dollars,
        });
    }
    Ok(rows)
}

/// Render sweep rows as CSV under the fixed schema.
pub fn render_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.axis_value,
            r.frequency,
            r.f_star,
            r.wasted_sota_gpu_h,
            r.checkmate_gpu_h,
            r.cpu_node_h,
            r.savings_gpu_h_per_day,
            r.dollars_sota,
            r.dollars_checkmate,
        ));
    }
    out
}

/// A FLOPs-and-storage parameter set with the throughputs to evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsPreset {
    pub name: &'static str,
    pub model: ModelFlopsConfig,
    /// Achieved FLOPs per GPU per second.
    pub flops_per_gpu: f64,
    pub gpus: u64,
    pub param_count: u64,
    /// Sustained checkpoint-storage throughput, bytes per second.
    pub storage_bytes_per_second: f64,
}

/// 405B-parameter dense transformer, major pretraining phase: 16M-token
/// batches at sequence length 8192 on 16384 GPUs achieving 400 TFLOPs each.
/// Architecture constants follow the public model card.
pub fn llama3_405b() -> FlopsPreset {
    FlopsPreset {
        name: "llama3-405b",
        model: ModelFlopsConfig {
            batch: 2048,
            seq_len: 8192,
            layers: 126,
            hidden: 16384,
            ffn_dim: 53248,
            vocab: 128256,
            query_heads: 128,
            kv_groups: 8,
        },
        flops_per_gpu: 400e12,
        gpus: 16384,
        param_count: 405_000_000_000,
        storage_bytes_per_second: 2e12,
    }
}

/// Cost parameters for that same run: 16384 GPUs for 54 days, one failure
/// per 2e-5 GPU-hours, 4.58 s iterations, 1.2 s checkpoint stalls, and a
/// 128-node CPU tier holding the live checkpoint.
pub fn llama3_major_phase() -> CostParams {
    CostParams {
        failure_rate: 2e-5,
        gpus: 16384.0,
        duration_hours: 54.0 * 24.0,
        iteration_hours: 0.0,
        stall_hours: 0.0,
        cpu_nodes: 128.0,
        gpu_price: 11.06,
        cpu_price: 1.28,
        frequency: 32.0,
    }
    .iteration_seconds(4.58)
    .stall_seconds(1.2)
}

/// Wasted GPU-hours as the checkpoint cadence sweeps powers of two.
pub fn fig1_frequency() -> SweepSpec {
    SweepSpec {
        axis: SweepAxis::Frequency,
        grid: power_of_two_grid(12),
        base: llama3_major_phase(),
    }
}

fn overhead_grid() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 1.2, 2.0, 5.0]
}

/// Savings vs checkpoint overhead at the observed failure rate (2e-5).
pub fn fig8_right() -> SweepSpec {
    SweepSpec { axis: SweepAxis::Overhead, grid: overhead_grid(), base: llama3_major_phase() }
}

/// Savings vs checkpoint overhead at a 50x lower failure rate (1e-6).
pub fn fig8_left() -> SweepSpec {
    SweepSpec {
        axis: SweepAxis::Overhead,
        grid: overhead_grid(),
        base: CostParams { failure_rate: 1e-6, ..llama3_major_phase() },
    }
}

pub fn cost_preset(name: &str) -> Option<CostParams> {
    match name {
        "llama3-major-phase" => Some(llama3_major_phase()),
        _ => None,
    }
}

pub fn sweep_preset(name: &str) -> Option<SweepSpec> {
    match name {
        "fig1-frequency" => Some(fig1_frequency()),
        "fig8-right" => Some(fig8_right()),
        "fig8-left" => Some(fig8_left()),
        _ => None,
    }
}

pub fn flops_preset(name: &str) -> Option<FlopsPreset> {
    match name {
        "llama3-405b" => Some(llama3_405b()),
        _ => None,
    }
}

pub const COST_PRESETS: &[&str] = &["llama3-major-phase"];
pub const SWEEP_PRESETS: &[&str] = &["fig1-frequency", "fig8-right", "fig8-left"];
pub const FLOPS_PRESETS: &[&str] = &["llama3-405b"];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cfg() -> ModelFlopsConfig {
        ModelFlopsConfig {
            batch: 1,
            seq_len: 1,
            layers: 1,
            hidden: 1,
            ffn_dim: 1,
            vocab: 1,
            query_heads: 1,
            kv_groups: 1,
        }
    }

    #[test]
    fn unit_dimensions_reproduce_the_printed_sub_terms() {
        // Substituting 1 for every dimension collapses each formula to its
        // constant factor: 2(1+2)=6, 4, 2, 4, 2 per layer plus 4 for the
        // vocabulary projection, 22 in total.
        let b = flops_breakdown(&unit_cfg());
        assert_eq!(b.qkv, 6.0);
        assert_eq!(b.attn, 4.0);
        assert_eq!(b.attn_out, 2.0);
        assert_eq!(b.ffn, 4.0);
        assert_eq!(b.rope, 2.0);
        assert_eq!(b.per_layer, 18.0);
        assert_eq!(b.vocab, 4.0);
        assert_eq!(b.forward, 22.0);
        assert_eq!(iteration_flops(&unit_cfg()), 66.0);
    }

    #[test]
    fn breakdown_scales_homogeneously() {
        let base = ModelFlopsConfig {
            batch: 3,
            seq_len: 16,
            layers: 5,
            hidden: 32,
            ffn_dim: 64,
            vocab: 100,
            query_heads: 8,
            kv_groups: 2,
        };
        let doubled_s = ModelFlopsConfig { seq_len: 32, ..base.clone() };
        let a = flops_breakdown(&base);
        let b = flops_breakdown(&doubled_s);
        assert_eq!(b.attn, 4.0 * a.attn, "attention is quadratic in sequence length");
        assert_eq!(b.ffn, 2.0 * a.ffn, "everything else is linear");
        let sum = a.qkv + a.attn + a.attn_out + a.ffn + a.rope;
        assert_eq!(a.per_layer, sum);
        assert_eq!(a.forward, a.per_layer * 5.0 + a.vocab);
    }

    #[test]
    fn iteration_time_follows_the_rate_formula() {
        assert_eq!(iteration_seconds(300.0, 100.0, 3.0).unwrap(), 3.0);
        let t1 = iteration_seconds(1e15, 4e11, 1024.0).unwrap();
        let t2 = iteration_seconds(1e15, 4e11, 512.0).unwrap();
        assert_eq!(t2, 2.0 * t1, "halving the GPUs exactly doubles the time");
        assert!(iteration_seconds(1.0, 0.0, 4.0).is_err());
    }

    #[test]
    fn checkpoint_size_and_stall_match_the_anchors() {
        let preset = llama3_405b();
        let bytes = checkpoint_bytes(preset.param_count, 2, 4);
        assert_eq!(bytes, 2_430_000_000_000);
        let stall = checkpoint_seconds(bytes, preset.storage_bytes_per_second).unwrap();
        assert!((stall - 1.215).abs() < 1e-12);
        assert_eq!(checkpoint_bytes(0, 2, 4), 0);
    }

    #[test]
    fn the_405b_preset_lands_on_the_published_iteration_time() {
        let preset = llama3_405b();
        assert_eq!(preset.model.tokens_per_batch(), 16 * 1024 * 1024);
        let fwd = flops_forward(&preset.model);
        let t = iteration_seconds(fwd, preset.flops_per_gpu, preset.gpus as f64).unwrap();
        assert!(
            (t - 4.58).abs() / 4.58 < 0.02,
            "iteration time {t} strays from the 4.58 s anchor"
        );
    }

    #[test]
    fn fallback_waste_headlines() {
        let p = llama3_major_phase();

        // Checkpoint every 30 minutes.
        let half_hour = CostParams { frequency: 0.5 / p.iteration_hours, ..p };
        let w = wasted_sota(&half_hour).unwrap();
        assert!((w - 1.7536e6).abs() / 1.7536e6 < 1e-3, "30-min waste {w}");

        // Checkpointing every iteration inflates each iteration ~26%.
        let every = CostParams { frequency: 1.0, ..p };
        let overhead = every.stall_hours / every.iteration_hours;
        assert!((overhead - 0.262).abs() < 0.003, "per-iteration stall ratio {overhead}");
        assert!(wasted_sota(&every).is_ok());

        // The optimum: every ~35.45 iterations, 32 on a power-of-two grid.
        let opt = optimal_frequency(&p).unwrap();
        let f = opt.frequency.every().unwrap();
        assert!((f - 35.45).abs() < 0.05, "f* = {f}");
        assert!((opt.wasted_gpu_hours - 3.138e5).abs() / 3.138e5 < 1e-3);
        let (grid_f, grid_w) = grid_argmin(&p, &power_of_two_grid(12)).unwrap();
        assert_eq!(grid_f, 32.0);
        assert!(grid_w >= opt.wasted_gpu_hours);

        // Zero-rate params degrade as stated.
        let calm = CostParams { failure_rate: 0.0, ..p };
        let never = optimal_frequency(&calm).unwrap();
        assert_eq!(never.frequency, OptimalFrequency::Never);
        assert_eq!(never.wasted_gpu_hours, 0.0);
        let instant = CostParams { stall_hours: 0.0, ..p };
        assert_eq!(
            optimal_frequency(&instant).unwrap().frequency,
            OptimalFrequency::Every(1.0)
        );
        assert_eq!(wasted_sota(&CostParams { failure_rate: 0.0, stall_hours: 0.0, ..p }), Ok(0.0));
    }

    #[test]
    fn checkmate_cost_headlines() {
        let p = llama3_major_phase();
        let cm = cost_checkmate(&p);
        assert_eq!(cm.cpu_node_hours, 165_888.0);
        assert!((cm.gpu_waste_hours - 4426.5).abs() < 1.0, "waste {}", cm.gpu_waste_hours);
        assert!((cm.gpu_waste_hours - 4367.0).abs() / 4367.0 < 0.02);
        assert_eq!(
            cm.dollars,
            p.gpu_price * cm.gpu_waste_hours + p.cpu_price * cm.cpu_node_hours
        );
        let calm = CostParams { failure_rate: 0.0, ..p };
        assert_eq!(cost_checkmate(&calm).gpu_waste_hours, 0.0);
    }

    #[test]
    fn savings_headlines_and_scaling() {
        let p = llama3_major_phase();

        // 10 ms stalls still save ~448 GPU-hours per day at 16K GPUs.
        let light = p.stall_seconds(0.01);
        let s = savings_per_day(&light).unwrap();
        assert!((s - 448.0).abs() / 448.0 < 0.02, "savings {s}");

        // At 1e-6 failures per GPU-hour and the 1.2 s stall, a 54-day run
        // still saves nearly 70,000 GPU-hours.
        let cautious = CostParams { failure_rate: 1e-6, ..p };
        let over_run = savings_per_day(&cautious).unwrap() * 54.0;
        assert!((over_run - 70_000.0).abs() / 70_000.0 < 0.01, "54-day savings {over_run}");

        // Monotone in the stall and exactly N^{3/2} / N^2 in the two terms.
        let mut last = f64::MIN;
        for stall in [0.001, 0.01, 0.1, 1.0, 10.0] {
            let s = savings_per_day(&p.stall_seconds(stall)).unwrap();
            assert!(s >= last);
            last = s;
        }
        let day = CostParams { duration_hours: 24.0, ..p };
        let double = CostParams { gpus: 2.0 * day.gpus, ..day };
        let sota_ratio = optimal_frequency(&double).unwrap().wasted_gpu_hours
            / optimal_frequency(&day).unwrap().wasted_gpu_hours;
        assert!((sota_ratio - 8f64.sqrt()).abs() < 1e-12);
        let cm_ratio = cost_checkmate(&double).gpu_waste_hours
            / cost_checkmate(&day).gpu_waste_hours;
        assert!((cm_ratio - 4.0).abs() < 1e-12);
        assert_eq!(savings_per_day(&CostParams { failure_rate: 0.0, ..p }).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_cadence_is_the_brute_force_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for case in 0..50 {
            let p = CostParams {
                failure_rate: 10f64.powf(rng.gen_range(-7.0..-3.0)),
                gpus: rng.gen_range(256..65536) as f64,
                duration_hours: rng.gen_range(24.0..2000.0),
                cpu_nodes: 64.0,
                gpu_price: 11.06,
                cpu_price: 1.28,
                stall_hours: 0.0,
                iteration_hours: 0.0,
                frequency: 1.0,
            }
            .iteration_seconds(rng.gen_range(0.5..30.0))
            .stall_seconds(rng.gen_range(0.001..30.0));

            let opt = optimal_frequency(&p).unwrap();
            let f_star = opt.frequency.every().unwrap();
            let hi = (10.0 * f_star).max(4.0);
            let steps = 4000;
            let grid: Vec<f64> =
                (0..=steps).map(|i| 1.0 + (hi - 1.0) * i as f64 / steps as f64).collect();
            let (f_grid, w_grid) = grid_argmin(&p, &grid).unwrap();
            let step = (hi - 1.0) / steps as f64;
            assert!(
                (f_grid - f_star).abs() <= step + 1e-9,
                "case {case}: grid argmin {f_grid} vs closed form {f_star} (step {step})"
            );
            assert!(opt.wasted_gpu_hours <= w_grid * (1.0 + 1e-12));

            // The closed-form waste is the direct evaluation at f*.
            if f_star >= 1.0 {
                let at_star =
                    wasted_sota(&CostParams { frequency: f_star, ..p }).unwrap();
                assert!((at_star - opt.wasted_gpu_hours).abs() / at_star < 1e-12);
            }
        }
    }

    #[test]
    fn sweeps_produce_the_figure_shapes() {
        let rows = run_sweep(&fig1_frequency()).unwrap();
        assert_eq!(rows.len(), 13);
        let wasted: Vec<f64> = rows.iter().map(|r| r.wasted_sota_gpu_h).collect();
        let min_at = wasted
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(rows[min_at].axis_value, 32.0, "U-shaped curve bottoms at 32");
        assert!(wasted.windows(2).take(min_at).all(|w| w[0] > w[1]));
        assert!(wasted.windows(2).skip(min_at).all(|w| w[0] < w[1]));

        let right = run_sweep(&fig8_right()).unwrap();
        let at_10ms = right.iter().find(|r| r.axis_value == 0.01).unwrap();
        assert!((at_10ms.savings_gpu_h_per_day - 448.0).abs() / 448.0 < 0.02);

        let left = run_sweep(&fig8_left()).unwrap();
        assert!(
            left.iter()
                .any(|r| (r.savings_gpu_h_per_day * 54.0 - 70_000.0).abs() < 1000.0),
            "some swept overhead saves ~70K GPU-hours over the 54-day run"
        );
    }

    #[test]
    fn sweep_csv_is_deterministic_and_handles_the_never_sentinel() {
        let single = SweepSpec {
            axis: SweepAxis::Frequency,
            grid: vec![32.0],
            base: llama3_major_phase(),
        };
        let rows = run_sweep(&single).unwrap();
        assert_eq!(rows.len(), 1);
        let csv = render_sweep_csv(&rows);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv, render_sweep_csv(&run_sweep(&single).unwrap()));
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("32,32,"));

        let calm = SweepSpec {
            axis: SweepAxis::Overhead,
            grid: vec![1.0],
            base: CostParams { failure_rate: 0.0, ..llama3_major_phase() },
        };
        let csv = render_sweep_csv(&run_sweep(&calm).unwrap());
        assert!(csv.contains(",never,never,0,0,"), "zero-failure rows checkpoint never");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let p = llama3_major_phase();
        assert!(wasted_sota(&CostParams { frequency: 0.5, ..p }).is_err());
        assert!(wasted_sota(&CostParams { iteration_hours: 0.0, ..p }).is_err());
        assert!(optimal_frequency(&CostParams { gpus: 0.0, ..p }).is_err());
        assert!(checkpoint_seconds(10, 0.0).is_err());
        let cfg = ModelFlopsConfig { hidden: 0, ..llama3_405b().model };
        assert!(cfg.validate().is_err());
        assert!(SweepAxis::parse("cadence").is_err());
        assert_eq!(SweepAxis::parse("overhead").unwrap(), SweepAxis::Overhead);
        let shuffled = SweepSpec {
            axis: SweepAxis::Frequency,
            grid: vec![4.0, 2.0],
            base: p,
        };
        assert!(run_sweep(&shuffled).is_err());
        assert!(cost_preset("nonexistent").is_none());
        assert!(sweep_preset("fig8-right").is_some());
        assert!(flops_preset("llama3-405b").is_some());
    }
}
