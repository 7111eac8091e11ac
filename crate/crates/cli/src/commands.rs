use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::num::NonZeroUsize;
use std::path::Path;

use pdt_core::analytics::{
    cadence_variance, operating_points, stale_rollback_bound, ClusterSimConfig, ClusterSimResult, ScaleModelParams,
};
use pdt_core::balancer::{run_balancer, BalancerConfig};
use pdt_core::decode::{
    hex, run_with, synthesize_artifact, DecodeConfig, DecodeTrace, ReplayArtifact, SynthSpec, TraceEvent,
};
use pdt_core::mem::{kv_budget, pressure_check, PressureVerdict};

use crate::args::*;
use crate::error::{CliError, Result};
use crate::output::{binary_bytes, real, Format, Table};
use crate::parallel::{par_map, simulate_clustered_threaded, ThreadedExecutor};
use crate::{artifact_io, inputs, trace_io};

/// Below this many trials the transcript warns that estimates are noisy.
pub const FEW_TRIALS: usize = 1000;

pub fn run(cli: &Cli) -> Result<String> {
    let f = cli.format;
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed, f),
        Command::Replay(a) => replay(a, cli.seed, f),
        Command::ClusteredSim(a) => clustered_sim(a, cli.seed, f),
        Command::Memcalc(a) => memcalc(a, f),
        Command::Sweep(SweepCommand::Cadence(a)) => sweep_cadence(a, cli.seed, f),
        Command::Sweep(SweepCommand::MaskAblation(a)) => sweep_mask(a, cli.seed, f),
        Command::Sweep(SweepCommand::NoiseStress(a)) => sweep_noise(a, cli.seed, f),
        Command::Balance(a) => balance(a, f),
        Command::Analytics(a) => analytics(a, f),
    }
}

fn key_values(rows: Vec<(&str, String)>, f: Format) -> String {
    let mut t = Table::new(vec!["field", "value"]);
    for (k, v) in rows {
        t.push(vec![k.to_string(), v]);
    }
    t.render(f)
}

fn synth(a: &SynthArgs, seed: u64, f: Format) -> Result<String> {
    let spec = SynthSpec {
        n_streams: a.streams,
        length: a.length,
        vocab_size: a.vocab,
        d: a.d,
        d_note: a.d_note,
        d_bottleneck: a.d_bottleneck,
        d_attn: a.d_attn,
        seed,
        gamma: a.gamma,
        planted_divergences: a.planted.clone(),
    };
    let art = synthesize_artifact(&spec)?;
    let bytes = artifact_io::write(&a.out, &art)?;
    let planted: Vec<String> = a.planted.iter().map(|(s, p)| format!("{s}:{p}")).collect();
    Ok(key_values(
        vec![
            ("path", a.out.display().to_string()),
            ("bytes", bytes.to_string()),
            ("streams", a.streams.to_string()),
            ("frames_per_stream", a.length.to_string()),
            ("seed", seed.to_string()),
            ("planted", planted.join(" ")),
        ],
        f,
    ))
}

/// Headline numbers of one decode run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub streams: usize,
    pub tokens_generated: usize,
    pub tokens_committed: usize,
    pub notes: usize,
    pub snapshots: usize,
    pub rollbacks: usize,
    /// Rollback events per generated token.
    pub rollback_rate: f64,
    pub gate_mean: f64,
    pub gate_min: f64,
    pub gate_max: f64,
    pub gate_actions: usize,
    pub hash: String,
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "streams",
    "tokens_generated",
    "tokens_committed",
    "notes",
    "snapshots",
    "rollbacks",
    "rollback_rate",
    "gate_mean",
    "gate_min",
    "gate_max",
    "gate_actions",
    "trace_sha256",
];

impl RunSummary {
    pub fn of(trace: &DecodeTrace) -> Self {
        let tokens = trace.count("TOKEN");
        let rollbacks = trace.count("ROLLBACK");
        let gates: Vec<f64> = trace.gate_values().collect();
        let (gate_mean, gate_min, gate_max) = if gates.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                gates.iter().sum::<f64>() / gates.len() as f64,
                gates.iter().copied().fold(f64::INFINITY, f64::min),
                gates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        Self {
            streams: trace.token_logs.len(),
            tokens_generated: tokens,
            tokens_committed: trace.token_logs.iter().map(Vec::len).sum(),
            notes: trace.count("NOTE"),
            snapshots: trace.count("SNAPSHOT"),
            rollbacks,
            rollback_rate: if tokens == 0 {
                0.0
            } else {
                rollbacks as f64 / tokens as f64
            },
            gate_mean,
            gate_min,
            gate_max,
            gate_actions: trace.count("GATE"),
            hash: hex(&trace.hash()),
        }
    }

    pub fn cells(&self) -> Vec<String> {
        vec![
            self.streams.to_string(),
            self.tokens_generated.to_string(),
            self.tokens_committed.to_string(),
            self.notes.to_string(),
            self.snapshots.to_string(),
            self.rollbacks.to_string(),
            real(self.rollback_rate),
            real(self.gate_mean),
            real(self.gate_min),
            real(self.gate_max),
            self.gate_actions.to_string(),
            self.hash.clone(),
        ]
    }
}

fn decode(art: &ReplayArtifact, cfg: &DecodeConfig, threads: usize) -> Result<DecodeTrace> {
    Ok(run_with(art, cfg, &ThreadedExecutor::new(threads))?)
}

fn replay(a: &ReplayArgs, seed: u64, f: Format) -> Result<String> {
    let art = artifact_io::read(&a.artifact)?;
    let cfg = a.decode.to_config(seed);
    let trace = decode(&art, &cfg, a.decode.threads)?;
    if let Some(path) = &a.trace {
        trace_io::write(path, &trace)?;
    }
    let mut t = Table::new(SUMMARY_HEADER.to_vec());
    t.push(RunSummary::of(&trace).cells());
    Ok(t.render(f))
}

fn cluster_config(a: &ClusterArgs, seed: u64) -> ClusterSimConfig {
    ClusterSimConfig {
        l: a.l,
        rho_c: a.rho,
        q_token: a.q_token,
        trials: a.trials,
        seed,
    }
}

fn clustered_sim(a: &ClusterArgs, seed: u64, f: Format) -> Result<String> {
    let r = simulate_clustered_threaded(&cluster_config(a, seed), a.threads)?;
    Ok(match f {
        Format::Table => transcript(&r),
        Format::Csv => {
            let mut t = Table::new(vec![
                "l",
                "rho",
                "q_token",
                "trials",
                "seed",
                "independent_fail_prob",
                "independent_theo_fail",
                "independent_variance",
                "independent_theo_variance",
                "clustered_fail_prob",
                "clustered_variance",
                "clustered_exact_variance",
                "clustered_asymptotic_variance",
            ]);
            let c = r.config;
            t.push(vec![
                c.l.to_string(),
                c.rho_c.to_string(),
                c.q_token.to_string(),
                c.trials.to_string(),
                c.seed.to_string(),
                real(r.independent.fail_prob),
                real(r.independent.theo_fail),
                real(r.independent.variance),
                real(r.independent.theo_variance),
                real(r.clustered.fail_prob),
                real(r.clustered.variance),
                real(r.clustered.exact_variance),
                real(r.clustered.asymptotic_variance),
            ]);
            t.render(Format::Csv)
        }
    })
}

fn direction(from: f64, to: f64) -> &'static str {
    if to < from {
        "DECREASES"
    } else if to > from {
        "INCREASES"
    } else {
        "is UNCHANGED"
    }
}

pub fn transcript(r: &ClusterSimResult) -> String {
    let c = r.config;
    let (i, k) = (&r.independent, &r.clustered);
    let mut s = String::new();
    let _ = writeln!(s, "--- Clustered Rollback Simulation ---");
    let _ = writeln!(s, "Parameters:");
    let _ = writeln!(
        s,
        "  L={}, rho={}, q_token={}, trials={}, seed={}",
        c.l, c.rho_c, c.q_token, c.trials, c.seed
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "Results:");
    let _ = writeln!(
        s,
        "  [Independent] Stride Fail Prob: {:.4} (Theo: {:.4})",
        i.fail_prob, i.theo_fail
    );
    let _ = writeln!(
        s,
        "  [Independent] Error Variance:   {:.4} (Theo: {:.4})",
        i.variance, i.theo_variance
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "  [Clustered]   Stride Fail Prob: {:.4}", k.fail_prob);
    let _ = writeln!(s, "  [Clustered]   Error Variance:   {:.4}", k.variance);
    let _ = writeln!(
        s,
        "  [Clustered]   Variance Oracles: exact {:.4}, asymptotic (1+rho)/(1-rho) {:.4}",
        k.exact_variance, k.asymptotic_variance
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "Conclusion:");
    let concentrates = k.fail_prob < i.fail_prob && k.variance > i.variance;
    let lead = if concentrates {
        "Clustering concentrates errors"
    } else {
        "No error concentration at these settings"
    };
    let _ = writeln!(
        s,
        "  {lead}: Stride failure rate {}",
        direction(i.fail_prob, k.fail_prob)
    );
    let _ = writeln!(
        s,
        "  ({:.4} -> {:.4}), {} Variance {}",
        i.fail_prob,
        k.fail_prob,
        if concentrates { "but" } else { "and" },
        direction(i.variance, k.variance)
    );
    let _ = writeln!(
        s,
        "  ({:.4} -> {:.4}). Long-stride variance scales as (1+rho)/(1-rho).",
        i.variance, k.variance
    );
    if c.trials < FEW_TRIALS {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Warning: only {} trial(s); Monte Carlo estimates at this size have very wide variance.",
            c.trials
        );
    }
    s
}

fn memcalc(a: &MemcalcArgs, f: Format) -> Result<String> {
    let file = inputs::read_memory(&a.config)?;
    let cfg = file.to_config();
    cfg.validate()?;
    let kv = kv_budget(&cfg);
    let m_peak = file.m_peak(&cfg);
    let p = pressure_check(&cfg, m_peak);
    let mut t = Table::new(vec!["line", "bytes", "size"]);
    let mut bytes = |name: &str, b: u64| t.push(vec![name.to_string(), b.to_string(), binary_bytes(b)]);
    bytes("kv_per_token_per_layer", kv.per_token_per_layer);
    bytes("kv_per_token", kv.per_token_all_layers);
    bytes("surface_streams", kv.surface_total);
    bytes("bus_cross_attention", kv.bus_total);
    bytes("kv_total", kv.grand_total);
    bytes("m_peak", m_peak);
    bytes("weights", cfg.weights_bytes);
    bytes("workspace", cfg.workspace_bytes);
    bytes("reserve", cfg.reserve_bytes);
    bytes("gpu_budget", cfg.gpu_budget_bytes);
    let verdict = match p.verdict {
        PressureVerdict::Ok => "ok",
        PressureVerdict::Warn => "warn",
        PressureVerdict::Oom => "oom",
    };
    t.push(vec![
        "utilization".into(),
        real(p.utilization),
        format!("{:.2}%", 100.0 * p.utilization),
    ]);
    t.push(vec![
        "in_target_band".into(),
        p.in_target_band.to_string(),
        String::new(),
    ]);
    t.push(vec!["verdict".into(), verdict.into(), String::new()]);
    Ok(t.render(f))
}

fn nonempty<T>(v: &[T], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(CliError::Usage(format!("{name} must list at least one value")));
    }
    Ok(())
}

fn threads(n: usize) -> NonZeroUsize {
    NonZeroUsize::new(n).unwrap_or(NonZeroUsize::MIN)
}

fn opt_real(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sweep_cadence(a: &CadenceSweepArgs, seed: u64, f: Format) -> Result<String> {
    nonempty(&a.m_values, "--m-values")?;
    nonempty(&a.b_values, "--b-values")?;
    let art = artifact_io::read(&a.artifact)?;
    let points: Vec<(usize, usize)> = a
        .m_values
        .iter()
        .flat_map(|&m| a.b_values.iter().map(move |&b| (m, b)))
        .collect();
    let configs: Vec<DecodeConfig> = points
        .iter()
        .map(|&(m, b)| {
            let mut args = a.decode.clone();
            args.m = m;
            args.stride = b;
            let cfg = args.to_config(seed);
            cfg.validate().map(|_| cfg)
        })
        .collect::<pdt_core::Result<_>>()?;
    let summaries = par_map(configs, threads(a.decode.threads), |cfg| {
        decode(&art, &cfg, 1).map(|t| RunSummary::of(&t))
    });
    let mut header = vec!["m", "b", "alpha", "beta"];
    header.extend(SUMMARY_HEADER);
    let mut t = Table::new(header);
    for ((m, b), s) in points.into_iter().zip(summaries) {
        let mut row = vec![m.to_string(), b.to_string(), opt_real(a.alpha), opt_real(a.beta)];
        row.extend(s?.cells());
        t.push(row);
    }
    Ok(t.render(f))
}

/// Summed token margins keyed by `(stream, stride index)`.
pub fn stride_margins(trace: &DecodeTrace, stride: usize) -> BTreeMap<(usize, usize), f64> {
    let mut out = BTreeMap::new();
    for e in &trace.events {
        if let TraceEvent::Token {
            stream,
            position,
            margin,
            ..
        } = e
        {
            *out.entry((*stream, position / stride)).or_insert(0.0) += margin;
        }
    }
    out
}

fn sweep_mask(a: &SweepArgs, seed: u64, f: Format) -> Result<String> {
    let art = artifact_io::read(&a.artifact)?;
    let base = a.decode.to_config(seed);
    let masked = DecodeConfig {
        mask_siblings: true,
        ..base.clone()
    };
    let runs = par_map(vec![base.clone(), masked], threads(a.decode.threads), |cfg| {
        decode(&art, &cfg, 1)
    });
    let mut runs = runs.into_iter();
    let open = stride_margins(&runs.next().expect("two runs")?, base.stride);
    let hidden = stride_margins(&runs.next().expect("two runs")?, base.stride);
    let mut keys: Vec<_> = open.keys().chain(hidden.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let mut t = Table::new(vec!["stream", "stride", "margin_unmasked", "margin_masked", "delta_s"]);
    for k in keys {
        let u = open.get(&k).copied().unwrap_or(0.0);
        let m = hidden.get(&k).copied().unwrap_or(0.0);
        t.push(vec![k.0.to_string(), k.1.to_string(), real(u), real(m), real(u - m)]);
    }
    Ok(t.render(f))
}

fn sweep_noise(a: &NoiseSweepArgs, seed: u64, f: Format) -> Result<String> {
    nonempty(&a.scales, "--scales")?;
    let art = artifact_io::read(&a.artifact)?;
    let mut configs = vec![DecodeConfig {
        note_noise: 0.0,
        ..a.decode.to_config(seed)
    }];
    for &s in &a.scales {
        let cfg = DecodeConfig {
            note_noise: s,
            ..a.decode.to_config(seed)
        };
        cfg.validate()?;
        configs.push(cfg);
    }
    let mut summaries = par_map(configs, threads(a.decode.threads), |cfg| {
        decode(&art, &cfg, 1).map(|t| RunSummary::of(&t))
    })
    .into_iter();
    let baseline = summaries.next().expect("baseline run")?;
    let mut t = Table::new(vec![
        "scale",
        "rollbacks",
        "rollback_rate",
        "gate_mean",
        "rollback_rate_shift",
        "gate_mean_shift",
        "same_trace_as_baseline",
        "trace_sha256",
    ]);
    for (&scale, s) in a.scales.iter().zip(summaries) {
        let s = s?;
        t.push(vec![
            scale.to_string(),
            s.rollbacks.to_string(),
            real(s.rollback_rate),
            real(s.gate_mean),
            real(s.rollback_rate - baseline.rollback_rate),
            real(s.gate_mean - baseline.gate_mean),
            (s.hash == baseline.hash).to_string(),
            s.hash,
        ]);
    }
    Ok(t.render(f))
}

fn balance(a: &BalanceArgs, f: Format) -> Result<String> {
    let log = if a.log == Path::new("-") {
        inputs::read_loss_log(std::io::stdin().lock(), &a.log)?
    } else {
        let file = std::fs::File::open(&a.log).map_err(|e| CliError::io(&a.log, e))?;
        inputs::read_loss_log(file, &a.log)?
    };
    if log.is_empty() {
        return Err(CliError::Usage("loss log has no records".into()));
    }
    let cfg = BalancerConfig {
        alpha: a.alpha,
        eta_w: a.eta,
        update_interval: a.interval,
        history_window: a.window,
        initial_lambda_kl: a.initial_kl,
        ..BalancerConfig::default()
    };
    let records = run_balancer(cfg, &log)?;
    let mut t = Table::new(vec![
        "step",
        "lambda_ce",
        "lambda_kl",
        "updated",
        "rho",
        "delta_r",
        "sigma_lambda",
        "flags",
    ]);
    for r in records.iter().filter(|r| r.updated || !a.updates_only) {
        let h = &r.health;
        let flags: Vec<&str> = [
            (h.flags.gradient_ratio, "gradient_ratio"),
            (h.flags.rate_divergence, "rate_divergence"),
            (h.flags.oscillation, "oscillation"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
        t.push(vec![
            r.step.to_string(),
            real(r.lambda_ce),
            real(r.lambda_kl),
            r.updated.to_string(),
            real(h.rho),
            real(h.delta_r),
            real(h.sigma_lambda),
            if flags.is_empty() { "-".into() } else { flags.join("|") },
        ]);
    }
    Ok(t.render(f))
}

fn analytics(a: &AnalyticsCommand, f: Format) -> Result<String> {
    match *a {
        AnalyticsCommand::StaleBound { l, epsilon } => {
            if !(epsilon >= 0.0) {
                return Err(CliError::Usage("--epsilon must be non-negative".into()));
            }
            Ok(key_values(vec![("q_event", real(stale_rollback_bound(l, epsilon)))], f))
        }
        AnalyticsCommand::CadenceVariance { l, epsilon, m } => {
            if m == 0 {
                return Err(CliError::Usage("--m must be at least 1".into()));
            }
            Ok(key_values(
                vec![("var_q_event", real(cadence_variance(l, epsilon, m)))],
                f,
            ))
        }
        AnalyticsCommand::Scale {
            t_base,
            t_comm,
            avg_notes,
            b_base,
            max_n,
        } => {
            let p = ScaleModelParams {
                t_base,
                t_comm,
                avg_notes,
                n_streams: 1,
                b_base,
            };
            p.validate()?;
            let mut t = Table::new(vec!["n_streams", "t_sync", "stride", "regime"]);
            for op in operating_points(&p, max_n) {
                t.push(vec![
                    op.n_streams.to_string(),
                    real(op.t_sync),
                    op.stride.to_string(),
                    op.regime.as_str().to_string(),
                ]);
            }
            Ok(t.render(f))
        }
    }
}
