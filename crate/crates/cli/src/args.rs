use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pdt_core::decode::{
    AdaptiveWeights, AgreementSource, CadenceConfig, CadenceMode, DecodeConfig, Regeneration, RollbackScope,
};

use crate::output::Format;

#[derive(Debug, Parser)]
#[command(
    name = "pdt",
    version,
    about = "Parallel decoding coordination: replay, simulations and sizing reports"
)]
pub struct Cli {
    /// Seed for every random draw; falls back to PDT_SEED, then 0.
    #[arg(long, global = true, env = "PDT_SEED", default_value_t = 0)]
    pub seed: u64,

    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,

    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic replay artifact.
    Synth(SynthArgs),
    /// Decode a replay artifact and summarize the trace.
    Replay(ReplayArgs),
    /// Monte Carlo of stride failures under independent and clustered errors.
    ClusteredSim(ClusterArgs),
    /// KV-cache budget and memory-pressure verdict for a TOML config.
    Memcalc(MemcalcArgs),
    /// Parameter sweeps over a replay artifact.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Replay a loss log through the loss-weight balancer.
    Balance(BalanceArgs),
    /// Closed-form cadence and scaling models.
    #[command(subcommand)]
    Analytics(AnalyticsCommand),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub streams: usize,
    #[arg(long, default_value_t = 128)]
    pub length: usize,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub d_note: usize,
    #[arg(long, default_value_t = 4)]
    pub d_bottleneck: usize,
    #[arg(long, default_value_t = 8)]
    pub d_attn: usize,
    /// Gate logit; the learned gate is logistic(gamma).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub gamma: f64,
    /// Force a low agreement score at STREAM:FRAME (repeatable).
    #[arg(long = "plant", value_parser = parse_plant)]
    pub planted: Vec<(usize, usize)>,
}

fn parse_plant(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected STREAM:FRAME")?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CadenceArg {
    Deterministic,
    Stochastic,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AgreementArg {
    Replay,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegenerationArg {
    Reconsume,
    SkipAhead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    FullSpan,
    FromFailure,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Tokens per stride (B).
    #[arg(long, default_value_t = 32)]
    pub stride: usize,
    /// Commit horizon (L): most tokens a rollback may discard.
    #[arg(long, default_value_t = 32)]
    pub horizon: usize,
    /// Agreement threshold below which a stride rolls back.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Bus read lag in snapshot versions.
    #[arg(long, default_value_t = 1)]
    pub delta: usize,
    #[arg(long, value_enum, default_value_t = CadenceArg::Deterministic)]
    pub cadence: CadenceArg,
    /// Expected tokens between note emissions, M(rho).
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    /// Fixed gate value replacing the learned and scheduled gate.
    #[arg(long)]
    pub gate_override: Option<f64>,
    #[arg(long, value_enum, default_value_t = AgreementArg::Replay)]
    pub agreement: AgreementArg,
    #[arg(long, value_enum, default_value_t = RegenerationArg::Reconsume)]
    pub regeneration: RegenerationArg,
    #[arg(long, value_enum, default_value_t = ScopeArg::FullSpan)]
    pub scope: ScopeArg,
    /// Std-dev of gaussian noise on sibling note embeddings.
    #[arg(long, default_value_t = 0.0)]
    pub note_noise: f64,
    /// Notes kept per stream after compaction; defaults to max(32, stride).
    #[arg(long)]
    pub retain_k: Option<usize>,
    /// KV page size in tokens; defaults to the commit horizon.
    #[arg(long)]
    pub page_size: Option<usize>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

impl DecodeArgs {
    pub fn to_config(&self, seed: u64) -> DecodeConfig {
        let mode = match self.cadence {
            CadenceArg::Deterministic => CadenceMode::Deterministic,
            CadenceArg::Stochastic => CadenceMode::Stochastic,
            CadenceArg::Adaptive => CadenceMode::Adaptive(AdaptiveWeights::default()),
        };
        DecodeConfig {
            commit_horizon: self.horizon,
            stride: self.stride,
            tau: self.tau,
            delta: self.delta,
            cadence: CadenceConfig {
                mode,
                m_of_rho: self.m,
                seed,
                ..CadenceConfig::default()
            },
            gate_override: self.gate_override,
            agreement_source: match self.agreement {
                AgreementArg::Replay => AgreementSource::Replay,
                AgreementArg::Live => AgreementSource::Live,
            },
            regeneration: match self.regeneration {
                RegenerationArg::Reconsume => Regeneration::Reconsume,
                RegenerationArg::SkipAhead => Regeneration::SkipAhead,
            },
            rollback_scope: match self.scope {
                ScopeArg::FullSpan => RollbackScope::FullSpan,
                ScopeArg::FromFailure => RollbackScope::FromFailure,
            },
            note_noise: self.note_noise,
            seed,
            page_size: self.page_size,
            bus_retain_k: self.retain_k.unwrap_or(self.stride.max(32)),
            ..DecodeConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub artifact: PathBuf,
    /// Write the full event trace here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Error autocorrelation P(err | err).
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// Tokens per stride.
    #[arg(long = "l", visible_alias = "L", default_value_t = 32)]
    pub l: usize,
    /// Stationary per-token error probability.
    #[arg(long, visible_alias = "q_token", default_value_t = 0.0033)]
    pub q_token: f64,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct MemcalcArgs {
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SweepCommand {
    /// Grid over M(rho) and stride B; one replay summary per point.
    Cadence(CadenceSweepArgs),
    /// Re-decode with sibling notes hidden. Under replay there are no true
    /// likelihoods, so the per-stride drop is the change in the biased-argmax
    /// margin (best minus runner-up logit) summed over the stride,
    /// unmasked minus masked.
    MaskAblation(SweepArgs),
    /// Gaussian noise on sibling note embeddings at each scale, reported as
    /// shifts from the noise-free run.
    NoiseStress(NoiseSweepArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub artifact: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct CadenceSweepArgs {
    pub artifact: PathBuf,
    /// Comma-separated M(rho) values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub m_values: Vec<usize>,
    /// Comma-separated stride values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub b_values: Vec<usize>,
    /// Opaque scalar copied into every row for downstream speedup surfaces.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Opaque scalar copied into every row for downstream speedup surfaces.
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct NoiseSweepArgs {
    pub artifact: PathBuf,
    /// Comma-separated noise std-devs.
    #[arg(long, value_delimiter = ',', required = true)]
    pub scales: Vec<f64>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    /// CSV with header step,g_ce,g_kl,l_ce,l_kl; `-` reads stdin.
    pub log: PathBuf,
    #[arg(long, default_value_t = 1.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    /// Steps between weight updates.
    #[arg(long, default_value_t = 50)]
    pub interval: u64,
    /// Updates averaged into the weight-oscillation statistic.
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    #[arg(long, default_value_t = 0.5)]
    pub initial_kl: f64,
    /// Print only the steps where weights were updated.
    #[arg(long)]
    pub updates_only: bool,
}

#[derive(Debug, Subcommand)]
pub enum AnalyticsCommand {
    /// Rollback probability from a stale bus: sqrt(L * epsilon / 2), clamped to 1.
    StaleBound {
        #[arg(long = "l", visible_alias = "L")]
        l: usize,
        #[arg(long)]
        epsilon: f64,
    },
    /// Variance of the stale-rollback probability under stochastic cadence.
    CadenceVariance {
        #[arg(long = "l", visible_alias = "L")]
        l: usize,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        m: usize,
    },
    /// Sync overhead and adaptive stride for 1..=max-n streams (model output).
    Scale {
        #[arg(long, default_value_t = 1.0)]
        t_base: f64,
        #[arg(long, default_value_t = 0.1)]
        t_comm: f64,
        #[arg(long, default_value_t = 10.0)]
        avg_notes: f64,
        #[arg(long, default_value_t = 32)]
        b_base: usize,
        #[arg(long, default_value_t = 8)]
        max_n: usize,
    },
}
