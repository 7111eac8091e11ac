//! Human-edited inputs: TOML memory configs and CSV loss logs.

use std::path::Path;

use pdt_core::balancer::LossRecord;
use pdt_core::mem::{kv_budget, MemoryConfig};
use serde::Deserialize;

use crate::error::{CliError, Result};

/// On-disk memory configuration. Sizes are integers in bytes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryFile {
    pub d_model: u64,
    pub n_heads: u64,
    pub d_head: u64,
    pub n_layers: u64,
    #[serde(default = "fp16")]
    pub bytes_per_elem: u64,
    pub n_kv_self: u64,
    #[serde(default = "one")]
    pub n_kv_bus: u64,
    pub tokens_per_stream: Vec<u64>,
    pub bus_tokens: u64,
    pub cross_layers: u64,
    #[serde(default)]
    pub weights_bytes: u64,
    #[serde(default)]
    pub workspace_bytes: u64,
    pub gpu_budget_bytes: u64,
    #[serde(default)]
    pub reserve_bytes: u64,
    /// Peak KV demand; the computed KV total when absent.
    pub m_peak_bytes: Option<u64>,
}

fn fp16() -> u64 {
    2
}

fn one() -> u64 {
    1
}

impl MemoryFile {
    pub fn to_config(&self) -> MemoryConfig {
        MemoryConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            n_layers: self.n_layers,
            bytes_per_elem: self.bytes_per_elem,
            n_kv_self: self.n_kv_self,
            n_kv_bus: self.n_kv_bus,
            n_streams: self.tokens_per_stream.len() as u64,
            tokens_per_stream: self.tokens_per_stream.clone(),
            bus_tokens: self.bus_tokens,
            cross_layers: self.cross_layers,
            weights_bytes: self.weights_bytes,
            workspace_bytes: self.workspace_bytes,
            gpu_budget_bytes: self.gpu_budget_bytes,
            reserve_bytes: self.reserve_bytes,
        }
    }

    pub fn m_peak(&self, cfg: &MemoryConfig) -> u64 {
        self.m_peak_bytes.unwrap_or_else(|| kv_budget(cfg).grand_total)
    }
}

pub fn parse_memory(text: &str, path: &Path) -> Result<MemoryFile> {
    toml::from_str(text).map_err(|source| CliError::Toml {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_memory(path: &Path) -> Result<MemoryFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_memory(&text, path)
}

#[derive(Debug, Deserialize)]
struct LossRow {
    step: u64,
    g_ce: f64,
    g_kl: f64,
    l_ce: f64,
    l_kl: f64,
}

/// Read a loss log with header `step,g_ce,g_kl,l_ce,l_kl`.
pub fn read_loss_log(reader: impl std::io::Read, path: &Path) -> Result<Vec<LossRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    rdr.deserialize::<LossRow>()
        .map(|row| {
            let r = row.map_err(|source| CliError::Csv {
                path: path.to_path_buf(),
                source,
            })?;
            Ok(LossRecord {
                step: r.step,
                g_ce: r.g_ce,
                g_kl: r.g_kl,
                l_ce: r.l_ce,
                l_kl: r.l_kl,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MQA: &str = include_str!("../configs/mqa.toml");
    const GQA: &str = include_str!("../configs/gqa.toml");

    #[test]
    fn shipped_configs_match_the_worked_examples() {
        for (text, kv) in [(MQA, 1), (GQA, 8)] {
            let f = parse_memory(text, Path::new("x.toml")).unwrap();
            assert_eq!(f.to_config(), MemoryConfig::worked_example(kv));
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MQA}\nbogus = 1\n");
        assert!(matches!(
            parse_memory(&text, Path::new("x.toml")),
            Err(CliError::Toml { .. })
        ));
    }

    #[test]
    fn loss_log_parses_with_comments_and_spaces() {
        let text = "# run 7\nstep, g_ce, g_kl, l_ce, l_kl\n0, 1.0, 2.0, 3.0, 4.0\n50,1,1,2.5,3.5\n";
        let log = read_loss_log(text.as_bytes(), Path::new("l.csv")).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[1].step, 50);
        assert_eq!(log[0].l_kl, 4.0);
        assert!(read_loss_log("step,g_ce\n1,2\n".as_bytes(), Path::new("l.csv")).is_err());
    }
}
