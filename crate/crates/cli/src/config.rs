//! JSON run configuration. Unknown keys are rejected.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use sts_core::{discretize, init_s4d_lin, DiscreteParams, ReadoutPolicy, SegmentPlan, SsmConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    All,
    LastPerSegment,
    Final,
}

impl From<PolicyName> for ReadoutPolicy {
    fn from(p: PolicyName) -> Self {
        match p {
            PolicyName::All => ReadoutPolicy::AllTokens,
            PolicyName::LastPerSegment => ReadoutPolicy::LastTokenPerSegment,
            PolicyName::Final => ReadoutPolicy::FinalTokenOnly,
        }
    }
}

fn default_dt_min() -> f64 {
    SsmConfig::DEFAULT_DT_MIN
}

fn default_dt_max() -> f64 {
    SsmConfig::DEFAULT_DT_MAX
}

fn default_policy() -> PolicyName {
    PolicyName::LastPerSegment
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub state_size: usize,
    pub channels: usize,
    #[serde(default = "default_dt_min")]
    pub dt_min: f64,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    pub seed: u64,
    pub segment_len: usize,
    #[serde(default = "default_policy")]
    pub readout_policy: PolicyName,
    /// Stream length used to assign time buckets to emissions.
    #[serde(default)]
    pub declared_total: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 {
            return Err(CliError::Config("segment_len must be positive".into()));
        }
        if self.declared_total == Some(0) {
            return Err(CliError::Config("declared_total must be positive".into()));
        }
        self.ssm_config().validate()?;
        Ok(())
    }

    pub fn ssm_config(&self) -> SsmConfig {
        SsmConfig::new(self.channels, self.state_size, self.seed)
            .with_dt_range(self.dt_min, self.dt_max)
    }

    pub fn policy(&self) -> ReadoutPolicy {
        self.readout_policy.into()
    }

    /// Streams may end on a short segment.
    pub fn plan(&self) -> Result<SegmentPlan> {
        Ok(SegmentPlan::new(self.segment_len, true)?)
    }

    /// Initializes and discretizes the model described by this config.
    pub fn build_params(&self) -> Result<Arc<DiscreteParams>> {
        let continuous = init_s4d_lin(&self.ssm_config())?;
        Ok(Arc::new(discretize(&continuous)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_apply() {
        let c = RunConfig::from_json(
            r#"{"state_size": 16, "channels": 4, "seed": 1, "segment_len": 64}"#,
        )
        .unwrap();
        assert_eq!(c.dt_min, 0.001);
        assert_eq!(c.dt_max, 0.1);
        assert_eq!(c.readout_policy, PolicyName::LastPerSegment);
        assert_eq!(c.declared_total, None);
        assert_eq!(c.policy(), ReadoutPolicy::LastTokenPerSegment);
    }

    #[test]
    fn all_fields_parse() {
        let c = RunConfig::from_json(
            r#"{"state_size": 4, "channels": 2, "dt_min": 0.01, "dt_max": 0.02, "seed": 3,
                "segment_len": 8, "readout_policy": "final", "declared_total": 100}"#,
        )
        .unwrap();
        assert_eq!(c.policy(), ReadoutPolicy::FinalTokenOnly);
        assert_eq!(c.declared_total, Some(100));
        let p = c.build_params().unwrap();
        assert_eq!((p.channels(), p.state_size()), (2, 4));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let bad = [
            r#"{"state_size": 4, "channels": 2, "seed": 3, "segment_len": 8, "segment_length": 8}"#,
            r#"{"state_size": 4, "channels": 2, "seed": 3}"#,
            r#"{"state_size": 4, "channels": 2, "seed": 3, "segment_len": 0}"#,
            r#"{"state_size": 0, "channels": 2, "seed": 3, "segment_len": 8}"#,
            r#"{"state_size": 4, "channels": 2, "seed": 3, "segment_len": 8, "readout_policy": "first"}"#,
            r#"{"state_size": 4, "channels": 2, "seed": 3, "segment_len": 8, "dt_min": 0.5, "dt_max": 0.1}"#,
            r#"{"state_size": 4, "channels": 2, "seed": 3, "segment_len": 8, "declared_total": 0}"#,
        ];
        for text in bad {
            assert!(
                matches!(
                    RunConfig::from_json(text),
                    Err(CliError::Config(_)) | Err(CliError::Model(_))
                ),
                "accepted {text}"
            );
        }
    }
}
