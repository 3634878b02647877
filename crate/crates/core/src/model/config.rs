use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AadError, Result};
use crate::tensor::{Conv2dSpec, PoolAxis, PoolSpec};

/// Time steps every subnetwork emits, whatever the trial duration.
pub const EMBED_STEPS: usize = 48;
pub const N_ELECTRODES: usize = 10;
pub const N_FREQ_BINS: usize = 257;
/// Learnable parameter total the published model reports.
pub const PAPER_PARAM_TOTAL: usize = 416_741;

/// One convolutional row: conv, max-pool, batch norm, dropout, ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    /// (time, feature)
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub pool: (usize, usize),
}

impl LayerSpec {
    const fn new(
        out_channels: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
        padding: (usize, usize),
        pool: (usize, usize),
    ) -> Self {
        LayerSpec { out_channels, kernel, dilation, padding, pool }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub layers: Vec<LayerSpec>,
    pub dropout: f64,
}

/// Extents `(time, feature)` around one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub conv: Conv2dSpec,
    pub pool: PoolSpec,
    pub conv_out: (usize, usize),
    pub pooled: (usize, usize),
}

impl CnnConfig {
    pub fn eeg() -> Self {
        CnnConfig {
            layers: vec![
                LayerSpec::new(32, (24, 1), (1, 1), (12, 0), (2, 1)),
                LayerSpec::new(32, (7, 1), (2, 1), (6, 0), (1, 2)),
                LayerSpec::new(32, (7, 5), (1, 1), (3, 2), (2, 5)),
                LayerSpec::new(32, (7, 1), (1, 1), (3, 0), (1, 1)),
            ],
            dropout: 0.25,
        }
    }

    pub fn audio() -> Self {
        CnnConfig {
            layers: vec![
                LayerSpec::new(32, (1, 7), (1, 1), (0, 3), (1, 1)),
                LayerSpec::new(32, (7, 1), (1, 1), (0, 0), (1, 4)),
                LayerSpec::new(32, (3, 5), (8, 8), (0, 16), (1, 2)),
                LayerSpec::new(32, (3, 3), (16, 16), (0, 16), (1, 1)),
                LayerSpec::new(1, (1, 1), (1, 1), (0, 0), (2, 2)),
            ],
            dropout: 0.4,
        }
    }

    /// Extents with the literal pooling values.
    pub fn literal_plan(&self, input: (usize, usize)) -> Result<Vec<LayerPlan>> {
        self.plan_with(input, None)
    }

    /// The plan the model runs: literal pools when they already end at
    /// [`EMBED_STEPS`] time steps, otherwise the time pool of the last layer
    /// that pools in time becomes adaptive with [`EMBED_STEPS`] outputs.
    pub fn plan(&self, input: (usize, usize)) -> Result<Vec<LayerPlan>> {
        if let Ok(plan) = self.literal_plan(input) {
            if plan.last().map(|l| l.pooled.0) == Some(EMBED_STEPS) {
                return Ok(plan);
            }
        }
        let adaptive = self
            .layers
            .iter()
            .rposition(|l| l.pool.0 > 1)
            .ok_or_else(|| AadError::invalid("no layer pools along time; cannot fix the output length"))?;
        let plan = self.plan_with(input, Some(adaptive))?;
        let end = plan.last().map_or(0, |l| l.pooled.0);
        if end != EMBED_STEPS {
            return Err(AadError::invalid(format!(
                "input {input:?} ends at {end} time steps after the adaptive pool, not {EMBED_STEPS}"
            )));
        }
        Ok(plan)
    }

    fn plan_with(&self, input: (usize, usize), adaptive: Option<usize>) -> Result<Vec<LayerPlan>> {
        let mut channels = 1;
        let mut extent = input;
        let mut plan = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let conv = Conv2dSpec::new(channels, l.out_channels, l.kernel, l.dilation, l.padding)?;
            let conv_out = conv.output_extent(extent.0, extent.1)?;
            let time = if adaptive == Some(i) { PoolAxis::Adaptive(EMBED_STEPS) } else { PoolAxis::Fixed(l.pool.0) };
            let pool = PoolSpec { time, feature: PoolAxis::Fixed(l.pool.1) };
            let pooled = pool.output_extent(conv_out.0, conv_out.1);
            if pooled.0 == 0 || pooled.1 == 0 {
                return Err(AadError::invalid(format!("layer {} pools {conv_out:?} down to nothing", i + 1)));
            }
            plan.push(LayerPlan { conv, pool, conv_out, pooled });
            channels = l.out_channels;
            extent = pooled;
        }
        Ok(plan)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.out_channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: usize,
    /// Hidden FC widths; a final layer to [`ClassifierConfig::n_classes`] follows.
    pub fc_widths: Vec<usize>,
    pub n_classes: usize,
    pub dropout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { hidden: 32, fc_widths: vec![96, 48, 16], n_classes: 2, dropout: 0.25 }
    }
}

/// Variants that change the network itself (and so need their own training).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[default]
    Full,
    /// The concatenated embedding feeds the FC stack directly.
    RemoveBlstm,
    /// A single linear readout replaces the FC stack.
    RemoveFc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    None,
    ZeroEeg,
    ZeroAudio,
    RemoveBlstm,
    RemoveFc,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::None,
        AblationMode::ZeroEeg,
        AblationMode::ZeroAudio,
        AblationMode::RemoveBlstm,
        AblationMode::RemoveFc,
    ];

    pub fn architecture(self) -> Architecture {
        match self {
            AblationMode::RemoveBlstm => Architecture::RemoveBlstm,
            AblationMode::RemoveFc => Architecture::RemoveFc,
            _ => Architecture::Full,
        }
    }

    /// Input-masking modes apply to an already trained full model.
    pub fn masks_inputs(self) -> bool {
        matches!(self, AblationMode::ZeroEeg | AblationMode::ZeroAudio)
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::ZeroEeg => "zero_eeg",
            AblationMode::ZeroAudio => "zero_audio",
            AblationMode::RemoveBlstm => "remove_blstm",
            AblationMode::RemoveFc => "remove_fc",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = AadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AadError::invalid(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub duration_s: usize,
    pub eeg: CnnConfig,
    pub audio: CnnConfig,
    pub classifier: ClassifierConfig,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            duration_s: 3,
            eeg: CnnConfig::eeg(),
            audio: CnnConfig::audio(),
            classifier: ClassifierConfig::default(),
            architecture: Architecture::Full,
        }
    }
}

impl ModelConfig {
    pub fn with_duration(duration_s: usize) -> Self {
        ModelConfig { duration_s, ..Self::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn times(plan: &[LayerPlan]) -> Vec<usize> {
        plan.iter().flat_map(|l| [l.conv_out.0, l.pooled.0]).collect()
    }

    #[test]
    fn eeg_literal_extents() {
        let plan = CnnConfig::eeg().literal_plan((192, 10)).unwrap();
        assert_eq!(times(&plan), [193, 96, 96, 96, 96, 48, 48, 48]);
        let feats: Vec<usize> = plan.iter().map(|l| l.pooled.1).collect();
        assert_eq!(feats, [10, 5, 1, 1]);
    }

    #[test]
    fn audio_literal_extents() {
        let plan = CnnConfig::audio().literal_plan((151, 257)).unwrap();
        let pooled: Vec<(usize, usize)> = plan.iter().map(|l| l.pooled).collect();
        assert_eq!(pooled, [(151, 257), (145, 64), (129, 32), (97, 32), (48, 16)]);
    }

    #[test]
    fn every_duration_reaches_48_steps() {
        for d in [2, 3, 4, 5] {
            let eeg = CnnConfig::eeg().plan((64 * d, 10)).unwrap();
            assert_eq!(eeg.last().unwrap().pooled, (48, 1), "{d} s");
            let audio = CnnConfig::audio().plan((50 * d + 1, 257)).unwrap();
            assert_eq!(audio.last().unwrap().pooled, (48, 16), "{d} s");
            let adaptive = eeg.iter().chain(&audio).any(|l| matches!(l.pool.time, PoolAxis::Adaptive(_)));
            assert_eq!(adaptive, d != 3);
        }
    }

    #[test]
    fn ablation_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!("zero_both".parse::<AblationMode>().is_err());
    }
}
