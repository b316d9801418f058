use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Fcn,
    Resnet,
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::Fcn => "fcn",
            Backbone::Resnet => "resnet",
        })
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcn" => Ok(Backbone::Fcn),
            "resnet" => Ok(Backbone::Resnet),
            other => Err(Error::invalid(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    ConvLayer,
    ResidualBlock,
}

/// One gateable unit: a single conv layer or a residual block of several.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvUnitSpec {
    pub kind: UnitKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// One entry per conv on the unit's main path.
    pub kernel_lengths: Vec<usize>,
    /// Batch norm after each conv; convs carry a bias only without it.
    pub has_batchnorm: bool,
}

impl ConvUnitSpec {
    pub fn conv_layer(in_channels: usize, out_channels: usize, kernel: usize, has_batchnorm: bool) -> Self {
        Self {
            kind: UnitKind::ConvLayer,
            in_channels,
            out_channels,
            kernel_lengths: vec![kernel],
            has_batchnorm,
        }
    }

    pub fn residual_block(in_channels: usize, out_channels: usize, kernels: &[usize], has_batchnorm: bool) -> Self {
        Self {
            kind: UnitKind::ResidualBlock,
            in_channels,
            out_channels,
            kernel_lengths: kernels.to_vec(),
            has_batchnorm,
        }
    }

    /// Residual blocks project the shortcut with a pointwise conv when the
    /// channel count changes.
    pub fn has_projection(&self) -> bool {
        self.kind == UnitKind::ResidualBlock && self.in_channels != self.out_channels
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("unit channel counts must be at least 1"));
        }
        if self.kernel_lengths.is_empty() || self.kernel_lengths.contains(&0) {
            return Err(Error::invalid("kernel lengths must be at least 1"));
        }
        if self.kind == UnitKind::ConvLayer && self.kernel_lengths.len() != 1 {
            return Err(Error::invalid("a conv layer has exactly one kernel"));
        }
        Ok(())
    }
}

pub const FCN_FILTERS: [usize; 3] = [128, 256, 128];
pub const FCN_KERNELS: [usize; 3] = [8, 5, 3];
pub const RESNET_FILTERS: [usize; 2] = [64, 128];
pub const RESNET_KERNELS: [usize; 3] = [8, 5, 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub backbone: Backbone,
    pub input_channels: usize,
    pub classes: usize,
    pub units: Vec<ConvUnitSpec>,
    pub seed: u64,
}

impl NetworkSpec {
    /// FCN with `depth` conv layers. Filters default to 128/256/128 and
    /// kernels to 8/5/3; layers past the lists reuse the last entry.
    pub fn fcn(input_channels: usize, classes: usize, depth: usize) -> Self {
        Self::fcn_with_filters(input_channels, classes, depth, &FCN_FILTERS)
    }

    pub fn fcn_with_filters(input_channels: usize, classes: usize, depth: usize, filters: &[usize]) -> Self {
        let mut units = Vec::with_capacity(depth);
        let mut c = input_channels;
        for i in 0..depth {
            let out = pick(filters, i);
            units.push(ConvUnitSpec::conv_layer(c, out, pick(&FCN_KERNELS, i), true));
            c = out;
        }
        Self {
            backbone: Backbone::Fcn,
            input_channels,
            classes,
            units,
            seed: 0,
        }
    }

    /// ResNet with `depth` residual blocks (kernels 8/5/3). The first block
    /// has `filters[0]` channels and later blocks `filters[1]`.
    pub fn resnet(input_channels: usize, classes: usize, depth: usize) -> Self {
        Self::resnet_with_filters(input_channels, classes, depth, &RESNET_FILTERS)
    }

    pub fn resnet_with_filters(input_channels: usize, classes: usize, depth: usize, filters: &[usize]) -> Self {
        let mut units = Vec::with_capacity(depth);
        let mut c = input_channels;
        for i in 0..depth {
            let out = pick(filters, i);
            units.push(ConvUnitSpec::residual_block(c, out, &RESNET_KERNELS, true));
            c = out;
        }
        Self {
            backbone: Backbone::Resnet,
            input_channels,
            classes,
            units,
            seed: 0,
        }
    }

    pub fn build(backbone: Backbone, input_channels: usize, classes: usize, depth: usize, filters: Option<&[usize]>) -> Self {
        match (backbone, filters) {
            (Backbone::Fcn, None) => Self::fcn(input_channels, classes, depth),
            (Backbone::Fcn, Some(f)) => Self::fcn_with_filters(input_channels, classes, depth, f),
            (Backbone::Resnet, None) => Self::resnet(input_channels, classes, depth),
            (Backbone::Resnet, Some(f)) => Self::resnet_with_filters(input_channels, classes, depth, f),
        }
    }

    #[must_use]
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    #[must_use]
    pub fn with_batchnorm(mut self, enabled: bool) -> Self {
        for u in &mut self.units {
            u.has_batchnorm = enabled;
        }
        self
    }

    pub fn depth(&self) -> usize {
        self.units.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::invalid("network needs at least one input channel"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("network needs at least two classes"));
        }
        let mut c = self.input_channels;
        for (i, u) in self.units.iter().enumerate() {
            u.validate()?;
            if u.in_channels != c {
                return Err(Error::invalid(format!(
                    "unit {i} expects {} input channels but receives {c}",
                    u.in_channels
                )));
            }
            c = u.out_channels;
        }
        Ok(())
    }
}

fn pick(list: &[usize], i: usize) -> usize {
    list[i.min(list.len() - 1)]
}

/// Pointwise conv inserted before a preserved unit whose input channel
/// count no longer matches after earlier skips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Binary gates per unit plus the adapters they induce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatePlan {
    gates: Vec<bool>,
    adapters: Vec<Option<AdapterSpec>>,
}

impl GatePlan {
    /// Every unit preserved.
    pub fn all_preserved(spec: &NetworkSpec) -> Self {
        Self::from_gates(spec, vec![true; spec.depth()]).expect("gate count matches depth")
    }

    /// Plan with the listed (0-based) units skipped.
    pub fn skipping(spec: &NetworkSpec, skipped: &[usize]) -> Result<Self> {
        let mut gates = vec![true; spec.depth()];
        for &s in skipped {
            *gates
                .get_mut(s)
                .ok_or_else(|| Error::invalid(format!("unit {s} is out of range")))? = false;
        }
        Self::from_gates(spec, gates)
    }

    /// Derives adapters by walking the channel count through the plan.
    pub fn from_gates(spec: &NetworkSpec, gates: Vec<bool>) -> Result<Self> {
        if gates.len() != spec.depth() {
            return Err(Error::invalid(format!(
                "{} gates for a depth-{} network",
                gates.len(),
                spec.depth()
            )));
        }
        let mut adapters = vec![None; gates.len()];
        let mut c = spec.input_channels;
        for (l, unit) in spec.units.iter().enumerate() {
            if gates[l] {
                if c != unit.in_channels {
                    adapters[l] = Some(AdapterSpec {
                        in_channels: c,
                        out_channels: unit.in_channels,
                    });
                }
                c = unit.out_channels;
            }
        }
        Ok(Self { gates, adapters })
    }

    pub fn gates(&self) -> &[bool] {
        &self.gates
    }

    pub fn gate(&self, unit: usize) -> bool {
        self.gates[unit]
    }

    pub fn adapter(&self, unit: usize) -> Option<AdapterSpec> {
        self.adapters[unit]
    }

    pub fn adapters(&self) -> &[Option<AdapterSpec>] {
        &self.adapters
    }

    pub fn skipped(&self) -> Vec<usize> {
        (0..self.gates.len()).filter(|&l| !self.gates[l]).collect()
    }

    pub fn is_all_preserved(&self) -> bool {
        self.gates.iter().all(|&g| g)
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters.iter().any(Option::is_some)
    }

    /// Channel count reaching the head under this plan.
    pub fn output_channels(&self, spec: &NetworkSpec) -> usize {
        spec.units
            .iter()
            .zip(&self.gates)
            .filter(|(_, &g)| g)
            .map(|(u, _)| u.out_channels)
            .last()
            .unwrap_or(spec.input_channels)
    }

    /// Checks the plan against a spec: same depth and adapters exactly where
    /// a preserved unit's input would otherwise mismatch.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = Self::from_gates(spec, self.gates.clone())?;
        if expected.adapters != self.adapters {
            return Err(Error::invalid("gate plan adapters do not match its gates"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architectures() {
        let fcn = NetworkSpec::fcn(1, 3, 3);
        let ch: Vec<_> = fcn.units.iter().map(|u| u.out_channels).collect();
        assert_eq!(ch, [128, 256, 128]);
        let resnet = NetworkSpec::resnet(2, 3, 4);
        let ch: Vec<_> = resnet.units.iter().map(|u| u.out_channels).collect();
        assert_eq!(ch, [64, 128, 128, 128]);
        assert!(resnet.units[0].has_projection());
        assert!(!resnet.units[2].has_projection());
        resnet.validate().unwrap();
    }

    #[test]
    fn adapters_follow_channel_walk() {
        let spec = NetworkSpec::resnet(1, 2, 5);
        let plan = GatePlan::skipping(&spec, &[2, 3]).unwrap();
        assert!(!plan.has_adapters());
        assert_eq!(plan.output_channels(&spec), 128);

        let plan = GatePlan::skipping(&spec, &[0]).unwrap();
        assert_eq!(
            plan.adapter(1),
            Some(AdapterSpec {
                in_channels: 1,
                out_channels: 64
            })
        );
        let plan = GatePlan::skipping(&spec, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(plan.output_channels(&spec), 1);
        assert!(GatePlan::skipping(&spec, &[5]).is_err());
    }
}
