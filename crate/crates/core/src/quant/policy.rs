use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{BitWidth, CodecError, QuantMode};
use crate::nn::{GradSet, ModelSpec, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub layer_index: usize,
    pub role: Role,
    pub bits: BitWidth,
    pub mode: QuantMode,
}

/// Per-tensor `(bits, mode)` assignment. Each `(layer_index, role)` appears at most once.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<PolicyEntry>", into = "Vec<PolicyEntry>")]
pub struct QuantPolicy {
    entries: Vec<PolicyEntry>,
}

impl TryFrom<Vec<PolicyEntry>> for QuantPolicy {
    type Error = CodecError;

    fn try_from(entries: Vec<PolicyEntry>) -> Result<Self, CodecError> {
        QuantPolicy::new(entries)
    }
}

impl From<QuantPolicy> for Vec<PolicyEntry> {
    fn from(p: QuantPolicy) -> Self {
        p.entries
    }
}

impl QuantPolicy {
    pub fn new(entries: Vec<PolicyEntry>) -> Result<Self, CodecError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert((e.layer_index, e.role)) {
                return Err(CodecError::PolicyDuplicate {
                    layer_index: e.layer_index,
                    role: e.role,
                });
            }
        }
        Ok(Self { entries })
    }

    /// Same `(bits, mode)` for every tensor of the model.
    pub fn uniform(spec: &ModelSpec, bits: BitWidth, mode: QuantMode) -> Self {
        Self::by_ordinal(spec, |_| (bits, mode))
    }

    /// Alternates `(int8, SCALED)` and `(int16, MIN_COMBINED)` over the model's
    /// parameterized layers, starting with int8 for the first one.
    pub fn mixed(spec: &ModelSpec) -> Self {
        Self::by_ordinal(spec, |k| {
            if k % 2 == 0 {
                (BitWidth::Int8, QuantMode::Scaled)
            } else {
                (BitWidth::Int16, QuantMode::MinCombined)
            }
        })
    }

    /// Builds a policy from a rule over the parameterized-layer ordinal (0, 1, ...).
    pub fn by_ordinal(spec: &ModelSpec, rule: impl Fn(usize) -> (BitWidth, QuantMode)) -> Self {
        let mut entries = Vec::new();
        let mut ordinal = 0;
        let mut last_layer = None;
        for (layer_index, role, _) in spec.param_layout() {
            if last_layer.is_some_and(|l| l != layer_index) {
                ordinal += 1;
            }
            last_layer = Some(layer_index);
            let (bits, mode) = rule(ordinal);
            entries.push(PolicyEntry {
                layer_index,
                role,
                bits,
                mode,
            });
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[PolicyEntry] {
        &self.entries
    }

    pub fn lookup(&self, layer_index: usize, role: Role) -> Option<&PolicyEntry> {
        self.entries
            .iter()
            .find(|e| e.layer_index == layer_index && e.role == role)
    }

    /// Errors naming the first tensor of `g` without an entry.
    pub fn check_covers(&self, g: &GradSet) -> Result<(), CodecError> {
        match g.iter().find(|e| self.lookup(e.layer_index, e.role).is_none()) {
            Some(e) => Err(CodecError::PolicyGap {
                layer_index: e.layer_index,
                role: e.role,
            }),
            None => Ok(()),
        }
    }

    /// Number of distinct layers the policy assigns modes to.
    pub fn layers(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.layer_index)
            .collect::<HashSet<_>>()
            .len()
    }

    /// Distinct modes in use.
    pub fn modes(&self) -> usize {
        self.entries.iter().map(|e| e.mode).collect::<HashSet<_>>().len()
    }
}

/// Policy choice as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    /// Alternating int8/SCALED and int16/MIN_COMBINED by layer.
    #[default]
    Mixed,
    Uniform { bits: BitWidth, mode: QuantMode },
    Explicit { entries: Vec<PolicyEntry> },
}

impl PolicyConfig {
    pub fn resolve(&self, spec: &ModelSpec) -> Result<QuantPolicy, CodecError> {
        match self {
            PolicyConfig::Mixed => Ok(QuantPolicy::mixed(spec)),
            PolicyConfig::Uniform { bits, mode } => Ok(QuantPolicy::uniform(spec, *bits, *mode)),
            PolicyConfig::Explicit { entries } => QuantPolicy::new(entries.clone()),
        }
    }
}
