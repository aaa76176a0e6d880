use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolverKind {
    Identity,
    GradNorm,
    MgdaUb,
    ImtlG,
    CaGrad,
    GradDrop,
    PcGrad,
}

impl ResolverKind {
    pub const ALL: [ResolverKind; 7] = [
        ResolverKind::Identity,
        ResolverKind::GradNorm,
        ResolverKind::MgdaUb,
        ResolverKind::ImtlG,
        ResolverKind::CaGrad,
        ResolverKind::GradDrop,
        ResolverKind::PcGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResolverKind::Identity => "identity",
            ResolverKind::GradNorm => "gradnorm",
            ResolverKind::MgdaUb => "mgda_ub",
            ResolverKind::ImtlG => "imtl_g",
            ResolverKind::CaGrad => "cagrad",
            ResolverKind::GradDrop => "graddrop",
            ResolverKind::PcGrad => "pcgrad",
        }
    }

    /// Resolvers that rescale rows, as opposed to editing their directions.
    pub fn is_magnitude_aware(self) -> bool {
        matches!(
            self,
            ResolverKind::GradNorm | ResolverKind::MgdaUb | ResolverKind::ImtlG | ResolverKind::CaGrad
        )
    }

    pub fn default_alpha(self) -> f64 {
        match self {
            ResolverKind::CaGrad => 0.4,
            _ => 0.0,
        }
    }
}

impl FromStr for ResolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let kind = match norm.as_str() {
            "identity" | "none" => ResolverKind::Identity,
            "gradnorm" | "gn" => ResolverKind::GradNorm,
            "mgda_ub" | "mgda" => ResolverKind::MgdaUb,
            "imtl_g" | "imtl" => ResolverKind::ImtlG,
            "cagrad" | "cg" => ResolverKind::CaGrad,
            "graddrop" | "gd" => ResolverKind::GradDrop,
            "pcgrad" | "pg" => ResolverKind::PcGrad,
            _ => return Err(Error::invalid(format!("unknown resolver `{s}`"))),
        };
        Ok(kind)
    }
}

/// A resolver and its hyperparameter (GradNorm asymmetry or CAGrad radius).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolverConfig {
    pub kind: ResolverKind,
    pub alpha: f64,
}

impl ResolverConfig {
    pub fn new(kind: ResolverKind, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("resolver alpha must be >= 0, got {alpha}")));
        }
        Ok(Self { kind, alpha })
    }

    pub fn identity() -> Self {
        Self {
            kind: ResolverKind::Identity,
            alpha: 0.0,
        }
    }

    pub fn of(kind: ResolverKind) -> Self {
        Self {
            kind,
            alpha: kind.default_alpha(),
        }
    }
}

impl FromStr for ResolverConfig {
    type Err = Error;

    /// `kind` or `kind:alpha=<value>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (s, None),
        };
        let kind: ResolverKind = name.parse()?;
        let mut alpha = kind.default_alpha();
        if let Some(rest) = rest {
            for kv in rest.split(',').filter(|p| !p.trim().is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::invalid(format!("expected key=value in `{kv}`")))?;
                match k.trim() {
                    "alpha" | "c" => {
                        alpha = v
                            .trim()
                            .parse()
                            .map_err(|_| Error::invalid(format!("bad alpha `{v}`")))?;
                    }
                    other => return Err(Error::invalid(format!("unknown resolver option `{other}`"))),
                }
            }
        }
        ResolverConfig::new(kind, alpha)
    }
}

impl fmt::Display for ResolverConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.alpha != self.kind.default_alpha() {
            write!(f, "{}:alpha={}", self.kind.name(), self.alpha)
        } else {
            f.write_str(self.kind.name())
        }
    }
}

/// Resolvers applied in order, e.g. `gradnorm:alpha=1+pcgrad`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolverChain(Vec<ResolverConfig>);

impl ResolverChain {
    pub fn new(stages: Vec<ResolverConfig>) -> Self {
        if stages.is_empty() {
            Self(vec![ResolverConfig::identity()])
        } else {
            Self(stages)
        }
    }

    pub fn identity() -> Self {
        Self(vec![ResolverConfig::identity()])
    }

    pub fn single(cfg: ResolverConfig) -> Self {
        Self(vec![cfg])
    }

    pub fn stages(&self) -> &[ResolverConfig] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|c| c.kind == ResolverKind::Identity)
    }
}

impl FromStr for ResolverChain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(Self::identity());
        }
        let stages = s
            .split('+')
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<ResolverConfig>>>()?;
        Ok(Self::new(stages))
    }
}

impl fmt::Display for ResolverChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("+"))
    }
}
