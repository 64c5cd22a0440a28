//! Ablated and conditional assemblies of the generator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::generator::{Generator, ModelConfig};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VariantKind {
    #[default]
    Full,
    /// Foreground pasted without a spatial transformer.
    NoTransform,
    /// No mask generator; the warped foreground is pasted with a hard mask.
    NoMask,
    /// Encoder-driven reconstruction of a given image.
    Conditional,
}

impl VariantKind {
    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::NoTransform => "no_transform",
            VariantKind::NoMask => "no_mask",
            VariantKind::Conditional => "conditional",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => VariantKind::Full,
            "no_transform" => VariantKind::NoTransform,
            "no_mask" => VariantKind::NoMask,
            "conditional" => VariantKind::Conditional,
            other => return Err(Error::Config(format!("unknown variant `{other}`"))),
        })
    }
}

/// A variant request on top of a base configuration.
#[derive(Clone, Debug)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub base: ModelConfig,
    pub lambda_rec: f64,
}

impl VariantSpec {
    pub fn new(kind: VariantKind, base: ModelConfig) -> Self {
        let lambda_rec = base.lambda_rec;
        Self { kind, base, lambda_rec }
    }

    pub fn config(&self) -> Result<ModelConfig> {
        if self.base.variant != VariantKind::Full && self.base.variant != self.kind {
            return Err(Error::Config(format!(
                "base configuration is already the `{}` variant, cannot build `{}`",
                self.base.variant, self.kind
            )));
        }
        if self.kind == VariantKind::Conditional && !(self.lambda_rec.is_finite() && self.lambda_rec >= 0.0) {
            return Err(Error::Config(format!("lambda_rec must be finite and non-negative, got {}", self.lambda_rec)));
        }
        let mut c = self.base.clone();
        c.variant = self.kind;
        c.lambda_rec = self.lambda_rec;
        c.validate()?;
        Ok(c)
    }
}

/// Builds the generator for `spec`, registering its parameters in `store`.
pub fn build_variant<S: Scalar, R: Rng>(spec: &VariantSpec, store: &mut ParamStore<S>, rng: &mut R) -> Result<Generator> {
    Generator::new(spec.config()?, store, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Dataset;

    #[test]
    fn names_round_trip() {
        for k in [VariantKind::Full, VariantKind::NoTransform, VariantKind::NoMask, VariantKind::Conditional] {
            assert_eq!(k.name().parse::<VariantKind>().unwrap(), k);
        }
        assert!("no-mask".parse::<VariantKind>().is_ok());
        assert!("nomask".parse::<VariantKind>().is_err());
    }

    #[test]
    fn conflicting_base_is_rejected() {
        let mut base = ModelConfig::preset(Dataset::MnistOne);
        base.variant = VariantKind::NoMask;
        assert!(VariantSpec::new(VariantKind::NoTransform, base).config().is_err());
    }
}
