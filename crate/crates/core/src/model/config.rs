// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_mlp: 128,
            context_length: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("context_length", self.context_length),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every hookable site, in forward order.
    pub fn sites(&self) -> Vec<Site> {
        (0..self.n_layers)
            .flat_map(|l| SiteKind::ALL.iter().map(move |&kind| Site::new(l, kind)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    ResidPre,
    AttnOut,
    MlpOut,
    ResidPost,
}

impl SiteKind {
    pub const ALL: [SiteKind; 4] = [
        SiteKind::ResidPre,
        SiteKind::AttnOut,
        SiteKind::MlpOut,
        SiteKind::ResidPost,
    ];

    fn hook(self) -> &'static str {
        match self {
            SiteKind::ResidPre => "hook_resid_pre",
            SiteKind::AttnOut => "hook_attn_out",
            SiteKind::MlpOut => "hook_mlp_out",
            SiteKind::ResidPost => "hook_resid_post",
        }
    }
}

/// A hook point: one sub-module output in one layer.
///
/// Ordering follows the forward pass (`resid_pre < attn_out < mlp_out <
/// resid_post`, then the next layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Site {
    pub layer: usize,
    pub kind: SiteKind,
}

impl Site {
    pub const fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }

    pub const fn resid_pre(layer: usize) -> Self {
        Self::new(layer, SiteKind::ResidPre)
    }

    pub const fn attn_out(layer: usize) -> Self {
        Self::new(layer, SiteKind::AttnOut)
    }

    pub const fn mlp_out(layer: usize) -> Self {
        Self::new(layer, SiteKind::MlpOut)
    }

    pub const fn resid_post(layer: usize) -> Self {
        Self::new(layer, SiteKind::ResidPost)
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(Error::BadSite(self.to_string()));
        }
        Ok(())
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.layer, self.kind.hook())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadSite(s.to_owned());
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (layer, hook) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        let kind = SiteKind::ALL
            .into_iter()
            .find(|k| k.hook() == hook)
            .ok_or_else(bad)?;
        Ok(Site::new(layer, kind))
    }
}

impl TryFrom<String> for Site {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Site> for String {
    fn from(s: Site) -> String {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_checked() {
        let cfg = ModelConfig {
            d_model: 33,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn site_names_round_trip() {
        for site in ModelConfig::default().sites() {
            assert_eq!(site.to_string().parse::<Site>().unwrap(), site);
        }
        assert!("blocks.x.hook_mlp_out".parse::<Site>().is_err());
        assert!(Site::resid_post(0) < Site::resid_pre(1));
        assert!(Site::attn_out(0) < Site::mlp_out(0));
    }
}
