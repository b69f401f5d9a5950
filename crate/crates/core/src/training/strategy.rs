use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::ScaleMode;

/// How the domain stage treats the general-trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No domain training.
    Base,
    /// Every parameter trainable.
    Full,
    /// Adapters trained on the domain task only.
    LoraMu,
    /// Adapters trained on the general task, then further on the domain task.
    LoraNuMu,
    /// Adapters plus an importance-weighted pull back to the base weights.
    #[serde(rename = "ewclora")]
    EwcLora,
    /// Adapters with the `α/√r` scale.
    #[serde(rename = "rslora")]
    RsLora,
    /// Non-core scalars trained; core scalars frozen and/or anchored.
    Selective,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Base,
        Strategy::Full,
        Strategy::LoraMu,
        Strategy::LoraNuMu,
        Strategy::EwcLora,
        Strategy::RsLora,
        Strategy::Selective,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Full => "full",
            Strategy::LoraMu => "lora_mu",
            Strategy::LoraNuMu => "lora_nu_mu",
            Strategy::EwcLora => "ewclora",
            Strategy::RsLora => "rslora",
            Strategy::Selective => "selective",
        }
    }

    pub fn uses_adapters(self) -> bool {
        matches!(
            self,
            Strategy::LoraMu | Strategy::LoraNuMu | Strategy::EwcLora | Strategy::RsLora
        )
    }

    /// Adapter scale rule, for adapter strategies.
    pub fn scale_mode(self) -> Option<ScaleMode> {
        match self {
            Strategy::RsLora => Some(ScaleMode::RankStabilized),
            s if s.uses_adapters() => Some(ScaleMode::Standard),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
                Error::Config(format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.as_str()));
        }
        assert!("lora".parse::<Strategy>().is_err());
    }
}
