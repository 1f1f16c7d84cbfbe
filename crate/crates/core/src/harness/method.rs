use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Which value function drives one granularity of guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    None,
    Implicit,
    Explicit,
}

impl ValueKind {
    pub const ALL: [ValueKind; 3] = [ValueKind::None, ValueKind::Implicit, ValueKind::Explicit];

    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::None => "none",
            ValueKind::Implicit => "implicit",
            ValueKind::Explicit => "explicit",
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            ValueKind::None => "",
            ValueKind::Implicit => "i",
            ValueKind::Explicit => "e",
        }
    }
}

impl FromStr for ValueKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ValueKind::None),
            "implicit" | "i" => Ok(ValueKind::Implicit),
            "explicit" | "e" => Ok(ValueKind::Explicit),
            _ => Err(Error::Config(format!("unknown value function {s:?} (none, implicit, explicit)"))),
        }
    }
}

/// A decoding method.
///
/// `Combo` covers the 3×3 grid: `token` guides next-token sampling, `chunk`
/// ranks chunk-level beam search (`None` meaning a single token-wise sample).
/// `BestOfN` reranks `N` unguided samples by one value function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodId {
    BestOfN(ValueKind),
    Combo { token: ValueKind, chunk: ValueKind },
}

impl MethodId {
    pub const BASE: MethodId = MethodId::Combo { token: ValueKind::None, chunk: ValueKind::None };
    pub const IVG: MethodId = MethodId::Combo { token: ValueKind::Implicit, chunk: ValueKind::Explicit };

    /// The eight named methods.
    pub fn named() -> [MethodId; 8] {
        use ValueKind::*;
        [
            MethodId::BASE,
            MethodId::BestOfN(Implicit),
            MethodId::BestOfN(Explicit),
            MethodId::Combo { token: Implicit, chunk: None },
            MethodId::Combo { token: Explicit, chunk: None },
            MethodId::Combo { token: None, chunk: Implicit },
            MethodId::Combo { token: None, chunk: Explicit },
            MethodId::IVG,
        ]
    }

    pub fn combo(token: ValueKind, chunk: ValueKind) -> Self {
        MethodId::Combo { token, chunk }
    }

    pub fn token_vf(self) -> ValueKind {
        match self {
            MethodId::BestOfN(_) => ValueKind::None,
            MethodId::Combo { token, .. } => token,
        }
    }

    /// The sequence ranker, for Best-of-N as well as beam search.
    pub fn chunk_vf(self) -> ValueKind {
        match self {
            MethodId::BestOfN(v) => v,
            MethodId::Combo { chunk, .. } => chunk,
        }
    }

    pub fn uses_beta(self) -> bool {
        self.token_vf() != ValueKind::None
    }

    pub fn name(self) -> String {
        use ValueKind::*;
        match self {
            MethodId::BestOfN(v) => format!("bon_{}", v.suffix()),
            MethodId::Combo { token: None, chunk: None } => "base".into(),
            MethodId::Combo { token: Implicit, chunk: Explicit } => "ivg".into(),
            MethodId::Combo { token, chunk: None } => format!("eft_{}", token.suffix()),
            MethodId::Combo { token: None, chunk } => format!("cbs_{}", chunk.suffix()),
            MethodId::Combo { token, chunk } => format!("eft_{}+cbs_{}", token.suffix(), chunk.suffix()),
        }
    }

    fn validate(self) -> Result<Self> {
        if self == MethodId::BestOfN(ValueKind::None) {
            return Err(Error::Config("best-of-n needs an implicit or explicit ranker".into()));
        }
        Ok(self)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    /// Accepts the names produced by [`MethodId::name`] and `token/chunk`
    /// pairs such as `implicit/explicit`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some((t, c)) = s.split_once('/') {
            return Ok(MethodId::combo(t.parse()?, c.parse()?));
        }
        if let Some(v) = s.strip_prefix("bon_") {
            return MethodId::BestOfN(v.parse()?).validate();
        }
        if let Some((t, c)) = s.split_once('+') {
            let token = t.strip_prefix("eft_").ok_or_else(|| Error::Config(format!("unknown method {s:?}")))?;
            let chunk = c.strip_prefix("cbs_").ok_or_else(|| Error::Config(format!("unknown method {s:?}")))?;
            return Ok(MethodId::combo(token.parse()?, chunk.parse()?));
        }
        match s {
            "base" => Ok(MethodId::BASE),
            "ivg" => Ok(MethodId::IVG),
            _ => {
                if let Some(v) = s.strip_prefix("eft_") {
                    Ok(MethodId::combo(v.parse()?, ValueKind::None))
                } else if let Some(v) = s.strip_prefix("cbs_") {
                    Ok(MethodId::combo(ValueKind::None, v.parse()?))
                } else {
                    Err(Error::Config(format!("unknown method {s:?}")))
                }
            }
        }
    }
}

impl Serialize for MethodId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for MethodId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
