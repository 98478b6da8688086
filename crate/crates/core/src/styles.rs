use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The 22 speaking styles the default bank and synthetic corpus cover.
pub const DEFAULT_STYLES: [&str; 22] = [
    "angry",
    "awe",
    "bored",
    "calm",
    "confused",
    "desire",
    "disgusted",
    "enunciated",
    "excited",
    "fast",
    "fearful",
    "frustrated",
    "happy",
    "laughing",
    "neutral",
    "projected",
    "sad",
    "sarcastic",
    "sleepy",
    "surprised",
    "sympathetic",
    "whispered",
];

/// Index of a style within a [`StyleRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleId(pub u16);

impl StyleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Ordered, unique, lowercase style names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct StyleRegistry {
    names: Vec<String>,
}

impl StyleRegistry {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("style registry is empty".into()));
        }
        if names.len() > u16::MAX as usize {
            return Err(Error::Config("too many styles".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || *n != n.to_lowercase() {
                return Err(Error::Config(format!(
                    "style name {n:?} must be nonempty lowercase"
                )));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate style name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: StyleId) -> Result<&str> {
        self.names
            .get(id.index())
            .map(String::as_str)
            .ok_or(Error::Bounds {
                what: "style",
                index: id.index(),
                len: self.names.len(),
            })
    }

    pub fn id(&self, name: &str) -> Result<StyleId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| StyleId(i as u16))
            .ok_or_else(|| Error::Lookup {
                what: "style",
                key: name.to_string(),
            })
    }

    pub fn ids(&self) -> impl Iterator<Item = StyleId> + '_ {
        (0..self.names.len()).map(|i| StyleId(i as u16))
    }
}

impl Default for StyleRegistry {
    fn default() -> Self {
        Self {
            names: DEFAULT_STYLES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<Vec<String>> for StyleRegistry {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<StyleRegistry> for Vec<String> {
    fn from(r: StyleRegistry) -> Self {
        r.names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_registry_has_22_unique_styles() {
        let r = StyleRegistry::default();
        assert_eq!(r.len(), 22);
        assert!(StyleRegistry::new(r.names().to_vec()).is_ok());
        assert_eq!(r.id("whispered").unwrap(), StyleId(21));
        assert_eq!(r.name(StyleId(0)).unwrap(), "angry");
    }

    #[test]
    fn rejects_duplicates_and_uppercase() {
        assert!(StyleRegistry::new(["a", "a"]).is_err());
        assert!(StyleRegistry::new(["Angry"]).is_err());
        assert!(matches!(
            StyleRegistry::default().id("nope"),
            Err(Error::Lookup { .. })
        ));
    }
}
