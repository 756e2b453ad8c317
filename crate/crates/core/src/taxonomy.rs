//! Speaker-characteristic taxonomy: ordered groups (Accent, Gender, ...)
//! each holding an ordered list of values.

use serde::{Deserialize, Serialize};

use crate::error::{PiwError, Result};

/// Group id reserved for the whole-dataset baseline adapter. It never
/// appears in a taxonomy, so characteristic-driven selection cannot pick it.
pub const BASELINE_GROUP: &str = "_baseline";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyGroup {
    pub group: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CharacteristicTaxonomy {
    pub groups: Vec<TaxonomyGroup>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl CharacteristicTaxonomy {
    pub fn new(groups: Vec<(&str, Vec<&str>)>) -> Result<Self> {
        let t = Self {
            groups: groups
                .into_iter()
                .map(|(g, vs)| TaxonomyGroup {
                    group: g.to_string(),
                    values: vs.into_iter().map(str::to_string).collect(),
                })
                .collect(),
        };
        t.validate()?;
        Ok(t)
    }

    /// Group ids must be unique (and not reserved); value ids must be unique
    /// within their group. Ids are restricted to filename-safe characters
    /// because each (group, value) pair names a profile file on disk.
    pub fn validate(&self) -> Result<()> {
        let mut seen_groups = std::collections::BTreeSet::new();
        for g in &self.groups {
            if g.group == BASELINE_GROUP {
                return Err(PiwError::Taxonomy {
                    message: format!("group id `{BASELINE_GROUP}` is reserved"),
                });
            }
            if !valid_id(&g.group) {
                return Err(PiwError::Taxonomy {
                    message: format!("invalid group id `{}`", g.group),
                });
            }
            if !seen_groups.insert(&g.group) {
                return Err(PiwError::Taxonomy {
                    message: format!("duplicate group id `{}`", g.group),
                });
            }
            let mut seen_values = std::collections::BTreeSet::new();
            for v in &g.values {
                if !valid_id(v) {
                    return Err(PiwError::Taxonomy {
                        message: format!("invalid value id `{v}` in group `{}`", g.group),
                    });
                }
                if !seen_values.insert(v) {
                    return Err(PiwError::Taxonomy {
                        message: format!("duplicate value `{v}` in group `{}`", g.group),
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of characteristic groups (the K of the overhead model).
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Total profile count across all groups.
    pub fn total_values(&self) -> usize {
        self.groups.iter().map(|g| g.values.len()).sum()
    }

    pub fn group(&self, id: &str) -> Option<&TaxonomyGroup> {
        self.groups.iter().find(|g| g.group == id)
    }

    pub fn has_value(&self, group: &str, value: &str) -> bool {
        self.group(group)
            .map(|g| g.values.iter().any(|v| v == value))
            .unwrap_or(false)
    }

    /// All (group, value) pairs in taxonomy order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.groups.iter().flat_map(|g| {
            g.values
                .iter()
                .map(move |v| (g.group.as_str(), v.as_str()))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let t =
            CharacteristicTaxonomy::new(vec![("Gender", vec!["m", "f"]), ("Accent", vec!["a", "b", "c"])])
                .unwrap();
        assert_eq!(t.group_count(), 2);
        assert_eq!(t.total_values(), 5);
        assert_eq!(t.pairs().count(), 5);
    }

    #[test]
    fn duplicate_value_rejected() {
        assert!(CharacteristicTaxonomy::new(vec![("Accent", vec!["a", "a"])]).is_err());
    }

    #[test]
    fn duplicate_group_rejected() {
        assert!(
            CharacteristicTaxonomy::new(vec![("Accent", vec!["a"]), ("Accent", vec!["b"])])
                .is_err()
        );
    }

    #[test]
    fn reserved_group_rejected() {
        assert!(CharacteristicTaxonomy::new(vec![(BASELINE_GROUP, vec!["x"])]).is_err());
    }

    #[test]
    fn empty_taxonomy_is_valid() {
        let t = CharacteristicTaxonomy::default();
        t.validate().unwrap();
        assert_eq!(t.total_values(), 0);
    }

    #[test]
    fn json_shape_is_a_group_array() {
        let t = CharacteristicTaxonomy::new(vec![("Gender", vec!["m", "f"])]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"[{"group":"Gender","values":["m","f"]}]"#);
    }
}
