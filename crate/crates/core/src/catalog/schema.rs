//! Declared resource types and the domains of their properties.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::predicate::{ResourceTypeId, Scalar};

/// The set of values a property may take.
///
/// `Int` and ordered `Enum` domains carry a total order, which is what makes
/// the `at-least` comparator legal on them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PropertyDomain {
    /// Any scalar, unordered.
    Any,
    Bool,
    Int {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<i64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<i64>,
    },
    /// An enumerated domain. When `ordered` is set, `values` lists the levels
    /// from least to most acceptable.
    Enum {
        values: Vec<Scalar>,
        #[serde(default)]
        ordered: bool,
    },
}

impl PropertyDomain {
    pub fn contains(&self, value: &Scalar) -> bool {
        match (self, value) {
            (PropertyDomain::Any, _) => true,
            (PropertyDomain::Bool, Scalar::Bool(_)) => true,
            (PropertyDomain::Int { min, max }, Scalar::Int(v)) => {
                min.is_none_or(|m| *v >= m) && max.is_none_or(|m| *v <= m)
            }
            (PropertyDomain::Enum { values, .. }, v) => values.contains(v),
            _ => false,
        }
    }

    pub fn is_ordered(&self) -> bool {
        match self {
            PropertyDomain::Int { .. } => true,
            PropertyDomain::Enum { ordered, .. } => *ordered,
            _ => false,
        }
    }

    /// Compares two values under the declared order. `None` when the domain is
    /// unordered or either value has no position in the order.
    pub fn compare(&self, a: &Scalar, b: &Scalar) -> Option<Ordering> {
        match self {
            PropertyDomain::Int { .. } => match (a, b) {
                (Scalar::Int(a), Scalar::Int(b)) => Some(a.cmp(b)),
                _ => None,
            },
            PropertyDomain::Enum { values, ordered: true } => {
                let ia = values.iter().position(|v| v == a)?;
                let ib = values.iter().position(|v| v == b)?;
                Some(ia.cmp(&ib))
            }
            _ => None,
        }
    }

    fn check(&self) -> Result<(), String> {
        match self {
            PropertyDomain::Int {
                min: Some(lo),
                max: Some(hi),
            } if lo > hi => Err(format!("empty integer range {lo}..={hi}")),
            PropertyDomain::Enum { values, .. } => {
                for (i, v) in values.iter().enumerate() {
                    if values[..i].contains(v) {
                        return Err(format!("duplicate enum level {v}"));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeDecl {
    #[serde(default)]
    pub properties: BTreeMap<String, PropertyDomain>,
}

/// Resource types known to a catalog, keyed by type name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CatalogSchema {
    pub types: BTreeMap<ResourceTypeId, TypeDecl>,
}

impl CatalogSchema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_type(mut self, name: impl Into<ResourceTypeId>, decl: TypeDecl) -> Self {
        self.types.insert(name.into(), decl);
        self
    }

    pub fn get(&self, ty: &ResourceTypeId) -> Option<&TypeDecl> {
        self.types.get(ty)
    }

    pub fn property(&self, ty: &ResourceTypeId, property: &str) -> Option<&PropertyDomain> {
        self.types.get(ty)?.properties.get(property)
    }

    /// Checks internal consistency: non-empty type names, sane domains, and
    /// strict orders (no repeated levels) for ordered enums.
    pub fn check(&self) -> Result<(), String> {
        for (ty, decl) in &self.types {
            if ty.as_str().is_empty() {
                return Err("resource type with empty name".into());
            }
            for (name, domain) in &decl.properties {
                domain
                    .check()
                    .map_err(|e| format!("property {ty}.{name}: {e}"))?;
            }
        }
        Ok(())
    }
}

impl TypeDecl {
    pub fn with_property(mut self, name: impl Into<String>, domain: PropertyDomain) -> Self {
        self.properties.insert(name.into(), domain);
        self
    }
}
