//! The predicate language clients use to describe what they want preserved.
//!
//! A predicate takes one of three forms, one per way of looking at a
//! resource:
//!
//! * [`Predicate::Quantity`]: some number of interchangeable units of a type
//!   (a stock level, an account balance, "any economy seat").
//! * [`Predicate::Named`]: one specific instance, addressed by identifier.
//! * [`Predicate::Property`]: some number of instances of a type whose
//!   properties satisfy a list of constraints. Constraints on ordered
//!   properties may ask for a minimum level rather than an exact value.
//!
//! Validation ([`validate_predicate`]) checks shape against the catalog
//! schema only. Whether the predicate can actually be honoured is the
//! feasibility checker's business.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogSchema, InstanceRecord};

/// Name of a resource type, e.g. `pink-widget` or `room`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceTypeId(String);

impl ResourceTypeId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ResourceTypeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for ResourceTypeId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl fmt::Display for ResourceTypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifier of one resource instance. Ordering is lexicographic on
/// `(resource_type, key)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct InstanceId {
    pub resource_type: ResourceTypeId,
    pub key: String,
}

impl InstanceId {
    pub fn new(resource_type: impl Into<ResourceTypeId>, key: impl Into<String>) -> Self {
        Self {
            resource_type: resource_type.into(),
            key: key.into(),
        }
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.resource_type, self.key)
    }
}

/// A property value.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Str(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Str(s) => write!(f, "{s:?}"),
        }
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Str(v.to_owned())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparator {
    Equals,
    /// Instance level must be at or above the requested level in the
    /// property's declared order.
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PropertyConstraint {
    pub property_name: String,
    pub comparator: Comparator,
    pub value: Scalar,
}

impl PropertyConstraint {
    pub fn equals(property: impl Into<String>, value: impl Into<Scalar>) -> Self {
        Self {
            property_name: property.into(),
            comparator: Comparator::Equals,
            value: value.into(),
        }
    }

    pub fn at_least(property: impl Into<String>, value: impl Into<Scalar>) -> Self {
        Self {
            property_name: property.into(),
            comparator: Comparator::AtLeast,
            value: value.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predicate {
    #[serde(rename_all = "kebab-case")]
    Quantity {
        resource_type: ResourceTypeId,
        amount: u64,
    },
    #[serde(rename_all = "kebab-case")]
    Named { instance: InstanceId },
    #[serde(rename_all = "kebab-case")]
    Property {
        resource_type: ResourceTypeId,
        constraints: Vec<PropertyConstraint>,
        amount: u64,
    },
}

impl Predicate {
    pub fn quantity(resource_type: impl Into<ResourceTypeId>, amount: u64) -> Self {
        Predicate::Quantity {
            resource_type: resource_type.into(),
            amount,
        }
    }

    pub fn named(instance: InstanceId) -> Self {
        Predicate::Named { instance }
    }

    pub fn property(
        resource_type: impl Into<ResourceTypeId>,
        constraints: Vec<PropertyConstraint>,
        amount: u64,
    ) -> Self {
        Predicate::Property {
            resource_type: resource_type.into(),
            constraints,
            amount,
        }
    }

    pub fn resource_type(&self) -> &ResourceTypeId {
        match self {
            Predicate::Quantity { resource_type, .. }
            | Predicate::Property { resource_type, .. } => resource_type,
            Predicate::Named { instance } => &instance.resource_type,
        }
    }

    /// Number of supply units this predicate claims.
    pub fn amount(&self) -> u64 {
        match self {
            Predicate::Quantity { amount, .. } | Predicate::Property { amount, .. } => *amount,
            Predicate::Named { .. } => 1,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Quantity {
                resource_type,
                amount,
            } => write!(f, "quantity({resource_type} >= {amount})"),
            Predicate::Named { instance } => write!(f, "named({instance})"),
            Predicate::Property {
                resource_type,
                constraints,
                amount,
            } => {
                write!(f, "property({resource_type} x{amount}")?;
                for c in constraints {
                    let op = match c.comparator {
                        Comparator::Equals => "=",
                        Comparator::AtLeast => ">=",
                    };
                    write!(f, ", {} {op} {}", c.property_name, c.value)?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum PredicateError {
    #[error("unknown resource type `{0}`")]
    UnknownResourceType(ResourceTypeId),
    #[error("resource type `{0}` has no property `{1}`")]
    UnknownProperty(ResourceTypeId, String),
    #[error("property `{0}` is unordered; at-least is not allowed")]
    IllegalComparator(String),
    #[error("amount must be at least 1")]
    NonPositiveAmount,
    #[error("property predicate needs at least one constraint")]
    EmptyConstraints,
    #[error("property `{0}` constrained more than once")]
    DuplicateProperty(String),
    #[error("instance key is empty")]
    EmptyInstanceKey,
    #[error("quantity predicates are evaluated against pool counts, not instances")]
    FormMismatch,
}

/// Checks that `p` is well formed against `schema`.
pub fn validate_predicate(p: &Predicate, schema: &CatalogSchema) -> Result<(), PredicateError> {
    let ty = p.resource_type();
    let decl = schema
        .get(ty)
        .ok_or_else(|| PredicateError::UnknownResourceType(ty.clone()))?;
    match p {
        Predicate::Quantity { amount, .. } => {
            if *amount == 0 {
                return Err(PredicateError::NonPositiveAmount);
            }
        }
        Predicate::Named { instance } => {
            if instance.key.is_empty() {
                return Err(PredicateError::EmptyInstanceKey);
            }
        }
        Predicate::Property {
            constraints,
            amount,
            ..
        } => {
            if *amount == 0 {
                return Err(PredicateError::NonPositiveAmount);
            }
            if constraints.is_empty() {
                return Err(PredicateError::EmptyConstraints);
            }
            for (i, c) in constraints.iter().enumerate() {
                if constraints[..i]
                    .iter()
                    .any(|o| o.property_name == c.property_name)
                {
                    return Err(PredicateError::DuplicateProperty(c.property_name.clone()));
                }
                let domain = decl.properties.get(&c.property_name).ok_or_else(|| {
                    PredicateError::UnknownProperty(ty.clone(), c.property_name.clone())
                })?;
                if c.comparator == Comparator::AtLeast && !domain.is_ordered() {
                    return Err(PredicateError::IllegalComparator(c.property_name.clone()));
                }
            }
        }
    }
    Ok(())
}

/// Evaluates a Named or Property predicate against one instance.
///
/// Availability status is not consulted here; the feasibility checker
/// decides which instances are usable at all.
pub fn satisfies(
    instance: &InstanceRecord,
    p: &Predicate,
    schema: &CatalogSchema,
) -> Result<bool, PredicateError> {
    match p {
        Predicate::Quantity { .. } => Err(PredicateError::FormMismatch),
        Predicate::Named { instance: wanted } => Ok(*wanted == instance.id),
        Predicate::Property {
            resource_type,
            constraints,
            ..
        } => {
            if *resource_type != instance.id.resource_type {
                return Ok(false);
            }
            Ok(constraints
                .iter()
                .all(|c| constraint_holds(instance, resource_type, c, schema)))
        }
    }
}

fn constraint_holds(
    instance: &InstanceRecord,
    ty: &ResourceTypeId,
    c: &PropertyConstraint,
    schema: &CatalogSchema,
) -> bool {
    let Some(actual) = instance.properties.get(&c.property_name) else {
        return false;
    };
    match c.comparator {
        Comparator::Equals => *actual == c.value,
        Comparator::AtLeast => schema
            .property(ty, &c.property_name)
            .and_then(|d| d.compare(actual, &c.value))
            .is_some_and(|o| o != Ordering::Less),
    }
}
