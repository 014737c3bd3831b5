use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CatalogError, CatalogSchema, InstanceRecord, InstanceStatus};
use crate::predicate::{InstanceId, ResourceTypeId, Scalar};

/// On-disk catalog: schema, pool counts, and instances. See `docs/formats.md`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CatalogDocument {
    #[serde(default)]
    pub types: CatalogSchema,
    #[serde(default)]
    pub pools: BTreeMap<ResourceTypeId, u64>,
    #[serde(default)]
    pub instances: Vec<InstanceDoc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct InstanceDoc {
    pub resource_type: ResourceTypeId,
    pub key: String,
    #[serde(default = "available")]
    pub status: InstanceStatus,
    #[serde(default)]
    pub properties: BTreeMap<String, Scalar>,
}

fn available() -> InstanceStatus {
    InstanceStatus::Available
}

type Parts = (
    CatalogSchema,
    BTreeMap<ResourceTypeId, u64>,
    BTreeMap<InstanceId, InstanceRecord>,
);

impl CatalogDocument {
    pub fn to_toml(&self) -> Result<String, CatalogError> {
        toml::to_string(self).map_err(|e| CatalogError::Parse(e.to_string()))
    }

    pub(super) fn into_parts(self) -> Result<Parts, CatalogError> {
        let violation = |s: String| CatalogError::SchemaViolation(s);
        let schema = self.types;
        schema.check().map_err(violation)?;

        let mut instances = BTreeMap::new();
        for doc in self.instances {
            let decl = schema
                .get(&doc.resource_type)
                .ok_or_else(|| violation(format!("undeclared resource type `{}`", doc.resource_type)))?;
            if doc.key.is_empty() {
                return Err(violation(format!("empty instance key in `{}`", doc.resource_type)));
            }
            for (name, value) in &doc.properties {
                let domain = decl.properties.get(name).ok_or_else(|| {
                    violation(format!("{} has no property `{name}`", doc.resource_type))
                })?;
                if !domain.contains(value) {
                    return Err(violation(format!(
                        "{}/{}: {name} = {value} is outside the declared domain",
                        doc.resource_type, doc.key
                    )));
                }
            }
            let id = InstanceId {
                resource_type: doc.resource_type,
                key: doc.key,
            };
            let record = InstanceRecord {
                id: id.clone(),
                properties: doc.properties,
                status: doc.status,
            };
            if instances.insert(id.clone(), record).is_some() {
                return Err(violation(format!("duplicate instance {id}")));
            }
        }

        let instance_types: BTreeSet<&ResourceTypeId> =
            instances.keys().map(|id| &id.resource_type).collect();
        for ty in self.pools.keys() {
            if schema.get(ty).is_none() {
                return Err(violation(format!("pool for undeclared type `{ty}`")));
            }
            if instance_types.contains(ty) {
                return Err(violation(format!(
                    "`{ty}` has instances; its count is derived and cannot be listed under pools"
                )));
            }
        }
        let mut pools = self.pools;
        for ty in schema.types.keys() {
            if !instance_types.contains(ty) {
                pools.entry(ty.clone()).or_insert(0);
            }
        }
        Ok((schema, pools, instances))
    }

    pub(super) fn from_parts(
        schema: &CatalogSchema,
        pools: &BTreeMap<ResourceTypeId, u64>,
        instances: &BTreeMap<InstanceId, InstanceRecord>,
    ) -> Self {
        Self {
            types: schema.clone(),
            pools: pools.clone(),
            instances: instances
                .values()
                .map(|r| InstanceDoc {
                    resource_type: r.id.resource_type.clone(),
                    key: r.id.key.clone(),
                    status: r.status,
                    properties: r.properties.clone(),
                })
                .collect(),
        }
    }
}
