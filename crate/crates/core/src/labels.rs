//! Class-taxonomy mappings between label spaces, with explicit NULL targets.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scene::InstanceAnnotation;

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// Row-major `height x width` map of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} map", data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, id: u32) -> Self {
        LabelMap { height, width, data: vec![id; height * width] }
    }
}

/// Target side of a mapping entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetId {
    Class(u32),
    Null,
}

impl Serialize for TargetId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TargetId::Class(id) => s.serialize_u32(*id),
            TargetId::Null => s.serialize_str("NULL"),
        }
    }
}

impl<'de> Deserialize<'de> for TargetId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(v) => u32::try_from(v)
                .map(TargetId::Class)
                .map_err(|_| serde::de::Error::custom(format!("target id {v} out of range"))),
            Raw::Text(t) if t == "NULL" => Ok(TargetId::Null),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("target id must be an integer or \"NULL\", got {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingEntry {
    pub source_id: u32,
    pub source_name: String,
    pub target_id: TargetId,
    pub target_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MappingFile {
    name: String,
    #[serde(default = "default_ignore")]
    ignore_index: u32,
    #[serde(default)]
    target_classes: Option<u32>,
    entries: Vec<MappingEntry>,
}

fn default_ignore() -> u32 {
    DEFAULT_IGNORE_INDEX
}

/// Validated source -> target class table.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMapping {
    name: String,
    ignore_index: u32,
    target_classes: u32,
    entries: Vec<MappingEntry>,
    lookup: HashMap<u32, TargetId>,
}

const BUILTINS: [(&str, &str); 3] = [
    ("synthia->cityscapes", include_str!("../mappings/synthia_cityscapes.toml")),
    ("synthia->coco", include_str!("../mappings/synthia_coco.toml")),
    ("toy-source->toy-target", include_str!("../mappings/toy_source_target.toml")),
];

fn canonical_name(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('→', "->").replace("_to_", "->")
}

impl LabelMapping {
    /// Built-in name (`synthia->cityscapes`, `synthia->coco`,
    /// `toy-source->toy-target`; `→` is accepted for `->`) or a mapping file path.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let canonical = canonical_name(name_or_path);
        if let Some((_, text)) = BUILTINS.iter().find(|(n, _)| *n == canonical) {
            return Self::from_toml(text);
        }
        let path = Path::new(name_or_path);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Self::from_toml(&text);
        }
        Err(Error::Mapping(format!("unknown built-in mapping or missing file `{name_or_path}`")))
    }

    /// The toy world's source -> target table.
    pub fn toy() -> Self {
        Self::load("toy-source->toy-target").expect("shipped toy mapping is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: MappingFile = toml::from_str(text).map_err(|e| Error::Mapping(e.to_string()))?;
        Self::from_entries(file.name, file.ignore_index, file.target_classes, file.entries)
    }

    pub fn from_entries(
        name: String,
        ignore_index: u32,
        target_classes: Option<u32>,
        entries: Vec<MappingEntry>,
    ) -> Result<Self> {
        let mut lookup = HashMap::new();
        for e in &entries {
            if lookup.insert(e.source_id, e.target_id).is_some() {
                return Err(Error::Mapping(format!("duplicate source id {} in `{name}`", e.source_id)));
            }
            if e.source_id == ignore_index {
                return Err(Error::Mapping(format!("source id {} collides with ignore_index in `{name}`", e.source_id)));
            }
            if e.target_id == TargetId::Class(ignore_index) {
                return Err(Error::Mapping(format!(
                    "source id {} maps onto ignore_index {ignore_index} in `{name}`",
                    e.source_id
                )));
            }
        }
        let max_target = entries
            .iter()
            .filter_map(|e| match e.target_id {
                TargetId::Class(t) => Some(t + 1),
                TargetId::Null => None,
            })
            .max()
            .unwrap_or(0);
        let target_classes = target_classes.unwrap_or(max_target);
        if target_classes < max_target {
            return Err(Error::Mapping(format!("target_classes {target_classes} smaller than largest target id in `{name}`")));
        }
        if ignore_index < target_classes {
            return Err(Error::Mapping(format!("ignore_index {ignore_index} lies inside the target taxonomy of `{name}`")));
        }
        Ok(LabelMapping { name, ignore_index, target_classes, entries, lookup })
    }

    pub fn to_toml(&self) -> String {
        let file = MappingFile {
            name: self.name.clone(),
            ignore_index: self.ignore_index,
            target_classes: Some(self.target_classes),
            entries: self.entries.clone(),
        };
        toml::to_string(&file).expect("mapping serializes")
    }

    pub fn identity(name: &str, classes: u32) -> Self {
        let entries = (0..classes)
            .map(|i| MappingEntry {
                source_id: i,
                source_name: format!("class{i}"),
                target_id: TargetId::Class(i),
                target_name: format!("class{i}"),
            })
            .collect();
        Self::from_entries(name.to_string(), DEFAULT_IGNORE_INDEX, Some(classes), entries).expect("identity is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ignore_index(&self) -> u32 {
        self.ignore_index
    }

    /// Size of the target taxonomy (ids `0..target_classes`).
    pub fn target_classes(&self) -> usize {
        self.target_classes as usize
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    /// Distinct non-NULL target ids.
    pub fn declared_targets(&self) -> BTreeSet<u32> {
        self.lookup
            .values()
            .filter_map(|t| match t {
                TargetId::Class(c) => Some(*c),
                TargetId::Null => None,
            })
            .collect()
    }

    /// Name of every target id, from the first entry mapping onto it.
    pub fn target_names(&self) -> Vec<String> {
        (0..self.target_classes)
            .map(|t| {
                self.entries
                    .iter()
                    .find(|e| e.target_id == TargetId::Class(t))
                    .map_or_else(|| format!("class{t}"), |e| e.target_name.clone())
            })
            .collect()
    }

    /// Target id for one source id; `Ok(None)` means NULL.
    pub fn map_id(&self, source_id: u32) -> Result<Option<u32>> {
        match self.lookup.get(&source_id) {
            Some(TargetId::Class(t)) => Ok(Some(*t)),
            Some(TargetId::Null) => Ok(None),
            None => Err(Error::UnmappedId { id: source_id, mapping: self.name.clone() }),
        }
    }

    /// Materialized id, with NULL resolved to `ignore_index`.
    pub fn materialize(&self, source_id: u32) -> Result<u32> {
        Ok(self.map_id(source_id)?.unwrap_or(self.ignore_index))
    }
}

/// Remap a label map; NULL-mapped and already ignored pixels become `ignore_index`.
pub fn remap(labels: &LabelMap, mapping: &LabelMapping) -> Result<LabelMap> {
    let ignore = mapping.ignore_index();
    let mut cache: HashMap<u32, u32> = HashMap::new();
    let mut data = Vec::with_capacity(labels.data.len());
    for &id in &labels.data {
        if id == ignore {
            data.push(ignore);
            continue;
        }
        let mapped = match cache.get(&id) {
            Some(&m) => m,
            None => {
                let m = mapping.materialize(id)?;
                cache.insert(id, m);
                m
            }
        };
        data.push(mapped);
    }
    LabelMap::new(labels.height, labels.width, data)
}

/// Keep/drop flag per instance: drop exactly when its class maps to NULL.
pub fn instance_gradient_mask(instances: &[InstanceAnnotation], mapping: &LabelMapping) -> Result<Vec<bool>> {
    instances.iter().map(|inst| Ok(mapping.map_id(inst.class_id)?.is_some())).collect()
}
