use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::KeyElement;
use crate::error::{Error, Result};

const BUILTIN_MANIFEST: &str = include_str!("../../templates/manifest.json");
const BUILTIN_FILES: [(&str, &str); 3] = [
    ("extraction.txt", include_str!("../../templates/extraction.txt")),
    ("recognition.txt", include_str!("../../templates/recognition.txt")),
    ("speaker_id.txt", include_str!("../../templates/speaker_id.txt")),
];

const PLACEHOLDERS: [&str; 7] = [
    "history",
    "target",
    "phrase",
    "labels",
    "lead",
    "constraint",
    "characteristics",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Extraction,
    Recognition,
    SpeakerId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

/// Parsed template text. Substitution is a single pass, so placeholder-like
/// text inside substituted values is never expanded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut rest = source;
        while let Some(open) = rest.find('{') {
            literal.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let name = close.map(|c| &after[..c]);
            match name {
                Some(name) if !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_') => {
                    if !PLACEHOLDERS.contains(&name) {
                        return Err(Error::Template(format!("unknown placeholder `{{{name}}}`")));
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(name.to_string()));
                    rest = &after[name.len() + 1..];
                }
                _ => {
                    literal.push('{');
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self {
            source: source.to_string(),
            segments,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Fills every slot; a slot without a value is an error.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String> {
        let mut out = String::with_capacity(self.source.len() * 2);
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(name) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| Error::Template(format!("no value for `{{{name}}}`")))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// One extraction template variant: the relation phrase per key element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateVariant {
    pub variant_id: u8,
    pub includes_history_preamble: bool,
    pub includes_length_constraint: bool,
    pub phrases: BTreeMap<KeyElement, String>,
}

impl TemplateVariant {
    pub fn phrase(&self, element: KeyElement) -> Result<&str> {
        self.phrases
            .get(&element)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownElement(format!("{element} (variant {})", self.variant_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub purpose: Purpose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_id: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element: Option<KeyElement>,
    pub file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    templates: Vec<TemplateEntry>,
    variants: Vec<TemplateVariant>,
}

/// Read-only set of templates keyed by (purpose, variant, element).
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    entries: Vec<(TemplateEntry, Template)>,
    variants: BTreeMap<u8, TemplateVariant>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        Self::from_manifest(BUILTIN_MANIFEST, |file| {
            BUILTIN_FILES
                .iter()
                .find(|(name, _)| *name == file)
                .map(|(_, text)| text.to_string())
                .ok_or_else(|| Error::Template(format!("no builtin template `{file}`")))
        })
        .expect("builtin templates are valid")
    }

    /// Loads `manifest.json` and the template files it names from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Self::from_manifest(&manifest, |file| {
            let path = dir.join(file);
            fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        })
    }

    fn from_manifest(manifest: &str, mut read: impl FnMut(&str) -> Result<String>) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(manifest)?;
        let mut entries = Vec::new();
        for entry in manifest.templates {
            let template = Template::parse(&read(&entry.file)?)?;
            entries.push((entry, template));
        }
        let mut variants = BTreeMap::new();
        for v in manifest.variants {
            for e in KeyElement::ALL {
                v.phrase(e)?;
            }
            variants.insert(v.variant_id, v);
        }
        Ok(Self { entries, variants })
    }

    /// Writes the registry as an editable directory.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, template) in &self.entries {
            let path = dir.join(&entry.file);
            fs::write(&path, template.source()).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = Manifest {
            templates: self.entries.iter().map(|(e, _)| e.clone()).collect(),
            variants: self.variants.values().cloned().collect(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn variant(&self, variant_id: u8) -> Result<&TemplateVariant> {
        self.variants
            .get(&variant_id)
            .ok_or_else(|| Error::UnknownVariant(variant_id.to_string()))
    }

    pub fn variant_ids(&self) -> Vec<u8> {
        self.variants.keys().copied().collect()
    }

    pub fn insert_variant(&mut self, variant: TemplateVariant) {
        self.variants.insert(variant.variant_id, variant);
    }

    /// Most specific entry wins: exact (variant, element) over either
    /// wildcard over the purpose-wide default.
    pub fn template(&self, purpose: Purpose, variant_id: Option<u8>, element: Option<KeyElement>) -> Result<&Template> {
        self.entries
            .iter()
            .filter(|(e, _)| e.purpose == purpose)
            .filter(|(e, _)| e.variant_id.is_none() || e.variant_id == variant_id)
            .filter(|(e, _)| e.element.is_none() || e.element == element)
            .max_by_key(|(e, _)| 2 * e.variant_id.is_some() as u8 + e.element.is_some() as u8)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Template(format!("no template for {purpose:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pass_substitution() {
        let t = Template::parse("a {history} b {target}").unwrap();
        let out = t.render(&[("history", "{target}"), ("target", "x")]).unwrap();
        assert_eq!(out, "a {target} b x");
    }

    #[test]
    fn unknown_placeholder_rejected() {
        assert!(Template::parse("{nope}").is_err());
        // non-identifier braces are literal
        let t = Template::parse("{ A } {}").unwrap();
        assert_eq!(t.render(&[]).unwrap(), "{ A } {}");
    }

    #[test]
    fn missing_value_is_error() {
        let t = Template::parse("{labels}").unwrap();
        assert!(t.render(&[]).is_err());
    }

    #[test]
    fn variant_four_oreact_phrase() {
        let r = TemplateRegistry::builtin();
        assert_eq!(r.variant_ids(), vec![1, 2, 3, 4]);
        assert_eq!(
            r.variant(4).unwrap().phrase(KeyElement::OReact).unwrap(),
            "the reaction of potential listeners in"
        );
    }

    #[test]
    fn directory_round_trip_and_override() {
        let dir = tempfile::tempdir().unwrap();
        let r = TemplateRegistry::builtin();
        r.write_dir(dir.path()).unwrap();

        let manifest_path = dir.path().join("manifest.json");
        let mut manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
        manifest["templates"].as_array_mut().unwrap().push(serde_json::json!({
            "purpose": "extraction", "variant_id": 4, "element": "xAttr", "file": "xattr.txt"
        }));
        fs::write(&manifest_path, manifest.to_string()).unwrap();
        fs::write(dir.path().join("xattr.txt"), "custom {phrase} <{target}>").unwrap();

        let loaded = TemplateRegistry::load_dir(dir.path()).unwrap();
        let specific = loaded
            .template(Purpose::Extraction, Some(4), Some(KeyElement::XAttr))
            .unwrap();
        assert_eq!(specific.source(), "custom {phrase} <{target}>");
        let general = loaded
            .template(Purpose::Extraction, Some(4), Some(KeyElement::OReact))
            .unwrap();
        assert_eq!(
            general.source(),
            r.template(Purpose::Extraction, None, None).unwrap().source()
        );
    }
}
