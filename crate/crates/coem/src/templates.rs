//! Versioned prompt templates.
//!
//! A template file has an `@system` section and an `@user` section. Lines
//! starting with `#` before the first section are comments. Placeholders:
//! `{{fragments}}` (numbered list), `{{count}}`, `{{output}}`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use coem_core::backend::{EXTRACT_TEMPLATE, SUMMARY_TEMPLATE};
use thiserror::Error;

pub const ATTRIBUTE_TEMPLATE: &str = "attribute-v1";

const BUILTIN: [(&str, &str); 3] = [
    (SUMMARY_TEMPLATE, include_str!("../templates/summary-v1.txt")),
    (EXTRACT_TEMPLATE, include_str!("../templates/extract-v1.txt")),
    (ATTRIBUTE_TEMPLATE, include_str!("../templates/attribute-v1.txt")),
];

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("template {id}: {message}")]
    Malformed { id: String, message: String },
    #[error("unknown template {0}")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub system: String,
    pub user: String,
}

impl Template {
    pub fn parse(id: &str, source: &str) -> Result<Self, TemplateError> {
        let mut section: Option<&str> = None;
        let (mut system, mut user) = (Vec::new(), Vec::new());
        for line in source.lines() {
            match line.trim_end() {
                "@system" => section = Some("system"),
                "@user" => section = Some("user"),
                _ => match section {
                    None if line.starts_with('#') || line.trim().is_empty() => {}
                    None => {
                        return Err(TemplateError::Malformed {
                            id: id.into(),
                            message: "text before the first section".into(),
                        })
                    }
                    Some("system") => system.push(line),
                    Some(_) => user.push(line),
                },
            }
        }
        if user.iter().all(|l| l.trim().is_empty()) {
            return Err(TemplateError::Malformed {
                id: id.into(),
                message: "empty @user section".into(),
            });
        }
        Ok(Self {
            id: id.into(),
            system: system.join("\n").trim().to_string(),
            user: user.join("\n").trim().to_string(),
        })
    }

    /// Returns `(system, user)` with placeholders filled.
    pub fn render(&self, fragments: &[String], output: &str) -> (String, String) {
        let list: Vec<String> = fragments
            .iter()
            .enumerate()
            .map(|(i, f)| format!("{}. {f}", i + 1))
            .collect();
        let fill = |s: &str| {
            s.replace("{{fragments}}", &list.join("\n"))
                .replace("{{count}}", &fragments.len().to_string())
                .replace("{{output}}", output)
        };
        (fill(&self.system), fill(&self.user))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, src)| (id.to_string(), Template::parse(id, src).expect("shipped templates parse")))
            .collect();
        Self { templates }
    }

    /// Built-ins overridden by every `<id>.txt` file in `dir`.
    pub fn with_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let t = Template::parse(id, &fs::read_to_string(&path)?)?;
            set.templates.insert(id.to_string(), t);
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Result<&Template, TemplateError> {
        self.templates.get(id).ok_or_else(|| TemplateError::Unknown(id.into()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}
