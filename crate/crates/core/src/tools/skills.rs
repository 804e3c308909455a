//! `SKILL.md` discovery.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::permissions::split_rule_list;
use crate::types::Notification;

#[derive(Debug, Clone, PartialEq)]
pub struct SkillDef {
    pub name: String,
    pub description: String,
    pub allowed_tools: Vec<String>,
    pub model: Option<String>,
    pub argument_hint: Option<String>,
    pub body: String,
    pub path: PathBuf,
}

/// A YAML value that may be written as a list or a comma-separated string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StringOrList {
    One(String),
    Many(Vec<String>),
}

impl StringOrList {
    pub fn into_vec(self) -> Vec<String> {
        match self {
            StringOrList::One(s) => split_rule_list(&s),
            StringOrList::Many(v) => v.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        }
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct SkillFrontmatter {
    name: Option<String>,
    description: String,
    allowed_tools: Option<StringOrList>,
    model: Option<String>,
    argument_hint: Option<String>,
}

/// Split `---` YAML frontmatter from a markdown body and deserialize it.
pub fn parse_frontmatter<T: DeserializeOwned>(text: &str) -> Result<(T, String), String> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let rest = text
        .strip_prefix("---\n")
        .or_else(|| text.strip_prefix("---\r\n"))
        .ok_or("missing frontmatter")?;
    let (yaml, body) = match rest.find("\n---") {
        Some(i) => {
            let after = &rest[i + 4..];
            let body = after.split_once('\n').map(|(_, b)| b).unwrap_or("");
            (&rest[..i], body)
        }
        None => return Err("unterminated frontmatter".into()),
    };
    let parsed: T = serde_yaml::from_str(yaml).map_err(|e| e.to_string())?;
    Ok((parsed, body.trim().to_string()))
}

/// Load `<dir>/<skill>/SKILL.md` from each directory. Missing directories are
/// fine; malformed skills are skipped with a notification.
pub fn load_skills(dirs: &[PathBuf]) -> (Vec<SkillDef>, Vec<Notification>) {
    let mut skills = Vec::new();
    let mut notes = Vec::new();
    for dir in dirs {
        let Ok(entries) = std::fs::read_dir(dir) else { continue };
        let mut paths: Vec<PathBuf> = entries.filter_map(Result::ok).map(|e| e.path().join("SKILL.md")).collect();
        paths.sort();
        for path in paths.into_iter().filter(|p| p.is_file()) {
            match load_skill(&path) {
                Ok(s) if skills.iter().any(|x: &SkillDef| x.name == s.name) => {
                    notes.push(Notification::new("skills", format!("duplicate skill {} at {}", s.name, path.display())))
                }
                Ok(s) => skills.push(s),
                Err(e) => notes.push(Notification::new("skills", format!("skipped {}: {e}", path.display()))),
            }
        }
    }
    (skills, notes)
}

fn load_skill(path: &Path) -> Result<SkillDef, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let (fm, body): (SkillFrontmatter, String) = parse_frontmatter(&text)?;
    let dir_name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SkillDef {
        name: fm.name.unwrap_or(dir_name),
        description: fm.description,
        allowed_tools: fm.allowed_tools.map(StringOrList::into_vec).unwrap_or_default(),
        model: fm.model,
        argument_hint: fm.argument_hint,
        body,
        path: path.to_path_buf(),
    })
}
