//! Prompt templates with `«NAME»` placeholders.
//!
//! Built-in templates ship with the crate; a directory of plain-text files
//! (one per slot, e.g. `critique_user.txt`) can override any of them.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template missing placeholder «{0}»")]
    MissingPlaceholder(String),
    #[error("unreplaced placeholder «{0}» after substitution")]
    Unreplaced(String),
    #[error("failed to read template {0}: {1}")]
    Io(String, std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub critique_system: String,
    pub critique_user: String,
    pub synthesis_system: String,
    pub synthesis_user: String,
    pub explore_system: String,
    pub explore_user: String,
    pub solve_system: String,
    pub solve_user: String,
    pub perturb_user: String,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            critique_system: include_str!("../templates/critique_system.txt").to_string(),
            critique_user: include_str!("../templates/critique_user.txt").to_string(),
            synthesis_system: include_str!("../templates/synthesis_system.txt").to_string(),
            synthesis_user: include_str!("../templates/synthesis_user.txt").to_string(),
            explore_system: include_str!("../templates/explore_system.txt").to_string(),
            explore_user: include_str!("../templates/explore_user.txt").to_string(),
            solve_system: include_str!("../templates/solve_system.txt").to_string(),
            solve_user: include_str!("../templates/solve_user.txt").to_string(),
            perturb_user: include_str!("../templates/perturb_user.txt").to_string(),
        }
    }

    /// Load templates from `dir`, falling back to the built-in text for any
    /// file that is absent.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        let slots: [(&str, &mut String); 9] = [
            ("critique_system.txt", &mut set.critique_system),
            ("critique_user.txt", &mut set.critique_user),
            ("synthesis_system.txt", &mut set.synthesis_system),
            ("synthesis_user.txt", &mut set.synthesis_user),
            ("explore_system.txt", &mut set.explore_system),
            ("explore_user.txt", &mut set.explore_user),
            ("solve_system.txt", &mut set.solve_system),
            ("solve_user.txt", &mut set.solve_user),
            ("perturb_user.txt", &mut set.perturb_user),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                *slot =
                    fs::read_to_string(&path).map_err(|e| TemplateError::Io(name.into(), e))?;
            }
        }
        Ok(set)
    }
}

/// Substitute every named placeholder. Substitution is total: each named
/// placeholder must occur in the template, and no `«...»` marker may remain
/// afterwards.
pub fn render(template: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = template.to_string();
    for (name, value) in values {
        let marker = format!("«{name}»");
        if !out.contains(&marker) {
            return Err(TemplateError::MissingPlaceholder((*name).to_string()));
        }
        out = out.replace(&marker, value);
    }
    if let Some(start) = out.find('«') {
        let rest = &out[start..];
        let leftover = rest
            .find('»')
            .map(|end| rest['«'.len_utf8()..end].to_string())
            .unwrap_or_else(|| "?".to_string());
        return Err(TemplateError::Unreplaced(leftover));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_all() {
        let out = render("a «X» b «Y»", &[("X", "1"), ("Y", "2")]).unwrap();
        assert_eq!(out, "a 1 b 2");
    }

    #[test]
    fn empty_template_reports_missing_placeholder() {
        match render("", &[("PROBLEM", "p")]) {
            Err(TemplateError::MissingPlaceholder(name)) => assert_eq!(name, "PROBLEM"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn leftover_marker_is_an_error() {
        assert!(render("a «X» «UNKNOWN»", &[("X", "1")]).is_err());
    }

    #[test]
    fn builtin_templates_carry_expected_placeholders() {
        let t = TemplateSet::builtin();
        assert!(t.critique_user.contains("«PROBLEM»"));
        assert!(t.critique_user.contains("«TRAJECTORY_A»"));
        assert!(t.critique_user.contains("«TRAJECTORY_B»"));
        assert!(t.critique_user.contains("\"divergence_step_index\""));
        assert!(t.synthesis_user.contains("«STYLE_EXAMPLE»"));
        assert!(t.synthesis_user.contains("Common mistake to avoid:"));
        assert!(t.perturb_user.contains("distractor"));
    }
}
