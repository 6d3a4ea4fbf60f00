// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use thiserror::Error;

pub const USER_SEPARATOR: &str = "=== USER ===";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {0}: {1}")]
    Io(String, std::io::Error),
    #[error("template {0} is missing the '{USER_SEPARATOR}' separator line")]
    MissingSeparator(String),
    #[error("template {name} does not contain the {{{placeholder}}} placeholder")]
    MissingPlaceholder { name: String, placeholder: String },
}

/// A prompt split into the system part and a user part with one named
/// `{PLACEHOLDER}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub system: String,
    pub user: String,
}

impl Template {
    pub fn parse(name: &str, text: &str, placeholder: &str) -> Result<Self, PromptError> {
        let (system, user) = text
            .split_once(&format!("\n{USER_SEPARATOR}\n"))
            .ok_or_else(|| PromptError::MissingSeparator(name.into()))?;
        if !user.contains(&format!("{{{placeholder}}}")) {
            return Err(PromptError::MissingPlaceholder {
                name: name.into(),
                placeholder: placeholder.into(),
            });
        }
        Ok(Self {
            system: system.trim_end().to_string(),
            user: user.trim_end().to_string(),
        })
    }

    pub fn render_user(&self, placeholder: &str, value: &str) -> String {
        self.user.replace(&format!("{{{placeholder}}}"), value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub hypothesis: Template,
    pub decomposition: Template,
    pub refinement: Template,
}

const FILES: [(&str, &str, &str); 3] = [
    ("hypothesis.txt", include_str!("../../prompts/hypothesis.txt"), "EXCERPTS"),
    ("decomposition.txt", include_str!("../../prompts/decomposition.txt"), "DESCRIPTION"),
    ("refinement.txt", include_str!("../../prompts/refinement.txt"), "HISTORY"),
];

impl Default for Prompts {
    fn default() -> Self {
        let [h, d, r] = FILES.map(|(name, text, ph)| {
            Template::parse(name, text, ph).expect("bundled templates are well formed")
        });
        Self {
            hypothesis: h,
            decomposition: d,
            refinement: r,
        }
    }
}

impl Prompts {
    /// Loads the three templates from `dir`, using the bundled copy for any
    /// file that is absent.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut out = Vec::with_capacity(3);
        for (name, bundled, ph) in FILES {
            let path = dir.join(name);
            let text = if path.exists() {
                std::fs::read_to_string(&path)
                    .map_err(|e| PromptError::Io(path.display().to_string(), e))?
            } else {
                bundled.to_string()
            };
            out.push(Template::parse(name, &text, ph)?);
        }
        let r = out.pop().expect("three templates");
        let d = out.pop().expect("three templates");
        let h = out.pop().expect("three templates");
        Ok(Self {
            hypothesis: h,
            decomposition: d,
            refinement: r,
        })
    }
}
