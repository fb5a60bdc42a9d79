//! Built-in experiment suites, one per figure or table of interest.

use crate::config::{validate_suite, Suite};
use crate::error::{Error, Result};

const PRESETS: [(&str, &str); 8] = [
    ("fig_s1", include_str!("../presets/fig_s1.toml")),
    ("table2", include_str!("../presets/table2.toml")),
    ("fig3b", include_str!("../presets/fig3b.toml")),
    ("fig4_c_sweep", include_str!("../presets/fig4_c_sweep.toml")),
    ("fig4c", include_str!("../presets/fig4c.toml")),
    ("fig4d", include_str!("../presets/fig4d.toml")),
    ("fig5cd", include_str!("../presets/fig5cd.toml")),
    ("embeddings", include_str!("../presets/embeddings.toml")),
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// Source text of a preset, as shipped.
pub fn source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn preset(name: &str) -> Result<Suite> {
    let raw = source(name).ok_or_else(|| {
        Error::Config(format!("unknown preset `{name}`; available: {}", names().join(", ")))
    })?;
    Ok(validate_suite(raw)?)
}
