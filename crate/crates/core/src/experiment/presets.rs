//! Bundled experiment configurations, also shipped as files under
//! `crates/core/presets/`.

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const PRESETS: &[(&str, &str)] = &[
    ("bilinear_pcgd", include_str!("../../presets/bilinear_pcgd.toml")),
    ("four_player_pcgd", include_str!("../../presets/four_player_pcgd.toml")),
    ("four_player_simgd", include_str!("../../presets/four_player_simgd.toml")),
    ("theorem_sweep", include_str!("../../presets/theorem_sweep.toml")),
    ("decoupling_sweep", include_str!("../../presets/decoupling_sweep.toml")),
    ("soccer_appendix", include_str!("../../presets/soccer_appendix.toml")),
    ("soccer_desk", include_str!("../../presets/soccer_desk.toml")),
    ("soccer_smoke", include_str!("../../presets/soccer_smoke.toml")),
    ("market_appendix", include_str!("../../presets/market_appendix.toml")),
    ("tournament_soccer", include_str!("../../presets/tournament_soccer.toml")),
    ("plot_four_player", include_str!("../../presets/plot_four_player.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Config(format!("unknown preset {name}")))?;
    ExperimentConfig::from_toml_str(text)
}
