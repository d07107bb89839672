use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gecprep_annosvc::ServiceConfig;
use gecprep_core::llm::LlmSettings;
use gecprep_core::pipeline::ScheduleConfig;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub llm: LlmSettings,
    pub paths: Paths,
    pub schedule: ScheduleConfig,
    pub anno: ServiceConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Named corpora used when no `--corpus` is given.
    pub corpora: BTreeMap<String, PathBuf>,
    pub eval: Option<PathBuf>,
    pub gold: Option<PathBuf>,
}

impl Config {
    /// Reads the file if given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Config::default(),
        };
        config.llm.apply_env();
        config.anno.apply_env().map_err(anyhow::Error::msg)?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let c: Config = toml::from_str(
            r#"
            [llm]
            model = "m"
            concurrency = 8

            [paths.corpora]
            fce-train = "data/fce.jsonl"

            [schedule]
            final_lr = 2e-7
            first_setup = "AUGMENTED"

            [anno]
            bind = "127.0.0.1:9999"
            "#,
        )
        .unwrap();
        assert_eq!(c.llm.model, "m");
        assert_eq!(c.llm.retries, LlmSettings::default().retries);
        assert_eq!(c.paths.corpora["fce-train"], PathBuf::from("data/fce.jsonl"));
        assert_eq!(c.schedule.final_lr, 2e-7);
        assert_eq!(c.anno.bind.port(), 9999);
        assert!(toml::from_str::<Config>("[bogus]\nx = 1").is_err());
    }
}
