//! Run configuration: a TOML file layered over profile defaults, with
//! dotted-key overrides from the command line on top.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datagen::DatagenParams;
use crate::encoders::TeacherConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const DEFAULT_PROFILE: &str = "toy";

/// Artifact locations. Relative names are resolved against `out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub out: String,
    pub dataset: String,
    pub checkpoint: String,
    pub loss_table: String,
    pub index: String,
    pub metrics: String,
    pub sweep: String,
    pub gradcheck: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: "out".into(),
            dataset: "dataset.jsonl".into(),
            checkpoint: "checkpoint.json".into(),
            loss_table: "loss.csv".into(),
            index: "gallery.isae".into(),
            metrics: "metrics.toml".into(),
            sweep: "sweep.csv".into(),
            gradcheck: "gradcheck.txt".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, name: &str) -> PathBuf {
        let p = PathBuf::from(name);
        if p.is_absolute() {
            p
        } else {
            PathBuf::from(&self.out).join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives data generation and every training stream.
    pub seed: u64,
    /// Datagen preset the `[datagen]` table is layered over.
    pub profile: String,
    pub datagen: DatagenParams,
    pub teacher: TeacherConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(DEFAULT_PROFILE).expect("default profile exists")
    }
}

impl RunConfig {
    pub fn for_profile(profile: &str) -> Result<Self> {
        Ok(Self {
            seed: 0,
            profile: profile.to_string(),
            datagen: DatagenParams::profile(profile)?,
            teacher: TeacherConfig::default(),
            train: TrainConfig::toy(),
            paths: Paths::default(),
        })
    }

    /// Layers `file` (TOML text) and then `overrides` (`key.path`, raw
    /// value) over the profile defaults. Unknown keys are rejected.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let file_table = match file {
            Some(text) => text
                .parse::<Table>()
                .map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => Table::new(),
        };
        let mut profile = DEFAULT_PROFILE.to_string();
        if let Some(p) = file_table.get("profile") {
            profile = p
                .as_str()
                .ok_or_else(|| Error::Config("`profile` must be a string".into()))?
                .to_string();
        }
        for (k, v) in overrides {
            if k == "profile" {
                profile = match parse_value(v) {
                    Value::String(s) => s,
                    _ => return Err(Error::Config("`profile` must be a string".into())),
                };
            }
        }
        let mut table = to_table(&Self::for_profile(&profile)?)?;
        merge(&mut table, file_table, "")?;
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_value(raw))?;
        }
        let mut config: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.datagen.seed = config.seed;
        config.train.seed = config.seed;
        config.train.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn to_value(&self) -> Result<Value> {
        Ok(Value::Table(to_table(self)?))
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    Table::try_from(v).map_err(|e| Error::Config(format!("serializing config: {e}")))
}

fn merge(base: &mut Table, over: Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(Error::Config(format!("unknown config key `{path}`"))),
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &path)?,
            (Some(Value::Table(_)), _) => {
                return Err(Error::Config(format!("`{path}` must be a table")))
            }
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key `{key}`"));
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            match cur.get_mut(part) {
                Some(Value::Table(_)) => {
                    return Err(Error::Config(format!("`{key}` is a table, not a value")))
                }
                Some(slot) => *slot = value,
                None => return Err(unknown()),
            }
            return Ok(());
        }
        cur = match cur.get_mut(part) {
            Some(Value::Table(t)) => t,
            _ => return Err(unknown()),
        };
    }
    Err(unknown())
}

/// Reads a raw override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Splits `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not key=value")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.into(), v.into())
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::resolve(Some(&c.to_toml().unwrap()), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn cli_beats_file_beats_defaults() {
        let file = "seed = 3\n[train]\nlr = 0.5\nepochs = 7\n";
        let c = RunConfig::resolve(Some(file), &[ov("train.lr", "0.25")]).unwrap();
        assert_eq!(c.train.lr, 0.25);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.batch_size, TrainConfig::toy().batch_size);
        assert_eq!((c.seed, c.datagen.seed, c.train.seed), (3, 3, 3));
    }

    #[test]
    fn profile_selects_datagen_base() {
        let c = RunConfig::resolve(None, &[ov("profile", "tiny")]).unwrap();
        assert_eq!(c.datagen.n_concepts, 4);
        let c = RunConfig::resolve(None, &[ov("profile", "\"tiny\"")]).unwrap();
        assert_eq!(c.profile, "tiny");
        let file = "profile = \"tiny\"\n[datagen]\nn_train = 10\n";
        let c = RunConfig::resolve(Some(file), &[]).unwrap();
        assert_eq!((c.datagen.n_concepts, c.datagen.n_train), (4, 10));
        assert!(matches!(
            RunConfig::resolve(None, &[ov("profile", "huge")]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn enum_and_string_overrides() {
        let c = RunConfig::resolve(
            None,
            &[ov("train.mode", "symmetric"), ov("paths.out", "runs/a")],
        )
        .unwrap();
        assert_eq!(c.train.mode, Mode::Symmetric);
        assert_eq!(c.paths.resolve("x.txt"), PathBuf::from("runs/a/x.txt"));
    }

    #[test]
    fn typos_and_bad_types_are_rejected() {
        for o in [ov("train.lrr", "1"), ov("nope", "1"), ov("train", "1")] {
            assert!(matches!(RunConfig::resolve(None, &[o]), Err(Error::Config(_))));
        }
        assert!(RunConfig::resolve(Some("[train]\nepoch = 3\n"), &[]).is_err());
        assert!(RunConfig::resolve(None, &[ov("train.epochs", "many")]).is_err());
        assert!(RunConfig::resolve(Some("seed = [1"), &[]).is_err());
    }

    #[test]
    fn invalid_training_values_fail_resolution() {
        assert!(RunConfig::resolve(None, &[ov("train.batch_size", "1")]).is_err());
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override("a.b = 2").unwrap(), ov("a.b", "2"));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("=3").is_err());
    }
}
