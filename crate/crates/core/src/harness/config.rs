//! Run configuration files and oracle wiring.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cal::{CalConfig, SyntheticOracle};
use crate::error::{Error, Result};
use crate::kaa::KaaConfig;
use crate::synthdata::{DatasetBundle, SimulatedAnnotator, SynthConfig};

/// Everything a pipeline run reads from `--config`. Missing sections take
/// their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub kaa: KaaConfig,
    pub cal: CalConfig,
    /// Probability that the programmatic oracle leaves a task unlabelled.
    pub decline_rate: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` when given, defaults otherwise, then applies `seed` to
    /// every stage.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.kaa.seed = s;
            cfg.cal.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.kaa.validate()?;
        self.cal.validate()?;
        SimulatedAnnotator::new(self.decline_rate, 0)?;
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        super::checkpoint::config_hash(self)
    }
}

/// Oracle answering from the bundle's ground truth, declining each task
/// with probability `decline_rate`. Answers depend only on `(seed, id)`.
pub fn programmatic_oracle(data: &DatasetBundle, decline_rate: f64, seed: u64) -> Result<SyntheticOracle<'_>> {
    Ok(SyntheticOracle::new(data, SimulatedAnnotator::new(decline_rate, seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cal::{AnnotationRequest, Oracle};
    use crate::objectives::MISSING_LABEL;
    use crate::synthdata::generate_bundle;

    #[test]
    fn partial_file_takes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"kaa": {"cycles": 3}, "decline_rate": 0.1}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&p), Some(4)).unwrap();
        assert_eq!(cfg.kaa.cycles, 3);
        assert_eq!(cfg.kaa.seed, 4);
        assert_eq!(cfg.cal.seed, 4);
        assert_eq!(cfg.cal, CalConfig { seed: 4, ..CalConfig::default() });
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"kaaa": {}}"#).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap_err().kind(), "config");
    }

    #[test]
    fn bad_decline_rate_rejected() {
        let cfg = RunConfig {
            decline_rate: 1.0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.kaa.cycles = 2;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    fn small() -> DatasetBundle {
        let cfg = SynthConfig {
            train_size: 20,
            val_size: 5,
            test_size: 5,
            joint_size: 10,
            ..SynthConfig::default()
        };
        generate_bundle(&cfg, 1).unwrap()
    }

    #[test]
    fn oracle_is_deterministic_and_declines() {
        let data = small();
        let ids: Vec<u64> = data.examples.iter().map(|e| e.id).collect();
        let req = AnnotationRequest {
            iteration: 1,
            ids: ids.clone(),
            suggestions: None,
        };
        let a = programmatic_oracle(&data, 0.3, 2).unwrap().annotate(&req).unwrap();
        let b = programmatic_oracle(&data, 0.3, 2).unwrap().annotate(&req).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().any(|&l| l == MISSING_LABEL));
        let exact = programmatic_oracle(&data, 0.0, 2).unwrap().annotate(&req).unwrap();
        for (id, row) in ids.iter().zip(&exact) {
            let truth = crate::synthdata::oracle_labels(&data, *id).unwrap();
            assert_eq!(row, &truth.iter().map(|&l| l as i32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn oracle_missing_id_is_lookup_error() {
        let data = small();
        let mut o = programmatic_oracle(&data, 0.0, 0).unwrap();
        let err = o
            .annotate(&AnnotationRequest {
                iteration: 1,
                ids: vec![u64::MAX],
                suggestions: None,
            })
            .unwrap_err();
        assert_eq!(err.kind(), "lookup");
    }
}
