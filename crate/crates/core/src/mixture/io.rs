//! JSON export/import of mixture specs. Covariances are stored row-major.

use std::path::Path;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use super::{MixtureComponent, MixtureSpec, Normalization};
use crate::{Error, Result, Vec2};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ComponentRecord {
    weight: f64,
    mean: [f64; 2],
    cov: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NormalizationRecord {
    shift: [f64; 2],
    scale: [f64; 2],
}

/// On-disk form of a mixture, optionally carrying the per-class outlier
/// log-density thresholds calibrated for it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureFile {
    pub format: String,
    pub seed: u64,
    normalization: NormalizationRecord,
    classes: Vec<Vec<ComponentRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_thresholds: Option<Vec<f64>>,
}

const FORMAT_TAG: &str = "guidelab-mixture-v1";

impl MixtureFile {
    pub fn from_spec(spec: &MixtureSpec, outlier_thresholds: Option<Vec<f64>>) -> Self {
        let n = spec.normalization();
        Self {
            format: FORMAT_TAG.to_string(),
            seed: spec.seed(),
            normalization: NormalizationRecord {
                shift: [n.shift.x, n.shift.y],
                scale: [n.scale.x, n.scale.y],
            },
            classes: spec
                .classes()
                .iter()
                .map(|comps| {
                    comps
                        .iter()
                        .map(|c| ComponentRecord {
                            weight: c.weight,
                            mean: [c.mean.x, c.mean.y],
                            cov: [c.cov[(0, 0)], c.cov[(0, 1)], c.cov[(1, 0)], c.cov[(1, 1)]],
                        })
                        .collect()
                })
                .collect(),
            outlier_thresholds,
        }
    }

    pub fn to_spec(&self) -> Result<MixtureSpec> {
        if self.format != FORMAT_TAG {
            return Err(Error::Format {
                what: "mixture file",
                detail: format!("unknown format tag `{}`", self.format),
            });
        }
        let classes = self
            .classes
            .iter()
            .map(|comps| {
                comps
                    .iter()
                    .map(|r| {
                        MixtureComponent::new(
                            r.weight,
                            Vec2::new(r.mean[0], r.mean[1]),
                            Matrix2::new(r.cov[0], r.cov[1], r.cov[2], r.cov[3]),
                        )
                    })
                    .collect()
            })
            .collect();
        let n = &self.normalization;
        MixtureSpec::new(
            classes,
            self.seed,
            Normalization {
                shift: Vec2::new(n.shift[0], n.shift[1]),
                scale: Vec2::new(n.scale[0], n.scale[1]),
            },
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
