//! Versioned JSON container for fitted calibrators.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline, BinTable, IsotonicFit, PlattParams};
use crate::basis::BasisFamily;
use crate::data::{BucketSpec, Dataset, FieldSchema};
use crate::desc::{DescConfig, DescModel};
use crate::diffcore::{ParamStore, StoreSnapshot};
use crate::error::{Error, Result};

pub const FORMAT: &str = "desc-calib-checkpoint";
pub const VERSION: u32 = 1;

/// A fitted calibrator of any method.
#[derive(Clone, Debug, PartialEq)]
pub enum Calibrator {
    Desc(Box<DescModel>),
    Baseline(Baseline),
}

impl Calibrator {
    /// Method name as used by `--method`.
    pub fn method(&self) -> &'static str {
        match self {
            Calibrator::Desc(_) => "desc",
            Calibrator::Baseline(b) => b.kind().key(),
        }
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        match self {
            Calibrator::Desc(m) => m.predict(data),
            Calibrator::Baseline(b) => Ok(b.apply_all(&data.p_uncalib())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescRecord {
    pub config: DescConfig,
    pub buckets: BucketSpec,
    pub basis: BasisFamily,
    pub params: StoreSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibratorRecord {
    Desc(DescRecord),
    Histogram(BinTable),
    Isotonic(IsotonicFit),
    Sir(IsotonicFit),
    Platt(PlattParams),
    Temperature(PlattParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Schema of the calibration data; evaluation data is read through it.
    pub schema: FieldSchema,
    pub calibrator: CalibratorRecord,
}

impl Checkpoint {
    pub fn new(calibrator: &Calibrator, schema: &FieldSchema) -> Checkpoint {
        let record = match calibrator {
            Calibrator::Desc(m) => CalibratorRecord::Desc(DescRecord {
                config: m.config.clone(),
                buckets: m.buckets.clone(),
                basis: m.basis.clone(),
                params: m.store.to_snapshot(),
            }),
            Calibrator::Baseline(b) => match b.clone() {
                Baseline::Histogram(t) => CalibratorRecord::Histogram(t),
                Baseline::Isotonic(f) => CalibratorRecord::Isotonic(f),
                Baseline::Sir(f) => CalibratorRecord::Sir(f),
                Baseline::Platt(p) => CalibratorRecord::Platt(p),
                Baseline::Temperature(p) => CalibratorRecord::Temperature(p),
            },
        };
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            schema: schema.clone(),
            calibrator: record,
        }
    }

    /// Rebuilds the calibrator, checking that DESC parameters match the
    /// architecture implied by the stored config and schema.
    pub fn calibrator(&self) -> Result<Calibrator> {
        Ok(match &self.calibrator {
            CalibratorRecord::Desc(r) => {
                let mut model = DescModel::new(self.schema.clone(), r.buckets.clone(), r.config.clone())?;
                let store = ParamStore::from_snapshot(&r.params)?;
                let layout = |s: &ParamStore| -> Vec<(String, (usize, usize))> {
                    s.iter().map(|p| (p.name.clone(), p.value.dim())).collect()
                };
                let (expected, found) = (layout(&model.store), layout(&store));
                if expected != found {
                    return Err(Error::Checkpoint(format!(
                        "DESC parameters do not match the stored configuration: expected {expected:?}, found {found:?}"
                    )));
                }
                r.basis.validate()?;
                model.store = store;
                model.basis = r.basis.clone();
                Calibrator::Desc(Box::new(model))
            }
            CalibratorRecord::Histogram(t) => {
                if t.values.len() != t.bins.bucket_count() {
                    return Err(Error::Checkpoint("histogram needs one value per bin".into()));
                }
                Calibrator::Baseline(Baseline::Histogram(t.clone()))
            }
            CalibratorRecord::Isotonic(f) | CalibratorRecord::Sir(f) => {
                if f.x.is_empty() || f.x.len() != f.y.len() {
                    return Err(Error::Checkpoint("isotonic fit needs matching non-empty breakpoints".into()));
                }
                let b = if matches!(self.calibrator, CalibratorRecord::Sir(_)) {
                    Baseline::Sir(f.clone())
                } else {
                    Baseline::Isotonic(f.clone())
                };
                Calibrator::Baseline(b)
            }
            CalibratorRecord::Platt(p) => Calibrator::Baseline(Baseline::Platt(*p)),
            CalibratorRecord::Temperature(p) => Calibrator::Baseline(Baseline::Temperature(*p)),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::BaselineKind;
    use crate::desc::fit;
    use crate::synthgen::{generate, DistortionSpec, GenConfig};

    fn data() -> Dataset {
        let cfg = GenConfig {
            cardinalities: vec![4, 3],
            base_logit: -1.0,
            field_effect_scale: 0.6,
            sample_count: 800,
            seed: 9,
        };
        generate(&cfg, &DistortionSpec::round_robin("z0", 4, &[0.5, 2.0], &[0.6, 1.6]))
            .unwrap()
            .dataset
    }

    fn small_desc() -> DescConfig {
        DescConfig {
            embedding_dim: 4,
            alloc_mlp_hidden: 8,
            value_mlp1_hidden: 8,
            bucket_count: 10,
            batch_size: 128,
            epochs: 2,
            lr: 0.01,
            ..DescConfig::default()
        }
    }

    #[test]
    fn desc_round_trip_is_exact() {
        let d = data();
        let (model, _) = fit(&d, &small_desc()).unwrap();
        let cal = Calibrator::Desc(Box::new(model.clone()));
        let text = Checkpoint::new(&cal, &d.schema).to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap().calibrator().unwrap();
        let Calibrator::Desc(restored) = &back else {
            panic!("wrong kind")
        };
        assert_eq!(restored.store.to_snapshot(), model.store.to_snapshot());
        assert_eq!(back.predict(&d).unwrap(), cal.predict(&d).unwrap());
        // Serializing the restored model reproduces the same bytes.
        assert_eq!(Checkpoint::new(&back, &d.schema).to_json().unwrap(), text);
    }

    #[test]
    fn baseline_round_trips() {
        let d = data();
        for kind in BaselineKind::ALL {
            let cal = Calibrator::Baseline(Baseline::fit_dataset(kind, &d).unwrap());
            let text = Checkpoint::new(&cal, &d.schema).to_json().unwrap();
            assert!(text.contains(&format!("\"kind\": \"{}\"", serde_json::to_value(kind).unwrap().as_str().unwrap())));
            let back = Checkpoint::from_json(&text).unwrap().calibrator().unwrap();
            assert_eq!(back, cal);
            assert_eq!(back.method(), kind.key());
        }
    }

    #[test]
    fn rejects_bad_containers() {
        let d = data();
        let cal = Calibrator::Baseline(Baseline::Platt(PlattParams::IDENTITY));
        let mut ck = Checkpoint::new(&cal, &d.schema);
        ck.version = 99;
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
        ck.version = VERSION;
        ck.format = "other".into();
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
        assert!(Checkpoint::from_json("{").is_err());

        let (model, _) = fit(&d, &DescConfig { epochs: 0, ..small_desc() }).unwrap();
        let mut ck = Checkpoint::new(&Calibrator::Desc(Box::new(model)), &d.schema);
        if let CalibratorRecord::Desc(r) = &mut ck.calibrator {
            r.params.tensors.pop();
        }
        assert!(matches!(ck.calibrator(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn zero_epoch_checkpoint_is_initialization() {
        let d = data();
        let cfg = DescConfig { epochs: 0, ..small_desc() };
        let (model, _) = fit(&d, &cfg).unwrap();
        let fresh = DescModel::new(d.schema.clone(), model.buckets.clone(), cfg).unwrap();
        let ck = Checkpoint::new(&Calibrator::Desc(Box::new(model)), &d.schema);
        assert_eq!(ck.calibrator().unwrap(), Calibrator::Desc(Box::new(fresh)));
    }
}
