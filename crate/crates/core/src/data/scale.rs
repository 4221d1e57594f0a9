use serde::{Deserialize, Serialize};

use super::io::FeatureRecord;
use super::split::DatasetSplit;
use crate::error::{Error, Result};

/// Per-coordinate min-max scaling to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalingParams {
    /// Fits on `records`. Coordinates with zero range map to 0.5.
    pub fn fit(records: &[FeatureRecord]) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Data("cannot fit scaling on an empty record set".into()));
        };
        let mut min = first.vector.clone();
        let mut max = first.vector.clone();
        for r in records {
            if r.vector.len() != min.len() {
                return Err(Error::Data(format!(
                    "record width {} differs from {}",
                    r.vector.len(),
                    min.len()
                )));
            }
            for (j, &v) in r.vector.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        let flat = min.iter().zip(&max).filter(|(a, b)| a == b).count();
        if flat > 0 {
            log::warn!("{flat} coordinate(s) have zero range on the training split; they map to 0.5");
        }
        Ok(ScalingParams { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&x, (&lo, &hi))| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 })
            .collect()
    }

    pub fn inverse(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&y, (&lo, &hi))| if hi > lo { lo + y * (hi - lo) } else { lo })
            .collect()
    }

    pub fn apply_all(&self, records: &[FeatureRecord]) -> Result<Vec<FeatureRecord>> {
        records
            .iter()
            .map(|r| {
                if r.vector.len() != self.dim() {
                    return Err(Error::Data(format!(
                        "record width {} does not match scaling width {}",
                        r.vector.len(),
                        self.dim()
                    )));
                }
                Ok(FeatureRecord {
                    vector: self.apply(&r.vector),
                    ..r.clone()
                })
            })
            .collect()
    }
}

/// Scaling for both modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub image: ScalingParams,
    pub sketch: ScalingParams,
}

/// Fits on the seen-class training records and applies to every record.
pub fn standardize(split: &DatasetSplit) -> Result<(DatasetSplit, Scaling)> {
    let scaling = Scaling {
        image: ScalingParams::fit(&split.train_images)?,
        sketch: ScalingParams::fit(&split.train_sketches)?,
    };
    let out = DatasetSplit {
        seen: split.seen.clone(),
        unseen: split.unseen.clone(),
        train_images: scaling.image.apply_all(&split.train_images)?,
        train_sketches: scaling.sketch.apply_all(&split.train_sketches)?,
        test_images: scaling.image.apply_all(&split.test_images)?,
        test_sketches: scaling.sketch.apply_all(&split.test_sketches)?,
    };
    Ok((out, scaling))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::Modality;

    fn rec(v: &[f64]) -> FeatureRecord {
        FeatureRecord {
            label: 0,
            modality: Modality::Image,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn extremes_and_constant_coordinates() {
        let recs = [rec(&[1.0, 5.0, -2.0]), rec(&[3.0, 5.0, 2.0]), rec(&[2.0, 5.0, 0.0])];
        let p = ScalingParams::fit(&recs).unwrap();
        assert_eq!(p.apply(&recs[0].vector), vec![0.0, 0.5, 0.0]);
        assert_eq!(p.apply(&recs[1].vector), vec![1.0, 0.5, 1.0]);
        assert_eq!(p.apply(&recs[2].vector), vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn inverse_round_trip() {
        let recs = [rec(&[-3.7, 0.1]), rec(&[9.2, 0.4])];
        let p = ScalingParams::fit(&recs).unwrap();
        for x in [[-1.0, 0.2], [0.0, 0.35], [9.0, 0.1]] {
            let back = p.inverse(&p.apply(&x));
            for (a, b) in back.iter().zip(x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_fit_rejected() {
        assert!(ScalingParams::fit(&[]).is_err());
    }
}
