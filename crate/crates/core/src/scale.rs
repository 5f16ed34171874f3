//! SUVR ↔ Centiloid mapping for change-from-baseline effects.
//!
//! Each tracer has a linear calibration `Centiloid = a · SUVR + c`. Applied to
//! a difference of two time points the intercept cancels, so only the slope
//! `a` is needed. Studies imaged with several tracers use the mean slope.

use std::collections::BTreeSet;

use crate::data::{Dataset, SurrogateScale, Tracer};
use crate::error::{Result, SurrogacyError};

/// Slope of one tracer's calibration, in Centiloid units per SUVR unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracerMap {
    pub tracer: Tracer,
    pub slope: f64,
}

pub const TRACER_MAPS: [TracerMap; 3] = [
    TracerMap {
        tracer: Tracer::Florbetapir,
        slope: 183.0,
    },
    TracerMap {
        tracer: Tracer::Florbetaben,
        slope: 153.4,
    },
    TracerMap {
        tracer: Tracer::Flutemetamol,
        slope: 116.0,
    },
];

pub fn tracer_slope(tracer: Tracer) -> Option<f64> {
    TRACER_MAPS
        .iter()
        .find(|m| m.tracer == tracer)
        .map(|m| m.slope)
}

/// Mean calibration slope over the listed tracers.
pub fn effective_slope(tracers: &BTreeSet<Tracer>) -> Result<f64> {
    if tracers.is_empty() {
        return Err(SurrogacyError::UnknownTracer(vec!["<no tracer>".into()]));
    }
    let mut sum = 0.0;
    for &t in tracers {
        sum += tracer_slope(t).ok_or_else(|| SurrogacyError::UnknownTracer(vec![t.to_string()]))?;
    }
    Ok(sum / tracers.len() as f64)
}

/// Maps an SUVR change and its standard error to Centiloid units.
pub fn centiloid_delta_from_suvr(
    tracers: &BTreeSet<Tracer>,
    d_suvr: f64,
    se_suvr: f64,
) -> Result<(f64, f64)> {
    let slope = effective_slope(tracers)?;
    Ok((slope * d_suvr, slope.abs() * se_suvr))
}

/// Inverse of [`centiloid_delta_from_suvr`].
pub fn suvr_delta_from_centiloid(
    tracers: &BTreeSet<Tracer>,
    d_cl: f64,
    se_cl: f64,
) -> Result<(f64, f64)> {
    let slope = effective_slope(tracers)?;
    Ok((d_cl / slope, se_cl / slope.abs()))
}

/// Puts every contrast on `target`, flagging converted rows as imputed. Fails
/// with the list of studies whose tracers have no published map.
pub fn harmonize_surrogate_scale(d: &Dataset, target: SurrogateScale) -> Result<Dataset> {
    let mut blocked: Vec<String> = Vec::new();
    let mut out = d.clone();
    for c in &mut out.contrasts {
        if c.surrogate_scale == target {
            continue;
        }
        let converted = match target {
            SurrogateScale::Suvr => suvr_delta_from_centiloid(&c.tracers, c.y1, c.se1),
            SurrogateScale::Centiloid => centiloid_delta_from_suvr(&c.tracers, c.y1, c.se1),
        };
        match converted {
            Ok((y, se)) => {
                c.y1 = y;
                c.se1 = se;
                c.surrogate_scale = target;
                c.imputed_scale = true;
            }
            Err(_) => {
                if !blocked.contains(&c.study_id) {
                    blocked.push(c.study_id.clone());
                }
            }
        }
    }
    if blocked.is_empty() {
        Ok(out)
    } else {
        Err(SurrogacyError::UnknownTracer(blocked))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrialContrast;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn set(ts: &[Tracer]) -> BTreeSet<Tracer> {
        ts.iter().copied().collect()
    }

    #[test]
    fn published_slopes() {
        assert_eq!(
            effective_slope(&set(&[Tracer::Florbetapir])).unwrap(),
            183.0
        );
        assert_eq!(
            effective_slope(&set(&[Tracer::Florbetaben])).unwrap(),
            153.4
        );
        assert_eq!(
            effective_slope(&set(&[Tracer::Flutemetamol])).unwrap(),
            116.0
        );
        assert_relative_eq!(
            effective_slope(&set(&[Tracer::Florbetapir, Tracer::Florbetaben])).unwrap(),
            168.2,
            max_relative = 1e-14
        );
        assert!(matches!(
            effective_slope(&set(&[Tracer::Other])),
            Err(SurrogacyError::UnknownTracer(_))
        ));
    }

    #[test]
    fn forward_and_inverse_examples() {
        let (d, se) = centiloid_delta_from_suvr(&set(&[Tracer::Florbetapir]), -0.3, 0.05).unwrap();
        assert_relative_eq!(d, -54.9, max_relative = 1e-14);
        assert_relative_eq!(se, 9.15, max_relative = 1e-14);
        let (d, _) = centiloid_delta_from_suvr(&set(&[Tracer::Flutemetamol]), -0.2, 0.01).unwrap();
        assert_relative_eq!(d, -23.2, max_relative = 1e-14);
        let (d, _) = centiloid_delta_from_suvr(&set(&[Tracer::Florbetaben]), 0.0, 0.01).unwrap();
        assert_eq!(d, 0.0);
        let (d, _) = suvr_delta_from_centiloid(&set(&[Tracer::Florbetapir]), -54.9, 1.0).unwrap();
        assert_relative_eq!(d, -0.3, max_relative = 1e-14);
        let (d, _) = suvr_delta_from_centiloid(&set(&[Tracer::Florbetapir]), 0.0, 1.0).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn harmonize_flags_converted_rows_and_blocks_other() {
        let mut a = TrialContrast::new("S1", "x", "c1", -50.0, 5.0, -0.3, 0.2);
        a.surrogate_scale = SurrogateScale::Centiloid;
        let b = TrialContrast::new("S2", "x", "c1", -0.2, 0.02, -0.3, 0.2);
        let d = Dataset::new(vec![a.clone(), b]);
        let h = harmonize_surrogate_scale(&d, SurrogateScale::Suvr).unwrap();
        assert!(h.contrasts[0].imputed_scale);
        assert!(!h.contrasts[1].imputed_scale);
        assert_relative_eq!(h.contrasts[0].y1, -50.0 / 183.0);
        assert!(!d.contrasts[0].imputed_scale);
        assert_eq!(
            harmonize_surrogate_scale(&h, SurrogateScale::Suvr).unwrap(),
            h
        );

        let mut blocked = a;
        blocked.study_id = "S9".into();
        blocked.tracers = set(&[Tracer::Other]);
        match harmonize_surrogate_scale(&Dataset::new(vec![blocked]), SurrogateScale::Suvr) {
            Err(SurrogacyError::UnknownTracer(studies)) => assert_eq!(studies, vec!["S9"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn tracer_sets() -> impl Strategy<Value = BTreeSet<Tracer>> {
        proptest::sample::subsequence(
            vec![
                Tracer::Florbetapir,
                Tracer::Florbetaben,
                Tracer::Flutemetamol,
            ],
            1..=3,
        )
        .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(tracers in tracer_sets(), x in -5.0f64..5.0, se in 1e-4f64..1.0) {
            let (d, s) = centiloid_delta_from_suvr(&tracers, x, se).unwrap();
            let (back, sback) = suvr_delta_from_centiloid(&tracers, d, s).unwrap();
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1e-300));
            prop_assert!((sback - se).abs() <= 1e-12 * se);
        }

        #[test]
        fn conversion_is_linear(tracers in tracer_sets(), x in -5.0f64..5.0, c in -10.0f64..10.0) {
            let (fx, _) = centiloid_delta_from_suvr(&tracers, x, 1.0).unwrap();
            let (fcx, _) = centiloid_delta_from_suvr(&tracers, c * x, 1.0).unwrap();
            prop_assert!((fcx - c * fx).abs() <= 1e-12 * (c * fx).abs().max(1e-12));
        }
    }
}
