use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step. When a probe crosses a ReLU or clamp kink
    /// the step is shrunk tenfold up to three times, after which the
    /// coordinate is skipped.
    pub step: f64,
    /// Parameters larger than this are checked on a seeded random subset.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Denominator floor of the relative error. Gradients much smaller than
    /// this are dominated by finite-difference roundoff.
    pub floor: f64,
    /// Forwarded to the tape used for the analytic gradient.
    pub inject_fault: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            max_coords_per_param: 256,
            seed: 0,
            floor: 1e-5,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    /// Coordinates sitting on a kink at every tried step.
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - b| / max(floor, |a| + |b|)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}

const STEP_RETRIES: usize = 3;

fn eval<F>(forward: &F, store: &ParamStore) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = forward(&mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("forward produced loss {v}")));
    }
    Ok((v, tape.region_signature()))
}

/// Compares reverse-mode gradients of `forward` against central finite
/// differences for every parameter of `store`.
pub fn grad_check<F>(forward: F, store: &ParamStore, tolerance: f64, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let (grads, base_regions) = {
        let mut tape = Tape::new(store);
        if cfg.inject_fault {
            tape.inject_backward_fault();
        }
        let loss = forward(&mut tape)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("forward produced loss {v}")));
        }
        let regions = tape.region_signature();
        (tape.backward(loss)?, regions)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let size = store.get(id).len();
        let coords: Vec<usize> = if size <= cfg.max_coords_per_param {
            (0..size).collect()
        } else {
            let mut c = sample(&mut rng, size, cfg.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = grads.get(id);
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        for &c in &coords {
            let orig = store.get(id).as_slice().expect("contiguous")[c];
            let ad = analytic.map_or(0.0, |g| g.as_slice().expect("contiguous")[c]);
            let mut h = cfg.step;
            let mut fd = None;
            for _ in 0..=STEP_RETRIES {
                work.get_mut(id).as_slice_mut().expect("contiguous")[c] = orig + h;
                let (up, up_regions) = eval(&forward, &work)?;
                work.get_mut(id).as_slice_mut().expect("contiguous")[c] = orig - h;
                let (down, down_regions) = eval(&forward, &work)?;
                work.get_mut(id).as_slice_mut().expect("contiguous")[c] = orig;
                if up_regions == base_regions && down_regions == base_regions {
                    fd = Some((up - down) / (2.0 * h));
                    break;
                }
                h /= 10.0;
            }
            match fd {
                Some(fd) => worst = worst.max(relative_error(ad, fd, cfg.floor)),
                None => skipped += 1,
            }
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            coords_checked: coords.len() - skipped,
            kinks_skipped: skipped,
            max_rel_error: worst,
        });
    }
    let (worst_param, max_rel_error) = params
        .iter()
        .fold((String::new(), 0.0f64), |(n, e), p| {
            if p.max_rel_error > e || n.is_empty() {
                (p.name.clone(), p.max_rel_error.max(e))
            } else {
                (n, e)
            }
        });
    Ok(GradCheckReport {
        passed: max_rel_error < tolerance,
        params,
        max_rel_error,
        worst_param,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_matches_analytic() {
        let mut s = ParamStore::new();
        s.add("p", array![[0.3, -1.7, 2.2]]).unwrap();
        let r = grad_check(
            |t| {
                let p = t.param_named("p")?;
                let sq = t.mul(p, p)?;
                let m = t.mean(sq);
                Ok(t.scale(m, 3.0))
            },
            &s,
            1e-8,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.worst_param, "p");
    }

    #[test]
    fn nan_forward_is_an_error() {
        let mut s = ParamStore::new();
        s.add("p", array![[-1.0]]).unwrap();
        let r = grad_check(
            |t| {
                let p = t.param_named("p")?;
                // ln of a negative probability.
                t.bce(p, &[1.0])
            },
            &s,
            1e-6,
            &GradCheckConfig::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut s = ParamStore::new();
        s.add("l.w", array![[0.5, -0.3], [0.2, 0.8]]).unwrap();
        s.add("l.b", array![[0.1, 0.0]]).unwrap();
        let f = |t: &mut Tape| {
            let x = t.constant(array![[1.0, 2.0], [-0.5, 0.3]]);
            let h = t.dense("l", x, crate::diffcore::Activation::Identity)?;
            let e = t.exp(h);
            Ok(t.mean(e))
        };
        let cfg = GradCheckConfig {
            inject_fault: true,
            ..Default::default()
        };
        let r = grad_check(f, &s, 1e-4, &cfg).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_param, "l.w");
    }

    #[test]
    fn kink_inside_the_step_is_not_reported() {
        // relu(p - 1e-7) has its kink between p - h and p + h at h = 1e-6.
        let mut s = ParamStore::new();
        s.add("p", array![[0.0]]).unwrap();
        let f = |t: &mut Tape| {
            let p = t.param_named("p")?;
            let c = t.constant(array![[2e-7]]);
            let q = t.add(p, c)?;
            let r = t.relu(q);
            Ok(t.mean(r))
        };
        let r = grad_check(f, &s, 1e-6, &GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.params[0].kinks_skipped, 0);

        // Exactly on the kink no step avoids it.
        let mut s = ParamStore::new();
        s.add("p", array![[0.0]]).unwrap();
        let f = |t: &mut Tape| {
            let p = t.param_named("p")?;
            let r = t.relu(p);
            Ok(t.mean(r))
        };
        let r = grad_check(f, &s, 1e-6, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.params[0].kinks_skipped, 1);
        assert_eq!(r.params[0].coords_checked, 0);
    }
}
