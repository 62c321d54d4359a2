use desc_calib_web::{basis_curves, calibrate, distortion_curve};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn basis_curves_are_monotone_in_unit_interval() {
    for kind in ["power", "log", "scaling"] {
        let v = parse(&basis_curves(kind, "0.5, 1, 3", 50).unwrap());
        let curves = v["curves"].as_array().unwrap();
        assert_eq!(curves.len(), 3);
        for c in curves {
            let ys: Vec<f64> = c["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            assert_eq!(ys.len(), 50);
            assert!(ys.windows(2).all(|w| w[1] >= w[0]), "{kind}");
            assert!(ys.iter().all(|&y| (0.0..=1.0).contains(&y)));
        }
    }
    // Power with h = 1 is the identity.
    let v = parse(&basis_curves("power", "1", 4).unwrap());
    assert_eq!(v["t"], v["curves"][0]["values"]);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(basis_curves("cubic", "1", 10).is_err());
    assert!(basis_curves("power", "", 10).is_err());
    assert!(basis_curves("power", "1,x", 10).is_err());
    assert!(basis_curves("power", "-1", 10).is_err());
    assert!(basis_curves("power", "1", 1).is_err());
    assert!(distortion_curve(0.0, 1.0, 10).is_err());
    assert!(calibrate("xgboost", 1, 3000).is_err());
    assert!(calibrate("platt", 1, 10).is_err());
}

#[test]
fn distortion_with_unit_parameters_is_identity() {
    let v = parse(&distortion_curve(1.0, 1.0, 20).unwrap());
    let id = v["curves"][0]["values"].as_array().unwrap();
    let d = v["curves"][1]["values"].as_array().unwrap();
    for (a, b) in id.iter().zip(d) {
        assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-12);
    }
    // Doubling the odds raises every score.
    let v = parse(&distortion_curve(2.0, 1.0, 20).unwrap());
    let id = v["curves"][0]["values"].as_array().unwrap();
    let d = v["curves"][1]["values"].as_array().unwrap();
    assert!(id.iter().zip(d).all(|(a, b)| b.as_f64() > a.as_f64()));
}

#[test]
fn calibration_demo_reduces_field_error() {
    for method in ["hb", "platt", "desc"] {
        let v = parse(&calibrate(method, 7, 30_000).unwrap());
        let before = v["before"]["mf_ece_10"].as_f64().unwrap();
        let after = v["after"]["mf_ece_10"].as_f64().unwrap();
        assert!(after < before, "{method}: {before} -> {after}");
        assert_eq!(v["reliability_after"].as_array().unwrap().len(), 10);
    }
    assert_eq!(calibrate("ir", 3, 3000).unwrap(), calibrate("ir", 3, 3000).unwrap());
}
