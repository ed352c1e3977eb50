use foogd_web::{ksd_vs_shift, partition_summary, toy_density};
use serde_json::Value;

fn parse(s: &str) -> Value {
    let v: Value = serde_json::from_str(s).expect("export returns JSON");
    assert!(v.get("error").is_none(), "{s}");
    v
}

#[test]
fn partition_counts_conserve_classes() {
    let v = parse(&partition_summary(0.1, 4, 5, 40, 7));
    let counts = v["counts"].as_array().unwrap();
    assert_eq!(counts.len(), 4);
    for j in 0..5 {
        let total: u64 = counts.iter().map(|row| row[j].as_u64().unwrap()).sum();
        assert_eq!(total, 40);
    }
    let sizes: u64 = v["sizes"].as_array().unwrap().iter().map(|s| s.as_u64().unwrap()).sum();
    assert_eq!(sizes, 200);
}

#[test]
fn partition_rejects_bad_alpha() {
    let v: Value = serde_json::from_str(&partition_summary(-1.0, 4, 5, 40, 7)).unwrap();
    assert!(v["error"].is_string());
}

#[test]
fn ksd_grows_with_shift() {
    let v = parse(&ksd_vs_shift(2.0, 5, 300, 1));
    let k: Vec<f64> = v["ksd"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(k.len(), 5);
    assert!(k[0].abs() < 0.05, "{k:?}");
    assert!(k.windows(2).all(|w| w[1] > w[0]), "{k:?}");
}

#[test]
fn toy_density_returns_point_clouds() {
    let v = parse(&toy_density(0.1, 1, 0));
    assert_eq!(v["generated"].as_array().unwrap().len(), 512);
    assert_eq!(v["target"].as_array().unwrap().len(), 512);
    assert!(v["mmd"].as_f64().unwrap().is_finite());
}

#[test]
fn exports_are_deterministic() {
    assert_eq!(ksd_vs_shift(1.0, 3, 100, 4), ksd_vs_shift(1.0, 3, 100, 4));
    assert_eq!(partition_summary(0.5, 3, 4, 10, 2), partition_summary(0.5, 3, 4, 10, 2));
}
