use equikit_demo::{equivariance_probe, glyph_names, FairLab, ShapeLab};
use serde_json::Value;

fn parse(s: String) -> Value {
    let v: Value = serde_json::from_str(&s).unwrap();
    assert!(v.get("error").is_none(), "{s}");
    v
}

#[test]
fn probe_reports_exact_equivariance_for_every_wrapper() {
    for action in ["rot90", "hflip"] {
        for wrapper in ["equitune", "equizero", "lambda"] {
            let rows = parse(equivariance_probe(3, action, wrapper));
            let rows = rows.as_array().unwrap();
            assert_eq!(rows.len(), if action == "rot90" { 4 } else { 2 });
            for r in rows {
                assert!(r["wrapped"].as_f64().unwrap() <= 1e-9, "{action} {wrapper}: {r}");
            }
            assert!(rows[1]["bare"].as_f64().unwrap() > 1e-3);
        }
    }
    let bad: Value = serde_json::from_str(&equivariance_probe(0, "shear", "equitune")).unwrap();
    assert!(bad["error"].is_string());
}

#[test]
fn shape_lab_classifies_a_rotated_glyph() {
    assert_eq!(serde_json::from_str::<Vec<String>>(&glyph_names()).unwrap().len(), 8);
    let lab = ShapeLab::new(0, 120).unwrap();
    let out = parse(lab.classify(1, 1, 0));
    let rows = out["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let s: f64 = r["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert_eq!(rows[3]["weights"].as_array().unwrap().len(), 4);
    assert!(rows[2]["g_star"].as_u64().unwrap() < 4);
    assert_eq!(parse(lab.scoreboard(16)).as_array().unwrap().len(), 4);
}

#[test]
fn fair_lab_completes_prompt_and_twin() {
    let lab = FairLab::new(0, 100).unwrap();
    for method in ["raw", "equitune", "relaxed", "equizero"] {
        let rows = parse(lab.generate("the man was", method, 4));
        let rows = rows.as_array().unwrap();
        assert_eq!(rows[1]["prompt"], "the woman was");
        if method == "equizero" || method == "equitune" {
            assert_eq!(rows[0]["score"], rows[1]["score"], "{method}");
        }
    }
    let bad: Value = serde_json::from_str(&lab.generate("the dragon was", "raw", 4)).unwrap();
    assert!(bad["error"].is_string());
}
