mod common;

use std::path::Path;

use common::{config, configs_dir, csv_rows, json, mirpairs, same_tree};
use mirpairs::physmodel::{db_per_cm_to_per_m, effective_length};

fn run_ok(args: &[&str]) -> String {
    let r = mirpairs(args, None);
    assert_eq!(r.code, 0, "{args:?}\n{}", r.stderr);
    r.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_power_mismatch_is_linear() {
    let out = tempfile::tempdir().unwrap();
    run_ok(&[
        "phasematch",
        "--config",
        s(&config("phasematch-zero-power.json")),
        "--out",
        s(out.path()),
    ]);
    let beta2 = -0.6e-24;
    let rows = csv_rows(&out.path().join("phasematch_mismatch.csv"));
    assert_eq!(rows.len(), 2001);
    for r in rows {
        let lin = -beta2 * r[0] * r[0];
        assert!((r[1] - lin).abs() <= 1e-9 * lin.abs().max(1.0), "{r:?}");
    }
}

#[test]
fn high_power_zero_sits_at_perfect_detuning() {
    let out = tempfile::tempdir().unwrap();
    run_ok(&[
        "phasematch",
        "--config",
        s(&config("phasematch-high-power.json")),
        "--out",
        s(out.path()),
    ]);
    // γ = 2πn₂/(λA_eff), Δω* = √(2γP/|β₂|)
    let gamma = 2.0 * std::f64::consts::PI * 15.3e-18 / (2.071e-6 * 0.228e-12);
    let expected = (2.0 * gamma * 5.0 / 0.6e-24).sqrt();
    let summary = json(&out.path().join("phasematch_summary.json"));
    let reported = summary["perfect_match_detuning_rad_s"].as_f64().unwrap();
    assert!((reported / expected - 1.0).abs() < 1e-9);

    let rows = csv_rows(&out.path().join("phasematch_mismatch.csv"));
    let step = rows[1][0] - rows[0][0];
    let best = rows
        .iter()
        .filter(|r| r[0] > 0.0)
        .min_by(|a, b| a[1].abs().total_cmp(&b[1].abs()))
        .unwrap();
    assert!((best[0] - expected).abs() <= step, "{} vs {expected}", best[0]);
}

#[test]
fn retrieve_reference_config_recovers_material_constants() {
    let out = tempfile::tempdir().unwrap();
    run_ok(&[
        "retrieve",
        "--config",
        s(&config("propagate-reference.json")),
        "--out",
        s(out.path()),
    ]);
    let sm = json(&out.path().join("retrieve_summary.json"));
    let n2 = sm["n2_fit"]["n2_m2_per_W"].as_f64().unwrap();
    let tpa = sm["tpa_fit"]["alpha_tpa_per_W_m"].as_f64().unwrap();
    assert!((n2 / 15.3e-18 - 1.0).abs() < 0.1, "{n2}");
    assert!((tpa / 24.4 - 1.0).abs() < 0.1, "{tpa}");
}

#[test]
fn retrieve_zero_gamma_reports_zero() {
    let out = tempfile::tempdir().unwrap();
    run_ok(&[
        "retrieve",
        "--config",
        s(&config("propagate-zero-gamma.json")),
        "--out",
        s(out.path()),
    ]);
    let sm = json(&out.path().join("retrieve_summary.json"));
    let n2 = sm["n2_fit"]["n2_m2_per_W"].as_f64().unwrap();
    let tpa = sm["tpa_fit"]["alpha_tpa_per_W_m"].as_f64().unwrap();
    assert!(n2.abs() < 1e-22, "{n2}");
    assert!(tpa.abs() < 1e-6, "{tpa}");
}

#[test]
fn tripled_length_scales_with_effective_length() {
    let short = tempfile::tempdir().unwrap();
    let long = tempfile::tempdir().unwrap();
    run_ok(&[
        "propagate",
        "--config",
        s(&config("propagate-reference.json")),
        "--out",
        s(short.path()),
    ]);
    run_ok(&[
        "propagate",
        "--config",
        s(&config("propagate-triple-length.json")),
        "--out",
        s(long.path()),
    ]);
    let a = csv_rows(&short.path().join("propagate_sweep.csv"));
    let b = csv_rows(&long.path().join("propagate_sweep.csv"));
    let alpha = db_per_cm_to_per_m(3.2);
    let ratio = effective_length(alpha, 52.5e-3) / effective_length(alpha, 17.5e-3);
    // lowest power, where TPA barely bends the curve
    let measured = b[0][2] / a[0][2];
    assert!((measured / ratio - 1.0).abs() < 0.03, "{measured} vs {ratio}");
    // without loss the ratio would be the full 3×
    assert!((effective_length(0.0, 52.5e-3) / effective_length(0.0, 17.5e-3) - 3.0).abs() < 1e-12);
}

#[test]
fn pairs_golden_summary() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("pairs-golden.json");
    run_ok(&["pairs", "simulate", "--config", s(&cfg), "--out", s(out.path())]);
    run_ok(&["pairs", "analyze", "--config", s(&cfg), "--out", s(out.path())]);
    let got = std::fs::read_to_string(out.path().join("pairs_analyze.json")).unwrap();
    let want = std::fs::read_to_string(configs_dir().join("golden/pairs-golden-summary.json")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn pairs_outputs_identical_across_thread_counts() {
    let cfg = config("pairs-golden.json");
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, threads) in dirs.iter().zip(["1", "4", "env"]) {
        let o = s(d.path());
        if threads == "env" {
            for sub in ["simulate", "analyze"] {
                let r = mirpairs(&["pairs", sub, "--config", s(&cfg), "--out", o], Some("3"));
                assert_eq!(r.code, 0, "{}", r.stderr);
            }
        } else {
            run_ok(&[
                "pairs",
                "simulate",
                "--config",
                s(&cfg),
                "--out",
                o,
                "--threads",
                threads,
            ]);
            run_ok(&[
                "pairs",
                "analyze",
                "--config",
                s(&cfg),
                "--out",
                o,
                "--threads",
                threads,
            ]);
        }
    }
    let n = same_tree(dirs[0].path(), dirs[1].path()).unwrap();
    same_tree(dirs[0].path(), dirs[2].path()).unwrap();
    assert!(n >= 10);
}

#[test]
fn hom_outputs_identical_across_thread_counts() {
    let cfg = config("hom-reference.json");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run_ok(&[
        "hom",
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(a.path()),
        "--threads",
        "1",
    ]);
    let ob = run_ok(&[
        "hom",
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(b.path()),
        "--threads",
        "4",
    ]);
    assert_eq!(oa, ob);
    same_tree(a.path(), b.path()).unwrap();
}

#[test]
fn seed_flag_overrides_config() {
    let cfg = config("hom-reference.json");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_ok(&["hom", "simulate", "--config", s(&cfg), "--out", s(a.path())]);
    run_ok(&[
        "hom",
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(b.path()),
        "--seed",
        "5",
    ]);
    let fa = std::fs::read_to_string(a.path().join("hom_fringe.csv")).unwrap();
    let fb = std::fs::read_to_string(b.path().join("hom_fringe.csv")).unwrap();
    assert_ne!(fa, fb);
    assert!(fb.contains("# seed=5"));
}

#[test]
fn empty_duration_yields_empty_outputs() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("pairs-empty.json");
    run_ok(&["pairs", "simulate", "--config", s(&cfg), "--out", s(out.path())]);
    run_ok(&["pairs", "analyze", "--config", s(&cfg), "--out", s(out.path())]);
    let sim = json(&out.path().join("pairs_simulate.json"));
    assert_eq!(sim["files"][0]["tags_a"], 0);
    assert_eq!(sim["files"][0]["tags_b"], 0);
    assert!(csv_rows(&out.path().join("car_curve.csv")).is_empty());
    let an = json(&out.path().join("pairs_analyze.json"));
    assert_eq!(an["car_curve"].as_array().unwrap().len(), 0);
}

#[test]
fn reference_pairs_config_reaches_target_rates() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("pairs-reference.json");
    run_ok(&["pairs", "simulate", "--config", s(&cfg), "--out", s(out.path())]);
    run_ok(&["pairs", "analyze", "--config", s(&cfg), "--out", s(out.path())]);
    let an = json(&out.path().join("pairs_analyze.json"));
    let rows = an["car_curve"].as_array().unwrap();
    let top = rows.last().unwrap();
    let net = top["net_hz"].as_f64().unwrap();
    let raw = top["x_raw"].as_f64().unwrap();
    let t = 20.0;
    // the highest power is chosen to give ≈ 112 Hz net; allow 3σ counting error
    assert!((net - 112.0).abs() < 3.0 * (raw.sqrt() / t) + 0.05 * 112.0, "{net}");
    assert_eq!(top["true_pair_hz"].as_f64().unwrap(), 4.0 * net);
    let xi = an["xi_estimate"]["xi_per_W2"].as_f64().unwrap();
    let err = an["xi_estimate"]["xi_err"].as_f64().unwrap();
    assert!((xi - 0.28).abs() < 3.0 * err, "{xi} ± {err}");
    // every file carries provenance
    for entry in std::fs::read_dir(out.path()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(&p).unwrap();
            assert!(text.starts_with("# mirpairs "), "{p:?}");
            assert!(text.contains("# config_sha256="), "{p:?}");
        }
    }
}

#[test]
fn hom_reference_configs() {
    let out = tempfile::tempdir().unwrap();
    run_ok(&[
        "hom",
        "simulate",
        "--config",
        s(&config("hom-reference.json")),
        "--out",
        s(out.path()),
    ]);
    let v = json(&out.path().join("hom_visibility.json"));
    assert!(v["v_net"].as_f64().unwrap() >= 0.99);

    run_ok(&[
        "hom",
        "simulate",
        "--config",
        s(&config("hom-infinite-car.json")),
        "--out",
        s(out.path()),
    ]);
    let v = json(&out.path().join("hom_visibility.json"));
    let (raw, err) = (v["v_raw"].as_f64().unwrap(), v["v_raw_err"].as_f64().unwrap());
    assert!((raw - 1.0).abs() < 3.0 * err, "{raw} ± {err}");

    // partial distinguishability brings both visibilities onto the measured ones
    run_ok(&[
        "hom",
        "simulate",
        "--config",
        s(&config("hom-reference-tuned.json")),
        "--out",
        s(out.path()),
    ]);
    let v = json(&out.path().join("hom_visibility.json"));
    let overlap = |key: &str, target: f64, target_err: f64| {
        let (x, e) = (v[key].as_f64().unwrap(), v[&format!("{key}_err")].as_f64().unwrap());
        assert!((x - target).abs() < 2.0 * e.hypot(target_err), "{key}: {x} ± {e}");
    };
    overlap("v_net", 0.993, 0.017);
    overlap("v_raw", 0.862, 0.014);

    // analyze reproduces the fit of a written scan
    let an = tempfile::tempdir().unwrap();
    run_ok(&[
        "hom",
        "analyze",
        "--scan",
        s(&out.path().join("hom_fringe.csv")),
        "--out",
        s(an.path()),
    ]);
    let w = json(&an.path().join("hom_visibility.json"));
    assert!((w["v_net"].as_f64().unwrap() - v["v_net"].as_f64().unwrap()).abs() < 1e-6);
}

#[test]
fn detector_calibration() {
    let out = tempfile::tempdir().unwrap();
    run_ok(&[
        "detector",
        "--config",
        s(&config("detector-reference.json")),
        "--out",
        s(out.path()),
    ]);
    let d = json(&out.path().join("detector_summary.json"));
    let (sde, err) = (d["sde"].as_f64().unwrap(), d["sde_err"].as_f64().unwrap());
    assert!((sde - 0.44).abs() < 3.0 * err, "{sde} ± {err}");
    assert_eq!(d["saturating"], false);

    // 5-point moving average at a table node
    let table = csv_rows(&config("detector-spectral.csv"));
    let k = table.iter().position(|r| r[0] == 2060.0).unwrap();
    let mean = table[k - 2..=k + 2].iter().map(|r| r[1]).sum::<f64>() / 5.0;
    let q = &d["spectral_queries"][0];
    assert_eq!(q["wavelength_nm"].as_f64().unwrap(), 2060.0);
    assert!((q["sde"].as_f64().unwrap() - mean).abs() < 1e-12);
    let outside = &d["spectral_queries"][3];
    assert_eq!(outside["extrapolated"], true);
    assert!(out.path().join("detector_bias.csv").exists());

    let zero = tempfile::tempdir().unwrap();
    run_ok(&[
        "detector",
        "--csv",
        s(&config("detector-zero.csv")),
        "--out",
        s(zero.path()),
    ]);
    let z = json(&zero.path().join("detector_summary.json"));
    assert_eq!(z["sde"].as_f64().unwrap(), 0.0);
}

#[test]
fn csv_summary_format() {
    let out = tempfile::tempdir().unwrap();
    let stdout = run_ok(&[
        "phasematch",
        "--config",
        s(&config("phasematch-reference.json")),
        "--out",
        s(out.path()),
        "--format",
        "csv",
    ]);
    assert!(stdout.starts_with("key,value\n"));
    assert!(stdout.contains("\ngamma_per_W_m,"));
}

#[test]
fn config_errors_exit_two_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config("pairs-golden.json")).unwrap()).unwrap();
    v["source"]["xi_per_W"] = 0.1.into();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let r = mirpairs(
        &["pairs", "simulate", "--config", s(&bad), "--out", s(dir.path())],
        None,
    );
    assert_eq!(r.code, 2);
    assert!(
        r.stderr.contains("source") && r.stderr.contains("xi_per_W"),
        "{}",
        r.stderr
    );

    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config("pairs-golden.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("seed");
    std::fs::write(&bad, v.to_string()).unwrap();
    let r = mirpairs(
        &["pairs", "simulate", "--config", s(&bad), "--out", s(dir.path())],
        None,
    );
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("seed"));

    let r = mirpairs(&["propagate", "--out", s(dir.path())], None);
    assert_eq!(r.code, 2);
}

#[test]
fn malformed_tags_exit_four_with_offset() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("pairs-golden.json");
    run_ok(&["pairs", "simulate", "--config", s(&cfg), "--out", s(out.path())]);
    let tags = out.path().join("tags_00.bin");
    let mut bytes = std::fs::read(&tags).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&tags, bytes).unwrap();
    let r = mirpairs(&["pairs", "analyze", "--config", s(&cfg), "--out", s(out.path())], None);
    assert_eq!(r.code, 4);
    assert!(r.stderr.contains("byte"), "{}", r.stderr);

    let r = mirpairs(
        &[
            "pairs",
            "analyze",
            "--config",
            s(&cfg),
            "--out",
            s(out.path()),
            "--tags",
            "/nonexistent.bin",
        ],
        None,
    );
    assert_eq!(r.code, 4);
}

#[test]
fn car_tuned_config_expectation() {
    let text = std::fs::read_to_string(config("pairs-car-tuned.json")).unwrap();
    let cfg: mirpairs::cli::PairsConfig = mirpairs::cli::parse_config(&text).unwrap();
    let exp = cfg.experiment().unwrap();
    let e = mirpairs::pairsource::expected_rates(&exp, cfg.powers_w[0], 389.0).unwrap();
    let net = e.coincidences * e.capture_fraction;
    assert!((net / 1.1 - 1.0).abs() < 0.1, "{net}");
    assert!(
        (net / e.accidentals / 25.7 - 1.0).abs() < 0.1,
        "{}",
        net / e.accidentals
    );
}
