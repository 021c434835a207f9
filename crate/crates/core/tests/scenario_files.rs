use sioms_core::cache::TableCache;
use sioms_core::report::ReportFormat;
use sioms_core::scenario::{LoadError, Scenario, BUILTINS};
use sioms_core::transition::TransitionTables;

fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn builtins_carry_the_documented_parameters() {
    for name in BUILTINS {
        assert!(Scenario::builtin(name).is_some());
    }
    let s = Scenario::builtin("spring_mass").unwrap();
    assert_eq!(s.system.x0().as_slice(), &[1.0, 0.0]);
    assert_eq!(s.system.a(1, 0.0)[(1, 0)], -70.0);
    assert_eq!(s.system.a(1, 0.0)[(1, 1)], -2.0);
    assert_eq!(s.cost.q(0.0)[(1, 1)], 0.1);
    assert_eq!((s.cost.t0(), s.cost.t_m()), (0.0, 2.0));

    let c = Scenario::builtin("cart_mass").unwrap();
    assert_eq!(c.system.x0().as_slice(), &[0.5, 0.0, 0.1, 0.0, 1.0]);
    let t: f64 = 0.9;
    let h = t.sin() + 2.0;
    let a = c.system.a(2, t);
    assert!((a[(3, 2)] + 9.8 / h).abs() < 1e-15);
    assert!((a[(3, 3)] + 0.05 / (0.124 * h * h)).abs() < 1e-15);
    assert!((a[(1, 4)] + 0.5).abs() < 1e-15);
    assert_eq!(c.cost.p1()[(0, 0)], 0.1);
    assert_eq!(c.cost.p1()[(2, 2)], 10.0);
}

#[test]
fn files_load_and_errors_name_path_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let src = Scenario::builtin_source("spring_mass").unwrap();
    let good = write(&dir, "good.toml", src);
    assert_eq!(Scenario::resolve(good.to_str().unwrap()).unwrap().name, "spring_mass");

    let bad = write(&dir, "bad.toml", &src.replace("tm = 2.0", "tm = \"two\""));
    let err = Scenario::load(&bad).unwrap_err();
    let text = err.to_string();
    assert!(text.starts_with(&bad.display().to_string()), "{text}");
    let LoadError::Parse(e) = err else { panic!("expected a parse error") };
    assert!(e.line.is_some());

    let missing = dir.path().join("nope.toml");
    let err = Scenario::resolve(missing.to_str().unwrap()).unwrap_err();
    assert!(matches!(err, LoadError::Io { .. }));
    assert!(err.to_string().contains("nope.toml"));
}

#[test]
fn output_section_and_samples() {
    let src = Scenario::builtin_source("spring_mass").unwrap().replace(
        "max_iter = 30",
        "max_iter = 30\nsamples = 400",
    ) + "\n[output]\ndir = \"runs\"\nformat = \"structured\"\ntimings = true\n";
    let s = Scenario::parse(&src, "x.toml").unwrap();
    assert_eq!(s.table_samples, Some(400));
    assert_eq!(s.open_loop_table_params().samples, 400);
    assert_eq!(s.output.dir.as_deref(), Some("runs"));
    assert_eq!(s.output.format, Some(ReportFormat::Structured));
    assert!(s.output.timings);

    let e = Scenario::parse(&src.replace("samples = 400", "samples = 1"), "x.toml").unwrap_err();
    assert_eq!(e.field, "solver.samples");
    let e = Scenario::parse(&src.replace("\"structured\"", "\"xml\""), "x.toml").unwrap_err();
    assert!(e.line.is_some());
}

#[test]
fn range_checks_cite_fields() {
    let src = Scenario::builtin_source("cart_mass").unwrap();
    let cases = [
        ("state = 4", "state = 9", "disturbances.state"),
        ("delta = 0.5", "delta = 5.0", "rh.delta"),
        ("initial_mode = 1", "initial_mode = 4", "solver.initial_mode"),
        ("high = 3.0", "high = -1.0", "montecarlo.low"),
    ];
    for (from, to, field) in cases {
        let e = Scenario::parse(&src.replacen(from, to, 1), "c.toml").unwrap_err();
        assert_eq!(e.field, field, "{e}");
    }
}

#[test]
fn table_cache_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::builtin("cart_mass").unwrap();
    let cost = s.cost.with_horizon(0.0, 3.0).unwrap();
    let params = s.table_params(3.0, 1e-2);
    let cache = TableCache::new(dir.path());
    let (a, hit) = cache.load_or_build(&s.system, &cost, params).unwrap();
    assert!(!hit);
    let (b, hit) = cache.load_or_build(&s.system, &cost, params).unwrap();
    assert!(hit);
    let fresh = TransitionTables::build(&s.system, &cost, params).unwrap();
    assert_eq!(a.max_difference(&b), 0.0);
    assert_eq!(b.max_difference(&fresh), 0.0);
}
