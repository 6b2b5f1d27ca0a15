use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oedmt::forward::{self, calibrate_noise, green_analytic, MediumSpec, NoiseCalibration, SourceSpec, TimeGrid};
use oedmt::inference::{self, MomentTensor};
use oedmt::scenario::{build_grid, GridSpec};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn oedmt(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oedmt"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout_rows(o: &Output) -> Vec<Vec<String>> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn desk(name: &str) -> String {
    configs_dir().join(name).display().to_string()
}

#[test]
fn missing_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = oedmt(&["design", "--config", "/nonexistent/experiment.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("experiment.toml"));
}

#[test]
fn desk_design_prints_ten_increasing_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let o = oedmt(&["design", "--config", &desk("desk_greedy.toml")], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = stdout_rows(&o);
    assert_eq!(rows.len(), 10);
    let cum: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(cum.windows(2).all(|w| w[1] > w[0]), "{cum:?}");
    let ranks: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(ranks, (1..=10).collect::<Vec<_>>());
}

#[test]
fn k_one_picks_the_single_best_station() {
    let tmp = tempfile::tempdir().unwrap();
    let o = oedmt(
        &["design", "--config", &desk("desk_greedy.toml"), "--override", "k=1"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = stdout_rows(&o);
    assert_eq!(rows.len(), 1);
    let id: usize = rows[0][1].parse().unwrap();
    let gain: f64 = rows[0][4].parse().unwrap();

    // sweep every station of the desk grid
    let stations = build_grid(&GridSpec::with_spacing([-4000.0, 4000.0], [-4000.0, 4000.0], 400.0)).unwrap();
    let grid = TimeGrid::new(300, 0.01).unwrap();
    let medium = MediumSpec {
        vp: 4000.0,
        vs: 2309.4,
        rho: 2000.0,
    };
    let source = SourceSpec::at(0.0, 0.0, 2000.0);
    let cal = NoiseCalibration {
        rel: 0.1,
        corr_time: grid.duration(),
        sigma_floor: 1e-12,
    };
    let prior = oedmt::inference::GaussianBelief::isotropic(0.5).unwrap();
    let (best_id, best) = stations
        .iter()
        .map(|st| {
            let g = green_analytic(st.id, &source, &medium, st.location(), grid).unwrap();
            let noise = calibrate_noise(&g, &MomentTensor::reference(), grid, &cal).unwrap();
            let h = forward::precision_summary(&g, &noise, None).unwrap().h;
            (st.id, inference::eig(&h, prior.cov()).unwrap())
        })
        .fold(
            (usize::MAX, f64::NEG_INFINITY),
            |acc, x| if x.1 > acc.1 { x } else { acc },
        );
    assert_eq!(id, best_id);
    assert!((gain - best).abs() <= 1e-9 * best, "{gain} vs {best}");
}

#[test]
fn negative_prior_width_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = oedmt(
        &[
            "design",
            "--config",
            &desk("desk_greedy.toml"),
            "--override",
            "prior.sigma_p=-0.5",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sigma_p"), "{}", stderr(&o));
}

#[test]
fn duplicate_manifest_ids_are_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("dup.json"),
        r#"{"n_t": 4, "dt": 0.01, "stations": [
            {"id": 2, "east_m": 0.0, "north_m": 0.0, "file": "a.f64"},
            {"id": 2, "east_m": 1.0, "north_m": 0.0, "file": "b.f64"}]}"#,
    )
    .unwrap();
    let cfg = r#"
mode = "greedy"
k = 1
seed = 1

[grid]
east_m = [0.0, 1.0]
north_m = [0.0, 0.0]
counts = [2, 1]

[time]
n_t = 4
dt = 0.01

[source]
east_m = 0.0
north_m = 0.0
depth_m = 1000.0

[forward]
provider = "import"
manifests = ["dup.json"]

[[media]]
label = "m"
vp = 4000.0
vs = 2309.4
rho = 2000.0
"#;
    let path = tmp.path().join("import.toml");
    std::fs::write(&path, cfg).unwrap();
    let p = path.display().to_string();
    let o = oedmt(&["validate-config", "--config", &p], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("duplicate station id 2"), "{}", stderr(&o));
    let o = oedmt(&["design", "--config", &p], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn misspec_prints_one_row_per_pair_network_and_size() {
    let tmp = tempfile::tempdir().unwrap();
    let o = oedmt(
        &["misspec", "--config", &desk("desk_misspec.toml"), "--override", "k=3"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout_rows(&o).len(), 6 * 3 * 3);
}

#[test]
fn shipped_configs_validate() {
    let tmp = tempfile::tempdir().unwrap();
    for name in [
        "desk_greedy.toml",
        "desk_random.toml",
        "desk_depth.toml",
        "desk_misspec.toml",
    ] {
        let o = oedmt(&["validate-config", "--config", &desk(name)], tmp.path());
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("# hash = "));
    }
}

#[test]
fn artifacts_land_under_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let o = oedmt(
        &[
            "validate-config",
            "--config",
            &desk("desk_greedy.toml"),
            "--override",
            "k=2",
        ],
        tmp.path(),
    );
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let hash = text.lines().last().unwrap().trim_start_matches("# hash = ").to_string();
    let o = oedmt(
        &["design", "--config", &desk("desk_greedy.toml"), "--override", "k=2"],
        tmp.path(),
    );
    assert!(o.status.success());
    let dir = tmp.path().join(&hash);
    for f in ["config.toml", "summary.json", "design_greedy.json", "scores.csv"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
}
