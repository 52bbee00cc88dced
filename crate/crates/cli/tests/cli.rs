use std::path::Path;
use std::process::{Command, Output};

fn odemap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odemap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn convergence_writes_csv_with_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rows.csv");
    let run = odemap(&[
        "convergence",
        "--problem",
        "logistic",
        "--methods",
        "eks0,ieks",
        "--nu",
        "1",
        "--dense-exp",
        "8",
        "--decimations",
        "2..5",
        "--out",
        path(&out),
        "--seedless",
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "delta,method,nu,err_sup_y,err_sup_dy,sigma2_hat,iterations,flagged"
    );
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows[0].starts_with("7.8125000000000000e-3,eks0,1,"));
    assert!(rows[4].contains(",ieks,1,"));
    assert!(!text.contains('\r'));
}

#[test]
fn convergence_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = odemap(&[
            "convergence",
            "--problem",
            "nonsmooth",
            "--nu",
            "1,2",
            "--dense-exp",
            "7",
            "--decimations",
            "1,3,2",
            "--prior",
            "ioup",
            "--out",
            path(&out),
        ])
        .status;
        assert!(status.success());
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn solve_dumps_solution_with_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sol.csv");
    let run = odemap(&[
        "solve",
        "--problem",
        "logistic",
        "--method",
        "ieks",
        "--nu",
        "2",
        "--step",
        "0.0625",
        "--out",
        path(&out),
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(
        lines[0],
        "t,y0,y_lo0,y_hi0,dy0,dy_lo0,dy_hi0,ref_y0,ref_dy0"
    );
    assert_eq!(lines.len(), 18);
    let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert!((first[1] - 0.15).abs() < 1e-12);
    assert!((first[7] - 0.15).abs() < 1e-15);
    // initial value is pinned, so the band collapses
    assert!((first[3] - first[2]).abs() < 1e-6);
}

#[test]
fn solve_fhn_with_matern_prior() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fhn.csv");
    let run = odemap(&[
        "solve",
        "--problem",
        "fhn",
        "--method",
        "eks1",
        "--nu",
        "2",
        "--step",
        "0.125",
        "--prior",
        "matern",
        "--prior-rate",
        "2",
        "--out",
        path(&out),
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let header = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(header.ends_with("ref_y1,ref_dy1"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let cases: [&[&str]; 4] = [
        &[
            "solve",
            "--problem",
            "logistic",
            "--method",
            "ieks",
            "--nu",
            "2",
            "--step",
            "0.3",
            "--out",
            path(&out),
        ],
        &[
            "solve",
            "--problem",
            "logistic",
            "--method",
            "rk4",
            "--nu",
            "2",
            "--step",
            "0.5",
            "--out",
            path(&out),
        ],
        &["convergence", "--problem", "pendulum", "--out", path(&out)],
        &[
            "convergence",
            "--problem",
            "logistic",
            "--dense-exp",
            "4",
            "--decimations",
            "2..6",
            "--out",
            path(&out),
        ],
    ];
    for args in cases {
        assert_eq!(odemap(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn solver_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    // 2^-20 steps with nu = 4 leave the innovation covariance numerically singular
    let run = odemap(&[
        "solve",
        "--problem",
        "riccati",
        "--method",
        "eks0",
        "--nu",
        "4",
        "--step",
        "9.5367431640625e-7",
        "--out",
        path(&out),
    ]);
    assert_eq!(
        run.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
}
