use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvjump"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mvjump-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = "\
dim = 1
a = 1
c = 0.5
sigma = 0.3
j0 = 0.2
jump_intensity = 1
jump_mark = gauss 0 1
n_particles = 60
n_steps = 32
T = 1
out_dir = results
";

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
}

#[test]
fn help_and_version_exit_cleanly() {
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    let v = bin().arg("--version").output().unwrap();
    assert_eq!(v.status.code(), Some(0));
    assert!(stdout(&v).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn identities_default_family_passes_and_footer_has_seed() {
    let o = bin().args(["identities", "--out", "-", "--points", "50", "--seed", "11"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("identity,value,bound,pass\n"));
    assert!(text.contains("# seed=11\n"));
    assert!(text.contains("# version="));
    assert!(text.lines().any(|l| l.starts_with("# wall_time_s=")));
    assert!(!text.contains(",false"));
}

#[test]
fn simulate_writes_both_tables_under_out_dir() {
    let dir = scratch("simulate");
    std::fs::write(dir.join("run.cfg"), SMALL).unwrap();
    let o = run_in(&dir, &["simulate", "--config", "run.cfg", "--max-paths", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let paths = std::fs::read_to_string(dir.join("results/paths.csv")).unwrap();
    let body: Vec<&str> = paths.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "particle,t,x1");
    assert_eq!(body.len(), 1 + 3 * 33);
    let moments = std::fs::read_to_string(dir.join("results/moments.csv")).unwrap();
    assert!(moments.starts_with("t,mean_1,second_moment,e_sup_running\n"));
    assert!(moments.contains("# h3_pass=true"));
}

#[test]
fn config_errors_exit_with_two_and_name_the_key() {
    let dir = scratch("badcfg");
    std::fs::write(dir.join("bad.cfg"), SMALL.replace("a = 1", "eigenvalues = 0.5")).unwrap();
    let o = run_in(&dir, &["simulate", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("eigenvalues"), "{err}");

    std::fs::write(dir.join("colour.cfg"), format!("{SMALL}colour = red\n")).unwrap();
    let o = run_in(&dir, &["simulate", "--config", "colour.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn misaligned_delay_reports_nearest_step() {
    let dir = scratch("delay");
    let cfg = SMALL.replace("n_steps = 32", "n_steps = 30") + "scheme = caratheodory\nk = 4\n";
    std::fs::write(dir.join("d.cfg"), cfg).unwrap();
    let o = run_in(&dir, &["simulate", "--config", "d.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nearest valid h"));
}

#[test]
fn averaging_rejects_eps_outside_unit_interval() {
    let dir = scratch("eps");
    std::fs::write(dir.join("a.cfg"), SMALL).unwrap();
    let o = run_in(&dir, &["averaging", "--config", "a.cfg", "--eps", "1.5,0.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cauchy_table_has_one_row_per_refinement() {
    let dir = scratch("cauchy");
    std::fs::write(dir.join("c.cfg"), SMALL).unwrap();
    let o = run_in(&dir, &["cauchy", "--config", "c.cfg", "--k", "4,8,16", "--out", "-"]);
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "k_coarse,k_fine,distance,std_error,terminal_w2");
    assert!(rows[1].starts_with("4,8,"));
    assert!(rows[2].starts_with("8,16,"));
    assert!(text.contains("# sup_moment_k16="));
}

#[test]
fn w2_reads_headers_and_picks_a_method() {
    let dir = scratch("w2");
    std::fs::write(dir.join("a.csv"), "x,y\n0,0\n1,1\n2,0\n").unwrap();
    std::fs::write(dir.join("b.csv"), "# shifted\n1,0\n2,1\n3,0\n").unwrap();
    let o = run_in(&dir, &["w2", "a.csv", "b.csv"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("\nexact,1.0,true\n"), "{}", stdout(&o));

    std::fs::write(dir.join("line.csv"), "3\n1\n2\n").unwrap();
    std::fs::write(dir.join("line2.csv"), "0\n2\n1\n").unwrap();
    let o = run_in(&dir, &["w2", "line.csv", "line2.csv"]);
    assert!(stdout(&o).contains("\nquantile,1.0,true\n"), "{}", stdout(&o));

    let o = run_in(&dir, &["w2", "a.csv", "line.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run_in(&dir, &["w2", "a.csv", "missing.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inequality_checks_pass_on_a_small_budget() {
    let o = bin()
        .args(["check-inequalities", "--fuzz", "2e4", "--replicas", "500", "--seed", "5", "--out", "-"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for name in ["power_fuzz", "bihari_gronwall", "bihari_sqrt", "osgood_zero", "kunita"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with(",true")), "{name}\n{text}");
    }
}

#[test]
fn seed_flag_changes_simulated_paths() {
    let dir = scratch("seed");
    std::fs::write(dir.join("s.cfg"), SMALL.replace("out_dir = results\n", "")).unwrap();
    let body = |seed: &str| {
        let o = run_in(&dir, &["simulate", "--config", "s.cfg", "--seed", seed, "--out", "-", "--moments", "m.csv"]);
        stdout(&o).lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(body("1"), body("1"));
    assert_ne!(body("1"), body("2"));
}
