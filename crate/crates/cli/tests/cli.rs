use std::path::Path;
use std::process::{Command, Output};

fn usm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

#[test]
fn dump_defaults_is_a_loadable_config() {
    let o = usm(&["--dump-defaults"]);
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(&dir, "c.json");
    std::fs::write(&cfg, stdout(&o)).unwrap();
    let o = usm(&["--config", &cfg, "--set", "horizon_heights=500", "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(&dir, "a.csv"), path(&dir, "b.csv"));
    let args = |out: &str| {
        vec![
            "--set".to_string(),
            "strategy=usm_main".into(),
            "--set".into(),
            "alpha=0.4".into(),
            "--set".into(),
            "beta_target=0.05".into(),
            "--set".into(),
            "horizon_heights=20000".into(),
            "--seeds".into(),
            "3".into(),
            "--seed".into(),
            "11".into(),
            "--out".into(),
            out.to_string(),
            "simulate".into(),
        ]
    };
    for out in [&a, &b] {
        let v = args(out);
        let o = usm(&v.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("reward"));
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let text = String::from_utf8(ta).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,strategy,alpha,beta,reward,pair_rate,pairs_won_fraction,solo_pairs_won_fraction"
    );
    assert!(lines.next().unwrap().starts_with("11,usm_main,0.4,0.05,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn jsonl_format_has_one_object_per_seed() {
    let o = usm(&["--set", "horizon_heights=1000", "--seeds", "2", "--format", "jsonl", "simulate"]);
    assert!(o.status.success());
    let rows: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["seed"], 1);
}

#[test]
fn invalid_configs_exit_with_two() {
    let o = usm(&["--set", "strategy=usm_main", "--set", "alpha=0.3", "--set", "beta_target=0.1", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("validity"), "{}", stderr(&o));

    let o = usm(&["--set", "alpah=0.3", "simulate"]);
    assert_eq!(o.status.code(), Some(2));

    let o = usm(&["--set", "strategy=nope", "analyze"]);
    assert_eq!(o.status.code(), Some(2));

    let o = usm(&["--config", "/nonexistent/config.json", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn detect_reads_state_files() {
    let dir = tempfile::tempdir().unwrap();
    let states = path(&dir, "states.txt");
    let o = usm(&[
        "--set",
        "strategy=classic_sm",
        "--set",
        "alpha=0.4",
        "--set",
        "horizon_heights=20000",
        "--seeds",
        "2",
        "simulate",
        "--states",
        &states,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = usm(&["--significance", "0.01", "detect", &states]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("sequence,heights,test,statistic,df,p_value,verdict,note\n"));
    let combined: Vec<&str> = text.lines().filter(|l| l.contains(",combined,")).collect();
    assert_eq!(combined.len(), 2);
    assert!(combined.iter().all(|l| l.contains(",reject,")), "{text}");

    let bad = path(&dir, "bad.txt");
    std::fs::write(&bad, "SSPX\n").unwrap();
    assert_eq!(usm(&["detect", &bad]).status.code(), Some(2));
}

#[test]
fn detect_reads_serialized_views() {
    let dir = tempfile::tempdir().unwrap();
    let view = path(&dir, "view.csv");
    let o = usm(&[
        "--set", "strategy=strong_sm", "--set", "tiebreak=\"favor_attacker\"", "--set", "alpha=0.3",
        "--set", "horizon_heights=20000", "simulate", "--view", &view,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let header = std::fs::read_to_string(&view).unwrap();
    assert!(header.starts_with("id,creator,parent,height,created_round,broadcast_round\n"), "{}", &header[..80]);
    let o = usm(&["detect", "--view", &view]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.contains(",combined,") && l.contains(",reject,")));
    assert_eq!(usm(&["detect", "--view"]).status.code(), Some(2));
}

#[test]
fn detect_simulates_when_no_input_is_given() {
    let o = usm(&["--set", "horizon_heights=20000", "--seeds", "2", "detect"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("of 2 sequences rejected"));
}

#[test]
fn markov_emits_distribution_and_rewards() {
    let o = usm(&["--set", "alpha=0.4", "--set", "beta_target=0.05", "markov", "--cap", "30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("state,kind,pairs,probability\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 30 + 1);
    let total: f64 = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
    let summary = stderr(&o);
    assert!(summary.contains("block_ratio,0.40"), "{summary}");
    assert!(summary.contains("max_disagreement"));
}

#[test]
fn sweep_general_condition_covers_the_grid() {
    let o = usm(&["sweep", "general-condition"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "alpha,beta_prime,value,exact,sign");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 41 * 101);
    assert!(rows.iter().any(|r| r.ends_with(",positive")));
    // Past the point where attacker-only rounds vanish the margin is undefined.
    assert!(rows.iter().any(|r| r.ends_with(",undefined")));
}

#[test]
fn sweep_markov_grid() {
    let o = usm(&[
        "--set", "markov_cap=40", "sweep", "markov", "--alpha-min", "0.3", "--alpha-max", "0.4",
        "--alpha-steps", "3", "--y-min", "0.0", "--y-max", "0.1", "--y-steps", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 7);
    // beta = 0.1 exceeds alpha^2 at alpha = 0.3.
    assert!(text.lines().any(|l| l.starts_with("0.3,0.1,") && l.contains("validity")));
}

#[test]
fn couple_check_matches_reduction() {
    let o = usm(&[
        "--set", "hashrates=[0.35,0.3,0.2,0.15]", "--set", "latency=0.8", "--set", "strategy=classic_sm",
        "--set", "horizon_heights=2000", "--seeds", "3", "couple-check",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().skip(1).all(|l| l.contains(",true,true,")), "{text}");
    let o = usm(&["couple-check"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_reports_closed_forms() {
    let o = usm(&["--set", "alpha=0.3", "--set", "beta_target=0.25", "analyze"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("warmup_reward,0.375"));
    assert!(text.contains("alpha_star,0.3585"));
}

#[test]
fn repro_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(&dir, "r.json");
    let o = usm(&["--out", &out, "repro", "thresholds"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("criterion 6 thresholds: PASS"));
    assert!(Path::new(&out).exists());
    // The approximate natural-pair condition is negative on part of its grid.
    let o = usm(&["repro", "general-condition"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("[FAILED] grid nonnegative"));
    assert_eq!(usm(&["repro", "nope"]).status.code(), Some(2));
}
