use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn recloss(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recloss"))
        .current_dir(dir)
        .args(["--threads", "2"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// 40 users, 24 items; each user likes a run of 7 neighbouring items.
fn toy_adjacency(n_items: usize) -> String {
    (0..40)
        .map(|u| {
            let items: Vec<String> = (0..7).map(|k| ((u * 3 + k) % n_items).to_string()).collect();
            format!("{u} {}\n", items.join(" "))
        })
        .collect()
}

/// Writes the toy data and a small pairs-format train/test split under `dir`.
fn toy_split(dir: &Path, n_items: usize) {
    fs::write(dir.join("raw.txt"), toy_adjacency(n_items)).unwrap();
    let o = recloss(dir, &["prepare", "--input", "raw.txt", "--seed", "4", "--out", "toy"]);
    assert!(o.status.success(), "{}", text(&o));
}

const FAST: [&str; 10] = [
    "--set", "data.train=toy/train.txt",
    "--set", "data.test=toy/test.txt",
    "--set", "train.max_epochs=3",
    "--set", "train.eval_every=1",
    "--set", "sampler.n_negatives=8",
];

#[test]
fn prepare_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    toy_split(dir.path(), 24);
    let first: Vec<Vec<u8>> = ["train.txt", "test.txt", "user_ids.txt", "item_ids.txt", "stats.txt"]
        .iter()
        .map(|f| fs::read(dir.path().join("toy").join(f)).unwrap())
        .collect();
    toy_split(dir.path(), 24);
    for (k, f) in ["train.txt", "test.txt", "user_ids.txt", "item_ids.txt", "stats.txt"].iter().enumerate() {
        assert_eq!(fs::read(dir.path().join("toy").join(f)).unwrap(), first[k], "{f}");
    }
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = recloss(dir.path(), &["prepare", "--input", "no/such/file.txt", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("no/such/file.txt"), "{}", text(&o));
}

#[test]
fn train_writes_model_history_and_report() {
    let dir = tempfile::tempdir().unwrap();
    toy_split(dir.path(), 24);
    let mut args = vec!["train", "--set", "loss.family=infonce", "--set", "loss.temperature=0.5", "--set", "output.dir=run"];
    args.extend(FAST);
    let o = recloss(dir.path(), &args);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["model/header.txt", "history.csv", "report.csv", "config.conf"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    let o = recloss(dir.path(), &["eval", "--model", "run/model", "--config", "run/config.conf", "--set", "output.dir=run"]);
    assert!(o.status.success(), "{}", text(&o));
    let report = fs::read_to_string(dir.path().join("run/report.csv")).unwrap();
    let eval = fs::read_to_string(dir.path().join("run/eval.csv")).unwrap();
    let metrics = |s: &str| s.lines().nth(1).unwrap().split(',').skip(2).collect::<Vec<_>>().join(",");
    assert_eq!(metrics(&report), metrics(&eval));
}

#[test]
fn ease_on_ten_items_has_zero_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    toy_split(dir.path(), 10);
    let o = recloss(
        dir.path(),
        &[
            "linear", "--method", "ease-debiased",
            "--set", "data.train=toy/train.txt", "--set", "data.test=toy/test.txt",
            "--set", "ease.lambda=2", "--set", "ease.alpha=0.3", "--set", "output.dir=lin",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let w = fs::read_to_string(dir.path().join("lin/ease-debiased/ease_weights.txt")).unwrap();
    let rows: Vec<Vec<f64>> = w
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|x| x.parse().unwrap()).collect())
        .filter(|r: &Vec<f64>| r.len() == 10)
        .collect();
    assert_eq!(rows.len(), 10);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[i], 0.0);
    }
}

#[test]
fn verification_suites_pass_on_small_runs() {
    let dir = tempfile::tempdir().unwrap();
    for (suite, trials) in [("bounds", "2000"), ("theorem1", "1"), ("theorem2", "3"), ("gradients", "5")] {
        let o = recloss(dir.path(), &["verify", "--suite", suite, "--trials", trials, "--out", "v"]);
        assert_eq!(o.status.code(), Some(0), "{suite}: {}", text(&o));
        assert!(dir.path().join(format!("v/{suite}.csv")).exists());
    }
}

#[test]
fn temperature_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    toy_split(dir.path(), 24);
    let mut args = vec![
        "sweep", "--param", "loss.temperature",
        "--values", "0.05,0.1,0.2,0.3,0.4,0.5,0.6,0.8,1.0,2.0",
        "--set", "loss.family=infonce", "--set", "output.dir=sw", "--set", "train.max_epochs=1",
    ];
    args.extend(FAST);
    let o = recloss(dir.path(), &args);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "param,value,recall20,ndcg20");
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn bad_sweeps_and_configs_exit_with_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    toy_split(dir.path(), 24);
    let mut args = vec!["sweep", "--param", "loss.colour", "--values", "1,2"];
    args.extend(FAST);
    assert_eq!(recloss(dir.path(), &args).status.code(), Some(2));

    // infonce takes no neg_weight
    let mut args = vec!["train", "--set", "loss.family=infonce", "--set", "loss.neg_weight=2"];
    args.extend(FAST);
    let o = recloss(dir.path(), &args);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    // debiased losses need extra positives
    let mut args = vec!["train", "--set", "loss.family=debiased_ccl", "--set", "sampler.m_extra_positives=0"];
    args.extend(FAST);
    assert_eq!(recloss(dir.path(), &args).status.code(), Some(2));
}

#[test]
fn shipped_configs_run_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut names: Vec<PathBuf> = fs::read_dir(configs_dir()).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for ds in ["yelp2018", "gowalla", "amazon-books"] {
        let d = dir.path().join("data").join(ds);
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("train.txt"), toy_adjacency(24)).unwrap();
        let test: String = (0..40).map(|u| format!("{u} {}\n", (u * 3 + 9) % 24)).collect();
        fs::write(d.join("test.txt"), test).unwrap();
    }
    for conf in &names {
        let o = recloss(
            dir.path(),
            &[
                "train", "--config", conf.to_str().unwrap(),
                "--set", "train.max_epochs=1", "--set", "train.d=8",
                "--set", "sampler.n_negatives=8", "--set", "train.batch_size=64",
            ],
        );
        assert!(o.status.success(), "{}: {}", conf.display(), text(&o));
        let stem = conf.file_stem().unwrap().to_str().unwrap();
        assert!(dir.path().join("runs").join(stem).join("report.csv").exists(), "{stem}");
    }
}
