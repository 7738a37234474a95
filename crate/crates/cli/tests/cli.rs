#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use synthembed::embedder::EmbedderParams;
use synthembed::eval::{EvalTask, ScoreTable};
use synthembed::fixtures;
use synthembed::influence::{ExperimentRun, Metric, Registry};
use synthembed::model::Category;
use synthembed::report::colored_cells;
use synthembed_cli::{run, Cli, ExperimentManifest};

fn synthembed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthembed")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = synthembed(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A planted experiment in `dir`, with `edit` applied to its manifest.
fn planted(dir: &Path, edit: impl FnOnce(&mut ExperimentManifest)) -> String {
    ok(&["init-planted", dir.to_str().unwrap()]);
    let path = dir.join("experiment.toml");
    let mut m = ExperimentManifest::parse(&fs::read_to_string(&path).unwrap(), &path).unwrap();
    edit(&mut m);
    fs::write(&path, m.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn full_pipeline(manifest: &str) {
    for cmd in ["generate", "train", "eval", "influence"] {
        ok(&[cmd, "-m", manifest]);
    }
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn generate_writes_one_jsonl_per_category() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |m| m.generation.iter_mut().for_each(|s| s.n_instances_per_task = 5));
    ok(&["generate", "-m", &m]);
    let data = dir.path().join("out/data");
    let mut files: Vec<String> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(files, ["long-short.jsonl", "short-long.jsonl"]);
    let lines: usize = files.iter().map(|f| fs::read_to_string(data.join(f)).unwrap().lines().count()).sum();
    assert_eq!(lines, 10);
    let composition = fs::read_to_string(dir.path().join("out/generation/composition.csv")).unwrap();
    assert!(composition.contains("total,10"), "{composition}");
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, mb) = (planted(a.path(), |_| {}), planted(b.path(), |_| {}));
    full_pipeline(&ma);
    full_pipeline(&mb);
    let (ta, tb) = (tree(&a.path().join("out")), tree(&b.path().join("out")));
    assert!(ta.keys().any(|k| k.ends_with("influence.svg")));
    assert!(ta.keys().filter(|k| k.starts_with("registry/runs/")).count() == 4);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{k} differs");
    }
}

#[test]
fn influence_csv_matches_group_mean_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |_| {});
    full_pipeline(&m);
    let runs: Vec<ExperimentRun> = fs::read_dir(dir.path().join("out/registry/runs"))
        .unwrap()
        .map(|e| serde_json::from_str(&fs::read_to_string(e.unwrap().path()).unwrap()).unwrap())
        .collect();
    assert_eq!(runs.len(), 4);
    let rows = read_csv(&dir.path().join("out/influence/influence.csv"));
    let header = &rows[0];
    for row in &rows[1..] {
        let category: Category = row[0].parse().unwrap();
        for (name, cell) in header[1..].iter().zip(&row[1..]) {
            let metric = synthembed::eval::TaskCategory::ALL.into_iter().find(|c| c.as_str() == name).unwrap();
            let points = |with: bool| {
                let v: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.subset.included.contains(&category) == with)
                    .map(|r| Metric::CategoryMean(metric).points(r.scores.as_ref().unwrap()).unwrap())
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let oracle = points(true) - points(false);
            let got: f64 = cell.parse().unwrap();
            assert!((got - oracle).abs() <= 5e-7, "{category}/{name}: {got} vs {oracle}");
        }
    }
    // report re-renders the same files from the registry alone
    let before = tree(&dir.path().join("out/influence"));
    fs::remove_dir_all(dir.path().join("out/influence")).unwrap();
    ok(&["report", "-m", &m]);
    assert_eq!(tree(&dir.path().join("out/influence")), before);
}

#[test]
fn train_checkpoint_round_trips_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |m| m.generation.iter_mut().for_each(|s| s.n_instances_per_task = 20));
    ok(&["generate", "-m", &m]);
    let out = ok(&["train", "-m", &m]);
    assert!(out.contains("trained on 160 examples"), "{out}");
    let ckpt = dir.path().join("out/model/checkpoint.json");
    let params = EmbedderParams::load(&ckpt).unwrap();
    let copy = dir.path().join("copy.json");
    params.save(&copy).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&copy).unwrap());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/model/train_report.json")).unwrap()).unwrap();
    assert!(report.get("wall_time_ms").is_none());
    assert!(report["final_loss"].as_f64().unwrap() < report["initial_loss"].as_f64().unwrap());
    ok(&["eval", "-m", &m, "--checkpoint", copy.to_str().unwrap()]);
}

#[test]
fn eval_scores_exactly_the_listed_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |m| m.eval_tasks.truncate(3));
    let untrained = dir.path().join("base.json");
    fixtures::base_params(1).unwrap().save(&untrained).unwrap();
    ok(&["eval", "-m", &m, "--checkpoint", untrained.to_str().unwrap()]);
    let scores: ScoreTable =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/eval/scores.json")).unwrap()).unwrap();
    assert_eq!(scores.per_task.len(), 3);
    let csv = fs::read_to_string(dir.path().join("out/eval/scores.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("task,")).count(), 3);
}

#[test]
fn eval_without_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |_| {});
    let out = synthembed(&["eval", "-m", &m]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint.json"));
}

#[test]
fn missing_task_file_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |m| m.eval_tasks.push(PathBuf::from("tasks/nowhere.json")));
    let out = synthembed(&["train", "-m", &m]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.json"));
}

#[test]
fn unreachable_gateway_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |m| {
        m.gateway.mock = None;
        m.gateway.config.base_url = "http://127.0.0.1:9".into();
        m.gateway.config.max_retries = 1;
        m.gateway.config.backoff_base_ms = 1;
    });
    let out = synthembed(&["generate", "-m", &m]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gateway"));
}

#[test]
fn zero_yield_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("prose.json");
    let prose = serde_json::json!(vec![synthembed::gateway::MockResponse::chat("I would rather not."); 40]);
    fs::write(&script, prose.to_string()).unwrap();
    let m = planted(dir.path(), |m| {
        m.gateway.mock = Some("prose.json".into());
        m.synth.jobs = 1;
    });
    let out = synthembed(&["generate", "-m", &m]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn influence_category_without_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |_| {});
    let out = synthembed(&["influence", "-m", &m, "--categories", "long-short,bitext"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bitext"));
}

#[test]
fn single_influence_category_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |_| {});
    let out = synthembed(&["influence", "-m", &m, "--categories", "long-short"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("two distinct"));
    assert!(!dir.path().join("out/registry").exists());
}

#[test]
fn report_without_registry_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let m = planted(dir.path(), |_| {});
    assert_eq!(synthembed(&["report", "-m", &m]).status.code(), Some(1));
}

/// Null registries with four categories; `report` colors about alpha of all cells.
#[test]
fn null_registries_color_about_five_percent_of_cells() {
    let factors = common::grid_factors(4);
    let dir = tempfile::tempdir().unwrap();
    let base = fixtures::eval_tasks(1).remove(0);
    let mut task_paths = Vec::new();
    for j in 0..4 {
        let t = EvalTask {
            id: format!("m{j}"),
            ..base.clone()
        };
        let p = dir.path().join(format!("m{j}.json"));
        t.save(&p).unwrap();
        task_paths.push(p);
    }
    let manifest = ExperimentManifest {
        imported_categories: factors.clone(),
        influence_categories: factors.clone(),
        eval_tasks: task_paths,
        ..ExperimentManifest::parse("name='null'\noutput_dir='out'\neval_tasks=[]", Path::new("m.toml")).unwrap()
    };
    let mpath = dir.path().join("null.toml");
    fs::write(&mpath, manifest.to_toml()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let normal = Normal::new(0.5, 0.05).unwrap();
    let grids = 150;
    let (mut colored, mut cells) = (0, 0);
    for _ in 0..grids {
        let per_mask: Vec<Vec<f64>> = (0..16).map(|_| (0..4).map(|_| normal.sample(&mut rng)).collect()).collect();
        let registry_dir = dir.path().join("out/registry");
        let _ = fs::remove_dir_all(&registry_dir);
        {
            let registry = Registry::open(&registry_dir).unwrap();
            for r in common::synthetic_runs(&factors, &per_mask) {
                fs::write(registry.run_path(&r.subset), serde_json::to_string(&r).unwrap()).unwrap();
            }
        }
        let cli = Cli::parse_from(["synthembed", "report", "-m", mpath.to_str().unwrap()]);
        run(cli).unwrap();
        let svg = fs::read_to_string(dir.path().join("out/influence/influence_tasks.svg")).unwrap();
        colored += colored_cells(&svg);
        // four task columns plus the overall mean
        cells += factors.len() * 5;
    }
    let rate = colored as f64 / cells as f64;
    assert!((0.03..=0.07).contains(&rate), "colored fraction {rate}");
}
