//! CSV rows written by a run can be recomputed from its checkpoints and the
//! seeds recorded in the manifest.

use exbias::estimate::HistorySource;
use exbias::harness::experiment::{read_manifest, MANIFEST_FILE, ORACLE_FILE, STUDENT_FILE};
use exbias::harness::{run_experiment, LoadedConfig, RunMode};
use exbias::metrics::{cgd, history_marginal, reference_marginal, DataSource, Estimation, ReferenceMode};
use exbias::seq::load_model_file;
use exbias::Metric;

const CONFIG: &str = r#"{"config_version": 1, "base_seed": 12, "output_dir": "out",
    "vocab": {"kind": "synthetic", "size": 4}, "L": 7,
    "oracle": {"kind": "random_recurrent", "hidden_dim": 5},
    "student": {"kind": "recurrent", "hidden_dim": 5},
    "train": {"epochs": 2, "sequences_per_epoch": 300, "batch_size": 30, "eval_sequences": 100},
    "measure": {"kinds": ["eb-m", "eb-c"], "metrics": ["tv", "js"], "sample_counts": [4000],
                "corrupt_rates": [0, 0.4]}}"#;

struct Row {
    l: usize,
    metric: Metric,
    rate: f64,
    model_hist: f64,
    data_hist: f64,
}

fn rows(path: &std::path::Path) -> Vec<Row> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            Row {
                l: rec[0].parse().unwrap(),
                metric: match &rec[1] {
                    "tv" => Metric::Tv,
                    "js" => Metric::Js,
                    other => panic!("{other}"),
                },
                rate: rec[2].parse().unwrap(),
                model_hist: rec[4].parse().unwrap(),
                data_hist: rec[5].parse().unwrap(),
            }
        })
        .collect()
}

#[test]
fn csv_rows_match_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&LoadedConfig::from_json(CONFIG, dir.path()).unwrap(), RunMode::Full).unwrap();
    let manifest = read_manifest(&out.output_dir.join(MANIFEST_FILE)).unwrap();
    let oracle = load_model_file(&out.output_dir.join(ORACLE_FILE)).unwrap();
    let student = load_model_file(&out.output_dir.join(STUDENT_FILE)).unwrap();
    let est = Estimation::MonteCarlo {
        n: 4000,
        seed: manifest.seeds.measure,
    };

    let eb_c = rows(&out.output_dir.join("eb_c.csv"));
    for row in eb_c.iter().filter(|r| [1, 3, 6].contains(&r.l)) {
        let own = HistorySource::model(&student).corrupted(row.rate);
        let m = cgd(&student, &oracle, &own, row.l, row.metric, est).unwrap();
        let d = cgd(
            &student,
            &oracle,
            &HistorySource::data_model(&oracle),
            row.l,
            row.metric,
            est,
        )
        .unwrap();
        assert_eq!(m, row.model_hist, "l={} {:?} c={}", row.l, row.metric, row.rate);
        assert_eq!(d, row.data_hist, "l={} {:?}", row.l, row.metric);
    }

    let eb_m = rows(&out.output_dir.join("eb_m.csv"));
    for row in eb_m.iter().filter(|r| [1, 2, 4].contains(&r.l)) {
        let reference = reference_marginal(DataSource::Oracle(&oracle), row.l, ReferenceMode::Auto, est).unwrap();
        let own = HistorySource::model(&student).corrupted(row.rate);
        let m = history_marginal(&student, &own, row.l, est).unwrap();
        let fed = history_marginal(&student, &HistorySource::data_model(&oracle), row.l, est).unwrap();
        assert_eq!(row.metric.apply(&m.dist, &reference.dist).unwrap(), row.model_hist);
        assert_eq!(row.metric.apply(&fed.dist, &reference.dist).unwrap(), row.data_hist);
    }
}
