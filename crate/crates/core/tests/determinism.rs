use treeleak::experiment::{run_grid, ExperimentConfig};

const CONFIG: &str = r#"{
    "name": "det",
    "dataset": {"kind": "synthetic", "n": 150, "features": 6, "classes": 3, "spread": 0.7, "seed": 2},
    "model": {"model_kind": "xgboost", "tree_count": 3, "max_depth": 4},
    "defenses": [{"kind": "none"}, {"kind": "lp_mst", "epsilon": [1.0]}, {"kind": "id_lmid", "xi": [0.5]}],
    "seeds": [0, 1, 2]
}"#;

fn rows_json(threads: usize) -> String {
    let cfg = ExperimentConfig::from_json(CONFIG).unwrap();
    let rows: Vec<_> = run_grid(&cfg, Some(threads)).unwrap().into_iter().flat_map(|o| o.rows).collect();
    serde_json::to_string(&rows).unwrap()
}

#[test]
fn grid_rows_do_not_depend_on_thread_count() {
    let one = rows_json(1);
    assert_eq!(one, rows_json(4));
    assert_eq!(one, rows_json(1));
}

#[test]
fn cells_follow_defense_then_seed_order() {
    let cfg = ExperimentConfig::from_json(CONFIG).unwrap();
    let cells = cfg.cells();
    assert_eq!(cells.len(), 9);
    assert!(cells.iter().enumerate().all(|(i, c)| c.index == i));
    assert_eq!(cells[3].seed, 0);
    assert_eq!(cells[3].defense.name(), "lp_mst");
}
