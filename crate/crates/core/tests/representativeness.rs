use hsal::dataset::{normalize, DatasetCube};
use hsal::dbn::{fine_tune, pretrain_stack, TrainConfig};
use hsal::numerics::{Matrix, RngStream};
use hsal::sparse_coding::AtomSource;
use hsal::strategies::{widl_select, SelectionRequest, StrategyParams};

const PER_BLOB: usize = 50;

/// Two well-separated clusters sharing the same class layout: every class
/// has a fixed direction, and the cluster is a common shift of all bands.
/// Pixels `0..3·PER_BLOB` belong to the first cluster.
fn two_clusters(seed: u64) -> DatasetCube {
    let mut rng = RngStream::new(seed);
    let bands = 10;
    let class_dirs: Vec<Vec<f64>> = (0..3).map(|_| (0..bands).map(|_| rng.standard_normal()).collect()).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for shift in [-3.0, 3.0] {
        for (class, dir) in class_dirs.iter().enumerate() {
            for _ in 0..PER_BLOB {
                rows.push(dir.iter().map(|d| shift + d + 0.3 * rng.standard_normal()).collect::<Vec<f64>>());
                labels.push(class as u16 + 1);
            }
        }
    }
    let n = rows.len();
    let cube = DatasetCube::new(n, 1, Matrix::from_rows(&rows).unwrap(), labels, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    normalize(&cube)
}

#[test]
fn widl_reaches_into_the_unlabeled_cluster() {
    let first = 3 * PER_BLOB;
    let mut hits = 0;
    for seed in 0..10u64 {
        let cube = two_clusters(seed);
        let labeled: Vec<usize> = (0..3).flat_map(|c| c * PER_BLOB..c * PER_BLOB + 5).collect();
        let candidates: Vec<usize> = (0..cube.n_pixels()).filter(|i| !labeled.contains(i)).collect();

        let cfg = TrainConfig { hidden_widths: vec![12, 3], seed, ..TrainConfig::for_classes(3) };
        let x = Matrix::from_rows(&labeled.iter().map(|&i| cube.pixel(i)).collect::<Vec<_>>()).unwrap();
        let y: Vec<u16> = labeled.iter().map(|&i| cube.label(i)).collect();
        let model = fine_tune(&pretrain_stack(&x, &cfg).unwrap(), &x, &y, &cfg).unwrap();

        let sources: Vec<AtomSource> = labeled.iter().map(|&i| AtomSource::Seed(i)).collect();
        let params = StrategyParams::for_classes(3);
        let req = SelectionRequest { model: &model, cube: &cube, labeled: &sources, candidates: &candidates, m: 5, seed, params: &params };
        let picked = widl_select(&req).unwrap().indices;
        assert_eq!(picked.len(), 5);
        if picked.iter().any(|&i| i >= first) {
            hits += 1;
        }
    }
    assert!(hits >= 8, "{hits}/10");
}
