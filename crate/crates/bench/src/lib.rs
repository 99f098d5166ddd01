//! Fixtures shared by the criterion benches.

use mcdal_core::data::{make_moons, Pool};
use mcdal_core::{LabeledData, Matrix, MlpSpec, Rng, ThreeHeadClassifier};

/// Dense matrix with standard-normal entries.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("finite entries")
}

/// A freshly initialized two-input model with the default [32, 32] backbone.
pub fn model(classes: usize, seed: u64) -> ThreeHeadClassifier {
    let spec = MlpSpec::new(2, vec![32, 32], classes).expect("valid spec");
    ThreeHeadClassifier::init(&spec, &Rng::new(seed)).expect("init")
}

/// Moons pool of `n` points with the first tenth labeled.
pub struct Workload {
    pub labeled: LabeledData,
    pub unlabeled: Matrix,
    pub unlabeled_indices: Vec<usize>,
}

pub fn moons_workload(n: usize, seed: u64) -> Workload {
    let ds = make_moons(n, 0.25, &mut Rng::new(seed)).expect("moons");
    let initial: Vec<usize> = (0..n / 10).collect();
    let pool = Pool::new(std::sync::Arc::new(ds), &initial).expect("pool");
    Workload {
        labeled: pool.labeled_data(),
        unlabeled: pool.unlabeled_features(),
        unlabeled_indices: pool.unlabeled_indices(),
    }
}
