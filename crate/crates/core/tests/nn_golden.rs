use catgrad_core::nn::{self, Activation, Matrix, OptimState, Optimizer, ParamStore};
use ndarray::array;

fn two_layer() -> (ParamStore, Vec<nn::LayerSpec>) {
    let layers = nn::mlp("l", &[2, 2, 1], Activation::Linear);
    let mut store = ParamStore::new();
    store.insert("l0.w", array![[0.5, -1.0], [0.25, 0.5]]);
    store.insert("l0.b", array![[0.1, 0.2]]);
    store.insert("l1.w", array![[2.0], [-3.0]]);
    store.insert("l1.b", array![[0.5]]);
    (store, layers)
}

fn assert_close(a: &Matrix, b: &Matrix) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn forward_and_backward_match_hand_values() {
    let (mut store, layers) = two_layer();
    let x = array![[1.0, 2.0], [-1.0, 0.0]];
    let want = array![[2.1], [-3.1]];
    assert_close(&nn::predict(&store, &layers, &x).unwrap(), &want);
    let (out, mut graph) = nn::forward(&store, &layers, &x).unwrap();
    assert_close(&out, &want);
    graph.backward(&Matrix::ones((2, 1)), &mut store).unwrap();
    assert_close(store.grad("l1.w").unwrap(), &array![[1.1], [1.4]]);
    assert_close(store.grad("l1.b").unwrap(), &array![[2.0]]);
    assert_close(store.grad("l0.w").unwrap(), &array![[2.0, 0.0], [4.0, -6.0]]);
    assert_close(store.grad("l0.b").unwrap(), &array![[2.0, -6.0]]);
}

#[test]
fn optimizer_steps_match_hand_values() {
    let (mut store, layers) = two_layer();
    let x = array![[1.0, 2.0], [-1.0, 0.0]];
    let (_, mut graph) = nn::forward(&store, &layers, &x).unwrap();
    graph.backward(&Matrix::ones((2, 1)), &mut store).unwrap();

    let mut sgd = store.clone();
    OptimState::new(Optimizer::Sgd { lr: 0.1 }, sgd.size()).step_store(&mut sgd).unwrap();
    assert_close(sgd.get("l0.b").unwrap(), &array![[-0.1, 0.8]]);

    let mut adam = store.clone();
    OptimState::new(Optimizer::adam(0.01), adam.size()).step_store(&mut adam).unwrap();
    let before = store.flat_values();
    let grads = store.flat_grads();
    for ((a, b), g) in adam.flat_values().iter().zip(&before).zip(&grads) {
        let want = if *g == 0.0 { 0.0 } else { -0.01 * g.signum() };
        assert!((a - b - want).abs() < 1e-8, "{a} {b} {g}");
    }
}

#[test]
fn non_finite_gradient_is_named() {
    let (mut store, _) = two_layer();
    store.zero_grad();
    let mut flat = store.flat_values();
    let mut grads = store.flat_grads();
    grads[5] = f64::NAN;
    let err = OptimState::new(Optimizer::adam(0.1), flat.len())
        .step_flat(&mut flat, &grads, |i| store.name_of_flat(i).to_string())
        .unwrap_err();
    assert!(err.to_string().contains("l0.b"), "{err}");
    assert_eq!(flat, store.flat_values());
}

#[test]
fn parameters_round_trip_through_disk() {
    let (store, _) = two_layer();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    store.save(&path).unwrap();
    let back = ParamStore::load(&path).unwrap();
    assert_eq!(back.names(), store.names());
    assert_eq!(back.flat_values(), store.flat_values());
}
