use fixsynth_tensor::io::{read_weights, write_weights};
use fixsynth_tensor::nn::{Layer, Mode, Network, Sequential};
use fixsynth_tensor::Tensor;

#[test]
fn network_round_trips_through_disk() {
    let arch = Sequential::new(vec![
        Layer::Linear { inputs: 3, outputs: 4 },
        Layer::Tanh,
        Layer::Linear { inputs: 4, outputs: 2 },
    ]);
    let net = Network::new(arch.clone(), 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    let named: Vec<(String, &Tensor)> = net.param_names().into_iter().zip(net.params.iter()).collect();
    let meta = serde_json::to_value(&arch).unwrap();
    write_weights(&path, &meta, &named).unwrap();

    let (meta2, tensors) = read_weights(&path).unwrap();
    let arch2: Sequential = serde_json::from_value(meta2).unwrap();
    let net2 = Network::from_parts(arch2, tensors.into_iter().map(|(_, t)| t).collect()).unwrap();
    let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.5, 0.0, -2.0]).unwrap();
    let a = net.forward(&x, Mode::Eval).unwrap();
    let b = net2.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
}
