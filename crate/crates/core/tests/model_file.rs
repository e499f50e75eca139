use dhkd::model::{encode_model, load_model};
use dhkd::Matrix;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.dhkd");

#[test]
fn fixture_decodes_to_known_values() {
    let net = load_model(FIXTURE).unwrap();
    assert!(net.aux_head().is_none());
    let bb = &net.backbone().layers()[0];
    assert_eq!(bb.weight.shape(), (2, 3));
    assert_eq!(bb.weight.as_slice(), &[1.0, -2.0, 0.5, 0.25, 3.0, -1.5]);
    assert_eq!(bb.bias, vec![0.1, 0.0, -0.2]);
    assert_eq!(net.classifier().as_slice(), &[1.0, 0.0, 0.0, 1.0, -1.0, 2.0]);
    assert_eq!(net.main_head().layers()[0].bias, vec![0.0, 0.5]);

    let (h, z) = net.infer(&Matrix::from_rows(&[[1.0, 1.0]]).unwrap()).unwrap();
    let expect_h = [1.35, 1.0, 0.0];
    let expect_z = [1.35, 1.5];
    for (a, b) in h.row(0).iter().zip(expect_h) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in z.row(0).iter().zip(expect_z) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn reencoding_fixture_reproduces_its_bytes() {
    let bytes = std::fs::read(FIXTURE).unwrap();
    let net = load_model(FIXTURE).unwrap();
    assert_eq!(encode_model(&net), bytes);
}
