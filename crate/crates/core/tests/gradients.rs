mod common;

use common::gradcheck::{cases, TOLERANCE};

fn assert_case(name: &str) {
    let case = cases().into_iter().find(|c| c.name == name).unwrap();
    let (err, seed) = case.worst();
    assert!(err < TOLERANCE, "{name} seed {seed}: max relative error {err:e}");
}

#[test]
fn dense() {
    assert_case("dense");
}

#[test]
fn conv2d() {
    assert_case("conv2d");
}

#[test]
fn strided_conv2d() {
    assert_case("strided conv2d");
}

#[test]
fn relu() {
    assert_case("relu");
}

#[test]
fn flatten() {
    assert_case("flatten");
}

#[test]
fn dropout() {
    assert_case("dropout");
}

#[test]
fn batchnorm_flat() {
    assert_case("batchnorm");
}

#[test]
fn batchnorm_spatial() {
    assert_case("spatial batchnorm");
}

#[test]
fn composed_stack() {
    assert_case("stack");
}
