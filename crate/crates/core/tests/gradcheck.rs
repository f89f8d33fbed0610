//! Tape gradients against central differences of independent f64
//! reference implementations, at ten random points per op.

mod common;

use common::cases::{all_cases, case_error, gpt_branch_error};

const SEEDS: u64 = 10;
const TOLERANCE: f64 = 1e-3;

fn check(name: &str) {
    let cases = all_cases();
    let c = cases.iter().find(|c| c.name == name).expect("case exists");
    for seed in 0..SEEDS {
        let err = case_error(c, seed);
        assert!(err < TOLERANCE, "{name} seed {seed}: relative error {err:.3e}");
    }
}

macro_rules! gradcheck {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                check(stringify!($name));
            }
        )*
    };
}

gradcheck!(
    matmul,
    matmul_nt,
    add,
    add_bias,
    scale,
    gelu_tanh,
    gelu_erf,
    relu,
    layernorm,
    softmax,
    causal_softmax,
    slice_cols,
    concat_cols,
    slice_rows,
    concat_rows,
    gather_rows,
    sum,
    cross_entropy,
    adapter_site_gelu,
    adapter_site_relu,
    two_layer_net,
);

#[test]
fn every_case_is_covered() {
    assert_eq!(all_cases().len(), 21);
}

#[test]
fn branch_gradients_through_full_model() {
    for seed in 0..SEEDS {
        let err = gpt_branch_error(seed);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err:.3e}");
    }
}
