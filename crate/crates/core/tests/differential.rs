mod common;

use common::{differential, eager, pass_configs};
use proptest::prelude::*;
use stitchvm::generate::generate;
use stitchvm::{assemble, Mode, Passes, Thresholds};

#[test]
fn bundled_programs_agree_across_tiers() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../programs");
    let cases: [(&str, Vec<i64>); 5] = [
        ("loop", vec![30]),
        ("fib", vec![10]),
        ("tak", vec![8, 4, 0]),
        ("nqueens", vec![8, 10]),
        ("nbody", vec![50]),
    ];
    for (name, args) in cases {
        let src = std::fs::read_to_string(format!("{dir}/{name}.tla")).unwrap();
        let p = assemble(&src).unwrap();
        for mode in [Mode::Tracing, Mode::Baseline] {
            for t in [eager(), Thresholds::default()] {
                differential(&p, std::slice::from_ref(&args), mode, Passes::all(), t).unwrap_or_else(|e| panic!("{name} {mode}: {e}"));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn generated_programs_agree_across_tiers(seed in any::<u64>(), cfg in 0usize..4) {
        let g = generate(seed);
        let passes = pass_configs()[cfg];
        for mode in [Mode::Tracing, Mode::Baseline] {
            let r = differential(&g.program, &g.inputs, mode, passes, eager());
            prop_assert!(r.is_ok(), "seed {seed} {mode} {passes:?}: {}\n{}", r.unwrap_err(), g.source);
        }
    }
}
