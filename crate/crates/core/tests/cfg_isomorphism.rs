mod common;

use common::{bytecode_cfg, isomorphic, tree_cfg};
use proptest::prelude::*;
use stitchvm::generate::generate;
use stitchvm::vm::compile_baseline;
use stitchvm::{assemble, Passes, Program};

fn check_program(p: &Program) -> Result<(), String> {
    for f in 0..p.functions.len() {
        let unit = compile_baseline(p, f, 5000, Passes::all()).map_err(|e| format!("function {f}: {e}"))?;
        let oracle = bytecode_cfg(p, f);
        for (stage, tree) in [("stitched", &unit.stitched), ("optimized", &unit.optimized)] {
            isomorphic(&oracle, &tree_cfg(&tree.block_graph()))
                .map_err(|e| format!("function {f} ({stage}): {e}\noracle {oracle:?}\n{}", tree.dump()))?;
        }
    }
    Ok(())
}

#[test]
fn bundled_programs() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../programs");
    for name in ["loop", "fib", "tak", "nqueens", "nbody"] {
        let src = std::fs::read_to_string(format!("{dir}/{name}.tla")).unwrap();
        check_program(&assemble(&src).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn oracle_on_a_diamond_and_a_loop() {
    let p = assemble(
        "func f/1:\n LOAD 0\n JUMP_IF a\n CONST_INT 1\n JUMP j\na:\n CONST_INT 2\nj:\n RET\n\
         func g/1:\ntop:\n DUP\n JUMP_IF out\n CONST_INT 1\n SUB\n JUMP top\nout:\n RET\n",
    )
    .unwrap();
    // Diamond: head, two arms, join.
    assert_eq!(bytecode_cfg(&p, 0).succs, vec![vec![1, 2], vec![3], vec![3], vec![]]);
    // Loop: header with body looping back, exit.
    assert_eq!(bytecode_cfg(&p, 1).succs, vec![vec![1, 2], vec![0], vec![]]);
    check_program(&p).unwrap();
}

#[test]
fn jump_to_the_next_instruction() {
    let p = assemble("func f/1:\n LOAD 0\n JUMP_IF n\nn:\n JUMP m\nm:\n RET\n").unwrap();
    check_program(&p).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]
    #[test]
    fn stitched_trees_mirror_the_bytecode(seed in any::<u64>()) {
        let g = generate(seed);
        let r = check_program(&g.program);
        prop_assert!(r.is_ok(), "seed {seed}: {}\n{}", r.unwrap_err(), g.source);
    }
}
