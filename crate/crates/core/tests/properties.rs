use pfo_core::corpus::cases;
use pfo_core::frontend::{parse, pretty};
use pfo_core::optimize::{compile_program, parse_opts, CompileOptions, Compiled};
use pfo_core::simulate::{simulate, Inputs, SimOptions};
use proptest::prelude::*;

fn aes_toy(opts: &str) -> Compiled {
    let c = cases().into_iter().find(|c| c.name == "aes_toy").unwrap();
    compile_program(
        c.source,
        &[],
        &parse_opts(opts).unwrap(),
        &CompileOptions::default(),
    )
    .unwrap()
}

fn inputs(key: [i64; 2], pt: [i64; 2]) -> Inputs {
    Inputs::from([
        ("key".to_string(), key.to_vec()),
        ("pt".to_string(), pt.to_vec()),
    ])
}

#[test]
fn corpus_pretty_print_round_trips() {
    for c in cases() {
        let a = parse(c.source).unwrap();
        let b = parse(&pretty(&a)).unwrap();
        assert_eq!(a.without_positions(), b.without_positions(), "{}", c.name);
    }
}

fn expr() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (0i64..1000).prop_map(|v| v.to_string()),
        Just("x".to_string()),
        Just("a[1]".to_string())
    ];
    leaf.prop_recursive(4, 32, 2, |inner| {
        (
            inner.clone(),
            prop::sample::select(vec!["+", "-", "*", "&", "|", "^", "<<", ">>", "<", "=="]),
            inner,
        )
            .prop_map(|(l, op, r)| format!("({l} {op} {r})"))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expressions_round_trip(e in expr()) {
        let src = format!("int x; int a[4];\nvoid main() {{ x = {e}; }}");
        let a = parse(&src).unwrap();
        let b = parse(&pretty(&a)).unwrap();
        prop_assert_eq!(a.without_positions(), b.without_positions());
    }

    #[test]
    fn transformed_matches_vanilla(k0 in 0i64..256, k1 in 0i64..256, p0 in 0i64..256, p1 in 0i64..256) {
        let c = aes_toy("all");
        let opts = SimOptions::default();
        let i = inputs([k0, k1], [p0, p1]);
        let v = simulate(&c.vanilla, &c.vanilla_layout, None, &i, &opts).unwrap();
        let t = simulate(&c.tree, &c.layout, Some(&c.plan), &i, &opts).unwrap();
        prop_assert_eq!(&v.outputs, &t.outputs);
        let reference = simulate(&c.tree, &c.layout, Some(&c.plan), &inputs([0, 0], [p0, p1]), &opts).unwrap();
        prop_assert_eq!(&t.profile, &reference.profile);
    }

    #[test]
    fn simulation_is_deterministic(k0 in 0i64..256, k1 in 0i64..256) {
        let c = aes_toy("O1,O2");
        let i = inputs([k0, k1], [3, 5]);
        let a = simulate(&c.tree, &c.layout, Some(&c.plan), &i, &SimOptions::default()).unwrap();
        let b = simulate(&c.tree, &c.layout, Some(&c.plan), &i, &SimOptions::default()).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }
}
