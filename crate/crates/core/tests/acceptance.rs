//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use pfo_core::corpus::{case, CaseKind};
use pfo_core::exectree::ExecTree;
use pfo_core::leakage::{attack_eddsa, attack_powm, verify_pfo, SecretDomain, Target};
use pfo_core::model::MemoryLayout;
use pfo_core::optimize::{compile_program, compile_vanilla, parse_opts, CompileOptions, Compiled};
use pfo_core::report::to_json;
use pfo_core::simulate::{simulate_with, Inputs, PageTables, SimOptions};
use pfo_core::suite::{
    elementwise_leakage, run_corpus, run_defenses, RunConfig, Suite, SuiteReport,
};
use pfo_core::transform::{CodeSlot, CopyKind, MuxMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const PAGE: u64 = 4096;
const AES_TOLERANCE: f64 = 0.1;
const SAMPLES: usize = 10_000;
const EXHAUSTIVE_BITS: u32 = 16;
const CONTRACT_BITS: u32 = 12;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sim() -> SimOptions {
    SimOptions {
        record_trace: false,
        ..Default::default()
    }
}

fn vanilla(name: &str, defines: &[(&str, i64)]) -> (ExecTree, MemoryLayout, CaseKind) {
    let c = case(name).unwrap().with_defines(defines);
    let (t, l) = compile_vanilla(c.source, &c.defines, &CompileOptions::default()).unwrap();
    (t, l, c.kind)
}

fn bits_of(v: u64, n: usize) -> Vec<i64> {
    (0..n).map(|i| ((v >> i) & 1) as i64).collect()
}

fn random_bits(rng: &mut ChaCha20Rng, n: usize) -> Vec<i64> {
    (0..n).map(|_| rng.gen_range(0..2)).collect()
}

fn eddsa_attack() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut runs = 0;
    for (nbits, scalars) in [(512usize, None), (12, Some(1u64 << 12))] {
        let (t, l, kind) = vanilla("eddsa", &[("NBITS", nbits as i64)]);
        let CaseKind::Eddsa(pages) = kind else {
            unreachable!()
        };
        let pt = PageTables::new(&t, &l).unwrap();
        let secrets: Vec<Vec<i64>> = match scalars {
            None => (0..1000).map(|_| random_bits(&mut rng, nbits)).collect(),
            Some(n) => (0..n).map(|v| bits_of(v, nbits)).collect(),
        };
        for r in secrets {
            let prof = simulate_with(
                &t,
                &pt,
                None,
                &Inputs::from([("r".to_string(), r.clone())]),
                &sim(),
            )
            .unwrap()
            .profile;
            let got: Vec<i64> = attack_eddsa(&prof, &pages)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(i64::from)
                .collect();
            ensure(got == r, || {
                format!("{nbits}-bit scalar not recovered: {r:?}")
            })?;
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} scalars recovered exactly (1000 x 512-bit, 4096 x 12-bit)"
    ))
}

fn aes_leakage() -> Outcome {
    // 0x1C of 256 entries on the lower page, for 8 watched lookups.
    let oracle = 8.0 * (256.0f64 / 0x1C as f64).log2();
    let (t, l, _) = vanilla("aes", &[]);
    let (_, leaked) = elementwise_leakage(&Target::vanilla(&t, &l), "key", &Inputs::new(), &sim())
        .map_err(|e| e.to_string())?;
    ensure((leaked - oracle).abs() < 1e-9, || {
        format!("{leaked:.4} bits, oracle {oracle:.4}")
    })?;
    ensure((leaked - 25.5).abs() <= AES_TOLERANCE, || {
        format!("{leaked:.4} bits, expected 25.5 +/- {AES_TOLERANCE}")
    })?;
    ensure(leaked.floor() == 25.0, || {
        format!("{leaked:.4} bits does not round to 25")
    })?;
    Ok(format!("{leaked:.2} bits"))
}

fn powm_attack() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut runs = 0;
    for (nbits, exps) in [(10usize, Some(1u64 << 10)), (64, None)] {
        let (t, l, kind) = vanilla("powm", &[("NBITS", nbits as i64), ("W", 1)]);
        let CaseKind::Powm { pages, .. } = kind else {
            unreachable!()
        };
        let pt = PageTables::new(&t, &l).unwrap();
        let secrets: Vec<Vec<i64>> = match exps {
            Some(n) => (0..n).map(|v| bits_of(v, nbits)).collect(),
            None => (0..1000).map(|_| random_bits(&mut rng, nbits)).collect(),
        };
        for d in secrets {
            let prof = simulate_with(
                &t,
                &pt,
                None,
                &Inputs::from([("d".to_string(), d.clone())]),
                &sim(),
            )
            .unwrap()
            .profile;
            let rec = attack_powm(&prof, &pages, 1, nbits).map_err(|e| e.to_string())?;
            let exact = rec
                .exponent
                .as_ref()
                .is_some_and(|e| e.iter().map(|&b| b as i64).eq(d.iter().copied()));
            ensure(exact, || {
                format!("{nbits}-bit exponent not recovered: {d:?}")
            })?;
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} exponents recovered exactly (1024 x 10-bit, 1000 x 64-bit)"
    ))
}

fn defense_soundness(rep: &SuiteReport) -> Outcome {
    let required = [
        "aes",
        "cast_gcrypt",
        "cast_openssl",
        "seed_gcrypt",
        "seed_openssl",
        "stribog",
        "tiger",
        "whirlpool",
        "eddsa",
        "powm",
    ];
    for r in required {
        ensure(rep.defenses.iter().any(|d| d.case == r), || {
            format!("case {r} missing")
        })?;
    }
    for d in &rep.defenses {
        ensure(d.oblivious, || format!("{}: counterexample found", d.case))?;
        ensure(d.inputs_checked >= SAMPLES, || {
            format!("{}: only {} inputs", d.case, d.inputs_checked)
        })?;
        let (t, _, _) = vanilla(&d.case, &[]);
        let width: u64 = t
            .secrets()
            .iter()
            .map(|o| o.len.max(1) * o.width.unwrap_or(o.elem_bytes as u32 * 8) as u64)
            .sum();
        ensure(d.exhaustive == (width <= EXHAUSTIVE_BITS as u64), || {
            format!("{}: exhaustive flag wrong for {width} bits", d.case)
        })?;
    }
    let ex = rep.defenses.iter().filter(|d| d.exhaustive).count();
    Ok(format!(
        "{} cases single-class, {ex} exhaustive, {SAMPLES} samples each",
        rep.defenses.len()
    ))
}

fn semantics(rep: &SuiteReport) -> Outcome {
    let all = run_defenses(&RunConfig {
        opts: Some("all".into()),
        ..rep.config.clone()
    })
    .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for d in rep.defenses.iter().chain(&all) {
        ensure(d.output_mismatches == 0, || {
            format!(
                "{} ({}): {} output mismatches",
                d.case, d.opts, d.output_mismatches
            )
        })?;
        checked += d.inputs_checked;
    }
    Ok(format!(
        "0 mismatches over {checked} runs (own combination and all passes)"
    ))
}

fn copies(src: &str, opts: &str) -> Compiled {
    compile_program(
        src,
        &[],
        &parse_opts(opts).unwrap(),
        &CompileOptions::default(),
    )
    .unwrap()
}

fn aes_toy_copies() -> Outcome {
    let c = case("aes_toy").unwrap();
    let o1 = copies(c.source, "O1").plan.counters.data_total();
    let o12 = copies(c.source, "O1,O2").plan.counters.data_total();
    ensure(o1 == 4 && o12 == 2, || format!("O1 {o1}, O1+O2 {o12}"))?;
    Ok(format!("O1 {o1} copies, O1+O2 {o12} copies"))
}

/// Four leaves of `stmts` statements each under a 2-bit secret.
fn mux_program(stmts: usize) -> String {
    let body = |k: usize| {
        (0..stmts)
            .map(|i| format!("a = a + {};", i + k))
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        "secret int<2> s;\noutput int<32> a;\nvoid main() {{\n#pragma begin_pf_sensitive\n\
         if (s & 1) {{ if (s & 2) {{ {} }} else {{ {} }} }} else {{ if (s & 2) {{ {} }} else {{ {} }} }}\n\
         #pragma end_pf_sensitive\n}}",
        body(1),
        body(2),
        body(3),
        body(4)
    )
}

fn compacted_mux() -> Outcome {
    let c = copies(&mux_program(80), "");
    let widest = (0..c.tree.levels.len())
        .max_by_key(|&l| {
            c.tree.levels[l]
                .iter()
                .map(|&b| c.tree.block(b).code_size())
                .sum::<u64>()
        })
        .unwrap();
    let sizes: Vec<u64> = c.tree.levels[widest]
        .iter()
        .map(|&b| c.tree.block(b).code_size())
        .collect();
    let total: u64 = sizes.iter().sum();
    ensure(total > PAGE, || {
        format!("level code is {total} bytes, not more than a page")
    })?;
    ensure(c.plan.mode == MuxMode::Compacted, || {
        format!("mode {:?}", c.plan.mode)
    })?;
    for (&b, slot) in &c.plan.gamma.blocks {
        let size = c.tree.block(b).code_size();
        let CodeSlot::Compacted {
            real_offset,
            dummy_offset,
        } = *slot
        else {
            return Err(format!("block {b} not compacted"));
        };
        ensure(
            real_offset + size <= PAGE && dummy_offset + size <= PAGE,
            || format!("block {b} leaves SA_code"),
        )?;
    }
    let sa = c.plan.staging.sa_code;
    let fetches: Vec<_> = c
        .plan
        .staging
        .groups
        .iter()
        .flat_map(|g| &g.fetch)
        .filter(|op| op.kind == CopyKind::CodeFetch)
        .collect();
    ensure(!fetches.is_empty(), || "no code staged".into())?;
    ensure(
        fetches
            .iter()
            .all(|op| op.dst_pages.iter().all(|&p| p == sa)),
        || "code staged outside SA_code".into(),
    )?;
    let v = verify_pfo(
        &Target::planned(&c.tree, &c.plan),
        &SecretDomain::exhaustive(2),
        &sim(),
    )
    .map_err(|e| e.to_string())?;
    ensure(v.oblivious, || {
        format!("profiles differ: {:?}", v.counterexample)
    })?;
    Ok(format!(
        "level of {} blocks, {total} bytes; SA_code one page; 4 profiles identical",
        sizes.len()
    ))
}

fn contracts(rep: &SuiteReport) -> Outcome {
    let mut out = Vec::new();
    for name in ["aes", "powm"] {
        let r = rep
            .contracts
            .iter()
            .find(|r| r.case == name)
            .ok_or(format!("{name} missing"))?;
        let grid = 1 + (r.bucket_code + r.bucket_data + 1) as u64 * (r.schedule_steps + 1);
        ensure(r.secrets == 1 << CONTRACT_BITS, || {
            format!("{name}: {} secrets", r.secrets)
        })?;
        ensure(r.strategies == grid, || {
            format!("{name}: {} strategies, grid is {grid}", r.strategies)
        })?;
        ensure(r.fake_classes == 1 && r.fake_indistinguishable, || {
            format!("{name}: fake-execute gives {} classes", r.fake_classes)
        })?;
        ensure(r.naive_classes >= 2, || {
            format!("{name}: naive-terminate gives {} classes", r.naive_classes)
        })?;
        out.push(format!(
            "{name} fake 1 / naive {} classes over {} strategies",
            r.naive_classes, r.strategies
        ));
    }
    Ok(out.join("; "))
}

fn split_counterexample() -> Outcome {
    let (t, l, _) = vanilla("split_toy", &[]);
    let v = verify_pfo(
        &Target::vanilla(&t, &l),
        &SecretDomain::exhaustive(3),
        &sim(),
    )
    .map_err(|e| e.to_string())?;
    let ce = v.counterexample.ok_or("no counterexample")?;
    let (a, b) = (ce.i0["s"][0], ce.i1["s"][0]);
    ensure(v.inputs_checked == 8, || {
        format!("{} inputs", v.inputs_checked)
    })?;
    ensure((a, b, ce.first_divergence) == (0, 4, 1), || {
        format!("pair ({a}, {b}) at fault {}", ce.first_divergence)
    })?;
    Ok(format!(
        "pair ({a}, {b}), first divergent fault {}",
        ce.first_divergence
    ))
}

fn determinism(a: &SuiteReport, b: &SuiteReport) -> Outcome {
    let (ja, jb) = (to_json(a), to_json(b));
    ensure(ja == jb, || "JSON reports differ".into())?;
    ensure(a.passed(), || format!("suite failures: {:?}", a.failures))?;
    Ok(format!("{} bytes identical", ja.len()))
}

fn main() {
    let config = RunConfig {
        samples: SAMPLES,
        exhaustive_bits: EXHAUSTIVE_BITS,
        contract_bits: CONTRACT_BITS,
        seed: 7,
        ..Default::default()
    };
    let all = [Suite::Attacks, Suite::Defenses, Suite::Contracts];
    let start = Instant::now();
    let first = run_corpus(&all, &config).expect("corpus run");
    println!(
        "corpus run shared by criteria 4, 5, 8, 10: {:.1} s",
        start.elapsed().as_secs_f64()
    );

    let criteria: Vec<Criterion> = vec![
        (
            "EdDSA attack recovers every scalar bit",
            Box::new(eddsa_attack),
        ),
        ("AES first-round leakage", Box::new(aes_leakage)),
        ("powm window-1 attack", Box::new(powm_attack)),
        ("defense soundness", Box::new(|| defense_soundness(&first))),
        ("semantics preservation", Box::new(|| semantics(&first))),
        ("aes_toy O1/O2 copy counters", Box::new(aes_toy_copies)),
        ("compacted multiplexing", Box::new(compacted_mux)),
        (
            "contract indistinguishability",
            Box::new(|| contracts(&first)),
        ),
        (
            "split-lookup counterexample",
            Box::new(split_counterexample),
        ),
        (
            "determinism",
            Box::new(|| {
                determinism(
                    &first,
                    &run_corpus(&all, &config).map_err(|e| e.to_string())?,
                )
            }),
        ),
    ];

    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1} s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1} s)", i + 1)
            }
        }
    }
    println!("{} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
