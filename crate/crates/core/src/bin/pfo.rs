use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pfo_core::contract::{
    check_contract_indistinguishability, derive_contract, run_contractual, OsStrategy, Policy,
    Sweep,
};
use pfo_core::corpus::{self, CaseKind};
use pfo_core::exectree::{balance, check_balanced, tree_summary_json, tree_to_dot, ExecTree};
use pfo_core::frontend::{label_sensitivity, parse_with_defines, pretty};
use pfo_core::layout::build_layout;
use pfo_core::leakage::{
    attack_eddsa, attack_powm, attack_table, quantify_leakage, verify_pfo, EddsaPages, PowmPages,
    SecretDomain, Target, WatchedLookup,
};
use pfo_core::model::{trace_to_jsonl, AdversaryModel, MemoryLayout, VirtualPage};
use pfo_core::optimize::{compile_program, if_convert, parse_opts, CompileOptions, Compiled, Opt};
use pfo_core::report::{render, Format};
use pfo_core::simulate::{parse_value, simulate, Inputs, SimOptions};
use pfo_core::suite::{run_corpus, RunConfig, Suite};
use pfo_core::transform::MuxChoice;
use pfo_core::Error;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "pfo",
    version,
    about = "Page-fault-oblivious compiler, simulator and leakage analyzer"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Global {
    #[arg(long, global = true, default_value_t = 4096)]
    page_size: u64,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Write the main result here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a `const`, as NAME=VALUE.
    #[arg(long = "define", short = 'D', global = true, value_parser = parse_define)]
    defines: Vec<(String, i64)>,
    #[arg(long, global = true, default_value = "pigeonhole")]
    model: AdversaryModel,
}

/// A source file, or the name of a corpus case.
#[derive(Args, Clone)]
struct Program {
    program: String,
}

#[derive(Args, Clone)]
struct Passes {
    /// Passes as O1,O2,... or `all`.
    #[arg(long, default_value = "")]
    opt: String,
    #[arg(long, default_value = "auto")]
    mux: MuxChoice,
}

#[derive(Args, Clone)]
struct Domain {
    /// Enumerate the low BITS bits of the secrets.
    #[arg(long, conflicts_with = "samples")]
    exhaustive: Option<u32>,
    /// Random full-width secrets.
    #[arg(long)]
    samples: Option<usize>,
    /// Fix an input while the secrets vary, as NAME=VALUE.
    #[arg(long = "input", value_parser = parse_binding)]
    inputs: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and pretty-print a program.
    Parse(Program),
    /// Sensitivity labels, execution tree summary and balance check.
    Analyze {
        #[command(flatten)]
        program: Program,
        /// Write the execution tree in Graphviz format.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Apply passes and emit the plan.
    Transform {
        #[command(flatten)]
        program: Program,
        #[command(flatten)]
        passes: Passes,
    },
    /// Run one input and print outputs and the fault profile.
    Simulate {
        #[command(flatten)]
        program: Program,
        #[arg(long = "input", value_parser = parse_binding)]
        inputs: Vec<(String, String)>,
        /// Run the transformed program.
        #[arg(long)]
        transformed: bool,
        #[command(flatten)]
        passes: Passes,
        /// Write the access trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Check that every secret yields one profile.
    Verify {
        #[command(flatten)]
        program: Program,
        #[arg(long)]
        transformed: bool,
        #[command(flatten)]
        passes: Passes,
        #[command(flatten)]
        domain: Domain,
    },
    /// Partition secrets by profile and report leakage.
    Leak {
        #[command(flatten)]
        program: Program,
        #[arg(long)]
        transformed: bool,
        #[command(flatten)]
        passes: Passes,
        #[command(flatten)]
        domain: Domain,
    },
    /// Recover secrets from vanilla profiles.
    Attack {
        #[command(flatten)]
        program: Program,
        #[arg(long)]
        oracle: String,
        #[arg(long = "input", value_parser = parse_binding)]
        inputs: Vec<(String, String)>,
        /// Code pages the oracle watches, comma separated.
        #[arg(long, value_delimiter = ',')]
        pages: Vec<u64>,
        #[arg(long)]
        window: Option<u32>,
        /// Watched lookup as TABLE:BOUNDARY:BYTE.
        #[arg(long = "watch", value_parser = parse_watch)]
        watched: Vec<WatchedLookup>,
        #[arg(long, default_value = "key")]
        key: String,
        #[arg(long, default_value = "pt")]
        plaintext: String,
        #[arg(long, default_value_t = 12)]
        runs: usize,
    },
    /// Contractual execution under an OS strategy, or a full sweep.
    Contract {
        #[command(flatten)]
        program: Program,
        #[arg(long, default_value = "fake")]
        policy: Policy,
        #[arg(long, default_value = "honest")]
        strategy: OsStrategy,
        #[arg(long = "input", value_parser = parse_binding)]
        inputs: Vec<(String, String)>,
        /// Sweep secrets against every single-page steal.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 12)]
        bits: u32,
    },
    /// Run corpus suites.
    Corpus {
        /// attacks, defenses, contracts.
        suites: Vec<Suite>,
        /// Passes for every case instead of each case's own.
        #[arg(long)]
        opt: Option<String>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        attack_runs: usize,
        #[arg(long, default_value_t = 12)]
        contract_bits: u32,
        /// Restrict to these cases.
        #[arg(long, value_delimiter = ',')]
        cases: Vec<String>,
        #[arg(long, default_value = "markdown")]
        format: Format,
    },
}

fn parse_define(s: &str) -> Result<(String, i64), String> {
    let (k, v) = s.split_once('=').ok_or("expected NAME=VALUE")?;
    let v = v.trim();
    let n = match v.strip_prefix("0x") {
        Some(h) => i64::from_str_radix(h, 16),
        None => v.parse(),
    }
    .map_err(|e| format!("bad value `{v}`: {e}"))?;
    Ok((k.trim().to_string(), n))
}

fn parse_binding(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or("expected NAME=VALUE")?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_watch(s: &str) -> Result<WatchedLookup, String> {
    let p: Vec<&str> = s.split(':').collect();
    if p.len() != 3 {
        return Err("expected TABLE:BOUNDARY:BYTE".into());
    }
    Ok(WatchedLookup {
        table: p[0].to_string(),
        boundary: p[1].parse().map_err(|_| "bad boundary")?,
        byte: p[2].parse().map_err(|_| "bad byte index")?,
    })
}

enum Outcome {
    Ok,
    /// An assertion the command checks did not hold.
    Failed,
}

type Res<T> = Result<T, Error>;

struct Source {
    text: String,
    defines: Vec<(String, i64)>,
    case: Option<corpus::CorpusCase>,
}

fn load(p: &Program, g: &Global) -> Res<Source> {
    let path = Path::new(&p.program);
    let (text, mut defines, case) = if path.exists() {
        (std::fs::read_to_string(path)?, vec![], None)
    } else if let Ok(c) = corpus::case(&p.program) {
        (c.source.to_string(), c.defines.clone(), Some(c))
    } else {
        return Err(Error::Input(format!(
            "no such file or corpus case `{}`",
            p.program
        )));
    };
    for (k, v) in &g.defines {
        defines.retain(|(n, _)| n != k);
        defines.push((k.clone(), *v));
    }
    Ok(Source {
        text,
        defines,
        case,
    })
}

fn compile(src: &Source, passes: &Passes, g: &Global) -> Res<Compiled> {
    let opts = if passes.opt.is_empty() {
        Default::default()
    } else {
        parse_opts(&passes.opt)?
    };
    compile_program(
        &src.text,
        &src.defines,
        &opts,
        &CompileOptions {
            page_size: g.page_size,
            mux: passes.mux,
            ..Default::default()
        },
    )
}

fn vanilla(src: &Source, g: &Global) -> Res<(ExecTree, MemoryLayout)> {
    let t = corpus::compile(&src.text, &src.defines)?;
    let l = build_layout(&t, g.page_size)?;
    Ok((t, l))
}

fn bind(tree: &ExecTree, pairs: &[(String, String)]) -> Res<Inputs> {
    pairs
        .iter()
        .map(|(k, v)| Ok((k.clone(), parse_value(tree, k, v)?)))
        .collect()
}

fn domain(d: &Domain, tree: &ExecTree, seed: u64) -> Res<SecretDomain> {
    let base = bind(tree, &d.inputs)?;
    let dom = match (d.exhaustive, d.samples) {
        (Some(b), _) => SecretDomain::exhaustive(b),
        (None, Some(n)) => SecretDomain::sample(n, seed),
        (None, None) => {
            SecretDomain::exhaustive(pfo_core::leakage::DEFAULT_EXHAUSTIVE_LIMIT_BITS.min(16))
        }
    };
    Ok(dom.with_base(base))
}

fn sim_opts(g: &Global) -> SimOptions {
    SimOptions {
        model: g.model,
        ..Default::default()
    }
}

fn emit(g: &Global, text: &str) -> Res<()> {
    match &g.out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut o = std::io::stdout().lock();
            o.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                o.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn emit_json(g: &Global, v: &Value) -> Res<()> {
    emit(g, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn run(cli: Cli) -> Res<Outcome> {
    let g = &cli.global;
    match &cli.cmd {
        Cmd::Parse(p) => {
            let src = load(p, g)?;
            let ast = parse_with_defines(&src.text, &src.defines)?;
            if g.json {
                emit_json(g, &serde_json::to_value(&ast)?)?;
            } else {
                emit(g, &pretty(&ast))?;
            }
        }
        Cmd::Analyze { program, dot } => {
            let src = load(program, g)?;
            let ast = parse_with_defines(&src.text, &src.defines)?;
            let labeled = label_sensitivity(&ast)?;
            let (tree, _) = vanilla(&src, g)?;
            let balanced = balance(&tree);
            if let Some(d) = dot {
                std::fs::write(d, tree_to_dot(&tree))?;
            }
            let v = json!({
                "regions": labeled.labels.regions,
                "tree": tree_summary_json(&tree),
                "balance": check_balanced(&tree),
                "balanced_tree": tree_summary_json(&balanced),
            });
            emit_json(g, &v)?;
        }
        Cmd::Transform { program, passes } => {
            let src = load(program, g)?;
            let cp = compile(&src, passes, g)?;
            if let Some(out) = &g.out {
                let mut ast = parse_with_defines(&src.text, &src.defines)?;
                if parse_opts(&passes.opt)?.contains(&Opt::O5) {
                    ast = if_convert(&ast).0;
                }
                std::fs::write(out, pretty(&ast))?;
                std::fs::write(out.with_extension("plan.json"), cp.plan.to_json())?;
            }
            let v = json!({
                "passes": cp.passes,
                "applied": cp.plan.applied,
                "mode": cp.plan.mode,
                "copy_ops": cp.plan.counters,
                "copy_ops_total": cp.plan.counters.total(),
                "staging": cp.plan.staging,
            });
            let text = serde_json::to_string_pretty(&v)? + "\n";
            std::io::stdout().write_all(text.as_bytes())?;
        }
        Cmd::Simulate {
            program,
            inputs,
            transformed,
            passes,
            trace,
        } => {
            let src = load(program, g)?;
            let cp = compile(&src, passes, g)?;
            let inp = bind(&cp.vanilla, inputs)?;
            let opts = sim_opts(g);
            let r = if *transformed {
                simulate(&cp.tree, &cp.layout, Some(&cp.plan), &inp, &opts)?
            } else {
                simulate(&cp.vanilla, &cp.vanilla_layout, None, &inp, &opts)?
            };
            if let Some(t) = trace {
                std::fs::write(t, trace_to_jsonl(&r.trace))?;
            }
            if g.json {
                emit(g, &r.to_json())?;
            } else {
                let mut s = String::new();
                for (k, v) in &r.outputs {
                    s.push_str(&format!("{k} = {v:?}\n"));
                }
                let pages: Vec<String> = r.profile.faults.iter().map(|p| p.0.to_string()).collect();
                s.push_str(&format!("faults {}: {}\n", r.faults, pages.join(" ")));
                s.push_str(&format!("steps {}\n", r.steps));
                if let Some(t) = &r.trap {
                    s.push_str(&format!("trap at step {}: {}\n", t.step, t.message));
                }
                emit(g, &s)?;
            }
            if r.trap.is_some() {
                return Ok(Outcome::Failed);
            }
        }
        Cmd::Verify {
            program,
            transformed,
            passes,
            domain: d,
        } => {
            let src = load(program, g)?;
            let cp = compile(&src, passes, g)?;
            let dom = domain(d, &cp.vanilla, g.seed)?;
            let t = if *transformed {
                Target::planned(&cp.tree, &cp.plan)
            } else {
                Target::vanilla(&cp.vanilla, &cp.vanilla_layout)
            };
            let rep = verify_pfo(&t, &dom, &sim_opts(g))?;
            if g.json {
                emit_json(g, &serde_json::to_value(&rep)?)?;
            } else {
                let s = match &rep.counterexample {
                    None => format!("oblivious over {} inputs", rep.inputs_checked),
                    Some(c) => format!(
                        "counterexample: inputs {} and {} diverge at fault {}",
                        c.index0, c.index1, c.first_divergence
                    ),
                };
                emit(g, &s)?;
            }
            if !rep.oblivious {
                return Ok(Outcome::Failed);
            }
        }
        Cmd::Leak {
            program,
            transformed,
            passes,
            domain: d,
        } => {
            let src = load(program, g)?;
            let cp = compile(&src, passes, g)?;
            let dom = domain(d, &cp.vanilla, g.seed)?;
            let t = if *transformed {
                Target::planned(&cp.tree, &cp.plan)
            } else {
                Target::vanilla(&cp.vanilla, &cp.vanilla_layout)
            };
            let rep = quantify_leakage(&t, &dom, &sim_opts(g))?;
            if g.json {
                emit_json(g, &serde_json::to_value(&rep)?)?;
            } else {
                emit(
                    g,
                    &format!(
                        "inputs {}\nclasses {}\nmutual information {:.4} bits\nmax leakage {:.4} bits",
                        rep.domain_size,
                        rep.classes.len(),
                        rep.mutual_information,
                        rep.max_leakage
                    ),
                )?;
            }
        }
        Cmd::Attack {
            program,
            oracle,
            inputs,
            pages,
            window,
            watched,
            key,
            plaintext,
            runs,
        } => {
            let src = load(program, g)?;
            let (tree, lay) = vanilla(&src, g)?;
            let inp = bind(&tree, inputs)?;
            let opts = sim_opts(g);
            let vp = |i: usize| -> Res<VirtualPage> {
                pages
                    .get(i)
                    .map(|&p| VirtualPage(p))
                    .ok_or_else(|| Error::Input("--pages needs three pages".into()))
            };
            let v = match oracle.as_str() {
                "eddsa" => {
                    let p = match src.case.as_ref().map(|c| &c.kind) {
                        Some(CaseKind::Eddsa(p)) if pages.is_empty() => *p,
                        _ => EddsaPages {
                            ec_mul: vp(0)?,
                            dup: vp(1)?,
                            test_bit: vp(2)?,
                        },
                    };
                    let prof = simulate(&tree, &lay, None, &inp, &opts)?.profile;
                    let bits = attack_eddsa(&prof, &p)?;
                    json!({ "bits": bits.iter().map(|b| b.to_string()).collect::<String>(), "count": bits.len() })
                }
                "powm" => {
                    let (p, w0) = match src.case.as_ref().map(|c| &c.kind) {
                        Some(CaseKind::Powm { pages: p, window }) if pages.is_empty() => {
                            (*p, *window)
                        }
                        _ => (
                            PowmPages {
                                powm: vp(0)?,
                                mul_mod: vp(1)?,
                                set_cond: vp(2)?,
                            },
                            1,
                        ),
                    };
                    let w = window.unwrap_or(w0);
                    let nbits = inp.get("d").map(|d| d.len()).unwrap_or(0);
                    let prof = simulate(&tree, &lay, None, &inp, &opts)?.profile;
                    serde_json::to_value(attack_powm(&prof, &p, w, nbits)?)?
                }
                "table" => {
                    let w = match src.case.as_ref().map(|c| &c.kind) {
                        Some(CaseKind::Table { watched: cw, .. }) if watched.is_empty() => {
                            cw.clone()
                        }
                        _ => watched.clone(),
                    };
                    let victim = inp
                        .get(key)
                        .cloned()
                        .ok_or_else(|| Error::Input(format!("--input {key}=... is required")))?;
                    let t = Target::vanilla(&tree, &lay);
                    serde_json::to_value(attack_table(
                        &t, key, plaintext, &victim, &w, *runs, true, &opts,
                    )?)?
                }
                o => return Err(Error::Input(format!("unknown oracle `{o}`"))),
            };
            emit_json(g, &v)?;
        }
        Cmd::Contract {
            program,
            policy,
            strategy,
            inputs,
            sweep,
            bits,
        } => {
            let src = load(program, g)?;
            let (tree, _) = vanilla(&src, g)?;
            let t = balance(&tree);
            let l = build_layout(&t, g.page_size)?;
            let k = derive_contract(&t, &l)?;
            if *sweep {
                let dom = SecretDomain::exhaustive(*bits).with_base(bind(&t, inputs)?);
                let rep =
                    check_contract_indistinguishability(&t, &l, &k, &dom, &Sweep::Grid, *policy)?;
                emit_json(g, &json!({ "contract": k, "report": rep }))?;
                if *policy == Policy::FakeExecute && !rep.indistinguishable {
                    return Ok(Outcome::Failed);
                }
            } else {
                let inp = bind(&t, inputs)?;
                let (r, obs) = run_contractual(&t, &l, &k, &inp, strategy, *policy)?;
                emit_json(
                    g,
                    &json!({ "contract": k, "observable": obs, "outputs": r.outputs, "trap": r.trap }),
                )?;
            }
        }
        Cmd::Corpus {
            suites,
            opt,
            samples,
            attack_runs,
            contract_bits,
            cases,
            format,
        } => {
            if suites.is_empty() {
                return Err(Error::Input(
                    "select at least one suite: attacks, defenses, contracts".into(),
                ));
            }
            let config = RunConfig {
                page_size: g.page_size,
                model: g.model,
                opts: opt.clone(),
                samples: *samples,
                attack_runs: *attack_runs,
                contract_bits: *contract_bits,
                seed: g.seed,
                cases: cases.clone(),
                ..Default::default()
            };
            let rep = run_corpus(suites, &config)?;
            let fmt = if g.json { Format::Json } else { *format };
            emit(g, &render(&rep, fmt))?;
            for f in &rep.failures {
                eprintln!("FAIL {f}");
            }
            if !rep.passed() {
                return Ok(Outcome::Failed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Internal(_) | Error::ModelViolation(_) | Error::NotBalanced(_) | Error::Json(_) => 3,
        Error::Verification(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
