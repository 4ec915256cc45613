//! JSON and markdown rendering of suite results.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::suite::{AttackRow, ContractRow, DefenseRow, SuiteReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    MarkdownTable,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "markdown" | "md" | "markdown-table" => Ok(Format::MarkdownTable),
            _ => Err(Error::Input(format!("unknown report format `{s}`"))),
        }
    }
}

pub fn to_json(rep: &SuiteReport) -> String {
    let mut s = serde_json::to_string_pretty(rep).expect("report serializes");
    s.push('\n');
    s
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn defenses_table(rows: &[DefenseRow]) -> String {
    let mut s =
        String::from("| Case | PF(vanilla) | PF(transformed) | Oblivious |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            r.case,
            r.pf_vanilla,
            r.pf_transformed,
            yes(r.oblivious)
        );
    }
    s
}

pub fn attacks_table(rows: &[AttackRow]) -> String {
    let mut s =
        String::from("| Case | Oracle | Input bits | Leaked bits | % |\n|---|---|---|---|---|\n");
    for r in rows {
        let star = if r.input_dependent { "*" } else { "" };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {star}{:.2} | {:.2} |",
            r.case, r.oracle, r.input_bits, r.leaked_bits, r.percent
        );
    }
    s
}

pub fn contracts_table(rows: &[ContractRow]) -> String {
    let mut s = String::from(
        "| Case | Bucket (code + data) | Steps | Secrets | Strategies | Fake classes | Naive classes |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} + {} | {} | {} | {} | {} | {} |",
            r.case,
            r.bucket_code,
            r.bucket_data,
            r.schedule_steps,
            r.secrets,
            r.strategies,
            r.fake_classes,
            r.naive_classes
        );
    }
    s
}

/// One table per suite that ran, in suite order.
pub fn to_markdown(rep: &SuiteReport) -> String {
    use crate::suite::Suite;
    let mut parts = Vec::new();
    for s in &rep.suites {
        parts.push(match s {
            Suite::Attacks => attacks_table(&rep.attacks),
            Suite::Defenses => defenses_table(&rep.defenses),
            Suite::Contracts => contracts_table(&rep.contracts),
        });
    }
    parts.join("\n")
}

pub fn render(rep: &SuiteReport, format: Format) -> String {
    match format {
        Format::Json => to_json(rep),
        Format::MarkdownTable => to_markdown(rep),
    }
}

pub fn emit_report(rep: &SuiteReport, format: Format, path: &Path) -> Result<()> {
    std::fs::write(path, render(rep, format))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::suite::{RunConfig, Suite};
    use crate::transform::CopyCounters;

    fn row(case: &str, v: usize, t: usize, ob: bool) -> DefenseRow {
        DefenseRow {
            case: case.into(),
            opts: "O1,O2".into(),
            applied: vec![],
            pf_vanilla: v,
            pf_transformed: t,
            copy_ops: CopyCounters::default(),
            inputs_checked: 1,
            exhaustive: true,
            oblivious: ob,
            output_mismatches: 0,
        }
    }

    #[test]
    fn empty_defenses_is_header_only() {
        assert_eq!(
            defenses_table(&[]),
            "| Case | PF(vanilla) | PF(transformed) | Oblivious |\n|---|---|---|---|\n"
        );
    }

    #[test]
    fn defenses_golden() {
        let t = defenses_table(&[row("aes", 40, 44, true), row("toy", 3, 5, false)]);
        assert_eq!(
            t,
            "| Case | PF(vanilla) | PF(transformed) | Oblivious |\n|---|---|---|---|\n\
             | aes | 40 | 44 | yes |\n| toy | 3 | 5 | no |\n"
        );
    }

    #[test]
    fn json_has_stable_fields() {
        let rep = SuiteReport {
            suites: vec![Suite::Defenses],
            config: RunConfig::default(),
            attacks: vec![],
            defenses: vec![row("aes", 1, 2, true)],
            contracts: vec![],
            failures: vec![],
        };
        let a = to_json(&rep);
        assert_eq!(a, to_json(&rep.clone()));
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        for k in [
            "suites",
            "config",
            "attacks",
            "defenses",
            "contracts",
            "failures",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["defenses"][0]["pf_transformed"], 2);
        let back: SuiteReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn unwritable_path_errors() {
        let rep = SuiteReport {
            suites: vec![Suite::Attacks],
            config: RunConfig::default(),
            attacks: vec![],
            defenses: vec![],
            contracts: vec![],
            failures: vec![],
        };
        assert!(emit_report(&rep, Format::Json, Path::new("/nonexistent/dir/r.json")).is_err());
    }
}
