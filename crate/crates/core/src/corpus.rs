//! Benchmark programs shipped with the crate, with the metadata the attack,
//! verification and contract drivers need.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exectree::{build_execution_tree, BuildOptions, ExecTree};
use crate::frontend::{label_sensitivity, parse_with_defines};
use crate::leakage::{EddsaPages, PowmPages, WatchedLookup};
use crate::model::VirtualPage;
use crate::simulate::Inputs;

/// Parses, labels and builds the execution tree of a program.
pub fn compile(src: &str, defines: &[(String, i64)]) -> Result<ExecTree> {
    let ast = parse_with_defines(src, defines)?;
    build_execution_tree(&label_sensitivity(&ast)?, &BuildOptions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CaseKind {
    /// Split lookup tables indexed by `key ^ plaintext`.
    Table {
        key: &'static str,
        plaintext: Option<&'static str>,
        watched: Vec<WatchedLookup>,
    },
    Eddsa(EddsaPages),
    Powm {
        pages: PowmPages,
        window: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusCase {
    pub name: &'static str,
    pub file: &'static str,
    #[serde(skip)]
    pub source: &'static str,
    pub defines: Vec<(String, i64)>,
    /// Optimization passes, in the form `O1,O2`.
    pub opts: &'static str,
    /// Expected (code, data) pages touched, handler excluded.
    pub bucket: (usize, usize),
    pub kind: CaseKind,
}

impl CorpusCase {
    pub fn compile(&self) -> Result<ExecTree> {
        compile(self.source, &self.defines)
    }

    /// Defines for the exhaustive contract sweep: 2^12 secrets must cover
    /// the whole secret for the bit-serial cases.
    pub fn sweep_defines(&self) -> Vec<(&'static str, i64)> {
        match self.kind {
            CaseKind::Eddsa(_) | CaseKind::Powm { .. } => vec![("NBITS", 12)],
            _ => vec![],
        }
    }

    /// Public inputs held fixed while secrets range over a domain.
    pub fn base_inputs(&self) -> Inputs {
        match &self.kind {
            CaseKind::Table {
                plaintext: Some(pt),
                ..
            } if self.name.starts_with("aes") && self.name != "aes_toy" => {
                Inputs::from([(pt.to_string(), vec![0x10; 16])])
            }
            _ => Inputs::new(),
        }
    }

    pub fn with_defines(mut self, defines: &[(&str, i64)]) -> Self {
        for &(k, v) in defines {
            self.defines.retain(|(n, _)| n != k);
            self.defines.push((k.to_string(), v));
        }
        self
    }
}

const SPLIT_TOY: &str = include_str!("../../../corpus/split_toy.pfo");
const AES_TOY: &str = include_str!("../../../corpus/aes_toy.pfo");
const AES: &str = include_str!("../../../corpus/aes.pfo");
const POWM: &str = include_str!("../../../corpus/powm.pfo");
const CAST: &str = include_str!("../../../corpus/cast.pfo");
const SEED: &str = include_str!("../../../corpus/seed.pfo");
const STRIBOG: &str = include_str!("../../../corpus/stribog.pfo");
const TIGER: &str = include_str!("../../../corpus/tiger.pfo");
const WHIRLPOOL: &str = include_str!("../../../corpus/whirlpool.pfo");
const EDDSA: &str = include_str!("../../../corpus/eddsa.pfo");

fn watch(table: &str, boundary: u32, bytes: &[usize]) -> Vec<WatchedLookup> {
    bytes
        .iter()
        .map(|&byte| WatchedLookup {
            table: table.to_string(),
            boundary,
            byte,
        })
        .collect()
}

fn interleave(a: Vec<WatchedLookup>, b: Vec<WatchedLookup>) -> Vec<WatchedLookup> {
    a.into_iter().zip(b).flat_map(|(x, y)| [x, y]).collect()
}

fn vp(p: u64) -> VirtualPage {
    VirtualPage(p)
}

/// Table offset putting `entries` of `elem`-byte entries below a boundary.
fn split_offset(page_size: i64, entries: i64, elem: i64) -> i64 {
    page_size - entries * elem
}

pub fn cases() -> Vec<CorpusCase> {
    let aes_split = |name, entries: i64| CorpusCase {
        name,
        file: "aes.pfo",
        source: AES,
        defines: vec![
            ("T1_OFF".into(), split_offset(4096, entries, 4)),
            ("T3_OFF".into(), split_offset(4096, entries, 4)),
        ],
        opts: "O1,O2",
        bucket: (3, 3),
        kind: CaseKind::Table {
            key: "key",
            plaintext: Some("pt"),
            watched: interleave(
                watch("T1", entries as u32, &[5, 9, 13, 1]),
                watch("T3", entries as u32, &[15, 3, 7, 11]),
            ),
        },
    };
    let sbox = |name, file, source, off: &str, entries: i64, elem: i64, key, bucket| CorpusCase {
        name,
        file,
        source,
        defines: vec![(off.to_string(), split_offset(4096, entries, elem))],
        opts: "O1,O2",
        bucket,
        kind: CaseKind::Table {
            key,
            plaintext: None,
            watched: vec![],
        },
    };
    // Lower-page entry counts follow the measured gcc and llvm splits.
    vec![
        aes_split("aes", 0x1C),
        aes_split("aes_llvm", 128),
        sbox(
            "cast_gcrypt",
            "cast.pfo",
            CAST,
            "S_OFF",
            97,
            4,
            "key",
            (1, 2),
        ),
        sbox(
            "cast_gcrypt_llvm",
            "cast.pfo",
            CAST,
            "S_OFF",
            123,
            4,
            "key",
            (1, 2),
        ),
        sbox(
            "cast_openssl",
            "cast.pfo",
            CAST,
            "S_OFF",
            141,
            4,
            "key",
            (1, 2),
        ),
        sbox(
            "cast_openssl_llvm",
            "cast.pfo",
            CAST,
            "S_OFF",
            215,
            4,
            "key",
            (1, 2),
        ),
        sbox(
            "seed_gcrypt",
            "seed.pfo",
            SEED,
            "SS_OFF",
            225,
            4,
            "key",
            (2, 2),
        ),
        sbox(
            "seed_gcrypt_llvm",
            "seed.pfo",
            SEED,
            "SS_OFF",
            69,
            4,
            "key",
            (2, 2),
        ),
        sbox(
            "seed_openssl",
            "seed.pfo",
            SEED,
            "SS_OFF",
            120,
            4,
            "key",
            (2, 2),
        ),
        sbox(
            "seed_openssl_llvm",
            "seed.pfo",
            SEED,
            "SS_OFF",
            172,
            4,
            "key",
            (2, 2),
        ),
        sbox(
            "stribog",
            "stribog.pfo",
            STRIBOG,
            "T_OFF",
            131,
            8,
            "pw",
            (1, 5),
        ),
        sbox("tiger", "tiger.pfo", TIGER, "T_OFF", 136, 8, "pw", (1, 3)),
        sbox(
            "tiger_llvm",
            "tiger.pfo",
            TIGER,
            "T_OFF",
            148,
            8,
            "pw",
            (1, 3),
        ),
        sbox(
            "whirlpool",
            "whirlpool.pfo",
            WHIRLPOOL,
            "T_OFF",
            115,
            8,
            "pw",
            (1, 5),
        ),
        sbox(
            "whirlpool_llvm",
            "whirlpool.pfo",
            WHIRLPOOL,
            "T_OFF",
            133,
            8,
            "pw",
            (1, 5),
        ),
        CorpusCase {
            name: "eddsa",
            file: "eddsa.pfo",
            source: EDDSA,
            defines: vec![],
            opts: "O5",
            bucket: (19, 1),
            kind: CaseKind::Eddsa(EddsaPages {
                ec_mul: vp(1),
                dup: vp(2),
                test_bit: vp(3),
            }),
        },
        CorpusCase {
            name: "powm",
            file: "powm.pfo",
            source: POWM,
            defines: vec![],
            opts: "O4",
            bucket: (21, 1),
            kind: CaseKind::Powm {
                pages: PowmPages {
                    powm: vp(1),
                    mul_mod: vp(2),
                    set_cond: vp(3),
                },
                window: 1,
            },
        },
        CorpusCase {
            name: "aes_toy",
            file: "aes_toy.pfo",
            source: AES_TOY,
            defines: vec![],
            opts: "O1,O2",
            bucket: (1, 4),
            kind: CaseKind::Table {
                key: "key",
                plaintext: Some("pt"),
                watched: interleave(watch("T1", 0x1C, &[0]), watch("T3", 0x1C, &[1])),
            },
        },
        CorpusCase {
            name: "split_toy",
            file: "split_toy.pfo",
            source: SPLIT_TOY,
            defines: vec![],
            opts: "",
            bucket: (1, 2),
            kind: CaseKind::Table {
                key: "s",
                plaintext: None,
                watched: watch("t", 4, &[0]),
            },
        },
    ]
}

pub fn case(name: &str) -> Result<CorpusCase> {
    cases()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::Input(format!("unknown corpus case `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::build_layout;
    use crate::leakage::{attack_eddsa, attack_powm, attack_table, Target};
    use crate::model::Region;
    use crate::simulate::{simulate, Inputs, SimOptions};

    #[test]
    fn every_case_compiles() {
        for c in cases() {
            let t = c.compile().unwrap_or_else(|e| panic!("{}: {e}", c.name));
            build_layout(&t, 4096).unwrap_or_else(|e| panic!("{}: {e}", c.name));
        }
    }

    #[test]
    fn aes_round_matches_reference() {
        let t = case("aes").unwrap().compile().unwrap();
        let lay = build_layout(&t, 4096).unwrap();
        let key: Vec<i64> = (0..16).collect();
        let pt: Vec<i64> = (0..16).map(|i| i * 17 % 256).collect();
        let inputs = Inputs::from([("key".to_string(), key), ("pt".to_string(), pt)]);
        let r = simulate(&t, &lay, None, &inputs, &SimOptions::default()).unwrap();
        assert!(r.trap.is_none());
        let table = |n: &str| &t.objects[t.object_id(n).unwrap() as usize].init;
        let s: Vec<usize> = inputs["key"]
            .iter()
            .zip(&inputs["pt"])
            .map(|(k, p)| (k ^ p) as usize)
            .collect();
        let expect: Vec<i64> = (0..4)
            .map(|c| {
                table("T0")[s[4 * c]]
                    ^ table("T1")[s[(4 * c + 5) % 16]]
                    ^ table("T2")[s[(4 * c + 10) % 16]]
                    ^ table("T3")[s[(4 * c + 15) % 16]]
            })
            .map(|v| v & 0xffff_ffff)
            .collect();
        assert_eq!(r.outputs["out"], expect);
    }

    #[test]
    fn eddsa_attack_reads_every_bit() {
        let c = case("eddsa").unwrap().with_defines(&[("NBITS", 64)]);
        let CaseKind::Eddsa(pages) = c.kind else {
            unreachable!()
        };
        let t = c.compile().unwrap();
        let lay = build_layout(&t, 4096).unwrap();
        assert_eq!(lay.pages_of(Region::Code, "add_points"), vec![vp(1), vp(2)]);
        let bits: Vec<i64> = (0..64).map(|i| ((i * 7 + i / 3) % 5 < 2) as i64).collect();
        let inputs = Inputs::from([("r".to_string(), bits.clone())]);
        let r = simulate(&t, &lay, None, &inputs, &SimOptions::default()).unwrap();
        let got: Vec<i64> = attack_eddsa(&r.profile, &pages)
            .unwrap()
            .into_iter()
            .map(i64::from)
            .collect();
        assert_eq!(got, bits);
    }

    fn modpow(g: u64, bits: &[i64], m: u64) -> i64 {
        let mut a: u64 = 1;
        for &b in bits {
            a = a * a % m;
            if b == 1 {
                a = a * g % m;
            }
        }
        a as i64
    }

    #[test]
    fn powm_computes_and_leaks_its_exponent() {
        let bits: Vec<i64> = (0..24).map(|i| ((i * 5 + i / 4) % 3 == 0) as i64).collect();
        for w in [1u32, 3] {
            let c = case("powm")
                .unwrap()
                .with_defines(&[("NBITS", 24), ("W", w as i64)]);
            let CaseKind::Powm { pages, .. } = c.kind else {
                unreachable!()
            };
            let t = c.compile().unwrap();
            let lay = build_layout(&t, 4096).unwrap();
            let inputs = Inputs::from([("d".to_string(), bits.clone())]);
            let r = simulate(&t, &lay, None, &inputs, &SimOptions::default()).unwrap();
            assert!(r.trap.is_none(), "{:?}", r.trap);
            assert_eq!(r.outputs["a_out"], vec![modpow(65537, &bits, 2147483629)]);
            let rec = attack_powm(&r.profile, &pages, w, 24).unwrap();
            if w == 1 {
                let got: Vec<i64> = rec.exponent.unwrap().into_iter().map(i64::from).collect();
                assert_eq!(got, bits);
            } else {
                assert!(rec.remaining_bits > 0.0 && rec.leaked_bits > 0.0);
            }
        }
    }

    #[test]
    fn aes_attack_recovers_split_information() {
        let c = case("aes").unwrap();
        let CaseKind::Table { watched, .. } = &c.kind else {
            unreachable!()
        };
        let t = c.compile().unwrap();
        let lay = build_layout(&t, 4096).unwrap();
        let victim: Vec<i64> = (0..16).map(|i| (i * 29 + 3) % 256).collect();
        let rep = attack_table(
            &Target::vanilla(&t, &lay),
            "key",
            "pt",
            &victim,
            watched,
            12,
            true,
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.candidates.len(), 8);
        for (byte, cands) in &rep.candidates {
            assert!(cands.contains(&(victim[*byte] as u8)));
        }
    }
}
