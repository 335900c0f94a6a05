//! Bundled codes addressed by `class_n_k` names.

use crate::code::{parse_alist, Code, CodeClass, CodeError};
use crate::construct;
use crate::gf2::BinaryMatrix;

pub struct Entry {
    pub name: &'static str,
    pub class: CodeClass,
    pub cyclic: bool,
    pub alist: &'static str,
    /// How the fixture was produced.
    pub construction: &'static str,
}

macro_rules! fixture {
    ($name:literal, $class:expr, $cyclic:expr, $how:literal) => {
        Entry {
            name: $name,
            class: $class,
            cyclic: $cyclic,
            alist: include_str!(concat!("../fixtures/", $name, ".alist")),
            construction: $how,
        }
    };
}

pub static ENTRIES: &[Entry] = &[
    fixture!("hamming_7_4", CodeClass::Hamming, true, "cyclic g=x^3+x+1, [P|I] form"),
    fixture!("bch_15_7", CodeClass::Bch, true, "BCH t=2 over x^4+x+1, [P|I] form"),
    fixture!("bch_31_16", CodeClass::Bch, true, "BCH t=3 over x^5+x^2+1, [P|I] form"),
    fixture!("bch_31_21", CodeClass::Bch, true, "BCH t=2 over x^5+x^2+1, [P|I] form"),
    fixture!("bch_63_30", CodeClass::Bch, true, "BCH t=6 over x^6+x+1, [P|I] form"),
    fixture!("bch_63_45", CodeClass::Bch, true, "BCH t=3 over x^6+x+1, [P|I] form"),
    fixture!("ldpc_32_16", CodeClass::Ldpc, false, "(3,6)-regular, seeded socket matching"),
    fixture!("ldpc_49_24", CodeClass::Ldpc, false, "array code q=7, j=4"),
    fixture!("ldpc_121_60", CodeClass::Ldpc, false, "array code q=11, j=6"),
    fixture!("ldpc_121_70", CodeClass::Ldpc, false, "array code q=11, j=5"),
    fixture!("ldpc_121_80", CodeClass::Ldpc, false, "array code q=11, j=4"),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    ENTRIES.iter().map(|e| e.name)
}

pub fn entry(name: &str) -> Option<&'static Entry> {
    ENTRIES.iter().find(|e| e.name == name)
}

/// Loads a bundled code, checking the name's `n` and `k` against the matrix.
pub fn load(name: &str) -> Result<Code, CodeError> {
    let e = entry(name).ok_or_else(|| CodeError::UnknownCode(name.to_string()))?;
    let (_, n, k) = crate::code::parse_code_name(e.name).expect("registry names are well formed");
    let h = parse_alist(e.alist)?;
    if h.cols() != n {
        return Err(CodeError::Dimensions(format!("{name}: fixture has {} columns", h.cols())));
    }
    Code::from_pcm(e.name, h, e.class, e.cyclic, Some(k))
}

pub fn all() -> Vec<Code> {
    ENTRIES.iter().map(|e| load(e.name).expect("bundled fixtures are valid")).collect()
}

/// Rebuilds a fixture matrix from its construction.
pub fn construct(name: &str) -> Option<BinaryMatrix> {
    let bch = |m, prim, t, n| construct::right_systematic(&construct::cyclic_pcm(n, &construct::bch_generator(m, prim, t)));
    Some(match name {
        "hamming_7_4" => bch(3, 0b1011, 1, 7),
        "bch_15_7" => bch(4, 0b10011, 2, 15),
        "bch_31_16" => bch(5, 0b100101, 3, 31),
        "bch_31_21" => bch(5, 0b100101, 2, 31),
        "bch_63_30" => bch(6, 0b1000011, 6, 63),
        "bch_63_45" => bch(6, 0b1000011, 3, 63),
        "ldpc_32_16" => construct::regular_ldpc(32, 3, 6, 0x3216, false),
        "ldpc_49_24" => construct::array_ldpc(7, 4),
        "ldpc_121_60" => construct::array_ldpc(11, 6),
        "ldpc_121_70" => construct::array_ldpc(11, 5),
        "ldpc_121_80" => construct::array_ldpc(11, 4),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code::write_alist;

    #[test]
    fn fixtures_match_constructions() {
        for e in ENTRIES {
            let built = construct(e.name).unwrap();
            assert_eq!(parse_alist(e.alist).unwrap(), built, "{}", e.name);
        }
    }

    #[test]
    fn every_fixture_is_a_valid_code() {
        for code in all() {
            let (_, n, k) = crate::code::parse_code_name(code.name()).unwrap();
            assert_eq!((code.n(), code.k()), (n, k));
            assert_eq!(code.pcm().rank(), n - k);
            assert!(code.generator().mul(&code.pcm().transpose()).unwrap().is_zero());
        }
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(load("bch_7_1"), Err(CodeError::UnknownCode(_))));
    }

    /// Regenerates the alist fixtures: `cargo test -p crossmpt-core write_fixtures -- --ignored`.
    #[test]
    #[ignore]
    fn write_fixtures() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
        for e in ENTRIES {
            let h = construct(e.name).unwrap();
            std::fs::write(format!("{dir}/{}.alist", e.name), write_alist(&h)).unwrap();
        }
    }
}
