//! Template-generated contracts with a planted, class-specific trigger.
//!
//! Vulnerable samples contain the class's trigger code inside an otherwise
//! random contract; clean samples carry a benign variant of the same
//! function. Benign filler never uses any trigger construct, so the two
//! labels are separable by token presence alone.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use stip_core::rng::{self, ChaCha8Rng};

use crate::error::{Error, Result};
use crate::formats::{ensure_parent, write_text};
use crate::preprocess::{Label, RawContract, VulnClass};

const NOUNS: [&str; 16] = [
    "Vault", "Bank", "Token", "Lottery", "Auction", "Escrow", "Wallet", "Fund", "Market", "Pool", "Crowdsale",
    "Registry", "Game", "Treasury", "Exchange", "Ledger",
];
const VARS: [&str; 12] = [
    "total", "limit", "fee", "rate", "price", "supply", "counter", "bonus", "reserve", "cap", "round", "stake",
];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty word list")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_ascii_uppercase().to_string() + c.as_str()).unwrap_or_default()
}

fn benign_function(rng: &mut ChaCha8Rng, var: &str, index: usize) -> String {
    let v = rng.random_range(1..1000u32);
    let name = capitalize(var);
    match rng.random_range(0..6) {
        0 => format!("    function get{name}{index}() public view returns (uint) {{\n        return {var};\n    }}\n"),
        1 => format!(
            "    function set{name}{index}(uint value) public onlyOwner {{\n        require(value < {v});\n        {var} = value;\n    }}\n"
        ),
        2 => format!(
            "    function deposit{index}() public payable {{\n        require(msg.value > {v});\n        balances[msg.sender] = msg.value;\n        emit Logged(msg.sender, msg.value);\n    }}\n"
        ),
        3 => format!(
            "    function reset{name}{index}() public onlyOwner {{\n        for (uint i = 0; i < {}; i++) {{\n            {var} = i;\n        }}\n    }}\n",
            v % 10 + 1
        ),
        4 => format!(
            "    function owns{index}(address who) public view returns (bool) {{\n        return who == owner && balances[who] > {v};\n    }}\n"
        ),
        _ => format!(
            "    function transferOwnership{index}(address next) public onlyOwner {{\n        require(next != address(0));\n        owner = next;\n    }}\n"
        ),
    }
}

fn trigger_function(rng: &mut ChaCha8Rng, class: VulnClass, vulnerable: bool) -> String {
    let v = rng.random_range(2..100u32);
    match (class, vulnerable) {
        (VulnClass::Reentrancy, true) => "    function withdraw(uint amount) public {\n        require(balances[msg.sender] >= amount);\n        require(msg.sender.call.value(amount)());\n        balances[msg.sender] = balances[msg.sender] - amount;\n    }\n".to_string(),
        (VulnClass::Reentrancy, false) => "    function withdraw(uint amount) public {\n        require(balances[msg.sender] >= amount);\n        balances[msg.sender] = 0;\n        msg.sender.transfer(amount);\n    }\n".to_string(),
        (VulnClass::Timestamp, true) => format!("    function play() public payable {{\n        require(msg.value > 0);\n        if (block.timestamp % {v} == 0) {{\n            winner = msg.sender;\n        }}\n    }}\n"),
        (VulnClass::Timestamp, false) => format!("    function play() public payable {{\n        require(msg.value > 0);\n        if (seed % {v} == 0) {{\n            winner = msg.sender;\n        }}\n    }}\n"),
        (VulnClass::Delegatecall, true) => "    function forward(address target) public {\n        require(target.delegatecall(msg.data));\n    }\n".to_string(),
        (VulnClass::Delegatecall, false) => "    function forward(address target) public onlyOwner {\n        require(target != address(0));\n        delegate = target;\n    }\n".to_string(),
        (VulnClass::IntegerOverflowUnderflow, true) => "    function credit(address to, uint amount) public {\n        balances[to] += amount;\n        supplied += amount;\n    }\n".to_string(),
        (VulnClass::IntegerOverflowUnderflow, false) => "    function credit(address to, uint amount) public onlyOwner {\n        require(amount < balances[to]);\n        balances[to] = amount;\n    }\n".to_string(),
        (VulnClass::Cdav, true) => "    function spawn() public {\n        child = address(new Child(msg.sender));\n    }\n".to_string(),
        (VulnClass::Cdav, false) => "    function spawn(address existing) public onlyOwner {\n        child = existing;\n    }\n".to_string(),
    }
}

fn contract_source(rng: &mut ChaCha8Rng, class: VulnClass, vulnerable: bool) -> String {
    let name = format!("{}{}", pick(rng, &NOUNS), rng.random_range(1..100u32));
    let mut vars: Vec<&str> = VARS.to_vec();
    vars.shuffle(rng);
    let vars = &vars[..rng.random_range(2..5)];

    let mut src = String::new();
    if rng.random_bool(0.3) {
        src.push_str("// SPDX-License-Identifier: MIT\n");
    }
    src.push_str("pragma solidity ^0.4.24;\n\n");
    if rng.random_bool(0.3) {
        src.push_str("import \"./Ownable.sol\";\n\n");
    }
    src.push_str(&format!("contract {name} {{\n"));
    src.push_str("    mapping(address => uint) public balances;\n    address public owner;\n");
    for v in vars {
        src.push_str(&format!("    uint public {v} = {};\n", rng.random_range(0..10_000u32)));
    }
    match class {
        VulnClass::Timestamp => src.push_str("    address public winner;\n    uint public seed;\n"),
        VulnClass::Delegatecall => src.push_str("    address public delegate;\n"),
        VulnClass::IntegerOverflowUnderflow => src.push_str("    uint public supplied;\n"),
        VulnClass::Cdav => src.push_str("    address public child;\n"),
        VulnClass::Reentrancy => {}
    }
    src.push_str("    event Logged(address who, uint amount);\n\n");
    src.push_str("    modifier onlyOwner() {\n        require(msg.sender == owner);\n        _;\n    }\n\n");
    src.push_str("    constructor() public {\n        owner = msg.sender;\n    }\n\n");

    let mut functions: Vec<String> = (0..rng.random_range(2..5))
        .map(|i| benign_function(rng, vars[i % vars.len()], i))
        .collect();
    let at = rng.random_range(0..=functions.len());
    functions.insert(at, trigger_function(rng, class, vulnerable));
    for (i, f) in functions.iter().enumerate() {
        if rng.random_bool(0.2) {
            src.push_str(&format!("    /* helper {i} */\n"));
        }
        src.push_str(f);
        src.push('\n');
    }
    src.push_str("}\n");
    if class == VulnClass::Cdav {
        src.push_str("\ncontract Child {\n    address public parent;\n\n    constructor(address p) public {\n        parent = p;\n    }\n}\n");
    }
    src
}

/// `n` contracts of `class`, alternating vulnerable and clean (so exactly
/// half are vulnerable for even `n`). Ids are `<class>_<index>.sol`.
pub fn make_synthetic_corpus(n: usize, class: VulnClass, seed: u64) -> Result<Vec<RawContract>> {
    if n < 20 {
        return Err(Error::Data(format!("a synthetic corpus needs at least 20 contracts, got {n}")));
    }
    let mut rng = rng::seeded(rng::derive(seed, class as u64 + 1));
    Ok((0..n)
        .map(|i| {
            let vulnerable = i % 2 == 0;
            RawContract {
                id: format!("{}_{i:04}.sol", class.name()),
                source: contract_source(&mut rng, class, vulnerable),
                label: Label { class, vulnerable },
            }
        })
        .collect())
}

/// Writes the contracts plus a `labels.csv` into `dir`, appending to an
/// existing `labels.csv`.
pub fn write_corpus_dir(dir: &Path, contracts: &[RawContract]) -> Result<()> {
    let labels = dir.join("labels.csv");
    ensure_parent(&labels)?;
    let mut text = if labels.exists() {
        std::fs::read_to_string(&labels).map_err(Error::io(&labels))?
    } else {
        "filename,class,flag\n".to_string()
    };
    for c in contracts {
        write_text(&dir.join(&c.id), &c.source)?;
        text.push_str(&format!("{},{},{}\n", c.id, c.label.class, u8::from(c.label.vulnerable)));
    }
    write_text(&labels, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_vulnerable_and_deterministic() {
        let a = make_synthetic_corpus(40, VulnClass::Reentrancy, 3).unwrap();
        assert_eq!(a.iter().filter(|c| c.label.vulnerable).count(), 20);
        assert_eq!(a, make_synthetic_corpus(40, VulnClass::Reentrancy, 3).unwrap());
        assert_ne!(a, make_synthetic_corpus(40, VulnClass::Reentrancy, 4).unwrap());
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        assert!(make_synthetic_corpus(19, VulnClass::Cdav, 0).is_err());
    }
}
