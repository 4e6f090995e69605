//! Conformer XYZ files and molecule JSON-lines corpora.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Conformer, Modality};
use crate::graph2d::{parse_molgraph, MolGraph};

const SYMBOLS: [&str; 36] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr",
];

pub fn atomic_number(symbol: &str) -> Option<u32> {
    SYMBOLS
        .iter()
        .position(|s| s.eq_ignore_ascii_case(symbol))
        .map(|k| k as u32 + 1)
}

pub fn element_symbol(z: u32) -> Option<&'static str> {
    SYMBOLS.get((z as usize).checked_sub(1)?).copied()
}

/// Parses one XYZ block: atom count, a `id=<id> modality=<m>` comment and
/// `symbol x y z` rows in Å.
pub fn parse_xyz(text: &str) -> Result<Conformer> {
    let mut lines = text.lines();
    let count_line = lines.next().ok_or_else(|| Error::Parse("empty XYZ input".into()))?;
    let n: usize = count_line
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("XYZ atom count `{}`", count_line.trim())))?;
    let comment = lines.next().ok_or_else(|| Error::Parse("XYZ comment line missing".into()))?;
    let mut id = None;
    let mut modality = Modality::Optimized;
    for field in comment.split_whitespace() {
        match field.split_once('=') {
            Some(("id", v)) => id = Some(v.to_string()),
            Some(("modality", v)) => modality = v.parse()?,
            _ => {}
        }
    }
    let id = id.ok_or_else(|| Error::Parse(format!("XYZ comment lacks id=: `{comment}`")))?;

    let mut z = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for k in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{id}: expected {n} atoms, found {k}")))?;
        let mut cols = line.split_whitespace();
        let sym = cols.next().unwrap_or_default();
        z.push(atomic_number(sym).ok_or_else(|| Error::Parse(format!("{id}: unknown element `{sym}`")))?);
        let mut p = [0.0; 3];
        for c in &mut p {
            let tok = cols
                .next()
                .ok_or_else(|| Error::Parse(format!("{id}: atom {k} has fewer than 3 coordinates")))?;
            *c = tok
                .parse()
                .map_err(|_| Error::Parse(format!("{id}: bad coordinate `{tok}`")))?;
        }
        positions.push(p);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::Parse(format!("{id}: trailing content after {n} atoms")));
    }
    Conformer::new(id, z, positions, modality)
}

pub fn format_xyz(c: &Conformer) -> Result<String> {
    let mut s = format!("{}\nid={} modality={}\n", c.n_atoms(), c.id(), c.modality().as_str());
    for (&z, p) in c.atomic_numbers().iter().zip(c.positions()) {
        let sym = element_symbol(z).ok_or_else(|| Error::schema("z", format!("no symbol for atomic number {z}")))?;
        // `{:?}` prints the shortest representation that parses back exactly
        s.push_str(&format!("{sym} {:?} {:?} {:?}\n", p[0], p[1], p[2]));
    }
    Ok(s)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_xyz(path: &Path) -> Result<Conformer> {
    parse_xyz(&read_text(path)?)
}

/// One molecule per non-blank line.
pub fn parse_molecules(text: &str) -> Result<Vec<MolGraph>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            parse_molgraph(l).map_err(|e| match e {
                Error::Parse(m) => Error::Parse(format!("line {}: {m}", k + 1)),
                other => other,
            })
        })
        .collect()
}

pub fn read_molecules(path: &Path) -> Result<Vec<MolGraph>> {
    parse_molecules(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WATER: &str = "3\nid=water modality=generated\nO 0.0 0.0 0.1173\nH 0.0 0.7572 -0.4692\nH 0.0 -0.7572 -0.4692\n";

    #[test]
    fn parses_and_round_trips() {
        let c = parse_xyz(WATER).unwrap();
        assert_eq!(c.id(), "water");
        assert_eq!(c.atomic_numbers(), &[8, 1, 1]);
        assert_eq!(c.modality(), Modality::Generated);
        let again = parse_xyz(&format_xyz(&c).unwrap()).unwrap();
        assert_eq!(again.positions(), c.positions());
    }

    #[test]
    fn malformed_blocks_are_rejected() {
        assert!(parse_xyz("2\nid=x\nC 0 0 0\n").is_err());
        assert!(parse_xyz("1\nmodality=optimized\nC 0 0 0\n").is_err());
        assert!(parse_xyz("1\nid=x\nQq 0 0 0\n").is_err());
        assert!(parse_xyz("1\nid=x\nC 0 zero 0\n").is_err());
        assert!(parse_xyz("1\nid=x modality=drawn\nC 0 0 0\n").is_err());
    }

    #[test]
    fn element_table() {
        assert_eq!(atomic_number("c"), Some(6));
        assert_eq!(element_symbol(17), Some("Cl"));
        assert_eq!(element_symbol(0), None);
    }
}
