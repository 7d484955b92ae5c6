//! On-disk layout of a prepared dataset directory:
//! `meta.json`, `train.tsv`, `valid.tsv`, `test.tsv` (dense `u<TAB>i`) and
//! `social.tsv` (`u<TAB>v<TAB>provenance<TAB>active`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, SocialGraph};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Meta {
    n_users: usize,
    n_items: usize,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn pairs_text(pairs: &[(usize, usize)]) -> String {
    let mut s = String::with_capacity(pairs.len() * 12);
    for (u, i) in pairs {
        writeln!(s, "{u}\t{i}").unwrap();
    }
    s
}

fn parse_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t').map(str::parse::<usize>);
        match (cols.next(), cols.next(), cols.next()) {
            (Some(Ok(a)), Some(Ok(b)), None) => out.push((a, b)),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: format!("expected two indices, got {line:?}"),
                })
            }
        }
    }
    Ok(out)
}

/// Writes the social graph as `u<TAB>v<TAB>provenance<TAB>active` rows.
pub(crate) fn write_social(path: &Path, g: &SocialGraph) -> Result<()> {
    let mut s = String::with_capacity(g.n_edges() * 20);
    for (u, v, p, a) in g.edges() {
        writeln!(s, "{u}\t{v}\t{}\t{}", p.as_str(), a as u8).unwrap();
    }
    write(path, &s)
}

pub(crate) fn read_social(path: &Path, n_users: usize) -> Result<SocialGraph> {
    let text = read(path)?;
    let mut edges = Vec::new();
    let mut inactive = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let err = || Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: format!("expected u<TAB>v<TAB>provenance<TAB>active, got {line:?}"),
        };
        if cols.len() != 4 {
            return Err(err());
        }
        let u = cols[0].parse::<usize>().map_err(|_| err())?;
        let v = cols[1].parse::<usize>().map_err(|_| err())?;
        let p = Provenance::parse(cols[2]).ok_or_else(err)?;
        let a = match cols[3] {
            "1" => true,
            "0" => false,
            _ => return Err(err()),
        };
        edges.push((u, v, p));
        if !a {
            inactive.push((u, v));
        }
    }
    let mut g = SocialGraph::from_directed(n_users, edges)?;
    for (u, v) in inactive {
        let e = g.edge_id(u, v).expect("edge just inserted");
        g.set_active(e, false);
    }
    Ok(g)
}

pub fn save_prepared(dir: &Path, d: &Dataset, g: &SocialGraph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        n_users: d.n_users(),
        n_items: d.n_items(),
        user_ids: d.user_ids().to_vec(),
        item_ids: d.item_ids().to_vec(),
    };
    write(&dir.join("meta.json"), &serde_json::to_string(&meta)?)?;
    write(&dir.join("train.tsv"), &pairs_text(d.train()))?;
    write(&dir.join("valid.tsv"), &pairs_text(d.valid()))?;
    write(&dir.join("test.tsv"), &pairs_text(d.test()))?;
    write_social(&dir.join("social.tsv"), g)
}

pub fn load_prepared(dir: &Path) -> Result<(Dataset, SocialGraph)> {
    let meta: Meta = serde_json::from_str(&read(&dir.join("meta.json"))?)?;
    let d = Dataset::from_splits(
        meta.n_users,
        meta.n_items,
        parse_pairs(&dir.join("train.tsv"))?,
        parse_pairs(&dir.join("valid.tsv"))?,
        parse_pairs(&dir.join("test.tsv"))?,
        meta.user_ids,
        meta.item_ids,
    )?;
    let g = read_social(&dir.join("social.tsv"), meta.n_users)?;
    Ok((d, g))
}
