//! KG JSON Lines and embedding-table files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use facttree_core::kg::{FactRecord, KgBuilder, KnowledgeGraph};
use facttree_core::locate::EmbeddingTable;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling so a failed run never leaves a torn file.
pub(crate) fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = std::path::PathBuf::from(tmp);
    let res = File::create(&tmp).and_then(|f| {
        let mut w = BufWriter::new(f);
        body(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()
    });
    match res.and_then(|()| std::fs::rename(&tmp, path)) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(Error::io(path, e))
        }
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    s: &'a str,
    p: &'a str,
    o: &'a str,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    attrs: &'a [(String, String)],
}

pub fn write_kg_to(kg: &KnowledgeGraph, w: &mut dyn Write) -> std::io::Result<()> {
    for rec in kg.records() {
        let out = RecordOut {
            s: &rec.s,
            p: &rec.p,
            o: &rec.o,
            attrs: &rec.attrs,
        };
        serde_json::to_writer(&mut *w, &out)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_kg(kg: &KnowledgeGraph, path: &Path) -> Result<()> {
    write_atomic(path, |w| write_kg_to(kg, w))
}

/// Adds every record of a JSON Lines stream to `builder`. Blank lines are
/// skipped and repeated facts are ignored. Returns the number of records read.
pub fn read_kg_into<R: BufRead>(r: R, path: &Path, builder: &mut KgBuilder) -> Result<usize> {
    let mut n = 0;
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FactRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e))?;
        builder
            .add_record(&rec)
            .map_err(|e| Error::parse(path, i + 1, e))?;
        n += 1;
    }
    Ok(n)
}

pub fn load_kg(path: &Path) -> Result<KnowledgeGraph> {
    let mut b = KgBuilder::new();
    read_kg_into(open(path)?, path, &mut b)?;
    Ok(b.build())
}

pub fn write_table_to(t: &EmbeddingTable, w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "dim {}", t.dim)?;
    for (name, v) in &t.rows {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{name}\t{}", vals.join(" "))?;
    }
    Ok(())
}

pub fn save_table(t: &EmbeddingTable, path: &Path) -> Result<()> {
    write_atomic(path, |w| write_table_to(t, w))
}

/// Parses the `dim N` header followed by `name<TAB>f1 … fN` rows.
pub fn read_table<R: BufRead>(r: R, path: &Path) -> Result<EmbeddingTable> {
    let mut lines = r.lines().enumerate();
    let dim = match lines.next() {
        Some((_, l)) => {
            let l = l.map_err(|e| Error::io(path, e))?;
            l.strip_prefix("dim ")
                .and_then(|n| n.trim().parse::<usize>().ok())
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::parse(path, 1, "expected header `dim N` with N > 0"))?
        }
        None => return Err(Error::parse(path, 1, "empty embedding table")),
    };
    let mut t = EmbeddingTable::new(dim);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "missing tab after name"))?;
        if name.is_empty() {
            return Err(Error::parse(path, i + 1, "empty name"));
        }
        let v = rest
            .split(' ')
            .map(|x| x.parse::<f64>().ok().filter(|f| f.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::parse(path, i + 1, "row values must be finite decimals"))?;
        t.insert(name, v)
            .map_err(|e| Error::parse(path, i + 1, e))?;
    }
    Ok(t)
}

pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    read_table(open(path)?, path)
}
