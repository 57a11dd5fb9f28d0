//! Per-item semantic embeddings: a TSV loader for precomputed vectors, a
//! synthetic category-prototype generator, and PCA reduction to model width.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{InteractionCorpus, Vocab};
use crate::error::{Error, Result};
use crate::fsio;
use crate::numkit::{axpy, dot, norm, pca_fit, scale, DenseMatrix, SeededRng};

pub const MIN_DIM: usize = 8;

/// One embedding row per vocabulary item, ordered by dense item index.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTable {
    embeddings: DenseMatrix,
    source: String,
}

impl SemanticTable {
    pub fn new(embeddings: DenseMatrix, source: impl Into<String>) -> Result<Self> {
        if embeddings.cols() < MIN_DIM {
            return Err(Error::invalid(format!(
                "semantic dimension {} below minimum {MIN_DIM}",
                embeddings.cols()
            )));
        }
        Ok(SemanticTable {
            embeddings,
            source: source.into(),
        })
    }

    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embeddings
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn items(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn row(&self, item: u32) -> &[f64] {
        self.embeddings.row(item as usize)
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

/// Reads `item<TAB>v1,v2,...,vd` lines, keyed by the corpus item ids. Lines for
/// items outside the vocabulary are ignored.
pub fn load_semantic_tsv(path: &Path, corpus: &InteractionCorpus) -> Result<SemanticTable> {
    load_with_vocab(path, corpus.items())
}

pub fn load_with_vocab(path: &Path, vocab: &Vocab) -> Result<SemanticTable> {
    let text = fsio::read_to_string(path)?;
    let where_ = |line: usize| format!("{}:{}", path.display(), line + 1);
    let mut rows: HashMap<u32, Vec<f64>> = HashMap::new();
    let mut dim = None;
    let mut ignored = 0usize;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{}: expected item<TAB>values", where_(n))))?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", where_(n))))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{}: non-finite value", where_(n))));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Format(format!(
                    "{}: dimension {} differs from {d}",
                    where_(n),
                    values.len()
                )))
            }
            Some(_) => {}
        }
        let Some(index) = vocab.index_of(id.trim()) else {
            ignored += 1;
            continue;
        };
        if rows.insert(index, values).is_some() {
            return Err(Error::Format(format!(
                "{}: duplicate item {}",
                where_(n),
                id.trim()
            )));
        }
    }
    if ignored > 0 {
        log::info!(
            "{}: skipped {ignored} items outside the vocabulary",
            path.display()
        );
    }
    let d = dim.unwrap_or(0);
    let mut data = Vec::with_capacity(vocab.len() * d);
    for index in 0..vocab.len() as u32 {
        let row = rows.remove(&index).ok_or_else(|| {
            Error::Format(format!(
                "{}: missing item {}",
                path.display(),
                vocab.id_of(index)
            ))
        })?;
        data.extend(row);
    }
    SemanticTable::new(
        DenseMatrix::from_vec(vocab.len(), d, data)?,
        path.display().to_string(),
    )
}

/// Writes the table in the loader's format, values in shortest round-trip form.
pub fn write_semantic_tsv(table: &SemanticTable, vocab: &Vocab, path: &Path) -> Result<()> {
    if vocab.len() != table.items() {
        return Err(Error::invalid("vocabulary size does not match the table"));
    }
    let mut out = String::new();
    for (i, id) in vocab.ids().iter().enumerate() {
        out.push_str(id);
        out.push('\t');
        for (j, v) in table.embeddings.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    fsio::write_atomic(path, out.as_bytes())
}

/// Random unit prototype per category, then per item `prototype + N(0, sigma^2)`
/// noise, unit-normalized. Prototypes are mutually orthogonal when `d` is at
/// least the number of categories.
pub fn synth_semantics(
    categories: &[u32],
    d: usize,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<SemanticTable> {
    if d < MIN_DIM {
        return Err(Error::invalid(format!(
            "semantic dimension must be at least {MIN_DIM}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(
            "noise sigma must be finite and non-negative",
        ));
    }
    let c = categories
        .iter()
        .map(|&k| k as usize + 1)
        .max()
        .unwrap_or(0);
    if c > d {
        log::warn!("{c} categories exceed dimension {d}; prototypes will not be orthogonal");
    }
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(c);
    while protos.len() < c {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if protos.len() < d {
            for _ in 0..2 {
                for p in &protos {
                    let a = dot(p, &v);
                    axpy(-a, p, &mut v);
                }
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            scale(1.0 / n, &mut v);
            protos.push(v);
        }
    }
    let mut data = Vec::with_capacity(categories.len() * d);
    for &k in categories {
        let mut row = protos[k as usize].clone();
        if sigma > 0.0 {
            for x in row.iter_mut() {
                *x += sigma * rng.normal();
            }
        }
        let n = norm(&row);
        if n == 0.0 {
            return Err(Error::NumericalFailure(
                "synthetic embedding collapsed to zero".into(),
            ));
        }
        scale(1.0 / n, &mut row);
        data.extend(row);
    }
    SemanticTable::new(
        DenseMatrix::from_vec(categories.len(), d, data)?,
        format!("synthetic(d={d}, sigma={sigma})"),
    )
}

/// `E_p`: the table projected onto its top `d_h` principal components.
pub fn reduce(table: &SemanticTable, d_h: usize) -> Result<DenseMatrix> {
    pca_fit(&table.embeddings, d_h)?.project(&table.embeddings)
}
