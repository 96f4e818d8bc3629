//! Model files and embedding export.
//!
//! The model file is plain text:
//!
//! ```text
//! MBHGCN-MODEL-v1
//! shape <users> <items> <behaviors> <dim> <layers>
//! variant <key>=<value> ...
//! w <w_1> ... <w_K>
//! p <d values>          (one line per user)
//! q <d values>          (one line per item)
//! end
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle
//! reproduces the parameters bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::GraphSet;
use crate::matrix::Matrix;
use crate::model::{forward, InteractionCounts, ModelParams, Variant};

pub const MODEL_MAGIC: &str = "MBHGCN-MODEL-v1";

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn variant_line(v: &Variant) -> String {
    format!(
        "variant use_unified={} user_agg={} item_weighting={} fuse_global={} multi_task={} delta_query={}",
        v.use_unified, v.user_agg, v.item_weighting, v.fuse_global, v.multi_task, v.delta_query
    )
}

pub fn write_model<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    writeln!(out, "{MODEL_MAGIC}")?;
    writeln!(
        out,
        "shape {} {} {} {} {}",
        params.num_users(),
        params.num_items(),
        params.num_behaviors(),
        params.dim(),
        params.layers
    )?;
    writeln!(out, "{}", variant_line(&params.variant))?;
    writeln!(out, "w {}", join(&params.behavior_weights))?;
    for row in params.user_emb.iter_rows() {
        writeln!(out, "p {}", join(row))?;
    }
    for row in params.item_emb.iter_rows() {
        writeln!(out, "q {}", join(row))?;
    }
    writeln!(out, "end")?;
    out.flush()?;
    Ok(())
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    write_model(params, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    read_model(BufReader::new(File::open(path)?))
}

fn floats(fields: &[&str], expect: usize, line: usize) -> Result<Vec<f64>> {
    if fields.len() != expect {
        return Err(Error::format(
            "model",
            line,
            format!("expected {expect} values, found {}", fields.len()),
        ));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| Error::format("model", line, format!("bad number `{f}`")))
        })
        .collect()
}

pub fn read_model<R: BufRead>(reader: R) -> Result<ModelParams> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, line)) => Ok((n, line?)),
            None => Err(Error::format(
                "model",
                0,
                format!("truncated before {what}"),
            )),
        }
    };

    let (n, magic) = next("header")?;
    if magic.trim() != MODEL_MAGIC {
        return Err(Error::format(
            "model",
            n,
            format!("expected `{MODEL_MAGIC}`"),
        ));
    }

    let (n, shape) = next("shape")?;
    let fields: Vec<&str> = shape.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != "shape" {
        return Err(Error::format("model", n, "expected `shape M N K d L`"));
    }
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|f| {
            f.parse()
                .map_err(|_| Error::format("model", n, format!("bad count `{f}`")))
        })
        .collect::<Result<_>>()?;
    let (m, items, k, d, layers) = (dims[0], dims[1], dims[2], dims[3], dims[4]);

    let (n, variant_text) = next("variant")?;
    let mut config = RunConfig::default();
    let mut parts = variant_text.split_whitespace();
    if parts.next() != Some("variant") {
        return Err(Error::format("model", n, "expected `variant ...`"));
    }
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::format("model", n, format!("bad variant field `{part}`")))?;
        config
            .set(key, value)
            .map_err(|e| Error::format("model", n, e.to_string()))?;
    }

    let (n, w_line) = next("weights")?;
    let fields: Vec<&str> = w_line.split_whitespace().collect();
    if fields.first() != Some(&"w") {
        return Err(Error::format("model", n, "expected `w ...`"));
    }
    let behavior_weights = floats(&fields[1..], k, n)?;

    let mut read_table = |tag: &str, rows: usize| -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            let (n, line) = next(tag)?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.first() != Some(&tag) {
                return Err(Error::format("model", n, format!("expected `{tag} ...`")));
            }
            data.extend(floats(&fields[1..], d, n)?);
        }
        Ok(Matrix::from_vec(rows, d, data))
    };
    let user_emb = read_table("p", m)?;
    let item_emb = read_table("q", items)?;

    let (n, end) = next("end")?;
    if end.trim() != "end" {
        return Err(Error::format("model", n, "expected `end`"));
    }
    if d == 0 || layers == 0 || k == 0 {
        return Err(Error::format(
            "model",
            2,
            "dim, layers and behaviors must be positive",
        ));
    }
    Ok(ModelParams {
        user_emb,
        item_emb,
        behavior_weights,
        layers,
        variant: config.variant,
    })
}

/// Selected users and items for embedding export.
#[derive(Clone, Debug, Default)]
pub struct ExportSelection {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    /// Keep only the first `dims` coordinates.
    pub dims: Option<usize>,
}

fn file_stem(raw: &str) -> String {
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_rows(path: &Path, rows: &[(String, &[f64])], dims: Option<usize>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (label, values) in rows {
        let keep = dims.map_or(values.len(), |d| d.min(values.len()));
        writeln!(out, "{label}\t{}", join(&values[..keep]))?;
    }
    out.flush()?;
    Ok(())
}

/// Writes one text matrix per selected entity with rows `global`, one row
/// per behavior, and `final` (the target-task embedding for users).
/// Returns the written paths; an empty selection writes nothing.
pub fn export_embeddings(
    params: &ModelParams,
    dataset: &Dataset,
    selection: &ExportSelection,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if selection.users.is_empty() && selection.items.is_empty() {
        return Ok(Vec::new());
    }
    params.check_compatible(dataset)?;
    std::fs::create_dir_all(out_dir)?;
    let graphs = GraphSet::build(dataset);
    let counts = InteractionCounts::from_dataset(dataset);
    let trace = forward(params, &graphs, &counts, &params.variant, None);
    let m = dataset.num_users();
    let target = dataset.target();
    let mut written = Vec::new();

    let mut emit = |kind: &str, raw: &str, stacked_row: usize, final_row: &[f64]| -> Result<()> {
        let mut rows: Vec<(String, &[f64])> =
            vec![("global".to_owned(), trace.global_emb.row(stacked_row))];
        for (label, prop) in dataset.behaviors.iter().zip(&trace.behaviors) {
            rows.push((label.clone(), prop.combined.row(stacked_row)));
        }
        rows.push(("final".to_owned(), final_row));
        let path = out_dir.join(format!("{kind}_{}.txt", file_stem(raw)));
        write_rows(&path, &rows, selection.dims)?;
        written.push(path);
        Ok(())
    };
    for &u in &selection.users {
        emit(
            "user",
            &dataset.user_ids[u],
            u,
            trace.user_final[target].row(u),
        )?;
    }
    for &i in &selection.items {
        emit("item", &dataset.item_ids[i], m + i, trace.item_final.row(i))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UserAggregation;

    #[test]
    fn model_round_trip_is_exact() {
        let mut params = ModelParams::init(3, 4, 2, 5, 2, 17).unwrap();
        params.behavior_weights = vec![0.1 + 0.2, -1e-300];
        params.variant.user_agg = UserAggregation::Linear;
        let mut buf = Vec::new();
        write_model(&params, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn truncated_model_is_an_error() {
        let params = ModelParams::init(2, 2, 1, 2, 1, 0).unwrap();
        let mut buf = Vec::new();
        write_model(&params, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            read_model(cut.as_bytes()),
            Err(Error::Format { .. })
        ));
        assert!(read_model("nonsense\n".as_bytes()).is_err());
    }

    #[test]
    fn file_stems_are_sanitized() {
        assert_eq!(file_stem("a/b c"), "a_b_c");
    }
}
