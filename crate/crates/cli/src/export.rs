//! The `export` command: images and tables from a saved checkpoint.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pppc_core::checkpoint::{self, write_atomic};
use pppc_core::metrics::{entropy_map, entropy_to_gray};
use pppc_core::synthdata::{write_pgm, LabeledGrid};
use pppc_core::train::{argmax_rows, predict, Datasets, TrainState};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    /// Per-pixel prediction entropy and error masks as PGM.
    EntropyMaps,
    /// Per-pixel Gaussian embeddings of the target evaluation grids as CSV.
    Embeddings,
    /// Evaluation grids as PPM with ground-truth and predicted label PGMs.
    Grids,
}

impl fmt::Display for ExportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportKind::EntropyMaps => "entropy-maps",
            ExportKind::Embeddings => "embeddings",
            ExportKind::Grids => "grids",
        })
    }
}

impl FromStr for ExportKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "entropy-maps" => Ok(ExportKind::EntropyMaps),
            "embeddings" => Ok(ExportKind::Embeddings),
            "grids" => Ok(ExportKind::Grids),
            _ => Err(CliError::usage(format!(
                "unknown export `{s}`; expected entropy-maps, embeddings or grids"
            ))),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> CliResult<TrainState> {
    checkpoint::load(path).map_err(|e| CliError::usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn pgm(values: &[u8], g: &LabeledGrid) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_pgm(&mut buf, g.width, g.height, values)?;
    Ok(buf)
}

fn splits(data: &Datasets) -> [(&'static str, &[LabeledGrid]); 2] {
    [("source", &data.source_eval), ("target", &data.target_eval)]
}

/// Files for `kind` from `state`, as (relative name, bytes).
pub fn render(state: &TrainState, kind: ExportKind) -> CliResult<Vec<(String, Vec<u8>)>> {
    let data = Datasets::generate(&state.config)?;
    let params = state.eval_params();
    let k = state.config.classes();
    let mut files = Vec::new();
    match kind {
        ExportKind::EntropyMaps => {
            let max = (k as f64).ln();
            for (split, grids) in splits(&data) {
                for (i, g) in grids.iter().enumerate() {
                    let out = predict(params, g, false)?;
                    let ent = entropy_map(&out.logits, k)?;
                    files.push((
                        format!("entropy_{split}_{i:02}.pgm"),
                        pgm(&entropy_to_gray(&ent, max), g)?,
                    ));
                    let wrong: Vec<u8> = argmax_rows(&out.logits, k)
                        .iter()
                        .zip(&g.labels)
                        .map(|(&p, &t)| if p == t as usize { 0 } else { 255 })
                        .collect();
                    files.push((format!("errors_{split}_{i:02}.pgm"), pgm(&wrong, g)?));
                }
            }
        }
        ExportKind::Embeddings => {
            let d = state.config.model.embed_dim;
            let mut s = String::from("grid,y,x,label,pred,raw_norm");
            for j in 0..d {
                let _ = write!(s, ",mean_{j}");
            }
            for j in 0..d {
                let _ = write!(s, ",var_{j}");
            }
            s.push('\n');
            for (i, g) in data.target_eval.iter().enumerate() {
                let out = predict(params, g, true)?;
                let pred = argmax_rows(&out.logits, k);
                let emb = out.embeddings.expect("embeddings requested");
                for p in 0..g.labels.len() {
                    let _ = write!(
                        s,
                        "{i},{},{},{},{},{}",
                        p / g.width,
                        p % g.width,
                        g.labels[p],
                        pred[p],
                        emb.raw_norm[p]
                    );
                    for v in &emb.mean[p * d..(p + 1) * d] {
                        let _ = write!(s, ",{v}");
                    }
                    for v in &emb.var[p * d..(p + 1) * d] {
                        let _ = write!(s, ",{v}");
                    }
                    s.push('\n');
                }
            }
            files.push(("embeddings_target.csv".to_string(), s.into_bytes()));
        }
        ExportKind::Grids => {
            for (split, grids) in splits(&data) {
                for (i, g) in grids.iter().enumerate() {
                    let mut ppm = Vec::new();
                    g.write_ppm(&mut ppm)?;
                    files.push((format!("{split}_{i:02}.ppm"), ppm));
                    let mut labels = Vec::new();
                    g.write_label_pgm(&mut labels)?;
                    files.push((format!("{split}_{i:02}_labels.pgm"), labels));
                    let out = predict(params, g, false)?;
                    let pred: Vec<u8> = argmax_rows(&out.logits, k).iter().map(|&p| p as u8).collect();
                    files.push((format!("{split}_{i:02}_pred.pgm"), pgm(&pred, g)?));
                }
            }
        }
    }
    Ok(files)
}

/// Writes the export next to the checkpoint unless `out` is given.
pub fn cmd_export(kind: ExportKind, ckpt: &Path, out: Option<&Path>) -> CliResult<Vec<PathBuf>> {
    let state = load_checkpoint(ckpt)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(format!("export-{kind}")),
    };
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (name, bytes) in render(&state, kind)? {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
