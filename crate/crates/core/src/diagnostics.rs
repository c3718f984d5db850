//! Measurement apparatus for training runs: per-layer output norms,
//! weight-row coherence, amplification profiles, and CSV export.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Euclidean norm over every element, plus the same norm divided by
/// `sqrt(D)` so tensors of different sizes are comparable. Accumulates
/// in 64-bit regardless of the element type. Non-finite inputs produce
/// non-finite stats; callers report them rather than erroring here.
pub fn output_norm_stats<E: Element>(x: &Tensor<E>) -> (f64, f64) {
    let sum_sq: f64 = x.data().iter().map(|&v| {
        let f = v.as_f64();
        f * f
    }).sum();
    let l2 = sum_sq.sqrt();
    let d = x.len().max(1) as f64;
    (l2, l2 / d.sqrt())
}

/// Largest absolute cosine between distinct rows of the weight tensor,
/// each output channel flattened to one row. Pairs involving a zero row
/// are skipped; a tensor with no nonzero rows is rejected. Returns 0
/// when no pair survives the skipping.
pub fn coherence<E: Element>(w: &Tensor<E>) -> Result<f64> {
    let rows = w.shape().m;
    let cols = w.shape().per_sample();
    if rows < 2 {
        return Err(Error::invalid(format!(
            "coherence needs at least two rows, got {rows}"
        )));
    }

    let mut unit = vec![0.0f64; rows * cols];
    let mut live = vec![false; rows];
    for i in 0..rows {
        let row = &w.data()[i * cols..(i + 1) * cols];
        let norm = row.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm > 0.0 {
            live[i] = true;
            for (dst, &src) in unit[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *dst = src.as_f64() / norm;
            }
        }
    }
    if live.iter().all(|&l| !l) {
        return Err(Error::invalid("coherence of an all-zero weight tensor"));
    }

    let mut gram = vec![0.0f64; rows * rows];
    f64::gemm(
        rows,
        cols,
        rows,
        1.0,
        &unit,
        cols as isize,
        1,
        &unit,
        1,
        cols as isize,
        0.0,
        &mut gram,
        rows as isize,
        1,
    );

    let mut best = 0.0f64;
    for i in 0..rows {
        if !live[i] {
            continue;
        }
        for j in (i + 1)..rows {
            if live[j] {
                best = best.max(gram[i * rows + j].abs());
            }
        }
    }
    Ok(best.min(1.0))
}

/// Layer-to-layer growth of normalized output norms over one recorded
/// snapshot. A zero norm makes the ratio into it undefined.
#[derive(Clone, Debug)]
pub struct AmplificationProfile {
    /// `ratios[l]` = norm of layer `l+1` over norm of layer `l`, `None`
    /// where the denominator is zero.
    pub ratios: Vec<Option<f64>>,
    /// Geometric mean of the defined ratios, `None` if none are defined.
    pub growth_factor: Option<f64>,
    /// Whether the growth factor exceeds `1 + tau`.
    pub flagged: bool,
}

/// Builds the ratio profile from per-layer normalized norms, flagging
/// geometric growth above `1 + tau`.
pub fn amplification_profile(norms: &[f64], tau: f64) -> Result<AmplificationProfile> {
    if norms.len() < 2 {
        return Err(Error::invalid(format!(
            "amplification profile needs at least two layers, got {}",
            norms.len()
        )));
    }
    let ratios: Vec<Option<f64>> = norms
        .windows(2)
        .map(|pair| {
            if pair[0] == 0.0 {
                None
            } else {
                Some(pair[1] / pair[0])
            }
        })
        .collect();
    let defined: Vec<f64> = ratios.iter().flatten().copied().collect();
    let growth_factor = if defined.is_empty() {
        None
    } else {
        let log_mean = defined.iter().map(|r| r.ln()).sum::<f64>() / defined.len() as f64;
        Some(log_mean.exp())
    };
    let flagged = growth_factor.map_or(false, |g| g > 1.0 + tau);
    Ok(AmplificationProfile {
        ratios,
        growth_factor,
        flagged,
    })
}

/// Default flag threshold for [`amplification_profile`].
pub const GROWTH_FLAG_TAU: f64 = 0.05;

/// Norm and coherence readings for one layer at one instrumented step.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStat {
    pub name: String,
    pub norm: f64,
    pub nnorm: f64,
    /// Present only for layers that own a weight tensor.
    pub coherence: Option<f64>,
}

/// One instrumented training step: loss, learning rate, and the fixed
/// layer sequence's readings.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub layers: Vec<LayerStat>,
}

fn check_schema(records: &[DiagnosticsRecord]) -> Result<&[LayerStat]> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("no diagnostics records to export"))?;
    for r in records {
        if r.layers.len() != first.layers.len()
            || r.layers.iter().zip(&first.layers).any(|(a, b)| a.name != b.name)
        {
            return Err(Error::invalid(format!(
                "record at iteration {} does not match the layer schema of the first record",
                r.iteration
            )));
        }
    }
    Ok(&first.layers)
}

/// Renders records as CSV: `iteration,loss,lr` then `norm_<layer>`,
/// `nnorm_<layer>`, `coh_<layer>` per layer. Floats print in shortest
/// round-trip decimal form; absent coherence renders as an empty cell.
pub fn render_csv(records: &[DiagnosticsRecord]) -> Result<String> {
    let layers = check_schema(records)?;
    let mut out = String::new();
    out.push_str("iteration,loss,lr");
    for l in layers {
        let _ = write!(out, ",norm_{0},nnorm_{0},coh_{0}", l.name);
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{}", r.iteration, r.loss, r.lr);
        for l in &r.layers {
            let _ = write!(out, ",{},{}", l.norm, l.nnorm);
            match l.coherence {
                Some(c) => {
                    let _ = write!(out, ",{c}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes [`render_csv`] output to `path`.
pub fn export_csv(records: &[DiagnosticsRecord], path: &Path) -> Result<()> {
    let text = render_csv(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Checks that a CSV text follows the layout [`render_csv`] emits:
/// an `iteration,loss,lr` prefix, then `norm_*,nnorm_*,coh_*` triples
/// sharing each layer's name, and rows whose cells parse as numbers
/// (coherence cells may be empty). Returns the number of data rows.
pub fn validate_csv(text: &str) -> Result<usize> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty diagnostics file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 6 || cols[..3] != ["iteration", "loss", "lr"] {
        return Err(Error::format(format!(
            "diagnostics header starts '{}', expected iteration,loss,lr plus layer triples",
            header.chars().take(40).collect::<String>()
        )));
    }
    let layer_cols = &cols[3..];
    if layer_cols.len() % 3 != 0 {
        return Err(Error::format(format!(
            "{} layer columns do not form norm/nnorm/coh triples",
            layer_cols.len()
        )));
    }
    for triple in layer_cols.chunks(3) {
        let name = triple[0].strip_prefix("norm_").ok_or_else(|| {
            Error::format(format!("column '{}' is not a norm_ column", triple[0]))
        })?;
        if triple[1] != format!("nnorm_{name}") || triple[2] != format!("coh_{name}") {
            return Err(Error::format(format!(
                "columns for layer '{name}' are '{}', '{}', '{}'",
                triple[0], triple[1], triple[2]
            )));
        }
    }

    let mut rows = 0;
    for (li, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(Error::format(format!(
                "row {} has {} cells for {} columns",
                li + 1,
                cells.len(),
                cols.len()
            )));
        }
        cells[0].parse::<usize>().map_err(|_| {
            Error::format(format!("row {}: iteration '{}'", li + 1, cells[0]))
        })?;
        for (ci, cell) in cells.iter().enumerate().skip(1) {
            let is_coh = ci >= 3 && (ci - 3) % 3 == 2;
            if is_coh && cell.is_empty() {
                continue;
            }
            cell.parse::<f64>().map_err(|_| {
                Error::format(format!(
                    "row {}, column {}: '{cell}' is not numeric",
                    li + 1,
                    cols[ci]
                ))
            })?;
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::format("diagnostics file has no data rows"));
    }
    Ok(rows)
}
