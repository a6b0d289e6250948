//! Two-dimensional item-embedding export.
//!
//! Projects the real item rows of a trained model (padding and mask rows
//! excluded) onto their top two principal directions and writes them as CSV
//! with an `item_id,x,y` header, one row per catalog item.

use std::io::Write;

use crate::error::{CoreError, Result};
use crate::num::svd::{top2_svd_project, Projection, SvdConfig};
use crate::num::tensor::Tensor;
use crate::trainer::{Model, P_ITEM};

#[derive(Debug, Clone)]
pub struct ProjectionExport {
    pub rows: usize,
    pub spectrum: [f64; 2],
    pub converged: bool,
}

/// Projects rows `1..=num_items` of an embedding table onto the top two
/// singular directions.
pub fn project_rows(item_emb: &Tensor, num_items: usize) -> Result<Projection> {
    let dims = item_emb.dims();
    if dims.len() != 2 || dims[0] < num_items + 1 {
        return Err(CoreError::DimensionMismatch {
            what: "item embedding table".into(),
            expected: format!("at least {} rows", num_items + 1),
            actual: format!("{dims:?}"),
        });
    }
    let d = dims[1];
    let mut real = Tensor::zeros(&[num_items, d]);
    for i in 0..num_items {
        real.row_mut(i).copy_from_slice(item_emb.row(i + 1));
    }
    top2_svd_project(&real, &SvdConfig::default())
}

/// Writes the projection of a model's item embeddings as CSV.
pub fn export_projection(model: &Model, out: &mut impl Write) -> Result<ProjectionExport> {
    let proj = project_rows(model.params.value(P_ITEM), model.num_items)?;
    let io_err = |e: std::io::Error| CoreError::Io {
        path: "projection output".into(),
        source: e,
    };
    writeln!(out, "item_id,x,y").map_err(io_err)?;
    for i in 0..model.num_items {
        writeln!(
            out,
            "{},{},{}",
            i + 1,
            proj.coords.at2(i, 0),
            proj.coords.at2(i, 1)
        )
        .map_err(io_err)?;
    }
    Ok(ProjectionExport {
        rows: model.num_items,
        spectrum: proj.spectrum,
        converged: proj.converged,
    })
}
