//! Sample grids: one row per subject, one column per requested similarity.

use crate::diffusion::{DenoiserModel, NoiseSchedule};
use crate::embedder::{EncoderCheckpoint, IdentityEmbedding};
use crate::error::{validation, Result};
use crate::image::ImageArray;
use crate::sampler::{ddim_sample_batch, SamplerConfig};

/// Tiles equally sized images into one image with `pad` pixels of white between cells.
pub fn tile_grid(rows: &[Vec<ImageArray>], pad: usize) -> Result<ImageArray> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| validation("grid needs at least one cell"))?;
    let [c, h, w] = first.dims();
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) || rows.iter().flatten().any(|i| i.dims() != [c, h, w]) {
        return Err(validation("grid rows must have equal length and equally sized cells"));
    }
    let gh = rows.len() * h + (rows.len() + 1) * pad;
    let gw = cols * w + (cols + 1) * pad;
    let mut out = ImageArray::new(c, gh, gw, vec![1.0; c * gh * gw])?;
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let (oy, ox) = (pad + ri * (h + pad), pad + ci * (w + pad));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(ch, oy + y, ox + x, img.at(ch, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per inquiry: the inquiry itself, then one sample per `m`, all at `cell` pixels.
/// Every cell of a row shares the seed `seed + row`, so columns differ only in `m`.
#[allow(clippy::too_many_arguments)]
pub fn sample_grid(
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    encoder: &EncoderCheckpoint<f32>,
    inquiries: &[ImageArray],
    m_values: &[f64],
    seed: u64,
    sampler: &SamplerConfig,
    cell: usize,
) -> Result<ImageArray> {
    if inquiries.is_empty() || m_values.is_empty() {
        return Err(validation("grid needs at least one inquiry and one m value"));
    }
    let r = encoder.config().resolution;
    let rows = inquiries
        .iter()
        .enumerate()
        .map(|(i, inq)| {
            let c_id: IdentityEmbedding = encoder.embed(&inq.resized(r, r))?;
            let conds: Vec<(&IdentityEmbedding, f64)> = m_values.iter().map(|&m| (&c_id, m)).collect();
            let seeds = vec![seed.wrapping_add(i as u64); m_values.len()];
            let mut row = vec![inq.resized(cell, cell)];
            for img in ddim_sample_batch(model, schedule, &conds, &seeds, sampler)? {
                row.push(img.resized(cell, cell).clamped());
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    tile_grid(&rows, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiling_layout() {
        let a = ImageArray::new(3, 2, 2, vec![-1.0; 12]).unwrap();
        let b = ImageArray::new(3, 2, 2, vec![0.0; 12]).unwrap();
        let g = tile_grid(&[vec![a.clone(), b.clone(), a.clone()], vec![b.clone(), a.clone(), b.clone()]], 1).unwrap();
        assert_eq!(g.dims(), [3, 2 * 2 + 3, 3 * 2 + 4]);
        assert_eq!(g.at(0, 0, 0), 1.0);
        assert_eq!(g.at(0, 1, 1), -1.0);
        assert_eq!(g.at(0, 1, 4), 0.0);
        assert_eq!(g.at(2, 4, 1), 0.0);
        assert!(tile_grid(&[vec![a.clone()], vec![a.clone(), b]], 1).is_err());
        assert!(tile_grid(&[], 1).is_err());
    }
}
