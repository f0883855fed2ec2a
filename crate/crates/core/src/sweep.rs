//! Diagnostic injection sweep: how far does a residual-stream write
//! travel?
//!
//! For every grid cell `(position, depth, breadth, strength)` the sweep
//! adds `strength * u` (one fixed unit vector `u` per sweep) to the state
//! at `position` after each of the `breadth` consecutive layers starting
//! at `depth`, then records the L2 change of the final token's final-layer
//! state against the clean run. Zero strength skips the write entirely, so
//! its rows are exactly zero; a final-layer write at any position other
//! than the final token cannot reach the readout at all (nothing mixes
//! positions after the last layer).

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LayerHook, Weights};
use crate::prompt::SequenceLayout;
use crate::{rng_stream, stream_tag};

/// Hook that adds `strength * direction` to one position after each layer
/// in `depth .. depth + breadth`.
pub struct UnitWriteHook {
    pub position: usize,
    /// First perturbed layer, 1-based.
    pub depth: usize,
    /// Number of consecutive perturbed layers.
    pub breadth: usize,
    pub strength: f64,
    pub direction: Array1<f64>,
}

impl LayerHook for UnitWriteHook {
    fn writable_positions(&self, layer: usize) -> Vec<usize> {
        if layer >= self.depth && layer < self.depth + self.breadth {
            vec![self.position]
        } else {
            Vec::new()
        }
    }

    fn apply(&self, layer: usize, states: &mut Array2<f64>, _layout: &SequenceLayout) -> Result<()> {
        if layer < self.depth || layer >= self.depth + self.breadth {
            return Ok(());
        }
        // strength == 0 must leave the run bit-identical, so skip the
        // write instead of adding a zero.
        if self.strength == 0.0 {
            return Ok(());
        }
        let mut row = states.row_mut(self.position);
        row.scaled_add(self.strength, &self.direction);
        Ok(())
    }
}

/// One sweep cell result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub position: usize,
    pub depth: usize,
    pub breadth: usize,
    pub strength: f64,
    /// `||h'_final - h_final||_2` at the final token, final layer.
    pub effect: f64,
}

/// The sweep's free axes. Depth and breadth are not free: every
/// `(depth, breadth)` with `depth + breadth - 1 <= num_layers` is visited,
/// so breadths never clamp at the top of the stack.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub positions: Vec<usize>,
    pub strengths: Vec<f64>,
}

impl SweepGrid {
    /// Default grid: first, middle, and last position of the sequence;
    /// strengths 0, 0.5, 1.
    pub fn default_for(layout: &SequenceLayout) -> Self {
        let last = layout.tokens.len() - 1;
        let mut positions = vec![0, last / 2, last];
        positions.dedup();
        SweepGrid { positions, strengths: vec![0.0, 0.5, 1.0] }
    }
}

/// The fixed unit perturbation direction shared by every cell of a sweep.
pub fn unit_direction(dim: usize, seed: u64) -> Result<Array1<f64>> {
    let mut rng = rng_stream(seed, stream_tag::SWEEP, 0);
    let v: Array1<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateVector("sweep direction drew a zero vector".into()));
    }
    Ok(v.mapv(|x| x / norm))
}

/// Run the sweep over a layout. Rows come back in a fixed order
/// (position-major, then depth, breadth, strength) so emitted CSVs are
/// byte-stable.
pub fn injection_sweep(
    weights: &Weights,
    layout: &SequenceLayout,
    grid: &SweepGrid,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let num_layers = weights.config.num_layers;
    let last = layout.tokens.len() - 1;
    for &p in &grid.positions {
        if p >= layout.tokens.len() {
            return Err(Error::Parameter(format!(
                "sweep position {p} outside the {}-token sequence",
                layout.tokens.len()
            )));
        }
    }
    let direction = unit_direction(weights.config.model_dim, seed)?;
    let clean = weights.forward(layout, &[])?;
    let clean_final = clean.final_state(last).to_owned();

    let mut cells = Vec::new();
    for &position in &grid.positions {
        for depth in 1..=num_layers {
            for breadth in 1..=(num_layers - depth + 1) {
                for &strength in &grid.strengths {
                    cells.push((position, depth, breadth, strength));
                }
            }
        }
    }
    cells
        .par_iter()
        .map(|&(position, depth, breadth, strength)| {
            let hook = UnitWriteHook {
                position,
                depth,
                breadth,
                strength,
                direction: direction.clone(),
            };
            let record = weights.forward(layout, &[&hook])?;
            let effect = (&record.final_state(last) - &clean_final)
                .mapv(|x| x * x)
                .sum()
                .sqrt();
            Ok(SweepRow { position, depth, breadth, strength, effect })
        })
        .collect()
}

/// Write sweep rows as CSV with a fixed header.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("position,depth,breadth,strength,effect\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.position, r.depth, r.breadth, r.strength, r.effect
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::prompt::{assemble_icl, Vocab};

    fn fixture(init_seed: u64) -> (Weights, SequenceLayout) {
        let config = ModelConfig {
            num_layers: 3,
            model_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            vocab_size: 64,
            max_seq_len: 32,
            init_seed,
            temperature: None,
            top_k: None,
        };
        let weights = init_model(&config).unwrap();
        let vocab = Vocab::partition(64, 0.5, true).unwrap();
        let layout = assemble_icl(&[], &[40, 41, 42, 43, 44], &vocab, 32).unwrap();
        (weights, layout)
    }

    #[test]
    fn grid_shape_and_order_are_fixed() {
        let (weights, layout) = fixture(1);
        let grid = SweepGrid { positions: vec![0, 5], strengths: vec![0.0, 1.0] };
        let rows = injection_sweep(&weights, &layout, &grid, 7).unwrap();
        // 2 positions x 6 (depth, breadth) pairs x 2 strengths; L = 3 gives
        // 3 + 2 + 1 = 6 depth/breadth combinations.
        assert_eq!(rows.len(), 24);
        assert!(rows.iter().all(|r| r.depth + r.breadth - 1 <= 3));
        let again = injection_sweep(&weights, &layout, &grid, 7).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn zero_strength_rows_are_exactly_zero() {
        let (weights, layout) = fixture(2);
        let grid = SweepGrid::default_for(&layout);
        for row in injection_sweep(&weights, &layout, &grid, 3).unwrap() {
            if row.strength == 0.0 {
                assert_eq!(row.effect, 0.0, "cell {row:?}");
            }
        }
    }

    #[test]
    fn final_layer_early_position_cannot_reach_the_readout() {
        let (weights, layout) = fixture(3);
        let grid = SweepGrid::default_for(&layout);
        let last = layout.tokens.len() - 1;
        for row in injection_sweep(&weights, &layout, &grid, 3).unwrap() {
            // A write after the last layer at any earlier position: no
            // attention follows, so the final token is bit-identical.
            if row.depth == 3 && row.breadth == 1 && row.position < last {
                assert_eq!(row.effect, 0.0, "cell {row:?}");
            }
        }
    }

    #[test]
    fn direct_final_write_effect_equals_strength() {
        let (weights, layout) = fixture(4);
        let last = layout.tokens.len() - 1;
        let grid = SweepGrid { positions: vec![last], strengths: vec![0.7] };
        let rows = injection_sweep(&weights, &layout, &grid, 5).unwrap();
        let direct = rows
            .iter()
            .find(|r| r.depth == 3 && r.breadth == 1)
            .expect("grid covers the final layer");
        // The write lands after the last layer: the state moves by exactly
        // strength * unit vector.
        assert!((direct.effect - 0.7).abs() < 1e-12, "effect {}", direct.effect);
    }

    #[test]
    fn effect_grows_with_breadth() {
        for seed in 0..3 {
            let (weights, layout) = fixture(100 + seed);
            let grid = SweepGrid::default_for(&layout);
            let rows = injection_sweep(&weights, &layout, &grid, 11).unwrap();
            for a in &rows {
                for b in &rows {
                    if a.position == b.position
                        && a.strength == b.strength
                        && a.depth == b.depth
                        && b.breadth == a.breadth + 1
                    {
                        assert!(
                            b.effect >= a.effect,
                            "seed {seed}: breadth {} -> {} shrank the effect ({} -> {}) at {a:?}",
                            a.breadth,
                            b.breadth,
                            a.effect,
                            b.effect
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn csv_is_stable() {
        let (weights, layout) = fixture(6);
        let grid = SweepGrid { positions: vec![0], strengths: vec![0.0] };
        let rows = injection_sweep(&weights, &layout, &grid, 1).unwrap();
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("position,depth,breadth,strength,effect\n"));
        assert_eq!(csv.lines().count(), rows.len() + 1);
        assert_eq!(csv, sweep_csv(&rows));
    }
}
