//! Task vectors and the operators that inject them.
//!
//! A *task vector set* is the column of residual states a sequence leaves
//! at one designated separator position, one vector per layer. Two
//! injection operators put such vectors back into a forward pass:
//!
//! * **Interpolation** — `f(h, v) = (1 - gamma) * h + gamma * v`, the
//!   plain mixing used by single-vector task-arithmetic baselines
//!   (`gamma = 0.5` adds, `gamma = 1.0` replaces).
//! * **Projected anchoring** — rescale the vector to the layer's mean
//!   state norm, project it onto the live state, and add the projection
//!   scaled by a per-layer schedule:
//!
//!   ```text
//!   v_bar = mu(l) * v / ||v||
//!   p     = (<v_bar, h> / (||h||^2 + eps)) * h
//!   h'    = h + gamma(l) * p
//!   ```
//!
//!   Because `p` is collinear with `h`, anchoring only rescales the live
//!   state — `h' = s * h` with `s = 1 + gamma * <v_bar, h> / (||h||^2 + eps)`
//!   — and never rotates it.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HiddenStateRecord, LayerHook, ModelConfig, Weights};
use crate::prompt::SequenceLayout;
use crate::retrieval::DemoId;

// ---------------------------------------------------------------------------
// Task vectors
// ---------------------------------------------------------------------------

/// Residual states captured at one extraction anchor, for every layer
/// `1..=L` of the producing model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorSet {
    pub demo_id: DemoId,
    /// Row `l - 1` is the layer-`l` vector.
    vectors: Array2<f64>,
}

impl TaskVectorSet {
    pub fn new(demo_id: DemoId, vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::Parameter("a task vector set cannot be empty".into()));
        }
        Ok(TaskVectorSet { demo_id, vectors })
    }

    pub fn num_layers(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Layer-`l` vector, `l` in `1..=num_layers`.
    pub fn vector(&self, layer: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(layer - 1)
    }

    // -- persistence ---------------------------------------------------------
    //
    // Same shape as a weight checkpoint: a length-prefixed JSON header
    // `{demo_id, num_layers, dim}` followed by `num_layers * dim`
    // little-endian f64 values, layers in order.

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        #[derive(Serialize)]
        struct Header {
            demo_id: DemoId,
            num_layers: usize,
            dim: usize,
        }
        let header = serde_json::to_vec(&Header {
            demo_id: self.demo_id,
            num_layers: self.num_layers(),
            dim: self.dim(),
        })?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for &x in self.vectors.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            demo_id: DemoId,
            num_layers: usize,
            dim: usize,
        }
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
        file.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Data(format!("malformed task vector header: {e}")))?;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        let expect = header.num_layers * header.dim * 8;
        if payload.len() != expect {
            return Err(Error::Data(format!(
                "task vector payload holds {} bytes, header describes {expect}",
                payload.len()
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let vectors = Array2::from_shape_vec((header.num_layers, header.dim), data)
            .expect("shape matches payload");
        TaskVectorSet::new(header.demo_id, vectors)
    }
}

/// Run a sequence without hooks and read its task vectors off the layout's
/// extraction anchor (the trailing separator). `demo_id` identifies whose
/// vectors these are — for extraction sequences, the main demonstration
/// sitting in the test slot.
pub fn extract_task_vectors(
    weights: &Weights,
    layout: &SequenceLayout,
    demo_id: DemoId,
) -> Result<TaskVectorSet> {
    let record = weights.forward(layout, &[])?;
    let anchor = layout.test_separator;
    let num_layers = record.num_layers();
    let mut vectors = Array2::zeros((num_layers, weights.config.model_dim));
    for layer in 1..=num_layers {
        vectors.row_mut(layer - 1).assign(&record.state(layer, anchor));
    }
    TaskVectorSet::new(demo_id, vectors)
}

// ---------------------------------------------------------------------------
// Strength schedule
// ---------------------------------------------------------------------------

/// Per-layer anchoring strength, indexed by layer `1..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    per_layer: Vec<f64>,
}

impl GammaSchedule {
    /// Validate and wrap explicit per-layer strengths (each in `[0, 2]`).
    pub fn from_values(per_layer: Vec<f64>) -> Result<Self> {
        if per_layer.is_empty() {
            return Err(Error::Parameter("gamma schedule must cover at least one layer".into()));
        }
        for (i, &g) in per_layer.iter().enumerate() {
            if !(0.0..=2.0).contains(&g) {
                return Err(Error::Parameter(format!(
                    "gamma for layer {} is {g}, outside [0, 2]",
                    i + 1
                )));
            }
        }
        Ok(GammaSchedule { per_layer })
    }

    /// The default band profile: full strength (1.0) on the first and last
    /// quarter of layers (rounded up), reduced strength (0.2) on the
    /// middle band. For 32 layers that is 1.0 on layers 1-8 and 25-32 and
    /// 0.2 on layers 9-24.
    pub fn banded(num_layers: usize) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Parameter("gamma schedule must cover at least one layer".into()));
        }
        let edge = num_layers.div_ceil(4);
        let per_layer = (1..=num_layers)
            .map(|l| if l <= edge || l > num_layers - edge { 1.0 } else { 0.2 })
            .collect();
        Ok(GammaSchedule { per_layer })
    }

    /// A constant schedule; `uniform(L, 0.0)` turns anchoring off entirely.
    pub fn uniform(num_layers: usize, gamma: f64) -> Result<Self> {
        Self::from_values(vec![gamma; num_layers])
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    /// Strength for layer `l` in `1..=num_layers`.
    pub fn gamma(&self, layer: usize) -> f64 {
        self.per_layer[layer - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.per_layer
    }
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

/// Mean L2 norm of the rows of a state matrix — the calibration scale
/// `mu(l)`.
pub fn mean_row_norm(states: &Array2<f64>) -> f64 {
    let rows = states.nrows();
    let total: f64 = (0..rows).map(|t| norm(&states.row(t))).sum();
    total / rows as f64
}

/// `mu(l)` of a recorded forward pass at one layer.
pub fn mean_hs_norm(record: &HiddenStateRecord, layer: usize) -> Result<f64> {
    if layer > record.num_layers() {
        return Err(Error::Parameter(format!(
            "layer {layer} out of range for a {}-layer record",
            record.num_layers()
        )));
    }
    Ok(mean_row_norm(&record.states[layer]))
}

fn norm(v: &ArrayView1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Rescale `v` to length `mu` without changing its direction. A zero-norm
/// `v` has no direction and is an error, not a silent skip.
pub fn calibrate_norm(v: &ArrayView1<f64>, mu: f64) -> Result<Array1<f64>> {
    if !(mu >= 0.0) {
        return Err(Error::Parameter(format!("calibration norm must be non-negative, got {mu}")));
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::DegenerateVector(
            "cannot calibrate a zero-norm task vector".into(),
        ));
    }
    Ok(v.mapv(|x| x * (mu / n)))
}

/// Project `v_bar` onto the direction of the live state `h`:
/// `p = (<v_bar, h> / (||h||^2 + eps)) * h`. The epsilon keeps a zero
/// state from dividing by zero; the result is always collinear with `h`.
pub fn project(v_bar: &ArrayView1<f64>, h: &ArrayView1<f64>, epsilon: f64) -> Array1<f64> {
    let coef = v_bar.dot(h) / (h.dot(h) + epsilon);
    h.mapv(|x| x * coef)
}

/// Anchor: `h' = h + gamma * p`. `gamma = 0` returns `h` bit for bit.
pub fn anchor(h: &ArrayView1<f64>, p: &ArrayView1<f64>, gamma: f64) -> Array1<f64> {
    if gamma == 0.0 {
        return h.to_owned();
    }
    h.iter().zip(p.iter()).map(|(&hx, &px)| hx + gamma * px).collect()
}

/// Interpolate: `f(h, v) = (1 - gamma) * h + gamma * v` with
/// `gamma in [0, 1]`. The endpoints reproduce `h` and `v` bit for bit.
pub fn inject_interpolate(
    h: &ArrayView1<f64>,
    v: &ArrayView1<f64>,
    gamma: f64,
) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!(
            "interpolation strength must lie in [0, 1], got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(h.to_owned());
    }
    if gamma == 1.0 {
        return Ok(v.to_owned());
    }
    Ok(h.iter().zip(v.iter()).map(|(&hx, &vx)| (1.0 - gamma) * hx + gamma * vx).collect())
}

// ---------------------------------------------------------------------------
// Injection plans
// ---------------------------------------------------------------------------

/// Where the calibration scale `mu(l)` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanNormSource {
    /// Mean state norm of the live sequence at the moment the hook fires
    /// (the default).
    LiveSequence,
    /// Fixed per-layer values from an earlier calibration pass, index
    /// `l - 1`.
    Fixed(Vec<f64>),
}

/// Which layers a target covers.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSelection {
    /// Every layer `1..=L`.
    All,
    /// A single layer.
    Single(usize),
    /// An explicit set of layers.
    Set(BTreeSet<usize>),
}

impl LayerSelection {
    pub fn contains(&self, layer: usize) -> bool {
        match self {
            LayerSelection::All => true,
            LayerSelection::Single(l) => *l == layer,
            LayerSelection::Set(set) => set.contains(&layer),
        }
    }

    fn validate(&self, num_layers: usize) -> Result<()> {
        let check = |l: usize| {
            if l == 0 || l > num_layers {
                Err(Error::Plan(format!(
                    "layer {l} outside the model's 1..={num_layers} range"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSelection::All => Ok(()),
            LayerSelection::Single(l) => check(*l),
            LayerSelection::Set(set) => {
                if set.is_empty() {
                    return Err(Error::Plan("empty layer set in injection target".into()));
                }
                set.iter().try_for_each(|&l| check(l))
            }
        }
    }
}

/// The operator a plan applies at its targets.
#[derive(Debug, Clone, PartialEq)]
pub enum InjectionOperator {
    /// `f(h, v) = (1 - gamma) * h + gamma * v` with the layer's vector.
    Interpolate { gamma: f64 },
    /// Norm-calibrated projected anchoring with a per-layer schedule.
    ProjectAnchor {
        schedule: GammaSchedule,
        epsilon: f64,
        norm_source: MeanNormSource,
    },
}

/// One anchoring target: a position, the layers to touch there, and the
/// task vectors to use.
#[derive(Debug, Clone)]
pub struct InjectionTarget {
    pub position: usize,
    pub layers: LayerSelection,
    pub vectors: TaskVectorSet,
}

/// A full injection plan: one operator applied at a set of disjoint
/// positions.
///
/// The canonical shapes are: interpolation at exactly one
/// `(test separator, final layer)` target for the task-arithmetic
/// baselines, and projected anchoring at every demonstration separator
/// across all layers for anchored runs. The plan type itself also admits
/// the ablation hybrids (interpolation at demonstration separators), so
/// pipelines — not this type — enforce which shape they use.
#[derive(Debug, Clone)]
pub struct InjectionPlan {
    pub operator: InjectionOperator,
    pub targets: Vec<InjectionTarget>,
}

impl InjectionPlan {
    /// Validate the plan against the model shape and the layout it will
    /// run on.
    pub fn validate(&self, config: &ModelConfig, layout: &SequenceLayout) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Plan("injection plan has no targets".into()));
        }
        match &self.operator {
            InjectionOperator::Interpolate { gamma } => {
                if !(0.0..=1.0).contains(gamma) {
                    return Err(Error::Parameter(format!(
                        "interpolation strength must lie in [0, 1], got {gamma}"
                    )));
                }
            }
            InjectionOperator::ProjectAnchor { schedule, epsilon, norm_source } => {
                if schedule.num_layers() != config.num_layers {
                    return Err(Error::Plan(format!(
                        "gamma schedule covers {} layers, model has {}",
                        schedule.num_layers(),
                        config.num_layers
                    )));
                }
                if !(*epsilon > 0.0) {
                    return Err(Error::Parameter(format!(
                        "anchoring epsilon must be positive, got {epsilon}"
                    )));
                }
                if let MeanNormSource::Fixed(mus) = norm_source {
                    if mus.len() != config.num_layers {
                        return Err(Error::Plan(format!(
                            "fixed norm table covers {} layers, model has {}",
                            mus.len(),
                            config.num_layers
                        )));
                    }
                }
            }
        }
        let mut seen = BTreeSet::new();
        for target in &self.targets {
            if target.position >= layout.tokens.len() {
                return Err(Error::Plan(format!(
                    "target position {} outside the {}-token sequence",
                    target.position,
                    layout.tokens.len()
                )));
            }
            if !seen.insert(target.position) {
                return Err(Error::Plan(format!(
                    "duplicate target position {}; targets must be disjoint",
                    target.position
                )));
            }
            target.layers.validate(config.num_layers)?;
            if target.vectors.num_layers() != config.num_layers
                || target.vectors.dim() != config.model_dim
            {
                return Err(Error::Plan(format!(
                    "task vectors for position {} are {}x{}, model needs {}x{}",
                    target.position,
                    target.vectors.num_layers(),
                    target.vectors.dim(),
                    config.num_layers,
                    config.model_dim
                )));
            }
        }
        Ok(())
    }

    /// Positions this plan touches, ascending.
    pub fn positions(&self) -> Vec<usize> {
        let mut ps: Vec<usize> = self.targets.iter().map(|t| t.position).collect();
        ps.sort_unstable();
        ps
    }
}

// ---------------------------------------------------------------------------
// The plan hook
// ---------------------------------------------------------------------------

/// [`LayerHook`] that executes an [`InjectionPlan`]. Build with
/// [`make_hook`], which validates the plan first.
pub struct PlanHook {
    plan: InjectionPlan,
}

impl PlanHook {
    pub fn plan(&self) -> &InjectionPlan {
        &self.plan
    }
}

/// Validate a plan against the model and layout it will run on and wrap it
/// as a hook.
pub fn make_hook(
    plan: InjectionPlan,
    config: &ModelConfig,
    layout: &SequenceLayout,
) -> Result<PlanHook> {
    plan.validate(config, layout)?;
    Ok(PlanHook { plan })
}

impl LayerHook for PlanHook {
    fn writable_positions(&self, layer: usize) -> Vec<usize> {
        self.plan
            .targets
            .iter()
            .filter(|t| t.layers.contains(layer))
            .map(|t| t.position)
            .collect()
    }

    fn apply(
        &self,
        layer: usize,
        states: &mut Array2<f64>,
        _layout: &SequenceLayout,
    ) -> Result<()> {
        let active: Vec<&InjectionTarget> =
            self.plan.targets.iter().filter(|t| t.layers.contains(layer)).collect();
        if active.is_empty() {
            return Ok(());
        }
        match &self.plan.operator {
            InjectionOperator::Interpolate { gamma } => {
                for target in active {
                    let v = target.vectors.vector(layer);
                    let new = inject_interpolate(&states.row(target.position), &v, *gamma)?;
                    states.row_mut(target.position).assign(&new);
                }
            }
            InjectionOperator::ProjectAnchor { schedule, epsilon, norm_source } => {
                let gamma = schedule.gamma(layer);
                // mu is computed once per layer, before any target is
                // touched; targets are distinct positions, so the update
                // order cannot matter.
                let mu = match norm_source {
                    MeanNormSource::LiveSequence => mean_row_norm(states),
                    MeanNormSource::Fixed(mus) => mus[layer - 1],
                };
                for target in active {
                    let v = target.vectors.vector(layer);
                    let v_norm = norm(&v);
                    if v_norm == 0.0 {
                        return Err(Error::DegenerateVector(format!(
                            "task vector of demo {} at layer {layer} has zero norm",
                            target.vectors.demo_id
                        )));
                    }
                    let h = states.row(target.position);
                    // Same arithmetic as calibrate_norm -> project -> anchor,
                    // with the calibration scale folded in after the raw dot
                    // product. Folding late keeps one exactness guarantee:
                    // a vector whose raw dot with h is exactly zero leaves
                    // the state untouched, bit for bit.
                    let raw_dot = v.dot(&h);
                    let coef = gamma * (mu / v_norm) * raw_dot / (h.dot(&h) + epsilon);
                    if coef == 0.0 {
                        continue;
                    }
                    let new: Array1<f64> = h.mapv(|x| x + coef * x);
                    states.row_mut(target.position).assign(&new);
                }
            }
        }
        Ok(())
    }
}
