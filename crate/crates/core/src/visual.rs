//! Visual objects: per-region appearance and box geometry projected to `d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFeature {
    pub appearance: Vec<f64>,
    /// Normalized `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
}

impl RegionFeature {
    pub fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2] = self.bbox;
        let in_unit = self.bbox.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit || x1 >= x2 || y1 >= y2 {
            return Err(Error::Invalid(format!("malformed box {:?}", self.bbox)));
        }
        if !self.appearance.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("non-finite appearance feature".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VisualParams {
    /// `d x (appearance_dim + 4)`
    pub w_enc: ParamId,
    pub b_enc: ParamId,
    pub appearance_dim: usize,
    pub max_objects: usize,
    pub use_boxes: bool,
}

impl VisualParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        d: usize,
        appearance_dim: usize,
        max_objects: usize,
        use_boxes: bool,
    ) -> Self {
        let fan_in = appearance_dim + 4;
        let w_enc = store.add("visual.w_enc", params::linear_init(rng, d, fan_in));
        let b_enc = store.add("visual.b_enc", Tensor::zeros(d, 1));
        Self { w_enc, b_enc, appearance_dim, max_objects, use_boxes }
    }
}

/// `v_i = W_enc [a_i ; p_i] + b_enc`, one column per region in input order.
/// With `use_boxes` off the geometry rows are zeroed.
pub fn encode_objects(tape: &mut Tape, p: &VisualParams, regions: &[RegionFeature]) -> Result<Var> {
    let n = regions.len();
    if n < 2 || n > p.max_objects {
        return Err(Error::Invalid(format!("{n} objects outside [2, {}]", p.max_objects)));
    }
    let rows = p.appearance_dim + 4;
    let mut x = Tensor::zeros(rows, n);
    for (i, region) in regions.iter().enumerate() {
        region.validate()?;
        if region.appearance.len() != p.appearance_dim {
            return Err(Error::shape(
                "encode_objects",
                format!("appearance has {} values, expected {}", region.appearance.len(), p.appearance_dim),
            ));
        }
        for (r, &v) in region.appearance.iter().enumerate() {
            x.set(r, i, v);
        }
        if p.use_boxes {
            for (k, &v) in region.bbox.iter().enumerate() {
                x.set(p.appearance_dim + k, i, v);
            }
        }
    }
    let x = tape.constant(x);
    let w = tape.param(p.w_enc);
    let b = tape.param(p.b_enc);
    let v = tape.matmul(w, x)?;
    tape.add(v, b)
}
