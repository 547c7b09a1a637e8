//! Counts retained cell tapes and solver vectors for implicit and unrolled training steps.

use std::fmt::Write as _;

use crate::autodiff::{peak_tapes, reset_peak_tapes};
use crate::cell::{Activation, DropoutMask, MdeqParams, ModelConfig};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::solver::SolverConfig;
use crate::tensor::Tensor;
use crate::train::{forward_backward, Mode, Targets};

pub const MEM_HEADER: &str = "mode,setting,tapes,solver_vectors,param_bytes";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemRow {
    pub mode: &'static str,
    /// Forward iteration cap (implicit) or depth (unrolled).
    pub setting: usize,
    /// Peak simultaneously retained cell tapes during the step.
    pub tapes: usize,
    pub solver_vectors: usize,
    pub param_bytes: usize,
}

pub fn mem_csv(rows: &[MemRow]) -> String {
    let mut s = String::from(MEM_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.mode, r.setting, r.tapes, r.solver_vectors, r.param_bytes);
    }
    s
}

/// One training step per setting. Implicit steps run exactly `T_f` forward
/// iterations and the configured backward solve; unrolled steps record
/// `depth` cell applications.
#[allow(clippy::too_many_arguments)]
pub fn mem_audit<T: Scalar>(
    params: &MdeqParams<T>,
    model: &ModelConfig,
    images: &Tensor<T>,
    targets: &Targets,
    backward: SolverConfig,
    memory: usize,
    settings: &[usize],
    act: Activation,
) -> Result<Vec<MemRow>> {
    let param_bytes = params.count() * std::mem::size_of::<T>();
    let mask = DropoutMask::identity();
    let mut rows = Vec::with_capacity(2 * settings.len());
    for &t_f in settings {
        let forward = SolverConfig::new(f64::MIN_POSITIVE, t_f, memory)?;
        reset_peak_tapes();
        let out = forward_backward(
            params,
            model,
            images,
            targets,
            &mask,
            act,
            Mode::Implicit { forward, backward },
        )?;
        rows.push(MemRow {
            mode: "implicit",
            setting: t_f,
            tapes: peak_tapes(),
            solver_vectors: out.solver_vectors,
            param_bytes,
        });
    }
    for &depth in settings {
        reset_peak_tapes();
        let out = forward_backward(params, model, images, targets, &mask, act, Mode::Unrolled { depth })?;
        rows.push(MemRow {
            mode: "unrolled",
            setting: depth,
            tapes: peak_tapes(),
            solver_vectors: out.solver_vectors,
            param_bytes,
        });
    }
    Ok(rows)
}
