//! Finite-difference gradient checks on the `f64` shadow tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Routing, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-3;

/// Steps tried in turn until no ELU input changes sign within the stencil.
const STEP_LADDER: [f64; 3] = [FD_STEP, FD_STEP / 16.0, FD_STEP / 256.0];

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Samples whose perturbation moved a max-pool or segment-max winner;
    /// those were differenced with the winners pinned to the unperturbed
    /// routing, i.e. on the smooth piece the analytic gradient belongs to.
    pub pinned_kinks: usize,
    /// Samples differenced with a step below [`FD_STEP`] because an ELU
    /// input crossed zero.
    pub shrunk_steps: usize,
    pub max_rel_err: f64,
    /// (tensor index, element index, analytic, numeric) of the worst sample.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Gradient magnitudes below this are compared on an absolute scale:
/// central differences of an O(1) loss carry ~1e-12 of rounding noise.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Relative error with a floor on the magnitude, see [`MAGNITUDE_FLOOR`].
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares reverse-mode gradients of `f` against central differences for
/// `samples` parameter entries, cycling over the tensors in `params`.
pub fn check_gradients<F>(params: &[Tensor<f64>], samples: usize, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>], routing: Option<&Routing>| -> Result<(f64, u64, u64)> {
        let mut tape = match routing {
            Some(r) => Tape::with_routing(r.clone()),
            None => Tape::new(),
        };
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape.value(loss).item(), tape.discrete_signature(), tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base_sig = tape.discrete_signature();
    let base_branch = tape.branch_signature();
    let routing = tape.routing();
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheck { checked: 0, pinned_kinks: 0, shrunk_steps: 0, max_rel_err: 0.0, worst: None };
    let nonempty: Vec<usize> = (0..params.len()).filter(|&i| !params[i].is_empty()).collect();
    for s in 0..if nonempty.is_empty() { 0 } else { samples } {
        let ti = nonempty[s % nonempty.len()];
        let ei = rng.gen_range(0..params[ti].len());
        let orig = params[ti].data()[ei];
        // central differences at h and h/2, Richardson-combined so the
        // O(h²) truncation term cancels; also reports whether the stencil
        // kept the routing and the ELU branches of the base point
        let mut diff = |h: f64, routing: Option<&Routing>| -> Result<(f64, bool, bool)> {
            let mut d = [0.0; 2];
            let (mut same_route, mut same_branch) = (true, true);
            for (slot, h) in [h, h / 2.0].into_iter().enumerate() {
                work[ti].data_mut()[ei] = orig + h;
                let (fp, rp, bp) = eval(&work, routing)?;
                work[ti].data_mut()[ei] = orig - h;
                let (fm, rm, bm) = eval(&work, routing)?;
                work[ti].data_mut()[ei] = orig;
                d[slot] = (fp - fm) / (2.0 * h);
                same_route &= rp == base_sig && rm == base_sig;
                same_branch &= bp == base_branch && bm == base_branch;
            }
            Ok(((4.0 * d[1] - d[0]) / 3.0, same_route, same_branch))
        };
        let mut step = STEP_LADDER[0];
        let (mut numeric, mut same_route, mut same_branch) = diff(step, None)?;
        for &h in &STEP_LADDER[1..] {
            if same_branch {
                break;
            }
            step = h;
            (numeric, same_route, same_branch) = diff(step, None)?;
            report.shrunk_steps += usize::from(h == STEP_LADDER[1]);
        }
        if !same_route {
            numeric = diff(step, Some(&routing))?.0;
            report.pinned_kinks += 1;
        }
        let analytic = grads.get(vars[ti]).expect("leaf gradient").data()[ei];
        let e = rel_err(analytic, numeric);
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((ti, ei, analytic, numeric));
        }
        report.checked += 1;
    }
    Ok(report)
}
