//! Central finite-difference oracle for tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, RngState, Tensor, Var};
use crate::error::Result;
use crate::nn::{Ctx, Mode, ParamStore, RunningStats};

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|g_ad - g_fd| / max(1, |g_fd|)` over the probed coordinates.
    pub max_rel_err: f64,
    pub points: usize,
}

/// Compares tape gradients of the scalar built by `f` against central differences
/// at `points` randomly chosen input coordinates (all of them when there are fewer).
pub fn check<F>(inputs: &[Tensor], points: usize, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= points {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..points).map(|_| coords[rng.random_range(0..coords.len())]).collect()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut work = inputs.to_vec();
    for &(i, j) in &chosen {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + STEP;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - STEP;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * STEP);
        let ad = g.grad(vars[i]).map_or(0.0, |gr| gr[j]);
        max_rel_err = max_rel_err.max((ad - fd).abs() / fd.abs().max(1.0));
    }
    Ok(GradReport {
        max_rel_err,
        points: chosen.len(),
    })
}

/// Like [`check`], but differentiates with respect to the parameters in
/// `store`, which `f` reaches through the [`Ctx`]. Runs in training mode with
/// a fixed dropout stream, so dropout must be off or the masks repeat.
pub fn check_params<F>(
    store: &mut ParamStore,
    running: &[RunningStats],
    points: usize,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &mut Ctx) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(store, running, Mode::Train, RngState::new(seed)).frozen();
        let out = f(&mut g, &mut cx)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let mut cx = Ctx::new(store, running, Mode::Train, RngState::new(seed));
    let loss = f(&mut g, &mut cx)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = cx
        .leaves()
        .iter()
        .map(|l| l.and_then(|v| g.grad(v)).map(<[f64]>::to_vec))
        .collect();
    drop(cx);

    let coords: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<(usize, usize)> = (0..points.min(coords.len()))
        .map(|_| coords[rng.random_range(0..coords.len())])
        .collect();

    let ids: Vec<_> = store.ids().collect();
    let mut max_rel_err: f64 = 0.0;
    for &(i, j) in &chosen {
        let orig = store.get(ids[i]).value.data()[j];
        store.get_mut(ids[i]).value.data_mut()[j] = orig + STEP;
        let plus = eval(store)?;
        store.get_mut(ids[i]).value.data_mut()[j] = orig - STEP;
        let minus = eval(store)?;
        store.get_mut(ids[i]).value.data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * STEP);
        let ad = analytic[i].as_ref().map_or(0.0, |gr| gr[j]);
        max_rel_err = max_rel_err.max((ad - fd).abs() / fd.abs().max(1.0));
    }
    Ok(GradReport {
        max_rel_err,
        points: chosen.len(),
    })
}

/// Tensor of uniforms in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("consistent shape")
}
