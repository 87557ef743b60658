use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ModelError, StateSpaceModel};
use crate::gaussian::{LinalgError, Matrix, Vector};

/// Latent path `x_1..x_T` and observations `y_1..y_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation<const NX: usize, const NY: usize> {
    pub states: Vec<Vector<NX>>,
    pub observations: Vec<Vector<NY>>,
}

fn draw<const D: usize>(
    mean: &Vector<D>,
    cov: &Matrix<D, D>,
    rng: &mut impl Rng,
    what: &'static str,
) -> Result<Vector<D>, ModelError> {
    let l = cov
        .cholesky()
        .ok_or(LinalgError::NotPositiveDefinite { what })?
        .l();
    let z = Vector::<D>::from_fn(|_, _| rng.sample(StandardNormal));
    Ok(mean + l * z)
}

/// Simulates `steps` transitions and observations forward from `x_0`.
pub fn generate<const NX: usize, const NY: usize, const NT: usize, M>(
    model: &M,
    theta: &Vector<NT>,
    steps: usize,
    seed: u64,
) -> Result<Simulation<NX, NY>, ModelError>
where
    M: StateSpaceModel<NX, NY, NT> + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = model.initial(theta)?;
    let mut x = match &init.cov {
        Some(cov) => draw(&init.mean, cov, &mut rng, "initial covariance")?,
        None => init.mean,
    };
    let mut states = Vec::with_capacity(steps);
    let mut observations = Vec::with_capacity(steps);
    for _ in 0..steps {
        let tr = model.transition(&x, theta)?;
        x = draw(&tr.mean, &tr.cov, &mut rng, "transition covariance")?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Divergence);
        }
        let obs = model.observation(&x, theta)?;
        let y = draw(obs.h(), obs.r(), &mut rng, "observation covariance")?;
        states.push(x);
        observations.push(y);
    }
    Ok(Simulation {
        states,
        observations,
    })
}
